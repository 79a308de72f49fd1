//! Deterministic synthetic networks, labeled images, and brute-force oracles.
//!
//! Everything here is generated from [`SplitMix64`] with documented
//! constants, so a given seed produces byte-identical manifests, blobs and
//! images on every platform. The blob detector's weights are hand-derived
//! rather than trained: its prediction and its true bounding box are known
//! analytically, which turns localization quality into a testable statement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::backtrack::{BacktrackConfig, ConvSpatialMode, Coord, EmptySetFallback};
use crate::error::{Error, Result};
use crate::forward::{ActivationTrace, LstmStepRecord, LstmWeights};
use crate::graph::{write_model, BlobRef, LayerOp, Manifest, ManifestLayer, NetworkGraph};
use crate::postprocess::BoundingBox;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// A generated model: manifest plus weight blobs, ready to build or write.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: Manifest,
    pub weights: BTreeMap<String, Tensor>,
}

impl Fixture {
    pub fn graph(&self) -> Result<NetworkGraph> {
        NetworkGraph::build(&self.manifest, self.weights.clone())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_model(dir, &self.manifest, &self.weights)
    }
}

/// One synthetic labeled image.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor,
    pub class: usize,
    pub bbox: BoundingBox,
}

fn blob_ref(name: &str, shape: Vec<usize>) -> (String, BlobRef) {
    (
        name.to_string(),
        BlobRef {
            file: format!("{}.f32", name.replace('.', "_")),
            shape,
        },
    )
}

fn random_blob(rng: &mut SplitMix64, shape: Vec<usize>, amplitude: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.next_symmetric(amplitude)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

// Blob detector geometry. The image is IMG x IMG with four QUAD x QUAD
// quadrants; classes are 0=top-left, 1=top-right, 2=bottom-left,
// 3=bottom-right. The blob is a Gaussian bump of peak 1.0; its annotated box
// is the pixel support above BLOB_CUTOFF (about 2.45 sigma, radius 9), and
// the center margin keeps that box strictly inside one quadrant. SMOOTH_BIAS
// sits above the worst-case 3x3 noise mean so the background dies at relu1.
const IMG: usize = 64;
const QUAD: usize = 32;
const BLOB_SIGMA: f64 = 4.0;
const BLOB_CUTOFF: f64 = 0.05;
const NOISE_AMPLITUDE: f32 = 0.1;
const SMOOTH_BIAS: f32 = -0.18;

/// Hand-built 4-class CNN that predicts which quadrant holds a bright blob,
/// plus a deterministic generator of labeled blob images.
#[derive(Debug, Clone)]
pub struct BlobDetector {
    pub fixture: Fixture,
    seed: u64,
}

/// Conv -> ReLU -> MaxPool -> Conv -> ReLU -> MaxPool -> Flatten -> FC -> Softmax.
///
/// The first conv is a 3x3 mean filter with a negative bias that zeroes the
/// background noise; the second smooths the surviving blob mass; the FC
/// routes each quadrant of the pooled 16x16 grid to one class with weight +1
/// inside and -1 outside, so positive evidence can only come from the
/// predicted quadrant.
pub fn make_blob_detector(seed: u64) -> BlobDetector {
    let mean9 = vec![1.0f32 / 9.0; 9];
    let mut fc = vec![0.0f32; 4 * 256];
    for class in 0..4 {
        for n in 0..256 {
            let (x, y) = (n / 16, n % 16);
            let q = usize::from(x >= 8) * 2 + usize::from(y >= 8);
            fc[class * 256 + n] = if q == class { 1.0 } else { -1.0 };
        }
    }
    let weights = BTreeMap::from([
        (
            "conv1.w".to_string(),
            Tensor::new(vec![1, 1, 3, 3], mean9.clone()).unwrap(),
        ),
        (
            "conv1.b".to_string(),
            Tensor::new(vec![1], vec![SMOOTH_BIAS]).unwrap(),
        ),
        (
            "conv2.w".to_string(),
            Tensor::new(vec![1, 1, 3, 3], mean9).unwrap(),
        ),
        ("conv2.b".to_string(), Tensor::zeros(vec![1])),
        ("fc.w".to_string(), Tensor::new(vec![4, 256], fc).unwrap()),
        ("fc.b".to_string(), Tensor::zeros(vec![4])),
    ]);
    let manifest = Manifest {
        name: "blob-detector".into(),
        input_shape: vec![1, IMG, IMG],
        class_count: Some(4),
        layers: vec![
            ManifestLayer::Input {
                name: "input".into(),
            },
            ManifestLayer::Conv {
                name: "conv1".into(),
                inputs: vec!["input".into()],
                kernel: 3,
                stride: 1,
                pad: 1,
                out_channels: 1,
                weights: "conv1.w".into(),
                bias: "conv1.b".into(),
            },
            ManifestLayer::Relu {
                name: "relu1".into(),
                inputs: vec!["conv1".into()],
            },
            ManifestLayer::Maxpool {
                name: "pool1".into(),
                inputs: vec!["relu1".into()],
                kernel: 2,
                stride: 2,
            },
            ManifestLayer::Conv {
                name: "conv2".into(),
                inputs: vec!["pool1".into()],
                kernel: 3,
                stride: 1,
                pad: 1,
                out_channels: 1,
                weights: "conv2.w".into(),
                bias: "conv2.b".into(),
            },
            ManifestLayer::Relu {
                name: "relu2".into(),
                inputs: vec!["conv2".into()],
            },
            ManifestLayer::Maxpool {
                name: "pool2".into(),
                inputs: vec!["relu2".into()],
                kernel: 2,
                stride: 2,
            },
            ManifestLayer::Flatten {
                name: "flat".into(),
                inputs: vec!["pool2".into()],
            },
            ManifestLayer::FullyConnected {
                name: "fc".into(),
                inputs: vec!["flat".into()],
                weights: "fc.w".into(),
                bias: "fc.b".into(),
            },
            ManifestLayer::Softmax {
                name: "probs".into(),
                inputs: vec!["fc".into()],
            },
        ],
        blobs: BTreeMap::from([
            blob_ref("conv1.w", vec![1, 1, 3, 3]),
            blob_ref("conv1.b", vec![1]),
            blob_ref("conv2.w", vec![1, 1, 3, 3]),
            blob_ref("conv2.b", vec![1]),
            blob_ref("fc.w", vec![4, 256]),
            blob_ref("fc.b", vec![4]),
        ]),
    };
    BlobDetector {
        fixture: Fixture { manifest, weights },
        seed,
    }
}

impl BlobDetector {
    /// Deterministic labeled image `index` of this detector's stream: a
    /// Gaussian blob in a random quadrant over low-amplitude noise. The
    /// bounding box is the exact pixel support where the pure blob term
    /// reaches the cutoff intensity.
    pub fn image(&self, index: u64) -> LabeledImage {
        let mut rng = SplitMix64::new(
            self.seed
                .wrapping_add(index.wrapping_mul(2))
                .wrapping_add(1),
        );
        // warm-up draw decorrelates streams built from near-sequential seeds
        rng.next_u64();
        let class = rng.next_range(0, 4);
        let (qx, qy) = (QUAD * (class / 2), QUAD * (class % 2));
        // margin keeps the support box inside the quadrant
        let cx = qx + rng.next_range(12, 20);
        let cy = qy + rng.next_range(12, 20);

        let mut data = vec![0.0f32; IMG * IMG];
        for v in data.iter_mut() {
            *v = rng.next_f32() * NOISE_AMPLITUDE;
        }
        let (mut x_min, mut y_min, mut x_max, mut y_max) = (IMG, IMG, 0usize, 0usize);
        for x in 0..IMG {
            for y in 0..IMG {
                let dx = x as f64 - cx as f64;
                let dy = y as f64 - cy as f64;
                let blob = (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                data[x * IMG + y] = (data[x * IMG + y] + blob as f32).min(1.0);
                if blob >= BLOB_CUTOFF {
                    x_min = x_min.min(x);
                    y_min = y_min.min(y);
                    x_max = x_max.max(x);
                    y_max = y_max.max(y);
                }
            }
        }
        LabeledImage {
            image: Tensor::new(vec![1, IMG, IMG], data).expect("image shape"),
            class,
            bbox: BoundingBox {
                x_min,
                y_min,
                x_max,
                y_max,
            },
        }
    }

    /// Writes `model/`, `images/` and `annotations/` under `dir`:
    /// `img_NNNN.png` grayscale images and `img_NNNN.txt` annotation files
    /// with one `class x_min y_min x_max y_max` line per object.
    pub fn write_dataset(&self, dir: &Path, count: u64) -> Result<()> {
        self.fixture.write_to(&dir.join("model"))?;
        let images = dir.join("images");
        let annotations = dir.join("annotations");
        std::fs::create_dir_all(&images)?;
        std::fs::create_dir_all(&annotations)?;
        for index in 0..count {
            let labeled = self.image(index);
            let stem = format!("img_{:04}", index);
            crate::imageio::save_grayscale(&labeled.image, &images.join(format!("{stem}.png")))?;
            let b = labeled.bbox;
            std::fs::write(
                annotations.join(format!("{stem}.txt")),
                format!(
                    "{} {} {} {} {}\n",
                    labeled.class, b.x_min, b.y_min, b.x_max, b.y_max
                ),
            )?;
        }
        Ok(())
    }
}

/// Small random stack of k=1 convolutions: Input[2,5,5] -> depth x Conv(k=1)
/// -> Flatten -> FC(3) -> Softmax. Small enough for the exhaustive oracle.
pub fn make_random_cnn(seed: u64, depth: usize) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    let mut layers = vec![ManifestLayer::Input {
        name: "input".into(),
    }];
    let mut previous = "input".to_string();
    for d in 0..depth {
        let name = format!("conv{}", d + 1);
        let w_name = format!("{name}.w");
        let b_name = format!("{name}.b");
        weights.insert(w_name.clone(), random_blob(&mut rng, vec![2, 2, 1, 1], 1.0));
        weights.insert(b_name.clone(), random_blob(&mut rng, vec![2], 0.2));
        let (k1, b1) = blob_ref(&w_name, vec![2, 2, 1, 1]);
        let (k2, b2) = blob_ref(&b_name, vec![2]);
        blobs.insert(k1, b1);
        blobs.insert(k2, b2);
        layers.push(ManifestLayer::Conv {
            name: name.clone(),
            inputs: vec![previous.clone()],
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 2,
            weights: w_name,
            bias: b_name,
        });
        previous = name;
    }
    layers.push(ManifestLayer::Flatten {
        name: "flat".into(),
        inputs: vec![previous],
    });
    weights.insert("fc.w".into(), random_blob(&mut rng, vec![3, 50], 1.0));
    weights.insert("fc.b".into(), random_blob(&mut rng, vec![3], 0.2));
    let (k1, b1) = blob_ref("fc.w", vec![3, 50]);
    let (k2, b2) = blob_ref("fc.b", vec![3]);
    blobs.insert(k1, b1);
    blobs.insert(k2, b2);
    layers.push(ManifestLayer::FullyConnected {
        name: "fc".into(),
        inputs: vec!["flat".into()],
        weights: "fc.w".into(),
        bias: "fc.b".into(),
    });
    layers.push(ManifestLayer::Softmax {
        name: "probs".into(),
        inputs: vec!["fc".into()],
    });
    Fixture {
        manifest: Manifest {
            name: format!("random-cnn-d{depth}"),
            input_shape: vec![2, 5, 5],
            class_count: Some(3),
            layers,
            blobs,
        },
        weights,
    }
}

fn conv_layer(
    name: &str,
    input: &str,
    kernel: usize,
    pad: usize,
    out_channels: usize,
) -> ManifestLayer {
    ManifestLayer::Conv {
        name: name.into(),
        inputs: vec![input.into()],
        kernel,
        stride: 1,
        pad,
        out_channels,
        weights: format!("{name}.w"),
        bias: format!("{name}.b"),
    }
}

fn add_conv_weights(
    rng: &mut SplitMix64,
    weights: &mut BTreeMap<String, Tensor>,
    blobs: &mut BTreeMap<String, BlobRef>,
    name: &str,
    shape: Vec<usize>,
) {
    let out = shape[0];
    weights.insert(format!("{name}.w"), random_blob(rng, shape.clone(), 1.0));
    weights.insert(format!("{name}.b"), random_blob(rng, vec![out], 0.2));
    let (k1, b1) = blob_ref(&format!("{name}.w"), shape);
    let (k2, b2) = blob_ref(&format!("{name}.b"), vec![out]);
    blobs.insert(k1, b1);
    blobs.insert(k2, b2);
}

fn add_fc_weights(
    rng: &mut SplitMix64,
    weights: &mut BTreeMap<String, Tensor>,
    blobs: &mut BTreeMap<String, BlobRef>,
    name: &str,
    rows: usize,
    cols: usize,
) {
    weights.insert(format!("{name}.w"), random_blob(rng, vec![rows, cols], 1.0));
    weights.insert(format!("{name}.b"), random_blob(rng, vec![rows], 0.2));
    let (k1, b1) = blob_ref(&format!("{name}.w"), vec![rows, cols]);
    let (k2, b2) = blob_ref(&format!("{name}.b"), vec![rows]);
    blobs.insert(k1, b1);
    blobs.insert(k2, b2);
}

/// Two parallel conv branches concatenated along channels, then a small head.
pub fn make_inception_toy(seed: u64) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    add_conv_weights(&mut rng, &mut weights, &mut blobs, "stem", vec![2, 1, 3, 3]);
    add_conv_weights(
        &mut rng,
        &mut weights,
        &mut blobs,
        "branch1",
        vec![2, 2, 1, 1],
    );
    add_conv_weights(
        &mut rng,
        &mut weights,
        &mut blobs,
        "branch2",
        vec![3, 2, 3, 3],
    );
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "fc", 3, 5 * 8 * 8);
    let layers = vec![
        ManifestLayer::Input {
            name: "input".into(),
        },
        conv_layer("stem", "input", 3, 1, 2),
        ManifestLayer::Relu {
            name: "stem_relu".into(),
            inputs: vec!["stem".into()],
        },
        conv_layer("branch1", "stem_relu", 1, 0, 2),
        conv_layer("branch2", "stem_relu", 3, 1, 3),
        ManifestLayer::Concat {
            name: "cat".into(),
            inputs: vec!["branch1".into(), "branch2".into()],
        },
        ManifestLayer::Flatten {
            name: "flat".into(),
            inputs: vec!["cat".into()],
        },
        ManifestLayer::FullyConnected {
            name: "fc".into(),
            inputs: vec!["flat".into()],
            weights: "fc.w".into(),
            bias: "fc.b".into(),
        },
        ManifestLayer::Softmax {
            name: "probs".into(),
            inputs: vec!["fc".into()],
        },
    ];
    Fixture {
        manifest: Manifest {
            name: "inception-toy".into(),
            input_shape: vec![1, 8, 8],
            class_count: Some(3),
            layers,
            blobs,
        },
        weights,
    }
}

/// A skip/delta pair summed elementwise: `sum = stem_relu + conv(stem_relu)`.
/// The skip path is the add's first input.
pub fn make_residual_toy(seed: u64) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    add_conv_weights(&mut rng, &mut weights, &mut blobs, "stem", vec![2, 1, 3, 3]);
    add_conv_weights(
        &mut rng,
        &mut weights,
        &mut blobs,
        "delta",
        vec![2, 2, 3, 3],
    );
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "fc", 3, 2 * 8 * 8);
    let layers = vec![
        ManifestLayer::Input {
            name: "input".into(),
        },
        conv_layer("stem", "input", 3, 1, 2),
        ManifestLayer::Relu {
            name: "stem_relu".into(),
            inputs: vec!["stem".into()],
        },
        conv_layer("delta", "stem_relu", 3, 1, 2),
        ManifestLayer::Add {
            name: "sum".into(),
            inputs: vec!["stem_relu".into(), "delta".into()],
        },
        ManifestLayer::Relu {
            name: "sum_relu".into(),
            inputs: vec!["sum".into()],
        },
        ManifestLayer::Flatten {
            name: "flat".into(),
            inputs: vec!["sum_relu".into()],
        },
        ManifestLayer::FullyConnected {
            name: "fc".into(),
            inputs: vec!["flat".into()],
            weights: "fc.w".into(),
            bias: "fc.b".into(),
        },
        ManifestLayer::Softmax {
            name: "probs".into(),
            inputs: vec!["fc".into()],
        },
    ];
    Fixture {
        manifest: Manifest {
            name: "residual-toy".into(),
            input_shape: vec![1, 8, 8],
            class_count: Some(3),
            layers,
            blobs,
        },
        weights,
    }
}

/// Dense connection: the concat's first branch is the identity copy of the
/// stem, the second a conv computed from it.
pub fn make_dense_toy(seed: u64) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    add_conv_weights(&mut rng, &mut weights, &mut blobs, "stem", vec![2, 1, 3, 3]);
    add_conv_weights(&mut rng, &mut weights, &mut blobs, "grow", vec![2, 2, 3, 3]);
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "fc", 3, 4 * 8 * 8);
    let layers = vec![
        ManifestLayer::Input {
            name: "input".into(),
        },
        conv_layer("stem", "input", 3, 1, 2),
        ManifestLayer::Relu {
            name: "stem_relu".into(),
            inputs: vec!["stem".into()],
        },
        conv_layer("grow", "stem_relu", 3, 1, 2),
        ManifestLayer::Concat {
            name: "cat".into(),
            inputs: vec!["stem_relu".into(), "grow".into()],
        },
        ManifestLayer::Flatten {
            name: "flat".into(),
            inputs: vec!["cat".into()],
        },
        ManifestLayer::FullyConnected {
            name: "fc".into(),
            inputs: vec!["flat".into()],
            weights: "fc.w".into(),
            bias: "fc.b".into(),
        },
        ManifestLayer::Softmax {
            name: "probs".into(),
            inputs: vec!["fc".into()],
        },
    ];
    Fixture {
        manifest: Manifest {
            name: "dense-toy".into(),
            input_shape: vec![1, 8, 8],
            class_count: Some(3),
            layers,
            blobs,
        },
        weights,
    }
}

/// Tiny captioning-style tail: Input[1,4,4] -> Flatten -> FC(3) embedding
/// -> 2-unit LSTM unrolled `steps` times. Steps beyond the first consume a
/// seeded random input sequence.
pub fn make_toy_lstm(seed: u64, steps: usize) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "embed", 3, 16);
    let mut lstm_fields = Vec::new();
    for field in [
        "w_ix", "w_im", "w_fx", "w_fm", "w_ox", "w_om", "w_cx", "w_cm",
    ] {
        let shape = if field.ends_with('x') {
            vec![2, 3]
        } else {
            vec![2, 2]
        };
        let name = format!("lstm.{field}");
        weights.insert(name.clone(), random_blob(&mut rng, shape.clone(), 1.0));
        let (k, b) = blob_ref(&name, shape);
        blobs.insert(k, b);
        lstm_fields.push(name);
    }
    let step_inputs = if steps > 1 {
        let name = "lstm.xseq".to_string();
        weights.insert(name.clone(), random_blob(&mut rng, vec![steps - 1, 3], 1.0));
        let (k, b) = blob_ref(&name, vec![steps - 1, 3]);
        blobs.insert(k, b);
        Some(name)
    } else {
        None
    };
    let layers = vec![
        ManifestLayer::Input {
            name: "input".into(),
        },
        ManifestLayer::Flatten {
            name: "flat".into(),
            inputs: vec!["input".into()],
        },
        ManifestLayer::FullyConnected {
            name: "embed".into(),
            inputs: vec!["flat".into()],
            weights: "embed.w".into(),
            bias: "embed.b".into(),
        },
        ManifestLayer::LstmCell {
            name: "lstm".into(),
            inputs: vec!["embed".into()],
            units: 2,
            steps,
            w_ix: lstm_fields[0].clone(),
            w_im: lstm_fields[1].clone(),
            w_fx: lstm_fields[2].clone(),
            w_fm: lstm_fields[3].clone(),
            w_ox: lstm_fields[4].clone(),
            w_om: lstm_fields[5].clone(),
            w_cx: lstm_fields[6].clone(),
            w_cm: lstm_fields[7].clone(),
            step_inputs,
        },
    ];
    Fixture {
        manifest: Manifest {
            name: format!("toy-lstm-t{steps}"),
            input_shape: vec![1, 4, 4],
            class_count: None,
            layers,
            blobs,
        },
        weights,
    }
}

/// Deep-enough fixture for timing runs: five 3x3 convolutions with pooling
/// plus two fully connected layers on a 64x64 input.
pub fn make_deep_cnn(seed: u64) -> Fixture {
    let mut rng = SplitMix64::new(seed);
    let mut weights = BTreeMap::new();
    let mut blobs = BTreeMap::new();
    let channels = [(8usize, 1usize), (8, 8), (16, 8), (16, 16), (16, 16)];
    let mut layers = vec![ManifestLayer::Input {
        name: "input".into(),
    }];
    let mut previous = "input".to_string();
    for (i, &(out, inp)) in channels.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        add_conv_weights(
            &mut rng,
            &mut weights,
            &mut blobs,
            &name,
            vec![out, inp, 3, 3],
        );
        layers.push(conv_layer(&name, &previous, 3, 1, out));
        let relu = format!("relu{}", i + 1);
        layers.push(ManifestLayer::Relu {
            name: relu.clone(),
            inputs: vec![name],
        });
        previous = relu;
        if i % 2 == 1 {
            let pool = format!("pool{}", i / 2 + 1);
            layers.push(ManifestLayer::Maxpool {
                name: pool.clone(),
                inputs: vec![previous.clone()],
                kernel: 2,
                stride: 2,
            });
            previous = pool;
        }
    }
    // two pools: 64 -> 32 -> 16, so the flattened size is 16*16*16
    layers.push(ManifestLayer::Flatten {
        name: "flat".into(),
        inputs: vec![previous],
    });
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "fc1", 32, 16 * 16 * 16);
    layers.push(ManifestLayer::FullyConnected {
        name: "fc1".into(),
        inputs: vec!["flat".into()],
        weights: "fc1.w".into(),
        bias: "fc1.b".into(),
    });
    layers.push(ManifestLayer::Relu {
        name: "fc1_relu".into(),
        inputs: vec!["fc1".into()],
    });
    add_fc_weights(&mut rng, &mut weights, &mut blobs, "fc2", 10, 32);
    layers.push(ManifestLayer::FullyConnected {
        name: "fc2".into(),
        inputs: vec!["fc1_relu".into()],
        weights: "fc2.w".into(),
        bias: "fc2.b".into(),
    });
    layers.push(ManifestLayer::Softmax {
        name: "probs".into(),
        inputs: vec!["fc2".into()],
    });
    Fixture {
        manifest: Manifest {
            name: "deep-cnn".into(),
            input_shape: vec![1, 64, 64],
            class_count: Some(10),
            layers,
            blobs,
        },
        weights,
    }
}

const ORACLE_MAX_WEIGHT_LAYERS: usize = 3;
const ORACLE_MAX_PATHS: u64 = 10_000;

/// Ground truth for `compute_fixations` on tiny graphs: evolves coordinate
/// sets layer by layer with deliberately naive scans, mirroring the strict
/// positivity, tie and fallback rules. Guarded to at most
/// 3 weight-bearing layers and 10^4 estimated paths.
pub fn exhaustive_path_oracle(
    graph: &NetworkGraph,
    trace: &ActivationTrace,
    start_layer: &str,
    start: Coord,
    cfg: &BacktrackConfig,
) -> Result<(BTreeSet<(usize, usize)>, bool)> {
    let weight_layers = graph
        .layers()
        .iter()
        .filter(|l| {
            matches!(
                l.op,
                LayerOp::Conv { .. }
                    | LayerOp::FullyConnected { .. }
                    | LayerOp::MaxPool { .. }
                    | LayerOp::LstmCell(_)
            )
        })
        .count();
    if weight_layers > ORACLE_MAX_WEIGHT_LAYERS {
        return Err(Error::Fixture(format!(
            "oracle guard: {} weight layers exceed {}",
            weight_layers, ORACLE_MAX_WEIGHT_LAYERS
        )));
    }
    // chains <= product of per-step fan-out: a fc step can reach every input
    // neuron, a conv step c_in * k^2 window positions, a pool step k^2
    let mut paths: u64 = 1;
    for layer in graph.layers() {
        let fan: u64 = match &layer.op {
            LayerOp::FullyConnected { .. } => {
                graph.shape_of(&layer.inputs[0])?.iter().product::<usize>() as u64
            }
            LayerOp::Conv { params, .. } => {
                let c_in = graph.shape_of(&layer.inputs[0])?[0] as u64;
                c_in * (params.kernel * params.kernel) as u64
            }
            LayerOp::MaxPool { kernel, .. } => (kernel * kernel) as u64,
            LayerOp::LstmCell(spec) => {
                let x_dim = graph.shape_of(&layer.inputs[0])?[0] as u64;
                (4 * (x_dim + spec.units as u64)).pow(spec.steps as u32)
            }
            _ => 1,
        };
        paths = paths.saturating_mul(fan);
    }
    if paths > ORACLE_MAX_PATHS {
        return Err(Error::Fixture(format!(
            "oracle guard: about {} paths exceed {}",
            paths, ORACLE_MAX_PATHS
        )));
    }

    let position = graph
        .layers()
        .iter()
        .position(|l| l.name == start_layer)
        .ok_or_else(|| Error::Graph(format!("no layer named `{}`", start_layer)))?;
    let mut pending: BTreeMap<usize, BTreeSet<Coord>> = BTreeMap::new();
    pending.insert(position, BTreeSet::from([start]));
    let mut image_points: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut fallback = false;

    for idx in (0..=position).rev() {
        let Some(coords) = pending.remove(&idx) else {
            continue;
        };
        if coords.is_empty() {
            continue;
        }
        let layer = &graph.layers()[idx];
        let send = |pending: &mut BTreeMap<usize, BTreeSet<Coord>>,
                    target: &str,
                    coords: BTreeSet<Coord>| {
            let t = graph
                .layers()
                .iter()
                .position(|l| l.name == target)
                .expect("input resolves");
            pending.entry(t).or_default().extend(coords);
        };
        match &layer.op {
            LayerOp::Input => {
                for c in coords {
                    if let Coord::Spatial { x, y, .. } = c {
                        image_points.insert((x, y));
                    }
                }
            }
            LayerOp::ReLU | LayerOp::Softmax => send(&mut pending, &layer.inputs[0], coords),
            LayerOp::Flatten => {
                let [_, h, w] = graph.shape_of(&layer.inputs[0])? else {
                    return Err(Error::Shape("flatten input must be 3-d".into()));
                };
                let (h, w) = (*h, *w);
                let mut out = BTreeSet::new();
                for c in coords {
                    let Coord::Flat(n) = c else {
                        return Err(Error::Coordinate("flatten wants flat coords".into()));
                    };
                    out.insert(Coord::Spatial {
                        ch: n / (h * w),
                        x: (n % (h * w)) / w,
                        y: n % w,
                    });
                }
                send(&mut pending, &layer.inputs[0], out);
            }
            LayerOp::FullyConnected { weights, .. } => {
                let w = graph.weight(weights)?;
                let a = trace.output(&layer.inputs[0])?.data();
                let cols = w.shape()[1];
                let mut out = BTreeSet::new();
                let mut first_row = None;
                for c in &coords {
                    let Coord::Flat(i) = c else {
                        return Err(Error::Coordinate("fc wants flat coords".into()));
                    };
                    first_row.get_or_insert(*i);
                    for j in 0..cols {
                        if a[j] as f64 * w.at2(*i, j) as f64 > 0.0 {
                            out.insert(Coord::Flat(j));
                        }
                    }
                }
                if out.is_empty() {
                    match cfg.empty_set_fallback {
                        EmptySetFallback::Abort => return Err(Error::EmptyEvidence),
                        EmptySetFallback::Argmax => {
                            let i = first_row.expect("nonempty incoming set");
                            let mut best = 0usize;
                            let mut best_val = f64::NEG_INFINITY;
                            for j in 0..cols {
                                let v = a[j] as f64 * w.at2(i, j) as f64;
                                if v > best_val {
                                    best_val = v;
                                    best = j;
                                }
                            }
                            out.insert(Coord::Flat(best));
                            fallback = true;
                        }
                    }
                }
                send(&mut pending, &layer.inputs[0], out);
            }
            LayerOp::Conv {
                params, weights, ..
            } => {
                let w = graph.weight(weights)?;
                let a = trace.output(&layer.inputs[0])?;
                let (c_in, h, wd) = a.dims3()?;
                let k = params.kernel;
                let mut out = BTreeSet::new();
                for c in &coords {
                    let Coord::Spatial { ch: f, x, y } = *c else {
                        return Err(Error::Coordinate("conv wants spatial coords".into()));
                    };
                    // per-channel sums over the true-input window positions
                    let mut best_ch = 0usize;
                    let mut best_sum = f64::NEG_INFINITY;
                    for cc in 0..c_in {
                        let mut sum = 0.0f64;
                        for u in 0..k {
                            for v in 0..k {
                                let ix = (x * params.stride + u) as isize - params.pad as isize;
                                let iy = (y * params.stride + v) as isize - params.pad as isize;
                                if ix >= 0 && (ix as usize) < h && iy >= 0 && (iy as usize) < wd {
                                    sum += a.at3(cc, ix as usize, iy as usize) as f64
                                        * w.data()[((f * c_in + cc) * k + u) * k + v] as f64;
                                }
                            }
                        }
                        if sum > best_sum {
                            best_sum = sum;
                            best_ch = cc;
                        }
                    }
                    let (ax, ay) = match cfg.conv_spatial_mode {
                        ConvSpatialMode::SameLocation => {
                            let cx = (x * params.stride) as isize + ((k - 1) / 2) as isize
                                - params.pad as isize;
                            let cy = (y * params.stride) as isize + ((k - 1) / 2) as isize
                                - params.pad as isize;
                            (
                                cx.clamp(0, h as isize - 1) as usize,
                                cy.clamp(0, wd as isize - 1) as usize,
                            )
                        }
                        ConvSpatialMode::ArgmaxLocation => {
                            let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
                            for u in 0..k {
                                for v in 0..k {
                                    let ix = (x * params.stride + u) as isize - params.pad as isize;
                                    let iy = (y * params.stride + v) as isize - params.pad as isize;
                                    if ix >= 0 && (ix as usize) < h && iy >= 0 && (iy as usize) < wd
                                    {
                                        let p = a.at3(best_ch, ix as usize, iy as usize) as f64
                                            * w.data()[((f * c_in + best_ch) * k + u) * k + v]
                                                as f64;
                                        if p > best.0 {
                                            best = (p, ix as usize, iy as usize);
                                        }
                                    }
                                }
                            }
                            (best.1, best.2)
                        }
                    };
                    out.insert(Coord::Spatial {
                        ch: best_ch,
                        x: ax,
                        y: ay,
                    });
                }
                send(&mut pending, &layer.inputs[0], out);
            }
            LayerOp::MaxPool { kernel, stride } => {
                let a = trace.output(&layer.inputs[0])?;
                let mut out = BTreeSet::new();
                for c in &coords {
                    let Coord::Spatial { ch, x, y } = *c else {
                        return Err(Error::Coordinate("pool wants spatial coords".into()));
                    };
                    let mut best = (f32::NEG_INFINITY, 0usize, 0usize);
                    for u in 0..*kernel {
                        for v in 0..*kernel {
                            let val = a.at3(ch, x * stride + u, y * stride + v);
                            if val > best.0 {
                                best = (val, x * stride + u, y * stride + v);
                            }
                        }
                    }
                    out.insert(Coord::Spatial {
                        ch,
                        x: best.1,
                        y: best.2,
                    });
                }
                send(&mut pending, &layer.inputs[0], out);
            }
            LayerOp::Concat => {
                let ranges = trace.concat_ranges(&layer.name)?;
                for (b, &(start_c, end_c)) in ranges.ranges().iter().enumerate() {
                    let mut branch = BTreeSet::new();
                    for c in &coords {
                        let Coord::Spatial { ch, x, y } = *c else {
                            return Err(Error::Coordinate("concat wants spatial coords".into()));
                        };
                        if ch >= start_c && ch < end_c {
                            branch.insert(Coord::Spatial {
                                ch: ch - start_c,
                                x,
                                y,
                            });
                        }
                    }
                    if !branch.is_empty() {
                        send(&mut pending, &layer.inputs[b], branch);
                    }
                }
            }
            LayerOp::Add => {
                let skip = trace.output(&layer.inputs[0])?;
                let delta = trace.output(&layer.inputs[1])?;
                let mut to_skip = BTreeSet::new();
                let mut to_delta = BTreeSet::new();
                for c in &coords {
                    let Coord::Spatial { ch, x, y } = *c else {
                        return Err(Error::Coordinate("add wants spatial coords".into()));
                    };
                    if skip.at3(ch, x, y) >= delta.at3(ch, x, y) {
                        to_skip.insert(*c);
                    } else {
                        to_delta.insert(*c);
                    }
                }
                if !to_skip.is_empty() {
                    send(&mut pending, &layer.inputs[0], to_skip);
                }
                if !to_delta.is_empty() {
                    send(&mut pending, &layer.inputs[1], to_delta);
                }
            }
            LayerOp::LstmCell(spec) => {
                let records = trace.lstm_steps(&layer.name)?;
                let weights = LstmWeights::resolve(graph, spec)?;
                let units: Vec<usize> = coords
                    .iter()
                    .map(|c| match c {
                        Coord::Flat(u) => Ok(*u),
                        _ => Err(Error::Coordinate("lstm wants flat coords".into())),
                    })
                    .collect::<Result<_>>()?;
                let (embed, fired) = lstm_gate_oracle(records, &weights, &units, cfg)?;
                fallback |= fired;
                send(
                    &mut pending,
                    &layer.inputs[0],
                    embed.into_iter().map(Coord::Flat).collect(),
                );
            }
        }
    }
    Ok((image_points, fallback))
}

/// Gate-wise path enumeration through an unrolled LSTM: the independent
/// ground truth for the LSTM backtracker. Follows the same gate selection
/// (output always; forget when `f*c_prev > 0`; input and candidate when
/// `i*h(..) > 0`), tracing each selected gate over its x and state matrices
/// with per-side strict positivity and argmax fallback.
pub fn lstm_gate_oracle(
    records: &[LstmStepRecord],
    weights: &LstmWeights,
    start_units: &[usize],
    cfg: &BacktrackConfig,
) -> Result<(BTreeSet<usize>, bool)> {
    if records.is_empty() {
        return Err(Error::Graph("no LSTM steps recorded".into()));
    }
    let units = weights.units();
    let mut active: BTreeSet<usize> = start_units.iter().copied().collect();
    let mut embedding: BTreeSet<usize> = BTreeSet::new();
    let mut fallback = false;

    // one side of one gate, as a naive scan
    let side = |a: &[f32], w: &Tensor, u: usize, fallback: &mut bool| -> Result<BTreeSet<usize>> {
        let cols = w.shape()[1];
        let mut out = BTreeSet::new();
        for j in 0..cols {
            if a[j] as f64 * w.at2(u, j) as f64 > 0.0 {
                out.insert(j);
            }
        }
        if out.is_empty() {
            match cfg.empty_set_fallback {
                EmptySetFallback::Abort => return Err(Error::EmptyEvidence),
                EmptySetFallback::Argmax => {
                    let mut best = 0usize;
                    let mut best_val = f64::NEG_INFINITY;
                    for j in 0..cols {
                        let v = a[j] as f64 * w.at2(u, j) as f64;
                        if v > best_val {
                            best_val = v;
                            best = j;
                        }
                    }
                    out.insert(best);
                    *fallback = true;
                }
            }
        }
        Ok(out)
    };

    for t in (1..=records.len()).rev() {
        let rec = &records[t - 1];
        let zeros = vec![0.0f32; units];
        let m_prev: &[f32] = if t >= 2 {
            &records[t - 2].state
        } else {
            &zeros
        };
        let c_prev: &[f32] = if t >= 2 { &records[t - 2].cell } else { &zeros };
        let mut next: BTreeSet<usize> = BTreeSet::new();
        for &u in &active {
            let input_term = rec.input_gate[u] as f64 * rec.candidate[u] as f64;
            let forget_term = rec.forget_gate[u] as f64 * c_prev[u] as f64;
            let mut gate_mats: Vec<(&Tensor, &Tensor)> = Vec::new();
            if input_term > 0.0 {
                gate_mats.push((&weights.w_ix, &weights.w_im));
            }
            if forget_term > 0.0 {
                gate_mats.push((&weights.w_fx, &weights.w_fm));
            }
            gate_mats.push((&weights.w_ox, &weights.w_om));
            if input_term > 0.0 {
                gate_mats.push((&weights.w_cx, &weights.w_cm));
            }
            for (wx, wm) in gate_mats {
                let x_locs = side(&rec.x, wx, u, &mut fallback)?;
                if t == 1 {
                    embedding.extend(x_locs);
                }
                if t >= 2 {
                    next.extend(side(m_prev, wm, u, &mut fallback)?);
                }
            }
        }
        if t >= 2 {
            if next.is_empty() {
                fallback = true;
                return Ok((embedding, fallback));
            }
            active = next;
        }
    }
    Ok((embedding, fallback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtrack::{backtrack_lstm_units, compute_fixations};
    use crate::forward::{predict_label, run_forward};

    #[test]
    fn fixtures_are_byte_identical_for_same_seed() {
        for build in [make_random_cnn as fn(u64, usize) -> Fixture] {
            let a = build(9, 2);
            let b = build(9, 2);
            assert_eq!(a.manifest.to_toml(), b.manifest.to_toml());
            for (name, t) in &a.weights {
                assert_eq!(t.data(), b.weights[name].data());
            }
        }
        let a = make_blob_detector(5);
        let b = make_blob_detector(5);
        assert_eq!(a.fixture.manifest.to_toml(), b.fixture.manifest.to_toml());
        let img_a = a.image(3);
        let img_b = b.image(3);
        assert_eq!(img_a.image.data(), img_b.image.data());
        assert_eq!(img_a.bbox, img_b.bbox);
    }

    #[test]
    fn all_toy_fixtures_build_valid_graphs() {
        assert!(make_blob_detector(1).fixture.graph().is_ok());
        assert!(make_random_cnn(1, 2).graph().is_ok());
        assert!(make_inception_toy(1).graph().is_ok());
        assert!(make_residual_toy(1).graph().is_ok());
        assert!(make_dense_toy(1).graph().is_ok());
        assert!(make_toy_lstm(1, 2).graph().is_ok());
        assert!(make_deep_cnn(1).graph().is_ok());
    }

    #[test]
    fn blob_detector_predicts_the_blob_quadrant() {
        let detector = make_blob_detector(7);
        let graph = detector.fixture.graph().unwrap();
        for index in 0..20 {
            let labeled = detector.image(index);
            let trace = run_forward(&graph, &labeled.image).unwrap();
            assert_eq!(
                predict_label(&trace).unwrap(),
                labeled.class,
                "image {index}"
            );
        }
    }

    #[test]
    fn noise_free_blob_images_classify_perfectly_in_all_quadrants() {
        let detector = make_blob_detector(11);
        let graph = detector.fixture.graph().unwrap();
        for class in 0..4usize {
            let (qx, qy) = (QUAD * (class / 2), QUAD * (class % 2));
            let (cx, cy) = (qx + QUAD / 2, qy + QUAD / 2);
            let mut data = vec![0.0f32; IMG * IMG];
            for x in 0..IMG {
                for y in 0..IMG {
                    let dx = x as f64 - cx as f64;
                    let dy = y as f64 - cy as f64;
                    data[x * IMG + y] =
                        (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp() as f32;
                }
            }
            let image = Tensor::new(vec![1, IMG, IMG], data).unwrap();
            let trace = run_forward(&graph, &image).unwrap();
            assert_eq!(predict_label(&trace).unwrap(), class);
        }
    }

    #[test]
    fn blob_fixations_stay_inside_the_bright_quadrant() {
        let detector = make_blob_detector(13);
        let graph = detector.fixture.graph().unwrap();
        let labeled = detector.image(0);
        let trace = run_forward(&graph, &labeled.image).unwrap();
        let class = predict_label(&trace).unwrap();
        let fixations = compute_fixations(
            &graph,
            &trace,
            "probs",
            Coord::Flat(class),
            &BacktrackConfig::default(),
        )
        .unwrap();
        assert!(!fixations.points.is_empty());
        let (qx, qy) = (QUAD * (class / 2), QUAD * (class % 2));
        for &(x, y) in &fixations.points {
            assert!(
                x >= qx && x < qx + QUAD && y >= qy && y < qy + QUAD,
                "({x}, {y})"
            );
        }
    }

    #[test]
    fn residual_toy_routes_every_fixation_to_the_larger_branch() {
        let fixture = make_residual_toy(21);
        let graph = fixture.graph().unwrap();
        let mut rng = SplitMix64::new(99);
        let image = random_blob(&mut rng, vec![1, 8, 8], 1.0);
        let trace = run_forward(&graph, &image).unwrap();
        let skip = trace.output("stem_relu").unwrap();
        let delta = trace.output("delta").unwrap();

        let incoming = crate::backtrack::FixationSet::with_coords(
            "sum",
            (0..2).flat_map(|ch| (0..8).map(move |i| Coord::spatial(ch, i, i))),
        );
        let (s, d) = crate::backtrack::backtrack_add(&incoming, skip, delta).unwrap();
        for &c in s.coords() {
            let Coord::Spatial { ch, x, y } = c else {
                panic!()
            };
            assert!(skip.at3(ch, x, y) >= delta.at3(ch, x, y));
        }
        for &c in d.coords() {
            let Coord::Spatial { ch, x, y } = c else {
                panic!()
            };
            assert!(delta.at3(ch, x, y) > skip.at3(ch, x, y));
        }
        assert_eq!(s.len() + d.len(), incoming.len());
    }

    #[test]
    fn inception_toy_branch_attribution_roundtrips() {
        let fixture = make_inception_toy(31);
        let graph = fixture.graph().unwrap();
        let mut rng = SplitMix64::new(17);
        let image = random_blob(&mut rng, vec![1, 8, 8], 1.0);
        let trace = run_forward(&graph, &image).unwrap();
        let ranges = trace.concat_ranges("cat").unwrap();
        assert_eq!(ranges.ranges(), &[(0, 2), (2, 5)]);
        let cat = trace.output("cat").unwrap();
        let b1 = trace.output("branch1").unwrap();
        let b2 = trace.output("branch2").unwrap();
        for ch in 0..5 {
            let (branch, local) = ranges.locate(ch).unwrap();
            let source = if branch == 0 { b1 } else { b2 };
            for x in 0..8 {
                for y in 0..8 {
                    assert_eq!(cat.at3(ch, x, y), source.at3(local, x, y));
                }
            }
        }
    }

    #[test]
    fn dense_toy_copied_channels_transfer_unchanged() {
        let fixture = make_dense_toy(41);
        let graph = fixture.graph().unwrap();
        let mut rng = SplitMix64::new(5);
        let image = random_blob(&mut rng, vec![1, 8, 8], 1.0);
        let trace = run_forward(&graph, &image).unwrap();
        let ranges = trace.concat_ranges("cat").unwrap();
        // channels 0..2 are the identity copy of stem_relu
        let incoming = crate::backtrack::FixationSet::with_coords(
            "cat",
            [
                Coord::spatial(0, 3, 4),
                Coord::spatial(1, 2, 2),
                Coord::spatial(3, 1, 1),
            ],
        );
        let split = crate::backtrack::backtrack_concat(&incoming, ranges).unwrap();
        assert_eq!(
            split[0].coords(),
            &[Coord::spatial(0, 3, 4), Coord::spatial(1, 2, 2)]
        );
        assert_eq!(split[1].coords(), &[Coord::spatial(1, 1, 1)]);
    }

    #[test]
    fn oracle_matches_compute_fixations_on_depth_two_toy() {
        let fixture = make_random_cnn(3, 1);
        let graph = fixture.graph().unwrap();
        let mut rng = SplitMix64::new(8);
        let image = random_blob(&mut rng, vec![2, 5, 5], 1.0);
        let trace = run_forward(&graph, &image).unwrap();
        let cfg = BacktrackConfig::default();
        for class in 0..3 {
            let got = compute_fixations(&graph, &trace, "probs", Coord::Flat(class), &cfg).unwrap();
            let (want, want_fb) =
                exhaustive_path_oracle(&graph, &trace, "probs", Coord::Flat(class), &cfg).unwrap();
            let got_set: BTreeSet<(usize, usize)> = got.points.iter().copied().collect();
            assert_eq!(got_set, want);
            assert_eq!(got.fallback_fired, want_fb);
        }
    }

    #[test]
    fn oracle_guard_rejects_deep_graphs() {
        let fixture = make_deep_cnn(2);
        let graph = fixture.graph().unwrap();
        let image = Tensor::zeros(vec![1, 64, 64]);
        let trace = run_forward(&graph, &image).unwrap();
        let err = exhaustive_path_oracle(
            &graph,
            &trace,
            "probs",
            Coord::Flat(0),
            &BacktrackConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Fixture(_)), "{err}");
    }

    #[test]
    fn single_identity_net_traces_to_the_start_pixel() {
        // start at the input layer itself: the fixation is the given pixel
        let detector = make_blob_detector(3);
        let graph = detector.fixture.graph().unwrap();
        let labeled = detector.image(1);
        let trace = run_forward(&graph, &labeled.image).unwrap();
        let got = compute_fixations(
            &graph,
            &trace,
            "input",
            Coord::spatial(0, 12, 7),
            &BacktrackConfig::default(),
        )
        .unwrap();
        assert_eq!(got.points, vec![(12, 7)]);
    }

    #[test]
    fn lstm_backtrack_matches_gate_oracle_on_toy_cell() {
        for steps in [1usize, 2] {
            let fixture = make_toy_lstm(61, steps);
            let graph = fixture.graph().unwrap();
            let mut rng = SplitMix64::new(14);
            let image = random_blob(&mut rng, vec![1, 4, 4], 1.0);
            let trace = run_forward(&graph, &image).unwrap();
            let records = trace.lstm_steps("lstm").unwrap();
            let spec = match &graph.layer("lstm").unwrap().op {
                LayerOp::LstmCell(spec) => spec.clone(),
                _ => panic!(),
            };
            let weights = LstmWeights::resolve(&graph, &spec).unwrap();
            let cfg = BacktrackConfig::default();
            let start = crate::forward::argmax(&records.last().unwrap().state);

            let got = backtrack_lstm_units(records, &weights, &[start], &cfg).unwrap();
            let got_set: BTreeSet<usize> = got
                .coords()
                .iter()
                .map(|c| match c {
                    Coord::Flat(j) => *j,
                    _ => panic!(),
                })
                .collect();
            let (want, want_fb) = lstm_gate_oracle(records, &weights, &[start], &cfg).unwrap();
            assert_eq!(got_set, want, "steps={steps}");
            assert_eq!(got.fallback_fired(), want_fb);
        }
    }

    #[test]
    fn zero_initial_cell_excludes_forget_evidence_at_step_one() {
        let fixture = make_toy_lstm(71, 1);
        let graph = fixture.graph().unwrap();
        let mut rng = SplitMix64::new(15);
        let image = random_blob(&mut rng, vec![1, 4, 4], 1.0);
        let trace = run_forward(&graph, &image).unwrap();
        let records = trace.lstm_steps("lstm").unwrap();
        // f_1 * c_0 is exactly zero for every unit: the forget gate never fires
        for rec in records.iter().take(1) {
            for u in 0..2 {
                assert_eq!(rec.forget_gate[u] * 0.0, 0.0);
            }
        }
        // equivalently, the embedding evidence equals the oracle that skips
        // the forget gate entirely at t=1 (it is skipped by the rules)
        let spec = match &graph.layer("lstm").unwrap().op {
            LayerOp::LstmCell(spec) => spec.clone(),
            _ => panic!(),
        };
        let weights = LstmWeights::resolve(&graph, &spec).unwrap();
        let cfg = BacktrackConfig::default();
        let got = backtrack_lstm_units(records, &weights, &[0], &cfg).unwrap();
        assert!(!got.is_empty());
    }

    #[test]
    fn degenerate_lstm_fallback_yields_singletons_per_gate() {
        // all-negative x-side weights with a positive embedding: every gate's
        // x side falls back to a single argmax location
        let neg = |rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], vec![-1.0; rows * cols]).unwrap()
        };
        let weights = LstmWeights {
            w_ix: neg(2, 3),
            w_im: neg(2, 2),
            w_fx: neg(2, 3),
            w_fm: neg(2, 2),
            w_ox: neg(2, 3),
            w_om: neg(2, 2),
            w_cx: neg(2, 3),
            w_cm: neg(2, 2),
        };
        let records = crate::forward::run_lstm_unrolled(&weights, &[0.5, 1.0, 0.25], &[]).unwrap();
        let cfg = BacktrackConfig::default();
        let got = backtrack_lstm_units(&records, &weights, &[0], &cfg).unwrap();
        assert!(got.fallback_fired());
        // every gate contributes the same argmax singleton: index of the
        // least-negative product, which is x*w = 0.25 * -1 at index 2
        assert_eq!(got.coords(), &[Coord::Flat(2)]);
    }

    #[test]
    fn dataset_writes_model_images_and_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let detector = make_blob_detector(17);
        detector.write_dataset(dir.path(), 3).unwrap();
        assert!(dir.path().join("model/manifest.toml").exists());
        for i in 0..3 {
            assert!(dir.path().join(format!("images/img_{:04}.png", i)).exists());
            let ann =
                std::fs::read_to_string(dir.path().join(format!("annotations/img_{:04}.txt", i)))
                    .unwrap();
            let fields: Vec<usize> = ann.split_whitespace().map(|t| t.parse().unwrap()).collect();
            assert_eq!(fields.len(), 5);
        }
        let graph = crate::graph::load_model(&dir.path().join("model/manifest.toml")).unwrap();
        assert_eq!(graph.layers().len(), 10);
    }
}
