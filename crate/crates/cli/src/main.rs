//! Command line driver for the fixation pipeline.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for data or model errors.
//! Every command validates its inputs and finishes all computation before
//! writing any output, so failures leave no partial files behind.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fixations_core::backtrack::{
    compute_fixations, BacktrackConfig, ConvSpatialMode, Coord, EmptySetFallback, ImageFixations,
};
use fixations_core::eval::{
    localization_error, precision_at_eer, proposal_metrics, LocalizationRecord,
};
use fixations_core::fixtures::make_blob_detector;
use fixations_core::forward::{predict_label, run_forward, ActivationTrace};
use fixations_core::graph::load_model;
use fixations_core::imageio;
use fixations_core::postprocess::{
    bbox_from_fixations, heatmap_from_fixations, remove_outliers, BoundingBox,
};
use fixations_core::{NetworkGraph, Tensor};

#[derive(Parser)]
#[command(
    name = "cnn-fixations",
    version,
    about = "Trace a network's prediction back to the pixels that support it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a forward pass and print the predicted class and score vector.
    Infer(InferArgs),
    /// Backtrack a neuron to input pixels and write the fixation point table.
    Fixate(FixateArgs),
    /// Fixate, filter outliers, and write a Gaussian heat map image.
    Heatmap(HeatmapArgs),
    /// Fixate, filter outliers, and write the enclosing bounding box.
    Bbox(BboxArgs),
    /// Evaluate localization over an image directory with annotations.
    Eval(EvalArgs),
    /// Generate a synthetic model plus labeled images and annotations.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct ModelImage {
    /// Path to the model manifest (weights load from the same directory).
    #[arg(long)]
    model: PathBuf,
    /// Input image (8-bit grayscale).
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct BacktrackOpts {
    /// Start neuron, e.g. "layer:probs coord:2" or "layer:conv2 coord:0,3,4".
    /// Defaults to the predicted class at the softmax head.
    #[arg(long)]
    start: Option<String>,
    /// Spatial placement when crossing a convolution.
    #[arg(long, value_enum, default_value_t = ModeArg::SameLocation)]
    mode: ModeArg,
    /// What to do when a layer yields no positive evidence.
    #[arg(long, value_enum, default_value_t = FallbackArg::Argmax)]
    fallback: FallbackArg,
}

#[derive(Args)]
struct FilterOpts {
    /// Keep a fixation only if this fraction of all fixations lies within
    /// the outlier radius of it.
    #[arg(long, default_value_t = 0.05)]
    outlier_fraction: f64,
    /// Outlier radius as a fraction of the image diagonal.
    #[arg(long, default_value_t = 0.10)]
    outlier_radius_frac: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SameLocation,
    ArgmaxLocation,
}

#[derive(Clone, Copy, ValueEnum)]
enum FallbackArg {
    Argmax,
    Abort,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model_image: ModelImage,
}

#[derive(Args)]
struct FixateArgs {
    #[command(flatten)]
    model_image: ModelImage,
    #[command(flatten)]
    backtrack: BacktrackOpts,
    /// Output point table.
    #[arg(long)]
    out: PathBuf,
    /// Optional overlay image marking fixations in red.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    model_image: ModelImage,
    #[command(flatten)]
    backtrack: BacktrackOpts,
    #[command(flatten)]
    filter: FilterOpts,
    /// Gaussian sigma as a fraction of the image diagonal.
    #[arg(long, default_value_t = 0.04)]
    sigma_frac: f64,
    /// Output heat map image (8-bit grayscale).
    #[arg(long)]
    out: PathBuf,
    /// Optional red-channel overlay over the input image.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct BboxArgs {
    #[command(flatten)]
    model_image: ModelImage,
    #[command(flatten)]
    backtrack: BacktrackOpts,
    #[command(flatten)]
    filter: FilterOpts,
    /// Output box record: "x_min y_min x_max y_max".
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Path to the model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Directory of input images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of annotation files (one per image, same stem, .txt).
    #[arg(long)]
    annotations: PathBuf,
    #[command(flatten)]
    backtrack: BacktrackOpts,
    #[command(flatten)]
    filter: FilterOpts,
    #[arg(long, default_value_t = 0.04)]
    sigma_frac: f64,
    /// Optional report file; the report always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Fixture kind; currently only the blob detector writes datasets.
    #[arg(long, default_value = "blob")]
    kind: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of labeled images to generate.
    #[arg(long, default_value_t = 20)]
    count: u64,
    /// Output directory (model/, images/, annotations/).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<fixations_core::Error> for CliError {
    fn from(e: fixations_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer(args) => cmd_infer(args),
        Command::Fixate(args) => cmd_fixate(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::Bbox(args) => cmd_bbox(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fixture(args) => cmd_fixture(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_inputs(mi: &ModelImage) -> CliResult<(NetworkGraph, Tensor)> {
    let graph = load_model(&mi.model)?;
    let image = imageio::load_grayscale(&mi.image)?;
    Ok((graph, image))
}

fn backtrack_config(opts: &BacktrackOpts) -> BacktrackConfig {
    BacktrackConfig {
        conv_spatial_mode: match opts.mode {
            ModeArg::SameLocation => ConvSpatialMode::SameLocation,
            ModeArg::ArgmaxLocation => ConvSpatialMode::ArgmaxLocation,
        },
        empty_set_fallback: match opts.fallback {
            FallbackArg::Argmax => EmptySetFallback::Argmax,
            FallbackArg::Abort => EmptySetFallback::Abort,
        },
    }
}

/// Parses "layer:<name> coord:<i>" or "layer:<name> coord:<c,x,y>".
fn parse_start(selector: &str) -> CliResult<(String, Coord)> {
    let mut layer = None;
    let mut coord = None;
    for token in selector.split_whitespace() {
        if let Some(name) = token.strip_prefix("layer:") {
            layer = Some(name.to_string());
        } else if let Some(spec) = token.strip_prefix("coord:") {
            let parts: Vec<&str> = spec.split(',').collect();
            let parsed: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse()).collect();
            let parsed = parsed.map_err(|_| {
                CliError::Usage(format!("bad coordinate `{}` in start selector", spec))
            })?;
            coord = Some(match parsed[..] {
                [i] => Coord::Flat(i),
                [c, x, y] => Coord::Spatial { ch: c, x, y },
                _ => {
                    return Err(CliError::Usage(format!(
                        "coordinate `{}` must have 1 or 3 components",
                        spec
                    )))
                }
            });
        } else {
            return Err(CliError::Usage(format!(
                "unrecognized start token `{}` (expected layer:<name> coord:<c[,x,y]>)",
                token
            )));
        }
    }
    match (layer, coord) {
        (Some(l), Some(c)) => Ok((l, c)),
        _ => Err(CliError::Usage(
            "start selector needs both layer:<name> and coord:<c[,x,y]>".into(),
        )),
    }
}

fn resolve_start(
    graph: &NetworkGraph,
    trace: &ActivationTrace,
    opts: &BacktrackOpts,
) -> CliResult<(String, Coord)> {
    match &opts.start {
        Some(selector) => parse_start(selector),
        None => {
            let head = graph.head().ok_or_else(|| {
                CliError::Data("model has no softmax head; pass an explicit --start".into())
            })?;
            let class = predict_label(trace)?;
            Ok((head.name.clone(), Coord::Flat(class)))
        }
    }
}

fn validate_filter(filter: &FilterOpts) -> CliResult<()> {
    if !(0.0..=1.0).contains(&filter.outlier_fraction) {
        return Err(CliError::Usage(format!(
            "--outlier-fraction {} outside [0, 1]",
            filter.outlier_fraction
        )));
    }
    if filter.outlier_radius_frac <= 0.0 {
        return Err(CliError::Usage(format!(
            "--outlier-radius-frac {} must be positive",
            filter.outlier_radius_frac
        )));
    }
    Ok(())
}

fn diagonal(image: &Tensor) -> f64 {
    let (_, h, w) = image.dims3().expect("images are [1, H, W]");
    ((h * h + w * w) as f64).sqrt()
}

fn fixate_pipeline(
    graph: &NetworkGraph,
    image: &Tensor,
    opts: &BacktrackOpts,
) -> CliResult<(ImageFixations, String, Coord, ActivationTrace)> {
    let trace = run_forward(graph, image)?;
    let (layer, coord) = resolve_start(graph, &trace, opts)?;
    let cfg = backtrack_config(opts);
    let fixations = compute_fixations(graph, &trace, &layer, coord, &cfg)?;
    Ok((fixations, layer, coord, trace))
}

fn format_coord(coord: Coord) -> String {
    match coord {
        Coord::Flat(i) => i.to_string(),
        Coord::Spatial { ch, x, y } => format!("{},{},{}", ch, x, y),
    }
}

fn mode_name(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::SameLocation => "same-location",
        ModeArg::ArgmaxLocation => "argmax-location",
    }
}

fn cmd_infer(args: InferArgs) -> CliResult<()> {
    let (graph, image) = load_inputs(&args.model_image)?;
    let trace = run_forward(&graph, &image)?;
    let class = predict_label(&trace)?;
    let scores = trace.scores().expect("head exists when predict succeeds");
    println!("class: {}", class);
    println!(
        "scores: {}",
        scores
            .iter()
            .map(|s| format!("{:.6}", s))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

/// Writes fully rendered outputs via a temp file and rename, after all
/// computation succeeded, so a failing command leaves no partial files.
fn commit_outputs(outputs: Vec<(PathBuf, Vec<u8>)>) -> CliResult<()> {
    for (path, bytes) in outputs {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)
            .and_then(|()| std::fs::rename(&tmp, &path))
            .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    }
    Ok(())
}

fn cmd_fixate(args: FixateArgs) -> CliResult<()> {
    let (graph, image) = load_inputs(&args.model_image)?;
    let (fixations, layer, coord, _) = fixate_pipeline(&graph, &image, &args.backtrack)?;
    let text = fixations.to_point_file(&[
        ("model", args.model_image.model.display().to_string()),
        ("image", args.model_image.image.display().to_string()),
        (
            "start",
            format!("layer:{} coord:{}", layer, format_coord(coord)),
        ),
        (
            "conv_spatial_mode",
            mode_name(args.backtrack.mode).to_string(),
        ),
    ]);
    let mut outputs = vec![(args.out.clone(), text.into_bytes())];
    if let Some(overlay) = &args.overlay {
        outputs.push((
            overlay.clone(),
            imageio::fixation_overlay_png(&fixations.points, &image)?,
        ));
    }
    commit_outputs(outputs)?;
    println!("fixations: {}", fixations.points.len());
    Ok(())
}

fn filtered_points(
    fixations: &ImageFixations,
    image: &Tensor,
    filter: &FilterOpts,
) -> CliResult<Vec<(usize, usize)>> {
    let radius = filter.outlier_radius_frac * diagonal(image);
    Ok(remove_outliers(
        &fixations.points,
        filter.outlier_fraction,
        radius,
    )?)
}

fn cmd_heatmap(args: HeatmapArgs) -> CliResult<()> {
    validate_filter(&args.filter)?;
    if args.sigma_frac <= 0.0 {
        return Err(CliError::Usage(format!(
            "--sigma-frac {} must be positive",
            args.sigma_frac
        )));
    }
    let (graph, image) = load_inputs(&args.model_image)?;
    let (fixations, _, _, _) = fixate_pipeline(&graph, &image, &args.backtrack)?;
    let kept = filtered_points(&fixations, &image, &args.filter)?;
    let (_, h, w) = image.dims3()?;
    let map = heatmap_from_fixations(&kept, (h, w), args.sigma_frac * diagonal(&image))?;
    let mut outputs = vec![(args.out.clone(), imageio::heatmap_png(&map)?)];
    if let Some(overlay) = &args.overlay {
        outputs.push((overlay.clone(), imageio::heatmap_overlay_png(&map, &image)?));
    }
    commit_outputs(outputs)?;
    println!("heatmap: {} fixations after filtering", kept.len());
    Ok(())
}

fn cmd_bbox(args: BboxArgs) -> CliResult<()> {
    validate_filter(&args.filter)?;
    let (graph, image) = load_inputs(&args.model_image)?;
    let (fixations, _, _, _) = fixate_pipeline(&graph, &image, &args.backtrack)?;
    let kept = filtered_points(&fixations, &image, &args.filter)?;
    let bbox = bbox_from_fixations(&kept)
        .ok_or_else(|| CliError::Data("no fixations survive filtering; no box to fit".into()))?;
    commit_outputs(vec![(
        args.out.clone(),
        format!("{}\n", bbox.to_record()).into_bytes(),
    )])?;
    println!("bbox: {}", bbox.to_record());
    Ok(())
}

struct Annotation {
    class: usize,
    boxes: Vec<BoundingBox>,
}

fn parse_annotation(path: &Path) -> CliResult<Annotation> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let mut class = None;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Result<Vec<usize>, _> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect();
        let fields = fields.map_err(|_| {
            CliError::Data(format!(
                "{}:{}: malformed annotation line",
                path.display(),
                lineno + 1
            ))
        })?;
        if fields.len() != 5 {
            return Err(CliError::Data(format!(
                "{}:{}: expected `class x_min y_min x_max y_max`",
                path.display(),
                lineno + 1
            )));
        }
        if *class.get_or_insert(fields[0]) != fields[0] {
            return Err(CliError::Data(format!(
                "{}: annotations mix classes",
                path.display()
            )));
        }
        boxes.push(
            BoundingBox::new(fields[1], fields[2], fields[3], fields[4])
                .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?,
        );
    }
    match class {
        Some(class) if !boxes.is_empty() => Ok(Annotation { class, boxes }),
        _ => Err(CliError::Data(format!(
            "{}: annotation has no boxes",
            path.display()
        ))),
    }
}

fn mask_from_boxes(boxes: &[BoundingBox], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for b in boxes {
        for x in b.x_min..=b.x_max.min(h - 1) {
            for y in b.y_min..=b.y_max.min(w - 1) {
                mask[x * w + y] = true;
            }
        }
    }
    mask
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    validate_filter(&args.filter)?;
    if args.sigma_frac <= 0.0 {
        return Err(CliError::Usage(format!(
            "--sigma-frac {} must be positive",
            args.sigma_frac
        )));
    }
    let graph = load_model(&args.model)?;

    let mut stems: Vec<String> = std::fs::read_dir(&args.images)
        .map_err(|e| CliError::Data(format!("{}: {}", args.images.display(), e)))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().map(|e| e == "png").unwrap_or(false))
                .then(|| path.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Data(format!(
            "no .png images found in {}",
            args.images.display()
        )));
    }

    // validate all annotations before running anything
    let mut annotations = Vec::with_capacity(stems.len());
    for stem in &stems {
        annotations.push(parse_annotation(
            &args.annotations.join(format!("{stem}.txt")),
        )?);
    }

    let cfg_opts = &args.backtrack;
    let mut records = Vec::with_capacity(stems.len());
    let mut correct = 0usize;
    let mut eer_sum = 0.0f64;
    for (stem, annotation) in stems.iter().zip(&annotations) {
        let image = imageio::load_grayscale(&args.images.join(format!("{stem}.png")))?;
        let trace = run_forward(&graph, &image)?;
        let predicted = predict_label(&trace)?;
        if predicted == annotation.class {
            correct += 1;
        }
        let (layer, coord) = resolve_start(&graph, &trace, cfg_opts)?;
        let cfg = backtrack_config(cfg_opts);
        let fixations = compute_fixations(&graph, &trace, &layer, coord, &cfg)?;
        let kept = filtered_points(&fixations, &image, &args.filter)?;
        let bbox = bbox_from_fixations(&kept)
            .ok_or_else(|| CliError::Data(format!("{stem}: no fixations survive filtering")))?;
        records.push(LocalizationRecord::new(
            predicted,
            annotation.class,
            bbox,
            annotation.boxes.clone(),
        )?);

        let (_, h, w) = image.dims3()?;
        let map = heatmap_from_fixations(&kept, (h, w), args.sigma_frac * diagonal(&image))?;
        let mask = mask_from_boxes(&annotation.boxes, h, w);
        eer_sum += precision_at_eer(&map, &mask)?;
    }

    let error = localization_error(&records)?;
    let (mrecall, mprecision) = proposal_metrics(&records)?;
    let mut report = String::new();
    report.push_str(&format!("images: {}\n", records.len()));
    report.push_str(&format!(
        "accuracy: {:.2}\n",
        100.0 * correct as f64 / records.len() as f64
    ));
    report.push_str(&format!("localization_error: {:.2}\n", error));
    report.push_str(&format!(
        "mean_eer_precision: {:.2}\n",
        eer_sum / records.len() as f64
    ));
    report.push_str(&format!("mean_recall: {:.2}\n", mrecall));
    report.push_str(&format!("mean_precision: {:.2}\n", mprecision));

    let mut classes: Vec<usize> = records.iter().map(|r| r.true_class).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let class_records: Vec<LocalizationRecord> = records
            .iter()
            .filter(|r| r.true_class == class)
            .cloned()
            .collect();
        let (recall, precision) = proposal_metrics(&class_records)?;
        report.push_str(&format!("class_{}_recall: {:.2}\n", class, recall));
        report.push_str(&format!("class_{}_precision: {:.2}\n", class, precision));
    }

    print!("{report}");
    if let Some(out) = &args.out {
        commit_outputs(vec![(out.clone(), report.into_bytes())])?;
    }
    Ok(())
}

fn cmd_fixture(args: FixtureArgs) -> CliResult<()> {
    match args.kind.as_str() {
        "blob" => {
            if args.count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            let detector = make_blob_detector(args.seed);
            detector.write_dataset(&args.out, args.count)?;
            println!(
                "fixture: blob detector seed {} with {} images at {}",
                args.seed,
                args.count,
                args.out.display()
            );
            Ok(())
        }
        other => {
            // only the blob kind has an image generator; the toy graphs are
            // library-level fixtures
            let fixture = match other {
                "random-cnn" => fixations_core::fixtures::make_random_cnn(args.seed, 2),
                "inception-toy" => fixations_core::fixtures::make_inception_toy(args.seed),
                "residual-toy" => fixations_core::fixtures::make_residual_toy(args.seed),
                "dense-toy" => fixations_core::fixtures::make_dense_toy(args.seed),
                "toy-lstm" => fixations_core::fixtures::make_toy_lstm(args.seed, 2),
                "deep-cnn" => fixations_core::fixtures::make_deep_cnn(args.seed),
                _ => {
                    return Err(CliError::Usage(format!(
                        "unknown fixture kind `{}`",
                        args.kind
                    )))
                }
            };
            fixture.write_to(&args.out.join("model"))?;
            println!("fixture: {} at {}", other, args.out.join("model").display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_selector_parses_flat_and_spatial() {
        let (layer, coord) = parse_start("layer:probs coord:2").unwrap();
        assert_eq!(layer, "probs");
        assert_eq!(coord, Coord::Flat(2));
        let (layer, coord) = parse_start("layer:conv1 coord:0,3,4").unwrap();
        assert_eq!(layer, "conv1");
        assert_eq!(coord, Coord::Spatial { ch: 0, x: 3, y: 4 });
    }

    #[test]
    fn start_selector_rejects_garbage() {
        assert!(matches!(parse_start("coord:1"), Err(CliError::Usage(_))));
        assert!(matches!(
            parse_start("layer:a coord:1,2"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_start("layer:a what:3"),
            Err(CliError::Usage(_))
        ));
    }
}
