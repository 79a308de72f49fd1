//! From raw pixel fixations to deliverables: outlier-filtered point sets,
//! max-normalized heat maps, and enclosing bounding boxes.

use crate::error::{Error, Result};

/// 2-d localization map, same spatial size as the input image, values in
/// `[0, 1]` with max exactly 1 whenever any fixation exists.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl HeatMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "heat map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[x * self.width + y]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Axis-aligned box with inclusive pixel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::Coordinate(format!(
                "degenerate box ({}, {}, {}, {})",
                x_min, y_min, x_max, y_max
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Inclusive pixel area: `(x_max - x_min + 1) * (y_max - y_min + 1)`.
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Single-line text record.
    pub fn to_record(&self) -> String {
        format!(
            "{} {} {} {}",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Keeps a point iff at least `min_fraction` of ALL points (the point itself
/// included) lie within `radius` of it. A single pass against the original
/// set; the filter is not iterated.
pub fn remove_outliers(
    points: &[(usize, usize)],
    min_fraction: f64,
    radius: f64,
) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::Eval(format!(
            "min_fraction {} outside [0, 1]",
            min_fraction
        )));
    }
    if radius <= 0.0 {
        return Err(Error::Eval(format!("radius {} must be positive", radius)));
    }
    let needed = min_fraction * points.len() as f64;
    let r2 = radius * radius;
    Ok(points
        .iter()
        .filter(|&&(px, py)| {
            let neighbors = points
                .iter()
                .filter(|&&(qx, qy)| {
                    let dx = px as f64 - qx as f64;
                    let dy = py as f64 - qy as f64;
                    dx * dx + dy * dy <= r2
                })
                .count();
            neighbors as f64 >= needed
        })
        .copied()
        .collect())
}

/// Unit impulses at the fixation pixels blurred with an isotropic Gaussian
/// (separable passes, kernel truncated at radius `ceil(3*sigma)`, zero-padded
/// borders), then divided by the maximum. Duplicate points count once. An
/// empty input yields an all-zero map.
pub fn heatmap_from_fixations(
    points: &[(usize, usize)],
    image_shape: (usize, usize),
    sigma: f64,
) -> Result<HeatMap> {
    if sigma <= 0.0 {
        return Err(Error::Eval(format!("sigma {} must be positive", sigma)));
    }
    let (h, w) = image_shape;
    let mut impulses = vec![0.0f64; h * w];
    for &(x, y) in points {
        if x >= h || y >= w {
            return Err(Error::Coordinate(format!(
                "fixation ({}, {}) outside {}x{} image",
                x, y, h, w
            )));
        }
        impulses[x * w + y] = 1.0;
    }

    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    // horizontal pass
    let mut tmp = vec![0.0f64; h * w];
    for x in 0..h {
        for y in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && (yy as usize) < w {
                    acc += impulses[x * w + yy as usize] * kv;
                }
            }
            tmp[x * w + y] = acc;
        }
    }
    // vertical pass
    let mut blurred = vec![0.0f64; h * w];
    for x in 0..h {
        for y in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && (xx as usize) < h {
                    acc += tmp[xx as usize * w + y] * kv;
                }
            }
            blurred[x * w + y] = acc;
        }
    }

    let max = blurred.iter().copied().fold(0.0f64, f64::max);
    let values = if max > 0.0 {
        blurred.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0f32; h * w]
    };
    HeatMap::new(h, w, values)
}

/// Min/max enclosing rectangle of the points. `None` when there is nothing
/// to enclose.
pub fn bbox_from_fixations(points: &[(usize, usize)]) -> Option<BoundingBox> {
    let (first, rest) = points.split_first()?;
    let mut b = BoundingBox {
        x_min: first.0,
        y_min: first.1,
        x_max: first.0,
        y_max: first.1,
    };
    for &(x, y) in rest {
        b.x_min = b.x_min.min(x);
        b.y_min = b.y_min.min(y);
        b.x_max = b.x_max.max(x);
        b.y_max = b.y_max.max(y);
    }
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn lone_distant_point_is_removed() {
        let mut points: Vec<(usize, usize)> = (0..20).map(|i| (10 + i % 5, 10 + i / 5)).collect();
        points.push((510, 510));
        let kept = remove_outliers(&points, 0.05, 40.0).unwrap();
        assert_eq!(kept.len(), 20);
        assert!(!kept.contains(&(510, 510)));
    }

    #[test]
    fn zero_fraction_is_identity() {
        let points = vec![(0, 0), (100, 100), (3, 7)];
        assert_eq!(remove_outliers(&points, 0.0, 5.0).unwrap(), points);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        assert!(remove_outliers(&[], 0.05, 10.0).unwrap().is_empty());
    }

    #[test]
    fn filter_matches_quadratic_oracle_on_seeded_points() {
        let mut rng = SplitMix64::new(55);
        let points: Vec<(usize, usize)> = (0..500)
            .map(|_| (rng.next_range(0, 64), rng.next_range(0, 64)))
            .collect();
        let diagonal = (64.0f64 * 64.0 * 2.0).sqrt();
        let radius = 0.10 * diagonal;
        let got = remove_outliers(&points, 0.05, radius).unwrap();

        // independent O(n^2) filter
        let needed = 0.05 * points.len() as f64;
        let mut want = Vec::new();
        for &p in &points {
            let mut count = 0usize;
            for &q in &points {
                let dx = p.0 as f64 - q.0 as f64;
                let dy = p.1 as f64 - q.1 as f64;
                if (dx * dx + dy * dy).sqrt() <= radius {
                    count += 1;
                }
            }
            if count as f64 >= needed {
                want.push(p);
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn refiltering_survivors_at_the_same_absolute_threshold_changes_nothing() {
        // cluster plus one far outlier: pass one drops the outlier, and the
        // survivors all sit within one radius of each other, so a second pass
        // at the same absolute neighbor count (fraction rescaled to the
        // survivor count) keeps every one of them
        let mut points: Vec<(usize, usize)> = (0..20).map(|i| (10 + i % 5, 10 + i / 5)).collect();
        points.push((500, 500));
        let n = points.len() as f64;
        let once = remove_outliers(&points, 0.10, 8.0).unwrap();
        assert_eq!(once.len(), 20);
        let twice = remove_outliers(&once, 0.10 * n / once.len() as f64, 8.0).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn refiltering_never_grows_the_set_and_reruns_are_identical() {
        // on threshold-borderline data a second pass may remove more (a
        // survivor's neighbors can die under it), but never less, and the
        // filter itself is deterministic
        let mut rng = SplitMix64::new(56);
        let points: Vec<(usize, usize)> = (0..200)
            .map(|_| (rng.next_range(0, 32), rng.next_range(0, 32)))
            .collect();
        let n = points.len() as f64;
        let once = remove_outliers(&points, 0.05, 4.0).unwrap();
        let twice = remove_outliers(&once, 0.05 * n / once.len() as f64, 4.0).unwrap();
        assert!(twice.len() <= once.len());
        assert!(twice.iter().all(|p| once.contains(p)));
        assert_eq!(once, remove_outliers(&points, 0.05, 4.0).unwrap());
    }

    #[test]
    fn single_fixation_peaks_at_itself() {
        let map = heatmap_from_fixations(&[(10, 10)], (32, 32), 2.0).unwrap();
        let mut best = (0, 0);
        for x in 0..32 {
            for y in 0..32 {
                if map.at(x, y) > map.at(best.0, best.1) {
                    best = (x, y);
                }
            }
        }
        assert_eq!(best, (10, 10));
        assert_eq!(map.at(10, 10), 1.0);
    }

    #[test]
    fn two_distant_fixations_both_reach_one() {
        // farther apart than 6 sigma: each peak is untouched by the other
        let map = heatmap_from_fixations(&[(5, 5), (40, 40)], (48, 48), 2.0).unwrap();
        assert!((map.at(5, 5) - 1.0).abs() <= 1e-6);
        assert!((map.at(40, 40) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn empty_points_give_zero_map() {
        let map = heatmap_from_fixations(&[], (8, 8), 1.0).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sigma_and_out_of_bounds_points() {
        assert!(heatmap_from_fixations(&[(0, 0)], (4, 4), 0.0).is_err());
        assert!(heatmap_from_fixations(&[(9, 0)], (4, 4), 1.0).is_err());
    }

    /// Dense-sum oracle with the same separable truncation semantics:
    /// contribution exp(-dx^2/2s^2) * exp(-dy^2/2s^2) for |dx|,|dy| <= radius.
    fn dense_oracle(points: &[(usize, usize)], shape: (usize, usize), sigma: f64) -> Vec<f64> {
        let (h, w) = shape;
        let radius = (3.0 * sigma).ceil() as isize;
        let mut unique: Vec<(usize, usize)> = Vec::new();
        for &p in points {
            if !unique.contains(&p) {
                unique.push(p);
            }
        }
        let mut out = vec![0.0f64; h * w];
        for x in 0..h {
            for y in 0..w {
                let mut acc = 0.0;
                for &(px, py) in &unique {
                    let dx = x as isize - px as isize;
                    let dy = y as isize - py as isize;
                    if dx.abs() <= radius && dy.abs() <= radius {
                        acc += (-((dx * dx) as f64) / (2.0 * sigma * sigma)).exp()
                            * (-((dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    }
                }
                out[x * w + y] = acc;
            }
        }
        let max = out.iter().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in &mut out {
                *v /= max;
            }
        }
        out
    }

    #[test]
    fn heatmap_matches_dense_gaussian_sum_oracle() {
        let mut rng = SplitMix64::new(77);
        let points: Vec<(usize, usize)> = (0..40)
            .map(|_| (rng.next_range(0, 24), rng.next_range(0, 24)))
            .collect();
        let map = heatmap_from_fixations(&points, (24, 24), 1.7).unwrap();
        let want = dense_oracle(&points, (24, 24), 1.7);
        for (g, w) in map.values().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn bbox_basics() {
        assert_eq!(
            bbox_from_fixations(&[(2, 3), (7, 5)]),
            Some(BoundingBox {
                x_min: 2,
                y_min: 3,
                x_max: 7,
                y_max: 5
            })
        );
        assert_eq!(
            bbox_from_fixations(&[(4, 4)]),
            Some(BoundingBox {
                x_min: 4,
                y_min: 4,
                x_max: 4,
                y_max: 4
            })
        );
        assert_eq!(bbox_from_fixations(&[]), None);
    }

    #[test]
    fn bbox_matches_min_max_scan_and_contains_all_points() {
        let mut rng = SplitMix64::new(91);
        let points: Vec<(usize, usize)> = (0..1000)
            .map(|_| (rng.next_range(0, 128), rng.next_range(0, 128)))
            .collect();
        let b = bbox_from_fixations(&points).unwrap();
        let xs: Vec<usize> = points.iter().map(|p| p.0).collect();
        let ys: Vec<usize> = points.iter().map(|p| p.1).collect();
        assert_eq!(b.x_min, *xs.iter().min().unwrap());
        assert_eq!(b.x_max, *xs.iter().max().unwrap());
        assert_eq!(b.y_min, *ys.iter().min().unwrap());
        assert_eq!(b.y_max, *ys.iter().max().unwrap());
        assert!(points.iter().all(|&(x, y)| b.contains(x, y)));
    }
}
