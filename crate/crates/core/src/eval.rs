//! Localization and saliency metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::postprocess::{BoundingBox, HeatMap};

/// One evaluated image: what the model predicted and what the annotation says.
#[derive(Debug, Clone)]
pub struct LocalizationRecord {
    pub predicted_class: usize,
    pub true_class: usize,
    pub predicted_box: BoundingBox,
    pub gt_boxes: Vec<BoundingBox>,
}

impl LocalizationRecord {
    pub fn new(
        predicted_class: usize,
        true_class: usize,
        predicted_box: BoundingBox,
        gt_boxes: Vec<BoundingBox>,
    ) -> Result<Self> {
        if gt_boxes.is_empty() {
            return Err(Error::Eval(
                "record needs at least one ground-truth box".into(),
            ));
        }
        Ok(Self {
            predicted_class,
            true_class,
            predicted_box,
            gt_boxes,
        })
    }

    fn best_iou(&self) -> f64 {
        self.gt_boxes
            .iter()
            .map(|gt| iou(&self.predicted_box, gt))
            .fold(0.0, f64::max)
    }

    /// Correct class and IoU of at least 0.5 against some instance.
    pub fn localized(&self) -> bool {
        self.predicted_class == self.true_class && self.best_iou() >= 0.5
    }
}

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) + 1).saturating_sub(a.x_min.max(b.x_min));
    let iy = (a.y_max.min(b.y_max) + 1).saturating_sub(a.y_min.max(b.y_min));
    let inter = (ix * iy) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Percentage of records that fail localization (wrong class, or best IoU
/// below 0.5): `100 - accuracy of localization`.
pub fn localization_error(records: &[LocalizationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval(
            "localization_error needs at least one record".into(),
        ));
    }
    let failures = records.iter().filter(|r| !r.localized()).count();
    Ok(100.0 * failures as f64 / records.len() as f64)
}

/// Pixel precision at equal error rate: threshold the map where the
/// predicted-positive count is nearest the ground-truth-positive count
/// (ties prefer the higher threshold), then report `TP / predicted-positive`.
/// An all-zero map scores 0 by convention.
pub fn precision_at_eer(map: &HeatMap, gt_mask: &[bool]) -> Result<f64> {
    let n = map.height() * map.width();
    if gt_mask.len() != n {
        return Err(Error::Shape(format!(
            "mask has {} pixels, map has {}",
            gt_mask.len(),
            n
        )));
    }
    let gt_count = gt_mask.iter().filter(|&&b| b).count();
    if gt_count == 0 {
        return Err(Error::Eval("ground-truth mask has no foreground".into()));
    }
    if map.values().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }

    // sort pixels by map value, descending; walk groups of equal value so a
    // threshold always includes every pixel at that value
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        map.values()[b]
            .partial_cmp(&map.values()[a])
            .expect("map values are finite")
            .then(a.cmp(&b))
    });

    let mut best: Option<(usize, f64)> = None; // (|pp - gt|, precision)
    let mut pp = 0usize;
    let mut tp = 0usize;
    let mut i = 0usize;
    while i < n {
        let value = map.values()[order[i]];
        let mut j = i;
        while j < n && map.values()[order[j]] == value {
            pp += 1;
            if gt_mask[order[j]] {
                tp += 1;
            }
            j += 1;
        }
        let dist = pp.abs_diff(gt_count);
        // strict improvement keeps the higher threshold on distance ties
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, tp as f64 / pp as f64));
        }
        i = j;
    }
    Ok(best.expect("map is nonempty").1)
}

/// Mean recall and mean precision per class for single-proposal matching at
/// IoU >= 0.5. Records are grouped by their ground-truth class; each record
/// contributes exactly one proposal for its own image.
pub fn proposal_metrics(records: &[LocalizationRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Eval(
            "proposal_metrics needs at least one record".into(),
        ));
    }
    // per class: (matched gt boxes, total gt boxes, matched proposals, total proposals)
    let mut per_class: BTreeMap<usize, (usize, usize, usize, usize)> = BTreeMap::new();
    for record in records {
        let entry = per_class.entry(record.true_class).or_insert((0, 0, 0, 0));
        let mut any_match = false;
        for gt in &record.gt_boxes {
            entry.1 += 1;
            if iou(&record.predicted_box, gt) >= 0.5 {
                entry.0 += 1;
                any_match = true;
            }
        }
        entry.3 += 1;
        if any_match {
            entry.2 += 1;
        }
    }
    let classes = per_class.len() as f64;
    let mut mean_recall = 0.0;
    let mut mean_precision = 0.0;
    for (matched_gt, total_gt, matched_props, total_props) in per_class.values() {
        mean_recall += *matched_gt as f64 / *total_gt as f64;
        mean_precision += *matched_props as f64 / *total_props as f64;
    }
    Ok((mean_recall / classes, mean_precision / classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn bb(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identities() {
        let a = bb(0, 0, 9, 9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20, 20, 25, 25)), 0.0);
        // (0,0,9,9) vs (5,5,14,14): intersection 25, union 175
        let sevenths = iou(&a, &bb(5, 5, 14, 14));
        assert!((sevenths - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..100 {
            let a = bb(
                rng.next_range(0, 10),
                rng.next_range(0, 10),
                rng.next_range(10, 20),
                rng.next_range(10, 20),
            );
            let b = bb(
                rng.next_range(0, 15),
                rng.next_range(0, 15),
                rng.next_range(15, 30),
                rng.next_range(15, 30),
            );
            assert_eq!(iou(&a, &b), iou(&b, &a));
        }
    }

    #[test]
    fn localization_error_counts_both_failure_modes() {
        let perfect = LocalizationRecord::new(0, 0, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap();
        assert_eq!(localization_error(std::slice::from_ref(&perfect)).unwrap(), 0.0);

        // correct class but IoU below the 0.5 threshold counts as an error
        let low_iou = LocalizationRecord::new(1, 1, bb(0, 0, 3, 3), vec![bb(0, 0, 9, 9)]).unwrap();
        assert!(!low_iou.localized());

        // wrong class with perfect overlap is still an error
        let wrong_class =
            LocalizationRecord::new(2, 1, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap();
        assert!(!wrong_class.localized());

        let mut records = vec![perfect; 7];
        records.push(low_iou);
        records.push(wrong_class.clone());
        records.push(wrong_class);
        assert_eq!(localization_error(&records).unwrap(), 30.0);
    }

    #[test]
    fn localization_error_is_monotone_in_failures() {
        let ok = LocalizationRecord::new(0, 0, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap();
        let bad = LocalizationRecord::new(1, 0, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap();
        let mut records = vec![ok; 10];
        let mut prev = localization_error(&records).unwrap();
        for i in 0..10 {
            records[i] = bad.clone();
            let now = localization_error(&records).unwrap();
            assert!(now >= prev);
            prev = now;
        }
        assert!(localization_error(&[]).is_err());
    }

    #[test]
    fn multi_instance_matches_any_ground_truth() {
        let record = LocalizationRecord::new(
            0,
            0,
            bb(20, 20, 29, 29),
            vec![bb(0, 0, 9, 9), bb(20, 20, 29, 29)],
        )
        .unwrap();
        assert!(record.localized());
    }

    #[test]
    fn eer_precision_on_exact_and_complement_maps() {
        let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let exact = HeatMap::new(
            4,
            4,
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        assert_eq!(precision_at_eer(&exact, &mask).unwrap(), 1.0);

        let complement = HeatMap::new(
            4,
            4,
            mask.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        assert_eq!(precision_at_eer(&complement, &mask).unwrap(), 0.0);

        let zero = HeatMap::new(4, 4, vec![0.0; 16]).unwrap();
        assert_eq!(precision_at_eer(&zero, &mask).unwrap(), 0.0);
    }

    /// Threshold-sweep oracle: for every candidate threshold, rescan the
    /// whole map to count positives, then pick the count nearest the
    /// ground-truth count (ties toward the higher threshold).
    fn eer_oracle(map: &HeatMap, mask: &[bool]) -> f64 {
        let gt_count = mask.iter().filter(|&&b| b).count();
        if map.values().iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        let mut thresholds: Vec<f32> = map.values().to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut best: Option<(usize, f64)> = None;
        for t in thresholds {
            let mut pp = 0usize;
            let mut tp = 0usize;
            for (i, &v) in map.values().iter().enumerate() {
                if v >= t {
                    pp += 1;
                    if mask[i] {
                        tp += 1;
                    }
                }
            }
            let dist = pp.abs_diff(gt_count);
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, tp as f64 / pp as f64));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn eer_precision_matches_sort_oracle_on_random_pairs() {
        let mut rng = SplitMix64::new(101);
        for _ in 0..100 {
            let values: Vec<f32> = (0..64).map(|_| rng.next_f32()).collect();
            let map = HeatMap::new(8, 8, values).unwrap();
            let mut mask: Vec<bool> = (0..64).map(|_| rng.next_f32() < 0.3).collect();
            if mask.iter().all(|&b| !b) {
                mask[0] = true;
            }
            let got = precision_at_eer(&map, &mask).unwrap();
            let want = eer_oracle(&map, &mask);
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn proposal_metrics_perfect_and_disjoint() {
        let perfect: Vec<LocalizationRecord> = (0..4)
            .map(|c| {
                LocalizationRecord::new(c, c % 2, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap()
            })
            .collect();
        assert_eq!(proposal_metrics(&perfect).unwrap(), (1.0, 1.0));

        let disjoint: Vec<LocalizationRecord> = (0..4)
            .map(|c| {
                LocalizationRecord::new(c, c % 2, bb(0, 0, 4, 4), vec![bb(20, 20, 29, 29)]).unwrap()
            })
            .collect();
        assert_eq!(proposal_metrics(&disjoint).unwrap(), (0.0, 0.0));
        assert!(proposal_metrics(&[]).is_err());
    }

    #[test]
    fn proposal_metrics_match_hand_computed_two_class_fixture() {
        // class 0: image A matches its single gt; image B has 2 gt boxes, one matched.
        //   recall_0 = 2/3, precision_0 = 2/2
        // class 1: image C misses its single gt.
        //   recall_1 = 0/1, precision_1 = 0/1
        // means: recall (2/3 + 0)/2 = 1/3, precision (1 + 0)/2 = 1/2
        let a = LocalizationRecord::new(0, 0, bb(0, 0, 9, 9), vec![bb(0, 0, 9, 9)]).unwrap();
        let b = LocalizationRecord::new(
            0,
            0,
            bb(10, 10, 19, 19),
            vec![bb(10, 10, 19, 19), bb(40, 40, 49, 49)],
        )
        .unwrap();
        let c = LocalizationRecord::new(1, 1, bb(0, 0, 4, 4), vec![bb(30, 30, 39, 39)]).unwrap();
        let (recall, precision) = proposal_metrics(&[a, b, c]).unwrap();
        assert!((recall - (2.0 / 3.0 + 0.0) / 2.0).abs() <= 1e-12);
        assert!((precision - 0.5).abs() <= 1e-12);
    }
}
