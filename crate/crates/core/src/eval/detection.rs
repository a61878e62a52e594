//! Temporal class activation maps, proposal extraction and average precision.

use std::cmp::Ordering;

use crate::datahub::Interval;
use crate::numgrad::Tensor;

use super::Prototype;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub video_id: String,
    /// Episode-local class.
    pub class: usize,
    pub interval: Interval,
    pub score: f64,
}

/// `A[i, k] = weight_i · cos(f_i, p_k)` for unit-norm (or zero) rows.
pub fn tcam(f: &Tensor, weights: &[f64], prototypes: &[Prototype]) -> Tensor {
    let t = f.rows();
    let k = prototypes.len();
    let mut a = Tensor::zeros(&[t, k]);
    for (i, w) in weights.iter().enumerate().take(t) {
        for (c, p) in prototypes.iter().enumerate() {
            a.data_mut()[i * k + c] = w * Tensor::dot(f.row(i), &p.vector);
        }
    }
    a
}

/// `|a ∩ b| / |a ∪ b|`, 0 for disjoint or empty intervals.
pub fn temporal_iou(a: Interval, b: Interval) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Thresholds `0.1, 0.2, …, 0.9` of the per-class maximum.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Maximal runs of `values[i] > cut`.
fn runs_above(values: &[f64], cut: f64) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in values.iter().enumerate() {
        match (v > cut, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Interval::new(s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Interval::new(s, values.len()));
    }
    out
}

/// Greedy non-maximum suppression; a candidate is dropped when its tIoU with
/// an already kept interval is at least `tiou`. Stable on score ties.
pub fn nms(mut candidates: Vec<DetectionResult>, tiou: f64) -> Vec<DetectionResult> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<DetectionResult> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| k.class != c.class || k.video_id != c.video_id || temporal_iou(k.interval, c.interval) < tiou)
        {
            kept.push(c);
        }
    }
    kept
}

/// Proposals from one query's activation map `A: T×K`.
///
/// For every class and every relative threshold θ, maximal runs with
/// `A[i,k] > θ · max_i A[i,k]` become proposals scored by the run mean of A.
/// Duplicates are merged by NMS at tIoU 0.5.
pub fn extract_proposals(video_id: &str, a: &Tensor, thresholds: &[f64]) -> Vec<DetectionResult> {
    let t = a.rows();
    let k = a.cols();
    let mut out = Vec::new();
    for class in 0..k {
        let column: Vec<f64> = (0..t).map(|i| a.get(i, class)).collect();
        let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // NaN-safe: also skips columns with no finite positive activation.
        if max.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            continue;
        }
        let mut candidates = Vec::new();
        for &theta in thresholds {
            for iv in runs_above(&column, theta * max) {
                let score = column[iv.start..iv.end].iter().sum::<f64>() / iv.len() as f64;
                candidates.push(DetectionResult {
                    video_id: video_id.to_string(),
                    class,
                    interval: iv,
                    score,
                });
            }
        }
        out.extend(nms(candidates, 0.5));
    }
    out
}

/// A ground-truth instance: video and interval.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub interval: Interval,
}

/// All-point interpolated AP for one class. Detections are ranked by
/// descending score (stable); each one matches the unmatched ground truth in
/// the same video with the highest tIoU, if that tIoU reaches `threshold`.
/// Returns `None` without ground truth.
pub fn average_precision(detections: &[DetectionResult], truths: &[GroundTruth], threshold: f64) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| match detections[b].score.total_cmp(&detections[a].score) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut used = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut recalls = Vec::with_capacity(order.len());
    let mut precisions = Vec::with_capacity(order.len());
    for (rank, &d) in order.iter().enumerate() {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truths.iter().enumerate() {
            if used[g] || gt.video_id != det.video_id {
                continue;
            }
            let iou = temporal_iou(det.interval, gt.interval);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
        recalls.push(tp as f64 / truths.len() as f64);
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    // Precision envelope from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// tIoU thresholds `0.50, 0.55, …, 0.95`.
pub fn tiou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(v: &str, s: usize, e: usize, score: f64) -> DetectionResult {
        DetectionResult {
            video_id: v.into(),
            class: 0,
            interval: Interval::new(s, e),
            score,
        }
    }

    fn gt(v: &str, s: usize, e: usize) -> GroundTruth {
        GroundTruth {
            video_id: v.into(),
            interval: Interval::new(s, e),
        }
    }

    #[test]
    fn iou_cases() {
        assert!((temporal_iou(Interval::new(0, 2), Interval::new(1, 3)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou(Interval::new(2, 5), Interval::new(2, 5)), 1.0);
        assert_eq!(temporal_iou(Interval::new(0, 2), Interval::new(2, 4)), 0.0);
    }

    #[test]
    fn single_run_proposal() {
        let a = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = extract_proposals("q", &a, &[0.5]);
        assert_eq!(p, vec![det("q", 1, 3, 1.0)]);
        // All default thresholds give the same run; NMS keeps one.
        assert_eq!(extract_proposals("q", &a, &default_thresholds()), vec![det("q", 1, 3, 1.0)]);
    }

    #[test]
    fn zero_column_has_no_proposals() {
        assert!(extract_proposals("q", &Tensor::zeros(&[5, 2]), &default_thresholds()).is_empty());
    }

    #[test]
    fn disjoint_runs_survive_nms() {
        let a = Tensor::new(vec![5, 1], vec![0.8, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = extract_proposals("q", &a, &[0.5]);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].interval, Interval::new(3, 5));
        assert_eq!(p[1].interval, Interval::new(0, 1));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[det("a", 0, 4, 1.0)], &[gt("a", 0, 4)], 0.5), Some(1.0));
        // tIoU 0.4 below threshold.
        assert_eq!(average_precision(&[det("a", 0, 4, 1.0)], &[gt("a", 0, 10)], 0.5), Some(0.0));
        // TP, FP, TP.
        let dets = [det("a", 0, 2, 0.9), det("a", 5, 6, 0.8), det("b", 3, 7, 0.7)];
        let gts = [gt("a", 0, 2), gt("b", 3, 7)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(average_precision(&dets, &[], 0.5).is_none());
        // Wrong video never matches.
        assert_eq!(average_precision(&[det("b", 0, 2, 1.0)], &[gt("a", 0, 2)], 0.5), Some(0.0));
    }

    #[test]
    fn tcam_cases() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.6, 0.8]]).unwrap();
        let protos = vec![
            Prototype { class: 0, vector: vec![1.0, 0.0], degenerate: false },
            Prototype { class: 1, vector: vec![0.0, 1.0], degenerate: false },
        ];
        let a = tcam(&f, &[1.0, 0.5], &protos);
        assert_eq!(a.data(), &[1.0, 0.0, 0.3, 0.4]);
        let a = tcam(&f, &[0.0, 0.5], &protos);
        assert_eq!(a.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn tiou_grid() {
        let t = tiou_thresholds();
        assert_eq!(t.len(), 10);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }
}
