//! Relative-distance matching, per-rater best F1, and corpus aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One video's ground truth: several raters' boundary timestamps in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    #[serde(skip)]
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    pub raters: Vec<Vec<f64>>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Input(format!(
                "video {}: duration and fps must be > 0",
                self.video_id
            )));
        }
        if self.raters.is_empty() {
            return Err(Error::Input(format!("video {}: no raters", self.video_id)));
        }
        for r in &self.raters {
            if r.iter().any(|&s| !(0.0..=self.duration).contains(&s)) {
                return Err(Error::Input(format!(
                    "video {}: timestamp outside [0, duration]",
                    self.video_id
                )));
            }
            if r.windows(2).any(|p| p[1] < p[0]) {
                return Err(Error::Input(format!("video {}: rater list not sorted", self.video_id)));
            }
        }
        Ok(())
    }
}

/// Frame-centre timestamp of frame `t`.
pub fn frame_to_seconds(t: usize, fps: f64) -> f64 {
    (t as f64 + 0.5) / fps
}

pub fn rel_dis(detected: f64, truth: f64, duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::Input(format!("duration must be > 0, got {duration}")));
    }
    Ok((detected - truth).abs() / duration)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, ground-truth index)`.
    pub matched_pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }
}

fn ratio(num: usize, den: usize, empty_is_perfect: bool) -> f64 {
    if den == 0 {
        if empty_is_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`; 1 when there is nothing to detect and nothing detected.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    let p = ratio(tp, tp + fp, false);
    let r = ratio(tp, tp + fn_, false);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Maximum one-to-one matching with `rel_dis <= threshold`.
///
/// Each detection's admissible ground truths form a contiguous run of the
/// sorted list, so pairing every detection with the earliest unmatched
/// admissible ground truth is optimal.
pub fn match_boundaries(dets: &[f64], gts: &[f64], threshold: f64, duration: f64) -> Result<MatchResult> {
    if !(duration > 0.0) {
        return Err(Error::Input(format!("duration must be > 0, got {duration}")));
    }
    let mut pairs = Vec::new();
    let mut g = 0;
    for (i, &d) in dets.iter().enumerate() {
        while g < gts.len() && gts[g] < d && rel_dis(d, gts[g], duration)? > threshold {
            g += 1;
        }
        if g < gts.len() && rel_dis(d, gts[g], duration)? <= threshold {
            pairs.push((i, g));
            g += 1;
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        matched_pairs: pairs,
    })
}

/// Best rater by F1 (ties to the lowest index).
pub fn video_f1(dets: &[f64], ann: &AnnotationSet, threshold: f64) -> Result<(MatchResult, usize)> {
    if ann.raters.is_empty() {
        return Err(Error::Input(format!("video {}: no raters", ann.video_id)));
    }
    let mut best: Option<(MatchResult, usize)> = None;
    for (r, gts) in ann.raters.iter().enumerate() {
        let m = match_boundaries(dets, gts, threshold, ann.duration)?;
        if best.as_ref().map_or(true, |(b, _)| m.f1() > b.f1()) {
            best = Some((m, r));
        }
    }
    Ok(best.expect("at least one rater"))
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoEval {
    pub video_id: String,
    pub f1: Vec<f64>,
    pub best_rater: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdRow>,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    pub videos: Vec<VideoEval>,
}

impl EvalReport {
    /// F1 at the row whose threshold is closest to `threshold`.
    pub fn f1_at(&self, threshold: f64) -> f64 {
        self.rows
            .iter()
            .min_by(|a, b| {
                (a.threshold - threshold)
                    .abs()
                    .total_cmp(&(b.threshold - threshold).abs())
            })
            .map_or(0.0, |r| r.f1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:.2},{:.6},{:.6},{:.6}", r.threshold, r.precision, r.recall, r.f1);
        }
        let _ = writeln!(s, "avg,{:.6},{:.6},{:.6}", self.avg_precision, self.avg_recall, self.avg_f1);
        s
    }
}

/// Per threshold: each video's best rater, counts summed over the corpus.
pub fn corpus_eval(
    predictions: &BTreeMap<String, Vec<f64>>,
    annotations: &BTreeMap<String, AnnotationSet>,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let missing: Vec<&str> = predictions
        .keys()
        .filter(|id| !annotations.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "no annotation for video ids: {}",
            missing.join(", ")
        )));
    }
    let mut videos: Vec<VideoEval> = predictions
        .keys()
        .map(|id| VideoEval {
            video_id: id.clone(),
            f1: Vec::with_capacity(thresholds.len()),
            best_rater: Vec::with_capacity(thresholds.len()),
        })
        .collect();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for ((id, dets), v) in predictions.iter().zip(videos.iter_mut()) {
            let (m, r) = video_f1(dets, &annotations[id], th)?;
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            v.f1.push(m.f1());
            v.best_rater.push(r);
        }
        rows.push(ThresholdRow {
            threshold: th,
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp, fn_ == 0),
            recall: ratio(tp, tp + fn_, fp == 0),
            f1: f1_from_counts(tp, fp, fn_),
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        avg_precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        avg_recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        avg_f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        rows,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(raters: Vec<Vec<f64>>) -> AnnotationSet {
        AnnotationSet {
            video_id: "v".into(),
            duration: 10.0,
            fps: 10.0,
            raters,
        }
    }

    #[test]
    fn rel_dis_examples() {
        assert!((rel_dis(10.4, 10.0, 10.0).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(rel_dis(3.0, 3.0, 10.0).unwrap(), 0.0);
        assert_eq!(rel_dis(0.0, 5.0, 10.0).unwrap(), 0.5);
        assert!(matches!(rel_dis(1.0, 1.0, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn match_examples() {
        let m = match_boundaries(&[5.1], &[5.0], 0.05, 10.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_boundaries(&[], &[5.0], 0.05, 10.0).unwrap();
        assert_eq!((m.tp, m.fn_), (0, 1));
        let m = match_boundaries(&[4.9, 5.1], &[5.0], 0.05, 10.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn greedy_skips_to_reach_later_truth() {
        // pairing 5.0 with its nearest truth 5.2 would strand 5.6
        let m = match_boundaries(&[5.0, 5.6], &[4.6, 5.2], 0.05, 10.0).unwrap();
        assert_eq!(m.tp, 2);
        assert_eq!(m.matched_pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn best_rater_selection() {
        let a = ann(vec![vec![2.0, 7.0], vec![9.0]]);
        let (m, r) = video_f1(&[2.0, 7.0], &a, 0.05).unwrap();
        assert_eq!((r, m.f1()), (0, 1.0));
        let (m, _) = video_f1(&[], &a, 0.05).unwrap();
        assert_eq!(m.f1(), 0.0);
        // both raters give F1 0.75
        let tie = ann(vec![vec![1.0, 3.0, 5.0, 8.0], vec![1.0, 3.0, 5.0, 9.5]]);
        let (m, r) = video_f1(&[1.0, 3.0, 5.0, 6.5], &tie, 0.05).unwrap();
        assert_eq!(r, 0);
        assert!((m.f1() - 0.75).abs() < 1e-12);
        let (_, r) = video_f1(&[], &ann(vec![vec![], vec![]]), 0.05).unwrap();
        assert_eq!(r, 0);
    }

    #[test]
    fn empty_lists_are_perfect() {
        assert_eq!(f1_from_counts(0, 0, 0), 1.0);
        assert_eq!(f1_from_counts(0, 2, 0), 0.0);
    }

    #[test]
    fn corpus_examples() {
        let mut anns = BTreeMap::new();
        anns.insert("a".to_string(), AnnotationSet { video_id: "a".into(), ..ann(vec![vec![3.0]]) });
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), vec![3.0]);
        let r = corpus_eval(&preds, &anns, &default_thresholds()).unwrap();
        assert_eq!(r.rows.len(), 10);
        assert!(r.rows.iter().all(|row| row.f1 == 1.0));
        assert_eq!(r.avg_f1, 1.0);

        anns.insert("b".to_string(), AnnotationSet { video_id: "b".into(), ..ann(vec![vec![2.0]]) });
        preds.insert("b".to_string(), vec![8.0]);
        let r = corpus_eval(&preds, &anns, &[0.05]).unwrap();
        assert_eq!((r.rows[0].tp, r.rows[0].fp, r.rows[0].fn_), (1, 1, 1));
        assert_eq!((r.rows[0].precision, r.rows[0].recall, r.rows[0].f1), (0.5, 0.5, 0.5));

        preds.insert("zz".to_string(), vec![]);
        let err = corpus_eval(&preds, &anns, &[0.05]).unwrap_err();
        assert!(err.to_string().contains("zz"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn csv_layout() {
        let mut anns = BTreeMap::new();
        anns.insert("a".to_string(), ann(vec![vec![3.0]]));
        let preds = BTreeMap::from([("a".to_string(), vec![3.0])]);
        let csv = corpus_eval(&preds, &anns, &default_thresholds()).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "threshold,precision,recall,f1");
        assert!(lines[1].starts_with("0.05,"));
        assert!(lines[11].starts_with("avg,"));
    }
}
