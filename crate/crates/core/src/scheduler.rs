//! Dynamic inference: peak estimation, partial exit around detected
//! boundaries, compaction, repeat-padding, and MAC accounting.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::detector::{detector_forward, ScoreSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seqfeat::{aggregate_scales, run_stage, unfold_windows, FrameFeatureSequence, MultiScaleFeature, WindowTensor};
use crate::tensor::Tensor;

/// Strict interior local maxima above `eps`.
pub fn estimate_peaks(p: &[f64], eps: f64) -> Vec<usize> {
    if p.len() < 3 {
        return Vec::new();
    }
    (1..p.len() - 1)
        .filter(|&t| p[t] > p[t - 1] && p[t] > p[t + 1] && p[t] > eps)
        .collect()
}

/// `keep[t] == false` marks frames that exit at `detector_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExitMask {
    pub keep: Vec<bool>,
    pub detector_index: usize,
    pub radius: usize,
}

pub fn build_exit_mask(boundaries: &[usize], radius: usize, t_len: usize, detector_index: usize) -> ExitMask {
    let mut keep = vec![true; t_len];
    for &b in boundaries {
        let lo = b.saturating_sub(radius);
        let hi = (b + radius).min(t_len.saturating_sub(1));
        for k in keep.iter_mut().take(hi + 1).skip(lo) {
            *k = false;
        }
    }
    ExitMask {
        keep,
        detector_index,
        radius,
    }
}

/// Keeps the rows whose origin timestamp is still marked `keep`.
pub fn compact(seq: &FrameFeatureSequence, mask: &ExitMask) -> Result<FrameFeatureSequence> {
    let c = seq.channels();
    let mut data = Vec::new();
    let mut origin = Vec::new();
    for (i, &o) in seq.origin().iter().enumerate() {
        let keep = *mask.keep.get(o).ok_or_else(|| {
            Error::Shape(format!("origin {o} outside mask of length {}", mask.keep.len()))
        })?;
        if keep {
            data.extend_from_slice(seq.row(i));
            origin.push(o);
        }
    }
    let rows = origin.len();
    FrameFeatureSequence::new(Tensor::from_vec(&[rows, c], data)?, seq.stage_index(), origin)
}

/// Padded position to the kept origin frame whose features fill it.
pub type PadProvenance = BTreeMap<usize, usize>;

/// Nearest kept origin for every position in `[0, t_len)`, ties to the
/// earlier frame. `origins` must be non-empty and strictly increasing.
fn nearest_kept(origins: &[usize], t_len: usize) -> Vec<usize> {
    let mut src = Vec::with_capacity(t_len);
    let mut j = 0;
    for t in 0..t_len {
        while j + 1 < origins.len() && origins[j + 1] <= t {
            j += 1;
        }
        let left = origins[j];
        let pick = if left >= t {
            left
        } else if j + 1 < origins.len() {
            let right = origins[j + 1];
            if right - t < t - left {
                right
            } else {
                left
            }
        } else {
            left
        };
        src.push(pick);
    }
    src
}

/// Fills every missing origin position with the nearest kept frame.
/// Returns `None` for an empty sequence (the detector is skipped).
pub fn pad_to_full(seq: &FrameFeatureSequence, t_len: usize) -> Option<(Tensor, PadProvenance)> {
    if seq.is_empty() {
        return None;
    }
    let (rows, prov) = pad_plan(seq.origin(), t_len);
    let c = seq.channels();
    let mut out = Tensor::zeros(&[t_len, c]);
    for (t, &r) in rows.iter().enumerate() {
        out.data_mut()[t * c..(t + 1) * c].copy_from_slice(seq.row(r));
    }
    Some((out, prov))
}

/// Row index feeding each position, and the provenance of padded positions.
fn pad_plan(origins: &[usize], t_len: usize) -> (Vec<usize>, PadProvenance) {
    let src = nearest_kept(origins, t_len);
    let row_of: BTreeMap<usize, usize> = origins.iter().enumerate().map(|(i, &o)| (o, i)).collect();
    let mut prov = PadProvenance::new();
    let rows = src
        .iter()
        .enumerate()
        .map(|(t, &o)| {
            if o != t {
                prov.insert(t, o);
            }
            row_of[&o]
        })
        .collect();
    (rows, prov)
}

fn pad_multiscale(r: &MultiScaleFeature, origins: &[usize], t_len: usize) -> Result<(MultiScaleFeature, PadProvenance)> {
    let (rows, prov) = pad_plan(origins, t_len);
    let (l, c) = (r.scale_count(), r.data().dim(2));
    let chunk = l * c;
    let mut out = Tensor::zeros(&[t_len, l, c]);
    for (t, &row) in rows.iter().enumerate() {
        out.data_mut()[t * chunk..(t + 1) * chunk].copy_from_slice(&r.data().data()[row * chunk..(row + 1) * chunk]);
    }
    Ok((MultiScaleFeature::from_tensor(out)?, prov))
}

/// Per-detector exit threshold `ε` and radius `t_μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    pub thresholds: Vec<f64>,
    pub radii: Vec<usize>,
}

impl ExitPolicy {
    pub fn from_model(model: &Model) -> Self {
        ExitPolicy {
            thresholds: model.config.detectors.iter().map(|d| d.exit_threshold).collect(),
            radii: model.config.detectors.iter().map(|d| d.exit_radius).collect(),
        }
    }

    /// Same thresholds, one radius for every detector.
    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radii.iter_mut().for_each(|r| *r = radius);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FlopsLedger {
    pub backbone_macs: Vec<u64>,
    pub detector_macs: Vec<u64>,
    pub frames_processed: Vec<usize>,
}

impl FlopsLedger {
    pub fn total(&self) -> u64 {
        self.backbone_macs.iter().sum::<u64>() + self.detector_macs.iter().sum::<u64>()
    }

    pub fn per_stage(&self) -> Vec<u64> {
        self.backbone_macs
            .iter()
            .zip(&self.detector_macs)
            .map(|(b, d)| b + d)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitState {
    /// 1-based detector at which each frame exited.
    pub exit_stage: Vec<usize>,
    pub recorded_boundaries: Vec<Vec<usize>>,
    pub pad_provenance: Vec<PadProvenance>,
    pub final_scores: Vec<f64>,
    pub masks: Vec<ExitMask>,
    /// Full-length scores of every detector that ran.
    pub scores: Vec<Option<ScoreSequence>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub boundaries: Vec<usize>,
    pub state: ExitState,
    pub ledger: FlopsLedger,
}

pub fn run_dynamic_inference(features: &FrameFeatureSequence, model: &Model, policy: &ExitPolicy) -> Result<InferenceOutput> {
    run_with_scorer(features, model, policy, &mut |l, windows| {
        detector_forward(windows, &model.detectors[l - 1], l)
    })
}

/// The exit loop with a pluggable scoring function `(detector, windows) -> scores`.
pub fn run_with_scorer(
    features: &FrameFeatureSequence,
    model: &Model,
    policy: &ExitPolicy,
    scorer: &mut dyn FnMut(usize, &WindowTensor) -> Result<ScoreSequence>,
) -> Result<InferenceOutput> {
    let depth = model.depth();
    if policy.thresholds.len() != depth || policy.radii.len() != depth {
        return Err(Error::Config(format!(
            "exit policy covers {} / {} detectors, model has {}",
            policy.thresholds.len(),
            policy.radii.len(),
            depth
        )));
    }
    let t_len = features.len();
    if t_len == 0 {
        return Err(Error::Input("empty feature sequence".into()));
    }
    let k = model.config.half_width;
    let w = model.config.window_len();
    let mut ledger = FlopsLedger {
        backbone_macs: vec![0; depth],
        detector_macs: vec![0; depth],
        frames_processed: vec![0; depth],
    };
    let mut state = ExitState {
        exit_stage: vec![0; t_len],
        recorded_boundaries: vec![Vec::new(); depth],
        pad_provenance: vec![PadProvenance::new(); depth],
        final_scores: vec![f64::NAN; t_len],
        masks: Vec::with_capacity(depth),
        scores: vec![None; depth],
    };
    let mut current = FrameFeatureSequence::new(features.data().clone(), 0, (0..t_len).collect())?;
    let mut stage_outputs: Vec<FrameFeatureSequence> = Vec::with_capacity(depth);

    for l in 1..=depth {
        let stage = &model.stages[l - 1];
        let out = run_stage(&current, stage)?;
        ledger.frames_processed[l - 1] = out.len();
        ledger.backbone_macs[l - 1] = out.len() as u64 * stage.flops_per_frame();
        if out.is_empty() {
            state.masks.push(ExitMask {
                keep: vec![false; t_len],
                detector_index: l,
                radius: policy.radii[l - 1],
            });
            stage_outputs.push(out.clone());
            current = out;
            continue;
        }
        let kept = out.origin().to_vec();
        let mut scales = Vec::with_capacity(l);
        for prev in &stage_outputs {
            scales.push(select_origins(prev, &kept)?);
        }
        scales.push(out.clone());
        let r = aggregate_scales(&scales, l)?;
        let (padded, prov) = pad_multiscale(&r, &kept, t_len)?;
        let windows = unfold_windows(&padded, k)?;
        let scores = scorer(l, &windows)?;
        ledger.detector_macs[l - 1] = t_len as u64 * model.detectors[l - 1].macs_per_timestamp(w);

        let recorded: Vec<usize> = estimate_peaks(&scores.values, policy.thresholds[l - 1])
            .into_iter()
            .filter(|t| !prov.contains_key(t))
            .collect();
        let mask = build_exit_mask(&recorded, policy.radii[l - 1], t_len, l);
        for &o in &kept {
            if !mask.keep[o] || l == depth {
                state.exit_stage[o] = l;
                state.final_scores[o] = scores.values[o];
            }
        }
        state.recorded_boundaries[l - 1] = recorded;
        state.pad_provenance[l - 1] = prov;
        state.scores[l - 1] = Some(scores);
        current = compact(&out, &mask)?;
        state.masks.push(mask);
        stage_outputs.push(out);
    }

    let mut boundaries: Vec<usize> = state.recorded_boundaries.iter().flatten().copied().collect();
    boundaries.sort_unstable();
    let before = boundaries.len();
    boundaries.dedup();
    debug_assert_eq!(before, boundaries.len(), "a frame was recorded by two detectors");
    debug_assert!(
        verify_exit_state(&state, &ledger, model).is_empty(),
        "exit invariants violated: {:?}",
        verify_exit_state(&state, &ledger, model)
    );
    Ok(InferenceOutput {
        boundaries,
        state,
        ledger,
    })
}

fn select_origins(seq: &FrameFeatureSequence, origins: &[usize]) -> Result<FrameFeatureSequence> {
    let c = seq.channels();
    let mut data = Vec::with_capacity(origins.len() * c);
    let mut i = 0;
    for &o in origins {
        while i < seq.len() && seq.origin()[i] < o {
            i += 1;
        }
        if i == seq.len() || seq.origin()[i] != o {
            return Err(Error::Alignment(format!(
                "frame {o} missing from stage {} features",
                seq.stage_index()
            )));
        }
        data.extend_from_slice(seq.row(i));
    }
    FrameFeatureSequence::new(
        Tensor::from_vec(&[origins.len(), c], data)?,
        seq.stage_index(),
        origins.to_vec(),
    )
}

/// Checks partition, suppression, disjointness, mask shape and ledger
/// consistency; returns one message per violation.
pub fn verify_exit_state(state: &ExitState, ledger: &FlopsLedger, model: &Model) -> Vec<String> {
    let mut v = Vec::new();
    let t_len = state.exit_stage.len();
    let depth = model.depth();
    for (t, &s) in state.exit_stage.iter().enumerate() {
        if s == 0 || s > depth {
            v.push(format!("frame {t} has exit stage {s}"));
        }
    }
    let mut counts = vec![0usize; depth + 1];
    for &s in &state.exit_stage {
        counts[s.min(depth)] += 1;
    }
    if counts.iter().sum::<usize>() != t_len {
        v.push("exit stages do not partition the frames".into());
    }
    let mut seen = BTreeMap::new();
    for (l, rec) in state.recorded_boundaries.iter().enumerate() {
        for &b in rec {
            if state.pad_provenance[l].contains_key(&b) {
                v.push(format!("detector {} recorded padded position {b}", l + 1));
            }
            if let Some(prev) = seen.insert(b, l) {
                v.push(format!("frame {b} recorded by detectors {} and {}", prev + 1, l + 1));
            }
            if state.exit_stage.get(b) != Some(&(l + 1)) {
                v.push(format!("boundary {b} of detector {} did not exit there", l + 1));
            }
        }
    }
    for (l, m) in state.masks.iter().enumerate() {
        if state.scores[l].is_none() {
            continue;
        }
        let radius_ok = m.keep == build_exit_mask(&state.recorded_boundaries[l], m.radius, t_len, l + 1).keep;
        if !radius_ok {
            v.push(format!("mask {} is not a union of intervals around its boundaries", l + 1));
        }
    }
    for l in 0..depth {
        let want = ledger.frames_processed[l] as u64 * model.stages[l].flops_per_frame();
        if ledger.backbone_macs[l] != want {
            v.push(format!("stage {} backbone MACs {} != {}", l + 1, ledger.backbone_macs[l], want));
        }
        if l > 0 && ledger.frames_processed[l] > ledger.frames_processed[l - 1] {
            v.push(format!("stage {} processed more frames than stage {}", l + 1, l));
        }
    }
    v
}

/// Scores of every detector on the full, un-exited sequence.
pub fn static_scores(features: &FrameFeatureSequence, model: &Model) -> Result<Vec<ScoreSequence>> {
    let mut stage_outputs = Vec::with_capacity(model.depth());
    let mut current = features.clone();
    let mut scores = Vec::with_capacity(model.depth());
    for l in 1..=model.depth() {
        current = run_stage(&current, &model.stages[l - 1])?;
        stage_outputs.push(current.clone());
        let r = aggregate_scales(&stage_outputs, l)?;
        let windows = unfold_windows(&r, model.config.half_width)?;
        scores.push(detector_forward(&windows, &model.detectors[l - 1], l)?);
    }
    Ok(scores)
}

/// Boundaries of the full-depth model without exits: peaks of the last detector.
pub fn static_inference(features: &FrameFeatureSequence, model: &Model) -> Result<Vec<usize>> {
    let scores = static_scores(features, model)?;
    let last = scores.last().expect("at least one detector");
    Ok(estimate_peaks(&last.values, model.config.detectors[model.depth() - 1].exit_threshold))
}
