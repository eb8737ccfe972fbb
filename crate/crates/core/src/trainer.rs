//! Soft labels, weighted multi-detector BCE, and the Adam training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::ScoreSequence;
use crate::error::{Error, Result};
use crate::layers::{zeros_like, Module, TensorKind, BN_MOMENTUM};
use crate::model::{BatchCache, Model};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Gaussian-smoothed boundary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSequence {
    pub values: Vec<f64>,
    pub source_boundaries: Vec<usize>,
    pub sigma: f64,
}

/// Peak-normalized Gaussian bumps truncated beyond `(window - 1) / 2` frames,
/// merged by element-wise max.
pub fn make_soft_labels(boundaries: &[usize], t_len: usize, sigma: f64, window: usize) -> Result<SoftLabelSequence> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if let Some(b) = boundaries.iter().find(|&&b| b >= t_len) {
        return Err(Error::Input(format!("boundary {b} outside [0, {t_len})")));
    }
    let reach = window.saturating_sub(1) / 2;
    let mut values = vec![0.0f64; t_len];
    for &b in boundaries {
        let lo = b.saturating_sub(reach);
        let hi = (b + reach).min(t_len - 1);
        for (t, v) in values.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = t as f64 - b as f64;
            let g = if t == b { 1.0 } else { (-d * d / (2.0 * sigma * sigma)).exp() };
            *v = v.max(g);
        }
    }
    Ok(SoftLabelSequence {
        values,
        source_boundaries: boundaries.to_vec(),
        sigma,
    })
}

/// Mean binary cross-entropy of probabilities against soft targets.
pub fn detector_loss(p: &ScoreSequence, y: &SoftLabelSequence) -> Result<f64> {
    if p.len() != y.values.len() {
        return Err(Error::Shape(format!(
            "score length {} differs from label length {}",
            p.len(),
            y.values.len()
        )));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (&pt, &yt) in p.values.iter().zip(&y.values) {
        if !(pt > 0.0 && pt < 1.0) {
            return Err(Error::numeric(
                format!("detector {} loss", p.detector_index),
                format!("probability {pt} outside (0, 1)"),
            ));
        }
        sum -= yt * pt.ln() + (1.0 - yt) * (1.0 - pt).ln();
    }
    Ok(sum / p.len() as f64)
}

pub fn total_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} losses but {} loss weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(losses.iter().zip(weights).map(|(l, a)| l * a).sum())
}

/// Mean BCE computed from logits, plus its gradient w.r.t. the logits.
pub fn logit_bce(z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = z.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (&zt, &yt) in z.iter().zip(y) {
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        loss += softplus(zt) - yt * zt;
        grad.push((sigmoid(zt) - yt) / n);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

/// Learning-rate schedule over the total number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 8,
            sigma: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam moments must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training video: raw features `[T, C_in]` and annotated boundary frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: Tensor,
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub per_detector: Vec<f64>,
    pub total: f64,
}

pub struct Batch {
    pub x: Tensor,
    pub t_len: usize,
    pub labels: Vec<f64>,
}

/// Stacks equal-length examples into one batch with soft labels.
pub fn make_batch(examples: &[&TrainingExample], sigma: f64, window: usize) -> Result<Batch> {
    let t_len = examples[0].features.dim(0);
    let c = examples[0].features.dim(1);
    let mut data = Vec::with_capacity(examples.len() * t_len * c);
    let mut labels = Vec::with_capacity(examples.len() * t_len);
    for ex in examples {
        if ex.features.dim(0) != t_len || ex.features.dim(1) != c {
            return Err(Error::Shape("batch examples differ in shape".into()));
        }
        data.extend_from_slice(ex.features.data());
        labels.extend(make_soft_labels(&ex.boundaries, t_len, sigma, window)?.values);
    }
    Ok(Batch {
        x: Tensor::from_vec(&[examples.len() * t_len, c], data)?,
        t_len,
        labels,
    })
}

pub struct StepOutput {
    pub per_detector: Vec<f64>,
    pub total: f64,
    pub grads: Model,
    pub cache: BatchCache,
}

pub fn loss_weights(model: &Model) -> Vec<f64> {
    model.config.detectors.iter().map(|d| d.loss_weight).collect()
}

/// Training-mode forward, weighted loss and full backward for one batch.
pub fn loss_and_grad(model: &Model, batch: &Batch) -> Result<StepOutput> {
    let (logits, cache) = model.forward_batch(&batch.x, batch.t_len, true)?;
    let alphas = loss_weights(model);
    let mut per_detector = Vec::with_capacity(logits.len());
    let mut dlogits = Vec::with_capacity(logits.len());
    for (z, &a) in logits.iter().zip(&alphas) {
        let (loss, mut g) = logit_bce(z.data(), &batch.labels);
        per_detector.push(loss);
        g.iter_mut().for_each(|v| *v *= a);
        dlogits.push(Tensor::from_vec(z.shape(), g)?);
    }
    let total = total_loss(&per_detector, &alphas)?;
    let mut grads = zeros_like(model);
    model.backward_batch(&cache, &dlogits, &mut grads);
    Ok(StepOutput {
        per_detector,
        total,
        grads,
        cache,
    })
}

/// Forward-only training-mode loss for one batch.
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let (logits, _) = model.forward_batch(&batch.x, batch.t_len, true)?;
    let per: Vec<f64> = logits.iter().map(|z| logit_bce(z.data(), &batch.labels).0).collect();
    total_loss(&per, &loss_weights(model))
}

pub fn check_gradients(grads: &Model) -> Result<()> {
    let mut bad = None;
    grads.visit("", &mut |name, kind, t| {
        if bad.is_none() && kind == TensorKind::Param && !t.is_finite() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::numeric(format!("gradient of {name}"), "non-finite value")),
        None => Ok(()),
    }
}

/// Adam state over every trainable tensor, in visit order.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, kind, t| {
            if kind == TensorKind::Param {
                m.push(vec![0.0; t.len()]);
            }
        });
        Adam {
            v: m.clone(),
            m,
            step: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &Model, lr: f64) {
        let mut flat: Vec<Vec<f64>> = Vec::new();
        grads.visit("", &mut |_, kind, t| {
            if kind == TensorKind::Param {
                flat.push(t.data().to_vec());
            }
        });
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let eps = self.cfg.adam_eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, kind, t| {
            if kind != TensorKind::Param {
                return;
            }
            let g = &flat[i];
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
    }
}

fn batches_per_epoch(data: &[TrainingExample], batch_size: usize) -> usize {
    let mut groups: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for ex in data {
        *groups.entry((ex.features.dim(0), ex.features.dim(1))).or_default() += 1;
    }
    groups.values().map(|n| n.div_ceil(batch_size)).sum()
}

/// Groups examples by length, shuffles within groups, chunks into batches
/// and shuffles the batch order.
fn epoch_batches(data: &[TrainingExample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        groups
            .entry((ex.features.dim(0), ex.features.dim(1)))
            .or_default()
            .push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// Trains `model` in place and returns the per-epoch loss curve.
///
/// Every batch runs all detectors over the full sequences; no frame exits
/// during training.
pub fn fit(data: &[TrainingExample], model: &mut Model, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let alphas = loss_weights(model);
    if alphas.iter().all(|&a| a == 0.0) {
        return Err(Error::Config("all loss weights are zero".into()));
    }
    let window = model.config.window_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * batches_per_epoch(data, cfg.batch_size);
    let mut done = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut per = vec![0.0; model.depth()];
        let mut rows = 0usize;
        for idx in epoch_batches(data, cfg.batch_size, &mut rng) {
            let examples: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
            let batch = make_batch(&examples, cfg.sigma, window)?;
            let step = loss_and_grad(model, &batch).map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::numeric(format!("epoch {epoch}: {stage}"), detail),
                other => other,
            })?;
            if !step.total.is_finite() {
                return Err(Error::numeric(format!("epoch {epoch}"), "loss diverged"));
            }
            check_gradients(&step.grads).map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::numeric(format!("epoch {epoch}: {stage}"), detail),
                other => other,
            })?;
            let n = batch.labels.len();
            for (acc, l) in per.iter_mut().zip(&step.per_detector) {
                *acc += l * n as f64;
            }
            rows += n;
            model.update_running(&step.cache, BN_MOMENTUM);
            let lr = cfg.schedule.rate(cfg.learning_rate, done, total_steps);
            adam.update(model, &step.grads, lr);
            done += 1;
        }
        per.iter_mut().for_each(|v| *v /= rows as f64);
        let total = total_loss(&per, &alphas)?;
        curve.push(EpochLoss {
            epoch,
            per_detector: per,
            total,
        });
    }
    if cfg.epochs > 0 {
        recalibrate_norms(data, model, cfg)?;
    }
    Ok(curve)
}

/// Replaces the running normalization statistics with the plain average of
/// the batch statistics over one pass of the training set at the final
/// weights, using the same batch size as training.
pub fn recalibrate_norms(data: &[TrainingExample], model: &mut Model, cfg: &TrainConfig) -> Result<()> {
    let window = model.config.window_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for (k, idx) in epoch_batches(data, cfg.batch_size, &mut rng).into_iter().enumerate() {
        let examples: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = make_batch(&examples, cfg.sigma, window)?;
        let (_, cache) = model.forward_batch(&batch.x, batch.t_len, true)?;
        // cumulative mean: the first batch overwrites, batch k gets weight 1/k
        model.update_running(&cache, k as f64 / (k + 1) as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::Rng;

    #[test]
    fn soft_label_values() {
        let y = make_soft_labels(&[50], 100, 1.0, 17).unwrap();
        assert_eq!(y.values[50], 1.0);
        assert!((y.values[49] - 0.60653).abs() < 1e-5);
        assert!((y.values[51] - 0.60653).abs() < 1e-5);
        assert!((y.values[48] - 0.13534).abs() < 1e-5);
        assert_eq!(y.values[41], 0.0);
        assert!(y.values[42] > 0.0);
        assert!(make_soft_labels(&[], 10, 1.0, 17).unwrap().values.iter().all(|&v| v == 0.0));
        let two = make_soft_labels(&[10, 11], 30, 1.0, 5).unwrap();
        assert_eq!(two.values[10], 1.0);
        assert_eq!(two.values[11], 1.0);
        assert!((two.values[9] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bce_examples() {
        let half = ScoreSequence::new(vec![0.5; 4], 1).unwrap();
        let y = SoftLabelSequence {
            values: vec![0.5; 4],
            source_boundaries: vec![],
            sigma: 1.0,
        };
        assert!((detector_loss(&half, &y).unwrap() - 0.69315).abs() < 1e-5);
        let y0 = SoftLabelSequence {
            values: vec![0.0; 4],
            ..y.clone()
        };
        assert!((detector_loss(&half, &y0).unwrap() - 0.69315).abs() < 1e-5);
        let p = ScoreSequence::new(vec![0.9, 0.1], 1).unwrap();
        let y2 = SoftLabelSequence {
            values: vec![1.0, 0.0],
            ..y
        };
        assert!((detector_loss(&p, &y2).unwrap() - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn logit_bce_matches_probability_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = ScoreSequence::new(z.iter().map(|&v| sigmoid(v)).collect(), 1).unwrap();
        let lab = SoftLabelSequence {
            values: y.clone(),
            source_boundaries: vec![],
            sigma: 1.0,
        };
        let (l, _) = logit_bce(&z, &y);
        assert!((l - detector_loss(&p, &lab).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum() {
        assert_eq!(total_loss(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(total_loss(&[0.5, 9.0, 9.0], &[2.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(total_loss(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap(), 3.0);
        assert!(matches!(total_loss(&[1.0], &[1.0, 1.0]), Err(Error::Config(_))));
    }

    fn toy_data(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = 12;
                let b = rng.gen_range(4..8);
                let mut x = Tensor::zeros(&[t, 4]);
                for i in 0..t {
                    for c in 0..4 {
                        x.data_mut()[i * 4 + c] = if i >= b { 1.0 } else { -1.0 } + 0.05 * rng.gen::<f64>();
                    }
                }
                TrainingExample {
                    features: x,
                    boundaries: vec![b],
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut model = Model::new(ModelConfig::miniature(), 2).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        fit(&toy_data(4, 1), &mut model, &cfg).unwrap();
        before.visit("", &mut |name, kind, t| {
            if kind == TensorKind::Param {
                let mut same = false;
                model.visit("", &mut |n2, _, t2| {
                    if n2 == name {
                        same = t2 == t;
                    }
                });
                assert!(same, "{name} changed");
            }
        });
    }

    #[test]
    fn zero_alpha_detector_params_unchanged() {
        let mut cfg_m = ModelConfig::miniature();
        cfg_m.detectors[2].loss_weight = 0.0;
        let mut model = Model::new(cfg_m, 2).unwrap();
        let before = model.detectors[2].clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        fit(&toy_data(4, 1), &mut model, &cfg).unwrap();
        let mut changed = Vec::new();
        before.visit("", &mut |name, kind, t| {
            if kind == TensorKind::Param {
                model.detectors[2].visit("", &mut |n2, _, t2| {
                    if n2 == name && t2 != t {
                        changed.push(name.to_string());
                    }
                });
            }
        });
        assert!(changed.is_empty(), "{changed:?}");
        assert_ne!(model.detectors[1], before);
    }

    #[test]
    fn duplicated_sample_doubles_summed_gradient() {
        let model = Model::new(ModelConfig::miniature(), 5).unwrap();
        let data = toy_data(1, 3);
        let one = make_batch(&[&data[0]], 1.0, 5).unwrap();
        let two = make_batch(&[&data[0], &data[0]], 1.0, 5).unwrap();
        let g1 = loss_and_grad(&model, &one).unwrap();
        let g2 = loss_and_grad(&model, &two).unwrap();
        // the summed gradient doubles and the mean over twice the rows halves it
        assert!((g1.total - g2.total).abs() < 1e-12);
        let mut a = Vec::new();
        let mut b = Vec::new();
        g1.grads.visit("", &mut |_, k, t| {
            if k == TensorKind::Param {
                a.extend_from_slice(t.data())
            }
        });
        g2.grads.visit("", &mut |_, k, t| {
            if k == TensorKind::Param {
                b.extend_from_slice(t.data())
            }
        });
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy_data(8, 7);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 8,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        };
        let mut m1 = Model::new(ModelConfig::miniature(), 1).unwrap();
        let c1 = fit(&data, &mut m1, &cfg).unwrap();
        let mut m2 = Model::new(ModelConfig::miniature(), 1).unwrap();
        let c2 = fit(&data, &mut m2, &cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        assert!(c1.last().unwrap().total < c1[0].total);
    }
}
