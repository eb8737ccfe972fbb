//! Central finite-difference check of every trainable tensor of a model.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{Module, TensorKind};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{batch_loss, loss_and_grad, make_batch, TrainingExample};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    pub videos: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: scale the analytic gradient of this tensor before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig::miniature(),
            frames: 12,
            videos: 2,
            step: 1e-4,
            tolerance: 1e-5,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockResult {
    pub name: String,
    pub elements: usize,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> Vec<&BlockResult> {
        self.blocks.iter().filter(|b| !b.passed).collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "block,elements,rel_err,status")?;
        for b in &self.blocks {
            writeln!(
                f,
                "{},{},{:.3e},{}",
                b.name,
                b.elements,
                b.rel_err,
                if b.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn random_examples(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    (0..cfg.videos)
        .map(|_| {
            let features = Tensor::randn(&[cfg.frames, cfg.model.input_dim], 1.0, rng);
            let b = rng.gen_range(1..cfg.frames - 1);
            TrainingExample {
                features,
                boundaries: vec![b],
            }
        })
        .collect()
}

fn nudge(model: &mut Model, target: usize, element: usize, delta: f64) {
    let mut i = 0;
    model.visit_mut("", &mut |_, kind, t| {
        if kind == TensorKind::Param {
            if i == target {
                t.data_mut()[element] += delta;
            }
            i += 1;
        }
    });
}

pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), rng.gen())?;
    let examples = random_examples(cfg, &mut rng);
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let batch = make_batch(&refs, 1.0, cfg.model.window_len())?;
    let analytic = loss_and_grad(&model, &batch)?.grads;

    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    analytic.visit("", &mut |name, kind, t| {
        if kind == TensorKind::Param {
            tensors.push((name.to_string(), t.data().to_vec()));
        }
    });

    let mut blocks = Vec::with_capacity(tensors.len());
    for (idx, (name, grad)) in tensors.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            nudge(&mut model, idx, j, cfg.step);
            let plus = batch_loss(&model, &batch)?;
            nudge(&mut model, idx, j, -2.0 * cfg.step);
            let minus = batch_loss(&model, &batch)?;
            nudge(&mut model, idx, j, cfg.step);
            *slot = (plus - minus) / (2.0 * cfg.step);
        }
        let mut analytic = grad.clone();
        if cfg.corrupt.as_deref() == Some(name.as_str()) {
            analytic.iter_mut().for_each(|g| *g *= 1.5);
        }
        let rel_err = relative_error(&analytic, &numeric);
        blocks.push(BlockResult {
            name: name.clone(),
            elements: grad.len(),
            rel_err,
            passed: rel_err <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    }
}
