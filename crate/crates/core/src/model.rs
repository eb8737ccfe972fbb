//! Backbone stages plus one detector per stage, with a batched training
//! forward/backward over whole sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::detector::{Detector, DetectorCache};
use crate::error::{Error, Result};
use crate::layers::{join, Module, TensorKind};
use crate::seqfeat::{fold_rows, unfold_rows, BackboneStage, StageCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<BackboneStage>,
    pub detectors: Vec<Detector>,
}

/// Intermediates of [`Model::forward_batch`].
pub struct BatchCache {
    t_len: usize,
    stages: Vec<StageCache>,
    detectors: Vec<DetectorCache>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = (0..config.stages())
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { config.channels };
                BackboneStage::new(input, config.stage_hidden, config.channels, config.activation, &mut rng)
            })
            .collect();
        let detectors = config
            .detectors
            .iter()
            .enumerate()
            .map(|(l, d)| Detector::new(l + 1, d, &config, &mut rng))
            .collect();
        Ok(Model {
            config,
            stages,
            detectors,
        })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Per-frame MACs of running every stage and every detector on all frames.
    pub fn static_macs_per_frame(&self) -> u64 {
        let w = self.config.window_len();
        self.stages.iter().map(|s| s.flops_per_frame()).sum::<u64>()
            + self.detectors.iter().map(|d| d.macs_per_timestamp(w)).sum::<u64>()
    }

    /// Per-frame MACs of stages `1..=l` and detector `l` alone.
    pub fn single_exit_macs_per_frame(&self, l: usize) -> u64 {
        let w = self.config.window_len();
        self.stages[..l].iter().map(|s| s.flops_per_frame()).sum::<u64>()
            + self.detectors[l - 1].macs_per_timestamp(w)
    }

    /// Full-sequence forward of `B` equal-length videos stacked as `[B*T, C_in]`.
    /// Returns one logit vector `[B*T]` per detector.
    pub fn forward_batch(&self, x: &Tensor, t_len: usize, train: bool) -> Result<(Vec<Tensor>, BatchCache)> {
        if x.shape().len() != 2 || x.dim(1) != self.config.input_dim {
            return Err(Error::Shape(format!(
                "expected [rows, {}] input, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        if t_len == 0 || x.dim(0) % t_len != 0 {
            return Err(Error::Shape(format!(
                "{} rows do not split into videos of {} frames",
                x.dim(0),
                t_len
            )));
        }
        let rows = x.dim(0);
        let c = self.config.channels;
        let k = self.config.half_width;
        let mut stage_caches = Vec::with_capacity(self.depth());
        let mut feats: Vec<Tensor> = Vec::with_capacity(self.depth());
        for (l, stage) in self.stages.iter().enumerate() {
            let input = if l == 0 { x } else { &feats[l - 1] };
            let (h, cache) = stage.forward(input);
            h.check_finite(&format!("backbone stage {}", l + 1))?;
            feats.push(h);
            stage_caches.push(cache);
        }
        let mut logits = Vec::with_capacity(self.depth());
        let mut det_caches = Vec::with_capacity(self.depth());
        for (l, det) in self.detectors.iter().enumerate() {
            let scales = l + 1;
            let mut r = Tensor::zeros(&[rows, scales, c]);
            {
                let out = r.data_mut();
                for (j, f) in feats[..scales].iter().enumerate() {
                    for row in 0..rows {
                        let at = (row * scales + j) * c;
                        out[at..at + c].copy_from_slice(&f.data()[row * c..(row + 1) * c]);
                    }
                }
            }
            let windows = unfold_rows(&r, t_len, k);
            let (z, cache) = det.forward(&windows, train, l + 1)?;
            logits.push(z);
            det_caches.push(cache);
        }
        Ok((
            logits,
            BatchCache {
                t_len,
                stages: stage_caches,
                detectors: det_caches,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` given `d(loss)/d(logits)`.
    pub fn backward_batch(&self, cache: &BatchCache, dlogits: &[Tensor], grads: &mut Model) {
        let c = self.config.channels;
        let k = self.config.half_width;
        let rows = dlogits[0].len();
        let mut dfeats: Vec<Tensor> = (0..self.depth()).map(|_| Tensor::zeros(&[rows, c])).collect();
        for (l, det) in self.detectors.iter().enumerate() {
            if dlogits[l].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let scales = l + 1;
            let dx = det.backward(&cache.detectors[l], &dlogits[l], &mut grads.detectors[l]);
            let dr = fold_rows(&dx, cache.t_len, k);
            for (j, df) in dfeats[..scales].iter_mut().enumerate() {
                let out = df.data_mut();
                for row in 0..rows {
                    let at = (row * scales + j) * c;
                    for i in 0..c {
                        out[row * c + i] += dr.data()[at + i];
                    }
                }
            }
        }
        for l in (0..self.depth()).rev() {
            let dh = std::mem::replace(&mut dfeats[l], Tensor::zeros(&[0]));
            let din = self.stages[l].backward(&cache.stages[l], &dh, &mut grads.stages[l]);
            if l > 0 {
                dfeats[l - 1].add_assign(&din);
            }
        }
    }

    pub fn update_running(&mut self, cache: &BatchCache, momentum: f64) {
        for (d, c) in self.detectors.iter_mut().zip(&cache.detectors) {
            d.update_running(c, momentum);
        }
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        for (l, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", l + 1)), f);
        }
        for (l, d) in self.detectors.iter().enumerate() {
            d.visit(&join(prefix, &format!("detector{}", l + 1)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        for (l, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", l + 1)), f);
        }
        for (l, d) in self.detectors.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("detector{}", l + 1)), f);
        }
    }
}
