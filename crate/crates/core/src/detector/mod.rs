//! Multi-order difference detector: encoder, contrast module, cross-SE fusion
//! and an MLP classifier producing one boundary score per timestamp.

pub mod fuse;
pub mod mde;
pub mod mixer;
pub mod pcm;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{join, Activation, Dense, Dims4, Module, TensorKind};
use crate::seqfeat::WindowTensor;
use crate::tensor::{sigmoid, Tensor};

pub use fuse::{cross_se_fuse, CrossSe};
pub use mde::{ConvFfn, DiffBlock, DiffBlockOutput, Mde};
pub use mixer::{diff_mixer_g, multi_order_mix, temporal_difference, Mixer, MultiOrderMix};
pub use pcm::{pairwise_similarity, pcm_forward, Pcm, SimilarityStack};

/// Subset of difference orders `{0, 1, 2}`; order 0 is mandatory.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrderSet(u8);

impl OrderSet {
    pub fn from_orders(orders: &[u8]) -> Result<Self> {
        let mut bits = 0u8;
        for &o in orders {
            if o > 2 {
                return Err(Error::Config(format!("difference order {o} not in {{0,1,2}}")));
            }
            bits |= 1 << o;
        }
        let set = OrderSet(bits);
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0 == 0 {
            return Err(Error::Config("order set must not be empty".into()));
        }
        if !self.contains(0) {
            return Err(Error::Config("order set must contain order 0".into()));
        }
        Ok(())
    }

    pub fn contains(&self, order: u8) -> bool {
        self.0 & (1 << order) != 0
    }

    pub(crate) fn needs_first_mixer(&self) -> bool {
        self.contains(1) || self.contains(2)
    }

    pub fn orders(&self) -> Vec<u8> {
        (0..3).filter(|&o| self.contains(o)).collect()
    }
}

impl fmt::Debug for OrderSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.orders())
    }
}

impl Serialize for OrderSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.orders().serialize(s)
    }
}

impl<'de> Deserialize<'de> for OrderSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<u8>::deserialize(d)?;
        OrderSet::from_orders(&v).map_err(serde::de::Error::custom)
    }
}

/// Per-detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub order_set: OrderSet,
    pub n_blocks: usize,
    /// Peak threshold `ε`.
    pub exit_threshold: f64,
    /// Exit radius `t_μ` in frames.
    pub exit_radius: usize,
    /// Loss weight `α`.
    pub loss_weight: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.order_set.validate()?;
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if !(self.exit_threshold > 0.0 && self.exit_threshold < 1.0) {
            return Err(Error::Config(format!(
                "exit threshold {} not in (0, 1)",
                self.exit_threshold
            )));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(Error::Config("loss weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Boundary probabilities for one detector, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    pub values: Vec<f64>,
    pub detector_index: usize,
}

impl ScoreSequence {
    pub fn new(values: Vec<f64>, detector_index: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::numeric(
                format!("detector {detector_index} scores"),
                format!("score {v} outside (0, 1)"),
            ));
        }
        Ok(ScoreSequence {
            values,
            detector_index,
        })
    }

    /// Sigmoid of logits, kept off the saturated endpoints.
    pub fn from_logits(logits: &[f64], detector_index: usize) -> Result<Self> {
        let values = logits
            .iter()
            .map(|&z| sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            .collect();
        Self::new(values, detector_index)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub hidden: Dense,
    pub output: Dense,
}

impl Module for Classifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Parameters `φ_l` of one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub mde: Mde,
    pub pcm: Pcm,
    pub fuse: CrossSe,
    pub classifier: Classifier,
    pub activation: Activation,
    scales: usize,
}

pub struct DetectorCache {
    dims: Dims4,
    mde: mde::MdeCache,
    sim_cache: pcm::SimilarityCache,
    sim: Tensor,
    pcm: pcm::PcmCache,
    fuse: fuse::FuseCache,
    features: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl Detector {
    pub fn new<R: Rng>(scales: usize, cfg: &DetectorConfig, arch: &ModelConfig, rng: &mut R) -> Self {
        let c = arch.channels;
        let mde = Mde::new(cfg.order_set, cfg.n_blocks, scales, c, arch.ffn_expansion, rng);
        let pcm = Pcm::new(cfg.n_blocks * scales, arch.pcm_channels, rng);
        let fuse = CrossSe::new(c, arch.pcm_channels, arch.se_hidden, rng);
        let classifier = Classifier {
            hidden: Dense::new(c + arch.pcm_channels, arch.mlp_hidden, rng),
            output: Dense::new(arch.mlp_hidden, 1, rng),
        };
        Detector {
            mde,
            pcm,
            fuse,
            classifier,
            activation: arch.activation,
            scales,
        }
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn n_blocks(&self) -> usize {
        self.mde.blocks.len()
    }

    pub fn order_set(&self) -> OrderSet {
        self.mde.blocks[0].mix.orders
    }

    pub fn channels(&self) -> usize {
        self.fuse.dim_a()
    }

    /// Analytic multiply-accumulate count for one timestamp's window.
    ///
    /// Counts depthwise and pointwise convolutions, similarity dot products
    /// (norms plus the full `t_w × t_w` Gram matrix), the contrast encoder,
    /// the SE gates with their channel rescaling, and the classifier.
    /// Normalization, activations and pooling are not counted.
    pub fn macs_per_timestamp(&self, window_len: usize) -> u64 {
        let (s, c, w) = (self.scales as u64, self.channels() as u64, window_len as u64);
        let mut total = 0u64;
        for block in &self.mde.blocks {
            total += block.mix.mixer_count() as u64 * mixer::Mixer::macs_per_element() * s * c * w;
            total += s * w * block.ffn.macs_per_position();
        }
        let maps = self.n_blocks() as u64 * s;
        total += maps * (w * c + w * w * c);
        total += self.pcm.macs_per_timestamp(window_len);
        total += self.fuse.macs();
        total += self.classifier.hidden.macs() + self.classifier.output.macs();
        total
    }

    /// Logits for every row of a `[N, S, W, C]` window tensor.
    pub fn forward(&self, x: &Tensor, train: bool, index: usize) -> Result<(Tensor, DetectorCache)> {
        let dims = Dims4::of(x);
        if dims.s != self.scales || dims.c != self.channels() {
            return Err(Error::Shape(format!(
                "detector {} expects {} scales × {} channels, got {:?}",
                index,
                self.scales,
                self.channels(),
                x.shape()
            )));
        }
        let act = self.activation;
        let (d, mde_cache) = self.mde.forward(x, act, train);
        d.data.check_finite(&format!("detector {index} encoder"))?;
        let pooled = mean_over_scales_and_window(&d.data);
        let (sim, sim_cache) = pcm::similarity_forward(&d.data);
        let (contrast, pcm_cache) = self.pcm.forward(&sim, act);
        contrast.check_finite(&format!("detector {index} contrast module"))?;
        let (features, fuse_cache) = self.fuse.forward(&pooled, &contrast, act);
        features.check_finite(&format!("detector {index} fusion"))?;
        let hidden_pre = self.classifier.hidden.forward(&features);
        let hidden = act.forward(&hidden_pre);
        let logits = self.classifier.output.forward(&hidden);
        logits.check_finite(&format!("detector {index} classifier"))?;
        let logits = logits.reshape(&[dims.n])?;
        Ok((
            logits,
            DetectorCache {
                dims,
                mde: mde_cache,
                sim_cache,
                sim: sim.data,
                pcm: pcm_cache,
                fuse: fuse_cache,
                features,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Gradient of the window input given `d(loss)/d(logits)`.
    pub fn backward(&self, cache: &DetectorCache, dlogits: &Tensor, grads: &mut Detector) -> Tensor {
        let act = self.activation;
        let n = cache.dims.n;
        let dz = dlogits.clone().reshape(&[n, 1]).expect("logit shape");
        let dh = self.classifier.output.backward(&cache.hidden, &dz, &mut grads.classifier.output);
        let dpre = act.backward(&cache.hidden_pre, &cache.hidden, &dh);
        let dfeat = self
            .classifier
            .hidden
            .backward(&cache.features, &dpre, &mut grads.classifier.hidden);
        let (dpooled, dcontrast) = self.fuse.backward(&cache.fuse, &dfeat, act, &mut grads.fuse);
        let dsim = self.pcm.backward(&cache.pcm, &dcontrast, act, &mut grads.pcm);
        let mut dd = pcm::similarity_backward(&cache.sim_cache, &dsim, &cache.sim);
        mean_over_scales_and_window_backward(&dpooled, &mut dd);
        self.mde.backward(&cache.mde, &dd, act, &mut grads.mde)
    }

    pub fn update_running(&mut self, cache: &DetectorCache, momentum: f64) {
        self.mde.update_running(&cache.mde, momentum);
    }
}

impl Module for Detector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.mde.visit(&join(prefix, "mde"), f);
        self.pcm.visit(&join(prefix, "pcm"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.mde.visit_mut(&join(prefix, "mde"), f);
        self.pcm.visit_mut(&join(prefix, "pcm"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

fn mean_over_scales_and_window(d: &Tensor) -> Tensor {
    let dims = Dims4::of(d);
    let mut out = Tensor::zeros(&[dims.n, dims.c]);
    let k = 1.0 / (dims.s * dims.w) as f64;
    let (src, dst) = (d.data(), out.data_mut());
    for n in 0..dims.n {
        for s in 0..dims.s {
            for w in 0..dims.w {
                let at = dims.idx(n, s, w, 0);
                for c in 0..dims.c {
                    dst[n * dims.c + c] += src[at + c];
                }
            }
        }
    }
    dst.iter_mut().for_each(|v| *v *= k);
    out
}

fn mean_over_scales_and_window_backward(dpooled: &Tensor, dd: &mut Tensor) {
    let dims = Dims4::of(dd);
    let k = 1.0 / (dims.s * dims.w) as f64;
    let g = dpooled.data();
    let out = dd.data_mut();
    for n in 0..dims.n {
        for s in 0..dims.s {
            for w in 0..dims.w {
                let at = dims.idx(n, s, w, 0);
                for c in 0..dims.c {
                    out[at + c] += g[n * dims.c + c] * k;
                }
            }
        }
    }
}

/// Inference-mode scores for one window tensor.
pub fn detector_forward(x: &WindowTensor, detector: &Detector, index: usize) -> Result<ScoreSequence> {
    let (logits, _) = detector.forward(x.data(), false, index)?;
    ScoreSequence::from_logits(logits.data(), index)
}
