//! Backbone stages, multi-scale aggregation and local-window unfolding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, Activation, Dense, Module, TensorKind};
use crate::tensor::Tensor;

/// Per-frame features at one backbone depth, `[T_cur, C]`.
///
/// `origin` holds each row's position in the original length-T sequence and
/// survives compaction. Stage index 0 denotes raw input features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    data: Tensor,
    stage_index: usize,
    origin: Vec<usize>,
}

impl FrameFeatureSequence {
    pub fn new(data: Tensor, stage_index: usize, origin: Vec<usize>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "frame features must be [T, C], got {:?}",
                data.shape()
            )));
        }
        if data.dim(0) != origin.len() {
            return Err(Error::Alignment(format!(
                "{} rows but {} origin timestamps",
                data.dim(0),
                origin.len()
            )));
        }
        if origin.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Alignment(
                "origin timestamps must be strictly increasing".into(),
            ));
        }
        data.check_finite("frame features")?;
        Ok(FrameFeatureSequence {
            data,
            stage_index,
            origin,
        })
    }

    /// Raw input features for frames `0..T`.
    pub fn from_raw(data: Tensor) -> Result<Self> {
        let t = data.shape().first().copied().unwrap_or(0);
        Self::new(data, 0, (0..t).collect())
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.data.data()[i * c..(i + 1) * c]
    }
}

/// One per-frame backbone stage: `act(W2·act(W1·x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneStage {
    pub first: Dense,
    pub second: Dense,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    input: Tensor,
    pre1: Tensor,
    hidden: Tensor,
    pre2: Tensor,
    out: Tensor,
}

impl BackboneStage {
    pub fn new<R: Rng>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        BackboneStage {
            first: Dense::new(in_dim, hidden, rng),
            second: Dense::new(hidden, out_dim, rng),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.second.output_dim()
    }

    /// Analytic multiply-accumulate count for one frame (affine products only).
    pub fn flops_per_frame(&self) -> u64 {
        self.first.macs() + self.second.macs()
    }

    /// Applies the stage to every row of a `[R, in]` matrix.
    pub fn forward(&self, x: &Tensor) -> (Tensor, StageCache) {
        let pre1 = self.first.forward(x);
        let hidden = self.activation.forward(&pre1);
        let pre2 = self.second.forward(&hidden);
        let out = self.activation.forward(&pre2);
        let cache = StageCache {
            input: x.clone(),
            pre1,
            hidden,
            pre2,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &StageCache, dy: &Tensor, grads: &mut BackboneStage) -> Tensor {
        let d2 = self.activation.backward(&cache.pre2, &cache.out, dy);
        let dh = self.second.backward(&cache.hidden, &d2, &mut grads.second);
        let d1 = self.activation.backward(&cache.pre1, &cache.hidden, &dh);
        self.first.backward(&cache.input, &d1, &mut grads.first)
    }
}

impl Module for BackboneStage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

pub fn run_stage(seq: &FrameFeatureSequence, stage: &BackboneStage) -> Result<FrameFeatureSequence> {
    if seq.channels() != stage.in_dim() {
        return Err(Error::Config(format!(
            "stage expects {} input channels, sequence has {}",
            stage.in_dim(),
            seq.channels()
        )));
    }
    let out = if seq.is_empty() {
        Tensor::zeros(&[0, stage.out_dim()])
    } else {
        stage.forward(seq.data()).0
    };
    out.check_finite(&format!("backbone stage {}", seq.stage_index() + 1))?;
    FrameFeatureSequence::new(out, seq.stage_index() + 1, seq.origin().to_vec())
}

/// `R^l`: per-frame features of `l` scales stacked as `[T, l, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeature {
    data: Tensor,
}

impl MultiScaleFeature {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "multi-scale feature must be [T, l, C], got {:?}",
                data.shape()
            )));
        }
        Ok(MultiScaleFeature { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn scale_count(&self) -> usize {
        self.data.dim(1)
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }
}

pub fn aggregate_scales(pooled_stages: &[FrameFeatureSequence], l: usize) -> Result<MultiScaleFeature> {
    if pooled_stages.len() != l || l == 0 {
        return Err(Error::Config(format!(
            "need {} scale sequences, got {}",
            l,
            pooled_stages.len()
        )));
    }
    let first = &pooled_stages[0];
    let (t, c) = (first.len(), first.channels());
    for (j, s) in pooled_stages.iter().enumerate().skip(1) {
        if s.origin() != first.origin() {
            return Err(Error::Alignment(format!(
                "scale {} timestamps differ from scale 0",
                j
            )));
        }
        if s.channels() != c {
            return Err(Error::Alignment(format!(
                "scale {} has {} channels, expected {}",
                j,
                s.channels(),
                c
            )));
        }
    }
    let mut data = Tensor::zeros(&[t, l, c]);
    let out = data.data_mut();
    for (j, s) in pooled_stages.iter().enumerate() {
        for i in 0..t {
            out[(i * l + j) * c..(i * l + j + 1) * c].copy_from_slice(s.row(i));
        }
    }
    Ok(MultiScaleFeature { data })
}

/// Local windows `X^l`, stored channels-last as `[T, l, t_w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTensor {
    data: Tensor,
    half_width: usize,
}

impl WindowTensor {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_width + 1
    }
}

/// Source frame for window offset `o` at timestamp `t` (replicate padding).
#[inline]
pub fn window_source(t: usize, o: usize, k: usize, len: usize) -> usize {
    (t as isize + o as isize - k as isize).clamp(0, len as isize - 1) as usize
}

pub fn unfold_windows(r: &MultiScaleFeature, k: usize) -> Result<WindowTensor> {
    if k < 1 {
        return Err(Error::Config("window half-width k must be >= 1".into()));
    }
    if r.frames() == 0 {
        return Err(Error::Shape("cannot unfold an empty sequence".into()));
    }
    let data = unfold_rows(r.data(), r.frames(), k);
    Ok(WindowTensor {
        data,
        half_width: k,
    })
}

/// Unfolds `[B*T, S, C]` (B videos of T frames each) into `[B*T, S, 2k+1, C]`.
pub(crate) fn unfold_rows(r: &Tensor, t_len: usize, k: usize) -> Tensor {
    let sh = r.shape();
    let (rows, s, c) = (sh[0], sh[1], sh[2]);
    let w = 2 * k + 1;
    let mut x = Tensor::zeros(&[rows, s, w, c]);
    let (src, dst) = (r.data(), x.data_mut());
    for row in 0..rows {
        let video = row / t_len;
        let t = row % t_len;
        for sc in 0..s {
            for o in 0..w {
                let from = video * t_len + window_source(t, o, k, t_len);
                let d = ((row * s + sc) * w + o) * c;
                let f = (from * s + sc) * c;
                dst[d..d + c].copy_from_slice(&src[f..f + c]);
            }
        }
    }
    x
}

/// Adjoint of [`unfold_rows`]: sums window gradients back onto source frames.
pub(crate) fn fold_rows(dx: &Tensor, t_len: usize, k: usize) -> Tensor {
    let sh = dx.shape();
    let (rows, s, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let mut dr = Tensor::zeros(&[rows, s, c]);
    let (g, out) = (dx.data(), dr.data_mut());
    for row in 0..rows {
        let video = row / t_len;
        let t = row % t_len;
        for sc in 0..s {
            for o in 0..w {
                let to = video * t_len + window_source(t, o, k, t_len);
                let d = ((row * s + sc) * w + o) * c;
                let f = (to * s + sc) * c;
                for i in 0..c {
                    out[f + i] += g[d + i];
                }
            }
        }
    }
    dr
}
