//! Multi-order difference encoder: `n` residual blocks (mix + ConvFFN)
//! joined by stride-1 window max pooling, outputs stacked along the scale axis.

use rand::Rng;

use super::mixer::{MixCache, MultiOrderMix};
use super::OrderSet;
use crate::layers::{
    join, max_pool3, max_pool3_backward, Activation, Dense, Dims4, DwConv3, Module, TensorKind,
};
use crate::tensor::Tensor;

/// Pointwise expand, depthwise temporal conv, activation, pointwise project.
/// Weights are shared across scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFfn {
    pub expand: Dense,
    pub conv: DwConv3,
    pub project: Dense,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    input: Tensor,
    expanded: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl ConvFfn {
    pub fn new<R: Rng>(channels: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = channels * expansion;
        let mut project = Dense::new(hidden, channels, rng);
        // start residual branches small
        project.weight.scale(0.5);
        ConvFfn {
            expand: Dense::new(channels, hidden, rng),
            conv: DwConv3::new(hidden, false, rng),
            project,
        }
    }

    pub fn hidden(&self) -> usize {
        self.expand.output_dim()
    }

    /// Multiply-accumulates per `(scale, offset)` position.
    pub fn macs_per_position(&self) -> u64 {
        self.expand.macs() + 3 * self.hidden() as u64 + self.project.macs()
    }

    pub fn forward(&self, x: &Tensor, act: Activation) -> (Tensor, FfnCache) {
        let expanded = self.expand.forward(x);
        let pre = self.conv.forward(&expanded);
        let hidden = act.forward(&pre);
        let y = self.project.forward(&hidden);
        (
            y,
            FfnCache {
                input: x.clone(),
                expanded,
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &FfnCache, dy: &Tensor, act: Activation, grads: &mut ConvFfn) -> Tensor {
        let dh = self.project.backward(&cache.hidden, dy, &mut grads.project);
        let dpre = act.backward(&cache.pre, &cache.hidden, &dh);
        let de = self.conv.backward(&cache.expanded, &dpre, &mut grads.conv);
        self.expand.backward(&cache.input, &de, &mut grads.expand)
    }
}

impl Module for ConvFfn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// `u = x + mix(x); v = u + ffn(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffBlock {
    pub mix: MultiOrderMix,
    pub ffn: ConvFfn,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    mix: MixCache,
    ffn: FfnCache,
}

impl DiffBlock {
    pub fn forward(&self, x: &Tensor, act: Activation, train: bool) -> (Tensor, BlockCache) {
        let (m, mix) = self.mix.forward(x, act, train);
        let mut u = m;
        u.add_assign(x);
        let (f, ffn) = self.ffn.forward(&u, act);
        let mut v = f;
        v.add_assign(&u);
        (v, BlockCache { mix, ffn })
    }

    pub fn backward(&self, cache: &BlockCache, dv: &Tensor, act: Activation, grads: &mut DiffBlock) -> Tensor {
        let mut du = self.ffn.backward(&cache.ffn, dv, act, &mut grads.ffn);
        du.add_assign(dv);
        let mut dx = self.mix.backward(&cache.mix, &du, act, &mut grads.mix);
        dx.add_assign(&du);
        dx
    }
}

impl Module for DiffBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.mix.visit(&join(prefix, "mix"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.mix.visit_mut(&join(prefix, "mix"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Block outputs stacked along the scale axis: `[N, n*S, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffBlockOutput {
    pub data: Tensor,
    pub n_blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mde {
    pub blocks: Vec<DiffBlock>,
}

#[derive(Debug, Clone)]
pub struct MdeCache {
    blocks: Vec<BlockCache>,
    pool_args: Vec<Vec<u32>>,
    in_dims: Dims4,
}

impl Mde {
    pub fn new<R: Rng>(
        orders: OrderSet,
        n_blocks: usize,
        scales: usize,
        channels: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| DiffBlock {
                mix: MultiOrderMix::new(orders, scales * channels, rng),
                ffn: ConvFfn::new(channels, expansion, rng),
            })
            .collect();
        Mde { blocks }
    }

    pub fn forward(&self, x: &Tensor, act: Activation, train: bool) -> (DiffBlockOutput, MdeCache) {
        let in_dims = Dims4::of(x);
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut pool_args = Vec::new();
        let mut pooled: Option<Tensor> = None;
        for (b, block) in self.blocks.iter().enumerate() {
            let input = pooled.as_ref().unwrap_or(x);
            let (v, c) = block.forward(input, act, train);
            caches.push(c);
            if b + 1 < self.blocks.len() {
                let (p, arg) = max_pool3(&v);
                pool_args.push(arg);
                pooled = Some(p);
            }
            outputs.push(v);
        }
        let data = concat_scales(&outputs);
        (
            DiffBlockOutput {
                data,
                n_blocks: self.blocks.len(),
            },
            MdeCache {
                blocks: caches,
                pool_args,
                in_dims,
            },
        )
    }

    pub fn backward(&self, cache: &MdeCache, dd: &Tensor, act: Activation, grads: &mut Mde) -> Tensor {
        let parts = split_scales(dd, self.blocks.len());
        let mut carry: Option<Tensor> = None;
        for b in (0..self.blocks.len()).rev() {
            let mut dv = parts[b].clone();
            if let Some(dp) = carry.take() {
                dv.add_assign(&max_pool3_backward(&dp, &cache.pool_args[b]));
            }
            let din = self.blocks[b].backward(&cache.blocks[b], &dv, act, &mut grads.blocks[b]);
            carry = Some(din);
        }
        let dx = carry.expect("at least one block");
        debug_assert_eq!(Dims4::of(&dx), cache.in_dims);
        dx
    }

    pub fn update_running(&mut self, cache: &MdeCache, momentum: f64) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.mix.update_running(&c.mix, momentum);
        }
    }
}

impl Module for Mde {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Stacks equally shaped `[N, S, W, C]` tensors into `[N, k*S, W, C]`.
pub fn concat_scales(parts: &[Tensor]) -> Tensor {
    let d = Dims4::of(&parts[0]);
    let k = parts.len();
    let mut out = Tensor::zeros(&[d.n, k * d.s, d.w, d.c]);
    let chunk = d.s * d.w * d.c;
    let dst = out.data_mut();
    for n in 0..d.n {
        for (b, p) in parts.iter().enumerate() {
            let at = (n * k + b) * chunk;
            dst[at..at + chunk].copy_from_slice(&p.data()[n * chunk..(n + 1) * chunk]);
        }
    }
    out
}

/// Inverse of [`concat_scales`].
pub fn split_scales(x: &Tensor, k: usize) -> Vec<Tensor> {
    let d = Dims4::of(x);
    let s = d.s / k;
    let chunk = s * d.w * d.c;
    let mut parts: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(&[d.n, s, d.w, d.c])).collect();
    for n in 0..d.n {
        for (b, p) in parts.iter_mut().enumerate() {
            let at = (n * k + b) * chunk;
            p.data_mut()[n * chunk..(n + 1) * chunk].copy_from_slice(&x.data()[at..at + chunk]);
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_scale_axis_is_blocks_times_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orders = OrderSet::from_orders(&[0, 1, 2]).unwrap();
        let mde = Mde::new(orders, 3, 3, 4, 2, &mut rng);
        let x = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let (d, _) = mde.forward(&x, Activation::Silu, false);
        assert_eq!(d.data.shape(), &[2, 9, 5, 4]);
        assert!(d.data.is_finite());
    }

    #[test]
    fn single_block_has_no_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let orders = OrderSet::from_orders(&[0, 1]).unwrap();
        let mde = Mde::new(orders, 1, 2, 3, 2, &mut rng);
        let x = Tensor::randn(&[2, 2, 5, 3], 1.0, &mut rng);
        let (d, cache) = mde.forward(&x, Activation::Silu, false);
        let (v, _) = mde.blocks[0].forward(&x, Activation::Silu, false);
        assert_eq!(d.data, v);
        assert!(cache.pool_args.is_empty());
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 2, 4, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2, 4, 2], 1.0, &mut rng);
        let c = concat_scales(&[a.clone(), b.clone()]);
        let d = Dims4::of(&c);
        assert_eq!(c.data()[d.idx(1, 3, 2, 1)], b.data()[Dims4::of(&b).idx(1, 1, 2, 1)]);
        assert_eq!(split_scales(&c, 2), vec![a, b]);
    }
}
