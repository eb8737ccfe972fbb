//! Difference mixer `g = norm(act(dwconv(x)))` and the multi-order sum
//! `g0(X) + g1(ΔX) + g2(Δ g1(ΔX))`.

use rand::Rng;

use super::OrderSet;
use crate::error::{Error, Result};
use crate::layers::{
    join, temporal_diff, temporal_diff_backward, Activation, BatchNorm, BnCache, Dims4, DwConv3,
    Module, TensorKind,
};
use crate::tensor::Tensor;

/// First-order difference along the window axis, zero front pad.
pub fn temporal_difference(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 || x.dim(2) < 2 {
        return Err(Error::Shape(format!(
            "temporal difference needs a window axis of length >= 2, got {:?}",
            x.shape()
        )));
    }
    Ok(temporal_diff(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    pub conv: DwConv3,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct MixerCache {
    input: Tensor,
    pre: Tensor,
    post: Tensor,
    norm: BnCache,
}

impl Mixer {
    /// `channels` is the folded channel count `S * C`.
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Mixer {
            conv: DwConv3::new(channels, true, rng),
            norm: BatchNorm::new(channels),
        }
    }

    /// Identity kernel, unit scale, zero shift, frozen statistics (0, 1).
    pub fn passthrough(channels: usize) -> Self {
        Mixer {
            conv: DwConv3::identity(channels, true),
            norm: BatchNorm::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.norm.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, act: Activation, train: bool) -> (Tensor, MixerCache) {
        let pre = self.conv.forward(x);
        let a = act.forward(&pre);
        let (y, norm) = self.norm.forward(&a, train);
        (
            y,
            MixerCache {
                input: x.clone(),
                pre,
                post: a,
                norm,
            },
        )
    }

    pub fn backward(&self, cache: &MixerCache, dy: &Tensor, act: Activation, grads: &mut Mixer) -> Tensor {
        let da = self.norm.backward(&cache.norm, dy, &mut grads.norm);
        let dpre = act.backward(&cache.pre, &cache.post, &da);
        self.conv.backward(&cache.input, &dpre, &mut grads.conv)
    }

    pub fn update_running(&mut self, cache: &MixerCache, momentum: f64) {
        self.norm.update_running(&cache.norm, momentum);
    }

    /// Multiply-accumulates per window element.
    pub fn macs_per_element() -> u64 {
        3
    }
}

impl Module for Mixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Applies one mixer in inference mode; the `g` of the difference mixer.
pub fn diff_mixer_g(x: &Tensor, mixer: &Mixer, act: Activation) -> Result<Tensor> {
    let d = Dims4::of(x);
    if d.s * d.c != mixer.channels() {
        return Err(Error::Shape(format!(
            "mixer has {} channels, input folds to {}",
            mixer.channels(),
            d.s * d.c
        )));
    }
    Ok(mixer.forward(x, act, false).0)
}

/// Order terms of one block. `first` is present whenever order 1 or 2 is in
/// use, since the second-order term differences the first-order mixer output.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOrderMix {
    pub orders: OrderSet,
    pub zeroth: Mixer,
    pub first: Option<Mixer>,
    pub second: Option<Mixer>,
}

#[derive(Debug, Clone)]
pub struct MixCache {
    zeroth: MixerCache,
    first: Option<MixerCache>,
    second: Option<MixerCache>,
}

impl MultiOrderMix {
    pub fn new<R: Rng>(orders: OrderSet, channels: usize, rng: &mut R) -> Self {
        let zeroth = Mixer::new(channels, rng);
        let first = orders.needs_first_mixer().then(|| Mixer::new(channels, rng));
        let second = orders.contains(2).then(|| Mixer::new(channels, rng));
        MultiOrderMix {
            orders,
            zeroth,
            first,
            second,
        }
    }

    pub fn passthrough(orders: OrderSet, channels: usize) -> Self {
        MultiOrderMix {
            orders,
            zeroth: Mixer::passthrough(channels),
            first: orders.needs_first_mixer().then(|| Mixer::passthrough(channels)),
            second: orders.contains(2).then(|| Mixer::passthrough(channels)),
        }
    }

    /// Number of mixer applications per forward.
    pub fn mixer_count(&self) -> usize {
        1 + self.first.is_some() as usize + self.second.is_some() as usize
    }

    pub fn forward(&self, x: &Tensor, act: Activation, train: bool) -> (Tensor, MixCache) {
        let (mut out, zc) = self.zeroth.forward(x, act, train);
        let mut cache = MixCache {
            zeroth: zc,
            first: None,
            second: None,
        };
        if let Some(g1) = &self.first {
            let (t1, c1) = g1.forward(&temporal_diff(x), act, train);
            if self.orders.contains(1) {
                out.add_assign(&t1);
            }
            if let Some(g2) = &self.second {
                let (t2, c2) = g2.forward(&temporal_diff(&t1), act, train);
                out.add_assign(&t2);
                cache.second = Some(c2);
            }
            cache.first = Some(c1);
        }
        (out, cache)
    }

    pub fn backward(
        &self,
        cache: &MixCache,
        dy: &Tensor,
        act: Activation,
        grads: &mut MultiOrderMix,
    ) -> Tensor {
        let mut dx = self.zeroth.backward(&cache.zeroth, dy, act, &mut grads.zeroth);
        if let (Some(g1), Some(c1)) = (&self.first, &cache.first) {
            let mut dt1 = if self.orders.contains(1) {
                dy.clone()
            } else {
                dy.zeros_like()
            };
            if let (Some(g2), Some(c2)) = (&self.second, &cache.second) {
                let de = g2.backward(c2, dy, act, grads.second.as_mut().expect("grad layout"));
                dt1.add_assign(&temporal_diff_backward(&de));
            }
            let dd = g1.backward(c1, &dt1, act, grads.first.as_mut().expect("grad layout"));
            dx.add_assign(&temporal_diff_backward(&dd));
        }
        dx
    }

    pub fn update_running(&mut self, cache: &MixCache, momentum: f64) {
        self.zeroth.update_running(&cache.zeroth, momentum);
        if let (Some(g), Some(c)) = (self.first.as_mut(), cache.first.as_ref()) {
            g.update_running(c, momentum);
        }
        if let (Some(g), Some(c)) = (self.second.as_mut(), cache.second.as_ref()) {
            g.update_running(c, momentum);
        }
    }
}

impl Module for MultiOrderMix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.zeroth.visit(&join(prefix, "g0"), f);
        if let Some(g) = &self.first {
            g.visit(&join(prefix, "g1"), f);
        }
        if let Some(g) = &self.second {
            g.visit(&join(prefix, "g2"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.zeroth.visit_mut(&join(prefix, "g0"), f);
        if let Some(g) = &mut self.first {
            g.visit_mut(&join(prefix, "g1"), f);
        }
        if let Some(g) = &mut self.second {
            g.visit_mut(&join(prefix, "g2"), f);
        }
    }
}

/// Inference-mode multi-order mix of `x` with the given mixers.
pub fn multi_order_mix(x: &Tensor, mix: &MultiOrderMix, act: Activation) -> Result<Tensor> {
    mix.orders.validate()?;
    let d = Dims4::of(x);
    if d.w < 2 && mix.first.is_some() {
        return Err(Error::Shape("difference orders need a window of length >= 2".into()));
    }
    if d.s * d.c != mix.zeroth.channels() {
        return Err(Error::Shape(format!(
            "mixer has {} channels, input folds to {}",
            mix.zeroth.channels(),
            d.s * d.c
        )));
    }
    Ok(mix.forward(x, act, false).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(vals: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, 1, vals.len(), 1], vals.to_vec()).unwrap()
    }

    fn orders(list: &[u8]) -> OrderSet {
        OrderSet::from_orders(list).unwrap()
    }

    #[test]
    fn difference_examples() {
        assert_eq!(temporal_difference(&window(&[1.0, 3.0, 6.0])).unwrap().data(), &[0.0, 2.0, 3.0]);
        assert!(matches!(temporal_difference(&window(&[1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn passthrough_mixer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 2, 5, 3], 1.0, &mut rng);
        let g = Mixer::passthrough(6);
        assert_eq!(diff_mixer_g(&x, &g, Activation::Identity).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_shift() {
        let mut g = Mixer::passthrough(2);
        g.norm.beta = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        let y = diff_mixer_g(&Tensor::zeros(&[2, 1, 3, 2]), &g, Activation::Identity).unwrap();
        for pair in y.data().chunks(2) {
            assert_eq!(pair, &[0.25, -0.5]);
        }
    }

    #[test]
    fn hand_case_partial_sums() {
        let x = window(&[1.0, 3.0, 6.0]);
        let act = Activation::Identity;
        let full = multi_order_mix(&x, &MultiOrderMix::passthrough(orders(&[0, 1, 2]), 1), act).unwrap();
        assert_eq!(full.data(), &[1.0, 7.0, 10.0]);
        let two = multi_order_mix(&x, &MultiOrderMix::passthrough(orders(&[0, 1]), 1), act).unwrap();
        assert_eq!(two.data(), &[1.0, 5.0, 9.0]);
        let zero = multi_order_mix(&x, &MultiOrderMix::passthrough(orders(&[0]), 1), act).unwrap();
        assert_eq!(zero.data(), &[1.0, 3.0, 6.0]);
        let skip = multi_order_mix(&x, &MultiOrderMix::passthrough(orders(&[0, 2]), 1), act).unwrap();
        assert_eq!(skip.data(), &[1.0, 5.0, 7.0]);
    }

    #[test]
    fn constant_window_annihilated() {
        let x = window(&[2.5, 2.5, 2.5, 2.5]);
        let y = multi_order_mix(
            &x,
            &MultiOrderMix::passthrough(orders(&[0, 1, 2]), 1),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn additivity_of_order_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 2, 7, 2], 1.0, &mut rng);
        let act = Activation::Identity;
        let all = multi_order_mix(&x, &MultiOrderMix::passthrough(orders(&[0, 1, 2]), 4), act).unwrap();
        let g = Mixer::passthrough(4);
        let t0 = diff_mixer_g(&x, &g, act).unwrap();
        let t1 = diff_mixer_g(&temporal_diff(&x), &g, act).unwrap();
        let t2 = diff_mixer_g(&temporal_diff(&t1), &g, act).unwrap();
        for i in 0..x.len() {
            let want = t0.data()[i] + t1.data()[i] + t2.data()[i];
            assert!((all.data()[i] - want).abs() < 1e-12);
        }
    }
}
