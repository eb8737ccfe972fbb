//! Pairwise contrast module: per-window cosine self-similarity maps refined
//! by two 3×3 convolutions and global average pooling.

use rand::Rng;

use super::mde::DiffBlockOutput;
use crate::layers::{join, Activation, Conv2d3, Dims4, Module, TensorKind};
use crate::tensor::{gemm, Tensor};

/// Norms below this are treated as zero vectors; their similarities are 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine maps stored channels-last as `[N, t_w, t_w, n*l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStack {
    pub data: Tensor,
}

impl SimilarityStack {
    pub fn window_len(&self) -> usize {
        self.data.dim(1)
    }

    pub fn maps(&self) -> usize {
        self.data.dim(3)
    }

    pub fn get(&self, n: usize, map: usize, i: usize, j: usize) -> f64 {
        let w = self.window_len();
        let m = self.maps();
        self.data.data()[((n * w + i) * w + j) * m + map]
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityCache {
    /// Unit vectors `[N, S, W, C]` (zero rows for degenerate vectors).
    units: Tensor,
    norms: Vec<f64>,
}

pub fn pairwise_similarity(d: &DiffBlockOutput) -> SimilarityStack {
    similarity_forward(&d.data).0
}

pub(crate) fn similarity_forward(x: &Tensor) -> (SimilarityStack, SimilarityCache) {
    let d = Dims4::of(x);
    let mut units = Tensor::zeros(x.shape());
    let mut norms = vec![0.0; d.n * d.s * d.w];
    {
        let (src, dst) = (x.data(), units.data_mut());
        for (v, norm) in norms.iter_mut().enumerate() {
            let row = &src[v * d.c..(v + 1) * d.c];
            let nrm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            *norm = nrm;
            if nrm >= ZERO_NORM {
                for (o, a) in dst[v * d.c..(v + 1) * d.c].iter_mut().zip(row) {
                    *o = a / nrm;
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[d.n, d.w, d.w, d.s]);
    let mut gram = vec![0.0; d.w * d.w];
    for n in 0..d.n {
        for s in 0..d.s {
            let u = &units.data()[d.idx(n, s, 0, 0)..d.idx(n, s, 0, 0) + d.w * d.c];
            gemm(d.w, d.c, d.w, u, (d.c, 1), u, (1, d.c), 0.0, &mut gram, (d.w, 1));
            let o = out.data_mut();
            for i in 0..d.w {
                for j in 0..d.w {
                    // symmetric by construction, exact 1 on the diagonal
                    let v = if i == j {
                        if norms[(n * d.s + s) * d.w + i] >= ZERO_NORM {
                            1.0
                        } else {
                            0.0
                        }
                    } else if i < j {
                        gram[i * d.w + j]
                    } else {
                        gram[j * d.w + i]
                    };
                    o[((n * d.w + i) * d.w + j) * d.s + s] = v;
                }
            }
        }
    }
    (SimilarityStack { data: out }, SimilarityCache { units, norms })
}

pub(crate) fn similarity_backward(cache: &SimilarityCache, dsim: &Tensor, sim: &Tensor) -> Tensor {
    let d = Dims4::of(&cache.units);
    let mut dx = Tensor::zeros(cache.units.shape());
    let mut g = vec![0.0; d.w * d.w];
    let mut gu = vec![0.0; d.w * d.c];
    for n in 0..d.n {
        for s in 0..d.s {
            let at = d.idx(n, s, 0, 0);
            let u = &cache.units.data()[at..at + d.w * d.c];
            // symmetrized incoming gradient
            let mut coef = vec![0.0; d.w];
            for i in 0..d.w {
                for j in 0..d.w {
                    let gij = dsim.data()[((n * d.w + i) * d.w + j) * d.s + s]
                        + dsim.data()[((n * d.w + j) * d.w + i) * d.s + s];
                    let gij = if i == j { 0.0 } else { gij };
                    g[i * d.w + j] = gij;
                    coef[i] += gij * sim.data()[((n * d.w + i) * d.w + j) * d.s + s];
                }
            }
            gemm(d.w, d.w, d.c, &g, (d.w, 1), u, (d.c, 1), 0.0, &mut gu, (d.c, 1));
            let out = &mut dx.data_mut()[at..at + d.w * d.c];
            for i in 0..d.w {
                let nrm = cache.norms[(n * d.s + s) * d.w + i];
                if nrm < ZERO_NORM {
                    continue;
                }
                for c in 0..d.c {
                    out[i * d.c + c] = (gu[i * d.c + c] - coef[i] * u[i * d.c + c]) / nrm;
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pcm {
    pub conv1: Conv2d3,
    pub conv2: Conv2d3,
}

#[derive(Debug, Clone)]
pub struct PcmCache {
    input: Tensor,
    pre1: Tensor,
    hidden: Tensor,
    pre2: Tensor,
    post2: Tensor,
}

impl Pcm {
    pub fn new<R: Rng>(maps: usize, channels: usize, rng: &mut R) -> Self {
        Pcm {
            conv1: Conv2d3::new(maps, channels, rng),
            conv2: Conv2d3::new(channels, channels, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.conv2.cout()
    }

    pub fn macs_per_timestamp(&self, window_len: usize) -> u64 {
        let pix = (window_len * window_len) as u64;
        pix * (self.conv1.macs_per_pixel() + self.conv2.macs_per_pixel())
    }

    pub fn forward(&self, s: &SimilarityStack, act: Activation) -> (Tensor, PcmCache) {
        let pre1 = self.conv1.forward(&s.data);
        let hidden = act.forward(&pre1);
        let pre2 = self.conv2.forward(&hidden);
        let post2 = act.forward(&pre2);
        let sh = pre2.shape().to_vec();
        let (n, pix, p) = (sh[0], sh[1] * sh[2], sh[3]);
        let mut out = Tensor::zeros(&[n, p]);
        {
            let (src, dst) = (post2.data(), out.data_mut());
            for i in 0..n {
                for q in 0..pix {
                    for c in 0..p {
                        dst[i * p + c] += src[(i * pix + q) * p + c];
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v /= pix as f64);
        }
        (
            out,
            PcmCache {
                input: s.data.clone(),
                pre1,
                hidden,
                pre2,
                post2,
            },
        )
    }

    pub fn backward(&self, cache: &PcmCache, dy: &Tensor, act: Activation, grads: &mut Pcm) -> Tensor {
        let sh = cache.pre2.shape();
        let (n, pix, p) = (sh[0], sh[1] * sh[2], sh[3]);
        let mut dpre2 = Tensor::zeros(sh);
        {
            let (src, post, dst, g) = (cache.pre2.data(), cache.post2.data(), dpre2.data_mut(), dy.data());
            for i in 0..n {
                for q in 0..pix {
                    for c in 0..p {
                        let at = (i * pix + q) * p + c;
                        dst[at] = g[i * p + c] / pix as f64 * act.grad_from(src[at], post[at]);
                    }
                }
            }
        }
        let dh = self.conv2.backward(&cache.hidden, &dpre2, &mut grads.conv2);
        let dpre1 = act.backward(&cache.pre1, &cache.hidden, &dh);
        self.conv1.backward(&cache.input, &dpre1, &mut grads.conv1)
    }
}

impl Module for Pcm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Inference-mode encoder output `[N, C_p]`.
pub fn pcm_forward(s: &SimilarityStack, pcm: &Pcm, act: Activation) -> Tensor {
    pcm.forward(s, act).0
}
