//! Cross squeeze-and-excitation fusion of the encoder and contrast branches.
//!
//! Each branch's per-timestamp descriptor drives a two-layer sigmoid gate
//! that rescales the *other* branch channel-wise; the gated branches are
//! concatenated. This symmetric cross-gating is one reading of the wiring.

use rand::Rng;

use crate::layers::{join, Activation, Dense, Module, TensorKind};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SeGate {
    pub squeeze: Dense,
    pub excite: Dense,
}

impl SeGate {
    fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        SeGate {
            squeeze: Dense::new(input, hidden, rng),
            excite: Dense::new(hidden, output, rng),
        }
    }

    pub fn macs(&self) -> u64 {
        self.squeeze.macs() + self.excite.macs()
    }
}

impl Module for SeGate {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_mut(&join(prefix, "excite"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSe {
    /// Reads branch b, gates branch a.
    pub gate_a: SeGate,
    /// Reads branch a, gates branch b.
    pub gate_b: SeGate,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
    gate: Tensor,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    a: Tensor,
    b: Tensor,
    ga: GateCache,
    gb: GateCache,
}

fn gate_forward(g: &SeGate, x: &Tensor, act: Activation) -> GateCache {
    let pre = g.squeeze.forward(x);
    let hidden = act.forward(&pre);
    let mut gate = g.excite.forward(&hidden);
    gate.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    GateCache {
        input: x.clone(),
        pre,
        hidden,
        gate,
    }
}

/// `dgate` is the gradient w.r.t. the sigmoid output; returns d(input).
fn gate_backward(g: &SeGate, c: &GateCache, dgate: &Tensor, act: Activation, grads: &mut SeGate) -> Tensor {
    let mut dz = dgate.clone();
    for (d, &s) in dz.data_mut().iter_mut().zip(c.gate.data()) {
        *d *= s * (1.0 - s);
    }
    let dh = g.excite.backward(&c.hidden, &dz, &mut grads.excite);
    let dpre = act.backward(&c.pre, &c.hidden, &dh);
    g.squeeze.backward(&c.input, &dpre, &mut grads.squeeze)
}

impl CrossSe {
    pub fn new<R: Rng>(dim_a: usize, dim_b: usize, hidden: usize, rng: &mut R) -> Self {
        CrossSe {
            gate_a: SeGate::new(dim_b, hidden, dim_a, rng),
            gate_b: SeGate::new(dim_a, hidden, dim_b, rng),
        }
    }

    pub fn dim_a(&self) -> usize {
        self.gate_a.excite.output_dim()
    }

    pub fn dim_b(&self) -> usize {
        self.gate_b.excite.output_dim()
    }

    pub fn macs(&self) -> u64 {
        self.gate_a.macs() + self.gate_b.macs() + (self.dim_a() + self.dim_b()) as u64
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor, act: Activation) -> (Tensor, FuseCache) {
        let ga = gate_forward(&self.gate_a, b, act);
        let gb = gate_forward(&self.gate_b, a, act);
        let (ca, cb) = (self.dim_a(), self.dim_b());
        let rows = a.dim(0);
        let mut out = Tensor::zeros(&[rows, ca + cb]);
        {
            let o = out.data_mut();
            for r in 0..rows {
                for i in 0..ca {
                    o[r * (ca + cb) + i] = a.data()[r * ca + i] * ga.gate.data()[r * ca + i];
                }
                for j in 0..cb {
                    o[r * (ca + cb) + ca + j] = b.data()[r * cb + j] * gb.gate.data()[r * cb + j];
                }
            }
        }
        (
            out,
            FuseCache {
                a: a.clone(),
                b: b.clone(),
                ga,
                gb,
            },
        )
    }

    /// Returns `(da, db)`.
    pub fn backward(&self, c: &FuseCache, dy: &Tensor, act: Activation, grads: &mut CrossSe) -> (Tensor, Tensor) {
        let (ca, cb) = (self.dim_a(), self.dim_b());
        let rows = c.a.dim(0);
        let mut da = Tensor::zeros(&[rows, ca]);
        let mut db = Tensor::zeros(&[rows, cb]);
        let mut dga = Tensor::zeros(&[rows, ca]);
        let mut dgb = Tensor::zeros(&[rows, cb]);
        for r in 0..rows {
            for i in 0..ca {
                let g = dy.data()[r * (ca + cb) + i];
                da.data_mut()[r * ca + i] = g * c.ga.gate.data()[r * ca + i];
                dga.data_mut()[r * ca + i] = g * c.a.data()[r * ca + i];
            }
            for j in 0..cb {
                let g = dy.data()[r * (ca + cb) + ca + j];
                db.data_mut()[r * cb + j] = g * c.gb.gate.data()[r * cb + j];
                dgb.data_mut()[r * cb + j] = g * c.b.data()[r * cb + j];
            }
        }
        // gate_a reads b, gate_b reads a
        db.add_assign(&gate_backward(&self.gate_a, &c.ga, &dga, act, &mut grads.gate_a));
        da.add_assign(&gate_backward(&self.gate_b, &c.gb, &dgb, act, &mut grads.gate_b));
        (da, db)
    }
}

impl Module for CrossSe {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &Tensor)) {
        self.gate_a.visit(&join(prefix, "gate_a"), f);
        self.gate_b.visit(&join(prefix, "gate_b"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor)) {
        self.gate_a.visit_mut(&join(prefix, "gate_a"), f);
        self.gate_b.visit_mut(&join(prefix, "gate_b"), f);
    }
}

pub fn cross_se_fuse(a: &Tensor, b: &Tensor, se: &CrossSe, act: Activation) -> Tensor {
    se.forward(a, b, act).0
}
