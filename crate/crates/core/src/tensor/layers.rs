use super::{EdgeList, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::prelude::*;
use crate::rng::SimRng;

pub const LEAKY_SLOPE: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn leaky(tape: &mut Tape, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}

/// Inverted dropout: identity in evaluation mode, `mask / (1 − rate)` in training.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut SimRng) -> Var {
    if mode == Mode::Eval || rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 - rate;
    let data = (0..r * c)
        .map(|_| {
            if rng.uniform() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.mul_const(x, Tensor::from_vec(r, c, data))
}

/// `x · W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SimRng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, fan_out, fan_in, rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Lookup table mapping class indices to dense rows.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        dim: usize,
        rng: &mut SimRng,
    ) -> Self {
        let table = store.add_normal(format!("{name}.table"), classes, dim, 1.0, rng);
        Self {
            table,
            classes,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        idx: Rc<Vec<usize>>,
    ) -> Result<Var, TensorError> {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, idx)
    }
}

/// Per-feature normalization over the rows of a batch, with running
/// statistics (momentum 0.1) for evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(1, dim)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(1, dim, 1.0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let n = tape.shape(x).0 as f64;
                let (y, mean, var) = tape.batch_norm_train(x, g, b, NORM_EPS);
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = store.value_mut(self.running_mean).data_mut();
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = store.value_mut(self.running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                y
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                tape.batch_norm_eval(x, g, b, &mean, &var, NORM_EPS)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// The update network applied after GINE aggregation.
#[derive(Clone, Copy, Debug)]
pub enum GineMlp {
    Identity,
    /// linear → LeakyReLU → BatchNorm → linear (encoders).
    Batch {
        first: Linear,
        norm: BatchNorm,
        second: Linear,
    },
    /// linear → LeakyReLU → LayerNorm (feature decoder).
    Layer {
        linear: Linear,
        norm: LayerNorm,
    },
}

/// `h'_v = MLP(h_v + Σ_{u∈N(v)} e_uv · h_u)`; the message list carries the
/// self-loops, so an isolated node receives `2 h_v`.
#[derive(Clone, Copy, Debug)]
pub struct GineLayer {
    pub mlp: GineMlp,
}

impl GineLayer {
    pub fn batch_mlp(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        rng: &mut SimRng,
    ) -> Self {
        let first = Linear::new(store, &format!("{name}.mlp0"), fan_in, hidden, rng);
        let norm = BatchNorm::new(store, &format!("{name}.bn"), hidden);
        let second = Linear::new(store, &format!("{name}.mlp1"), hidden, hidden, rng);
        Self {
            mlp: GineMlp::Batch {
                first,
                norm,
                second,
            },
        }
    }

    pub fn layer_mlp(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        rng: &mut SimRng,
    ) -> Self {
        let linear = Linear::new(store, &format!("{name}.mlp0"), fan_in, hidden, rng);
        let norm = LayerNorm::new(store, &format!("{name}.ln"), hidden);
        Self {
            mlp: GineMlp::Layer { linear, norm },
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        edges: &Rc<EdgeList>,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let agg = tape.gine_aggregate(x, edges.clone())?;
        Ok(match self.mlp {
            GineMlp::Identity => agg,
            GineMlp::Batch {
                first,
                norm,
                second,
            } => {
                let h = first.forward(tape, store, agg);
                let h = leaky(tape, h);
                let h = norm.forward(tape, store, h, mode);
                second.forward(tape, store, h)
            }
            GineMlp::Layer { linear, norm } => {
                let h = linear.forward(tape, store, agg);
                let h = leaky(tape, h);
                norm.forward(tape, store, h)
            }
        })
    }
}
