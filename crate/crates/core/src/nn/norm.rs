use super::{BufferId, Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

/// Whether batch norms normalise with batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Train { update_stats: bool },
    Eval,
}

impl NormMode {
    pub const TRAIN: NormMode = NormMode::Train { update_stats: true };
}

/// Hyperparameters of a batch norm layer (values live in the store).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormState {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel batch normalisation of `[B, C, H, W]` over `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub bias: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub state: BatchNormState,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[channels]),
            bias: store.zeros(format!("{name}.bias"), &[channels]),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            state: BatchNormState::default(),
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Normalised activations before the affine step.
    pub fn normalize<'t>(&self, ctx: &mut Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape {
                op: "batchnorm2d",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let per_channel = shape[0] * shape[2] * shape[3];
        let stat_shape = [1, self.channels, 1, 1];
        match ctx.mode {
            NormMode::Train { update_stats } => {
                if per_channel < 2 {
                    return Err(Error::Contract(format!(
                        "batchnorm2d in train mode needs at least 2 values per channel, got {per_channel}"
                    )));
                }
                let mean = x.mean(&[0, 2, 3], true)?;
                let centered = x.sub(&mean)?;
                let var = centered.square()?.mean(&[0, 2, 3], true)?;
                if update_stats {
                    let m = self.state.momentum;
                    let unbiased = per_channel as f64 / (per_channel - 1) as f64;
                    let rm = ctx
                        .buffer(self.running_mean)
                        .zip_with(&mean.value().reshape(&[self.channels])?, |r, b| (1.0 - m) * r + m * b)?;
                    let rv = ctx
                        .buffer(self.running_var)
                        .zip_with(&var.value().reshape(&[self.channels])?, |r, b| {
                            (1.0 - m) * r + m * b * unbiased
                        })?;
                    ctx.set_buffer(self.running_mean, rm);
                    ctx.set_buffer(self.running_var, rv);
                }
                centered.div(&var.shift(self.state.epsilon).sqrt()?)
            }
            NormMode::Eval => {
                let rv = ctx.buffer(self.running_var);
                if rv.data().iter().any(|&v| v <= 0.0) {
                    log::warn!("batchnorm2d: non-positive running variance, using epsilon floor");
                }
                let rv = rv.map(|v| v.max(0.0));
                let rm = ctx.buffer(self.running_mean).reshape(&stat_shape)?;
                let denom = rv.map(|v| (v + self.state.epsilon).sqrt()).reshape(&stat_shape)?;
                let tape = ctx.tape;
                x.sub(&tape.leaf(rm))?.div(&tape.leaf(denom))
            }
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let xhat = self.normalize(ctx, x)?;
        let shape = [1, self.channels, 1, 1];
        let gamma = ctx.var(self.gamma).reshape(&shape)?;
        let bias = ctx.var(self.bias).reshape(&shape)?;
        xhat.mul(&gamma)?.add(&bias)
    }
}

/// Summed-norm batch normaliser applied to `[B, C, H, W]`:
/// each `X[i, c]` is centred by the channel mean over the batch and divided
/// by `sqrt(Σ_i ‖X[i, c] − μ_c‖²)`.
///
/// Channels with zero spread are returned centred (all zeros).
pub fn summed_norm_normalizer(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape {
            op: "summed_norm_normalizer",
            lhs: x.shape().to_vec(),
            rhs: vec![4],
        });
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let mut out = x.clone();
    for ch in 0..c {
        let idx = |i: usize, j: usize| (i * c + ch) * hw + j;
        let mut mean = 0.0;
        for i in 0..b {
            for j in 0..hw {
                mean += x.data()[idx(i, j)];
            }
        }
        mean /= (b * hw) as f64;
        let mut ss = 0.0;
        for i in 0..b {
            for j in 0..hw {
                let v = x.data()[idx(i, j)] - mean;
                ss += v * v;
            }
        }
        let denom = if ss > 0.0 { ss.sqrt() } else { 1.0 };
        for i in 0..b {
            for j in 0..hw {
                out.data_mut()[idx(i, j)] = (x.data()[idx(i, j)] - mean) / denom;
            }
        }
    }
    Ok(out)
}

/// Normalisation over the last axis followed by a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
            dim,
            epsilon: 1e-6,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        layernorm(x, &ctx.var(self.gamma), &ctx.var(self.bias), self.epsilon)
    }
}

/// Layer norm with explicit affine parameters.
pub fn layernorm<'t>(x: &Var<'t>, gamma: &Var<'t>, bias: &Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    let last = shape.len() - 1;
    if shape[last] < 2 {
        return Err(Error::Contract("layernorm needs a last extent of at least 2".into()));
    }
    let mean = x.mean(&[last], true)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean(&[last], true)?;
    centered.div(&var.shift(epsilon).sqrt()?)?.mul(gamma)?.add(bias)
}
