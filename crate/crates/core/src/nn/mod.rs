//! Layers shared by the stems and the encoder.
//!
//! Layers own only [`ParamId`]s; the values live in a [`ParamStore`] that is
//! bound onto a fresh [`Tape`] for every forward pass.

pub mod activation;
pub mod attention;
mod check;
pub mod conv;
pub mod ffn;
pub mod linear;
pub mod norm;

pub use activation::{scaled_relu, scaled_relu_channels, Activation, ScaledReluParams};
pub use attention::{AttentionWeights, Mhsa};
pub use check::{check_param_gradients, GradCheck, GRAD_FLOOR};
pub use conv::Conv2d;
pub use ffn::{Ffn, FfnVariant};
pub use linear::Linear;
pub use norm::{layernorm, summed_norm_normalizer, BatchNorm2d, BatchNormState, LayerNorm, NormMode};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A trainable array and whether weight decay applies to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

/// Std of the truncated-normal init for position embeddings and the class
/// token.
pub const INIT_STD: f64 = 0.02;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight drawn from U(±1/√fan_in) that takes weight decay. A fixed
    /// std of 0.02 starves narrow layers; fan-in scaling keeps the initial
    /// signal comparable at any width.
    pub fn weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::rand_uniform(shape, -bound, bound, rng), true)
    }

    /// Zero-initialised, decay-exempt parameter (biases, shifts).
    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), false)
    }

    /// One-initialised, decay-exempt parameter (norm scales).
    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape), false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace all values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() || other.buffers.len() != self.buffers.len() {
            return Err(Error::Config(format!(
                "parameter layout mismatch: {} params / {} buffers vs {} / {}",
                other.params.len(),
                other.buffers.len(),
                self.params.len(),
                self.buffers.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "buffer {} does not match {}",
                    src.name, dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Record every parameter on `tape` and open a forward context.
    pub fn bind<'a, 't>(&'a mut self, tape: &'t Tape, mode: NormMode) -> Ctx<'a, 't> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Ctx {
            tape,
            vars,
            buffers: &mut self.buffers,
            mode,
        }
    }
}

/// One forward pass: the tape, the bound parameters, and mutable running
/// statistics.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    buffers: &'a mut [Buffer],
    pub mode: NormMode,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        self.buffers[id.0].value = value;
    }

    /// Gradients for every bound parameter, zero-filled where a parameter
    /// does not reach the loss.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}
