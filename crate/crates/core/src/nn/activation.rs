use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

/// Shift `alpha` and scale `beta` of `x ↦ beta·max(x + alpha, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledReluParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ScaledReluParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Contract(format!(
                "scaled ReLU parameters must be finite, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.beta * (x + self.alpha).max(0.0)
    }

    /// `sqrt(alpha² + beta²)`.
    pub fn magnitude(&self) -> f64 {
        self.alpha.hypot(self.beta)
    }
}

/// `beta·max(x + alpha, 0)` elementwise, off-tape.
pub fn scaled_relu(x: &Tensor, alpha: f64, beta: f64) -> Tensor {
    x.map(|v| beta * (v + alpha).max(0.0))
}

/// Per-channel scaled ReLU on a `[rows, channels]` matrix.
pub fn scaled_relu_channels(x: &Tensor, params: &[ScaledReluParams]) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != params.len() {
        return Err(Error::Shape {
            op: "scaled_relu_channels",
            lhs: x.shape().to_vec(),
            rhs: vec![params.len()],
        });
    }
    let c = params.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = params[i % c].apply(*v);
    }
    Ok(out)
}

/// Pointwise nonlinearities selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(&self, x: &Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}
