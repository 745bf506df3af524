use std::fmt;
use std::str::FromStr;

use super::{Activation, BatchNorm2d, Conv2d, Ctx, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Feed-forward designs compared in the encoder ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FfnVariant {
    /// Linear → GELU → Linear inside a pre-LayerNorm block.
    Mlp,
    /// Same, with ReLU in place of GELU.
    MlpRelu,
    /// Kernel-1 Conv1D → BN1D → GELU → kernel-1 Conv1D.
    Conv1dBnGelu,
    /// Kernel-1 Conv1D → GELU → kernel-1 Conv1D.
    Conv1dGelu,
    /// The baseline MLP with the block's pre-FFN LayerNorm removed.
    NoLayerNorm,
}

impl FfnVariant {
    pub const ALL: [FfnVariant; 5] = [
        FfnVariant::Mlp,
        FfnVariant::MlpRelu,
        FfnVariant::Conv1dBnGelu,
        FfnVariant::Conv1dGelu,
        FfnVariant::NoLayerNorm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FfnVariant::Mlp => "mlp",
            FfnVariant::MlpRelu => "mlp-relu",
            FfnVariant::Conv1dBnGelu => "conv1d-bn-gelu",
            FfnVariant::Conv1dGelu => "conv1d-gelu",
            FfnVariant::NoLayerNorm => "no-layernorm",
        }
    }

    /// Whether the encoder block normalises tokens before this FFN.
    pub fn pre_norm(&self) -> bool {
        !matches!(self, FfnVariant::NoLayerNorm)
    }
}

impl fmt::Display for FfnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FfnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FfnVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ffn variant {s:?}")))
    }
}

impl TryFrom<String> for FfnVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FfnVariant> for String {
    fn from(v: FfnVariant) -> String {
        v.name().to_string()
    }
}

#[derive(Clone, Debug)]
enum Body {
    Linear {
        fc1: Linear,
        fc2: Linear,
        act: Activation,
    },
    Conv {
        fc1: Conv2d,
        bn: Option<BatchNorm2d>,
        fc2: Conv2d,
    },
}

/// Position-wise feed-forward network over `[B, n, d]` tokens.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub variant: FfnVariant,
    pub dim: usize,
    pub hidden: usize,
    body: Body,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        variant: FfnVariant,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("ffn hidden ratio must be at least 1".into()));
        }
        let hidden = dim * ratio;
        let body = match variant {
            FfnVariant::Mlp | FfnVariant::MlpRelu | FfnVariant::NoLayerNorm => Body::Linear {
                fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
                fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
                act: if variant == FfnVariant::MlpRelu {
                    Activation::Relu
                } else {
                    Activation::Gelu
                },
            },
            FfnVariant::Conv1dBnGelu | FfnVariant::Conv1dGelu => {
                let fc1 = Conv2d::new(store, &format!("{name}.fc1"), dim, hidden, 1, 1, 0, true, rng);
                let bn = (variant == FfnVariant::Conv1dBnGelu)
                    .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), hidden));
                let fc2 = Conv2d::new(store, &format!("{name}.fc2"), hidden, dim, 1, 1, 0, true, rng);
                Body::Conv { fc1, bn, fc2 }
            }
        };
        Ok(Self {
            variant,
            dim,
            hidden,
            body,
        })
    }

    pub fn num_params(&self) -> usize {
        match &self.body {
            Body::Linear { fc1, fc2, .. } => fc1.num_params() + fc2.num_params(),
            Body::Conv { fc1, bn, fc2 } => {
                fc1.num_params() + fc2.num_params() + bn.as_ref().map_or(0, BatchNorm2d::num_params)
            }
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        match &self.body {
            Body::Linear { fc1, fc2, act } => {
                let h = act.apply(&fc1.forward(ctx, x)?);
                fc2.forward(ctx, &h)
            }
            Body::Conv { fc1, bn, fc2 } => {
                let shape = x.shape();
                if shape.len() != 3 || shape[2] != self.dim {
                    return Err(Error::Shape {
                        op: "ffn",
                        lhs: shape,
                        rhs: vec![self.dim],
                    });
                }
                let (b, n, d) = (shape[0], shape[1], shape[2]);
                // Tokens become a length-n 1-D signal with d channels.
                let signal = x.permute(&[0, 2, 1])?.reshape(&[b, d, 1, n])?;
                let mut h = fc1.forward(ctx, &signal)?;
                if let Some(bn) = bn {
                    h = bn.forward(ctx, &h)?;
                }
                let h = h.gelu();
                fc2.forward(ctx, &h)?.reshape(&[b, d, n])?.permute(&[0, 2, 1])
            }
        }
    }
}
