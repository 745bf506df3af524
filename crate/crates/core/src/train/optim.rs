//! First-order optimizers over a [`Param`] list.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SAM_RHO: f64 = 0.05;

pub trait Optimizer {
    /// Apply one update with learning rate `lr`. Weight decay, when the
    /// optimizer has any, touches only parameters flagged `decay`.
    fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) -> Result<()>;
}

fn check_grads(params: &[Param], grads: &[Tensor], what: &str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Diverged(format!("non-finite {what} for {}", p.name)));
        }
    }
    Ok(())
}

/// Plain gradient descent with decoupled decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub weight_decay: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads, "gradient")?;
        for (p, g) in params.iter_mut().zip(grads) {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w = *w - lr * gi - decay * *w;
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads, "gradient")?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Contract(
                "optimizer state built for a different parameter list".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w = *w - lr * (mhat / (vhat.sqrt() + self.eps)) - decay * *w;
            }
        }
        Ok(())
    }
}

/// Something with parameters and a re-evaluable loss.
pub trait Objective {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    /// Loss and per-parameter gradients at the current parameters. `first`
    /// is false on the second pass of a two-pass step, so side effects such
    /// as running statistics happen once per step.
    fn loss_and_grads(&mut self, first: bool) -> Result<(f64, Vec<Tensor>)>;
}

/// Sharpness-aware minimisation around a base optimizer.
#[derive(Clone, Debug)]
pub struct Sam<O> {
    pub rho: f64,
    pub base: O,
}

impl<O: Optimizer> Sam<O> {
    pub fn new(rho: f64, base: O) -> Self {
        Self { rho, base }
    }

    /// Gradient at `w + ρ·g/‖g‖`, then a base step from the original `w`.
    /// Returns the loss at the unperturbed point.
    pub fn step<J: Objective + ?Sized>(&mut self, obj: &mut J, lr: f64) -> Result<f64> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("SAM rho must be ≥ 0, got {}", self.rho)));
        }
        let (loss, grads) = obj.loss_and_grads(true)?;
        check_grads(obj.params(), &grads, "gradient")?;
        let norm = grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            self.base.step(obj.params_mut(), &grads, lr)?;
            return Ok(loss);
        }
        let scale = self.rho / norm;
        let saved: Vec<Tensor> = obj.params().iter().map(|p| p.value.clone()).collect();
        for (p, g) in obj.params_mut().iter_mut().zip(&grads) {
            for (w, &gk) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w += scale * gk;
            }
        }
        let perturbed = obj.loss_and_grads(false);
        for (p, w) in obj.params_mut().iter_mut().zip(saved) {
            p.value = w;
        }
        let (_, sharp) = perturbed?;
        check_grads(obj.params(), &sharp, "perturbed gradient")?;
        self.base.step(obj.params_mut(), &sharp, lr)?;
        Ok(loss)
    }
}

/// Optimizer selection as written in configs: `adamw`, `sam` or `sam:<rho>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OptimizerKind {
    AdamW,
    Sam { rho: f64 },
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sam { rho } if !(rho > 0.0 && rho.is_finite()) => {
                Err(Error::Config(format!("optimizer.rho must be > 0, got {rho}")))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, weight_decay: f64) -> StepRule {
        match *self {
            OptimizerKind::AdamW => StepRule::AdamW(AdamW::new(weight_decay)),
            OptimizerKind::Sam { rho } => StepRule::Sam(Sam::new(rho, AdamW::new(weight_decay))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::AdamW => write!(f, "adamw"),
            OptimizerKind::Sam { rho } if *rho == SAM_RHO => write!(f, "sam"),
            OptimizerKind::Sam { rho } => write!(f, "sam:{rho}"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "adamw" => OptimizerKind::AdamW,
            "sam" => OptimizerKind::Sam { rho: SAM_RHO },
            other => match other.strip_prefix("sam:").map(str::parse::<f64>) {
                Some(Ok(rho)) => OptimizerKind::Sam { rho },
                _ => {
                    return Err(Error::Config(format!(
                        "unknown optimizer {s:?} (adamw | sam | sam:<rho>)"
                    )))
                }
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for OptimizerKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OptimizerKind> for String {
    fn from(k: OptimizerKind) -> String {
        k.to_string()
    }
}

/// A built optimizer that owns its state.
#[derive(Clone, Debug)]
pub enum StepRule {
    AdamW(AdamW),
    Sam(Sam<AdamW>),
}

impl StepRule {
    /// One full step on `obj`; returns the (unperturbed) loss.
    pub fn step<J: Objective + ?Sized>(&mut self, obj: &mut J, lr: f64) -> Result<f64> {
        match self {
            StepRule::AdamW(opt) => {
                let (loss, grads) = obj.loss_and_grads(true)?;
                opt.step(obj.params_mut(), &grads, lr)?;
                Ok(loss)
            }
            StepRule::Sam(sam) => sam.step(obj, lr),
        }
    }
}
