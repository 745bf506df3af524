//! Constituent identities of the implicit ℓ1 regularisation result:
//! rescaling invariance of `ReLU_{α/β, β}(X)·W`, and the per-channel penalty
//! inequality in both the Frobenius form and the as-stated ℓ1 form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scaled_relu;
use crate::tensor::Tensor;

/// Largest `‖ReLU_{α̃/β̃, β̃}(X)·(W/η) − ReLU_{α/β, β}(X)·W‖_∞` over `etas`,
/// with `α̃ = ηα`, `β̃ = ηβ`.
pub fn verify_rescaling_invariance(alpha: f64, beta: f64, w: &Tensor, x: &Tensor, etas: &[f64]) -> Result<f64> {
    if beta == 0.0 || !beta.is_finite() || !alpha.is_finite() {
        return Err(Error::Domain {
            op: "verify_rescaling_invariance",
            detail: format!("requires finite α and β ≠ 0, got α={alpha}, β={beta}"),
        });
    }
    if let Some(&eta) = etas.iter().find(|&&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::Domain {
            op: "verify_rescaling_invariance",
            detail: format!("η must be positive, got {eta}"),
        });
    }
    let base = scaled_relu(x, alpha / beta, beta).matmul(w)?;
    let mut worst: f64 = 0.0;
    for &eta in etas {
        let (a, b) = (eta * alpha, eta * beta);
        let rescaled = scaled_relu(x, a / b, b).matmul(&w.scale(1.0 / eta))?;
        worst = worst.max(rescaled.max_abs_diff(&base)?);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPenalty {
    pub channel: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `√(α² + β²)`.
    pub penalty_weight: f64,
    pub l1: f64,
    pub frobenius: f64,
    /// `√(‖W‖₁ / (α² + β²))`.
    pub eta_star: f64,
    /// `α̃² + β̃² + ‖W̃‖²_F` at `η*`.
    pub lhs: f64,
    /// `(2/√HW)·‖W‖₁·√(α² + β²)`.
    pub rhs: f64,
    pub holds_as_stated: bool,
    /// `2‖W̃‖_F·√(α̃² + β̃²)` at `η*`.
    pub frobenius_rhs: f64,
    pub frobenius_holds: bool,
    /// `η` with `√(α̃² + β̃²) = ‖W̃‖_F`, i.e. `η² = ‖W‖_F / √(α² + β²)`.
    pub eta_frobenius: f64,
    /// `|lhs − 2‖W̃‖_F·√(α̃² + β̃²)|` at `eta_frobenius`, relative to lhs.
    pub equality_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBoundReport {
    pub hw: usize,
    pub channels: Vec<ChannelPenalty>,
    /// Channels with `α = β = 0` or `W = 0`, where `η*` is undefined.
    pub degenerate_channels: Vec<usize>,
    /// `Σ_c (α̃²_c + β̃²_c + ‖W̃_c‖²_F)` at `η*`.
    pub total_lhs: f64,
    /// `(2/√HW) Σ_c ‖W_c‖₁ √(α²_c + β²_c)`.
    pub total_rhs: f64,
    pub holds_as_stated: bool,
    pub frobenius_holds: bool,
    pub max_equality_residual: f64,
}

/// Evaluate the penalty inequality per channel. `ws[c]` holds the attention
/// weights fed by channel `c`; `hw` is the number of spatial positions.
pub fn verify_penalty_bound(alphas: &[f64], betas: &[f64], ws: &[Tensor], hw: usize) -> Result<PenaltyBoundReport> {
    if alphas.len() != betas.len() || alphas.len() != ws.len() {
        return Err(Error::Contract(format!(
            "{} alphas, {} betas, {} weight blocks",
            alphas.len(),
            betas.len(),
            ws.len()
        )));
    }
    if hw == 0 {
        return Err(Error::Contract("HW must be positive".into()));
    }
    let root_hw = (hw as f64).sqrt();
    let mut channels = Vec::new();
    let mut degenerate_channels = Vec::new();
    for (c, ((&alpha, &beta), w)) in alphas.iter().zip(betas).zip(ws).enumerate() {
        let m2 = alpha * alpha + beta * beta;
        let (l1, fro) = (w.norm_l1(), w.norm_l2());
        if m2 == 0.0 || l1 == 0.0 {
            degenerate_channels.push(c);
            continue;
        }
        let m = m2.sqrt();
        let eta_star = (l1 / m2).sqrt();
        let at = |eta: f64| {
            let scale2 = eta * eta * m2;
            let wt = fro / eta;
            (scale2 + wt * wt, 2.0 * wt * scale2.sqrt())
        };
        let (lhs, frobenius_rhs) = at(eta_star);
        let rhs = 2.0 / root_hw * l1 * m;
        let eta_frobenius = (fro / m).sqrt();
        let (eq_lhs, eq_rhs) = at(eta_frobenius);
        channels.push(ChannelPenalty {
            channel: c,
            alpha,
            beta,
            penalty_weight: m,
            l1,
            frobenius: fro,
            eta_star,
            lhs,
            rhs,
            holds_as_stated: lhs >= rhs,
            frobenius_rhs,
            frobenius_holds: lhs >= frobenius_rhs * (1.0 - 1e-12),
            eta_frobenius,
            equality_residual: (eq_lhs - eq_rhs).abs() / eq_lhs,
        });
    }
    let total_lhs = channels.iter().map(|c| c.lhs).sum();
    let total_rhs = channels.iter().map(|c| c.rhs).sum();
    Ok(PenaltyBoundReport {
        hw,
        holds_as_stated: total_lhs >= total_rhs,
        frobenius_holds: channels.iter().all(|c| c.frobenius_holds),
        max_equality_residual: channels.iter().map(|c| c.equality_residual).fold(0.0, f64::max),
        channels,
        degenerate_channels,
        total_lhs,
        total_rhs,
    })
}
