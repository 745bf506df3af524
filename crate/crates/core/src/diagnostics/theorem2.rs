//! Moments of `B = ReLU_{α,β}(A)` for zero-mean entry distributions and the
//! Monte-Carlo check of the token-matrix norm bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use super::cosine::cos_sim_bound;
use super::spectral::operator_norm;
use crate::error::{Error, Result};
use crate::nn::scaled_relu;
use crate::tensor::Tensor;

/// Zero-mean entry distribution of `A`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EntryDist {
    /// Uniform on `[−half_width, half_width]`.
    Uniform { half_width: f64 },
    /// `N(0, std²)`.
    Gaussian { std: f64 },
}

impl fmt::Display for EntryDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryDist::Uniform { half_width } => write!(f, "uniform[-{half_width},{half_width}]"),
            EntryDist::Gaussian { std } => write!(f, "gaussian(0,{std}^2)"),
        }
    }
}

impl EntryDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EntryDist::Uniform { half_width } => half_width > 0.0 && half_width.is_finite(),
            EntryDist::Gaussian { std } => std > 0.0 && std.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution {self}")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EntryDist::Uniform { half_width } => rng.random_range(-half_width..=half_width),
            EntryDist::Gaussian { std } => {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            }
        }
    }

    /// `(E[max(A+α, 0)], E[max(A+α, 0)²])`.
    fn rectified_moments(&self, alpha: f64) -> (f64, f64) {
        match *self {
            EntryDist::Uniform { half_width: w } => {
                let hi = alpha + w;
                if hi <= 0.0 {
                    return (0.0, 0.0);
                }
                let lo = (alpha - w).max(0.0);
                let density = 1.0 / (2.0 * w);
                (
                    density * (hi * hi - lo * lo) / 2.0,
                    density * (hi.powi(3) - lo.powi(3)) / 3.0,
                )
            }
            EntryDist::Gaussian { std: s } => {
                // Rectified Gaussian with mean α.
                let z = alpha / s;
                let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
                let cdf = 0.5 * (1.0 + libm::erf(z / 2f64.sqrt()));
                (alpha * cdf + s * pdf, (alpha * alpha + s * s) * cdf + alpha * s * pdf)
            }
        }
    }

    /// Analytic `(μ_B, σ²_B)` for `B = β·max(A+α, 0)`.
    pub fn analytic_moments(&self, alpha: f64, beta: f64) -> (f64, f64) {
        let (m1, m2) = self.rectified_moments(alpha);
        (beta * m1, (beta * beta * (m2 - m1 * m1)).max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub dist: EntryDist,
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    pub mu_b: f64,
    pub sigma2_b: f64,
    pub sigma_b: f64,
    /// Standard error of `mu_b`.
    pub mu_se: f64,
    /// Standard error of `sigma2_b` (from the fourth central moment).
    pub sigma2_se: f64,
    pub analytic_mu: f64,
    pub analytic_sigma2: f64,
}

pub const MIN_QUIET_SAMPLES: usize = 10_000;

/// Monte-Carlo moments of `B = ReLU_{α,β}(A)` next to their analytic values.
pub fn moment_oracle(dist: EntryDist, alpha: f64, beta: f64, samples: usize, seed: u64) -> Result<MomentReport> {
    dist.validate()?;
    if samples < 2 {
        return Err(Error::Contract("moment_oracle needs at least 2 samples".into()));
    }
    if samples < MIN_QUIET_SAMPLES {
        log::warn!("moment_oracle: {samples} samples gives a noisy estimate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..samples)
        .map(|_| beta * (dist.sample(&mut rng) + alpha).max(0.0))
        .collect();
    let n = samples as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in &xs {
        let c = (x - mu) * (x - mu);
        m2 += c;
        m4 += c * c;
    }
    let (m2, m4) = (m2 / n, m4 / n);
    let sigma2 = m2 * n / (n - 1.0);
    let (analytic_mu, analytic_sigma2) = dist.analytic_moments(alpha, beta);
    Ok(MomentReport {
        dist,
        alpha,
        beta,
        samples,
        mu_b: mu,
        sigma2_b: sigma2,
        sigma_b: sigma2.sqrt(),
        mu_se: (sigma2 / n).sqrt(),
        sigma2_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        analytic_mu,
        analytic_sigma2,
    })
}

/// Constants of the concentration argument that have no stated values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundKnobs {
    /// `‖A‖_op ≤ R·√(nd)`.
    pub r: f64,
    /// Failure probability of the matrix Bernstein step.
    pub delta: f64,
}

impl Default for BoundKnobs {
    fn default() -> Self {
        Self { r: 1.0, delta: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBoundConfig {
    pub dist: EntryDist,
    pub alpha: f64,
    pub beta: f64,
    pub n: usize,
    pub d: usize,
    pub gamma: f64,
    pub trials: usize,
    pub seed: u64,
    pub knobs: BoundKnobs,
}

impl Default for TokenBoundConfig {
    fn default() -> Self {
        Self {
            dist: EntryDist::Uniform { half_width: 1.0 },
            alpha: 0.0,
            beta: 1.0,
            n: 50,
            d: 256,
            gamma: 0.5,
            trials: 1000,
            seed: 0,
            knobs: BoundKnobs::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBoundReport {
    pub config: TokenBoundConfig,
    pub dist: String,
    /// Analytic moments used in the thresholds.
    pub mu_b: f64,
    pub sigma_b: f64,
    /// Moments pooled over every sampled entry.
    pub empirical_mu_b: f64,
    pub empirical_sigma_b: f64,
    /// `√(d(μ² + (1−γ)σ²))`.
    pub min_row_norm_threshold: f64,
    pub min_row_norm_samples: Vec<f64>,
    pub op_norm_samples: Vec<f64>,
    pub violation_fraction: f64,
    pub cos_sim_bound_holds: bool,
    pub cos_sim_bound_failures: usize,
    /// `μ·√(nd) + σ·√(n+d)`.
    pub op_norm_reference: f64,
    pub mean_op_norm_ratio: f64,
    /// `(n + d)σ²` as stated for the variance proxy.
    pub sigma_max_sq_stated: f64,
    /// `max(‖E[XXᵀ]‖, ‖E[XᵀX]‖)` estimated over the trials, `X = B − μE`.
    pub sigma_max_sq_empirical: f64,
    pub sigma_max_sq_exceeded: bool,
    /// Matrix Bernstein deviation `t` at probability `δ` with
    /// `R_max = (βR + βα + μ)√(nd)`.
    pub bernstein_t: f64,
    /// Fraction of trials with `‖X‖_op ≤ t`.
    pub bernstein_coverage: f64,
}

struct Trial {
    min_row: f64,
    op: f64,
    centred_op: f64,
    bound_holds: bool,
    sum: f64,
    sum_sq: f64,
}

/// Trials of one fixed-size chunk with their summed `XXᵀ` and `XᵀX`.
struct Chunk {
    trials: Vec<Trial>,
    xxt: Tensor,
    xtx: Tensor,
}

/// Fixed chunking keeps the floating-point summation order independent of
/// the worker count.
const TRIAL_CHUNK: usize = 25;

/// Sample `trials` matrices `A`, form `B = ReLU_{α,β}(A)`, and check the
/// minimum-row-norm bound, the cosine-similarity bound, and the operator
/// norm scaling. Trial `k` draws from its own ChaCha stream of `seed`.
pub fn verify_token_bounds(cfg: &TokenBoundConfig) -> Result<TokenBoundReport> {
    cfg.dist.validate()?;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", cfg.gamma)));
    }
    if cfg.trials < 100 {
        return Err(Error::Config(format!(
            "at least 100 trials required, got {}",
            cfg.trials
        )));
    }
    if cfg.n < 2 || cfg.d == 0 {
        return Err(Error::Config("n ≥ 2 and d ≥ 1 required".into()));
    }
    if !(cfg.knobs.delta > 0.0 && cfg.knobs.delta < 1.0) || !(cfg.knobs.r > 0.0) {
        return Err(Error::Config("knobs require R > 0 and δ in (0, 1)".into()));
    }
    let (n, d) = (cfg.n, cfg.d);
    let (mu, sigma2) = cfg.dist.analytic_moments(cfg.alpha, cfg.beta);
    let sigma = sigma2.sqrt();
    let threshold = (d as f64 * (mu * mu + (1.0 - cfg.gamma) * sigma2)).sqrt();

    let run_trial = |k: usize, chunk: &mut Chunk| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let a = Tensor::new(&[n, d], (0..n * d).map(|_| cfg.dist.sample(&mut rng)).collect())?;
        let b = scaled_relu(&a, cfg.alpha, cfg.beta);
        let min_row = (0..n)
            .map(|i| b.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        let bound_holds = if min_row > 0.0 { cos_sim_bound(&b)?.holds } else { true };
        let x = b.map(|v| v - mu);
        let xt = x.t()?;
        chunk.xxt = chunk.xxt.zip_with(&x.matmul(&xt)?, |p, q| p + q)?;
        chunk.xtx = chunk.xtx.zip_with(&xt.matmul(&x)?, |p, q| p + q)?;
        chunk.trials.push(Trial {
            min_row,
            op: operator_norm(&b)?.value,
            centred_op: operator_norm(&x)?.value,
            bound_holds,
            sum: b.sum(),
            sum_sq: b.data().iter().map(|v| v * v).sum(),
        });
        Ok(())
    };
    let chunks: Vec<Chunk> = (0..cfg.trials.div_ceil(TRIAL_CHUNK))
        .into_par_iter()
        .map(|c| -> Result<Chunk> {
            let mut chunk = Chunk {
                trials: Vec::with_capacity(TRIAL_CHUNK),
                xxt: Tensor::zeros(&[n, n]),
                xtx: Tensor::zeros(&[d, d]),
            };
            for k in c * TRIAL_CHUNK..((c + 1) * TRIAL_CHUNK).min(cfg.trials) {
                run_trial(k, &mut chunk)?;
            }
            Ok(chunk)
        })
        .collect::<Result<_>>()?;
    let mut xxt = Tensor::zeros(&[n, n]);
    let mut xtx = Tensor::zeros(&[d, d]);
    let mut trials = Vec::with_capacity(cfg.trials);
    for chunk in chunks {
        xxt = xxt.zip_with(&chunk.xxt, |p, q| p + q)?;
        xtx = xtx.zip_with(&chunk.xtx, |p, q| p + q)?;
        trials.extend(chunk.trials);
    }

    let count = cfg.trials as f64;
    let entries = count * (n * d) as f64;
    let total: f64 = trials.iter().map(|t| t.sum).sum();
    let total_sq: f64 = trials.iter().map(|t| t.sum_sq).sum();
    let empirical_mu = total / entries;
    let empirical_var = (total_sq / entries - empirical_mu * empirical_mu).max(0.0);

    let sigma_max_sq_empirical = operator_norm(&xxt.scale(1.0 / count))?
        .value
        .max(operator_norm(&xtx.scale(1.0 / count))?.value);
    let sigma_max_sq_stated = (n + d) as f64 * sigma2;

    let r_max = (cfg.beta.abs() * cfg.knobs.r + cfg.beta.abs() * cfg.alpha.abs() + mu) * ((n * d) as f64).sqrt();
    let log_term = ((n + d) as f64 / cfg.knobs.delta).ln();
    let lin = log_term * r_max / 3.0;
    let bernstein_t = lin + (lin * lin + 2.0 * log_term * sigma_max_sq_stated).sqrt();

    let op_norm_reference = mu * ((n * d) as f64).sqrt() + sigma * ((n + d) as f64).sqrt();
    let op_norm_samples: Vec<f64> = trials.iter().map(|t| t.op).collect();
    let mean_op = op_norm_samples.iter().sum::<f64>() / count;
    let failures = trials.iter().filter(|t| !t.bound_holds).count();
    let violations = trials.iter().filter(|t| t.min_row < threshold).count();
    Ok(TokenBoundReport {
        dist: cfg.dist.to_string(),
        mu_b: mu,
        sigma_b: sigma,
        empirical_mu_b: empirical_mu,
        empirical_sigma_b: empirical_var.sqrt(),
        min_row_norm_threshold: threshold,
        min_row_norm_samples: trials.iter().map(|t| t.min_row).collect(),
        violation_fraction: violations as f64 / count,
        cos_sim_bound_holds: failures == 0,
        cos_sim_bound_failures: failures,
        op_norm_reference,
        mean_op_norm_ratio: if op_norm_reference > 0.0 {
            mean_op / op_norm_reference
        } else {
            f64::NAN
        },
        op_norm_samples,
        sigma_max_sq_stated,
        sigma_max_sq_empirical,
        sigma_max_sq_exceeded: sigma_max_sq_empirical > sigma_max_sq_stated,
        bernstein_t,
        bernstein_coverage: trials.iter().filter(|t| t.centred_op <= bernstein_t).count() as f64 / count,
        config: cfg.clone(),
    })
}
