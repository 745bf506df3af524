use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const POWER_MAX_ITERS: usize = 500;
pub const POWER_TOL: f64 = 1e-10;
const POWER_SEED: u64 = 0x5eed;

/// Largest singular value from power iteration on `BᵀB`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Operator norm with the default tolerance and iteration budget.
pub fn operator_norm(b: &Tensor) -> Result<OperatorNorm> {
    operator_norm_with(b, POWER_TOL, POWER_MAX_ITERS)
}

/// Power iteration on `BᵀB` from a fixed-seed start vector, stopping when the
/// singular value estimate changes by less than `tol` relative. A run that
/// does not converge is restarted once from a different seed; the better
/// converged of the two is returned.
pub fn operator_norm_with(b: &Tensor, tol: f64, max_iters: usize) -> Result<OperatorNorm> {
    if b.rank() != 2 {
        return Err(Error::Contract(format!("operator norm of rank-{} tensor", b.rank())));
    }
    if !b.is_finite() {
        return Err(Error::Domain {
            op: "operator_norm",
            detail: "non-finite entries".into(),
        });
    }
    let first = power_iteration(b, tol, max_iters, POWER_SEED);
    if first.converged {
        return Ok(first);
    }
    log::debug!("power iteration did not converge in {max_iters} steps; restarting");
    let second = power_iteration(b, tol, max_iters, POWER_SEED + 1);
    Ok(if second.converged || second.value > first.value {
        second
    } else {
        first
    })
}

fn power_iteration(b: &Tensor, tol: f64, max_iters: usize, seed: u64) -> OperatorNorm {
    let d = b.shape()[1];
    let bt = b.t().expect("rank 2");
    let mut v = Tensor::randn(&[d, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let norm = v.norm_l2();
    v = v.scale(1.0 / norm);
    let mut sigma = 0.0;
    for it in 1..=max_iters {
        let u = b.matmul(&v).expect("shapes agree");
        let next = u.norm_l2();
        if next == 0.0 {
            // v lies in the null space; only possible for B = 0 or a
            // pathological start, both of which give σ = 0 here.
            return OperatorNorm {
                value: 0.0,
                iterations: it,
                converged: b.norm_l2() == 0.0,
            };
        }
        let w = bt.matmul(&u).expect("shapes agree");
        let wn = w.norm_l2();
        v = w.scale(1.0 / wn);
        if (next - sigma).abs() <= tol * next {
            return OperatorNorm {
                value: next,
                iterations: it,
                converged: true,
            };
        }
        sigma = next;
    }
    OperatorNorm {
        value: sigma,
        iterations: max_iters,
        converged: false,
    }
}
