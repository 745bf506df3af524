//! Token-diversity metrics and numerical checks of the two theoretical
//! results: the implicit ℓ1 penalty induced by scaled ReLU, and the norm
//! bounds on `B = ReLU_{α,β}(A)` that cap token cosine similarity.

mod cosine;
mod spectral;
mod theorem1;
mod theorem2;

pub use cosine::{
    cos_sim, cos_sim_bound, cos_sim_detailed, layer_diversity, CosSim, CosSimBound, DiversityEntry, DiversityProfile,
    BOUND_SLACK,
};
pub use spectral::{operator_norm, operator_norm_with, OperatorNorm, POWER_MAX_ITERS, POWER_TOL};
pub use theorem1::{verify_penalty_bound, verify_rescaling_invariance, ChannelPenalty, PenaltyBoundReport};
pub use theorem2::{
    moment_oracle, verify_token_bounds, BoundKnobs, EntryDist, MomentReport, TokenBoundConfig, TokenBoundReport,
    MIN_QUIET_SAMPLES,
};
