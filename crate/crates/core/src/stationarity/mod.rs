//! Gradients and stationary points of the two simplified attention regimes:
//! positions-only (`case_a`, plus its simplex-constrained variant) and
//! categories-only (`case_b`), with independent oracles in `oracle`.

pub mod case_a;
pub mod case_b;
pub mod oracle;
pub mod probe;
pub mod simplex;

pub use case_a::{
    canonical_family, essa_empirical, flat_family, grad_q_closed, grad_v_closed, stationary_residuals_case_a,
    CaseAParams, FamilyId, StationaryFamily,
};
pub use case_b::{
    canonical_point, gauge_point, invalid_branch_witness, predict_case_b, stationarity_case_b, zero_row_sum_point,
    CaseBParams,
};
pub use probe::{init_scaling_probe, ProbeReport};
pub use simplex::{projected_descent, softmax_constrained_residual, PgdConfig, PgdResult};
