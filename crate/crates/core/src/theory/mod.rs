//! Convergence-bound calculators and empirical checks on synthetic problems.

mod bound;
mod harness;
mod lemmas;

pub use bound::{delta_t, stationarity_rhs, GapParams, StationarityBound, StationarityParams};
pub use harness::{empirical_bound_check, BiasMode, BoundCheckReport, SyntheticProblem};
pub use lemmas::{
    client_variance_check, expectation_shift_check, kl_divergence, pinsker_check, random_distribution,
    total_variation, tv_pinsker_check, ClientVarianceReport, PinskerOutcome, ShiftOutcome, TvPinskerReport,
    INEQUALITY_SLACK,
};
