//! Data-generating processes with known ground truth: a discrete DGP with
//! exact enumeration oracles, a linear-Gaussian SEM with closed-form
//! bridges, and a subsampling injector that confounds a randomized sample.

pub mod discrete;
pub mod sem;
pub mod subsample;

pub use discrete::{
    discrete_oracle_h, discrete_oracle_q, discrete_true_tau, gen_discrete_dgp, sample_discrete, verify_identification,
    DiscreteDgp, IdentificationReport, LawPoint,
};
pub use sem::{
    closed_form_h, closed_form_q, gen_linear_sem, linear_sem_true_tau, LinearSemParams, ScalarSem, SemStage,
};
pub use subsample::{
    biased_subsample, check_subsample_invariance, gen_semisynthetic, InvarianceReport, SemiSyntheticConfig,
    SubsampleConfig,
};
