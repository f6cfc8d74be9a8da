//! Moment-system construction and solvers for the bridge functions, the
//! arm/group ratio, and logistic nuisance models.

pub mod basis;
pub mod bridge;
pub mod logistic;
pub mod outcome;
pub mod selection;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedSample, Group, ObservationRow};
use crate::error::{Error, Result};
use crate::linalg;

pub use basis::{build_instruments, BasisKind, BasisSpec, Conditioning};
pub use bridge::{
    BlockDiagnostics, BridgeDiagnostics, CellTable, LinearArm, LogLinearArm, OutcomeBridge, OutcomeForm,
    SelectionBridge, SelectionForm,
};
pub use logistic::{fit_logistic, LogisticFit};
pub use outcome::fit_h_linear_gmm;
pub use selection::fit_q_loglinear_gmm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Identity,
    /// Inverse of the instrument second-moment matrix.
    TwoStep,
}

/// Additive constant in the selection bridge `q = exp(·) + c₀,ₐ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum SelectionOffset {
    /// Pure log-linear form.
    None,
    /// `c₀,ₐ` equal to the O-sample share of arm `a` in the fitting rows.
    /// Under logistic O-selection the density ratio is exactly
    /// `P(A=a|G=O)·(1 + exp(±index))`, so this makes the form well specified.
    ArmShare,
    /// Caller-supplied constants per arm.
    Fixed([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    /// λ₀; the effective penalty of a block with n rows is λ₀ / n.
    pub ridge_scale: f64,
    pub weighting: Weighting,
    pub max_iter: usize,
    pub step_tol: f64,
    /// Step shrink factor used by the backtracking line search.
    pub damping: f64,
    /// Center and scale non-intercept columns by O-sample statistics.
    pub standardize: bool,
    pub selection_offset: SelectionOffset,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            ridge_scale: 0.0,
            weighting: Weighting::Identity,
            max_iter: 200,
            step_tol: 1e-10,
            damping: 0.5,
            standardize: true,
            selection_offset: SelectionOffset::None,
        }
    }
}

impl GmmConfig {
    pub fn with_ridge(mut self, lambda0: f64) -> Self {
        self.ridge_scale = lambda0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_scale >= 0.0) || !self.ridge_scale.is_finite() {
            return Err(Error::Config(format!("ridge scale {} must be >= 0", self.ridge_scale)));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::Config("damping must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `r̂_a = n_E^(a) / n_O^(a)`.
pub fn estimate_arm_group_ratio(sample: &CombinedSample) -> Result<[f64; 2]> {
    let rows: Vec<&ObservationRow> = sample.rows().iter().collect();
    arm_group_ratio(&rows)
}

/// [`estimate_arm_group_ratio`] over an arbitrary row subset.
pub fn arm_group_ratio(rows: &[&ObservationRow]) -> Result<[f64; 2]> {
    let mut c = [[0usize; 2]; 2];
    for r in rows {
        c[(r.group == Group::O) as usize][r.a as usize] += 1;
    }
    let mut out = [0.0; 2];
    for a in 0..2 {
        if c[0][a] == 0 || c[1][a] == 0 {
            return Err(Error::Validation(format!(
                "empty cell for arm {a}: n_E = {}, n_O = {}",
                c[0][a], c[1][a]
            )));
        }
        out[a] = c[0][a] as f64 / c[1][a] as f64;
    }
    Ok(out)
}

/// Weight matrix for instruments `f` (rows are observations).
pub(crate) fn weight_matrix(f: &DMatrix<f64>, weighting: Weighting) -> DMatrix<f64> {
    let m = f.ncols();
    match weighting {
        Weighting::Identity => DMatrix::identity(m, m),
        Weighting::TwoStep => {
            let s = f.transpose() * f / f.nrows().max(1) as f64;
            linalg::spd_inverse(&s)
        }
    }
}

/// Minimize `‖m − Gθ‖²_W + λ‖θ‖²` in closed form. Returns θ and the
/// W-norms of the moment at θ = 0 and at the solution.
pub(crate) fn solve_linear_gmm(
    g: &DMatrix<f64>,
    m: &DVector<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
) -> Result<(DVector<f64>, f64, f64)> {
    let p = g.ncols();
    if g.nrows() < p {
        return Err(Error::Argument(format!(
            "order condition fails: {} instruments for {p} features",
            g.nrows()
        )));
    }
    let gtw = g.transpose() * w;
    let a = &gtw * g + DMatrix::identity(p, p) * lambda;
    let b = &gtw * m;
    let theta = linalg::solve_spd(&a, &b)?;
    let wnorm = |v: &DVector<f64>| (v.transpose() * w * v)[(0, 0)].max(0.0).sqrt();
    let resid = m - g * &theta;
    Ok((theta, wnorm(m), wnorm(&resid)))
}
