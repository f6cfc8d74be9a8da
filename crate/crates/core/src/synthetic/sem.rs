//! Linear structural equation model with a latent confounder U, covariates
//! X and three ordered short-term outcome groups, plus its closed-form
//! outcome and selection bridges.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedSample, Group, LatentLog, ObservationRow};
use crate::error::{Error, Result};
use crate::gmm::logistic::sigmoid;
use crate::gmm::{LinearArm, LogLinearArm, OutcomeBridge, SelectionBridge};
use crate::linalg;
use crate::rng::SplitMix64;

/// Row-major matrix as nested vectors (JSON friendly).
pub type Mat = Vec<Vec<f64>>;

/// One short-term outcome equation
/// `S_j = τ_j A + α_j S_{j−1} + β_j X + γ_j U + σ_j ε_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemStage {
    pub tau: Vec<f64>,
    /// `d_j × d_{j−1}`; empty for the first stage.
    #[serde(default)]
    pub alpha: Mat,
    /// `d_j × d_x`
    pub beta: Mat,
    /// `d_j × d_u`
    pub gamma: Mat,
    pub sigma: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSemParams {
    pub tau_y: f64,
    pub alpha_y: Vec<f64>,
    pub beta_y: Vec<f64>,
    pub gamma_y: Vec<f64>,
    pub s1: SemStage,
    pub s2: SemStage,
    pub s3: SemStage,
    pub sigma_y: f64,
    pub kappa1: Vec<f64>,
    pub kappa2: Vec<f64>,
    pub rho_ux: f64,
    #[serde(default = "half")]
    pub p_treat_e: f64,
    /// Mean shift of X in the E sample (empty means none).
    #[serde(default)]
    pub e_x_shift: Vec<f64>,
    /// Slopes of the E-sample propensity on X, which is
    /// `logistic(logit(p_treat_e) + e_propensity_xᵀX)` (empty means none).
    #[serde(default)]
    pub e_propensity_x: Vec<f64>,
}

fn col(v: f64) -> Mat {
    vec![vec![v]]
}

fn mat(m: &Mat, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| m[i][j])
}

fn mv(m: &Mat, v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar coefficients for a model with every dimension equal to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSem {
    /// (τ₁, τ₂, τ₃, τ_y)
    pub tau: [f64; 4],
    /// (α₂, α₃, α_y)
    pub alpha: [f64; 3],
    /// (β₁, β₂, β₃, β_y)
    pub beta: [f64; 4],
    /// (γ₁, γ₂, γ₃, γ_y)
    pub gamma: [f64; 4],
    /// (σ₁, σ₂, σ₃, σ_y)
    pub sigma: [f64; 4],
    /// (κ₁, κ₂)
    pub kappa: [f64; 2],
    pub rho_ux: f64,
}

impl From<ScalarSem> for LinearSemParams {
    fn from(s: ScalarSem) -> Self {
        let stage = |j: usize| SemStage {
            tau: vec![s.tau[j]],
            alpha: if j == 0 { vec![] } else { col(s.alpha[j - 1]) },
            beta: col(s.beta[j]),
            gamma: col(s.gamma[j]),
            sigma: s.sigma[j],
        };
        LinearSemParams {
            tau_y: s.tau[3],
            alpha_y: vec![s.alpha[2]],
            beta_y: vec![s.beta[3]],
            gamma_y: vec![s.gamma[3]],
            s1: stage(0),
            s2: stage(1),
            s3: stage(2),
            sigma_y: s.sigma[3],
            kappa1: vec![s.kappa[0]],
            kappa2: vec![s.kappa[1]],
            rho_ux: s.rho_ux,
            p_treat_e: 0.5,
            e_x_shift: vec![],
            e_propensity_x: vec![],
        }
    }
}

impl LinearSemParams {
    /// Confounded scalar model used throughout the test suites: a strong S₁
    /// proxy, moderate selection on U and a nonzero persistent effect of U
    /// on Y.
    pub fn confounded_default() -> Self {
        ScalarSem {
            tau: [1.0, 0.5, 0.5, 1.0],
            alpha: [0.5, 0.5, 0.5],
            beta: [0.3, 0.3, 0.3, 0.3],
            gamma: [1.0, 0.5, 1.0, 1.0],
            sigma: [0.5, 1.0, 0.5, 1.0],
            kappa: [0.6, 0.3],
            rho_ux: 0.3,
        }
        .into()
    }

    /// Random scalar model with well-conditioned bridges.
    pub fn random(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut unif = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
        ScalarSem {
            tau: [unif(-1.0, 1.0), unif(-1.0, 1.0), unif(-1.0, 1.0), unif(-1.0, 1.0)],
            alpha: [unif(-0.6, 0.6), unif(-0.6, 0.6), unif(-0.6, 0.6)],
            beta: [unif(-0.5, 0.5), unif(-0.5, 0.5), unif(-0.5, 0.5), unif(-0.5, 0.5)],
            gamma: [unif(0.6, 1.2), unif(-0.4, 0.4), unif(0.6, 1.2), unif(-1.0, 1.0)],
            sigma: [unif(0.5, 1.0), unif(0.5, 1.0), unif(0.5, 1.0), unif(0.5, 1.0)],
            kappa: [unif(-0.8, 0.8), unif(-0.5, 0.5)],
            rho_ux: unif(-0.5, 0.5),
        }
        .into()
    }

    pub fn d_u(&self) -> usize {
        self.gamma_y.len()
    }

    pub fn d_x(&self) -> usize {
        self.beta_y.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.s1.tau.len(), self.s2.tau.len(), self.s3.tau.len()]
    }

    fn has_shift(&self) -> bool {
        self.e_x_shift.iter().chain(&self.e_propensity_x).any(|v| *v != 0.0)
    }

    /// Shape and range checks plus existence of the outcome bridge.
    pub fn validate(&self) -> Result<()> {
        let (du, dx) = (self.d_u(), self.d_x());
        let d = self.dims();
        let bad = |m: &str| Err(Error::Config(format!("LinearSemParams: {m}")));
        if d.iter().any(|&v| v == 0) {
            return bad("every short-term outcome needs dimension >= 1");
        }
        let stages = [&self.s1, &self.s2, &self.s3];
        for (j, st) in stages.iter().enumerate() {
            let prev = if j == 0 { 0 } else { d[j - 1] };
            if st.beta.len() != d[j] || st.gamma.len() != d[j] {
                return bad(&format!("stage {} has wrong row count", j + 1));
            }
            if st.beta.iter().any(|r| r.len() != dx) || st.gamma.iter().any(|r| r.len() != du) {
                return bad(&format!("stage {} beta/gamma widths", j + 1));
            }
            if j > 0 && (st.alpha.len() != d[j] || st.alpha.iter().any(|r| r.len() != prev)) {
                return bad(&format!("stage {} alpha shape", j + 1));
            }
            if !(st.sigma > 0.0) {
                return bad("all sigma must be positive");
            }
        }
        if self.alpha_y.len() != d[2] || self.kappa1.len() != du || self.kappa2.len() != dx {
            return bad("alpha_y / kappa widths");
        }
        if !(self.sigma_y > 0.0) {
            return bad("sigma_y must be positive");
        }
        if !(-1.0..=1.0).contains(&self.rho_ux) {
            return bad("rho_ux must lie in [-1, 1]");
        }
        if !(self.p_treat_e > 0.0 && self.p_treat_e < 1.0) {
            return bad("p_treat_e must lie in (0, 1)");
        }
        for v in [&self.e_x_shift, &self.e_propensity_x] {
            if !v.is_empty() && v.len() != dx {
                return bad("covariate-shift vectors must have length d_x");
            }
        }
        omega(self).map(|_| ())
    }

    /// Draw one unit. Returns (u, x, a, s1, s2, s3, y).
    fn draw(&self, rng: &mut SplitMix64, group: Group) -> (Vec<f64>, ObservationRow) {
        let (du, dx) = (self.d_u(), self.d_x());
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        let x: Vec<f64> = (0..dx)
            .map(|j| {
                let shift = match group {
                    Group::E => self.e_x_shift.get(j).copied().unwrap_or(0.0),
                    Group::O => 0.0,
                };
                n() + shift
            })
            .collect();
        let r = self.rho_ux;
        let c = (1.0 - r * r).sqrt();
        let u: Vec<f64> = (0..du).map(|i| if i < dx { r * x[i] + c * n() } else { n() }).collect();
        let p1 = match group {
            Group::O => 1.0 / (1.0 + (dot(&self.kappa1, &u) + dot(&self.kappa2, &x)).exp()),
            Group::E => {
                let base = (self.p_treat_e / (1.0 - self.p_treat_e)).ln();
                sigmoid(base + dot(&self.e_propensity_x, &x))
            }
        };
        let a = (rng.uniform() < p1) as u8;
        let (s1, s2, s3, y) = self.outcomes(rng, a, &u, &x);
        let row = ObservationRow {
            group,
            a,
            x,
            s1,
            s2,
            s3,
            y: (group == Group::O).then_some(y),
        };
        (u, row)
    }

    /// Simulate (S₁, S₂, S₃, Y) under treatment `a` for fixed (u, x).
    pub fn outcomes(&self, rng: &mut SplitMix64, a: u8, u: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let af = a as f64;
        let mut stage = |st: &SemStage, prev: Option<&[f64]>| -> Vec<f64> {
            let bx = mv(&st.beta, x);
            let gu = mv(&st.gamma, u);
            let ap = prev.map(|p| mv(&st.alpha, p));
            (0..st.tau.len())
                .map(|i| {
                    let e: f64 = StandardNormal.sample(rng);
                    st.tau[i] * af + ap.as_ref().map_or(0.0, |v| v[i]) + bx[i] + gu[i] + st.sigma * e
                })
                .collect()
        };
        let s1 = stage(&self.s1, None);
        let s2 = stage(&self.s2, Some(&s1));
        let s3 = stage(&self.s3, Some(&s2));
        let e: f64 = StandardNormal.sample(rng);
        let y =
            self.tau_y * af + dot(&self.alpha_y, &s3) + dot(&self.beta_y, x) + dot(&self.gamma_y, u) + self.sigma_y * e;
        (s1, s2, s3, y)
    }

    /// `P(A = a | U = u, X = x, G = O)`.
    pub fn o_propensity(&self, a: u8, u: &[f64], x: &[f64]) -> f64 {
        let p1 = 1.0 / (1.0 + (dot(&self.kappa1, u) + dot(&self.kappa2, x)).exp());
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

/// Simulate `n_o` observational then `n_e` experimental rows.
pub fn gen_linear_sem(
    params: &LinearSemParams,
    n_o: usize,
    n_e: usize,
    seed: u64,
) -> Result<(CombinedSample, LatentLog)> {
    params.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::with_capacity(n_o + n_e);
    let mut us = Vec::with_capacity(n_o + n_e);
    for i in 0..n_o + n_e {
        let g = if i < n_o { Group::O } else { Group::E };
        let (u, row) = params.draw(&mut rng, g);
        rows.push(row);
        us.push(u);
    }
    Ok((CombinedSample::new(rows)?, LatentLog { u: us }))
}

/// Total effect `τ_y + α_yᵀΔ₃` with `Δ₁ = τ₁`, `Δ_j = τ_j + α_j Δ_{j−1}`.
pub fn linear_sem_true_tau(p: &LinearSemParams) -> f64 {
    let d1 = p.s1.tau.clone();
    let add =
        |t: &[f64], a: &Mat, prev: &[f64]| -> Vec<f64> { t.iter().zip(mv(a, prev)).map(|(x, y)| x + y).collect() };
    let d2 = add(&p.s2.tau, &p.s2.alpha, &d1);
    let d3 = add(&p.s3.tau, &p.s3.alpha, &d2);
    p.tau_y + dot(&p.alpha_y, &d3)
}

/// Least-norm ω with `γ₃ᵀω = γ_y`; errors when no solution exists.
fn omega(p: &LinearSemParams) -> Result<DVector<f64>> {
    let d3 = p.dims()[2];
    let du = p.d_u();
    let g3t = mat(&p.s3.gamma, d3, du).transpose();
    let gy = DVector::from_column_slice(&p.gamma_y);
    let w = linalg::least_norm_solve(&g3t, &gy);
    let resid = linalg::inf_norm(&(&g3t * &w - &gy));
    if resid > 1e-10 * (1.0 + linalg::inf_norm(&gy)) {
        return Err(Error::Existence(format!(
            "gamma_3 has rank {} < d_u and gamma_y is outside its row space; no linear outcome bridge",
            linalg::rank(&g3t)
        )));
    }
    Ok(w)
}

/// Closed-form linear outcome bridge of the SEM.
pub fn closed_form_h(p: &LinearSemParams) -> Result<OutcomeBridge> {
    p.validate()?;
    let [_, d2, d3] = p.dims();
    let dx = p.d_x();
    let w = omega(p)?;
    let a3 = mat(&p.s3.alpha, d3, d2);
    let b3 = mat(&p.s3.beta, d3, dx);
    let t3 = DVector::from_column_slice(&p.s3.tau);
    let theta3 = &w + DVector::from_column_slice(&p.alpha_y);
    let theta2 = -(a3.transpose() * &w);
    let theta1 = p.tau_y - t3.dot(&w);
    let theta0 = DVector::from_column_slice(&p.beta_y) - b3.transpose() * &w;
    let arm = |a: f64| LinearArm {
        s3: theta3.iter().cloned().collect(),
        s2: theta2.iter().cloned().collect(),
        x: theta0.iter().cloned().collect(),
        intercept: theta1 * a,
    };
    Ok(OutcomeBridge::linear([arm(0.0), arm(1.0)]))
}

/// Regression of S₁ on (S₂, A, X, U): `E[S₁ | ·] = λ₁S₂ + λ₂A + λ₃X + λ₄U`
/// with residual covariance Σ₁|₂.
#[derive(Debug, Clone)]
pub struct SelectionLambdas {
    pub lambda1: DMatrix<f64>,
    pub lambda2: DVector<f64>,
    pub lambda3: DMatrix<f64>,
    pub lambda4: DMatrix<f64>,
    pub sigma_1_given_2: DMatrix<f64>,
}

pub fn selection_lambdas(p: &LinearSemParams) -> SelectionLambdas {
    let [d1, d2, _] = p.dims();
    let (du, dx) = (p.d_u(), p.d_x());
    let s1sq = p.s1.sigma * p.s1.sigma;
    let a2 = mat(&p.s2.alpha, d2, d1);
    let sigma22 = &a2 * a2.transpose() * s1sq + DMatrix::identity(d2, d2) * (p.s2.sigma * p.s2.sigma);
    let inv22 = linalg::spd_inverse(&sigma22);
    let lambda1 = a2.transpose() * &inv22 * s1sq;
    let proj = DMatrix::identity(d1, d1) - &lambda1 * &a2;
    let t1 = DVector::from_column_slice(&p.s1.tau);
    let t2 = DVector::from_column_slice(&p.s2.tau);
    let lambda2 = &proj * t1 - &lambda1 * t2;
    let lambda3 = &proj * mat(&p.s1.beta, d1, dx) - &lambda1 * mat(&p.s2.beta, d2, dx);
    let lambda4 = &proj * mat(&p.s1.gamma, d1, du) - &lambda1 * mat(&p.s2.gamma, d2, du);
    let sigma_1_given_2 = DMatrix::identity(d1, d1) * s1sq - a2.transpose() * &inv22 * &a2 * (s1sq * s1sq);
    SelectionLambdas {
        lambda1,
        lambda2,
        lambda3,
        lambda4,
        sigma_1_given_2,
    }
}

/// Closed-form selection bridge `q = c₁,ₐ exp(θ₂ᵀs₂ + θ₁ᵀs₁ + θ₀ᵀx) + c₀,ₐ`.
///
/// The target is the density ratio `P(A=a|G=O) / P(A=a|U,X,G=O)`, which for
/// the logistic O-propensity equals `p̄ₐ(1 + exp(±(κ₁ᵀU + κ₂ᵀX)))` with sign
/// `+` for a = 1 and `−` for a = 0. Because (U, X) is centred Gaussian the
/// index is symmetric and `p̄ₐ = 1/2`.
pub fn closed_form_q(p: &LinearSemParams) -> Result<SelectionBridge> {
    p.validate()?;
    if p.has_shift() {
        return Err(Error::Existence(
            "closed-form selection bridge assumes no covariate shift between samples".into(),
        ));
    }
    let l = selection_lambdas(p);
    let l4t = l.lambda4.transpose();
    let k1 = DVector::from_column_slice(&p.kappa1);
    let k2 = DVector::from_column_slice(&p.kappa2);
    let pbar: f64 = 0.5;
    let mut arms = Vec::new();
    for a in 0..2u8 {
        let sign = if a == 1 { 1.0 } else { -1.0 };
        let target = &k1 * sign;
        let theta1 = linalg::least_norm_solve(&l4t, &target);
        if linalg::inf_norm(&(&l4t * &theta1 - &target)) > 1e-10 * (1.0 + linalg::inf_norm(&target)) {
            return Err(Error::Existence(format!(
                "lambda_4 has rank {} < d_u; no log-linear selection bridge",
                linalg::rank(&l.lambda4)
            )));
        }
        let theta2 = -(l.lambda1.transpose() * &theta1);
        let theta0 = &k2 * sign - l.lambda3.transpose() * &theta1;
        let quad = (theta1.transpose() * &l.sigma_1_given_2 * &theta1)[(0, 0)];
        let log_c1 = pbar.ln() - 0.5 * quad - a as f64 * theta1.dot(&l.lambda2);
        arms.push(LogLinearArm {
            s2: theta2.iter().cloned().collect(),
            s1: theta1.iter().cloned().collect(),
            x: theta0.iter().cloned().collect(),
            gamma: log_c1,
            offset: pbar,
        });
    }
    let a1 = arms.pop().expect("two arms");
    let a0 = arms.pop().expect("two arms");
    Ok(SelectionBridge::loglinear([a0, a1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;
    use crate::gmm::OutcomeForm;

    fn scalar_h_example() -> LinearSemParams {
        ScalarSem {
            tau: [0.0, 0.0, 0.5, 1.0],
            alpha: [0.0, 0.4, 0.2],
            beta: [0.0, 0.0, 0.6, 0.3],
            gamma: [1.0, 1.0, 1.0, 0.5],
            sigma: [1.0; 4],
            kappa: [0.0, 0.0],
            rho_ux: 0.0,
        }
        .into()
    }

    #[test]
    fn closed_form_h_scalar_example() {
        let h = closed_form_h(&scalar_h_example()).unwrap();
        let OutcomeForm::Linear { arms } = &h.form else {
            panic!()
        };
        assert!((arms[1].s3[0] - 0.7).abs() < 1e-12);
        assert!((arms[1].s2[0] + 0.2).abs() < 1e-12);
        assert!((arms[1].intercept - arms[0].intercept - 0.75).abs() < 1e-12);
        assert!(arms[1].x[0].abs() < 1e-12);
    }

    #[test]
    fn closed_form_h_without_persistent_effect() {
        let mut p = scalar_h_example();
        p.gamma_y = vec![0.0];
        let h = closed_form_h(&p).unwrap();
        let OutcomeForm::Linear { arms } = &h.form else {
            panic!()
        };
        assert!((arms[1].s3[0] - p.alpha_y[0]).abs() < 1e-12);
        assert!((arms[1].intercept - p.tau_y).abs() < 1e-12);
        assert!(arms[1].s2[0].abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_gamma3_is_existence_error() {
        let mut p = scalar_h_example();
        p.s3.gamma = col(0.0);
        assert!(matches!(closed_form_h(&p), Err(Error::Existence(_))));
    }

    #[test]
    fn true_tau_cases() {
        let mut p = LinearSemParams::confounded_default();
        for st in [&mut p.s1, &mut p.s2, &mut p.s3] {
            st.tau = vec![0.0];
        }
        p.tau_y = 0.0;
        assert_eq!(linear_sem_true_tau(&p), 0.0);
        p.tau_y = 1.0;
        p.alpha_y = vec![0.0];
        assert_eq!(linear_sem_true_tau(&p), 1.0);
        let q: LinearSemParams = ScalarSem {
            tau: [0.7, 0.3, 0.5, 1.0],
            alpha: [0.1, 0.4, 0.2],
            beta: [0.0; 4],
            gamma: [1.0; 4],
            sigma: [1.0; 4],
            kappa: [0.0, 0.0],
            rho_ux: 0.0,
        }
        .into();
        let expected = 1.0 + 0.2 * (0.5 + 0.4 * (0.3 + 0.1 * 0.7));
        assert!((linear_sem_true_tau(&q) - expected).abs() < 1e-15);
    }

    #[test]
    fn no_selection_q_is_one() {
        let mut p = LinearSemParams::confounded_default();
        p.kappa1 = vec![0.0];
        p.kappa2 = vec![0.0];
        let q = closed_form_q(&p).unwrap();
        for a in 0..2 {
            assert!((q.eval(&[0.3], &[-1.2], a, &[2.0]) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_q_deterministic() {
        let p = LinearSemParams::random(3);
        assert_eq!(closed_form_q(&p).unwrap(), closed_form_q(&p).unwrap());
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let p = LinearSemParams::confounded_default();
        let (a, la) = gen_linear_sem(&p, 500, 400, 9).unwrap();
        let (b, lb) = gen_linear_sem(&p, 500, 400, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let rep = validate(&a).unwrap();
        assert!(rep.warnings.is_empty());
        assert_eq!(a.n_o(), 500);
        assert_eq!(a.n_e(), 400);
    }

    #[test]
    fn invalid_sigma_rejected() {
        let mut p = LinearSemParams::confounded_default();
        p.s2.sigma = 0.0;
        assert!(gen_linear_sem(&p, 10, 10, 0).is_err());
    }
}
