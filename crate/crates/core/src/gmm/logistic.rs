//! Ridge-penalized logistic regression by damped Newton-Raphson.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Ridge used for the retry after separation is detected.
pub const SEPARATION_RIDGE: f64 = 1e-2;
pub const SEPARATION_NORM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub ridge: f64,
    pub separation: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LogisticFit {
    pub fn linear_predictor(&self, features: &[f64]) -> f64 {
        self.coef.iter().zip(features).map(|(b, x)| b * x).sum()
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(features))
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn penalized_nll(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let nll: f64 = eta.iter().zip(y).map(|(t, yi)| softplus(*t) - yi * t).sum();
    nll + ridge * beta.norm_squared()
}

fn newton(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<(DVector<f64>, usize)> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut f = penalized_nll(x, y, &beta, ridge);
    for it in 1..=100 {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|t| sigmoid(*t)).collect();
        let resid = DVector::from_iterator(y.len(), y.iter().zip(&mu).map(|(yi, m)| yi - m));
        let grad = x.transpose() * resid - &beta * (2.0 * ridge);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= mu[i] * (1.0 - mu[i]);
        }
        let h = x.transpose() * xw + DMatrix::identity(p, p) * (2.0 * ridge);
        let step = linalg::solve_spd(&h, &grad)?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let fc = penalized_nll(x, y, &cand, ridge);
            if fc <= f {
                beta = cand;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || linalg::inf_norm(&step) * t < 1e-10 {
            return Ok((beta, it));
        }
    }
    Ok((beta, 100))
}

/// Fit `P(label = 1 | features) = σ(featuresᵀβ)`. The caller supplies any
/// intercept column.
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[bool]) -> Result<LogisticFit> {
    if features.nrows() != labels.len() {
        return Err(Error::Argument("features and labels differ in length".into()));
    }
    let ones = labels.iter().filter(|&&l| l).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::Argument("logistic fit needs both labels present".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let (beta, iterations) = newton(features, &y, DEFAULT_RIDGE)?;
    if beta.norm() <= SEPARATION_NORM {
        return Ok(LogisticFit {
            coef: beta.iter().cloned().collect(),
            iterations,
            ridge: DEFAULT_RIDGE,
            separation: false,
            warnings: vec![],
        });
    }
    let msg = format!(
        "separation detected (|beta| = {:.1}); refitting with ridge {SEPARATION_RIDGE}",
        beta.norm()
    );
    log::warn!("{msg}");
    let (beta, iterations) = newton(features, &y, SEPARATION_RIDGE)?;
    Ok(LogisticFit {
        coef: beta.iter().cloned().collect(),
        iterations,
        ridge: SEPARATION_RIDGE,
        separation: true,
        warnings: vec![msg],
    })
}
