//! Ridge-regularized linear GMM for the outcome bridge.
//!
//! Per block (arm, or pooled), with features φ and instruments f, solves
//! `min_θ ‖(1/n) Σ f_i (Y_i − θᵀφ_i)‖²_W + (λ₀/n)‖θ‖²` in closed form.

use nalgebra::{DMatrix, DVector};

use super::basis::{instrument_design, linear_design, raw_features, TabularCoder};
use super::bridge::{BlockDiagnostics, BridgeDiagnostics, CellTable, LinearArm, OutcomeBridge};
use super::{solve_linear_gmm, weight_matrix, BasisKind, BasisSpec, Conditioning, GmmConfig};
use crate::data::ObservationRow;
use crate::error::{Error, Result};

enum BlockFit {
    Linear { slopes: Vec<f64>, intercept: f64 },
    Table { cells: Vec<(Vec<f64>, f64)> },
}

fn blocks<'a>(rows: &[&'a ObservationRow], spec: &BasisSpec) -> Result<Vec<(Option<u8>, Vec<&'a ObservationRow>)>> {
    if spec.per_arm {
        (0..2u8)
            .map(|a| {
                let b: Vec<&ObservationRow> = rows.iter().copied().filter(|r| r.a == a).collect();
                if b.is_empty() {
                    Err(Error::Validation(format!("no fitting rows with a = {a}")))
                } else {
                    Ok((Some(a), b))
                }
            })
            .collect()
    } else {
        Ok(vec![(None, rows.to_vec())])
    }
}

pub(crate) fn split_blocks<'a>(
    rows: &[&'a ObservationRow],
    spec: &BasisSpec,
) -> Result<Vec<(Option<u8>, Vec<&'a ObservationRow>)>> {
    blocks(rows, spec)
}

fn fit_block(
    rows: &[&ObservationRow],
    spec: &BasisSpec,
    cfg: &GmmConfig,
    arm: Option<u8>,
) -> Result<(BlockFit, BlockDiagnostics)> {
    let n = rows.len();
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.y.expect("O row")));
    let inst = instrument_design(rows, spec, Conditioning::HSide, cfg.standardize)?;
    let (phi, coder, transform) = match spec.kind {
        BasisKind::Tabular => {
            let keys: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| raw_features(r, spec, Conditioning::HSide))
                .collect();
            let coder = TabularCoder::from_keys(keys.iter());
            (coder.one_hot(&keys), Some(coder), None)
        }
        _ => {
            let raw: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| raw_features(r, spec, Conditioning::HSide))
                .collect();
            let all: Vec<usize> = (0..n).collect();
            let d = linear_design(&raw, &all, spec.include_intercept, cfg.standardize, false, "feature");
            (d.matrix, None, Some(d.transform))
        }
    };
    let p = phi.ncols();
    if n < p {
        return Err(Error::Validation(format!(
            "{n} fitting rows for {p} features (arm {arm:?})"
        )));
    }
    let f = &inst.matrix;
    let nf = n as f64;
    let g: DMatrix<f64> = f.transpose() * &phi / nf;
    let m: DVector<f64> = f.transpose() * &y / nf;
    let w = weight_matrix(f, cfg.weighting);
    let lambda = cfg.ridge_scale / nf;
    let (theta, init, fin) = solve_linear_gmm(&g, &m, &w, lambda)?;
    let diag = BlockDiagnostics {
        arm,
        n_rows: n,
        lambda,
        iterations: 1,
        converged: true,
        initial_moment_norm: init,
        final_moment_norm: fin,
        objective_trace: vec![],
        warnings: inst.warnings,
    };
    let fit = match (coder, transform) {
        (Some(coder), _) => BlockFit::Table {
            cells: coder.keys.into_iter().zip(theta.iter().cloned()).collect(),
        },
        (None, Some(t)) => {
            let (slopes, intercept) = t.to_raw(theta.as_slice());
            BlockFit::Linear { slopes, intercept }
        }
        _ => unreachable!(),
    };
    Ok((fit, diag))
}

/// Fit the outcome bridge on observational rows.
pub fn fit_h_linear_gmm(o_rows: &[&ObservationRow], spec: &BasisSpec, cfg: &GmmConfig) -> Result<OutcomeBridge> {
    cfg.validate()?;
    let first = o_rows
        .first()
        .ok_or_else(|| Error::Argument("no observational rows".into()))?;
    if o_rows.iter().any(|r| r.y.is_none()) {
        return Err(Error::Argument("outcome bridge needs O rows with y".into()));
    }
    let (d3, d2, dx) = (first.s3.len(), first.s2.len(), first.x.len());
    let mut diags = Vec::new();
    let mut fits = Vec::new();
    for (arm, rows) in blocks(o_rows, spec)? {
        let (fit, d) = fit_block(&rows, spec, cfg, arm)?;
        fits.push((arm, fit));
        diags.push(d);
    }
    let mut bridge = match spec.kind {
        BasisKind::Tabular => {
            let mut table = CellTable::new();
            for (arm, fit) in fits {
                let BlockFit::Table { cells } = fit else { unreachable!() };
                for (mut key, v) in cells {
                    let a = match arm {
                        Some(a) => a,
                        None => key.pop().expect("pooled key carries the arm") as u8,
                    };
                    table.insert(a, key, v);
                }
            }
            OutcomeBridge::table(table)
        }
        _ => {
            let split = |s: &[f64], extra: f64| LinearArm {
                s3: s[..d3].to_vec(),
                s2: s[d3..d3 + d2].to_vec(),
                x: s[d3 + d2..d3 + d2 + dx].to_vec(),
                intercept: extra,
            };
            let mut arms = Vec::new();
            for (arm, fit) in &fits {
                let BlockFit::Linear { slopes, intercept } = fit else {
                    unreachable!()
                };
                match arm {
                    Some(_) => arms.push(split(slopes, *intercept)),
                    None => {
                        let ta = slopes[d3 + d2 + dx];
                        arms.push(split(slopes, *intercept));
                        arms.push(split(slopes, *intercept + ta));
                    }
                }
            }
            let a1 = arms.pop().expect("two arms");
            let a0 = arms.pop().expect("two arms");
            OutcomeBridge::linear([a0, a1])
        }
    };
    bridge.diagnostics = BridgeDiagnostics::from_blocks(diags);
    Ok(bridge)
}
