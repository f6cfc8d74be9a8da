//! Gauss-Newton GMM for the selection bridge.
//!
//! With `r̂_a = n_E^(a)/n_O^(a)`, the pooled moment per arm block is
//! `M(β) = (1/n) Σ_i g_i (1{G_i=O}(r̂_a q_β(i) + 1) − 1)
//!       = (1/n) [Σ_O r̂_a g_i q_β(i) − Σ_E g_i]`
//! with instruments g built from (s3, s2, x).

use nalgebra::{DMatrix, DVector};

use super::basis::{instrument_design, linear_design, raw_features, TabularCoder};
use super::bridge::{BlockDiagnostics, BridgeDiagnostics, CellTable, LogLinearArm, SelectionBridge};
use super::outcome::split_blocks;
use super::{solve_linear_gmm, weight_matrix, BasisKind, BasisSpec, Conditioning, GmmConfig, SelectionOffset};
use crate::data::{Group, ObservationRow};
use crate::error::{Error, Result};
use crate::linalg;

/// Exponents above this are treated as overflow.
const MAX_EXPONENT: f64 = 700.0;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn offsets(rows: &[&ObservationRow], cfg: &GmmConfig) -> [f64; 2] {
    match cfg.selection_offset {
        SelectionOffset::None => [0.0, 0.0],
        SelectionOffset::Fixed(v) => v,
        SelectionOffset::ArmShare => {
            let mut c = [0usize; 2];
            for r in rows.iter().filter(|r| r.group == Group::O) {
                c[r.a as usize] += 1;
            }
            let n = (c[0] + c[1]).max(1) as f64;
            [c[0] as f64 / n, c[1] as f64 / n]
        }
    }
}

struct Problem {
    /// Standardized exponent features of the O rows.
    z: DMatrix<f64>,
    /// Instruments of the O rows.
    g_o: DMatrix<f64>,
    /// `(1/n) Σ_E g`.
    m_e: DVector<f64>,
    r: DVector<f64>,
    c0: DVector<f64>,
    w: DMatrix<f64>,
    n: f64,
    lambda: f64,
}

struct Eval {
    moment: DVector<f64>,
    exps: DVector<f64>,
    objective: f64,
}

impl Problem {
    fn eval(&self, beta: &DVector<f64>) -> Option<Eval> {
        let idx = &self.z * beta;
        if idx.iter().any(|v| !(v.is_finite() && *v <= MAX_EXPONENT)) {
            return None;
        }
        let exps = idx.map(f64::exp);
        let v = DVector::from_iterator(exps.len(), (0..exps.len()).map(|i| self.r[i] * (exps[i] + self.c0[i])));
        let moment = self.g_o.transpose() * v / self.n - &self.m_e;
        let objective = (moment.transpose() * &self.w * &moment)[(0, 0)] + self.lambda * beta.norm_squared();
        objective.is_finite().then_some(Eval {
            moment,
            exps,
            objective,
        })
    }

    fn jacobian(&self, exps: &DVector<f64>) -> DMatrix<f64> {
        let mut zs = self.z.clone();
        for (i, mut row) in zs.row_iter_mut().enumerate() {
            row *= self.r[i] * exps[i];
        }
        self.g_o.transpose() * zs / self.n
    }

    fn wnorm(&self, m: &DVector<f64>) -> f64 {
        (m.transpose() * &self.w * m)[(0, 0)].max(0.0).sqrt()
    }
}

/// Damped Gauss-Newton with Armijo backtracking. Returns β and diagnostics.
fn gauss_newton(p: &Problem, init: DVector<f64>, cfg: &GmmConfig, diag: &mut BlockDiagnostics) -> Result<DVector<f64>> {
    let mut beta = init;
    let mut cur = p.eval(&beta).ok_or_else(|| {
        Error::Overflow("selection bridge exponent overflows at the starting point; standardize features".into())
    })?;
    diag.initial_moment_norm = p.wnorm(&cur.moment);
    diag.objective_trace.push(cur.objective);
    let dim = beta.len();
    let mut grad_norm = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        diag.iterations = it;
        let j = p.jacobian(&cur.exps);
        let jtw = j.transpose() * &p.w;
        let half_grad = &jtw * &cur.moment + &beta * p.lambda;
        grad_norm = 2.0 * half_grad.norm();
        let h = &jtw * &j + DMatrix::identity(dim, dim) * p.lambda;
        let delta = match linalg::solve_spd(&h, &(-&half_grad)) {
            Ok(d) => d,
            Err(_) => {
                let mu = 1e-10 * h.diagonal().max().max(1e-300);
                linalg::solve_spd(&(h + DMatrix::identity(dim, dim) * mu), &(-&half_grad))?
            }
        };
        if linalg::inf_norm(&delta) < cfg.step_tol {
            diag.converged = true;
            break;
        }
        let slope = 2.0 * half_grad.dot(&delta);
        let mut t = 1.0;
        let mut accepted = None;
        let mut overflowed = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &delta * t;
            match p.eval(&cand) {
                Some(e) if e.objective <= cur.objective + ARMIJO * t * slope => {
                    accepted = Some((cand, e));
                    break;
                }
                Some(_) => {}
                None => overflowed = true,
            }
            t *= cfg.damping;
        }
        match accepted {
            Some((b, e)) => {
                let step = linalg::inf_norm(&(&b - &beta));
                beta = b;
                cur = e;
                diag.objective_trace.push(cur.objective);
                if step < cfg.step_tol {
                    diag.converged = true;
                    break;
                }
            }
            None if overflowed && t * linalg::inf_norm(&delta) > cfg.step_tol => {
                return Err(Error::Overflow(
                    "selection bridge exponent overflows along every trial step; standardize features".into(),
                ));
            }
            None => {
                // No representable decrease left: stationary to working precision.
                diag.warnings.push(format!("line search stalled at iteration {it}"));
                diag.converged = true;
                break;
            }
        }
    }
    if !diag.converged {
        return Err(Error::NonConvergence {
            iterations: cfg.max_iter,
            gradient_norm: grad_norm,
        });
    }
    diag.final_moment_norm = p.wnorm(&cur.moment);
    Ok(beta)
}

enum BlockFit {
    Loglinear { slopes: Vec<f64>, intercept: f64 },
    Table { cells: Vec<(Vec<f64>, f64)> },
}

fn fit_block(
    rows: &[&ObservationRow],
    spec: &BasisSpec,
    cfg: &GmmConfig,
    ratios: [f64; 2],
    c0: [f64; 2],
    arm: Option<u8>,
) -> Result<(BlockFit, BlockDiagnostics)> {
    let o: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].is_o()).collect();
    let e: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].is_o()).collect();
    if o.is_empty() || e.is_empty() {
        return Err(Error::Validation(format!(
            "selection bridge block {arm:?} needs both O and E rows"
        )));
    }
    let n = rows.len() as f64;
    let inst = instrument_design(rows, spec, Conditioning::QSide, cfg.standardize)?;
    let g_all = &inst.matrix;
    let m = g_all.ncols();
    let g_o = DMatrix::from_fn(o.len(), m, |i, j| g_all[(o[i], j)]);
    let mut m_e = DVector::zeros(m);
    for &i in &e {
        m_e += g_all.row(i).transpose();
    }
    m_e /= n;
    let r = DVector::from_iterator(o.len(), o.iter().map(|&i| ratios[rows[i].a as usize]));
    let w = weight_matrix(g_all, cfg.weighting);
    let lambda = cfg.ridge_scale / o.len() as f64;
    let mut diag = BlockDiagnostics {
        arm,
        n_rows: rows.len(),
        lambda,
        warnings: inst.warnings.clone(),
        ..BlockDiagnostics::default()
    };
    let keys: Vec<Vec<f64>> = o
        .iter()
        .map(|&i| raw_features(rows[i], spec, Conditioning::QSide))
        .collect();

    if spec.kind == BasisKind::Tabular {
        // Identity link over cells: the moment is linear in the cell values.
        let coder = TabularCoder::from_keys(keys.iter());
        let phi = coder.one_hot(&keys);
        let mut scaled = phi.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= r[i];
        }
        let g = g_o.transpose() * scaled / n;
        if g.nrows() < g.ncols() {
            return Err(Error::Argument(
                "order condition fails for the tabular selection basis".into(),
            ));
        }
        let (theta, init, fin) = solve_linear_gmm(&g, &m_e, &w, lambda)?;
        diag.iterations = 1;
        diag.converged = true;
        diag.initial_moment_norm = init;
        diag.final_moment_norm = fin;
        let cells: Vec<(Vec<f64>, f64)> = coder.keys.into_iter().zip(theta.iter().cloned()).collect();
        if cells.iter().any(|(_, v)| *v <= 0.0) {
            let msg = "table-form selection bridge has nonpositive cells".to_string();
            log::warn!("{msg}");
            diag.warnings.push(msg);
        }
        return Ok((BlockFit::Table { cells }, diag));
    }

    let all: Vec<usize> = (0..o.len()).collect();
    let feat = linear_design(&keys, &all, spec.include_intercept, cfg.standardize, false, "feature");
    if g_o.ncols() < feat.matrix.ncols() {
        return Err(Error::Argument(format!(
            "order condition fails: {} instruments for {} features",
            g_o.ncols(),
            feat.matrix.ncols()
        )));
    }
    let c0_rows = DVector::from_iterator(o.len(), o.iter().map(|&i| c0[rows[i].a as usize]));
    let problem = Problem {
        z: feat.matrix,
        g_o,
        m_e,
        r,
        c0: c0_rows,
        w,
        n,
        lambda,
    };
    // Start at q ≡ 1: zero slopes, exp(intercept) = 1 − c₀.
    let base = |c: f64| if c < 1.0 { (1.0 - c).ln() } else { 0.0 };
    let p_raw = keys[0].len();
    let mut init_slopes = vec![0.0; p_raw];
    let init_intercept = match arm {
        Some(a) => base(c0[a as usize]),
        None => {
            init_slopes[p_raw - 1] = base(c0[1]) - base(c0[0]);
            base(c0[0])
        }
    };
    let init = if spec.include_intercept {
        DVector::from_vec(feat.transform.to_standardized(&init_slopes, init_intercept))
    } else {
        DVector::zeros(problem.z.ncols())
    };
    let beta = gauss_newton(&problem, init, cfg, &mut diag)?;
    let (slopes, intercept) = feat.transform.to_raw(beta.as_slice());
    Ok((BlockFit::Loglinear { slopes, intercept }, diag))
}

/// Fit the selection bridge on pooled training rows (O and E).
pub fn fit_q_loglinear_gmm(
    all_rows: &[&ObservationRow],
    spec: &BasisSpec,
    cfg: &GmmConfig,
    ratios: [f64; 2],
) -> Result<SelectionBridge> {
    cfg.validate()?;
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Argument(format!(
            "arm/group ratios must be finite and positive, got {ratios:?}"
        )));
    }
    let first = all_rows.first().ok_or_else(|| Error::Argument("no rows".into()))?;
    let (d2, d1, dx) = (first.s2.len(), first.s1.len(), first.x.len());
    let c0 = offsets(all_rows, cfg);
    let mut fits = Vec::new();
    let mut diags = Vec::new();
    for (arm, rows) in split_blocks(all_rows, spec)? {
        let (fit, d) = fit_block(&rows, spec, cfg, ratios, c0, arm)?;
        fits.push((arm, fit));
        diags.push(d);
    }
    let mut bridge = if spec.kind == BasisKind::Tabular {
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
        SelectionBridge::table(table)
    } else {
        let mk = |s: &[f64], gamma: f64, a: usize| LogLinearArm {
            s2: s[..d2].to_vec(),
            s1: s[d2..d2 + d1].to_vec(),
            x: s[d2 + d1..d2 + d1 + dx].to_vec(),
            gamma,
            offset: c0[a],
        };
        let mut arms = Vec::new();
        for (arm, fit) in &fits {
            let BlockFit::Loglinear { slopes, intercept } = fit else {
                unreachable!()
            };
            match arm {
                Some(a) => arms.push(mk(slopes, *intercept, *a as usize)),
                None => {
                    let ta = slopes[d2 + d1 + dx];
                    arms.push(mk(slopes, *intercept, 0));
                    arms.push(mk(slopes, *intercept + ta, 1));
                }
            }
        }
        let a1 = arms.pop().expect("two arms");
        let a0 = arms.pop().expect("two arms");
        SelectionBridge::loglinear([a0, a1])
    };
    bridge.diagnostics = BridgeDiagnostics::from_blocks(diags);
    Ok(bridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{arm_group_ratio, SelectionForm};
    use crate::rng::SplitMix64;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut SplitMix64) -> f64 {
        StandardNormal.sample(rng)
    }

    /// O rows selected into treatment by a logistic in s1; E randomized.
    fn selected_rows(n: usize, kappa: f64, seed: u64) -> Vec<ObservationRow> {
        let mut rng = SplitMix64::new(seed);
        let mut out = Vec::new();
        for i in 0..2 * n {
            let is_o = i < n;
            let u = normal(&mut rng);
            let s1 = u + 0.5 * normal(&mut rng);
            let s2 = 0.5 * s1 + normal(&mut rng);
            let s3 = u + 0.5 * normal(&mut rng);
            let p1 = if is_o { 1.0 / (1.0 + (kappa * u).exp()) } else { 0.5 };
            let a = rng.bernoulli(p1) as u8;
            out.push(ObservationRow {
                group: if is_o { Group::O } else { Group::E },
                a,
                x: vec![],
                s1: vec![s1],
                s2: vec![s2],
                s3: vec![s3],
                y: is_o.then_some(0.0),
            });
        }
        out
    }

    #[test]
    fn no_selection_gives_unit_bridge() {
        let rows = selected_rows(50_000, 0.0, 1);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let r = arm_group_ratio(&refs).unwrap();
        let q = fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &GmmConfig::default(), r).unwrap();
        let SelectionForm::Loglinear { arms } = &q.form else {
            panic!()
        };
        for t in arms {
            assert!(t.gamma.abs() < 0.05, "gamma {}", t.gamma);
            let norm = t.s1.iter().chain(&t.s2).map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 0.05, "beta norm {norm}");
        }
    }

    #[test]
    fn objective_descends_and_moment_shrinks() {
        let rows = selected_rows(5_000, 1.0, 2);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let r = arm_group_ratio(&refs).unwrap();
        for offset in [SelectionOffset::None, SelectionOffset::ArmShare] {
            let cfg = GmmConfig {
                selection_offset: offset,
                ..GmmConfig::default().with_ridge(0.33)
            };
            let q = fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &cfg, r).unwrap();
            for b in &q.diagnostics.blocks {
                assert!(b.converged);
                for w in b.objective_trace.windows(2) {
                    assert!(w[1] <= w[0], "objective increased: {w:?}");
                }
                assert!(b.final_moment_norm <= b.initial_moment_norm);
            }
        }
    }

    #[test]
    fn reweighting_balances_instrument_means() {
        // Exactly identified: at the optimum the weighted O instrument means
        // equal the E instrument means per arm.
        let rows = selected_rows(20_000, 1.0, 3);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let r = arm_group_ratio(&refs).unwrap();
        let cfg = GmmConfig {
            selection_offset: SelectionOffset::ArmShare,
            ..GmmConfig::default()
        };
        let q = fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &cfg, r).unwrap();
        for a in 0..2u8 {
            let (mut so, mut se) = ([0.0; 3], [0.0; 3]);
            for row in rows.iter().filter(|x| x.a == a) {
                let g = [1.0, row.s3[0], row.s2[0]];
                for j in 0..3 {
                    if row.is_o() {
                        so[j] += r[a as usize] * q.eval_row(row) * g[j];
                    } else {
                        se[j] += g[j];
                    }
                }
            }
            for j in 0..3 {
                assert!((so[j] - se[j]).abs() < 1e-6 * (1.0 + se[j].abs()), "{so:?} vs {se:?}");
            }
        }
    }

    #[test]
    fn infinite_ratio_rejected() {
        let rows = selected_rows(100, 0.0, 4);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let err = fit_q_loglinear_gmm(
            &refs,
            &BasisSpec::default(),
            &GmmConfig::default(),
            [1.0, f64::INFINITY],
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn non_convergence_reports_gradient() {
        let rows = selected_rows(2_000, 1.5, 5);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let r = arm_group_ratio(&refs).unwrap();
        let cfg = GmmConfig {
            max_iter: 1,
            ..GmmConfig::default()
        };
        match fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &cfg, r) {
            Err(Error::NonConvergence {
                iterations,
                gradient_norm,
            }) => {
                assert_eq!(iterations, 1);
                assert!(gradient_norm > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let rows = selected_rows(2_000, 1.0, 6);
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let r = arm_group_ratio(&refs).unwrap();
        let a = fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &GmmConfig::default(), r).unwrap();
        let b = fit_q_loglinear_gmm(&refs, &BasisSpec::default(), &GmmConfig::default(), r).unwrap();
        assert_eq!(a, b);
    }
}
