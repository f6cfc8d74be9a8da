//! Finite-support DGP with exact enumeration oracles.
//!
//! All of U, X, S₁, S₂, S₃ and Y take level indices `0..M` (stored as `f64`
//! in generated rows). Conditional tables are flat arrays in row-major order
//! over the conditioning variables listed in each field's doc, with the
//! outcome level varying fastest.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedSample, Group, LatentLog, ObservationRow};
use crate::error::{Error, Result};
use crate::gmm::logistic::sigmoid;
use crate::gmm::{CellTable, OutcomeBridge, SelectionBridge};
use crate::linalg;
use crate::rng::SplitMix64;

/// Required margin on the smallest singular value of every proxy matrix.
pub const RANK_MARGIN: f64 = 0.05;
const MAX_ATTEMPTS: usize = 1000;
const SUM_TOL: f64 = 1e-12;
const SOLVE_TOL: f64 = 1e-10;

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub m_u: usize,
    pub m_s: usize,
    pub m_x: usize,
    pub m_y: usize,
    /// `p(u, x)` over `(u, x)`, shared by both samples.
    pub p_ux: Vec<f64>,
    /// `P(A = 1 | u, x, G = O)` over `(u, x)`.
    pub p_treat_o: Vec<f64>,
    /// `p(s1 | a, u, x)` over `(a, u, x, s1)`.
    pub p_s1: Vec<f64>,
    /// `p(s2 | s1, a, u, x)` over `(s1, a, u, x, s2)`.
    pub p_s2: Vec<f64>,
    /// `p(s3 | s2, a, u, x)` over `(s2, a, u, x, s3)`.
    pub p_s3: Vec<f64>,
    /// `p(y | s3, s2, a, u, x)` over `(s3, s2, a, u, x, y)`.
    pub p_y: Vec<f64>,
    /// `P(G = E)`.
    pub p_group_e: f64,
    /// `P(A = 1 | G = E)`.
    #[serde(default = "half")]
    pub p_treat_e: f64,
    /// Optional E-sample marginal of X; `None` means it equals the O marginal.
    #[serde(default)]
    pub p_x_e: Option<Vec<f64>>,
    /// Optional `P(A = 1 | x, G = E)`; overrides `p_treat_e` when present.
    #[serde(default)]
    pub p_treat_e_x: Option<Vec<f64>>,
}

/// One support point of the joint law of `(U, X, A, S₁, S₂, S₃)` within a
/// group, with the conditional mean of Y in place of Y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawPoint {
    pub weight: f64,
    pub a: u8,
    pub u: usize,
    pub x: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub ey: f64,
}

impl LawPoint {
    /// The point as a sample row; O rows carry `E[Y | ·]` as their outcome.
    pub fn row(&self, group: Group) -> ObservationRow {
        ObservationRow {
            group,
            a: self.a,
            x: vec![self.x as f64],
            s1: vec![self.s1 as f64],
            s2: vec![self.s2 as f64],
            s3: vec![self.s3 as f64],
            y: (group == Group::O).then_some(self.ey),
        }
    }
}

impl DiscreteDgp {
    #[inline]
    fn ax(&self, a: u8, u: usize, x: usize) -> usize {
        (a as usize * self.m_u + u) * self.m_x + x
    }

    pub fn p_s1(&self, s1: usize, a: u8, u: usize, x: usize) -> f64 {
        self.p_s1[self.ax(a, u, x) * self.m_s + s1]
    }

    pub fn p_s2(&self, s2: usize, s1: usize, a: u8, u: usize, x: usize) -> f64 {
        self.p_s2[(s1 * 2 * self.m_u * self.m_x + self.ax(a, u, x)) * self.m_s + s2]
    }

    pub fn p_s3(&self, s3: usize, s2: usize, a: u8, u: usize, x: usize) -> f64 {
        self.p_s3[(s2 * 2 * self.m_u * self.m_x + self.ax(a, u, x)) * self.m_s + s3]
    }

    fn y_row(&self, s3: usize, s2: usize, a: u8, u: usize, x: usize) -> &[f64] {
        let block = (s3 * self.m_s + s2) * 2 * self.m_u * self.m_x + self.ax(a, u, x);
        &self.p_y[block * self.m_y..(block + 1) * self.m_y]
    }

    /// `E[Y | s3, s2, a, u, x]`.
    pub fn ey(&self, s3: usize, s2: usize, a: u8, u: usize, x: usize) -> f64 {
        self.y_row(s3, s2, a, u, x)
            .iter()
            .enumerate()
            .map(|(y, p)| y as f64 * p)
            .sum()
    }

    /// `p(s2 | a, u, x)`.
    pub fn p_s2_marg(&self, s2: usize, a: u8, u: usize, x: usize) -> f64 {
        (0..self.m_s)
            .map(|s1| self.p_s1(s1, a, u, x) * self.p_s2(s2, s1, a, u, x))
            .sum()
    }

    /// `E[Y | s2, a, u, x]`.
    pub fn ey_given_s2(&self, s2: usize, a: u8, u: usize, x: usize) -> f64 {
        (0..self.m_s)
            .map(|s3| self.p_s3(s3, s2, a, u, x) * self.ey(s3, s2, a, u, x))
            .sum()
    }

    pub fn p_x_o(&self, x: usize) -> f64 {
        (0..self.m_u).map(|u| self.p_ux[u * self.m_x + x]).sum()
    }

    pub fn p_u_given_x(&self, u: usize, x: usize) -> f64 {
        self.p_ux[u * self.m_x + x] / self.p_x_o(x)
    }

    pub fn p_x_e(&self, x: usize) -> f64 {
        match &self.p_x_e {
            Some(p) => p[x],
            None => self.p_x_o(x),
        }
    }

    /// `P(A = a | u, x, G = O)`.
    pub fn p_a_o(&self, a: u8, u: usize, x: usize) -> f64 {
        let p1 = self.p_treat_o[u * self.m_x + x];
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// `P(A = a | x, G = E)`.
    pub fn p_a_e(&self, a: u8, x: usize) -> f64 {
        let p1 = self.p_treat_e_x.as_ref().map_or(self.p_treat_e, |p| p[x]);
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// `P(A = a | G = O)`.
    pub fn p_a_o_marg(&self, a: u8) -> f64 {
        let mut s = 0.0;
        for u in 0..self.m_u {
            for x in 0..self.m_x {
                s += self.p_ux[u * self.m_x + x] * self.p_a_o(a, u, x);
            }
        }
        s
    }

    /// `P(A = a | G = E)`.
    pub fn p_a_e_marg(&self, a: u8) -> f64 {
        (0..self.m_x).map(|x| self.p_x_e(x) * self.p_a_e(a, x)).sum()
    }

    /// Whether the E sample differs from the O sample in its X law or has an
    /// X-dependent treatment assignment.
    pub fn has_covariate_shift(&self) -> bool {
        self.p_x_e.is_some() || self.p_treat_e_x.is_some()
    }

    /// `P(S₃ | s2, a, U, x)` as an `M_s × M_u` matrix.
    pub fn s3_matrix(&self, s2: usize, a: u8, x: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.m_s, self.m_u, |s3, u| self.p_s3(s3, s2, a, u, x))
    }

    /// `P(S₁ | s2, a, U, x)` as an `M_s × M_u` matrix.
    pub fn s1_matrix(&self, s2: usize, a: u8, x: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.m_s, self.m_u);
        for u in 0..self.m_u {
            let den = self.p_s2_marg(s2, a, u, x);
            if !(den > 0.0) {
                return Err(Error::Overlap(format!(
                    "p(s2={s2} | a={a}, u={u}, x={x}) = 0; P(S1 | s2, a, U, x) undefined"
                )));
            }
            for s1 in 0..self.m_s {
                m[(s1, u)] = self.p_s1(s1, a, u, x) * self.p_s2(s2, s1, a, u, x) / den;
            }
        }
        Ok(m)
    }

    /// Smallest singular value over all outcome-side and selection-side
    /// proxy matrices.
    pub fn min_rank_margin(&self) -> Result<(f64, f64)> {
        let (mut h, mut q) = (f64::INFINITY, f64::INFINITY);
        for a in 0..2u8 {
            for s2 in 0..self.m_s {
                for x in 0..self.m_x {
                    h = h.min(linalg::min_singular_value(&self.s3_matrix(s2, a, x)));
                    q = q.min(linalg::min_singular_value(&self.s1_matrix(s2, a, x)?));
                }
            }
        }
        Ok((h, q))
    }

    /// Table shapes, normalisation and overlap.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("DiscreteDgp: {m}")));
        if [self.m_u, self.m_s, self.m_x, self.m_y].iter().any(|&m| m < 2) {
            return bad("all cardinalities must be >= 2".into());
        }
        let cells = 2 * self.m_u * self.m_x;
        let tables: [(&str, &[f64], usize, usize); 6] = [
            ("p_ux", &self.p_ux, 1, self.m_u * self.m_x),
            ("p_s1", &self.p_s1, cells, self.m_s),
            ("p_s2", &self.p_s2, cells * self.m_s, self.m_s),
            ("p_s3", &self.p_s3, cells * self.m_s, self.m_s),
            ("p_y", &self.p_y, cells * self.m_s * self.m_s, self.m_y),
            ("p_x_e", self.p_x_e.as_deref().unwrap_or(&[]), 1, self.m_x),
        ];
        for (name, t, rows, width) in tables {
            if name == "p_x_e" && self.p_x_e.is_none() {
                continue;
            }
            if t.len() != rows * width {
                return bad(format!("{name} has length {}, expected {}", t.len(), rows * width));
            }
            for (i, row) in t.chunks(width).enumerate() {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("{name} row {i} has an entry outside [0, 1]"));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return bad(format!("{name} row {i} sums to {s}"));
                }
            }
        }
        if self.p_treat_o.len() != self.m_u * self.m_x {
            return bad("p_treat_o has the wrong length".into());
        }
        if self.p_treat_o.iter().any(|p| !(0.05..=0.95).contains(p)) {
            return bad("P(A=1 | u, x, O) must lie in [0.05, 0.95]".into());
        }
        if !(self.p_group_e > 0.0 && self.p_group_e < 1.0) {
            return bad("p_group_e must lie in (0, 1)".into());
        }
        let pe: Vec<f64> = match &self.p_treat_e_x {
            Some(p) if p.len() != self.m_x => return bad("p_treat_e_x has the wrong length".into()),
            Some(p) => p.clone(),
            None => vec![self.p_treat_e],
        };
        if pe.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("E-sample treatment probabilities must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Enumerate the joint law of one group. Zero-weight points are dropped.
    pub fn enumerate(&self, group: Group) -> Vec<LawPoint> {
        let mut out = Vec::new();
        for u in 0..self.m_u {
            for x in 0..self.m_x {
                let pux = match group {
                    Group::O => self.p_ux[u * self.m_x + x],
                    Group::E => self.p_x_e(x) * self.p_u_given_x(u, x),
                };
                for a in 0..2u8 {
                    let pa = match group {
                        Group::O => self.p_a_o(a, u, x),
                        Group::E => self.p_a_e(a, x),
                    };
                    self.push_chain(&mut out, pux * pa, a, u, x);
                }
            }
        }
        out
    }

    /// Enumerate the law of the potential outcomes under treatment `a` over
    /// the O population.
    pub fn enumerate_potential(&self, a: u8) -> Vec<LawPoint> {
        let mut out = Vec::new();
        for u in 0..self.m_u {
            for x in 0..self.m_x {
                self.push_chain(&mut out, self.p_ux[u * self.m_x + x], a, u, x);
            }
        }
        out
    }

    fn push_chain(&self, out: &mut Vec<LawPoint>, w0: f64, a: u8, u: usize, x: usize) {
        if w0 == 0.0 {
            return;
        }
        for s1 in 0..self.m_s {
            let w1 = w0 * self.p_s1(s1, a, u, x);
            for s2 in 0..self.m_s {
                let w2 = w1 * self.p_s2(s2, s1, a, u, x);
                for s3 in 0..self.m_s {
                    let weight = w2 * self.p_s3(s3, s2, a, u, x);
                    if weight > 0.0 {
                        out.push(LawPoint {
                            weight,
                            a,
                            u,
                            x,
                            s1,
                            s2,
                            s3,
                            ey: self.ey(s3, s2, a, u, x),
                        });
                    }
                }
            }
        }
    }

    /// Sample one unit of the given group.
    fn draw(&self, rng: &mut SplitMix64, group: Group) -> (usize, ObservationRow) {
        let ux = match group {
            Group::O => rng.categorical(&self.p_ux),
            Group::E => {
                let x = rng.categorical(&(0..self.m_x).map(|x| self.p_x_e(x)).collect::<Vec<_>>());
                let pu: Vec<f64> = (0..self.m_u).map(|u| self.p_u_given_x(u, x)).collect();
                rng.categorical(&pu) * self.m_x + x
            }
        };
        let (u, x) = (ux / self.m_x, ux % self.m_x);
        let p1 = match group {
            Group::O => self.p_a_o(1, u, x),
            Group::E => self.p_a_e(1, x),
        };
        let a = rng.bernoulli(p1) as u8;
        let base = self.ax(a, u, x);
        let s1 = rng.categorical(&self.p_s1[base * self.m_s..(base + 1) * self.m_s]);
        let row2 = s1 * 2 * self.m_u * self.m_x + base;
        let s2 = rng.categorical(&self.p_s2[row2 * self.m_s..(row2 + 1) * self.m_s]);
        let row3 = s2 * 2 * self.m_u * self.m_x + base;
        let s3 = rng.categorical(&self.p_s3[row3 * self.m_s..(row3 + 1) * self.m_s]);
        let y = rng.categorical(self.y_row(s3, s2, a, u, x));
        let row = ObservationRow {
            group,
            a,
            x: vec![x as f64],
            s1: vec![s1 as f64],
            s2: vec![s2 as f64],
            s3: vec![s3 as f64],
            y: (group == Group::O).then_some(y as f64),
        };
        (u, row)
    }
}

fn tilted_simplex(rng: &mut SplitMix64, k: usize, tilt: impl Fn(usize) -> f64) -> Vec<f64> {
    let w: Vec<f64> = (0..k)
        .map(|s| {
            let z: f64 = StandardNormal.sample(rng);
            (1.2 * z + tilt(s)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn simplex(rng: &mut SplitMix64, k: usize) -> Vec<f64> {
    tilted_simplex(rng, k, |_| 0.0)
}

/// Draw a random DGP whose proxy matrices all have smallest singular value
/// at least [`RANK_MARGIN`]. Rows are normalised log-normal weights tilted
/// towards the level matching U (for the proxies) and towards high levels
/// under treatment, so the draws carry a treatment effect and proxy signal.
/// The O-sample propensity is `clip(σ(confounding_scale · z(u, x)), 0.05,
/// 0.95)` with standard-normal scores `z`.
pub fn gen_discrete_dgp(
    m_u: usize,
    m_s: usize,
    m_x: usize,
    m_y: usize,
    confounding_scale: f64,
    seed: u64,
) -> Result<DiscreteDgp> {
    if [m_u, m_s, m_x, m_y].iter().any(|&m| m < 2) {
        return Err(Error::Argument("all cardinalities must be >= 2".into()));
    }
    if m_s < m_u {
        return Err(Error::Generation(format!(
            "M_s = {m_s} < M_u = {m_u}: proxy matrices cannot have full column rank; use M_s >= M_u"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let cells = 2 * m_u * m_x;
    let decode = |r: usize| {
        let ax = r % cells;
        (r / cells, (ax / (m_u * m_x)) as f64, (ax / m_x) % m_u)
    };
    let lvl = |s: usize, m: usize| s as f64 / (m - 1) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let p_ux = simplex(&mut rng, m_u * m_x);
        let p_treat_o = (0..m_u * m_x)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigmoid(confounding_scale * z).clamp(0.05, 0.95)
            })
            .collect();
        let mut table = |rows: usize, width: usize, tilt: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            (0..rows)
                .flat_map(|r| tilted_simplex(&mut rng, width, |s| tilt(r, s)))
                .collect()
        };
        let p_s1 = table(cells, m_s, &|r, s| {
            let (_, a, u) = decode(r);
            2.0 * (s == u) as u8 as f64 + 0.8 * a * lvl(s, m_s)
        });
        let p_s2 = table(cells * m_s, m_s, &|r, s| {
            let (s1, a, _) = decode(r);
            1.0 * (s == s1) as u8 as f64 + 0.5 * a * lvl(s, m_s)
        });
        let p_s3 = table(cells * m_s, m_s, &|r, s| {
            let (_, a, u) = decode(r);
            2.0 * (s == u) as u8 as f64 + 0.8 * a * lvl(s, m_s)
        });
        let p_y = table(cells * m_s * m_s, m_y, &|r, y| {
            let (s32, a, u) = decode(r);
            lvl(y, m_y) * (a + lvl(u, m_u) + lvl(s32 / m_s, m_s))
        });
        let dgp = DiscreteDgp {
            m_u,
            m_s,
            m_x,
            m_y,
            p_ux,
            p_treat_o,
            p_s1,
            p_s2,
            p_s3,
            p_y,
            p_group_e: 0.5,
            p_treat_e: 0.5,
            p_x_e: None,
            p_treat_e_x: None,
        };
        let (h, q) = dgp.min_rank_margin()?;
        if h >= RANK_MARGIN && q >= RANK_MARGIN {
            dgp.validate()?;
            return Ok(dgp);
        }
    }
    Err(Error::Generation(format!(
        "{MAX_ATTEMPTS} consecutive draws failed the rank condition; use a larger M_s"
    )))
}

impl DiscreteDgp {
    /// Copy with a random E-sample X marginal and X-dependent E propensity.
    pub fn with_covariate_shift(&self, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut d = self.clone();
        d.p_x_e = Some(simplex(&mut rng, self.m_x));
        d.p_treat_e_x = Some((0..self.m_x).map(|_| 0.2 + 0.6 * rng.uniform()).collect());
        d
    }
}

/// Draw `n_o` observational then `n_e` experimental rows.
pub fn sample_discrete(dgp: &DiscreteDgp, n_o: usize, n_e: usize, seed: u64) -> Result<(CombinedSample, LatentLog)> {
    dgp.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::with_capacity(n_o + n_e);
    let mut us = Vec::with_capacity(n_o + n_e);
    for i in 0..n_o + n_e {
        let (u, row) = dgp.draw(&mut rng, if i < n_o { Group::O } else { Group::E });
        rows.push(row);
        us.push(vec![u as f64]);
    }
    Ok((CombinedSample::new(rows)?, LatentLog { u: us }))
}

/// Exact `μ(1) − μ(0)` over the O population.
pub fn discrete_true_tau(dgp: &DiscreteDgp) -> f64 {
    let mu = |a| dgp.enumerate_potential(a).iter().map(|p| p.weight * p.ey).sum::<f64>();
    mu(1) - mu(0)
}

fn solve_proxy(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let mt = m.transpose();
    let z = linalg::least_norm_solve(&mt, b);
    let r = linalg::inf_norm(&(&mt * &z - b));
    if r > SOLVE_TOL {
        return Err(Error::NoSolution(format!(
            "{what}: residual {r:.3e} exceeds {SOLVE_TOL:e}; rank condition violated (rank {})",
            linalg::rank(m)
        )));
    }
    Ok(z)
}

/// Tabular outcome bridge solving `P(S₃ | s2, a, U, x)ᵀ z = E[Y | s2, a, U, x]`
/// by least norm in every `(s2, a, x)` cell.
pub fn discrete_oracle_h(dgp: &DiscreteDgp) -> Result<OutcomeBridge> {
    let mut table = CellTable::new();
    for a in 0..2u8 {
        for s2 in 0..dgp.m_s {
            for x in 0..dgp.m_x {
                let b = DVector::from_fn(dgp.m_u, |u, _| dgp.ey_given_s2(s2, a, u, x));
                let z = solve_proxy(&dgp.s3_matrix(s2, a, x), &b, &format!("h at (s2={s2}, a={a}, x={x})"))?;
                for s3 in 0..dgp.m_s {
                    table.insert(a, vec![s3 as f64, s2 as f64, x as f64], z[s3]);
                }
            }
        }
    }
    Ok(OutcomeBridge::table(table))
}

/// Density ratio `p(u, x | a, G=E) / p(u, x | a, G=O)`.
pub fn selection_ratio(dgp: &DiscreteDgp, a: u8, u: usize, x: usize) -> Result<f64> {
    let num = dgp.p_x_e(x) * dgp.p_u_given_x(u, x) * dgp.p_a_e(a, x) / dgp.p_a_e_marg(a);
    let den = dgp.p_ux[u * dgp.m_x + x] * dgp.p_a_o(a, u, x) / dgp.p_a_o_marg(a);
    if !(den > 0.0) {
        return Err(Error::Overlap(format!(
            "p(u={u}, x={x} | a={a}, O) = 0; density ratio is infinite"
        )));
    }
    Ok(num / den)
}

/// Tabular selection bridge solving `P(S₁ | s2, a, U, x)ᵀ z = r(a, U, x)`
/// by least norm in every `(s2, a, x)` cell.
pub fn discrete_oracle_q(dgp: &DiscreteDgp) -> Result<SelectionBridge> {
    let mut table = CellTable::new();
    for a in 0..2u8 {
        for x in 0..dgp.m_x {
            let r: Vec<f64> = (0..dgp.m_u)
                .map(|u| selection_ratio(dgp, a, u, x))
                .collect::<Result<_>>()?;
            let b = DVector::from_column_slice(&r);
            for s2 in 0..dgp.m_s {
                let z = solve_proxy(&dgp.s1_matrix(s2, a, x)?, &b, &format!("q at (s2={s2}, a={a}, x={x})"))?;
                for s1 in 0..dgp.m_s {
                    table.insert(a, vec![s2 as f64, s1 as f64, x as f64], z[s1]);
                }
            }
        }
    }
    Ok(SelectionBridge::table(table))
}

fn eval_h(h: &OutcomeBridge, p: &LawPoint) -> f64 {
    h.eval(&[p.s3 as f64], &[p.s2 as f64], p.a, &[p.x as f64])
}

fn eval_q(q: &SelectionBridge, p: &LawPoint) -> f64 {
    q.eval(&[p.s2 as f64], &[p.s1 as f64], p.a, &[p.x as f64])
}

/// Population functionals of the identification formulas over an
/// enumerated law (no covariate shift).
pub struct Population {
    pub e: Vec<LawPoint>,
    pub o: Vec<LawPoint>,
    pub p_a_e: [f64; 2],
    pub p_a_o: [f64; 2],
}

impl Population {
    pub fn new(dgp: &DiscreteDgp) -> Self {
        Population {
            e: dgp.enumerate(Group::E),
            o: dgp.enumerate(Group::O),
            p_a_e: [dgp.p_a_e_marg(0), dgp.p_a_e_marg(1)],
            p_a_o: [dgp.p_a_o_marg(0), dgp.p_a_o_marg(1)],
        }
    }

    /// `E[h(S₃, S₂, a, X) | A = a, G = E]`.
    pub fn mu_out(&self, h: &OutcomeBridge, a: u8) -> f64 {
        self.e
            .iter()
            .filter(|p| p.a == a)
            .map(|p| p.weight * eval_h(h, p))
            .sum::<f64>()
            / self.p_a_e[a as usize]
    }

    /// `E[q(S₂, S₁, a, X) Y | A = a, G = O]`.
    pub fn mu_sel(&self, q: &SelectionBridge, a: u8) -> f64 {
        self.o
            .iter()
            .filter(|p| p.a == a)
            .map(|p| p.weight * eval_q(q, p) * p.ey)
            .sum::<f64>()
            / self.p_a_o[a as usize]
    }

    /// Sum of the outcome term and the O-sample residual correction.
    pub fn mu_dr(&self, h: &OutcomeBridge, q: &SelectionBridge, a: u8) -> f64 {
        let corr = self
            .o
            .iter()
            .filter(|p| p.a == a)
            .map(|p| p.weight * eval_q(q, p) * (p.ey - eval_h(h, p)))
            .sum::<f64>()
            / self.p_a_o[a as usize];
        self.mu_out(h, a) + corr
    }

    pub fn tau_out(&self, h: &OutcomeBridge) -> f64 {
        self.mu_out(h, 1) - self.mu_out(h, 0)
    }

    pub fn tau_sel(&self, q: &SelectionBridge) -> f64 {
        self.mu_sel(q, 1) - self.mu_sel(q, 0)
    }

    pub fn tau_dr(&self, h: &OutcomeBridge, q: &SelectionBridge) -> f64 {
        self.mu_dr(h, q, 1) - self.mu_dr(h, q, 0)
    }
}

/// Multiplier and shift applied to an oracle table to make it wrong.
pub const GARBLE_SCALE: f64 = 1.5;
pub const GARBLE_SHIFT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyValue {
    pub value: f64,
    /// `value − τ`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub true_tau: f64,
    pub outcome_bridge: StrategyValue,
    pub selection_bridge: StrategyValue,
    pub dr_both_correct: StrategyValue,
    pub dr_h_garbled: StrategyValue,
    pub dr_q_garbled: StrategyValue,
    pub dr_both_garbled: StrategyValue,
}

/// Evaluate the three identification formulas and the four DR
/// correct/garbled combinations by exact enumeration.
pub fn verify_identification(dgp: &DiscreteDgp) -> Result<IdentificationReport> {
    dgp.validate()?;
    if dgp.has_covariate_shift() {
        return Err(Error::Argument(
            "verify_identification needs identical X laws and randomized E treatment".into(),
        ));
    }
    let tau = discrete_true_tau(dgp);
    let h = discrete_oracle_h(dgp)?;
    let q = discrete_oracle_q(dgp)?;
    let hg = h.affine(GARBLE_SCALE, GARBLE_SHIFT);
    let qg = q.affine(GARBLE_SCALE, GARBLE_SHIFT);
    let pop = Population::new(dgp);
    let sv = |value: f64| StrategyValue {
        value,
        gap: value - tau,
    };
    Ok(IdentificationReport {
        true_tau: tau,
        outcome_bridge: sv(pop.tau_out(&h)),
        selection_bridge: sv(pop.tau_sel(&q)),
        dr_both_correct: sv(pop.tau_dr(&h, &q)),
        dr_h_garbled: sv(pop.tau_dr(&hg, &q)),
        dr_q_garbled: sv(pop.tau_dr(&h, &qg)),
        dr_both_garbled: sv(pop.tau_dr(&hg, &qg)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impossible_rank_is_generation_error() {
        assert!(matches!(
            gen_discrete_dgp(4, 2, 2, 2, 1.0, 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn generated_dgp_meets_rank_margin() {
        let d = gen_discrete_dgp(2, 3, 2, 3, 1.0, 7).unwrap();
        let (h, q) = d.min_rank_margin().unwrap();
        assert!(h >= RANK_MARGIN && q >= RANK_MARGIN);
        d.validate().unwrap();
    }

    #[test]
    fn zero_confounding_scale_gives_constant_propensity() {
        let d = gen_discrete_dgp(2, 2, 2, 2, 0.0, 1).unwrap();
        assert!(d.p_treat_o.iter().all(|&p| p == 0.5));
        let q = discrete_oracle_q(&d).unwrap();
        for a in 0..2u8 {
            for s2 in 0..2 {
                for s1 in 0..2 {
                    for x in 0..2 {
                        let v = q.eval(&[s2 as f64], &[s1 as f64], a, &[x as f64]);
                        assert!((v - 1.0).abs() < 1e-9, "q = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_bridges_satisfy_latent_equations() {
        let d = gen_discrete_dgp(2, 3, 2, 3, 1.5, 11).unwrap();
        let h = discrete_oracle_h(&d).unwrap();
        let q = discrete_oracle_q(&d).unwrap();
        for a in 0..2u8 {
            for s2 in 0..3 {
                for x in 0..2 {
                    for u in 0..2 {
                        let lhs: f64 = (0..3)
                            .map(|s3| d.p_s3(s3, s2, a, u, x) * h.eval(&[s3 as f64], &[s2 as f64], a, &[x as f64]))
                            .sum();
                        assert!((lhs - d.ey_given_s2(s2, a, u, x)).abs() < 1e-9);
                        let m = d.s1_matrix(s2, a, x).unwrap();
                        let lq: f64 = (0..3)
                            .map(|s1| m[(s1, u)] * q.eval(&[s2 as f64], &[s1 as f64], a, &[x as f64]))
                            .sum();
                        assert!((lq - selection_ratio(&d, a, u, x).unwrap()).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn square_system_has_unique_solution() {
        let d = gen_discrete_dgp(3, 3, 2, 2, 1.0, 5).unwrap();
        let h1 = discrete_oracle_h(&d).unwrap();
        // Any solution of a square nonsingular system equals the LU solution.
        for a in 0..2u8 {
            let m = d.s3_matrix(1, a, 0).transpose();
            let b = DVector::from_fn(3, |u, _| d.ey_given_s2(1, a, u, 0));
            let z = m.lu().solve(&b).unwrap();
            for s3 in 0..3 {
                let v = h1.eval(&[s3 as f64], &[1.0], a, &[0.0]);
                assert!((v - z[s3]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn point_mass_dgp_tau_by_hand() {
        // Two levels everywhere; treatment moves S deterministically and Y
        // copies S3 so τ = 1.
        let (mu, ms, mx, my) = (2, 2, 2, 2);
        let cells = 2 * mu * mx;
        let det = |level: usize| if level == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let p_s1: Vec<f64> = (0..cells).flat_map(|c| det(c / (mu * mx))).collect();
        let p_s2: Vec<f64> = (0..ms * cells).flat_map(|i| det(i / cells)).collect();
        let p_s3: Vec<f64> = (0..ms * cells).flat_map(|i| det(i / cells)).collect();
        let p_y: Vec<f64> = (0..ms * ms * cells).flat_map(|i| det(i / (ms * cells))).collect();
        let d = DiscreteDgp {
            m_u: mu,
            m_s: ms,
            m_x: mx,
            m_y: my,
            p_ux: vec![0.25; 4],
            p_treat_o: vec![0.3, 0.6, 0.4, 0.7],
            p_s1,
            p_s2,
            p_s3,
            p_y,
            p_group_e: 0.5,
            p_treat_e: 0.5,
            p_x_e: None,
            p_treat_e_x: None,
        };
        d.validate().unwrap();
        assert!((discrete_true_tau(&d) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn null_effect_dgp_has_zero_tau() {
        let mut d = gen_discrete_dgp(2, 3, 2, 3, 1.0, 2).unwrap();
        let half = d.p_s1.len() / 2;
        let (a0, _) = d.p_s1.split_at(half);
        d.p_s1 = [a0, a0].concat();
        // Make every downstream table ignore the treatment.
        let block = 2 * d.m_u * d.m_x;
        let strip = |t: &mut Vec<f64>, width: usize| {
            for chunk in t.chunks_mut(block * width) {
                let (lo, hi) = chunk.split_at_mut(block / 2 * width);
                hi.copy_from_slice(lo);
            }
        };
        strip(&mut d.p_s2, d.m_s);
        strip(&mut d.p_s3, d.m_s);
        strip(&mut d.p_y, d.m_y);
        assert!(discrete_true_tau(&d).abs() < 1e-15);
    }

    #[test]
    fn identification_report_on_one_dgp() {
        let d = gen_discrete_dgp(2, 3, 2, 3, 1.5, 19).unwrap();
        let r = verify_identification(&d).unwrap();
        for s in [
            r.outcome_bridge,
            r.selection_bridge,
            r.dr_both_correct,
            r.dr_h_garbled,
            r.dr_q_garbled,
        ] {
            assert!(s.gap.abs() < 1e-8, "{r:?}");
        }
        assert!(r.dr_both_garbled.gap.abs() > 1e-3);
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let d = gen_discrete_dgp(2, 3, 2, 3, 1.0, 4).unwrap();
        let (a, _) = sample_discrete(&d, 300, 200, 8).unwrap();
        let (b, _) = sample_discrete(&d, 300, 200, 8).unwrap();
        assert_eq!(a, b);
        let (s, _) = sample_discrete(&d, 100_000, 10, 9).unwrap();
        let p1 = s.arm_count(Group::O, 1) as f64 / 100_000.0;
        assert!((p1 - d.p_a_o_marg(1)).abs() < 0.01);
    }

    #[test]
    fn enumerated_laws_sum_to_one() {
        let d = gen_discrete_dgp(3, 4, 2, 2, 1.0, 3).unwrap().with_covariate_shift(1);
        d.validate().unwrap();
        for g in [Group::E, Group::O] {
            let s: f64 = d.enumerate(g).iter().map(|p| p.weight).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_rejected_by_identification_report() {
        let d = gen_discrete_dgp(2, 3, 2, 2, 1.0, 3).unwrap().with_covariate_shift(2);
        assert!(matches!(verify_identification(&d), Err(Error::Argument(_))));
    }
}
