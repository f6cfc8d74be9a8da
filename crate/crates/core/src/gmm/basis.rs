//! Finite feature and instrument bases that turn the conditional moment
//! restrictions into unconditional ones.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ObservationRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Linear,
    /// Linear terms plus pairwise products in the instrument vector.
    LinearWithInteractions,
    /// Joint one-hot coding of the observed level combinations, for discrete
    /// short-term outcomes and covariates. Yields table-form bridges.
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub include_intercept: bool,
    /// Separate coefficients per arm; otherwise one pooled fit with a
    /// treatment column.
    pub per_arm: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            kind: BasisKind::Linear,
            include_intercept: true,
            per_arm: true,
        }
    }
}

impl BasisSpec {
    pub fn tabular() -> Self {
        BasisSpec {
            kind: BasisKind::Tabular,
            include_intercept: false,
            per_arm: true,
        }
    }
}

/// Which bridge the moment system belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Outcome bridge: features (s3, s2, x), instruments (s2, s1, x).
    HSide,
    /// Selection bridge: features (s2, s1, x), instruments (s3, s2, x).
    QSide,
}

/// Raw feature key, without the treatment.
pub fn feature_key(r: &ObservationRow, side: Conditioning) -> Vec<f64> {
    match side {
        Conditioning::HSide => [&r.s3[..], &r.s2, &r.x].concat(),
        Conditioning::QSide => [&r.s2[..], &r.s1, &r.x].concat(),
    }
}

/// Raw instrument key, without the treatment.
pub fn instrument_key(r: &ObservationRow, side: Conditioning) -> Vec<f64> {
    match side {
        Conditioning::HSide => [&r.s2[..], &r.s1, &r.x].concat(),
        Conditioning::QSide => [&r.s3[..], &r.s2, &r.x].concat(),
    }
}

fn with_arm(mut v: Vec<f64>, r: &ObservationRow, spec: &BasisSpec) -> Vec<f64> {
    if !spec.per_arm {
        v.push(r.a as f64);
    }
    v
}

fn add_interactions(mut v: Vec<f64>) -> Vec<f64> {
    let d = v.len();
    for i in 0..d {
        for j in (i + 1)..d {
            v.push(v[i] * v[j]);
        }
    }
    v
}

/// Affine map between standardized and raw coordinates of a linear design.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub intercept: bool,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Transform {
    /// Convert standardized coefficients (intercept first when present) to
    /// raw slopes and a raw intercept.
    pub fn to_raw(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let off = self.intercept as usize;
        let mut intercept = if self.intercept { theta[0] } else { 0.0 };
        let slopes: Vec<f64> = (0..self.mean.len())
            .map(|j| {
                let b = theta[off + j] / self.scale[j];
                intercept -= b * self.mean[j];
                b
            })
            .collect();
        (slopes, intercept)
    }

    /// Inverse of [`Transform::to_raw`].
    pub fn to_standardized(&self, slopes: &[f64], intercept: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(slopes.len() + 1);
        if self.intercept {
            let c: f64 = slopes.iter().zip(&self.mean).map(|(b, m)| b * m).sum();
            out.push(intercept + c);
        }
        out.extend(slopes.iter().zip(&self.scale).map(|(b, s)| b * s));
        out
    }

    pub fn apply(&self, raw: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.intercept {
            out.push(1.0);
        }
        out.extend(
            raw.iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

/// A design matrix together with the transform that produced it.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub transform: Transform,
    /// Raw columns retained (indices into the raw vector).
    pub kept: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Column means and standard deviations over the reference rows.
fn moments(raw: &[Vec<f64>], reference: &[usize], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = reference.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for &i in reference {
        for j in 0..d {
            mean[j] += raw[i][j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in reference {
        for j in 0..d {
            let e = raw[i][j] - mean[j];
            var[j] += e * e;
        }
    }
    let sd = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, sd)
}

fn zero_variance(mean: f64, sd: f64) -> bool {
    sd <= 1e-12 * (1.0 + mean.abs())
}

/// Build a (possibly standardized) linear design from raw row vectors.
/// Statistics come from `reference` rows. Zero-variance columns are dropped
/// when `drop_constant` is set, otherwise kept with unit scale.
pub fn linear_design(
    raw: &[Vec<f64>],
    reference: &[usize],
    intercept: bool,
    standardize: bool,
    drop_constant: bool,
    label: &str,
) -> Design {
    let d = raw.first().map_or(0, Vec::len);
    let (mean, sd) = moments(raw, reference, d);
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..d {
        if drop_constant && zero_variance(mean[j], sd[j]) {
            let msg = format!("{label}: column {j} has zero variance and was dropped");
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            kept.push(j);
        }
    }
    let transform = Transform {
        intercept,
        mean: kept
            .iter()
            .map(|&j| if standardize && intercept { mean[j] } else { 0.0 })
            .collect(),
        scale: kept
            .iter()
            .map(|&j| {
                if standardize && !zero_variance(mean[j], sd[j]) {
                    sd[j]
                } else {
                    1.0
                }
            })
            .collect(),
    };
    let p = kept.len() + intercept as usize;
    let mut flat = Vec::with_capacity(raw.len() * p);
    let mut buf = Vec::with_capacity(p);
    let mut sub = Vec::with_capacity(kept.len());
    for r in raw {
        sub.clear();
        sub.extend(kept.iter().map(|&j| r[j]));
        transform.apply(&sub, &mut buf);
        flat.extend_from_slice(&buf);
    }
    Design {
        matrix: DMatrix::from_row_slice(raw.len(), p, &flat),
        transform,
        kept,
        warnings,
    }
}

/// One-hot coding over observed level combinations, in sorted key order.
#[derive(Debug, Clone)]
pub struct TabularCoder {
    pub keys: Vec<Vec<f64>>,
    index: HashMap<Vec<u64>, usize>,
}

fn key_bits(k: &[f64]) -> Vec<u64> {
    k.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl TabularCoder {
    pub fn from_keys<'a>(keys: impl Iterator<Item = &'a Vec<f64>>) -> Self {
        let mut uniq: Vec<Vec<f64>> = Vec::new();
        let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
        for k in keys {
            if seen.insert(key_bits(k), ()).is_none() {
                uniq.push(k.clone());
            }
        }
        uniq.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let index = uniq.iter().enumerate().map(|(i, k)| (key_bits(k), i)).collect();
        TabularCoder { keys: uniq, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn column(&self, key: &[f64]) -> Option<usize> {
        self.index.get(&key_bits(key)).copied()
    }

    pub fn one_hot(&self, keys: &[Vec<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(keys.len(), self.len());
        for (i, k) in keys.iter().enumerate() {
            if let Some(c) = self.column(k) {
                m[(i, c)] = 1.0;
            }
        }
        m
    }
}

/// Raw feature vector (treatment appended for pooled fits).
pub fn raw_features(r: &ObservationRow, spec: &BasisSpec, side: Conditioning) -> Vec<f64> {
    with_arm(feature_key(r, side), r, spec)
}

/// Raw instrument vector (treatment appended for pooled fits; pairwise
/// products for the interaction basis).
pub fn raw_instruments(r: &ObservationRow, spec: &BasisSpec, side: Conditioning) -> Vec<f64> {
    let v = with_arm(instrument_key(r, side), r, spec);
    match spec.kind {
        BasisKind::LinearWithInteractions => add_interactions(v),
        _ => v,
    }
}

/// Instrument matrix for `rows`; column statistics use the O rows among them
/// (all rows if none are O). Zero-variance columns are dropped with a warning.
pub fn build_instruments(rows: &[&ObservationRow], spec: &BasisSpec, conditioning: Conditioning) -> Result<Design> {
    if rows.is_empty() {
        return Err(Error::Argument("no rows to build instruments from".into()));
    }
    instrument_design(rows, spec, conditioning, false)
}

pub(crate) fn reference_rows(rows: &[&ObservationRow]) -> Vec<usize> {
    let o: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].is_o()).collect();
    if o.is_empty() {
        (0..rows.len()).collect()
    } else {
        o
    }
}

pub(crate) fn instrument_design(
    rows: &[&ObservationRow],
    spec: &BasisSpec,
    side: Conditioning,
    standardize: bool,
) -> Result<Design> {
    let reference = reference_rows(rows);
    match spec.kind {
        BasisKind::Tabular => {
            let keys: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| with_arm(instrument_key(r, side), r, spec))
                .collect();
            let coder = TabularCoder::from_keys(reference.iter().map(|&i| &keys[i]));
            Ok(Design {
                matrix: coder.one_hot(&keys),
                transform: Transform {
                    intercept: false,
                    mean: vec![],
                    scale: vec![],
                },
                kept: vec![],
                warnings: vec![],
            })
        }
        _ => {
            let raw: Vec<Vec<f64>> = rows.iter().map(|r| raw_instruments(r, spec, side)).collect();
            Ok(linear_design(
                &raw,
                &reference,
                spec.include_intercept,
                standardize,
                true,
                "instrument",
            ))
        }
    }
}
