//! Confounding injection by arm- and U-dependent subsampling of a randomized
//! observational sample, and a semi-synthetic source to apply it to.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedSample, Group, LatentLog, ObservationRow};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::sem::LinearSemParams;

fn default_levels() -> usize {
    3
}

fn default_floor() -> f64 {
    0.2
}

/// Lower and upper clip bounds for the treated keep probability.
pub const PI1_CLIP: (f64, f64) = (0.01, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub eta: f64,
    /// Column of the latent log that plays U.
    #[serde(default)]
    pub confounder_index: usize,
    /// U takes levels `0..=levels`.
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    pub seed: u64,
}

impl SubsampleConfig {
    pub fn new(eta: f64, seed: u64) -> Self {
        SubsampleConfig {
            eta,
            confounder_index: 0,
            levels: default_levels(),
            floor: default_floor(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Argument(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Argument(format!("floor must lie in (0, 1), got {}", self.floor)));
        }
        if self.levels == 0 {
            return Err(Error::Argument("confounder needs at least two levels".into()));
        }
        Ok(())
    }

    /// `π(0, u) = max(1 − η u / L, floor)`.
    pub fn pi0(&self, u: usize) -> f64 {
        (1.0 - self.eta * u as f64 / self.levels as f64).max(self.floor)
    }
}

/// Keep probabilities per level and arm, solved from the balance equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepProbabilities {
    pub pi0: Vec<f64>,
    pub pi1: Vec<f64>,
    /// Whether any `π(1, u)` fell outside [0.01, 1] before clipping.
    pub clipped: bool,
}

/// Solve `N₀π(0,u) + N₁π(1,u) = N₁ + N₀·max(1 − η, floor)` for every level.
pub fn keep_probabilities(cfg: &SubsampleConfig, n0: usize, n1: usize) -> Result<KeepProbabilities> {
    cfg.validate()?;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Validation(
            "both O arms must be non-empty before subsampling".into(),
        ));
    }
    let target = (1.0 - cfg.eta).max(cfg.floor);
    let ratio = n0 as f64 / n1 as f64;
    let pi0: Vec<f64> = (0..=cfg.levels).map(|u| cfg.pi0(u)).collect();
    let mut clipped = false;
    let pi1 = pi0
        .iter()
        .map(|p0| {
            let v = 1.0 + ratio * (target - p0);
            if v < PI1_CLIP.0 || v > PI1_CLIP.1 {
                clipped = true;
            }
            v.clamp(PI1_CLIP.0, PI1_CLIP.1)
        })
        .collect();
    Ok(KeepProbabilities { pi0, pi1, clipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleOutput {
    pub sample: CombinedSample,
    pub latent: LatentLog,
    pub keep: KeepProbabilities,
}

fn level_of(v: f64, levels: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v > levels as f64 {
        return Err(Error::Argument(format!(
            "confounder value {v} is not an integer level in 0..={levels}"
        )));
    }
    Ok(v as usize)
}

/// Keep each O row independently with probability `π(A, U)`; E rows pass
/// through. One uniform is drawn per O row in sample order whether or not
/// the row is kept, so runs at different η share random numbers.
pub fn biased_subsample(sample: &CombinedSample, latent: &LatentLog, cfg: &SubsampleConfig) -> Result<SubsampleOutput> {
    cfg.validate()?;
    if latent.u.len() != sample.len() {
        return Err(Error::Argument(format!(
            "latent log has {} rows, sample has {}",
            latent.u.len(),
            sample.len()
        )));
    }
    let keep = keep_probabilities(cfg, sample.arm_count(Group::O, 0), sample.arm_count(Group::O, 1))?;
    if keep.clipped {
        log::warn!(
            "pi(1, u) clipped into [0.01, 1] at eta = {}; U invariance is approximate",
            cfg.eta
        );
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut rows = Vec::with_capacity(sample.len());
    let mut us = Vec::with_capacity(sample.len());
    for (r, u) in sample.rows().iter().zip(&latent.u) {
        let kept = if r.is_o() {
            let v = *u
                .get(cfg.confounder_index)
                .ok_or_else(|| Error::Argument(format!("latent log has no column {}", cfg.confounder_index)))?;
            let lvl = level_of(v, cfg.levels)?;
            let p = if r.a == 1 { keep.pi1[lvl] } else { keep.pi0[lvl] };
            rng.uniform() < p
        } else {
            true
        };
        if kept {
            rows.push(r.clone());
            us.push(u.clone());
        }
    }
    Ok(SubsampleOutput {
        sample: CombinedSample::new(rows)?,
        latent: LatentLog { u: us },
        keep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// Total-variation distance between the empirical U distributions.
    pub tv_distance: f64,
    /// Pearson statistic of the subsample counts against the original
    /// proportions.
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    /// False when clipping broke the balance equation.
    pub invariance_guaranteed: bool,
}

/// Compare the U distribution of the O rows before and after subsampling.
pub fn check_subsample_invariance(
    original: &[usize],
    subsampled: &[usize],
    levels: usize,
    clipped: bool,
) -> InvarianceReport {
    let freq = |v: &[usize]| {
        let mut c = vec![0.0; levels + 1];
        for &u in v {
            c[u] += 1.0;
        }
        c
    };
    let (co, cs) = (freq(original), freq(subsampled));
    let (no, ns) = (original.len().max(1) as f64, subsampled.len().max(1) as f64);
    let mut tv = 0.0;
    let mut chi = 0.0;
    let mut used = 0;
    for k in 0..=levels {
        let (p, q) = (co[k] / no, cs[k] / ns);
        tv += (p - q).abs();
        if p > 0.0 {
            let expected = ns * p;
            chi += (cs[k] - expected).powi(2) / expected;
            used += 1;
        }
    }
    InvarianceReport {
        tv_distance: 0.5 * tv,
        chi_square: chi,
        degrees_of_freedom: used.max(1) - 1,
        invariance_guaranteed: !clipped,
    }
}

/// Levels of the confounder on the O rows.
pub fn o_levels(sample: &CombinedSample, latent: &LatentLog, index: usize) -> Vec<usize> {
    sample
        .rows()
        .iter()
        .zip(&latent.u)
        .filter(|(r, _)| r.is_o())
        .map(|(_, u)| u[index] as usize)
        .collect()
}

fn default_p_treat() -> f64 {
    0.5
}

/// Randomized source population: discrete U on `0..=levels` (uniform unless
/// `u_probs` is set),
/// `X = ρ·std(U) + √(1 − ρ²)·Z`, A ~ Bernoulli(p_treat) in both samples, and
/// short-term and long-term outcomes from the SEM equations with U entering
/// at its level value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticConfig {
    pub sem: LinearSemParams,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_p_treat")]
    pub p_treat: f64,
    /// Level probabilities of U; empty means uniform.
    #[serde(default)]
    pub u_probs: Vec<f64>,
}

impl SemiSyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.sem.validate()?;
        if self.sem.d_u() != 1 {
            return Err(Error::Config("semi-synthetic source needs a scalar U".into()));
        }
        if !(self.p_treat > 0.0 && self.p_treat < 1.0) {
            return Err(Error::Config("p_treat must lie in (0, 1)".into()));
        }
        if !self.u_probs.is_empty() {
            let sum: f64 = self.u_probs.iter().sum();
            if self.u_probs.len() != self.levels + 1
                || self.u_probs.iter().any(|p| !(*p >= 0.0))
                || (sum - 1.0).abs() > 1e-9
            {
                return Err(Error::Config(format!(
                    "u_probs must be {} probabilities summing to 1",
                    self.levels + 1
                )));
            }
        }
        Ok(())
    }

    /// Level probabilities of U.
    pub fn level_probs(&self) -> Vec<f64> {
        if self.u_probs.is_empty() {
            vec![1.0 / (self.levels + 1) as f64; self.levels + 1]
        } else {
            self.u_probs.clone()
        }
    }
}

/// Draw `n_o` source observational rows then `n_e` experimental rows, all
/// randomized. Pass the result through [`biased_subsample`] to confound O.
pub fn gen_semisynthetic(
    cfg: &SemiSyntheticConfig,
    n_o: usize,
    n_e: usize,
    seed: u64,
) -> Result<(CombinedSample, LatentLog)> {
    cfg.validate()?;
    let p = &cfg.sem;
    let probs = cfg.level_probs();
    let mean: f64 = probs.iter().enumerate().map(|(u, p)| u as f64 * p).sum();
    let sd = probs
        .iter()
        .enumerate()
        .map(|(u, p)| p * (u as f64 - mean).powi(2))
        .sum::<f64>()
        .sqrt();
    let rho = p.rho_ux;
    let c = (1.0 - rho * rho).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::with_capacity(n_o + n_e);
    let mut us = Vec::with_capacity(n_o + n_e);
    for i in 0..n_o + n_e {
        let group = if i < n_o { Group::O } else { Group::E };
        let lvl = rng.categorical(&probs) as f64;
        let x: Vec<f64> = (0..p.d_x())
            .map(|j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if j == 0 {
                    rho * (lvl - mean) / sd + c * z
                } else {
                    z
                }
            })
            .collect();
        let a = rng.bernoulli(cfg.p_treat) as u8;
        let u = [lvl];
        let (s1, s2, s3, y) = p.outcomes(&mut rng, a, &u, &x);
        rows.push(ObservationRow {
            group,
            a,
            x,
            s1,
            s2,
            s3,
            y: (group == Group::O).then_some(y),
        });
        us.push(u.to_vec());
    }
    Ok((CombinedSample::new(rows)?, LatentLog { u: us }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize, seed: u64) -> (CombinedSample, LatentLog) {
        let cfg = SemiSyntheticConfig {
            sem: LinearSemParams::confounded_default(),
            levels: 3,
            p_treat: 0.5,
            u_probs: vec![],
        };
        gen_semisynthetic(&cfg, n, n / 2, seed).unwrap()
    }

    #[test]
    fn pi0_formula() {
        let c = SubsampleConfig::new(1.0, 0);
        assert_eq!(c.pi0(3), 0.2);
        assert_eq!(c.pi0(0), 1.0);
        assert!((c.pi0(1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn balance_equation_holds() {
        let c = SubsampleConfig::new(0.6, 0);
        let k = keep_probabilities(&c, 300, 200).unwrap();
        assert!(!k.clipped);
        let rhs = 200.0 + 300.0 * 0.4;
        for u in 0..=3 {
            assert!((300.0 * k.pi0[u] + 200.0 * k.pi1[u] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn clipping_is_flagged() {
        let c = SubsampleConfig::new(1.0, 0);
        let k = keep_probabilities(&c, 500, 100).unwrap();
        assert!(k.clipped);
        assert!(k.pi1.iter().all(|p| (0.01..=1.0).contains(p)));
        let r = check_subsample_invariance(&[0, 1], &[0, 1], 3, k.clipped);
        assert!(!r.invariance_guaranteed);
    }

    #[test]
    fn negative_eta_rejected() {
        let (s, l) = source(100, 1);
        assert!(matches!(
            biased_subsample(&s, &l, &SubsampleConfig::new(-0.1, 0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn eta_zero_is_identity() {
        let (s, l) = source(2000, 2);
        let out = biased_subsample(&s, &l, &SubsampleConfig::new(0.0, 5)).unwrap();
        assert_eq!(out.sample, s);
        let before = o_levels(&s, &l, 0);
        let after = o_levels(&out.sample, &out.latent, 0);
        assert_eq!(check_subsample_invariance(&before, &after, 3, false).tv_distance, 0.0);
    }

    #[test]
    fn e_rows_untouched_and_u_kept_balanced() {
        let (s, l) = source(40_000, 3);
        let out = biased_subsample(&s, &l, &SubsampleConfig::new(1.0, 6)).unwrap();
        let e_before: Vec<_> = s.e_rows().cloned().collect();
        let e_after: Vec<_> = out.sample.e_rows().cloned().collect();
        assert_eq!(e_before, e_after);
        let r = check_subsample_invariance(
            &o_levels(&s, &l, 0),
            &o_levels(&out.sample, &out.latent, 0),
            3,
            out.keep.clipped,
        );
        assert!(r.tv_distance < 0.02, "{r:?}");
        assert!(out.sample.n_o() < s.n_o());
    }

    #[test]
    fn subsampling_confounds_treatment() {
        let (s, l) = source(40_000, 4);
        let out = biased_subsample(&s, &l, &SubsampleConfig::new(1.0, 7)).unwrap();
        let mean_u = |a: u8| {
            let v: Vec<f64> = out
                .sample
                .rows()
                .iter()
                .zip(&out.latent.u)
                .filter(|(r, _)| r.is_o() && r.a == a)
                .map(|(_, u)| u[0])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_u(1) - mean_u(0) > 0.3);
    }
}
