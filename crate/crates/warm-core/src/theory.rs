//! Executable version of the binary-featurizer model of weight averaging.
//!
//! Each theory RM draws a feature selector `f ∈ {0,1}^F` with
//! `P(f_j = 1) = p_j` and uses the optimal linear head `ω = Σ_j f_j z^j`.
//! Averaging predictions converges to `y Σ p_j ‖z^j‖²`; averaging the
//! selectors and heads converges to `y Σ p_j² ‖z^j‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WarmError};
use crate::linalg::{axpy, dot};
use crate::rng::RngState;
use crate::synth::{orthogonal_bank, FeatureBank};

/// Largest block noise for which the limits are checked.
pub const MAX_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryWorld {
    /// Probability that a run learns each feature.
    pub p: Vec<f64>,
    pub z_norms: Vec<f64>,
    pub sigma: f64,
    pub dim: usize,
}

impl Default for TheoryWorld {
    /// Two unit-norm features learned with probabilities 1 and 0.5.
    fn default() -> Self {
        TheoryWorld {
            p: vec![1.0, 0.5],
            z_norms: vec![1.0, 1.0],
            sigma: 0.0,
            dim: 8,
        }
    }
}

impl TheoryWorld {
    pub fn features(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.z_norms.len() {
            return Err(WarmError::invalid("p and z_norms must have one entry per feature"));
        }
        if self.p.is_empty() || self.p.len() > self.dim {
            return Err(WarmError::invalid(format!(
                "need 1 <= F <= d, got F={} d={}",
                self.p.len(),
                self.dim
            )));
        }
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(WarmError::invalid("probabilities must lie in [0,1]"));
        }
        if self.z_norms.iter().any(|n| !(*n >= 0.0)) {
            return Err(WarmError::invalid("feature norms must be >= 0"));
        }
        if !(self.sigma >= 0.0) {
            return Err(WarmError::invalid("sigma must be >= 0"));
        }
        Ok(())
    }

    /// Orthogonal feature directions. Zero norms are allowed here: the
    /// direction is drawn at unit norm and then scaled to zero.
    pub fn bank(&self, r: &mut RngState) -> Result<FeatureBank> {
        self.validate()?;
        let unit = vec![1.0; self.features()];
        let mut bank = orthogonal_bank(self.dim, &unit, r)?;
        for (z, &n) in bank.z.iter_mut().zip(&self.z_norms) {
            z.iter_mut().for_each(|v| *v *= n);
        }
        Ok(bank)
    }
}

/// One sampled theory RM: selector `f` and head `ω = Σ f_j z^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRm {
    pub f: Vec<bool>,
    pub omega: Vec<f64>,
}

pub fn sample_theory_rm(world: &TheoryWorld, bank: &FeatureBank, r: &mut RngState) -> TheoryRm {
    let f: Vec<bool> = world.p.iter().map(|&p| r.uniform() < p).collect();
    let mut omega = vec![0.0; bank.dim];
    for (z, _) in bank.z.iter().zip(&f).filter(|(_, &on)| on) {
        axpy(1.0, z, &mut omega);
    }
    TheoryRm { f, omega }
}

/// `Σ_j s_j x^j` for a real-valued selector `s`.
fn select(selector: &[f64], x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (s, block) in selector.iter().zip(x.chunks_exact(dim)) {
        if *s != 0.0 {
            axpy(*s, block, &mut out);
        }
    }
    out
}

impl TheoryRm {
    pub fn selector(&self) -> Vec<f64> {
        self.f.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `ωᵀ f(x)`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.omega, &select(&self.selector(), x, self.omega.len()))
    }
}

fn check_label(y: f64) -> Result<()> {
    if y == 1.0 || y == -1.0 {
        Ok(())
    } else {
        Err(WarmError::invalid(format!("label must be -1 or +1, got {y}")))
    }
}

/// Limit of prediction ensembling: `y Σ p_j ‖z^j‖²`.
pub fn ens_limit(world: &TheoryWorld, y: f64) -> Result<f64> {
    check_label(y)?;
    Ok(y * world.p.iter().zip(&world.z_norms).map(|(p, n)| p * n * n).sum::<f64>())
}

/// Limit of weight averaging: `y Σ p_j² ‖z^j‖²`.
pub fn wa_limit(world: &TheoryWorld, y: f64) -> Result<f64> {
    wa_limit_depth(world, y, 2)
}

/// Weight-averaging limit for a stack of `layers` selectors: `y Σ p_j^L ‖z^j‖²`.
pub fn wa_limit_depth(world: &TheoryWorld, y: f64, layers: u32) -> Result<f64> {
    check_label(y)?;
    Ok(y * world
        .p
        .iter()
        .zip(&world.z_norms)
        .map(|(p, n)| p.powi(layers as i32) * n * n)
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemNoise {
    /// `x^j = y·z^j` exactly.
    Noiseless,
    /// `x^j ~ N(y·z^j, σ² I)` with the world's σ.
    WorldSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub members: usize,
    pub n_items: usize,
    pub ens_mc: f64,
    pub wa_mc: f64,
    pub ens_cf: f64,
    pub wa_cf: f64,
    pub abs_err_ens: f64,
    pub abs_err_wa: f64,
    /// Larger of the two errors.
    pub abs_err: f64,
}

fn theory_items(world: &TheoryWorld, bank: &FeatureBank, n: usize, noise: ItemNoise, r: &mut RngState) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            bank.z
                .iter()
                .flatten()
                .map(|&v| match noise {
                    ItemNoise::Noiseless => v,
                    ItemNoise::WorldSigma => v + world.sigma * r.normal(),
                })
                .collect()
        })
        .collect()
}

/// Builds `members` theory RMs and compares the Monte-Carlo ENS and WA
/// predictions (averaged over `n_items` items with `y = +1`) against the
/// closed-form limits.
pub fn mc_limit_check(
    world: &TheoryWorld,
    bank: &FeatureBank,
    members: usize,
    n_items: usize,
    noise: ItemNoise,
    r: &mut RngState,
) -> Result<McReport> {
    world.validate()?;
    if world.sigma > MAX_SIGMA {
        return Err(WarmError::invalid(format!(
            "sigma {} exceeds {MAX_SIGMA}; the small-noise limits do not apply",
            world.sigma
        )));
    }
    if members == 0 || n_items == 0 {
        return Err(WarmError::invalid("members and n_items must be >= 1"));
    }
    let rms: Vec<TheoryRm> = (0..members).map(|_| sample_theory_rm(world, bank, r)).collect();
    let m = members as f64;
    let mut mean_sel = vec![0.0; world.features()];
    let mut mean_omega = vec![0.0; bank.dim];
    for rm in &rms {
        axpy(1.0 / m, &rm.selector(), &mut mean_sel);
        axpy(1.0 / m, &rm.omega, &mut mean_omega);
    }
    let items = theory_items(world, bank, n_items, noise, r);
    let (mut ens, mut wa) = (0.0, 0.0);
    for x in &items {
        ens += rms.iter().map(|rm| rm.predict(x)).sum::<f64>() / m;
        wa += dot(&mean_omega, &select(&mean_sel, x, bank.dim));
    }
    let n = n_items as f64;
    let (ens_mc, wa_mc) = (ens / n, wa / n);
    let ens_cf = ens_limit(world, 1.0)?;
    let wa_cf = wa_limit(world, 1.0)?;
    let (e1, e2) = ((ens_mc - ens_cf).abs(), (wa_mc - wa_cf).abs());
    Ok(McReport {
        members,
        n_items,
        ens_mc,
        wa_mc,
        ens_cf,
        wa_cf,
        abs_err_ens: e1,
        abs_err_wa: e2,
        abs_err: e1.max(e2),
    })
}

/// WA prediction of `members` runs whose `layers`-deep stacks share one
/// selector per run (the head plus `layers − 1` selector layers), on the
/// noiseless `y = +1` item.
pub fn mc_depth_wa(world: &TheoryWorld, bank: &FeatureBank, members: usize, layers: u32, r: &mut RngState) -> Result<f64> {
    world.validate()?;
    if members == 0 || layers < 2 {
        return Err(WarmError::invalid("need members >= 1 and layers >= 2"));
    }
    let rms: Vec<TheoryRm> = (0..members).map(|_| sample_theory_rm(world, bank, r)).collect();
    let m = members as f64;
    let mut mean_sel = vec![0.0; world.features()];
    let mut mean_omega = vec![0.0; bank.dim];
    for rm in &rms {
        axpy(1.0 / m, &rm.selector(), &mut mean_sel);
        axpy(1.0 / m, &rm.omega, &mut mean_omega);
    }
    let x: Vec<f64> = bank.z.iter().flatten().copied().collect();
    // Each extra selector layer multiplies block j by the averaged mask again.
    let mut stacked = mean_sel.clone();
    for _ in 2..layers {
        stacked.iter_mut().zip(&mean_sel).for_each(|(s, p)| *s *= p);
    }
    Ok(dot(&mean_omega, &select(&stacked, &x, bank.dim)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(p: Vec<f64>) -> TheoryWorld {
        let f = p.len();
        TheoryWorld {
            p,
            z_norms: vec![1.0; f],
            sigma: 0.0,
            dim: 8,
        }
    }

    #[test]
    fn certain_and_impossible_features() {
        let w = world(vec![1.0, 1.0, 1.0]);
        let bank = w.bank(&mut RngState::new(1)).unwrap();
        let rm = sample_theory_rm(&w, &bank, &mut RngState::new(2));
        assert_eq!(rm.f, vec![true; 3]);
        let mut sum = vec![0.0; 8];
        for z in &bank.z {
            axpy(1.0, z, &mut sum);
        }
        assert_eq!(rm.omega, sum);

        let w0 = world(vec![0.0; 3]);
        let rm = sample_theory_rm(&w0, &bank, &mut RngState::new(2));
        assert!(rm.omega.iter().all(|&v| v == 0.0));
        let x: Vec<f64> = bank.z.iter().flatten().copied().collect();
        assert_eq!(rm.predict(&x), 0.0);
    }

    #[test]
    fn selector_frequency() {
        let w = world(vec![0.5]);
        let bank = w.bank(&mut RngState::new(1)).unwrap();
        let mut r = RngState::new(3);
        let n = 10_000;
        let on = (0..n).filter(|_| sample_theory_rm(&w, &bank, &mut r).f[0]).count();
        let freq = on as f64 / n as f64;
        assert!((0.48..=0.52).contains(&freq), "freq {freq}");
    }

    #[test]
    fn closed_forms() {
        let w = world(vec![1.0, 0.5]);
        assert!((ens_limit(&w, 1.0).unwrap() - 1.5).abs() < 1e-15);
        assert!((wa_limit(&w, 1.0).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(ens_limit(&w, -1.0).unwrap(), -ens_limit(&w, 1.0).unwrap());
        assert!(ens_limit(&w, 0.5).is_err());
        let zero = TheoryWorld {
            z_norms: vec![0.0, 0.0],
            ..w.clone()
        };
        assert_eq!(ens_limit(&zero, 1.0).unwrap(), 0.0);
        let binary = world(vec![1.0, 0.0, 1.0]);
        assert_eq!(wa_limit(&binary, 1.0).unwrap(), ens_limit(&binary, 1.0).unwrap());
    }

    #[test]
    fn single_member_has_no_gap() {
        let w = world(vec![1.0, 0.5]);
        let bank = w.bank(&mut RngState::new(1)).unwrap();
        let rep = mc_limit_check(&w, &bank, 1, 3, ItemNoise::Noiseless, &mut RngState::new(4)).unwrap();
        assert_eq!(rep.ens_mc, rep.wa_mc);
    }

    #[test]
    fn large_sigma_rejected() {
        let w = TheoryWorld {
            sigma: 0.1,
            ..world(vec![0.5])
        };
        let bank = w.bank(&mut RngState::new(1)).unwrap();
        assert!(mc_limit_check(&w, &bank, 4, 1, ItemNoise::Noiseless, &mut RngState::new(0)).is_err());
    }
}
