//! Alignment on top of a proxy reward: best-of-N selection with its KL
//! accounting, and REINFORCE with a KL penalty to the reference policy.
//!
//! The generation policy is a diagonal Gaussian over feature logits `g`;
//! an item allocates the budget as `a = B · softmax(g)`. The oracle reward
//! is only ever used for reporting.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WarmError};
use crate::fmt::f17;
use crate::net::Reward;
use crate::rng::RngState;
use crate::synth::{oracle_unchecked, FeatureBank, Item, WorldSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() || mu.is_empty() {
            return Err(WarmError::invalid("mu and log_sigma must be nonempty and equally long"));
        }
        if mu.iter().chain(&log_sigma).any(|v| !v.is_finite()) {
            return Err(WarmError::invalid("policy parameters must be finite"));
        }
        Ok(GaussianPolicy { mu, log_sigma })
    }

    /// Zero logits with the given scale on every feature.
    pub fn uniform(features: usize, sigma: f64) -> Self {
        GaussianPolicy {
            mu: vec![0.0; features],
            log_sigma: vec![sigma.ln(); features],
        }
    }

    pub fn features(&self) -> usize {
        self.mu.len()
    }

    pub fn log_density(&self, g: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(g)
            .map(|((m, ls), x)| {
                let z = (x - m) * (-ls).exp();
                -ls - 0.5 * LN_2PI - 0.5 * z * z
            })
            .sum()
    }

    pub fn sample_logits(&self, r: &mut RngState) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .map(|(m, ls)| m + ls.exp() * r.normal())
            .collect()
    }
}

/// Current policy plus the frozen reference it is regularised towards.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub policy: GaussianPolicy,
    reference: Arc<GaussianPolicy>,
}

impl PolicyState {
    pub fn new(init: GaussianPolicy) -> Self {
        PolicyState {
            reference: Arc::new(init.clone()),
            policy: init,
        }
    }

    pub fn reference(&self) -> &GaussianPolicy {
        &self.reference
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianPolicy, q: &GaussianPolicy) -> Result<f64> {
    if p.features() != q.features() {
        return Err(WarmError::invalid("policies have different feature counts"));
    }
    let kl = p
        .mu
        .iter()
        .zip(&p.log_sigma)
        .zip(q.mu.iter().zip(&q.log_sigma))
        .map(|((mp, lp), (mq, lq))| {
            if mp == mq && lp == lq {
                return 0.0;
            }
            let ratio = (2.0 * (lp - lq)).exp();
            let d = (mp - mq) * (-lq).exp();
            (lq - lp) + 0.5 * (ratio + d * d - 1.0)
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

pub fn softmax(g: &[f64]) -> Vec<f64> {
    let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = g.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Item whose intensities are `budget · softmax(logits)`.
pub fn item_from_logits(spec: &WorldSpec, bank: &FeatureBank, logits: &[f64], r: &mut RngState) -> Item {
    let a: Vec<f64> = softmax(logits).into_iter().map(|p| spec.budget * p).collect();
    Item::sample(bank, a, 1.0, spec.sigma_train, r)
}

fn sample_with_logits(
    pol: &GaussianPolicy,
    spec: &WorldSpec,
    bank: &FeatureBank,
    n: usize,
    r: &mut RngState,
) -> Vec<(Vec<f64>, Item)> {
    (0..n)
        .map(|_| {
            let g = pol.sample_logits(r);
            let item = item_from_logits(spec, bank, &g, r);
            (g, item)
        })
        .collect()
}

/// `n` generations from the policy.
pub fn policy_sample(pol: &GaussianPolicy, spec: &WorldSpec, bank: &FeatureBank, n: usize, r: &mut RngState) -> Result<Vec<Item>> {
    if n == 0 {
        return Err(WarmError::invalid("n must be >= 1"));
    }
    if pol.features() != spec.features {
        return Err(WarmError::invalid("policy and world disagree on the feature count"));
    }
    Ok(sample_with_logits(pol, spec, bank, n, r).into_iter().map(|(_, it)| it).collect())
}

/// Index of the highest-proxy candidate; the lowest index wins ties.
pub fn best_of_n_index<R: Reward + ?Sized>(proxy: &R, candidates: &[Item]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(WarmError::invalid("best-of-N needs at least one candidate"));
    }
    let mut best = 0;
    let mut best_r = proxy.reward(&candidates[0]);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let r = proxy.reward(c);
        if r > best_r {
            best = i;
            best_r = r;
        }
    }
    Ok(best)
}

pub fn best_of_n<'a, R: Reward + ?Sized>(proxy: &R, candidates: &'a [Item]) -> Result<&'a Item> {
    best_of_n_index(proxy, candidates).map(|i| &candidates[i])
}

/// `log N − (N−1)/N`.
pub fn bon_kl_approx(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(WarmError::invalid("N must be >= 1"));
    }
    let nf = n as f64;
    Ok(nf.ln() - (nf - 1.0) / nf)
}

/// Exact KL of best-of-N over a uniform pool of `k` distinct-reward items
/// against the uniform base policy. Rank `i` (1 = worst) is selected with
/// probability `(i^N − (i−1)^N) / K^N`.
pub fn bon_kl_exact(k: usize, n: usize) -> Result<f64> {
    if k == 0 || n == 0 {
        return Err(WarmError::invalid("K and N must be >= 1"));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let kf = k as f64;
    let pw = |i: usize| (i as f64 / kf).powi(n as i32);
    let mut kl = 0.0;
    for i in 1..=k {
        let p = pw(i) - pw(i - 1);
        if p > 0.0 {
            kl += p * (kf * p).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub n: usize,
    pub kl_approx: f64,
    pub mean_oracle: f64,
    pub mean_proxy: f64,
}

/// Best-of-N from the reference policy for every `N` in `ns`. Each prompt
/// draws `max(ns)` candidates once and `BoN(N)` looks at the first `N`, so
/// the rows share their randomness.
pub fn bon_sweep<R: Reward + ?Sized>(
    pol: &GaussianPolicy,
    proxy: &R,
    spec: &WorldSpec,
    bank: &FeatureBank,
    ns: &[usize],
    prompts: usize,
    r: &mut RngState,
) -> Result<Vec<BonRow>> {
    let max_n = *ns.iter().max().ok_or_else(|| WarmError::invalid("ns must be nonempty"))?;
    if ns.contains(&0) || prompts == 0 {
        return Err(WarmError::invalid("every N and the prompt count must be >= 1"));
    }
    let mut oracle_sum = vec![0.0; ns.len()];
    let mut proxy_sum = vec![0.0; ns.len()];
    for _ in 0..prompts {
        let cands = policy_sample(pol, spec, bank, max_n, r)?;
        let scores: Vec<f64> = cands.iter().map(|c| proxy.reward(c)).collect();
        for (k, &n) in ns.iter().enumerate() {
            let mut best = 0;
            for i in 1..n {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            oracle_sum[k] += oracle_unchecked(spec, bank, &cands[best]);
            proxy_sum[k] += scores[best];
        }
    }
    let p = prompts as f64;
    ns.iter()
        .enumerate()
        .map(|(k, &n)| {
            Ok(BonRow {
                n,
                kl_approx: bon_kl_approx(n)?,
                mean_oracle: oracle_sum[k] / p,
                mean_proxy: proxy_sum[k] / p,
            })
        })
        .collect()
}

pub fn write_bon_csv<W: Write>(mut w: W, rows: &[BonRow]) -> Result<()> {
    writeln!(w, "N,kl_approx,mean_oracle,mean_proxy")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.n, f17(r.kl_approx), f17(r.mean_oracle), f17(r.mean_proxy))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// KL coefficient.
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub baseline_decay: f64,
    pub eval_interval: usize,
    /// Fresh samples drawn for every trajectory record.
    pub eval_samples: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            alpha: 0.003,
            learning_rate: 0.05,
            steps: 1500,
            batch_size: 32,
            baseline_decay: 0.9,
            eval_interval: 25,
            eval_samples: 256,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(WarmError::invalid("alpha must be >= 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(WarmError::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(WarmError::invalid("baseline_decay must lie in [0,1)"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.eval_samples == 0 {
            return Err(WarmError::invalid("steps, batch_size, eval_interval and eval_samples must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub proxy: f64,
    pub oracle: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,proxy,oracle,kl")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.step, f17(p.proxy), f17(p.oracle), f17(p.kl))?;
        }
        Ok(())
    }
}

fn evaluate<R: Reward + ?Sized>(
    state: &PolicyState,
    proxy: &R,
    cfg: &RlConfig,
    spec: &WorldSpec,
    bank: &FeatureBank,
    step: usize,
    r: &mut RngState,
) -> Result<TrajectoryPoint> {
    let items = policy_sample(&state.policy, spec, bank, cfg.eval_samples, r)?;
    let n = items.len() as f64;
    Ok(TrajectoryPoint {
        step,
        proxy: items.iter().map(|it| proxy.reward(it)).sum::<f64>() / n,
        oracle: items.iter().map(|it| oracle_unchecked(spec, bank, it)).sum::<f64>() / n,
        kl: gaussian_kl(&state.policy, state.reference())?,
    })
}

/// REINFORCE with an exponential-moving-average baseline on the penalised
/// reward `proxy(item) − α·log(π(g)/π_ref(g))`.
///
/// Updates are preconditioned by the inverse Fisher information of the
/// Gaussian (`σ²` for the means, `1/2` for the log-scales), which keeps the
/// step size meaningful as the policy sharpens. The trajectory is recorded at
/// step 0 and every `eval_interval` steps on fresh samples.
pub fn reinforce_run<R: Reward + ?Sized>(
    init: &PolicyState,
    proxy: &R,
    cfg: &RlConfig,
    spec: &WorldSpec,
    bank: &FeatureBank,
    r: RngState,
) -> Result<(PolicyState, Trajectory)> {
    cfg.validate()?;
    if init.policy.features() != spec.features {
        return Err(WarmError::invalid("policy and world disagree on the feature count"));
    }
    let (mut sample_rng, mut eval_rng) = r.split();
    let mut state = init.clone();
    let mut traj = Trajectory::default();
    traj.points.push(evaluate(&state, proxy, cfg, spec, bank, 0, &mut eval_rng)?);
    let mut baseline: Option<f64> = None;
    let f = spec.features;
    for step in 1..=cfg.steps {
        let batch = sample_with_logits(&state.policy, spec, bank, cfg.batch_size, &mut sample_rng);
        let rewards: Vec<f64> = batch
            .iter()
            .map(|(g, item)| {
                let ratio = state.policy.log_density(g) - state.reference().log_density(g);
                proxy.reward(item) - cfg.alpha * ratio
            })
            .collect();
        let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = *baseline.get_or_insert(mean_r);
        let mut d_mu = vec![0.0; f];
        let mut d_ls = vec![0.0; f];
        for ((g, _), &rew) in batch.iter().zip(&rewards) {
            let adv = rew - b;
            for j in 0..f {
                let sigma = state.policy.log_sigma[j].exp();
                let z = (g[j] - state.policy.mu[j]) / sigma;
                // Natural-gradient directions of log π.
                d_mu[j] += adv * z * sigma;
                d_ls[j] += adv * 0.5 * (z * z - 1.0);
            }
        }
        let scale = cfg.learning_rate / batch.len() as f64;
        for j in 0..f {
            state.policy.mu[j] += scale * d_mu[j];
            state.policy.log_sigma[j] += scale * d_ls[j];
        }
        if state.policy.mu.iter().chain(&state.policy.log_sigma).any(|v| !v.is_finite()) {
            return Err(WarmError::NumericalFailure {
                context: "reinforce_run",
                index: step,
            });
        }
        baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean_r);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            traj.points.push(evaluate(&state, proxy, cfg, spec, bank, step, &mut eval_rng)?);
        }
    }
    Ok((state, traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HackingReport {
    pub initial_oracle: f64,
    pub peak_oracle: f64,
    pub peak_step: usize,
    /// First step after the peak whose oracle reward fell below
    /// `(1 − δ)·peak` while the proxy stayed at or above its value at the peak.
    pub collapse_step: Option<usize>,
    pub final_proxy: f64,
    pub final_oracle: f64,
}

impl HackingReport {
    /// Peak at least `rise`× the initial oracle and final at most `fall`× the peak.
    pub fn rises_then_declines(&self, rise: f64, fall: f64) -> bool {
        self.peak_oracle >= rise * self.initial_oracle && self.final_oracle <= fall * self.peak_oracle
    }
}

pub fn hacking_report(traj: &Trajectory, delta: f64) -> Result<HackingReport> {
    let pts = &traj.points;
    if pts.is_empty() {
        return Err(WarmError::invalid("trajectory is empty"));
    }
    let (peak_idx, peak) = pts
        .iter()
        .enumerate()
        .fold((0, &pts[0]), |best, (i, p)| if p.oracle > best.1.oracle { (i, p) } else { best });
    let threshold = (1.0 - delta) * peak.oracle;
    let collapse_step = pts[peak_idx + 1..]
        .iter()
        .find(|p| p.oracle < threshold && p.proxy >= peak.proxy)
        .map(|p| p.step);
    let last = pts.last().unwrap();
    Ok(HackingReport {
        initial_oracle: pts[0].oracle,
        peak_oracle: peak.oracle,
        peak_step: peak.step,
        collapse_step,
        final_proxy: last.proxy,
        final_oracle: last.oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_feature_bank;

    fn world() -> (WorldSpec, FeatureBank) {
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(1)).unwrap();
        (spec, bank)
    }

    #[test]
    fn near_deterministic_uniform_allocation() {
        let (spec, bank) = world();
        let pol = GaussianPolicy::uniform(8, 1e-8);
        let mut r = RngState::new(2);
        for it in policy_sample(&pol, &spec, &bank, 20, &mut r).unwrap() {
            for a in &it.intensities {
                assert!((a - spec.budget / 8.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn allocations_sum_to_budget() {
        let (spec, bank) = world();
        let pol = GaussianPolicy::new(vec![3.0, -2.0, 0.5, 0.0, 1.0, -4.0, 2.0, 0.1], vec![0.7; 8]).unwrap();
        let mut r = RngState::new(3);
        for it in policy_sample(&pol, &spec, &bank, 200, &mut r).unwrap() {
            let s: f64 = it.intensities.iter().sum();
            assert!((s - spec.budget).abs() <= 1e-9);
        }
    }

    #[test]
    fn bon_edge_cases() {
        let (spec, bank) = world();
        let pol = GaussianPolicy::uniform(8, 1.0);
        let cands = policy_sample(&pol, &spec, &bank, 5, &mut RngState::new(4)).unwrap();
        assert_eq!(best_of_n_index(&|_: &Item| 1.0, &cands).unwrap(), 0);
        assert_eq!(best_of_n(&|_: &Item| 0.0, &cands[..1]).unwrap(), &cands[0]);
        assert!(best_of_n_index(&|_: &Item| 0.0, &[]).is_err());
    }

    #[test]
    fn kl_formulas() {
        assert_eq!(bon_kl_approx(1).unwrap(), 0.0);
        assert!(bon_kl_approx(0).is_err());
        assert!((bon_kl_approx(8).unwrap() - 1.204_441_541_679_836).abs() < 1e-12);
        for k in [1, 2, 17, 1000] {
            assert_eq!(bon_kl_exact(k, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn gaussian_kl_cases() {
        let p = GaussianPolicy::new(vec![0.3, -1.0], vec![0.2, -0.4]).unwrap();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        let q = GaussianPolicy::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let shifted = GaussianPolicy::new(vec![1.5, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((gaussian_kl(&shifted, &q).unwrap() - 1.125).abs() < 1e-15);
        let swapped = |g: &GaussianPolicy| {
            GaussianPolicy::new(vec![g.mu[1], g.mu[0]], vec![g.log_sigma[1], g.log_sigma[0]]).unwrap()
        };
        assert_eq!(gaussian_kl(&p, &q).unwrap(), gaussian_kl(&swapped(&p), &swapped(&q)).unwrap());
        let three = GaussianPolicy::uniform(3, 1.0);
        assert!(gaussian_kl(&p, &three).is_err());
    }

    fn traj(oracle: &[f64], proxy: &[f64]) -> Trajectory {
        Trajectory {
            points: oracle
                .iter()
                .zip(proxy)
                .enumerate()
                .map(|(i, (&o, &p))| TrajectoryPoint { step: i, proxy: p, oracle: o, kl: 0.0 })
                .collect(),
        }
    }

    #[test]
    fn hacking_report_cases() {
        let up = hacking_report(&traj(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 0.1).unwrap();
        assert_eq!(up.collapse_step, None);
        assert_eq!(up.peak_step, 3);

        let rep = hacking_report(&traj(&[1.0, 2.0, 3.0, 2.0], &[1.0, 2.0, 3.0, 4.0]), 0.2).unwrap();
        assert_eq!(rep.collapse_step, Some(3));
        assert_eq!(rep.peak_oracle, 3.0);
        assert!(rep.rises_then_declines(1.1, 0.9));

        // Oracle drop with the proxy also dropping is not hacking.
        let rep = hacking_report(&traj(&[1.0, 3.0, 2.0], &[1.0, 3.0, 2.0]), 0.2).unwrap();
        assert_eq!(rep.collapse_step, None);
        assert!(hacking_report(&Trajectory::default(), 0.1).is_err());
    }
}
