//! The computations behind each preset, one seed at a time. Nothing here
//! touches the filesystem.

use rayon::prelude::*;
use serde::Serialize;
use warm_core::align::{
    bon_kl_approx, bon_kl_exact, bon_sweep, hacking_report, reinforce_run, BonRow, GaussianPolicy, HackingReport,
    PolicyState, Trajectory,
};
use warm_core::combine::{
    lambda_grid, lmc_curve, pairwise_accuracy, rank_by_accuracy, subset_gap_report, weight_average, GapRow, LmcRow,
};
use warm_core::recipe::{Diversity, Lab, TrainedRm};
use warm_core::theory::{mc_limit_check, ItemNoise, McReport};
use warm_core::{Result, RngState, Weights};

use crate::config::ExperimentConfig;

// Stream ids so that presets never share randomness with the lab.
const THEORY_STREAM: u64 = 0x7468;
const BON_STREAM: u64 = 0x626f;
const RL_STREAM: u64 = 0x726c;

/// Trains members `0..m` of a pool, possibly in parallel. Output order is
/// member order regardless of scheduling.
pub fn train_pool(lab: &Lab, m: usize, diversity: Diversity) -> Result<Vec<TrainedRm>> {
    (0..m).into_par_iter().map(|i| lab.train_member(i, diversity)).collect()
}

/// Highest validation accuracy; ties go to the lower index.
pub fn best_by_val(pool: &[TrainedRm]) -> &TrainedRm {
    let mut best = &pool[0];
    for rm in &pool[1..] {
        if rm.id_val_acc > best.id_val_acc {
            best = rm;
        }
    }
    best
}

pub fn warm_of(pool: &[TrainedRm]) -> Result<Weights> {
    let refs: Vec<&Weights> = pool.iter().map(|t| &t.weights).collect();
    weight_average(&refs, None)
}

#[derive(Debug, Clone)]
pub struct LmcOutcome {
    pub seed: u64,
    pub rows: Vec<LmcRow>,
    /// Smallest `acc_wa − acc_diag` over the grid.
    pub min_gap: f64,
}

pub fn lmc_seed(cfg: &ExperimentConfig, seed: u64) -> Result<LmcOutcome> {
    let lab = cfg.recipe.build(seed)?;
    let pool = train_pool(&lab, 2, cfg.lmc.diversity)?;
    let rows = lmc_curve(&pool[0].weights, &pool[1].weights, &lab.ood(), &lambda_grid(cfg.lmc.grid_points))?;
    let min_gap = rows.iter().map(|r| r.acc_wa - r.acc_diag).fold(f64::INFINITY, f64::min);
    Ok(LmcOutcome { seed, rows, min_gap })
}

/// Per-subset `acc(WA) − acc(ENS)` for members 0 and 1 of a pool trained
/// on corrupted labels.
pub fn corrupt_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<GapRow>> {
    let mut recipe = cfg.recipe.clone();
    recipe.corruption = cfg.corrupt.corruption;
    let lab = recipe.build(seed)?;
    let pool = train_pool(&lab, 2, cfg.corrupt.diversity)?;
    subset_gap_report(&[(&pool[0].weights, &pool[1].weights)], &lab.data)
}

pub fn theory_seed(cfg: &ExperimentConfig, seed: u64) -> Result<McReport> {
    let t = &cfg.theory;
    let mut r = RngState::with_stream(seed, THEORY_STREAM);
    let bank = t.world.bank(&mut r)?;
    mc_limit_check(&t.world, &bank, t.members, t.items, ItemNoise::WorldSigma, &mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectRow {
    pub seed: u64,
    pub m: usize,
    /// OOD accuracy of the average of the `m` best by validation accuracy.
    pub top_ood: f64,
    pub bottom_ood: f64,
}

pub fn select_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SelectRow>> {
    let lab = cfg.recipe.build(seed)?;
    let pool = train_pool(&lab, cfg.select.pool, cfg.select.diversity)?;
    let cands: Vec<(&Weights, f64)> = pool.iter().map(|t| (&t.weights, t.id_val_acc)).collect();
    let ranked = rank_by_accuracy(&cands);
    let ood = lab.ood();
    let avg = |idx: &[usize]| -> Result<f64> {
        let ws: Vec<&Weights> = idx.iter().map(|&i| cands[i].0).collect();
        pairwise_accuracy(&weight_average(&ws, None)?, &ood)
    };
    (1..=pool.len())
        .map(|m| {
            Ok(SelectRow {
                seed,
                m,
                top_ood: avg(&ranked[..m])?,
                bottom_ood: avg(&ranked[ranked.len() - m..])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BonOutcome {
    pub seed: u64,
    pub single: Vec<BonRow>,
    pub warm: Vec<BonRow>,
}

pub fn bon_seed(cfg: &ExperimentConfig, seed: u64) -> Result<BonOutcome> {
    let lab = cfg.recipe.build(seed)?;
    let pool = train_pool(&lab, cfg.pool.members, cfg.pool.diversity)?;
    let warm = warm_of(&pool)?;
    let single = &best_by_val(&pool).weights;
    let spec = &lab.recipe.world;
    let pol = GaussianPolicy::uniform(spec.features, cfg.bon.policy_sigma);
    let b = &cfg.bon;
    // Same candidates for both proxies.
    let run = |proxy: &Weights| {
        bon_sweep(&pol, proxy, spec, &lab.bank, &b.ns, b.prompts, &mut RngState::with_stream(seed, BON_STREAM))
    };
    Ok(BonOutcome {
        seed,
        single: run(single)?,
        warm: run(&warm)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlRow {
    pub n: usize,
    pub kl_approx: f64,
    pub kl_exact: f64,
}

pub fn bon_kl_table(cfg: &ExperimentConfig) -> Result<Vec<KlRow>> {
    cfg.bon
        .ns
        .iter()
        .map(|&n| {
            Ok(KlRow {
                n,
                kl_approx: bon_kl_approx(n)?,
                kl_exact: bon_kl_exact(cfg.bon.kl_samples, n)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RlArm {
    pub trajectory: Trajectory,
    pub report: HackingReport,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub seed: u64,
    pub single: RlArm,
    pub warm: RlArm,
}

/// REINFORCE against the best single member and against WARM of the pool,
/// from the same reference policy with the same sampling stream.
pub fn rl_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RlOutcome> {
    let lab = cfg.recipe.build(seed)?;
    let pool = train_pool(&lab, cfg.pool.members, cfg.pool.diversity)?;
    let warm = warm_of(&pool)?;
    let single = best_by_val(&pool).weights.clone();
    let spec = &lab.recipe.world;
    let init = PolicyState::new(GaussianPolicy::uniform(spec.features, cfg.rl.policy_sigma));
    let run_cfg = cfg.rl.run_config();
    let arm = |proxy: &Weights| -> Result<RlArm> {
        let (_, trajectory) = reinforce_run(&init, proxy, &run_cfg, spec, &lab.bank, RngState::with_stream(seed, RL_STREAM))?;
        let report = hacking_report(&trajectory, cfg.rl.delta)?;
        Ok(RlArm { trajectory, report })
    };
    let (s, w) = rayon::join(|| arm(&single), || arm(&warm));
    Ok(RlOutcome {
        seed,
        single: s?,
        warm: w?,
    })
}

/// Runs `f` on every seed, in parallel, keeping seed order.
pub fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| f(s)).collect()
}
