//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! PASS/FAIL line even when others fail; exits nonzero on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use warm_bench::experiments::{bon_seed, corrupt_seed, lmc_seed, rl_seed, select_seed};
use warm_bench::{run_preset, ExperimentConfig, Preset};
use warm_core::align::bon_kl_exact;
use warm_core::combine::{ensemble_reward, mean_gaps, weight_average};
use warm_core::linalg::{finite_diff_grad, relative_error};
use warm_core::net::{bt_loss, bt_loss_grad, NetShape, Weights};
use warm_core::recipe::DeskRecipe;
use warm_core::synth::{gen_preference_data, make_feature_bank, Split, SubsetTag};
use warm_core::theory::{ens_limit, mc_limit_check, wa_limit, ItemNoise, TheoryWorld};
use warm_core::{Reward, RngState};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Verdict;

// --- 1 -------------------------------------------------------------------

fn gradient_oracle() -> Verdict {
    let recipe = DeskRecipe::default();
    let spec = &recipe.world;
    let bank = make_feature_bank(spec, &mut RngState::new(1)).unwrap();
    let data = gen_preference_data(spec, &bank, 256, Split::Train, &mut RngState::new(2)).unwrap();
    let shape = NetShape::new(spec.input_dim(), 16).unwrap();
    let h = 1e-5;
    let mut r = RngState::new(3);
    let (mut worst, mut probes, mut redrawn): (f64, u64, usize) = (0.0, 0, 0);
    while probes < 24 {
        let w = Weights::random(shape, &mut r);
        let start = r.below(data.len() - 4);
        let batch: Vec<_> = data[start..start + 4].iter().collect();
        // The stencil must not straddle a ReLU kink: the loss is not
        // differentiable there and central differences are meaningless.
        let near_kink = batch.iter().flat_map(|p| [&p.item_plus, &p.item_minus]).any(|it| {
            let reach = 10.0 * h * it.x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            w.pre_activations(&it.x).iter().any(|a| a.abs() < reach)
        });
        if near_kink {
            redrawn += 1;
            continue;
        }
        let (_, g) = bt_loss_grad(&w, &batch, 0.0, &mut RngState::new(probes)).unwrap();
        let fd = finite_diff_grad(|v| bt_loss(&Weights::from_values(shape, v.to_vec()).unwrap(), &batch), &w.values, h).unwrap();
        worst = worst.max(relative_error(&g, &fd, 1e-12));
        probes += 1;
    }
    verdict(
        worst <= 1e-4,
        format!("{probes} probes ({redrawn} redrawn near a kink), worst relative error {worst:.2e} (tol 1e-4)"),
    )
}

// --- 2 -------------------------------------------------------------------

fn theory_limits() -> Verdict {
    let world = TheoryWorld {
        p: vec![1.0, 0.5],
        z_norms: vec![1.0, 1.0],
        sigma: 0.0,
        dim: 8,
    };
    let mut r = RngState::new(11);
    let bank = world.bank(&mut r).unwrap();
    let rep = mc_limit_check(&world, &bank, 4096, 16, ItemNoise::Noiseless, &mut r).unwrap();
    let cf_ok = ens_limit(&world, 1.0).unwrap() == 1.5 && wa_limit(&world, 1.0).unwrap() == 1.25;
    let mc_ok = (rep.ens_mc - 1.5).abs() <= 0.05 && (rep.wa_mc - 1.25).abs() <= 0.05;
    // p² <= p, checked against the sums computed here.
    let mut draws = RngState::new(12);
    let mut bad = 0;
    for _ in 0..1000 {
        let f = 1 + draws.below(8);
        let p: Vec<f64> = (0..f).map(|_| draws.uniform()).collect();
        let n: Vec<f64> = (0..f).map(|_| draws.uniform_range(0.0, 3.0)).collect();
        let w = TheoryWorld {
            p: p.clone(),
            z_norms: n.clone(),
            sigma: 0.0,
            dim: 8,
        };
        let ens: f64 = p.iter().zip(&n).map(|(p, n)| p * n * n).sum();
        let wa: f64 = p.iter().zip(&n).map(|(p, n)| p * p * n * n).sum();
        if !(wa <= ens && wa_limit(&w, 1.0).unwrap() <= ens_limit(&w, 1.0).unwrap()) {
            bad += 1;
        }
    }
    verdict(
        cf_ok && mc_ok && bad == 0,
        format!(
            "MC ens {:.4} (1.5) wa {:.4} (1.25) tol 0.05; closed forms exact {cf_ok}; inequality violations {bad}/1000",
            rep.ens_mc, rep.wa_mc
        ),
    )
}

// --- 3 -------------------------------------------------------------------

fn lmc() -> Verdict {
    let cfg = ExperimentConfig::default();
    let gaps: Vec<f64> = (0..5).map(|s| lmc_seed(&cfg, s).unwrap().min_gap).collect();
    let ok = gaps.iter().filter(|&&g| g >= -0.02).count();
    verdict(ok >= 4, format!("min(acc_wa - acc_diag) per pair {gaps:.4?}; {ok}/5 >= -0.02 (need 4)"))
}

// --- 4 -------------------------------------------------------------------

fn wa_ens_first_order() -> Verdict {
    let recipe = DeskRecipe::default();
    let spec = &recipe.world;
    let bank = make_feature_bank(spec, &mut RngState::new(21)).unwrap();
    let data = gen_preference_data(spec, &bank, 200, Split::IdVal, &mut RngState::new(22)).unwrap();
    let shape = NetShape::new(spec.input_dim(), recipe.hidden).unwrap();
    let base = Weights::random(shape, &mut RngState::new(23));
    let scales = [1e-1, 1e-2, 1e-3];
    let mut pts = Vec::new();
    for &eps in &scales {
        let mut r = RngState::new(24);
        let mut members = Vec::new();
        for _ in 0..2 {
            let mut w = base.clone();
            for v in w.values.iter_mut() {
                *v += eps * r.normal();
            }
            members.push(w);
        }
        let refs: Vec<&Weights> = members.iter().collect();
        let wa = weight_average(&refs, None).unwrap();
        let gap = data
            .iter()
            .map(|p| (wa.reward(&p.item_plus) - ensemble_reward(&refs, None, &p.item_plus).unwrap()).abs())
            .sum::<f64>()
            / data.len() as f64;
        pts.push((eps.ln(), gap.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    verdict(slope >= 1.8, format!("log-log slope {slope:.3} (need >= 1.8)"))
}

// --- 5 -------------------------------------------------------------------

fn corruption_signs() -> Verdict {
    let cfg = ExperimentConfig::default();
    let mut sums: BTreeMap<SubsetTag, f64> = BTreeMap::new();
    let pairs = 10;
    for seed in 0..pairs {
        for (tag, g) in mean_gaps(&corrupt_seed(&cfg, seed).unwrap()) {
            *sums.entry(tag).or_default() += g / pairs as f64;
        }
    }
    let corrupt = sums[&SubsetTag::TrainCorrupt];
    let ood = sums[&SubsetTag::OodTest];
    verdict(
        corrupt < 0.0 && ood > 0.0,
        format!(
            "mean acc_wa - acc_ens over {pairs} pairs: train_corrupt {corrupt:+.4} (<0) ood_test {ood:+.4} (>0); train_clean {:+.4} id_val {:+.4}",
            sums[&SubsetTag::TrainClean],
            sums[&SubsetTag::IdVal]
        ),
    )
}

// --- 6 -------------------------------------------------------------------

fn weight_selection() -> Verdict {
    let cfg = ExperimentConfig::default();
    let (mut top, mut bottom) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let row = select_seed(&cfg, seed).unwrap().into_iter().find(|r| r.m == 6).unwrap();
        top.push(row.top_ood);
        bottom.push(row.bottom_ood);
    }
    let mt = top.iter().sum::<f64>() / 3.0;
    let mb = bottom.iter().sum::<f64>() / 3.0;
    verdict(mt >= mb, format!("OOD top-6 {top:.4?} mean {mt:.4}; bottom-6 {bottom:.4?} mean {mb:.4}"))
}

// --- 7 -------------------------------------------------------------------

fn bon() -> Verdict {
    let ns = [2usize, 4, 8, 16, 32, 64];
    let mut worst: f64 = 0.0;
    for &n in &ns {
        let nf = n as f64;
        let approx = nf.ln() - (nf - 1.0) / nf;
        worst = worst.max((bon_kl_exact(100_000, n).unwrap() - approx).abs());
    }
    let mut cfg = ExperimentConfig::default();
    cfg.pool.members = 6;
    cfg.bon.ns = std::iter::once(1).chain(ns).collect();
    let out = bon_seed(&cfg, 0).unwrap();
    let oracle: Vec<f64> = out.warm.iter().map(|r| r.mean_oracle).collect();
    let monotone = oracle.windows(2).all(|w| w[1] >= w[0] - 0.02);
    verdict(
        worst <= 0.01 && monotone,
        format!("max |kl_exact - approx| {worst:.4} (tol 0.01); WARM-of-6 BoN oracle {oracle:.3?} nondecreasing within 0.02: {monotone}"),
    )
}

// --- 8 -------------------------------------------------------------------

fn hacking() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.rl.alpha = 0.001;
    cfg.pool.members = 6;
    let outs: Vec<_> = (0..5).map(|s| rl_seed(&cfg, s).unwrap()).collect();
    let rtd = outs.iter().filter(|o| o.single.report.rises_then_declines(1.1, 0.9)).count();
    let mean = |f: &dyn Fn(&warm_bench::experiments::RlOutcome) -> f64| outs.iter().map(f).sum::<f64>() / outs.len() as f64;
    let peak_s = mean(&|o| o.single.report.peak_oracle);
    let peak_w = mean(&|o| o.warm.report.peak_oracle);
    // No collapse counts as one eval past the horizon.
    let horizon = (cfg.rl.steps + cfg.rl.eval_interval) as f64;
    let col = |c: Option<usize>| c.map_or(horizon, |s| s as f64);
    let col_s = mean(&|o| col(o.single.report.collapse_step));
    let col_w = mean(&|o| col(o.warm.report.collapse_step));
    let warm_never = outs.iter().all(|o| o.warm.report.collapse_step.is_none());
    let later = warm_never || col_w > col_s;
    let per_seed: Vec<String> = outs
        .iter()
        .map(|o| {
            let (s, w) = (&o.single.report, &o.warm.report);
            format!(
                "s{}: single {:.2}->{:.2}->{:.2} c{:?} | warm {:.2}->{:.2}->{:.2} c{:?}",
                o.seed, s.initial_oracle, s.peak_oracle, s.final_oracle, s.collapse_step, w.initial_oracle, w.peak_oracle, w.final_oracle, w.collapse_step
            )
        })
        .collect();
    verdict(
        rtd >= 3 && peak_w >= peak_s && later,
        format!(
            "single rise-then-decline {rtd}/5 (need 3); mean peak warm {peak_w:.3} vs single {peak_s:.3}; mean collapse warm {col_w:.0} vs single {col_s:.0}\n      {}",
            per_seed.join("\n      ")
        ),
    )
}

// --- 9 -------------------------------------------------------------------

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let r = &mut cfg.recipe;
    r.n_train = 256;
    r.n_val = 100;
    r.n_ood = 100;
    r.n_pretrain = 256;
    r.hidden = 8;
    r.pretrain.steps = 120;
    r.snapshot_steps = vec![80, 100, 120];
    r.probe.steps = 50;
    r.finetune.steps = 60;
    r.finetune.eval_interval = 30;
    cfg.pool.members = 3;
    cfg.select.pool = 3;
    cfg.theory.members = 64;
    cfg.bon.prompts = 50;
    cfg.bon.kl_samples = 1000;
    cfg.rl.steps = 60;
    cfg.rl.eval_samples = 32;
    cfg.seeds = vec![3, 7];
    cfg
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Verdict {
    let cfg = tiny_config();
    let tmp = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut files = 0;
    for preset in Preset::ALL {
        let mut runs = Vec::new();
        // second run on two workers: scheduling must not leak into outputs
        for (i, jobs) in [1usize, 2].into_iter().enumerate() {
            let dir = tmp.path().join(format!("{preset}-{i}"));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().unwrap();
            let m = pool.install(|| run_preset(preset, &cfg, &dir)).unwrap();
            let listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
            let on_disk: Vec<String> = csv_bytes(&dir).into_keys().collect();
            let mut sorted = listed.clone();
            sorted.sort();
            if sorted != on_disk {
                problems.push(format!("{preset}: manifest {listed:?} vs disk {on_disk:?}"));
            }
            runs.push((csv_bytes(&dir), m));
        }
        files += runs[0].0.len();
        if runs[0].0 != runs[1].0 {
            problems.push(format!("{preset}: outputs differ between reruns"));
        }
        if runs[0].1.files != runs[1].1.files {
            problems.push(format!("{preset}: manifest hashes differ"));
        }
    }
    let detail = if problems.is_empty() {
        format!("6 presets x 2 runs, {files} files byte-identical, manifests complete")
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

fn main() {
    let checks: [(&str, &str, Check, u64); 9] = [
        ("1", "gradient oracle", gradient_oracle, 10),
        ("2", "theory limits", theory_limits, 30),
        ("3", "linear mode connectivity", lmc, 300),
        ("4", "WA vs ENS first order", wa_ens_first_order, 10),
        ("5", "corruption sign pattern", corruption_signs, 600),
        ("6", "weight selection", weight_selection, 600),
        ("7", "best-of-N KL and monotonicity", bon, 120),
        ("8", "reward hacking shape", hacking, 900),
        ("9", "preset determinism", determinism, 600),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, name, check, budget) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        let el = t.elapsed();
        let in_time = el <= Duration::from_secs(budget);
        let pass = v.pass && in_time;
        println!(
            "{} [{id}] {name} ({:.1}s, budget {budget}s): {}",
            if pass { "PASS" } else { "FAIL" },
            el.as_secs_f64(),
            v.detail
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
