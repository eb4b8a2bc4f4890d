//! Presets: run an experiment, write its CSVs, then the manifest.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use warm_core::align::{write_bon_csv, BonRow};
use warm_core::combine::{mean_gaps, write_gap_csv, write_lmc_csv};
use warm_core::f17;

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Result};
use crate::experiments::{
    bon_kl_table, bon_seed, corrupt_seed, lmc_seed, per_seed, rl_seed, select_seed, theory_seed, RlArm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Lmc,
    Corrupt,
    Theory,
    Select,
    Bon,
    Rl,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Lmc,
        Preset::Corrupt,
        Preset::Theory,
        Preset::Select,
        Preset::Bon,
        Preset::Rl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Lmc => "exp-lmc",
            Preset::Corrupt => "exp-corrupt",
            Preset::Theory => "exp-theory",
            Preset::Select => "exp-select",
            Preset::Bon => "exp-bon",
            Preset::Rl => "exp-rl",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| BenchError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub preset: String,
    pub created_unix_secs: u64,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
}

/// Collects outputs; everything written goes through here so the manifest
/// cannot miss a file.
struct Sink {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Sink {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        fs::write(self.dir.join(name), &buf)?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(&buf)),
            bytes: buf.len() as u64,
        });
        Ok(())
    }
}

fn bon_rows(rows: &[BonRow]) -> impl FnOnce(&mut Vec<u8>) -> Result<()> + '_ {
    move |w| Ok(write_bon_csv(w, rows)?)
}

fn hacking_line(w: &mut Vec<u8>, seed: u64, proxy: &str, arm: &RlArm) -> Result<()> {
    let r = &arm.report;
    let collapse = r.collapse_step.map_or_else(String::new, |s| s.to_string());
    writeln!(
        w,
        "{seed},{proxy},{},{},{},{collapse},{},{}",
        f17(r.initial_oracle),
        f17(r.peak_oracle),
        r.peak_step,
        f17(r.final_proxy),
        f17(r.final_oracle)
    )?;
    Ok(())
}

/// Runs `preset` and writes its artifacts plus `manifest.json` into `out`.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let errs = cfg.violations();
    if !errs.is_empty() {
        return Err(BenchError::Config(errs));
    }
    fs::create_dir_all(out)?;
    let mut sink = Sink {
        dir: out.to_path_buf(),
        files: Vec::new(),
    };
    let seeds = &cfg.seeds;
    match preset {
        Preset::Lmc => {
            let outs = per_seed(seeds, |s| lmc_seed(cfg, s))?;
            for o in &outs {
                sink.write(&format!("lmc_seed{}.csv", o.seed), |w| Ok(write_lmc_csv(w, &o.rows)?))?;
            }
            sink.write("lmc_summary.csv", |w| {
                writeln!(w, "seed,min_gap")?;
                for o in &outs {
                    writeln!(w, "{},{}", o.seed, f17(o.min_gap))?;
                }
                Ok(())
            })?;
        }
        Preset::Corrupt => {
            let outs = per_seed(seeds, |s| corrupt_seed(cfg, s))?;
            for (&s, rows) in seeds.iter().zip(&outs) {
                sink.write(&format!("gaps_seed{s}.csv"), |w| Ok(write_gap_csv(w, rows)?))?;
            }
            // mean over seeds of each seed's pair
            let mut sums = std::collections::BTreeMap::new();
            for rows in &outs {
                for (tag, g) in mean_gaps(rows) {
                    *sums.entry(tag).or_insert(0.0) += g;
                }
            }
            sink.write("mean_gaps.csv", |w| {
                writeln!(w, "subset,mean_gap,pairs")?;
                for (tag, sum) in &sums {
                    writeln!(w, "{tag},{},{}", f17(sum / outs.len() as f64), outs.len())?;
                }
                Ok(())
            })?;
        }
        Preset::Theory => {
            let outs = per_seed(seeds, |s| theory_seed(cfg, s))?;
            sink.write("theory.csv", |w| {
                writeln!(w, "seed,members,n_items,ens_mc,wa_mc,ens_cf,wa_cf,abs_err")?;
                for (s, r) in seeds.iter().zip(&outs) {
                    writeln!(
                        w,
                        "{s},{},{},{},{},{},{},{}",
                        r.members,
                        r.n_items,
                        f17(r.ens_mc),
                        f17(r.wa_mc),
                        f17(r.ens_cf),
                        f17(r.wa_cf),
                        f17(r.abs_err)
                    )?;
                }
                Ok(())
            })?;
        }
        Preset::Select => {
            let outs = per_seed(seeds, |s| select_seed(cfg, s))?;
            sink.write("select.csv", |w| {
                writeln!(w, "seed,m,top_ood,bottom_ood")?;
                for r in outs.iter().flatten() {
                    writeln!(w, "{},{},{},{}", r.seed, r.m, f17(r.top_ood), f17(r.bottom_ood))?;
                }
                Ok(())
            })?;
        }
        Preset::Bon => {
            let kl = bon_kl_table(cfg)?;
            sink.write("bon_kl.csv", |w| {
                writeln!(w, "N,kl_approx,kl_exact")?;
                for r in &kl {
                    writeln!(w, "{},{},{}", r.n, f17(r.kl_approx), f17(r.kl_exact))?;
                }
                Ok(())
            })?;
            let outs = per_seed(seeds, |s| bon_seed(cfg, s))?;
            for o in &outs {
                sink.write(&format!("bon_single_seed{}.csv", o.seed), bon_rows(&o.single))?;
                sink.write(&format!("bon_warm_seed{}.csv", o.seed), bon_rows(&o.warm))?;
            }
        }
        Preset::Rl => {
            let outs = per_seed(seeds, |s| rl_seed(cfg, s))?;
            for o in &outs {
                for (name, arm) in [("single", &o.single), ("warm", &o.warm)] {
                    sink.write(&format!("rl_{name}_seed{}.csv", o.seed), |w| Ok(arm.trajectory.write_csv(w)?))?;
                }
            }
            sink.write("hacking.csv", |w| {
                writeln!(w, "seed,proxy,initial_oracle,peak_oracle,peak_step,collapse_step,final_proxy,final_oracle")?;
                for o in &outs {
                    hacking_line(w, o.seed, "single", &o.single)?;
                    hacking_line(w, o.seed, "warm", &o.warm)?;
                }
                Ok(())
            })?;
        }
    }
    let manifest = Manifest {
        preset: preset.name().to_string(),
        created_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
        files: sink.files,
    };
    let f = fs::File::create(out.join("manifest.json"))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(manifest)
}
