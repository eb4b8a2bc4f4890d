//! The synthetic preference universe.
//!
//! Items are bags of `F` features: block `j` of an item is drawn as
//! `N(a_j · y · z^j, σ² I_d)` around a feature direction `z^j` from an
//! orthogonal [`FeatureBank`]. A transparent linear oracle scores items from
//! the causal blocks only, one designated non-causal feature is made to
//! co-occur with the preferred item at train time, and the OOD split
//! decorrelates it and doubles the noise.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WarmError};
use crate::fmt::f17_array;
use crate::linalg::{axpy, dot, norm, scale};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Number of features `F`.
    pub features: usize,
    /// Per-feature dimension `d`.
    pub dim: usize,
    /// `‖z^j‖` for every feature.
    pub norms: Vec<f64>,
    pub causal_mask: Vec<bool>,
    /// Oracle weight per feature; positive on causal features, ignored elsewhere.
    pub causal_weights: Vec<f64>,
    /// Index of the non-causal feature that co-occurs with preferred items.
    pub spurious: usize,
    pub sigma_train: f64,
    pub sigma_ood: f64,
    /// Train/ID-val probability that the spurious feature sits on the preferred item.
    pub rho_spur: f64,
    /// Total intensity a policy distributes across features.
    pub budget: f64,
}

impl Default for WorldSpec {
    /// The desk-scale world: 8 features in 16 dimensions, four causal
    /// features of decreasing weight, feature 4 spurious, three distractors.
    fn default() -> Self {
        WorldSpec {
            features: 8,
            dim: 16,
            norms: vec![1.0; 8],
            causal_mask: vec![true, true, true, true, false, false, false, false],
            causal_weights: vec![1.0, 0.8, 0.6, 0.4, 0.0, 0.0, 0.0, 0.0],
            spurious: 4,
            sigma_train: 0.3,
            sigma_ood: 0.6,
            rho_spur: 0.9,
            budget: 8.0,
        }
    }
}

impl WorldSpec {
    /// Every violated invariant, in field order.
    pub fn violations(&self) -> Vec<String> {
        let f = self.features;
        let mut errs = Vec::new();
        if f == 0 {
            errs.push("features must be >= 1".to_string());
        }
        if f > self.dim {
            errs.push(format!("features ({f}) must not exceed dim ({})", self.dim));
        }
        for (name, len) in [
            ("norms", self.norms.len()),
            ("causal_mask", self.causal_mask.len()),
            ("causal_weights", self.causal_weights.len()),
        ] {
            if len != f {
                errs.push(format!("{name} has {len} entries, expected {f}"));
            }
        }
        if self.norms.iter().any(|n| !(*n > 0.0) || !n.is_finite()) {
            errs.push("norms must be positive and finite".to_string());
        }
        if !self.causal_mask.iter().any(|&c| c) {
            errs.push("at least one feature must be causal".to_string());
        }
        if !self.causal_mask.iter().any(|&c| !c) {
            errs.push("at least one feature must be non-causal".to_string());
        }
        for (j, (&c, &w)) in self.causal_mask.iter().zip(&self.causal_weights).enumerate() {
            if c && !(w > 0.0) {
                errs.push(format!("causal_weights[{j}] must be > 0 on a causal feature"));
            }
        }
        if self.spurious >= f {
            errs.push(format!("spurious index {} out of range", self.spurious));
        } else if self.causal_mask.get(self.spurious) == Some(&true) {
            errs.push(format!("spurious feature {} must be non-causal", self.spurious));
        }
        if !(self.sigma_train >= 0.0) || !(self.sigma_ood >= 0.0) {
            errs.push("sigma_train and sigma_ood must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.rho_spur) {
            errs.push(format!("rho_spur must lie in [0,1], got {}", self.rho_spur));
        }
        if !(self.budget > 0.0) {
            errs.push(format!("budget must be > 0, got {}", self.budget));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(WarmError::invalid(errs.join("; ")))
        }
    }

    pub fn input_dim(&self) -> usize {
        self.features * self.dim
    }
}

/// Orthogonal feature directions `z^j`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub z: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn features(&self) -> usize {
        self.z.len()
    }

    /// `(z^j)ᵀ x^j / ‖z^j‖²`, the intensity estimate of feature `j`.
    pub fn project(&self, x: &[f64], j: usize) -> f64 {
        let z = &self.z[j];
        dot(z, &x[j * self.dim..(j + 1) * self.dim]) / dot(z, z)
    }
}

/// Gram-Schmidt on Gaussian draws, rescaled to `spec.norms`.
pub fn make_feature_bank(spec: &WorldSpec, r: &mut RngState) -> Result<FeatureBank> {
    if spec.features > spec.dim {
        return Err(WarmError::invalid(format!(
            "cannot place {} orthogonal features in dimension {}",
            spec.features, spec.dim
        )));
    }
    if spec.norms.len() != spec.features {
        return Err(WarmError::invalid("norms length must equal features"));
    }
    orthogonal_bank(spec.dim, &spec.norms, r)
}

/// `norms.len()` orthogonal directions in dimension `dim` with the given norms.
pub fn orthogonal_bank(dim: usize, norms: &[f64], r: &mut RngState) -> Result<FeatureBank> {
    if norms.len() > dim {
        return Err(WarmError::invalid(format!(
            "cannot place {} orthogonal features in dimension {dim}",
            norms.len()
        )));
    }
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(norms.len());
    while z.len() < norms.len() {
        let mut v: Vec<f64> = (0..dim).map(|_| r.normal()).collect();
        // Two passes of modified Gram-Schmidt keep the Gram matrix within 1e-15.
        for _ in 0..2 {
            for u in &z {
                let c = dot(u, &v);
                axpy(-c, u, &mut v);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        scale(1.0 / n, &mut v);
        z.push(v);
    }
    for (v, &target) in z.iter_mut().zip(norms) {
        scale(target, v);
    }
    Ok(FeatureBank { dim, z })
}

/// One generation: `F` concatenated blocks of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub x: Vec<f64>,
    /// Latent intensities `a_j`; empty when the item was loaded from a file.
    pub intensities: Vec<f64>,
    pub y: f64,
}

impl Item {
    /// Draws `x^j ~ N(a_j · y · z^j, σ² I)` for every block.
    pub fn sample(bank: &FeatureBank, intensities: Vec<f64>, y: f64, sigma: f64, r: &mut RngState) -> Item {
        let d = bank.dim;
        let mut x = vec![0.0; bank.features() * d];
        for (j, z) in bank.z.iter().enumerate() {
            let block = &mut x[j * d..(j + 1) * d];
            let a = intensities[j] * y;
            for (xi, zi) in block.iter_mut().zip(z) {
                *xi = a * zi + if sigma > 0.0 { sigma * r.normal() } else { 0.0 };
            }
        }
        Item { x, intensities, y }
    }
}

/// `R*(x) = Σ_{j causal} w_j · (z^j)ᵀ x^j / ‖z^j‖²`.
pub fn oracle_reward(spec: &WorldSpec, bank: &FeatureBank, item: &Item) -> Result<f64> {
    if item.x.len() != bank.features() * bank.dim || bank.features() != spec.features {
        return Err(WarmError::invalid(format!(
            "item has {} inputs, world expects {}",
            item.x.len(),
            spec.features * spec.dim
        )));
    }
    Ok(oracle_unchecked(spec, bank, item))
}

pub(crate) fn oracle_unchecked(spec: &WorldSpec, bank: &FeatureBank, item: &Item) -> f64 {
    (0..spec.features)
        .filter(|&j| spec.causal_mask[j])
        .map(|j| spec.causal_weights[j] * bank.project(&item.x, j))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetTag {
    TrainClean,
    TrainCorrupt,
    IdVal,
    OodTest,
}

impl SubsetTag {
    pub const ALL: [SubsetTag; 4] = [
        SubsetTag::TrainClean,
        SubsetTag::TrainCorrupt,
        SubsetTag::IdVal,
        SubsetTag::OodTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetTag::TrainClean => "train_clean",
            SubsetTag::TrainCorrupt => "train_corrupt",
            SubsetTag::IdVal => "id_val",
            SubsetTag::OodTest => "ood_test",
        }
    }

    pub fn is_train(self) -> bool {
        matches!(self, SubsetTag::TrainClean | SubsetTag::TrainCorrupt)
    }
}

impl std::fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which split to generate. Training pairs come out tagged `train_clean`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    IdVal,
    OodTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: u64,
    /// Generated as the oracle-preferred item.
    pub item_plus: Item,
    pub item_minus: Item,
    /// Which item the (possibly corrupted) label prefers.
    pub label: Label,
    pub corrupted: bool,
    pub subset_tag: SubsetTag,
}

impl PreferencePair {
    /// `(labelled-preferred, other)`.
    pub fn ordered(&self) -> (&Item, &Item) {
        match self.label {
            Label::Plus => (&self.item_plus, &self.item_minus),
            Label::Minus => (&self.item_minus, &self.item_plus),
        }
    }
}

fn draw_intensities(spec: &WorldSpec, r: &mut RngState) -> Vec<f64> {
    (0..spec.features)
        .map(|_| if r.bernoulli(0.5) { r.uniform_range(0.5, 1.5) } else { 0.0 })
        .collect()
}

/// Shared pair generator: `rho` is the spurious co-occurrence probability,
/// `sigma` the block noise.
#[allow(clippy::too_many_arguments)]
fn gen_pairs(
    spec: &WorldSpec,
    bank: &FeatureBank,
    n_pairs: usize,
    tag: SubsetTag,
    rho: f64,
    sigma: f64,
    score: &dyn Fn(&Item) -> f64,
    r: &mut RngState,
) -> Vec<PreferencePair> {
    let s = spec.spurious;
    let mut out = Vec::with_capacity(n_pairs);
    for prompt_id in 0..n_pairs as u64 {
        let (mut first, mut second, r1, r2) = loop {
            let mut a = draw_intensities(spec, r);
            let mut b = draw_intensities(spec, r);
            a[s] = 0.0;
            b[s] = 0.0;
            let ia = Item::sample(bank, a, 1.0, sigma, r);
            let ib = Item::sample(bank, b, 1.0, sigma, r);
            let (ra, rb) = (score(&ia), score(&ib));
            if ra != rb {
                break (ia, ib, ra, rb);
            }
        };
        if r2 > r1 {
            std::mem::swap(&mut first, &mut second);
        }
        // The spurious block is non-causal, so rewriting it leaves the oracle untouched.
        let on_preferred = r.bernoulli(rho);
        let intensity = r.uniform_range(0.5, 1.5);
        let (carrier, other) = if on_preferred {
            (&mut first, &mut second)
        } else {
            (&mut second, &mut first)
        };
        set_block(bank, carrier, s, intensity, sigma, r);
        set_block(bank, other, s, 0.0, sigma, r);
        out.push(PreferencePair {
            prompt_id,
            item_plus: first,
            item_minus: second,
            label: Label::Plus,
            corrupted: false,
            subset_tag: tag,
        });
    }
    out
}

fn set_block(bank: &FeatureBank, item: &mut Item, j: usize, intensity: f64, sigma: f64, r: &mut RngState) {
    let d = bank.dim;
    item.intensities[j] = intensity;
    let a = intensity * item.y;
    for (xi, zi) in item.x[j * d..(j + 1) * d].iter_mut().zip(&bank.z[j]) {
        *xi = a * zi + if sigma > 0.0 { sigma * r.normal() } else { 0.0 };
    }
}

/// Labelled pairs for one split. Train and ID-val pairs carry the spurious
/// feature on the preferred item with probability `rho_spur`; OOD pairs use
/// 0.5 and `sigma_ood`.
pub fn gen_preference_data(
    spec: &WorldSpec,
    bank: &FeatureBank,
    n_pairs: usize,
    split: Split,
    r: &mut RngState,
) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(WarmError::invalid("n_pairs must be >= 1"));
    }
    let (tag, rho, sigma) = match split {
        Split::Train => (SubsetTag::TrainClean, spec.rho_spur, spec.sigma_train),
        Split::IdVal => (SubsetTag::IdVal, spec.rho_spur, spec.sigma_train),
        Split::OodTest => (SubsetTag::OodTest, 0.5, spec.sigma_ood),
    };
    let oracle = |it: &Item| oracle_unchecked(spec, bank, it);
    Ok(gen_pairs(spec, bank, n_pairs, tag, rho, sigma, &oracle, r))
}

/// Labels of the pretraining split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTarget {
    /// The oracle itself.
    #[default]
    Oracle,
    /// Total intensity over every non-spurious feature, causal or not.
    Generic,
}

/// The easy split used to pretrain featurizers: half the training noise,
/// no spurious shortcut, clean labels from `target`.
pub fn gen_pretrain_data(
    spec: &WorldSpec,
    bank: &FeatureBank,
    n_pairs: usize,
    target: PretrainTarget,
    r: &mut RngState,
) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(WarmError::invalid("n_pairs must be >= 1"));
    }
    let s = spec.spurious;
    let score: Box<dyn Fn(&Item) -> f64 + '_> = match target {
        PretrainTarget::Oracle => Box::new(|it: &Item| oracle_unchecked(spec, bank, it)),
        PretrainTarget::Generic => Box::new(move |it: &Item| {
            (0..spec.features).filter(|&j| j != s).map(|j| bank.project(&it.x, j)).sum::<f64>()
        }),
    };
    Ok(gen_pairs(spec, bank, n_pairs, SubsetTag::TrainClean, 0.5, 0.5 * spec.sigma_train, &*score, r))
}

/// Swaps each training label independently with probability `rate`.
pub fn corrupt_labels(
    data: &[PreferencePair],
    rate: f64,
    r: &mut RngState,
) -> Result<Vec<PreferencePair>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(WarmError::invalid(format!("corruption rate must lie in [0,1], got {rate}")));
    }
    Ok(data
        .iter()
        .map(|p| {
            let mut p = p.clone();
            if p.subset_tag.is_train() {
                // Always draw, so the stream position does not depend on earlier outcomes.
                let swap = r.uniform() < rate;
                p.corrupted = swap;
                p.label = if swap { Label::Minus } else { Label::Plus };
                p.subset_tag = if swap { SubsetTag::TrainCorrupt } else { SubsetTag::TrainClean };
            }
            p
        })
        .collect())
}

/// Fraction of pairs whose labelled-preferred item carries the spurious feature.
pub fn spurious_cooccurrence(spec: &WorldSpec, data: &[PreferencePair]) -> f64 {
    let hits = data
        .iter()
        .filter(|p| p.ordered().0.intensities.get(spec.spurious).is_some_and(|&a| a > 0.0))
        .count();
    hits as f64 / data.len() as f64
}

pub fn filter_tags<'a>(data: &'a [PreferencePair], tags: &[SubsetTag]) -> Vec<&'a PreferencePair> {
    data.iter().filter(|p| tags.contains(&p.subset_tag)).collect()
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt_id: u64,
    x_plus: Vec<Vec<f64>>,
    x_minus: Vec<Vec<f64>>,
    label: Label,
    corrupted: bool,
    subset_tag: SubsetTag,
}

fn blocks_json(x: &[f64], dim: usize) -> String {
    let parts: Vec<String> = x.chunks(dim).map(f17_array).collect();
    format!("[{}]", parts.join(","))
}

/// One JSON object per line; floats carry 17 significant digits.
pub fn write_jsonl<W: Write>(mut w: W, data: &[PreferencePair], dim: usize) -> Result<()> {
    for p in data {
        writeln!(
            w,
            "{{\"prompt_id\":{},\"x_plus\":{},\"x_minus\":{},\"label\":\"{}\",\"corrupted\":{},\"subset_tag\":\"{}\"}}",
            p.prompt_id,
            blocks_json(&p.item_plus.x, dim),
            blocks_json(&p.item_minus.x, dim),
            match p.label {
                Label::Plus => "plus",
                Label::Minus => "minus",
            },
            p.corrupted,
            p.subset_tag
        )?;
    }
    Ok(())
}

/// Inverse of [`write_jsonl`]. Loaded items have no latent intensities.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| WarmError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let item = |blocks: Vec<Vec<f64>>| Item {
            x: blocks.into_iter().flatten().collect(),
            intensities: Vec::new(),
            y: 1.0,
        };
        out.push(PreferencePair {
            prompt_id: rec.prompt_id,
            item_plus: item(rec.x_plus),
            item_minus: item(rec.x_minus),
            label: rec.label,
            corrupted: rec.corrupted,
            subset_tag: rec.subset_tag,
        });
    }
    Ok(out)
}
