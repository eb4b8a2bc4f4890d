//! Weight averaging (WARM), prediction ensembling and the diagnostics that
//! compare them.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Result, WarmError};
use crate::fmt::f17;
use crate::net::{Checkpoint, Reward, Weights};
use crate::synth::{Item, PreferencePair, SubsetTag};

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerKind {
    Single,
    Warm,
    Ens,
    MovingAvg,
}

fn check_members(members: &[&Weights]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| WarmError::invalid("at least one member is required"))?;
    if let Some(i) = members.iter().position(|m| m.shape != first.shape) {
        return Err(WarmError::invalid(format!(
            "member {i} has shape {:?}, expected {:?}",
            members[i].shape, first.shape
        )));
    }
    Ok(())
}

/// Resolves optional coefficients to a validated simplex vector.
fn resolve_coeffs(n: usize, coeffs: Option<&[f64]>) -> Result<Vec<f64>> {
    match coeffs {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(c) => {
            if c.len() != n {
                return Err(WarmError::invalid(format!("{} coefficients for {n} members", c.len())));
            }
            if c.iter().any(|&v| !(v >= 0.0)) {
                return Err(WarmError::invalid("coefficients must be nonnegative"));
            }
            let s: f64 = c.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(WarmError::invalid(format!("coefficients sum to {s}, not 1")));
            }
            Ok(c.to_vec())
        }
    }
}

/// Elementwise convex combination of the members' parameters; uniform when
/// `coeffs` is `None`. Members with coefficient 0 contribute nothing, so the
/// endpoints of an interpolation are bit-exact.
pub fn weight_average(members: &[&Weights], coeffs: Option<&[f64]>) -> Result<Weights> {
    check_members(members)?;
    let c = resolve_coeffs(members.len(), coeffs)?;
    let shape = members[0].shape;
    // Every member sharing one parameter vector makes the average exact too.
    if members.iter().all(|m| m.values == members[0].values) {
        return Ok(members[0].clone());
    }
    if let Some(k) = c.iter().position(|&ci| ci == 1.0) {
        if c.iter().enumerate().all(|(i, &ci)| i == k || ci == 0.0) {
            return Ok(members[k].clone());
        }
    }
    // Accumulate in a canonical order so that permuting (member, coeff)
    // pairs together leaves the result bit-identical.
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&i, &j| {
        c[i].total_cmp(&c[j]).then_with(|| {
            members[i]
                .values
                .iter()
                .zip(&members[j].values)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut out = vec![0.0; shape.n_params()];
    for (m, &ci) in order.iter().map(|&i| (members[i], &c[i])) {
        if ci == 0.0 {
            continue;
        }
        out.iter_mut().zip(&m.values).for_each(|(o, v)| *o += ci * v);
    }
    Ok(Weights { shape, values: out })
}

/// `(1−λ)·φ1 + λ·φ2`.
pub fn interpolate(a: &Weights, b: &Weights, lambda: f64) -> Result<Weights> {
    weight_average(&[a, b], Some(&[1.0 - lambda, lambda]))
}

/// Prediction ensemble: a convex combination of member rewards.
#[derive(Debug, Clone)]
pub struct Ensemble<'a> {
    members: Vec<&'a Weights>,
    coeffs: Vec<f64>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: &[&'a Weights], coeffs: Option<&[f64]>) -> Result<Self> {
        check_members(members)?;
        let coeffs = resolve_coeffs(members.len(), coeffs)?;
        Ok(Ensemble {
            members: members.to_vec(),
            coeffs,
        })
    }
}

impl Reward for Ensemble<'_> {
    fn reward(&self, item: &Item) -> f64 {
        self.members
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(m, &c)| c * m.reward(item))
            .sum()
    }
}

pub fn ensemble_reward(members: &[&Weights], coeffs: Option<&[f64]>, item: &Item) -> Result<f64> {
    let ens = Ensemble::new(members, coeffs)?;
    if item.x.len() != members[0].shape.input_dim {
        return Err(WarmError::invalid("item does not match member input_dim"));
    }
    Ok(ens.reward(item))
}

/// Fraction of pairs where the labelled-preferred item scores at least as
/// high as the other one. Ties count as correct.
pub fn pairwise_accuracy<R: Reward + ?Sized>(reward: &R, data: &[PreferencePair]) -> Result<f64> {
    if data.is_empty() {
        return Err(WarmError::invalid("pairwise accuracy needs at least one pair"));
    }
    Ok(correct_count(reward, data.iter()) as f64 / data.len() as f64)
}

fn correct_count<'a, R: Reward + ?Sized>(reward: &R, data: impl Iterator<Item = &'a PreferencePair>) -> usize {
    data.filter(|p| {
        let (w, l) = p.ordered();
        reward.reward(w) >= reward.reward(l)
    })
    .count()
}

fn accuracy_refs<R: Reward + ?Sized>(reward: &R, data: &[&PreferencePair]) -> f64 {
    correct_count(reward, data.iter().copied()) as f64 / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmcRow {
    pub lambda: f64,
    pub acc_wa: f64,
    pub acc_ens: f64,
    pub acc_diag: f64,
}

/// `n` evenly spaced points on `[0, 1]`.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Accuracy along the segment between two models, for weight interpolation
/// and for prediction mixing. `acc_diag` is the chord between the endpoints.
pub fn lmc_curve(a: &Weights, b: &Weights, data: &[PreferencePair], grid: &[f64]) -> Result<Vec<LmcRow>> {
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(WarmError::invalid(format!("lambda {l} outside [0,1]")));
    }
    let acc_a = pairwise_accuracy(a, data)?;
    let acc_b = pairwise_accuracy(b, data)?;
    grid.iter()
        .map(|&lambda| {
            let coeffs = [1.0 - lambda, lambda];
            let wa = weight_average(&[a, b], Some(&coeffs))?;
            let ens = Ensemble::new(&[a, b], Some(&coeffs))?;
            Ok(LmcRow {
                lambda,
                acc_wa: pairwise_accuracy(&wa, data)?,
                acc_ens: pairwise_accuracy(&ens, data)?,
                acc_diag: (1.0 - lambda) * acc_a + lambda * acc_b,
            })
        })
        .collect()
}

pub fn write_lmc_csv<W: Write>(mut w: W, rows: &[LmcRow]) -> Result<()> {
    writeln!(w, "lambda,acc_wa,acc_ens,acc_diag")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", f17(r.lambda), f17(r.acc_wa), f17(r.acc_ens), f17(r.acc_diag))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    /// Index of the model pair, or `None` for the mean over pairs.
    pub pair_id: Option<usize>,
    pub subset: SubsetTag,
    pub gap: f64,
}

/// Per model pair and per subset, `acc(WA) − acc(ENS)` at `λ = 0.5`,
/// followed by one mean row per subset.
pub fn subset_gap_report(rm_pairs: &[(&Weights, &Weights)], data: &[PreferencePair]) -> Result<Vec<GapRow>> {
    if rm_pairs.is_empty() {
        return Err(WarmError::invalid("at least one model pair is required"));
    }
    let mut by_tag: BTreeMap<SubsetTag, Vec<&PreferencePair>> = BTreeMap::new();
    for p in data {
        by_tag.entry(p.subset_tag).or_default().push(p);
    }
    for tag in SubsetTag::ALL {
        if !by_tag.contains_key(&tag) {
            return Err(WarmError::invalid(format!("data has no pairs tagged {tag}")));
        }
    }
    let mut rows = Vec::new();
    let mut sums: BTreeMap<SubsetTag, f64> = BTreeMap::new();
    for (i, (a, b)) in rm_pairs.iter().enumerate() {
        let wa = weight_average(&[a, b], None)?;
        let ens = Ensemble::new(&[a, b], None)?;
        for tag in SubsetTag::ALL {
            let subset = &by_tag[&tag];
            let gap = accuracy_refs(&wa, subset) - accuracy_refs(&ens, subset);
            *sums.entry(tag).or_default() += gap;
            rows.push(GapRow {
                pair_id: Some(i),
                subset: tag,
                gap,
            });
        }
    }
    for tag in SubsetTag::ALL {
        rows.push(GapRow {
            pair_id: None,
            subset: tag,
            gap: sums[&tag] / rm_pairs.len() as f64,
        });
    }
    Ok(rows)
}

/// Mean gap per subset from a report.
pub fn mean_gaps(rows: &[GapRow]) -> BTreeMap<SubsetTag, f64> {
    rows.iter()
        .filter(|r| r.pair_id.is_none())
        .map(|r| (r.subset, r.gap))
        .collect()
}

pub fn write_gap_csv<W: Write>(mut w: W, rows: &[GapRow]) -> Result<()> {
    writeln!(w, "pair_id,subset,gap")?;
    for r in rows {
        let id = r.pair_id.map_or_else(|| "mean".to_string(), |i| i.to_string());
        writeln!(w, "{id},{},{}", r.subset, f17(r.gap))?;
    }
    Ok(())
}

/// Uniform average of the `m` candidates with the highest validation
/// accuracy. Ties keep input order.
pub fn select_top_m(candidates: &[(&Weights, f64)], m: usize) -> Result<Weights> {
    if m == 0 || m > candidates.len() {
        return Err(WarmError::invalid(format!(
            "M must lie in [1, {}], got {m}",
            candidates.len()
        )));
    }
    let ranked = rank_by_accuracy(candidates);
    let top: Vec<&Weights> = ranked[..m].iter().map(|&i| candidates[i].0).collect();
    weight_average(&top, None)
}

/// Candidate indices sorted by accuracy, best first, stable on ties.
pub fn rank_by_accuracy(candidates: &[(&Weights, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&i, &j| candidates[j].1.total_cmp(&candidates[i].1));
    idx
}

/// Uniform average of checkpoints collected along one fine-tuning.
pub fn moving_average(ckpts: &[Checkpoint]) -> Result<Weights> {
    if ckpts.len() < 2 {
        return Err(WarmError::invalid("moving average needs at least two checkpoints"));
    }
    if ckpts.iter().any(|c| c.trajectory != ckpts[0].trajectory) {
        return Err(WarmError::invalid("checkpoints come from different trajectories"));
    }
    let members: Vec<&Weights> = ckpts.iter().map(|c| &c.weights).collect();
    weight_average(&members, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetShape;
    use crate::rng::RngState;
    use crate::synth::{gen_preference_data, make_feature_bank, oracle_reward, Split, WorldSpec};

    fn two_nets() -> (Weights, Weights) {
        let shape = NetShape::new(128, 8).unwrap();
        let mut r = RngState::new(1);
        (Weights::random(shape, &mut r), Weights::random(shape, &mut r))
    }

    #[test]
    fn endpoints_are_bit_exact() {
        let (a, b) = two_nets();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn permutation_invariant() {
        let (a, b) = two_nets();
        let c = interpolate(&a, &b, 0.3).unwrap();
        let x = weight_average(&[&a, &b, &c], Some(&[0.2, 0.5, 0.3])).unwrap();
        let y = weight_average(&[&c, &a, &b], Some(&[0.3, 0.2, 0.5])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn average_of_copies_is_identity() {
        let (a, _) = two_nets();
        let avg = weight_average(&[&a, &a, &a], None).unwrap();
        assert_eq!(avg, a);
    }

    #[test]
    fn off_simplex_and_mismatched_layouts_rejected() {
        let (a, b) = two_nets();
        assert!(weight_average(&[&a, &b], Some(&[0.5, 0.6])).is_err());
        assert!(weight_average(&[&a, &b], Some(&[1.5, -0.5])).is_err());
        let other = Weights::zeros(NetShape::new(128, 4).unwrap());
        assert!(weight_average(&[&a, &other], None).is_err());
        assert!(weight_average(&[], None).is_err());
    }

    #[test]
    fn ensemble_endpoints_and_identity() {
        let (a, b) = two_nets();
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(2)).unwrap();
        let data = gen_preference_data(&spec, &bank, 5, Split::Train, &mut RngState::new(3)).unwrap();
        for p in &data {
            let it = &p.item_plus;
            assert_eq!(ensemble_reward(&[&a, &a], None, it).unwrap(), a.reward(it));
            assert_eq!(ensemble_reward(&[&a, &b], Some(&[0.0, 1.0]), it).unwrap(), b.reward(it));
        }
    }

    #[test]
    fn accuracy_conventions() {
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(2)).unwrap();
        let data = gen_preference_data(&spec, &bank, 300, Split::Train, &mut RngState::new(3)).unwrap();
        let oracle = |it: &Item| oracle_reward(&spec, &bank, it).unwrap();
        let neg = |it: &Item| -oracle_reward(&spec, &bank, it).unwrap();
        let constant = |_: &Item| 1.0;
        assert_eq!(pairwise_accuracy(&oracle, &data).unwrap(), 1.0);
        assert_eq!(pairwise_accuracy(&neg, &data).unwrap(), 0.0);
        assert_eq!(pairwise_accuracy(&constant, &data).unwrap(), 1.0);
        assert!(pairwise_accuracy(&constant, &[]).is_err());
    }

    #[test]
    fn lambda_grid_default() {
        let g = lambda_grid(11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!((g[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lmc_endpoints_match() {
        let (a, b) = two_nets();
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(2)).unwrap();
        let data = gen_preference_data(&spec, &bank, 200, Split::OodTest, &mut RngState::new(3)).unwrap();
        let rows = lmc_curve(&a, &b, &data, &lambda_grid(11)).unwrap();
        let (acc_a, acc_b) = (pairwise_accuracy(&a, &data).unwrap(), pairwise_accuracy(&b, &data).unwrap());
        assert_eq!((rows[0].acc_wa, rows[0].acc_ens, rows[0].acc_diag), (acc_a, acc_a, acc_a));
        assert_eq!((rows[10].acc_wa, rows[10].acc_ens, rows[10].acc_diag), (acc_b, acc_b, acc_b));
        assert!(lmc_curve(&a, &b, &data, &[1.5]).is_err());
    }

    #[test]
    fn gap_report_identical_members_and_missing_subset() {
        let (a, _) = two_nets();
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(2)).unwrap();
        let mut r = RngState::new(4);
        let mut data = gen_preference_data(&spec, &bank, 100, Split::Train, &mut r).unwrap();
        data = crate::synth::corrupt_labels(&data, 0.3, &mut r).unwrap();
        let err = subset_gap_report(&[(&a, &a)], &data).unwrap_err();
        assert!(err.to_string().contains("id_val"));
        data.extend(gen_preference_data(&spec, &bank, 50, Split::IdVal, &mut r).unwrap());
        data.extend(gen_preference_data(&spec, &bank, 50, Split::OodTest, &mut r).unwrap());
        let rows = subset_gap_report(&[(&a, &a)], &data).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.gap == 0.0));
    }

    #[test]
    fn top_m_selection() {
        let (a, b) = two_nets();
        let c = weight_average(&[&a, &b], None).unwrap();
        let cands = [(&a, 0.7), (&b, 0.9), (&c, 0.9)];
        assert_eq!(select_top_m(&cands, 1).unwrap(), b);
        assert_eq!(rank_by_accuracy(&cands), vec![1, 2, 0]);
        assert_eq!(select_top_m(&cands, 3).unwrap(), weight_average(&[&b, &c, &a], None).unwrap());
        assert!(select_top_m(&cands, 0).is_err());
        assert!(select_top_m(&cands, 4).is_err());
    }

    #[test]
    fn moving_average_checks_trajectory() {
        let (a, b) = two_nets();
        let c1 = Checkpoint { weights: a.clone(), step: 1, trajectory: 7 };
        let c2 = Checkpoint { weights: a.clone(), step: 2, trajectory: 7 };
        assert_eq!(moving_average(&[c1.clone(), c2]).unwrap(), a);
        let c3 = Checkpoint { weights: b, step: 3, trajectory: 8 };
        assert!(moving_average(&[c1.clone(), c3]).is_err());
        assert!(moving_average(&[c1]).is_err());
    }
}
