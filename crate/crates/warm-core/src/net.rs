//! Two-layer ReLU reward model trained with the Bradley-Terry pairwise loss.
//!
//! Parameters live in one flat vector laid out as `W1 (H×D, row-major)`,
//! `b1 (H)`, head `ω (H)`, bias `c`. Everything that averages or
//! interpolates models works on that vector directly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::combine::pairwise_accuracy;
use crate::error::{Result, WarmError};
use crate::fmt::f17_array;
use crate::linalg::dot;
use crate::rng::RngState;
use crate::synth::{Item, PreferencePair, SubsetTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden: usize,
}

impl NetShape {
    pub fn new(input_dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 || input_dim == 0 {
            return Err(WarmError::invalid("input_dim and hidden must be >= 1"));
        }
        Ok(NetShape { input_dim, hidden })
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.input_dim + 2 * self.hidden + 1
    }

    /// Length of the featurizer block `(W1, b1)` at the front of the vector.
    pub fn featurizer_len(&self) -> usize {
        self.hidden * self.input_dim + self.hidden
    }

    /// `(name, offset, len)` for every parameter block.
    pub fn layout(&self) -> [(&'static str, usize, usize); 4] {
        let (h, d) = (self.hidden, self.input_dim);
        [
            ("w1", 0, h * d),
            ("b1", h * d, h),
            ("head", h * d + h, h),
            ("bias", h * d + 2 * h, 1),
        ]
    }
}

/// A reward model: anything that scores an item.
pub trait Reward {
    fn reward(&self, item: &Item) -> f64;
}

impl<F: Fn(&Item) -> f64> Reward for F {
    fn reward(&self, item: &Item) -> f64 {
        self(item)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub shape: NetShape,
    pub values: Vec<f64>,
}

impl Weights {
    pub fn zeros(shape: NetShape) -> Self {
        Weights {
            shape,
            values: vec![0.0; shape.n_params()],
        }
    }

    pub fn from_values(shape: NetShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.n_params() {
            return Err(WarmError::invalid(format!(
                "weights for {shape:?} need {} values, got {}",
                shape.n_params(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(WarmError::invalid(format!("weight {i} is not finite")));
        }
        Ok(Weights { shape, values })
    }

    /// He-initialised featurizer, small Gaussian head, zero biases.
    pub fn random(shape: NetShape, r: &mut RngState) -> Self {
        let mut w = Weights::zeros(shape);
        let s1 = (2.0 / shape.input_dim as f64).sqrt();
        for v in w.w1_mut() {
            *v = s1 * r.normal();
        }
        let sh = (1.0 / shape.hidden as f64).sqrt();
        for v in w.head_mut() {
            *v = sh * r.normal();
        }
        w
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[..self.shape.hidden * self.shape.input_dim]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let n = self.shape.hidden * self.shape.input_dim;
        &mut self.values[..n]
    }

    pub fn b1(&self) -> &[f64] {
        let (_, off, len) = self.shape.layout()[1];
        &self.values[off..off + len]
    }

    pub fn head(&self) -> &[f64] {
        let (_, off, len) = self.shape.layout()[2];
        &self.values[off..off + len]
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        let (_, off, len) = self.shape.layout()[2];
        &mut self.values[off..off + len]
    }

    pub fn bias(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn set_bias(&mut self, c: f64) {
        let n = self.values.len();
        self.values[n - 1] = c;
    }

    pub fn featurizer(&self) -> &[f64] {
        &self.values[..self.shape.featurizer_len()]
    }

    /// This featurizer combined with `other`'s head `(ω, c)`.
    pub fn with_head_of(&self, other: &Weights) -> Result<Weights> {
        if self.shape != other.shape {
            return Err(WarmError::invalid("head donor has a different shape"));
        }
        let mut out = self.clone();
        let k = self.shape.featurizer_len();
        out.values[k..].copy_from_slice(&other.values[k..]);
        Ok(out)
    }

    /// Hidden pre-activations `W1·x + b1`.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let d = self.shape.input_dim;
        self.w1()
            .chunks_exact(d)
            .zip(self.b1())
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// `ReLU(W1·x + b1)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.pre_activations(x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        h
    }

    fn reward_x(&self, x: &[f64]) -> f64 {
        let d = self.shape.input_dim;
        let mut r = self.bias();
        for ((row, b), w) in self.w1().chunks_exact(d).zip(self.b1()).zip(self.head()) {
            let h = dot(row, x) + b;
            if h > 0.0 {
                r += w * h;
            }
        }
        r
    }
}

impl Reward for Weights {
    fn reward(&self, item: &Item) -> f64 {
        self.reward_x(&item.x)
    }
}

/// `r = ωᵀ·ReLU(W1·vec(x) + b1) + c`.
pub fn forward(w: &Weights, item: &Item) -> Result<f64> {
    if item.x.len() != w.shape.input_dim {
        return Err(WarmError::invalid(format!(
            "item has {} inputs, net expects {}",
            item.x.len(),
            w.shape.input_dim
        )));
    }
    Ok(w.reward_x(&item.x))
}

/// `−log σ(m)`, stable for large `|m|`.
pub fn bt_nll(margin: f64) -> f64 {
    (-margin).max(0.0) + (-margin.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean Bradley-Terry loss over `batch` and its gradient.
///
/// With `dropout_p > 0` each pair draws one inverted-dropout mask over the
/// hidden units, shared by both of its items. With `dropout_p == 0` the RNG
/// is not touched.
pub fn bt_loss_grad(
    w: &Weights,
    batch: &[&PreferencePair],
    dropout_p: f64,
    r: &mut RngState,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(WarmError::invalid("batch must be nonempty"));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(WarmError::invalid(format!("dropout must lie in [0,1), got {dropout_p}")));
    }
    let shape = w.shape;
    let (h, d) = (shape.hidden, shape.input_dim);
    let mut grad = vec![0.0; shape.n_params()];
    let mut loss = 0.0;
    let keep_scale = 1.0 / (1.0 - dropout_p);
    let mut mask = vec![1.0; h];
    let head = w.head();
    let [_, (_, b1_off, _), (_, head_off, _), _] = shape.layout();

    for (bi, pair) in batch.iter().enumerate() {
        let (win, lose) = pair.ordered();
        if win.x.len() != d || lose.x.len() != d {
            return Err(WarmError::invalid(format!("pair {bi} does not match input_dim {d}")));
        }
        if dropout_p > 0.0 {
            for m in mask.iter_mut() {
                *m = if r.uniform() < dropout_p { 0.0 } else { keep_scale };
            }
        }
        let hp = w.pre_activations(&win.x);
        let hm = w.pre_activations(&lose.x);
        let mut margin = 0.0;
        for k in 0..h {
            margin += head[k] * mask[k] * (hp[k].max(0.0) - hm[k].max(0.0));
        }
        let l = bt_nll(margin);
        if !l.is_finite() {
            return Err(WarmError::NumericalFailure {
                context: "bt_loss_grad",
                index: bi,
            });
        }
        loss += l;
        // dL/dmargin
        let g = -sigmoid(-margin);
        for k in 0..h {
            if mask[k] == 0.0 {
                continue;
            }
            let ap = hp[k].max(0.0);
            let am = hm[k].max(0.0);
            grad[head_off + k] += g * mask[k] * (ap - am);
            let up = if hp[k] > 0.0 { g * head[k] * mask[k] } else { 0.0 };
            let um = if hm[k] > 0.0 { g * head[k] * mask[k] } else { 0.0 };
            if up == 0.0 && um == 0.0 {
                continue;
            }
            grad[b1_off + k] += up - um;
            let row = &mut grad[k * d..(k + 1) * d];
            for ((gi, xp), xm) in row.iter_mut().zip(&win.x).zip(&lose.x) {
                *gi += up * xp - um * xm;
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

/// Mean loss without dropout, for diagnostics and gradient checks.
pub fn bt_loss(w: &Weights, batch: &[&PreferencePair]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|p| {
            let (a, b) = p.ordered();
            bt_nll(w.reward(a) - w.reward(b))
        })
        .sum();
    total / batch.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    LinearProbe,
    RandomHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub data_order_seed: u64,
    /// Which pretraining snapshot the run starts from; bookkeeping only.
    pub init_checkpoint_id: usize,
    pub probe_mode: ProbeMode,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-3,
            dropout_p: 0.05,
            steps: 2000,
            batch_size: 32,
            data_order_seed: 0,
            init_checkpoint_id: 0,
            probe_mode: ProbeMode::LinearProbe,
            eval_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(WarmError::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(WarmError::invalid("dropout_p must lie in [0,1)"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(WarmError::invalid("steps, batch_size and eval_interval must be >= 1"));
        }
        Ok(())
    }
}

/// A snapshot along one training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights,
    pub step: usize,
    pub trajectory: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub id_val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,id_val_acc")?;
        for r in &self.records {
            writeln!(w, "{},{:.10},{:.6}", r.step, r.loss, r.id_val_acc)?;
        }
        Ok(())
    }
}

/// Visits training pairs in per-epoch shuffled order.
struct BatchOrder<'a> {
    pool: Vec<&'a PreferencePair>,
    pos: usize,
    rng: RngState,
}

impl<'a> BatchOrder<'a> {
    fn new(pool: Vec<&'a PreferencePair>, mut rng: RngState) -> Self {
        let mut pool = pool;
        rng.shuffle(&mut pool);
        BatchOrder { pool, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<&'a PreferencePair> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.pool.len() {
                self.rng.shuffle(&mut self.pool);
                self.pos = 0;
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn sgd_step(w: &mut Weights, grad: &[f64], lr: f64) {
    w.values.iter_mut().zip(grad).for_each(|(v, g)| *v -= lr * g);
}

/// Settings for the shared pretraining trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1200,
            learning_rate: 0.02,
            batch_size: 32,
        }
    }
}

/// Trains a freshly initialised net on the pretraining pairs and snapshots
/// it at `snapshot_steps` (1-based, strictly increasing).
pub fn pretrain_trajectory(
    data: &[PreferencePair],
    shape: NetShape,
    cfg: &PretrainConfig,
    snapshot_steps: &[usize],
    r: RngState,
) -> Result<Vec<Checkpoint>> {
    if snapshot_steps.is_empty() {
        return Err(WarmError::invalid("snapshot_steps must be nonempty"));
    }
    if snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WarmError::invalid("snapshot_steps must be strictly increasing"));
    }
    if snapshot_steps[0] == 0 || *snapshot_steps.last().unwrap() > cfg.steps {
        return Err(WarmError::invalid(format!(
            "snapshot_steps must lie in [1, {}]",
            cfg.steps
        )));
    }
    if data.is_empty() {
        return Err(WarmError::invalid("pretraining data must be nonempty"));
    }
    let trajectory = r.seed().rotate_left(17) ^ r.stream_id() ^ 0x5052_4554;
    let (mut init_rng, order_rng) = r.split();
    let mut w = Weights::random(shape, &mut init_rng);
    let mut order = BatchOrder::new(data.iter().collect(), order_rng);
    let mut no_dropout = RngState::new(0);
    let mut out = Vec::with_capacity(snapshot_steps.len());
    let mut next = 0;
    for step in 1..=cfg.steps {
        let batch = order.next_batch(cfg.batch_size);
        let (_, grad) = bt_loss_grad(&w, &batch, 0.0, &mut no_dropout)
            .map_err(|e| at_step(e, step))?;
        sgd_step(&mut w, &grad, cfg.learning_rate);
        if snapshot_steps[next] == step {
            out.push(Checkpoint {
                weights: w.clone(),
                step,
                trajectory,
            });
            next += 1;
            if next == snapshot_steps.len() {
                break;
            }
        }
    }
    Ok(out)
}

fn at_step(e: WarmError, step: usize) -> WarmError {
    match e {
        WarmError::NumericalFailure { context, .. } => WarmError::NumericalFailure { context, index: step },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            learning_rate: 0.5,
        }
    }
}

/// Fits the head `ω` by full-batch gradient descent on the training pairs
/// with the featurizer frozen. The bias `c` cancels in every pairwise
/// margin and is left as is.
pub fn linear_probe(ckpt: &Checkpoint, data: &[PreferencePair], cfg: &ProbeConfig) -> Result<Weights> {
    let train: Vec<&PreferencePair> = data.iter().filter(|p| p.subset_tag.is_train()).collect();
    if train.is_empty() {
        return Err(WarmError::invalid("linear probing needs training pairs"));
    }
    let w0 = &ckpt.weights;
    let h = w0.shape.hidden;
    // Feature differences are fixed once the featurizer is frozen.
    let diffs: Vec<Vec<f64>> = train
        .iter()
        .map(|p| {
            let (a, b) = p.ordered();
            let fa = w0.features(&a.x);
            let fb = w0.features(&b.x);
            fa.iter().zip(&fb).map(|(x, y)| x - y).collect()
        })
        .collect();
    let mut omega = w0.head().to_vec();
    let n = diffs.len() as f64;
    for _ in 0..cfg.steps {
        let mut g = vec![0.0; h];
        for df in &diffs {
            let s = -sigmoid(-dot(&omega, df));
            g.iter_mut().zip(df).for_each(|(gi, x)| *gi += s * x);
        }
        omega.iter_mut().zip(&g).for_each(|(o, gi)| *o -= cfg.learning_rate * gi / n);
    }
    let mut out = w0.clone();
    out.head_mut().copy_from_slice(&omega);
    Ok(out)
}

/// Replaces the head with a fresh Gaussian one.
pub fn random_head(w: &Weights, r: &mut RngState) -> Weights {
    let mut out = w.clone();
    let sh = (1.0 / w.shape.hidden as f64).sqrt();
    for v in out.head_mut() {
        *v = sh * r.normal();
    }
    out
}

/// Plain SGD on the Bradley-Terry loss over the training pairs of `data`,
/// logging ID-validation accuracy every `eval_interval` steps.
pub fn train_rm(init: &Weights, cfg: &TrainConfig, data: &[PreferencePair]) -> Result<(Weights, TrainLog)> {
    let (w, log, _) = train_rm_with_snapshots(init, cfg, data, &[])?;
    Ok((w, log))
}

/// [`train_rm`] that also returns checkpoints at `snapshot_steps`.
pub fn train_rm_with_snapshots(
    init: &Weights,
    cfg: &TrainConfig,
    data: &[PreferencePair],
    snapshot_steps: &[usize],
) -> Result<(Weights, TrainLog, Vec<Checkpoint>)> {
    cfg.validate()?;
    let train: Vec<&PreferencePair> = data.iter().filter(|p| p.subset_tag.is_train()).collect();
    if train.is_empty() {
        return Err(WarmError::invalid("training data has no train-split pairs"));
    }
    let val: Vec<PreferencePair> = data
        .iter()
        .filter(|p| p.subset_tag == SubsetTag::IdVal)
        .cloned()
        .collect();
    let trajectory = run_fingerprint(init, cfg);
    let (order_rng, mut dropout_rng) = RngState::new(cfg.data_order_seed).split();
    let mut order = BatchOrder::new(train, order_rng);
    let mut w = init.clone();
    let mut log = TrainLog::default();
    let mut snaps = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for step in 1..=cfg.steps {
        let batch = order.next_batch(cfg.batch_size);
        let (loss, grad) = bt_loss_grad(&w, &batch, cfg.dropout_p, &mut dropout_rng)
            .map_err(|e| at_step(e, step))?;
        sgd_step(&mut w, &grad, cfg.learning_rate);
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(WarmError::NumericalFailure {
                context: "train_rm",
                index: step,
            });
        }
        loss_acc += loss;
        loss_n += 1;
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let acc = if val.is_empty() { f64::NAN } else { pairwise_accuracy(&w, &val)? };
            log.records.push(LogRecord {
                step,
                loss: loss_acc / loss_n as f64,
                id_val_acc: acc,
            });
            loss_acc = 0.0;
            loss_n = 0;
        }
        if snapshot_steps.contains(&step) {
            snaps.push(Checkpoint {
                weights: w.clone(),
                step,
                trajectory,
            });
        }
    }
    Ok((w, log, snaps))
}

/// FNV-1a over the run's starting point and configuration.
fn run_fingerprint(init: &Weights, cfg: &TrainConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in &init.values {
        feed(v.to_bits());
    }
    feed(cfg.learning_rate.to_bits());
    feed(cfg.dropout_p.to_bits());
    feed(cfg.steps as u64);
    feed(cfg.batch_size as u64);
    feed(cfg.data_order_seed);
    h
}

#[derive(Serialize, Deserialize)]
struct LayoutEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Deserialize)]
struct WeightFile {
    shape: NetShape,
    layout: Vec<LayoutEntry>,
    values: Vec<f64>,
}

/// `{shape, layout, values}` with 17-significant-digit values.
pub fn write_weights<W: Write>(mut out: W, w: &Weights) -> Result<()> {
    let layout: Vec<LayoutEntry> = w
        .shape
        .layout()
        .iter()
        .map(|&(name, offset, len)| LayoutEntry {
            name: name.to_string(),
            offset,
            len,
        })
        .collect();
    writeln!(
        out,
        "{{\"shape\":{},\"layout\":{},\"values\":{}}}",
        serde_json::to_string(&w.shape)?,
        serde_json::to_string(&layout)?,
        f17_array(&w.values)
    )?;
    Ok(())
}

pub fn read_weights(text: &str) -> Result<Weights> {
    let file: WeightFile = serde_json::from_str(text)?;
    let expected = file.shape.layout();
    let matches = file.layout.len() == expected.len()
        && file
            .layout
            .iter()
            .zip(expected.iter())
            .all(|(e, &(n, o, l))| e.name == n && e.offset == o && e.len == l);
    if !matches {
        return Err(WarmError::Parse("weight layout does not match shape".to_string()));
    }
    Weights::from_values(file.shape, file.values)
}
