//! The desk-scale recipe. Everything downstream builds its world here.
//!
//! One pretraining trajectory is snapshotted; a single probed head is then
//! shared by every fine-tuning.

use serde::{Deserialize, Serialize};

use crate::combine::pairwise_accuracy;
use crate::error::{Result, WarmError};
use crate::net::{
    linear_probe, pretrain_trajectory, random_head, train_rm, Checkpoint, NetShape, PretrainConfig, ProbeConfig,
    ProbeMode, TrainConfig, TrainLog, Weights,
};
use crate::rng::RngState;
use crate::synth::{
    corrupt_labels, gen_preference_data, gen_pretrain_data, make_feature_bank, FeatureBank, PreferencePair, PretrainTarget, Split,
    SubsetTag, WorldSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneGrid {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub eval_interval: usize,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        FinetuneGrid {
            steps: 2000,
            batch_size: 32,
            learning_rates: vec![0.375, 0.15, 0.0375],
            dropouts: vec![0.05, 0.1],
            eval_interval: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskRecipe {
    pub world: WorldSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_ood: usize,
    pub n_pretrain: usize,
    /// Fraction of training labels swapped.
    pub corruption: f64,
    pub hidden: usize,
    pub pretrain_target: PretrainTarget,
    pub pretrain: PretrainConfig,
    /// Pretraining snapshots usable as fine-tuning inits, earliest first.
    pub snapshot_steps: Vec<usize>,
    pub probe: ProbeConfig,
    pub finetune: FinetuneGrid,
}

impl Default for DeskRecipe {
    fn default() -> Self {
        DeskRecipe {
            world: WorldSpec::default(),
            n_train: 4096,
            n_val: 1000,
            n_ood: 2000,
            n_pretrain: 4096,
            corruption: 0.0,
            hidden: 32,
            pretrain_target: PretrainTarget::Oracle,
            pretrain: PretrainConfig::default(),
            snapshot_steps: vec![800, 1000, 1200],
            probe: ProbeConfig::default(),
            finetune: FinetuneGrid::default(),
        }
    }
}

/// How fine-tunings in a pool differ from one another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    /// Same hyperparameters and init; only the data order changes.
    DataOrder,
    /// Hyperparameters and init snapshot also cycle with the member index.
    Full,
}

/// A built world plus its pretrained inits.
#[derive(Debug, Clone)]
pub struct Lab {
    pub recipe: DeskRecipe,
    pub bank: FeatureBank,
    /// Every pair, tagged by split.
    pub data: Vec<PreferencePair>,
    pub pretrain_data: Vec<PreferencePair>,
    pub checkpoints: Vec<Checkpoint>,
    /// One init per checkpoint, all carrying the same probed head.
    pub inits: Vec<Weights>,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedRm {
    pub config: TrainConfig,
    pub weights: Weights,
    pub log: TrainLog,
    pub id_val_acc: f64,
}

impl DeskRecipe {
    pub fn shape(&self) -> Result<NetShape> {
        NetShape::new(self.world.input_dim(), self.hidden)
    }

    /// Every violated constraint, with the field it concerns.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut errs: Vec<(String, String)> = self
            .world
            .violations()
            .into_iter()
            .map(|e| ("world".to_string(), e))
            .collect();
        let mut push = |field: &str, msg: String| errs.push((field.to_string(), msg));
        for (field, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_ood", self.n_ood),
            ("n_pretrain", self.n_pretrain),
            ("hidden", self.hidden),
        ] {
            if n == 0 {
                push(field, "must be >= 1".to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            push("corruption", format!("must lie in [0,1], got {}", self.corruption));
        }
        if self.snapshot_steps.is_empty() {
            push("snapshot_steps", "must be nonempty".to_string());
        }
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            push("snapshot_steps", "must be strictly increasing".to_string());
        }
        if self.snapshot_steps.first() == Some(&0) || self.snapshot_steps.last().is_some_and(|&s| s > self.pretrain.steps) {
            push("snapshot_steps", format!("must lie in [1, {}]", self.pretrain.steps));
        }
        if !(self.pretrain.learning_rate > 0.0) || self.pretrain.batch_size == 0 {
            push("pretrain", "learning_rate must be > 0 and batch_size >= 1".to_string());
        }
        let ft = &self.finetune;
        if ft.learning_rates.is_empty() || ft.learning_rates.iter().any(|&l| !(l > 0.0)) {
            push("finetune.learning_rates", "must be nonempty and positive".to_string());
        }
        if ft.dropouts.is_empty() || ft.dropouts.iter().any(|d| !(0.0..1.0).contains(d)) {
            push("finetune.dropouts", "must be nonempty and lie in [0,1)".to_string());
        }
        if ft.steps == 0 || ft.batch_size == 0 || ft.eval_interval == 0 {
            push("finetune", "steps, batch_size and eval_interval must be >= 1".to_string());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.into_iter().map(|(f, m)| format!("{f}: {m}")).collect();
            Err(WarmError::invalid(msgs.join("; ")))
        }
    }

    /// Generates the world and pretrains the shared featurizer for `seed`.
    pub fn build(&self, seed: u64) -> Result<Lab> {
        self.validate()?;
        let shape = self.shape()?;
        let mut rngs = RngState::new(seed).split_n(7).into_iter();
        let mut next = || rngs.next().expect("seven streams");
        let bank = make_feature_bank(&self.world, &mut next())?;
        let mut train = gen_preference_data(&self.world, &bank, self.n_train, Split::Train, &mut next())?;
        train = corrupt_labels(&train, self.corruption, &mut next())?;
        let val = gen_preference_data(&self.world, &bank, self.n_val, Split::IdVal, &mut next())?;
        let ood = gen_preference_data(&self.world, &bank, self.n_ood, Split::OodTest, &mut next())?;
        let pretrain_data = gen_pretrain_data(&self.world, &bank, self.n_pretrain, self.pretrain_target, &mut next())?;
        let checkpoints = pretrain_trajectory(&pretrain_data, shape, &self.pretrain, &self.snapshot_steps, next())?;

        let mut data = train;
        data.extend(val);
        data.extend(ood);
        // Probed once on the latest snapshot, then shared.
        let probed = linear_probe(checkpoints.last().expect("nonempty"), &data, &self.probe)?;
        let inits = checkpoints
            .iter()
            .map(|c| c.weights.with_head_of(&probed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Lab {
            recipe: self.clone(),
            bank,
            data,
            pretrain_data,
            checkpoints,
            inits,
            seed,
        })
    }
}

impl Lab {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn subset(&self, tag: SubsetTag) -> Vec<PreferencePair> {
        self.data.iter().filter(|p| p.subset_tag == tag).cloned().collect()
    }

    pub fn ood(&self) -> Vec<PreferencePair> {
        self.subset(SubsetTag::OodTest)
    }

    pub fn id_val(&self) -> Vec<PreferencePair> {
        self.subset(SubsetTag::IdVal)
    }

    /// Configuration of the `index`-th member of a pool.
    pub fn member_config(&self, index: usize, diversity: Diversity) -> TrainConfig {
        let ft = &self.recipe.finetune;
        let last = self.inits.len() - 1;
        let data_order_seed = self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1);
        let (lr, dropout, init) = match diversity {
            Diversity::DataOrder => (ft.learning_rates[ft.learning_rates.len() / 2], ft.dropouts[0], last),
            Diversity::Full => (
                ft.learning_rates[index % ft.learning_rates.len()],
                ft.dropouts[(index / ft.learning_rates.len()) % ft.dropouts.len()],
                last - (index % self.inits.len()),
            ),
        };
        TrainConfig {
            learning_rate: lr,
            dropout_p: dropout,
            steps: ft.steps,
            batch_size: ft.batch_size,
            data_order_seed,
            init_checkpoint_id: init,
            probe_mode: ProbeMode::LinearProbe,
            eval_interval: ft.eval_interval,
        }
    }

    pub fn init_for(&self, cfg: &TrainConfig) -> Result<Weights> {
        let base = self
            .inits
            .get(cfg.init_checkpoint_id)
            .ok_or_else(|| WarmError::invalid(format!("no checkpoint {}", cfg.init_checkpoint_id)))?;
        Ok(match cfg.probe_mode {
            ProbeMode::LinearProbe => base.clone(),
            ProbeMode::RandomHead => random_head(base, &mut RngState::new(cfg.data_order_seed ^ 0x4845_4144)),
        })
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<TrainedRm> {
        let init = self.init_for(cfg)?;
        let (weights, log) = train_rm(&init, cfg, &self.data)?;
        let id_val_acc = pairwise_accuracy(&weights, &self.id_val())?;
        Ok(TrainedRm {
            config: cfg.clone(),
            weights,
            log,
            id_val_acc,
        })
    }

    pub fn train_member(&self, index: usize, diversity: Diversity) -> Result<TrainedRm> {
        self.train(&self.member_config(index, diversity))
    }

    pub fn train_pool(&self, m: usize, diversity: Diversity) -> Result<Vec<TrainedRm>> {
        (0..m).map(|i| self.train_member(i, diversity)).collect()
    }
}
