//! Two-stage training: a clean baseline, then robustness finetuning.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationKind, AugmentationSpec};
use crate::autodiff::Graph;
use crate::calibration::eval_accuracy;
use crate::data::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::losses::{task_loss, total_loss, LossConfig, Method};
use crate::model::ModelSnapshot;
use crate::rng::RandomStream;
use crate::schedule::{make_pairs, StrategyConfig, PARITY_RULE};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const FINETUNE_EPOCHS: usize = 30;
pub const FINETUNE_RATE: f64 = 1e-3;
/// Clean accuracy a γ candidate may lose relative to the baseline.
pub const CLEAN_SLACK: f64 = 0.01;

const SHUFFLE_KEY: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStage {
    pub rate: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub schedule: Vec<RateStage>,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub strategy: Option<StrategyConfig>,
    /// Corruptions evaluated on the validation set after every finetune epoch.
    #[serde(default)]
    pub eval_specs: Vec<AugmentationSpec>,
    pub eval_seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Baseline with the three-stage schedule 1e-2, 1e-4, 1e-6 for 20, 10, 10 epochs.
    pub fn default_baseline(seed: u64) -> Self {
        Self::baseline(
            vec![
                RateStage {
                    rate: 1e-2,
                    epochs: 20,
                },
                RateStage {
                    rate: 1e-4,
                    epochs: 10,
                },
                RateStage {
                    rate: 1e-6,
                    epochs: 10,
                },
            ],
            seed,
        )
    }

    pub fn baseline(schedule: Vec<RateStage>, seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Baseline,
            epochs: schedule.iter().map(|s| s.epochs).sum(),
            schedule,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            loss: LossConfig::new(Method::Fma),
            strategy: None,
            eval_specs: Vec::new(),
            eval_seed: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }

    /// 30 epochs at a constant 1e-3.
    pub fn finetune(
        loss: LossConfig,
        strategy: StrategyConfig,
        eval_specs: Vec<AugmentationSpec>,
        seed: u64,
    ) -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: FINETUNE_EPOCHS,
            schedule: vec![RateStage {
                rate: FINETUNE_RATE,
                epochs: FINETUNE_EPOCHS,
            }],
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            loss,
            strategy: Some(strategy),
            eval_specs,
            eval_seed: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }

    /// Replaces the schedule with a single constant rate over `epochs`.
    pub fn with_constant_rate(mut self, rate: f64, epochs: usize) -> Self {
        self.schedule = vec![RateStage { rate, epochs }];
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.schedule.iter().map(|s| s.epochs).sum();
        if total != self.epochs {
            return Err(Error::param(
                "schedule",
                format!("epoch counts sum to {total}, expected {}", self.epochs),
            ));
        }
        if let Some(s) = self
            .schedule
            .iter()
            .find(|s| !(s.rate > 0.0 && s.rate.is_finite()))
        {
            return Err(Error::param(
                "schedule",
                format!("rate {} must be positive", s.rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(
                "momentum",
                format!("{} outside [0, 1)", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        self.loss.validate()?;
        if self.stage == Stage::Finetune && self.strategy.is_none() {
            return Err(Error::contract("finetuning needs a strategy"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based). Epochs past the end keep
    /// the last rate.
    pub fn rate_for_epoch(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for s in &self.schedule {
            end += s.epochs;
            if epoch < end {
                return s.rate;
            }
        }
        self.schedule.last().map_or(0.0, |s| s.rate)
    }
}

/// Classical momentum: `v ← m·v + g`, `θ ← θ − rate·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    rate: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::contract(format!(
            "parameter {:?}, gradient {:?} and velocity {:?} shapes differ",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= rate * *v;
    }
    Ok(())
}

/// Zero-initialized velocity buffers, one per named parameter.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(model: &ModelSnapshot, momentum: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        SgdMomentum { momentum, velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn step(
        &mut self,
        model: &mut ModelSnapshot,
        grads: &BTreeMap<String, Tensor>,
        rate: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let v = self
                .velocity
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no velocity buffer for '{name}'")))?;
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::contract(format!("model has no parameter '{name}'")))?;
            sgd_momentum_step(p, grad, v, rate, self.momentum)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rate: f64,
    /// Augmentation set used for this epoch's pairs (finetuning only).
    pub set: Option<String>,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_regularizer: Option<f64>,
    pub clean_accuracy: f64,
    /// Keyed by augmentation short name.
    pub augmented_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config: TrainConfig,
    pub composition_order: Vec<String>,
    pub parity: String,
    pub train_provenance: Provenance,
    pub val_provenance: Provenance,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned.
    pub selected_epoch: Option<usize>,
    /// Condition name to accuracy, filled in by the grid runner.
    #[serde(default)]
    pub final_grid: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(
        config: &TrainConfig,
        model: &ModelSnapshot,
        train: &LabeledDataset,
        val: &LabeledDataset,
    ) -> Self {
        let mut order: Vec<AugmentationKind> = AugmentationKind::ALL.to_vec();
        order.sort_by_key(|k| k.stage());
        order.dedup_by_key(|k| k.stage());
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            composition_order: order.iter().map(|k| stage_name(*k).to_string()).collect(),
            parity: PARITY_RULE.to_string(),
            train_provenance: train.provenance.clone(),
            val_provenance: val.provenance.clone(),
            parameter_count: model.parameter_count(),
            epochs: Vec::new(),
            selected_epoch: None,
            final_grid: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn stage_name(kind: AugmentationKind) -> &'static str {
    match kind {
        AugmentationKind::BrightnessPlus | AugmentationKind::BrightnessMinus => "brightness",
        AugmentationKind::SaturationPlus | AugmentationKind::SaturationMinus => "saturation",
        AugmentationKind::GaussianBlur => "gaussian_blur",
        AugmentationKind::GaussianNoise => "gaussian_noise",
        AugmentationKind::AdditiveSap => "additive_sap",
    }
}

pub const METRICS_HEADER: &str = "epoch,rate,set,loss_total,loss_task,loss_regularizer,clean";

/// CSV line for one epoch; augmented accuracies follow in key order.
pub fn metrics_csv_row(r: &EpochRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        r.epoch,
        r.rate,
        r.set.as_deref().unwrap_or(""),
        r.loss_total,
        r.loss_task,
        r.loss_regularizer
            .map(|v| v.to_string())
            .unwrap_or_default(),
        r.clean_accuracy
    );
    for v in r.augmented_accuracy.values() {
        row.push_str(&format!(",{v}"));
    }
    row
}

fn metrics_csv_header(r: &EpochRecord) -> String {
    let mut h = METRICS_HEADER.to_string();
    for k in r.augmented_accuracy.keys() {
        h.push(',');
        h.push_str(k);
    }
    h
}

fn append_metrics(dir: &Path, record: &EpochRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let fresh = record.epoch == 0 || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&metrics_csv_header(record));
        text.push('\n');
    }
    text.push_str(&metrics_csv_row(record));
    text.push('\n');
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

fn checkpoint(config: &TrainConfig, model: &ModelSnapshot, epoch: usize) -> Result<()> {
    if let (Some(dir), true) = (&config.out_dir, config.checkpoint_every > 0) {
        if (epoch + 1).is_multiple_of(config.checkpoint_every) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            model.save(&dir.join(format!("epoch_{:03}.snap", epoch + 1)))?;
        }
    }
    Ok(())
}

/// Per-epoch shuffling order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    RandomStream::new(seed)
        .derive(SHUFFLE_KEY)
        .derive(epoch as u64)
        .permutation(n)
}

fn collect_grads(g: &Graph, params: &crate::model::BoundParams) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .map(|(name, id)| {
            let grad = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(id)));
            (name.to_string(), grad)
        })
        .collect()
}

fn images_at<'a>(ds: &'a LabeledDataset, idx: &[usize]) -> Vec<&'a Image> {
    idx.iter().map(|&i| &ds.images()[i]).collect()
}

struct EpochLoss {
    total: f64,
    task: f64,
    reg: Option<f64>,
}

fn baseline_epoch(
    model: &mut ModelSnapshot,
    opt: &mut SgdMomentum,
    train: &LabeledDataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochLoss> {
    let rate = config.rate_for_epoch(epoch);
    let order = epoch_order(config.seed, epoch, train.len());
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in order.chunks(config.batch_size) {
        let batch = batch_tensor(&images_at(train, chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let loss = task_loss(&mut g, model, &params, &batch, &labels)?;
        g.backward(loss)?;
        sum += g.value(loss).item() * chunk.len() as f64;
        count += chunk.len();
        let grads = collect_grads(&g, &params);
        opt.step(model, &grads, rate)?;
    }
    let mean = sum / count.max(1) as f64;
    Ok(EpochLoss {
        total: mean,
        task: mean,
        reg: None,
    })
}

fn finetune_epoch(
    model: &mut ModelSnapshot,
    opt: &mut SgdMomentum,
    train: &LabeledDataset,
    config: &TrainConfig,
    strategy: &StrategyConfig,
    epoch: usize,
) -> Result<EpochLoss> {
    let rate = config.rate_for_epoch(epoch);
    let order = epoch_order(config.seed, epoch, train.len());
    let (mut total, mut task, mut reg, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut has_reg = false;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let set = strategy.select_for_batch(epoch, b);
        let pairs = make_pairs(train, chunk, set, config.seed, epoch)?;
        let clean = batch_tensor(&pairs.clean.iter().collect::<Vec<_>>())?;
        let aug = batch_tensor(&pairs.augmented.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let terms = total_loss(
            &mut g,
            &config.loss,
            model,
            &params,
            &clean,
            &aug,
            &pairs.labels,
        )?;
        g.backward(terms.total)?;
        let w = chunk.len() as f64;
        total += g.value(terms.total).item() * w;
        task += g.value(terms.task).item() * w;
        if let Some(r) = terms.regularizer {
            reg += g.value(r).item() * w;
            has_reg = true;
        }
        count += chunk.len();
        let grads = collect_grads(&g, &params);
        opt.step(model, &grads, rate)?;
    }
    let n = count.max(1) as f64;
    Ok(EpochLoss {
        total: total / n,
        task: task / n,
        reg: has_reg.then_some(reg / n),
    })
}

/// Observer called after every epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains on clean data only and returns the snapshot with the best
/// validation accuracy.
pub fn train_baseline(
    model: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelSnapshot, RunManifest)> {
    train_baseline_with(model, train, val, config, &mut |_| {})
}

pub fn train_baseline_with(
    model: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<(ModelSnapshot, RunManifest)> {
    config.validate()?;
    if config.stage != Stage::Baseline {
        return Err(Error::contract(
            "train_baseline needs a baseline-stage config",
        ));
    }
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut manifest = RunManifest::new(config, model, train, val);
    let mut current = model.clone();
    let mut opt = SgdMomentum::new(&current, config.momentum);
    let mut best: Option<(f64, ModelSnapshot, usize)> = None;
    for epoch in 0..config.epochs {
        let loss = baseline_epoch(&mut current, &mut opt, train, config, epoch)?;
        current.meta.epoch = epoch + 1;
        current.meta.seed = config.seed;
        let acc = eval_accuracy(&current, val, None, config.eval_seed)?;
        let record = EpochRecord {
            epoch,
            rate: config.rate_for_epoch(epoch),
            set: None,
            loss_total: loss.total,
            loss_task: loss.task,
            loss_regularizer: None,
            clean_accuracy: acc,
            augmented_accuracy: BTreeMap::new(),
        };
        if let Some(dir) = &config.out_dir {
            append_metrics(dir, &record)?;
        }
        checkpoint(config, &current, epoch)?;
        hook(&record);
        manifest.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, current.clone(), epoch));
        }
    }
    let (snapshot, selected) = match best {
        Some((_, s, e)) => (s, Some(e)),
        None => (current, None),
    };
    manifest.selected_epoch = selected;
    Ok((snapshot, manifest))
}

/// Augmented validation accuracy per spec, keyed by short name.
pub fn augmented_accuracies(
    model: &ModelSnapshot,
    val: &LabeledDataset,
    specs: &[AugmentationSpec],
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    specs
        .iter()
        .map(|s| {
            Ok((
                s.kind().short().to_string(),
                eval_accuracy(model, val, Some(s), seed)?,
            ))
        })
        .collect()
}

/// Finetunes with the configured method and strategy; returns the
/// final-epoch snapshot.
pub fn finetune(
    model: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelSnapshot, RunManifest)> {
    finetune_with(model, train, val, config, &mut |_| {})
}

pub fn finetune_with(
    model: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<(ModelSnapshot, RunManifest)> {
    config.validate()?;
    if config.stage != Stage::Finetune {
        return Err(Error::contract("finetune needs a finetune-stage config"));
    }
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let strategy = config.strategy.as_ref().expect("validated");
    let mut manifest = RunManifest::new(config, model, train, val);
    let mut current = model.clone();
    let mut opt = SgdMomentum::new(&current, config.momentum);
    for epoch in 0..config.epochs {
        let loss = finetune_epoch(&mut current, &mut opt, train, config, strategy, epoch)?;
        current.meta.epoch = epoch + 1;
        current.meta.seed = config.seed;
        let record = EpochRecord {
            epoch,
            rate: config.rate_for_epoch(epoch),
            set: Some(strategy.select_set(epoch).name().to_string()),
            loss_total: loss.total,
            loss_task: loss.task,
            loss_regularizer: loss.reg,
            clean_accuracy: eval_accuracy(&current, val, None, config.eval_seed)?,
            augmented_accuracy: augmented_accuracies(
                &current,
                val,
                &config.eval_specs,
                config.eval_seed,
            )?,
        };
        if let Some(dir) = &config.out_dir {
            append_metrics(dir, &record)?;
        }
        checkpoint(config, &current, epoch)?;
        hook(&record);
        manifest.epochs.push(record);
    }
    manifest.selected_epoch = config.epochs.checked_sub(1);
    Ok((current, manifest))
}

/// Loss terms of `config.loss` on one fixed batch, without training.
pub fn evaluate_loss(
    model: &ModelSnapshot,
    config: &LossConfig,
    clean: &[&Image],
    augmented: &[&Image],
    labels: &[usize],
) -> Result<(f64, f64, Option<f64>)> {
    let c = batch_tensor(clean)?;
    let a = batch_tensor(augmented)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let terms = total_loss(&mut g, config, model, &params, &c, &a, labels)?;
    Ok((
        g.value(terms.total).item(),
        g.value(terms.task).item(),
        terms.regularizer.map(|r| g.value(r).item()),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub clean_accuracy: f64,
    pub mean_augmented_accuracy: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSearch {
    pub best: f64,
    pub table: Vec<GammaRow>,
    /// No grid point kept clean accuracy within the allowed slack.
    pub constraint_violated: bool,
}

/// Short finetune per grid point. The weight searched is γ for FMA and the
/// ST weight for ST. Picks the highest mean augmented accuracy among points
/// whose clean accuracy stays within 1% of `baseline_clean`; if none does,
/// falls back to the mean of clean and augmented accuracy.
pub fn grid_search_gamma(
    model: &ModelSnapshot,
    train: &LabeledDataset,
    val: &LabeledDataset,
    grid: &[f64],
    config: &TrainConfig,
    baseline_clean: f64,
) -> Result<GammaSearch> {
    if grid.is_empty() {
        return Err(Error::contract("gamma grid is empty"));
    }
    if config.eval_specs.is_empty() {
        return Err(Error::contract(
            "gamma search needs at least one evaluation augmentation",
        ));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let mut cfg = config.clone();
        cfg.out_dir = None;
        match cfg.loss.method {
            Method::St => cfg.loss.st_weight = gamma,
            _ => cfg.loss.gamma = gamma,
        }
        let (tuned, _) = finetune(model, train, val, &cfg)?;
        let clean = eval_accuracy(&tuned, val, None, cfg.eval_seed)?;
        let aug = augmented_accuracies(&tuned, val, &cfg.eval_specs, cfg.eval_seed)?;
        let mean = aug.values().sum::<f64>() / aug.len() as f64;
        table.push(GammaRow {
            gamma,
            clean_accuracy: clean,
            mean_augmented_accuracy: mean,
            feasible: clean >= baseline_clean - CLEAN_SLACK,
        });
    }
    let pick = |score: &dyn Fn(&GammaRow) -> f64, rows: &mut dyn Iterator<Item = &GammaRow>| {
        rows.fold(None::<&GammaRow>, |best, r| match best {
            Some(b) if score(b) >= score(r) => Some(b),
            _ => Some(r),
        })
        .map(|r| r.gamma)
    };
    let feasible = pick(
        &|r| r.mean_augmented_accuracy,
        &mut table.iter().filter(|r| r.feasible),
    );
    let (best, violated) = match feasible {
        Some(g) => (g, false),
        None => (
            pick(
                &|r| 0.5 * (r.clean_accuracy + r.mean_augmented_accuracy),
                &mut table.iter(),
            )
            .expect("grid nonempty"),
            true,
        ),
    };
    Ok(GammaSearch {
        best,
        table,
        constraint_violated: violated,
    })
}
