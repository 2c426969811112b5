//! Training strategies: two baselines and three ways of transferring
//! morphological-change evidence into the detector.
//!
//! * `random` / `pretrained`: detection loss only, from a seeded or a
//!   checkpoint-initialized encoder.
//! * `eap`: severity prediction first, then detection from the same encoder.
//! * `eat`: detection and severity losses minimized jointly, `L_AD + λ L_MC`.
//! * `eai`: a severity model's encoder feeds its features next to a fresh
//!   encoder's, and both are fine-tuned on the detection loss.
//!
//! Every strategy reads the same split and the same training subset for a
//! given data set and seed; only the optimization differs.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    mask_to_k_regions, region_channels, split_dataset, stratified_subset, AtlasConfig, Case,
    DatasetSplit, Diagnosis, MCLabelSet,
};
use crate::error::{Error, Result};
use crate::eval::metrics::{mc_accuracy, MetricsReport};
use crate::labeler::{LabelerConfig, ThresholdTable};
use crate::model::checkpoint;
use crate::model::optim::{AdamConfig, OneCycle, Optimizer};
use crate::model::{
    predict_batch, AuxMode, EncoderConfig, ModelConfig, ModelParameters, Objective, Sample,
};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "random")]
    BaselineRandom,
    #[serde(rename = "pretrained")]
    BaselinePretrained,
    #[serde(rename = "eap")]
    Eap,
    #[serde(rename = "eat")]
    Eat,
    #[serde(rename = "eai")]
    Eai,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::BaselineRandom,
        Strategy::BaselinePretrained,
        Strategy::Eap,
        Strategy::Eat,
        Strategy::Eai,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::BaselineRandom => "random",
            Strategy::BaselinePretrained => "pretrained",
            Strategy::Eap => "eap",
            Strategy::Eat => "eat",
            Strategy::Eai => "eai",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            Strategy::BaselineRandom | Strategy::BaselinePretrained
        )
    }

    pub fn needs_labels(self) -> bool {
        !self.is_baseline()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::BaselineRandom => "Baseline-Random",
            Strategy::BaselinePretrained => "Baseline-Pretrained",
            Strategy::Eap => "EaP",
            Strategy::Eat => "EaT",
            Strategy::Eai => "EaI",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase() || st.to_string() == s)
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "unknown strategy {s:?}; expected one of random, pretrained, eap, eat, eai"
                )])
            })
    }
}

/// How a case becomes model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Single channel, voxels outside the K relevant regions zeroed.
    #[default]
    Masked,
    /// Single channel, whole volume.
    Original,
    /// One channel per relevant region.
    Channels,
}

/// Which cases the severity-prediction phases train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPool {
    /// The detection training subset.
    #[default]
    Train,
    /// The detection training subset plus the MCI cases.
    TrainAndMci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lambda_mc: f64,
    /// Epochs of the detection phase.
    pub epochs: usize,
    /// Epochs of the severity phase (EaP phase 1, EaI stage 1); `None` means
    /// the same as `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub seed: u64,
    pub data_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub encoder: String,
    pub input: InputMode,
    pub mc_pool: McPool,
    /// EaI: keep the evidence encoder fixed during stage 2.
    pub freeze_aux: bool,
    /// EaI ablation: replace the evidence features with zeros.
    pub zero_aux: bool,
    /// Checkpoint whose encoder initializes `pretrained` runs.
    pub init_from: Option<PathBuf>,
}

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::BaselineRandom,
            lambda_mc: 1.0,
            epochs: 10,
            pretrain_epochs: None,
            seed: 0,
            data_fraction: 1.0,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            encoder: "cnn3".into(),
            input: InputMode::Masked,
            mc_pool: McPool::Train,
            freeze_aux: false,
            zero_aux: false,
            init_from: None,
        }
    }
}

/// Epochs and base learning rate of the desk-scale protocol: enough for the
/// random-init baseline to converge on the default phantom.
pub const DESK_EPOCHS: usize = 20;
pub const DESK_LEARNING_RATE: f64 = 1e-3;

impl TrainConfig {
    /// The desk-scale protocol for one strategy and seed.
    pub fn desk(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            epochs: DESK_EPOCHS,
            learning_rate: DESK_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }

    /// Every violated invariant, by field name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda_mc >= 0.0 && self.lambda_mc.is_finite()) {
            out.push(format!(
                "lambda_mc: {} must be a finite value >= 0",
                self.lambda_mc
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            out.push(format!(
                "data_fraction: {} must lie in (0, 1]",
                self.data_fraction
            ));
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "learning_rate: {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if EncoderConfig::named(&self.encoder).is_none() {
            out.push(format!(
                "encoder: unknown variant {:?} (cnn3, cnn3-wide, cnn4-deep)",
                self.encoder
            ));
        }
        if self.strategy == Strategy::BaselinePretrained && self.init_from.is_none() {
            out.push("init_from: required by the pretrained strategy".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// A case reduced to what training needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub diagnosis: Diagnosis,
    pub input: Vec<f32>,
    /// Severity classes in atlas order.
    pub mc: Option<Vec<usize>>,
}

/// Turns a case into model input.
pub fn prepare_input(case: &Case, atlas: &AtlasConfig, mode: InputMode) -> Result<Vec<f32>> {
    match mode {
        InputMode::Masked => Ok(mask_to_k_regions(case, atlas)?.into_data()),
        InputMode::Original => Ok(case.volume.data().to_vec()),
        InputMode::Channels => Ok(region_channels(case, atlas)?.concat()),
    }
}

pub fn input_channels(atlas: &AtlasConfig, mode: InputMode) -> usize {
    match mode {
        InputMode::Channels => atlas.k(),
        _ => 1,
    }
}

/// Fits thresholds on the training split plus all MCI cases and labels every case.
pub fn evidence_labels(
    cases: &[Case],
    atlas: &AtlasConfig,
    split: &DatasetSplit,
    config: LabelerConfig,
) -> Result<(ThresholdTable, BTreeMap<String, MCLabelSet>)> {
    let train: std::collections::BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let pool: Vec<Case> = cases
        .iter()
        .filter(|c| c.diagnosis == Diagnosis::MCI || train.contains(c.id.as_str()))
        .cloned()
        .collect();
    let table = ThresholdTable::fit(&pool, atlas, config)?;
    let labels = table.label_cases(cases, atlas)?;
    Ok((table, labels))
}

/// Prepared inputs, labels and the split for one data set.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub atlas: AtlasConfig,
    pub grid: [usize; 3],
    pub input_mode: InputMode,
    pub split: DatasetSplit,
    pub mci: Vec<String>,
    examples: Vec<Example>,
    index: BTreeMap<String, usize>,
}

impl TrainingData {
    pub fn prepare(
        cases: &[Case],
        atlas: &AtlasConfig,
        labels: Option<&BTreeMap<String, MCLabelSet>>,
        split_seed: u64,
        input_mode: InputMode,
    ) -> Result<Self> {
        let split = split_dataset(cases, split_seed)?;
        Self::with_split(cases, atlas, labels, split, input_mode)
    }

    pub fn with_split(
        cases: &[Case],
        atlas: &AtlasConfig,
        labels: Option<&BTreeMap<String, MCLabelSet>>,
        split: DatasetSplit,
        input_mode: InputMode,
    ) -> Result<Self> {
        let grid = cases
            .first()
            .map(|c| c.volume.shape())
            .ok_or_else(|| Error::InsufficientData("no cases".into()))?;
        let examples: Vec<Example> = cases
            .par_iter()
            .map(|c| {
                if c.volume.shape() != grid {
                    return Err(Error::Shape {
                        expected: grid.to_vec(),
                        actual: c.volume.shape().to_vec(),
                    });
                }
                let mc = match labels.and_then(|l| l.get(&c.id)) {
                    Some(set) => Some(set.class_indices(atlas)?),
                    None => None,
                };
                Ok(Example {
                    id: c.id.clone(),
                    diagnosis: c.diagnosis,
                    input: prepare_input(c, atlas, input_mode)?,
                    mc,
                })
            })
            .collect::<Result<_>>()?;
        let mut index = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::InvalidCase {
                    id: e.id.clone(),
                    reason: "duplicate case id".into(),
                });
            }
        }
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if !index.contains_key(id) {
                return Err(Error::InvalidCase {
                    id: id.clone(),
                    reason: "split refers to an unknown case".into(),
                });
            }
        }
        let mci = examples
            .iter()
            .filter(|e| e.diagnosis == Diagnosis::MCI)
            .map(|e| e.id.clone())
            .collect();
        Ok(Self {
            atlas: atlas.clone(),
            grid,
            input_mode,
            split,
            mci,
            examples,
            index,
        })
    }

    pub fn example(&self, id: &str) -> Result<&Example> {
        self.index
            .get(id)
            .map(|&i| &self.examples[i])
            .ok_or_else(|| Error::InvalidCase {
                id: id.to_string(),
                reason: "not in the data set".into(),
            })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn in_channels(&self) -> usize {
        input_channels(&self.atlas, self.input_mode)
    }

    /// Nested stratified subset of the training split.
    pub fn train_subset(&self, fraction: f64) -> Result<Vec<String>> {
        stratified_subset(
            &self.split.train,
            |id| self.example(id).ok().map(|e| e.diagnosis),
            fraction,
            self.split.seed,
        )
    }

    pub fn has_labels(&self, ids: &[String]) -> bool {
        ids.iter()
            .all(|id| self.example(id).is_ok_and(|e| e.mc.is_some()))
    }

    /// Detection scores (`p(AD)`) and truths for `ids`.
    pub fn score(&self, model: &ModelParameters, ids: &[String]) -> Result<(Vec<f64>, Vec<usize>)> {
        let exs: Vec<&Example> = ids
            .iter()
            .map(|id| self.example(id))
            .collect::<Result<_>>()?;
        let inputs: Vec<&[f32]> = exs.iter().map(|e| e.input.as_slice()).collect();
        let preds = predict_batch(model, &inputs)?;
        let truths = exs
            .iter()
            .map(|e| {
                e.diagnosis
                    .detection_class()
                    .ok_or_else(|| Error::Label(format!("{} is not an AD/NC case", e.id)))
            })
            .collect::<Result<_>>()?;
        Ok((preds.iter().map(|p| p.prob_ad()).collect(), truths))
    }

    pub fn evaluate(&self, model: &ModelParameters, ids: &[String]) -> Result<MetricsReport> {
        let (scores, truths) = self.score(model, ids)?;
        MetricsReport::from_scores(&scores, &truths)
    }

    /// Mean per-region severity accuracy on `ids`.
    pub fn evaluate_mc(&self, model: &ModelParameters, ids: &[String]) -> Result<f64> {
        let exs: Vec<&Example> = ids
            .iter()
            .map(|id| self.example(id))
            .collect::<Result<_>>()?;
        let labels: Vec<Vec<usize>> = exs
            .iter()
            .map(|e| {
                e.mc.clone()
                    .ok_or_else(|| Error::Label(format!("no severity labels for {}", e.id)))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<&[f32]> = exs.iter().map(|e| e.input.as_slice()).collect();
        let preds = predict_batch(model, &inputs)?;
        let dists: Vec<Vec<[f64; 3]>> = preds.into_iter().map(|p| p.mc).collect();
        mc_accuracy(&dists, &labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ad: f64,
    pub loss_mc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_auroc: Option<f64>,
    pub val_mc_accuracy: Option<f64>,
}

/// Optimizer settings beyond the learning rate, echoed into every manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub adam: AdamConfig,
    pub peak_factor: f64,
    pub warmup_frac: f64,
    pub final_div: f64,
}

impl OptimizerSettings {
    fn of(s: &OneCycle, adam: AdamConfig) -> Self {
        Self {
            adam,
            peak_factor: s.peak_factor,
            warmup_frac: s.warmup_frac,
            final_div: s.final_div,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    pub val_mc_accuracy: Option<f64>,
    pub test_mc_accuracy: Option<f64>,
    /// Detection epoch whose parameters were kept (1-based; `None` = initial).
    pub selected_epoch: Option<usize>,
}

/// Paths of the inputs a run read, filled in by the command-line driver.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunInputs {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub n_params: usize,
    pub optimizer: OptimizerSettings,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_mc_pool: usize,
    pub inputs: RunInputs,
    pub metrics: RunMetrics,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// Losses of every logged step, in order.
    pub fn loss_trajectory(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParameters,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selection {
    BestValAuroc,
    Last,
}

struct Phase<'a> {
    name: &'static str,
    objective: Objective,
    epochs: usize,
    ids: &'a [String],
    selection: Selection,
    frozen: Vec<Range<usize>>,
}

#[derive(Default)]
struct RunLog {
    epochs: Vec<EpochLog>,
    steps: Vec<StepLog>,
    selected_epoch: Option<usize>,
    optimizer: Option<OptimizerSettings>,
}

fn run_phase(
    model: &mut ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    phase: Phase<'_>,
    log: &mut RunLog,
) -> Result<()> {
    let exs: Vec<&Example> = phase
        .ids
        .iter()
        .map(|id| data.example(id))
        .collect::<Result<_>>()?;
    if exs.is_empty() && phase.epochs > 0 {
        return Err(Error::InsufficientData(format!(
            "no cases for phase {}",
            phase.name
        )));
    }
    let batches_per_epoch = exs.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.learning_rate, phase.epochs * batches_per_epoch);
    let mut opt = Optimizer::new(model.len(), schedule);
    for r in &phase.frozen {
        opt.freeze(r.clone());
    }
    log.optimizer = Some(OptimizerSettings::of(&schedule, opt.adam));
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let detecting = !matches!(phase.objective, Objective::Mc);

    for epoch in 1..=phase.epochs {
        let mut order: Vec<usize> = (0..exs.len()).collect();
        order.shuffle(&mut rng_for(
            cfg.seed,
            &format!("shuffle/{}/{epoch}", phase.name),
        ));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| Sample {
                    input: &exs[i].input,
                    class: exs[i].diagnosis.detection_class(),
                    mc: exs[i].mc.as_deref(),
                })
                .collect();
            let step = opt.state.step;
            let lr = opt.schedule.lr(step);
            let loss = crate::model::optim::train_step(model, &mut opt, &batch, phase.objective)?;
            loss_sum += loss.total;
            log.steps.push(StepLog {
                phase: phase.name.into(),
                epoch,
                step,
                lr,
                loss: loss.total,
                loss_ad: loss.ad,
                loss_mc: loss.mc,
            });
        }
        let mut entry = EpochLog {
            phase: phase.name.into(),
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            val_accuracy: None,
            val_auroc: None,
            val_mc_accuracy: None,
        };
        if detecting {
            let report = data.evaluate(model, &data.split.val)?;
            entry.val_accuracy = Some(report.accuracy);
            entry.val_auroc = report.auroc;
            if phase.selection == Selection::BestValAuroc {
                let score = report.auroc.unwrap_or(report.accuracy);
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, epoch, model.values.clone()));
                }
            }
        } else if data.has_labels(&data.split.val) {
            entry.val_mc_accuracy = Some(data.evaluate_mc(model, &data.split.val)?);
        }
        info!(
            "{} epoch {epoch}/{}: loss {:.4} val acc {:?} auroc {:?} mc {:?}",
            phase.name,
            phase.epochs,
            entry.mean_loss,
            entry.val_accuracy,
            entry.val_auroc,
            entry.val_mc_accuracy
        );
        log.epochs.push(entry);
    }
    if detecting {
        log.selected_epoch = match (phase.selection, best) {
            (Selection::BestValAuroc, Some((_, epoch, values))) => {
                model.values = values;
                Some(epoch)
            }
            (Selection::Last, _) if phase.epochs > 0 => Some(phase.epochs),
            _ => None,
        };
    }
    Ok(())
}

fn base_model_config(data: &TrainingData, cfg: &TrainConfig) -> Result<ModelConfig> {
    let mut enc = EncoderConfig::named(&cfg.encoder).ok_or_else(|| {
        Error::Config(vec![format!("encoder: unknown variant {:?}", cfg.encoder)])
    })?;
    enc.in_channels = data.in_channels();
    Ok(ModelConfig::detection(data.grid, enc))
}

fn mc_pool(data: &TrainingData, cfg: &TrainConfig, train: &[String]) -> Vec<String> {
    let mut ids = train.to_vec();
    if cfg.mc_pool == McPool::TrainAndMci {
        ids.extend(data.mci.iter().cloned());
    }
    ids
}

fn require_labels(data: &TrainingData, ids: &[String], what: &str) -> Result<()> {
    if data.has_labels(ids) {
        Ok(())
    } else {
        Err(Error::Label(format!(
            "{what} needs severity labels for every training case"
        )))
    }
}

/// Severity-prediction phase shared by EaP and EaI.
fn evidence_phase(
    data: &TrainingData,
    cfg: &TrainConfig,
    pool: &[String],
    log: &mut RunLog,
) -> Result<ModelParameters> {
    require_labels(data, pool, "severity pretraining")?;
    let mc_cfg = base_model_config(data, cfg)?.with_mc_heads(data.atlas.k());
    let mut model = ModelParameters::init(mc_cfg, cfg.seed)?;
    run_phase(
        &mut model,
        data,
        cfg,
        Phase {
            name: "evidence",
            objective: Objective::Mc,
            epochs: cfg.pretrain_epochs(),
            ids: pool,
            selection: Selection::Last,
            frozen: vec![],
        },
        log,
    )?;
    Ok(model)
}

fn detect_phase(
    model: &mut ModelParameters,
    data: &TrainingData,
    cfg: &TrainConfig,
    objective: Objective,
    train: &[String],
    frozen: Vec<Range<usize>>,
    log: &mut RunLog,
) -> Result<()> {
    run_phase(
        model,
        data,
        cfg,
        Phase {
            name: "detect",
            objective,
            epochs: cfg.epochs,
            ids: train,
            selection: Selection::BestValAuroc,
            frozen,
        },
        log,
    )
}

/// Trains `cfg.strategy` on `data` and scores the selected model on the
/// validation and test splits.
pub fn train(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let start = Instant::now();
    let train_ids = data.train_subset(cfg.data_fraction)?;
    let base = base_model_config(data, cfg)?;
    let mut log = RunLog::default();
    let mut n_mc_pool = 0;
    info!(
        "training {} (seed {}, fraction {}, {} cases)",
        cfg.strategy,
        cfg.seed,
        cfg.data_fraction,
        train_ids.len()
    );

    let params = match cfg.strategy {
        Strategy::BaselineRandom => {
            let mut m = ModelParameters::init(base, cfg.seed)?;
            detect_phase(
                &mut m,
                data,
                cfg,
                Objective::Ad,
                &train_ids,
                vec![],
                &mut log,
            )?;
            m
        }
        Strategy::BaselinePretrained => {
            let path = cfg.init_from.as_ref().ok_or_else(|| {
                Error::Config(vec!["init_from: required by the pretrained strategy".into()])
            })?;
            let source = checkpoint::load(path)?;
            let mut m = ModelParameters::init(base, cfg.seed)?;
            m.load_encoder_from(&source.params)?;
            detect_phase(
                &mut m,
                data,
                cfg,
                Objective::Ad,
                &train_ids,
                vec![],
                &mut log,
            )?;
            m
        }
        Strategy::Eap => {
            let pool = mc_pool(data, cfg, &train_ids);
            n_mc_pool = pool.len();
            let evidence = evidence_phase(data, cfg, &pool, &mut log)?;
            let mut m = ModelParameters::init(base, cfg.seed)?;
            m.load_encoder_from(&evidence)?;
            detect_phase(
                &mut m,
                data,
                cfg,
                Objective::Ad,
                &train_ids,
                vec![],
                &mut log,
            )?;
            m
        }
        Strategy::Eat => {
            require_labels(data, &train_ids, "EaT")?;
            n_mc_pool = train_ids.len();
            let mut m = ModelParameters::init(base.with_mc_heads(data.atlas.k()), cfg.seed)?;
            let objective = Objective::Joint {
                lambda: cfg.lambda_mc,
            };
            detect_phase(&mut m, data, cfg, objective, &train_ids, vec![], &mut log)?;
            m
        }
        Strategy::Eai => {
            let mode = if cfg.zero_aux {
                AuxMode::Zeroed
            } else if cfg.freeze_aux {
                AuxMode::Frozen
            } else {
                AuxMode::Trainable
            };
            let mut m = ModelParameters::init(base.with_aux(mode), cfg.seed)?;
            if mode != AuxMode::Zeroed {
                let pool = mc_pool(data, cfg, &train_ids);
                n_mc_pool = pool.len();
                let evidence = evidence_phase(data, cfg, &pool, &mut log)?;
                m.load_aux_encoder_from(&evidence)?;
            }
            let frozen = match mode {
                AuxMode::Frozen => m.layout().aux_encoder.clone().into_iter().collect(),
                _ => vec![],
            };
            detect_phase(
                &mut m,
                data,
                cfg,
                Objective::EaiJoint,
                &train_ids,
                frozen,
                &mut log,
            )?;
            m
        }
    };

    let mut val = data.evaluate(&params, &data.split.val)?;
    let mut test = data.evaluate(&params, &data.split.test)?;
    for r in [&mut val, &mut test] {
        r.strategy = Some(cfg.strategy.name().into());
        r.seed = Some(cfg.seed);
    }
    let with_heads = params.config().mc_heads > 0;
    let mc_on = |ids: &[String]| -> Result<Option<f64>> {
        if with_heads && data.has_labels(ids) {
            data.evaluate_mc(&params, ids).map(Some)
        } else {
            Ok(None)
        }
    };
    let metrics = RunMetrics {
        val: Some(val),
        test: Some(test),
        val_mc_accuracy: mc_on(&data.split.val)?,
        test_mc_accuracy: mc_on(&data.split.test)?,
        selected_epoch: log.selected_epoch,
    };
    let manifest = manifest(
        data,
        cfg,
        &params,
        train_ids.len(),
        n_mc_pool,
        metrics,
        log,
        start,
    );
    Ok(TrainedModel { params, manifest })
}

#[allow(clippy::too_many_arguments)]
fn manifest(
    data: &TrainingData,
    cfg: &TrainConfig,
    params: &ModelParameters,
    n_train: usize,
    n_mc_pool: usize,
    metrics: RunMetrics,
    log: RunLog,
    start: Instant,
) -> RunManifest {
    let fallback = OneCycle::new(cfg.learning_rate, 0);
    RunManifest {
        tool_version: concat!("evidx-core ", env!("CARGO_PKG_VERSION")).into(),
        config: cfg.clone(),
        model: params.config().clone(),
        n_params: params.len(),
        optimizer: log
            .optimizer
            .unwrap_or_else(|| OptimizerSettings::of(&fallback, AdamConfig::default())),
        split_seed: data.split.seed,
        n_train,
        n_mc_pool,
        inputs: RunInputs::default(),
        metrics,
        epochs: log.epochs,
        steps: log.steps,
        checkpoints: vec![],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    }
}

pub fn train_baseline(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedModel> {
    if !cfg.strategy.is_baseline() {
        return Err(Error::Config(vec![format!(
            "strategy: {} is not a baseline",
            cfg.strategy
        )]));
    }
    train(data, cfg)
}

pub fn train_eap(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(
        data,
        &TrainConfig {
            strategy: Strategy::Eap,
            ..cfg.clone()
        },
    )
}

pub fn train_eat(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(
        data,
        &TrainConfig {
            strategy: Strategy::Eat,
            ..cfg.clone()
        },
    )
}

pub fn train_eai(data: &TrainingData, cfg: &TrainConfig) -> Result<TrainedModel> {
    train(
        data,
        &TrainConfig {
            strategy: Strategy::Eai,
            ..cfg.clone()
        },
    )
}

/// Severity prediction alone; returns the model, its manifest and the mean
/// per-region validation accuracy.
pub fn train_mc_model(
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, RunManifest, f64)> {
    cfg.validate()?;
    let start = Instant::now();
    let train_ids = data.train_subset(cfg.data_fraction)?;
    let pool = mc_pool(data, cfg, &train_ids);
    let mut log = RunLog::default();
    let model = evidence_phase(data, cfg, &pool, &mut log)?;
    let val_acc = data.evaluate_mc(&model, &data.split.val)?;
    let metrics = RunMetrics {
        val: None,
        test: None,
        val_mc_accuracy: Some(val_acc),
        test_mc_accuracy: data
            .has_labels(&data.split.test)
            .then(|| data.evaluate_mc(&model, &data.split.test))
            .transpose()?,
        selected_epoch: None,
    };
    let manifest = manifest(
        data,
        cfg,
        &model,
        train_ids.len(),
        pool.len(),
        metrics,
        log,
        start,
    );
    Ok((model, manifest, val_acc))
}
