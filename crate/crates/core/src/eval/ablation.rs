use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::RegressionNorm;
use crate::parallel::parallel_map;
use crate::provenance::{derive_seed, sha256_hex};
use crate::recipe::encode;
use crate::synth::{CropConfig, DatasetManifest, Sample, FEATURE_REGIONS};
use crate::trainer::{
    prepare_input, train_prepared, Architecture, Example, HeadKind, InputSpec, Schedule, TargetSpec,
    TrainConfig, TrainedModel, TransferMode,
};

use super::{baseline_predictor, inaccuracy_vs_baseline, mean_l1, EvalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFactor {
    Complete,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFactor {
    FullFrame,
    Crop,
}

/// One combination of the three binary factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellFactors {
    pub loss: LossFactor,
    pub input: InputFactor,
    pub mode: TransferMode,
}

impl CellFactors {
    pub const fn new(loss: LossFactor, input: InputFactor, mode: TransferMode) -> Self {
        Self { loss, input, mode }
    }

    /// All eight cells.
    pub fn grid() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for loss in [LossFactor::Complete, LossFactor::Local] {
            for input in [InputFactor::FullFrame, InputFactor::Crop] {
                for mode in [TransferMode::FeatureExtraction, TransferMode::FineTuning] {
                    out.push(Self::new(loss, input, mode));
                }
            }
        }
        out
    }
}

fn loss_name(l: LossFactor) -> &'static str {
    match l {
        LossFactor::Complete => "complete",
        LossFactor::Local => "local",
    }
}

fn input_name(i: InputFactor) -> &'static str {
    match i {
        InputFactor::FullFrame => "full_frame",
        InputFactor::Crop => "crop",
    }
}

fn mode_name(m: TransferMode) -> &'static str {
    match m {
        TransferMode::FeatureExtraction => "feature_extraction",
        TransferMode::FineTuning => "fine_tuning",
    }
}

/// Grid, data split and the training setup shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub regions: Vec<String>,
    pub cells: Vec<CellFactors>,
    pub seeds: Vec<u64>,
    /// Fraction of the dataset held out for evaluation.
    pub eval_fraction: f64,
    pub split_seed: u64,
    pub architecture: Architecture,
    pub feature_extraction: Schedule,
    pub fine_tuning: Schedule,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub regression_norm: RegressionNorm,
    pub head: HeadKind,
    /// Rate-of-change weighting of the loss terms; off when absent.
    pub adaptive_temperature: Option<f64>,
    pub frame: CropConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let base = TrainConfig::new(
            TransferMode::FeatureExtraction,
            InputSpec::FullFrame,
            TargetSpec::Complete,
            HeadKind::Joint,
        );
        Self {
            regions: FEATURE_REGIONS.iter().map(|r| r.to_string()).collect(),
            cells: CellFactors::grid(),
            seeds: vec![0],
            eval_fraction: 0.2,
            split_seed: 0,
            architecture: base.architecture,
            feature_extraction: Schedule::default(),
            fine_tuning: Schedule::fine_tuning(),
            batch_size: base.batch_size,
            holdout_fraction: base.holdout_fraction,
            regression_norm: base.regression_norm,
            head: HeadKind::Joint,
            adaptive_temperature: None,
            frame: base.frame,
        }
    }
}

/// Identity of a trained model in the grid. Full-frame models with the
/// complete loss do not depend on the region and are shared.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKey {
    pub input: InputSpec,
    pub target: TargetSpec,
    pub mode: TransferMode,
    pub seed: u64,
}

impl ModelKey {
    pub fn for_cell(region: &str, cell: CellFactors, seed: u64) -> Self {
        Self {
            input: match cell.input {
                InputFactor::FullFrame => InputSpec::FullFrame,
                InputFactor::Crop => InputSpec::Crop(region.to_string()),
            },
            target: match cell.loss {
                LossFactor::Complete => TargetSpec::Complete,
                LossFactor::Local => TargetSpec::Local(region.to_string()),
            },
            mode: cell.mode,
            seed,
        }
    }

    /// File-name friendly identifier.
    pub fn id(&self) -> String {
        let input = match &self.input {
            InputSpec::FullFrame => "full".to_string(),
            InputSpec::Crop(r) => format!("crop_{r}"),
        };
        let target = match &self.target {
            TargetSpec::Complete => "complete".to_string(),
            TargetSpec::Local(r) => format!("local_{r}"),
        };
        let mode = match self.mode {
            TransferMode::FeatureExtraction => "fe",
            TransferMode::FineTuning => "ft",
        };
        format!("{input}-{target}-{mode}-s{}", self.seed)
    }

    fn init_key(&self) -> Option<Self> {
        (self.mode == TransferMode::FineTuning).then(|| Self {
            mode: TransferMode::FeatureExtraction,
            ..self.clone()
        })
    }
}

impl AblationConfig {
    pub fn train_config(&self, key: &ModelKey) -> TrainConfig {
        let mut c = TrainConfig::new(key.mode, key.input.clone(), key.target.clone(), self.head);
        c.architecture = self.architecture.clone();
        c.schedule = match key.mode {
            TransferMode::FeatureExtraction => self.feature_extraction.clone(),
            TransferMode::FineTuning => self.fine_tuning.clone(),
        };
        c.batch_size = self.batch_size;
        c.seed = key.seed;
        c.holdout_fraction = self.holdout_fraction;
        c.regression_norm = self.regression_norm;
        c.adaptive_temperature = self.adaptive_temperature;
        c.frame = self.frame.clone();
        c
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes"))
    }

    /// Sorted train and eval indices of the seeded split.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
        if n < 2 {
            return Err(EvalError::Shape(format!("cannot split {n} samples")));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(EvalError::Shape(format!("eval fraction {} not in (0, 1)", self.eval_fraction)));
        }
        let k = ((self.eval_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed("ablation-split", &[self.split_seed])));
        let mut eval: Vec<usize> = order[..k].to_vec();
        let mut train: Vec<usize> = order[k..].to_vec();
        eval.sort_unstable();
        train.sort_unstable();
        Ok((train, eval))
    }
}

/// Result of one grid cell for one region and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub region: String,
    pub factors: CellFactors,
    pub seed: u64,
    pub model_id: String,
    /// Mean L1 over the region's coordinates minus the baseline's.
    pub inaccuracy: Option<f64>,
    pub model_l1: Option<f64>,
    pub baseline_l1: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_sha256: String,
    pub eval_sha256: String,
    pub model_sha256: Option<String>,
    pub init_sha256: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub cells: Vec<AblationCell>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationTable {
    pub fn cell(&self, region: &str, factors: CellFactors, seed: u64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.region == region && c.factors == factors && c.seed == seed)
    }

    /// Mean inaccuracy over seeds; `None` unless every seed succeeded.
    pub fn mean_inaccuracy(&self, region: &str, factors: CellFactors) -> Option<f64> {
        let vals: Vec<Option<f64>> = self
            .cells
            .iter()
            .filter(|c| c.region == region && c.factors == factors)
            .map(|c| c.inaccuracy)
            .collect();
        if vals.is_empty() || vals.iter().any(Option::is_none) {
            return None;
        }
        Some(vals.iter().flatten().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "region",
            "loss",
            "input",
            "mode",
            "seed",
            "inaccuracy",
            "model_l1",
            "baseline_l1",
            "epochs",
            "best_epoch",
            "model_id",
            "model_sha256",
            "init_sha256",
            "train_sha256",
            "eval_sha256",
            "error",
        ])
        .expect("in-memory write");
        for c in &self.cells {
            w.write_record([
                c.region.clone(),
                loss_name(c.factors.loss).into(),
                input_name(c.factors.input).into(),
                mode_name(c.factors.mode).into(),
                c.seed.to_string(),
                opt(c.inaccuracy),
                opt(c.model_l1),
                c.baseline_l1.to_string(),
                c.epochs.to_string(),
                c.best_epoch.to_string(),
                c.model_id.clone(),
                c.model_sha256.clone().unwrap_or_default(),
                c.init_sha256.clone().unwrap_or_default(),
                c.train_sha256.clone(),
                c.eval_sha256.clone(),
                c.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Inaccuracy relative to the baseline per region, loss and input,
    /// with the transfer modes as columns; mean over seeds.
    pub fn to_text(&self) -> String {
        let regions: Vec<&str> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if !seen.contains(&c.region.as_str()) {
                    seen.push(c.region.as_str());
                }
            }
            seen
        };
        let mut out = String::new();
        let _ = writeln!(out, "Inaccuracy (mean L1) relative to the baseline; negative is better.");
        let _ = writeln!(
            out,
            "{:<8} {:<9} {:<11} {:>18} {:>12}",
            "region", "loss", "input", "feature_extraction", "fine_tuning"
        );
        for r in regions {
            for loss in [LossFactor::Complete, LossFactor::Local] {
                for input in [InputFactor::FullFrame, InputFactor::Crop] {
                    let col = |mode| {
                        let f = CellFactors::new(loss, input, mode);
                        if !self.cells.iter().any(|c| c.region == r && c.factors == f) {
                            return "-".to_string();
                        }
                        match self.mean_inaccuracy(r, f) {
                            Some(v) => format!("{v:+.4}"),
                            None => "failed".to_string(),
                        }
                    };
                    let (fe, ft) = (col(TransferMode::FeatureExtraction), col(TransferMode::FineTuning));
                    if fe == "-" && ft == "-" {
                        continue;
                    }
                    let _ = writeln!(
                        out,
                        "{:<8} {:<9} {:<11} {:>18} {:>12}",
                        r,
                        loss_name(loss),
                        input_name(input),
                        fe,
                        ft
                    );
                }
            }
        }
        out
    }
}

/// Table plus every model trained for it.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub table: AblationTable,
    pub models: BTreeMap<ModelKey, TrainedModel>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

fn prepare(samples: &[&Sample], input: &InputSpec, frame: &CropConfig, schema_targets: &[Vec<f64>]) -> Result<Vec<Example>, EvalError> {
    samples
        .iter()
        .zip(schema_targets)
        .map(|(s, t)| {
            Ok(Example {
                input: prepare_input(&s.image, s.landmarks, input, frame).map_err(|e| EvalError::Stage(e.to_string()))?,
                target: t.clone(),
            })
        })
        .collect()
}

/// Trains and evaluates every configured cell for every region and seed on
/// a seeded train/eval split. Feature-extraction models are trained first;
/// each fine-tuning model starts from its feature-extraction counterpart.
/// A failed training marks its cells failed without stopping the run.
pub fn run_ablation(
    dataset: &DatasetManifest,
    config: &AblationConfig,
    jobs: usize,
) -> Result<AblationOutcome, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let schema = &dataset.schema;
    let layout = schema.layout();
    for r in &config.regions {
        if layout.region(r).is_none() {
            return Err(EvalError::Shape(format!("unknown region {r}")));
        }
    }
    let (train_idx, eval_idx) = config.split(dataset.len())?;
    let train_sha = dataset.subset(&train_idx).digest();
    let eval_sha = dataset.subset(&eval_idx).digest();

    let samples = dataset.load_samples().map_err(|e| EvalError::Io(e.to_string()))?;
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| encode(&s.recipe, schema).map(|t| t.values))
        .collect::<Result<_, _>>()
        .map_err(|e| EvalError::Stage(e.to_string()))?;
    let pick = |idx: &[usize]| -> (Vec<&Sample>, Vec<Vec<f64>>) {
        (idx.iter().map(|&i| &samples[i]).collect(), idx.iter().map(|&i| targets[i].clone()).collect())
    };
    let (train_samples, train_targets) = pick(&train_idx);
    let (eval_samples, eval_targets) = pick(&eval_idx);
    let baseline = baseline_predictor(&eval_targets)?;

    let mut wanted = BTreeSet::new();
    for r in &config.regions {
        for &cell in &config.cells {
            for &seed in &config.seeds {
                let key = ModelKey::for_cell(r, cell, seed);
                if let Some(init) = key.init_key() {
                    wanted.insert(init);
                }
                wanted.insert(key);
            }
        }
    }
    let inputs: BTreeSet<InputSpec> = wanted.iter().map(|k| k.input.clone()).collect();
    let mut prepared: BTreeMap<InputSpec, (Vec<Example>, Vec<Example>)> = BTreeMap::new();
    for input in inputs {
        let tr = prepare(&train_samples, &input, &config.frame, &train_targets)?;
        let ev = prepare(&eval_samples, &input, &config.frame, &eval_targets)?;
        prepared.insert(input, (tr, ev));
    }

    let mut models: BTreeMap<ModelKey, Result<TrainedModel, String>> = BTreeMap::new();
    for mode in [TransferMode::FeatureExtraction, TransferMode::FineTuning] {
        let keys: Vec<&ModelKey> = wanted.iter().filter(|k| k.mode == mode).collect();
        let results = parallel_map(jobs, &keys, |_, key| {
            let init = match key.init_key() {
                Some(k) => match &models[&k] {
                    Ok(m) => Some(m),
                    Err(e) => return Err(format!("initial model {} failed: {e}", k.id())),
                },
                None => None,
            };
            let cfg = config.train_config(key);
            train_prepared(&prepared[&key.input].0, schema, &cfg, init, train_sha.clone()).map_err(|e| e.to_string())
        });
        for (key, r) in keys.into_iter().zip(results) {
            models.insert(key.clone(), r);
        }
    }

    let eval_preds: BTreeMap<&ModelKey, Result<Vec<Vec<f64>>, String>> = models
        .iter()
        .map(|(k, m)| {
            let preds = m.as_ref().map_err(Clone::clone).and_then(|m| {
                prepared[&k.input]
                    .1
                    .iter()
                    .map(|e| {
                        // Scatter the slice into full-length vectors.
                        let p = m.predict(&e.input).map_err(|e| e.to_string())?;
                        let mut full = vec![f64::NAN; layout.len];
                        for (&i, v) in m.slice.indices.iter().zip(p) {
                            full[i] = v;
                        }
                        Ok(full)
                    })
                    .collect()
            });
            (k, preds)
        })
        .collect();

    let mut cells = Vec::new();
    for r in &config.regions {
        let coords: Vec<usize> = layout.region(r).expect("checked").span().collect();
        let base_preds = vec![baseline.clone(); eval_targets.len()];
        let baseline_l1 = mean_l1(&base_preds, &eval_targets, &coords)?;
        for &factors in &config.cells {
            for &seed in &config.seeds {
                let key = ModelKey::for_cell(r, factors, seed);
                let mut cell = AblationCell {
                    region: r.clone(),
                    factors,
                    seed,
                    model_id: key.id(),
                    inaccuracy: None,
                    model_l1: None,
                    baseline_l1,
                    epochs: 0,
                    best_epoch: 0,
                    train_sha256: train_sha.clone(),
                    eval_sha256: eval_sha.clone(),
                    model_sha256: None,
                    init_sha256: None,
                    error: None,
                };
                match (&models[&key], &eval_preds[&key]) {
                    (Ok(m), Ok(preds)) => {
                        cell.inaccuracy = Some(inaccuracy_vs_baseline(preds, &eval_targets, &baseline, &coords)?);
                        cell.model_l1 = Some(mean_l1(preds, &eval_targets, &coords)?);
                        cell.epochs = m.curve.len();
                        cell.best_epoch = m.best_epoch;
                        cell.model_sha256 = Some(m.digest());
                        cell.init_sha256 = m.provenance.init_sha256.clone();
                    }
                    (Err(e), _) | (_, Err(e)) => cell.error = Some(e.clone()),
                }
                cells.push(cell);
            }
        }
    }

    Ok(AblationOutcome {
        table: AblationTable {
            config_sha256: config.digest(),
            dataset_sha256: dataset.digest(),
            cells,
        },
        models: models.into_iter().filter_map(|(k, m)| Some((k, m.ok()?))).collect(),
        train_indices: train_idx,
        eval_indices: eval_idx,
    })
}
