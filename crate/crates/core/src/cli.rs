//! Command-line pipeline: the JSON configuration, the subcommands and the
//! provenance record written next to every artifact.
//!
//! Every command either succeeds or fails with a [`CliError`] naming the
//! pipeline stage; `main` prints it as one `stage=<name> error=<message>`
//! line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapt::{adapter_from_id, DomainAdapter, RegistrationConfig};
use crate::ensemble::{ensemble_predict, fit_ensemble, EnsembleError, EnsembleModel, Member, MemberMatrices};
use crate::eval::{
    compare_constant_weights, reconstruction_report, run_ablation, AblationConfig, CellFactors, DownsampleEmbedder,
    Embedder, ExternalEmbedder, InputFactor, LossFactor, ModelKey,
};
use crate::image::GrayImage;
use crate::losses::RegressionNorm;
use crate::provenance::{sha256_hex, sha256_parts};
use crate::recipe::{serialize_mhm, ParameterSchema};
use crate::synth::{
    check_canvas, generate_dataset, load_manifest, toy_face_schema, AugmentationRanges, CropConfig,
    DatasetManifest, GenerationOptions, Point,
};
use crate::trainer::{
    predict_matrix, target_matrix, train, Architecture, HeadKind, InputSpec, Schedule, TargetSpec, TrainedModel,
    TransferMode,
};

/// Failure of one command, tagged with the stage that failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(stage: impl Into<String>, message: impl ToString) -> Self {
        Self {
            stage: stage.into(),
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let one_line = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "stage={} error={}", one_line(&self.stage), one_line(&self.message))
    }
}

impl std::error::Error for CliError {}

fn err(stage: &str) -> impl Fn(String) -> CliError + '_ {
    move |m| CliError::new(stage, m)
}

fn ensemble_err(default_stage: &str, e: EnsembleError) -> CliError {
    match e {
        EnsembleError::Stage { stage, message } => CliError::new(stage, message),
        other => CliError::new(default_stage, other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub architecture: Architecture,
    pub feature_extraction: Schedule,
    pub fine_tuning: Schedule,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub regression_norm: RegressionNorm,
    pub head: HeadKind,
    pub adaptive_temperature: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            architecture: a.architecture,
            feature_extraction: a.feature_extraction,
            fine_tuning: a.fine_tuning,
            batch_size: a.batch_size,
            holdout_fraction: a.holdout_fraction,
            regression_norm: a.regression_norm,
            head: a.head,
            adaptive_temperature: a.adaptive_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub regions: Vec<String>,
    pub cells: Vec<CellFactors>,
    pub seeds: Vec<u64>,
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for AblationSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            regions: a.regions,
            cells: a.cells,
            seeds: a.seeds,
            eval_fraction: a.eval_fraction,
            split_seed: a.split_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// Id of the aggregate model; the single full-frame complete-loss model
    /// when absent (a fine-tuned one if there is exactly one).
    pub aggregate: Option<String>,
    /// Ids of the local models; every other model when absent.
    pub locals: Option<Vec<String>>,
    /// Fraction of the `--split` manifest used to fit the weights. The rest
    /// scores the fitted and constant weights.
    pub fit_fraction: f64,
    pub split_seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            aggregate: None,
            locals: None,
            fit_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Everything a run depends on besides command-line flags. Loaded from
/// JSON; absent keys take the defaults below and unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Schema JSON, relative to the config file. It must describe the toy
    /// face, which is the only renderer available.
    pub schema: Option<PathBuf>,
    pub canvas: (usize, usize),
    pub local_size: (usize, usize),
    /// Crop rectangles per region, in the 64-unit layout frame.
    pub crop_boxes: BTreeMap<String, [f64; 4]>,
    /// Canonical eye positions on the registered canvas, in pixels.
    pub eyes: [Point; 2],
    pub augmentation: AugmentationRanges,
    pub normalize_scale: bool,
    pub training: TrainingSection,
    pub ablation: AblationSection,
    pub ensemble: EnsembleSection,
    /// Adapter stored with fitted ensembles: `identity`,
    /// `posterize:<levels>` or `external:<command words>`.
    pub adapter: String,
    /// `downsample:<size>` or `external:<command words>`.
    pub embedder: String,
    /// Seed for `train` when `--seed` is not given.
    pub seed: u64,
    /// Base of the default output directories, relative to the config file.
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let frame = CropConfig::default();
        Self {
            schema: None,
            canvas: frame.registration.canvas,
            local_size: frame.local_size,
            crop_boxes: frame.boxes,
            eyes: [frame.registration.left_eye, frame.registration.right_eye],
            augmentation: AugmentationRanges::default(),
            normalize_scale: true,
            training: TrainingSection::default(),
            ablation: AblationSection::default(),
            ensemble: EnsembleSection::default(),
            adapter: "identity".into(),
            embedder: "downsample:16".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// A validated configuration with its schema loaded and paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub schema: ParameterSchema,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    /// Digest of the configuration content and the schema it refers to.
    pub digest: String,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::new("config", e))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text)?.resolve(&base)
    }

    /// Validates the configuration and loads the schema it names.
    pub fn resolve(self, base_dir: &Path) -> Result<LoadedConfig, CliError> {
        let bad = err("config");
        let toy = toy_face_schema();
        let schema = match &self.schema {
            Some(p) => {
                let p = base_dir.join(p);
                let s = ParameterSchema::load(&p).map_err(|e| bad(format!("schema {}: {e}", p.display())))?;
                if s.to_json() != toy.to_json() {
                    return Err(bad(format!("schema {} does not describe the toy face", p.display())));
                }
                s
            }
            None => toy,
        };
        check_canvas(self.canvas.0, self.canvas.1).map_err(|e| bad(e.to_string()))?;
        check_canvas(self.local_size.0, self.local_size.1).map_err(|e| bad(format!("local size: {e}")))?;
        self.augmentation.validate().map_err(|e| bad(e.to_string()))?;
        if self.eyes[0] == self.eyes[1] {
            return Err(bad("eye positions coincide".into()));
        }
        for r in &self.ablation.regions {
            if !self.crop_boxes.contains_key(r) {
                return Err(bad(format!("no crop box for ablation region {r}")));
            }
        }
        let e = &self.ensemble;
        if !(e.fit_fraction > 0.0 && e.fit_fraction <= 1.0) {
            return Err(bad(format!("ensemble fit fraction {} must be in (0, 1]", e.fit_fraction)));
        }
        adapter_from_id(&self.adapter).map_err(|e| bad(format!("adapter: {e}")))?;
        embedder_from_id(&self.embedder)?;
        let digest = {
            let mut c = self.clone();
            c.schema = None;
            sha256_parts([
                serde_json::to_string(&c).expect("config serializes"),
                schema.to_json(),
            ])
        };
        Ok(LoadedConfig {
            config: self,
            schema,
            base_dir: base_dir.to_path_buf(),
            digest,
        })
    }
}

impl LoadedConfig {
    pub fn frame(&self) -> CropConfig {
        let c = &self.config;
        CropConfig {
            local_size: c.local_size,
            registration: RegistrationConfig {
                canvas: c.canvas,
                left_eye: c.eyes[0],
                right_eye: c.eyes[1],
                ..RegistrationConfig::for_canvas(c.canvas.0, c.canvas.1)
            },
            boxes: c.crop_boxes.clone(),
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        let t = &self.config.training;
        let a = &self.config.ablation;
        AblationConfig {
            regions: a.regions.clone(),
            cells: a.cells.clone(),
            seeds: a.seeds.clone(),
            eval_fraction: a.eval_fraction,
            split_seed: a.split_seed,
            architecture: t.architecture.clone(),
            feature_extraction: t.feature_extraction.clone(),
            fine_tuning: t.fine_tuning.clone(),
            batch_size: t.batch_size,
            holdout_fraction: t.holdout_fraction,
            regression_norm: t.regression_norm,
            head: t.head,
            adaptive_temperature: t.adaptive_temperature,
            frame: self.frame(),
        }
    }

    pub fn generation_options(&self, style_levels: Option<u32>) -> GenerationOptions {
        GenerationOptions {
            canvas: self.config.canvas,
            ranges: self.config.augmentation,
            normalize_scale: self.config.normalize_scale,
            style_levels,
        }
    }

    fn output(&self, flag: Option<PathBuf>, default: &str) -> PathBuf {
        flag.unwrap_or_else(|| self.base_dir.join(&self.config.output_dir).join(default))
    }

    fn check_dataset(&self, d: &DatasetManifest) -> Result<(), CliError> {
        if d.schema.to_json() != self.schema.to_json() {
            return Err(CliError::new("data", format!("{} uses a different schema", d.dir.display())));
        }
        Ok(())
    }
}

/// Builds the embedder named by `id`.
pub fn embedder_from_id(id: &str) -> Result<Box<dyn Embedder>, CliError> {
    if let Some(cmd) = id.strip_prefix("external:") {
        let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(CliError::new("config", format!("embedder {id:?} has no command")));
        }
        return Ok(Box::new(ExternalEmbedder::with_env_timeout(command)));
    }
    if let Some(size) = id.strip_prefix("downsample:") {
        let size: usize = size
            .parse()
            .ok()
            .filter(|&s| s > 0)
            .ok_or_else(|| CliError::new("config", format!("bad embedder size in {id:?}")))?;
        return Ok(Box::new(DownsampleEmbedder { size }));
    }
    Err(CliError::new("config", format!("unknown embedder {id:?}")))
}

/// Inputs, seed and output file digests of one command run. Written as
/// `provenance.json` into the output directory; paths are relative so the
/// record does not depend on where the run happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::new("io", format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

/// Digests of every regular file under `dir`, keyed by relative path with
/// `/` separators, excluding the provenance record itself.
pub fn digest_tree(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if key != PROVENANCE_FILE {
                    out.insert(key, sha256_hex(fs::read(&p)?));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
    Ok(out)
}

fn write_provenance(
    dir: &Path,
    command: &str,
    cfg: &LoadedConfig,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
) -> Result<String, CliError> {
    let p = ArtifactProvenance {
        command: command.into(),
        config_sha256: cfg.digest.clone(),
        seed,
        inputs,
        outputs: digest_tree(dir)?,
    };
    let json = serde_json::to_string_pretty(&p).expect("provenance serializes");
    write_file(&dir.join(PROVENANCE_FILE), &json)?;
    Ok(sha256_hex(json))
}

#[derive(Debug, Parser)]
#[command(name = "paramface", version, about = "Reconstruct parametric face recipes from single images")]
pub struct Cli {
    /// Pipeline configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdapterSwitch {
    On,
    Off,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset into a manifest directory.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Master seed; sample i depends only on it and i.
        #[arg(long)]
        seed: u64,
        /// Image style: `identity` or `posterize:<levels>`.
        #[arg(long, default_value = "identity")]
        style: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model of the ablation grid on a manifest.
    Train {
        /// Training manifest directory.
        #[arg(long)]
        data: PathBuf,
        /// `<loss>,<input>,<mode>,<region>`: loss `complete|local`, input
        /// `full|crop`, mode `fe|ft`.
        #[arg(long)]
        cell: String,
        /// Feature-extraction model (`<dir>/<id>.json`) to fine-tune from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training seed [default: config `seed`].
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; the model is written as `<id>.json` and
        /// `<id>.bin` [default: <output_dir>/models].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit ensemble weights for the models in a directory.
    FitEnsemble {
        /// Directory of trained models.
        #[arg(long)]
        models: PathBuf,
        /// Manifest the weights are fitted on (see `ensemble.fit_fraction`).
        #[arg(long)]
        split: PathBuf,
        /// Output ensemble directory [default: <output_dir>/ensemble].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer a recipe for one image and print it in mhm form.
    Infer {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Eye centers in image pixels: `x1,y1,x2,y2` (left eye first).
        #[arg(long)]
        landmarks: Option<String>,
        /// Override the ensemble's adapter.
        #[arg(long)]
        adapter: Option<String>,
    },
    /// Run the transfer-learning ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory [default: <output_dir>/ablation].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render reconstructions of an evaluation manifest.
    Report {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        adapter: AdapterSwitch,
        /// Output directory [default: <output_dir>/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses a `--cell` value into grid factors and the region.
pub fn parse_cell(text: &str) -> Result<(CellFactors, String), CliError> {
    let bad = || CliError::new("args", format!("--cell {text:?}: expected <complete|local>,<full|crop>,<fe|ft>,<region>"));
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [loss, input, mode, region] = parts[..] else {
        return Err(bad());
    };
    let loss = match loss {
        "complete" => LossFactor::Complete,
        "local" => LossFactor::Local,
        _ => return Err(bad()),
    };
    let input = match input {
        "full" | "full_frame" => InputFactor::FullFrame,
        "crop" => InputFactor::Crop,
        _ => return Err(bad()),
    };
    let mode = match mode {
        "fe" | "feature_extraction" => TransferMode::FeatureExtraction,
        "ft" | "fine_tuning" => TransferMode::FineTuning,
        _ => return Err(bad()),
    };
    if region.is_empty() {
        return Err(bad());
    }
    Ok((CellFactors::new(loss, input, mode), region.to_string()))
}

/// Parses `x1,y1,x2,y2`.
pub fn parse_landmarks(text: &str) -> Result<[Point; 2], CliError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::new("args", format!("--landmarks {text:?}: expected x1,y1,x2,y2")))?;
    match v[..] {
        [x1, y1, x2, y2] if v.iter().all(|x| x.is_finite()) => Ok([(x1, y1), (x2, y2)]),
        _ => Err(CliError::new("args", format!("--landmarks {text:?}: expected four finite numbers"))),
    }
}

fn style_levels(style: &str) -> Result<Option<u32>, CliError> {
    if style == "identity" {
        return Ok(None);
    }
    style
        .strip_prefix("posterize:")
        .and_then(|l| l.parse().ok())
        .map(Some)
        .ok_or_else(|| CliError::new("args", format!("unknown style {style:?}")))
}

fn load_data(cfg: &LoadedConfig, dir: &Path) -> Result<DatasetManifest, CliError> {
    let d = load_manifest(dir).map_err(|e| CliError::new("data", format!("{}: {e}", dir.display())))?;
    cfg.check_dataset(&d)?;
    Ok(d)
}

fn model_stem(path: &Path) -> Result<(PathBuf, String), CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::new("args", format!("bad model path {}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}

/// Every model (`<id>.json` with a matching `<id>.bin`) in `dir`, sorted by
/// id.
pub fn load_models(dir: &Path) -> Result<Vec<Member>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::new("models", format!("{}: {e}", dir.display())))?;
    let mut ids = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::new("models", e))?.path();
        if p.extension().is_some_and(|x| x == "json") && p.with_extension("bin").is_file() {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(s.to_string());
            }
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let model = TrainedModel::load(dir, &id).map_err(|e| CliError::new("models", format!("{id}: {e}")))?;
            Ok(Member { id, model })
        })
        .collect()
}

/// Splits loaded models into aggregate and locals per the ensemble section.
pub fn select_members(section: &EnsembleSection, mut models: Vec<Member>) -> Result<(Member, Vec<Member>), CliError> {
    let bad = err("fit-ensemble");
    let agg_id = match &section.aggregate {
        Some(id) => id.clone(),
        None => {
            let full: Vec<&Member> = models
                .iter()
                .filter(|m| m.model.config.input == InputSpec::FullFrame && m.model.config.target == TargetSpec::Complete)
                .collect();
            let ft: Vec<&&Member> = full.iter().filter(|m| m.model.config.mode == TransferMode::FineTuning).collect();
            match (full.len(), ft.len()) {
                (1, _) => full[0].id.clone(),
                (_, 1) => ft[0].id.clone(),
                (0, _) => return Err(bad("no full-frame complete-loss model to aggregate".into())),
                _ => return Err(bad("several candidate aggregate models; set ensemble.aggregate".into())),
            }
        }
    };
    let pos = models
        .iter()
        .position(|m| m.id == agg_id)
        .ok_or_else(|| bad(format!("aggregate model {agg_id} not found")))?;
    let aggregate = models.remove(pos);
    let locals = match &section.locals {
        None => models,
        Some(ids) => ids
            .iter()
            .map(|id| {
                models
                    .iter()
                    .find(|m| &m.id == id)
                    .cloned()
                    .ok_or_else(|| bad(format!("local model {id} not found")))
            })
            .collect::<Result<_, _>>()?,
    };
    Ok((aggregate, locals))
}

/// Seeded fitting/scoring split of `n` rows, both sorted.
pub fn ensemble_split(section: &EnsembleSection, n: usize) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(crate::provenance::derive_seed("ensemble-split", &[section.split_seed]));
    idx.shuffle(&mut rng);
    let n_fit = ((n as f64 * section.fit_fraction).round() as usize).clamp(1.min(n), n);
    let (fit, rest) = idx.split_at(n_fit);
    let mut fit = fit.to_vec();
    let mut rest = rest.to_vec();
    fit.sort_unstable();
    rest.sort_unstable();
    (fit, rest)
}

fn digest_line(out: &mut dyn Write, key: &str, value: &str) -> Result<(), CliError> {
    writeln!(out, "{key}={value}").map_err(|e| CliError::new("io", e))
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`. `--help` and `--version` print and succeed.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{}", e.render()).map_err(|e| CliError::new("io", e))?;
                return Ok(());
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::new("args", first.trim_start_matches("error: ")));
        }
    };
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default().resolve(Path::new("."))?,
    };
    execute(&cfg, cli.command, out)
}

pub fn execute(cfg: &LoadedConfig, command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::GenData {
            n,
            seed,
            style,
            jobs,
            out: dir,
        } => {
            let dir = cfg.output(dir, "data");
            let options = cfg.generation_options(style_levels(&style)?);
            let m = generate_dataset(n, seed, &options, &dir, jobs.max(1), Some(cfg.digest.clone()))
                .map_err(|e| CliError::new("generate", e))?;
            let p = write_provenance(&dir, "gen-data", cfg, Some(seed), BTreeMap::new())?;
            digest_line(out, "manifest_sha256", &m.digest())?;
            digest_line(out, "provenance_sha256", &p)
        }
        Command::Train {
            data,
            cell,
            init,
            seed,
            out: dir,
        } => {
            let dir = cfg.output(dir, "models");
            let (factors, region) = parse_cell(&cell)?;
            if cfg.schema.layout().region(&region).is_none() {
                return Err(CliError::new("args", format!("unknown region {region}")));
            }
            let seed = seed.unwrap_or(cfg.config.seed);
            let key = ModelKey::for_cell(&region, factors, seed);
            let dataset = load_data(cfg, &data)?;
            let init = init
                .map(|p| {
                    let (d, stem) = model_stem(&p)?;
                    TrainedModel::load(&d, &stem).map_err(|e| CliError::new("init", e))
                })
                .transpose()?;
            let tc = cfg.ablation_config().train_config(&key);
            let mut model = train(&dataset, &tc, init.as_ref()).map_err(|e| CliError::new("train", e))?;
            model.provenance.pipeline_sha256 = Some(cfg.digest.clone());
            let id = key.id();
            model.save(&dir, &id).map_err(|e| CliError::new("io", e))?;
            digest_line(out, "model", &id)?;
            digest_line(out, "model_sha256", &model.digest())
        }
        Command::FitEnsemble { models, split, out: dir } => {
            let dir = cfg.output(dir, "ensemble");
            let (aggregate, locals) = select_members(&cfg.config.ensemble, load_models(&models)?)?;
            let dataset = load_data(cfg, &split)?;
            let target = target_matrix(&dataset).map_err(|e| CliError::new("predict", e))?;
            let mut matrices = Vec::new();
            for m in std::iter::once(&aggregate).chain(&locals) {
                let p = predict_matrix(&m.model, &dataset, None)
                    .map_err(|e| CliError::new(format!("predict:{}", m.id), e))?;
                matrices.push((m.id.clone(), p));
            }
            let all = MemberMatrices {
                models: matrices,
                target,
            };
            let (fit_rows, score_rows) = ensemble_split(&cfg.config.ensemble, dataset.len());
            let fitting = all.select_rows(&fit_rows);
            let weights = fit_ensemble(&fitting).map_err(|e| ensemble_err("fit", e))?;
            let adapter: Arc<dyn DomainAdapter> = adapter_from_id(&cfg.config.adapter)
                .map_err(|e| CliError::new("adapter", e))?
                .into();
            let ensemble = EnsembleModel::new(cfg.schema.clone(), aggregate, locals, weights.clone(), adapter)
                .map_err(|e| ensemble_err("ensemble", e))?;
            ensemble.save(&dir).map_err(|e| ensemble_err("io", e))?;
            write_file(
                &dir.join("weights.json"),
                serde_json::to_string_pretty(&weights).expect("weights serialize"),
            )?;
            if !score_rows.is_empty() {
                let scoring = all.select_rows(&score_rows);
                let table = compare_constant_weights(&fitting, &scoring, &weights, &cfg.schema)
                    .map_err(|e| CliError::new("compare", e))?;
                write_file(&dir.join("constant_weights.csv"), table.to_csv())?;
                write_file(&dir.join("constant_weights_coordinates.csv"), table.coordinates_csv())?;
                write_file(&dir.join("constant_weights.txt"), table.to_text())?;
            }
            let inputs = BTreeMap::from([("split_sha256".to_string(), dataset.digest())]);
            let p = write_provenance(&dir, "fit-ensemble", cfg, Some(cfg.config.ensemble.split_seed), inputs)?;
            digest_line(out, "ensemble_sha256", &ensemble.digest())?;
            digest_line(out, "provenance_sha256", &p)
        }
        Command::Infer {
            ensemble,
            image,
            landmarks,
            adapter,
        } => {
            let mut model = EnsembleModel::load(&ensemble).map_err(|e| ensemble_err("ensemble", e))?;
            if let Some(id) = adapter {
                let a: Arc<dyn DomainAdapter> = adapter_from_id(&id).map_err(|e| CliError::new("adapter", e))?.into();
                model = model.with_adapter(a);
            }
            let img = GrayImage::load_png(&image).map_err(|e| CliError::new("image", format!("{}: {e}", image.display())))?;
            let landmarks = landmarks.as_deref().map(parse_landmarks).transpose()?;
            let recipe = ensemble_predict(&model, &img, landmarks).map_err(|e| ensemble_err("infer", e))?;
            let text = serialize_mhm(&recipe, model.schema()).map_err(|e| CliError::new("serialize", e))?;
            write!(out, "{text}").map_err(|e| CliError::new("io", e))
        }
        Command::Ablate { data, jobs, out: dir } => {
            let dir = cfg.output(dir, "ablation");
            let dataset = load_data(cfg, &data)?;
            let ac = cfg.ablation_config();
            let outcome = run_ablation(&dataset, &ac, jobs.max(1)).map_err(|e| CliError::new("ablation", e))?;
            for (key, m) in &outcome.models {
                let mut m = m.clone();
                m.provenance.pipeline_sha256 = Some(cfg.digest.clone());
                m.save(&dir.join("models"), &key.id()).map_err(|e| CliError::new("io", e))?;
            }
            write_file(&dir.join("ablation.csv"), outcome.table.to_csv())?;
            write_file(&dir.join("ablation.txt"), outcome.table.to_text())?;
            let inputs = BTreeMap::from([("dataset_sha256".to_string(), dataset.digest())]);
            let p = write_provenance(&dir, "ablate", cfg, Some(ac.split_seed), inputs)?;
            write!(out, "{}", outcome.table.to_text()).map_err(|e| CliError::new("io", e))?;
            digest_line(out, "provenance_sha256", &p)
        }
        Command::Report {
            ensemble,
            eval,
            adapter,
            out: dir,
        } => {
            let dir = cfg.output(dir, "report");
            let model = EnsembleModel::load(&ensemble).map_err(|e| ensemble_err("ensemble", e))?;
            let dataset = load_data(cfg, &eval)?;
            let embedder = embedder_from_id(&cfg.config.embedder)?;
            let settings: &[bool] = match adapter {
                AdapterSwitch::On => &[true],
                AdapterSwitch::Off => &[false],
                AdapterSwitch::Both => &[false, true],
            };
            let report = reconstruction_report(&model, &dataset, settings, embedder.as_ref())
                .map_err(|e| CliError::new("report", e))?;
            write_file(&dir.join("reconstruction.csv"), report.to_csv())?;
            write_file(&dir.join("reconstruction.txt"), report.to_text())?;
            write_file(
                &dir.join("reconstruction.json"),
                serde_json::to_string_pretty(&report.rows).expect("rows serialize"),
            )?;
            let inputs = BTreeMap::from([
                ("eval_sha256".to_string(), dataset.digest()),
                ("ensemble_sha256".to_string(), model.digest()),
            ]);
            let p = write_provenance(&dir, "report", cfg, None, inputs)?;
            write!(out, "{}", report.to_text()).map_err(|e| CliError::new("io", e))?;
            digest_line(out, "provenance_sha256", &p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_and_landmarks_parse() {
        let (c, r) = parse_cell("local,crop,ft,nose").unwrap();
        assert_eq!(c, CellFactors::new(LossFactor::Local, InputFactor::Crop, TransferMode::FineTuning));
        assert_eq!(r, "nose");
        assert!(parse_cell("local,crop,ft").is_err());
        assert!(parse_cell("local,side,ft,nose").is_err());
        assert_eq!(parse_landmarks("1,2.5,3,4").unwrap(), [(1.0, 2.5), (3.0, 4.0)]);
        assert!(parse_landmarks("1,2,3").is_err());
        assert!(parse_landmarks("1,2,3,nan").is_err());
    }

    #[test]
    fn config_defaults_round_trip_and_reject_unknown_keys() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
        let e = PipelineConfig::from_json(r#"{"seeed": 3}"#).unwrap_err();
        assert_eq!(e.stage, "config");
        let loaded = c.clone().resolve(Path::new(".")).unwrap();
        assert_eq!(loaded.frame(), CropConfig::default());
        let mut other = c;
        other.seed = 1;
        assert_ne!(other.resolve(Path::new(".")).unwrap().digest, loaded.digest);
    }

    #[test]
    fn config_paths_resolve_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        fs::write(&cfg_path, r#"{"schema": "missing.json"}"#).unwrap();
        assert_eq!(PipelineConfig::load(&cfg_path).unwrap_err().stage, "config");
        fs::write(dir.path().join("s.json"), toy_face_schema().to_json()).unwrap();
        fs::write(&cfg_path, r#"{"schema": "s.json", "adapter": "posterize:4"}"#).unwrap();
        let loaded = PipelineConfig::load(&cfg_path).unwrap();
        assert_eq!(loaded.digest, {
            let c = PipelineConfig {
                adapter: "posterize:4".into(),
                ..PipelineConfig::default()
            };
            c.resolve(Path::new("/elsewhere")).unwrap().digest
        });
        fs::write(&cfg_path, r#"{"adapter": "sharpen"}"#).unwrap();
        assert!(PipelineConfig::load(&cfg_path).is_err());
        fs::write(&cfg_path, r#"{"embedder": "downsample:0"}"#).unwrap();
        assert!(PipelineConfig::load(&cfg_path).is_err());
    }

    #[test]
    fn errors_are_single_line() {
        let e = CliError::new("registration", "eye landmarks\nmissing");
        assert_eq!(e.to_string(), "stage=registration error=eye landmarks missing");
        let mut sink = Vec::new();
        let e = run(["paramface", "gen-data", "--n", "x", "--seed", "1"], &mut sink).unwrap_err();
        assert_eq!(e.stage, "args");
        assert!(!e.to_string().contains('\n'));
        run(["paramface", "--help"], &mut sink).unwrap();
        assert!(String::from_utf8(sink).unwrap().contains("fit-ensemble"));
    }

    #[test]
    fn ensemble_split_is_seeded() {
        let s = EnsembleSection::default();
        let (a, b) = ensemble_split(&s, 10);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(ensemble_split(&s, 10), (a.clone(), b));
        let all = EnsembleSection {
            fit_fraction: 1.0,
            ..s
        };
        assert_eq!(ensemble_split(&all, 10).0, (0..10).collect::<Vec<_>>());
    }
}
