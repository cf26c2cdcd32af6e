//! Image-to-vector models for the full target vector or one region's slice,
//! trained by momentum gradient descent under a plateau schedule.
//!
//! A model is a convolutional feature stage plus a linear head. Discrete
//! slots in the predicted slice pass through a per-slot softmax, so
//! predictions are probability vectors there. In feature-extraction mode the
//! feature stage keeps its (seeded) initial weights and only the head
//! trains; fine-tuning starts from a feature-extraction model and trains
//! everything.

mod matrix;
pub mod nn;
mod train;

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::GrayImage;
use crate::losses::{LossBreakdown, LossWeights, RegressionNorm};
use crate::provenance::{derive_seed, sha256_hex};
use crate::recipe::{Layout, ParameterSchema, RegionLayout, SlotLayout};
use crate::synth::{crop_region, CropConfig, Point};

pub use matrix::{predict_matrix, target_matrix, PredictionMatrix};
use nn::{Conv3x3, FeatureStage, ForwardCache, LinearHead, MapShape};
pub use train::{prepare_examples, train, train_examples, train_prepared, Example};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("fine-tuning needs an initial feature-extraction model")]
    MissingInit,
    #[error("initial model does not match: {0}")]
    InitMismatch(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
    #[error("model artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    FeatureExtraction,
    FineTuning,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    FullFrame,
    Crop(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Complete,
    Local(String),
}

/// Which coordinates of the target selection the head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Continuous and discrete coordinates together.
    Joint,
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Output channels of each `conv3x3 -> ReLU -> maxpool2` block.
    pub widths: Vec<usize>,
    /// Side of the adaptive average pooling grid (1 = global pooling).
    pub pool_grid: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            pool_grid: 1,
        }
    }
}

/// Plateau schedule: the learning rate is multiplied by `decay` after
/// `patience` epochs without a relative holdout-loss improvement of
/// `min_delta`; training stops once it falls below `min_learning_rate` or
/// after `max_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub patience: usize,
    pub decay: f64,
    pub min_learning_rate: f64,
    pub min_delta: f64,
    pub max_epochs: usize,
}

impl Schedule {
    /// Default schedule for fine-tuning: the same shape at a tenth of the
    /// learning rate, so the pretrained features are not wrecked early.
    pub fn fine_tuning() -> Self {
        let d = Self::default();
        Self {
            learning_rate: d.learning_rate * 0.1,
            min_learning_rate: d.min_learning_rate * 0.1,
            ..d
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            momentum: 0.9,
            patience: 3,
            decay: 0.3,
            min_learning_rate: 3e-5,
            min_delta: 1e-3,
            max_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TransferMode,
    pub input: InputSpec,
    pub target: TargetSpec,
    pub head: HeadKind,
    pub architecture: Architecture,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training data held out for the plateau schedule.
    pub holdout_fraction: f64,
    pub regression_norm: RegressionNorm,
    /// Per-region term weights over the full schema; uniform when absent.
    pub loss_weights: Option<LossWeights>,
    /// Rate-of-change weighting of the loss terms; off when absent.
    pub adaptive_temperature: Option<f64>,
    /// Registration frame and crop rectangles used to prepare inputs.
    pub frame: CropConfig,
}

impl TrainConfig {
    pub fn new(mode: TransferMode, input: InputSpec, target: TargetSpec, head: HeadKind) -> Self {
        Self {
            mode,
            input,
            target,
            head,
            architecture: Architecture::default(),
            schedule: match mode {
                TransferMode::FeatureExtraction => Schedule::default(),
                TransferMode::FineTuning => Schedule::fine_tuning(),
            },
            batch_size: 32,
            seed: 0,
            holdout_fraction: 0.2,
            regression_norm: RegressionNorm::L1,
            loss_weights: None,
            adaptive_temperature: None,
            frame: CropConfig::default(),
        }
    }

    pub fn validate(&self, schema: &ParameterSchema) -> Result<(), TrainError> {
        let s = &self.schedule;
        let bad = |m: String| Err(TrainError::Config(m));
        if s.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if !(s.decay > 0.0 && s.decay < 1.0) {
            return bad(format!("decay {} must be in (0, 1)", s.decay));
        }
        if !(s.learning_rate > 0.0 && (0.0..1.0).contains(&s.momentum)) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        if s.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout fraction {} must be in [0, 1)", self.holdout_fraction));
        }
        if let InputSpec::Crop(r) = &self.input {
            self.frame
                .rect(r)
                .map_err(|_| TrainError::Config(format!("no crop rectangle for region {r}")))?;
        }
        let slice = TargetSlice::new(schema, &self.target, self.head)?;
        if slice.indices.is_empty() {
            return bad(format!("{:?} {:?} selects no coordinates", self.target, self.head));
        }
        Ok(())
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self.input {
            InputSpec::FullFrame => self.frame.registration.canvas,
            InputSpec::Crop(_) => self.frame.local_size,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes"))
    }
}

/// Coordinates a model predicts, with the loss layout restricted to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSlice {
    /// Indices into the full target vector, ascending.
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    /// Softmax groups as ranges into the slice.
    pub slots: Vec<Range<usize>>,
}

impl TargetSlice {
    pub fn new(schema: &ParameterSchema, target: &TargetSpec, head: HeadKind) -> Result<Self, TrainError> {
        let layout = schema.layout();
        let regions: Vec<&RegionLayout> = match target {
            TargetSpec::Complete => layout.regions.iter().collect(),
            TargetSpec::Local(r) => vec![layout
                .region(r)
                .ok_or_else(|| TrainError::Config(format!("unknown region {r}")))?],
        };
        let mut indices = Vec::new();
        let mut slots = Vec::new();
        for r in regions {
            if head != HeadKind::Classification {
                indices.extend(r.continuous.clone());
            }
            if head != HeadKind::Regression {
                for s in &r.slots {
                    let start = indices.len();
                    indices.extend(s.range.clone());
                    slots.push(start..indices.len());
                }
            }
        }
        let names = indices.iter().map(|&i| layout.names[i].clone()).collect();
        Ok(Self {
            indices,
            names,
            slots,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The schema layout restricted to this slice, renumbered from 0. Regions
    /// keep their names and order; emptied regions stay as empty entries so
    /// per-region weights line up with the schema.
    pub fn layout(&self, full: &Layout) -> Layout {
        let pos = |i: usize| self.indices.binary_search(&i).ok();
        let mut regions = Vec::with_capacity(full.regions.len());
        for r in &full.regions {
            let kept: Vec<usize> = r.continuous.clone().filter_map(pos).collect();
            let continuous = match (kept.first(), kept.last()) {
                (Some(&a), Some(&b)) => a..b + 1,
                _ => 0..0,
            };
            let slots = r
                .slots
                .iter()
                .filter_map(|s| {
                    let a = pos(s.range.start)?;
                    Some(SlotLayout {
                        name: s.name.clone(),
                        range: a..a + s.range.len(),
                    })
                })
                .collect();
            regions.push(RegionLayout {
                name: r.name.clone(),
                continuous,
                slots,
            });
        }
        Layout {
            regions,
            len: self.indices.len(),
            names: self.names.clone(),
        }
    }
}

/// Registration-only or crop input for `spec`, from a raw image and its eye
/// landmarks.
pub fn prepare_input(
    image: &GrayImage,
    landmarks: [Point; 2],
    spec: &InputSpec,
    frame: &CropConfig,
) -> Result<GrayImage, TrainError> {
    match spec {
        InputSpec::FullFrame => crate::adapt::register(image, landmarks[0], landmarks[1], &frame.registration)
            .map(|(img, _)| img)
            .map_err(|e| TrainError::Data(format!("registration: {e}"))),
        InputSpec::Crop(region) => crop_region(image, landmarks, region, frame)
            .map_err(|e| TrainError::Data(format!("crop {region}: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub holdout_breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub config_sha256: String,
    pub seed: u64,
    pub init_sha256: Option<String>,
    /// Digest of the pipeline configuration, when trained through it.
    pub pipeline_sha256: Option<String>,
}

/// JSON sidecar stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: TrainConfig,
    pub slice: TargetSlice,
    pub provenance: Provenance,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub feature_sha256: String,
    pub parameters_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub features: FeatureStage,
    pub head: LinearHead,
    pub config: TrainConfig,
    pub slice: TargetSlice,
    pub provenance: Provenance,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl TrainedModel {
    /// Seeded initial network for `config`: the stand-in for a pretrained
    /// feature stage plus a fresh head.
    pub fn initial(schema: &ParameterSchema, config: &TrainConfig) -> Result<Self, TrainError> {
        let slice = TargetSlice::new(schema, &config.target, config.head)?;
        let (w, h) = config.input_size();
        let shape = MapShape {
            channels: 1,
            height: h,
            width: w,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("backbone", &[config.seed]));
        let features = FeatureStage::new(shape, &config.architecture.widths, config.architecture.pool_grid, &mut rng)
            .map_err(|e| TrainError::Shape(e.to_string()))?;
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed("head", &[config.seed]));
        let head = LinearHead::new(features.feature_len(), slice.len(), &mut head_rng);
        Ok(Self {
            features,
            head,
            config: config.clone(),
            slice,
            provenance: Provenance {
                dataset_sha256: String::new(),
                config_sha256: config.digest(),
                seed: config.seed,
                init_sha256: None,
                pipeline_sha256: None,
            },
            curve: Vec::new(),
            best_epoch: 0,
        })
    }

    /// Feature-stage parameters as little-endian `f32`s, in layer order.
    pub fn feature_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.features.convs {
            push_f32s(&mut out, &c.weight);
            push_f32s(&mut out, &c.bias);
        }
        out
    }

    /// All parameters: feature stage then head (including its fixed input
    /// standardization).
    pub fn parameter_blob(&self) -> Vec<u8> {
        let mut out = self.feature_blob();
        push_f32s(&mut out, &self.head.weight);
        push_f32s(&mut out, &self.head.bias);
        push_f32s(&mut out, &self.head.center);
        push_f32s(&mut out, &self.head.scale);
        out
    }

    pub fn feature_digest(&self) -> String {
        sha256_hex(self.feature_blob())
    }

    pub fn parameter_digest(&self) -> String {
        sha256_hex(self.parameter_blob())
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar {
            config: self.config.clone(),
            slice: self.slice.clone(),
            provenance: self.provenance.clone(),
            curve: self.curve.clone(),
            best_epoch: self.best_epoch,
            feature_sha256: self.feature_digest(),
            parameters_sha256: self.parameter_digest(),
        }
    }

    /// Digest of the complete artifact (sidecar and parameters).
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.sidecar()).expect("sidecar serializes"))
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        let write = |name: String, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))
        };
        write(format!("{stem}.json"), json.as_bytes())?;
        write(format!("{stem}.bin"), &self.parameter_blob())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, TrainError> {
        let read = |name: String| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))
        };
        let sidecar: ModelSidecar = serde_json::from_slice(&read(format!("{stem}.json"))?)
            .map_err(|e| TrainError::Artifact(format!("{stem}.json: {e}")))?;
        let blob = read(format!("{stem}.bin"))?;
        if sha256_hex(&blob) != sidecar.parameters_sha256 {
            return Err(TrainError::Artifact(format!("{stem}.bin does not match its recorded digest")));
        }
        Self::from_parts(sidecar, &blob)
    }

    fn from_parts(sidecar: ModelSidecar, blob: &[u8]) -> Result<Self, TrainError> {
        let cfg = &sidecar.config;
        let (w, h) = cfg.input_size();
        let mut cursor = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let mut take = |n: usize| -> Result<Vec<f32>, TrainError> {
            let v: Vec<f32> = cursor.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(TrainError::Artifact("parameter blob too short".into()))
            }
        };
        let mut convs = Vec::new();
        let mut cin = 1;
        for &cout in &cfg.architecture.widths {
            let weight = take(cout * cin * 9)?;
            let bias = take(cout)?;
            convs.push(Conv3x3 {
                in_channels: cin,
                out_channels: cout,
                weight,
                bias,
            });
            cin = cout;
        }
        let features = FeatureStage {
            input: MapShape {
                channels: 1,
                height: h,
                width: w,
            },
            convs,
            pool_grid: cfg.architecture.pool_grid,
        };
        let inputs = features.feature_len();
        let outputs = sidecar.slice.len();
        let head = LinearHead {
            inputs,
            outputs,
            weight: take(inputs * outputs)?,
            bias: take(outputs)?,
            center: take(inputs)?,
            scale: take(inputs)?,
        };
        if cursor.next().is_some() {
            return Err(TrainError::Artifact("parameter blob too long".into()));
        }
        Ok(Self {
            features,
            head,
            config: sidecar.config,
            slice: sidecar.slice,
            provenance: sidecar.provenance,
            curve: sidecar.curve,
            best_epoch: sidecar.best_epoch,
        })
    }

    fn check_input(&self, image: &GrayImage) -> Result<(), TrainError> {
        let expected = self.config.input_size();
        if (image.width, image.height) != expected {
            return Err(TrainError::Shape(format!(
                "input is {}x{}, model expects {}x{}",
                image.width, image.height, expected.0, expected.1
            )));
        }
        Ok(())
    }

    /// Output over the model's slice; probability vectors on its slots.
    pub fn predict(&self, image: &GrayImage) -> Result<Vec<f64>, TrainError> {
        self.check_input(image)?;
        let mut cache = ForwardCache::default();
        self.features
            .forward(&image.to_input(), &mut cache)
            .map_err(|e| TrainError::Shape(e.to_string()))?;
        Ok(self.output_from_features(&cache.features))
    }

    pub fn predict_batch(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>, TrainError> {
        images.iter().map(|i| self.predict(i)).collect()
    }

    pub(crate) fn output_from_features(&self, features: &[f32]) -> Vec<f64> {
        let mut raw = Vec::new();
        self.head.forward(features, &mut raw);
        normalize_output(&raw, &self.slice.slots)
    }
}

/// Identity on continuous coordinates, softmax on each slot range.
pub(crate) fn normalize_output(raw: &[f32], slots: &[Range<usize>]) -> Vec<f64> {
    let mut out: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
    for r in slots {
        let s = &mut out[r.clone()];
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in s.iter_mut() {
            *v = (*v - top).exp();
            z += *v;
        }
        for v in s.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::toy_face_schema;

    #[test]
    fn slices_follow_the_layout() {
        let s = toy_face_schema();
        let all = TargetSlice::new(&s, &TargetSpec::Complete, HeadKind::Joint).unwrap();
        assert_eq!(all.indices, (0..s.layout().len).collect::<Vec<_>>());
        assert_eq!(all.slots.len(), 3);
        let nose_reg = TargetSlice::new(&s, &TargetSpec::Local("nose".into()), HeadKind::Regression).unwrap();
        assert_eq!(nose_reg.len(), 5);
        assert!(nose_reg.slots.is_empty());
        assert!(nose_reg.names.iter().all(|n| n.starts_with("nose/")));
        let nose_cls =
            TargetSlice::new(&s, &TargetSpec::Local("nose".into()), HeadKind::Classification).unwrap();
        assert_eq!(nose_cls.slots, vec![0..3]);
        let sub = nose_cls.layout(s.layout());
        assert_eq!(sub.len, 3);
        assert_eq!(sub.region("nose").unwrap().slots[0].range, 0..3);
        assert!(sub.region("eyes").unwrap().slots.is_empty());
        let head = TargetSlice::new(&s, &TargetSpec::Local("head".into()), HeadKind::Classification).unwrap();
        assert!(head.is_empty());
    }

    #[test]
    fn config_validation() {
        let s = toy_face_schema();
        let mut c = TrainConfig::new(
            TransferMode::FeatureExtraction,
            InputSpec::Crop("nose".into()),
            TargetSpec::Local("nose".into()),
            HeadKind::Joint,
        );
        c.validate(&s).unwrap();
        c.schedule.patience = 0;
        assert!(c.validate(&s).is_err());
        c.schedule.patience = 1;
        c.schedule.decay = 1.0;
        assert!(c.validate(&s).is_err());
        c.schedule.decay = 0.5;
        c.input = InputSpec::Crop("ears".into());
        assert!(c.validate(&s).is_err());
    }

    #[test]
    fn artifact_round_trip_predicts_identically() {
        let s = toy_face_schema();
        let mut c = TrainConfig::new(
            TransferMode::FeatureExtraction,
            InputSpec::FullFrame,
            TargetSpec::Complete,
            HeadKind::Joint,
        );
        c.architecture.widths = vec![4, 8];
        let m = TrainedModel::initial(&s, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "m").unwrap();
        let back = TrainedModel::load(dir.path(), "m").unwrap();
        assert_eq!(back, m);
        let img = GrayImage::from_fn(64, 64, |x, y| ((x * 7 + y * 3) % 256) as u8);
        let a = m.predict(&img).unwrap();
        assert_eq!(a, back.predict(&img).unwrap());
        assert_eq!(a, m.predict(&img).unwrap());
        for r in &m.slice.slots {
            let sum: f64 = a[r.clone()].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            m.predict(&GrayImage::new(32, 32, 0)),
            Err(TrainError::Shape(_))
        ));
        // Corrupted blob is detected.
        fs::write(dir.path().join("m.bin"), [0u8; 8]).unwrap();
        assert!(matches!(TrainedModel::load(dir.path(), "m"), Err(TrainError::Artifact(_))));
    }
}
