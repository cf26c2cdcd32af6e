//! Per-coordinate blending of an aggregate full-frame model with local
//! region models, and the inference pipeline built on it.
//!
//! Each target coordinate is a sum-to-one combination of the models that
//! predict it, fitted by least squares on prediction matrices. Probability
//! coordinates of discrete slots are blended like continuous ones and
//! decoded by argmax.

mod fit;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapter_from_id, register, registration_transform, DomainAdapter};
use crate::image::GrayImage;
use crate::provenance::sha256_hex;
use crate::recipe::{decode, ParameterSchema, Recipe};
use crate::synth::{crop_region, Point};
use crate::trainer::{InputSpec, TrainedModel};

pub use fit::{fit_ensemble, fit_weights_general, fit_weights_pair, EnsembleWeights, MemberMatrices};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("no model predicts coordinate {0}")]
    NoContributors(String),
    #[error("inconsistent ensemble: {0}")]
    Inconsistent(String),
    /// Failure inside the inference pipeline, tagged with the stage name.
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("io: {0}")]
    Io(String),
}

fn stage(stage: impl Into<String>, message: impl ToString) -> EnsembleError {
    EnsembleError::Stage {
        stage: stage.into(),
        message: message.to_string(),
    }
}

/// A trained model with the id its weights are keyed by.
#[derive(Debug, Clone)]
pub struct Member {
    pub id: String,
    pub model: TrainedModel,
}

/// Aggregate plus local models, their blending weights and the adapter run
/// on raw inputs. Immutable once built.
#[derive(Clone)]
pub struct EnsembleModel {
    schema: ParameterSchema,
    aggregate: Member,
    locals: Vec<Member>,
    weights: EnsembleWeights,
    adapter: Arc<dyn DomainAdapter>,
}

impl std::fmt::Debug for EnsembleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleModel")
            .field("aggregate", &self.aggregate.id)
            .field("locals", &self.locals.iter().map(|m| &m.id).collect::<Vec<_>>())
            .field("adapter", &self.adapter.id())
            .finish()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleManifest {
    schema_sha256: String,
    aggregate: String,
    locals: Vec<String>,
    adapter: String,
    weights: EnsembleWeights,
    member_sha256: Vec<String>,
}

impl EnsembleModel {
    pub fn new(
        schema: ParameterSchema,
        aggregate: Member,
        locals: Vec<Member>,
        weights: EnsembleWeights,
        adapter: Arc<dyn DomainAdapter>,
    ) -> Result<Self, EnsembleError> {
        if aggregate.model.config.input != InputSpec::FullFrame {
            return Err(EnsembleError::Inconsistent(format!(
                "aggregate {} must take full-frame input",
                aggregate.id
            )));
        }
        let mut ids = vec![aggregate.id.as_str()];
        for m in &locals {
            if ids.contains(&m.id.as_str()) {
                return Err(EnsembleError::Inconsistent(format!("duplicate model id {}", m.id)));
            }
            ids.push(&m.id);
            if m.model.config.frame.registration != aggregate.model.config.frame.registration {
                return Err(EnsembleError::Inconsistent(format!(
                    "model {} uses a different registration frame",
                    m.id
                )));
            }
        }
        let model = Self {
            schema,
            aggregate,
            locals,
            weights,
            adapter,
        };
        let coords = model.schema.layout().names.clone();
        model.weights.validate(&model.member_columns(), &coords)?;
        Ok(model)
    }

    pub fn schema(&self) -> &ParameterSchema {
        &self.schema
    }

    pub fn weights(&self) -> &EnsembleWeights {
        &self.weights
    }

    pub fn adapter(&self) -> &dyn DomainAdapter {
        self.adapter.as_ref()
    }

    /// Aggregate first, then locals.
    pub fn members(&self) -> impl Iterator<Item = &Member> {
        std::iter::once(&self.aggregate).chain(&self.locals)
    }

    fn member_columns(&self) -> Vec<(String, Vec<String>)> {
        self.members()
            .map(|m| (m.id.clone(), m.model.slice.names.clone()))
            .collect()
    }

    /// Same models and weights behind a different adapter.
    pub fn with_adapter(&self, adapter: Arc<dyn DomainAdapter>) -> Self {
        Self {
            adapter,
            ..self.clone()
        }
    }

    /// Same models and adapter with new weights.
    pub fn with_weights(&self, weights: EnsembleWeights) -> Result<Self, EnsembleError> {
        Self::new(
            self.schema.clone(),
            self.aggregate.clone(),
            self.locals.clone(),
            weights,
            self.adapter.clone(),
        )
    }

    /// Raw outputs of every member on one image, in member order.
    pub fn predict_members(
        &self,
        image: &GrayImage,
        landmarks: Option<[Point; 2]>,
    ) -> Result<Vec<Vec<f64>>, EnsembleError> {
        let adapted = self
            .adapter
            .adapt(image)
            .map_err(|e| stage("adapter", e))?;
        if (adapted.width, adapted.height) != (image.width, image.height) {
            return Err(stage("adapter", "output size differs from input"));
        }
        let [left, right] = landmarks.ok_or_else(|| stage("registration", "eye landmarks missing"))?;
        let frame = &self.aggregate.model.config.frame;
        registration_transform(&adapted, left, right, &frame.registration)
            .map_err(|e| stage("registration", e))?;
        let (registered, _) =
            register(&adapted, left, right, &frame.registration).map_err(|e| stage("registration", e))?;
        let mut out = Vec::with_capacity(self.locals.len() + 1);
        for m in self.members() {
            let cfg = &m.model.config;
            let input = match &cfg.input {
                InputSpec::FullFrame => registered.clone(),
                InputSpec::Crop(region) => crop_region(&adapted, [left, right], region, &cfg.frame)
                    .map_err(|e| stage(format!("crop:{region}"), e))?,
            };
            out.push(
                m.model
                    .predict(&input)
                    .map_err(|e| stage(format!("predict:{}", m.id), e))?,
            );
        }
        Ok(out)
    }

    /// Blends member outputs into a full target vector.
    pub fn blend(&self, outputs: &[Vec<f64>]) -> Result<Vec<f64>, EnsembleError> {
        let layout = self.schema.layout();
        let mut v = vec![0.0; layout.len];
        for (j, coord) in layout.names.iter().enumerate() {
            let w = self.weights.for_coord(coord).map_err(|e| stage("blend", e))?;
            for (m, out) in self.members().zip(outputs) {
                if let (Some(&wi), Some(k)) = (w.get(&m.id), m.model.slice.names.iter().position(|n| n == coord)) {
                    v[j] += wi * out[k];
                }
            }
        }
        Ok(v)
    }

    /// Blended target vector for one raw image.
    pub fn predict_vector(&self, image: &GrayImage, landmarks: Option<[Point; 2]>) -> Result<Vec<f64>, EnsembleError> {
        self.blend(&self.predict_members(image, landmarks)?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.manifest()).expect("manifest serializes"))
    }

    fn manifest(&self) -> EnsembleManifest {
        EnsembleManifest {
            schema_sha256: sha256_hex(self.schema.to_json()),
            aggregate: self.aggregate.id.clone(),
            locals: self.locals.iter().map(|m| m.id.clone()).collect(),
            adapter: self.adapter.id(),
            weights: self.weights.clone(),
            member_sha256: self.members().map(|m| m.model.digest()).collect(),
        }
    }

    /// Writes `ensemble.json`, `schema.json` and every member under
    /// `models/`.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        let io = |e: std::io::Error| EnsembleError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir.join("models")).map_err(io)?;
        for m in self.members() {
            m.model
                .save(&dir.join("models"), &m.id)
                .map_err(|e| EnsembleError::Io(e.to_string()))?;
        }
        fs::write(dir.join("schema.json"), self.schema.to_json()).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(dir.join("ensemble.json"), json).map_err(io)
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| EnsembleError::Io(format!("{}: {e}", p.display())))
        };
        let manifest: EnsembleManifest = serde_json::from_str(&read("ensemble.json")?)
            .map_err(|e| EnsembleError::Io(format!("ensemble.json: {e}")))?;
        let schema_text = read("schema.json")?;
        if sha256_hex(&schema_text) != manifest.schema_sha256 {
            return Err(EnsembleError::Inconsistent("schema.json does not match its recorded digest".into()));
        }
        let schema =
            ParameterSchema::from_json(&schema_text).map_err(|e| EnsembleError::Io(format!("schema.json: {e}")))?;
        let load = |id: &String| -> Result<Member, EnsembleError> {
            let model =
                TrainedModel::load(&dir.join("models"), id).map_err(|e| EnsembleError::Io(e.to_string()))?;
            Ok(Member { id: id.clone(), model })
        };
        let aggregate = load(&manifest.aggregate)?;
        let locals = manifest.locals.iter().map(load).collect::<Result<Vec<_>, _>>()?;
        let adapter: Arc<dyn DomainAdapter> = adapter_from_id(&manifest.adapter)
            .map_err(|e| stage("adapter", e))?
            .into();
        let model = Self::new(schema, aggregate, locals, manifest.weights.clone(), adapter)?;
        let digests: Vec<String> = model.members().map(|m| m.model.digest()).collect();
        if digests != manifest.member_sha256 {
            return Err(EnsembleError::Inconsistent("member models do not match recorded digests".into()));
        }
        Ok(model)
    }
}

/// Adapter, registration, per-model prediction, blending and argmax
/// decoding. Errors carry the name of the failing stage.
pub fn ensemble_predict(
    model: &EnsembleModel,
    image: &GrayImage,
    landmarks: Option<[Point; 2]>,
) -> Result<Recipe, EnsembleError> {
    let v = model.predict_vector(image, landmarks)?;
    decode(&v, &model.schema).map_err(|e| stage("decode", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::IdentityAdapter;
    use crate::recipe::encode;
    use crate::synth::{canonical_eyes, toy_face_schema, ToyFace};
    use crate::trainer::{Architecture, HeadKind, TargetSpec, TrainConfig, TransferMode};
    use std::collections::BTreeMap;

    fn model(input: InputSpec, target: TargetSpec, seed: u64) -> TrainedModel {
        let s = toy_face_schema();
        let mut c = TrainConfig::new(TransferMode::FeatureExtraction, input, target, HeadKind::Joint);
        c.architecture = Architecture {
            widths: vec![2, 2],
            pool_grid: 1,
        };
        c.seed = seed;
        let mut m = TrainedModel::initial(&s, &c).unwrap();
        // Distinct, input-dependent outputs.
        for (i, w) in m.head.weight.iter_mut().enumerate() {
            *w = ((i * 7919) % 13) as f32 / 6.0 - 1.0;
        }
        m
    }

    fn weights_on_locals(s: &ParameterSchema, locals: &[Member], c: f64) -> EnsembleWeights {
        let mut coords = BTreeMap::new();
        for name in &s.layout().names {
            let local = locals.iter().find(|m| m.model.slice.names.contains(name));
            let w: BTreeMap<String, f64> = match local {
                Some(l) => [("agg".to_string(), 1.0 - c), (l.id.clone(), c)].into(),
                None => [("agg".to_string(), 1.0)].into(),
            };
            coords.insert(name.clone(), w);
        }
        EnsembleWeights { coords }
    }

    fn ensemble(c: f64) -> EnsembleModel {
        let s = toy_face_schema();
        let agg = Member {
            id: "agg".into(),
            model: model(InputSpec::FullFrame, TargetSpec::Complete, 1),
        };
        let locals: Vec<Member> = ["eyes", "nose", "mouth"]
            .iter()
            .enumerate()
            .map(|(i, r)| Member {
                id: format!("local-{r}"),
                model: model(InputSpec::Crop(r.to_string()), TargetSpec::Local(r.to_string()), 10 + i as u64),
            })
            .collect();
        let w = weights_on_locals(&s, &locals, c);
        EnsembleModel::new(s, agg, locals, w, Arc::new(IdentityAdapter)).unwrap()
    }

    fn sample() -> (GrayImage, [Point; 2]) {
        let face = ToyFace::new();
        let r = crate::recipe::Recipe::defaults(face.schema());
        let img = face.render(&r, &crate::synth::AugmentationSpec::neutral(), (64, 64)).unwrap().image;
        (img, canonical_eyes(64, 64))
    }

    #[test]
    fn reductions_to_single_models() {
        let (img, eyes) = sample();
        let e1 = ensemble(1.0);
        let outs = e1.predict_members(&img, Some(eyes)).unwrap();
        let v = e1.blend(&outs).unwrap();
        let layout = e1.schema().layout();
        for (m, out) in e1.members().zip(&outs).skip(1) {
            for (k, name) in m.model.slice.names.iter().enumerate() {
                assert_eq!(v[layout.index_of(name).unwrap()], out[k]);
            }
        }
        let e0 = ensemble(0.0);
        let v0 = e0.predict_vector(&img, Some(eyes)).unwrap();
        assert_eq!(v0, outs[0]);
        let agg_only = decode(&outs[0], e0.schema()).unwrap();
        assert_eq!(ensemble_predict(&e0, &img, Some(eyes)).unwrap(), agg_only);
        let rec = ensemble_predict(&e1, &img, Some(eyes)).unwrap();
        assert!(encode(&rec, e1.schema()).is_ok());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let (img, _) = sample();
        let e = ensemble(0.5);
        let err = ensemble_predict(&e, &img, None).unwrap_err();
        assert!(matches!(err, EnsembleError::Stage { ref stage, .. } if stage == "registration"), "{err}");
        let err = ensemble_predict(&e, &img, Some([(10.0, 10.0), (10.0, 10.0)])).unwrap_err();
        assert!(matches!(err, EnsembleError::Stage { ref stage, .. } if stage == "registration"), "{err}");
        let ext: Arc<dyn DomainAdapter> = Arc::new(crate::adapt::ExternalAdapter::new(
            vec!["false".into()],
            std::time::Duration::from_secs(5),
        ));
        let err = ensemble_predict(&e.with_adapter(ext), &img, Some(canonical_eyes(64, 64))).unwrap_err();
        assert!(matches!(err, EnsembleError::Stage { ref stage, .. } if stage == "adapter"), "{err}");
    }

    #[test]
    fn construction_checks_weights() {
        let e = ensemble(0.5);
        let mut w = e.weights().clone();
        w.coords.get_mut("nose/width").unwrap().insert("agg".into(), 0.9);
        assert!(e.with_weights(w.clone()).is_err());
        w.coords.remove("nose/width");
        assert!(matches!(e.with_weights(w), Err(EnsembleError::NoContributors(_))));
    }

    #[test]
    fn save_and_load_round_trip() {
        let (img, eyes) = sample();
        let e = ensemble(0.3);
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        let back = EnsembleModel::load(dir.path()).unwrap();
        assert_eq!(back.digest(), e.digest());
        assert_eq!(
            back.predict_vector(&img, Some(eyes)).unwrap(),
            e.predict_vector(&img, Some(eyes)).unwrap()
        );
    }
}
