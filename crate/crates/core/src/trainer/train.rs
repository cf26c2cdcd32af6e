use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;
use crate::losses::{self, adaptive_weights, LossBreakdown, LossHistory, LossWeights};
use crate::provenance::derive_seed;
use crate::recipe::{encode, Layout, ParameterSchema};
use crate::synth::{CropConfig, DatasetManifest};

use super::nn::{FeatureGrads, FeatureStage, ForwardCache, HeadGrads, LinearHead};
use super::{
    normalize_output, prepare_input, EpochRecord, InputSpec, TrainConfig, TrainError, TrainedModel,
    TransferMode,
};

/// One prepared input (already registered or cropped) and its full encoded
/// target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: GrayImage,
    pub target: Vec<f64>,
}

/// Window of holdout history used for adaptive term weights.
const ADAPTIVE_WINDOW: usize = 3;

/// Inputs prepared per `input` for every manifest sample, with full
/// encoded targets, in manifest order.
pub fn prepare_examples(
    dataset: &DatasetManifest,
    input: &InputSpec,
    frame: &CropConfig,
) -> Result<Vec<Example>, TrainError> {
    let schema = &dataset.schema;
    let mut examples = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset
            .load_sample(i)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        let prepared = prepare_input(&s.image, s.landmarks, input, frame)?;
        let target = encode(&s.recipe, schema)
            .map_err(|e| TrainError::Data(format!("sample {}: {e}", s.id)))?
            .values;
        examples.push(Example {
            input: prepared,
            target,
        });
    }
    Ok(examples)
}

/// Prepares inputs from the manifest, holds out a seeded fraction for the
/// plateau schedule and trains on the rest.
pub fn train(
    dataset: &DatasetManifest,
    config: &TrainConfig,
    init: Option<&TrainedModel>,
) -> Result<TrainedModel, TrainError> {
    config.validate(&dataset.schema)?;
    if dataset.is_empty() {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    let examples = prepare_examples(dataset, &config.input, &config.frame)?;
    train_prepared(&examples, &dataset.schema, config, init, dataset.digest())
}

/// [`train`] on examples already prepared for `config.input`.
pub fn train_prepared(
    examples: &[Example],
    schema: &ParameterSchema,
    config: &TrainConfig,
    init: Option<&TrainedModel>,
    dataset_sha256: String,
) -> Result<TrainedModel, TrainError> {
    let (fit, holdout) = split_holdout(examples, config);
    train_examples(&fit, &holdout, schema, config, init, dataset_sha256)
}

fn split_holdout(examples: &[Example], config: &TrainConfig) -> (Vec<Example>, Vec<Example>) {
    let n = examples.len();
    let mut k = (config.holdout_fraction * n as f64).round() as usize;
    if config.holdout_fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed("holdout", &[config.seed])));
    let mut is_holdout = vec![false; n];
    for &i in &order[..k] {
        is_holdout[i] = true;
    }
    let mut fit = Vec::with_capacity(n - k);
    let mut holdout = Vec::with_capacity(k);
    for (e, h) in examples.iter().zip(is_holdout) {
        if h {
            holdout.push(e.clone());
        } else {
            fit.push(e.clone());
        }
    }
    (fit, holdout)
}

struct Velocity {
    convs: Vec<(Vec<f32>, Vec<f32>)>,
    head: (Vec<f32>, Vec<f32>),
}

impl Velocity {
    fn new(features: &FeatureStage, head: &LinearHead) -> Self {
        Self {
            convs: features
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect(),
            head: (vec![0.0; head.weight.len()], vec![0.0; head.bias.len()]),
        }
    }
}

fn momentum_step(params: &mut [f32], grads: &[f32], vel: &mut [f32], lr: f32, mu: f32, scale: f32) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(vel.iter_mut()) {
        *v = mu * *v - lr * scale * g;
        *p += *v;
    }
}

/// Per-example loss and gradient w.r.t. the head's raw outputs.
struct LossEval<'a> {
    layout: &'a Layout,
    slots: &'a [std::ops::Range<usize>],
    pred: Vec<f64>,
    grad: Vec<f64>,
    d_raw: Vec<f32>,
}

impl<'a> LossEval<'a> {
    fn new(layout: &'a Layout, slots: &'a [std::ops::Range<usize>]) -> Self {
        Self {
            layout,
            slots,
            pred: Vec::new(),
            grad: vec![0.0; layout.len],
            d_raw: vec![0.0; layout.len],
        }
    }

    fn loss(&mut self, raw: &[f32], target: &[f64], weights: &LossWeights) -> LossBreakdown {
        self.pred = normalize_output(raw, self.slots);
        losses::evaluate(&self.pred, target, self.layout, weights)
    }

    /// Call after [`Self::loss`]; chains through the per-slot softmax.
    fn backward(&mut self, target: &[f64], weights: &LossWeights) -> &[f32] {
        losses::gradient(&self.pred, target, self.layout, weights, &mut self.grad);
        let mut d: Vec<f64> = self.grad.clone();
        for r in self.slots {
            let p = &self.pred[r.clone()];
            let g = &self.grad[r.clone()];
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for ((out, &pi), &gi) in d[r.clone()].iter_mut().zip(p).zip(g) {
                *out = pi * (gi - dot);
            }
        }
        for (o, v) in self.d_raw.iter_mut().zip(d) {
            *o = v as f32;
        }
        &self.d_raw
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let k = parts.first().map_or(0, |p| p.regression.len());
    let mut out = LossBreakdown {
        total: 0.0,
        regression: vec![0.0; k],
        classification: vec![0.0; k],
    };
    for p in parts {
        out.total += p.total;
        for i in 0..k {
            out.regression[i] += p.regression[i];
            out.classification[i] += p.classification[i];
        }
    }
    out.total /= n;
    out.regression.iter_mut().for_each(|x| *x /= n);
    out.classification.iter_mut().for_each(|x| *x /= n);
    out
}

fn check_init(init: &TrainedModel, config: &TrainConfig) -> Result<(), TrainError> {
    let a = &init.config;
    let mismatch = |what: &str| Err(TrainError::InitMismatch(what.to_string()));
    if a.input != config.input {
        return mismatch("input spec");
    }
    if a.target != config.target || a.head != config.head {
        return mismatch("target slice");
    }
    if a.architecture != config.architecture {
        return mismatch("architecture");
    }
    if a.frame != config.frame {
        return mismatch("registration frame or crop rectangles");
    }
    Ok(())
}

/// Trains on prepared examples. `holdout` drives the plateau schedule; when
/// empty the training loss is used instead.
pub fn train_examples(
    fit: &[Example],
    holdout: &[Example],
    schema: &ParameterSchema,
    config: &TrainConfig,
    init: Option<&TrainedModel>,
    dataset_sha256: String,
) -> Result<TrainedModel, TrainError> {
    config.validate(schema)?;
    if fit.is_empty() {
        return Err(TrainError::Data("no training examples".into()));
    }
    let mut model = match (config.mode, init) {
        (TransferMode::FineTuning, None) => return Err(TrainError::MissingInit),
        (TransferMode::FineTuning, Some(m)) => {
            check_init(m, config)?;
            if m.config.mode != TransferMode::FeatureExtraction {
                return Err(TrainError::InitMismatch(
                    "fine-tuning starts from a feature-extraction model".into(),
                ));
            }
            m.clone()
        }
        (TransferMode::FeatureExtraction, Some(m)) => {
            check_init(m, config)?;
            m.clone()
        }
        (TransferMode::FeatureExtraction, None) => TrainedModel::initial(schema, config)?,
    };
    model.config = config.clone();
    model.provenance.dataset_sha256 = dataset_sha256;
    model.provenance.config_sha256 = config.digest();
    model.provenance.seed = config.seed;
    model.provenance.init_sha256 = init.map(|m| m.digest());
    model.curve.clear();

    let (w, h) = config.input_size();
    for e in fit.iter().chain(holdout) {
        if (e.input.width, e.input.height) != (w, h) {
            return Err(TrainError::Shape(format!(
                "example is {}x{}, config expects {w}x{h}",
                e.input.width, e.input.height
            )));
        }
        if e.target.len() != schema.layout().len {
            return Err(TrainError::Shape("target length does not match the schema".into()));
        }
    }

    let layout = model.slice.layout(schema.layout());
    let base_weights = match &config.loss_weights {
        Some(w) => w.clone(),
        None => LossWeights::uniform(schema, config.regression_norm),
    };
    let base_weights = LossWeights {
        regression_norm: config.regression_norm,
        ..base_weights
    };
    base_weights
        .validate(&layout)
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let slice_target = |e: &Example| -> Vec<f64> { model.slice.indices.iter().map(|&i| e.target[i]).collect() };
    let fit_targets: Vec<Vec<f64>> = fit.iter().map(slice_target).collect();
    let hold_targets: Vec<Vec<f64>> = holdout.iter().map(slice_target).collect();
    let fit_inputs: Vec<Vec<f32>> = fit.iter().map(|e| e.input.to_input()).collect();
    let hold_inputs: Vec<Vec<f32>> = holdout.iter().map(|e| e.input.to_input()).collect();

    let frozen = config.mode == TransferMode::FeatureExtraction;
    // Frozen features never change: compute them once.
    let feature_cache = |inputs: &[Vec<f32>]| -> Result<Vec<Vec<f32>>, TrainError> {
        let mut cache = ForwardCache::default();
        inputs
            .iter()
            .map(|x| {
                model
                    .features
                    .forward(x, &mut cache)
                    .map_err(|e| TrainError::Shape(e.to_string()))?;
                Ok(cache.features.clone())
            })
            .collect()
    };
    let (fit_feats, hold_feats) = if frozen {
        (feature_cache(&fit_inputs)?, feature_cache(&hold_inputs)?)
    } else {
        (Vec::new(), Vec::new())
    };

    if init.is_none() {
        // Only reachable in feature-extraction mode.
        model.head.standardize(&fit_feats);
    }

    let slots = model.slice.slots.clone();
    let mut eval = LossEval::new(&layout, &slots);
    let mut velocity = Velocity::new(&model.features, &model.head);
    let mut head_grads = HeadGrads::zeros_like(&model.head);
    let mut feat_grads = FeatureGrads::zeros_like(&model.features);
    let mut cache = ForwardCache::default();
    let mut raw = Vec::new();
    let mut d_features = Vec::new();

    let sched = &config.schedule;
    let mut lr = sched.learning_rate;
    let mut weights = base_weights.clone();
    let mut history = LossHistory::for_layout(&layout);
    let mut best: Option<(f64, usize, FeatureStage, LinearHead)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..fit.len()).collect();

    for epoch in 0..sched.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed("epoch", &[config.seed, epoch as u64])));
        let mut train_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            head_grads.clear();
            if !frozen {
                feat_grads.clear();
            }
            for &i in batch {
                let features: &[f32] = if frozen {
                    &fit_feats[i]
                } else {
                    model
                        .features
                        .forward(&fit_inputs[i], &mut cache)
                        .map_err(|e| TrainError::Shape(e.to_string()))?;
                    &cache.features
                };
                model.head.forward(features, &mut raw);
                train_total += eval.loss(&raw, &fit_targets[i], &weights).total;
                let d_raw = eval.backward(&fit_targets[i], &weights);
                if frozen {
                    model.head.backward(features, d_raw, &mut head_grads, None);
                } else {
                    model
                        .head
                        .backward(features, d_raw, &mut head_grads, Some(&mut d_features));
                    model.features.backward(&cache, &d_features, &mut feat_grads);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let (lr32, mu) = (lr as f32, sched.momentum as f32);
            momentum_step(&mut model.head.weight, &head_grads.weight, &mut velocity.head.0, lr32, mu, scale);
            momentum_step(&mut model.head.bias, &head_grads.bias, &mut velocity.head.1, lr32, mu, scale);
            if !frozen {
                for ((conv, g), v) in model
                    .features
                    .convs
                    .iter_mut()
                    .zip(&feat_grads.convs)
                    .zip(velocity.convs.iter_mut())
                {
                    momentum_step(&mut conv.weight, &g.weight, &mut v.0, lr32, mu, scale);
                    momentum_step(&mut conv.bias, &g.bias, &mut v.1, lr32, mu, scale);
                }
            }
        }
        let train_loss = train_total / fit.len() as f64;

        let (inputs, feats, targets) = if holdout.is_empty() {
            (&fit_inputs, &fit_feats, &fit_targets)
        } else {
            (&hold_inputs, &hold_feats, &hold_targets)
        };
        let mut parts = Vec::with_capacity(targets.len());
        for i in 0..targets.len() {
            let features: &[f32] = if frozen {
                &feats[i]
            } else {
                model
                    .features
                    .forward(&inputs[i], &mut cache)
                    .map_err(|e| TrainError::Shape(e.to_string()))?;
                &cache.features
            };
            model.head.forward(features, &mut raw);
            parts.push(eval.loss(&raw, &targets[i], &base_weights));
        }
        let breakdown = mean_breakdown(&parts);
        let holdout_loss = breakdown.total;
        if !holdout_loss.is_finite() {
            return Err(TrainError::Data(format!("holdout loss diverged at epoch {epoch}")));
        }
        history.push(&breakdown);
        model.curve.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            holdout_loss,
            holdout_breakdown: breakdown,
        });

        let improved = match &best {
            None => true,
            Some((b, ..)) => holdout_loss < b - sched.min_delta * b.abs(),
        };
        if improved {
            best = Some((holdout_loss, epoch, model.features.clone(), model.head.clone()));
            stale = 0;
        } else {
            if holdout_loss < best.as_ref().expect("set after first epoch").0 {
                let b = best.as_mut().expect("set");
                b.0 = holdout_loss;
                b.1 = epoch;
                b.2 = model.features.clone();
                b.3 = model.head.clone();
            }
            stale += 1;
            if stale >= sched.patience {
                lr *= sched.decay;
                stale = 0;
                if lr < sched.min_learning_rate {
                    break;
                }
            }
        }

        if let Some(t) = config.adaptive_temperature {
            if epoch + 1 >= 2 {
                let mut window = history.clone();
                for h in window.regression.iter_mut().chain(window.classification.iter_mut()).flatten() {
                    let start = h.len().saturating_sub(ADAPTIVE_WINDOW);
                    h.drain(..start);
                }
                let a = adaptive_weights(&window, t, config.regression_norm)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                // Adaptive factors rescale the configured weights.
                weights = LossWeights {
                    v: base_weights.v.iter().zip(&a.v).map(|(b, x)| b * x).collect(),
                    w: base_weights.w.iter().zip(&a.w).map(|(b, x)| b * x).collect(),
                    regression_norm: config.regression_norm,
                };
            }
        }
    }

    let (_, best_epoch, features, head) = best.expect("at least one epoch");
    model.features = features;
    model.head = head;
    model.best_epoch = best_epoch;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::{ParamSpec, RegionSpec, SchemaDoc, SlotSpec};
    use crate::recipe::schema_tests::slot;
    use crate::trainer::{Architecture, HeadKind, InputSpec, TargetSpec};

    fn small_schema() -> ParameterSchema {
        ParameterSchema::new(SchemaDoc {
            regions: vec![
                RegionSpec {
                    name: "a".into(),
                    params: vec![ParamSpec::new("x", -1.0, 1.0), ParamSpec::new("y", -1.0, 1.0)],
                    slots: vec![slot("s", 3)],
                },
                RegionSpec {
                    name: "b".into(),
                    params: vec![ParamSpec::new("z", -1.0, 1.0)],
                    slots: vec![SlotSpec { default: 1, ..slot("t", 2) }],
                },
            ],
            scale_param_name: None,
            scale_coupling: None,
        })
        .unwrap()
    }

    fn config(mode: TransferMode) -> TrainConfig {
        let mut c = TrainConfig::new(mode, InputSpec::Crop("nose".into()), TargetSpec::Complete, HeadKind::Joint);
        c.frame.local_size = (16, 16);
        c.architecture = Architecture {
            widths: vec![4, 8],
            pool_grid: 1,
        };
        c.schedule.max_epochs = 6;
        c.batch_size = 8;
        c.seed = 5;
        c
    }

    fn noise_examples(n: usize, target: impl Fn(usize) -> Vec<f64>) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                input: GrayImage::from_fn(16, 16, |x, y| ((x * 17 + y * 31 + i * 57) % 251) as u8),
                target: target(i),
            })
            .collect()
    }

    #[test]
    fn fine_tuning_requires_init() {
        let s = small_schema();
        let ex = noise_examples(4, |_| vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            train_examples(&ex, &[], &s, &config(TransferMode::FineTuning), None, String::new()),
            Err(TrainError::MissingInit)
        ));
    }

    #[test]
    fn feature_extraction_freezes_features() {
        let s = small_schema();
        let ex = noise_examples(24, |i| {
            let mut t = vec![(i % 5) as f64 / 5.0 - 0.4, 0.1, 0.0, 0.0, 0.0, -0.2, 1.0, 0.0];
            t[2 + i % 3] = 1.0;
            t
        });
        let c = config(TransferMode::FeatureExtraction);
        let before = TrainedModel::initial(&s, &c).unwrap();
        let m = train_examples(&ex[..18], &ex[18..], &s, &c, None, String::new()).unwrap();
        assert_eq!(m.feature_digest(), before.feature_digest());
        assert_ne!(m.parameter_digest(), before.parameter_digest());

        let mut ft = config(TransferMode::FineTuning);
        ft.schedule.learning_rate = 0.002;
        let tuned = train_examples(&ex[..18], &ex[18..], &s, &ft, Some(&m), String::new()).unwrap();
        assert_ne!(tuned.feature_digest(), m.feature_digest());
        assert_eq!(tuned.provenance.init_sha256, Some(m.digest()));
        // Best-so-far holdout loss never increases.
        let mut best = f64::INFINITY;
        for r in &tuned.curve {
            best = best.min(r.holdout_loss);
        }
        assert_eq!(best, tuned.curve[tuned.best_epoch].holdout_loss);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = small_schema();
        let ex = noise_examples(20, |i| {
            let mut t = vec![0.3, -0.3 + 0.01 * i as f64, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0];
            t[2 + i % 3] = 1.0;
            t
        });
        let fe = config(TransferMode::FeatureExtraction);
        let a = train_examples(&ex[..16], &ex[16..], &s, &fe, None, "d".into()).unwrap();
        let b = train_examples(&ex[..16], &ex[16..], &s, &fe, None, "d".into()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let ft = config(TransferMode::FineTuning);
        let c = train_examples(&ex[..16], &ex[16..], &s, &ft, Some(&a), "d".into()).unwrap();
        let d = train_examples(&ex[..16], &ex[16..], &s, &ft, Some(&a), "d".into()).unwrap();
        assert_eq!(c.digest(), d.digest());
        assert_eq!(c.curve.last().unwrap().holdout_loss, d.curve.last().unwrap().holdout_loss);
    }

    #[test]
    fn constant_targets_are_learned() {
        let s = small_schema();
        let c_vec = vec![0.42, -0.7, 0.0, 1.0, 0.0, 0.25, 1.0, 0.0];
        let ex = noise_examples(32, |_| c_vec.clone());
        let mut cfg = config(TransferMode::FeatureExtraction);
        cfg.regression_norm = crate::losses::RegressionNorm::L2;
        cfg.schedule.max_epochs = 200;
        cfg.schedule.learning_rate = 0.01;
        cfg.schedule.min_learning_rate = 1e-6;
        let m = train_examples(&ex, &[], &s, &cfg, None, String::new()).unwrap();
        for e in &ex {
            let p = m.predict(&e.input).unwrap();
            for (k, (a, b)) in p.iter().zip(&c_vec).enumerate() {
                assert!((a - b).abs() < 1e-2, "coord {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn local_classification_head() {
        let s = small_schema();
        let ex = noise_examples(16, |i| {
            let mut t = vec![0.0; 8];
            t[2 + i % 3] = 1.0;
            t[6 + i % 2] = 1.0;
            t
        });
        let mut cfg = config(TransferMode::FeatureExtraction);
        cfg.target = TargetSpec::Local("a".into());
        cfg.head = HeadKind::Classification;
        let m = train_examples(&ex, &[], &s, &cfg, None, String::new()).unwrap();
        assert_eq!(m.slice.indices, vec![2, 3, 4]);
        let p = m.predict(&ex[0].input).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adaptive_weighting_runs() {
        let s = small_schema();
        let ex = noise_examples(16, |i| {
            let mut t = vec![0.1 * (i % 3) as f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
            t[2 + i % 3] = 1.0;
            t
        });
        let mut cfg = config(TransferMode::FeatureExtraction);
        cfg.adaptive_temperature = Some(0.5);
        let m = train_examples(&ex[..12], &ex[12..], &s, &cfg, None, String::new()).unwrap();
        assert!(m.curve.iter().all(|r| r.holdout_loss.is_finite()));
    }
}
