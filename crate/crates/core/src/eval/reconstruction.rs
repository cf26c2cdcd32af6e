use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::IdentityAdapter;
use crate::ensemble::{ensemble_predict, EnsembleModel};
use crate::recipe::{encode, Recipe};
use crate::synth::{AugmentationSpec, DatasetManifest, Sample, ToyFace};

use super::{embedding_distance, Embedder, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: String,
    /// Mean absolute difference of the encoded recipes.
    pub l1: Option<f64>,
    /// Embedding distance between the re-render and the clean reference.
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub label: String,
    pub samples: usize,
    pub failures: usize,
    pub mean_l1: f64,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub embedder: String,
    pub dataset_sha256: String,
    pub ensemble_sha256: String,
    pub rows: Vec<ReconstructionRow>,
    pub records: Vec<SampleRecord>,
}

/// Infers a recipe per sample with `infer`, re-renders it without
/// augmentation or stylization and compares against the true recipe, both
/// in target space and through `embedder` against the clean reference
/// render. Per-sample failures are recorded and excluded from the means.
pub fn reconstruction_rows(
    label: &str,
    samples: &[Sample],
    face: &ToyFace,
    embedder: &dyn Embedder,
    infer: impl Fn(&Sample) -> Result<Recipe, String>,
) -> Result<(ReconstructionRow, Vec<SampleRecord>), EvalError> {
    let schema = face.schema();
    let neutral = AugmentationSpec::neutral();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let canvas = (s.image.width, s.image.height);
        let truth = encode(&s.recipe, schema).map_err(|e| EvalError::Stage(format!("sample {}: {e}", s.id)))?;
        let reference = face
            .render(&s.recipe, &neutral, canvas)
            .map_err(|e| EvalError::Stage(format!("reference render {}: {e}", s.id)))?
            .image;
        let outcome = infer(s).and_then(|rec| {
            let v = encode(&rec, schema).map_err(|e| format!("encode: {e}"))?;
            let l1 = v
                .values
                .iter()
                .zip(&truth.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / v.len() as f64;
            let rerender = face
                .render(&rec, &neutral, canvas)
                .map_err(|e| format!("render: {e}"))?
                .image;
            let d = embedding_distance(embedder, &rerender, &reference).map_err(|e| e.to_string())?;
            Ok((l1, d))
        });
        records.push(match outcome {
            Ok((l1, d)) => SampleRecord {
                id: s.id.clone(),
                label: label.to_string(),
                l1: Some(l1),
                distance: Some(d),
                error: None,
            },
            Err(e) => SampleRecord {
                id: s.id.clone(),
                label: label.to_string(),
                l1: None,
                distance: None,
                error: Some(e),
            },
        });
    }
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n = ok.len().max(1) as f64;
    let row = ReconstructionRow {
        label: label.to_string(),
        samples: records.len(),
        failures: records.len() - ok.len(),
        mean_l1: ok.iter().filter_map(|r| r.l1).sum::<f64>() / n,
        mean_distance: ok.iter().filter_map(|r| r.distance).sum::<f64>() / n,
    };
    Ok((row, records))
}

/// Rows for the ensemble with its adapter replaced by the identity
/// (`adapter_off`) and as configured (`adapter_on`), per requested setting.
pub fn reconstruction_report(
    ensemble: &EnsembleModel,
    dataset: &DatasetManifest,
    adapter_settings: &[bool],
    embedder: &dyn Embedder,
) -> Result<ReconstructionReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let samples = dataset.load_samples().map_err(|e| EvalError::Io(e.to_string()))?;
    let face = ToyFace::new();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &on in adapter_settings {
        let (label, model) = if on {
            ("adapter_on", ensemble.clone())
        } else {
            ("adapter_off", ensemble.with_adapter(Arc::new(IdentityAdapter)))
        };
        let (row, recs) = reconstruction_rows(label, &samples, &face, embedder, |s| {
            ensemble_predict(&model, &s.image, Some(s.landmarks)).map_err(|e| e.to_string())
        })?;
        rows.push(row);
        records.extend(recs);
    }
    Ok(ReconstructionReport {
        embedder: embedder.id(),
        dataset_sha256: dataset.digest(),
        ensemble_sha256: ensemble.digest(),
        rows,
        records,
    })
}

impl ReconstructionReport {
    pub fn row(&self, label: &str) -> Option<&ReconstructionRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "label", "l1", "distance", "error"])
            .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.id.clone(),
                r.label.clone(),
                opt(r.l1),
                opt(r.distance),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Re-render comparison (embedder {}).", self.embedder);
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>9} {:>10} {:>19}",
            "adapter", "samples", "failures", "mean_l1", "embedding_distance"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>9} {:>10.4} {:>19.4}",
                r.label, r.samples, r.failures, r.mean_l1, r.mean_distance
            );
        }
        out
    }
}
