//! Metrics against the mean-target baseline, the transfer-learning ablation
//! grid, constant-versus-fitted ensemble weights and the re-render
//! comparison with and without the domain adapter.

mod ablation;
mod reconstruction;
mod weights;

use std::path::Path;
use std::time::Duration;

use crate::adapt::{env_timeout, run_external};
use crate::image::GrayImage;

pub use ablation::{
    run_ablation, AblationCell, AblationConfig, AblationOutcome, AblationTable, CellFactors, InputFactor,
    LossFactor, ModelKey,
};
pub use reconstruction::{
    reconstruction_report, reconstruction_rows, ReconstructionReport, ReconstructionRow, SampleRecord,
};
pub use weights::{compare_constant_weights, ConstantWeightsRow, ConstantWeightsTable};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedder {embedder}: {message}")]
    Embedder { embedder: String, message: String },
    #[error("{0}")]
    Stage(String),
    #[error("io: {0}")]
    Io(String),
}

/// Per-coordinate mean of the target vectors.
pub fn baseline_predictor(targets: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
    let first = targets.first().ok_or(EvalError::Empty)?;
    let mut mean = vec![0.0; first.len()];
    for t in targets {
        if t.len() != mean.len() {
            return Err(EvalError::Shape("targets of different lengths".into()));
        }
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    let n = targets.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Mean absolute error over samples and the coordinates in `coords`.
pub fn mean_l1(preds: &[Vec<f64>], targets: &[Vec<f64>], coords: &[usize]) -> Result<f64, EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() || coords.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        for &c in coords {
            let (a, b) = p
                .get(c)
                .zip(t.get(c))
                .ok_or_else(|| EvalError::Shape(format!("coordinate {c} out of range")))?;
            sum += (a - b).abs();
        }
    }
    Ok(sum / (preds.len() * coords.len()) as f64)
}

/// Mean L1 of `preds` minus mean L1 of the constant `baseline`, over
/// `coords`; negative means better than the baseline.
pub fn inaccuracy_vs_baseline(
    preds: &[Vec<f64>],
    targets: &[Vec<f64>],
    baseline: &[f64],
    coords: &[usize],
) -> Result<f64, EvalError> {
    let base = vec![baseline.to_vec(); targets.len()];
    Ok(mean_l1(preds, targets, coords)? - mean_l1(&base, targets, coords)?)
}

/// Image-to-unit-vector map used to compare renders.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>, EvalError>;
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        // Constant images have no direction; give them a fixed one.
        let c = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = c);
    }
    v
}

/// Downsample to `size x size`, subtract the mean, L2-normalize.
#[derive(Debug, Clone, Copy)]
pub struct DownsampleEmbedder {
    pub size: usize,
}

impl Default for DownsampleEmbedder {
    fn default() -> Self {
        Self { size: 16 }
    }
}

impl Embedder for DownsampleEmbedder {
    fn id(&self) -> String {
        format!("downsample:{}", self.size)
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>, EvalError> {
        let small = area_downsample(image, self.size);
        let mean = small.iter().sum::<f64>() / small.len() as f64;
        Ok(normalized(small.into_iter().map(|v| v - mean).collect()))
    }
}

/// Box-filter average over the source pixels overlapping each output cell.
fn area_downsample(image: &GrayImage, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    let (sx, sy) = (image.width as f64 / size as f64, image.height as f64 / size as f64);
    for j in 0..size {
        let (y0, y1) = (j as f64 * sy, (j + 1) as f64 * sy);
        for i in 0..size {
            let (x0, x1) = (i as f64 * sx, (i + 1) as f64 * sx);
            let mut acc = 0.0;
            let mut area = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(image.height) {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(image.width) {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wx * wy * image.get(x, y) as f64;
                    area += wx * wy;
                }
            }
            out.push(acc / area.max(1e-12));
        }
    }
    out
}

/// External program run as `<cmd...> <in.png> <out.txt>`, writing the
/// embedding as whitespace-separated numbers. The result is L2-normalized.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl ExternalEmbedder {
    /// Uses the adapter timeout environment variable.
    pub fn with_env_timeout(command: Vec<String>) -> Self {
        Self {
            command,
            timeout: env_timeout(),
        }
    }

    fn err(&self, message: impl Into<String>) -> EvalError {
        EvalError::Embedder {
            embedder: self.id(),
            message: message.into(),
        }
    }

    fn parse(&self, path: &Path) -> Result<Vec<f64>, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| self.err(format!("reading output: {e}")))?;
        let v = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(format!("value {t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(self.err("empty or non-finite embedding"));
        }
        Ok(v)
    }
}

impl Embedder for ExternalEmbedder {
    fn id(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>, EvalError> {
        let dir = tempfile::tempdir().map_err(|e| self.err(format!("tempdir: {e}")))?;
        let (input, output) = (dir.path().join("in.png"), dir.path().join("out.txt"));
        image.save_png(&input).map_err(|e| self.err(e.to_string()))?;
        run_external(&self.command, self.timeout, &input, &output).map_err(|m| self.err(m))?;
        Ok(normalized(self.parse(&output)?))
    }
}

/// Cosine distance `1 - <e_a, e_b>` of the embeddings, in `[0, 2]`.
pub fn embedding_distance(embedder: &dyn Embedder, a: &GrayImage, b: &GrayImage) -> Result<f64, EvalError> {
    let (ea, eb) = (embedder.embed(a)?, embedder.embed(b)?);
    if ea.len() != eb.len() {
        return Err(EvalError::Shape("embeddings of different lengths".into()));
    }
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn baseline_cases() {
        assert!(matches!(baseline_predictor(&[]), Err(EvalError::Empty)));
        let one = vec![vec![0.3, -1.0, 1.0]];
        assert_eq!(baseline_predictor(&one).unwrap(), one[0]);
        let c = vec![vec![0.25, 0.5]; 7];
        for (a, b) in baseline_predictor(&c).unwrap().iter().zip(&c[0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn inaccuracy_cases() {
        let targets = vec![vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.5, -0.5]];
        let base = baseline_predictor(&targets).unwrap();
        let all = [0, 1];
        let same = vec![base.clone(); 3];
        assert_eq!(inaccuracy_vs_baseline(&same, &targets, &base, &all).unwrap(), 0.0);
        let perfect = inaccuracy_vs_baseline(&targets, &targets, &base, &all).unwrap();
        assert!((perfect + mean_l1(&same, &targets, &all).unwrap()).abs() < 1e-15);
        assert!(perfect < 0.0);
        // Hand case on coordinate 0 only: base = 1/6.
        let preds = vec![vec![0.5, 9.0], vec![-0.5, 9.0], vec![0.0, 9.0]];
        let model = (0.5 + 0.5 + 0.5) / 3.0;
        let baseline = ((1.0 - 1.0 / 6.0) + (1.0 + 1.0 / 6.0) + (0.5 - 1.0 / 6.0)) / 3.0;
        let d = inaccuracy_vs_baseline(&preds, &targets, &base, &[0]).unwrap();
        assert!((d - (model - baseline)).abs() < 1e-12);
        assert!(inaccuracy_vs_baseline(&preds[..2], &targets, &base, &[0]).is_err());
    }

    fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
        GrayImage::from_fn(64, 64, |_, _| rng.random())
    }

    #[test]
    fn embedding_distances() {
        let e = DownsampleEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng);
        let v = e.embed(&a).unwrap();
        assert_eq!(v.len(), 256);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(embedding_distance(&e, &a, &a).unwrap() < 1e-6);
        let neg = GrayImage::from_fn(64, 64, |x, y| 255 - a.get(x, y));
        assert!((embedding_distance(&e, &a, &neg).unwrap() - 2.0).abs() < 1e-6);
        for _ in 0..50 {
            let (x, y) = (random_image(&mut rng), random_image(&mut rng));
            let d = embedding_distance(&e, &x, &y).unwrap();
            assert_eq!(d, embedding_distance(&e, &y, &x).unwrap());
            assert!((0.0..=2.0).contains(&d));
        }
        let flat = GrayImage::new(64, 64, 90);
        let f = e.embed(&flat).unwrap();
        assert!((f.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = GrayImage::from_fn(4, 4, |x, y| if x < 2 && y < 2 { 200 } else { 0 });
        assert_eq!(area_downsample(&img, 2), vec![200.0, 0.0, 0.0, 0.0]);
        let odd = GrayImage::new(5, 3, 17);
        assert!(area_downsample(&odd, 2).iter().all(|&v| (v - 17.0).abs() < 1e-12));
    }

    #[test]
    fn external_embedder_contract() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("embed.sh");
        std::fs::write(&script, "#!/bin/sh\necho '3 4' > \"$2\"\n").unwrap();
        let e = ExternalEmbedder::with_env_timeout(vec!["sh".into(), script.display().to_string()]);
        let img = GrayImage::new(8, 8, 1);
        assert_eq!(e.embed(&img).unwrap(), vec![0.6, 0.8]);
        assert!(embedding_distance(&e, &img, &img).unwrap() < 1e-12);
        let bad = ExternalEmbedder::with_env_timeout(vec!["false".into()]);
        assert!(matches!(bad.embed(&img), Err(EvalError::Embedder { .. })));
    }
}
