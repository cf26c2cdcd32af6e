//! Seeded synthetic corpus generation and the on-disk manifest.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/schema.json      parameter schema the recipes validate against
//! <dir>/meta.json        ManifestMeta
//! <dir>/manifest.jsonl   one ManifestEntry per line, in index order
//! <dir>/images/<id>.png  8-bit grayscale renders
//! ```
//!
//! Any exporter writing this layout can feed the rest of the pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::ToyStylizer;
use crate::image::GrayImage;
use crate::provenance::{derive_seed, sha256_hex, sha256_parts};
use crate::recipe::{normalize_scale, parse_mhm, serialize_mhm, ParameterSchema, Recipe};

use super::{AugmentationRanges, AugmentationSpec, Point, SynthError, ToyFace};

pub const GENERATOR_VERSION: &str = concat!("toyface-", env!("CARGO_PKG_VERSION"));

const SCHEMA_FILE: &str = "schema.json";
const META_FILE: &str = "meta.json";
const ENTRIES_FILE: &str = "manifest.jsonl";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub canvas: (usize, usize),
    pub ranges: AugmentationRanges,
    /// Fold the global scale into the coupled parameters before rendering.
    pub normalize_scale: bool,
    /// Posterize every render to this many levels (the stylized domain).
    pub style_levels: Option<u32>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            canvas: (64, 64),
            ranges: AugmentationRanges::default(),
            normalize_scale: true,
            style_levels: None,
        }
    }
}

impl GenerationOptions {
    /// Identifier of the image style, as understood by
    /// [`crate::adapt::inverse_adapter_for`].
    pub fn style_id(&self) -> String {
        match self.style_levels {
            Some(l) => format!("posterize:{l}"),
            None => "identity".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub recipe: Recipe,
    pub augmentation: AugmentationSpec,
    pub landmarks: [Point; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub image_path: String,
    /// Digest of the PNG file bytes.
    pub image_sha256: String,
    /// Canonical mhm text.
    pub recipe: String,
    pub augmentation: AugmentationSpec,
    pub landmarks: [Point; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub generator_version: String,
    pub master_seed: u64,
    pub count: usize,
    pub schema_sha256: String,
    pub options: GenerationOptions,
    /// Digest of the pipeline configuration that requested the run, if any.
    pub config_sha256: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub schema: ParameterSchema,
    pub meta: ManifestMeta,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest over schema, metadata and entries (which pin every image).
    pub fn digest(&self) -> String {
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        let entries = entries_text(&self.entries);
        sha256_parts([self.schema.to_json().as_bytes(), meta.as_bytes(), entries.as_bytes()])
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.dir.join(&self.entries[index].image_path)
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample, SynthError> {
        let e = &self.entries[index];
        let image = GrayImage::load_png(&self.image_path(index))
            .map_err(|err| SynthError::Io(err.to_string()))?;
        Ok(Sample {
            id: e.id.clone(),
            image,
            recipe: parse_mhm(&e.recipe, &self.schema)?,
            augmentation: e.augmentation,
            landmarks: e.landmarks,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>, SynthError> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Same manifest restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        let mut out = self.clone();
        out.entries = indices.iter().map(|&i| self.entries[i].clone()).collect();
        out.meta.count = out.entries.len();
        out
    }
}

fn entries_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("entry serializes"));
        s.push('\n');
    }
    s
}

/// Per-sample seed; depends only on the master seed and the index.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    derive_seed("toyface-sample", &[master_seed, index])
}

/// Rounds every continuous value to the canonical 6 decimals, so the recipe
/// stored in the manifest is exactly the one that was rendered.
fn canonical_values(recipe: &mut Recipe) {
    for v in recipe.continuous.values_mut() {
        *v = format!("{v:.6}").parse().expect("formatted float");
        if *v == 0.0 {
            *v = 0.0;
        }
    }
}

/// Continuous parameters uniform in `[-1, 1]` (also for parameters declared
/// wider to leave room for scale folding), discrete options uniform.
fn draw_recipe(schema: &ParameterSchema, rng: &mut ChaCha8Rng) -> Recipe {
    let mut recipe = Recipe::defaults(schema);
    for name in schema.param_names() {
        let spec = schema.param(&name).expect("listed parameter");
        let v = rng.random_range(spec.min.max(-1.0)..=spec.max.min(1.0));
        recipe.continuous.insert(name, v);
    }
    for slot in schema.slot_names() {
        let opts = &schema.slot(slot).expect("listed slot").options;
        let k = rng.random_range(0..opts.len());
        recipe.discrete.insert(slot.to_string(), opts[k].guid.clone());
    }
    recipe
}

/// Draws and renders sample `index`.
pub fn generate_sample(
    face: &ToyFace,
    master_seed: u64,
    index: u64,
    options: &GenerationOptions,
) -> Result<Sample, SynthError> {
    let schema = face.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(master_seed, index));
    let mut recipe = draw_recipe(schema, &mut rng);
    let augmentation = options.ranges.sample(&mut rng);
    if options.normalize_scale {
        recipe = normalize_scale(&recipe, schema)?;
    }
    canonical_values(&mut recipe);
    let mut rendered = face.render(&recipe, &augmentation, options.canvas)?;
    if let Some(levels) = options.style_levels {
        let s = ToyStylizer::new(levels).map_err(|e| SynthError::Augmentation(e.to_string()))?;
        rendered.image = s.apply(&rendered.image);
    }
    Ok(Sample {
        id: format!("{index:06}"),
        image: rendered.image,
        recipe,
        augmentation,
        landmarks: rendered.landmarks,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io(format!("{}: {e}", path.display()))
}

fn write_sample(
    face: &ToyFace,
    master_seed: u64,
    index: usize,
    options: &GenerationOptions,
    dir: &Path,
) -> Result<ManifestEntry, SynthError> {
    let s = generate_sample(face, master_seed, index as u64, options)?;
    let rel = format!("{IMAGE_DIR}/{}.png", s.id);
    let path = dir.join(&rel);
    s.image.save_png(&path).map_err(|e| io_err(&path, e))?;
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    Ok(ManifestEntry {
        id: s.id,
        image_path: rel,
        image_sha256: sha256_hex(bytes),
        recipe: serialize_mhm(&s.recipe, face.schema())?,
        augmentation: s.augmentation,
        landmarks: s.landmarks,
    })
}

/// Generates `n` samples into `out_dir` using up to `jobs` worker threads.
/// Output is independent of `jobs`.
pub fn generate_dataset(
    n: usize,
    master_seed: u64,
    options: &GenerationOptions,
    out_dir: &Path,
    jobs: usize,
    config_sha256: Option<String>,
) -> Result<DatasetManifest, SynthError> {
    if n == 0 {
        return Err(SynthError::Manifest("dataset size must be at least 1".into()));
    }
    options.ranges.validate()?;
    super::check_canvas(options.canvas.0, options.canvas.1)?;
    let face = ToyFace::new();
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| io_err(&image_dir, e))?;

    let indices: Vec<usize> = (0..n).collect();
    let results = crate::parallel::parallel_map(jobs, &indices, |_, &i| {
        write_sample(&face, master_seed, i, options, out_dir)
    });

    let mut entries = Vec::with_capacity(n);
    let mut first_error = None;
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(SynthError::Partial {
            written: entries.len(),
            requested: n,
            message: e.to_string(),
        });
    }

    let manifest = DatasetManifest {
        dir: out_dir.to_path_buf(),
        schema: face.schema().clone(),
        meta: ManifestMeta {
            generator_version: GENERATOR_VERSION.into(),
            master_seed,
            count: n,
            schema_sha256: sha256_hex(face.schema().to_json()),
            options: options.clone(),
            config_sha256,
        },
        entries,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

pub fn write_manifest(m: &DatasetManifest) -> Result<(), SynthError> {
    let write = |name: &str, text: String| {
        let p = m.dir.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write(SCHEMA_FILE, m.schema.to_json())?;
    write(
        META_FILE,
        serde_json::to_string_pretty(&m.meta).expect("meta serializes"),
    )?;
    write(ENTRIES_FILE, entries_text(&m.entries))
}

/// Loads a manifest directory, checking ids are unique and every image
/// exists with its recorded digest.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, SynthError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    };
    let schema = ParameterSchema::from_json(&read(SCHEMA_FILE)?)?;
    let meta: ManifestMeta = serde_json::from_str(&read(META_FILE)?)
        .map_err(|e| SynthError::Manifest(format!("{META_FILE}: {e}")))?;
    let mut entries = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (k, line) in read(ENTRIES_FILE)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| SynthError::Manifest(format!("{ENTRIES_FILE} line {}: {err}", k + 1)))?;
        if !ids.insert(e.id.clone()) {
            return Err(SynthError::Manifest(format!("duplicate id {}", e.id)));
        }
        let p = dir.join(&e.image_path);
        let bytes = fs::read(&p).map_err(|err| io_err(&p, err))?;
        if sha256_hex(&bytes) != e.image_sha256 {
            return Err(SynthError::Manifest(format!(
                "{} does not match its recorded digest",
                e.image_path
            )));
        }
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(SynthError::Manifest(format!("{} lists no samples", dir.display())));
    }
    Ok(DatasetManifest {
        dir: dir.to_path_buf(),
        schema,
        meta,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::encode;

    #[test]
    fn single_sample_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = GenerationOptions::default();
        let ma = generate_dataset(1, 42, &opts, a.path(), 1, None).unwrap();
        let mb = generate_dataset(1, 42, &opts, b.path(), 1, None).unwrap();
        assert_eq!(ma.digest(), mb.digest());
        assert_eq!(ma.entries[0].image_sha256, mb.entries[0].image_sha256);
        let reloaded = load_manifest(a.path()).unwrap();
        assert_eq!(reloaded.digest(), ma.digest());
    }

    #[test]
    fn jobs_do_not_change_output() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = GenerationOptions::default();
        let ma = generate_dataset(9, 5, &opts, a.path(), 1, None).unwrap();
        let mb = generate_dataset(9, 5, &opts, b.path(), 4, None).unwrap();
        assert_eq!(ma.digest(), mb.digest());
    }

    #[test]
    fn sample_regenerates_alone() {
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerationOptions::default();
        let m = generate_dataset(10, 9, &opts, dir.path(), 2, None).unwrap();
        let alone = generate_sample(&ToyFace::new(), 9, 7, &opts).unwrap();
        let stored = m.load_sample(7).unwrap();
        assert_eq!(alone, stored);
    }

    #[test]
    fn stored_recipe_is_the_rendered_one() {
        let face = ToyFace::new();
        let opts = GenerationOptions::default();
        for i in 0..5 {
            let s = generate_sample(&face, 3, i, &opts).unwrap();
            let text = serialize_mhm(&s.recipe, face.schema()).unwrap();
            assert_eq!(parse_mhm(&text, face.schema()).unwrap(), s.recipe);
            let again = face.render(&s.recipe, &s.augmentation, opts.canvas).unwrap();
            assert_eq!(again.image, s.image);
        }
    }

    #[test]
    fn tampered_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(2, 1, &GenerationOptions::default(), dir.path(), 1, None).unwrap();
        GrayImage::new(64, 64, 3).save_png(&m.image_path(1)).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(SynthError::Manifest(_))));
    }

    #[test]
    fn unwritable_output_reports_partial() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = generate_dataset(3, 1, &GenerationOptions::default(), &blocker, 1, None);
        assert!(matches!(err, Err(SynthError::Io(_))));
        // Images directory exists but one target path is a directory.
        let out = dir.path().join("out");
        fs::create_dir_all(out.join("images/000001.png")).unwrap();
        match generate_dataset(3, 1, &GenerationOptions::default(), &out, 1, None) {
            Err(SynthError::Partial { written, requested, .. }) => {
                assert_eq!((written, requested), (2, 3));
            }
            other => panic!("expected partial report, got {other:?}"),
        }
    }

    #[test]
    fn stylized_corpus_has_few_levels() {
        let opts = GenerationOptions {
            style_levels: Some(4),
            ..GenerationOptions::default()
        };
        let s = generate_sample(&ToyFace::new(), 1, 0, &opts).unwrap();
        let mut v = s.image.data.clone();
        v.sort_unstable();
        v.dedup();
        assert!(v.len() <= 4);
    }

    /// Continuous targets are drawn symmetrically, so their sample means sit
    /// within three standard errors of zero; one-hot means near `1/k`.
    #[test]
    fn encoded_target_means() {
        let face = ToyFace::new();
        let schema = face.schema();
        let n = 2000;
        let layout = schema.layout().clone();
        let mut sum = vec![0.0; layout.len];
        let mut sq = vec![0.0; layout.len];
        // Only the recipe draw matters; skip rendering.
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(17, i as u64));
            let r = normalize_scale(&draw_recipe(schema, &mut rng), schema).unwrap();
            for (k, v) in encode(&r, schema).unwrap().values.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let nf = n as f64;
        for k in 0..layout.len {
            let mean = sum[k] / nf;
            let sd = (sq[k] / nf - mean * mean).max(0.0).sqrt();
            if layout.is_continuous(k) {
                assert!(mean.abs() <= 3.0 * sd / nf.sqrt(), "coord {k}: mean {mean}, sd {sd}");
            } else {
                let slot = layout.slots().find(|s| s.range.contains(&k)).unwrap();
                let p = 1.0 / slot.range.len() as f64;
                let se = (p * (1.0 - p) / nf).sqrt();
                assert!((mean - p).abs() <= 4.0 * se, "coord {k}: mean {mean}");
            }
        }
    }
}
