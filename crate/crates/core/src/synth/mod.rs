//! Deterministic procedural face renderer and synthetic dataset generation.
//!
//! The toy face lives in a 64x64 "layout unit" frame. Each feature region
//! (eyes, nose, mouth) owns a fixed axis-aligned box and its primitives are
//! clipped to that box, so a region's parameters can only change pixels
//! inside it. Eye centers are fixed in the layout frame: they are the
//! landmarks used for registration.

mod augment;
mod crop;
mod dataset;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{quantize, GrayImage};
use crate::recipe::{
    AssetOption, ParamSpec, ParameterSchema, Recipe, RecipeError, RegionSpec, ScaleCoupling,
    SchemaDoc, SlotSpec,
};

pub use augment::{
    trig_bounds, AugmentationRanges, AugmentationSpec, Interval, PlaneTransform, Point,
    BRIGHTNESS_BOUNDS, MAX_NOISE_SIGMA, MAX_ROTATION_DEG, MAX_TRANSLATION_PX,
};
pub use crop::{crop_region, source_footprint, CropConfig, PixelRect};
pub use dataset::{
    generate_dataset, generate_sample, load_manifest, sample_seed, DatasetManifest,
    GenerationOptions, ManifestEntry, ManifestMeta, Sample, GENERATOR_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("augmentation: {0}")]
    Augmentation(String),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("registration: {0}")]
    Registration(String),
    #[error("io: {0}")]
    Io(String),
    #[error("generation aborted after {written} of {requested} samples: {message}")]
    Partial {
        written: usize,
        requested: usize,
        message: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

pub const LAYOUT_UNITS: f64 = 64.0;
pub const LEFT_EYE: (f64, f64) = (22.0, 26.0);
pub const RIGHT_EYE: (f64, f64) = (42.0, 26.0);

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in layout units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl UnitRect {
    const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

pub const EYES_BOX: UnitRect = UnitRect::new(8.0, 16.0, 56.0, 36.0);
pub const NOSE_BOX: UnitRect = UnitRect::new(24.0, 36.0, 40.0, 48.0);
pub const MOUTH_BOX: UnitRect = UnitRect::new(16.0, 48.0, 48.0, 60.0);
const FULL_BOX: UnitRect = UnitRect::new(0.0, 0.0, LAYOUT_UNITS, LAYOUT_UNITS);

const FACE_CENTER: (f64, f64) = (32.0, 34.0);
const FACE_RADII: (f64, f64) = (24.0, 28.0);
const SKIN: f64 = 0.78;
const SUPERSAMPLE: usize = 4;

/// Canonical box of a region in layout units.
pub fn region_box(region: &str) -> Option<UnitRect> {
    match region {
        "head" => Some(FULL_BOX),
        "eyes" => Some(EYES_BOX),
        "nose" => Some(NOSE_BOX),
        "mouth" => Some(MOUTH_BOX),
        _ => None,
    }
}

/// Regions with their own feature box (everything but `head`).
pub const FEATURE_REGIONS: [&str; 3] = ["eyes", "nose", "mouth"];

fn options(slot: &str, assets: &[&str]) -> SlotSpec {
    SlotSpec {
        name: slot.to_string(),
        options: assets
            .iter()
            .enumerate()
            .map(|(i, a)| AssetOption {
                asset: a.to_string(),
                // Deterministic pseudo-guids: 8-4-4-4-12 hex groups.
                guid: format!(
                    "{:08x}-{:04x}-4000-8000-{:012x}",
                    slot.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32)),
                    i,
                    i as u64 + 1
                ),
            })
            .collect(),
        default: 0,
    }
}

/// The schema rendered by [`ToyFace`]: a global scale parameter in `head`
/// and three feature regions, each with one discrete shape slot.
pub fn toy_face_schema() -> ParameterSchema {
    let p = |n: &str| ParamSpec::new(n, -1.0, 1.0);
    let wide = |n: &str| ParamSpec::new(n, -1.25, 1.25);
    ParameterSchema::new(SchemaDoc {
        regions: vec![
            RegionSpec {
                name: "head".into(),
                params: vec![p("scale")],
                slots: vec![],
            },
            RegionSpec {
                name: "eyes".into(),
                params: vec![
                    wide("size"),
                    p("height"),
                    p("tilt"),
                    p("pupil"),
                    p("brow-height"),
                    p("brow-tilt"),
                ],
                slots: vec![options("eyes-shape", &["ellipse", "block", "diamond", "almond"])],
            },
            RegionSpec {
                name: "nose".into(),
                params: vec![wide("width"), wide("length"), p("tip-x"), p("shade"), p("nostrils")],
                slots: vec![options("nose-shape", &["wedge", "bar", "bulb"])],
            },
            RegionSpec {
                name: "mouth".into(),
                params: vec![wide("width"), p("thickness"), p("vertical"), p("curve"), p("shade")],
                slots: vec![options("mouth-shape", &["oval", "slab", "bow"])],
            },
        ],
        scale_param_name: Some("head/scale".into()),
        scale_coupling: Some(ScaleCoupling {
            reference: 0.0,
            gain: 0.25,
            coupled: vec![
                "eyes/size".into(),
                "nose/width".into(),
                "nose/length".into(),
                "mouth/width".into(),
            ],
        }),
    })
    .expect("toy schema is valid")
}

/// Everything the rasterizer needs, in layout units.
#[derive(Debug, Clone)]
struct Geometry {
    eye_rx: f64,
    eye_ry: f64,
    eye_rot: [(f64, f64); 2],
    pupil_r: f64,
    brow_y: f64,
    brow_rot: [(f64, f64); 2],
    eye_shape: usize,
    nose_hw: f64,
    nose_tip_y: f64,
    nose_tip_x: f64,
    nose_shade: f64,
    nostril_spread: f64,
    nose_shape: usize,
    mouth_hw: f64,
    mouth_hh: f64,
    mouth_y: f64,
    mouth_curve: f64,
    mouth_shade: f64,
    mouth_shape: usize,
}

const NOSE_TOP: f64 = 37.0;
const BROW_HALF_LEN: f64 = 6.0;

impl Geometry {
    fn new(schema: &ParameterSchema, recipe: &Recipe) -> Result<Self, SynthError> {
        let r = recipe.validated(schema)?;
        let v = |n: &str| r.continuous[n];
        let m = schema.scale_multiplier(v("head/scale"));
        // Coupled parameters only ever enter as `m * value`.
        let coupled = |n: &str| m * v(n);
        let slot = |n: &str| r.option_index(schema, n).expect("validated slot");
        let tilt = 0.35 * v("eyes/tilt");
        let brow_tilt = 0.3 * v("eyes/brow-tilt");
        Ok(Self {
            eye_rx: 5.0 + 2.0 * coupled("eyes/size"),
            eye_ry: 2.5 + 1.2 * v("eyes/height"),
            eye_rot: [(tilt.cos(), tilt.sin()), (tilt.cos(), -tilt.sin())],
            pupil_r: 1.4 + 0.8 * v("eyes/pupil"),
            brow_y: LEFT_EYE.1 - (5.5 + 1.5 * v("eyes/brow-height")),
            brow_rot: [
                (brow_tilt.cos(), brow_tilt.sin()),
                (brow_tilt.cos(), -brow_tilt.sin()),
            ],
            eye_shape: slot("eyes-shape"),
            nose_hw: 3.5 + 1.6 * coupled("nose/width"),
            nose_tip_y: 43.0 + 2.0 * coupled("nose/length"),
            nose_tip_x: 2.0 * v("nose/tip-x"),
            nose_shade: 0.6 + 0.12 * v("nose/shade"),
            nostril_spread: 1.6 + 0.9 * v("nose/nostrils"),
            nose_shape: slot("nose-shape"),
            mouth_hw: 8.0 + 3.5 * coupled("mouth/width"),
            mouth_hh: 1.6 + 0.8 * v("mouth/thickness"),
            mouth_y: 54.0 + 1.5 * v("mouth/vertical"),
            mouth_curve: 1.6 * v("mouth/curve"),
            mouth_shade: 0.3 + 0.12 * v("mouth/shade"),
            mouth_shape: slot("mouth-shape"),
        })
    }

    fn eyes(&self, u: f64, v: f64) -> Option<f64> {
        for (k, center) in [LEFT_EYE, RIGHT_EYE].into_iter().enumerate() {
            let dx = u - center.0;
            let dy = v - center.1;
            // Brow: thick segment above the eye.
            let (bc, bs) = self.brow_rot[k];
            let bx = dx;
            let by = v - self.brow_y;
            let along = bx * bc + by * bs;
            let across = -bx * bs + by * bc;
            if along.abs() <= BROW_HALF_LEN && across.abs() <= 0.9 {
                return Some(0.22);
            }
            let (c, s) = self.eye_rot[k];
            let lx = dx * c + dy * s;
            let ly = -dx * s + dy * c;
            let nx = lx / self.eye_rx;
            let ny = ly / self.eye_ry;
            let inside = match self.eye_shape {
                0 => nx * nx + ny * ny <= 1.0,
                1 => nx.abs() <= 0.9 && ny.abs() <= 0.8,
                2 => nx.abs() + ny.abs() <= 1.0,
                _ => nx.abs() <= 1.0 && ny.abs() <= 1.0 - nx * nx,
            };
            if inside {
                return Some(if dx * dx + dy * dy <= self.pupil_r * self.pupil_r {
                    0.1
                } else {
                    0.95
                });
            }
        }
        None
    }

    fn nose(&self, u: f64, v: f64) -> Option<f64> {
        let tip_x = FACE_CENTER.0 + self.nose_tip_x;
        for side in [-1.0, 1.0] {
            let nx = u - (tip_x + side * self.nostril_spread);
            let ny = v - (self.nose_tip_y - 0.8);
            if nx * nx + ny * ny <= 0.81 {
                return Some(0.28);
            }
        }
        if v < NOSE_TOP || v > self.nose_tip_y {
            return None;
        }
        let t = (v - NOSE_TOP) / (self.nose_tip_y - NOSE_TOP);
        let cx = FACE_CENTER.0 + self.nose_tip_x * t;
        let half = match self.nose_shape {
            0 => self.nose_hw * t,
            1 => self.nose_hw * 0.55,
            _ => self.nose_hw * (0.35 + 0.65 * t * t),
        };
        ((u - cx).abs() <= half).then_some(self.nose_shade)
    }

    fn mouth(&self, u: f64, v: f64) -> Option<f64> {
        let xr = (u - FACE_CENTER.0) / self.mouth_hw;
        if xr.abs() > 1.0 {
            return None;
        }
        let yc = self.mouth_y - self.mouth_curve * (xr * xr - 0.5);
        let half = match self.mouth_shape {
            0 => self.mouth_hh * (1.0 - xr * xr).sqrt(),
            1 => self.mouth_hh * 0.8,
            _ => self.mouth_hh * 1.3 * (1.0 - xr.abs()),
        };
        ((v - yc).abs() <= half).then_some(self.mouth_shade)
    }

    /// Scene intensity in `[0, 1]` at layout coordinates `(u, v)`.
    fn intensity(&self, u: f64, v: f64, background: f64) -> f64 {
        let fx = (u - FACE_CENTER.0) / FACE_RADII.0;
        let fy = (v - FACE_CENTER.1) / FACE_RADII.1;
        if fx * fx + fy * fy > 1.0 {
            return background;
        }
        let feature = if EYES_BOX.contains(u, v) {
            self.eyes(u, v)
        } else if NOSE_BOX.contains(u, v) {
            self.nose(u, v)
        } else if MOUTH_BOX.contains(u, v) {
            self.mouth(u, v)
        } else {
            None
        };
        feature.unwrap_or(SKIN)
    }
}

/// A rendered face and its eye landmarks in output-pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: GrayImage,
    pub landmarks: [Point; 2],
}

/// Renderer for [`toy_face_schema`] recipes.
#[derive(Debug, Clone)]
pub struct ToyFace {
    schema: ParameterSchema,
}

impl Default for ToyFace {
    fn default() -> Self {
        Self::new()
    }
}

/// Maps layout units to continuous pixel coordinates on a `width` canvas.
pub fn unit_to_pixel(u: f64, extent: usize) -> f64 {
    u * extent as f64 / LAYOUT_UNITS - 0.5
}

pub fn pixel_to_unit(p: f64, extent: usize) -> f64 {
    (p + 0.5) * LAYOUT_UNITS / extent as f64
}

/// Canonical (pre-augmentation) eye centers in pixel coordinates.
pub fn canonical_eyes(width: usize, height: usize) -> [Point; 2] {
    [LEFT_EYE, RIGHT_EYE].map(|(u, v)| (unit_to_pixel(u, width), unit_to_pixel(v, height)))
}

pub fn check_canvas(width: usize, height: usize) -> Result<(), SynthError> {
    if width < 32 || height < 32 || width % 16 != 0 || height % 16 != 0 {
        return Err(SynthError::Geometry(format!(
            "canvas {width}x{height} cannot hold the canonical layout (need multiples of 16, at least 32)"
        )));
    }
    Ok(())
}

impl ToyFace {
    pub fn new() -> Self {
        Self {
            schema: toy_face_schema(),
        }
    }

    pub fn schema(&self) -> &ParameterSchema {
        &self.schema
    }

    /// Renders `recipe` under `aug` onto a `width x height` canvas.
    ///
    /// Identical inputs give bit-identical images.
    pub fn render(
        &self,
        recipe: &Recipe,
        aug: &AugmentationSpec,
        (width, height): (usize, usize),
    ) -> Result<Rendered, SynthError> {
        check_canvas(width, height)?;
        aug.validate()?;
        let geo = Geometry::new(&self.schema, recipe)?;
        let transform = PlaneTransform::for_canvas(aug, width, height);
        let identity = aug.is_geometric_identity();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(aug.rng_seed);
        let noise = Normal::new(0.0, aug.noise_sigma.max(0.0)).expect("finite sigma");
        let step = 1.0 / SUPERSAMPLE as f64;
        let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let mut image = GrayImage::new(width, height, 0);
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) * step - 0.5;
                        let (cx, cy) = if identity {
                            (px, py)
                        } else {
                            transform.inverse((px, py))
                        };
                        acc += geo.intensity(
                            pixel_to_unit(cx, width),
                            pixel_to_unit(cy, height),
                            aug.background_level,
                        );
                    }
                }
                let mut level = acc * norm * 255.0 * aug.brightness;
                if aug.noise_sigma > 0.0 {
                    level += noise.sample(&mut noise_rng);
                }
                image.set(x, y, quantize(level));
            }
        }
        let landmarks = canonical_eyes(width, height).map(|p| transform.forward(p));
        Ok(Rendered { image, landmarks })
    }
}
