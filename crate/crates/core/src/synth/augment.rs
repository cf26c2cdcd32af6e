use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;

/// Fully determines one augmentation of a rendered face.
///
/// Rotation and translation act in the image plane about the canvas center;
/// translation is in pixels of the output canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub background_level: f64,
    pub rotation_deg: f64,
    pub translation: (f64, f64),
    pub brightness: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

/// Hard bounds every [`AugmentationSpec`] must respect.
pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_TRANSLATION_PX: f64 = 8.0;
pub const BRIGHTNESS_BOUNDS: (f64, f64) = (0.5, 1.5);
pub const MAX_NOISE_SIGMA: f64 = 25.0;

impl AugmentationSpec {
    /// No augmentation: mid-gray background, no transform, no noise.
    pub fn neutral() -> Self {
        Self {
            background_level: 0.25,
            rotation_deg: 0.0,
            translation: (0.0, 0.0),
            brightness: 1.0,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = (0.0..=1.0).contains(&self.background_level)
            && self.rotation_deg.abs() <= MAX_ROTATION_DEG
            && self.translation.0.abs() <= MAX_TRANSLATION_PX
            && self.translation.1.abs() <= MAX_TRANSLATION_PX
            && (BRIGHTNESS_BOUNDS.0..=BRIGHTNESS_BOUNDS.1).contains(&self.brightness)
            && (0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma);
        if ok {
            Ok(())
        } else {
            Err(SynthError::Augmentation(format!("{self:?} outside declared bounds")))
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation == (0.0, 0.0)
    }
}

/// Closed intervals from which augmentations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRanges {
    pub background_level: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub translation_px: (f64, f64),
    pub brightness: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self {
            background_level: (0.0, 0.5),
            rotation_deg: (-12.0, 12.0),
            translation_px: (-3.0, 3.0),
            brightness: (0.9, 1.1),
            noise_sigma: (0.0, 3.0),
        }
    }
}

impl AugmentationRanges {
    /// Degenerate ranges: every draw is [`AugmentationSpec::neutral`].
    pub fn none() -> Self {
        let n = AugmentationSpec::neutral();
        Self {
            background_level: (n.background_level, n.background_level),
            rotation_deg: (0.0, 0.0),
            translation_px: (0.0, 0.0),
            brightness: (1.0, 1.0),
            noise_sigma: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ordered = [
            self.background_level,
            self.rotation_deg,
            self.translation_px,
            self.brightness,
            self.noise_sigma,
        ]
        .iter()
        .all(|(lo, hi)| lo <= hi && lo.is_finite() && hi.is_finite());
        if !ordered {
            return Err(SynthError::Augmentation(format!("unordered ranges {self:?}")));
        }
        for corner in [self.lower(), self.upper()] {
            corner.validate()?;
        }
        Ok(())
    }

    fn lower(&self) -> AugmentationSpec {
        AugmentationSpec {
            background_level: self.background_level.0,
            rotation_deg: self.rotation_deg.0,
            translation: (self.translation_px.0, self.translation_px.0),
            brightness: self.brightness.0,
            noise_sigma: self.noise_sigma.0,
            rng_seed: 0,
        }
    }

    fn upper(&self) -> AugmentationSpec {
        AugmentationSpec {
            background_level: self.background_level.1,
            rotation_deg: self.rotation_deg.1,
            translation: (self.translation_px.1, self.translation_px.1),
            brightness: self.brightness.1,
            noise_sigma: self.noise_sigma.1,
            rng_seed: 0,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AugmentationSpec {
        fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        AugmentationSpec {
            background_level: draw(rng, self.background_level),
            rotation_deg: draw(rng, self.rotation_deg),
            translation: (draw(rng, self.translation_px), draw(rng, self.translation_px)),
            brightness: draw(rng, self.brightness),
            noise_sigma: draw(rng, self.noise_sigma),
            rng_seed: rng.random(),
        }
    }
}

/// Point in continuous pixel coordinates (pixel `i` has its center at `i`).
pub type Point = (f64, f64);

/// Rotation by `rotation_deg` about `center`, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneTransform {
    cos: f64,
    sin: f64,
    center: Point,
    translation: Point,
}

impl PlaneTransform {
    pub fn for_canvas(aug: &AugmentationSpec, width: usize, height: usize) -> Self {
        let theta = aug.rotation_deg.to_radians();
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            translation: aug.translation,
        }
    }

    pub fn forward(&self, p: Point) -> Point {
        let dx = p.0 - self.center.0;
        let dy = p.1 - self.center.1;
        (
            self.cos * dx - self.sin * dy + self.center.0 + self.translation.0,
            self.sin * dx + self.cos * dy + self.center.1 + self.translation.1,
        )
    }

    pub fn inverse(&self, p: Point) -> Point {
        let dx = p.0 - self.center.0 - self.translation.0;
        let dy = p.1 - self.center.1 - self.translation.1;
        (
            self.cos * dx + self.sin * dy + self.center.0,
            -self.sin * dx + self.cos * dy + self.center.1,
        )
    }
}

/// Closed interval for bounding transformed geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo: lo.min(hi),
            hi: lo.max(hi),
        }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.lo - o.hi, self.hi - o.lo)
    }

    pub fn mul(self, o: Self) -> Self {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        Self {
            lo: c.iter().cloned().fold(f64::INFINITY, f64::min),
            hi: c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Interval bounds of `cos` and `sin` over `[lo, hi]` degrees, valid for
/// ranges within `(-90, 90)`.
pub fn trig_bounds(rotation_deg: (f64, f64)) -> (Interval, Interval) {
    let (lo, hi) = (rotation_deg.0.to_radians(), rotation_deg.1.to_radians());
    let cos_hi = if lo <= 0.0 && hi >= 0.0 { 1.0 } else { lo.cos().max(hi.cos()) };
    let cos_lo = lo.cos().min(hi.cos());
    (Interval::new(cos_lo, cos_hi), Interval::new(lo.sin(), hi.sin()))
}
