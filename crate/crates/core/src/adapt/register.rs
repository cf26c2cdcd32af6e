use serde::{Deserialize, Serialize};

use crate::image::{quantize, GrayImage};
use crate::synth::{canonical_eyes, Point};

use super::AdaptError;

/// Target frame for registration: canvas size, where the eyes must land,
/// and the fill level for pixels with no source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub canvas: (usize, usize),
    pub left_eye: Point,
    pub right_eye: Point,
    pub background: u8,
}

impl RegistrationConfig {
    /// Canonical eye positions of the toy layout on a `width x height` canvas.
    pub fn for_canvas(width: usize, height: usize) -> Self {
        let [l, r] = canonical_eyes(width, height);
        Self {
            canvas: (width, height),
            left_eye: l,
            right_eye: r,
            background: 64,
        }
    }
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self::for_canvas(64, 64)
    }
}

/// Similarity `q = a * p + b` on points viewed as complex numbers, mapping
/// input pixel coordinates into the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTransform {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

fn cmul(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 * y.0 - x.1 * y.1, x.0 * y.1 + x.1 * y.0)
}

fn cdiv(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let d = y.0 * y.0 + y.1 * y.1;
    ((x.0 * y.0 + x.1 * y.1) / d, (x.1 * y.0 - x.0 * y.1) / d)
}

impl RegistrationTransform {
    /// The unique similarity taking `(p1, p2)` onto `(c1, c2)`.
    pub fn from_pairs(p1: Point, p2: Point, c1: Point, c2: Point) -> Result<Self, AdaptError> {
        let dp = (p2.0 - p1.0, p2.1 - p1.1);
        if dp.0 * dp.0 + dp.1 * dp.1 < 1e-12 {
            return Err(AdaptError::DegenerateGeometry(format!(
                "eye points {p1:?} and {p2:?} coincide"
            )));
        }
        let a = cdiv((c2.0 - c1.0, c2.1 - c1.1), dp);
        let ap1 = cmul(a, p1);
        Ok(Self {
            a,
            b: (c1.0 - ap1.0, c1.1 - ap1.1),
        })
    }

    pub fn identity() -> Self {
        Self {
            a: (1.0, 0.0),
            b: (0.0, 0.0),
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.0.hypot(self.a.1)
    }

    pub fn rotation_rad(&self) -> f64 {
        self.a.1.atan2(self.a.0)
    }

    pub fn apply(&self, p: Point) -> Point {
        let q = cmul(self.a, p);
        (q.0 + self.b.0, q.1 + self.b.1)
    }

    pub fn invert(&self, q: Point) -> Point {
        cdiv((q.0 - self.b.0, q.1 - self.b.1), self.a)
    }
}

fn check_inside(image: &GrayImage, p: Point, which: &str) -> Result<(), AdaptError> {
    let inside = p.0.is_finite()
        && p.1.is_finite()
        && p.0 >= 0.0
        && p.1 >= 0.0
        && p.0 <= (image.width - 1) as f64
        && p.1 <= (image.height - 1) as f64;
    if inside {
        Ok(())
    } else {
        Err(AdaptError::Landmarks(format!(
            "{which} eye {p:?} outside the {}x{} image",
            image.width, image.height
        )))
    }
}

/// Transform taking the given eye centers onto the configured canonical ones.
pub fn registration_transform(
    image: &GrayImage,
    left_eye: Point,
    right_eye: Point,
    config: &RegistrationConfig,
) -> Result<RegistrationTransform, AdaptError> {
    check_inside(image, left_eye, "left")?;
    check_inside(image, right_eye, "right")?;
    RegistrationTransform::from_pairs(left_eye, right_eye, config.left_eye, config.right_eye)
}

/// Samples `image` at the source of canonical point `q`, or `None` outside.
pub(crate) fn sample_registered(
    image: &GrayImage,
    transform: &RegistrationTransform,
    q: Point,
) -> Option<f64> {
    let p = transform.invert(q);
    image.sample_bilinear(p.0, p.1)
}

/// Rotates, scales and shifts `image` so both eye centers land on the
/// canonical positions; bilinear resampling, background fill.
pub fn register(
    image: &GrayImage,
    left_eye: Point,
    right_eye: Point,
    config: &RegistrationConfig,
) -> Result<(GrayImage, RegistrationTransform), AdaptError> {
    let t = registration_transform(image, left_eye, right_eye, config)?;
    let (w, h) = config.canvas;
    let out = GrayImage::from_fn(w, h, |x, y| {
        sample_registered(image, &t, (x as f64, y as f64))
            .map(quantize)
            .unwrap_or(config.background)
    });
    Ok((out, t))
}
