use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapt::{registration_transform, sample_registered, RegistrationConfig};
use crate::image::{quantize, GrayImage};

use super::{
    region_box, trig_bounds, AugmentationRanges, Interval, Point, SynthError, FEATURE_REGIONS,
    LAYOUT_UNITS,
};

/// Rectangle in the registered frame, in pixel-edge coordinates: the pixel
/// with index `i` spans `[i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    /// Center (in pixel-center coordinates) of output cell `(i, j)` when the
    /// rectangle is resampled to `size`.
    pub fn sample_point(&self, i: usize, j: usize, size: (usize, usize)) -> Point {
        let sx = (self.x1 - self.x0) / size.0 as f64;
        let sy = (self.y1 - self.y0) / size.1 as f64;
        (
            self.x0 + (i as f64 + 0.5) * sx - 0.5,
            self.y0 + (j as f64 + 0.5) * sy - 0.5,
        )
    }

    /// Inverse of [`Self::sample_point`]: continuous output-cell coordinates.
    pub fn to_output(&self, q: Point, size: (usize, usize)) -> Point {
        let sx = (self.x1 - self.x0) / size.0 as f64;
        let sy = (self.y1 - self.y0) / size.1 as f64;
        ((q.0 + 0.5 - self.x0) / sx - 0.5, (q.1 + 0.5 - self.y0) / sy - 0.5)
    }
}

/// Region crop rectangles (layout units) and the local-model input size.
/// Shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub local_size: (usize, usize),
    pub registration: RegistrationConfig,
    pub boxes: BTreeMap<String, [f64; 4]>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self::for_canvas(64, 64, (32, 32))
    }
}

impl CropConfig {
    pub fn for_canvas(width: usize, height: usize, local_size: (usize, usize)) -> Self {
        let boxes = FEATURE_REGIONS
            .iter()
            .map(|r| {
                let b = region_box(r).expect("feature region");
                (r.to_string(), [b.x0, b.y0, b.x1, b.y1])
            })
            .collect();
        Self {
            local_size,
            registration: RegistrationConfig::for_canvas(width, height),
            boxes,
        }
    }

    /// The region's rectangle on the registered canvas.
    pub fn rect(&self, region: &str) -> Result<PixelRect, SynthError> {
        let b = self
            .boxes
            .get(region)
            .ok_or_else(|| SynthError::UnknownRegion(region.to_string()))?;
        let (w, h) = self.registration.canvas;
        let kx = w as f64 / LAYOUT_UNITS;
        let ky = h as f64 / LAYOUT_UNITS;
        Ok(PixelRect {
            x0: b[0] * kx,
            y0: b[1] * ky,
            x1: b[2] * kx,
            y1: b[3] * ky,
        })
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.boxes.keys().map(|s| s.as_str())
    }
}

/// Registers `image` by its eye landmarks and extracts the region's
/// rectangle at `config.local_size`, in one bilinear resampling pass.
pub fn crop_region(
    image: &GrayImage,
    landmarks: [Point; 2],
    region: &str,
    config: &CropConfig,
) -> Result<GrayImage, SynthError> {
    let rect = config.rect(region)?;
    let t = registration_transform(image, landmarks[0], landmarks[1], &config.registration)
        .map_err(|e| SynthError::Registration(e.to_string()))?;
    let size = config.local_size;
    Ok(GrayImage::from_fn(size.0, size.1, |i, j| {
        sample_registered(image, &t, rect.sample_point(i, j, size))
            .map(quantize)
            .unwrap_or(config.registration.background)
    }))
}

/// Bounds, over every augmentation drawn from `ranges`, of the source pixels
/// read when cropping `region` from a render with canonical layout.
///
/// Registration undoes the in-plane augmentation, so the source point of a
/// registered point `q` is `R(q - c) + c + t` with `R` and `t` drawn from the
/// ranges; the bound is evaluated with interval arithmetic.
pub fn source_footprint(
    config: &CropConfig,
    region: &str,
    ranges: &AugmentationRanges,
) -> Result<PixelRect, SynthError> {
    let rect = config.rect(region)?;
    let size = config.local_size;
    let first = rect.sample_point(0, 0, size);
    let last = rect.sample_point(size.0 - 1, size.1 - 1, size);
    let (w, h) = config.registration.canvas;
    let c = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let dx = Interval::new(first.0 - c.0, last.0 - c.0);
    let dy = Interval::new(first.1 - c.1, last.1 - c.1);
    let (cos, sin) = trig_bounds(ranges.rotation_deg);
    let t = Interval::new(ranges.translation_px.0, ranges.translation_px.1);
    let x = cos.mul(dx).sub(sin.mul(dy)).add(Interval::point(c.0)).add(t);
    let y = sin.mul(dx).add(cos.mul(dy)).add(Interval::point(c.1)).add(t);
    Ok(PixelRect {
        x0: x.lo,
        y0: y.lo,
        x1: x.hi,
        y1: y.hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::Recipe;
    use crate::synth::{AugmentationSpec, ToyFace, MAX_ROTATION_DEG, MAX_TRANSLATION_PX};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unknown_region_and_bad_landmarks() {
        let cfg = CropConfig::default();
        let img = GrayImage::new(64, 64, 0);
        let eyes = cfg.registration;
        assert!(matches!(
            crop_region(&img, [eyes.left_eye, eyes.right_eye], "ears", &cfg),
            Err(SynthError::UnknownRegion(_))
        ));
        assert!(matches!(
            crop_region(&img, [(-4.0, 3.0), eyes.right_eye], "nose", &cfg),
            Err(SynthError::Registration(_))
        ));
    }

    #[test]
    fn crop_is_repeatable() {
        let face = ToyFace::new();
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aug = AugmentationRanges::default().sample(&mut rng);
        let out = face.render(&Recipe::defaults(face.schema()), &aug, (64, 64)).unwrap();
        let a = crop_region(&out.image, out.landmarks, "mouth", &cfg).unwrap();
        let b = crop_region(&out.image, out.landmarks, "mouth", &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (32, 32));
    }

    #[test]
    fn neutral_crop_matches_box_pixels() {
        // A box resampled at its native pixel size is a plain copy.
        let face = ToyFace::new();
        let mut cfg = CropConfig::default();
        cfg.local_size = (16, 12);
        let out = face
            .render(&Recipe::defaults(face.schema()), &AugmentationSpec::neutral(), (64, 64))
            .unwrap();
        let crop = crop_region(&out.image, out.landmarks, "nose", &cfg).unwrap();
        assert_eq!(crop, out.image.crop(24, 36, 16, 12));
    }

    /// Pixels where two renders differing only in `region` disagree are
    /// primitives of that region; they must all map inside the crop.
    #[test]
    fn crop_contains_region_primitives() {
        let face = ToyFace::new();
        let s = face.schema();
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..100 {
            let region = FEATURE_REGIONS[k % 3];
            let mut a = Recipe::defaults(s);
            let mut b = Recipe::defaults(s);
            for name in s.param_names().filter(|n| n.starts_with(&format!("{region}/"))) {
                a.continuous.insert(name.clone(), rng.random_range(-1.0..=1.0));
                b.continuous.insert(name, rng.random_range(-1.0..=1.0));
            }
            let mut aug = AugmentationRanges::default().sample(&mut rng);
            aug.noise_sigma = 0.0;
            let ra = face.render(&a, &aug, (64, 64)).unwrap();
            let rb = face.render(&b, &aug, (64, 64)).unwrap();
            let t = registration_transform(
                &ra.image,
                ra.landmarks[0],
                ra.landmarks[1],
                &cfg.registration,
            )
            .unwrap();
            let rect = cfg.rect(region).unwrap();
            let (lw, lh) = cfg.local_size;
            for y in 0..64 {
                for x in 0..64 {
                    if ra.image.get(x, y) == rb.image.get(x, y) {
                        continue;
                    }
                    let o = rect.to_output(t.apply((x as f64, y as f64)), cfg.local_size);
                    // One source pixel of slack for antialiased edges.
                    let slack = lw as f64 / (rect.x1 - rect.x0);
                    let slack_y = lh as f64 / (rect.y1 - rect.y0);
                    assert!(
                        o.0 >= -0.5 - slack
                            && o.0 <= lw as f64 - 0.5 + slack
                            && o.1 >= -0.5 - slack_y
                            && o.1 <= lh as f64 - 0.5 + slack_y,
                        "{region}: changed pixel ({x},{y}) maps to {o:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn nose_footprint_inside_canvas_for_all_valid_augmentations() {
        let cfg = CropConfig::default();
        let extreme = AugmentationRanges {
            rotation_deg: (-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
            translation_px: (-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX),
            ..AugmentationRanges::default()
        };
        for ranges in [AugmentationRanges::default(), extreme] {
            let f = source_footprint(&cfg, "nose", &ranges).unwrap();
            assert!(f.x0 > 0.0 && f.y0 > 0.0 && f.x1 < 63.0 && f.y1 < 63.0, "{f:?}");
        }
        // Cross-check the interval bound against sampled transforms.
        let f = source_footprint(&cfg, "nose", &extreme).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rect = cfg.rect("nose").unwrap();
        for _ in 0..500 {
            let aug = extreme.sample(&mut rng);
            let t = super::super::PlaneTransform::for_canvas(&aug, 64, 64);
            for (i, j) in [(0, 0), (31, 0), (0, 31), (31, 31), (16, 7)] {
                let p = t.forward(rect.sample_point(i, j, cfg.local_size));
                assert!(p.0 >= f.x0 && p.0 <= f.x1 && p.1 >= f.y0 && p.1 <= f.y1);
            }
        }
    }
}
