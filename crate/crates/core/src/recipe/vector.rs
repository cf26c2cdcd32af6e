use std::sync::Arc;

use super::{Layout, ParameterSchema, Recipe, RecipeError};

/// Flat target vector: normalized continuous coordinates and one-hot slices.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl TargetVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, RecipeError> {
        if values.len() != layout.len {
            return Err(RecipeError::Layout {
                expected: layout.len,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `[min, max] -> [-1, 1]`. Symmetric ranges map exactly.
pub(crate) fn to_unit(v: f64, min: f64, max: f64) -> f64 {
    (2.0 * v - (max + min)) / (max - min)
}

pub(crate) fn from_unit(e: f64, min: f64, max: f64) -> f64 {
    ((e.clamp(-1.0, 1.0) * (max - min) + (max + min)) / 2.0).clamp(min, max)
}

/// Lowest index among the maxima of `slice`.
pub(crate) fn argmax_lowest(slice: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in slice.iter().enumerate().skip(1) {
        if v > slice[best] {
            best = i;
        }
    }
    best
}

pub fn encode(recipe: &Recipe, schema: &ParameterSchema) -> Result<TargetVector, RecipeError> {
    let r = recipe.validated(schema)?;
    let layout = schema.layout().clone();
    let mut values = vec![0.0; layout.len];
    for (region, rl) in schema.regions().iter().zip(&layout.regions) {
        for (p, idx) in region.params.iter().zip(rl.continuous.clone()) {
            let v = r.continuous[&format!("{}/{}", region.name, p.name)];
            values[idx] = to_unit(v, p.min, p.max);
        }
        for (s, sl) in region.slots.iter().zip(&rl.slots) {
            let guid = &r.discrete[&s.name];
            let k = s
                .options
                .iter()
                .position(|o| &o.guid == guid)
                .expect("validated guid");
            values[sl.range.start + k] = 1.0;
        }
    }
    TargetVector::new(values, layout)
}

/// Inverse of [`encode`]: continuous coordinates are clamped to `[-1, 1]`,
/// one-hot slices are decoded by argmax (ties go to the lowest index).
pub fn decode(values: &[f64], schema: &ParameterSchema) -> Result<Recipe, RecipeError> {
    let layout = schema.layout();
    if values.len() != layout.len {
        return Err(RecipeError::Layout {
            expected: layout.len,
            got: values.len(),
        });
    }
    let mut r = Recipe::default();
    for (region, rl) in schema.regions().iter().zip(&layout.regions) {
        for (p, idx) in region.params.iter().zip(rl.continuous.clone()) {
            let e = if values[idx].is_nan() { 0.0 } else { values[idx] };
            r.continuous
                .insert(format!("{}/{}", region.name, p.name), from_unit(e, p.min, p.max));
        }
        for (s, sl) in region.slots.iter().zip(&rl.slots) {
            let k = argmax_lowest(&values[sl.range.clone()]);
            r.discrete.insert(s.name.clone(), s.options[k].guid.clone());
        }
    }
    Ok(r)
}
