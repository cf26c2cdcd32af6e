//! Parametric target space, `.mhm`-style recipe files, and the flat
//! heterogeneous target vector (continuous slices plus one-hot slices).

mod mhm;
mod schema;
mod vector;

use std::collections::BTreeMap;

pub use mhm::{parse_mhm, serialize_mhm};
pub use schema::{
    AssetOption, Layout, ParamSpec, ParameterSchema, RegionLayout, RegionSpec, ScaleCoupling,
    SchemaDoc, SlotLayout, SlotSpec,
};
pub use vector::{decode, encode, TargetVector};
pub(crate) use vector::argmax_lowest;

#[cfg(test)]
pub(crate) use schema::tests as schema_tests;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RecipeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: slot {slot} has no asset with guid {guid}")]
    UnknownAsset {
        line: usize,
        slot: String,
        guid: String,
    },
    #[error("recipe does not validate: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("target vector has length {got}, layout expects {expected}")]
    Layout { expected: usize, got: usize },
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid schema: {0}")]
    Schema(String),
}

/// One character's parameter assignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recipe {
    /// Full `region/param` name to raw value.
    pub continuous: BTreeMap<String, f64>,
    /// Slot name to selected option guid.
    pub discrete: BTreeMap<String, String>,
    /// Unrecognized lines, kept verbatim and in order.
    pub extras: Vec<String>,
}

impl Recipe {
    /// Every parameter at its default and every slot at its default option.
    pub fn defaults(schema: &ParameterSchema) -> Self {
        let mut r = Recipe::default();
        for region in schema.regions() {
            for p in &region.params {
                r.continuous
                    .insert(format!("{}/{}", region.name, p.name), p.default_value());
            }
            for s in &region.slots {
                r.discrete
                    .insert(s.name.clone(), s.options[s.default].guid.clone());
            }
        }
        r
    }

    /// Fills omitted entries with schema defaults and checks every key and
    /// value, reporting all offending keys at once.
    pub fn validated(&self, schema: &ParameterSchema) -> Result<Recipe, RecipeError> {
        let mut problems = Vec::new();
        for (name, &v) in &self.continuous {
            match schema.param(name) {
                None => problems.push(format!("unknown parameter {name}")),
                Some(p) if !v.is_finite() || v < p.min || v > p.max => problems.push(format!(
                    "{name}={v} outside [{}, {}]",
                    p.min, p.max
                )),
                Some(_) => {}
            }
        }
        for (slot, guid) in &self.discrete {
            match schema.slot(slot) {
                None => problems.push(format!("unknown slot {slot}")),
                Some(s) if !s.options.iter().any(|o| &o.guid == guid) => {
                    problems.push(format!("slot {slot} has no option {guid}"))
                }
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(RecipeError::Validation(problems));
        }
        let mut out = Recipe::defaults(schema);
        out.continuous
            .extend(self.continuous.iter().map(|(k, v)| (k.clone(), *v)));
        out.discrete
            .extend(self.discrete.iter().map(|(k, v)| (k.clone(), v.clone())));
        out.extras = self.extras.clone();
        Ok(out)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.continuous.get(name).copied()
    }

    /// Selected option index of a slot, if the slot and guid resolve.
    pub fn option_index(&self, schema: &ParameterSchema, slot: &str) -> Option<usize> {
        let guid = self.discrete.get(slot)?;
        schema
            .slot(slot)?
            .options
            .iter()
            .position(|o| &o.guid == guid)
    }
}

/// Fixes the global scale parameter at its reference value and folds the
/// old multiplier into every coupled parameter, so the rendered geometry is
/// unchanged. Applying it twice is the same as applying it once.
pub fn normalize_scale(recipe: &Recipe, schema: &ParameterSchema) -> Result<Recipe, RecipeError> {
    let (Some(scale), Some(coupling)) = (schema.scale_param_name(), schema.scale_coupling()) else {
        return Err(RecipeError::Unsupported(
            "schema declares no scale parameter".into(),
        ));
    };
    let mut out = recipe.validated(schema)?;
    let multiplier = schema.scale_multiplier(out.continuous[scale]);
    let mut problems = Vec::new();
    for name in &coupling.coupled {
        let spec = schema.param(name).expect("coupled parameters resolve");
        let v = multiplier * out.continuous[name];
        if v < spec.min || v > spec.max {
            problems.push(format!(
                "{name} rescales to {v} outside [{}, {}]",
                spec.min, spec.max
            ));
        }
        out.continuous.insert(name.clone(), v);
    }
    if !problems.is_empty() {
        return Err(RecipeError::Validation(problems));
    }
    out.continuous.insert(scale.to_string(), coupling.reference);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::schema::tests::{slot, three_region};
    use super::*;

    fn scaled_schema() -> ParameterSchema {
        ParameterSchema::new(SchemaDoc {
            regions: vec![
                RegionSpec {
                    name: "head".into(),
                    params: vec![ParamSpec::new("scale", -1.0, 1.0)],
                    slots: vec![],
                },
                RegionSpec {
                    name: "nose".into(),
                    params: vec![
                        ParamSpec::new("width", -1.25, 1.25),
                        ParamSpec::new("tip", -1.0, 1.0),
                    ],
                    slots: vec![slot("noseshape", 2)],
                },
            ],
            scale_param_name: Some("head/scale".into()),
            scale_coupling: Some(ScaleCoupling {
                reference: 0.0,
                gain: 0.25,
                coupled: vec!["nose/width".into()],
            }),
        })
        .unwrap()
    }

    #[test]
    fn validation_fills_defaults_and_lists_problems() {
        let s = three_region();
        let mut r = Recipe::default();
        r.continuous.insert("eyes/size".into(), 0.5);
        let v = r.validated(&s).unwrap();
        assert_eq!(v.continuous.len(), 4);
        assert_eq!(v.discrete["eyeshape"], "eyeshape-guid-0");

        r.continuous.insert("nose/width".into(), 7.0);
        r.continuous.insert("ears/size".into(), 0.0);
        r.discrete.insert("noseshape".into(), "bogus".into());
        match r.validated(&s) {
            Err(RecipeError::Validation(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_scale_folds_multiplier() {
        let s = scaled_schema();
        let mut r = Recipe::defaults(&s);
        r.continuous.insert("head/scale".into(), 1.0);
        r.continuous.insert("nose/width".into(), 0.8);
        r.continuous.insert("nose/tip".into(), 0.3);
        let n = normalize_scale(&r, &s).unwrap();
        assert_eq!(n.continuous["head/scale"], 0.0);
        assert_eq!(n.continuous["nose/width"], 1.25 * 0.8);
        assert_eq!(n.continuous["nose/tip"], 0.3);
        assert_eq!(normalize_scale(&n, &s).unwrap(), n);
    }

    #[test]
    fn normalize_scale_fixed_point_and_errors() {
        let s = scaled_schema();
        let mut r = Recipe::defaults(&s);
        r.continuous.insert("nose/width".into(), -0.4);
        assert_eq!(normalize_scale(&r, &s).unwrap(), r);

        r.continuous.insert("head/scale".into(), 1.0);
        r.continuous.insert("nose/width".into(), 1.2);
        assert!(matches!(normalize_scale(&r, &s), Err(RecipeError::Validation(_))));

        assert!(matches!(
            normalize_scale(&Recipe::defaults(&three_region()), &three_region()),
            Err(RecipeError::Unsupported(_))
        ));
    }
}
