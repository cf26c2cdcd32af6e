use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RecipeError;

/// A continuous (blendshape-like) parameter of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Value used when a recipe omits the parameter. Defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            default: None,
        }
    }

    pub fn default_value(&self) -> f64 {
        self.default.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetOption {
    pub asset: String,
    pub guid: String,
}

/// A mutually exclusive choice among assets ("sculpt").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub options: Vec<AssetOption>,
    /// Option index selected when a recipe omits the slot.
    #[serde(default)]
    pub default: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub slots: Vec<SlotSpec>,
}

/// How the global scale parameter couples into other parameters.
///
/// The scale parameter value `v` maps to the multiplier
/// `1 + gain * (v - reference)`; every coupled parameter enters geometry only
/// through its product with that multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCoupling {
    pub reference: f64,
    pub gain: f64,
    pub coupled: Vec<String>,
}

/// On-disk JSON form of a schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDoc {
    pub regions: Vec<RegionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_param_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_coupling: Option<ScaleCoupling>,
}

/// Index ranges of one discrete slot inside a [`TargetVector`](super::TargetVector).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLayout {
    pub name: String,
    pub continuous: Range<usize>,
    pub slots: Vec<SlotLayout>,
}

impl RegionLayout {
    /// Full index range occupied by this region.
    pub fn span(&self) -> Range<usize> {
        let end = self.slots.last().map_or(self.continuous.end, |s| s.range.end);
        self.continuous.start..end
    }
}

/// Index map from target-vector coordinates back to the schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub regions: Vec<RegionLayout>,
    pub len: usize,
    /// Human-readable coordinate names, one per index.
    pub names: Vec<String>,
}

impl Layout {
    pub fn region(&self, name: &str) -> Option<&RegionLayout> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        self.regions.iter().flat_map(|r| r.continuous.clone()).collect()
    }

    pub fn slots(&self) -> impl Iterator<Item = &SlotLayout> {
        self.regions.iter().flat_map(|r| r.slots.iter())
    }

    pub fn is_continuous(&self, index: usize) -> bool {
        self.regions.iter().any(|r| r.continuous.contains(&index))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParamRef {
    pub region: usize,
    pub param: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct SlotRef {
    pub region: usize,
    pub slot: usize,
}

/// The full parametric target space: regions, continuous parameters and
/// discrete slots, plus the optional global scale coupling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SchemaDoc", into = "SchemaDoc")]
pub struct ParameterSchema {
    doc: SchemaDoc,
    layout: Arc<Layout>,
    params: BTreeMap<String, ParamRef>,
    slots: BTreeMap<String, SlotRef>,
}

impl PartialEq for ParameterSchema {
    fn eq(&self, other: &Self) -> bool {
        self.doc == other.doc
    }
}

impl TryFrom<SchemaDoc> for ParameterSchema {
    type Error = RecipeError;

    fn try_from(doc: SchemaDoc) -> Result<Self, Self::Error> {
        Self::new(doc)
    }
}

impl From<ParameterSchema> for SchemaDoc {
    fn from(schema: ParameterSchema) -> Self {
        schema.doc
    }
}

fn schema_err(msg: impl Into<String>) -> RecipeError {
    RecipeError::Schema(msg.into())
}

impl ParameterSchema {
    pub fn new(doc: SchemaDoc) -> Result<Self, RecipeError> {
        let mut region_names = HashSet::new();
        let mut params = BTreeMap::new();
        let mut slots = BTreeMap::new();
        for (ri, region) in doc.regions.iter().enumerate() {
            if region.name.is_empty() || region.name.contains(['/', ' ']) {
                return Err(schema_err(format!("invalid region name {:?}", region.name)));
            }
            if !region_names.insert(region.name.as_str()) {
                return Err(schema_err(format!("duplicate region {}", region.name)));
            }
            for (pi, p) in region.params.iter().enumerate() {
                if p.name.is_empty() || p.name.contains(char::is_whitespace) {
                    return Err(schema_err(format!("invalid parameter name {:?}", p.name)));
                }
                if !(p.min.is_finite() && p.max.is_finite() && p.min < p.max) {
                    return Err(schema_err(format!(
                        "parameter {}/{} needs finite min < max, got [{}, {}]",
                        region.name, p.name, p.min, p.max
                    )));
                }
                let d = p.default_value();
                if !(p.min..=p.max).contains(&d) {
                    return Err(schema_err(format!(
                        "default {d} of {}/{} outside [{}, {}]",
                        region.name, p.name, p.min, p.max
                    )));
                }
                let full = format!("{}/{}", region.name, p.name);
                if params
                    .insert(full.clone(), ParamRef { region: ri, param: pi })
                    .is_some()
                {
                    return Err(schema_err(format!("duplicate parameter {full}")));
                }
            }
            for (si, s) in region.slots.iter().enumerate() {
                if s.name.is_empty() || s.name.contains(char::is_whitespace) || s.name == "modifier" {
                    return Err(schema_err(format!("invalid slot name {:?}", s.name)));
                }
                if s.options.is_empty() {
                    return Err(schema_err(format!("slot {} has no options", s.name)));
                }
                if s.default >= s.options.len() {
                    return Err(schema_err(format!("slot {} default index out of range", s.name)));
                }
                let mut guids = HashSet::new();
                for o in &s.options {
                    if o.guid.is_empty()
                        || o.guid.contains(char::is_whitespace)
                        || o.asset.is_empty()
                        || o.asset.contains(char::is_whitespace)
                    {
                        return Err(schema_err(format!("slot {} has a malformed option", s.name)));
                    }
                    if !guids.insert(o.guid.as_str()) {
                        return Err(schema_err(format!("slot {} repeats guid {}", s.name, o.guid)));
                    }
                }
                if slots
                    .insert(s.name.clone(), SlotRef { region: ri, slot: si })
                    .is_some()
                {
                    return Err(schema_err(format!("duplicate slot {}", s.name)));
                }
            }
        }
        if let Some(coupling) = &doc.scale_coupling {
            let Some(scale) = &doc.scale_param_name else {
                return Err(schema_err("scale_coupling given without scale_param_name"));
            };
            if !coupling.gain.is_finite() || !coupling.reference.is_finite() {
                return Err(schema_err("scale coupling must be finite"));
            }
            for c in &coupling.coupled {
                if c == scale || !params.contains_key(c) {
                    return Err(schema_err(format!("invalid scale-coupled parameter {c}")));
                }
            }
        }
        if let Some(scale) = &doc.scale_param_name {
            let Some(r) = params.get(scale) else {
                return Err(schema_err(format!("scale parameter {scale} not declared")));
            };
            let spec = &doc.regions[r.region].params[r.param];
            if let Some(coupling) = &doc.scale_coupling {
                if !(spec.min..=spec.max).contains(&coupling.reference) {
                    return Err(schema_err("scale reference outside the scale parameter range"));
                }
                for v in [spec.min, spec.max] {
                    if 1.0 + coupling.gain * (v - coupling.reference) <= 0.0 {
                        return Err(schema_err("scale multiplier must stay positive over its range"));
                    }
                }
            }
        }
        let layout = Arc::new(build_layout(&doc));
        Ok(Self {
            doc,
            layout,
            params,
            slots,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RecipeError> {
        let doc: SchemaDoc =
            serde_json::from_str(text).map_err(|e| schema_err(format!("schema JSON: {e}")))?;
        Self::new(doc)
    }

    pub fn load(path: &Path) -> Result<Self, RecipeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| schema_err(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("schema serializes")
    }

    pub fn doc(&self) -> &SchemaDoc {
        &self.doc
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.doc.regions
    }

    pub fn region_names(&self) -> impl Iterator<Item = &str> {
        self.doc.regions.iter().map(|r| r.name.as_str())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Full `region/param` names in schema order.
    pub fn param_names(&self) -> impl Iterator<Item = String> + '_ {
        self.doc
            .regions
            .iter()
            .flat_map(|r| r.params.iter().map(move |p| format!("{}/{}", r.name, p.name)))
    }

    pub fn param(&self, full_name: &str) -> Option<&ParamSpec> {
        self.params
            .get(full_name)
            .map(|r| &self.doc.regions[r.region].params[r.param])
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots
            .get(name)
            .map(|r| &self.doc.regions[r.region].slots[r.slot])
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.doc
            .regions
            .iter()
            .flat_map(|r| r.slots.iter().map(|s| s.name.as_str()))
    }

    pub fn scale_param_name(&self) -> Option<&str> {
        self.doc.scale_param_name.as_deref()
    }

    pub fn scale_coupling(&self) -> Option<&ScaleCoupling> {
        self.doc.scale_coupling.as_ref()
    }

    /// Multiplier applied to every scale-coupled parameter for scale value `v`.
    ///
    /// Exactly `1.0` at the reference value.
    pub fn scale_multiplier(&self, v: f64) -> f64 {
        match &self.doc.scale_coupling {
            Some(c) => 1.0 + c.gain * (v - c.reference),
            None => 1.0,
        }
    }

    /// Product of the option counts of every discrete slot.
    pub fn combinatorial_complexity(&self) -> u128 {
        self.slot_names()
            .map(|s| self.slot(s).map_or(1, |s| s.options.len() as u128))
            .product()
    }

    /// Target-vector index ranges of one region: the continuous range (empty
    /// ranges are omitted) and one range per discrete slot.
    pub fn group_slices(
        &self,
        region: &str,
    ) -> Result<(Vec<Range<usize>>, Vec<Range<usize>>), RecipeError> {
        let r = self
            .layout
            .region(region)
            .ok_or_else(|| RecipeError::UnknownRegion(region.to_string()))?;
        let continuous = if r.continuous.is_empty() {
            Vec::new()
        } else {
            vec![r.continuous.clone()]
        };
        let discrete = r.slots.iter().map(|s| s.range.clone()).collect();
        Ok((continuous, discrete))
    }
}

fn build_layout(doc: &SchemaDoc) -> Layout {
    let mut regions = Vec::with_capacity(doc.regions.len());
    let mut names = Vec::new();
    let mut at = 0;
    for r in &doc.regions {
        let start = at;
        for p in &r.params {
            names.push(format!("{}/{}", r.name, p.name));
        }
        at += r.params.len();
        let continuous = start..at;
        let mut slots = Vec::with_capacity(r.slots.len());
        for s in &r.slots {
            let begin = at;
            for o in &s.options {
                names.push(format!("{}={}", s.name, o.asset));
            }
            at += s.options.len();
            slots.push(SlotLayout {
                name: s.name.clone(),
                range: begin..at,
            });
        }
        regions.push(RegionLayout {
            name: r.name.clone(),
            continuous,
            slots,
        });
    }
    Layout {
        regions,
        len: at,
        names,
    }
}
