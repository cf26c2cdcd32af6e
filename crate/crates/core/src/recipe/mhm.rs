//! Line-oriented recipe files.
//!
//! Only two line kinds are interpreted:
//!
//! ```text
//! modifier <region>/<name> <float>
//! <slot> <asset_name> <guid>
//! ```
//!
//! Everything else (camera, material, name, version, modifiers the schema
//! does not know) is kept verbatim in [`Recipe::extras`]. Blank lines are
//! dropped.

use super::{ParameterSchema, Recipe, RecipeError};

pub fn parse_mhm(text: &str, schema: &ParameterSchema) -> Result<Recipe, RecipeError> {
    let mut recipe = Recipe::defaults(schema);
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens[0] == "modifier" {
            if tokens.len() != 3 {
                return Err(RecipeError::Parse {
                    line: line_no,
                    message: format!("expected `modifier <name> <value>`, got {line:?}"),
                });
            }
            let value: f64 = tokens[2].parse().map_err(|_| RecipeError::Parse {
                line: line_no,
                message: format!("modifier {} has non-numeric value {:?}", tokens[1], tokens[2]),
            })?;
            if !value.is_finite() {
                return Err(RecipeError::Parse {
                    line: line_no,
                    message: format!("modifier {} has non-finite value", tokens[1]),
                });
            }
            if schema.param(tokens[1]).is_some() {
                recipe.continuous.insert(tokens[1].to_string(), value);
            } else {
                recipe.extras.push(line.to_string());
            }
            continue;
        }
        if let Some(slot) = schema.slot(tokens[0]) {
            if tokens.len() != 3 {
                return Err(RecipeError::Parse {
                    line: line_no,
                    message: format!("expected `{} <asset> <guid>`, got {line:?}", slot.name),
                });
            }
            let guid = tokens[2];
            if !slot.options.iter().any(|o| o.guid == guid) {
                return Err(RecipeError::UnknownAsset {
                    line: line_no,
                    slot: slot.name.clone(),
                    guid: guid.to_string(),
                });
            }
            recipe.discrete.insert(slot.name.clone(), guid.to_string());
            continue;
        }
        recipe.extras.push(line.to_string());
    }
    Ok(recipe)
}

/// Canonical text form: modifiers in schema order at 6 decimals, then slot
/// lines in schema order, then extras. Every line ends with `\n`.
pub fn serialize_mhm(recipe: &Recipe, schema: &ParameterSchema) -> Result<String, RecipeError> {
    let r = recipe.validated(schema)?;
    let mut out = String::new();
    for name in schema.param_names() {
        out.push_str(&format!("modifier {} {:.6}\n", name, r.continuous[&name]));
    }
    for slot_name in schema.slot_names() {
        let slot = schema.slot(slot_name).expect("slot resolves");
        let guid = &r.discrete[slot_name];
        let asset = slot
            .options
            .iter()
            .find(|o| &o.guid == guid)
            .expect("validated guid");
        out.push_str(&format!("{} {} {}\n", slot_name, asset.asset, guid));
    }
    for extra in &r.extras {
        out.push_str(extra);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::{AssetOption, ParamSpec, RegionSpec, SchemaDoc, SlotSpec};

    const SNIPPET: &str = "version v1.1.1\n\
modifier head/head-age-decr|incr 0.068249\n\
modifier head/head-oval 0.255893\n\
modifier eyebrows/eyebrows-angle-down|up -0.087145\n\
modifier eyes/r-eye-bag-in|out -0.039712\n\
\n\
eyelashes eyelashes02 04a0718e-aaa4-4480-a013-ad51703bef6b\n\
eyebrows eyebrow004 eb028b6d-3ff8-40c7-a2ea-4d9aa808b38d\n\
camera 0.0 0.0\n";

    fn makehuman_like() -> ParameterSchema {
        let p = |n: &str| ParamSpec::new(n, -1.0, 1.0);
        ParameterSchema::new(SchemaDoc {
            regions: vec![
                RegionSpec {
                    name: "head".into(),
                    params: vec![p("head-age-decr|incr"), p("head-oval")],
                    slots: vec![],
                },
                RegionSpec {
                    name: "eyebrows".into(),
                    params: vec![p("eyebrows-angle-down|up")],
                    slots: vec![SlotSpec {
                        name: "eyebrows".into(),
                        options: vec![
                            AssetOption {
                                asset: "eyebrow001".into(),
                                guid: "00000000-0000-0000-0000-000000000001".into(),
                            },
                            AssetOption {
                                asset: "eyebrow004".into(),
                                guid: "eb028b6d-3ff8-40c7-a2ea-4d9aa808b38d".into(),
                            },
                        ],
                        default: 0,
                    }],
                },
                RegionSpec {
                    name: "eyes".into(),
                    params: vec![p("r-eye-bag-in|out")],
                    slots: vec![SlotSpec {
                        name: "eyelashes".into(),
                        options: vec![
                            AssetOption {
                                asset: "eyelashes01".into(),
                                guid: "00000000-0000-0000-0000-0000000000aa".into(),
                            },
                            AssetOption {
                                asset: "eyelashes02".into(),
                                guid: "04a0718e-aaa4-4480-a013-ad51703bef6b".into(),
                            },
                        ],
                        default: 0,
                    }],
                },
            ],
            scale_param_name: None,
            scale_coupling: None,
        })
        .unwrap()
    }

    #[test]
    fn parses_modifiers_and_slots() {
        let s = makehuman_like();
        let r = parse_mhm(SNIPPET, &s).unwrap();
        assert_eq!(r.continuous["head/head-oval"], 0.255893);
        assert_eq!(r.continuous["eyebrows/eyebrows-angle-down|up"], -0.087145);
        assert_eq!(r.discrete["eyelashes"], "04a0718e-aaa4-4480-a013-ad51703bef6b");
        assert_eq!(r.discrete["eyebrows"], "eb028b6d-3ff8-40c7-a2ea-4d9aa808b38d");
        assert_eq!(r.extras, vec!["version v1.1.1", "camera 0.0 0.0"]);
    }

    #[test]
    fn empty_text_gives_defaults() {
        let s = makehuman_like();
        let r = parse_mhm("", &s).unwrap();
        assert_eq!(r, Recipe::defaults(&s));
        assert!(r.extras.is_empty());
    }

    #[test]
    fn unknown_modifiers_are_preserved() {
        let s = makehuman_like();
        let r = parse_mhm("modifier forehead/forehead-scale-vert-decr|incr -0.046971\n", &s).unwrap();
        assert_eq!(r.extras, vec!["modifier forehead/forehead-scale-vert-decr|incr -0.046971"]);
    }

    #[test]
    fn malformed_value_reports_line() {
        let s = makehuman_like();
        let err = parse_mhm("version 1\nmodifier head/head-oval abc\n", &s).unwrap_err();
        assert!(matches!(err, RecipeError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn unknown_guid_is_rejected() {
        let s = makehuman_like();
        let err = parse_mhm("eyelashes eyelashes09 not-a-guid\n", &s).unwrap_err();
        assert!(matches!(err, RecipeError::UnknownAsset { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn serialize_is_canonical_and_round_trips() {
        let s = makehuman_like();
        let r = parse_mhm(SNIPPET, &s).unwrap();
        let text = serialize_mhm(&r, &s).unwrap();
        assert_eq!(
            text,
            "modifier head/head-age-decr|incr 0.068249\n\
modifier head/head-oval 0.255893\n\
modifier eyebrows/eyebrows-angle-down|up -0.087145\n\
modifier eyes/r-eye-bag-in|out -0.039712\n\
eyebrows eyebrow004 eb028b6d-3ff8-40c7-a2ea-4d9aa808b38d\n\
eyelashes eyelashes02 04a0718e-aaa4-4480-a013-ad51703bef6b\n\
version v1.1.1\n\
camera 0.0 0.0\n"
        );
        let back = parse_mhm(&text, &s).unwrap();
        assert_eq!(back, r);
        assert_eq!(serialize_mhm(&back, &s).unwrap(), text);
    }

    #[test]
    fn default_recipe_serializes_zeros() {
        let s = makehuman_like();
        let text = serialize_mhm(&Recipe::defaults(&s), &s).unwrap();
        let modifiers: Vec<&str> = text.lines().filter(|l| l.starts_with("modifier")).collect();
        assert_eq!(modifiers.len(), 4);
        assert!(modifiers.iter().all(|l| l.ends_with(" 0.000000")));
    }

    #[test]
    fn serialize_rejects_invalid_recipe() {
        let s = makehuman_like();
        let mut r = Recipe::defaults(&s);
        r.continuous.insert("head/head-oval".into(), 4.0);
        assert!(matches!(serialize_mhm(&r, &s), Err(RecipeError::Validation(_))));
    }
}
