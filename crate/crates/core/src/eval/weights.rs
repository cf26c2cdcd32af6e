use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleWeights, MemberMatrices};
use crate::recipe::ParameterSchema;

use super::EvalError;

/// Summed squared error of one weighting on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantWeightsRow {
    /// `fitting` or `eval`.
    pub split: String,
    /// `fitted` or the constant local weight.
    pub weights: String,
    pub total_l2: f64,
    /// Sum over each region's coordinates, schema order.
    pub region_l2: Vec<(String, f64)>,
    pub coordinate_l2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantWeightsTable {
    pub coordinates: Vec<String>,
    pub rows: Vec<ConstantWeightsRow>,
}

/// Constant local weights compared against the fitted ones.
pub const CONSTANT_WEIGHTS: [f64; 3] = [0.0, 0.5, 1.0];

/// L2 error of the fitted weights and of constant local weights 0, 0.5
/// and 1 on the fitting split and on the evaluation split.
pub fn compare_constant_weights(
    fitting: &MemberMatrices,
    eval: &MemberMatrices,
    fitted: &EnsembleWeights,
    schema: &ParameterSchema,
) -> Result<ConstantWeightsTable, EvalError> {
    let layout = schema.layout();
    if fitting.target.names != layout.names || eval.target.names != layout.names {
        return Err(EvalError::Shape("target matrices must cover the schema layout".into()));
    }
    let stage = |e: crate::ensemble::EnsembleError| EvalError::Stage(format!("ensemble: {e}"));
    let mut candidates = vec![("fitted".to_string(), fitted.clone())];
    for c in CONSTANT_WEIGHTS {
        candidates.push((format!("{c:.1}"), EnsembleWeights::constant(fitting, c).map_err(stage)?));
    }
    let mut rows = Vec::new();
    for (split, m) in [("fitting", fitting), ("eval", eval)] {
        for (label, w) in &candidates {
            let coordinate_l2 = m.coordinate_l2(w).map_err(stage)?;
            let region_l2 = layout
                .regions
                .iter()
                .map(|r| (r.name.clone(), r.span().map(|j| coordinate_l2[j]).sum()))
                .collect();
            rows.push(ConstantWeightsRow {
                split: split.to_string(),
                weights: label.clone(),
                total_l2: coordinate_l2.iter().sum(),
                region_l2,
                coordinate_l2,
            });
        }
    }
    Ok(ConstantWeightsTable {
        coordinates: layout.names.clone(),
        rows,
    })
}

impl ConstantWeightsTable {
    pub fn row(&self, split: &str, weights: &str) -> Option<&ConstantWeightsRow> {
        self.rows.iter().find(|r| r.split == split && r.weights == weights)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let regions: Vec<&str> = self.rows.first().map_or(Vec::new(), |r| {
            r.region_l2.iter().map(|(n, _)| n.as_str()).collect()
        });
        let mut header = vec!["split".to_string(), "weights".into(), "total_l2".into()];
        header.extend(regions.iter().map(|r| format!("{r}_l2")));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.split.clone(), r.weights.clone(), r.total_l2.to_string()];
            rec.extend(r.region_l2.iter().map(|(_, v)| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Per-coordinate L2 of every row, one CSV row per coordinate.
    pub fn coordinates_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["coordinate".to_string()];
        header.extend(self.rows.iter().map(|r| format!("{}:{}", r.split, r.weights)));
        w.write_record(&header).expect("in-memory write");
        for (j, name) in self.coordinates.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.rows.iter().map(|r| r.coordinate_l2[j].to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn to_text(&self) -> String {
        let mut by_split: BTreeMap<&str, Vec<&ConstantWeightsRow>> = BTreeMap::new();
        for r in &self.rows {
            by_split.entry(r.split.as_str()).or_default().push(r);
        }
        let mut out = String::new();
        let _ = writeln!(out, "Summed L2 error; constant rows put that weight on the local models.");
        let regions: Vec<&str> = self.rows.first().map_or(Vec::new(), |r| {
            r.region_l2.iter().map(|(n, _)| n.as_str()).collect()
        });
        let _ = write!(out, "{:<8} {:<7} {:>12}", "split", "weights", "total");
        for r in &regions {
            let _ = write!(out, " {r:>10}");
        }
        out.push('\n');
        for split in ["fitting", "eval"] {
            for r in by_split.get(split).into_iter().flatten() {
                let _ = write!(out, "{:<8} {:<7} {:>12.4}", r.split, r.weights, r.total_l2);
                for (_, v) in &r.region_l2 {
                    let _ = write!(out, " {v:>10.4}");
                }
                out.push('\n');
            }
        }
        out
    }
}
