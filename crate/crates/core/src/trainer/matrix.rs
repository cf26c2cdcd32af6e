use std::path::Path;

use crate::adapt::DomainAdapter;
use crate::recipe::{encode, parse_mhm};
use crate::synth::DatasetManifest;

use super::{prepare_input, TrainError, TrainedModel};

/// Samples × coordinates, with coordinate names as the CSV header and rows
/// in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PredictionMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, TrainError> {
        if let Some(r) = rows.iter().find(|r| r.len() != names.len()) {
            return Err(TrainError::Shape(format!(
                "row of length {} under {} column names",
                r.len(),
                names.len()
            )));
        }
        Ok(Self { names, rows })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.names.len())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[index]).collect()
    }

    /// Rows reordered (or subset) by `indices`.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Values use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string())).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: csv::Error| TrainError::Artifact(format!("prediction csv: {e}"));
        let names: Vec<String> = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(bad)?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| TrainError::Artifact(format!("prediction csv value {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::new(names, rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }
}

/// Predictions of `model` on every manifest sample, inputs prepared per the
/// model's configuration. `adapter` runs first on each raw image.
pub fn predict_matrix(
    model: &TrainedModel,
    dataset: &DatasetManifest,
    adapter: Option<&dyn DomainAdapter>,
) -> Result<PredictionMatrix, TrainError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset
            .load_sample(i)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        let image = match adapter {
            Some(a) => a.adapt(&s.image).map_err(|e| TrainError::Data(e.to_string()))?,
            None => s.image,
        };
        let input = prepare_input(&image, s.landmarks, &model.config.input, &model.config.frame)?;
        rows.push(model.predict(&input)?);
    }
    PredictionMatrix::new(model.slice.names.clone(), rows)
}

/// Encoded true recipes of every manifest sample, columns named by the
/// schema layout.
pub fn target_matrix(dataset: &DatasetManifest) -> Result<PredictionMatrix, TrainError> {
    let rows = dataset
        .entries
        .iter()
        .map(|e| {
            let r = parse_mhm(&e.recipe, &dataset.schema).map_err(|err| TrainError::Data(format!("{}: {err}", e.id)))?;
            encode(&r, &dataset.schema)
                .map(|t| t.values)
                .map_err(|err| TrainError::Data(format!("{}: {err}", e.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    PredictionMatrix::new(dataset.schema.layout().names.clone(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = PredictionMatrix::new(
            vec!["a/x".into(), "a/s:o1".into(), "b,c".into()],
            vec![vec![0.1, -1.0 / 3.0, 1e-17], vec![2.5, 0.0, -7.123456789012]],
        )
        .unwrap();
        assert_eq!(m.shape(), (2, 3));
        let back = PredictionMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
        let text = m.to_csv();
        assert_eq!(text.lines().next().unwrap(), "a/x,a/s:o1,\"b,c\"");
        assert!(PredictionMatrix::new(vec!["a".into()], vec![vec![1.0, 2.0]]).is_err());
        assert!(PredictionMatrix::from_csv("a,b\n1,x\n").is_err());
    }
}
