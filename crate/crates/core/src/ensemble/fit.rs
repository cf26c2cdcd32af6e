use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::trainer::PredictionMatrix;

use super::EnsembleError;

fn check_columns(columns: &[&[f64]], target: &[f64]) -> Result<(), EnsembleError> {
    if target.is_empty() {
        return Err(EnsembleError::Length("columns are empty".into()));
    }
    for c in columns {
        if c.len() != target.len() {
            return Err(EnsembleError::Length(format!(
                "column of length {} against target of length {}",
                c.len(),
                target.len()
            )));
        }
    }
    if columns.iter().chain([&target]).any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(EnsembleError::NonFinite);
    }
    Ok(())
}

/// Weight `w` on `local` (and `1 - w` on `global`) minimizing the summed
/// squared error against `target`. Returns 0.5 when the two columns are
/// numerically identical, since every weight is then optimal.
pub fn fit_weights_pair(local: &[f64], global: &[f64], target: &[f64]) -> Result<f64, EnsembleError> {
    check_columns(&[local, global], target)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut mass = 0.0;
    for ((&l, &g), &t) in local.iter().zip(global).zip(target) {
        num += (t - g) * (l - g);
        den += (l - g) * (l - g);
        mass += l * l + g * g;
    }
    if den < 1e-12 * mass + 1e-30 {
        return Ok(0.5);
    }
    Ok(num / den)
}

/// Orthonormal basis of the plane `sum(w) = 0` in `n` dimensions (Helmert
/// contrasts), as the columns of an `n x (n-1)` matrix.
fn sum_zero_basis(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n - 1, |i, k| {
        let k1 = (k + 1) as f64;
        let norm = (k1 * (k1 + 1.0)).sqrt();
        if i <= k {
            1.0 / norm
        } else if i == k + 1 {
            -k1 / norm
        } else {
            0.0
        }
    })
}

/// Least squares over `w` with `sum(w) = 1`, written as `w = u + Z z` with
/// `u` uniform and `Z` orthonormal; `z` is the minimum-norm solution, so a
/// rank-deficient problem gets the optimum closest to uniform weights.
pub(crate) fn constrained_lstsq(columns: &[&[f64]], target: &[f64]) -> Vec<f64> {
    let n = columns.len();
    let rows = target.len();
    let p = DMatrix::from_fn(rows, n, |d, i| columns[i][d]);
    let u = DVector::from_element(n, 1.0 / n as f64);
    let z_basis = sum_zero_basis(n);
    let a = &p * &z_basis;
    let b = DVector::from_column_slice(target) - &p * &u;
    let mass: f64 = p.iter().map(|v| v * v).sum();
    let svd = a.svd(true, true);
    let (uu, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let utb = uu.transpose() * &b;
    let mut z = DVector::zeros(n - 1);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s * s >= 1e-12 * mass + 1e-30 {
            z += vt.row(k).transpose() * (utb[k] / s);
        }
    }
    (u + z_basis * z).iter().copied().collect()
}

/// Sum-to-one weights over `preds` minimizing the summed squared error
/// against `target`.
pub fn fit_weights_general(preds: &[&[f64]], target: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if preds.is_empty() {
        return Err(EnsembleError::NoContributors("(unnamed)".into()));
    }
    check_columns(preds, target)?;
    match preds.len() {
        1 => Ok(vec![1.0]),
        2 => {
            let w = fit_weights_pair(preds[1], preds[0], target)?;
            Ok(vec![1.0 - w, w])
        }
        _ => Ok(constrained_lstsq(preds, target)),
    }
}

/// Per target coordinate, a weight for every model predicting it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights {
    pub coords: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Prediction matrices of the ensemble members, keyed by model id, plus
/// the target matrix in the same sample order.
#[derive(Debug, Clone)]
pub struct MemberMatrices {
    /// The aggregate model first, then the local models.
    pub models: Vec<(String, PredictionMatrix)>,
    pub target: PredictionMatrix,
}

impl MemberMatrices {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let n = self.target.rows.len();
        for (id, m) in &self.models {
            if m.rows.len() != n {
                return Err(EnsembleError::Inconsistent(format!(
                    "model {id} has {} rows, target has {n}",
                    m.rows.len()
                )));
            }
            if let Some(c) = m.names.iter().find(|c| self.target.column_index(c).is_none()) {
                return Err(EnsembleError::Inconsistent(format!("model {id} predicts unknown coordinate {c}")));
            }
        }
        Ok(())
    }

    /// Column of every model predicting `coord`, in member order.
    pub fn contributors(&self, coord: &str) -> Vec<(&str, Vec<f64>)> {
        self.models
            .iter()
            .filter_map(|(id, m)| Some((id.as_str(), m.column(m.column_index(coord)?))))
            .collect()
    }

    /// Same samples restricted (or reordered) to `indices` in every matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            models: self
                .models
                .iter()
                .map(|(id, m)| (id.clone(), m.select_rows(indices)))
                .collect(),
            target: self.target.select_rows(indices),
        }
    }

    /// Blended predictions over all target coordinates.
    pub fn blend(&self, weights: &EnsembleWeights) -> Result<PredictionMatrix, EnsembleError> {
        self.validate()?;
        let n = self.target.rows.len();
        let mut rows = vec![vec![0.0; self.target.names.len()]; n];
        for (j, coord) in self.target.names.iter().enumerate() {
            let w = weights.for_coord(coord)?;
            for (id, col) in self.contributors(coord) {
                let wi = w.get(id).copied().unwrap_or(0.0);
                for (row, v) in rows.iter_mut().zip(col) {
                    row[j] += wi * v;
                }
            }
        }
        Ok(PredictionMatrix {
            names: self.target.names.clone(),
            rows,
        })
    }

    /// Summed squared error per target coordinate under `weights`.
    pub fn coordinate_l2(&self, weights: &EnsembleWeights) -> Result<Vec<f64>, EnsembleError> {
        let blended = self.blend(weights)?;
        Ok((0..self.target.names.len())
            .map(|j| {
                blended
                    .rows
                    .iter()
                    .zip(&self.target.rows)
                    .map(|(p, t)| (p[j] - t[j]).powi(2))
                    .sum()
            })
            .collect())
    }
}

impl EnsembleWeights {
    pub fn for_coord(&self, coord: &str) -> Result<&BTreeMap<String, f64>, EnsembleError> {
        self.coords
            .get(coord)
            .ok_or_else(|| EnsembleError::NoContributors(coord.to_string()))
    }

    /// Weight `c` shared equally by the local models of each coordinate and
    /// `1 - c` on the aggregate (the first member); coordinates without a
    /// local model keep weight 1 on the aggregate.
    pub fn constant(members: &MemberMatrices, c: f64) -> Result<Self, EnsembleError> {
        let aggregate = members
            .models
            .first()
            .map(|(id, _)| id.as_str())
            .ok_or_else(|| EnsembleError::Inconsistent("no models".into()))?;
        let mut coords = BTreeMap::new();
        for coord in &members.target.names {
            let contrib = members.contributors(coord);
            let ids: Vec<&str> = contrib.iter().map(|(id, _)| *id).collect();
            let locals = ids.iter().filter(|&&id| id != aggregate).count();
            let mut w = BTreeMap::new();
            for id in ids {
                let v = match (id == aggregate, locals) {
                    (true, 0) => 1.0,
                    (true, _) => 1.0 - c,
                    (false, k) if contrib.iter().any(|(a, _)| *a == aggregate) => c / k as f64,
                    (false, k) => 1.0 / k as f64,
                };
                w.insert(id.to_string(), v);
            }
            if w.is_empty() {
                return Err(EnsembleError::NoContributors(coord.clone()));
            }
            coords.insert(coord.clone(), w);
        }
        Ok(Self { coords })
    }

    /// Checks coverage and the sum-to-one constraint against the members.
    pub fn validate(&self, members: &[(String, Vec<String>)], coordinates: &[String]) -> Result<(), EnsembleError> {
        for coord in coordinates {
            let contributors: Vec<&str> = members
                .iter()
                .filter(|(_, names)| names.contains(coord))
                .map(|(id, _)| id.as_str())
                .collect();
            if contributors.is_empty() {
                return Err(EnsembleError::NoContributors(coord.clone()));
            }
            let w = self.for_coord(coord)?;
            if let Some(id) = w.keys().find(|id| !contributors.contains(&id.as_str())) {
                return Err(EnsembleError::Inconsistent(format!(
                    "{coord}: weight for {id}, which does not predict it"
                )));
            }
            let sum: f64 = w.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(EnsembleError::Inconsistent(format!("{coord}: weights sum to {sum}")));
            }
        }
        Ok(())
    }
}

/// Fits every target coordinate independently from the models predicting
/// it. A coordinate predicted by a single model gets weight 1 on it.
pub fn fit_ensemble(members: &MemberMatrices) -> Result<EnsembleWeights, EnsembleError> {
    members.validate()?;
    let target = &members.target;
    let mut coords = BTreeMap::new();
    for (j, coord) in target.names.iter().enumerate() {
        let contrib = members.contributors(coord);
        if contrib.is_empty() {
            return Err(EnsembleError::NoContributors(coord.clone()));
        }
        let t = target.column(j);
        let cols: Vec<&[f64]> = contrib.iter().map(|(_, c)| c.as_slice()).collect();
        let w = fit_weights_general(&cols, &t)?;
        coords.insert(
            coord.clone(),
            contrib.iter().map(|(id, _)| id.to_string()).zip(w).collect(),
        );
    }
    Ok(EnsembleWeights { coords })
}
