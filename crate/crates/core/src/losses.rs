//! Multi-part heterogeneous loss: per-region regression terms over the
//! continuous coordinates plus per-region cross-entropy terms over the
//! one-hot slices,
//!
//! ```text
//! total = sum_i v_i R_i + sum_i w_i C_i
//! ```
//!
//! `R_i` is the mean L1 or L2 error over region `i`'s continuous
//! coordinates and `C_i` the mean over region `i`'s slots of
//! `-ln p[true option]`. Predictions for discrete slices are probabilities.

use serde::{Deserialize, Serialize};

use crate::recipe::{Layout, ParameterSchema, TargetVector};

/// Lower clamp on probabilities inside the logarithm.
pub const PROB_EPS: f64 = 1e-12;
/// Allowed deviation of a probability slice from the simplex.
pub const PROB_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction has length {got}, layout expects {expected}")]
    Layout { expected: usize, got: usize },
    #[error("slot {slot}: prediction is not a probability vector ({detail})")]
    NotProbabilities { slot: String, detail: String },
    #[error("weights: {0}")]
    Weights(String),
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("adaptive weights need at least 2 history points per term (term {0} has fewer); use fixed weights")]
    InsufficientHistory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionNorm {
    L1,
    L2,
}

/// Term weights, one entry per schema region in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub regression_norm: RegressionNorm,
}

impl LossWeights {
    /// Every term weighted 1.
    pub fn uniform(schema: &ParameterSchema, norm: RegressionNorm) -> Self {
        let n = schema.regions().len();
        Self {
            v: vec![1.0; n],
            w: vec![1.0; n],
            regression_norm: norm,
        }
    }

    /// Weights of one region kept, all others zeroed.
    pub fn restricted(&self, schema: &ParameterSchema, region: &str) -> Result<Self, LossError> {
        let k = region_index(schema.layout(), region)?;
        let mut out = self.clone();
        for i in 0..out.v.len() {
            if i != k {
                out.v[i] = 0.0;
                out.w[i] = 0.0;
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            v: self.v.iter().map(|x| x * c).collect(),
            w: self.w.iter().map(|x| x * c).collect(),
            regression_norm: self.regression_norm,
        }
    }

    pub fn validate(&self, layout: &Layout) -> Result<(), LossError> {
        let n = layout.regions.len();
        if self.v.len() != n || self.w.len() != n {
            return Err(LossError::Weights(format!(
                "expected {n} weights per kind, got v={} w={}",
                self.v.len(),
                self.w.len()
            )));
        }
        if self.v.iter().chain(&self.w).any(|x| !x.is_finite()) {
            return Err(LossError::Weights("non-finite weight".into()));
        }
        if self.v.iter().chain(&self.w).all(|&x| x == 0.0) {
            return Err(LossError::Weights("all weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `R_i` per region, schema order; 0 for regions without continuous params.
    pub regression: Vec<f64>,
    /// `C_i` per region, schema order; 0 for regions without slots.
    pub classification: Vec<f64>,
}

fn region_index(layout: &Layout, region: &str) -> Result<usize, LossError> {
    layout
        .regions
        .iter()
        .position(|r| r.name == region)
        .ok_or_else(|| LossError::UnknownRegion(region.to_string()))
}

fn check_probabilities(pred: &[f64], layout: &Layout) -> Result<(), LossError> {
    for slot in layout.slots() {
        let p = &pred[slot.range.clone()];
        let bad = |detail: String| LossError::NotProbabilities {
            slot: slot.name.clone(),
            detail,
        };
        if let Some(x) = p
            .iter()
            .find(|&&x| !(x >= -PROB_TOL && x <= 1.0 + PROB_TOL))
        {
            return Err(bad(format!("entry {x}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(bad(format!("sums to {sum}")));
        }
    }
    Ok(())
}

fn check_inputs(
    pred: &[f64],
    target: &TargetVector,
    layout: &Layout,
    weights: &LossWeights,
) -> Result<(), LossError> {
    for got in [pred.len(), target.len()] {
        if got != layout.len {
            return Err(LossError::Layout {
                expected: layout.len,
                got,
            });
        }
    }
    weights.validate(layout)?;
    check_probabilities(pred, layout)
}

/// Unchecked evaluation; used directly by training, where the head output
/// is a probability vector by construction.
pub(crate) fn evaluate(pred: &[f64], target: &[f64], layout: &Layout, weights: &LossWeights) -> LossBreakdown {
    let mut regression = Vec::with_capacity(layout.regions.len());
    let mut classification = Vec::with_capacity(layout.regions.len());
    let mut total = 0.0;
    for (k, r) in layout.regions.iter().enumerate() {
        let n = r.continuous.len();
        let reg = if n == 0 {
            0.0
        } else {
            let s: f64 = r
                .continuous
                .clone()
                .map(|i| {
                    let d = pred[i] - target[i];
                    match weights.regression_norm {
                        RegressionNorm::L1 => d.abs(),
                        RegressionNorm::L2 => d * d,
                    }
                })
                .sum();
            s / n as f64
        };
        let cls = if r.slots.is_empty() {
            0.0
        } else {
            let s: f64 = r
                .slots
                .iter()
                .map(|slot| {
                    let t = true_option(&target[slot.range.clone()]);
                    -pred[slot.range.start + t].clamp(PROB_EPS, 1.0).ln()
                })
                .sum();
            s / r.slots.len() as f64
        };
        total += weights.v[k] * reg + weights.w[k] * cls;
        regression.push(reg);
        classification.push(cls);
    }
    LossBreakdown {
        total,
        regression,
        classification,
    }
}

/// Index of the largest target entry; for exact encodings the hot one.
fn true_option(slice: &[f64]) -> usize {
    crate::recipe::argmax_lowest(slice)
}

/// Gradient of the total with respect to `pred` (subgradient 0 at the L1
/// kink and below the probability clamp).
pub(crate) fn gradient(pred: &[f64], target: &[f64], layout: &Layout, weights: &LossWeights, out: &mut [f64]) {
    out.fill(0.0);
    for (k, r) in layout.regions.iter().enumerate() {
        let n = r.continuous.len();
        if n > 0 && weights.v[k] != 0.0 {
            let scale = weights.v[k] / n as f64;
            for i in r.continuous.clone() {
                let d = pred[i] - target[i];
                out[i] = scale
                    * match weights.regression_norm {
                        RegressionNorm::L1 => d.signum() * (d != 0.0) as u8 as f64,
                        RegressionNorm::L2 => 2.0 * d,
                    };
            }
        }
        if !r.slots.is_empty() && weights.w[k] != 0.0 {
            let scale = weights.w[k] / r.slots.len() as f64;
            for slot in &r.slots {
                let i = slot.range.start + true_option(&target[slot.range.clone()]);
                let p = pred[i];
                if p > PROB_EPS && p <= 1.0 {
                    out[i] = -scale / p;
                }
            }
        }
    }
}

pub fn multipart_loss(
    pred: &[f64],
    target: &TargetVector,
    schema: &ParameterSchema,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let layout = schema.layout();
    check_inputs(pred, target, layout, weights)?;
    Ok(evaluate(pred, &target.values, layout, weights))
}

/// [`multipart_loss`] with every term outside `region` zeroed.
pub fn group_loss(
    pred: &[f64],
    target: &TargetVector,
    schema: &ParameterSchema,
    weights: &LossWeights,
    region: &str,
) -> Result<LossBreakdown, LossError> {
    let layout = schema.layout();
    let k = region_index(layout, region)?;
    check_inputs(pred, target, layout, weights)?;
    let mut b = evaluate(pred, &target.values, layout, weights);
    for i in 0..b.regression.len() {
        if i != k {
            b.regression[i] = 0.0;
            b.classification[i] = 0.0;
        }
    }
    b.total = weights.v[k] * b.regression[k] + weights.w[k] * b.classification[k];
    Ok(b)
}

/// Recent loss values per term; `None` marks a term that does not exist
/// (a region without continuous parameters or without slots).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub regression: Vec<Option<Vec<f64>>>,
    pub classification: Vec<Option<Vec<f64>>>,
}

impl LossHistory {
    /// Empty histories for every term that exists in `layout`.
    pub fn for_layout(layout: &Layout) -> Self {
        Self {
            regression: layout
                .regions
                .iter()
                .map(|r| (!r.continuous.is_empty()).then(Vec::new))
                .collect(),
            classification: layout
                .regions
                .iter()
                .map(|r| (!r.slots.is_empty()).then(Vec::new))
                .collect(),
        }
    }

    pub fn push(&mut self, b: &LossBreakdown) {
        for (h, &x) in self.regression.iter_mut().zip(&b.regression) {
            if let Some(h) = h {
                h.push(x);
            }
        }
        for (h, &x) in self.classification.iter_mut().zip(&b.classification) {
            if let Some(h) = h {
                h.push(x);
            }
        }
    }
}

/// Rate-of-change softmax weighting.
///
/// Each term's rate is the slope of its history (last minus first over the
/// number of steps) relative to its mean magnitude. Weights are
/// `n * softmax(rate / temperature)` over the `n` existing terms, so terms
/// that improve slowest (largest rate) get the largest weight and equal
/// histories give weight 1 everywhere. Missing terms get weight 0.
pub fn adaptive_weights(
    history: &LossHistory,
    temperature: f64,
    norm: RegressionNorm,
) -> Result<LossWeights, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::Weights(format!("temperature {temperature} must be positive")));
    }
    let terms: Vec<(usize, &Vec<f64>)> = history
        .regression
        .iter()
        .chain(&history.classification)
        .enumerate()
        .filter_map(|(i, h)| h.as_ref().map(|h| (i, h)))
        .collect();
    if terms.is_empty() {
        return Err(LossError::Weights("no loss terms".into()));
    }
    let nreg = history.regression.len();
    let mut rates = Vec::with_capacity(terms.len());
    for &(i, h) in &terms {
        if h.len() < 2 {
            let name = if i < nreg {
                format!("R{i}")
            } else {
                format!("C{}", i - nreg)
            };
            return Err(LossError::InsufficientHistory(name));
        }
        let mean = h.iter().map(|x| x.abs()).sum::<f64>() / h.len() as f64;
        let slope = (h[h.len() - 1] - h[0]) / (h.len() - 1) as f64;
        rates.push(slope / (mean + 1e-12));
    }
    let top = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rates.iter().map(|r| ((r - top) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    let n = terms.len() as f64;
    let mut all = vec![0.0; nreg + history.classification.len()];
    for (&(i, _), e) in terms.iter().zip(&exps) {
        all[i] = n * e / z;
    }
    let w = all.split_off(nreg);
    Ok(LossWeights {
        v: all,
        w,
        regression_norm: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::schema_tests::three_region;
    use crate::recipe::{ParamSpec, RegionSpec, SchemaDoc, SlotSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(schema: &ParameterSchema, rng: &mut ChaCha8Rng) -> (Vec<f64>, TargetVector) {
        let layout = schema.layout();
        let mut pred = vec![0.0; layout.len];
        let mut target = vec![0.0; layout.len];
        for i in layout.continuous_indices() {
            pred[i] = rng.random_range(-1.5..1.5);
            target[i] = rng.random_range(-1.0..1.0);
        }
        for slot in layout.slots() {
            let raw: Vec<f64> = slot.range.clone().map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (i, r) in slot.range.clone().zip(raw) {
                pred[i] = r / s;
            }
            target[slot.range.start + rng.random_range(0..slot.range.len())] = 1.0;
        }
        (pred, TargetVector::new(target, layout.clone()).unwrap())
    }

    fn random_weights(n: usize, rng: &mut ChaCha8Rng, norm: RegressionNorm) -> LossWeights {
        LossWeights {
            v: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            w: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
            regression_norm: norm,
        }
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let s = three_region();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, t) = random_pair(&s, &mut rng);
        let b = multipart_loss(&t.values, &t, &s, &LossWeights::uniform(&s, RegressionNorm::L2)).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.regression.iter().chain(&b.classification).all(|&x| x == 0.0));
    }

    fn one_coord_schema() -> ParameterSchema {
        ParameterSchema::new(SchemaDoc {
            regions: vec![RegionSpec {
                name: "r".into(),
                params: vec![ParamSpec::new("x", -1.0, 1.0)],
                slots: vec![],
            }],
            scale_param_name: None,
            scale_coupling: None,
        })
        .unwrap()
    }

    #[test]
    fn single_term() {
        let s = one_coord_schema();
        let t = TargetVector::new(vec![0.0], s.layout().clone()).unwrap();
        let b = multipart_loss(&[0.5], &t, &s, &LossWeights::uniform(&s, RegressionNorm::L1)).unwrap();
        assert_eq!(b.total, 0.5);
    }

    #[test]
    fn two_region_hand_case() {
        // Region a: two coords; region b: one coord and a 2-option slot.
        let s = ParameterSchema::new(SchemaDoc {
            regions: vec![
                RegionSpec {
                    name: "a".into(),
                    params: vec![ParamSpec::new("x", -1.0, 1.0), ParamSpec::new("y", -1.0, 1.0)],
                    slots: vec![],
                },
                RegionSpec {
                    name: "b".into(),
                    params: vec![ParamSpec::new("z", -1.0, 1.0)],
                    slots: vec![crate::recipe::schema_tests::slot("s", 2)],
                },
            ],
            scale_param_name: None,
            scale_coupling: None,
        })
        .unwrap();
        let target = TargetVector::new(vec![0.0, 1.0, -0.5, 1.0, 0.0], s.layout().clone()).unwrap();
        let pred = [0.3, 0.5, 0.5, 0.5, 0.5];
        let weights = LossWeights {
            v: vec![1.0, 2.0],
            w: vec![0.0, 1.0],
            regression_norm: RegressionNorm::L2,
        };
        // R_a = (0.09 + 0.25)/2, R_b = 1.0, C_b = ln 2.
        let expected = 1.0 * 0.17 + 2.0 * 1.0 + 1.0 * 2f64.ln();
        let b = multipart_loss(&pred, &target, &s, &weights).unwrap();
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.regression[0] - 0.17).abs() < 1e-12);
        assert!((b.classification[1] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = three_region();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut pred, t) = random_pair(&s, &mut rng);
        let w = LossWeights::uniform(&s, RegressionNorm::L1);
        assert!(matches!(
            multipart_loss(&pred[1..], &t, &s, &w),
            Err(LossError::Layout { .. })
        ));
        let slot = s.layout().slots().next().unwrap().range.start;
        pred[slot] += 0.1;
        assert!(matches!(
            multipart_loss(&pred, &t, &s, &w),
            Err(LossError::NotProbabilities { .. })
        ));
        assert!(matches!(
            group_loss(&t.values, &t, &s, &w, "ears"),
            Err(LossError::UnknownRegion(_))
        ));
        let zero = w.scaled(0.0);
        assert!(matches!(multipart_loss(&t.values, &t, &s, &zero), Err(LossError::Weights(_))));
    }

    #[test]
    fn clamps_zero_probability() {
        let s = three_region();
        let layout = s.layout();
        let mut target = vec![0.0; layout.len];
        let mut pred = vec![0.0; layout.len];
        for slot in layout.slots() {
            target[slot.range.start] = 1.0;
            pred[slot.range.start + 1] = 1.0;
        }
        let t = TargetVector::new(target, layout.clone()).unwrap();
        let b = multipart_loss(&pred, &t, &s, &LossWeights::uniform(&s, RegressionNorm::L1)).unwrap();
        let c = -(PROB_EPS.ln());
        assert!(b.classification.iter().zip(&layout.regions).all(|(&x, r)| {
            if r.slots.is_empty() {
                x == 0.0
            } else {
                (x - c).abs() < 1e-9
            }
        }));
    }

    #[test]
    fn group_losses_add_up() {
        let s = three_region();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..200 {
            let norm = if case % 2 == 0 { RegressionNorm::L1 } else { RegressionNorm::L2 };
            let (pred, t) = random_pair(&s, &mut rng);
            let w = random_weights(3, &mut rng, norm);
            let full = multipart_loss(&pred, &t, &s, &w).unwrap().total;
            let sum: f64 = ["eyes", "nose", "mouth"]
                .iter()
                .map(|r| group_loss(&pred, &t, &s, &w, r).unwrap().total)
                .sum();
            assert!((full - sum).abs() <= 1e-9 * full.abs().max(1e-300));
        }
    }

    #[test]
    fn zero_weight_region_and_single_region() {
        let s = three_region();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pred, t) = random_pair(&s, &mut rng);
        let mut w = LossWeights::uniform(&s, RegressionNorm::L1);
        w.v[1] = 0.0;
        w.w[1] = 0.0;
        assert_eq!(group_loss(&pred, &t, &s, &w, "nose").unwrap().total, 0.0);

        let one = one_coord_schema();
        let t1 = TargetVector::new(vec![0.2], one.layout().clone()).unwrap();
        let w1 = LossWeights::uniform(&one, RegressionNorm::L2);
        assert_eq!(
            group_loss(&[-0.4], &t1, &one, &w1, "r").unwrap(),
            multipart_loss(&[-0.4], &t1, &one, &w1).unwrap()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = three_region();
        let layout = s.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let norm = if case % 2 == 0 { RegressionNorm::L1 } else { RegressionNorm::L2 };
            let (pred, t) = random_pair(&s, &mut rng);
            let w = random_weights(3, &mut rng, norm);
            let mut g = vec![0.0; layout.len];
            gradient(&pred, &t.values, layout, &w, &mut g);
            let h = 1e-6;
            for i in 0..layout.len {
                let mut up = pred.clone();
                let mut down = pred.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (evaluate(&up, &t.values, layout, &w).total
                    - evaluate(&down, &t.values, layout, &w).total)
                    / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(g[i].abs()).max(1e-3);
                assert!((fd - g[i]).abs() <= tol, "case {case} coord {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn adaptive_symmetry_and_preference() {
        let s = three_region();
        let mut h = LossHistory::for_layout(s.layout());
        for x in [1.0, 0.8, 0.6] {
            h.push(&LossBreakdown {
                total: 0.0,
                regression: vec![x; 3],
                classification: vec![x; 3],
            });
        }
        let w = adaptive_weights(&h, 1.0, RegressionNorm::L1).unwrap();
        // three_region: nose and eyes have slots, mouth does not.
        let active: Vec<f64> = w.v.iter().chain(&w.w).cloned().filter(|&x| x != 0.0).collect();
        assert_eq!(active.len(), 5);
        assert!(active.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        // Two terms: one stagnant, one improving.
        let two = LossHistory {
            regression: vec![Some(vec![1.0, 1.0, 1.0])],
            classification: vec![Some(vec![1.0, 0.7, 0.4])],
        };
        let w = adaptive_weights(&two, 1.0, RegressionNorm::L1).unwrap();
        // rates: 0 and -0.3/0.7; weights 2 * softmax.
        let r: f64 = -0.3 / 0.7;
        let expect_v = 2.0 / (1.0 + r.exp());
        assert!((w.v[0] - expect_v).abs() < 1e-9);
        assert!(w.v[0] > w.w[0]);
        assert!((w.v[0] + w.w[0] - 2.0).abs() < 1e-12);

        let sharp = adaptive_weights(&two, 1e-3, RegressionNorm::L1).unwrap();
        assert!((sharp.v[0] - 2.0).abs() < 1e-9 && sharp.w[0] < 1e-9);
    }

    #[test]
    fn adaptive_needs_history() {
        let h = LossHistory {
            regression: vec![Some(vec![1.0])],
            classification: vec![None],
        };
        assert!(matches!(
            adaptive_weights(&h, 1.0, RegressionNorm::L1),
            Err(LossError::InsufficientHistory(_))
        ));
    }

    fn tiny_schema() -> ParameterSchema {
        ParameterSchema::new(SchemaDoc {
            regions: vec![RegionSpec {
                name: "r".into(),
                params: vec![ParamSpec::new("x", -1.0, 1.0)],
                slots: vec![SlotSpec {
                    name: "s".into(),
                    options: crate::recipe::schema_tests::slot("s", 3).options,
                    default: 0,
                }],
            }],
            scale_param_name: None,
            scale_coupling: None,
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn nonnegative_and_scale_linear(
            x in -2.0f64..2.0,
            t in -1.0f64..1.0,
            a in 0.01f64..1.0,
            b in 0.01f64..1.0,
            k in 0usize..3,
            v in 0.0f64..3.0,
            w in 0.1f64..3.0,
            c in 0.0f64..10.0,
        ) {
            let s = tiny_schema();
            let z = a + b + 1.0;
            let pred = [x, a / z, b / z, 1.0 / z];
            let mut tv = vec![t, 0.0, 0.0, 0.0];
            tv[1 + k] = 1.0;
            let target = TargetVector::new(tv, s.layout().clone()).unwrap();
            let weights = LossWeights { v: vec![v], w: vec![w], regression_norm: RegressionNorm::L2 };
            let base = multipart_loss(&pred, &target, &s, &weights).unwrap();
            prop_assert!(base.total >= 0.0);
            prop_assert!(base.regression[0] >= 0.0 && base.classification[0] >= 0.0);
            if c > 0.0 {
                let scaled = multipart_loss(&pred, &target, &s, &weights.scaled(c)).unwrap();
                prop_assert!((scaled.total - c * base.total).abs() <= 1e-9 * (c * base.total).max(1e-12));
            }
        }
    }
}
