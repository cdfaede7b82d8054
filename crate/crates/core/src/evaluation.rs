//! Accuracy, residual and constraint reports. Everything is computed in
//! physical units and emitted as CSV.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::chemtab::{
    correlation_matrix, dynamic_targets, predict, regressor_input, ChemTabModel, Prediction,
};
use crate::dataset::{format_f64, FlameletDataset};
use crate::error::{Error, Result};
use crate::nn::r2;

/// Scalars extracted from the encoder and the validation correlations.
/// Encoder-derived fields are NaN for nonlinear encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintAudit {
    pub min_weight: f64,
    pub max_offdiag_gram: f64,
    pub max_diag_deviation: f64,
    pub max_offdiag_correlation: f64,
    pub gram: Option<Array2<f64>>,
    /// Correlation matrix of `[C_pv | Z_mix]`, `(p + 1) x (p + 1)`.
    pub correlation: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditThresholds {
    pub max_offdiag_gram: f64,
    pub max_diag_deviation: f64,
    pub max_offdiag_correlation: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        Self {
            max_offdiag_gram: 0.05,
            max_diag_deviation: 0.05,
            max_offdiag_correlation: 0.1,
        }
    }
}

impl ConstraintAudit {
    pub fn compute(model: &ChemTabModel, ds: &FlameletDataset) -> Result<Self> {
        let cpv = model.encoder.encode(ds.mass_fractions().view())?;
        let correlation =
            correlation_matrix(regressor_input(cpv.view(), ds.mixture_fraction().view()).view());
        let max_offdiag_correlation = max_off_diagonal(&correlation);
        let (min_weight, gram) = match model.linear_encoder() {
            Some(w) => (
                w.matrix().iter().copied().fold(f64::INFINITY, f64::min),
                Some(w.gram()),
            ),
            None => (f64::NAN, None),
        };
        let (max_offdiag_gram, max_diag_deviation) = match &gram {
            Some(g) => (
                max_off_diagonal(g),
                g.diag().iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max),
            ),
            None => (f64::NAN, f64::NAN),
        };
        Ok(Self {
            min_weight,
            max_offdiag_gram,
            max_diag_deviation,
            max_offdiag_correlation,
            gram,
            correlation,
        })
    }

    /// Non-negativity plus the three tolerances. Nonlinear encoders fail.
    pub fn passes(&self, t: &AuditThresholds) -> bool {
        self.min_weight >= 0.0
            && self.max_offdiag_gram <= t.max_offdiag_gram
            && self.max_diag_deviation <= t.max_diag_deviation
            && self.max_offdiag_correlation <= t.max_offdiag_correlation
    }

    /// `metric,value` rows: the four scalars, then every gram and correlation
    /// entry as `gram_i_j` / `corr_i_j`.
    pub fn to_csv(&self, model: &ChemTabModel) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |name: String, v: f64| {
            out.push_str(&name);
            out.push(',');
            out.push_str(&format_f64(v));
            out.push('\n');
        };
        row("min_weight".into(), self.min_weight);
        row("max_offdiag_gram".into(), self.max_offdiag_gram);
        row("max_diag_deviation".into(), self.max_diag_deviation);
        row(
            "max_offdiag_correlation".into(),
            self.max_offdiag_correlation,
        );
        if let Some(w) = model.linear_encoder() {
            for ((i, j), v) in w.matrix().indexed_iter() {
                row(format!("w_{}_{}", w.species_names()[i], j + 1), *v);
            }
        }
        if let Some(g) = &self.gram {
            for ((i, j), v) in g.indexed_iter() {
                row(format!("gram_{}_{}", i + 1, j + 1), *v);
            }
        }
        for ((i, j), v) in self.correlation.indexed_iter() {
            row(format!("corr_{}_{}", i + 1, j + 1), *v);
        }
        out
    }
}

fn max_off_diagonal(m: &Array2<f64>) -> f64 {
    m.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

/// Output names in report order: `S_e`, `Sdot_<species>`, `Stilde_<j>`.
pub fn output_names(model: &ChemTabModel) -> Vec<String> {
    let mut names = vec!["S_e".to_string()];
    names.extend(model.key_species.iter().map(|s| format!("Sdot_{s}")));
    if model.dyn_reg.is_some() {
        names.extend((1..=model.p()).map(|j| format!("Stilde_{j}")));
    }
    names
}

/// Truth and prediction matrices with columns in [`output_names`] order.
/// Projected source terms use the model's own (final) encoder.
pub fn truth_and_prediction(
    model: &ChemTabModel,
    ds: &FlameletDataset,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if ds.species_names() != model.species_names.as_slice() {
        return Err(Error::Argument(
            "dataset species differ from model species".into(),
        ));
    }
    let Prediction {
        source_energy,
        key_source_terms,
        dynamic,
    } = predict(
        model,
        ds.mass_fractions().view(),
        ds.mixture_fraction().view(),
    )?;
    let mut truth = vec![ds.source_energy().view().insert_axis(Axis(1)).to_owned()];
    truth.push(ds.source_terms().select(Axis(1), model.key_indices()));
    let mut pred = vec![source_energy.insert_axis(Axis(1)), key_source_terms];
    if let (Some(d), Some(w)) = (dynamic, model.linear_encoder()) {
        truth.push(dynamic_targets(w, ds.source_terms().view())?);
        pred.push(d);
    }
    let cat = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("row counts match")
    };
    Ok((cat(&truth), cat(&pred)))
}

/// R² per output over the whole dataset, physical units.
pub fn r2_report(model: &ChemTabModel, ds: &FlameletDataset) -> Result<Vec<(String, f64)>> {
    let (truth, pred) = truth_and_prediction(model, ds)?;
    output_names(model)
        .into_iter()
        .enumerate()
        .map(|(j, name)| Ok((name, r2(truth.column(j), pred.column(j))?)))
        .collect()
}

pub fn r2_csv(report: &[(String, f64)]) -> String {
    let mut out = String::from("output,r2\n");
    for (name, v) in report {
        out.push_str(name);
        out.push(',');
        out.push_str(&format_f64(*v));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    FlameKey,
    XPos,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "flamekey" => Ok(GroupBy::FlameKey),
            "xpos" => Ok(GroupBy::XPos),
            other => Err(Error::Argument(format!(
                "unknown group key `{other}` (expected flame_key or x_pos)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualGroup {
    pub key: f64,
    pub count: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Largest `|S_e|` truth in the group.
    pub peak_truth: f64,
}

/// `S_e` residual statistics per group, groups in ascending key order.
pub fn residual_report(
    model: &ChemTabModel,
    ds: &FlameletDataset,
    group_by: GroupBy,
) -> Result<Vec<ResidualGroup>> {
    let (truth, pred) = truth_and_prediction(model, ds)?;
    let keys = match group_by {
        GroupBy::FlameKey => ds.flame_key(),
        GroupBy::XPos => ds.x_pos(),
    };
    // total_cmp order on the bit pattern keeps every distinct value apart
    let mut groups: BTreeMap<OrderedKey, ResidualGroup> = BTreeMap::new();
    for i in 0..ds.n_rows() {
        let r = (truth[[i, 0]] - pred[[i, 0]]).abs();
        let g = groups.entry(OrderedKey(keys[i])).or_insert(ResidualGroup {
            key: keys[i],
            count: 0,
            mean_abs: 0.0,
            max_abs: 0.0,
            peak_truth: 0.0,
        });
        g.count += 1;
        g.mean_abs += r;
        g.max_abs = g.max_abs.max(r);
        g.peak_truth = g.peak_truth.max(truth[[i, 0]].abs());
    }
    Ok(groups
        .into_values()
        .map(|mut g| {
            g.mean_abs /= g.count as f64;
            g
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct OrderedKey(f64);

impl PartialEq for OrderedKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}
impl Eq for OrderedKey {}
impl PartialOrd for OrderedKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

pub fn residual_csv(groups: &[ResidualGroup]) -> String {
    let mut out = String::from("group,count,mean_abs_residual,max_abs_residual,peak_abs_truth\n");
    for g in groups {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            format_f64(g.key),
            g.count,
            format_f64(g.mean_abs),
            format_f64(g.max_abs),
            format_f64(g.peak_truth)
        ));
    }
    out
}

/// Resolves a flame key given on the command line: an exact key, a key
/// within `1e-9` relative distance, or `max` / `min`.
pub fn find_flame_key(ds: &FlameletDataset, spec: &str) -> Result<f64> {
    let keys = ds.flame_keys();
    let pick = |f: fn(f64, f64) -> f64| keys.iter().copied().reduce(f).expect("non-empty dataset");
    match spec {
        "max" => return Ok(pick(f64::max)),
        "min" => return Ok(pick(f64::min)),
        _ => {}
    }
    let wanted: f64 = spec
        .parse()
        .map_err(|_| Error::Argument(format!("flame key `{spec}` is not a number")))?;
    keys.iter()
        .copied()
        .find(|k| (k - wanted).abs() <= 1e-9 * k.abs().max(wanted.abs()))
        .ok_or_else(|| Error::Argument(format!("no flame with key {spec}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlameProfile {
    pub names: Vec<String>,
    pub x_pos: Array1<f64>,
    pub truth: Array2<f64>,
    pub prediction: Array2<f64>,
}

/// True and predicted curves of one flame, rows sorted by `x_pos`.
pub fn flame_profile_report(
    model: &ChemTabModel,
    ds: &FlameletDataset,
    flame_key: f64,
) -> Result<FlameProfile> {
    let mut rows: Vec<usize> = (0..ds.n_rows())
        .filter(|&i| ds.flame_key()[i].to_bits() == flame_key.to_bits())
        .collect();
    if rows.is_empty() {
        return Err(Error::Argument(format!(
            "no rows with flame key {flame_key}"
        )));
    }
    rows.sort_by(|&a, &b| ds.x_pos()[a].total_cmp(&ds.x_pos()[b]));
    let flame = ds.select_rows(&rows)?;
    let (truth, prediction) = truth_and_prediction(model, &flame)?;
    Ok(FlameProfile {
        names: output_names(model),
        x_pos: flame.x_pos().clone(),
        truth,
        prediction,
    })
}

impl FlameProfile {
    /// Header `x_pos,true_<out>,pred_<out>,...`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["x_pos".to_string()];
        for n in &self.names {
            header.push(format!("true_{n}"));
            header.push(format!("pred_{n}"));
        }
        let mut out = header.join(",");
        out.push('\n');
        for (i, x) in self.x_pos.iter().enumerate() {
            out.push_str(&format_f64(*x));
            for j in 0..self.names.len() {
                out.push(',');
                out.push_str(&format_f64(self.truth[[i, j]]));
                out.push(',');
                out.push_str(&format_f64(self.prediction[[i, j]]));
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of `values` within `tolerance` of zero.
pub fn fraction_near_zero(values: ArrayView1<f64>, tolerance: f64) -> f64 {
    values.iter().filter(|v| v.abs() <= tolerance).count() as f64 / values.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemtab::{build_model_with, EncoderWeights, TrainConfig};
    use crate::dataset::tests::toy_dataset;
    use crate::dataset::OutputScaler;
    use ndarray::Array2;

    fn model_for(ds: &FlameletDataset) -> ChemTabModel {
        let cfg = TrainConfig {
            p: 1,
            middle_width: 16,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let keys = vec![ds.species_names()[0].clone()];
        build_model_with(&cfg, ds.species_names(), &keys, None).unwrap()
    }

    #[test]
    fn identity_projection_audit_is_exact() {
        let ds = toy_dataset(12);
        let mut model = model_for(&ds);
        let s = ds.n_species();
        let mut w = Array2::zeros((s, 1));
        w[[0, 0]] = 1.0;
        model.encoder = crate::chemtab::Encoder::Linear(
            EncoderWeights::new(w, ds.species_names().to_vec()).unwrap(),
        );
        let audit = ConstraintAudit::compute(&model, &ds).unwrap();
        assert_eq!(audit.min_weight, 0.0);
        assert_eq!(audit.max_offdiag_gram, 0.0);
        assert_eq!(audit.max_diag_deviation, 0.0);
        assert_eq!(audit.gram.unwrap(), Array2::<f64>::eye(1));
    }

    #[test]
    fn residual_groups_partition_rows() {
        let ds = toy_dataset(30);
        let model = model_for(&ds);
        for by in [GroupBy::FlameKey, GroupBy::XPos] {
            let groups = residual_report(&model, &ds, by).unwrap();
            assert_eq!(groups.iter().map(|g| g.count).sum::<usize>(), ds.n_rows());
            assert!(groups.windows(2).all(|w| w[0].key < w[1].key));
        }
        assert!("nope".parse::<GroupBy>().is_err());
    }

    #[test]
    fn flame_profile_truth_is_bit_exact_and_sorted() {
        let ds = toy_dataset(30);
        let model = model_for(&ds);
        let key = ds.flame_keys()[1];
        let prof = flame_profile_report(&model, &ds, key).unwrap();
        let rows: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| ds.flame_key()[i] == key)
            .collect();
        assert_eq!(prof.x_pos.len(), rows.len());
        assert!(prof.x_pos.windows(2).into_iter().all(|w| w[0] <= w[1]));
        for (r, x) in prof.x_pos.iter().enumerate() {
            let i = rows.iter().copied().find(|&i| ds.x_pos()[i] == *x).unwrap();
            assert_eq!(
                prof.truth[[r, 0]].to_bits(),
                ds.source_energy()[i].to_bits()
            );
        }
        assert!(flame_profile_report(&model, &ds, -1.0).is_err());
        assert_eq!(prof.to_csv().lines().count(), rows.len() + 1);
    }

    #[test]
    fn r2_report_matches_direct_formula_and_csv_header() {
        let ds = toy_dataset(25);
        let model = model_for(&ds);
        let report = r2_report(&model, &ds).unwrap();
        let (truth, pred) = truth_and_prediction(&model, &ds).unwrap();
        for (j, (_, v)) in report.iter().enumerate() {
            let t = truth.column(j);
            let m = t.sum() / t.len() as f64;
            let ss_tot: f64 = t.iter().map(|y| (y - m).powi(2)).sum();
            let ss_res: f64 = t
                .iter()
                .zip(pred.column(j))
                .map(|(y, p)| (y - p).powi(2))
                .sum();
            assert!((v - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
        }
        assert!(r2_csv(&report).starts_with("output,r2\n"));
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let ds = toy_dataset(20);
        let mut model = model_for(&ds);
        // zero the physics output layer, then let the scaler supply the mean
        let last = model.physics_reg.layers().len() - 1;
        let mut blocks = model.physics_reg.param_blocks_mut();
        blocks[2 * last].iter_mut().for_each(|v| *v = 0.0);
        blocks[2 * last + 1].iter_mut().for_each(|v| *v = 0.0);
        let se = ds.source_energy();
        let key = ds.source_terms().column(0);
        model.physics_scaler = OutputScaler {
            kind: crate::dataset::ScalerKind::MinMax,
            center: vec![se.mean().unwrap(), key.mean().unwrap()],
            scale: vec![1.0, 1.0],
        };
        let report = r2_report(&model, &ds).unwrap();
        assert!(report[0].1.abs() < 1e-12);
        assert!(report[1].1.abs() < 1e-12);
    }
}
