//! Reference methods: PCA progress variables, an unconstrained linear
//! encoder, a small nonlinear encoder, a frozen user projection, and a
//! tabulation with multilinear interpolation.
//!
//! Every trained baseline is a [`ChemTabModel`] with a different encoder and
//! [`EncoderMode`], so evaluation and persistence work unchanged.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::chemtab::{
    build_model_with, resolve_key_species, train_logged, ChemTabModel, EncoderMode, EncoderWeights,
    EpochRecord, ModelKind, TrainConfig, TrainOutcome,
};
use crate::dataset::FlameletDataset;
use crate::error::{Error, Result};
use crate::evaluation::output_names;
use crate::exec::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `s x p`, orthonormal columns.
    components: Array2<f64>,
    means: Array1<f64>,
    /// Sample variance (divisor `n - 1`) along each component, descending.
    explained_variance: Array1<f64>,
    total_variance: f64,
}

impl PcaBasis {
    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn means(&self) -> &Array1<f64> {
        &self.means
    }

    pub fn explained_variance(&self) -> &Array1<f64> {
        &self.explained_variance
    }

    /// Share of the total sample variance captured by each component.
    pub fn explained_variance_ratio(&self) -> Array1<f64> {
        if self.total_variance > 0.0 {
            &self.explained_variance / self.total_variance
        } else {
            Array1::zeros(self.explained_variance.len())
        }
    }

    /// Centered scores `(Y - mean) V`.
    pub fn transform(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.means.len() {
            return Err(Error::shape("pca input", self.means.len(), y.ncols()));
        }
        Ok((&y - &self.means).dot(&self.components))
    }

    pub fn reconstruct(&self, scores: ArrayView2<f64>) -> Result<Array2<f64>> {
        if scores.ncols() != self.components.ncols() {
            return Err(Error::shape(
                "pca scores",
                self.components.ncols(),
                scores.ncols(),
            ));
        }
        Ok(scores.dot(&self.components.t()) + &self.means)
    }

    /// Mean over rows of the squared reconstruction error.
    pub fn reconstruction_error(&self, y: ArrayView2<f64>) -> Result<f64> {
        let back = self.reconstruct(self.transform(y)?.view())?;
        let sq: f64 = (&y - &back).iter().map(|v| v * v).sum();
        Ok(sq / y.nrows() as f64)
    }
}

/// Mean-centered SVD of `y` keeping `p` components. Each component is signed
/// so that its largest-magnitude entry (first one on ties) is positive.
pub fn fit_pca(y: ArrayView2<f64>, p: usize) -> Result<PcaBasis> {
    let (n, s) = y.dim();
    if p == 0 || p > s {
        return Err(Error::Argument(format!(
            "pca needs 1 <= p <= s, got p = {p}, s = {s}"
        )));
    }
    if n < 2 {
        return Err(Error::Argument(format!(
            "pca needs at least 2 rows, got {n}"
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument("pca input has non-finite values".into()));
    }
    let means = y.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &y - &means;
    // Zero rows leave the right singular vectors alone and guarantee a full
    // s x s basis when n < s.
    let rows = n.max(s);
    let a = DMatrix::from_fn(rows, s, |i, j| if i < n { centered[[i, j]] } else { 0.0 });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .total_cmp(&svd.singular_values[i])
            .then(i.cmp(&j))
    });

    let mut components = Array2::zeros((s, p));
    let mut explained_variance = Array1::zeros(p);
    for (c, &k) in order.iter().take(p).enumerate() {
        let mut v: Vec<f64> = (0..s).map(|j| v_t[(k, j)]).collect();
        let lead = v.iter().enumerate().fold(
            0,
            |best, (j, x)| if x.abs() > v[best].abs() { j } else { best },
        );
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (j, x) in v.into_iter().enumerate() {
            components[[j, c]] = x;
        }
        let sigma = svd.singular_values[k];
        explained_variance[c] = sigma * sigma / (n - 1) as f64;
    }
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    Ok(PcaBasis {
        components,
        means,
        explained_variance,
        total_variance,
    })
}

/// Projection whose every column selects `species`: all progress variables
/// carry the same information, so the regressors only see that species.
pub fn misaligned_projection(
    species_names: &[String],
    species: &str,
    p: usize,
) -> Result<Vec<Vec<f64>>> {
    let j = species_names
        .iter()
        .position(|n| n == species)
        .ok_or_else(|| Error::Argument(format!("species `{species}` not found")))?;
    Ok((0..species_names.len())
        .map(|i| vec![if i == j { 1.0 } else { 0.0 }; p])
        .collect())
}

fn projection_from_rows(rows: &[Vec<f64>], s: usize, p: usize) -> Result<Array2<f64>> {
    if rows.len() != s || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Config(format!(
            "fixed_projection must be {s} rows of {p} values"
        )));
    }
    Ok(Array2::from_shape_fn((s, p), |(i, j)| rows[i][j]))
}

/// Configuration actually used for `kind`: the encoder mode and the loss
/// terms that kind trains with. Other settings pass through.
pub fn baseline_config(kind: ModelKind, cfg: &TrainConfig) -> TrainConfig {
    let mut out = cfg.clone();
    out.kind = kind;
    if kind == ModelKind::ChemTab {
        out.encoder_mode = EncoderMode::Projected;
        return out;
    }
    out.alpha_dyn = 0.0;
    out.lambda_orth = 0.0;
    out.lambda_cov = 0.0;
    out.encoder_mode = match kind {
        ModelKind::Pca | ModelKind::Fixed => EncoderMode::Frozen,
        _ => EncoderMode::Free,
    };
    out
}

/// Untrained model of the given kind. PCA is fitted on `train_ds`; the fixed
/// kind reads `cfg.fixed_projection`.
pub fn build_baseline(
    kind: ModelKind,
    train_ds: &FlameletDataset,
    cfg: &TrainConfig,
) -> Result<ChemTabModel> {
    let cfg = baseline_config(kind, cfg);
    let keys = resolve_key_species(&cfg, train_ds)?;
    let species = train_ds.species_names();
    let projection = match kind {
        ModelKind::Pca => Some(fit_pca(train_ds.mass_fractions().view(), cfg.p)?.components),
        ModelKind::Fixed => {
            let rows = cfg.fixed_projection.as_ref().ok_or_else(|| {
                Error::Config("the fixed baseline needs `fixed_projection`".into())
            })?;
            Some(projection_from_rows(rows, species.len(), cfg.p)?)
        }
        _ => None,
    };
    build_model_with(&cfg, species, &keys, projection)
}

/// Builds and trains `kind` with the shared training loop.
pub fn train_baseline(
    kind: ModelKind,
    train_ds: &FlameletDataset,
    val_ds: &FlameletDataset,
    cfg: &TrainConfig,
    history: &mut Vec<EpochRecord>,
) -> Result<TrainOutcome> {
    let model = build_baseline(kind, train_ds, cfg)?;
    train_logged(
        model,
        train_ds,
        val_ds,
        &baseline_config(kind, cfg),
        history,
    )
}

/// Bytes for a dense table of `f64` values.
pub fn table_bytes(grid_sizes: &[usize], n_outputs: usize) -> usize {
    grid_sizes.iter().product::<usize>() * n_outputs * std::mem::size_of::<f64>()
}

/// Dense table over a rectilinear grid. Values are stored node by node in
/// row-major grid order (last axis fastest), all outputs of a node together.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    axes: Vec<Vec<f64>>,
    output_names: Vec<String>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub values: Vec<f64>,
    /// At least one coordinate lay outside its axis and was clamped.
    pub clamped: bool,
}

impl LookupTable {
    pub fn new(axes: Vec<Vec<f64>>, output_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Argument("table needs at least one axis".into()));
        }
        for (d, a) in axes.iter().enumerate() {
            if a.len() < 2 {
                return Err(Error::Argument(format!(
                    "axis {d} has {} nodes, need at least 2",
                    a.len()
                )));
            }
            if !a.iter().all(|v| v.is_finite()) || a.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Argument(format!(
                    "axis {d} must be finite and strictly increasing"
                )));
            }
        }
        if output_names.is_empty() {
            return Err(Error::Argument("table needs at least one output".into()));
        }
        let expected = axes.iter().map(Vec::len).product::<usize>() * output_names.len();
        if values.len() != expected {
            return Err(Error::shape("table values", expected, values.len()));
        }
        Ok(Self {
            axes,
            output_names,
            values,
        })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_dims(&self) -> usize {
        self.axes.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_names.len()
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn bytes(&self) -> usize {
        table_bytes(&self.grid_sizes(), self.n_outputs())
    }

    /// Flat node number of a multi-index.
    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    /// Stored outputs at a node.
    pub fn node_values(&self, idx: &[usize]) -> &[f64] {
        let m = self.n_outputs();
        let start = self.node_index(idx) * m;
        &self.values[start..start + m]
    }

    pub fn interpolate(&self, q: &[f64]) -> Result<Interpolated> {
        let mut values = vec![0.0; self.n_outputs()];
        let clamped = self.interpolate_into(q, &mut values)?;
        Ok(Interpolated { values, clamped })
    }

    /// Multilinear interpolation over the cell containing `q`, written into
    /// `out`. Returns whether `q` had to be clamped into the grid.
    pub fn interpolate_into(&self, q: &[f64], out: &mut [f64]) -> Result<bool> {
        let d = self.n_dims();
        if q.len() != d {
            return Err(Error::shape("table query", d, q.len()));
        }
        if out.len() != self.n_outputs() {
            return Err(Error::shape("table output", self.n_outputs(), out.len()));
        }
        if q.iter().any(|v| v.is_nan()) {
            return Err(Error::Argument("NaN in table query".into()));
        }
        let mut clamped = false;
        let mut cell = vec![0usize; d];
        let mut t = vec![0.0; d];
        for (k, axis) in self.axes.iter().enumerate() {
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            let x = if q[k] < lo || q[k] > hi {
                clamped = true;
                q[k].clamp(lo, hi)
            } else {
                q[k]
            };
            let i = axis
                .partition_point(|&a| a <= x)
                .saturating_sub(1)
                .min(axis.len() - 2);
            cell[k] = i;
            t[k] = (x - axis[i]) / (axis[i + 1] - axis[i]);
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let m = self.n_outputs();
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut node = 0;
            for k in 0..d {
                let up = (corner >> (d - 1 - k)) & 1;
                weight *= if up == 1 { t[k] } else { 1.0 - t[k] };
                node = node * self.axes[k].len() + cell[k] + up;
            }
            if weight == 0.0 {
                continue;
            }
            let vals = &self.values[node * m..node * m + m];
            for (o, v) in out.iter_mut().zip(vals) {
                *o += weight * v;
            }
        }
        Ok(clamped)
    }
}

/// `n` equally spaced nodes from `lo` to `hi` inclusive.
pub fn uniform_axis(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!(
            "bad axis: {n} nodes on [{lo}, {hi}]"
        )));
    }
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect())
}

/// Uniform axes spanning the observed range of each input column.
pub fn axes_from_inputs(inputs: ArrayView2<f64>, sizes: &[usize]) -> Result<Vec<Vec<f64>>> {
    if inputs.ncols() != sizes.len() {
        return Err(Error::shape("grid sizes", inputs.ncols(), sizes.len()));
    }
    if inputs.nrows() == 0 {
        return Err(Error::Argument("no inputs to span".into()));
    }
    inputs
        .columns()
        .into_iter()
        .zip(sizes)
        .map(|(c, &n)| {
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let hi = if hi > lo { hi } else { lo + 1.0 };
            uniform_axis(lo, hi, n)
        })
        .collect()
}

fn grid_points(axes: &[Vec<f64>]) -> Array2<f64> {
    let n: usize = axes.iter().map(Vec::len).product();
    let d = axes.len();
    let mut pts = Array2::zeros((n, d));
    for (node, mut row) in pts.rows_mut().into_iter().enumerate() {
        let mut rest = node;
        for k in (0..d).rev() {
            row[k] = axes[k][rest % axes[k].len()];
            rest /= axes[k].len();
        }
    }
    pts
}

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.iter().any(Vec::is_empty) || axes.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    Ok(())
}

/// Tabulates the model's outputs over `[C_pv | Z_mix]` axes (`p + 1` of
/// them) by evaluating the regressors at every node.
pub fn build_table_from_model(
    model: &ChemTabModel,
    axes: Vec<Vec<f64>>,
    exec: Execution,
) -> Result<LookupTable> {
    check_axes(&axes)?;
    if axes.len() != model.p() + 1 {
        return Err(Error::shape("table axes", model.p() + 1, axes.len()));
    }
    let pts = grid_points(&axes);
    let p = model.p();
    const CHUNK: usize = 4096;
    let starts: Vec<usize> = (0..pts.nrows()).step_by(CHUNK).collect();
    let chunks = exec::map(exec, &starts, |&start| {
        let end = (start + CHUNK).min(pts.nrows());
        let block = pts.slice(ndarray::s![start..end, ..]);
        let pred = model.predict_from_cpv(block.slice(ndarray::s![.., ..p]), block.column(p))?;
        Ok::<_, Error>(stack_prediction(&pred))
    });
    let mut values = Vec::with_capacity(pts.nrows() * output_names(model).len());
    for c in chunks {
        values.extend(c?.iter());
    }
    LookupTable::new(axes, output_names(model), values)
}

fn stack_prediction(pred: &crate::chemtab::Prediction) -> Array2<f64> {
    let se = pred.source_energy.view().insert_axis(Axis(1));
    let mut parts = vec![se, pred.key_source_terms.view()];
    if let Some(d) = &pred.dynamic {
        parts.push(d.view());
    }
    ndarray::concatenate(Axis(1), &parts).expect("row counts match")
}

/// Tabulates data directly: each row is assigned to its nearest node and a
/// node stores the mean of its rows. Nodes without rows copy the row nearest
/// in axis-normalized coordinates.
pub fn build_table_from_data(
    inputs: ArrayView2<f64>,
    outputs: ArrayView2<f64>,
    output_names: Vec<String>,
    axes: Vec<Vec<f64>>,
) -> Result<LookupTable> {
    check_axes(&axes)?;
    let d = axes.len();
    if inputs.ncols() != d {
        return Err(Error::shape("table inputs", d, inputs.ncols()));
    }
    if outputs.nrows() != inputs.nrows() || inputs.nrows() == 0 {
        return Err(Error::shape(
            "table outputs",
            inputs.nrows(),
            outputs.nrows(),
        ));
    }
    if outputs.ncols() != output_names.len() {
        return Err(Error::shape(
            "table output names",
            outputs.ncols(),
            output_names.len(),
        ));
    }
    let m = outputs.ncols();
    let n_nodes: usize = axes.iter().map(Vec::len).product();
    let mut sums = vec![0.0; n_nodes * m];
    let mut counts = vec![0usize; n_nodes];
    for (x, y) in inputs.rows().into_iter().zip(outputs.rows()) {
        let node = x
            .iter()
            .zip(&axes)
            .fold(0, |acc, (&v, a)| acc * a.len() + nearest_node(a, v));
        counts[node] += 1;
        for (s, v) in sums[node * m..node * m + m].iter_mut().zip(y) {
            *s += v;
        }
    }
    let spans: Vec<f64> = axes.iter().map(|a| a[a.len() - 1] - a[0]).collect();
    let pts = grid_points(&axes);
    for node in 0..n_nodes {
        if counts[node] > 0 {
            let c = counts[node] as f64;
            sums[node * m..node * m + m]
                .iter_mut()
                .for_each(|s| *s /= c);
            continue;
        }
        let target = pts.row(node);
        let nearest = inputs
            .rows()
            .into_iter()
            .map(|x| normalized_distance(x, target, &spans))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, dist)| {
                if dist < best.1 {
                    (i, dist)
                } else {
                    best
                }
            })
            .0;
        for (s, v) in sums[node * m..node * m + m]
            .iter_mut()
            .zip(outputs.row(nearest))
        {
            *s = *v;
        }
    }
    LookupTable::new(axes, output_names, sums)
}

fn nearest_node(axis: &[f64], v: f64) -> usize {
    let i = axis.partition_point(|&a| a < v);
    if i == 0 {
        0
    } else if i == axis.len() {
        axis.len() - 1
    } else if v - axis[i - 1] <= axis[i] - v {
        i - 1
    } else {
        i
    }
}

fn normalized_distance(x: ArrayView1<f64>, y: ArrayView1<f64>, spans: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(spans)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum()
}

/// `[C_pv | Z_mix]` of a dataset under a linear encoder.
pub fn table_inputs(w: &EncoderWeights, ds: &FlameletDataset) -> Result<Array2<f64>> {
    let cpv = crate::chemtab::encode(w, ds.mass_fractions().view())?;
    let z = ds.mixture_fraction().view().insert_axis(Axis(1));
    Ok(ndarray::concatenate(Axis(1), &[cpv.view(), z]).expect("row counts match"))
}
