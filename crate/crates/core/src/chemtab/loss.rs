//! Joint objective and its gradient with respect to every parameter block.
//!
//! ```text
//! loss = -( alpha_phy * mean_j R2(phys_j) + alpha_dyn * mean_i R2(dyn_i) )
//!        + lambda_orth * ||W^T W - I||_F^2
//!        + lambda_cov  * sum_{i != j} corr_ij^2      over columns of [C_pv | Z_mix]
//! ```

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::{regressor_input, ChemTabModel, Encoder};
use crate::error::{Error, Result};
use crate::nn::{mix_seed, r2_with_grad, standard_layout, ForwardMode, Gradients, EPSILON_VAR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_phy: f64,
    pub alpha_dyn: f64,
    pub lambda_orth: f64,
    pub lambda_cov: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_phy: 1.0,
            alpha_dyn: 1.0,
            lambda_orth: 1.0,
            lambda_cov: 0.1,
        }
    }
}

/// One minibatch. Targets are already scaled.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub y: ArrayView2<'a, f64>,
    pub zmix: ArrayView1<'a, f64>,
    /// `b x (1 + k)`: `S_e` then the key source terms.
    pub physics_targets: ArrayView2<'a, f64>,
    /// `b x p`; required when the model has a dynamic regressor.
    pub dynamic_targets: Option<ArrayView2<'a, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub physics_r2: Vec<f64>,
    pub dynamic_r2: Vec<f64>,
    /// `||W^T W - I||_F^2` (zero for nonlinear encoders).
    pub orthogonality: f64,
    /// `sum_{i != j} corr_ij^2`.
    pub correlation: f64,
}

impl LossReport {
    pub fn mean_physics_r2(&self) -> f64 {
        mean(&self.physics_r2)
    }

    pub fn mean_dynamic_r2(&self) -> f64 {
        mean(&self.dynamic_r2)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderGradient {
    Linear(Array2<f64>),
    Nonlinear(Gradients),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub encoder: EncoderGradient,
    pub physics: Gradients,
    pub dynamic: Option<Gradients>,
}

impl ModelGradients {
    /// Encoder block(s) first, then physics, then dynamic regressor blocks.
    pub fn blocks(&self, with_encoder: bool) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if with_encoder {
            match &self.encoder {
                EncoderGradient::Linear(g) => out.push(g.as_slice().expect("standard layout")),
                EncoderGradient::Nonlinear(g) => out.extend(g.blocks()),
            }
        }
        out.extend(self.physics.blocks());
        if let Some(d) = &self.dynamic {
            out.extend(d.blocks());
        }
        out
    }
}

/// `||W^T W - I||_F^2`.
pub fn orthogonality_penalty(w: ArrayView2<f64>) -> f64 {
    let mut g = w.t().dot(&w);
    g.diag_mut().mapv_inplace(|v| v - 1.0);
    g.iter().map(|v| v * v).sum()
}

fn centered(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let means = x.mean_axis(Axis(0)).expect("non-empty");
    let a = &x - &means;
    let norms = a
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c) + EPSILON_VAR).sqrt())
        .collect();
    (a, norms)
}

/// Pearson correlation of the columns of `x`. Each column norm is guarded by
/// `EPSILON_VAR`, so a constant column correlates with nothing.
pub fn correlation_matrix(x: ArrayView2<f64>) -> Array2<f64> {
    let (a, norms) = centered(x);
    let mut c = a.t().dot(&a);
    for ((i, j), v) in c.indexed_iter_mut() {
        *v /= norms[i] * norms[j];
    }
    c
}

/// Sum of squared off-diagonal correlations.
pub fn correlation_penalty(x: ArrayView2<f64>) -> f64 {
    off_diagonal_sq(&correlation_matrix(x))
}

fn off_diagonal_sq(c: &Array2<f64>) -> f64 {
    c.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| v * v)
        .sum()
}

/// Penalty and its gradient with respect to the first `n_grad` columns.
fn correlation_penalty_grad(x: ArrayView2<f64>, n_grad: usize) -> (f64, Array2<f64>) {
    let (a, norms) = centered(x);
    let m = x.ncols();
    let mut corr = a.t().dot(&a);
    for ((i, j), v) in corr.indexed_iter_mut() {
        *v /= norms[i] * norms[j];
    }
    let penalty = off_diagonal_sq(&corr);
    let mut grad = Array2::zeros((x.nrows(), n_grad));
    // Column gradients are combinations of centered columns, so they already
    // have zero mean and pass through the centering unchanged.
    for i in 0..n_grad {
        let mut gi = grad.column_mut(i);
        for j in 0..m {
            if j == i {
                continue;
            }
            let c = corr[[i, j]];
            let to_j = 4.0 * c / (norms[i] * norms[j]);
            let to_i = -4.0 * c * c / (norms[i] * norms[i]);
            gi.scaled_add(to_j, &a.column(j));
            gi.scaled_add(to_i, &a.column(i));
        }
    }
    (penalty, grad)
}

fn check(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Loss { term: term.into() })
    }
}

fn regressor_modes(mode: ForwardMode) -> (ForwardMode, ForwardMode) {
    match mode {
        ForwardMode::Train { seed } => (
            ForwardMode::Train {
                seed: mix_seed(seed, 0),
            },
            ForwardMode::Train {
                seed: mix_seed(seed, 1),
            },
        ),
        ForwardMode::Eval => (ForwardMode::Eval, ForwardMode::Eval),
    }
}

/// Loss value and per-term report.
pub fn joint_loss(
    model: &ChemTabModel,
    batch: &Batch,
    weights: &LossWeights,
    mode: ForwardMode,
) -> Result<LossReport> {
    evaluate(model, batch, weights, mode, false).map(|(r, _)| r)
}

/// Loss value, report and exact gradients of every parameter block. The
/// dynamic targets are inputs, so nothing flows back through them.
pub fn joint_loss_and_grad(
    model: &ChemTabModel,
    batch: &Batch,
    weights: &LossWeights,
    mode: ForwardMode,
) -> Result<(LossReport, ModelGradients)> {
    evaluate(model, batch, weights, mode, true).map(|(r, g)| (r, g.expect("requested")))
}

fn evaluate(
    model: &ChemTabModel,
    batch: &Batch,
    weights: &LossWeights,
    mode: ForwardMode,
    want_grad: bool,
) -> Result<(LossReport, Option<ModelGradients>)> {
    let b = batch.y.nrows();
    if b < 2 {
        return Err(Error::Argument(format!(
            "batch needs at least 2 rows, got {b}"
        )));
    }
    if batch.y.ncols() != model.s() {
        return Err(Error::shape(
            "batch mass fractions",
            model.s(),
            batch.y.ncols(),
        ));
    }
    if batch.zmix.len() != b {
        return Err(Error::shape("batch mixture fraction", b, batch.zmix.len()));
    }
    let k1 = model.k() + 1;
    if batch.physics_targets.dim() != (b, k1) {
        return Err(Error::shape(
            "physics targets",
            format!("{b}x{k1}"),
            format!(
                "{}x{}",
                batch.physics_targets.nrows(),
                batch.physics_targets.ncols()
            ),
        ));
    }
    let p = model.p();

    let (cpv, enc_tape) = match &model.encoder {
        Encoder::Linear(w) => (batch.y.dot(w.matrix()), None),
        Encoder::Nonlinear(net) => {
            let (c, tape) = net.forward(batch.y, ForwardMode::Eval)?;
            (c, Some(tape))
        }
    };
    let input = regressor_input(cpv.view(), batch.zmix);
    let (phys_mode, dyn_mode) = regressor_modes(mode);

    let (phys_out, phys_tape) = model.physics_reg.forward(input.view(), phys_mode)?;
    let mut phys_up = Array2::zeros((b, k1));
    let mut physics_r2 = Vec::with_capacity(k1);
    for j in 0..k1 {
        let (r, g) = r2_with_grad(batch.physics_targets.column(j), phys_out.column(j))?;
        physics_r2.push(check("physics_r2", r)?);
        phys_up
            .column_mut(j)
            .assign(&(g * (-weights.alpha_phy / k1 as f64)));
    }
    let mut total = -weights.alpha_phy * mean(&physics_r2);

    let mut dynamic_r2 = Vec::new();
    let mut dyn_parts = None;
    if let Some(dyn_reg) = &model.dyn_reg {
        let targets = batch.dynamic_targets.ok_or_else(|| {
            Error::Argument(
                "model has a dynamic regressor but the batch has no dynamic targets".into(),
            )
        })?;
        if targets.dim() != (b, p) {
            return Err(Error::shape(
                "dynamic targets",
                format!("{b}x{p}"),
                format!("{}x{}", targets.nrows(), targets.ncols()),
            ));
        }
        let (out, tape) = dyn_reg.forward(input.view(), dyn_mode)?;
        let mut up = Array2::zeros((b, p));
        for j in 0..p {
            let (r, g) = r2_with_grad(targets.column(j), out.column(j))?;
            dynamic_r2.push(check("dynamic_r2", r)?);
            up.column_mut(j)
                .assign(&(g * (-weights.alpha_dyn / p as f64)));
        }
        total -= weights.alpha_dyn * mean(&dynamic_r2);
        dyn_parts = Some((tape, up));
    }

    let orthogonality = match &model.encoder {
        Encoder::Linear(w) => check("orthogonality", orthogonality_penalty(w.matrix().view()))?,
        Encoder::Nonlinear(_) => 0.0,
    };
    let (correlation, corr_grad) = correlation_penalty_grad(input.view(), p);
    let correlation = check("correlation", correlation)?;
    total += weights.lambda_orth * orthogonality + weights.lambda_cov * correlation;
    let total = check("total", total)?;

    let report = LossReport {
        total,
        physics_r2,
        dynamic_r2,
        orthogonality,
        correlation,
    };
    if !want_grad {
        return Ok((report, None));
    }

    let (physics, d_input) = model.physics_reg.backward(&phys_tape, phys_up.view())?;
    let mut d_cpv = d_input.slice(s![.., ..p]).to_owned();
    let dynamic = match (&model.dyn_reg, dyn_parts) {
        (Some(net), Some((tape, up))) => {
            let (g, d_in) = net.backward(&tape, up.view())?;
            d_cpv += &d_in.slice(s![.., ..p]);
            Some(g)
        }
        _ => None,
    };
    d_cpv.scaled_add(weights.lambda_cov, &corr_grad);

    let encoder = match &model.encoder {
        Encoder::Linear(w) => {
            let w = w.matrix();
            let mut gram = w.t().dot(w);
            gram.diag_mut().mapv_inplace(|v| v - 1.0);
            let mut g = standard_layout(batch.y.t().dot(&d_cpv));
            g.scaled_add(4.0 * weights.lambda_orth, &w.dot(&gram));
            EncoderGradient::Linear(g)
        }
        Encoder::Nonlinear(net) => {
            let (g, _) = net.backward(enc_tape.as_ref().expect("taped"), d_cpv.view())?;
            EncoderGradient::Nonlinear(g)
        }
    };
    Ok((
        report,
        Some(ModelGradients {
            encoder,
            physics,
            dynamic,
        }),
    ))
}
