//! The jointly trained model: a linear encoder `C_pv = Y W` feeding two
//! regressors on `(C_pv, Z_mix)`.
//!
//! * the physics regressor predicts `S_e` followed by the key species source
//!   terms,
//! * the dynamic regressor predicts the projected source terms
//!   `S~ = Sdot W`, whose training targets are rebuilt from the current `W`
//!   at the start of every batch.
//!
//! Baselines reuse the same model type with a different [`Encoder`] and
//! [`EncoderMode`].

mod loss;
mod train;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{FlameletDataset, OutputScaler, ScalerKind};
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform_init, mix_seed, Activation, MlpNetwork};

pub use loss::{
    correlation_matrix, correlation_penalty, joint_loss, joint_loss_and_grad,
    orthogonality_penalty, Batch, EncoderGradient, LossReport, LossWeights, ModelGradients,
};
pub use train::{
    history_csv, physics_targets, train, train_logged, write_history_csv, EpochRecord,
    TrainOutcome, HISTORY_HEADER,
};

/// Hidden layers on each side of the middle layer of a regressor.
pub const PYRAMID_SIDE: usize = 4;
pub const MIN_MIDDLE_WIDTH: usize = 16;

// Seed streams derived from the configured seed.
const STREAM_ENCODER: u64 = 1;
const STREAM_PHYSICS: u64 = 2;
const STREAM_DYNAMIC: u64 = 3;

/// Non-negative `s x p` projection with its species labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    w: Array2<f64>,
    species_names: Vec<String>,
}

impl EncoderWeights {
    /// Any finite `s x p` matrix with `1 <= p <= s`. Sign is not checked here:
    /// unconstrained baselines legitimately hold negative weights.
    pub fn new(w: Array2<f64>, species_names: Vec<String>) -> Result<Self> {
        let (s, p) = w.dim();
        if s != species_names.len() {
            return Err(Error::shape("encoder rows", species_names.len(), s));
        }
        if p == 0 || p > s {
            return Err(Error::Argument(format!(
                "need 1 <= p <= s, got p = {p}, s = {s}"
            )));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::Argument("encoder has non-finite weights".into()));
        }
        Ok(Self { w, species_names })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn species_names(&self) -> &[String] {
        &self.species_names
    }

    pub fn s(&self) -> usize {
        self.w.nrows()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_non_negative(&self) -> bool {
        self.w.iter().all(|&v| v >= 0.0)
    }

    /// Entrywise `max(0, w)`.
    pub fn project_non_negative(&mut self) {
        self.w.mapv_inplace(|v| v.max(0.0));
    }

    pub fn gram(&self) -> Array2<f64> {
        self.w.t().dot(&self.w)
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }
}

/// `C_pv = Y W`.
pub fn encode(w: &EncoderWeights, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if y.ncols() != w.s() {
        return Err(Error::shape("encode", w.s(), y.ncols()));
    }
    Ok(y.dot(&w.w))
}

/// `S~ = Sdot W`. The result is plain data: callers use it as a constant
/// target, so no gradient ever reaches `W` through it.
pub fn dynamic_targets(w: &EncoderWeights, sdot: ArrayView2<f64>) -> Result<Array2<f64>> {
    if sdot.ncols() != w.s() {
        return Err(Error::shape("dynamic targets", w.s(), sdot.ncols()));
    }
    Ok(sdot.dot(&w.w))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Linear(EncoderWeights),
    /// Input `Y`, output `p` progress variables.
    Nonlinear(MlpNetwork),
}

impl Encoder {
    pub fn p(&self) -> usize {
        match self {
            Encoder::Linear(w) => w.p(),
            Encoder::Nonlinear(net) => net.output_width(),
        }
    }

    pub fn s(&self) -> usize {
        match self {
            Encoder::Linear(w) => w.s(),
            Encoder::Nonlinear(net) => net.input_width(),
        }
    }

    pub fn encode(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Encoder::Linear(w) => encode(w, y),
            Encoder::Nonlinear(net) => net.predict(y),
        }
    }

    pub fn linear(&self) -> Option<&EncoderWeights> {
        match self {
            Encoder::Linear(w) => Some(w),
            Encoder::Nonlinear(_) => None,
        }
    }
}

/// How the optimizer treats the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Trained, clamped to `w >= 0` after every step.
    #[default]
    Projected,
    /// Trained without constraints.
    Free,
    /// Never updated.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    ChemTab,
    /// Frozen PCA projection.
    Pca,
    /// Trainable linear encoder without constraints or dynamic head.
    Unconstrained,
    /// Small MLP encoder.
    Nonlinear,
    /// User supplied frozen projection.
    Fixed,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::ChemTab,
        ModelKind::Pca,
        ModelKind::Unconstrained,
        ModelKind::Nonlinear,
        ModelKind::Fixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ChemTab => "chemtab",
            ModelKind::Pca => "pca",
            ModelKind::Unconstrained => "unconstrained",
            ModelKind::Nonlinear => "nonlinear",
            ModelKind::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::Argument(format!(
                    "unknown model kind `{s}` (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

fn default_p() -> usize {
    3
}
fn default_middle_width() -> usize {
    64
}
fn default_epochs() -> usize {
    500
}
fn default_batch_size() -> usize {
    407
}
fn default_lr() -> f64 {
    1e-3
}
fn default_dropout() -> f64 {
    0.01522
}
fn default_one() -> f64 {
    1.0
}
fn default_lambda_cov() -> f64 {
    0.1
}
fn default_patience() -> usize {
    50
}
fn default_train_fraction() -> f64 {
    0.5
}
fn default_encoder_width() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_middle_width")]
    pub middle_width: usize,
    /// Species whose source terms the physics regressor predicts. Default:
    /// every species with a non-zero source term somewhere in the data.
    #[serde(default)]
    pub key_species: Option<Vec<String>>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub scaler: ScalerKind,
    #[serde(default = "default_one")]
    pub lambda_orth: f64,
    #[serde(default = "default_lambda_cov")]
    pub lambda_cov: f64,
    #[serde(default = "default_one")]
    pub alpha_phy: f64,
    #[serde(default = "default_one")]
    pub alpha_dyn: f64,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder_mode: EncoderMode,
    #[serde(default)]
    pub kind: ModelKind,
    /// Fraction of rows used for training by the command line front end.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Hidden width of the nonlinear encoder baseline (two layers).
    #[serde(default = "default_encoder_width")]
    pub encoder_width: usize,
    /// `s x p` matrix (row per species) for the fixed-projection baseline.
    #[serde(default)]
    pub fixed_projection: Option<Vec<Vec<f64>>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.middle_width < MIN_MIDDLE_WIDTH {
            return bad(format!("middle_width must be at least {MIN_MIDDLE_WIDTH}"));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.patience == 0 || self.encoder_width == 0
        {
            return bad(
                "epochs, patience and encoder_width must be positive and batch_size at least 2"
                    .into(),
            );
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("lr must be positive and dropout in [0, 1)".into());
        }
        for (name, v) in [
            ("lambda_orth", self.lambda_orth),
            ("lambda_cov", self.lambda_cov),
            ("alpha_phy", self.alpha_phy),
            ("alpha_dyn", self.alpha_dyn),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_phy: self.alpha_phy,
            alpha_dyn: self.alpha_dyn,
            lambda_orth: self.lambda_orth,
            lambda_cov: self.lambda_cov,
        }
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hidden widths of a regressor: the middle width halved (integer division)
/// four times on each side, e.g. 792 -> `[49, 99, 198, 396, 792, 396, 198, 99, 49]`.
pub fn regressor_hidden_widths(middle_width: usize) -> Result<Vec<usize>> {
    if middle_width < MIN_MIDDLE_WIDTH {
        return Err(Error::Config(format!(
            "middle_width {middle_width} is below the minimum of {MIN_MIDDLE_WIDTH}"
        )));
    }
    let mut side = Vec::with_capacity(PYRAMID_SIDE);
    let mut w = middle_width;
    for _ in 0..PYRAMID_SIDE {
        w /= 2;
        side.push(w);
    }
    let mut widths: Vec<usize> = side.iter().rev().copied().collect();
    widths.push(middle_width);
    widths.extend(side);
    Ok(widths)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub kind: ModelKind,
    pub seed: u64,
    pub config_hash: String,
    pub data_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChemTabModel {
    pub encoder: Encoder,
    pub physics_reg: MlpNetwork,
    /// Present for linear encoders trained with a dynamic term.
    pub dyn_reg: Option<MlpNetwork>,
    pub physics_scaler: OutputScaler,
    pub dyn_scaler: Option<OutputScaler>,
    pub species_names: Vec<String>,
    pub key_species: Vec<String>,
    pub metadata: ModelMetadata,
    key_indices: Vec<usize>,
}

impl ChemTabModel {
    /// Assembles a model from parts and checks every shape chain.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        encoder: Encoder,
        physics_reg: MlpNetwork,
        dyn_reg: Option<MlpNetwork>,
        physics_scaler: OutputScaler,
        dyn_scaler: Option<OutputScaler>,
        species_names: Vec<String>,
        key_species: Vec<String>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        let (s, p, k) = (species_names.len(), encoder.p(), key_species.len());
        if encoder.s() != s {
            return Err(Error::shape("encoder input", s, encoder.s()));
        }
        if let Encoder::Linear(w) = &encoder {
            if w.species_names() != species_names.as_slice() {
                return Err(Error::Argument(
                    "encoder species differ from model species".into(),
                ));
            }
        }
        if physics_reg.input_width() != p + 1 {
            return Err(Error::shape(
                "physics regressor input",
                p + 1,
                physics_reg.input_width(),
            ));
        }
        if physics_reg.output_width() != k + 1 {
            return Err(Error::shape(
                "physics regressor output",
                k + 1,
                physics_reg.output_width(),
            ));
        }
        if physics_scaler.width() != k + 1 {
            return Err(Error::shape(
                "physics scaler",
                k + 1,
                physics_scaler.width(),
            ));
        }
        match (&dyn_reg, &dyn_scaler) {
            (None, None) => {}
            (Some(net), Some(scaler)) => {
                if matches!(encoder, Encoder::Nonlinear(_)) {
                    return Err(Error::Argument(
                        "dynamic regressor needs a linear encoder".into(),
                    ));
                }
                if net.input_width() != p + 1 {
                    return Err(Error::shape(
                        "dynamic regressor input",
                        p + 1,
                        net.input_width(),
                    ));
                }
                if net.output_width() != p {
                    return Err(Error::shape(
                        "dynamic regressor output",
                        p,
                        net.output_width(),
                    ));
                }
                if scaler.width() != p {
                    return Err(Error::shape("dynamic scaler", p, scaler.width()));
                }
            }
            _ => {
                return Err(Error::Argument(
                    "dynamic regressor and scaler must come together".into(),
                ))
            }
        }
        let key_indices = key_species
            .iter()
            .map(|name| {
                species_names.iter().position(|s| s == name).ok_or_else(|| {
                    Error::Argument(format!("key species `{name}` is not a model species"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            physics_reg,
            dyn_reg,
            physics_scaler,
            dyn_scaler,
            species_names,
            key_species,
            metadata,
            key_indices,
        })
    }

    pub fn s(&self) -> usize {
        self.species_names.len()
    }

    pub fn p(&self) -> usize {
        self.encoder.p()
    }

    pub fn k(&self) -> usize {
        self.key_species.len()
    }

    pub fn key_indices(&self) -> &[usize] {
        &self.key_indices
    }

    pub fn linear_encoder(&self) -> Option<&EncoderWeights> {
        self.encoder.linear()
    }

    pub fn n_params(&self) -> usize {
        let enc = match &self.encoder {
            Encoder::Linear(w) => w.matrix().len(),
            Encoder::Nonlinear(net) => net.n_params(),
        };
        let scalers =
            2 * (self.physics_scaler.width() + self.dyn_scaler.as_ref().map_or(0, |s| s.width()));
        enc + self.physics_reg.n_params()
            + self.dyn_reg.as_ref().map_or(0, |n| n.n_params())
            + scalers
    }

    /// Names and lengths of the trainable blocks: encoder (optional), then
    /// physics regressor, then dynamic regressor.
    pub fn parameter_block_names(&self, with_encoder: bool) -> Vec<(String, usize)> {
        let mut names = Vec::new();
        if with_encoder {
            match &self.encoder {
                Encoder::Linear(w) => names.push(("encoder.weights".to_string(), w.matrix().len())),
                Encoder::Nonlinear(net) => names.extend(net.param_block_names("encoder")),
            }
        }
        names.extend(self.physics_reg.param_block_names("physics"));
        if let Some(net) = &self.dyn_reg {
            names.extend(net.param_block_names("dynamic"));
        }
        names
    }

    /// Mutable views in [`Self::parameter_block_names`] order.
    pub fn parameter_blocks_mut(&mut self, with_encoder: bool) -> Vec<&mut [f64]> {
        let mut blocks = Vec::new();
        if with_encoder {
            match &mut self.encoder {
                Encoder::Linear(w) => {
                    blocks.push(w.matrix_mut().as_slice_mut().expect("standard layout"))
                }
                Encoder::Nonlinear(net) => blocks.extend(net.param_blocks_mut()),
            }
        }
        blocks.extend(self.physics_reg.param_blocks_mut());
        if let Some(net) = &mut self.dyn_reg {
            blocks.extend(net.param_blocks_mut());
        }
        blocks
    }

    /// Bytes held by the numeric parameters (weights, biases, scalers).
    pub fn parameter_bytes(&self) -> usize {
        self.n_params() * std::mem::size_of::<f64>()
    }

    /// Evaluation-mode forward from progress variables, in physical units.
    pub fn predict_from_cpv(
        &self,
        cpv: ArrayView2<f64>,
        zmix: ArrayView1<f64>,
    ) -> Result<Prediction> {
        if cpv.ncols() != self.p() {
            return Err(Error::shape("progress variables", self.p(), cpv.ncols()));
        }
        if zmix.len() != cpv.nrows() {
            return Err(Error::shape(
                "mixture fraction rows",
                cpv.nrows(),
                zmix.len(),
            ));
        }
        let input = regressor_input(cpv, zmix);
        let mut phys = self.physics_reg.predict(input.view())?;
        self.physics_scaler.inverse_in_place(&mut phys);
        let dynamic = match (&self.dyn_reg, &self.dyn_scaler) {
            (Some(net), Some(scaler)) => {
                let mut d = net.predict(input.view())?;
                scaler.inverse_in_place(&mut d);
                Some(d)
            }
            _ => None,
        };
        Ok(Prediction {
            source_energy: phys.column(0).to_owned(),
            key_source_terms: phys.slice(ndarray::s![.., 1..]).to_owned(),
            dynamic,
        })
    }
}

/// Model outputs in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub source_energy: Array1<f64>,
    /// `n x k`, key species in model order.
    pub key_source_terms: Array2<f64>,
    /// `n x p` projected source terms, when the model has a dynamic head.
    pub dynamic: Option<Array2<f64>>,
}

/// Encoder, then both regressors.
pub fn predict(
    model: &ChemTabModel,
    y: ArrayView2<f64>,
    zmix: ArrayView1<f64>,
) -> Result<Prediction> {
    if y.ncols() != model.s() {
        return Err(Error::shape("mass fractions", model.s(), y.ncols()));
    }
    let cpv = model.encoder.encode(y)?;
    model.predict_from_cpv(cpv.view(), zmix)
}

/// `[C_pv | Z_mix]`.
pub(crate) fn regressor_input(cpv: ArrayView2<f64>, zmix: ArrayView1<f64>) -> Array2<f64> {
    let z = zmix.insert_axis(Axis(1));
    concatenate(Axis(1), &[cpv, z]).expect("row counts checked")
}

/// Species with a non-zero source term in at least one row.
pub fn default_key_species(ds: &FlameletDataset) -> Vec<String> {
    ds.species_names()
        .iter()
        .enumerate()
        .filter(|(j, _)| ds.source_terms().column(*j).iter().any(|&v| v != 0.0))
        .map(|(_, name)| name.clone())
        .collect()
}

pub fn resolve_key_species(cfg: &TrainConfig, ds: &FlameletDataset) -> Result<Vec<String>> {
    let keys = match &cfg.key_species {
        Some(k) => k.clone(),
        None => default_key_species(ds),
    };
    for k in &keys {
        if ds.species_index(k).is_none() {
            return Err(Error::Config(format!("key species `{k}` not in dataset")));
        }
    }
    Ok(keys)
}

/// Initial linear projection: Glorot uniform, clamped to be non-negative.
pub fn initial_projection(s: usize, p: usize, seed: u64) -> Array2<f64> {
    glorot_uniform_init(s, p, mix_seed(seed, STREAM_ENCODER))
        .reversed_axes()
        .as_standard_layout()
        .mapv(|v| v.max(0.0))
}

/// Fresh model for `cfg`. The encoder depends on `cfg.kind`; the PCA and
/// fixed kinds need their projection supplied through `projection`.
pub fn build_model_with(
    cfg: &TrainConfig,
    species: &[String],
    key_species: &[String],
    projection: Option<Array2<f64>>,
) -> Result<ChemTabModel> {
    cfg.validate()?;
    let s = species.len();
    if cfg.p >= s {
        return Err(Error::Config(format!(
            "p = {} must be below the species count {s}",
            cfg.p
        )));
    }
    let hidden = regressor_hidden_widths(cfg.middle_width)?;
    let (p, k) = (cfg.p, key_species.len());
    let widths = |out: usize| {
        let mut w = vec![p + 1];
        w.extend(&hidden);
        w.push(out);
        w
    };
    let encoder = match cfg.kind {
        ModelKind::Nonlinear => Encoder::Nonlinear(MlpNetwork::glorot(
            &[s, cfg.encoder_width, cfg.encoder_width, p],
            cfg.activation,
            Activation::Linear,
            0.0,
            mix_seed(cfg.seed, STREAM_ENCODER),
        )?),
        _ => {
            let w = match projection {
                Some(w) => w,
                None => initial_projection(s, p, cfg.seed),
            };
            if w.dim() != (s, p) {
                return Err(Error::shape(
                    "projection",
                    format!("{s}x{p}"),
                    format!("{}x{}", w.nrows(), w.ncols()),
                ));
            }
            Encoder::Linear(EncoderWeights::new(w, species.to_vec())?)
        }
    };
    let physics_reg = MlpNetwork::glorot(
        &widths(k + 1),
        cfg.activation,
        Activation::Linear,
        cfg.dropout,
        mix_seed(cfg.seed, STREAM_PHYSICS),
    )?;
    let with_dyn = matches!(encoder, Encoder::Linear(_)) && cfg.alpha_dyn > 0.0;
    let dyn_reg = if with_dyn {
        Some(MlpNetwork::glorot(
            &widths(p),
            cfg.activation,
            Activation::Linear,
            cfg.dropout,
            mix_seed(cfg.seed, STREAM_DYNAMIC),
        )?)
    } else {
        None
    };
    ChemTabModel::from_parts(
        encoder,
        physics_reg,
        dyn_reg,
        OutputScaler::identity(k + 1),
        with_dyn.then(|| OutputScaler::identity(p)),
        species.to_vec(),
        key_species.to_vec(),
        ModelMetadata {
            kind: cfg.kind,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            data_fingerprint: String::new(),
        },
    )
}

/// Fresh model with a Glorot-initialized, clamped linear encoder.
pub fn build_model(
    cfg: &TrainConfig,
    species: &[String],
    key_species: &[String],
) -> Result<ChemTabModel> {
    build_model_with(cfg, species, key_species, None)
}
