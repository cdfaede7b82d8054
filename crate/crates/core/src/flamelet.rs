//! Steady counterflow-free flamelet solver used as a desk-scale data source.
//!
//! Solves, on a uniform grid with Dirichlet ends (air at `x = 0`, fuel at
//! `x = L`),
//!
//! ```text
//! d/dx(rho D_i dY_i/dx) + Sdot_i = 0
//! d/dx(kappa dT/dx)     + S_e    = 0,     S_e = -sum_i Sdot_i h0f_i
//! ```
//!
//! by pseudo-transient continuation: implicit (tridiagonal) diffusion and
//! explicit chemistry, iterated until the steady residual drops below the
//! configured tolerance. Reactions are irreversible second-order Arrhenius
//! steps `omega = A rho^2 Y_a Y_b exp(-Ta / T)` with mass-based net
//! stoichiometric coefficients that sum to zero.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, FlameletDataset};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// A converged flame whose peak heat release is below this fraction of the
/// first flame's peak is reported as extinguished.
pub const EXTINCTION_RATIO: f64 = 1e-6;

/// Flames solved per parallel wave during a strain sweep.
const SWEEP_WAVE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reaction {
    pub fuel: String,
    pub oxidizer: String,
    pub pre_exponential: f64,
    pub activation_temperature: f64,
    /// Net mass produced per unit rate, one entry per species.
    pub coefficients: Vec<f64>,
}

/// Shorthand for the single global step `F + nu O -> (1 + nu) P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneStep {
    pub fuel: String,
    pub oxidizer: String,
    pub product: String,
    pub pre_exponential: f64,
    pub activation_temperature: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MechanismFile {
    species: Vec<String>,
    heat_of_formation: Vec<f64>,
    diffusivity: Vec<f64>,
    density: f64,
    conductivity: f64,
    heat_capacity: f64,
    #[serde(default)]
    mixture_weights: Option<Vec<f64>>,
    #[serde(default)]
    one_step: Option<OneStep>,
    #[serde(default)]
    reactions: Vec<Reaction>,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledReaction {
    fuel: usize,
    oxidizer: usize,
    pre_exponential: f64,
    activation_temperature: f64,
    coefficients: Vec<f64>,
}

/// Species thermochemistry, transport and kinetics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    species: Vec<String>,
    heat_of_formation: Vec<f64>,
    diffusivity: Vec<f64>,
    density: f64,
    conductivity: f64,
    heat_capacity: f64,
    /// Weights of the conserved coupling function `beta = sum_i w_i Y_i`.
    mixture_weights: Vec<f64>,
    reactions: Vec<CompiledReaction>,
}

impl Mechanism {
    /// One global step `F + nu O -> (1 + nu) P` with coupling function
    /// `beta = Y_F - Y_O / nu`.
    #[allow(clippy::too_many_arguments)]
    pub fn one_step(
        species: Vec<String>,
        heat_of_formation: Vec<f64>,
        diffusivity: Vec<f64>,
        density: f64,
        conductivity: f64,
        heat_capacity: f64,
        step: OneStep,
    ) -> Result<Self> {
        Self::from_file(MechanismFile {
            species,
            heat_of_formation,
            diffusivity,
            density,
            conductivity,
            heat_capacity,
            mixture_weights: None,
            one_step: Some(step),
            reactions: Vec::new(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: MechanismFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("mechanism: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn from_file(file: MechanismFile) -> Result<Self> {
        let s = file.species.len();
        let cfg = |m: String| Error::Config(format!("mechanism: {m}"));
        if s < 3 {
            return Err(cfg(format!("need at least 3 species, got {s}")));
        }
        if file.heat_of_formation.len() != s || file.diffusivity.len() != s {
            return Err(cfg(
                "heat_of_formation and diffusivity need one entry per species".into(),
            ));
        }
        if file.diffusivity.iter().any(|&d| !(d > 0.0)) {
            return Err(cfg("diffusivities must be positive".into()));
        }
        for (name, v) in [
            ("density", file.density),
            ("conductivity", file.conductivity),
            ("heat_capacity", file.heat_capacity),
        ] {
            if !(v > 0.0) {
                return Err(cfg(format!("{name} must be positive")));
            }
        }
        let index = |name: &str| {
            file.species
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| cfg(format!("unknown species `{name}`")))
        };

        let mut reactions = Vec::new();
        let mut default_weights = None;
        if let Some(step) = &file.one_step {
            if !(step.nu > 0.0) {
                return Err(cfg("nu must be positive".into()));
            }
            let (f, o, p) = (
                index(&step.fuel)?,
                index(&step.oxidizer)?,
                index(&step.product)?,
            );
            let mut coefficients = vec![0.0; s];
            coefficients[f] = -1.0;
            coefficients[o] = -step.nu;
            coefficients[p] = 1.0 + step.nu;
            reactions.push(CompiledReaction {
                fuel: f,
                oxidizer: o,
                pre_exponential: step.pre_exponential,
                activation_temperature: step.activation_temperature,
                coefficients,
            });
            let mut w = vec![0.0; s];
            w[f] = 1.0;
            w[o] = -1.0 / step.nu;
            default_weights = Some(w);
        }
        for r in &file.reactions {
            if r.coefficients.len() != s {
                return Err(cfg(
                    "reaction coefficients need one entry per species".into()
                ));
            }
            let total: f64 = r.coefficients.iter().sum();
            let scale: f64 = r.coefficients.iter().map(|c| c.abs()).sum();
            if total.abs() > 1e-12 * scale.max(1.0) {
                return Err(cfg(format!(
                    "reaction coefficients must sum to zero (got {total})"
                )));
            }
            reactions.push(CompiledReaction {
                fuel: index(&r.fuel)?,
                oxidizer: index(&r.oxidizer)?,
                pre_exponential: r.pre_exponential,
                activation_temperature: r.activation_temperature,
                coefficients: r.coefficients.clone(),
            });
        }
        if reactions.is_empty() {
            return Err(cfg(
                "no reactions (give `one_step` or `[[reactions]]`)".into()
            ));
        }
        for r in &reactions {
            if !(r.pre_exponential >= 0.0) || !(r.activation_temperature >= 0.0) {
                return Err(cfg(
                    "pre-exponential factor and activation temperature must be non-negative".into(),
                ));
            }
        }
        let mixture_weights = match (file.mixture_weights, default_weights) {
            (Some(w), _) => w,
            (None, Some(w)) if reactions.len() == 1 => w,
            _ => {
                return Err(cfg(
                    "mixture_weights required for multi-step mechanisms".into()
                ))
            }
        };
        if mixture_weights.len() != s {
            return Err(cfg("mixture_weights needs one entry per species".into()));
        }
        for r in &reactions {
            let drift: f64 = mixture_weights
                .iter()
                .zip(&r.coefficients)
                .map(|(w, c)| w * c)
                .sum();
            if drift.abs() > 1e-12 {
                return Err(cfg(
                    "mixture_weights are not conserved by every reaction".into()
                ));
            }
        }

        Ok(Self {
            species: file.species,
            heat_of_formation: file.heat_of_formation,
            diffusivity: file.diffusivity,
            density: file.density,
            conductivity: file.conductivity,
            heat_capacity: file.heat_capacity,
            mixture_weights,
            reactions,
        })
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn heat_of_formation(&self) -> &[f64] {
        &self.heat_of_formation
    }

    pub fn diffusivity(&self) -> &[f64] {
        &self.diffusivity
    }

    /// Diffusivity of the first reaction's fuel; used for the flame key.
    pub fn fuel_diffusivity(&self) -> f64 {
        self.diffusivity[self.reactions[0].fuel]
    }

    pub fn scale_pre_exponential(mut self, factor: f64) -> Self {
        for r in &mut self.reactions {
            r.pre_exponential *= factor;
        }
        self
    }

    pub fn with_diffusivity(mut self, d: Vec<f64>) -> Result<Self> {
        if d.len() != self.n_species() || d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("invalid diffusivity vector".into()));
        }
        self.diffusivity = d;
        Ok(self)
    }

    fn equal_diffusivities(&self) -> bool {
        self.diffusivity.iter().all(|&d| d == self.diffusivity[0])
    }

    /// Species source terms at one state, written into `sdot`, and the
    /// linearized consumption rate `-d(Sdot_i / rho)/dY_i` of each reactant,
    /// written into `consumption`. Returns the largest thermal feedback rate
    /// `d(S_e / (rho cp))/dT`, which bounds the explicit pseudo-time step.
    fn source_terms(
        &self,
        y: &[f64],
        temperature: f64,
        sdot: &mut [f64],
        consumption: &mut [f64],
    ) -> f64 {
        sdot.iter_mut().for_each(|v| *v = 0.0);
        consumption.iter_mut().for_each(|v| *v = 0.0);
        let rho = self.density;
        let mut thermal = 0.0f64;
        for r in &self.reactions {
            let ya = y[r.fuel].max(0.0);
            let yb = y[r.oxidizer].max(0.0);
            let k = r.pre_exponential * (-r.activation_temperature / temperature).exp();
            let omega = k * rho * rho * ya * yb;
            for (s, c) in sdot.iter_mut().zip(&r.coefficients) {
                *s += c * omega;
            }
            consumption[r.fuel] += -r.coefficients[r.fuel] * k * rho * yb;
            consumption[r.oxidizer] += -r.coefficients[r.oxidizer] * k * rho * ya;
            let heat: f64 = -r
                .coefficients
                .iter()
                .zip(&self.heat_of_formation)
                .map(|(c, h)| c * h)
                .sum::<f64>();
            thermal += (heat * omega).abs() * r.activation_temperature
                / (temperature * temperature * rho * self.heat_capacity);
        }
        thermal
    }

    /// `S_e = -sum_i Sdot_i h0f_i`, summed in species order.
    pub fn source_energy(&self, sdot: &[f64]) -> f64 {
        -sdot
            .iter()
            .zip(&self.heat_of_formation)
            .map(|(s, h)| s * h)
            .sum::<f64>()
    }

    fn beta(&self, y: &[f64]) -> f64 {
        self.mixture_weights.iter().zip(y).map(|(w, y)| w * y).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stream {
    pub temperature: f64,
    /// Species not listed are zero.
    pub mass_fractions: BTreeMap<String, f64>,
}

impl Stream {
    fn resolve(&self, mech: &Mechanism) -> Result<Vec<f64>> {
        let mut y = vec![0.0; mech.n_species()];
        for (name, &v) in &self.mass_fractions {
            let i =
                mech.species.iter().position(|s| s == name).ok_or_else(|| {
                    Error::Config(format!("stream names unknown species `{name}`"))
                })?;
            y[i] = v;
        }
        let sum: f64 = y.iter().sum();
        if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(
                "stream mass fractions must lie in [0, 1] and sum to 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("stream temperature must be positive".into()));
        }
        Ok(y)
    }
}

fn default_max_iterations() -> usize {
    2_000_000
}

fn default_cfl() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub grid_points: usize,
    pub initial_length: f64,
    pub shrink_factor: f64,
    pub max_flames: usize,
    /// Upper bound on the pseudo-time step.
    pub pseudo_time_step: f64,
    /// Converged when the largest steady residual (in pseudo-time rate units:
    /// `dY/dt` for species, `dT/dt` for temperature) is below this.
    pub steady_tolerance: f64,
    /// Peak temperature rise of the initial guess that lights each flame.
    pub ignition_temperature: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Fraction of the explicit chemistry stability limit used per step.
    #[serde(default = "default_cfl")]
    pub chemistry_cfl: f64,
    pub air_side: Stream,
    pub fuel_side: Stream,
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("generator: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.grid_points < 3 {
            return bad("grid_points must be at least 3");
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return bad("shrink_factor must lie in (0, 1)");
        }
        if !(self.initial_length > 0.0)
            || !(self.pseudo_time_step > 0.0)
            || !(self.steady_tolerance > 0.0)
        {
            return bad("initial_length, pseudo_time_step and steady_tolerance must be positive");
        }
        if self.max_flames == 0 || self.max_iterations == 0 {
            return bad("max_flames and max_iterations must be positive");
        }
        if !(self.chemistry_cfl > 0.0 && self.chemistry_cfl < 1.0) {
            return bad("chemistry_cfl must lie in (0, 1)");
        }
        if !(self.ignition_temperature >= 0.0) {
            return bad("ignition_temperature must be non-negative");
        }
        Ok(())
    }
}

/// Converged solution of one flamelet, one entry per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct FlameSolution {
    pub length: f64,
    pub x_pos: Array1<f64>,
    pub mass_fractions: Array2<f64>,
    pub source_terms: Array2<f64>,
    pub source_energy: Array1<f64>,
    pub temperature: Array1<f64>,
    pub mixture_fraction: Array1<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl FlameSolution {
    pub fn peak_source_energy(&self) -> f64 {
        self.source_energy
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_extinguished(&self, reference_peak: f64) -> bool {
        self.peak_source_energy() < EXTINCTION_RATIO * reference_peak
    }
}

fn thomas_solve(off: f64, diag: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    // symmetric tridiagonal system with constant off-diagonal, solved in place
    let n = rhs.len();
    scratch[0] = off / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let den = diag[i] - off * scratch[i - 1];
        scratch[i] = off / den;
        rhs[i] = (rhs[i] - off * rhs[i - 1]) / den;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Solves one flamelet on a domain of the given length.
pub fn solve_steady_flamelet(
    mech: &Mechanism,
    cfg: &GeneratorConfig,
    length: f64,
) -> Result<FlameSolution> {
    cfg.validate()?;
    if !(length > 0.0) {
        return Err(Error::Argument(format!(
            "domain length must be positive, got {length}"
        )));
    }
    let s = mech.n_species();
    let npts = cfg.grid_points;
    let ny = npts - 2;
    let y_air = cfg.air_side.resolve(mech)?;
    let y_fuel = cfg.fuel_side.resolve(mech)?;
    let (t_air, t_fuel) = (cfg.air_side.temperature, cfg.fuel_side.temperature);
    let dx = length / (npts - 1) as f64;
    let inv_dx2 = 1.0 / (dx * dx);
    let rho = mech.density;
    let thermal_diffusivity = mech.conductivity / (rho * mech.heat_capacity);

    // State: species-major interior values.
    let mut y = vec![0.0; s * ny];
    let mut t = vec![0.0; ny];
    for j in 0..ny {
        let xi = (j + 1) as f64 / (npts - 1) as f64;
        for i in 0..s {
            y[i * ny + j] = y_air[i] + (y_fuel[i] - y_air[i]) * xi;
        }
        t[j] = t_air
            + (t_fuel - t_air) * xi
            + cfg.ignition_temperature * (std::f64::consts::PI * xi).sin();
    }

    let mut sdot = vec![0.0; s * ny];
    let mut consumption = vec![0.0; s * ny];
    let mut se = vec![0.0; ny];
    let mut local_y = vec![0.0; s];
    let mut local_s = vec![0.0; s];
    let mut local_c = vec![0.0; s];
    let mut rhs = vec![0.0; ny];
    let mut diag = vec![0.0; ny];
    let mut scratch = vec![0.0; ny];

    let value = |field: &[f64], left: f64, right: f64, j: isize| -> f64 {
        if j < 0 {
            left
        } else if j as usize >= ny {
            right
        } else {
            field[j as usize]
        }
    };

    let mut residual;
    let mut iterations = 0;
    loop {
        // chemistry at the current state
        let mut stiffness = 0.0f64;
        for j in 0..ny {
            for i in 0..s {
                local_y[i] = y[i * ny + j];
            }
            stiffness =
                stiffness.max(mech.source_terms(&local_y, t[j], &mut local_s, &mut local_c));
            for i in 0..s {
                sdot[i * ny + j] = local_s[i];
                consumption[i * ny + j] = local_c[i];
            }
            se[j] = mech.source_energy(&local_s);
        }

        residual = 0.0f64;
        for i in 0..s {
            let field = &y[i * ny..(i + 1) * ny];
            let d = mech.diffusivity[i];
            for j in 0..ny {
                let jj = j as isize;
                let lap = value(field, y_air[i], y_fuel[i], jj - 1) - 2.0 * field[j]
                    + value(field, y_air[i], y_fuel[i], jj + 1);
                let r = d * lap * inv_dx2 + sdot[i * ny + j] / rho;
                residual = residual.max(r.abs());
            }
        }
        for j in 0..ny {
            let jj = j as isize;
            let lap =
                value(&t, t_air, t_fuel, jj - 1) - 2.0 * t[j] + value(&t, t_air, t_fuel, jj + 1);
            let r = thermal_diffusivity * lap * inv_dx2 + se[j] / (rho * mech.heat_capacity);
            residual = residual.max(r.abs());
        }
        if !residual.is_finite() {
            return Err(Error::Solver {
                iterations,
                residual,
            });
        }
        if residual < cfg.steady_tolerance {
            break;
        }
        if iterations >= cfg.max_iterations {
            return Err(Error::Solver {
                iterations,
                residual,
            });
        }
        iterations += 1;

        let dt = if stiffness > 0.0 {
            cfg.pseudo_time_step.min(cfg.chemistry_cfl / stiffness)
        } else {
            cfg.pseudo_time_step
        };

        // Reactant consumption is linearized and taken implicitly on the
        // diagonal; the steady fixed point is unchanged.
        for i in 0..s {
            let r = dt * mech.diffusivity[i] * inv_dx2;
            let field = &mut y[i * ny..(i + 1) * ny];
            for j in 0..ny {
                let c = consumption[i * ny + j];
                rhs[j] = field[j] + dt * (sdot[i * ny + j] / rho + c * field[j]);
                diag[j] = 1.0 + 2.0 * r + dt * c;
            }
            rhs[0] += r * y_air[i];
            rhs[ny - 1] += r * y_fuel[i];
            thomas_solve(-r, &diag, &mut rhs, &mut scratch);
            field.copy_from_slice(&rhs);
        }
        let r = dt * thermal_diffusivity * inv_dx2;
        for j in 0..ny {
            rhs[j] = t[j] + dt * se[j] / (rho * mech.heat_capacity);
            diag[j] = 1.0 + 2.0 * r;
        }
        rhs[0] += r * t_air;
        rhs[ny - 1] += r * t_fuel;
        thomas_solve(-r, &diag, &mut rhs, &mut scratch);
        t.copy_from_slice(&rhs);
    }

    // Assemble full-grid output. Rows are clipped to [0, 1] and renormalized
    // when diffusivities differ; source terms, source energy and mixture
    // fraction are then evaluated from the emitted mass fractions.
    let renormalize = !mech.equal_diffusivities();
    let mut mass_fractions = Array2::zeros((npts, s));
    let mut temperature = Array1::zeros(npts);
    for p in 0..npts {
        let (row, temp) = if p == 0 {
            (y_air.clone(), t_air)
        } else if p == npts - 1 {
            (y_fuel.clone(), t_fuel)
        } else {
            (
                (0..s).map(|i| y[i * ny + p - 1]).collect::<Vec<_>>(),
                t[p - 1],
            )
        };
        let mut row: Vec<f64> = row.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        if renormalize {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        mass_fractions.row_mut(p).assign(&Array1::from(row));
        temperature[p] = temp;
    }
    let beta_air = mech.beta(&y_air);
    let beta_fuel = mech.beta(&y_fuel);
    let mut source_terms = Array2::zeros((npts, s));
    let mut source_energy = Array1::zeros(npts);
    let mut mixture_fraction = Array1::zeros(npts);
    for p in 0..npts {
        let row = mass_fractions.row(p).to_vec();
        mech.source_terms(&row, temperature[p], &mut local_s, &mut local_c);
        source_energy[p] = mech.source_energy(&local_s);
        source_terms
            .row_mut(p)
            .assign(&ndarray::ArrayView1::from(&local_s[..]));
        mixture_fraction[p] =
            ((mech.beta(&row) - beta_air) / (beta_fuel - beta_air)).clamp(0.0, 1.0);
    }
    let x_pos = Array1::from_shape_fn(npts, |p| p as f64 * dx);

    Ok(FlameSolution {
        length,
        x_pos,
        mass_fractions,
        source_terms,
        source_energy,
        temperature,
        mixture_fraction,
        residual,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlameSummary {
    pub index: usize,
    pub length: f64,
    pub flame_key: f64,
    pub peak_source_energy: f64,
    pub iterations: usize,
    pub residual: f64,
    pub extinguished: bool,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: FlameletDataset,
    pub flames: Vec<FlameSummary>,
    /// Index of the extinguished flame that ended the sweep, if any.
    pub extinction_index: Option<usize>,
}

/// Domain lengths of the strain sweep: `L0, L0*f, (L0*f)*f, ...`.
pub fn sweep_lengths(cfg: &GeneratorConfig) -> Vec<f64> {
    let mut lengths = Vec::with_capacity(cfg.max_flames);
    let mut length = cfg.initial_length;
    for _ in 0..cfg.max_flames {
        lengths.push(length);
        length *= cfg.shrink_factor;
    }
    lengths
}

/// Runs the strain sweep until a flame extinguishes (that flame is kept) or
/// `max_flames` flames have been solved. Flames are solved independently in
/// parallel waves; the result does not depend on the execution policy.
pub fn generate(mech: &Mechanism, cfg: &GeneratorConfig, exec: Execution) -> Result<Generated> {
    cfg.validate()?;
    let lengths = sweep_lengths(cfg);
    let mut flames: Vec<(FlameSolution, f64)> = Vec::new();
    let mut reference_peak = None;
    let mut extinction_index = None;

    'waves: for wave in lengths.chunks(SWEEP_WAVE) {
        let solved = exec::map(exec, wave, |&len| solve_steady_flamelet(mech, cfg, len));
        for solution in solved {
            let solution = solution?;
            let index = flames.len();
            let peak = solution.peak_source_energy();
            let reference = *reference_peak.get_or_insert(peak);
            if !(reference > 0.0) {
                return Err(Error::Config(
                    "no burning branch: the first flame is extinguished".into(),
                ));
            }
            let key = mech.fuel_diffusivity() / (solution.length * solution.length);
            let out = solution.is_extinguished(reference);
            flames.push((solution, key));
            if out {
                extinction_index = Some(index);
                break 'waves;
            }
        }
    }

    let parts = flames
        .iter()
        .map(|(f, key)| {
            FlameletDataset::new(
                mech.species.clone(),
                f.mass_fractions.clone(),
                f.source_terms.clone(),
                f.source_energy.clone(),
                f.mixture_fraction.clone(),
                Array1::from_elem(f.x_pos.len(), *key),
                f.x_pos.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = FlameletDataset::concat(&parts)?;
    let summaries = flames
        .iter()
        .enumerate()
        .map(|(index, (f, key))| FlameSummary {
            index,
            length: f.length,
            flame_key: *key,
            peak_source_energy: f.peak_source_energy(),
            iterations: f.iterations,
            residual: f.residual,
            extinguished: Some(index) == extinction_index,
        })
        .collect();
    Ok(Generated {
        dataset,
        flames: summaries,
        extinction_index,
    })
}

/// [`generate`] followed by writing the dataset CSV.
pub fn generate_to_file(
    mech: &Mechanism,
    cfg: &GeneratorConfig,
    out_path: impl AsRef<Path>,
    exec: Execution,
) -> Result<Generated> {
    let generated = generate(mech, cfg, exec)?;
    save_dataset(&generated.dataset, out_path)?;
    Ok(generated)
}
