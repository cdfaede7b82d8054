//! Flamelet solution data: row-aligned species mass fractions, species
//! source terms, source energy, mixture fraction and the flame/position tags.
//!
//! CSV layout (header required, UTF-8, `.` decimal separator):
//!
//! ```text
//! flame_key,x_pos,Zmix,Y_<s1>,...,Y_<sN>,souspec_<s1>,...,souspec_<sN>,souener
//! ```
//!
//! Numbers are written with 17 significant digits so a save/load cycle is
//! exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance on the per-row mass-fraction sum.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Floor applied to scaler widths of degenerate (constant) columns.
pub const EPSILON_SCALE: f64 = 1e-12;

const MAX_REPORTED_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FlameletDataset {
    species_names: Vec<String>,
    mass_fractions: Array2<f64>,
    source_terms: Array2<f64>,
    source_energy: Array1<f64>,
    mixture_fraction: Array1<f64>,
    flame_key: Array1<f64>,
    x_pos: Array1<f64>,
}

impl FlameletDataset {
    /// Builds a dataset and checks every invariant: matching row counts,
    /// `s >= 2`, `n >= 1`, mass fractions in `[0, 1]` summing to one per row
    /// and mixture fraction in `[0, 1]`.
    pub fn new(
        species_names: Vec<String>,
        mass_fractions: Array2<f64>,
        source_terms: Array2<f64>,
        source_energy: Array1<f64>,
        mixture_fraction: Array1<f64>,
        flame_key: Array1<f64>,
        x_pos: Array1<f64>,
    ) -> Result<Self> {
        let s = species_names.len();
        if s < 2 {
            return Err(Error::Argument(format!("need at least 2 species, got {s}")));
        }
        let n = mass_fractions.nrows();
        if n == 0 {
            return Err(Error::Argument("dataset has no rows".into()));
        }
        if mass_fractions.ncols() != s {
            return Err(Error::shape(
                "mass fractions",
                format!("{n}x{s}"),
                format!("{n}x{}", mass_fractions.ncols()),
            ));
        }
        if source_terms.dim() != (n, s) {
            let (r, c) = source_terms.dim();
            return Err(Error::shape(
                "source terms",
                format!("{n}x{s}"),
                format!("{r}x{c}"),
            ));
        }
        for (name, len) in [
            ("source energy", source_energy.len()),
            ("mixture fraction", mixture_fraction.len()),
            ("flame key", flame_key.len()),
            ("x position", x_pos.len()),
        ] {
            if len != n {
                return Err(Error::Validation {
                    message: format!("{name} has {len} rows, expected {n}"),
                    rows: Vec::new(),
                });
            }
        }

        let mut bad = Vec::new();
        for (i, row) in mass_fractions.outer_iter().enumerate() {
            let in_range = row.iter().all(|&y| (0.0..=1.0).contains(&y));
            let sum: f64 = row.sum();
            if !in_range || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                bad.push(i);
            }
        }
        if !bad.is_empty() {
            bad.truncate(MAX_REPORTED_ROWS);
            return Err(Error::Validation {
                message: "mass fractions must lie in [0, 1] and sum to 1 per row".into(),
                rows: bad,
            });
        }
        let bad: Vec<usize> = mixture_fraction
            .iter()
            .enumerate()
            .filter(|(_, z)| !(0.0..=1.0).contains(*z))
            .map(|(i, _)| i)
            .take(MAX_REPORTED_ROWS)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation {
                message: "mixture fraction must lie in [0, 1]".into(),
                rows: bad,
            });
        }
        let non_finite: Vec<usize> = (0..n)
            .filter(|&i| {
                !(source_terms.row(i).iter().all(|v| v.is_finite())
                    && source_energy[i].is_finite()
                    && flame_key[i].is_finite()
                    && x_pos[i].is_finite())
            })
            .take(MAX_REPORTED_ROWS)
            .collect();
        if !non_finite.is_empty() {
            return Err(Error::Validation {
                message: "non-finite source term, flame key or position".into(),
                rows: non_finite,
            });
        }

        Ok(Self {
            species_names,
            mass_fractions,
            source_terms,
            source_energy,
            mixture_fraction,
            flame_key,
            x_pos,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.mass_fractions.nrows()
    }

    pub fn n_species(&self) -> usize {
        self.species_names.len()
    }

    pub fn species_names(&self) -> &[String] {
        &self.species_names
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species_names.iter().position(|s| s == name)
    }

    pub fn mass_fractions(&self) -> &Array2<f64> {
        &self.mass_fractions
    }

    pub fn source_terms(&self) -> &Array2<f64> {
        &self.source_terms
    }

    pub fn source_energy(&self) -> &Array1<f64> {
        &self.source_energy
    }

    pub fn mixture_fraction(&self) -> &Array1<f64> {
        &self.mixture_fraction
    }

    pub fn flame_key(&self) -> &Array1<f64> {
        &self.flame_key
    }

    pub fn x_pos(&self) -> &Array1<f64> {
        &self.x_pos
    }

    /// Distinct flame keys in order of first appearance.
    pub fn flame_keys(&self) -> Vec<f64> {
        let mut keys: Vec<f64> = Vec::new();
        for &k in &self.flame_key {
            if !keys.iter().any(|&seen| seen.to_bits() == k.to_bits()) {
                keys.push(k);
            }
        }
        keys
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows()) {
            return Err(Error::Argument(format!("row index {bad} out of range")));
        }
        Self::new(
            self.species_names.clone(),
            self.mass_fractions.select(Axis(0), rows),
            self.source_terms.select(Axis(0), rows),
            self.source_energy.select(Axis(0), rows),
            self.mixture_fraction.select(Axis(0), rows),
            self.flame_key.select(Axis(0), rows),
            self.x_pos.select(Axis(0), rows),
        )
    }

    /// Stacks datasets with identical species lists.
    pub fn concat(parts: &[FlameletDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.species_names != first.species_names) {
            return Err(Error::Argument("species lists differ".into()));
        }
        let cat2 = |f: fn(&FlameletDataset) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("column counts checked")
        };
        let cat1 = |f: fn(&FlameletDataset) -> &Array1<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("1-d concat")
        };
        Self::new(
            first.species_names.clone(),
            cat2(|d| &d.mass_fractions),
            cat2(|d| &d.source_terms),
            cat1(|d| &d.source_energy),
            cat1(|d| &d.mixture_fraction),
            cat1(|d| &d.flame_key),
            cat1(|d| &d.x_pos),
        )
    }

    /// Serializes to the canonical CSV text.
    pub fn to_csv_string(&self, schema: &CsvSchema) -> String {
        let mut out = String::new();
        let mut header = vec![
            schema.flame_key.clone(),
            schema.x_pos.clone(),
            schema.mixture_fraction.clone(),
        ];
        header.extend(
            self.species_names
                .iter()
                .map(|s| format!("{}{s}", schema.mass_fraction_prefix)),
        );
        header.extend(
            self.species_names
                .iter()
                .map(|s| format!("{}{s}", schema.source_prefix)),
        );
        header.push(schema.source_energy.clone());
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n_rows() {
            let mut fields = Vec::with_capacity(header.len());
            fields.push(self.flame_key[i]);
            fields.push(self.x_pos[i]);
            fields.push(self.mixture_fraction[i]);
            fields.extend(self.mass_fractions.row(i).iter().copied());
            fields.extend(self.source_terms.row(i).iter().copied());
            fields.push(self.source_energy[i]);
            for (j, v) in fields.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write_f64(&mut out, *v);
            }
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical CSV text, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_csv_string(&CsvSchema::default()).as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Writes `v` with 17 significant digits.
pub fn write_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

pub fn format_f64(v: f64) -> String {
    let mut s = String::new();
    write_f64(&mut s, v);
    s
}

/// Column names used by [`load_dataset`] and [`save_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub flame_key: String,
    pub x_pos: String,
    pub mixture_fraction: String,
    pub mass_fraction_prefix: String,
    pub source_prefix: String,
    pub source_energy: String,
    /// Species to read. `None` takes every column carrying the mass-fraction
    /// prefix, in header order.
    pub species: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            flame_key: "flame_key".into(),
            x_pos: "x_pos".into(),
            mixture_fraction: "Zmix".into(),
            mass_fraction_prefix: "Y_".into(),
            source_prefix: "souspec_".into(),
            source_energy: "souener".into(),
            species: None,
        }
    }
}

pub fn save_dataset(ds: &FlameletDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_csv_string(&CsvSchema::default())).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FlameletDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema)
}

/// Parses CSV text; see the module docs for the layout.
pub fn parse_dataset(text: &str, schema: &CsvSchema) -> Result<FlameletDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Validation {
            message: format!("unreadable header: {e}"),
            rows: Vec::new(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let find = |name: &str| {
        index.get(name).copied().ok_or_else(|| Error::Schema {
            column: name.to_owned(),
        })
    };

    let species: Vec<String> = match &schema.species {
        Some(list) => list.clone(),
        None => header
            .iter()
            .filter_map(|h| h.strip_prefix(schema.mass_fraction_prefix.as_str()))
            .map(str::to_owned)
            .collect(),
    };
    let key_col = find(&schema.flame_key)?;
    let x_col = find(&schema.x_pos)?;
    let z_col = find(&schema.mixture_fraction)?;
    let y_cols = species
        .iter()
        .map(|s| find(&format!("{}{s}", schema.mass_fraction_prefix)))
        .collect::<Result<Vec<_>>>()?;
    let src_cols = species
        .iter()
        .map(|s| find(&format!("{}{s}", schema.source_prefix)))
        .collect::<Result<Vec<_>>>()?;
    let se_col = find(&schema.source_energy)?;

    let s = species.len();
    let mut y = Vec::new();
    let mut src = Vec::new();
    let (mut se, mut z, mut key, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Validation {
            message: format!("malformed record: {e}"),
            rows: vec![row],
        })?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: header[col].clone(),
                value: raw.to_owned(),
            })
        };
        key.push(cell(key_col)?);
        x.push(cell(x_col)?);
        z.push(cell(z_col)?);
        for &c in &y_cols {
            y.push(cell(c)?);
        }
        for &c in &src_cols {
            src.push(cell(c)?);
        }
        se.push(cell(se_col)?);
    }
    let n = key.len();
    FlameletDataset::new(
        species,
        Array2::from_shape_vec((n, s), y).expect("row-major fill"),
        Array2::from_shape_vec((n, s), src).expect("row-major fill"),
        Array1::from(se),
        Array1::from(z),
        Array1::from(key),
        Array1::from(x),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    MinMax,
    #[default]
    Robust,
}

impl std::str::FromStr for ScalerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" => Ok(ScalerKind::MinMax),
            "robust" => Ok(ScalerKind::Robust),
            other => Err(Error::Argument(format!(
                "unknown scaler `{other}` (expected minmax or robust)"
            ))),
        }
    }
}

/// Per-column affine scaler: `scaled = (x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScaler {
    pub kind: ScalerKind,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl OutputScaler {
    /// Scaler that leaves values unchanged.
    pub fn identity(width: usize) -> Self {
        Self {
            kind: ScalerKind::MinMax,
            center: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.center.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(x.ncols())?;
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (c, s) = (self.center[j], self.scale[j]);
            col.mapv_inplace(|v| (v - c) / s);
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(x.ncols())?;
        let mut out = x.to_owned();
        self.inverse_in_place(&mut out);
        Ok(out)
    }

    pub(crate) fn inverse_in_place(&self, x: &mut Array2<f64>) {
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            let (c, s) = (self.center[j], self.scale[j]);
            col.mapv_inplace(|v| v * s + c);
        }
    }

    fn check_width(&self, w: usize) -> Result<()> {
        if w != self.width() {
            return Err(Error::shape("scaler", self.width(), w));
        }
        Ok(())
    }
}

/// Linear-interpolated quantile of already sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn fit_scaler(kind: ScalerKind, targets: ArrayView2<f64>) -> Result<OutputScaler> {
    if targets.nrows() == 0 || targets.ncols() == 0 {
        return Err(Error::Argument(
            "cannot fit a scaler on an empty matrix".into(),
        ));
    }
    let mut center = Vec::with_capacity(targets.ncols());
    let mut scale = Vec::with_capacity(targets.ncols());
    for col in targets.columns() {
        let (c, s) = match kind {
            ScalerKind::MinMax => {
                let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min, max - min)
            }
            ScalerKind::Robust => {
                let mut sorted = col.to_vec();
                sorted.sort_by(f64::total_cmp);
                let median = quantile_sorted(&sorted, 0.5);
                let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
                (median, iqr)
            }
        };
        center.push(c);
        scale.push(if s >= EPSILON_SCALE { s } else { EPSILON_SCALE });
    }
    Ok(OutputScaler {
        kind,
        center,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Shuffle individual rows.
    #[default]
    Rows,
    /// Shuffle whole flames, keeping each flame on one side.
    Flames,
}

/// Seeded shuffle-and-split. The first part receives `floor(n * fraction)`
/// rows (or whole flames in [`SplitMode::Flames`]); both parts must be
/// non-empty.
pub fn split_train_val(
    ds: &FlameletDataset,
    fraction: f64,
    seed: u64,
) -> Result<(FlameletDataset, FlameletDataset)> {
    split_train_val_with(ds, fraction, seed, SplitMode::Rows)
}

pub fn split_train_val_with(
    ds: &FlameletDataset,
    fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(FlameletDataset, FlameletDataset)> {
    let (first, second) = split_indices(ds, fraction, seed, mode)?;
    Ok((ds.select_rows(&first)?, ds.select_rows(&second)?))
}

pub fn split_indices(
    ds: &FlameletDataset,
    fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::Rows => {
            let n = ds.n_rows();
            let cut = (n as f64 * fraction).floor() as usize;
            if cut == 0 || cut == n {
                return Err(Error::Argument(format!(
                    "split of {n} rows at {fraction} leaves an empty part"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let second = idx.split_off(cut);
            Ok((idx, second))
        }
        SplitMode::Flames => {
            let mut keys = ds.flame_keys();
            let cut = (keys.len() as f64 * fraction).floor() as usize;
            if cut == 0 || cut == keys.len() {
                return Err(Error::Argument(format!(
                    "split of {} flames at {fraction} leaves an empty part",
                    keys.len()
                )));
            }
            keys.shuffle(&mut rng);
            let first_keys = &keys[..cut];
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, k) in ds.flame_key().iter().enumerate() {
                if first_keys.iter().any(|f| f.to_bits() == k.to_bits()) {
                    a.push(i);
                } else {
                    b.push(i);
                }
            }
            Ok((a, b))
        }
    }
}
