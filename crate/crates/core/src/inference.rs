//! Model persistence and the run-time lookup path.
//!
//! The container is a pretty-printed JSON document with a fixed field order:
//! `format`, `format_version`, the payload and a SHA-256 of the compact
//! payload. Floats use the shortest representation that parses back to the
//! same bits, so save, load, save is byte-identical.
//!
//! Lookups start after the encoder: a flow solver transports `C_pv`, not the
//! mass fractions.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::LookupTable;
use crate::chemtab::{hex_digest, ChemTabModel, Encoder, EncoderWeights, ModelMetadata};
use crate::dataset::OutputScaler;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{Activation, DenseLayer, MlpNetwork};

pub const FORMAT_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "chemtab-model";
const TABLE_FORMAT: &str = "chemtab-table";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container<T> {
    format: String,
    format_version: u32,
    payload: T,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    species_names: Vec<String>,
    key_species: Vec<String>,
    p: usize,
    k: usize,
    metadata: ModelMetadata,
    encoder: EncoderDoc,
    physics_regressor: NetworkDoc,
    dynamic_regressor: Option<NetworkDoc>,
    physics_scaler: OutputScaler,
    dynamic_scaler: Option<OutputScaler>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum EncoderDoc {
    /// `s` rows of `p` weights.
    Linear {
        weights: Vec<Vec<f64>>,
    },
    Mlp {
        network: NetworkDoc,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    dropout: f64,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    axes: Vec<Vec<f64>>,
    output_names: Vec<String>,
    values: Vec<f64>,
}

fn network_doc(net: &MlpNetwork) -> NetworkDoc {
    NetworkDoc {
        layers: net
            .layers()
            .iter()
            .map(|l| LayerDoc {
                inputs: l.input_width(),
                outputs: l.output_width(),
                activation: l.activation,
                dropout: l.dropout,
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    }
}

fn network_from_doc(doc: NetworkDoc) -> Result<MlpNetwork> {
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            let weights =
                Array2::from_shape_vec((l.outputs, l.inputs), l.weights).map_err(|_| {
                    Error::shape(
                        "layer weights",
                        format!("{}x{}", l.outputs, l.inputs),
                        "other",
                    )
                })?;
            Ok(DenseLayer {
                weights,
                bias: Array1::from(l.bias),
                activation: l.activation,
                dropout: l.dropout,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MlpNetwork::new(layers)
}

fn model_doc(model: &ChemTabModel) -> ModelDoc {
    let encoder = match &model.encoder {
        Encoder::Linear(w) => EncoderDoc::Linear {
            weights: w.matrix().rows().into_iter().map(|r| r.to_vec()).collect(),
        },
        Encoder::Nonlinear(net) => EncoderDoc::Mlp {
            network: network_doc(net),
        },
    };
    ModelDoc {
        species_names: model.species_names.clone(),
        key_species: model.key_species.clone(),
        p: model.p(),
        k: model.k(),
        metadata: model.metadata.clone(),
        encoder,
        physics_regressor: network_doc(&model.physics_reg),
        dynamic_regressor: model.dyn_reg.as_ref().map(network_doc),
        physics_scaler: model.physics_scaler.clone(),
        dynamic_scaler: model.dyn_scaler.clone(),
    }
}

fn model_from_doc(doc: ModelDoc) -> Result<ChemTabModel> {
    let s = doc.species_names.len();
    let encoder = match doc.encoder {
        EncoderDoc::Linear { weights } => {
            if weights.len() != s || weights.iter().any(|r| r.len() != doc.p) {
                return Err(Error::shape(
                    "encoder weights",
                    format!("{s}x{}", doc.p),
                    "ragged or other",
                ));
            }
            let w = Array2::from_shape_fn((s, doc.p), |(i, j)| weights[i][j]);
            Encoder::Linear(EncoderWeights::new(w, doc.species_names.clone())?)
        }
        EncoderDoc::Mlp { network } => Encoder::Nonlinear(network_from_doc(network)?),
    };
    if encoder.p() != doc.p {
        return Err(Error::shape("encoder width", doc.p, encoder.p()));
    }
    if doc.key_species.len() != doc.k {
        return Err(Error::shape("key species", doc.k, doc.key_species.len()));
    }
    if !scaler_ok(&doc.physics_scaler) || !doc.dynamic_scaler.as_ref().is_none_or(scaler_ok) {
        return Err(Error::Argument(
            "scaler has mismatched or non-finite entries".into(),
        ));
    }
    let dyn_reg = doc.dynamic_regressor.map(network_from_doc).transpose()?;
    ChemTabModel::from_parts(
        encoder,
        network_from_doc(doc.physics_regressor)?,
        dyn_reg,
        doc.physics_scaler,
        doc.dynamic_scaler,
        doc.species_names,
        doc.key_species,
        doc.metadata,
    )
}

fn scaler_ok(s: &OutputScaler) -> bool {
    s.center.len() == s.scale.len()
        && s.center.iter().all(|v| v.is_finite())
        && s.scale.iter().all(|v| v.is_finite() && *v != 0.0)
}

fn encode_container<T: Serialize>(format: &str, payload: T) -> String {
    let compact = serde_json::to_string(&payload).expect("payload serializes");
    let container = Container {
        format: format.to_string(),
        format_version: FORMAT_VERSION,
        checksum: hex_digest(compact.as_bytes()),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&container).expect("container serializes");
    text.push('\n');
    text
}

fn decode_container<T: Serialize + for<'de> Deserialize<'de>>(
    format: &str,
    text: &str,
) -> Result<T> {
    let corrupt = |m: String| Error::Integrity(m);
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| corrupt(format!("not a JSON document: {e}")))?;
    let found = value.get("format").and_then(|v| v.as_str());
    if found != Some(format) {
        return Err(corrupt(format!(
            "expected format `{format}`, found {found:?}"
        )));
    }
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let container: Container<T> =
        serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let compact = serde_json::to_string(&container.payload).expect("payload serializes");
    if hex_digest(compact.as_bytes()) != container.checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    Ok(container.payload)
}

/// Canonical text form of a model.
pub fn model_to_string(model: &ChemTabModel) -> String {
    encode_container(MODEL_FORMAT, model_doc(model))
}

/// Parses and validates a model. Any structural problem is an integrity
/// error; no partially built model escapes.
pub fn model_from_str(text: &str) -> Result<ChemTabModel> {
    let doc: ModelDoc = decode_container(MODEL_FORMAT, text)?;
    model_from_doc(doc).map_err(|e| match e {
        e @ (Error::Integrity(_) | Error::UnsupportedVersion { .. }) => e,
        other => Error::Integrity(other.to_string()),
    })
}

pub fn save_model(model: &ChemTabModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ChemTabModel> {
    let path = path.as_ref();
    model_from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn table_to_string(table: &LookupTable) -> String {
    encode_container(
        TABLE_FORMAT,
        TableDoc {
            axes: table.axes().to_vec(),
            output_names: table.output_names().to_vec(),
            values: table.values().to_vec(),
        },
    )
}

pub fn table_from_str(text: &str) -> Result<LookupTable> {
    let doc: TableDoc = decode_container(TABLE_FORMAT, text)?;
    LookupTable::new(doc.axes, doc.output_names, doc.values)
        .map_err(|e| Error::Integrity(e.to_string()))
}

pub fn save_table(table: &LookupTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table_to_string(table)).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: impl AsRef<Path>) -> Result<LookupTable> {
    let path = path.as_ref();
    table_from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Bytes of numeric state a loaded model holds.
pub fn memory_footprint(model: &ChemTabModel) -> usize {
    model.parameter_bytes()
}

/// Progress variables from mass fractions with the stored encoder.
pub fn encode_only(model: &ChemTabModel, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    model.encoder.encode(y)
}

/// Outputs of one lookup batch in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupOutput {
    pub source_energy: Array1<f64>,
    /// `m x k`.
    pub key_source_terms: Array2<f64>,
    /// `m x p` when the model has a dynamic regressor.
    pub dynamic: Option<Array2<f64>>,
}

impl LookupOutput {
    pub fn zeros(model: &ChemTabModel, m: usize) -> Self {
        Self {
            source_energy: Array1::zeros(m),
            key_source_terms: Array2::zeros((m, model.k())),
            dynamic: model
                .dyn_reg
                .as_ref()
                .map(|_| Array2::zeros((m, model.p()))),
        }
    }

    pub fn rows(&self) -> usize {
        self.source_energy.len()
    }
}

/// A layer inside the engine's packed parameter buffer: `n_out * n_in`
/// weights followed by `n_out` biases, starting at `offset`.
#[derive(Debug, Clone, Copy)]
struct PackedLayer {
    offset: usize,
    n_in: usize,
    n_out: usize,
    activation: Activation,
}

impl PackedLayer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.n_in * self.n_out]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.n_in * self.n_out;
        &params[start..start + self.n_out]
    }
}

fn pack(net: &MlpNetwork, params: &mut Vec<f64>) -> Vec<PackedLayer> {
    net.layers()
        .iter()
        .map(|l| {
            let layer = PackedLayer {
                offset: params.len(),
                n_in: l.input_width(),
                n_out: l.output_width(),
                activation: l.activation,
            };
            params.extend(l.weights.iter());
            params.extend(l.bias.iter());
            layer
        })
        .collect()
}

/// Reusable buffers for repeated lookups. After the first batch of a given
/// size, further batches of that size allocate nothing.
///
/// Both regressors are copied into one contiguous buffer in evaluation
/// order. A single-row lookup on a large network is bound by memory
/// bandwidth, and one sequential stream keeps the hardware prefetcher busy
/// across layer boundaries.
#[derive(Debug)]
pub struct LookupEngine<'m> {
    model: &'m ChemTabModel,
    params: Vec<f64>,
    physics_net: Vec<PackedLayer>,
    dynamic_net: Vec<PackedLayer>,
    rows: usize,
    input: Array2<f64>,
    physics: Vec<Array2<f64>>,
    dynamic: Vec<Array2<f64>>,
}

impl<'m> LookupEngine<'m> {
    pub fn new(model: &'m ChemTabModel) -> Self {
        let mut params = Vec::new();
        let physics_net = pack(&model.physics_reg, &mut params);
        let dynamic_net = model
            .dyn_reg
            .as_ref()
            .map(|n| pack(n, &mut params))
            .unwrap_or_default();
        Self {
            model,
            params,
            physics_net,
            dynamic_net,
            rows: usize::MAX,
            input: Array2::zeros((0, 0)),
            physics: Vec::new(),
            dynamic: Vec::new(),
        }
    }

    fn resize(&mut self, m: usize) {
        if self.rows == m {
            return;
        }
        let buffers = |net: &MlpNetwork| {
            net.layers()
                .iter()
                .map(|l| Array2::zeros((m, l.output_width())))
                .collect()
        };
        self.input = Array2::zeros((m, self.model.p() + 1));
        self.physics = buffers(&self.model.physics_reg);
        self.dynamic = self.model.dyn_reg.as_ref().map(buffers).unwrap_or_default();
        self.rows = m;
    }

    /// Evaluates the regressors on `(cpv, zmix)` and writes into `out`, which
    /// must have `cpv.nrows()` rows.
    pub fn lookup_into(
        &mut self,
        cpv: ArrayView2<f64>,
        zmix: ArrayView1<f64>,
        out: &mut LookupOutput,
    ) -> Result<()> {
        let (m, p) = (cpv.nrows(), self.model.p());
        if cpv.ncols() != p {
            return Err(Error::shape("progress variables", p, cpv.ncols()));
        }
        if zmix.len() != m {
            return Err(Error::shape("mixture fraction rows", m, zmix.len()));
        }
        if out.rows() != m || out.key_source_terms.ncols() != self.model.k() {
            return Err(Error::shape("lookup output rows", m, out.rows()));
        }
        if out.dynamic.is_some() != self.model.dyn_reg.is_some() {
            return Err(Error::Argument(
                "lookup output does not match the model's dynamic head".into(),
            ));
        }
        self.resize(m);
        self.input.slice_mut(s![.., ..p]).assign(&cpv);
        self.input.column_mut(p).assign(&zmix);

        forward_into(
            &self.physics_net,
            &self.params,
            &self.input,
            &mut self.physics,
        );
        let phys = self.physics.last().expect("non-empty");
        let sc = &self.model.physics_scaler;
        ndarray::Zip::from(&mut out.source_energy)
            .and(phys.column(0))
            .for_each(|o, &v| *o = v * sc.scale[0] + sc.center[0]);
        for j in 0..self.model.k() {
            let (c, s) = (sc.center[j + 1], sc.scale[j + 1]);
            ndarray::Zip::from(out.key_source_terms.column_mut(j))
                .and(phys.column(j + 1))
                .for_each(|o, &v| *o = v * s + c);
        }
        if let (Some(scaler), Some(dst)) = (&self.model.dyn_scaler, &mut out.dynamic) {
            forward_into(
                &self.dynamic_net,
                &self.params,
                &self.input,
                &mut self.dynamic,
            );
            let d = self.dynamic.last().expect("non-empty");
            for j in 0..p {
                let (c, s) = (scaler.center[j], scaler.scale[j]);
                ndarray::Zip::from(dst.column_mut(j))
                    .and(d.column(j))
                    .for_each(|o, &v| *o = v * s + c);
            }
        }
        Ok(())
    }

    pub fn lookup(&mut self, cpv: ArrayView2<f64>, zmix: ArrayView1<f64>) -> Result<LookupOutput> {
        let mut out = LookupOutput::zeros(self.model, cpv.nrows());
        self.lookup_into(cpv, zmix, &mut out)?;
        Ok(out)
    }
}

/// Eval-mode forward into preallocated per-layer buffers.
fn forward_into(
    net: &[PackedLayer],
    params: &[f64],
    input: &Array2<f64>,
    buffers: &mut [Array2<f64>],
) {
    for (l, layer) in net.iter().enumerate() {
        let (done, rest) = buffers.split_at_mut(l);
        let x = if l == 0 { input } else { &done[l - 1] };
        let x = x.as_slice().expect("standard layout");
        let out = rest[0].as_slice_mut().expect("standard layout");
        dense_layer(
            x,
            layer.weights(params),
            layer.bias(params),
            layer.activation,
            out,
        );
    }
}

// Rows processed together so each weight row is loaded once per block.
const ROW_BLOCK: usize = 4;
// Independent partial sums per dot product. Lane-wise accumulation lets the
// compiler vectorize without reassociating, so every code path rounds alike.
const LANES: usize = 8;

/// `out = act(x W^T + b)`. Each output element is computed the same way
/// whatever the batch size, so chunked and whole-batch lookups agree bit for
/// bit.
/// `w` is row-major `n_out x n_in`; `x` and `out` hold whole rows.
fn dense_layer(x: &[f64], w: &[f64], bias: &[f64], act: Activation, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX.
        dense_layer_with(
            x,
            w,
            bias,
            act,
            out,
            |w, xs| unsafe { avx::dot_block(w, xs) },
            |w, xs| unsafe { avx::dot_block(w, xs) },
        );
        return;
    }
    dense_layer_with(x, w, bias, act, out, dot_block, dot_block)
}

#[inline(always)]
fn dense_layer_with(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    act: Activation,
    out: &mut [f64],
    dot4: impl Fn(&[f64], &[&[f64]; ROW_BLOCK]) -> [f64; ROW_BLOCK],
    dot1: impl Fn(&[f64], &[&[f64]; 1]) -> [f64; 1],
) {
    let n_out = bias.len();
    let n_in = w.len() / n_out;
    let rows = x.len() / n_in;
    let blocked = rows - rows % ROW_BLOCK;
    for r in (0..blocked).step_by(ROW_BLOCK) {
        let xs: [&[f64]; ROW_BLOCK] =
            std::array::from_fn(|i| &x[(r + i) * n_in..(r + i + 1) * n_in]);
        for j in 0..n_out {
            let d = dot4(&w[j * n_in..(j + 1) * n_in], &xs);
            for (i, v) in d.into_iter().enumerate() {
                out[(r + i) * n_out + j] = act.apply(v + bias[j]);
            }
        }
    }
    for r in blocked..rows {
        let xs = [&x[r * n_in..(r + 1) * n_in]];
        for j in 0..n_out {
            let [v] = dot1(&w[j * n_in..(j + 1) * n_in], &xs);
            out[r * n_out + j] = act.apply(v + bias[j]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::LANES;

    /// Same lane layout and rounding as the portable `dot_block`.
    #[target_feature(enable = "avx")]
    pub(super) unsafe fn dot_block<const B: usize>(w: &[f64], xs: &[&[f64]; B]) -> [f64; B] {
        let n = w.len();
        let full = n - n % LANES;
        let wp = w.as_ptr();
        let xp: [*const f64; B] = std::array::from_fn(|b| {
            assert_eq!(xs[b].len(), n);
            xs[b].as_ptr()
        });
        let mut lo = [_mm256_setzero_pd(); B];
        let mut hi = [_mm256_setzero_pd(); B];
        let mut c = 0;
        while c < full {
            let w0 = _mm256_loadu_pd(wp.add(c));
            let w1 = _mm256_loadu_pd(wp.add(c + 4));
            for b in 0..B {
                let x0 = _mm256_loadu_pd(xp[b].add(c));
                let x1 = _mm256_loadu_pd(xp[b].add(c + 4));
                lo[b] = _mm256_add_pd(lo[b], _mm256_mul_pd(w0, x0));
                hi[b] = _mm256_add_pd(hi[b], _mm256_mul_pd(w1, x1));
            }
            c += LANES;
        }
        std::array::from_fn(|b| {
            let mut a = [0.0f64; LANES];
            _mm256_storeu_pd(a.as_mut_ptr(), lo[b]);
            _mm256_storeu_pd(a.as_mut_ptr().add(4), hi[b]);
            let mut tail = 0.0;
            for i in full..n {
                tail += w[i] * xs[b][i];
            }
            (((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]))) + tail
        })
    }
}

#[inline(always)]
fn dot_block<const B: usize>(w: &[f64], xs: &[&[f64]; B]) -> [f64; B] {
    let n = w.len();
    let full = n - n % LANES;
    let mut acc = [[0.0f64; LANES]; B];
    let xs_full: [&[f64]; B] = std::array::from_fn(|b| &xs[b][..full]);
    for (c, wc) in w[..full].chunks_exact(LANES).enumerate() {
        let o = c * LANES;
        for b in 0..B {
            let xc = &xs_full[b][o..o + LANES];
            for k in 0..LANES {
                acc[b][k] += wc[k] * xc[k];
            }
        }
    }
    std::array::from_fn(|b| {
        let a = &acc[b];
        let mut tail = 0.0;
        for i in full..n {
            tail += w[i] * xs[b][i];
        }
        (((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]))) + tail
    })
}

/// One-shot batched lookup.
pub fn lookup_batch(
    model: &ChemTabModel,
    cpv: ArrayView2<f64>,
    zmix: ArrayView1<f64>,
) -> Result<LookupOutput> {
    LookupEngine::new(model).lookup(cpv, zmix)
}

/// Batched lookup split into row chunks evaluated under `exec`. Rows are
/// independent, so the result equals [`lookup_batch`].
pub fn lookup_batch_chunked(
    model: &ChemTabModel,
    cpv: ArrayView2<f64>,
    zmix: ArrayView1<f64>,
    chunk_rows: usize,
    exec: Execution,
) -> Result<LookupOutput> {
    if chunk_rows == 0 {
        return Err(Error::Argument("chunk_rows must be positive".into()));
    }
    if zmix.len() != cpv.nrows() {
        return Err(Error::shape(
            "mixture fraction rows",
            cpv.nrows(),
            zmix.len(),
        ));
    }
    let starts: Vec<usize> = (0..cpv.nrows()).step_by(chunk_rows).collect();
    let parts = exec::map(exec, &starts, |&start| {
        let end = (start + chunk_rows).min(cpv.nrows());
        lookup_batch(
            model,
            cpv.slice(s![start..end, ..]),
            zmix.slice(s![start..end]),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return lookup_batch(model, cpv, zmix);
    }
    let cat1 = |f: &dyn Fn(&LookupOutput) -> ArrayView1<f64>| {
        ndarray::concatenate(Axis(0), &parts.iter().map(f).collect::<Vec<_>>()).expect("same width")
    };
    let cat2 = |f: &dyn Fn(&LookupOutput) -> ArrayView2<f64>| {
        ndarray::concatenate(Axis(0), &parts.iter().map(f).collect::<Vec<_>>()).expect("same width")
    };
    Ok(LookupOutput {
        source_energy: cat1(&|o| o.source_energy.view()),
        key_source_terms: cat2(&|o| o.key_source_terms.view()),
        dynamic: model
            .dyn_reg
            .as_ref()
            .map(|_| cat2(&|o| o.dynamic.as_ref().expect("model has a dynamic head").view())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemtab::tests::synthetic_dataset;
    use crate::chemtab::{build_model, predict, resolve_key_species, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ChemTabModel {
        let cfg = TrainConfig {
            p: 2,
            middle_width: 16,
            seed,
            ..TrainConfig::default()
        };
        let ds = synthetic_dataset(10, 1);
        let keys = resolve_key_species(&cfg, &ds).unwrap();
        let mut m = build_model(&cfg, ds.species_names(), &keys).unwrap();
        m.physics_scaler.center = vec![0.5, -1.0, 2.0, 3.0];
        m.physics_scaler.scale = vec![2.0, 0.25, 1.5, 1e-3];
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model(3);
        let a = model_to_string(&m);
        let back = model_from_str(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_string(&back), a);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let text = model_to_string(&model(1));
        for cut in [10, text.len() / 2, text.len() - 3] {
            assert!(matches!(
                model_from_str(&text[..cut]),
                Err(Error::Integrity(_))
            ));
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = model_to_string(&model(1)).replacen(
            "\"format_version\": 1",
            "\"format_version\": 7",
            1,
        );
        assert!(matches!(
            model_from_str(&text),
            Err(Error::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn tampered_numbers_fail_the_checksum() {
        let m = model(1);
        let text = model_to_string(&m);
        let needle = format!("{}", m.physics_scaler.scale[3]);
        let text = text.replacen(&needle, "0.002", 1);
        assert!(matches!(model_from_str(&text), Err(Error::Integrity(_))));
    }

    #[test]
    fn lookup_matches_predict() {
        let m = model(4);
        let ds = synthetic_dataset(30, 2);
        let full = predict(&m, ds.mass_fractions().view(), ds.mixture_fraction().view()).unwrap();
        let cpv = encode_only(&m, ds.mass_fractions().view()).unwrap();
        let out = lookup_batch(&m, cpv.view(), ds.mixture_fraction().view()).unwrap();
        let close = |a: &Array2<f64>, b: &Array2<f64>| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
        };
        let col = |a: &Array1<f64>| a.clone().insert_axis(Axis(1));
        assert!(close(&col(&out.source_energy), &col(&full.source_energy)));
        assert!(close(&out.key_source_terms, &full.key_source_terms));
        assert!(close(
            out.dynamic.as_ref().unwrap(),
            full.dynamic.as_ref().unwrap()
        ));
        for i in 0..3 {
            let one = lookup_batch(
                &m,
                cpv.slice(s![i..i + 1, ..]),
                ds.mixture_fraction().slice(s![i..i + 1]),
            )
            .unwrap();
            assert!(
                (one.source_energy[0] - full.source_energy[i]).abs()
                    <= 1e-12 * full.source_energy[i].abs().max(1.0)
            );
        }
    }

    #[test]
    fn generic_kernel_matches_dispatched_kernel() {
        let m = model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = &m.physics_reg.layers()[4];
        let x = Array2::from_shape_simple_fn((9, layer.input_width()), || rng.gen_range(-1.0..1.0));
        let mut a = Array2::zeros((9, layer.output_width()));
        let mut b = a.clone();
        let (xs, w, bias) = (
            x.as_slice().unwrap(),
            layer.weights.as_slice().unwrap(),
            layer.bias.as_slice().unwrap(),
        );
        dense_layer(xs, w, bias, layer.activation, a.as_slice_mut().unwrap());
        dense_layer_with(
            xs,
            w,
            bias,
            layer.activation,
            b.as_slice_mut().unwrap(),
            dot_block,
            dot_block,
        );
        assert_eq!(a, b);
        let reference =
            (x.dot(&layer.weights.t()) + &layer.bias).mapv(|v| layer.activation.apply(v));
        assert!(a
            .iter()
            .zip(&reference)
            .all(|(p, q)| (p - q).abs() <= 1e-13));
    }

    #[test]
    fn chunked_lookup_equals_whole_batch() {
        let m = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cpv = Array2::from_shape_simple_fn((101, 2), || rng.gen_range(0.0..1.0));
        let z = Array1::from_shape_simple_fn(101, || rng.gen_range(0.0..1.0));
        let whole = lookup_batch(&m, cpv.view(), z.view()).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            assert_eq!(
                lookup_batch_chunked(&m, cpv.view(), z.view(), 16, exec).unwrap(),
                whole
            );
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let m = model(6);
        let cpv = Array2::from_shape_fn((7, 2), |(_, j)| 0.3 + j as f64 * 0.1);
        let z = Array1::from_elem(7, 0.4);
        let out = lookup_batch(&m, cpv.view(), z.view()).unwrap();
        assert!(out.source_energy.iter().all(|v| *v == out.source_energy[0]));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let m = model(1);
        let cpv = Array2::zeros((3, 3));
        let z = Array1::zeros(3);
        assert!(matches!(
            lookup_batch(&m, cpv.view(), z.view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn encode_only_examples() {
        let m = model(2);
        let zeros = Array2::zeros((2, 4));
        assert!(encode_only(&m, zeros.view())
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let ds = synthetic_dataset(5, 1);
        let w = m.linear_encoder().unwrap();
        assert_eq!(
            encode_only(&m, ds.mass_fractions().view()).unwrap(),
            crate::chemtab::encode(w, ds.mass_fractions().view()).unwrap()
        );
    }

    #[test]
    fn table_round_trip() {
        let t = LookupTable::new(
            vec![vec![0.0, 0.1, 1.0]],
            vec!["f".into(), "g".into()],
            vec![1.0, 2.0, 0.1, 0.2, 1e-300, 3.0],
        )
        .unwrap();
        let text = table_to_string(&t);
        let back = table_from_str(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(table_to_string(&back), text);
        assert!(matches!(model_from_str(&text), Err(Error::Integrity(_))));
    }
}
