//! Minibatch training with lagged dynamic targets, projection of the encoder
//! onto `w >= 0`, per-epoch validation and early stopping.

use std::io::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{joint_loss, joint_loss_and_grad, Batch, LossReport};
use super::{ChemTabModel, Encoder, EncoderMode, TrainConfig};
use crate::dataset::{fit_scaler, format_f64, FlameletDataset};
use crate::error::{Error, Result};
use crate::evaluation::ConstraintAudit;
use crate::nn::{mix_seed, AdamConfig, AdamState, ForwardMode};

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_DROPOUT: u64 = 0x4452_4f50;

pub const HISTORY_HEADER: [&str; 14] = [
    "epoch",
    "train_loss",
    "val_loss",
    "train_r2_se",
    "val_r2_se",
    "val_r2_physics_mean",
    "val_r2_dynamic_mean",
    "orthogonality",
    "correlation",
    "min_w",
    "max_offdiag_gram",
    "max_diag_dev",
    "max_offdiag_corr",
    "improved",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub val: LossReport,
    /// Audit of the encoder after this epoch, correlations on validation data.
    pub audit: ConstraintAudit,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: ChemTabModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

/// `[S_e | Sdot_key]` in physical units.
pub fn physics_targets(model: &ChemTabModel, ds: &FlameletDataset) -> Array2<f64> {
    let se = ds.source_energy().view().insert_axis(Axis(1));
    let keys = ds.source_terms().select(Axis(1), model.key_indices());
    concatenate(Axis(1), &[se, keys.view()]).expect("row counts match")
}

fn check_species(model: &ChemTabModel, ds: &FlameletDataset, which: &str) -> Result<()> {
    if ds.species_names() != model.species_names.as_slice() {
        return Err(Error::Argument(format!(
            "{which} species differ from model species"
        )));
    }
    Ok(())
}

/// Scaled dynamic targets of `sdot` under the model's current encoder.
fn scaled_dynamic_targets(
    model: &ChemTabModel,
    sdot: ndarray::ArrayView2<f64>,
) -> Result<Option<Array2<f64>>> {
    match (&model.encoder, &model.dyn_scaler) {
        (Encoder::Linear(w), Some(scaler)) => {
            let raw = super::dynamic_targets(w, sdot)?;
            scaler.transform(raw.view()).map(Some)
        }
        _ => Ok(None),
    }
}

fn evaluate_split(
    model: &ChemTabModel,
    ds: &FlameletDataset,
    phys_scaled: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let dyn_scaled = scaled_dynamic_targets(model, ds.source_terms().view())?;
    let batch = Batch {
        y: ds.mass_fractions().view(),
        zmix: ds.mixture_fraction().view(),
        physics_targets: phys_scaled.view(),
        dynamic_targets: dyn_scaled.as_ref().map(|d| d.view()),
    };
    joint_loss(model, &batch, &cfg.loss_weights(), ForwardMode::Eval)
}

/// [`train_logged`] without access to a partial history on failure.
pub fn train(
    model: ChemTabModel,
    train_ds: &FlameletDataset,
    val_ds: &FlameletDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut history = Vec::new();
    train_logged(model, train_ds, val_ds, cfg, &mut history)
}

/// Trains `model` and returns the best-validation parameters. Every finished
/// epoch is appended to `history` as it completes, so the log survives a
/// divergence error.
pub fn train_logged(
    mut model: ChemTabModel,
    train_ds: &FlameletDataset,
    val_ds: &FlameletDataset,
    cfg: &TrainConfig,
    history: &mut Vec<EpochRecord>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_species(&model, train_ds, "training data")?;
    check_species(&model, val_ds, "validation data")?;
    if train_ds.n_rows() < 2 || val_ds.n_rows() < 2 {
        return Err(Error::Argument(
            "training and validation splits need at least 2 rows".into(),
        ));
    }
    let weights = cfg.loss_weights();

    let train_phys = physics_targets(&model, train_ds);
    model.physics_scaler = fit_scaler(cfg.scaler, train_phys.view())?;
    let train_phys = model.physics_scaler.transform(train_phys.view())?;
    let val_phys = model
        .physics_scaler
        .transform(physics_targets(&model, val_ds).view())?;
    model.metadata.data_fingerprint = train_ds.fingerprint();
    model.metadata.seed = cfg.seed;
    model.metadata.config_hash = cfg.hash();
    model.metadata.kind = cfg.kind;

    let with_encoder = cfg.encoder_mode != EncoderMode::Frozen;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.parameter_block_names(with_encoder),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_SHUFFLE));
    let dropout_seed = mix_seed(cfg.seed, STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..train_ds.n_rows()).collect();
    let mut step: u64 = 0;
    let mut best: Option<(f64, ChemTabModel, usize)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let first_record = history.len();

    for epoch in 0..cfg.epochs {
        if let Encoder::Linear(w) = &model.encoder {
            if model.dyn_reg.is_some() {
                let raw = super::dynamic_targets(w, train_ds.source_terms().view())?;
                model.dyn_scaler = Some(fit_scaler(cfg.scaler, raw.view())?);
            }
        }
        order.shuffle(&mut rng);
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let diverged = |e: Error| Error::Training {
                epoch,
                batch: bi,
                message: e.to_string(),
            };
            let y = train_ds.mass_fractions().select(Axis(0), rows);
            let z = train_ds.mixture_fraction().select(Axis(0), rows);
            let phys = train_phys.select(Axis(0), rows);
            let sdot = train_ds.source_terms().select(Axis(0), rows);
            // Targets from the encoder as it stands before this update.
            let dyn_targets = scaled_dynamic_targets(&model, sdot.view())?;
            let batch = Batch {
                y: y.view(),
                zmix: z.view(),
                physics_targets: phys.view(),
                dynamic_targets: dyn_targets.as_ref().map(|d| d.view()),
            };
            let mode = ForwardMode::Train {
                seed: mix_seed(dropout_seed, step),
            };
            let (_, grads) =
                joint_loss_and_grad(&model, &batch, &weights, mode).map_err(diverged)?;
            let mut params = model.parameter_blocks_mut(with_encoder);
            adam.step(&mut params, &grads.blocks(with_encoder))
                .map_err(diverged)?;
            if cfg.encoder_mode == EncoderMode::Projected {
                if let Encoder::Linear(w) = &mut model.encoder {
                    w.project_non_negative();
                }
            }
            step += 1;
        }

        let end_of_epoch = |e: Error| Error::Training {
            epoch,
            batch: usize::MAX,
            message: e.to_string(),
        };
        let train_report =
            evaluate_split(&model, train_ds, &train_phys, cfg).map_err(end_of_epoch)?;
        let val_report = evaluate_split(&model, val_ds, &val_phys, cfg).map_err(end_of_epoch)?;
        let audit = ConstraintAudit::compute(&model, val_ds)?;
        let improved = best
            .as_ref()
            .is_none_or(|(loss, _, _)| val_report.total < *loss);
        history.push(EpochRecord {
            epoch,
            train: train_report,
            val: val_report.clone(),
            audit,
            improved,
        });
        if improved {
            best = Some((val_report.total, model.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, model, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history: history[first_record..].to_vec(),
        best_epoch,
        stopped_early,
    })
}

/// History as CSV text with [`HISTORY_HEADER`].
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = HISTORY_HEADER.join(",");
    out.push('\n');
    for r in history {
        let fields = [
            r.train.total,
            r.val.total,
            r.train.physics_r2[0],
            r.val.physics_r2[0],
            r.val.mean_physics_r2(),
            r.val.mean_dynamic_r2(),
            r.val.orthogonality,
            r.val.correlation,
            r.audit.min_weight,
            r.audit.max_offdiag_gram,
            r.audit.max_diag_deviation,
            r.audit.max_offdiag_correlation,
        ];
        out.push_str(&r.epoch.to_string());
        for v in fields {
            out.push(',');
            out.push_str(&format_f64(v));
        }
        out.push(',');
        out.push_str(if r.improved { "1" } else { "0" });
        out.push('\n');
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(history).as_bytes())
        .map_err(|e| Error::io(path, e))
}
