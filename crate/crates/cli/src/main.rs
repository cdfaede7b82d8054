//! `chemtab` command line: generate, train, eval, bench, search, tabulate.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.

mod bench;
mod search;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chemtab::baselines::{axes_from_inputs, build_table_from_model, table_inputs, train_baseline};
use chemtab::chemtab::{write_history_csv, ModelKind, TrainConfig};
use chemtab::dataset::{load_dataset, split_train_val, CsvSchema, FlameletDataset};
use chemtab::evaluation::{
    find_flame_key, flame_profile_report, r2_csv, r2_report, residual_csv, residual_report,
    AuditThresholds, ConstraintAudit, GroupBy,
};
use chemtab::exec::Execution;
use chemtab::flamelet::{generate_to_file, GeneratorConfig, Mechanism};
use chemtab::inference::{load_model, save_model, save_table};
use chemtab::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chemtab",
    version,
    about = "Learned progress variables and source-term regressors for flamelet tabulation"
)]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a strain sweep of steady flamelets and write the dataset CSV.
    Generate {
        #[arg(long)]
        mech: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured maximum number of flames.
        #[arg(long)]
        max_flames: Option<usize>,
    },
    /// Train ChemTab or a baseline. The split and all initialization use the
    /// `seed` in the config file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// chemtab, pca, unconstrained, nonlinear or fixed.
        #[arg(long)]
        baseline: Option<String>,
        /// History CSV path (default: `<out>.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluation reports as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// r2, residuals, constraints or flame:<key> (key may be max, min or a number).
        #[arg(long, default_value = "r2")]
        report: String,
        /// Grouping for the residual report: flame_key or x_pos.
        #[arg(long, default_value = "flame_key")]
        group_by: String,
        /// Exit with code 2 when a constraint audit threshold is violated.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time batched lookups on random inputs (seeded).
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded random hyper-parameter search.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trials CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the best trial's config.
        #[arg(long)]
        best_config: Option<PathBuf>,
    },
    /// Tabulate a model's outputs on a uniform grid spanning the data.
    Tabulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Nodes per axis, comma separated (`p + 1` values).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run(cli.command, exec) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command, exec: Execution) -> Result<u8> {
    match command {
        Command::Generate {
            mech,
            config,
            out,
            max_flames,
        } => {
            let mech = Mechanism::load(&mech)?;
            let mut cfg = GeneratorConfig::load(&config)?;
            if let Some(n) = max_flames {
                cfg.max_flames = n;
            }
            let g = generate_to_file(&mech, &cfg, &out, exec)?;
            println!("flames: {}", g.flames.len());
            println!("rows: {}", g.dataset.n_rows());
            match g.extinction_index {
                Some(i) => println!("extinction index: {i}"),
                None => println!("extinction index: none"),
            }
            Ok(0)
        }
        Command::Train {
            data,
            config,
            out,
            baseline,
            history,
        } => train(&data, &config, &out, baseline.as_deref(), history),
        Command::Eval {
            model,
            data,
            report,
            group_by,
            strict,
            out,
        } => eval(&model, &data, &report, &group_by, strict, out.as_deref()),
        Command::Bench {
            model,
            batch,
            reps,
            warmup,
            seed,
            out,
        } => {
            let model = load_model(&model)?;
            let row = bench::run(&model, batch, reps, warmup, seed)?;
            emit(out.as_deref(), &bench::to_csv(&[row]))?;
            Ok(0)
        }
        Command::Search {
            data,
            grid,
            trials,
            seed,
            out,
            best_config,
        } => {
            let ds = load(&data)?;
            let grid = search::SearchGrid::load(&grid)?;
            let result = search::run(&ds, &grid, trials, seed, exec)?;
            emit(out.as_deref(), &search::trials_csv(&grid, &result))?;
            let best = &result[search::best_index(&result)];
            eprintln!("best trial: {} (val loss {})", best.index, best.val_loss);
            if let Some(path) = best_config {
                std::fs::write(&path, best.config.to_toml()).map_err(|e| io(&path, e))?;
            }
            Ok(0)
        }
        Command::Tabulate {
            model,
            data,
            sizes,
            out,
        } => {
            let model = load_model(&model)?;
            let ds = load(&data)?;
            let w = model
                .linear_encoder()
                .ok_or_else(|| Error::Argument("tabulation needs a linear encoder".into()))?;
            let inputs = table_inputs(w, &ds)?;
            let table =
                build_table_from_model(&model, axes_from_inputs(inputs.view(), &sizes)?, exec)?;
            save_table(&table, &out)?;
            println!("nodes: {}", table.n_nodes());
            println!("bytes: {}", table.bytes());
            Ok(0)
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load(path: &Path) -> Result<FlameletDataset> {
    load_dataset(path, &CsvSchema::default())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io(Path::new("<stdout>"), e)),
    }
}

fn train(
    data: &Path,
    config: &Path,
    out: &Path,
    baseline: Option<&str>,
    history: Option<PathBuf>,
) -> Result<u8> {
    let kind: ModelKind = match baseline {
        Some(name) => name.parse()?,
        None => ModelKind::ChemTab,
    };
    let cfg = TrainConfig::load(config)?;
    let ds = load(data)?;
    let (train_ds, val_ds) = split_train_val(&ds, cfg.train_fraction, cfg.seed)?;
    let history_path = history.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let mut records = Vec::new();
    let outcome = train_baseline(kind, &train_ds, &val_ds, &cfg, &mut records);
    // The history is written even when training fails part way.
    write_history_csv(&records, &history_path)?;
    let outcome = outcome?;
    save_model(&outcome.model, out)?;
    let best = outcome.best();
    println!("kind: {}", kind.name());
    println!("epochs run: {}", outcome.history.len());
    println!("best epoch: {}", outcome.best_epoch);
    println!("val loss: {}", best.val.total);
    println!("val r2 S_e: {}", best.val.physics_r2[0]);
    println!("val r2 physics mean: {}", best.val.mean_physics_r2());
    if !best.val.dynamic_r2.is_empty() {
        println!("val r2 dynamic mean: {}", best.val.mean_dynamic_r2());
    }
    let audit = &best.audit;
    println!("min W: {}", audit.min_weight);
    println!("max offdiag |WtW|: {}", audit.max_offdiag_gram);
    println!("max |diag(WtW) - 1|: {}", audit.max_diag_deviation);
    println!("max offdiag |corr|: {}", audit.max_offdiag_correlation);
    Ok(0)
}

fn eval(
    model: &Path,
    data: &Path,
    report: &str,
    group_by: &str,
    strict: bool,
    out: Option<&Path>,
) -> Result<u8> {
    let group_by: GroupBy = group_by.parse()?;
    enum Report<'a> {
        R2,
        Residuals,
        Constraints,
        Flame(&'a str),
    }
    let which = match report {
        "r2" => Report::R2,
        "residuals" => Report::Residuals,
        "constraints" => Report::Constraints,
        other => match other.strip_prefix("flame:") {
            Some(key) => Report::Flame(key),
            None => {
                return Err(Error::Argument(format!(
                    "unknown report `{other}` (valid: r2, residuals, constraints, flame:<key>)"
                )))
            }
        },
    };
    let model = load_model(model)?;
    let ds = load(data)?;
    let text = match which {
        Report::R2 => r2_csv(&r2_report(&model, &ds)?),
        Report::Residuals => residual_csv(&residual_report(&model, &ds, group_by)?),
        Report::Constraints => ConstraintAudit::compute(&model, &ds)?.to_csv(&model),
        Report::Flame(key) => {
            flame_profile_report(&model, &ds, find_flame_key(&ds, key)?)?.to_csv()
        }
    };
    emit(out, &text)?;
    if strict {
        let audit = ConstraintAudit::compute(&model, &ds)?;
        if !audit.passes(&AuditThresholds::default()) {
            eprintln!(
                "constraint audit failed: min W {}, offdiag |WtW| {}, |diag - 1| {}, offdiag |corr| {}",
                audit.min_weight, audit.max_offdiag_gram, audit.max_diag_deviation, audit.max_offdiag_correlation
            );
            return Ok(2);
        }
    }
    Ok(0)
}
