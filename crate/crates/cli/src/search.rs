//! Seeded random search over training hyper-parameters.
//!
//! Grid file:
//!
//! ```toml
//! [base]            # fixed TrainConfig fields
//! epochs = 30
//!
//! [params.middle_width]
//! int = [16, 128]   # uniform integer, inclusive
//!
//! [params.lr]
//! float = [1e-4, 1e-2]
//! log = true        # log-uniform
//!
//! [params.activation]
//! choice = ["relu", "tanh", "selu"]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use chemtab::baselines::train_baseline;
use chemtab::chemtab::TrainConfig;
use chemtab::dataset::{format_f64, split_train_val, FlameletDataset};
use chemtab::exec::{self, Execution};
use chemtab::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq)]
enum Param {
    Int(i64, i64),
    Float { lo: f64, hi: f64, log: bool },
    Choice(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    base: Table,
    params: BTreeMap<String, Param>,
}

fn usage(m: String) -> Error {
    Error::Argument(format!("search grid: {m}"))
}

fn number(v: &Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn parse_param(name: &str, spec: &Value) -> Result<Param> {
    let t = spec
        .as_table()
        .ok_or_else(|| usage(format!("`{name}` must be a table")))?;
    let pair = |key: &str| -> Result<Option<[Value; 2]>> {
        match t.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) if a.len() == 2 => Ok(Some([a[0].clone(), a[1].clone()])),
            Some(_) => Err(usage(format!("`{name}.{key}` must be [low, high]"))),
        }
    };
    if let Some([lo, hi]) = pair("int")? {
        let (lo, hi) = (lo.as_integer(), hi.as_integer());
        return match (lo, hi) {
            (Some(lo), Some(hi)) if lo <= hi => Ok(Param::Int(lo, hi)),
            _ => Err(usage(format!(
                "`{name}.int` needs integers with low <= high"
            ))),
        };
    }
    if let Some([lo, hi]) = pair("float")? {
        let log = t.get("log").and_then(Value::as_bool).unwrap_or(false);
        return match (number(&lo), number(&hi)) {
            (Some(lo), Some(hi)) if lo <= hi && (!log || lo > 0.0) => {
                Ok(Param::Float { lo, hi, log })
            }
            _ => Err(usage(format!(
                "`{name}.float` needs low <= high (and low > 0 when log)"
            ))),
        };
    }
    match t.get("choice") {
        Some(Value::Array(a)) if !a.is_empty() => Ok(Param::Choice(a.clone())),
        _ => Err(usage(format!(
            "`{name}` needs one of int, float or a non-empty choice"
        ))),
    }
}

impl SearchGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("search grid: {e}")))?;
        let base = match doc.get("base") {
            Some(Value::Table(t)) => t.clone(),
            None => Table::new(),
            Some(_) => return Err(usage("`base` must be a table".into())),
        };
        let params = match doc.get("params") {
            Some(Value::Table(t)) => t
                .iter()
                .map(|(k, v)| Ok((k.clone(), parse_param(k, v)?)))
                .collect::<Result<BTreeMap<_, _>>>()?,
            _ => BTreeMap::new(),
        };
        if params.is_empty() {
            return Err(usage("no parameters to search".into()));
        }
        Ok(Self { base, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    /// Draws one configuration; parameters are sampled in name order.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<Value>, TrainConfig)> {
        let mut table = self.base.clone();
        let mut values = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let v = match p {
                Param::Int(lo, hi) => Value::Integer(rng.gen_range(*lo..=*hi)),
                Param::Float { lo, hi, log } => {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    Value::Float(if *log {
                        (lo.ln() + u * (hi.ln() - lo.ln())).exp()
                    } else {
                        lo + u * (hi - lo)
                    })
                }
                Param::Choice(options) => options[rng.gen_range(0..options.len())].clone(),
            };
            table.insert(name.clone(), v.clone());
            values.push(v);
        }
        let cfg = TrainConfig::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        Ok((values, cfg))
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub index: usize,
    pub values: Vec<Value>,
    pub config: TrainConfig,
    pub val_loss: f64,
    pub val_r2_se: f64,
    pub best_epoch: usize,
}

/// Samples every trial up front, then trains them under `exec`. A trial that
/// diverges is recorded with an infinite loss.
pub fn run(
    ds: &FlameletDataset,
    grid: &SearchGrid,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Trial>> {
    if trials == 0 {
        return Err(usage("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = (0..trials)
        .map(|_| grid.sample(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let results = exec::map(exec, &drawn, |(_, cfg)| -> Result<(f64, f64, usize)> {
        let (tr, va) = split_train_val(ds, cfg.train_fraction, cfg.seed)?;
        match train_baseline(cfg.kind, &tr, &va, cfg, &mut Vec::new()) {
            Ok(out) => {
                let best = out.best();
                Ok((best.val.total, best.val.physics_r2[0], out.best_epoch))
            }
            Err(Error::Training { .. }) => Ok((f64::INFINITY, f64::NAN, 0)),
            Err(e) => Err(e),
        }
    });
    drawn
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(index, ((values, config), r))| {
            let (val_loss, val_r2_se, best_epoch) = r?;
            Ok(Trial {
                index,
                values,
                config,
                val_loss,
                val_r2_se,
                best_epoch,
            })
        })
        .collect()
}

/// Lowest validation loss; the earliest trial wins ties.
pub fn best_index(trials: &[Trial]) -> usize {
    trials.iter().enumerate().fold(0, |best, (i, t)| {
        if t.val_loss < trials[best].val_loss {
            i
        } else {
            best
        }
    })
}

pub fn trials_csv(grid: &SearchGrid, trials: &[Trial]) -> String {
    let mut out = String::from("trial");
    for n in grid.names() {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",val_loss,val_r2_se,best_epoch\n");
    for t in trials {
        out.push_str(&t.index.to_string());
        for v in &t.values {
            out.push(',');
            match v {
                Value::String(s) => out.push_str(s),
                Value::Float(f) => out.push_str(&format_f64(*f)),
                other => out.push_str(&other.to_string()),
            }
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            format_f64(t.val_loss),
            format_f64(t.val_r2_se),
            t.best_epoch
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
[base]
p = 2
epochs = 2
middle_width = 16

[params.middle_width]
int = [16, 32]

[params.lr]
float = [1e-4, 1e-2]
log = true

[params.activation]
choice = ["relu", "tanh"]
"#;

    #[test]
    fn sampling_is_seeded() {
        let grid = SearchGrid::from_toml(GRID).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| grid.sample(&mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
        for values in draw(9) {
            let w = values[2].as_integer().unwrap();
            assert!((16..=32).contains(&w));
            let lr = values[1].as_float().unwrap();
            assert!((1e-4..=1e-2).contains(&lr));
        }
    }

    #[test]
    fn empty_grid_is_a_usage_error() {
        let e = SearchGrid::from_toml("[base]\nepochs = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(SearchGrid::from_toml("[params.lr]\nfloat = [1, 0]\n").is_err());
    }

    #[test]
    fn invalid_sampled_config_is_reported() {
        let grid = SearchGrid::from_toml("[params.middle_width]\nint = [1, 2]\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(grid.sample(&mut rng).is_err());
    }
}
