//! Lookup timing on seeded random inputs.

use std::time::Instant;

use chemtab::chemtab::ChemTabModel;
use chemtab::inference::{LookupEngine, LookupOutput};
use chemtab::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HEADER: &str =
    "batch,reps,ns_per_lookup,lookups_per_sec,p50_ns_per_batch,p90_ns_per_batch,p99_ns_per_batch";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub reps: usize,
    pub ns_per_lookup: f64,
    pub lookups_per_sec: f64,
    pub p50_ns: f64,
    pub p90_ns: f64,
    pub p99_ns: f64,
}

/// Times `reps` calls of a `batch`-row lookup after `warmup` untimed calls.
pub fn run(
    model: &ChemTabModel,
    batch: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchRow> {
    if batch == 0 || reps == 0 {
        return Err(Error::Argument("batch and reps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cpv = Array2::from_shape_simple_fn((batch, model.p()), || rng.gen_range(0.0..1.0));
    let z = Array1::from_shape_simple_fn(batch, || rng.gen_range(0.0..1.0));
    let mut engine = LookupEngine::new(model);
    let mut out = LookupOutput::zeros(model, batch);
    for _ in 0..warmup {
        engine.lookup_into(cpv.view(), z.view(), &mut out)?;
    }
    let mut times = Vec::with_capacity(reps);
    let start = Instant::now();
    for _ in 0..reps {
        let t = Instant::now();
        engine.lookup_into(cpv.view(), z.view(), &mut out)?;
        times.push(t.elapsed().as_nanos() as f64);
    }
    let total = start.elapsed().as_nanos() as f64;
    std::hint::black_box(&out);
    times.sort_by(f64::total_cmp);
    let pct = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
    let lookups = (batch * reps) as f64;
    Ok(BenchRow {
        batch,
        reps,
        ns_per_lookup: total / lookups,
        lookups_per_sec: lookups / (total * 1e-9),
        p50_ns: pct(0.5),
        p90_ns: pct(0.9),
        p99_ns: pct(0.99),
    })
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.0},{:.0},{:.0}\n",
            r.batch, r.reps, r.ns_per_lookup, r.lookups_per_sec, r.p50_ns, r.p90_ns, r.p99_ns
        ));
    }
    out
}
