use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::Estimator;
use crate::error::{Error, Result};
use crate::imagery;
use crate::raster;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub count: usize,
    pub seconds: f64,
    pub images_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub backend: String,
    pub parallelism: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!("backend {} (parallelism {})\n", self.backend, self.parallelism);
        let _ = writeln!(s, "{:>8} {:>12} {:>12}", "images", "seconds", "images/s");
        for r in &self.rows {
            let _ = writeln!(s, "{:>8} {:>12.3} {:>12.1}", r.count, r.seconds, r.images_per_sec);
        }
        s
    }
}

/// `distinct` PNG-encoded synthetic scenes.
pub fn synthetic_payloads(cfg: &SynthConfig, seed: u64, distinct: usize) -> Result<Vec<Vec<u8>>> {
    (0..distinct as u64)
        .map(|i| raster::encode_png(&synth::generate(cfg, seed, i)?.image))
        .collect()
}

/// Times decode plus estimation of `count` images for each count, cycling
/// through `payloads`.
pub fn run_bench(est: &Estimator, payloads: &[Vec<u8>], counts: &[usize], parallelism: usize) -> Result<BenchReport> {
    est.validate()?;
    if matches!(est, Estimator::Import) {
        return Err(Error::validation("the import backend has nothing to benchmark"));
    }
    if payloads.is_empty() {
        return Err(Error::validation("no benchmark images"));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::validation("benchmark counts must be positive"));
    }
    let pool = imagery::thread_pool(parallelism)?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let start = Instant::now();
        pool.install(|| {
            (0..count).into_par_iter().try_for_each(|i| {
                let img = raster::decode_any(&payloads[i % payloads.len()])?;
                est.estimate_image(&img).map(drop)
            })
        })?;
        let seconds = start.elapsed().as_secs_f64();
        rows.push(BenchRow { count, seconds, images_per_sec: count as f64 / seconds.max(f64::MIN_POSITIVE) });
    }
    Ok(BenchReport { backend: est.name().to_string(), parallelism, rows })
}
