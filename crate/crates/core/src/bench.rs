//! End-to-end latency of TSDF → grasp list.

use std::time::Instant;

use serde::Serialize;

use crate::detect::{detect, ExtractionConfig};
use crate::error::{Error, Result};
use crate::eval::summarize;
use crate::model::GraspNet;
use crate::tsdf::{TsdfVolume, WorkspaceTransform};

pub const WARMUP_RUNS: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    /// `N=… C=… K=… H=… L=…`.
    pub config: String,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Grasps returned by the last run.
    pub grasps: usize,
}

pub fn bench(net: &GraspNet, vol: &TsdfVolume, extraction: &ExtractionConfig, repeat: usize) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let xf = WorkspaceTransform::identity(vol.n, vol.side_length as f64);
    let run = || -> Result<usize> { Ok(detect(&net.predict(vol)?, extraction, &xf)?.len()) };
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeat);
    let mut grasps = 0;
    for _ in 0..repeat {
        let t = Instant::now();
        grasps = run()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let s = summarize(&samples)?;
    Ok(BenchReport {
        config: net.config.fingerprint(),
        warmup: WARMUP_RUNS,
        samples_ms: samples,
        mean_ms: s.mean,
        sd_ms: s.sd,
        min_ms: s.min,
        max_ms: s.max,
        grasps,
    })
}
