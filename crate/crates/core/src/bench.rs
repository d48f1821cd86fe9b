//! Three-pipeline manufacturability benchmark.
//!
//! Two models are trained from one seed, model A without the manufacturability
//! penalty and model B with it, then scored on the same prior latents:
//!
//! - `unconstrained`: model A, decode and threshold only;
//! - `post_processing`: model A's thresholded output passed through [`repair`];
//! - `decoder`: model B through [`constrained_decode`].

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::{evaluate, repair, ConstraintReport, RepairOptions};
use crate::decoder::{constrained_decode, decode, DecoderParams, LatentCode, Mode};
use crate::error::{Error, Result};
use crate::grid::{threshold, PrintabilitySpec, VoxelGrid};
use crate::training::{train, TrainConfig};

pub const WARMUP_DECODES: usize = 4;
pub const MIN_TIMED_DECODES: usize = 32;
/// λ₁ of the unpenalized model A.
pub const BASELINE_LAMBDA1: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Unconstrained,
    PostProcessing,
    Decoder,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Unconstrained, Pipeline::PostProcessing, Pipeline::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Unconstrained => "unconstrained",
            Pipeline::PostProcessing => "post_processing",
            Pipeline::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub pipeline: Pipeline,
    /// %
    pub manufacturability_rate: f64,
    /// Mean over non-empty parts of each part's minimum local thickness, mm.
    pub mean_min_wall_thickness: f64,
    /// Mean over parts of the percentage of exposed faces that violate.
    pub overhang_violation_pct: f64,
    /// Whole pipeline per sample, ms.
    pub mean_inference_ms: f64,
    /// Decode alone per sample, ms.
    pub mean_decode_ms: f64,
    /// Samples whose output was empty.
    pub empty_outputs: usize,
    /// Repairs that did not converge (post-processing only).
    pub repair_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub seed: u64,
    pub resolution: usize,
    pub epochs: usize,
    /// λ₁ of the constrained model B.
    pub lambda1: f64,
    pub lambda2: f64,
    pub pipelines: Vec<PipelineMetrics>,
}

impl BenchReport {
    pub fn pipeline(&self, p: Pipeline) -> &PipelineMetrics {
        self.pipelines.iter().find(|m| m.pipeline == p).expect("every pipeline is reported")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for m in &self.pipelines {
            w.write_record([
                m.pipeline.name().to_string(),
                m.manufacturability_rate.to_string(),
                m.mean_min_wall_thickness.to_string(),
                m.overhang_violation_pct.to_string(),
                m.mean_inference_ms.to_string(),
                m.mean_decode_ms.to_string(),
                m.empty_outputs.to_string(),
                m.repair_failures.to_string(),
                self.samples.to_string(),
                self.seed.to_string(),
                self.resolution.to_string(),
                self.lambda1.to_string(),
                self.lambda2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "pipeline",
    "manufacturability_rate",
    "mean_min_wall_thickness",
    "overhang_violation_pct",
    "mean_inference_ms",
    "mean_decode_ms",
    "empty_outputs",
    "repair_failures",
    "samples",
    "seed",
    "resolution",
    "lambda1",
    "lambda2",
];

/// Model A's thresholded decode.
pub fn generate_raw(dec: &DecoderParams, z: &LatentCode, spec: &PrintabilitySpec) -> Result<VoxelGrid> {
    Ok(threshold(&decode(dec, z, Mode::Infer)?, spec))
}

/// The pipeline's output grid for one latent, plus whether repair gave up.
/// Empty constrained decodes come back as an empty grid.
pub fn run_pipeline(
    p: Pipeline,
    dec: &DecoderParams,
    z: &LatentCode,
    spec: &PrintabilitySpec,
) -> Result<(VoxelGrid, bool)> {
    match p {
        Pipeline::Unconstrained => Ok((generate_raw(dec, z, spec)?, false)),
        Pipeline::PostProcessing => {
            let raw = generate_raw(dec, z, spec)?;
            match repair(&raw, spec, &RepairOptions::default()) {
                Ok(g) => Ok((g, false)),
                Err(Error::RepairDidNotConverge(_)) => Ok((raw, true)),
                Err(e) => Err(e),
            }
        }
        Pipeline::Decoder => match constrained_decode(dec, z, spec) {
            Ok((g, _)) => Ok((g, false)),
            Err(Error::EmptyGeneration) => {
                let r = dec.cfg.output_resolution();
                Ok((VoxelGrid::empty([r, r, r], dec.cfg.pitch)?, false))
            }
            Err(e) => Err(e),
        },
    }
}

/// Scores already-produced grids; timing fields are left at zero.
pub fn score(
    pipeline: Pipeline,
    grids: &[VoxelGrid],
    repair_failures: usize,
    spec: &PrintabilitySpec,
) -> PipelineMetrics {
    let reports: Vec<ConstraintReport> = grids.iter().map(|g| evaluate(g, spec)).collect();
    let n = reports.len().max(1) as f64;
    let ok = reports.iter().filter(|r| r.manufacturable).count();
    let solid: Vec<f64> = grids
        .iter()
        .zip(&reports)
        .filter(|(g, _)| !g.is_empty())
        .map(|(_, r)| r.thickness.min_local_thickness)
        .collect();
    PipelineMetrics {
        pipeline,
        manufacturability_rate: 100.0 * ok as f64 / n,
        mean_min_wall_thickness: if solid.is_empty() { 0.0 } else { solid.iter().sum::<f64>() / solid.len() as f64 },
        overhang_violation_pct: 100.0 * reports.iter().map(|r| r.overhang.violation_fraction).sum::<f64>() / n,
        mean_inference_ms: 0.0,
        mean_decode_ms: 0.0,
        empty_outputs: grids.iter().filter(|g| g.is_empty()).count(),
        repair_failures,
    }
}

fn mean_ms(latents: &[LatentCode], mut f: impl FnMut(&LatentCode) -> Result<()>) -> Result<f64> {
    for z in latents.iter().cycle().take(WARMUP_DECODES) {
        f(z)?;
    }
    let runs = latents.len().max(MIN_TIMED_DECODES);
    let start = Instant::now();
    for z in latents.iter().cycle().take(runs) {
        f(z)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / runs as f64)
}

/// Scores and times one pipeline over `latents`.
pub fn measure(
    p: Pipeline,
    dec: &DecoderParams,
    latents: &[LatentCode],
    spec: &PrintabilitySpec,
) -> Result<PipelineMetrics> {
    if latents.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one sample".into()));
    }
    let mut grids = Vec::with_capacity(latents.len());
    let mut failures = 0;
    for z in latents {
        let (g, failed) = run_pipeline(p, dec, z, spec)?;
        failures += failed as usize;
        grids.push(g);
    }
    let mut m = score(p, &grids, failures, spec);
    m.mean_decode_ms = mean_ms(latents, |z| decode(dec, z, Mode::Infer).map(|_| ()))?;
    m.mean_inference_ms = mean_ms(latents, |z| run_pipeline(p, dec, z, spec).map(|_| ()))?;
    Ok(m)
}

/// Benchmarks trained models: `a` unpenalized, `b` penalized with `cfg`'s λ₁.
pub fn bench_models(a: &DecoderParams, b: &DecoderParams, cfg: &TrainConfig, samples: usize) -> Result<BenchReport> {
    if samples == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one sample".into()));
    }
    let latents = LatentCode::sample_many(samples, cfg.latent_dim, cfg.seed);
    let pipelines = vec![
        measure(Pipeline::Unconstrained, a, &latents, &cfg.spec)?,
        measure(Pipeline::PostProcessing, a, &latents, &cfg.spec)?,
        measure(Pipeline::Decoder, b, &latents, &cfg.spec)?,
    ];
    Ok(BenchReport {
        samples,
        seed: cfg.seed,
        resolution: cfg.resolution,
        epochs: cfg.epochs,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        pipelines,
    })
}

/// The two models of the benchmark, trained from `cfg.seed`.
pub fn train_pair(cfg: &TrainConfig) -> Result<(DecoderParams, DecoderParams)> {
    let a = train(&TrainConfig { lambda1: BASELINE_LAMBDA1, ..cfg.clone() })?.decoder;
    let b = train(cfg)?.decoder;
    Ok((a, b))
}

/// Trains both models and benchmarks them on `samples` prior latents.
pub fn bench(cfg: &TrainConfig, samples: usize) -> Result<BenchReport> {
    let (a, b) = train_pair(cfg)?;
    bench_models(&a, &b, cfg, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_params;

    fn tiny() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            seed_channels: 4,
            block_channels: [4, 4, 2, 2],
            dataset_size: 5,
            batch_size: 5,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn report_echoes_hyperparameters_and_rates_are_bounded() {
        let cfg = tiny();
        let (a, _) = init_params(&cfg.decoder_config().unwrap(), 1).unwrap();
        let (b, _) = init_params(&cfg.decoder_config().unwrap(), 2).unwrap();
        let r = bench_models(&a, &b, &cfg, 3).unwrap();
        assert_eq!((r.lambda1, r.lambda2, r.samples), (0.5, 0.01, 3));
        for m in &r.pipelines {
            assert!((0.0..=100.0).contains(&m.manufacturability_rate));
            assert!((0.0..=100.0).contains(&m.overhang_violation_pct));
        }
        let post = r.pipeline(Pipeline::PostProcessing);
        if post.repair_failures == 0 {
            assert_eq!(post.manufacturability_rate, 100.0);
        }
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn score_of_known_grids() {
        let spec = PrintabilitySpec::default();
        let cube = VoxelGrid::from_fn([8, 8, 8], 1.0, |x, y, z| x < 6 && y < 6 && z < 6).unwrap();
        let empty = VoxelGrid::empty([8, 8, 8], 1.0).unwrap();
        let m = score(Pipeline::Unconstrained, &[cube.clone(), empty], 0, &spec);
        assert_eq!(m.manufacturability_rate, 50.0);
        assert_eq!(m.empty_outputs, 1);
        assert_eq!(m.mean_min_wall_thickness, evaluate(&cube, &spec).thickness.min_local_thickness);
        assert_eq!(m.overhang_violation_pct, 0.0);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = tiny();
        let (a, _) = init_params(&cfg.decoder_config().unwrap(), 1).unwrap();
        assert!(bench_models(&a, &a, &cfg, 0).is_err());
    }
}
