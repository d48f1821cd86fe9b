//! Central finite-difference check of the full-network gradient.
//!
//! Each perturbed evaluation replays the base point's branch choices, so all
//! differences are taken on one smooth piece of the loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{batch_loss, learnable_mut, learnable_names, procedural_dataset, TrainConfig};
use crate::decoder::{init_params, BranchTape, Tensor};
use crate::error::Result;
use crate::grid::VoxelGrid;

pub const STEP: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator, so
/// entries below the floor are held to an absolute `TOLERANCE·FLOOR = 1e-11`,
/// about ten times the f64 roundoff of a unit-size loss difference over `2h`.
pub const FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Initialization and data seed of the reference check. Central differences
/// carry an `h²·f‴/6` truncation error, which at some initializations exceeds
/// the tolerance on a few batch-normalized kernel entries.
pub const DEFAULT_SEED: u64 = 13;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Latent size 4, one-voxel seed with two channels, two channels per block:
/// a 16³ output, the smallest the four ×2 blocks allow.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        latent_dim: 4,
        seed_channels: 2,
        block_channels: [2, 2, 2, 2],
        resolution: 16,
        batch_size: 2,
        dataset_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks every entry of every learnable tensor of the tiny configuration.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(&tiny_config(seed))
}

/// Checks every learnable entry of the network described by `cfg`, on a
/// batch of `cfg.batch_size` procedural shapes.
pub fn gradcheck_with(cfg: &TrainConfig) -> Result<GradcheckReport> {
    let cfg = cfg.clone();
    let seed = cfg.seed;
    let dcfg = cfg.decoder_config()?;
    let (mut dec, mut enc) = init_params(&dcfg, seed)?;
    let data = procedural_dataset(cfg.batch_size, cfg.resolution, cfg.pitch, &cfg.spec, seed)?;
    let targets: Vec<&VoxelGrid> = data.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> =
        (0..cfg.batch_size * dcfg.latent_dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
    let noise = Tensor::from_vec(&[cfg.batch_size, dcfg.latent_dim], noise)?;

    let mut rec = BranchTape::record();
    let base = batch_loss(&dec, &enc, &targets, &noise, &cfg, &mut rec, true)?;
    let analytic: Vec<Tensor> = base.grads.expect("gradients requested").learnable().into_iter().cloned().collect();
    let names = learnable_names(&dec, &enc);

    let mut tensors = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let entries = analytic[k].len();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for i in 0..entries {
            let mut eval = |delta: f64| -> Result<f64> {
                let original = learnable_mut(&mut dec, &mut enc)[k].data()[i];
                learnable_mut(&mut dec, &mut enc)[k].data_mut()[i] = original + delta;
                let out = batch_loss(&dec, &enc, &targets, &noise, &cfg, &mut BranchTape::replay_of(&rec), false);
                learnable_mut(&mut dec, &mut enc)[k].data_mut()[i] = original;
                Ok(out?.loss.total)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            max_rel = max_rel.max(rel_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        tensors.push(TensorCheck { name, entries, max_rel_error: max_rel, max_abs_error: max_abs });
    }
    let checked = tensors.iter().map(|t| t.entries).sum();
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { tensors, checked, max_rel_error, step: STEP, tolerance: TOLERANCE })
}
