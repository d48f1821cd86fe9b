//! VAE training with the combined loss
//! `total = recon + λ₁·manuf + λ₂·kl`, Adam updates and a procedural dataset.

pub mod gradcheck;
pub mod loss;
pub mod shapes;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{
    decode_batch, decoder_backward, encode_batch, encoder_backward, grids_to_tensor, init_params, BranchTape,
    DecodeTrace, DecoderConfig, DecoderParams, EncoderParams, Mode, Tensor, BLOCKS,
};
use crate::error::{Error, Result};
use crate::grid::{PrintabilitySpec, VoxelGrid};
pub use loss::{bce, kl, manuf_soft, ManufTerms};
pub use shapes::{gen_shape, procedural_dataset, ShapeKind, ShapeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Voxels per side of the training shapes and decoder output.
    pub resolution: usize,
    pub dataset_size: usize,
    pub latent_dim: usize,
    pub seed_channels: usize,
    pub block_channels: [usize; BLOCKS],
    /// mm
    pub pitch: f64,
    pub spec: PrintabilitySpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.01,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            resolution: 16,
            dataset_size: 200,
            latent_dim: 32,
            seed_channels: 64,
            block_channels: [32, 16, 8, 8],
            pitch: 1.0,
            spec: PrintabilitySpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "resolution must be a positive multiple of 16, got {}",
                self.resolution
            )));
        }
        let s = self.resolution / 16;
        let cfg = DecoderConfig {
            latent_dim: self.latent_dim,
            seed_shape: [s, s, s, self.seed_channels],
            block_channels: self.block_channels,
            pitch: self.pitch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return bad("Adam coefficients must satisfy 0 ≤ β < 1 and ε > 0".into());
        }
        if self.epochs > 0 && self.dataset_size == 0 {
            return bad("training needs at least one shape".into());
        }
        self.spec.validate()?;
        self.decoder_config().map(|_| ())
    }
}

/// Loss components averaged over a batch or an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub manuf: f64,
    pub overhang: f64,
    pub thickness: f64,
    pub support: f64,
    pub aux: f64,
    pub kl: f64,
    pub total: f64,
}

/// `total = recon + λ₁·manuf + λ₂·kl`.
pub fn total_loss(recon: f64, manuf: &ManufTerms, kl: f64, cfg: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        recon,
        manuf: manuf.total,
        overhang: manuf.overhang,
        thickness: manuf.thickness,
        support: manuf.support,
        aux: manuf.aux,
        kl,
        total: recon + cfg.lambda1 * manuf.total + cfg.lambda2 * kl,
    }
}

/// Adam moment accumulators for a flat list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|t| t.zeros_like()).collect(),
            v: params.iter().map(|t| t.zeros_like()).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn step(params: Vec<&mut Tensor>, grads: &[&Tensor], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("parameter, gradient and optimizer lists differ in length".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        g.expect_shape(p.shape(), "gradient")?;
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Gradients shaped like the parameters they belong to.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
}

impl Gradients {
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut v = self.decoder.learnable();
        v.extend(self.encoder.learnable());
        v
    }
}

/// Learnable tensors of both networks, decoder first.
pub fn learnable_mut<'a>(dec: &'a mut DecoderParams, enc: &'a mut EncoderParams) -> Vec<&'a mut Tensor> {
    let mut v = dec.learnable_mut();
    v.extend(enc.learnable_mut());
    v
}

pub fn learnable_names(dec: &DecoderParams, enc: &EncoderParams) -> Vec<String> {
    let mut v = dec.learnable_names();
    v.extend(enc.learnable_names());
    v
}

pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grads: Option<Gradients>,
    pub trace: DecodeTrace,
}

/// Forward pass of the full VAE objective on one batch, optionally followed
/// by the reverse pass. `noise` is `[n, d]`.
pub fn batch_loss(
    dec: &DecoderParams,
    enc: &EncoderParams,
    targets: &[&VoxelGrid],
    noise: &Tensor,
    cfg: &TrainConfig,
    tape: &mut BranchTape,
    want_grads: bool,
) -> Result<BatchOutcome> {
    let n = targets.len();
    let d = dec.cfg.latent_dim;
    noise.expect_shape(&[n, d], "noise")?;
    let x = grids_to_tensor(targets)?;
    let et = encode_batch(enc, &x, tape)?;
    let mut z = et.mu.clone();
    for (i, zi) in z.data_mut().iter_mut().enumerate() {
        *zi += (0.5 * et.logvar.data()[i]).exp() * noise.data()[i];
    }
    let trace = decode_batch(dec, &z, Mode::Train, tape)?;
    let r = dec.cfg.output_resolution();
    let dims = [r, r, r];
    let rounds = loss::thickness_rounds(&cfg.spec, dec.cfg.pitch);
    let inv_n = 1.0 / n as f64;

    let mut recon = 0.0;
    let mut manuf = ManufTerms::default();
    let mut kl_sum = 0.0;
    let mut d_probs = trace.probs.zeros_like();
    let mut d_aux: Vec<Tensor> = trace.blocks.iter().map(|b| b.aux.zeros_like()).collect();
    let mut d_mu = et.mu.zeros_like();
    let mut d_lv = et.logvar.zeros_like();
    let per = r * r * r;
    for (i, target) in targets.iter().enumerate() {
        let p = trace.probs.batch_item(i);
        let (b, gb) = loss::bce_with_grad(p, trace.complement.batch_item(i), target.occupancy(), tape);
        let aux: Vec<(&[f64], [usize; 3])> = trace
            .blocks
            .iter()
            .map(|blk| {
                let s = blk.aux.shape()[1];
                (blk.aux.batch_item(i), [s, s, s])
            })
            .collect();
        let (m, gm, ga) = loss::manuf_with_grad(p, dims, &aux, rounds, tape);
        let (mu, lv) = (&et.mu.data()[i * d..(i + 1) * d], &et.logvar.data()[i * d..(i + 1) * d]);
        let k = kl(mu, lv);
        recon += b;
        manuf.overhang += m.overhang;
        manuf.thickness += m.thickness;
        manuf.support += m.support;
        manuf.aux += m.aux;
        manuf.total += m.total;
        kl_sum += k;
        if want_grads {
            let dp = &mut d_probs.data_mut()[i * per..(i + 1) * per];
            for j in 0..per {
                dp[j] = inv_n * (gb[j] + cfg.lambda1 * gm[j]);
            }
            for (blk, g) in d_aux.iter_mut().zip(ga) {
                let len = g.len();
                for (dst, v) in blk.data_mut()[i * len..(i + 1) * len].iter_mut().zip(g) {
                    *dst = inv_n * cfg.lambda1 * v;
                }
            }
            let (gmu, glv) = loss::kl_grad(mu, lv);
            for j in 0..d {
                d_mu.data_mut()[i * d + j] = inv_n * cfg.lambda2 * gmu[j];
                d_lv.data_mut()[i * d + j] = inv_n * cfg.lambda2 * glv[j];
            }
        }
    }
    let manuf = ManufTerms {
        overhang: manuf.overhang * inv_n,
        thickness: manuf.thickness * inv_n,
        support: manuf.support * inv_n,
        aux: manuf.aux * inv_n,
        total: manuf.total * inv_n,
    };
    let loss = total_loss(recon * inv_n, &manuf, kl_sum * inv_n, cfg);
    if !want_grads {
        return Ok(BatchOutcome { loss, grads: None, trace });
    }

    let d_aux: Vec<Option<Tensor>> = d_aux.into_iter().map(Some).collect();
    let dg = decoder_backward(dec, &trace, &d_probs, &d_aux);
    for j in 0..n * d {
        let dz = dg.z.data()[j];
        d_mu.data_mut()[j] += dz;
        d_lv.data_mut()[j] += dz * 0.5 * (0.5 * et.logvar.data()[j]).exp() * noise.data()[j];
    }
    let eg = encoder_backward(enc, &et, &d_mu, &d_lv);
    let grads = Gradients { decoder: dg.params, encoder: eg };
    for (name, g) in learnable_names(dec, enc).iter().zip(grads.learnable()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    Ok(BatchOutcome { loss, grads: Some(grads), trace })
}

/// Trained parameters with per-epoch and per-step loss records.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
    /// Sample-weighted epoch means; `total` recomputed from the means.
    pub history: Vec<LossBreakdown>,
    pub steps: Vec<LossBreakdown>,
}

/// Trains on `cfg.dataset_size` procedural shapes.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = if cfg.epochs == 0 {
        Vec::new()
    } else {
        procedural_dataset(cfg.dataset_size, cfg.resolution, cfg.pitch, &cfg.spec, cfg.seed)?
    };
    train_on(cfg, &data)
}

/// Trains on the given shapes. Deterministic given `cfg`.
pub fn train_on(cfg: &TrainConfig, data: &[VoxelGrid]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dcfg = cfg.decoder_config()?;
    let (mut dec, mut enc) = init_params(&dcfg, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { decoder: dec, encoder: enc, history: Vec::new(), steps: Vec::new() });
    }
    let r = dcfg.output_resolution();
    if let Some(g) = data.iter().find(|g| g.dims() != [r, r, r]) {
        return Err(Error::ShapeMismatch(format!("training shape {:?} vs decoder output {r}³", g.dims())));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut state = {
        let mut all = dec.learnable();
        all.extend(enc.learnable());
        OptimizerState::new(&all)
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let targets: Vec<&VoxelGrid> = chunk.iter().map(|&i| &data[i]).collect();
            let noise: Vec<f64> =
                (0..chunk.len() * dcfg.latent_dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
            let noise = Tensor::from_vec(&[chunk.len(), dcfg.latent_dim], noise)?;
            let out = match batch_loss(&dec, &enc, &targets, &noise, cfg, &mut BranchTape::free(), true) {
                Err(Error::NumericalOverflow(_)) | Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::NonFiniteLoss { epoch })
                }
                other => other?,
            };
            let l = out.loss;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = out.grads.expect("gradients requested");
            step(learnable_mut(&mut dec, &mut enc), &grads.learnable(), &mut state, cfg)?;
            dec.update_running_stats(&out.trace);
            let w = chunk.len() as f64;
            acc.recon += w * l.recon;
            acc.manuf += w * l.manuf;
            acc.overhang += w * l.overhang;
            acc.thickness += w * l.thickness;
            acc.support += w * l.support;
            acc.aux += w * l.aux;
            acc.kl += w * l.kl;
            steps.push(l);
        }
        let m = data.len() as f64;
        let terms = ManufTerms {
            overhang: acc.overhang / m,
            thickness: acc.thickness / m,
            support: acc.support / m,
            aux: acc.aux / m,
            total: acc.manuf / m,
        };
        history.push(total_loss(acc.recon / m, &terms, acc.kl / m, cfg));
    }
    Ok(TrainOutcome { decoder: dec, encoder: enc, history, steps })
}

pub const HISTORY_COLUMNS: [&str; 9] =
    ["epoch", "recon", "manuf", "overhang", "thickness", "support", "aux", "kl", "total"];

/// Per-epoch history as CSV, epochs numbered from 1.
pub fn write_history_csv(history: &[LossBreakdown], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_COLUMNS)?;
    for (i, l) in history.iter().enumerate() {
        let row = [l.recon, l.manuf, l.overhang, l.thickness, l.support, l.aux, l.kl, l.total];
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            dataset_size: 6,
            batch_size: 4,
            latent_dim: 4,
            seed_channels: 4,
            block_channels: [4, 4, 2, 2],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_algebra() {
        let cfg = TrainConfig::default();
        let m = ManufTerms { total: 0.2, ..ManufTerms::default() };
        assert!((total_loss(0.7, &m, 3.0, &cfg).total - 0.83).abs() < 1e-15);
        assert_eq!(total_loss(0.7, &ManufTerms::default(), 0.0, &cfg).total, 0.7);
        let ablate = TrainConfig { lambda1: 0.0, ..cfg };
        let big = ManufTerms { total: 9.0, ..ManufTerms::default() };
        assert_eq!(total_loss(0.7, &m, 3.0, &ablate).total, total_loss(0.7, &big, 3.0, &ablate).total);
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(&[&p]);
        step(vec![&mut p], &[&g], &mut st, &cfg).unwrap();
        for (w, gi) in p.data().iter().zip(g.data()) {
            let expect = 1.0 - cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((w - expect).abs() < 1e-15);
        }
        assert_eq!(p.data()[2], 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let cfg = TrainConfig { epochs: 0, ..small() };
        let out = train(&cfg).unwrap();
        let (d, e) = init_params(&cfg.decoder_config().unwrap(), cfg.seed).unwrap();
        assert_eq!(out.decoder, d);
        assert_eq!(out.encoder, e);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_consistent() {
        let cfg = small();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.steps.len(), 4);
        for l in a.history.iter().chain(&a.steps) {
            assert_eq!(l.total, l.recon + 0.5 * l.manuf + 0.01 * l.kl);
            assert!(l.recon > 0.0 && l.manuf >= 0.0 && l.kl >= 0.0);
        }
        let mut csv = Vec::new();
        write_history_csv(&a.history, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,recon,manuf,overhang,thickness,support,aux,kl,total\n1,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lambda1: -1.0, ..small() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..small() }.validate().is_err());
        assert!(TrainConfig { resolution: 12, ..small() }.validate().is_err());
        small().validate().unwrap();
    }
}
