//! Latent-to-occupancy decoder and the matching encoder.
//!
//! The decoder projects a latent code onto a small seed volume, then runs four
//! upsampling blocks (transposed convolution, batch normalization, ReLU), each
//! with a one-channel sigmoid side head. A final 1×1×1 projection and sigmoid
//! give per-voxel occupancy probabilities. The encoder mirrors it with strided
//! convolutions and ends in mean and log-variance heads.

pub mod layers;
pub mod tape;
pub mod tensor;
pub mod vfm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{evaluate, keep_largest_component, voids, ConstraintReport};
use crate::error::{Error, Result};
use crate::grid::{threshold, PrintabilitySpec, ProbGrid, VoxelGrid};
pub use tape::BranchTape;
pub use tensor::Tensor;

pub const BLOCKS: usize = 4;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// `[h, w, d, channels]` of the seed volume; the spatial extents must match.
    pub seed_shape: [usize; 4],
    /// Output channels of the four upsampling blocks.
    pub block_channels: [usize; BLOCKS],
    /// mm
    pub pitch: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { latent_dim: 32, seed_shape: [2, 2, 2, 64], block_channels: [32, 16, 8, 8], pitch: 1.0 }
    }
}

impl DecoderConfig {
    /// Default widths with the seed sized for `resolution` voxels per side.
    pub fn for_resolution(resolution: usize, latent_dim: usize) -> Result<Self> {
        if resolution == 0 || !resolution.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "resolution must be a positive multiple of 16, got {resolution}"
            )));
        }
        let side = resolution / 16;
        let cfg = Self { latent_dim, seed_shape: [side, side, side, 64], ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed_side(&self) -> usize {
        self.seed_shape[0]
    }

    pub fn seed_channels(&self) -> usize {
        self.seed_shape[3]
    }

    pub fn output_resolution(&self) -> usize {
        self.seed_side() << BLOCKS
    }

    /// Spatial side after block `i` (0-based).
    pub fn block_side(&self, i: usize) -> usize {
        self.seed_side() << (i + 1)
    }

    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.seed_channels()
        } else {
            self.block_channels[i - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, d, c] = self.seed_shape;
        if h != w || w != d || h == 0 {
            return Err(Error::InvalidConfig(format!("seed volume must be a non-empty cube, got {h}×{w}×{d}")));
        }
        if self.latent_dim == 0 || c == 0 || self.block_channels.contains(&0) {
            return Err(Error::InvalidConfig("latent size and channel counts must be at least 1".into()));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::InvalidConfig(format!("pitch must be positive, got {}", self.pitch)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the normalization layers.
    Train,
    /// Running statistics; a pure function of parameters and input.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("latent code must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    /// A draw from the standard normal prior.
    pub fn sample(dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self((0..dim).map(|_| -> f64 { StandardNormal.sample(rng) }).collect())
    }

    /// `count` prior draws from one seeded stream; draw `i` is the same for
    /// every caller using the same seed.
    pub fn sample_many(count: usize, dim: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::sample(dim, &mut rng)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `[c_in, 4, 4, 4, c_out]`
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// `[c_out, 1]`
    pub aux_weight: Tensor,
    pub aux_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    /// `[d, s³·c0]`
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub blocks: Vec<BlockParams>,
    /// `[c_last, 1]`
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[4, 4, 4, c_in, c_out]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: DecoderConfig,
    pub convs: Vec<ConvParams>,
    /// `[s³·c0, d]`
    pub mu_weight: Tensor,
    pub mu_bias: Tensor,
    pub logvar_weight: Tensor,
    pub logvar_bias: Tensor,
}

fn normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            std * v
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Deterministic initialization: kernels are zero-mean normal with standard
/// deviation 1/√fan-in, biases and shifts 0, scales 1, running variance 1.
pub fn init_params(cfg: &DecoderConfig, seed: u64) -> Result<(DecoderParams, EncoderParams)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;
    let s = cfg.seed_side();
    let seed_len = s * s * s * cfg.seed_channels();

    let proj_weight = normal(&[d, seed_len], d, &mut rng);
    let mut blocks = Vec::with_capacity(BLOCKS);
    for i in 0..BLOCKS {
        let (ci, co) = (cfg.block_in_channels(i), cfg.block_channels[i]);
        // each output cell of a stride-2 transposed conv gathers 2³ taps per input channel
        let kernel = normal(&[ci, 4, 4, 4, co], ci * 8, &mut rng);
        let aux_weight = normal(&[co, 1], co, &mut rng);
        blocks.push(BlockParams {
            kernel,
            gamma: Tensor::filled(&[co], 1.0),
            beta: Tensor::zeros(&[co]),
            running_mean: Tensor::zeros(&[co]),
            running_var: Tensor::filled(&[co], 1.0),
            aux_weight,
            aux_bias: Tensor::zeros(&[1]),
        });
    }
    let last = cfg.block_channels[BLOCKS - 1];
    let out_weight = normal(&[last, 1], last, &mut rng);
    let decoder = DecoderParams {
        cfg: cfg.clone(),
        proj_weight,
        proj_bias: Tensor::zeros(&[seed_len]),
        blocks,
        out_weight,
        out_bias: Tensor::zeros(&[1]),
    };

    let mut convs = Vec::with_capacity(BLOCKS);
    for (ci, co) in encoder_channels(cfg) {
        convs.push(ConvParams { kernel: normal(&[4, 4, 4, ci, co], ci * 64, &mut rng), bias: Tensor::zeros(&[co]) });
    }
    let encoder = EncoderParams {
        cfg: cfg.clone(),
        convs,
        mu_weight: normal(&[seed_len, d], seed_len, &mut rng),
        mu_bias: Tensor::zeros(&[d]),
        logvar_weight: normal(&[seed_len, d], seed_len, &mut rng),
        logvar_bias: Tensor::zeros(&[d]),
    };
    Ok((decoder, encoder))
}

/// `(c_in, c_out)` of the four encoder convolutions: the decoder's channel
/// counts at each resolution, walked from full resolution down to the seed.
fn encoder_channels(cfg: &DecoderConfig) -> Vec<(usize, usize)> {
    let c = cfg.block_channels;
    let outs = [c[2], c[1], c[0], cfg.seed_channels()];
    let ins = [1, c[2], c[1], c[0]];
    ins.into_iter().zip(outs).collect()
}

impl DecoderParams {
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.proj_weight, &self.proj_bias];
        for b in &self.blocks {
            v.extend([&b.kernel, &b.gamma, &b.beta, &b.aux_weight, &b.aux_bias]);
        }
        v.extend([&self.out_weight, &self.out_bias]);
        v
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.proj_weight, &mut self.proj_bias];
        for b in &mut self.blocks {
            v.extend([&mut b.kernel, &mut b.gamma, &mut b.beta, &mut b.aux_weight, &mut b.aux_bias]);
        }
        v.extend([&mut self.out_weight, &mut self.out_bias]);
        v
    }

    pub fn learnable_names(&self) -> Vec<String> {
        let mut v = vec!["dec.proj.weight".to_string(), "dec.proj.bias".to_string()];
        for i in 0..self.blocks.len() {
            for part in ["kernel", "gamma", "beta", "aux.weight", "aux.bias"] {
                v.push(format!("dec.block{i}.{part}"));
            }
        }
        v.extend(["dec.out.weight".to_string(), "dec.out.bias".to_string()]);
        v
    }

    /// Running normalization statistics, as `(name, tensor)`.
    pub fn statistics(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("dec.block{i}.running_mean"), &b.running_mean));
            v.push((format!("dec.block{i}.running_var"), &b.running_var));
        }
        v
    }

    pub fn statistics_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.running_mean);
            v.push(&mut b.running_var);
        }
        v
    }

    /// Learnable tensors followed by the running statistics.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.proj_weight, &mut self.proj_bias];
        let mut stats = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.kernel, &mut b.gamma, &mut b.beta, &mut b.aux_weight, &mut b.aux_bias]);
            stats.extend([&mut b.running_mean, &mut b.running_var]);
        }
        v.extend([&mut self.out_weight, &mut self.out_bias]);
        v.extend(stats);
        v
    }

    /// A copy with every tensor zeroed, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.all_tensors_mut() {
            *t = t.zeros_like();
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        let (reference, _) = init_shapes(&self.cfg)?;
        let mine: Vec<&Tensor> =
            self.learnable().into_iter().chain(self.statistics().into_iter().map(|(_, t)| t)).collect();
        let theirs: Vec<&Tensor> =
            reference.learnable().into_iter().chain(reference.statistics().into_iter().map(|(_, t)| t)).collect();
        for ((name, a), b) in self.all_names().iter().zip(&mine).zip(&theirs) {
            a.expect_shape(b.shape(), name)?;
        }
        if self.blocks.iter().any(|b| b.running_var.data().iter().any(|&v| !(v > 0.0))) {
            return Err(Error::InvalidConfig("running variance must be positive".into()));
        }
        Ok(())
    }

    fn all_names(&self) -> Vec<String> {
        let mut names = self.learnable_names();
        names.extend(self.statistics().into_iter().map(|(n, _)| n));
        names
    }

    /// Folds one train-mode pass's batch statistics into the running ones.
    pub fn update_running_stats(&mut self, trace: &DecodeTrace) {
        for (b, t) in self.blocks.iter_mut().zip(&trace.blocks) {
            let positions = (t.pre_norm.len() / b.gamma.len()) as f64;
            let unbias = if positions > 1.0 { positions / (positions - 1.0) } else { 1.0 };
            for k in 0..b.gamma.len() {
                let m = &mut b.running_mean.data_mut()[k];
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * t.norm.mean[k];
                let v = &mut b.running_var.data_mut()[k];
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * t.norm.var[k] * unbias;
            }
        }
    }
}

impl EncoderParams {
    pub fn learnable(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend([&c.kernel, &c.bias]);
        }
        v.extend([&self.mu_weight, &self.mu_bias, &self.logvar_weight, &self.logvar_bias]);
        v
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend([&mut c.kernel, &mut c.bias]);
        }
        v.extend([&mut self.mu_weight, &mut self.mu_bias, &mut self.logvar_weight, &mut self.logvar_bias]);
        v
    }

    pub fn learnable_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.convs.len() {
            v.push(format!("enc.conv{i}.kernel"));
            v.push(format!("enc.conv{i}.bias"));
        }
        for head in ["mu", "logvar"] {
            v.push(format!("enc.{head}.weight"));
            v.push(format!("enc.{head}.bias"));
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.learnable_mut() {
            *t = t.zeros_like();
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        let (_, reference) = init_shapes(&self.cfg)?;
        for ((name, a), b) in self.learnable_names().iter().zip(self.learnable()).zip(reference.learnable()) {
            a.expect_shape(b.shape(), name)?;
        }
        Ok(())
    }
}

fn init_shapes(cfg: &DecoderConfig) -> Result<(DecoderParams, EncoderParams)> {
    init_params(cfg, 0)
}

/// Intermediate values of one upsampling block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Tensor,
    pub pre_norm: Tensor,
    pub norm: layers::NormCache,
    pub active: Vec<bool>,
    pub output: Tensor,
    /// Side-head probabilities, `[n, r, r, r, 1]`.
    pub aux: Tensor,
}

/// One upsampling block: exact ×2 transposed convolution, normalization,
/// ReLU and the sigmoid side head.
pub fn block_forward(x: &Tensor, block: &BlockParams, mode: Mode, tape: &mut BranchTape) -> Result<BlockTrace> {
    let ci = block.kernel.shape()[0];
    let s = x.shape();
    if s.len() != 5 || s[4] != ci || s[1] != s[2] || s[2] != s[3] || s[1] == 0 {
        return Err(Error::ShapeMismatch(format!("block input must be [n, s, s, s, {ci}], got {s:?}")));
    }
    let pre_norm = layers::conv_transpose(x, &block.kernel);
    let running = match mode {
        Mode::Train => None,
        Mode::Infer => Some((&block.running_mean, &block.running_var)),
    };
    let (normed, norm) = layers::batch_norm(&pre_norm, &block.gamma, &block.beta, running);
    let (output, active) = layers::relu(&normed, tape);
    let mut aux_shape = output.shape().to_vec();
    aux_shape[4] = 1;
    let aux = layers::sigmoid(&layers::affine(&output, &block.aux_weight, &block.aux_bias, &aux_shape));
    Ok(BlockTrace { input: x.clone(), pre_norm, norm, active, output, aux })
}

/// Intermediate values of a batched decode, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub z: Tensor,
    pub blocks: Vec<BlockTrace>,
    /// Occupancy probabilities, `[n, R, R, R, 1]`.
    pub probs: Tensor,
    /// `1 − probs`, evaluated from the logits so saturated outputs keep
    /// their precision.
    pub complement: Tensor,
}

impl DecodeTrace {
    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }

    /// Output probabilities of sample `i`.
    pub fn prob_grid(&self, i: usize, pitch: f64) -> ProbGrid {
        let r = self.probs.shape()[1];
        ProbGrid::new([r, r, r], pitch, self.probs.batch_item(i).to_vec()).expect("sigmoid outputs lie in [0, 1]")
    }

    /// Side-head grids of sample `i`, coarse to fine, with pitch scaled to
    /// cover the same physical extent as the output.
    pub fn aux_grids(&self, i: usize, pitch: f64) -> Vec<ProbGrid> {
        let r_out = self.probs.shape()[1] as f64;
        self.blocks
            .iter()
            .map(|b| {
                let r = b.aux.shape()[1];
                ProbGrid::new([r, r, r], pitch * r_out / r as f64, b.aux.batch_item(i).to_vec())
                    .expect("sigmoid outputs lie in [0, 1]")
            })
            .collect()
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalOverflow(what.into()))
    }
}

/// Batched decode of latent rows `z` (`[n, d]`).
pub fn decode_batch(params: &DecoderParams, z: &Tensor, mode: Mode, tape: &mut BranchTape) -> Result<DecodeTrace> {
    let cfg = &params.cfg;
    if z.shape().len() != 2 || z.shape()[1] != cfg.latent_dim || z.shape()[0] == 0 {
        return Err(Error::ShapeMismatch(format!("latent batch must be [n, {}], got {:?}", cfg.latent_dim, z.shape())));
    }
    check_finite(z, "latent code")?;
    let n = z.shape()[0];
    let s = cfg.seed_side();
    let mut h = layers::affine(z, &params.proj_weight, &params.proj_bias, &[n, s, s, s, cfg.seed_channels()]);
    check_finite(&h, "latent projection")?;
    let mut blocks = Vec::with_capacity(BLOCKS);
    for (i, b) in params.blocks.iter().enumerate() {
        let t = block_forward(&h, b, mode, tape)?;
        check_finite(&t.output, &format!("decoder block {i}"))?;
        h = t.output.clone();
        blocks.push(t);
    }
    let r = cfg.output_resolution();
    let logits = layers::affine(&h, &params.out_weight, &params.out_bias, &[n, r, r, r, 1]);
    check_finite(&logits, "output projection")?;
    let probs = layers::sigmoid(&logits);
    let mut complement = logits;
    complement.data_mut().iter_mut().for_each(|v| *v = layers::sigmoid_scalar(-*v));
    Ok(DecodeTrace { z: z.clone(), blocks, probs, complement })
}

/// Occupancy probabilities for one latent code.
pub fn decode(params: &DecoderParams, z: &LatentCode, mode: Mode) -> Result<ProbGrid> {
    let d = params.cfg.latent_dim;
    if z.len() != d {
        return Err(Error::ShapeMismatch(format!("latent code has {} entries, decoder expects {d}", z.len())));
    }
    let zt = Tensor::from_vec(&[1, d], z.values().to_vec())?;
    let trace = decode_batch(params, &zt, mode, &mut BranchTape::free())?;
    Ok(trace.prob_grid(0, params.cfg.pitch))
}

/// Decode, threshold, then project onto the voids and connectivity
/// constraints: keep the largest solid component and fill its sub-threshold
/// voids. Overhang and thickness are left as decoded.
pub fn constrained_decode(
    params: &DecoderParams,
    z: &LatentCode,
    spec: &PrintabilitySpec,
) -> Result<(VoxelGrid, ConstraintReport)> {
    spec.validate()?;
    let p = decode(params, z, Mode::Infer)?;
    let raw = threshold(&p, spec);
    if raw.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let single = keep_largest_component(&raw);
    let (filled, _) = voids(&single, spec, true);
    let report = evaluate(&filled, spec);
    Ok((filled, report))
}

/// Intermediate values of a batched encode.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    /// Inputs of each convolution.
    pub inputs: Vec<Tensor>,
    pub active: Vec<Vec<bool>>,
    /// Flattened features feeding the heads, `[n, s³·c0]`.
    pub features: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Batched encode of targets given as `[n, R, R, R, 1]` occupancy.
pub fn encode_batch(params: &EncoderParams, x: &Tensor, tape: &mut BranchTape) -> Result<EncodeTrace> {
    let r = params.cfg.output_resolution();
    let s = x.shape();
    if s.len() != 5 || s[1..] != [r, r, r, 1] || s[0] == 0 {
        return Err(Error::ShapeMismatch(format!("encoder input must be [n, {r}, {r}, {r}, 1], got {s:?}")));
    }
    let n = s[0];
    let mut inputs = Vec::with_capacity(BLOCKS);
    let mut active = Vec::with_capacity(BLOCKS);
    let mut h = x.clone();
    for c in &params.convs {
        let pre = layers::conv(&h, &c.kernel, &c.bias);
        let (out, mask) = layers::relu(&pre, tape);
        inputs.push(std::mem::replace(&mut h, out));
        active.push(mask);
    }
    let features = Tensor::from_vec(&[n, h.len() / n], h.into_data())?;
    let d = params.cfg.latent_dim;
    let mu = layers::affine(&features, &params.mu_weight, &params.mu_bias, &[n, d]);
    let logvar = layers::affine(&features, &params.logvar_weight, &params.logvar_bias, &[n, d]);
    check_finite(&mu, "encoder mean")?;
    check_finite(&logvar, "encoder log-variance")?;
    Ok(EncodeTrace { inputs, active, features, mu, logvar })
}

/// Target grids as an encoder input batch.
pub fn grids_to_tensor(grids: &[&VoxelGrid]) -> Result<Tensor> {
    let Some(first) = grids.first() else {
        return Err(Error::ShapeMismatch("empty batch".into()));
    };
    let [nx, ny, nz] = first.dims();
    let mut data = Vec::with_capacity(grids.len() * first.len());
    for g in grids {
        if g.dims() != first.dims() {
            return Err(Error::ShapeMismatch(format!("batch mixes dims {:?} and {:?}", first.dims(), g.dims())));
        }
        data.extend(g.occupancy().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Tensor::from_vec(&[grids.len(), nz, ny, nx, 1], data)
}

/// Posterior mean and log-variance for one grid.
pub fn encode(params: &EncoderParams, g: &VoxelGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = grids_to_tensor(&[g])?;
    let t = encode_batch(params, &x, &mut BranchTape::free())?;
    Ok((t.mu.into_data(), t.logvar.into_data()))
}

/// `z = μ + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Result<LatentCode> {
    if mu.len() != logvar.len() || mu.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "reparameterize lengths differ: {}, {}, {}",
            mu.len(),
            logvar.len(),
            noise.len()
        )));
    }
    LatentCode::new(mu.iter().zip(logvar).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

/// Gradient of a scalar with respect to the decoder's learnable tensors and
/// its latent input.
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub z: Tensor,
}

/// Reverse pass through a batched decode. `d_probs` is the gradient with
/// respect to the output probabilities; `d_aux[i]` is that of block `i`'s
/// side-head probabilities (or `None` when they do not enter the loss).
pub fn decoder_backward(
    params: &DecoderParams,
    trace: &DecodeTrace,
    d_probs: &Tensor,
    d_aux: &[Option<Tensor>],
) -> DecoderGrads {
    let mut g = params.zeros_like();
    let d_logits = layers::sigmoid_backward(d_probs, &trace.probs);
    let last = &trace.blocks[BLOCKS - 1].output;
    let (mut d_h, dw, db) = layers::affine_backward(last, &params.out_weight, &d_logits);
    g.out_weight = dw;
    g.out_bias = db;
    for i in (0..BLOCKS).rev() {
        let (b, t) = (&params.blocks[i], &trace.blocks[i]);
        if let Some(Some(da)) = d_aux.get(i) {
            let d_aux_logit = layers::sigmoid_backward(da, &t.aux);
            let (dh_aux, dw, db) = layers::affine_backward(&t.output, &b.aux_weight, &d_aux_logit);
            d_h.add_assign(&dh_aux);
            g.blocks[i].aux_weight = dw;
            g.blocks[i].aux_bias = db;
        }
        let d_norm = layers::relu_backward(&d_h, &t.active);
        let (d_pre, dgamma, dbeta) = layers::batch_norm_backward(&d_norm, &t.norm, &b.gamma);
        let (d_in, dk) = layers::conv_transpose_backward(&t.input, &b.kernel, &d_pre);
        g.blocks[i].kernel = dk;
        g.blocks[i].gamma = dgamma;
        g.blocks[i].beta = dbeta;
        d_h = d_in;
    }
    let (d_z, dw, db) = layers::affine_backward(&trace.z, &params.proj_weight, &d_h);
    g.proj_weight = dw;
    g.proj_bias = db;
    DecoderGrads { params: g, z: d_z }
}

/// Reverse pass through a batched encode given head gradients.
pub fn encoder_backward(
    params: &EncoderParams,
    trace: &EncodeTrace,
    d_mu: &Tensor,
    d_logvar: &Tensor,
) -> EncoderParams {
    let mut g = params.zeros_like();
    let (d_f_mu, dw, db) = layers::affine_backward(&trace.features, &params.mu_weight, d_mu);
    g.mu_weight = dw;
    g.mu_bias = db;
    let (mut d_f, dw, db) = layers::affine_backward(&trace.features, &params.logvar_weight, d_logvar);
    g.logvar_weight = dw;
    g.logvar_bias = db;
    d_f.add_assign(&d_f_mu);

    let last_in = &trace.inputs[BLOCKS - 1];
    let s = last_in.shape()[1] / 2;
    let n = last_in.shape()[0];
    let mut d_h = Tensor::from_vec(&[n, s, s, s, params.convs[BLOCKS - 1].bias.len()], d_f.into_data())
        .expect("feature size matches the last convolution");
    for i in (0..BLOCKS).rev() {
        let d_pre = layers::relu_backward(&d_h, &trace.active[i]);
        let (d_in, dk, db) = layers::conv_backward(&trace.inputs[i], &params.convs[i].kernel, &d_pre);
        g.convs[i].kernel = dk;
        g.convs[i].bias = db;
        d_h = d_in;
    }
    g
}
