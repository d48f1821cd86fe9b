//! Forward kernels and their exact adjoints. Volumes are channels-last
//! `[batch, z, y, x, channel]` cubes.

use super::tape::BranchTape;
use super::tensor::{Accum, Tensor};

pub const KERNEL: usize = 4;
pub const BN_EPS: f64 = 1e-5;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output coordinates fed by input coordinate `i` through kernel tap `k`
/// (stride 2, padding 1): `o = 2i + k - 1`.
#[inline]
fn tap(i: usize, k: usize, extent: usize) -> Option<usize> {
    let o = (2 * i + k) as isize - 1;
    (o >= 0 && (o as usize) < extent).then_some(o as usize)
}

fn cube_dims(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    debug_assert_eq!(s.len(), 5);
    debug_assert!(s[1] == s[2] && s[2] == s[3]);
    (s[0], s[1], s[4])
}

/// Transposed convolution with a 4³ kernel, stride 2 and padding 1: exact ×2
/// upsampling. `kernel` is `[c_in, 4, 4, 4, c_out]`.
pub fn conv_transpose(input: &Tensor, kernel: &Tensor) -> Tensor {
    let (n, s, ci) = cube_dims(input);
    let co = kernel.shape()[4];
    let t = 2 * s;
    let mut out = Tensor::zeros(&[n, t, t, t, co]);
    let (x, w, o) = (input.data(), kernel.data(), out.data_mut());
    for b in 0..n {
        for iz in 0..s {
            for iy in 0..s {
                for ix in 0..s {
                    let in_base = (((b * s + iz) * s + iy) * s + ix) * ci;
                    for kz in 0..KERNEL {
                        let Some(oz) = tap(iz, kz, t) else { continue };
                        for ky in 0..KERNEL {
                            let Some(oy) = tap(iy, ky, t) else { continue };
                            for kx in 0..KERNEL {
                                let Some(ox) = tap(ix, kx, t) else { continue };
                                let out_base = (((b * t + oz) * t + oy) * t + ox) * co;
                                let dst = &mut o[out_base..out_base + co];
                                for c in 0..ci {
                                    let v = x[in_base + c];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let wb = (((c * KERNEL + kz) * KERNEL + ky) * KERNEL + kx) * co;
                                    axpy(dst, v, &w[wb..wb + co]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub fn conv_transpose_backward(input: &Tensor, kernel: &Tensor, d_out: &Tensor) -> (Tensor, Tensor) {
    let (n, s, ci) = cube_dims(input);
    let co = kernel.shape()[4];
    let t = 2 * s;
    let mut d_in = input.zeros_like();
    let mut d_w = kernel.zeros_like();
    let (x, w, g) = (input.data(), kernel.data(), d_out.data());
    let (dx, dw) = (d_in.data_mut(), d_w.data_mut());
    for b in 0..n {
        for iz in 0..s {
            for iy in 0..s {
                for ix in 0..s {
                    let in_base = (((b * s + iz) * s + iy) * s + ix) * ci;
                    for kz in 0..KERNEL {
                        let Some(oz) = tap(iz, kz, t) else { continue };
                        for ky in 0..KERNEL {
                            let Some(oy) = tap(iy, ky, t) else { continue };
                            for kx in 0..KERNEL {
                                let Some(ox) = tap(ix, kx, t) else { continue };
                                let out_base = (((b * t + oz) * t + oy) * t + ox) * co;
                                let go = &g[out_base..out_base + co];
                                for c in 0..ci {
                                    let wb = (((c * KERNEL + kz) * KERNEL + ky) * KERNEL + kx) * co;
                                    dx[in_base + c] += dot(go, &w[wb..wb + co]);
                                    axpy(&mut dw[wb..wb + co], x[in_base + c], go);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_w)
}

/// Strided convolution (4³ kernel, stride 2, padding 1): exact ×2
/// downsampling. `kernel` is `[4, 4, 4, c_in, c_out]`.
pub fn conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (n, s, ci) = cube_dims(input);
    let co = kernel.shape()[4];
    let t = s / 2;
    let mut out = Tensor::zeros(&[n, t, t, t, co]);
    let (x, w, o) = (input.data(), kernel.data(), out.data_mut());
    for b in 0..n {
        for oz in 0..t {
            for oy in 0..t {
                for ox in 0..t {
                    let out_base = (((b * t + oz) * t + oy) * t + ox) * co;
                    let dst = &mut o[out_base..out_base + co];
                    dst.copy_from_slice(bias.data());
                    for kz in 0..KERNEL {
                        let Some(iz) = tap(oz, kz, s) else { continue };
                        for ky in 0..KERNEL {
                            let Some(iy) = tap(oy, ky, s) else { continue };
                            for kx in 0..KERNEL {
                                let Some(ix) = tap(ox, kx, s) else { continue };
                                let in_base = (((b * s + iz) * s + iy) * s + ix) * ci;
                                for c in 0..ci {
                                    let v = x[in_base + c];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let wb = (((kz * KERNEL + ky) * KERNEL + kx) * ci + c) * co;
                                    axpy(dst, v, &w[wb..wb + co]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv_backward(input: &Tensor, kernel: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, s, ci) = cube_dims(input);
    let co = kernel.shape()[4];
    let t = s / 2;
    let mut d_in = input.zeros_like();
    let mut d_w = kernel.zeros_like();
    let mut d_b = Tensor::zeros(&[co]);
    let (x, w, g) = (input.data(), kernel.data(), d_out.data());
    let (dx, dw) = (d_in.data_mut(), d_w.data_mut());
    for b in 0..n {
        for oz in 0..t {
            for oy in 0..t {
                for ox in 0..t {
                    let out_base = (((b * t + oz) * t + oy) * t + ox) * co;
                    let go = &g[out_base..out_base + co];
                    for (db, gv) in d_b.data_mut().iter_mut().zip(go) {
                        *db += gv;
                    }
                    for kz in 0..KERNEL {
                        let Some(iz) = tap(oz, kz, s) else { continue };
                        for ky in 0..KERNEL {
                            let Some(iy) = tap(oy, ky, s) else { continue };
                            for kx in 0..KERNEL {
                                let Some(ix) = tap(ox, kx, s) else { continue };
                                let in_base = (((b * s + iz) * s + iy) * s + ix) * ci;
                                for c in 0..ci {
                                    let wb = (((kz * KERNEL + ky) * KERNEL + kx) * ci + c) * co;
                                    dx[in_base + c] += dot(go, &w[wb..wb + co]);
                                    axpy(&mut dw[wb..wb + co], x[in_base + c], go);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Per-position affine map over the last axis: `[.., c_in] -> [.., c_out]`
/// with `weight` `[c_in, c_out]`. Covers 1×1×1 convolutions and dense layers.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Tensor {
    let (ci, co) = (weight.shape()[0], weight.shape()[1]);
    let positions = input.len() / ci;
    let mut out = Tensor::zeros(out_shape);
    debug_assert_eq!(out.len(), positions * co);
    let (x, w, o) = (input.data(), weight.data(), out.data_mut());
    for p in 0..positions {
        let dst = &mut o[p * co..(p + 1) * co];
        dst.copy_from_slice(bias.data());
        for c in 0..ci {
            let v = x[p * ci + c];
            if v != 0.0 {
                axpy(dst, v, &w[c * co..(c + 1) * co]);
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn affine_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, co) = (weight.shape()[0], weight.shape()[1]);
    let positions = input.len() / ci;
    let mut d_in = input.zeros_like();
    let mut d_w = weight.zeros_like();
    let mut d_b = Tensor::zeros(&[co]);
    let (x, w, g) = (input.data(), weight.data(), d_out.data());
    for p in 0..positions {
        let go = &g[p * co..(p + 1) * co];
        for (db, gv) in d_b.data_mut().iter_mut().zip(go) {
            *db += gv;
        }
        for c in 0..ci {
            d_in.data_mut()[p * ci + c] = dot(go, &w[c * co..(c + 1) * co]);
            axpy(&mut d_w.data_mut()[c * co..(c + 1) * co], x[p * ci + c], go);
        }
    }
    (d_in, d_w, d_b)
}

/// Cached quantities from a batch-statistics normalization pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Whether batch statistics were used.
    pub batch_stats: bool,
}

/// Batch normalization over every position of the batch, per channel.
/// With `running = Some((mean, var))` the stored statistics are used instead.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: Option<(&Tensor, &Tensor)>,
) -> (Tensor, NormCache) {
    let c = gamma.len();
    let positions = x.len() / c;
    let data = x.data();
    let (mean, var, batch_stats) = match running {
        Some((m, v)) => (m.data().to_vec(), v.data().to_vec(), false),
        None => {
            let mut sums = vec![Accum::default(); c];
            for p in 0..positions {
                for (m, &v) in sums.iter_mut().zip(&data[p * c..(p + 1) * c]) {
                    m.add(v);
                }
            }
            let mean: Vec<f64> = sums.iter().map(|m| m.value() / positions as f64).collect();
            let mut sums = vec![Accum::default(); c];
            for p in 0..positions {
                for k in 0..c {
                    let d = data[p * c + k] - mean[k];
                    sums[k].add(d * d);
                }
            }
            let var: Vec<f64> = sums.iter().map(|v| v.value() / positions as f64).collect();
            (mean, var, true)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = x.zeros_like();
    let mut y = x.zeros_like();
    {
        let (nd, yd) = (normalized.data_mut(), y.data_mut());
        let (g, b) = (gamma.data(), beta.data());
        for p in 0..positions {
            for k in 0..c {
                let i = p * c + k;
                let xhat = (data[i] - mean[k]) * inv_std[k];
                nd[i] = xhat;
                yd[i] = g[k] * xhat + b[k];
            }
        }
    }
    (y, NormCache { normalized, inv_std, mean, var, batch_stats })
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn batch_norm_backward(d_y: &Tensor, cache: &NormCache, gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let positions = d_y.len() / c;
    let (g, xhat) = (d_y.data(), cache.normalized.data());
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    for p in 0..positions {
        for k in 0..c {
            let i = p * c + k;
            d_gamma.data_mut()[k] += g[i] * xhat[i];
            d_beta.data_mut()[k] += g[i];
        }
    }
    let mut d_x = d_y.zeros_like();
    let dx = d_x.data_mut();
    let m = positions as f64;
    for k in 0..c {
        let scale = gamma.data()[k] * cache.inv_std[k];
        if cache.batch_stats {
            // d_xhat = g * gamma; sums over the batch of d_xhat and d_xhat * xhat
            let sum = d_beta.data()[k] * gamma.data()[k];
            let sum_x = d_gamma.data()[k] * gamma.data()[k];
            for p in 0..positions {
                let i = p * c + k;
                let dxhat = g[i] * gamma.data()[k];
                dx[i] = cache.inv_std[k] / m * (m * dxhat - sum - xhat[i] * sum_x);
            }
        } else {
            for p in 0..positions {
                let i = p * c + k;
                dx[i] = g[i] * scale;
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

pub fn relu(x: &Tensor, tape: &mut BranchTape) -> (Tensor, Vec<bool>) {
    let mut y = x.zeros_like();
    let mut active = vec![false; x.len()];
    for (i, (&v, o)) in x.data().iter().zip(y.data_mut()).enumerate() {
        let on = tape.decide((v > 0.0) as u8) == 1;
        active[i] = on;
        if on {
            *o = v;
        }
    }
    (y, active)
}

pub fn relu_backward(d_y: &Tensor, active: &[bool]) -> Tensor {
    let mut d_x = d_y.clone();
    for (d, &on) in d_x.data_mut().iter_mut().zip(active) {
        if !on {
            *d = 0.0;
        }
    }
    d_x
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

/// Adjoint of the sigmoid given its output.
pub fn sigmoid_backward(d_y: &Tensor, y: &Tensor) -> Tensor {
    let mut d_x = d_y.clone();
    for (d, &p) in d_x.data_mut().iter_mut().zip(y.data()) {
        *d *= p * (1.0 - p);
    }
    d_x
}
