//! Reconstruction, KL and soft manufacturability losses with exact gradients.
//!
//! Soft losses read grids in voxel order (x fastest). Every piecewise choice
//! (clamps, window maxima, pool extrema, hinges) goes through a [`BranchTape`].

use serde::{Deserialize, Serialize};

use crate::decoder::tensor::Accum;
use crate::decoder::BranchTape;
use crate::error::{Error, Result};
use crate::grid::{Dims, PrintabilitySpec, ProbGrid, VoxelGrid};

pub const PROB_CLAMP: f64 = 1e-7;

/// Components of the soft manufacturability penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ManufTerms {
    pub overhang: f64,
    pub thickness: f64,
    pub support: f64,
    pub aux: f64,
    pub total: f64,
}

impl ManufTerms {
    pub fn combine(overhang: f64, thickness: f64, support: f64, aux: f64) -> Self {
        Self { overhang, thickness, support, aux, total: overhang + thickness + 0.5 * support + 0.25 * aux }
    }
}

/// Mean BCE over `p` against binary targets, with its gradient. `q` holds
/// `1 − p`; callers holding logits pass it exactly.
pub(crate) fn bce_with_grad(p: &[f64], q: &[f64], target: &[bool], tape: &mut BranchTape) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut sum = Accum::default();
    let mut grad = vec![0.0; p.len()];
    for (i, ((&v, &w), &t)) in p.iter().zip(q).zip(target).enumerate() {
        // 0: in range, 1: clamped low, 2: clamped high
        let natural = if v < PROB_CLAMP {
            1
        } else if w < PROB_CLAMP {
            2
        } else {
            0
        };
        let choice = tape.decide(natural);
        let (pc, qc) = match choice {
            1 => (PROB_CLAMP, 1.0 - PROB_CLAMP),
            2 => (1.0 - PROB_CLAMP, PROB_CLAMP),
            _ => (v, w),
        };
        let clamped = choice != 0;
        if t {
            sum.add(-pc.ln());
            if !clamped {
                grad[i] = -1.0 / (pc * n);
            }
        } else {
            sum.add(-qc.ln());
            if !clamped {
                grad[i] = 1.0 / (qc * n);
            }
        }
    }
    (sum.value() / n, grad)
}

fn complement(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| 1.0 - v).collect()
}

fn check_match(p: &ProbGrid, target: &VoxelGrid) -> Result<()> {
    if p.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!("probabilities {:?} vs target {:?}", p.dims(), target.dims())));
    }
    Ok(())
}

/// Mean per-voxel binary cross-entropy, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce(p: &ProbGrid, target: &VoxelGrid) -> Result<f64> {
    check_match(p, target)?;
    Ok(bce_with_grad(p.values(), &complement(p.values()), target.occupancy(), &mut BranchTape::free()).0)
}

pub fn bce_grad(p: &ProbGrid, target: &VoxelGrid) -> Result<Vec<f64>> {
    check_match(p, target)?;
    Ok(bce_with_grad(p.values(), &complement(p.values()), target.occupancy(), &mut BranchTape::free()).1)
}

/// `0.5 · Σ(μ² + e^logvar − 1 − logvar)` for one sample.
pub fn kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Gradients of [`kl`] with respect to `μ` and `logvar`.
pub fn kl_grad(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect())
}

/// Probability-weighted fraction of unsupported voxels: voxels above the
/// first layer count `p · (1 − max of the 3×3 window one layer below)`.
pub(crate) fn overhang_soft(p: &[f64], dims: Dims, tape: &mut BranchTape) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = dims;
    let n = p.len() as f64;
    let mut sum = Accum::default();
    let mut grad = vec![0.0; p.len()];
    for z in 1..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = x + nx * (y + ny * z);
                let mut window = [usize::MAX; 9];
                let mut best = 0;
                let mut best_val = f64::NEG_INFINITY;
                for (k, (dy, dx)) in (-1i64..=1).flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx))).enumerate() {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let w = xx as usize + nx * (yy as usize + ny * (z - 1));
                    window[k] = w;
                    if p[w] > best_val {
                        best_val = p[w];
                        best = k;
                    }
                }
                let arg = window[tape.decide(best as u8) as usize];
                let m = p[arg];
                sum.add(p[v] * (1.0 - m));
                grad[v] += (1.0 - m) / n;
                grad[arg] -= p[v] / n;
            }
        }
    }
    (sum.value() / n, grad)
}

const STENCIL: [[i64; 3]; 7] = [[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// One 6-neighborhood pool round. Min pools see out-of-grid cells as 0; max
/// pools use in-grid cells only. Returns values and the winning source
/// (`None` for the out-of-grid zero).
fn pool(p: &[f64], dims: Dims, min: bool, tape: &mut BranchTape) -> (Vec<f64>, Vec<Option<usize>>) {
    let [nx, ny, nz] = dims;
    let mut out = vec![0.0; p.len()];
    let mut arg = vec![None; p.len()];
    let mut sources = [None; 7];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = x + nx * (y + ny * z);
                let mut best = 0;
                let mut best_val = p[v];
                for (k, d) in STENCIL.iter().enumerate() {
                    let (xx, yy, zz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                    let inside = xx >= 0 && yy >= 0 && zz >= 0 && xx < nx as i64 && yy < ny as i64 && zz < nz as i64;
                    sources[k] = inside.then(|| xx as usize + nx * (yy as usize + ny * zz as usize));
                    let val = match sources[k] {
                        Some(w) => p[w],
                        None if min => 0.0,
                        None => continue,
                    };
                    if (min && val < best_val) || (!min && val > best_val) {
                        best_val = val;
                        best = k;
                    }
                }
                let src = sources[tape.decide(best as u8) as usize];
                arg[v] = src;
                out[v] = src.map_or(0.0, |w| p[w]);
            }
        }
    }
    (out, arg)
}

/// Pool rounds for the soft thickness term: `round(t_min / (2·pitch))`.
pub fn thickness_rounds(spec: &PrintabilitySpec, pitch: f64) -> usize {
    (spec.t_min / (2.0 * pitch)).round() as usize
}

/// Mean of `max(0, p − opening_k(p))`: mass an opening of radius `k` removes.
pub(crate) fn thickness_soft(p: &[f64], dims: Dims, k: usize, tape: &mut BranchTape) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut rounds = Vec::with_capacity(2 * k);
    let mut cur = p.to_vec();
    for r in 0..2 * k {
        let (next, arg) = pool(&cur, dims, r < k, tape);
        rounds.push(arg);
        cur = next;
    }
    let mut sum = Accum::default();
    let mut grad = vec![0.0; p.len()];
    let mut d_open = vec![0.0; p.len()];
    for i in 0..p.len() {
        let d = p[i] - cur[i];
        if tape.decide((d > 0.0) as u8) == 1 {
            sum.add(d);
            grad[i] += 1.0 / n;
            d_open[i] -= 1.0 / n;
        }
    }
    for arg in rounds.iter().rev() {
        let mut prev = vec![0.0; p.len()];
        for (v, src) in arg.iter().enumerate() {
            if let Some(w) = src {
                prev[*w] += d_open[v];
            }
        }
        d_open = prev;
    }
    for (g, d) in grad.iter_mut().zip(d_open) {
        *g += d;
    }
    (sum.value() / n, grad)
}

/// Mean of `p · E` over layers above the plate, `E` being the product of
/// `1 − p` over all cells strictly below in the same column.
pub(crate) fn support_soft(p: &[f64], dims: Dims) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = dims;
    let n = p.len() as f64;
    let layer = nx * ny;
    let mut sum = Accum::default();
    let mut grad = vec![0.0; p.len()];
    let mut prefix = vec![0.0; nz];
    for c in 0..layer {
        let mut e = 1.0;
        for (z, pre) in prefix.iter_mut().enumerate() {
            let v = c + layer * z;
            *pre = e;
            if z > 0 {
                sum.add(p[v] * e);
            }
            e *= 1.0 - p[v];
        }
        // s = Σ_{above} p_w · Π_{between} (1 − p), swept downward
        let mut s = 0.0;
        for z in (0..nz).rev() {
            let v = c + layer * z;
            let own = if z > 0 { 1.0 } else { 0.0 };
            grad[v] = prefix[z] * (own - s) / n;
            s = p[v] + (1.0 - p[v]) * s;
        }
    }
    (sum.value() / n, grad)
}

/// Soft penalty and its gradients with respect to `p` and each side-head grid.
pub(crate) fn manuf_with_grad(
    p: &[f64],
    dims: Dims,
    aux: &[(&[f64], Dims)],
    rounds: usize,
    tape: &mut BranchTape,
) -> (ManufTerms, Vec<f64>, Vec<Vec<f64>>) {
    let (over, g_over) = overhang_soft(p, dims, tape);
    let (thick, g_thick) = thickness_soft(p, dims, rounds, tape);
    let (supp, g_supp) = support_soft(p, dims);
    let mut aux_sum = 0.0;
    let mut g_aux = Vec::with_capacity(aux.len());
    let scale = if aux.is_empty() { 0.0 } else { 1.0 / aux.len() as f64 };
    for (a, d) in aux {
        let (v, mut g) = overhang_soft(a, *d, tape);
        aux_sum += v;
        g.iter_mut().for_each(|x| *x *= 0.25 * scale);
        g_aux.push(g);
    }
    let terms = ManufTerms::combine(over, thick, supp, aux_sum * scale);
    let grad = (0..p.len()).map(|i| g_over[i] + g_thick[i] + 0.5 * g_supp[i]).collect();
    (terms, grad, g_aux)
}

/// Overhang, thickness, support and side-head penalties on probabilities.
pub fn manuf_soft(p: &ProbGrid, aux: &[ProbGrid], spec: &PrintabilitySpec) -> ManufTerms {
    let aux: Vec<(&[f64], Dims)> = aux.iter().map(|a| (a.values(), a.dims())).collect();
    let rounds = thickness_rounds(spec, p.pitch());
    manuf_with_grad(p.values(), p.dims(), &aux, rounds, &mut BranchTape::free()).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: Dims, values: Vec<f64>) -> ProbGrid {
        ProbGrid::new(dims, 1.0, values).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let t = VoxelGrid::from_fn([2, 2, 1], 1.0, |x, _, _| x == 0).unwrap();
        let half = ProbGrid::uniform([2, 2, 1], 1.0, 0.5).unwrap();
        assert!((bce(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = ProbGrid::from_voxels(&t);
        assert!(bce(&exact, &t).unwrap() < 1e-6);
        assert!(bce_grad(&exact, &t).unwrap().iter().all(|&g| g == 0.0));
        let one = VoxelGrid::from_fn([1, 1, 1], 1.0, |_, _, _| true).unwrap();
        let p = grid([1, 1, 1], vec![0.9]);
        assert!((bce(&p, &one).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(bce(&p, &t).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl(&[0.0; 3], &[0.0; 3]), 0.0);
        assert_eq!(kl(&[1.0], &[0.0]), 0.5);
        let v = kl(&[0.0], &[4f64.ln()]);
        assert!((v - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
        assert!((v - 0.806_853).abs() < 1e-6);
        let (gm, gl) = kl_grad(&[0.0; 2], &[0.0; 2]);
        assert!(gm.iter().chain(&gl).all(|&g| g == 0.0));
    }

    #[test]
    fn empty_grid_has_no_penalty() {
        let p = ProbGrid::uniform([4, 4, 4], 1.0, 0.0).unwrap();
        let aux = vec![ProbGrid::uniform([2, 2, 2], 2.0, 0.0).unwrap()];
        assert_eq!(manuf_soft(&p, &aux, &PrintabilitySpec::default()), ManufTerms::default());
    }

    #[test]
    fn grounded_column() {
        let g = VoxelGrid::from_fn([3, 3, 3], 1.0, |x, y, _| x == 1 && y == 1).unwrap();
        let p = ProbGrid::from_voxels(&g);
        let (over, _) = overhang_soft(p.values(), p.dims(), &mut BranchTape::free());
        let (supp, _) = support_soft(p.values(), p.dims());
        assert_eq!(over, 0.0);
        assert_eq!(supp, 0.0);
    }

    #[test]
    fn floating_voxel_hand_values() {
        let g = VoxelGrid::from_fn([3, 3, 3], 1.0, |x, y, z| (x, y, z) == (1, 1, 2)).unwrap();
        let p = ProbGrid::from_voxels(&g);
        let (over, _) = overhang_soft(p.values(), p.dims(), &mut BranchTape::free());
        let (supp, _) = support_soft(p.values(), p.dims());
        assert_eq!(over, 1.0 / 27.0);
        assert_eq!(supp, 1.0 / 27.0);
    }

    #[test]
    fn opening_penalty_counts_removed_mass() {
        // a 3³ block opens to the 7-voxel cross around its center
        let g = VoxelGrid::from_fn([5, 5, 5], 1.0, |x, y, z| x < 3 && y < 3 && z < 3).unwrap();
        let p = ProbGrid::from_voxels(&g);
        let (t, _) = thickness_soft(p.values(), p.dims(), 1, &mut BranchTape::free());
        assert_eq!(t, 20.0 / 125.0);
        let wall = VoxelGrid::from_fn([5, 5, 5], 1.0, |x, _, _| x == 2).unwrap();
        let p = ProbGrid::from_voxels(&wall);
        let (t, _) = thickness_soft(p.values(), p.dims(), 1, &mut BranchTape::free());
        assert_eq!(t, 25.0 / 125.0);
    }

    /// Central differences on each soft term, replaying the base point's
    /// branch choices.
    #[test]
    fn soft_term_gradients() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let dims = [4, 3, 5];
        let p: Vec<f64> = (0..60).map(|_| rng.random_range(0.05..0.95)).collect();
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<bool> = (0..60).map(|_| rng.random_bool(0.5)).collect();
        let f = |p: &[f64], a: &[f64], tape: &mut BranchTape| {
            let (m, gp, ga) = manuf_with_grad(p, dims, &[(a, [2, 2, 2])], 1, tape);
            let (b, gb) = bce_with_grad(p, &complement(p), &target, tape);
            let g: Vec<f64> = gp.iter().zip(&gb).map(|(x, y)| x + y).collect();
            (m.total + b, g, ga[0].clone())
        };
        let mut rec = BranchTape::record();
        let (_, gp, ga) = f(&p, &a, &mut rec);
        let h = 1e-6;
        for i in 0..p.len() {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi[i] += h;
            lo[i] -= h;
            let num = (f(&hi, &a, &mut BranchTape::replay_of(&rec)).0 - f(&lo, &a, &mut BranchTape::replay_of(&rec)).0)
                / (2.0 * h);
            assert!((num - gp[i]).abs() < 1e-7, "p[{i}]: {num} vs {}", gp[i]);
        }
        for i in 0..a.len() {
            let (mut hi, mut lo) = (a.clone(), a.clone());
            hi[i] += h;
            lo[i] -= h;
            let num = (f(&p, &hi, &mut BranchTape::replay_of(&rec)).0 - f(&p, &lo, &mut BranchTape::replay_of(&rec)).0)
                / (2.0 * h);
            assert!((num - ga[i]).abs() < 1e-7, "aux[{i}]: {num} vs {}", ga[i]);
        }
    }
}
