//! Hard manufacturability checks, the aggregate verdict and grid repair.
//!
//! Overhangs are judged on voxel faces with the staircase form of the 45°
//! rule: a down-facing face is supported when any voxel in the 3×3 window
//! one layer below is solid. Faces resting on the build plate never violate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{components, distance_transform, surface_faces, Connectivity, Phase, PrintabilitySpec, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverhangReport {
    pub violating_faces: usize,
    pub exposed_faces: usize,
    pub violation_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThicknessReport {
    /// mm
    pub min_local_thickness: f64,
    /// mm
    pub mean_local_thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoidEntry {
    /// mm³
    pub volume: f64,
    pub below_fill_threshold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    /// mm³
    pub support_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub overhang: OverhangReport,
    pub thickness: ThicknessReport,
    pub voids: Vec<VoidEntry>,
    pub solid_components: usize,
    pub support: SupportReport,
    pub manufacturable: bool,
}

impl ConstraintReport {
    pub fn sub_threshold_voids(&self) -> usize {
        self.voids.iter().filter(|v| v.below_fill_threshold).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairOptions {
    pub drop_islands: bool,
    pub fill_voids: bool,
    pub add_support_columns: bool,
    pub thicken: bool,
    pub max_outer_iterations: usize,
}

impl Default for RepairOptions {
    fn default() -> Self {
        Self { drop_islands: true, fill_voids: true, add_support_columns: true, thicken: true, max_outer_iterations: 5 }
    }
}

impl RepairOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_islands || self.fill_voids || self.add_support_columns || self.thicken) {
            return Err(Error::InvalidConfig("at least one repair strategy must be enabled".into()));
        }
        Ok(())
    }
}

/// Horizontal reach (in voxels) of the support window one layer below.
/// 45° gives the 3×3 window.
pub fn support_radius(spec: &PrintabilitySpec) -> i64 {
    (spec.max_overhang_deg.to_radians().tan() + 1e-9).floor() as i64
}

/// Whether the down face of occupied voxel `(x, y, z)` is an unsupported overhang.
#[inline]
pub fn is_overhang(g: &VoxelGrid, x: usize, y: usize, z: usize, radius: i64) -> bool {
    if z == 0 {
        return false;
    }
    let (x, y, below) = (x as i64, y as i64, z as i64 - 1);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if g.get_signed(x + dx, y + dy, below) {
                return false;
            }
        }
    }
    true
}

pub fn overhang_voxels(g: &VoxelGrid, spec: &PrintabilitySpec) -> Vec<[usize; 3]> {
    let r = support_radius(spec);
    g.occupied().filter(|&[x, y, z]| is_overhang(g, x, y, z, r)).collect()
}

pub fn check_overhang(g: &VoxelGrid, spec: &PrintabilitySpec) -> OverhangReport {
    let violating_faces = overhang_voxels(g, spec).len();
    let exposed_faces = surface_faces(g).len();
    OverhangReport {
        violating_faces,
        exposed_faces,
        violation_fraction: violating_faces as f64 / exposed_faces.max(1) as f64,
    }
}

/// Local thickness per voxel in mm (0 for empty voxels).
///
/// Each occupied voxel takes the largest ball, centered at an occupied voxel
/// `c` with radius `d(c)`, that strictly contains its center; the thickness is
/// `2 * (d(c) - pitch / 2)`.
pub fn local_thickness(g: &VoxelGrid) -> Vec<f64> {
    let dt = distance_transform(g);
    let sq = dt.squared_voxels();
    let pitch = g.pitch();
    let mut centers: Vec<usize> = (0..g.len()).filter(|&i| g.occupancy()[i]).collect();
    centers.sort_by(|&a, &b| sq[b].cmp(&sq[a]).then(a.cmp(&b)));

    let mut best: Vec<u64> = vec![0; g.len()];
    let mut remaining = centers.len();
    for &c in &centers {
        if remaining == 0 {
            break;
        }
        let dc = sq[c];
        let rc = (dc as f64).sqrt();
        let [cx, cy, cz] = g.coords(c);
        let (cx, cy, cz) = (cx as i64, cy as i64, cz as i64);

        // A ball nested inside a neighbor's ball never wins.
        let mut nested = false;
        'outer: for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if let Some(j) = g.checked_index(cx + dx, cy + dy, cz + dz) {
                        let dist = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                        if j != c && sq[j] > dc && (sq[j] as f64).sqrt() >= dist + rc + 1e-9 {
                            nested = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if nested {
            continue;
        }

        let r = rc.ceil() as i64;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy + dz * dz) as u64) >= dc {
                        continue;
                    }
                    if let Some(v) = g.checked_index(cx + dx, cy + dy, cz + dz) {
                        if g.occupancy()[v] && best[v] == 0 {
                            best[v] = dc;
                            remaining -= 1;
                        }
                    }
                }
            }
        }
    }
    best.iter().map(|&d| if d == 0 { 0.0 } else { (2.0 * (d as f64).sqrt() - 1.0) * pitch }).collect()
}

pub fn wall_thickness(g: &VoxelGrid) -> Result<ThicknessReport> {
    if g.is_empty() {
        return Err(Error::NoSolidMaterial);
    }
    let lt = local_thickness(g);
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &t) in lt.iter().enumerate() {
        if g.occupancy()[i] {
            min = min.min(t);
            sum += t;
            n += 1;
        }
    }
    Ok(ThicknessReport { min_local_thickness: min, mean_local_thickness: sum / n as f64 })
}

/// Finds enclosed voids (6-connected empty regions off the grid boundary) and
/// optionally fills those below the fill threshold.
pub fn voids(g: &VoxelGrid, spec: &PrintabilitySpec, fill: bool) -> (VoxelGrid, Vec<VoidEntry>) {
    let comps = components(g, Phase::Empty, Connectivity::Six);
    let vol = g.voxel_volume();
    let mut entries = Vec::new();
    let mut fill_label = vec![false; comps.len()];
    for (label, region) in comps.regions.iter().enumerate() {
        if region.touches_boundary {
            continue;
        }
        let volume = region.voxel_count as f64 * vol;
        let below = volume < spec.max_fill_void;
        fill_label[label] = below && fill;
        entries.push(VoidEntry { volume, below_fill_threshold: below });
    }
    let mut out = g.clone();
    if fill {
        for (i, label) in comps.labels.iter().enumerate() {
            if let Some(l) = label {
                if fill_label[*l as usize] {
                    out.set_index(i, true);
                }
            }
        }
    }
    (out, entries)
}

/// Empty voxels in the straight columns beneath violating faces, down to
/// the first solid voxel or the plate.
pub fn support_voxels(g: &VoxelGrid, spec: &PrintabilitySpec) -> Vec<bool> {
    let mut support = vec![false; g.len()];
    for [x, y, z] in overhang_voxels(g, spec) {
        for zz in (0..z).rev() {
            let i = g.index(x, y, zz);
            if g.occupancy()[i] {
                break;
            }
            support[i] = true;
        }
    }
    support
}

pub fn support_estimate(g: &VoxelGrid, spec: &PrintabilitySpec) -> SupportReport {
    let count = support_voxels(g, spec).iter().filter(|&&b| b).count();
    SupportReport { support_volume: count as f64 * g.voxel_volume() }
}

pub fn solid_component_count(g: &VoxelGrid) -> usize {
    components(g, Phase::Solid, Connectivity::TwentySix).len()
}

pub fn evaluate(g: &VoxelGrid, spec: &PrintabilitySpec) -> ConstraintReport {
    let overhang = check_overhang(g, spec);
    let thickness =
        wall_thickness(g).unwrap_or(ThicknessReport { min_local_thickness: 0.0, mean_local_thickness: 0.0 });
    let (_, void_entries) = voids(g, spec, false);
    let solid_components = solid_component_count(g);
    let support = support_estimate(g, spec);
    let manufacturable = !g.is_empty()
        && overhang.violating_faces == 0
        && thickness.min_local_thickness >= spec.t_min
        && void_entries.iter().all(|v| !v.below_fill_threshold)
        && solid_components == 1;
    ConstraintReport { overhang, thickness, voids: void_entries, solid_components, support, manufacturable }
}

/// Keeps only the largest 26-connected solid component.
pub fn keep_largest_component(g: &VoxelGrid) -> VoxelGrid {
    let comps = components(g, Phase::Solid, Connectivity::TwentySix);
    let Some(keep) = comps.largest() else {
        return g.clone();
    };
    let mut out = g.clone();
    for (i, label) in comps.labels.iter().enumerate() {
        if matches!(label, Some(l) if *l != keep) {
            out.set_index(i, false);
        }
    }
    out
}

/// Grows columns under every violating face, one layer at a time from the top.
pub fn add_support_columns(g: &VoxelGrid, spec: &PrintabilitySpec) -> VoxelGrid {
    let r = support_radius(spec);
    let [nx, ny, nz] = g.dims();
    let mut out = g.clone();
    loop {
        let mut changed = false;
        for z in (1..nz).rev() {
            let mut layer = Vec::new();
            for y in 0..ny {
                for x in 0..nx {
                    if out.get(x, y, z) && is_overhang(&out, x, y, z, r) {
                        layer.push((x, y));
                    }
                }
            }
            for (x, y) in layer {
                out.set(x, y, z - 1, true);
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

const MAX_THICKEN_RINGS: usize = 10;

/// Dilates under-thickness voxels into the surrounding 3×3×3 block, ring by
/// ring. A face-neighbor ring would leave thin octahedral tips after every
/// round. When a ring adds nothing (a thin voxel on the plate or the grid
/// edge whose block is full), the reach grows by one voxel.
pub fn thicken(g: &VoxelGrid, spec: &PrintabilitySpec) -> VoxelGrid {
    let mut out = g.clone();
    let mut reach = 1i64;
    for _ in 0..MAX_THICKEN_RINGS {
        let lt = local_thickness(&out);
        let thin: Vec<usize> = (0..out.len()).filter(|&i| out.occupancy()[i] && lt[i] < spec.t_min).collect();
        if thin.is_empty() {
            break;
        }
        let mut next = out.clone();
        for i in thin {
            let [x, y, z] = out.coords(i).map(|c| c as i64);
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if let Some(j) = out.checked_index(x + dx, y + dy, z + dz) {
                            next.set_index(j, true);
                        }
                    }
                }
            }
        }
        if next == out {
            reach += 1;
        } else {
            out = next;
        }
    }
    out
}

pub fn repair(g: &VoxelGrid, spec: &PrintabilitySpec, opts: &RepairOptions) -> Result<VoxelGrid> {
    opts.validate()?;
    let mut cur = g.clone();
    for _ in 0..opts.max_outer_iterations {
        if evaluate(&cur, spec).manufacturable {
            return Ok(cur);
        }
        if opts.drop_islands {
            cur = keep_largest_component(&cur);
        }
        if opts.fill_voids {
            cur = voids(&cur, spec, true).0;
        }
        if opts.add_support_columns {
            cur = add_support_columns(&cur, spec);
        }
        if opts.thicken {
            cur = thicken(&cur, spec);
        }
    }
    if evaluate(&cur, spec).manufacturable {
        Ok(cur)
    } else {
        Err(Error::RepairDidNotConverge(opts.max_outer_iterations))
    }
}
