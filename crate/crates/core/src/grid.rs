//! Voxel occupancy grids and the geometric primitives built on them.
//!
//! Voxels are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. The center of voxel `(x, y, z)` sits at
//! `((x + 0.5) * pitch, (y + 0.5) * pitch, (z + 0.5) * pitch)` and the build
//! plate is the `z = 0` plane. Everything outside the grid is empty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
pub type Dims = [usize; 3];

fn check_dims(dims: Dims, pitch: f64) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
    }
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(Error::InvalidGrid(format!("pitch must be positive, got {pitch}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::InvalidGrid(format!("dims {dims:?} overflow")))
}

/// Binary occupancy at a fixed pitch (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    pitch: f64,
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    /// An all-empty grid.
    pub fn empty(dims: Dims, pitch: f64) -> Result<Self> {
        let len = check_dims(dims, pitch)?;
        Ok(Self { dims, pitch, occupancy: vec![false; len] })
    }

    pub fn from_occupancy(dims: Dims, pitch: f64, occupancy: Vec<bool>) -> Result<Self> {
        let len = check_dims(dims, pitch)?;
        if occupancy.len() != len {
            return Err(Error::InvalidGrid(format!(
                "occupancy has {} entries, dims {dims:?} need {len}",
                occupancy.len()
            )));
        }
        Ok(Self { dims, pitch, occupancy })
    }

    /// Builds a grid by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, pitch: f64, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut g = Self::empty(dims, pitch)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = g.index(x, y, z);
                    g.occupancy[i] = f(x, y, z);
                }
            }
        }
        Ok(g)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.occupancy.iter().any(|&b| b)
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)]
    }

    /// Signed lookup; anything outside the grid reads as empty.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64, z: i64) -> bool {
        match self.checked_index(x, y, z) {
            Some(i) => self.occupancy[i],
            None => false,
        }
    }

    #[inline]
    pub fn checked_index(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= nx || y as usize >= ny || z as usize >= nz {
            None
        } else {
            Some(self.index(x as usize, y as usize, z as usize))
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = value;
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        self.occupancy[i] = value;
    }

    /// Iterates the coordinates of occupied voxels in index order.
    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.occupancy.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| self.coords(i))
    }

    pub fn voxel_volume(&self) -> f64 {
        self.pitch * self.pitch * self.pitch
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
    }
}

/// Per-voxel occupancy probabilities, indexed like [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    dims: Dims,
    pitch: f64,
    values: Vec<f64>,
}

impl ProbGrid {
    pub fn new(dims: Dims, pitch: f64, values: Vec<f64>) -> Result<Self> {
        let len = check_dims(dims, pitch)?;
        if values.len() != len {
            return Err(Error::InvalidGrid(format!(
                "probability grid has {} values, dims {dims:?} need {len}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGrid(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { dims, pitch, values })
    }

    pub fn uniform(dims: Dims, pitch: f64, value: f64) -> Result<Self> {
        let len = check_dims(dims, pitch)?;
        Self::new(dims, pitch, vec![value; len])
    }

    /// The grid as a 0/1 probability field.
    pub fn from_voxels(g: &VoxelGrid) -> Self {
        Self { dims: g.dims, pitch: g.pitch, values: g.occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Printer-facing limits. Gravity is fixed to `(0, 0, -1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrintabilitySpec {
    /// Largest printable overhang, measured from vertical.
    pub max_overhang_deg: f64,
    /// Minimum wall thickness in mm.
    pub t_min: f64,
    /// Enclosed voids strictly smaller than this (mm³) are filled.
    pub max_fill_void: f64,
    /// Occupancy threshold applied to decoder probabilities.
    pub threshold: f64,
}

impl Default for PrintabilitySpec {
    fn default() -> Self {
        Self { max_overhang_deg: 45.0, t_min: 2.0, max_fill_void: 10.0, threshold: 0.5 }
    }
}

impl PrintabilitySpec {
    pub const GRAVITY: [f64; 3] = [0.0, 0.0, -1.0];

    pub fn validate(&self) -> Result<()> {
        if !(self.max_overhang_deg > 0.0 && self.max_overhang_deg < 90.0) {
            return Err(Error::InvalidConfig(format!(
                "max_overhang_deg must lie in (0, 90), got {}",
                self.max_overhang_deg
            )));
        }
        if !(self.t_min > 0.0) {
            return Err(Error::InvalidConfig(format!("t_min must be positive, got {}", self.t_min)));
        }
        if !(self.max_fill_void >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "max_fill_void must be non-negative, got {}",
                self.max_fill_void
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Axis-aligned face direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Direction {
    pub const ALL: [Direction; 6] =
        [Direction::PosX, Direction::NegX, Direction::PosY, Direction::NegY, Direction::PosZ, Direction::NegZ];

    pub fn offset(self) -> [i64; 3] {
        match self {
            Direction::PosX => [1, 0, 0],
            Direction::NegX => [-1, 0, 0],
            Direction::PosY => [0, 1, 0],
            Direction::NegY => [0, -1, 0],
            Direction::PosZ => [0, 0, 1],
            Direction::NegZ => [0, 0, -1],
        }
    }

    pub fn normal(self) -> [f64; 3] {
        let [x, y, z] = self.offset();
        [x as f64, y as f64, z as f64]
    }
}

/// An exposed voxel face: occupied on one side, empty (or outside) on the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFace {
    pub voxel: [usize; 3],
    pub direction: Direction,
    pub normal: [f64; 3],
}

/// Occupied iff `p >= threshold`.
pub fn threshold(p: &ProbGrid, spec: &PrintabilitySpec) -> VoxelGrid {
    VoxelGrid { dims: p.dims, pitch: p.pitch, occupancy: p.values.iter().map(|&v| v >= spec.threshold).collect() }
}

pub fn surface_faces(g: &VoxelGrid) -> Vec<SurfaceFace> {
    let mut faces = Vec::new();
    for [x, y, z] in g.occupied() {
        for dir in Direction::ALL {
            let [dx, dy, dz] = dir.offset();
            if !g.get_signed(x as i64 + dx, y as i64 + dy, z as i64 + dz) {
                faces.push(SurfaceFace { voxel: [x, y, z], direction: dir, normal: dir.normal() });
            }
        }
    }
    faces
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Morphology {
    Erode,
    Dilate,
}

/// Iterated erosion or dilation with the 6-connected cross.
///
/// Erosion treats out-of-grid voxels as empty. Dilation clips at the grid
/// bounds.
pub fn morphology(g: &VoxelGrid, mode: Morphology, rounds: usize) -> VoxelGrid {
    let mut cur = g.clone();
    for _ in 0..rounds {
        let mut next = cur.clone();
        for i in 0..cur.len() {
            let [x, y, z] = cur.coords(i);
            let (x, y, z) = (x as i64, y as i64, z as i64);
            let neighbors = Direction::ALL.iter().map(|d| {
                let [dx, dy, dz] = d.offset();
                cur.get_signed(x + dx, y + dy, z + dz)
            });
            next.occupancy[i] = match mode {
                Morphology::Erode => cur.occupancy[i] && neighbors.into_iter().all(|b| b),
                Morphology::Dilate => cur.occupancy[i] || neighbors.into_iter().any(|b| b),
            };
        }
        cur = next;
    }
    cur
}

/// Exact Euclidean distance from each occupied voxel center to the nearest
/// empty voxel center, including the empty shell one voxel beyond the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    dims: Dims,
    pitch: f64,
    /// Squared distance in voxel units; 0 for empty voxels.
    squared: Vec<u64>,
}

impl DistanceField {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn squared_voxels(&self) -> &[u64] {
        &self.squared
    }

    /// Distance at voxel index `i`, in mm.
    pub fn mm(&self, i: usize) -> f64 {
        (self.squared[i] as f64).sqrt() * self.pitch
    }

    pub fn to_mm(&self) -> Vec<f64> {
        (0..self.squared.len()).map(|i| self.mm(i)).collect()
    }
}

const EDT_INF: i64 = i64::MAX / 4;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[i64], out: &mut [i64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] >= EDT_INF {
            continue;
        }
        let fq = (f[q] + (q * q) as i64) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = (f[p] + (p * p) as i64) as f64;
                    let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = EDT_INF);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

pub fn distance_transform(g: &VoxelGrid) -> DistanceField {
    let [nx, ny, nz] = g.dims;
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    let pidx = |x: usize, y: usize, z: usize| x + px * (y + py * z);
    let mut field = vec![0i64; px * py * pz];
    for [x, y, z] in g.occupied() {
        field[pidx(x + 1, y + 1, z + 1)] = EDT_INF;
    }

    let mut v = Vec::new();
    let mut zs = Vec::new();
    let mut line = Vec::new();
    let mut out = Vec::new();
    let extents = [px, py, pz];
    let strides = [1, px, px * py];
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let (a1, a2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        line.resize(n, 0);
        out.resize(n, 0);
        for u in 0..extents[a1] {
            for w in 0..extents[a2] {
                let base = u * strides[a1] + w * strides[a2];
                for (t, l) in line.iter_mut().enumerate() {
                    *l = field[base + t * stride];
                }
                edt_1d(&line, &mut out, &mut v, &mut zs);
                for (t, o) in out.iter().enumerate() {
                    field[base + t * stride] = *o;
                }
            }
        }
    }

    let mut squared = vec![0u64; g.len()];
    for (i, sq) in squared.iter_mut().enumerate() {
        if g.occupancy[i] {
            let [x, y, z] = g.coords(i);
            *sq = field[pidx(x + 1, y + 1, z + 1)] as u64;
        }
    }
    DistanceField { dims: g.dims, pitch: g.pitch, squared }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Solid,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => Direction::ALL.iter().map(|d| d.offset()).collect(),
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub voxel_count: usize,
    /// Whether any voxel of the region lies on the outer layer of the grid.
    pub touches_boundary: bool,
}

/// Connected-component labeling of one phase.
#[derive(Debug, Clone)]
pub struct Components {
    /// Region index per voxel, `None` for voxels outside the phase.
    pub labels: Vec<Option<u32>>,
    pub regions: Vec<Region>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Index of the region with the most voxels (lowest label on ties).
    pub fn largest(&self) -> Option<u32> {
        self.regions
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.voxel_count.cmp(&b.voxel_count).then(ib.cmp(ia)))
            .map(|(i, _)| i as u32)
    }
}

/// Labels maximal connected regions of `phase`, in order of their lowest voxel index.
pub fn components(g: &VoxelGrid, phase: Phase, connectivity: Connectivity) -> Components {
    let want = phase == Phase::Solid;
    let offsets = connectivity.offsets();
    let [nx, ny, nz] = g.dims;
    let mut labels: Vec<Option<u32>> = vec![None; g.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..g.len() {
        if g.occupancy[seed] != want || labels[seed].is_some() {
            continue;
        }
        let label = regions.len() as u32;
        labels[seed] = Some(label);
        queue.push_back(seed);
        let mut region = Region { voxel_count: 0, touches_boundary: false };
        while let Some(i) = queue.pop_front() {
            region.voxel_count += 1;
            let [x, y, z] = g.coords(i);
            if x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
                region.touches_boundary = true;
            }
            for [dx, dy, dz] in &offsets {
                if let Some(j) = g.checked_index(x as i64 + dx, y as i64 + dy, z as i64 + dz) {
                    if g.occupancy[j] == want && labels[j].is_none() {
                        labels[j] = Some(label);
                        queue.push_back(j);
                    }
                }
            }
        }
        regions.push(region);
    }
    Components { labels, regions }
}
