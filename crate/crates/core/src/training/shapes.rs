//! Procedural printable shapes used as training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::evaluate;
use crate::error::{Error, Result};
use crate::grid::{PrintabilitySpec, VoxelGrid};

pub const MAX_TRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Axis-aligned block on the plate.
    Box,
    /// Vertical cylinder on the plate.
    Cylinder,
    /// Stepped pyramid on a short plinth, one voxel inset per layer (45° flanks).
    Pyramid,
    /// Plate with an upright wall at one end.
    LBracket,
    /// Two pillars joined by crossing 45° braces that rise from the plate.
    Lattice,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Pyramid, ShapeKind::LBracket, ShapeKind::Lattice];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Voxels per side of the cubic output grid.
    pub resolution: usize,
    /// mm
    pub pitch: f64,
    /// Wall or strut width in voxels.
    pub width: usize,
    pub printability: PrintabilitySpec,
}

/// Narrowest voxel slab whose local thickness reaches `t_min`. A slab `w`
/// voxels wide measures `w` when `w` is odd and `w − 1` when even.
pub fn min_strut_width(spec: &PrintabilitySpec, pitch: f64) -> usize {
    let m = ((spec.t_min / pitch) - 1e-9).ceil().max(1.0) as usize;
    if m.is_multiple_of(2) {
        m + 1
    } else {
        m
    }
}

impl ShapeSpec {
    /// A spec with the narrowest width that meets `printability.t_min`.
    pub fn new(kind: ShapeKind, resolution: usize, pitch: f64, printability: PrintabilitySpec) -> Self {
        Self { kind, resolution, pitch, width: min_strut_width(&printability, pitch), printability }
    }

    pub fn validate(&self) -> Result<()> {
        self.printability.validate()?;
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::InvalidConfig(format!("pitch must be positive, got {}", self.pitch)));
        }
        if self.width == 0 {
            return Err(Error::InvalidConfig("shape width must be at least 1 voxel".into()));
        }
        if self.resolution < 2 * self.width + 4 {
            return Err(Error::InvalidConfig(format!(
                "resolution {} too small for width {}",
                self.resolution, self.width
            )));
        }
        Ok(())
    }
}

fn span(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn build(spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> Result<VoxelGrid> {
    let r = spec.resolution;
    let w = spec.width;
    let dims = [r, r, r];
    let pitch = spec.pitch;
    match spec.kind {
        ShapeKind::Box => {
            let (sx, sy, sz) = (span(rng, w, r - 2), span(rng, w, r - 2), span(rng, w, r - 2));
            let (ox, oy) = (span(rng, 1, r - 1 - sx), span(rng, 1, r - 1 - sy));
            VoxelGrid::from_fn(dims, pitch, |x, y, z| {
                (ox..ox + sx).contains(&x) && (oy..oy + sy).contains(&y) && z < sz
            })
        }
        ShapeKind::Cylinder => {
            let max_r = (r as f64 - 2.0) / 2.0;
            let radius = rng.random_range((w as f64 / 2.0 + 0.5).min(max_r)..=max_r);
            let h = span(rng, w, r - 2);
            let c = r as f64 / 2.0;
            let (cx, cy) = (c + rng.random_range(-0.5..0.5), c + rng.random_range(-0.5..0.5));
            VoxelGrid::from_fn(dims, pitch, |x, y, z| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                z < h && dx * dx + dy * dy <= radius * radius
            })
        }
        ShapeKind::Pyramid => {
            let base = span(rng, w + 2, r - 2);
            let (ox, oy) = (span(rng, 1, r - 1 - base), span(rng, 1, r - 1 - base));
            // a plinth `w` layers tall, then one voxel inset per side and layer
            // until the top is `w` wide
            let steps = (base - w) / 2;
            VoxelGrid::from_fn(dims, pitch, |x, y, z| {
                if z >= w + steps {
                    return false;
                }
                let s = z.saturating_sub(w - 1);
                let (lo_x, lo_y, side) = (ox + s, oy + s, base - 2 * s);
                (lo_x..lo_x + side).contains(&x) && (lo_y..lo_y + side).contains(&y)
            })
        }
        ShapeKind::LBracket => {
            let len = span(rng, 2 * w, r - 2);
            let depth = span(rng, w, r - 2);
            let plate = span(rng, w, w + 1);
            let height = span(rng, plate + w, r - 2);
            let (ox, oy) = (span(rng, 1, r - 1 - len), span(rng, 1, r - 1 - depth));
            VoxelGrid::from_fn(dims, pitch, |x, y, z| {
                let in_y = (oy..oy + depth).contains(&y);
                let plate_part = (ox..ox + len).contains(&x) && z < plate;
                let wall_part = (ox..ox + w).contains(&x) && z < height;
                in_y && (plate_part || wall_part)
            })
        }
        ShapeKind::Lattice => {
            let brace = w + 2;
            let gap = span(rng, brace, r - 2 - 2 * w);
            let a = span(rng, 1, r - 1 - (2 * w + gap));
            let b = a + w + gap;
            let depth = span(rng, w, (w + 2).min(r - 2));
            let oy = span(rng, 1, r - 1 - depth);
            let height = span(rng, gap + w + 1, r - 2).min(r);
            VoxelGrid::from_fn(dims, pitch, |x, y, z| {
                if !(oy..oy + depth).contains(&y) || z >= height {
                    return false;
                }
                let pillar = (a..a + w).contains(&x) || (b..b + w).contains(&x);
                // braces climb one voxel per layer, from the foot of one pillar
                // into the other
                let up = z <= gap + w && (a + z..a + z + brace).contains(&x) && x < b + w;
                let down = z <= gap + w && x + z >= b + w - brace && x + z < b + w && x >= a;
                pillar || up || down
            })
        }
    }
}

/// A printable grid of the requested kind. Up to ten draws of the free
/// parameters are tried; width is never changed.
pub fn gen_shape(spec: &ShapeSpec, seed: u64) -> Result<VoxelGrid> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        let g = build(spec, &mut rng)?;
        if evaluate(&g, &spec.printability).manufacturable {
            return Ok(g);
        }
    }
    Err(Error::GeneratorFailed(MAX_TRIES))
}

/// `count` shapes cycling through the five kinds.
pub fn procedural_dataset(
    count: usize,
    resolution: usize,
    pitch: f64,
    printability: &PrintabilitySpec,
    seed: u64,
) -> Result<Vec<VoxelGrid>> {
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let spec = ShapeSpec::new(kind, resolution, pitch, *printability);
            gen_shape(&spec, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{check_overhang, wall_thickness};

    #[test]
    fn widths() {
        let s = PrintabilitySpec::default();
        assert_eq!(min_strut_width(&s, 1.0), 3);
        assert_eq!(min_strut_width(&PrintabilitySpec { t_min: 3.0, ..s }, 1.0), 3);
        assert_eq!(min_strut_width(&PrintabilitySpec { t_min: 4.0, ..s }, 1.0), 5);
        assert_eq!(min_strut_width(&s, 0.5), 5);
    }

    #[test]
    fn every_kind_generates() {
        let spec = PrintabilitySpec::default();
        for kind in ShapeKind::ALL {
            for res in [16, 32] {
                for seed in 0..20 {
                    let s = ShapeSpec::new(kind, res, 1.0, spec);
                    let g = gen_shape(&s, seed).unwrap_or_else(|e| panic!("{kind:?} {res} {seed}: {e}"));
                    assert!(evaluate(&g, &spec).manufacturable);
                    assert_eq!(gen_shape(&s, seed).unwrap(), g);
                }
            }
        }
    }

    #[test]
    fn six_cube_box_is_printable() {
        let g = VoxelGrid::from_fn([8, 8, 8], 1.0, |x, y, z| x < 6 && y < 6 && z < 6).unwrap();
        assert!(evaluate(&g, &PrintabilitySpec::default()).manufacturable);
    }

    #[test]
    fn pyramid_has_no_overhang() {
        let spec = PrintabilitySpec::default();
        for seed in 0..10 {
            let g = gen_shape(&ShapeSpec::new(ShapeKind::Pyramid, 16, 1.0, spec), seed).unwrap();
            assert_eq!(check_overhang(&g, &spec).violating_faces, 0);
        }
    }

    #[test]
    fn thin_lattice_is_rejected() {
        let spec = PrintabilitySpec::default();
        let thin = ShapeSpec { width: 1, ..ShapeSpec::new(ShapeKind::Lattice, 16, 1.0, spec) };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = build(&thin, &mut rng).unwrap();
        assert!(wall_thickness(&g).unwrap().min_local_thickness < spec.t_min);
        assert!(matches!(gen_shape(&thin, 4), Err(Error::GeneratorFailed(10))));
    }
}
