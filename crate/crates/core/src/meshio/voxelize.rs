use super::mesh::TriangleMesh;
use crate::error::{Error, Result};
use crate::grid::{Dims, VoxelGrid};

// Rays run through voxel centers nudged off the face diagonals of
// voxel-surface meshes, so no ray grazes a shared triangle edge.
const NUDGE_X: f64 = 1.0e-6 * std::f64::consts::SQRT_2;
const NUDGE_Y: f64 = 1.0e-6 * std::f64::consts::LN_2;

/// Top-left fill rule on a counter-clockwise edge `a -> b`.
fn top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[1] == b[1] && b[0] < a[0]) || b[1] < a[1]
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Even-odd classification of voxel centers against a closed mesh, casting
/// one +z ray per `(x, y)` column.
pub fn voxelize(mesh: &TriangleMesh, pitch: f64, dims: Dims) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::empty(dims, pitch)?;
    let [nx, ny, nz] = dims;
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); nx * ny];

    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        let (mut p0, mut p1, p2) = ([a[0], a[1]], [b[0], b[1]], [c[0], c[1]]);
        let (mut z0, mut z1, z2) = (a[2], b[2], c[2]);
        let area = edge(p0, p1, p2);
        if area == 0.0 {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut p0, &mut p1);
            std::mem::swap(&mut z0, &mut z1);
        }
        let lo = [p0[0].min(p1[0]).min(p2[0]), p0[1].min(p1[1]).min(p2[1])];
        let hi = [p0[0].max(p1[0]).max(p2[0]), p0[1].max(p1[1]).max(p2[1])];
        let first = |v: f64, n: usize| ((v / pitch - 1.0).floor().max(0.0) as usize).min(n);
        let last = |v: f64, n: usize| ((v / pitch + 1.0).ceil().max(0.0) as usize).min(n);
        let (x_start, x_end) = (first(lo[0], nx), last(hi[0], nx));
        let (y_start, y_end) = (first(lo[1], ny), last(hi[1], ny));
        let area = edge(p0, p1, p2);
        for y in y_start..y_end {
            for x in x_start..x_end {
                let p = [(x as f64 + 0.5 + NUDGE_X) * pitch, (y as f64 + 0.5 + NUDGE_Y) * pitch];
                let w0 = edge(p1, p2, p);
                let w1 = edge(p2, p0, p);
                let w2 = edge(p0, p1, p);
                let inside = |w: f64, a: [f64; 2], b: [f64; 2]| w > 0.0 || (w == 0.0 && top_left(a, b));
                if inside(w0, p1, p2) && inside(w1, p2, p0) && inside(w2, p0, p1) {
                    let z = (w0 * z0 + w1 * z1 + w2 * z2) / area;
                    crossings[x + nx * y].push(z);
                }
            }
        }
    }

    for y in 0..ny {
        for x in 0..nx {
            let col = &mut crossings[x + nx * y];
            if col.len() % 2 == 1 {
                return Err(Error::OpenMesh { x, y });
            }
            col.sort_by(f64::total_cmp);
            let mut k = 0;
            for z in 0..nz {
                let center = (z as f64 + 0.5) * pitch;
                while k < col.len() && col[k] < center {
                    k += 1;
                }
                if k % 2 == 1 {
                    grid.set(x, y, z, true);
                }
            }
        }
    }
    Ok(grid)
}

/// Voxelizes a mesh onto a grid covering its bounding box. Axes with negative
/// coordinates are shifted to start at 0; the origin is kept otherwise so
/// parts keep their height above the build plate.
pub fn voxelize_fit(mesh: &TriangleMesh, pitch: f64) -> Result<VoxelGrid> {
    if mesh.triangles.is_empty() {
        return Err(Error::Format("mesh has no triangles".into()));
    }
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(Error::InvalidConfig(format!("pitch must be positive, got {pitch}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let shift: [f64; 3] = lo.map(|l| if l < 0.0 { -l } else { 0.0 });
    let dims = [0, 1, 2].map(|a| (((hi[a] + shift[a]) / pitch - 1e-9).ceil().max(1.0)) as usize);
    let moved;
    let mesh = if shift != [0.0; 3] {
        let mut m = mesh.clone();
        for v in &mut m.vertices {
            for a in 0..3 {
                v[a] += shift[a];
            }
        }
        moved = m;
        &moved
    } else {
        mesh
    };
    voxelize(mesh, pitch, dims)
}
