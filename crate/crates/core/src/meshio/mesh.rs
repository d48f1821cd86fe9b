use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{surface_faces, Direction, VoxelGrid};

/// Indexed triangle mesh in mm, counter-clockwise when seen from outside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<[f64; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn triangle_normal(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    if len == 0.0 {
        [0.0; 3]
    } else {
        [n[0] / len, n[1] / len, n[2] / len]
    }
}

impl TriangleMesh {
    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Builds an indexed mesh from a triangle soup, merging bit-identical vertices.
    pub fn from_soup(soup: &[[[f64; 3]; 3]]) -> Self {
        let mut index: HashMap<[u64; 3], u32> = HashMap::new();
        let mut mesh = TriangleMesh::default();
        for tri in soup {
            let ids = tri.map(|v| {
                let key = v.map(f64::to_bits);
                *index.entry(key).or_insert_with(|| {
                    mesh.vertices.push(v);
                    (mesh.vertices.len() - 1) as u32
                })
            });
            mesh.triangles.push(ids);
            mesh.normals.push(triangle_normal(tri[0], tri[1], tri[2]));
        }
        mesh
    }

    /// Divergence-theorem volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> f64 {
        let six: f64 = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                dot(a, cross(b, c))
            })
            .sum();
        six / 6.0
    }

    /// Every undirected edge is used by exactly two triangles, once in each direction.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let e = edges.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        !edges.is_empty() && edges.values().all(|&(f, r)| f == 1 && r == 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::Format(format!("triangle {t} indexes past {n} vertices")));
            }
            let [a, b, c] = self.triangle(t);
            if cross(sub(b, a), sub(c, a)) == [0.0; 3] {
                return Err(Error::Format(format!("triangle {t} is degenerate")));
            }
        }
        if self.normals.len() != self.triangles.len() {
            return Err(Error::Format("normal count differs from triangle count".into()));
        }
        Ok(())
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

type LatticeEdge = ([usize; 3], [usize; 3]);

/// Corners of a voxel face, counter-clockwise around the outward normal.
fn face_corners(voxel: [usize; 3], dir: Direction) -> [[usize; 3]; 4] {
    let (axis, positive) = match dir {
        Direction::PosX => (0, true),
        Direction::NegX => (0, false),
        Direction::PosY => (1, true),
        Direction::NegY => (1, false),
        Direction::PosZ => (2, true),
        Direction::NegZ => (2, false),
    };
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut base = voxel;
    if positive {
        base[axis] += 1;
    }
    let corner = |du: usize, dv: usize| {
        let mut p = base;
        p[u] += du;
        p[v] += dv;
        p
    };
    let ccw = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
    if positive {
        ccw
    } else {
        [ccw[0], ccw[3], ccw[2], ccw[1]]
    }
}

/// Two outward triangles per exposed voxel face.
///
/// Vertex copies are shared only across face edges that belong to the same
/// surface sheet, so each mesh edge bounds exactly two triangles. Where two
/// solid voxels touch along a single lattice edge, the four faces there are
/// paired either per solid voxel or per empty voxel; the per-empty pairing is
/// used on edges where the per-solid one would join the same two vertices twice.
pub fn grid_to_mesh(g: &VoxelGrid) -> Result<TriangleMesh> {
    let faces = surface_faces(g);
    if faces.is_empty() {
        return Err(Error::NoSolidMaterial);
    }
    let corners: Vec<[[usize; 3]; 4]> = faces.iter().map(|f| face_corners(f.voxel, f.direction)).collect();

    // lattice edge -> (face, edge slot) incidences
    let mut incidence: HashMap<LatticeEdge, Vec<(usize, usize)>> = HashMap::new();
    for (f, c) in corners.iter().enumerate() {
        for k in 0..4 {
            let (a, b) = (c[k], c[(k + 1) % 4]);
            incidence.entry((a.min(b), a.max(b))).or_default().push((f, k));
        }
    }
    let mut keys: Vec<_> = incidence.keys().copied().collect();
    keys.sort_unstable();
    let pinched: Vec<_> = keys.iter().copied().filter(|k| incidence[k].len() == 4).collect();

    let empty_side = |f: usize| {
        let [dx, dy, dz] = faces[f].direction.offset();
        let [x, y, z] = faces[f].voxel;
        [x as i64 + dx, y as i64 + dy, z as i64 + dz]
    };
    let pair_up = |inc: &[(usize, usize)], by_empty: bool| -> [[(usize, usize); 2]; 2] {
        let side = |f: usize| if by_empty { empty_side(f) } else { faces[f].voxel.map(|c| c as i64) };
        let first = inc[0];
        let mate = (1..4).find(|&j| side(inc[j].0) == side(first.0)).expect("faces pair at a pinched edge");
        let rest: Vec<_> = (1..4).filter(|&j| j != mate).map(|j| inc[j]).collect();
        [[first, inc[mate]], [rest[0], rest[1]]]
    };

    let mut by_empty: HashMap<([usize; 3], [usize; 3]), bool> = pinched.iter().map(|&k| (k, false)).collect();
    let mut sets;
    let mut attempt = 0;
    loop {
        sets = DisjointSet((0..faces.len() * 4).collect());
        for key in &keys {
            let inc = &incidence[key];
            match inc.len() {
                2 => glue(&mut sets, inc[0], inc[1]),
                4 => {
                    for [a, b] in pair_up(inc, by_empty[key]) {
                        glue(&mut sets, a, b);
                    }
                }
                n => unreachable!("lattice edge with {n} incident faces"),
            }
        }
        let mut doubled = Vec::new();
        for key in &pinched {
            let [[a, _], [c, _]] = pair_up(&incidence[key], by_empty[key]);
            let ends = |sets: &mut DisjointSet, (f, k): (usize, usize)| {
                let (u, v) = (sets.find(f * 4 + k), sets.find(f * 4 + (k + 1) % 4));
                (u.min(v), u.max(v))
            };
            if ends(&mut sets, a) == ends(&mut sets, c) {
                doubled.push(*key);
            }
        }
        if doubled.is_empty() {
            break;
        }
        attempt += 1;
        if attempt > 16 {
            return Err(Error::Format("could not build a manifold surface for this grid".into()));
        }
        for key in doubled {
            let flag = by_empty.get_mut(&key).unwrap();
            *flag = !*flag;
        }
    }

    let pitch = g.pitch();
    let mut vertex_of_root: HashMap<usize, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for (f, c) in corners.iter().enumerate() {
        let mut ids = [0u32; 4];
        for k in 0..4 {
            let root = sets.find(f * 4 + k);
            ids[k] = *vertex_of_root.entry(root).or_insert_with(|| {
                mesh.vertices.push(c[k].map(|v| v as f64 * pitch));
                (mesh.vertices.len() - 1) as u32
            });
        }
        let n = faces[f].normal;
        mesh.triangles.push([ids[0], ids[1], ids[2]]);
        mesh.triangles.push([ids[0], ids[2], ids[3]]);
        mesh.normals.push(n);
        mesh.normals.push(n);
    }
    Ok(mesh)
}

/// Joins two faces along a shared lattice edge. Edge slot `k` of a face runs
/// from corner `k` to corner `k + 1`; the mate runs the other way.
fn glue(sets: &mut DisjointSet, (fa, ka): (usize, usize), (fb, kb): (usize, usize)) {
    sets.union(fa * 4 + ka, fb * 4 + (kb + 1) % 4);
    sets.union(fa * 4 + (ka + 1) % 4, fb * 4 + kb);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_is_a_cube() {
        let g = VoxelGrid::from_fn([3, 3, 3], 1.0, |x, y, z| (x, y, z) == (1, 1, 1)).unwrap();
        let m = grid_to_mesh(&g).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.triangles.len(), 12);
        assert!(m.is_watertight());
        assert_eq!(m.signed_volume(), 1.0);
        m.validate().unwrap();
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(t);
            assert_eq!(triangle_normal(a, b, c), m.normals[t]);
        }
    }

    #[test]
    fn face_adjacent_pair() {
        let g = VoxelGrid::from_fn([2, 1, 1], 0.5, |_, _, _| true).unwrap();
        let m = grid_to_mesh(&g).unwrap();
        assert_eq!(m.triangles.len(), 20);
        assert_eq!(m.vertices.len(), 12);
        assert!(m.is_watertight());
        assert_eq!(m.signed_volume(), 2.0 * 0.125);
    }

    #[test]
    fn edge_touching_voxels_stay_manifold() {
        let g = VoxelGrid::from_fn([2, 2, 1], 1.0, |x, y, _| x == y).unwrap();
        let m = grid_to_mesh(&g).unwrap();
        assert_eq!(m.triangles.len(), 24);
        // the shared edge is split into two copies
        assert_eq!(m.vertices.len(), 16);
        assert!(m.is_watertight());
        assert_eq!(m.signed_volume(), 2.0);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let g = VoxelGrid::empty([2, 2, 2], 1.0).unwrap();
        assert!(grid_to_mesh(&g).is_err());
    }
}
