//! Grid and mesh persistence: the native VXG grid format, watertight
//! face-based meshing, binary/ASCII STL, and parity voxelization of meshes.

mod mesh;
mod stl;
mod voxelize;
mod vxg;

pub use mesh::{grid_to_mesh, TriangleMesh};
pub use stl::{decode_stl, encode_stl_ascii, encode_stl_binary, load_stl, save_stl, STL_HEADER_LEN};
pub use voxelize::{voxelize, voxelize_fit};
pub use vxg::{decode_vxg, encode_vxg, load_vxg, save_vxg, VXG_MAGIC};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mesh_round_trips_through_voxelize(seed in any::<u64>(), n in 1usize..9, density in 0.05f64..0.95, half in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pitch = if half { 0.5 } else { 1.0 };
            let g = VoxelGrid::from_fn([n, n + 1, n], pitch, |_, _, _| rng.random_bool(density)).unwrap();
            prop_assume!(!g.is_empty());
            let m = grid_to_mesh(&g).unwrap();
            prop_assert!(m.is_watertight());
            prop_assert_eq!(m.signed_volume(), g.count() as f64 * g.voxel_volume());
            prop_assert_eq!(voxelize(&m, pitch, g.dims()).unwrap(), g.clone());
            let back = decode_stl(&encode_stl_binary(&m)).unwrap();
            prop_assert_eq!(voxelize(&back, pitch, g.dims()).unwrap(), g);
        }
    }
}
