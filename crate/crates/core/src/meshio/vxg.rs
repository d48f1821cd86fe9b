//! VXG layout: magic `VXG1`, `nx ny nz` as u32 LE, pitch as f32 LE (mm),
//! then `ceil(nx*ny*nz / 8)` payload bytes. Bit `i` of byte `j` holds voxel
//! `8*j + i` in x-fastest order; trailing bits are zero.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

pub const VXG_MAGIC: &[u8; 4] = b"VXG1";
const HEADER_LEN: usize = 4 + 12 + 4;

pub fn encode_vxg(g: &VoxelGrid) -> Vec<u8> {
    let payload = g.len().div_ceil(8);
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(VXG_MAGIC);
    for n in g.dims() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(g.pitch() as f32).to_le_bytes());
    let mut bytes = vec![0u8; payload];
    for (i, &b) in g.occupancy().iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bytes);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_vxg(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < 4 || &bytes[..4] != VXG_MAGIC {
        return Err(Error::Format("bad VXG magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated VXG header".into()));
    }
    let dims = [u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize];
    let pitch = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if pitch == 0.0 {
        return Err(Error::Format("zero pitch".into()));
    }
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(Error::Format(format!("invalid pitch {pitch}")));
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("invalid dims {dims:?}")))?;
    let payload = len.div_ceil(8);
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Format(format!("truncated VXG payload: {} of {payload} bytes", body.len())));
    }
    if body.len() > payload {
        return Err(Error::Format(format!("{} trailing bytes after VXG payload", body.len() - payload)));
    }
    if len % 8 != 0 && body[payload - 1] >> (len % 8) != 0 {
        return Err(Error::Format("nonzero trailing bits in VXG payload".into()));
    }
    let occupancy = (0..len).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    VoxelGrid::from_occupancy(dims, pitch as f64, occupancy)
}

pub fn save_vxg(path: impl AsRef<Path>, g: &VoxelGrid) -> Result<()> {
    std::fs::write(path, encode_vxg(g))?;
    Ok(())
}

pub fn load_vxg(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    decode_vxg(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_cubed_is_21_bytes() {
        let g = VoxelGrid::from_fn([2, 2, 2], 1.0, |x, y, z| x == y && y == z).unwrap();
        let bytes = encode_vxg(&g);
        assert_eq!(bytes.len(), 21);
        assert_eq!(&bytes[..4], b"VXG1");
        // voxels 0 and 7
        assert_eq!(bytes[20], 0b1000_0001);
    }

    #[test]
    fn rejects_corruption() {
        let g = VoxelGrid::from_fn([3, 2, 2], 0.5, |x, _, _| x == 1).unwrap();
        let good = encode_vxg(&g);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vxg(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(decode_vxg(&good[..good.len() - 1]).is_err());
        assert!(decode_vxg(&good[..10]).is_err());
        let mut zero = good.clone();
        zero[16..20].copy_from_slice(&0f32.to_le_bytes());
        assert!(matches!(decode_vxg(&zero), Err(Error::Format(m)) if m.contains("zero pitch")));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_vxg(&trailing).is_err());
        let mut bits = good;
        *bits.last_mut().unwrap() |= 0x80;
        assert!(decode_vxg(&bits).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in any::<u64>(), pitch in 0.01f32..10.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = VoxelGrid::from_fn([nx, ny, nz], pitch as f64, |_, _, _| rng.random_bool(0.5)).unwrap();
            let bytes = encode_vxg(&g);
            let back = decode_vxg(&bytes).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(encode_vxg(&back), bytes);
        }
    }
}
