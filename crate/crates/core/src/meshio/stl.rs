use std::fmt::Write as _;
use std::path::Path;

use super::mesh::{triangle_normal, TriangleMesh};
use crate::error::{Error, Result};

pub const STL_HEADER_LEN: usize = 80;
const RECORD_LEN: usize = 50;

pub fn encode_stl_binary(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(STL_HEADER_LEN + 4 + RECORD_LEN * mesh.triangles.len());
    let mut header = [0u8; STL_HEADER_LEN];
    let tag = b"voxfab binary STL, units mm";
    header[..tag.len()].copy_from_slice(tag);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in 0..mesh.triangles.len() {
        let normal = mesh.normals.get(t).copied().unwrap_or([0.0; 3]);
        for c in normal.into_iter().chain(mesh.triangle(t).into_iter().flatten()) {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn encode_stl_ascii(mesh: &TriangleMesh) -> String {
    let mut s = String::from("solid voxfab\n");
    for t in 0..mesh.triangles.len() {
        let n = mesh.normals.get(t).copied().unwrap_or([0.0; 3]);
        let _ = writeln!(s, "  facet normal {:e} {:e} {:e}", n[0] as f32, n[1] as f32, n[2] as f32);
        s.push_str("    outer loop\n");
        for v in mesh.triangle(t) {
            let _ = writeln!(s, "      vertex {:e} {:e} {:e}", v[0] as f32, v[1] as f32, v[2] as f32);
        }
        s.push_str("    endloop\n  endfacet\n");
    }
    s.push_str("endsolid voxfab\n");
    s
}

fn f32_at(bytes: &[u8], at: usize) -> f64 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
}

fn decode_binary(bytes: &[u8]) -> Result<TriangleMesh> {
    let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(RECORD_LEN)
        .and_then(|n| n.checked_add(84))
        .ok_or_else(|| Error::Format(format!("STL triangle count {count} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "STL declares {count} triangles ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let mut soup = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for t in 0..count {
        let base = 84 + t * RECORD_LEN;
        let n = [f32_at(bytes, base), f32_at(bytes, base + 4), f32_at(bytes, base + 8)];
        let v = |k: usize| {
            let o = base + 12 + 12 * k;
            [f32_at(bytes, o), f32_at(bytes, o + 4), f32_at(bytes, o + 8)]
        };
        soup.push([v(0), v(1), v(2)]);
        normals.push(n);
    }
    Ok(with_normals(soup, normals))
}

/// Keeps stored normals, recomputing any that are zero.
fn with_normals(soup: Vec<[[f64; 3]; 3]>, normals: Vec<[f64; 3]>) -> TriangleMesh {
    let mut mesh = TriangleMesh::from_soup(&soup);
    for (t, n) in normals.into_iter().enumerate() {
        if n != [0.0; 3] {
            mesh.normals[t] = n;
        } else {
            let [a, b, c] = soup[t];
            mesh.normals[t] = triangle_normal(a, b, c);
        }
    }
    mesh
}

fn decode_ascii(text: &str) -> Result<TriangleMesh> {
    let mut tokens = text.split_whitespace().peekable();
    let mut soup = Vec::new();
    let mut normals = Vec::new();
    let number = |tokens: &mut std::iter::Peekable<std::str::SplitWhitespace>| -> Result<f64> {
        let tok = tokens.next().ok_or_else(|| Error::Format("truncated ASCII STL".into()))?;
        tok.parse::<f32>().map(|v| v as f64).map_err(|_| Error::Format(format!("bad number {tok:?} in ASCII STL")))
    };
    let expect = |tokens: &mut std::iter::Peekable<std::str::SplitWhitespace>, word: &str| -> Result<()> {
        match tokens.next() {
            Some(t) if t == word => Ok(()),
            Some(t) => Err(Error::Format(format!("expected {word:?}, found {t:?} in ASCII STL"))),
            None => Err(Error::Format("truncated ASCII STL".into())),
        }
    };
    expect(&mut tokens, "solid")?;
    // optional solid name
    while let Some(&t) = tokens.peek() {
        if t == "facet" || t == "endsolid" {
            break;
        }
        tokens.next();
    }
    loop {
        match tokens.next() {
            Some("facet") => {
                expect(&mut tokens, "normal")?;
                let n = [number(&mut tokens)?, number(&mut tokens)?, number(&mut tokens)?];
                expect(&mut tokens, "outer")?;
                expect(&mut tokens, "loop")?;
                let mut tri = [[0.0; 3]; 3];
                for v in &mut tri {
                    expect(&mut tokens, "vertex")?;
                    *v = [number(&mut tokens)?, number(&mut tokens)?, number(&mut tokens)?];
                }
                expect(&mut tokens, "endloop")?;
                expect(&mut tokens, "endfacet")?;
                soup.push(tri);
                normals.push(n);
            }
            Some("endsolid") => break,
            Some(t) => return Err(Error::Format(format!("unexpected {t:?} in ASCII STL"))),
            None => return Err(Error::Format("ASCII STL missing endsolid".into())),
        }
    }
    Ok(with_normals(soup, normals))
}

/// Reads binary STL, or ASCII STL when the file is not a consistent binary one.
pub fn decode_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    if bytes.len() >= 84 {
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as u64;
        if 84 + count * RECORD_LEN as u64 == bytes.len() as u64 {
            return decode_binary(bytes);
        }
    }
    let looks_ascii = bytes.trim_ascii_start().starts_with(b"solid")
        && std::str::from_utf8(bytes).is_ok_and(|s| s.contains("endsolid") || s.contains("facet"));
    if looks_ascii {
        return decode_ascii(std::str::from_utf8(bytes).unwrap());
    }
    if bytes.len() < 84 {
        return Err(Error::Format(format!("truncated STL: {} bytes", bytes.len())));
    }
    decode_binary(bytes)
}

pub fn save_stl(path: impl AsRef<Path>, mesh: &TriangleMesh, ascii: bool) -> Result<()> {
    if ascii {
        std::fs::write(path, encode_stl_ascii(mesh))?;
    } else {
        std::fs::write(path, encode_stl_binary(mesh))?;
    }
    Ok(())
}

pub fn load_stl(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    decode_stl(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;
    use crate::meshio::grid_to_mesh;

    fn soup(m: &TriangleMesh) -> Vec<[[u32; 3]; 3]> {
        let mut s: Vec<_> =
            (0..m.triangles.len()).map(|t| m.triangle(t).map(|v| v.map(|c| (c as f32).to_bits()))).collect();
        s.sort_unstable();
        s
    }

    fn cube() -> TriangleMesh {
        let g = VoxelGrid::from_fn([1, 1, 1], 1.0, |_, _, _| true).unwrap();
        grid_to_mesh(&g).unwrap()
    }

    #[test]
    fn binary_layout() {
        let bytes = encode_stl_binary(&cube());
        assert_eq!(bytes.len(), 684);
        assert_eq!(u32::from_le_bytes(bytes[80..84].try_into().unwrap()), 12);
        for t in 0..12 {
            let at = 84 + t * 50 + 48;
            assert_eq!(&bytes[at..at + 2], &[0, 0]);
        }
        assert!(!bytes.starts_with(b"solid"));
    }

    #[test]
    fn binary_round_trip() {
        let m = cube();
        let back = decode_stl(&encode_stl_binary(&m)).unwrap();
        assert_eq!(soup(&back), soup(&m));
        assert_eq!(back.vertices.len(), 8);
        assert!(back.is_watertight());
        assert_eq!(back.normals, m.normals);
    }

    #[test]
    fn ascii_round_trip() {
        let m = cube();
        let text = encode_stl_ascii(&m);
        let back = decode_stl(text.as_bytes()).unwrap();
        assert_eq!(soup(&back), soup(&m));
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let mut bytes = encode_stl_binary(&cube());
        bytes[80..84].copy_from_slice(&13u32.to_le_bytes());
        assert!(matches!(decode_stl(&bytes), Err(Error::Format(m)) if m.contains("declares 13")));
        let bytes = encode_stl_binary(&cube());
        assert!(decode_stl(&bytes[..bytes.len() - 7]).is_err());
        assert!(decode_stl(&bytes[..40]).is_err());
        assert!(decode_stl(b"solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0").is_err());
    }
}
