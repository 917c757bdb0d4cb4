//! Binary persistence for condensed token sets.
//!
//! Little-endian layout:
//!
//! ```text
//! "CLFT" | version u32 | N_s u32 | D u32 | n_views u32
//! n_views × 3 f32                       camera centers
//! N_s × (6 f32 ray | D f32 embedding | u32 source view)
//! ```

use std::path::Path;

use clift_tensor::Tensor;

use crate::condenser::CliftSet;
use crate::error::{CliftError, Result};

pub const MAGIC: &[u8; 4] = b"CLFT";
pub const VERSION: u32 = 1;

/// Header size in bytes for a set drawn from `n_views` views.
pub fn header_bytes(n_views: usize) -> usize {
    20 + 12 * n_views
}

/// Bytes per stored token for embedding width `dim`.
pub fn token_bytes(dim: usize) -> usize {
    (6 + dim) * 4 + 4
}

/// Encoded size of a set; linear in the token count.
pub fn encoded_size(n_tokens: usize, dim: usize, n_views: usize) -> usize {
    header_bytes(n_views) + n_tokens * token_bytes(dim)
}

pub fn to_bytes(set: &CliftSet) -> Result<Vec<u8>> {
    set.validate()?;
    let (n, d) = (set.len(), set.dim());
    let mut out = Vec::with_capacity(encoded_size(n, d, set.view_centers.len()));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, d as u32, set.view_centers.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in set.view_centers.iter().flatten() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for i in 0..n {
        for v in set.rays[i].iter().chain(set.embeddings.row(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&set.source_view[i].to_le_bytes());
    }
    Ok(out)
}

/// Decodes a set. Provenance is not stored and comes back empty.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<CliftSet> {
    let err = |d: String| CliftError::format(origin, d);
    if bytes.len() < 20 {
        return Err(err(format!(
            "{} bytes is shorter than the 20-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("bad magic, expected CLFT".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let float = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let (n, d, nv) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let expected = nv
        .checked_mul(12)
        .and_then(|h| {
            (6 + d)
                .checked_mul(4)?
                .checked_add(4)?
                .checked_mul(n)?
                .checked_add(h + 20)
        })
        .ok_or_else(|| err("declared sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(err(format!(
            "N_s={n}, D={d}, {nv} views needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut pos = 20;
    let mut view_centers = Vec::with_capacity(nv);
    for _ in 0..nv {
        view_centers.push([float(pos), float(pos + 4), float(pos + 8)]);
        pos += 12;
    }
    let mut rays = Vec::with_capacity(n);
    let mut emb = Vec::with_capacity(n * d);
    let mut source_view = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = [0.0f32; 6];
        for (j, v) in r.iter_mut().enumerate() {
            *v = float(pos + 4 * j);
        }
        pos += 24;
        rays.push(r);
        for _ in 0..d {
            emb.push(float(pos));
            pos += 4;
        }
        let sv = word(pos);
        pos += 4;
        if sv as usize >= nv {
            return Err(err(format!("source view {sv} out of range for {nv} views")));
        }
        source_view.push(sv);
    }
    Ok(CliftSet {
        embeddings: Tensor::new(vec![n, d], emb)?,
        rays,
        source_view,
        view_centers,
        provenance: Vec::new(),
    })
}

pub fn save_clift(set: &CliftSet, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = to_bytes(set)?;
    std::fs::write(path, &bytes).map_err(|e| CliftError::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_clift(path: impl AsRef<Path>) -> Result<CliftSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CliftError::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, d: usize) -> CliftSet {
        CliftSet {
            embeddings: Tensor::from_fn(&[n, d], |i| i as f32 * 0.25 - 3.0),
            rays: (0..n)
                .map(|i| [i as f32, 0.5, -1.0, 2.0, 0.0, 1e-7])
                .collect(),
            source_view: (0..n).map(|i| (i % 2) as u32).collect(),
            view_centers: vec![[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]],
            provenance: Vec::new(),
        }
    }

    #[test]
    fn roundtrip() {
        let s = sample(5, 3);
        assert_eq!(from_bytes(&to_bytes(&s).unwrap(), "mem").unwrap(), s);
    }

    #[test]
    fn size_formula() {
        let s = sample(128, 64);
        let b = to_bytes(&s).unwrap();
        assert_eq!(b.len(), header_bytes(2) + 128 * (6 + 64) * 4 + 128 * 4);
    }

    #[test]
    fn bad_headers() {
        let b = to_bytes(&sample(2, 2)).unwrap();
        let mut m = b.clone();
        m[0] = b'X';
        assert!(from_bytes(&m, "mem").is_err());
        let mut v = b.clone();
        v[4] = 2;
        assert!(from_bytes(&v, "mem").is_err());
        assert!(from_bytes(&b[..10], "mem").is_err());
    }
}
