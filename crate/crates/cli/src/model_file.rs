//! Binary shape-model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8  b"SHAPEMDL"
//! version    u32 (=1)
//! flags      u32 (bit 0: expression block present)
//! n_vertices u32
//! k_modes    u32
//! j_landmarks u32
//! n_triangles u32
//! z_convention u8 (0: smaller depth is nearer the camera)
//! units_len  u8, units bytes (e.g. "px")
//! mean       3N f64
//! eigvals    K f64
//! basis      3N*K f64 (column-major: mode k contiguous)
//! triangles  3*n_triangles u32
//! landmarks  J u32
//! [expression: mean_offset 3N f64, k_e u32, eigvals_e, basis_e]
//! sha256     32 bytes over everything above
//! ```
//!
//! The trailing SHA-256 digest covers the header and payload, so any byte
//! flip or truncation is detected; model invariants are re-validated on
//! load.

use std::fs;
use std::path::Path;

use frontal_core::shape::{ExpressionPart, ShapeModel, ShapeVector};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SHAPEMDL";
const VERSION: u32 = 1;

/// Depth convention tag stored in the header: 0 means smaller depth values
/// are nearer the camera.
pub const Z_SMALLER_IS_NEARER: u8 = 0;

pub fn save_model(path: &Path, model: &ShapeModel) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, if model.expression().is_some() { 1 } else { 0 });
    push_u32(&mut buf, model.num_vertices() as u32);
    push_u32(&mut buf, model.num_modes() as u32);
    push_u32(&mut buf, model.landmark_indices().len() as u32);
    push_u32(&mut buf, model.triangles().len() as u32);
    buf.push(Z_SMALLER_IS_NEARER);
    let units = b"px";
    buf.push(units.len() as u8);
    buf.extend_from_slice(units);

    for v in model.mean().coords() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.eigenvalues() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in 0..model.num_modes() {
        for r in 0..3 * model.num_vertices() {
            buf.extend_from_slice(&model.basis()[(r, c)].to_le_bytes());
        }
    }
    for t in model.triangles() {
        for &i in t {
            push_u32(&mut buf, i);
        }
    }
    for &i in model.landmark_indices() {
        push_u32(&mut buf, i);
    }
    if let Some(part) = model.expression() {
        for v in part.mean_offset.coords() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        push_u32(&mut buf, part.eigenvalues.len() as u32);
        for v in &part.eigenvalues {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for c in 0..part.eigenvalues.len() {
            for r in 0..3 * model.num_vertices() {
                buf.extend_from_slice(&part.basis[(r, c)].to_le_bytes());
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ShapeModel> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < MAGIC.len() + 32 {
        return Err(Error::malformed(path, "file too short"));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum { path: path.into() });
    }

    let mut r = Reader { path, data: body, pos: 0 };
    let magic = r.bytes(8)?;
    if magic != MAGIC {
        return Err(Error::unsupported(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::unsupported(path, format!("version {version}")));
    }
    let flags = r.u32()?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let j = r.u32()? as usize;
    let n_tris = r.u32()? as usize;
    let z_conv = r.u8()?;
    if z_conv != Z_SMALLER_IS_NEARER {
        return Err(Error::unsupported(path, format!("z convention {z_conv}")));
    }
    let units_len = r.u8()? as usize;
    let _units = r.bytes(units_len)?;

    // Guard the multiplications before allocating.
    let dim = n
        .checked_mul(3)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::malformed(path, "vertex count out of range"))?;
    let mean = ShapeVector::new(r.f64s(dim)?)?;
    let eigvals = r.f64s(k)?;
    let basis_len = dim
        .checked_mul(k)
        .ok_or_else(|| Error::malformed(path, "basis too large"))?;
    let basis_data = r.f64s(basis_len)?;
    let basis = DMatrix::from_column_slice(dim, k, &basis_data);
    let mut triangles = Vec::with_capacity(n_tris);
    for _ in 0..n_tris {
        triangles.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let mut landmark_indices = Vec::with_capacity(j);
    for _ in 0..j {
        landmark_indices.push(r.u32()?);
    }

    let expression = if flags & 1 != 0 {
        let mean_offset = ShapeVector::new(r.f64s(dim)?)?;
        let k_e = r.u32()? as usize;
        let eigenvalues = r.f64s(k_e)?;
        let basis_len = dim
            .checked_mul(k_e)
            .ok_or_else(|| Error::malformed(path, "expression basis too large"))?;
        let data = r.f64s(basis_len)?;
        Some(ExpressionPart {
            mean_offset,
            basis: DMatrix::from_column_slice(dim, k_e, &data),
            eigenvalues,
        })
    } else {
        None
    };

    if r.pos != body.len() {
        return Err(Error::malformed(path, "trailing bytes after payload"));
    }

    ShapeModel::new(mean, basis, eigvals, triangles, landmark_indices, expression)
        .map_err(Error::from)
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::malformed(self.path, "unexpected end of file"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n
            .checked_mul(8)
            .ok_or_else(|| Error::malformed(self.path, "field too large"))?;
        let b = self.bytes(need)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}
