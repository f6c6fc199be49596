//! `CMXM` v1 model files.
//!
//! Layout: magic, version byte, `p, C, d, depth, k, classes` (`u32` each),
//! encrypted flag byte, then every tensor of [`ConvMixerModel::tensors`] in
//! order as little-endian `f64`. No lengths are stored; they follow from the
//! geometry.

use std::fs;
use std::path::Path;

use super::{BatchNorm, ConvMixerModel, Geometry, MixerLayer, ModelError, PatchEmbedding};
use crate::codec::{FormatError, Reader, Writer};
use crate::rnglinalg::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"CMXM";
pub const MODEL_VERSION: u8 = 1;

pub fn serialize_model(m: &ConvMixerModel) -> Vec<u8> {
    let g = m.geometry;
    let mut w = Writer::header(MODEL_MAGIC, MODEL_VERSION);
    for v in [g.patch, g.channels, g.dim, g.depth, g.kernel, g.classes] {
        w.len32(v);
    }
    w.u8(u8::from(m.encrypted));
    for (_, t) in m.tensors() {
        w.f64s(t);
    }
    w.finish()
}

fn read_bn(r: &mut Reader<'_>, d: usize) -> Result<BatchNorm, FormatError> {
    Ok(BatchNorm { gamma: r.f64s(d)?, beta: r.f64s(d)?, running_mean: r.f64s(d)?, running_var: r.f64s(d)? })
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ConvMixerModel, ModelError> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC, MODEL_VERSION)?;
    let mut dims = [0usize; 6];
    for v in &mut dims {
        *v = r.u32()? as usize;
    }
    let [patch, channels, dim, depth, kernel, classes] = dims;
    let geometry = Geometry { patch, channels, dim, depth, kernel, classes };
    geometry.validate()?;
    let encrypted = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(FormatError::Invalid(format!("encrypted flag byte {b}")).into()),
    };
    let d = dim;
    let n = geometry.block_dim();
    let e = Matrix::new(n, d, r.f64s(n * d)?)?;
    let patch = PatchEmbedding { e, bias: r.f64s(d)? };
    let embed_bn = read_bn(&mut r, d)?;
    let mut layers = Vec::with_capacity(depth.min(1024));
    for _ in 0..depth {
        layers.push(MixerLayer {
            dw_weight: r.f64s(d * kernel * kernel)?,
            dw_bias: r.f64s(d)?,
            bn1: read_bn(&mut r, d)?,
            pw_weight: r.f64s(d * d)?,
            pw_bias: r.f64s(d)?,
            bn2: read_bn(&mut r, d)?,
        });
    }
    let head_weight = r.f64s(classes * d)?;
    let head_bias = r.f64s(classes)?;
    r.expect_end()?;
    let m = ConvMixerModel { geometry, patch, embed_bn, layers, head_weight, head_bias, encrypted };
    m.validate()?;
    Ok(m)
}

pub fn write_model(path: impl AsRef<Path>, m: &ConvMixerModel) -> Result<(), ModelError> {
    Ok(fs::write(path, serialize_model(m))?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ConvMixerModel, ModelError> {
    deserialize_model(&fs::read(path)?)
}
