//! Key files (`OKEY`), raw image files (`CMXE`) and binary PPM.
//!
//! `OKEY` v1: magic, version, seed `u64`, patch `u32`, channels `u32`.
//!
//! `CMXE` v1: magic, version, kind byte (0 plain, 1 encrypted), then
//! `H, W, C, p` as `u32` and `H*W*C` `f64` values in (row, column, channel)
//! order. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{CipherError, ImageKind, ImageTensor, SecretKey};
use crate::codec::{FormatError, Reader, Writer};

pub const KEY_MAGIC: &[u8; 4] = b"OKEY";
pub const IMAGE_MAGIC: &[u8; 4] = b"CMXE";
pub const FORMAT_VERSION: u8 = 1;

pub fn encode_key(key: &SecretKey) -> Vec<u8> {
    let mut w = Writer::header(KEY_MAGIC, FORMAT_VERSION);
    w.u64(key.seed);
    w.len32(key.patch);
    w.len32(key.channels);
    w.finish()
}

pub fn decode_key(bytes: &[u8]) -> Result<SecretKey, CipherError> {
    let mut r = Reader::new(bytes);
    r.header(KEY_MAGIC, FORMAT_VERSION)?;
    let seed = r.u64()?;
    let patch = r.u32()? as usize;
    let channels = r.u32()? as usize;
    r.expect_end()?;
    SecretKey::new(seed, patch, channels)
}

pub fn write_key(path: impl AsRef<Path>, key: &SecretKey) -> Result<(), CipherError> {
    Ok(fs::write(path, encode_key(key))?)
}

pub fn read_key(path: impl AsRef<Path>) -> Result<SecretKey, CipherError> {
    decode_key(&fs::read(path)?)
}

/// `patch` is the block size the image was encrypted with (informational for
/// plain images).
pub fn encode_image(x: &ImageTensor, patch: usize) -> Vec<u8> {
    let mut w = Writer::header(IMAGE_MAGIC, FORMAT_VERSION);
    w.u8(x.kind().to_byte());
    for v in [x.height(), x.width(), x.channels(), patch] {
        w.len32(v);
    }
    w.f64s(x.data());
    w.finish()
}

/// Decodes a `CMXE` record, returning the image and its block size.
pub fn decode_image(bytes: &[u8]) -> Result<(ImageTensor, usize), CipherError> {
    let mut r = Reader::new(bytes);
    r.header(IMAGE_MAGIC, FORMAT_VERSION)?;
    let kind_byte = r.u8()?;
    let kind = ImageKind::from_byte(kind_byte)
        .ok_or_else(|| FormatError::Invalid(format!("unknown image kind byte {kind_byte}")))?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let p = r.u32()? as usize;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| FormatError::Invalid("image dimensions overflow".into()))?;
    let data = r.f64s(count)?;
    r.expect_end()?;
    Ok((ImageTensor::new(h, w, c, data, kind)?, p))
}

pub fn write_image(path: impl AsRef<Path>, x: &ImageTensor, patch: usize) -> Result<(), CipherError> {
    Ok(fs::write(path, encode_image(x, patch))?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<(ImageTensor, usize), CipherError> {
    decode_image(&fs::read(path)?)
}

/// Binary PPM (P6, maxval 255). Values must lie in `[0, 1]`; quantization
/// rounds half up.
pub fn encode_ppm(x: &ImageTensor) -> Result<Vec<u8>, CipherError> {
    if x.channels() != 3 {
        return Err(CipherError::Geometry(format!("PPM needs 3 channels, image has {}", x.channels())));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CipherError::Value(format!("value {v} outside [0, 1]; normalize before export")));
    }
    let mut out = format!("P6\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(x.data().iter().map(|v| (v * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], CipherError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(FormatError::Truncated { offset: *pos, needed: 1 }.into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize, CipherError> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FormatError::Invalid(format!("bad PPM header field {:?}", String::from_utf8_lossy(tok))).into())
}

/// Parses a binary PPM (P6) with maxval up to 255 into a plain image.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, CipherError> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(FormatError::BadMagic { expected: *b"P6  ", found: bytes.iter().take(2).copied().collect() }.into());
    }
    let width = ppm_number(bytes, &mut pos)?;
    let height = ppm_number(bytes, &mut pos)?;
    let maxval = ppm_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::Invalid(format!("unsupported PPM maxval {maxval}")).into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or(FormatError::Truncated { offset: bytes.len(), needed: (pos + n).saturating_sub(bytes.len()) })?;
    let scale = maxval as f64;
    ImageTensor::plain(height, width, 3, raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect())
}

pub fn write_ppm(path: impl AsRef<Path>, x: &ImageTensor) -> Result<(), CipherError> {
    Ok(fs::write(path, encode_ppm(x)?)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageTensor, CipherError> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnglinalg::RngState;

    #[test]
    fn key_round_trip_and_layout() {
        let key = SecretKey::new(0x0102_0304_0506_0708, 4, 3).unwrap();
        let bytes = encode_key(&key);
        assert_eq!(&bytes[..5], b"OKEY\x01");
        assert_eq!(&bytes[5..13], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[13..], &[4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(decode_key(&bytes).unwrap(), key);
        assert!(decode_key(&bytes[..15]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_key(&bad), Err(CipherError::Format(FormatError::Version { .. }))));
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let mut rng = RngState::new(3);
        let x = ImageTensor::encrypted(4, 8, 3, (0..96).map(|_| rng.uniform() * 7.0).collect()).unwrap();
        let (y, p) = decode_image(&encode_image(&x, 4)).unwrap();
        assert_eq!(p, 4);
        assert_eq!(y.kind(), ImageKind::Encrypted);
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn image_decode_errors() {
        let x = ImageTensor::plain(2, 2, 1, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let bytes = encode_image(&x, 2);
        assert!(matches!(
            decode_image(&bytes[..bytes.len() - 3]),
            Err(CipherError::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_image(&bad), Err(CipherError::Format(FormatError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(decode_image(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_image(&long), Err(CipherError::Format(FormatError::Trailing(1)))));
    }

    #[test]
    fn ppm_quantization() {
        let x = ImageTensor::plain(1, 2, 3, vec![0.0, 1.0, 0.5, 0.2, 1.0 / 510.0, 0.999]).unwrap();
        let bytes = encode_ppm(&x).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[11..], &[0, 255, 128, 51, 1, 255]);
        let y = decode_ppm(&bytes).unwrap();
        assert!(y.max_abs_diff(&x) <= 1.0 / 255.0);

        let zero = ImageTensor::plain(2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(encode_ppm(&zero).unwrap()[11..].iter().all(|&b| b == 0));
        let enc = ImageTensor::encrypted(1, 1, 3, vec![1.5, 0.0, 0.0]).unwrap();
        assert!(encode_ppm(&enc).is_err());
    }

    #[test]
    fn ppm_header_with_comments() {
        let mut bytes = b"P6 # made by hand\n# another\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let x = decode_ppm(&bytes).unwrap();
        assert_eq!(x.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }
}
