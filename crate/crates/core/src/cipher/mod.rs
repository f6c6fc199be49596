//! Key generation and block-wise image encryption.
//!
//! A [`SecretKey`] is a seed plus the block geometry. The orthogonal matrix is
//! never stored: [`generate_orthogonal`] re-derives it from the seed, so the
//! seed is the only secret. Each `p x p x C` block of an image is flattened to
//! a row vector `x` and replaced by `x A`; decryption multiplies by `A^T`.

mod conventional;
mod image;
pub mod io;

use thiserror::Error;

use crate::codec::FormatError;
use crate::rnglinalg::{modified_gram_schmidt, orthogonality_defect, LinalgError, Matrix, RngState};

pub use conventional::{conventional_decrypt, conventional_encrypt, ConventionalCipher};
pub use image::{blockify, deblockify, BlockVector, ImageKind, ImageTensor};
pub(crate) use image::map_blocks;

/// Largest `max |A A^T - I|` accepted for a key matrix.
pub const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CipherError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("image kind violation: {0}")]
    Kind(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("invalid key: {0}")]
    Key(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SecretKey {
    pub seed: u64,
    pub patch: usize,
    pub channels: usize,
}

impl SecretKey {
    pub fn new(seed: u64, patch: usize, channels: usize) -> Result<Self, CipherError> {
        if patch == 0 || channels == 0 {
            return Err(CipherError::Key(format!("patch {patch} and channels {channels} must be >= 1")));
        }
        Ok(Self { seed, patch, channels })
    }

    /// Block vector length `p^2 C`.
    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// A square matrix `A` with `A A^T = I`; `A^{-1}` is `A^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoMatrix {
    a: Matrix,
}

impl OrthoMatrix {
    /// Wraps an arbitrary matrix, checking orthogonality to [`ORTHO_TOL`].
    pub fn from_matrix(a: Matrix) -> Result<Self, CipherError> {
        if !a.is_square() || a.rows() == 0 {
            return Err(CipherError::Key(format!("{}x{} is not a square key matrix", a.rows(), a.cols())));
        }
        let defect = orthogonality_defect(&a);
        if defect > ORTHO_TOL {
            return Err(CipherError::Key(format!("orthogonality defect {defect:e} exceeds {ORTHO_TOL:e}")));
        }
        Ok(Self { a })
    }

    pub fn identity(n: usize) -> Self {
        Self { a: Matrix::identity(n) }
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn inverse(&self) -> OrthoMatrix {
        OrthoMatrix { a: self.a.transpose() }
    }
}

/// Seeds SplitMix64 with the key, fills `R` row-major with uniform `[-1, 1)`
/// entries and orthonormalizes its rows. A degenerate `R` is redrawn from the
/// advanced generator state.
pub fn generate_orthogonal(key: &SecretKey) -> OrthoMatrix {
    let n = key.dim();
    let mut rng = RngState::new(key.seed);
    loop {
        let r = Matrix::random_uniform(n, n, &mut rng);
        match modified_gram_schmidt(&r) {
            Ok(a) => return OrthoMatrix { a },
            Err(LinalgError::Degenerate { .. }) => continue,
            Err(e) => unreachable!("square input cannot fail with {e}"),
        }
    }
}

/// Recovers the block size `p` from `n = p^2 C`.
pub fn patch_from_dim(n: usize, channels: usize) -> Result<usize, CipherError> {
    if channels == 0 || !n.is_multiple_of(channels) {
        return Err(CipherError::Geometry(format!("key dimension {n} is not a multiple of {channels} channels")));
    }
    let area = n / channels;
    let p = (area as f64).sqrt().round() as usize;
    if p * p != area {
        return Err(CipherError::Geometry(format!("key dimension {n} is not p^2 * {channels}")));
    }
    Ok(p)
}

fn right_multiply(x: &ImageTensor, a: &Matrix, kind: ImageKind) -> Result<ImageTensor, CipherError> {
    let p = patch_from_dim(a.rows(), x.channels())?;
    map_blocks(x, p, kind, |v| a.left_mul_vec(v).expect("block length equals key dimension"))
}

/// `x_hat_i = x_i A` for every block.
pub fn encrypt_image(x: &ImageTensor, a: &OrthoMatrix) -> Result<ImageTensor, CipherError> {
    if x.kind() != ImageKind::Plain {
        return Err(CipherError::Kind("only plain images can be encrypted".into()));
    }
    right_multiply(x, &a.a, ImageKind::Encrypted)
}

/// `x_i = x_hat_i A^T` for every block. The result is clamped to the plain
/// domain `[0, 1]`.
pub fn decrypt_image(xhat: &ImageTensor, a: &OrthoMatrix) -> Result<ImageTensor, CipherError> {
    if xhat.kind() != ImageKind::Encrypted {
        return Err(CipherError::Kind("only encrypted images can be decrypted".into()));
    }
    let raw = right_multiply(xhat, &a.a.transpose(), ImageKind::Encrypted)?;
    let (h, w, c) = (raw.height(), raw.width(), raw.channels());
    let data = raw.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::plain(h, w, c, data)
}
