//! Baseline block cipher: a fixed shuffle of the `p^2 C` positions of every
//! block followed by negative-positive inversion (`v -> 1 - v`) on a fixed
//! subset of positions. Both are derived from the key seed and shared by all
//! blocks.

use super::{map_blocks, CipherError, ImageKind, ImageTensor, OrthoMatrix, SecretKey};
use crate::rnglinalg::{Matrix, RngState};

/// Keeps the shuffle stream independent of the orthogonal-matrix stream for
/// the same seed.
const STREAM_TAG: u64 = 0x636F_6E76_656E_7469;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConventionalCipher {
    patch: usize,
    channels: usize,
    /// Output position `j` takes input position `perm[j]`.
    perm: Vec<usize>,
    flip: Vec<bool>,
}

impl ConventionalCipher {
    pub fn derive(key: &SecretKey) -> Self {
        let n = key.dim();
        let mut rng = RngState::new(key.seed ^ STREAM_TAG);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let flip = (0..n).map(|_| rng.next_u64() >> 63 == 1).collect();
        Self { patch: key.patch, channels: key.channels, perm, flip }
    }

    pub fn from_parts(patch: usize, channels: usize, perm: Vec<usize>, flip: Vec<bool>) -> Result<Self, CipherError> {
        let n = patch * patch * channels;
        let mut seen = vec![false; n];
        if perm.len() != n || flip.len() != n {
            return Err(CipherError::Key(format!("shuffle and flip set must both have length {n}")));
        }
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(CipherError::Key("shuffle is not a permutation".into()));
            }
        }
        Ok(Self { patch, channels, perm, flip })
    }

    pub fn identity(patch: usize, channels: usize) -> Self {
        let n = patch * patch * channels;
        Self { patch, channels, perm: (0..n).collect(), flip: vec![false; n] }
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn flips(&self) -> &[bool] {
        &self.flip
    }

    fn check(&self, x: &ImageTensor) -> Result<(), CipherError> {
        if x.channels() != self.channels {
            return Err(CipherError::Geometry(format!(
                "image has {} channels, key expects {}",
                x.channels(),
                self.channels
            )));
        }
        Ok(())
    }

    pub fn encrypt(&self, x: &ImageTensor) -> Result<ImageTensor, CipherError> {
        if x.kind() != ImageKind::Plain {
            return Err(CipherError::Kind("only plain images can be encrypted".into()));
        }
        self.check(x)?;
        map_blocks(x, self.patch, ImageKind::Encrypted, |v| {
            self.perm
                .iter()
                .zip(&self.flip)
                .map(|(&src, &f)| if f { 1.0 - v[src] } else { v[src] })
                .collect()
        })
    }

    pub fn decrypt(&self, y: &ImageTensor) -> Result<ImageTensor, CipherError> {
        self.check(y)?;
        map_blocks(y, self.patch, ImageKind::Plain, |v| {
            let mut out = vec![0.0; v.len()];
            for (j, (&src, &f)) in self.perm.iter().zip(&self.flip).enumerate() {
                out[src] = if f { 1.0 - v[j] } else { v[j] };
            }
            out
        })
    }

    /// The cipher as an affine map on row vectors: `y = x M + offset`, where
    /// `M` is a signed permutation matrix.
    pub fn as_affine(&self) -> (Matrix, Vec<f64>) {
        let n = self.perm.len();
        let mut m = vec![0.0; n * n];
        let mut offset = vec![0.0; n];
        for (j, (&src, &f)) in self.perm.iter().zip(&self.flip).enumerate() {
            m[src * n + j] = if f { -1.0 } else { 1.0 };
            offset[j] = if f { 1.0 } else { 0.0 };
        }
        (Matrix::new(n, n, m).expect("finite by construction"), offset)
    }

    /// The shuffle alone, as a key matrix usable with `encrypt_image`.
    pub fn permutation_matrix(&self) -> OrthoMatrix {
        let n = self.perm.len();
        let mut m = vec![0.0; n * n];
        for (j, &src) in self.perm.iter().enumerate() {
            m[src * n + j] = 1.0;
        }
        OrthoMatrix::from_matrix(Matrix::new(n, n, m).expect("finite")).expect("permutation matrices are orthogonal")
    }
}

pub fn conventional_encrypt(x: &ImageTensor, key: &SecretKey) -> Result<ImageTensor, CipherError> {
    ConventionalCipher::derive(key).encrypt(x)
}

pub fn conventional_decrypt(y: &ImageTensor, key: &SecretKey) -> Result<ImageTensor, CipherError> {
    ConventionalCipher::derive(key).decrypt(y)
}
