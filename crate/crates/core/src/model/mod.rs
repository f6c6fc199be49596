//! ConvMixer parameters, patch embedding and the key-based model transform.
//!
//! The patch embedding maps each flattened block `x_i` (length `p^2 C`) to
//! `x_i E + b`. Encrypting blocks as `x_i A` and replacing `E` with `A^T E`
//! leaves every token unchanged, so the transformed model classifies
//! encrypted images exactly as the original classifies plain ones.

pub mod io;

use thiserror::Error;

use crate::cipher::{BlockVector, OrthoMatrix};
use crate::codec::FormatError;
use crate::rnglinalg::{matmul, LinalgError, Matrix, RngState};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("model is already encrypted")]
    AlreadyEncrypted,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Geometry {
    pub patch: usize,
    pub channels: usize,
    /// Token width `d` after patch embedding.
    pub dim: usize,
    pub depth: usize,
    /// Depthwise kernel size `k` (odd).
    pub kernel: usize,
    pub classes: usize,
}

impl Geometry {
    /// The 16x16x3 toy configuration used for the accuracy experiments.
    pub const TOY: Geometry = Geometry { patch: 4, channels: 3, dim: 32, depth: 2, kernel: 3, classes: 10 };

    pub fn block_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let Geometry { patch, channels, dim, kernel, classes, .. } = *self;
        if patch == 0 || channels == 0 || dim == 0 || classes == 0 {
            return Err(ModelError::Geometry(format!("zero-sized geometry {self:?}")));
        }
        if kernel % 2 == 0 {
            return Err(ModelError::Geometry(format!("kernel size {kernel} must be odd")));
        }
        Ok(())
    }
}

/// Batch-norm affine parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d], running_mean: vec![0.0; d], running_var: vec![1.0; d] }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    /// `(p^2 C) x d`; row index uses the block-vector layout.
    pub e: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayer {
    /// `[channel][row][col]`, `d * k * k`.
    pub dw_weight: Vec<f64>,
    pub dw_bias: Vec<f64>,
    pub bn1: BatchNorm,
    /// `[out][in]`, `d * d`.
    pub pw_weight: Vec<f64>,
    pub pw_bias: Vec<f64>,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvMixerModel {
    pub geometry: Geometry,
    pub patch: PatchEmbedding,
    pub embed_bn: BatchNorm,
    pub layers: Vec<MixerLayer>,
    /// `[class][feature]`, `classes * d`.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub encrypted: bool,
}

fn uniform_vec(len: usize, fan_in: usize, rng: &mut RngState) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.uniform() * bound).collect()
}

impl ConvMixerModel {
    /// Fresh plain model: weights and biases uniform in `+-sqrt(1/fan_in)`,
    /// batch norms at identity with unit running variance.
    pub fn init(geometry: Geometry, rng: &mut RngState) -> Result<Self, ModelError> {
        geometry.validate()?;
        let Geometry { dim: d, kernel: k, classes, .. } = geometry;
        let n = geometry.block_dim();
        let e = Matrix::new(n, d, uniform_vec(n * d, n, rng))?;
        let patch = PatchEmbedding { e, bias: uniform_vec(d, n, rng) };
        let layers = (0..geometry.depth)
            .map(|_| MixerLayer {
                dw_weight: uniform_vec(d * k * k, k * k, rng),
                dw_bias: uniform_vec(d, k * k, rng),
                bn1: BatchNorm::new(d),
                pw_weight: uniform_vec(d * d, d, rng),
                pw_bias: uniform_vec(d, d, rng),
                bn2: BatchNorm::new(d),
            })
            .collect();
        Ok(Self {
            geometry,
            patch,
            embed_bn: BatchNorm::new(d),
            layers,
            head_weight: uniform_vec(classes * d, d, rng),
            head_bias: uniform_vec(classes, d, rng),
            encrypted: false,
        })
    }

    /// Every tensor in file order, with a stable name.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("patch.e".into(), self.patch.e.data()),
            ("patch.bias".into(), &self.patch.bias),
        ];
        push_bn(&mut out, "embed_bn", &self.embed_bn);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.dw_weight"), &l.dw_weight));
            out.push((format!("layer{i}.dw_bias"), &l.dw_bias));
            push_bn(&mut out, &format!("layer{i}.bn1"), &l.bn1);
            out.push((format!("layer{i}.pw_weight"), &l.pw_weight));
            out.push((format!("layer{i}.pw_bias"), &l.pw_bias));
            push_bn(&mut out, &format!("layer{i}.bn2"), &l.bn2);
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Trainable tensors (everything except running statistics), in file
    /// order. The patch matrix is exposed through its row-major buffer.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("patch.e".into(), self.patch.e.data_mut()),
            ("patch.bias".into(), &mut self.patch.bias[..]),
            ("embed_bn.gamma".into(), &mut self.embed_bn.gamma[..]),
            ("embed_bn.beta".into(), &mut self.embed_bn.beta[..]),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.dw_weight"), &mut l.dw_weight[..]));
            out.push((format!("layer{i}.dw_bias"), &mut l.dw_bias[..]));
            out.push((format!("layer{i}.bn1.gamma"), &mut l.bn1.gamma[..]));
            out.push((format!("layer{i}.bn1.beta"), &mut l.bn1.beta[..]));
            out.push((format!("layer{i}.pw_weight"), &mut l.pw_weight[..]));
            out.push((format!("layer{i}.pw_bias"), &mut l.pw_bias[..]));
            out.push((format!("layer{i}.bn2.gamma"), &mut l.bn2.gamma[..]));
            out.push((format!("layer{i}.bn2.beta"), &mut l.bn2.beta[..]));
        }
        out.push(("head.weight".into(), &mut self.head_weight[..]));
        out.push(("head.bias".into(), &mut self.head_bias[..]));
        out
    }

    /// Names of the tensors returned by [`Self::trainable_mut`], same order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> =
            ["patch.e", "patch.bias", "embed_bn.gamma", "embed_bn.beta"].map(String::from).to_vec();
        for i in 0..self.layers.len() {
            for t in ["dw_weight", "dw_bias", "bn1.gamma", "bn1.beta", "pw_weight", "pw_bias", "bn2.gamma", "bn2.beta"] {
                out.push(format!("layer{i}.{t}"));
            }
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.embed_bn];
        for l in &mut self.layers {
            out.push(&mut l.bn1);
            out.push(&mut l.bn2);
        }
        out
    }

    /// Checks tensor shapes against the geometry, finiteness, and positive
    /// running variances.
    pub fn validate(&self) -> Result<(), ModelError> {
        let g = self.geometry;
        g.validate()?;
        let (d, k) = (g.dim, g.kernel);
        if self.layers.len() != g.depth {
            return Err(ModelError::Geometry(format!("{} layers for depth {}", self.layers.len(), g.depth)));
        }
        if self.patch.e.rows() != g.block_dim() || self.patch.e.cols() != d {
            return Err(ModelError::Geometry(format!(
                "patch matrix is {}x{}, expected {}x{d}",
                self.patch.e.rows(),
                self.patch.e.cols(),
                g.block_dim()
            )));
        }
        let mut expected = vec![d, d, d, d, d];
        for _ in 0..g.depth {
            expected.extend([d * k * k, d, d, d, d, d, d * d, d, d, d, d, d]);
        }
        expected.extend([g.classes * d, g.classes]);
        let tensors = self.tensors();
        let (_, rest) = tensors.split_first().expect("patch.e is always present");
        for ((name, t), want) in rest.iter().zip(&expected) {
            if t.len() != *want {
                return Err(ModelError::Geometry(format!("{name} has {} entries, expected {want}", t.len())));
            }
        }
        for (name, t) in &tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!("{name} has a non-finite entry")));
            }
        }
        let mut bns = vec![&self.embed_bn];
        bns.extend(self.layers.iter().flat_map(|l| [&l.bn1, &l.bn2]));
        if bns.iter().any(|bn| bn.running_var.iter().any(|&v| v <= 0.0)) {
            return Err(ModelError::Invalid("running variance must be positive".into()));
        }
        Ok(())
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: &str, bn: &'a BatchNorm) {
    out.push((format!("{prefix}.gamma"), &bn.gamma));
    out.push((format!("{prefix}.beta"), &bn.beta));
    out.push((format!("{prefix}.running_mean"), &bn.running_mean));
    out.push((format!("{prefix}.running_var"), &bn.running_var));
}

/// Tokens `z_i = x_i E + bias`, one row per block in raster order.
pub fn patch_embed(blocks: &[BlockVector], pe: &PatchEmbedding) -> Result<Matrix, ModelError> {
    let n = pe.e.rows();
    if let Some(b) = blocks.iter().find(|b| b.len() != n) {
        return Err(ModelError::Geometry(format!("block length {} != embedding rows {n}", b.len())));
    }
    if pe.bias.len() != pe.e.cols() {
        return Err(ModelError::Geometry("embedding bias length differs from token width".into()));
    }
    let stacked = Matrix::new(blocks.len(), n, blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect())?;
    let mut z = matmul(&stacked, &pe.e)?.into_data();
    for row in z.chunks_exact_mut(pe.bias.len()) {
        for (v, b) in row.iter_mut().zip(&pe.bias) {
            *v += b;
        }
    }
    Ok(Matrix::new(blocks.len(), pe.e.cols(), z)?)
}

/// Returns a copy whose patch matrix is `A^T E` (`A^{-1} = A^T`); nothing
/// else changes except the encrypted flag.
pub fn transform_model(m: &ConvMixerModel, a: &OrthoMatrix) -> Result<ConvMixerModel, ModelError> {
    if m.encrypted {
        return Err(ModelError::AlreadyEncrypted);
    }
    transform_with_matrix(m, &a.inverse())
}

/// Left-multiplies the patch matrix by `left` without checking the encrypted
/// flag. Used to undo a transform with the inverse key.
pub fn transform_with_matrix(m: &ConvMixerModel, left: &OrthoMatrix) -> Result<ConvMixerModel, ModelError> {
    if left.n() != m.patch.e.rows() {
        return Err(ModelError::Geometry(format!(
            "key dimension {} != patch dimension {}",
            left.n(),
            m.patch.e.rows()
        )));
    }
    let mut out = m.clone();
    out.patch.e = matmul(left.matrix(), &m.patch.e)?;
    out.encrypted = true;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cipher::{generate_orthogonal, SecretKey};

    pub(crate) fn tiny() -> Geometry {
        Geometry { patch: 2, channels: 1, dim: 4, depth: 1, kernel: 3, classes: 3 }
    }

    #[test]
    fn init_shapes_validate() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(0)).unwrap();
        m.validate().unwrap();
        assert_eq!(m.patch.e.rows(), 48);
        assert_eq!(m.tensors().len(), 2 + 4 + 2 * 12 + 2);
        let bound = (1.0f64 / 48.0).sqrt();
        assert!(m.patch.e.data().iter().all(|v| v.abs() <= bound));
        assert!(Geometry { kernel: 4, ..Geometry::TOY }.validate().is_err());
    }

    #[test]
    fn trainable_names_match_accessor() {
        let mut m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(0)).unwrap();
        let names = m.trainable_names();
        let from_mut: Vec<String> = m.trainable_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, from_mut);
    }

    #[test]
    fn validate_catches_bad_tensors() {
        let mut m = ConvMixerModel::init(tiny(), &mut RngState::new(1)).unwrap();
        m.layers[0].bn1.running_var[2] = 0.0;
        assert!(m.validate().is_err());
        let mut m = ConvMixerModel::init(tiny(), &mut RngState::new(1)).unwrap();
        m.head_bias.push(0.0);
        assert!(matches!(m.validate(), Err(ModelError::Geometry(_))));
        let mut m = ConvMixerModel::init(tiny(), &mut RngState::new(1)).unwrap();
        m.layers.clear();
        assert!(m.validate().is_err());
    }

    #[test]
    fn identity_embedding_reproduces_blocks() {
        let blocks = vec![BlockVector(vec![0.1, 0.2, 0.3, 0.4]), BlockVector(vec![0.5, 0.6, 0.7, 0.8])];
        let pe = PatchEmbedding { e: Matrix::identity(4), bias: vec![0.0; 4] };
        let z = patch_embed(&blocks, &pe).unwrap();
        assert_eq!(z.row(0), blocks[0].as_slice());
        assert_eq!(z.row(1), blocks[1].as_slice());
    }

    #[test]
    fn basis_block_selects_first_row() {
        let mut rng = RngState::new(3);
        let pe = PatchEmbedding { e: Matrix::random_uniform(4, 6, &mut rng), bias: vec![0.0; 6] };
        let z = patch_embed(&[BlockVector(vec![1.0, 0.0, 0.0, 0.0])], &pe).unwrap();
        assert_eq!(z.row(0), pe.e.row(0));
        assert!(patch_embed(&[BlockVector(vec![1.0; 3])], &pe).is_err());
    }

    #[test]
    fn embedding_matches_dense_oracle() {
        let mut rng = RngState::new(12);
        let pe = PatchEmbedding { e: Matrix::random_uniform(12, 5, &mut rng), bias: (0..5).map(|_| rng.uniform()).collect() };
        let blocks: Vec<BlockVector> = (0..7).map(|_| BlockVector((0..12).map(|_| rng.uniform()).collect())).collect();
        let z = patch_embed(&blocks, &pe).unwrap();
        for (i, b) in blocks.iter().enumerate() {
            for j in 0..5 {
                let want: f64 = (0..12).map(|k| b.as_slice()[k] * pe.e.get(k, j)).sum::<f64>() + pe.bias[j];
                assert!((z.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transform_touches_only_patch_matrix() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(5)).unwrap();
        let a = generate_orthogonal(&SecretKey::new(9, 4, 3).unwrap());
        let t = transform_model(&m, &a).unwrap();
        assert!(t.encrypted && !m.encrypted);
        for ((name, x), (_, y)) in m.tensors().iter().zip(t.tensors()).skip(1) {
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()), "{name} changed");
        }
        assert_ne!(t.patch.e, m.patch.e);
        assert!(matches!(transform_model(&t, &a), Err(ModelError::AlreadyEncrypted)));

        let back = transform_with_matrix(&t, &a).unwrap();
        assert!(back.patch.e.max_abs_diff(&m.patch.e) <= 1e-10);
    }

    #[test]
    fn identity_transform_only_sets_flag() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(5)).unwrap();
        let t = transform_model(&m, &OrthoMatrix::identity(48)).unwrap();
        assert_eq!(ConvMixerModel { encrypted: false, ..t }, m);
    }

    #[test]
    fn transform_rejects_wrong_key_size() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(5)).unwrap();
        let a = generate_orthogonal(&SecretKey::new(9, 2, 3).unwrap());
        assert!(matches!(transform_model(&m, &a), Err(ModelError::Geometry(_))));
    }
}
