use super::CipherError;

/// Whether an image lives in the plain pixel domain `[0, 1]` or is the
/// (unbounded, real-valued) output of a block cipher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageKind {
    Plain,
    Encrypted,
}

impl ImageKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ImageKind::Plain => 0,
            ImageKind::Encrypted => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ImageKind::Plain),
            1 => Some(ImageKind::Encrypted),
            _ => None,
        }
    }
}

/// `H x W x C` raster stored in (row, column, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    kind: ImageKind,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        kind: ImageKind,
    ) -> Result<Self, CipherError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CipherError::Geometry(format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(CipherError::Geometry(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CipherError::Value(format!("non-finite value at index {i}")));
        }
        if kind == ImageKind::Plain {
            if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(CipherError::Value(format!(
                    "plain image value {} at index {i} outside [0, 1]",
                    data[i]
                )));
            }
        }
        Ok(Self { height, width, channels, data, kind })
    }

    pub fn plain(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, CipherError> {
        Self::new(height, width, channels, data, ImageKind::Plain)
    }

    pub fn encrypted(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, CipherError> {
        Self::new(height, width, channels, data, ImageKind::Encrypted)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn same_geometry(&self, other: &ImageTensor) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Relabels the image, re-checking the value invariants of the new kind.
    pub fn with_kind(self, kind: ImageKind) -> Result<Self, CipherError> {
        Self::new(self.height, self.width, self.channels, self.data, kind)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert!(self.same_geometry(other));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// One flattened `p x p x C` block; index `(h * p + w) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector(pub Vec<f64>);

impl BlockVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_divisible(height: usize, width: usize, p: usize) -> Result<(), CipherError> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(CipherError::Geometry(format!(
            "{height}x{width} image is not divisible into {p}x{p} blocks"
        )));
    }
    Ok(())
}

/// Splits `x` into `p x p` blocks in raster order (block rows top to bottom,
/// left to right inside a row).
pub fn blockify(x: &ImageTensor, p: usize) -> Result<Vec<BlockVector>, CipherError> {
    check_divisible(x.height, x.width, p)?;
    let c = x.channels;
    let (rows, cols) = (x.height / p, x.width / p);
    let mut blocks = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut v = Vec::with_capacity(p * p * c);
            for h in 0..p {
                let start = ((br * p + h) * x.width + bc * p) * c;
                v.extend_from_slice(&x.data[start..start + p * c]);
            }
            blocks.push(BlockVector(v));
        }
    }
    Ok(blocks)
}

/// Inverse of [`blockify`].
pub fn deblockify(
    blocks: &[BlockVector],
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
    kind: ImageKind,
) -> Result<ImageTensor, CipherError> {
    check_divisible(height, width, p)?;
    let (rows, cols) = (height / p, width / p);
    if blocks.len() != rows * cols {
        return Err(CipherError::Geometry(format!(
            "expected {} blocks, got {}",
            rows * cols,
            blocks.len()
        )));
    }
    let n = p * p * channels;
    if let Some(b) = blocks.iter().find(|b| b.len() != n) {
        return Err(CipherError::Geometry(format!("block length {} != {n}", b.len())));
    }
    let mut data = vec![0.0; height * width * channels];
    for (i, b) in blocks.iter().enumerate() {
        let (br, bc) = (i / cols, i % cols);
        for h in 0..p {
            let start = ((br * p + h) * width + bc * p) * channels;
            data[start..start + p * channels].copy_from_slice(&b.0[h * p * channels..(h + 1) * p * channels]);
        }
    }
    ImageTensor::new(height, width, channels, data, kind)
}

/// Applies `f` to every block of `x` in place of blockify -> map -> deblockify.
pub(crate) fn map_blocks(
    x: &ImageTensor,
    p: usize,
    kind: ImageKind,
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<ImageTensor, CipherError> {
    let blocks: Vec<BlockVector> = blockify(x, p)?.iter().map(|b| BlockVector(f(&b.0))).collect();
    deblockify(&blocks, x.height, x.width, x.channels, p, kind)
}
