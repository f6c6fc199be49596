//! Labelled image sets, the synthetic toy task, and `CMXD` files.
//!
//! `CMXD` v1: magic, version, `count, classes, H, W, C` (`u32`), then `count`
//! plain images as `f64` in (row, column, channel) order, then `count` labels
//! as `u32`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use super::EngineError;
use crate::cipher::{ImageKind, ImageTensor};
use crate::codec::{FormatError, Reader, Writer};
use crate::rnglinalg::RngState;

pub const DATASET_MAGIC: &[u8; 4] = b"CMXD";
pub const DATASET_VERSION: u8 = 1;

pub const TOY_CLASSES: usize = 10;
pub const TOY_SIDE: usize = 16;
pub const TOY_NOISE: f64 = 0.15;
const GRATING_PERIOD: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, classes: usize) -> Result<Self, EngineError> {
        if images.len() != labels.len() {
            return Err(EngineError::Geometry(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(EngineError::Label { label, classes });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|x| !x.same_geometry(first)) {
                return Err(EngineError::Geometry("dataset images must share one geometry".into()));
            }
            if images.iter().any(|x| x.kind() != ImageKind::Plain) {
                return Err(EngineError::Geometry("dataset images must be plain".into()));
            }
        }
        Ok(Self { images, labels, classes })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageTensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec(), classes: self.classes }
    }
}

/// Noise-free template of toy class `class`: a sinusoidal grating oriented at
/// `class * 18` degrees, tinted with a class-dependent colour.
pub fn toy_template(class: usize) -> ImageTensor {
    let theta = (class as f64 * 18.0).to_radians();
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let hue = 2.0 * PI * class as f64 / TOY_CLASSES as f64;
    let tint: Vec<f64> = (0..3).map(|c| 0.5 + 0.5 * (hue + 2.0 * PI * c as f64 / 3.0).cos()).collect();
    let mut data = Vec::with_capacity(TOY_SIDE * TOY_SIDE * 3);
    for r in 0..TOY_SIDE {
        for c in 0..TOY_SIDE {
            let phase = 2.0 * PI * (c as f64 * dir_x + r as f64 * dir_y) / GRATING_PERIOD;
            let wave = 0.5 + 0.5 * phase.sin();
            for t in &tint {
                data.push(0.15 + 0.7 * wave * (0.35 + 0.65 * t));
            }
        }
    }
    ImageTensor::plain(TOY_SIDE, TOY_SIDE, 3, data).expect("template values lie in [0, 1]")
}

/// Toy task with the default noise amplitude.
pub fn gen_toy_dataset(seed: u64, per_class: usize) -> Result<(Dataset, Dataset), EngineError> {
    gen_toy_dataset_with_noise(seed, per_class, TOY_NOISE)
}

/// `per_class` images per class: template plus uniform noise in
/// `[-amplitude, amplitude)`, clipped to `[0, 1]`. The first 80% of each
/// class (at least one, at most `per_class - 1`) go to the training split.
pub fn gen_toy_dataset_with_noise(
    seed: u64,
    per_class: usize,
    amplitude: f64,
) -> Result<(Dataset, Dataset), EngineError> {
    if per_class < 2 {
        return Err(EngineError::Config(format!("per_class must be >= 2, got {per_class}")));
    }
    let n_train = (per_class * 4 / 5).clamp(1, per_class - 1);
    let templates: Vec<ImageTensor> = (0..TOY_CLASSES).map(toy_template).collect();
    let mut rng = RngState::new(seed);
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for j in 0..per_class {
        for (class, t) in templates.iter().enumerate() {
            let data: Vec<f64> =
                t.data().iter().map(|&v| (v + amplitude * rng.uniform()).clamp(0.0, 1.0)).collect();
            let x = ImageTensor::plain(TOY_SIDE, TOY_SIDE, 3, data)?;
            if j < n_train {
                train_x.push(x);
                train_y.push(class);
            } else {
                test_x.push(x);
                test_y.push(class);
            }
        }
    }
    Ok((Dataset::new(train_x, train_y, TOY_CLASSES)?, Dataset::new(test_x, test_y, TOY_CLASSES)?))
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::header(DATASET_MAGIC, DATASET_VERSION);
    let (h, wd, c) = d.images.first().map_or((0, 0, 0), |x| (x.height(), x.width(), x.channels()));
    for v in [d.len(), d.classes, h, wd, c] {
        w.len32(v);
    }
    for x in &d.images {
        w.f64s(x.data());
    }
    for &l in &d.labels {
        w.len32(l);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, EngineError> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let per_image = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| FormatError::Invalid("image dimensions overflow".into()))?;
    let mut images = Vec::with_capacity(count.min(r.remaining() / 8 + 1));
    for _ in 0..count {
        images.push(ImageTensor::plain(h, w, c, r.f64s(per_image)?)?);
    }
    let mut labels = Vec::with_capacity(count.min(r.remaining() / 4 + 1));
    for _ in 0..count {
        labels.push(r.u32()? as usize);
    }
    r.expect_end()?;
    Dataset::new(images, labels, classes)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<(), EngineError> {
    Ok(fs::write(path, encode_dataset(d))?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, EngineError> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_template(x: &ImageTensor, templates: &[ImageTensor]) -> usize {
        let dist = |t: &ImageTensor| x.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..templates.len()).min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b]))).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (train, test) = gen_toy_dataset(3, 10).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(gen_toy_dataset(3, 10).unwrap().0, train);
        assert_ne!(gen_toy_dataset(4, 10).unwrap().0, train);
        let (train, test) = gen_toy_dataset(3, 2).unwrap();
        assert_eq!((train.len(), test.len()), (10, 10));
        assert!(gen_toy_dataset(3, 1).is_err());
        for class in 0..10 {
            assert_eq!(test.labels().iter().filter(|&&l| l == class).count(), 1);
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let (train, _) = gen_toy_dataset_with_noise(1, 5, 0.0).unwrap();
        for (x, y) in train.iter() {
            assert_eq!(x, &toy_template(y));
        }
    }

    #[test]
    fn templates_are_distinct_and_nearest_template_is_perfect() {
        let templates: Vec<ImageTensor> = (0..10).map(toy_template).collect();
        for a in 0..10 {
            for b in a + 1..10 {
                let l2: f64 = templates[a].data().iter().zip(templates[b].data()).map(|(u, v)| (u - v).powi(2)).sum();
                assert!(l2.sqrt() > 0.0, "{a} vs {b}");
            }
        }
        let (train, test) = gen_toy_dataset_with_noise(2, 5, 0.0).unwrap();
        for (x, y) in train.iter().chain(test.iter()) {
            assert_eq!(nearest_template(x, &templates), y);
        }
    }

    #[test]
    fn noisy_values_stay_in_unit_range() {
        let (train, _) = gen_toy_dataset(9, 5).unwrap();
        assert!(train.images().iter().all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let (train, _) = gen_toy_dataset(5, 3).unwrap();
        let bytes = encode_dataset(&train);
        assert_eq!(&bytes[..5], b"CMXD\x01");
        assert_eq!(decode_dataset(&bytes).unwrap(), train);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(EngineError::Label { .. })));
    }

    #[test]
    fn dataset_invariants() {
        let x = toy_template(0);
        assert!(Dataset::new(vec![x.clone()], vec![], 10).is_err());
        assert!(Dataset::new(vec![x.clone()], vec![10], 10).is_err());
        let small = ImageTensor::plain(4, 4, 3, vec![0.5; 48]).unwrap();
        assert!(Dataset::new(vec![x, small], vec![0, 1], 10).is_err());
    }
}
