//! Accuracy matrix over plain/encrypted models and images, visual-leakage
//! metrics, and image export.

mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::cipher::{encrypt_image, io::write_ppm, CipherError, ImageKind, ImageTensor, OrthoMatrix};
use crate::model::{transform_model, ConvMixerModel, ModelError};
use crate::nnengine::{forward, Dataset, EngineError};

pub use metrics::{histogram_correlation, mse, ssim, HIST_BINS, SSIM_WINDOW};

/// Two logits closer than this may legitimately swap order between the plain
/// and encrypted paths.
pub const TIE_GAP: f64 = 2e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyDataset,
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("non-finite pixel value")]
    NonFinite,
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Top-1 accuracy in percent. With a key, every image is encrypted first.
pub fn accuracy(model: &ConvMixerModel, data: &Dataset, key: Option<&OrthoMatrix>) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, y) in data.iter() {
        let pred = match key {
            Some(a) => forward(model, &encrypt_image(x, a)?)?.argmax(),
            None => forward(model, x)?.argmax(),
        };
        correct += usize::from(pred == y);
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Accuracies (percent) for every model/image combination.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub plain_model_plain_images: f64,
    pub plain_model_encrypted_images: f64,
    pub encrypted_model_plain_images: f64,
    pub encrypted_model_encrypted_images: f64,
    pub samples: usize,
    /// Test images whose plain-model top-2 logit gap is below [`TIE_GAP`].
    pub near_ties: usize,
}

impl AccuracyMatrix {
    /// Largest diagonal gap the exact plain/encrypted logit equivalence permits
    /// (near-tie images may flip), in percent.
    pub fn diagonal_allowance(&self) -> f64 {
        100.0 * self.near_ties as f64 / self.samples as f64
    }

    pub fn diagonal_gap(&self) -> f64 {
        (self.plain_model_plain_images - self.encrypted_model_encrypted_images).abs()
    }

    /// Human-readable table: rows are models, columns test images.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Classification accuracy (%)");
        let _ = writeln!(s, "{:<18}{:>10}{:>12}", "model \\ test image", "plain", "encrypted");
        let _ = writeln!(s, "{:<18}{:>10.2}{:>12.2}", "plain", self.plain_model_plain_images, self.plain_model_encrypted_images);
        let _ = writeln!(
            s,
            "{:<18}{:>10.2}{:>12.2}",
            "encrypted", self.encrypted_model_plain_images, self.encrypted_model_encrypted_images
        );
        s
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "model\tplain\tencrypted\nplain\t{:.2}\t{:.2}\nencrypted\t{:.2}\t{:.2}\n",
            self.plain_model_plain_images,
            self.plain_model_encrypted_images,
            self.encrypted_model_plain_images,
            self.encrypted_model_encrypted_images
        )
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "acc_plain_plain={}\nacc_plain_encrypted={}\nacc_encrypted_plain={}\nacc_encrypted_encrypted={}\nsamples={}\nnear_ties={}\n",
            self.plain_model_plain_images,
            self.plain_model_encrypted_images,
            self.encrypted_model_plain_images,
            self.encrypted_model_encrypted_images,
            self.samples,
            self.near_ties
        )
    }
}

/// Derives the encrypted model from `plain_model` and `key`, then scores all
/// four combinations on `test`.
pub fn accuracy_matrix(plain_model: &ConvMixerModel, key: &OrthoMatrix, test: &Dataset) -> Result<AccuracyMatrix, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let encrypted_model = transform_model(plain_model, key)?;
    let mut hits = [0usize; 4];
    let mut near_ties = 0;
    for (x, y) in test.iter() {
        let xe = encrypt_image(x, key)?;
        let plain_logits = forward(plain_model, x)?;
        near_ties += usize::from(plain_logits.top2_gap() < TIE_GAP);
        let preds = [
            plain_logits.argmax(),
            forward(plain_model, &xe)?.argmax(),
            forward(&encrypted_model, x)?.argmax(),
            forward(&encrypted_model, &xe)?.argmax(),
        ];
        for (h, p) in hits.iter_mut().zip(preds) {
            *h += usize::from(p == y);
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / test.len() as f64;
    Ok(AccuracyMatrix {
        plain_model_plain_images: pct(hits[0]),
        plain_model_encrypted_images: pct(hits[1]),
        encrypted_model_plain_images: pct(hits[2]),
        encrypted_model_encrypted_images: pct(hits[3]),
        samples: test.len(),
        near_ties,
    })
}

/// Global min-max map of an encrypted image onto `[0, 1]`; a constant image
/// maps to 0.5 everywhere.
pub fn normalize_for_view(xhat: &ImageTensor) -> Result<ImageTensor, EvalError> {
    if xhat.kind() != ImageKind::Encrypted {
        return Err(EvalError::Cipher(CipherError::Kind("display normalization expects an encrypted image".into())));
    }
    if xhat.data().iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let lo = xhat.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xhat.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        xhat.data().iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; xhat.data().len()]
    };
    Ok(ImageTensor::plain(xhat.height(), xhat.width(), xhat.channels(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageReport {
    pub mse: f64,
    pub ssim: f64,
    pub hist_corr: f64,
}

impl LeakageReport {
    pub fn measure(plain: &ImageTensor, view: &ImageTensor) -> Self {
        Self { mse: mse(plain, view), ssim: ssim(plain, view), hist_corr: histogram_correlation(plain, view) }
    }

    pub fn mean(reports: &[LeakageReport]) -> LeakageReport {
        let n = reports.len().max(1) as f64;
        LeakageReport {
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            hist_corr: reports.iter().map(|r| r.hist_corr).sum::<f64>() / n,
        }
    }
}

/// Leakage of the proposed and the conventional cipher against the plain
/// original, in that order. Both ciphertexts are display-normalized first.
pub fn leakage_report(
    plain: &ImageTensor,
    enc_proposed: &ImageTensor,
    enc_conventional: &ImageTensor,
) -> Result<(LeakageReport, LeakageReport), EvalError> {
    if !plain.same_geometry(enc_proposed) || !plain.same_geometry(enc_conventional) {
        return Err(EvalError::Geometry("leakage inputs must share one geometry".into()));
    }
    let proposed = normalize_for_view(enc_proposed)?;
    let conventional = normalize_for_view(enc_conventional)?;
    Ok((LeakageReport::measure(plain, &proposed), LeakageReport::measure(plain, &conventional)))
}

/// Writes a binary PPM; values must already lie in `[0, 1]`.
pub fn export_ppm(x: &ImageTensor, path: impl AsRef<Path>) -> Result<(), EvalError> {
    Ok(write_ppm(path, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{conventional_encrypt, generate_orthogonal, SecretKey};
    use crate::model::Geometry;
    use crate::nnengine::gen_toy_dataset;
    use crate::rnglinalg::RngState;

    #[test]
    fn constant_class_zero_model_scores_chance() {
        let mut m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(0)).unwrap();
        m.head_weight.iter_mut().for_each(|v| *v = 0.0);
        m.head_bias = (0..10).map(|c| if c == 0 { 1.0 } else { 0.0 }).collect();
        let (_, test) = gen_toy_dataset(1, 10).unwrap();
        assert_eq!(accuracy(&m, &test, None).unwrap(), 10.0);
    }

    #[test]
    fn identity_key_gives_equal_matrix() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(2)).unwrap();
        let (_, test) = gen_toy_dataset(1, 5).unwrap();
        let acc = accuracy_matrix(&m, &OrthoMatrix::identity(48), &test).unwrap();
        let v = acc.plain_model_plain_images;
        assert_eq!(
            [acc.plain_model_encrypted_images, acc.encrypted_model_plain_images, acc.encrypted_model_encrypted_images],
            [v; 3]
        );
        assert!(acc.to_table().contains("model \\ test image"));
        assert!(acc.to_key_values().contains(&format!("acc_plain_plain={v}")));
        assert_eq!(acc.to_tsv().lines().count(), 3);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(2)).unwrap();
        let (_, test) = gen_toy_dataset(1, 5).unwrap();
        let empty = test.take(0);
        assert!(matches!(accuracy_matrix(&m, &OrthoMatrix::identity(48), &empty), Err(EvalError::EmptyDataset)));
        assert!(matches!(accuracy(&m, &empty, None), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn normalization_rules() {
        let x = ImageTensor::encrypted(1, 2, 3, vec![-2.0, 2.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let v = normalize_for_view(&x).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 0.5, 0.75, 0.25, 0.625]);
        assert_eq!(v.kind(), ImageKind::Plain);

        let c = ImageTensor::encrypted(2, 2, 1, vec![3.0; 4]).unwrap();
        assert_eq!(normalize_for_view(&c).unwrap().data(), &[0.5; 4]);

        let unit = ImageTensor::encrypted(1, 4, 1, vec![0.0, 0.3, 1.0, 0.7]).unwrap();
        assert_eq!(normalize_for_view(&unit).unwrap().data(), unit.data());
        let again = normalize_for_view(&normalize_for_view(&unit).unwrap().with_kind(ImageKind::Encrypted).unwrap()).unwrap();
        assert_eq!(again.data(), unit.data());

        assert!(normalize_for_view(&ImageTensor::plain(1, 1, 1, vec![0.5]).unwrap()).is_err());
    }

    #[test]
    fn identity_ciphertext_leaks_everything() {
        let (train, _) = gen_toy_dataset(4, 3).unwrap();
        let x = &train.images()[0];
        let same = x.clone().with_kind(ImageKind::Encrypted).unwrap();
        let r = LeakageReport::measure(x, x);
        assert_eq!(r.mse, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        let (p, _) = leakage_report(x, &same, &same).unwrap();
        assert!(p.ssim > 0.5);
    }

    #[test]
    fn leakage_report_shapes() {
        let (train, _) = gen_toy_dataset(4, 3).unwrap();
        let x = &train.images()[0];
        let key = SecretKey::new(1, 4, 3).unwrap();
        let proposed = encrypt_image(x, &generate_orthogonal(&key)).unwrap();
        let conventional = conventional_encrypt(x, &key).unwrap();
        let (p, c) = leakage_report(x, &proposed, &conventional).unwrap();
        for r in [p, c] {
            assert!(r.mse >= 0.0 && (-1.0..=1.0).contains(&r.ssim) && (-1.0..=1.0).contains(&r.hist_corr));
        }
        let small = ImageTensor::encrypted(8, 8, 3, vec![0.0; 192]).unwrap();
        assert!(leakage_report(x, &small, &conventional).is_err());
    }

    #[test]
    fn ppm_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let (train, _) = gen_toy_dataset(4, 3).unwrap();
        let x = &train.images()[0];
        export_ppm(x, &path).unwrap();
        let back = crate::cipher::io::read_ppm(&path).unwrap();
        assert!(back.max_abs_diff(x) <= 1.0 / 255.0);
        let bad = ImageTensor::encrypted(1, 1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        assert!(export_ppm(&bad, dir.path().join("bad.ppm")).is_err());
    }
}
