//! Image similarity measures used to quantify visual leakage.

use crate::cipher::ImageTensor;

pub const SSIM_WINDOW: usize = 8;
pub const HIST_BINS: usize = 64;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert!(a.same_geometry(b));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64
}

/// Mean SSIM over all `8 x 8` windows (stride 1, uniform weights) and
/// channels, for data range 1. Images smaller than the window use one window
/// covering the whole image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert!(a.same_geometry(b));
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let count = (wh * ww) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..ch {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (u, v) = (a.get(y, x, c), b.get(y, x, c));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / count, sb / count);
                let va = (saa / count - ma * ma).max(0.0);
                let vb = (sbb / count - mb * mb).max(0.0);
                let cov = sab / count - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
    }
    total / windows as f64
}

fn histogram(x: &ImageTensor, channel: usize) -> Vec<f64> {
    let mut bins = vec![0.0; HIST_BINS];
    for pix in x.data().chunks_exact(x.channels()) {
        let v = pix[channel].clamp(0.0, 1.0);
        let idx = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        bins[idx] += 1.0;
    }
    bins
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of 64-bin histograms over `[0, 1]`, averaged over
/// channels. Flat histograms correlate 1 with themselves and 0 otherwise.
pub fn histogram_correlation(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert!(a.same_geometry(b));
    let ch = a.channels();
    (0..ch).map(|c| pearson(&histogram(a, c), &histogram(b, c))).sum::<f64>() / ch as f64
}
