//! Primitive forward/backward kernels. Activations are flat buffers laid out
//! `[sample][position][channel]` with positions in raster order over a
//! `rows x cols` token grid.

use crate::model::{BatchNorm, BN_EPS};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the stored running statistics.
    Inference,
    /// Normalize with statistics of the current batch (over samples and
    /// positions).
    Training,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: BnMode,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance (training mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn bn_forward(x: &[f64], bn: &BatchNorm, mode: BnMode) -> (Vec<f64>, BnCache) {
    let d = bn.len();
    let m = x.len() / d;
    let (mean, var) = match mode {
        BnMode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
        BnMode::Training => {
            let mut mean = vec![0.0; d];
            for row in x.chunks_exact(d) {
                for (s, v) in mean.iter_mut().zip(row) {
                    *s += v;
                }
            }
            mean.iter_mut().for_each(|s| *s /= m as f64);
            let mut var = vec![0.0; d];
            for row in x.chunks_exact(d) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s /= m as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(y.chunks_exact_mut(d)) {
        for c in 0..d {
            hr[c] = (xr[c] - mean[c]) * inv_std[c];
            yr[c] = bn.gamma[c] * hr[c] + bn.beta[c];
        }
    }
    let (batch_mean, batch_var) = match mode {
        BnMode::Training => (mean, var),
        BnMode::Inference => (Vec::new(), Vec::new()),
    };
    (y, BnCache { mode, xhat, inv_std, batch_mean, batch_var })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(dy: &[f64], cache: &BnCache, gamma: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let m = (dy.len() / d) as f64;
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (dr, hr) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
        for c in 0..d {
            dgamma[c] += dr[c] * hr[c];
            dbeta[c] += dr[c];
        }
    }
    let mut dx = vec![0.0; dy.len()];
    match cache.mode {
        BnMode::Inference => {
            for (xr, dr) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)) {
                for c in 0..d {
                    xr[c] = dr[c] * gamma[c] * cache.inv_std[c];
                }
            }
        }
        BnMode::Training => {
            // dx = inv_std / m * (m * g*dy - sum(g*dy) - xhat * sum(g*dy*xhat))
            for ((xr, dr), hr) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)).zip(cache.xhat.chunks_exact(d)) {
                for c in 0..d {
                    let g = gamma[c];
                    xr[c] = cache.inv_std[c] / m * (m * g * dr[c] - g * dbeta[c] - hr[c] * g * dgamma[c]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Grid geometry of one sample's token map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Grid {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn sample_len(&self) -> usize {
        self.positions() * self.channels
    }
}

/// Per-channel `k x k` cross-correlation with zero "same" padding plus bias.
pub fn depthwise_forward(x: &[f64], grid: Grid, k: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (rows, cols, d) = (grid.rows, grid.cols, grid.channels);
    let half = k / 2;
    let mut out = vec![0.0; x.len()];
    for (xs, os) in x.chunks_exact(grid.sample_len()).zip(out.chunks_exact_mut(grid.sample_len())) {
        for y in 0..rows {
            for xx in 0..cols {
                let o = &mut os[(y * cols + xx) * d..(y * cols + xx + 1) * d];
                o.copy_from_slice(bias);
                for i in 0..k {
                    let Some(sy) = (y + i).checked_sub(half).filter(|&v| v < rows) else { continue };
                    for j in 0..k {
                        let Some(sx) = (xx + j).checked_sub(half).filter(|&v| v < cols) else { continue };
                        let src = &xs[(sy * cols + sx) * d..(sy * cols + sx + 1) * d];
                        for c in 0..d {
                            o[c] += weight[(c * k + i) * k + j] * src[c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn depthwise_backward(
    dy: &[f64],
    x: &[f64],
    grid: Grid,
    k: usize,
    weight: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, cols, d) = (grid.rows, grid.cols, grid.channels);
    let half = k / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; d];
    let len = grid.sample_len();
    for ((dys, xs), dxs) in dy.chunks_exact(len).zip(x.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
        for y in 0..rows {
            for xx in 0..cols {
                let g = &dys[(y * cols + xx) * d..(y * cols + xx + 1) * d];
                for c in 0..d {
                    db[c] += g[c];
                }
                for i in 0..k {
                    let Some(sy) = (y + i).checked_sub(half).filter(|&v| v < rows) else { continue };
                    for j in 0..k {
                        let Some(sx) = (xx + j).checked_sub(half).filter(|&v| v < cols) else { continue };
                        let base = (sy * cols + sx) * d;
                        for c in 0..d {
                            let widx = (c * k + i) * k + j;
                            dw[widx] += g[c] * xs[base + c];
                            dxs[base + c] += g[c] * weight[widx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y[pos][o] = sum_i W[o][i] x[pos][i] + b[o]`.
pub fn pointwise_forward(x: &[f64], d: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for (o, y) in yr.iter_mut().enumerate() {
            let w = &weight[o * d..(o + 1) * d];
            *y = bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

pub fn pointwise_backward(dy: &[f64], x: &[f64], d: usize, weight: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; d * d];
    let mut db = vec![0.0; d];
    for ((gr, xr), dxr) in dy.chunks_exact(d).zip(x.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        for o in 0..d {
            let g = gr[o];
            db[o] += g;
            let w = &weight[o * d..(o + 1) * d];
            let dwr = &mut dw[o * d..(o + 1) * d];
            for i in 0..d {
                dwr[i] += g * xr[i];
                dxr[i] += g * w[i];
            }
        }
    }
    (dx, dw, db)
}
