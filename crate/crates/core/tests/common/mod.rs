//! Test-only oracles: a second, deliberately naive ConvMixer forward pass and
//! a central finite-difference gradient checker.

#![allow(dead_code, clippy::needless_range_loop)]

use orthomix::cipher::ImageTensor;
use orthomix::model::{BatchNorm, ConvMixerModel, Geometry, BN_EPS};
use orthomix::nnengine::{batch_loss, loss_and_gradients, BnMode};
use orthomix::rnglinalg::RngState;

pub fn random_plain(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let mut rng = RngState::new(seed);
    ImageTensor::plain(h, w, c, (0..h * w * c).map(|_| rng.unit()).collect()).unwrap()
}

/// A model with every tensor randomized, including batch-norm running
/// statistics, so inference mode exercises all parameters.
pub fn random_model(geometry: Geometry, seed: u64) -> ConvMixerModel {
    let mut rng = RngState::new(seed);
    let mut m = ConvMixerModel::init(geometry, &mut rng).unwrap();
    let mut bns: Vec<&mut BatchNorm> = m.batch_norms_mut();
    for bn in bns.iter_mut() {
        for c in 0..bn.len() {
            bn.gamma[c] = 0.5 + rng.unit();
            bn.beta[c] = 0.3 * rng.uniform();
            bn.running_mean[c] = 0.2 * rng.uniform();
            bn.running_var[c] = 0.2 + rng.unit();
        }
    }
    m
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn bn_apply(v: f64, bn: &BatchNorm, c: usize) -> f64 {
    (v - bn.running_mean[c]) / (bn.running_var[c] + BN_EPS).sqrt() * bn.gamma[c] + bn.beta[c]
}

/// Inference-mode forward pass written independently of the engine:
/// channel-major `[c][y][x]` feature maps, the patch embedding as a stride-`p`
/// convolution on the raw image, explicit zero-padded depthwise convolution.
pub fn reference_forward(m: &ConvMixerModel, x: &ImageTensor) -> Vec<f64> {
    let g = m.geometry;
    let (p, cin, d, k) = (g.patch, g.channels, g.dim, g.kernel);
    let (gh, gw) = (x.height() / p, x.width() / p);

    // fmap[o][gy][gx]
    let mut fmap = vec![vec![vec![0.0; gw]; gh]; d];
    for o in 0..d {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut acc = m.patch.bias[o];
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..cin {
                            let weight = m.patch.e.get((dy * p + dx) * cin + c, o);
                            acc += weight * x.get(gy * p + dy, gx * p + dx, c);
                        }
                    }
                }
                fmap[o][gy][gx] = bn_apply(gelu(acc), &m.embed_bn, o);
            }
        }
    }

    let half = (k / 2) as isize;
    for layer in &m.layers {
        let mut mixed = fmap.clone();
        for c in 0..d {
            for y in 0..gh {
                for xx in 0..gw {
                    let mut acc = layer.dw_bias[c];
                    for i in 0..k {
                        for j in 0..k {
                            let sy = y as isize + i as isize - half;
                            let sx = xx as isize + j as isize - half;
                            if sy >= 0 && sx >= 0 && (sy as usize) < gh && (sx as usize) < gw {
                                acc += layer.dw_weight[c * k * k + i * k + j] * fmap[c][sy as usize][sx as usize];
                            }
                        }
                    }
                    mixed[c][y][xx] = fmap[c][y][xx] + bn_apply(gelu(acc), &layer.bn1, c);
                }
            }
        }
        let mut next = fmap.clone();
        for o in 0..d {
            for y in 0..gh {
                for xx in 0..gw {
                    let mut acc = layer.pw_bias[o];
                    for i in 0..d {
                        acc += layer.pw_weight[o * d + i] * mixed[i][y][xx];
                    }
                    next[o][y][xx] = bn_apply(gelu(acc), &layer.bn2, o);
                }
            }
        }
        fmap = next;
    }

    let pooled: Vec<f64> = fmap.iter().map(|ch| ch.iter().flatten().sum::<f64>() / (gh * gw) as f64).collect();
    (0..g.classes)
        .map(|c| m.head_bias[c] + (0..d).map(|f| m.head_weight[c * d + f] * pooled[f]).sum::<f64>())
        .collect()
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Central differences with step `h` on every trainable scalar. Relative
/// error per tensor is `|a - n|_2 / max(|a|_2, |n|_2)`.
pub fn finite_difference_check(
    m: &ConvMixerModel,
    xs: &[&ImageTensor],
    labels: &[usize],
    mode: BnMode,
    h: f64,
) -> Vec<TensorCheck> {
    let analytic = loss_and_gradients(m, xs, labels, mode).unwrap().grads;
    let mut work = m.clone();
    let sizes: Vec<usize> = work.trainable_mut().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::new();
    for (ti, (name, grad)) in analytic.tensors.iter().enumerate() {
        assert_eq!(grad.len(), sizes[ti]);
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let orig = work.trainable_mut()[ti].1[j];
            work.trainable_mut()[ti].1[j] = orig + h;
            let plus = batch_loss(&work, xs, labels, mode).unwrap();
            work.trainable_mut()[ti].1[j] = orig - h;
            let minus = batch_loss(&work, xs, labels, mode).unwrap();
            work.trainable_mut()[ti].1[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let an: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = an.max(nn);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        out.push(TensorCheck { name: name.clone(), rel_error, analytic_norm: an });
    }
    out
}

/// `p = 2, d = 4, depth = 1, k = 3` on single-channel input.
pub fn tiny_geometry() -> Geometry {
    Geometry { patch: 2, channels: 1, dim: 4, depth: 1, kernel: 3, classes: 3 }
}
