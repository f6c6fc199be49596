//! ConvMixer forward and backward passes, training, and the toy dataset.
//!
//! Frozen architecture:
//!
//! ```text
//! blocks -> x E + b -> GELU -> BN
//!   depth x [ h + BN(GELU(depthwise(h))) -> BN(GELU(pointwise(.))) ]
//! -> global average pool -> linear head
//! ```

mod dataset;
mod layers;
mod train;

use thiserror::Error;

use crate::cipher::{blockify, CipherError, ImageTensor};
use crate::codec::FormatError;
use crate::model::{ConvMixerModel, ModelError};

pub use dataset::{gen_toy_dataset, gen_toy_dataset_with_noise, read_dataset, write_dataset, Dataset, toy_template};
pub use dataset::{decode_dataset, encode_dataset};
pub use layers::{gelu, gelu_grad, BnMode};
pub use train::{apply_batch_stats, train, EpochReport, Optimizer, TrainConfig, TrainOutcome, BN_MOMENTUM};

use layers::{
    bn_backward, bn_forward, depthwise_backward, depthwise_forward, gelu as act, gelu_grad as act_grad,
    pointwise_backward, pointwise_forward, BnCache, Grid,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    /// Index of the largest logit; the lowest index wins exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Difference between the largest and second-largest logit.
    pub fn top2_gap(&self) -> f64 {
        let mut sorted = self.0.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.as_slice() {
            [a, b, ..] => a - b,
            _ => f64::INFINITY,
        }
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Gradients for every trainable tensor, named and ordered like
/// [`ConvMixerModel::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_slice())
    }
}

struct LayerTape {
    input: Vec<f64>,
    dw_pre: Vec<f64>,
    bn1: BnCache,
    residual: Vec<f64>,
    pw_pre: Vec<f64>,
    bn2: BnCache,
}

struct Tape {
    batch: usize,
    grid: Grid,
    blocks: Vec<f64>,
    embed_pre: Vec<f64>,
    embed_bn: BnCache,
    layers: Vec<LayerTape>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

impl Tape {
    fn logits(&self) -> Vec<Logits> {
        let classes = self.logits.len() / self.batch;
        self.logits.chunks_exact(classes).map(|c| Logits(c.to_vec())).collect()
    }
}

fn check_image(m: &ConvMixerModel, x: &ImageTensor) -> Result<Grid, EngineError> {
    let g = m.geometry;
    if x.channels() != g.channels || !x.height().is_multiple_of(g.patch) || !x.width().is_multiple_of(g.patch) {
        return Err(EngineError::Geometry(format!(
            "{}x{}x{} image does not fit patch {} with {} channels",
            x.height(),
            x.width(),
            x.channels(),
            g.patch,
            g.channels
        )));
    }
    Ok(Grid { rows: x.height() / g.patch, cols: x.width() / g.patch, channels: g.dim })
}

fn run_forward(m: &ConvMixerModel, xs: &[&ImageTensor], mode: BnMode) -> Result<Tape, EngineError> {
    let first = xs.first().ok_or(EngineError::Empty)?;
    let grid = check_image(m, first)?;
    let g = m.geometry;
    let (d, n) = (g.dim, g.block_dim());

    let mut blocks = Vec::with_capacity(xs.len() * grid.positions() * n);
    for x in xs {
        if !x.same_geometry(first) {
            return Err(EngineError::Geometry("images in a batch must share one geometry".into()));
        }
        for b in blockify(x, g.patch)? {
            blocks.extend_from_slice(b.as_slice());
        }
    }

    let e = &m.patch.e;
    let mut embed_pre = vec![0.0; blocks.len() / n * d];
    for (br, zr) in blocks.chunks_exact(n).zip(embed_pre.chunks_exact_mut(d)) {
        zr.copy_from_slice(&m.patch.bias);
        for (k, &v) in br.iter().enumerate() {
            for (z, &w) in zr.iter_mut().zip(e.row(k)) {
                *z += v * w;
            }
        }
    }
    let activated: Vec<f64> = embed_pre.iter().map(|&v| act(v)).collect();
    let (mut h, embed_bn) = bn_forward(&activated, &m.embed_bn, mode);

    let mut layers = Vec::with_capacity(m.layers.len());
    for layer in &m.layers {
        let dw_pre = depthwise_forward(&h, grid, g.kernel, &layer.dw_weight, &layer.dw_bias);
        let dw_act: Vec<f64> = dw_pre.iter().map(|&v| act(v)).collect();
        let (mixed, bn1) = bn_forward(&dw_act, &layer.bn1, mode);
        let residual: Vec<f64> = h.iter().zip(&mixed).map(|(a, b)| a + b).collect();
        let pw_pre = pointwise_forward(&residual, d, &layer.pw_weight, &layer.pw_bias);
        let pw_act: Vec<f64> = pw_pre.iter().map(|&v| act(v)).collect();
        let (out, bn2) = bn_forward(&pw_act, &layer.bn2, mode);
        layers.push(LayerTape { input: std::mem::replace(&mut h, out), dw_pre, bn1, residual, pw_pre, bn2 });
    }

    let positions = grid.positions() as f64;
    let mut pooled = vec![0.0; xs.len() * d];
    for (sample, pr) in h.chunks_exact(grid.sample_len()).zip(pooled.chunks_exact_mut(d)) {
        for row in sample.chunks_exact(d) {
            for (p, v) in pr.iter_mut().zip(row) {
                *p += v;
            }
        }
        pr.iter_mut().for_each(|p| *p /= positions);
    }

    let mut logits = Vec::with_capacity(xs.len() * g.classes);
    for pr in pooled.chunks_exact(d) {
        for c in 0..g.classes {
            let w = &m.head_weight[c * d..(c + 1) * d];
            logits.push(m.head_bias[c] + w.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>());
        }
    }

    Ok(Tape { batch: xs.len(), grid, blocks, embed_pre, embed_bn, layers, pooled, logits })
}

/// Inference-mode forward pass (running batch-norm statistics).
pub fn forward(m: &ConvMixerModel, x: &ImageTensor) -> Result<Logits, EngineError> {
    Ok(run_forward(m, &[x], BnMode::Inference)?.logits().remove(0))
}

pub fn forward_batch(m: &ConvMixerModel, xs: &[&ImageTensor], mode: BnMode) -> Result<Vec<Logits>, EngineError> {
    Ok(run_forward(m, xs, mode)?.logits())
}

pub fn predict(m: &ConvMixerModel, x: &ImageTensor) -> Result<usize, EngineError> {
    Ok(forward(m, x)?.argmax())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn check_labels(m: &ConvMixerModel, xs: &[&ImageTensor], labels: &[usize]) -> Result<(), EngineError> {
    if xs.len() != labels.len() {
        return Err(EngineError::Geometry(format!("{} images but {} labels", xs.len(), labels.len())));
    }
    let classes = m.geometry.classes;
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(EngineError::Label { label, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch.
pub fn batch_loss(m: &ConvMixerModel, xs: &[&ImageTensor], labels: &[usize], mode: BnMode) -> Result<f64, EngineError> {
    check_labels(m, xs, labels)?;
    let tape = run_forward(m, xs, mode)?;
    Ok(loss_from_tape(&tape, labels))
}

fn loss_from_tape(tape: &Tape, labels: &[usize]) -> f64 {
    let classes = tape.logits.len() / tape.batch;
    let total: f64 =
        tape.logits.chunks_exact(classes).zip(labels).map(|(l, &y)| -log_softmax(l)[y]).sum();
    total / tape.batch as f64
}

/// Result of one forward/backward sweep over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub logits: Vec<Logits>,
    pub grads: Gradients,
    /// Per batch norm (file order), the batch mean and biased variance seen in
    /// training mode. Empty in inference mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Gradients of the mean cross-entropy with respect to every trainable tensor.
pub fn loss_and_gradients(
    m: &ConvMixerModel,
    xs: &[&ImageTensor],
    labels: &[usize],
    mode: BnMode,
) -> Result<BatchGradients, EngineError> {
    check_labels(m, xs, labels)?;
    let tape = run_forward(m, xs, mode)?;
    let loss = loss_from_tape(&tape, labels);
    let g = m.geometry;
    let (d, n, classes, batch) = (g.dim, g.block_dim(), g.classes, tape.batch);

    // Output layer.
    let mut dlogits = vec![0.0; tape.logits.len()];
    for ((dl, l), &y) in dlogits.chunks_exact_mut(classes).zip(tape.logits.chunks_exact(classes)).zip(labels) {
        for (o, lp) in dl.iter_mut().zip(log_softmax(l)) {
            *o = lp.exp() / batch as f64;
        }
        dl[y] -= 1.0 / batch as f64;
    }
    let mut head_w = vec![0.0; classes * d];
    let mut head_b = vec![0.0; classes];
    let mut dpooled = vec![0.0; batch * d];
    for ((dl, pr), dp) in dlogits.chunks_exact(classes).zip(tape.pooled.chunks_exact(d)).zip(dpooled.chunks_exact_mut(d)) {
        for c in 0..classes {
            head_b[c] += dl[c];
            for f in 0..d {
                head_w[c * d + f] += dl[c] * pr[f];
                dp[f] += dl[c] * m.head_weight[c * d + f];
            }
        }
    }

    // Average pool.
    let positions = tape.grid.positions();
    let mut dh = vec![0.0; batch * tape.grid.sample_len()];
    for (dhs, dp) in dh.chunks_exact_mut(tape.grid.sample_len()).zip(dpooled.chunks_exact(d)) {
        for row in dhs.chunks_exact_mut(d) {
            for (r, v) in row.iter_mut().zip(dp) {
                *r = v / positions as f64;
            }
        }
    }

    let mut layer_grads = Vec::with_capacity(m.layers.len());
    for (layer, lt) in m.layers.iter().zip(&tape.layers).rev() {
        let (dpw_act, bn2_g, bn2_b) = bn_backward(&dh, &lt.bn2, &layer.bn2.gamma);
        let dpw_pre: Vec<f64> = dpw_act.iter().zip(&lt.pw_pre).map(|(g, &x)| g * act_grad(x)).collect();
        let (dresidual, pw_w, pw_b) = pointwise_backward(&dpw_pre, &lt.residual, d, &layer.pw_weight);
        let (ddw_act, bn1_g, bn1_b) = bn_backward(&dresidual, &lt.bn1, &layer.bn1.gamma);
        let ddw_pre: Vec<f64> = ddw_act.iter().zip(&lt.dw_pre).map(|(g, &x)| g * act_grad(x)).collect();
        let (dinput, dw_w, dw_b) = depthwise_backward(&ddw_pre, &lt.input, tape.grid, g.kernel, &layer.dw_weight);
        dh = dresidual.iter().zip(&dinput).map(|(a, b)| a + b).collect();
        layer_grads.push([dw_w, dw_b, bn1_g, bn1_b, pw_w, pw_b, bn2_g, bn2_b]);
    }
    layer_grads.reverse();

    let (dact, ebn_g, ebn_b) = bn_backward(&dh, &tape.embed_bn, &m.embed_bn.gamma);
    let dpre: Vec<f64> = dact.iter().zip(&tape.embed_pre).map(|(g, &x)| g * act_grad(x)).collect();
    let mut patch_e = vec![0.0; n * d];
    let mut patch_b = vec![0.0; d];
    for (br, gr) in tape.blocks.chunks_exact(n).zip(dpre.chunks_exact(d)) {
        for (pb, g) in patch_b.iter_mut().zip(gr) {
            *pb += g;
        }
        for (k, &v) in br.iter().enumerate() {
            for (pe, g) in patch_e[k * d..(k + 1) * d].iter_mut().zip(gr) {
                *pe += v * g;
            }
        }
    }

    let mut flat = vec![patch_e, patch_b, ebn_g, ebn_b];
    for lg in layer_grads {
        flat.extend(lg);
    }
    flat.push(head_w);
    flat.push(head_b);
    let tensors = m.trainable_names().into_iter().zip(flat).collect();

    let batch_stats = match mode {
        BnMode::Inference => Vec::new(),
        BnMode::Training => {
            let mut stats = vec![(tape.embed_bn.batch_mean.clone(), tape.embed_bn.batch_var.clone())];
            for lt in &tape.layers {
                stats.push((lt.bn1.batch_mean.clone(), lt.bn1.batch_var.clone()));
                stats.push((lt.bn2.batch_mean.clone(), lt.bn2.batch_var.clone()));
            }
            stats
        }
    };

    Ok(BatchGradients { loss, logits: tape.logits(), grads: Gradients { tensors }, batch_stats })
}

/// Single-sample gradients with batch norm on running statistics. With a
/// batch of one, batch statistics would make the pooled features equal to
/// the last `beta` and cut every upstream gradient to zero.
pub fn backward(m: &ConvMixerModel, x: &ImageTensor, label: usize) -> Result<Gradients, EngineError> {
    Ok(loss_and_gradients(m, &[x], &[label], BnMode::Inference)?.grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Geometry;
    use crate::rnglinalg::RngState;

    fn image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = RngState::new(seed);
        ImageTensor::plain(h, w, c, (0..h * w * c).map(|_| rng.unit()).collect()).unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(Logits(vec![1.0, 3.0, 3.0]).argmax(), 1);
        assert_eq!(Logits(vec![0.0; 4]).argmax(), 0);
        assert_eq!(Logits(vec![1.0, 3.0, 2.5]).top2_gap(), 0.5);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(1)).unwrap();
        for (_, t) in m.trainable_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = forward(&m, &image(16, 16, 3, 2)).unwrap();
        assert!(logits.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_softmax_minus_onehot() {
        let mut m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(1)).unwrap();
        m.head_weight.iter_mut().for_each(|v| *v = 0.0);
        m.head_bias.iter_mut().for_each(|v| *v = 0.0);
        let g = backward(&m, &image(16, 16, 3, 4), 3).unwrap();
        let hb = g.get("head.bias").unwrap();
        for (c, &v) in hb.iter().enumerate() {
            let want = 0.1 - if c == 3 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_batch_matches_single_sample() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(7)).unwrap();
        let x = image(16, 16, 3, 5);
        for mode in [BnMode::Training, BnMode::Inference] {
            let single = loss_and_gradients(&m, &[&x], &[2], mode).unwrap();
            let double = loss_and_gradients(&m, &[&x, &x], &[2, 2], mode).unwrap();
            assert!((single.loss - double.loss).abs() < 1e-12);
            for ((name, a), (_, b)) in single.grads.tensors.iter().zip(&double.grads.tensors) {
                let scale = a.iter().map(|v| v.abs()).fold(1e-6, f64::max);
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() <= 1e-12 + 1e-10 * scale, "{name} in {mode:?}: {u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn geometry_and_label_errors() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(1)).unwrap();
        assert!(matches!(forward(&m, &image(16, 16, 1, 0)), Err(EngineError::Geometry(_))));
        assert!(matches!(forward(&m, &image(14, 16, 3, 0)), Err(EngineError::Geometry(_))));
        let x = image(16, 16, 3, 0);
        assert!(matches!(backward(&m, &x, 10), Err(EngineError::Label { .. })));
        let y = image(8, 8, 3, 0);
        assert!(forward_batch(&m, &[&x, &y], BnMode::Inference).is_err());
        assert!(matches!(forward_batch(&m, &[], BnMode::Inference), Err(EngineError::Empty)));
    }

    #[test]
    fn batch_inference_matches_single() {
        let m = ConvMixerModel::init(Geometry::TOY, &mut RngState::new(3)).unwrap();
        let xs: Vec<ImageTensor> = (0..4).map(|s| image(16, 16, 3, s)).collect();
        let refs: Vec<&ImageTensor> = xs.iter().collect();
        let batch = forward_batch(&m, &refs, BnMode::Inference).unwrap();
        for (x, l) in xs.iter().zip(&batch) {
            assert_eq!(&forward(&m, x).unwrap(), l);
        }
    }
}
