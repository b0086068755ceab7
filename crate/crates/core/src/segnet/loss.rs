//! Pixel-wise softmax cross-entropy and its online-hard-example-mining
//! variant, recorded as single tape operations.

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE_INDEX: u8 = 255;

struct PixelCe {
    /// Per-pixel loss, `None` where the label is ignored. Pixel index is
    /// `b * H * W + p`.
    losses: Vec<Option<f64>>,
    /// Softmax probabilities in the logits layout.
    probs: Vec<f64>,
}

fn pixel_ce(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<PixelCe> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(shape_err(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let d = logits.data();
    let mut probs = vec![0.0; d.len()];
    let mut losses = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let at = |c: usize| (b * k + c) * plane + p;
            let label = labels[b * plane + p];
            let max = (0..k).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (d[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] /= z;
            }
            if label == ignore_index {
                losses.push(None);
                continue;
            }
            if label as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: label as i64,
                    classes: k,
                });
            }
            losses.push(Some(max + z.ln() - d[at(label as usize)]));
        }
    }
    Ok(PixelCe { losses, probs })
}

/// Per-pixel cross-entropy, `None` for ignored pixels.
pub fn pixel_losses(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<Vec<Option<f64>>> {
    Ok(pixel_ce(logits, labels, ignore_index)?.losses)
}

struct SelectedCeBackward {
    probs: Vec<f64>,
    /// `(pixel, label)` of the pixels in the mean, ascending by pixel.
    kept: Vec<(usize, usize)>,
}

impl Backward for SelectedCeBackward {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (_, k, h, w) = ctx.inputs[0].dims4().expect("checked in forward");
        let plane = h * w;
        let scale = ctx.grad_output[0] / self.kept.len() as f64;
        let mut grad = vec![0.0; ctx.inputs[0].numel()];
        for &(pix, label) in &self.kept {
            let (b, p) = (pix / plane, pix % plane);
            for c in 0..k {
                let i = (b * k + c) * plane + p;
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad[i] = scale * (self.probs[i] - onehot);
            }
        }
        vec![Some(grad)]
    }
}

/// Mean loss over `kept` pixels, summed in ascending pixel order.
fn record_mean(tape: &mut Tape, logits: Var, labels: &[u8], ce: PixelCe, mut kept: Vec<usize>) -> Var {
    kept.sort_unstable();
    let total: f64 = kept.iter().map(|&p| ce.losses[p].expect("kept pixels are valid")).sum();
    let value = Tensor::scalar(total / kept.len() as f64);
    let kept = kept.into_iter().map(|p| (p, labels[p] as usize)).collect();
    tape.record(value, &[logits], SelectedCeBackward { probs: ce.probs, kept })
}

impl Tape {
    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// `labels` is `N x H x W` in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
        let ce = pixel_ce(self.value(logits), labels, ignore_index)?;
        let kept: Vec<usize> = (0..ce.losses.len()).filter(|&p| ce.losses[p].is_some()).collect();
        if kept.is_empty() {
            return Err(Error::AllIgnored);
        }
        Ok(record_mean(self, logits, labels, ce, kept))
    }

    /// Cross-entropy averaged over the `K` highest-loss pixels, where
    /// `K = max(min_kept, floor(keep_fraction * valid))` capped at the number
    /// of valid pixels. Ties at the cutoff keep the lower pixel index.
    pub fn ohem_loss(
        &mut self,
        logits: Var,
        labels: &[u8],
        keep_fraction: f64,
        min_kept: usize,
        ignore_index: u8,
    ) -> Result<Var> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(crate::error::spec_err(format!(
                "keep_fraction {keep_fraction} outside (0, 1]"
            )));
        }
        let ce = pixel_ce(self.value(logits), labels, ignore_index)?;
        let mut valid: Vec<usize> = (0..ce.losses.len()).filter(|&p| ce.losses[p].is_some()).collect();
        if valid.is_empty() {
            return Err(Error::AllIgnored);
        }
        let k = ((keep_fraction * valid.len() as f64).floor() as usize)
            .max(min_kept)
            .min(valid.len());
        let loss = |p: usize| ce.losses[p].expect("valid");
        valid.sort_by(|&a, &b| loss(b).total_cmp(&loss(a)).then(a.cmp(&b)));
        valid.truncate(k);
        Ok(record_mean(self, logits, labels, ce, valid))
    }
}

/// Free-function form of [`Tape::cross_entropy`].
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
    tape.cross_entropy(logits, labels, ignore_index)
}

/// Free-function form of [`Tape::ohem_loss`].
pub fn ohem_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[u8],
    keep_fraction: f64,
    min_kept: usize,
    ignore_index: u8,
) -> Result<Var> {
    tape.ohem_loss(logits, labels, keep_fraction, min_kept, ignore_index)
}
