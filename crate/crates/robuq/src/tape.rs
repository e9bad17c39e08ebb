//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Values are appended in evaluation order; `backward` walks the tape in
//! reverse, accumulating gradients. Ops save whatever forward state their
//! backward rule needs (softmax probabilities, normalized activations),
//! so a tape is evaluate-once, differentiate-once.
//!
//! Conventions: `sign(0) = 0`, ReLU and abs take the zero subgradient at
//! the kink, softmax is stabilized by row-max subtraction, and losses
//! reduce by batch mean. Shapes are explicit; the only implicit expansion
//! is per-channel / per-column bias addition.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MulScalar {
        x: ValueId,
        c: f64,
    },
    AddBias {
        x: ValueId,
        b: ValueId,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: ValueId,
    },
    Tanh {
        x: ValueId,
    },
    Sign {
        x: ValueId,
    },
    Abs {
        x: ValueId,
    },
    Mean {
        x: ValueId,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    DownsamplePad {
        x: ValueId,
        stride: usize,
    },
    BatchNormTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        inv_std: Vec<f64>,
        xhat: Tensor,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    BatchNormEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SoftCrossEntropy {
        logits: ValueId,
        targets: Tensor,
        probs: Tensor,
    },
    KlDivSoftmax {
        a: ValueId,
        b: ValueId,
        p: Tensor,
        q: Tensor,
        kl_rows: Vec<f64>,
    },
    MarginLoss {
        logits: ValueId,
        labels: Vec<usize>,
        kappa: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by tape value id.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    /// Gradient for `id`, or zeros of its shape when the value was never
    /// touched by the backward pass.
    pub fn grad_or_zeros(&self, tape: &Tape, id: ValueId) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn mul_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = self.value(x).scale(c);
        self.push(v, Op::MulScalar { x, c })
    }

    /// Add a bias vector: per column for `[n, k] + [k]`, per channel for
    /// `[n, c, h, w] + [c]`.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let per = match xs.len() {
            2 => xs[1],
            4 => xs[1],
            _ => {
                return Err(Error::shape(
                    "add_bias",
                    format!("input rank {} unsupported", xs.len()),
                ))
            }
        };
        if bs != [per] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match input {:?}", bs, xs),
            ));
        }
        let xd = self.value(x).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(xd.len());
        if xs.len() == 2 {
            for row in xd.chunks_exact(per) {
                for (v, bv) in row.iter().zip(bd.iter()) {
                    out.push(v + bv);
                }
            }
        } else {
            let hw = xs[2] * xs[3];
            for img in xd.chunks_exact(per * hw) {
                for (c, plane) in img.chunks_exact(hw).enumerate() {
                    for v in plane {
                        out.push(v + bd[c]);
                    }
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push(v, Op::AddBias { x, b }))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let asv = self.value(a).shape().to_vec();
        let bsv = self.value(b).shape().to_vec();
        if asv.len() != 2 || bsv.len() != 2 || asv[1] != bsv[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", asv, bsv),
            ));
        }
        let (m, k, n) = (asv[0], asv[1], bsv[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ad[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..kk * n + n];
                let orow = &mut out[i * n..i * n + n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    /// 2-d cross-correlation, NCHW input, `[out, in, kh, kw]` kernel,
    /// floor-based output size.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} kernel {:?}", xs, ws),
            ));
        }
        let (nb, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xd = self.value(x).data();
        let wdt = self.value(w).data();
        let mut out = vec![0.0; nb * cout * oh * ow];
        for n in 0..nb {
            for co in 0..cout {
                let ybase = (n * cout + co) * oh * ow;
                for ci in 0..cin {
                    let xbase = (n * cin + ci) * h * wd;
                    let wbase = (co * cin + ci) * kh * kw;
                    for dh in 0..kh {
                        let (oh_lo, oh_hi) = tap_range(dh, pad, stride, h, oh);
                        for dw in 0..kw {
                            let wv = wdt[wbase + dh * kw + dw];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = tap_range(dw, pad, stride, wd, ow);
                            for ohi in oh_lo..oh_hi {
                                let ih = ohi * stride + dh - pad;
                                let xrow = xbase + ih * wd;
                                let yrow = ybase + ohi * ow;
                                for owi in ow_lo..ow_hi {
                                    let iw = owi * stride + dw - pad;
                                    out[yrow + owi] += wv * xd[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![nb, cout, oh, ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(v, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh { x })
    }

    /// Elementwise sign with `sign(0) = 0`; derivative is zero everywhere.
    pub fn sign(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(sign0);
        self.push(v, Op::Sign { x })
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs { x })
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x })
    }

    /// `[n, c, h, w] -> [n, c]`, averaging over the spatial extent.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", xs)));
        }
        let hw = xs[2] * xs[3];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        for plane in xd.chunks_exact(hw) {
            out.push(plane.iter().sum::<f64>() / hw as f64);
        }
        let v = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool { x }))
    }

    /// Identity shortcut across a downsampling stage: spatial subsampling by
    /// `stride` plus zero padding up to `out_channels`.
    pub fn downsample_pad(
        &mut self,
        x: ValueId,
        stride: usize,
        out_channels: usize,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("downsample_pad", format!("{:?}", xs)));
        }
        if out_channels < xs[1] {
            return Err(Error::shape(
                "downsample_pad",
                format!("cannot shrink channels {} -> {}", xs[1], out_channels),
            ));
        }
        let (nb, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let xd = self.value(x).data();
        let mut out = vec![0.0; nb * out_channels * oh * ow];
        for n in 0..nb {
            for c in 0..cin {
                let xbase = (n * cin + c) * h * wd;
                let ybase = (n * out_channels + c) * oh * ow;
                for ohi in 0..oh {
                    let xrow = xbase + ohi * stride * wd;
                    let yrow = ybase + ohi * ow;
                    for owi in 0..ow {
                        out[yrow + owi] = xd[xrow + owi * stride];
                    }
                }
            }
        }
        let v = Tensor::new(vec![nb, out_channels, oh, ow], out)?;
        Ok(self.push(v, Op::DownsamplePad { x, stride }))
    }

    /// Batch normalization over `(n, h, w)` per channel, using batch
    /// statistics. Biased variance is used for normalization and reported
    /// via [`Tape::bn_batch_stats`].
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm_train", format!("{:?}", xs)));
        }
        let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        self.check_bn_params(c, gamma, beta)?;
        let m = nb * h * wd;
        if m == 0 {
            return Err(Error::Contract("batch_norm_train on empty batch".into()));
        }
        let hw = h * wd;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                mean[ch] += xd[base..base + hw].iter().sum::<f64>();
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let mu = mean[ch];
                var[ch] += xd[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + hw {
                    let xh = (xd[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let xhat = Tensor::new(xs.clone(), xhat)?;
        let v = Tensor::new(xs, out)?;
        Ok(self.push(
            v,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Batch statistics `(mean, biased variance)` recorded by a
    /// `batch_norm_train` node, for running-average updates.
    pub fn bn_batch_stats(&self, id: ValueId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm_eval", format!("{:?}", xs)));
        }
        let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        self.check_bn_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm_eval",
                format!("stats len {}/{} for {} channels", mean.len(), var.len(), c),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * wd;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + hw {
                    out[i] = g * (xd[i] - mu) * is + b;
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        ))
    }

    fn check_bn_params(&self, c: usize, gamma: ValueId, beta: ValueId) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?} beta {:?} for {} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    c
                ),
            ));
        }
        Ok(())
    }

    /// Mean cross-entropy of row-softmax logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("{:?}", ls)));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if n == 0 {
            return Err(Error::Contract("softmax_cross_entropy on empty batch".into()));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::Label { label: y, classes: k });
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= n as f64;
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean cross-entropy of row-softmax logits against fixed target
    /// distributions; gradients reach the logits only, never the targets.
    pub fn soft_cross_entropy(&mut self, logits: ValueId, targets: &Tensor) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || targets.shape() != ls {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("logits {:?} targets {:?}", ls, targets.shape()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        if n == 0 {
            return Err(Error::Contract("soft_cross_entropy on empty batch".into()));
        }
        let td = targets.data();
        for i in 0..n {
            let row = &td[i * k..(i + 1) * k];
            if row.iter().any(|&t| t < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "target row {i} is not a probability distribution"
                )));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            let mut dot = 0.0;
            for j in 0..k {
                dot += td[i * k + j] * row[j];
            }
            loss += lse - dot;
        }
        loss /= n as f64;
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
        ))
    }

    /// Mean over rows of `KL(softmax(a) || softmax(b))`. Gradients flow to
    /// both logit tensors.
    pub fn kl_div_softmax(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let asv = self.value(a).shape().to_vec();
        if asv != self.value(b).shape() || asv.len() != 2 {
            return Err(Error::shape(
                "kl_div_softmax",
                format!("{:?} vs {:?}", asv, self.value(b).shape()),
            ));
        }
        let (n, k) = (asv[0], asv[1]);
        if n == 0 {
            return Err(Error::Contract("kl_div_softmax on empty batch".into()));
        }
        let lp = log_softmax_rows(self.value(a).data(), n, k);
        let lq = log_softmax_rows(self.value(b).data(), n, k);
        let mut p = vec![0.0; n * k];
        let mut q = vec![0.0; n * k];
        let mut kl_rows = vec![0.0; n];
        for i in 0..n {
            let mut kl = 0.0;
            for j in 0..k {
                let pij = lp[i * k + j].exp();
                p[i * k + j] = pij;
                q[i * k + j] = lq[i * k + j].exp();
                kl += pij * (lp[i * k + j] - lq[i * k + j]);
            }
            kl_rows[i] = kl;
        }
        let loss = kl_rows.iter().sum::<f64>() / n as f64;
        let p = Tensor::new(vec![n, k], p)?;
        let q = Tensor::new(vec![n, k], q)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivSoftmax { a, b, p, q, kl_rows },
        ))
    }

    /// Mean of `max(z_y - max_{j != y} z_j, -kappa)` over the batch: the
    /// margin the true class holds over its best rival, floored at `-kappa`.
    pub fn margin_loss(&mut self, logits: ValueId, labels: &[usize], kappa: f64) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[1] < 2 {
            return Err(Error::shape("margin_loss", format!("{:?}", ls)));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                "margin_loss",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::Label { label: y, classes: k });
            }
        }
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let (_, rival) = best_rival(row, labels[i]);
            loss += (row[labels[i]] - rival).max(-kappa);
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MarginLoss {
                logits,
                labels: labels.to_vec(),
                kappa,
            },
        ))
    }

    /// Gradients of a scalar `out` with respect to every reachable value.
    pub fn backward(&self, out: ValueId) -> Result<GradStore> {
        let need = vec![true; self.nodes.len()];
        self.backward_masked(out, need)
    }

    /// Gradients of `out` restricted to the values listed in `wrt`:
    /// subgraphs that cannot influence any requested value are skipped.
    pub fn backward_wrt(&self, out: ValueId, wrt: &[ValueId]) -> Result<GradStore> {
        let mut need = vec![false; self.nodes.len()];
        for id in wrt {
            need[id.0] = true;
        }
        for i in 0..self.nodes.len() {
            if need[i] {
                continue;
            }
            let n = match &self.nodes[i].op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Mul(a, b) => need[a.0] || need[b.0],
                Op::MulScalar { x, .. }
                | Op::Relu { x }
                | Op::Tanh { x }
                | Op::Sign { x }
                | Op::Abs { x }
                | Op::Mean { x }
                | Op::GlobalAvgPool { x }
                | Op::DownsamplePad { x, .. } => need[x.0],
                Op::AddBias { x, b } => need[x.0] || need[b.0],
                Op::Matmul { a, b } => need[a.0] || need[b.0],
                Op::Conv2d { x, w, .. } => need[x.0] || need[w.0],
                Op::BatchNormTrain { x, gamma, beta, .. }
                | Op::BatchNormEval { x, gamma, beta, .. } => {
                    need[x.0] || need[gamma.0] || need[beta.0]
                }
                Op::SoftmaxCrossEntropy { logits, .. }
                | Op::SoftCrossEntropy { logits, .. }
                | Op::MarginLoss { logits, .. } => need[logits.0],
                Op::KlDivSoftmax { a, b, .. } => need[a.0] || need[b.0],
            };
            need[i] = n;
        }
        self.backward_masked(out, need)
    }

    fn backward_masked(&self, out: ValueId, need: Vec<bool>) -> Result<GradStore> {
        if !self.value(out).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let gy = grads[i].take().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    if need[a.0] {
                        accumulate(&mut grads, *a, &gy.data().to_vec(), self);
                    }
                    if need[b.0] {
                        accumulate(&mut grads, *b, &gy.data().to_vec(), self);
                    }
                }
                Op::Mul(a, b) => {
                    if need[a.0] {
                        let g: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accumulate(&mut grads, *a, &g, self);
                    }
                    if need[b.0] {
                        let g: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accumulate(&mut grads, *b, &g, self);
                    }
                }
                Op::MulScalar { x, c } => {
                    if need[x.0] {
                        let g: Vec<f64> = gy.data().iter().map(|g| g * c).collect();
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::AddBias { x, b } => {
                    if need[x.0] {
                        accumulate(&mut grads, *x, &gy.data().to_vec(), self);
                    }
                    if need[b.0] {
                        let xs = self.value(*x).shape();
                        let per = xs[1];
                        let mut gb = vec![0.0; per];
                        if xs.len() == 2 {
                            for row in gy.data().chunks_exact(per) {
                                for (acc, g) in gb.iter_mut().zip(row) {
                                    *acc += g;
                                }
                            }
                        } else {
                            let hw = xs[2] * xs[3];
                            for img in gy.data().chunks_exact(per * hw) {
                                for (c, plane) in img.chunks_exact(hw).enumerate() {
                                    gb[c] += plane.iter().sum::<f64>();
                                }
                            }
                        }
                        accumulate(&mut grads, *b, &gb, self);
                    }
                }
                Op::Matmul { a, b } => {
                    let asv = self.value(*a).shape();
                    let bsv = self.value(*b).shape();
                    let (m, k, n) = (asv[0], asv[1], bsv[1]);
                    let gd = gy.data();
                    if need[a.0] {
                        let bd = self.value(*b).data();
                        let mut ga = vec![0.0; m * k];
                        for i2 in 0..m {
                            for j in 0..n {
                                let g = gd[i2 * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    ga[i2 * k + kk] += g * bd[kk * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *a, &ga, self);
                    }
                    if need[b.0] {
                        let ad = self.value(*a).data();
                        let mut gb = vec![0.0; k * n];
                        for i2 in 0..m {
                            for kk in 0..k {
                                let av = ad[i2 * k + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[kk * n + j] += av * gd[i2 * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *b, &gb, self);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    self.conv2d_backward(*x, *w, *stride, *pad, &gy, &need, &mut grads);
                }
                Op::Relu { x } => {
                    if need[x.0] {
                        let g: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::Tanh { x } => {
                    if need[x.0] {
                        let g: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect();
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::Sign { .. } => {}
                Op::Abs { x } => {
                    if need[x.0] {
                        let g: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(g, v)| g * sign0(*v))
                            .collect();
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::Mean { x } => {
                    if need[x.0] {
                        let n = self.value(*x).numel() as f64;
                        let g = vec![gy.scalar_value() / n; self.value(*x).numel()];
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if need[x.0] {
                        let xs = self.value(*x).shape();
                        let hw = (xs[2] * xs[3]) as f64;
                        let mut g = vec![0.0; self.value(*x).numel()];
                        for (plane, gv) in g.chunks_exact_mut(xs[2] * xs[3]).zip(gy.data()) {
                            let v = gv / hw;
                            for slot in plane {
                                *slot = v;
                            }
                        }
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::DownsamplePad { x, stride } => {
                    if need[x.0] {
                        let xs = self.value(*x).shape();
                        let (nb, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                        let ys = node.value.shape();
                        let (cy, oh, ow) = (ys[1], ys[2], ys[3]);
                        let gd = gy.data();
                        let mut g = vec![0.0; self.value(*x).numel()];
                        for n in 0..nb {
                            for c in 0..cin {
                                let ybase = (n * cy + c) * oh * ow;
                                let xbase = (n * cin + c) * h * wd;
                                for ohi in 0..oh {
                                    let xrow = xbase + ohi * stride * wd;
                                    let yrow = ybase + ohi * ow;
                                    for owi in 0..ow {
                                        g[xrow + owi * stride] += gd[yrow + owi];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &g, self);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    xhat,
                    ..
                } => {
                    let xs = self.value(*x).shape();
                    let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let hw = h * wd;
                    let m = (nb * hw) as f64;
                    let gd = gy.data();
                    let xh = xhat.data();
                    let gdv = self.value(*gamma).data();
                    if need[beta.0] || need[gamma.0] {
                        let mut gbeta = vec![0.0; c];
                        let mut ggamma = vec![0.0; c];
                        for n in 0..nb {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                for i2 in base..base + hw {
                                    gbeta[ch] += gd[i2];
                                    ggamma[ch] += gd[i2] * xh[i2];
                                }
                            }
                        }
                        if need[gamma.0] {
                            accumulate(&mut grads, *gamma, &ggamma, self);
                        }
                        if need[beta.0] {
                            accumulate(&mut grads, *beta, &gbeta, self);
                        }
                    }
                    if need[x.0] {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for n in 0..nb {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                let g = gdv[ch];
                                for i2 in base..base + hw {
                                    let dxh = gd[i2] * g;
                                    s1[ch] += dxh;
                                    s2[ch] += dxh * xh[i2];
                                }
                            }
                        }
                        let mut gx = vec![0.0; self.value(*x).numel()];
                        for n in 0..nb {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                let (g, is) = (gdv[ch], inv_std[ch]);
                                for i2 in base..base + hw {
                                    let dxh = gd[i2] * g;
                                    gx[i2] = is / m * (m * dxh - s1[ch] - xh[i2] * s2[ch]);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &gx, self);
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xs = self.value(*x).shape();
                    let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let hw = h * wd;
                    let gd = gy.data();
                    let xd = self.value(*x).data();
                    let gdv = self.value(*gamma).data();
                    if need[x.0] {
                        let mut gx = vec![0.0; xd.len()];
                        for n in 0..nb {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                let f = gdv[ch] * inv_std[ch];
                                for i2 in base..base + hw {
                                    gx[i2] = gd[i2] * f;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, &gx, self);
                    }
                    if need[gamma.0] || need[beta.0] {
                        let mut ggamma = vec![0.0; c];
                        let mut gbeta = vec![0.0; c];
                        for n in 0..nb {
                            for ch in 0..c {
                                let base = (n * c + ch) * hw;
                                let (mu, is) = (mean[ch], inv_std[ch]);
                                for i2 in base..base + hw {
                                    gbeta[ch] += gd[i2];
                                    ggamma[ch] += gd[i2] * (xd[i2] - mu) * is;
                                }
                            }
                        }
                        if need[gamma.0] {
                            accumulate(&mut grads, *gamma, &ggamma, self);
                        }
                        if need[beta.0] {
                            accumulate(&mut grads, *beta, &gbeta, self);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    if need[logits.0] {
                        let (n, k) = (probs.shape()[0], probs.shape()[1]);
                        let scale = gy.scalar_value() / n as f64;
                        let mut g = probs.data().to_vec();
                        for (i2, &y) in labels.iter().enumerate() {
                            g[i2 * k + y] -= 1.0;
                        }
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                        accumulate(&mut grads, *logits, &g, self);
                    }
                }
                Op::SoftCrossEntropy { logits, targets, probs } => {
                    if need[logits.0] {
                        let n = probs.shape()[0];
                        let scale = gy.scalar_value() / n as f64;
                        let td = targets.data();
                        let mut g = probs.data().to_vec();
                        for (i2, v) in g.iter_mut().enumerate() {
                            *v = scale * (*v - td[i2]);
                        }
                        accumulate(&mut grads, *logits, &g, self);
                    }
                }
                Op::KlDivSoftmax { a, b, p, q, kl_rows } => {
                    let (n, k) = (p.shape()[0], p.shape()[1]);
                    let scale = gy.scalar_value() / n as f64;
                    let pd = p.data();
                    let qd = q.data();
                    if need[a.0] {
                        let mut g = vec![0.0; n * k];
                        for i2 in 0..n {
                            for j in 0..k {
                                let pij = pd[i2 * k + j];
                                let lr = (pij / qd[i2 * k + j]).ln();
                                g[i2 * k + j] = scale * pij * (lr - kl_rows[i2]);
                            }
                        }
                        accumulate(&mut grads, *a, &g, self);
                    }
                    if need[b.0] {
                        let mut g = vec![0.0; n * k];
                        for i2 in 0..n * k {
                            g[i2] = scale * (qd[i2] - pd[i2]);
                        }
                        accumulate(&mut grads, *b, &g, self);
                    }
                }
                Op::MarginLoss { logits, labels, kappa } => {
                    if need[logits.0] {
                        let ld = self.value(*logits).data();
                        let ls = self.value(*logits).shape();
                        let (n, k) = (ls[0], ls[1]);
                        let scale = gy.scalar_value() / n as f64;
                        let mut g = vec![0.0; n * k];
                        for (i2, &y) in labels.iter().enumerate() {
                            let row = &ld[i2 * k..(i2 + 1) * k];
                            let (rj, rival) = best_rival(row, y);
                            if row[y] - rival > -kappa {
                                g[i2 * k + y] += scale;
                                g[i2 * k + rj] -= scale;
                            }
                        }
                        accumulate(&mut grads, *logits, &g, self);
                    }
                }
            }
        }
        Ok(GradStore { grads })
    }

    fn conv2d_backward(
        &self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: usize,
        gy: &Tensor,
        need: &[bool],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (nb, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let ys = gy.shape();
        let (oh, ow) = (ys[2], ys[3]);
        let gd = gy.data();
        let xd = self.value(x).data();
        let wdt = self.value(w).data();
        if need[x.0] {
            let mut gx = vec![0.0; xd.len()];
            for n in 0..nb {
                for co in 0..cout {
                    let ybase = (n * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let xbase = (n * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for dh in 0..kh {
                            let (oh_lo, oh_hi) = tap_range(dh, pad, stride, h, oh);
                            for dw in 0..kw {
                                let wv = wdt[wbase + dh * kw + dw];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (ow_lo, ow_hi) = tap_range(dw, pad, stride, wd, ow);
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi * stride + dh - pad;
                                    let xrow = xbase + ih * wd;
                                    let yrow = ybase + ohi * ow;
                                    for owi in ow_lo..ow_hi {
                                        let iw = owi * stride + dw - pad;
                                        gx[xrow + iw] += wv * gd[yrow + owi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, x, &gx, self);
        }
        if need[w.0] {
            let mut gw = vec![0.0; wdt.len()];
            for n in 0..nb {
                for co in 0..cout {
                    let ybase = (n * cout + co) * oh * ow;
                    for ci in 0..cin {
                        let xbase = (n * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for dh in 0..kh {
                            let (oh_lo, oh_hi) = tap_range(dh, pad, stride, h, oh);
                            for dw in 0..kw {
                                let (ow_lo, ow_hi) = tap_range(dw, pad, stride, wd, ow);
                                let mut acc = 0.0;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi * stride + dh - pad;
                                    let xrow = xbase + ih * wd;
                                    let yrow = ybase + ohi * ow;
                                    for owi in ow_lo..ow_hi {
                                        let iw = owi * stride + dw - pad;
                                        acc += gd[yrow + owi] * xd[xrow + iw];
                                    }
                                }
                                gw[wbase + dh * kw + dw] += acc;
                            }
                        }
                    }
                }
            }
            accumulate(grads, w, &gw, self);
        }
    }
}

/// Output positions `ohi` for which `ohi*stride + tap - pad` lands inside
/// `[0, extent)`: a half-open range.
#[inline]
fn tap_range(tap: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi_in = extent + pad;
    let hi = if tap >= hi_in {
        0
    } else {
        ((hi_in - tap - 1) / stride + 1).min(out_extent)
    };
    (lo.min(hi), hi)
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, g: &[f64], tape: &Tape) {
    match &mut grads[id.0] {
        Some(t) => {
            for (acc, v) in t.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
        None => {
            let shape = tape.value(id).shape().to_vec();
            grads[id.0] = Some(Tensor::new(shape, g.to_vec()).expect("gradient shape"));
        }
    }
}

#[inline]
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index and value of the largest logit other than `y` (first index wins
/// ties).
fn best_rival(row: &[f64], y: usize) -> (usize, f64) {
    let mut bj = usize::MAX;
    let mut bv = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if j != y && v > bv {
            bj = j;
            bv = v;
        }
    }
    (bj, bv)
}

fn log_softmax_rows(d: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &d[i * k..(i + 1) * k];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &v in row {
            z += (v - mx).exp();
        }
        let lse = mx + z.ln();
        for j in 0..k {
            out[i * k + j] = row[j] - lse;
        }
    }
    out
}

/// Row-wise stabilized softmax of a `[n, k]` tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert_eq!(s.len(), 2, "softmax_rows expects [n, k]");
    let (n, k) = (s[0], s[1]);
    let ls = log_softmax_rows(t.data(), n, k);
    Tensor::new(vec![n, k], ls.iter().map(|v| v.exp()).collect()).expect("softmax shape")
}

/// Compare backward gradients against central finite differences.
///
/// `build` must construct the same scalar function whenever it is given the
/// same leaf values. Returns the largest elementwise error, normalized by
/// `max(|analytic|, |numeric|, 1)`.
pub fn grad_check<F>(point: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if h <= 0.0 {
        return Err(Error::Contract("grad_check requires h > 0".into()));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Contract("grad_check output must be scalar".into()));
        }
        Ok(tape.value(out).scalar_value())
    };
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("grad_check output must be scalar".into()));
    }
    let grads = tape.backward(out)?;
    let mut worst = 0.0_f64;
    for (li, t) in point.iter().enumerate() {
        let ga = grads.grad_or_zeros(&tape, ids[li]);
        for ei in 0..t.numel() {
            let mut plus: Vec<Tensor> = point.to_vec();
            plus[li].data_mut()[ei] += h;
            let mut minus: Vec<Tensor> = point.to_vec();
            minus[li].data_mut()[ei] -= h;
            let gn = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let gav = ga.data()[ei];
            let err = (gav - gn).abs() / gav.abs().max(gn.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
