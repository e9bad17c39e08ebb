//! Sparsity measurement, the per-epoch bound statistic, and structural
//! channel pruning.
//!
//! Quantized grids contain exact zeros, so every zero test here uses exact
//! equality, never a tolerance. Pruning produces a new network and
//! parameter state; eval-mode logits are unchanged because removed
//! channels contribute exactly zero.

use crate::error::{Error, Result};
use crate::nets::{Network, BN_EPS};
use crate::quant::{ParamKind, QuantState};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerSparsity {
    pub layer: String,
    pub zeros: usize,
    pub total: usize,
    /// All-zero output filters; zero for non-conv layers.
    pub zero_channels: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct SparsityReport {
    /// Fraction of exactly-zero entries across conv and classifier weights.
    pub weight_sparsity: f64,
    /// Fraction of all-zero conv output filters; the classifier is excluded.
    pub channel_sparsity: f64,
    pub zeros: usize,
    pub total: usize,
    pub zero_channels: usize,
    pub channels: usize,
    pub per_layer: Vec<LayerSparsity>,
}

fn zero_channel_count(t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    let (c_out, csize) = (shape[0], shape[1] * shape[2] * shape[3]);
    let zero = (0..c_out)
        .filter(|&co| t.data()[co * csize..(co + 1) * csize].iter().all(|&v| v == 0.0))
        .count();
    (zero, c_out)
}

/// Count exact zeros in the quantized weights, per layer and in total.
pub fn sparsity_report(state: &QuantState) -> SparsityReport {
    let mut per_layer = Vec::new();
    let (mut zeros, mut total, mut zero_channels, mut channels) = (0, 0, 0, 0);
    for p in &state.params {
        if !p.kind.is_weight_matrix() {
            continue;
        }
        let z = p.quantized.count_zeros();
        let n = p.quantized.numel();
        let (zc, c) = if p.kind == ParamKind::ConvWeight {
            zero_channel_count(&p.quantized)
        } else {
            (0, 0)
        };
        zeros += z;
        total += n;
        zero_channels += zc;
        channels += c;
        per_layer.push(LayerSparsity {
            layer: p.name.clone(),
            zeros: z,
            total: n,
            zero_channels: zc,
            channels: c,
        });
    }
    SparsityReport {
        weight_sparsity: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        channel_sparsity: if channels == 0 {
            0.0
        } else {
            zero_channels as f64 / channels as f64
        },
        zeros,
        total,
        zero_channels,
        channels,
        per_layer,
    }
}

/// Largest per-conv-layer mean of |u| at the current step.
pub fn bound_statistic(state: &QuantState) -> f64 {
    state
        .params
        .iter()
        .filter(|p| p.kind == ParamKind::ConvWeight)
        .map(|p| p.quantized.mean_abs())
        .fold(0.0, f64::max)
}

/// Per-epoch record of the bound statistic and its running maximum.
#[derive(Clone, Debug, Default)]
pub struct BoundTrace {
    pub m_t: Vec<f64>,
    pub m: f64,
}

impl BoundTrace {
    pub fn new() -> BoundTrace {
        BoundTrace::default()
    }

    /// Append one epoch's statistic; returns the updated running maximum.
    pub fn append(&mut self, m_t: f64) -> f64 {
        self.m_t.push(m_t);
        self.m = self.m.max(m_t);
        self.m
    }

    /// True when the running maximum did not move over the last
    /// `ceil(len/4)` recorded epochs.
    pub fn stabilized(&self) -> bool {
        let n = self.m_t.len();
        if n < 4 {
            return false;
        }
        let tail = n.div_ceil(4);
        let head_max = self.m_t[..n - tail].iter().fold(0.0, |a: f64, &b| a.max(b));
        head_max == self.m
    }
}

#[derive(Clone, Debug, Default)]
pub struct PruneReport {
    /// Channels structurally removed together with their consumer slices.
    pub pruned: usize,
    /// All-zero channels kept in place (residual-adjacent, stem, or
    /// removal would not be exact).
    pub masked_only: usize,
    /// Trainable scalars removed.
    pub removed_params: usize,
    /// Layer name, removed channels, masked channels.
    pub per_layer: Vec<(String, usize, usize)>,
}

fn gather_dim0(t: &Tensor, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let row: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(keep.len() * row);
    for &k in keep {
        out.extend_from_slice(&t.data()[k * row..(k + 1) * row]);
    }
    let mut ns = shape.to_vec();
    ns[0] = keep.len();
    Tensor::new(ns, out).expect("gather shape")
}

fn gather_dim1(t: &Tensor, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let (d0, d1) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(d0 * keep.len() * inner);
    for i in 0..d0 {
        for &k in keep {
            let base = (i * d1 + k) * inner;
            out.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    let mut ns = shape.to_vec();
    ns[1] = keep.len();
    Tensor::new(ns, out).expect("gather shape")
}

fn gather_vec(v: &[f64], keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&k| v[k]).collect()
}

/// Remove all-zero residual-interior channels whose downstream effect is
/// provably zero; everything else stays masked in place. The returned
/// network and state evaluate to exactly the same logits.
pub fn prune_channels(net: &Network, state: &QuantState) -> Result<(Network, QuantState, PruneReport)> {
    let mut out_net = net.clone();
    let mut out_state = state.clone();
    let mut report = PruneReport::default();

    let find = |st: &QuantState, name: &str| -> Result<usize> {
        st.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Structure(format!("missing parameter '{name}'")))
    };

    for m in 0..net.spec.ensemble {
        for (si, &nblocks) in net.spec.blocks.iter().enumerate() {
            for bi in 0..nblocks {
                let bp = format!("m{m}.s{si}.b{bi}");
                let i1 = find(state, &format!("{bp}.conv1.w"))?;
                let i2 = find(state, &format!("{bp}.conv2.w"))?;
                let w1 = &state.params[i1].quantized;
                let shape = w1.shape().to_vec();
                let (c_out, csize) = (shape[0], shape[1] * shape[2] * shape[3]);
                if state.params[i2].quantized.shape()[1] != c_out {
                    return Err(Error::Structure(format!(
                        "consumer of '{bp}.conv1.w' expects {} input channels, found {c_out}",
                        state.params[i2].quantized.shape()[1]
                    )));
                }

                let bn_name = format!("{bp}.bn1");
                let has_bn = net.bn_stats.contains_key(&bn_name);
                let mut removable = Vec::new();
                let mut masked_here = 0usize;
                for co in 0..c_out {
                    let zero = w1.data()[co * csize..(co + 1) * csize].iter().all(|&v| v == 0.0);
                    if !zero {
                        continue;
                    }
                    // A dead filter still emits a constant (batch-norm shift
                    // or conv bias); removal is exact only when the relu
                    // gates that constant to zero.
                    let constant = if has_bn {
                        let g = state.params[find(state, &format!("{bn_name}.g"))?].quantized.data()[co];
                        let b = state.params[find(state, &format!("{bn_name}.b"))?].quantized.data()[co];
                        let stat = &net.bn_stats[&bn_name];
                        b - g * stat.mean[co] / (stat.var[co] + BN_EPS).sqrt()
                    } else {
                        state.params[find(state, &format!("{bp}.conv1.b"))?].quantized.data()[co]
                    };
                    if constant <= 0.0 {
                        removable.push(co);
                    } else {
                        masked_here += 1;
                    }
                }
                if removable.len() == c_out {
                    // Keep one channel so the layer stays structurally valid.
                    removable.remove(0);
                    masked_here += 1;
                }
                if removable.is_empty() {
                    if masked_here > 0 {
                        report.masked_only += masked_here;
                        report.per_layer.push((format!("{bp}.conv1.w"), 0, masked_here));
                    }
                    continue;
                }

                let keep: Vec<usize> = (0..c_out).filter(|c| !removable.contains(c)).collect();
                let slice_all = |p: &mut crate::quant::ParamState, dim0: bool| {
                    let g = if dim0 { gather_dim0 } else { gather_dim1 };
                    p.shadow = g(&p.shadow, &keep);
                    p.quantized = g(&p.quantized, &keep);
                    p.momentum = g(&p.momentum, &keep);
                };
                // Parameter order matches between the input and output state.
                slice_all(&mut out_state.params[i1], true);
                slice_all(&mut out_state.params[i2], false);
                let mut removed = removable.len() * (shape[1] * shape[2] * shape[3])
                    + removable.len() * state.params[i2].quantized.shape()[0] * 9;
                if has_bn {
                    let jg = find(state, &format!("{bn_name}.g"))?;
                    let jb = find(state, &format!("{bn_name}.b"))?;
                    slice_all(&mut out_state.params[jg], true);
                    slice_all(&mut out_state.params[jb], true);
                    let stat = out_net.bn_stats.get_mut(&bn_name).expect("bn stats present");
                    stat.mean = gather_vec(&stat.mean, &keep);
                    stat.var = gather_vec(&stat.var, &keep);
                    removed += removable.len() * 2;
                } else {
                    let jb = find(state, &format!("{bp}.conv1.b"))?;
                    slice_all(&mut out_state.params[jb], true);
                    removed += removable.len();
                }
                report.pruned += removable.len();
                report.masked_only += masked_here;
                report.removed_params += removed;
                report.per_layer.push((format!("{bp}.conv1.w"), removable.len(), masked_here));
            }
        }
    }

    // Stem and residual-output filters are never removed; count their
    // dead filters as masked.
    for p in &state.params {
        if p.kind != ParamKind::ConvWeight || p.name.contains(".conv1.") {
            continue;
        }
        let (zc, _) = zero_channel_count(&p.quantized);
        if zc > 0 {
            report.masked_only += zc;
            report.per_layer.push((p.name.clone(), 0, zc));
        }
    }

    Ok((out_net, out_state, report))
}
