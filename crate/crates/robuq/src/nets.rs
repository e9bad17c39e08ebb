//! Small residual networks with per-layer weight handles.
//!
//! A network is a structural description plus batch-norm running statistics;
//! the trainable tensors themselves live in a [`QuantState`] and are bound
//! onto a fresh tape for every forward pass. Channel counts are read from
//! the bound tensors, not the spec, so structurally pruned parameter sets
//! run unchanged.
//!
//! An ensemble of `n` members averages member logits. In train mode, when
//! `noise_std > 0`, Gaussian noise is added to each residual mapping's
//! output just before the skip-add; eval mode never injects noise.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::{ParamKind, QuantState, Scheme};
use crate::rng::{derive_rng, DOMAIN_INIT};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic folded into the running average per
/// train-mode forward.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub classes: usize,
    /// Residual blocks per stage; stages after the first open with a
    /// stride-2 block.
    pub blocks: Vec<usize>,
    /// Channel width per stage.
    pub widths: Vec<usize>,
    /// Ensemble member count.
    pub ensemble: usize,
    /// Stddev of the noise injected at residual mappings in train mode.
    pub noise_std: f64,
    /// Batch normalization after every conv; when off, convs carry biases.
    pub batch_norm: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.widths.len() || self.blocks.is_empty() {
            return Err(Error::Structure(format!(
                "{} stages but {} widths",
                self.blocks.len(),
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Structure("zero-width stage".into()));
        }
        if self.ensemble == 0 {
            return Err(Error::Structure("ensemble count must be >= 1".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Structure("noise stddev must be >= 0".into()));
        }
        if self.classes < 2 {
            return Err(Error::Structure("need at least 2 classes".into()));
        }
        if self.in_channels == 0 || self.in_h == 0 || self.in_w == 0 {
            return Err(Error::Structure("empty input shape".into()));
        }
        Ok(())
    }

    /// Three-stage net sized for CPU experiments on 28x28 gray images.
    pub fn small_28x28() -> NetworkSpec {
        NetworkSpec {
            in_channels: 1,
            in_h: 28,
            in_w: 28,
            classes: 10,
            blocks: vec![1, 1, 1],
            widths: vec![8, 16, 32],
            ensemble: 1,
            noise_std: 0.1,
            batch_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Network structure plus non-trainable state (batch-norm running averages).
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub bn_stats: BTreeMap<String, BnStat>,
}

/// A forward pass bound onto its own tape: the loss can be appended and
/// gradients pulled out by parameter index.
pub struct BoundGraph {
    pub tape: Tape,
    pub input: ValueId,
    pub logits: ValueId,
    /// Tape ids of the bound parameters, parallel to `QuantState::params`.
    pub param_ids: Vec<ValueId>,
    /// Batch statistics observed by train-mode batch-norm nodes.
    pub bn_batch: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Two forward passes over shared parameters on one tape.
pub struct PairGraph {
    pub tape: Tape,
    pub input_a: ValueId,
    pub input_b: ValueId,
    pub logits_a: ValueId,
    pub logits_b: ValueId,
    pub param_ids: Vec<ValueId>,
    pub bn_batch: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Build a network and its initial parameter list (fan-in-scaled Gaussian
/// weights, zero biases, unit batch-norm gains).
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<(Network, Vec<(String, ParamKind, Tensor)>)> {
    spec.validate()?;
    let mut rng = derive_rng(seed, DOMAIN_INIT, 0);
    let mut params = Vec::new();
    let mut bn_stats = BTreeMap::new();
    for m in 0..spec.ensemble {
        let p = format!("m{m}");
        push_conv(
            &mut params,
            &mut bn_stats,
            &mut rng,
            &format!("{p}.stem"),
            spec.in_channels,
            spec.widths[0],
            spec.batch_norm,
        );
        let mut c_in = spec.widths[0];
        for (si, (&nblocks, &width)) in spec.blocks.iter().zip(&spec.widths).enumerate() {
            for bi in 0..nblocks {
                let bp = format!("{p}.s{si}.b{bi}");
                push_conv(&mut params, &mut bn_stats, &mut rng, &format!("{bp}.conv1"), c_in, width, spec.batch_norm);
                push_conv(&mut params, &mut bn_stats, &mut rng, &format!("{bp}.conv2"), width, width, spec.batch_norm);
                c_in = width;
            }
        }
        let k = spec.classes;
        let std = (2.0 / c_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("normal params");
        let w: Vec<f64> = (0..c_in * k).map(|_| dist.sample(&mut rng)).collect();
        params.push((format!("{p}.fc.w"), ParamKind::LinearWeight, Tensor::new(vec![c_in, k], w)?));
        params.push((format!("{p}.fc.b"), ParamKind::Bias, Tensor::zeros(&[k])));
    }
    Ok((
        Network {
            spec: spec.clone(),
            bn_stats,
        },
        params,
    ))
}

fn push_conv(
    params: &mut Vec<(String, ParamKind, Tensor)>,
    bn_stats: &mut BTreeMap<String, BnStat>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    batch_norm: bool,
) {
    let fan_in = (c_in * 9) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("normal params");
    let w: Vec<f64> = (0..c_out * c_in * 9).map(|_| dist.sample(rng)).collect();
    params.push((
        format!("{name}.w"),
        ParamKind::ConvWeight,
        Tensor::new(vec![c_out, c_in, 3, 3], w).expect("conv shape"),
    ));
    if batch_norm {
        let bn = name.replace(".conv", ".bn");
        let bn = if bn.ends_with(".stem") {
            format!("{bn}.bn")
        } else {
            bn
        };
        params.push((format!("{bn}.g"), ParamKind::BnGamma, Tensor::full(&[c_out], 1.0)));
        params.push((format!("{bn}.b"), ParamKind::BnBeta, Tensor::zeros(&[c_out])));
        bn_stats.insert(
            bn,
            BnStat {
                mean: vec![0.0; c_out],
                var: vec![1.0; c_out],
            },
        );
    } else {
        params.push((format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[c_out])));
    }
}

/// Wrap freshly built parameters in a quantization state; first/last
/// exemptions apply per ensemble member (every stem conv, every classifier).
pub fn build_quant_state(
    params: Vec<(String, ParamKind, Tensor)>,
    scheme: Scheme,
    rho: f64,
    cutoff_epoch: usize,
    exempt_first: bool,
    exempt_last: bool,
) -> Result<QuantState> {
    let flags: Vec<bool> = params
        .iter()
        .map(|(name, kind, _)| {
            let mut q = scheme != Scheme::Float && kind.is_weight_matrix();
            if exempt_first && name.ends_with(".stem.w") {
                q = false;
            }
            if exempt_last && name.ends_with(".fc.w") {
                q = false;
            }
            q
        })
        .collect();
    QuantState::new_with(params, scheme, rho, cutoff_epoch, flags)
}

struct Binder<'a> {
    by_name: BTreeMap<&'a str, (usize, ValueId)>,
}

impl<'a> Binder<'a> {
    fn get(&self, name: &str) -> Result<ValueId> {
        self.by_name
            .get(name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::Structure(format!("missing parameter '{name}'")))
    }
    fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

impl Network {
    /// Bind quantized weights and run the network on `batch`
    /// (`[n, c, h, w]`). Train mode requires an rng when `noise_std > 0`;
    /// eval mode ignores the rng entirely.
    pub fn forward_build(
        &self,
        state: &QuantState,
        batch: &Tensor,
        mode: Mode,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BoundGraph> {
        if batch.shape().len() != 4 || batch.shape()[1] != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} for {}-channel input",
                    batch.shape(),
                    self.spec.in_channels
                ),
            ));
        }
        if self.spec.noise_std > 0.0 && mode == Mode::Train && noise_rng.is_none() {
            return Err(Error::Contract(
                "train-mode forward with noise_std > 0 requires an rng".into(),
            ));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let mut param_ids = Vec::with_capacity(state.params.len());
        let mut by_name = BTreeMap::new();
        for (i, p) in state.params.iter().enumerate() {
            let id = tape.leaf(p.quantized.clone());
            param_ids.push(id);
            by_name.insert(p.name.as_str(), (i, id));
        }
        let binder = Binder { by_name };
        let mut bn_batch = Vec::new();
        let logits = self.build_members(&mut tape, &binder, input, mode, noise_rng, &mut bn_batch)?;
        Ok(BoundGraph {
            tape,
            input,
            logits,
            param_ids,
            bn_batch,
        })
    }

    /// Two forward passes through the same bound parameters, for losses
    /// that compare a clean and a perturbed batch; gradients accumulate
    /// across both branches.
    pub fn forward_pair_build(
        &self,
        state: &QuantState,
        batch_a: &Tensor,
        batch_b: &Tensor,
        mode: Mode,
        mut noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PairGraph> {
        if batch_a.shape() != batch_b.shape() {
            return Err(Error::shape(
                "forward-pair",
                format!("{:?} vs {:?}", batch_a.shape(), batch_b.shape()),
            ));
        }
        if self.spec.noise_std > 0.0 && mode == Mode::Train && noise_rng.is_none() {
            return Err(Error::Contract(
                "train-mode forward with noise_std > 0 requires an rng".into(),
            ));
        }
        let mut tape = Tape::new();
        let input_a = tape.leaf(batch_a.clone());
        let input_b = tape.leaf(batch_b.clone());
        let mut param_ids = Vec::with_capacity(state.params.len());
        let mut by_name = BTreeMap::new();
        for (i, p) in state.params.iter().enumerate() {
            let id = tape.leaf(p.quantized.clone());
            param_ids.push(id);
            by_name.insert(p.name.as_str(), (i, id));
        }
        let binder = Binder { by_name };
        let mut bn_batch = Vec::new();
        let logits_a = self.build_members(
            &mut tape,
            &binder,
            input_a,
            mode,
            noise_rng.as_deref_mut(),
            &mut bn_batch,
        )?;
        let logits_b = self.build_members(
            &mut tape,
            &binder,
            input_b,
            mode,
            noise_rng.as_deref_mut(),
            &mut bn_batch,
        )?;
        Ok(PairGraph {
            tape,
            input_a,
            input_b,
            logits_a,
            logits_b,
            param_ids,
            bn_batch,
        })
    }

    fn build_members(
        &self,
        tape: &mut Tape,
        binder: &Binder,
        input: ValueId,
        mode: Mode,
        mut noise_rng: Option<&mut ChaCha8Rng>,
        mut bn_batch: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<ValueId> {
        let mut tape = &mut *tape;
        let mut members = Vec::with_capacity(self.spec.ensemble);
        for m in 0..self.spec.ensemble {
            let p = format!("m{m}");
            let mut cur = self.conv_unit(
                &mut tape,
                &binder,
                input,
                &format!("{p}.stem"),
                &format!("{p}.stem.bn"),
                1,
                mode,
                &mut bn_batch,
            )?;
            let mut act = tape.relu(cur);
            for (si, &nblocks) in self.spec.blocks.iter().enumerate() {
                for bi in 0..nblocks {
                    let bp = format!("{p}.s{si}.b{bi}");
                    let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                    let c_in = tape.value(act).shape()[1];
                    let h1 = self.conv_unit(
                        &mut tape,
                        &binder,
                        act,
                        &format!("{bp}.conv1"),
                        &format!("{bp}.bn1"),
                        stride,
                        mode,
                        &mut bn_batch,
                    )?;
                    let a1 = tape.relu(h1);
                    let mut h2 = self.conv_unit(
                        &mut tape,
                        &binder,
                        a1,
                        &format!("{bp}.conv2"),
                        &format!("{bp}.bn2"),
                        1,
                        mode,
                        &mut bn_batch,
                    )?;
                    if mode == Mode::Train && self.spec.noise_std > 0.0 {
                        let rng = noise_rng.as_deref_mut().expect("noise rng checked above");
                        let dist = Normal::new(0.0, self.spec.noise_std).expect("noise params");
                        let shape = tape.value(h2).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let z: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
                        let zid = tape.leaf(Tensor::new(shape, z)?);
                        h2 = tape.add(h2, zid)?;
                    }
                    let c_out = tape.value(h2).shape()[1];
                    let skip = if stride == 1 && c_in == c_out {
                        act
                    } else {
                        tape.downsample_pad(act, stride, c_out)?
                    };
                    let sum = tape.add(h2, skip)?;
                    act = tape.relu(sum);
                    cur = sum;
                }
            }
            let _ = cur;
            let pooled = tape.global_avg_pool(act)?;
            let fcw = binder.get(&format!("{p}.fc.w"))?;
            let fcb = binder.get(&format!("{p}.fc.b"))?;
            let proj = tape.matmul(pooled, fcw)?;
            let logits = tape.add_bias(proj, fcb)?;
            members.push(logits);
        }
        let logits = if members.len() == 1 {
            members[0]
        } else {
            let mut acc = members[0];
            for &l in &members[1..] {
                acc = tape.add(acc, l)?;
            }
            tape.mul_scalar(acc, 1.0 / members.len() as f64)
        };
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_unit(
        &self,
        tape: &mut Tape,
        binder: &Binder,
        x: ValueId,
        conv_name: &str,
        bn_name: &str,
        stride: usize,
        mode: Mode,
        bn_batch: &mut Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<ValueId> {
        let w = binder.get(&format!("{conv_name}.w"))?;
        let h = tape.conv2d(x, w, stride, 1)?;
        if binder.contains(&format!("{bn_name}.g")) {
            let gamma = binder.get(&format!("{bn_name}.g"))?;
            let beta = binder.get(&format!("{bn_name}.b"))?;
            match mode {
                Mode::Train => {
                    let out = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                    let (mean, var) = tape.bn_batch_stats(out).expect("train bn node");
                    bn_batch.push((bn_name.to_string(), mean.to_vec(), var.to_vec()));
                    Ok(out)
                }
                Mode::Eval => {
                    let stat = self.bn_stats.get(bn_name).ok_or_else(|| {
                        Error::Structure(format!("no running stats for '{bn_name}'"))
                    })?;
                    tape.batch_norm_eval(h, gamma, beta, &stat.mean, &stat.var, BN_EPS)
                }
            }
        } else {
            let b = binder.get(&format!("{conv_name}.b"))?;
            tape.add_bias(h, b)
        }
    }

    /// Fold observed batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) {
        for (name, mean, var) in updates {
            if let Some(stat) = self.bn_stats.get_mut(name) {
                for (r, b) in stat.mean.iter_mut().zip(mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, b) in stat.var.iter_mut().zip(var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits_eval(&self, state: &QuantState, batch: &Tensor) -> Result<Tensor> {
        let g = self.forward_build(state, batch, Mode::Eval, None)?;
        Ok(g.tape.value(g.logits).clone())
    }
}

/// One conv output channel and its filter weights.
pub struct ChannelView<'a> {
    pub layer: &'a str,
    pub channel: usize,
    pub weights: &'a [f64],
}

/// Every conv output channel in the parameter set, in layer order; the
/// classifier is excluded.
pub fn conv_channels(state: &QuantState) -> Vec<ChannelView<'_>> {
    let mut out = Vec::new();
    for p in &state.params {
        if p.kind != ParamKind::ConvWeight {
            continue;
        }
        let shape = p.quantized.shape();
        let (c_out, csize) = (shape[0], shape[1] * shape[2] * shape[3]);
        for co in 0..c_out {
            out.push(ChannelView {
                layer: &p.name,
                channel: co,
                weights: &p.quantized.data()[co * csize..(co + 1) * csize],
            });
        }
    }
    out
}

/// Total trainable scalars.
pub fn param_count(state: &QuantState) -> usize {
    state.params.iter().map(|p| p.shadow.numel()).sum()
}

/// Trainable scalars in conv and classifier weight matrices only.
pub fn weight_param_count(state: &QuantState) -> usize {
    state
        .params
        .iter()
        .filter(|p| p.kind.is_weight_matrix())
        .map(|p| p.shadow.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DOMAIN_NOISE;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            in_channels: 1,
            in_h: 8,
            in_w: 8,
            classes: 3,
            blocks: vec![1, 1],
            widths: vec![3, 4],
            ensemble: 1,
            noise_std: 0.0,
            batch_norm: true,
        }
    }

    fn float_state(params: Vec<(String, ParamKind, Tensor)>) -> QuantState {
        build_quant_state(params, Scheme::Float, 1.02, 0, false, false).unwrap()
    }

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = derive_rng(seed, DOMAIN_NOISE, 9);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        let spec = NetworkSpec::small_28x28();
        let (_, params) = build_network(&spec, 3).unwrap();
        let st = float_state(params);
        // conv weights: 8·1·9 + (8·8·9)·2 + 16·8·9 + 16·16·9 + 32·16·9 + 32·32·9
        // fc: 32·10 + 10; bn: 2·(8+8+8+16+16+32+32)
        let conv = 72 + 576 * 2 + 1152 + 2304 + 4608 + 9216;
        let fc = 320 + 10;
        let bn = 2 * (8 + 8 + 8 + 16 + 16 + 32 + 32);
        assert_eq!(param_count(&st), conv + fc + bn);
        assert_eq!(weight_param_count(&st), conv + 320);
    }

    #[test]
    fn conv_channel_listing_counts_filters() {
        let spec = tiny_spec();
        let (_, params) = build_network(&spec, 3).unwrap();
        let st = float_state(params);
        let chans = conv_channels(&st);
        // stem 3 + block0 (3+3) + block1 (4+4)
        assert_eq!(chans.len(), 3 + 6 + 8);
        assert_eq!(chans[0].layer, "m0.stem.w");
        let last = chans.last().unwrap();
        assert_eq!(last.layer, "m0.s1.b0.conv2.w");
        assert_eq!(last.weights.len(), 4 * 9);
    }

    #[test]
    fn eval_forward_is_deterministic_without_rng() {
        let spec = tiny_spec();
        let (net, params) = build_network(&spec, 5).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[2, 1, 8, 8], 1);
        let a = net.logits_eval(&st, &x).unwrap();
        let b = net.logits_eval(&st, &x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[2, 3]);
    }

    #[test]
    fn zero_noise_train_equals_eval_without_batch_norm() {
        let mut spec = tiny_spec();
        spec.batch_norm = false;
        let (net, params) = build_network(&spec, 7).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[2, 1, 8, 8], 2);
        let tr = net.forward_build(&st, &x, Mode::Train, None).unwrap();
        let ev = net.forward_build(&st, &x, Mode::Eval, None).unwrap();
        assert_eq!(
            tr.tape.value(tr.logits).data(),
            ev.tape.value(ev.logits).data()
        );
    }

    #[test]
    fn noise_changes_train_but_never_eval() {
        let mut spec = tiny_spec();
        spec.noise_std = 0.3;
        let (net, params) = build_network(&spec, 9).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[2, 1, 8, 8], 3);
        let mut r1 = derive_rng(1, DOMAIN_NOISE, 0);
        let mut r2 = derive_rng(1, DOMAIN_NOISE, 0);
        let mut r3 = derive_rng(2, DOMAIN_NOISE, 0);
        let a = net.forward_build(&st, &x, Mode::Train, Some(&mut r1)).unwrap();
        let b = net.forward_build(&st, &x, Mode::Train, Some(&mut r2)).unwrap();
        let c = net.forward_build(&st, &x, Mode::Train, Some(&mut r3)).unwrap();
        assert_eq!(a.tape.value(a.logits).data(), b.tape.value(b.logits).data());
        assert_ne!(a.tape.value(a.logits).data(), c.tape.value(c.logits).data());
        let e1 = net.logits_eval(&st, &x).unwrap();
        let e2 = net.logits_eval(&st, &x).unwrap();
        assert_eq!(e1.data(), e2.data());
        assert!(net.forward_build(&st, &x, Mode::Train, None).is_err());
    }

    #[test]
    fn noise_is_confined_to_residual_mappings() {
        // No residual blocks: train-mode noise has nowhere to enter, so a
        // noisy spec still produces noise-free (rng-independent) outputs.
        let spec = NetworkSpec {
            blocks: vec![0],
            widths: vec![3],
            noise_std: 0.7,
            ..tiny_spec()
        };
        let (net, params) = build_network(&spec, 11).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[2, 1, 8, 8], 4);
        let mut r1 = derive_rng(1, DOMAIN_NOISE, 1);
        let mut r2 = derive_rng(99, DOMAIN_NOISE, 7);
        let a = net.forward_build(&st, &x, Mode::Train, Some(&mut r1)).unwrap();
        let b = net.forward_build(&st, &x, Mode::Train, Some(&mut r2)).unwrap();
        assert_eq!(a.tape.value(a.logits).data(), b.tape.value(b.logits).data());
    }

    #[test]
    fn ensemble_of_identical_members_matches_single_member() {
        let spec = tiny_spec();
        let (net1, params1) = build_network(&spec, 13).unwrap();
        let st1 = float_state(params1.clone());

        let spec2 = NetworkSpec {
            ensemble: 2,
            ..spec
        };
        let (net2, params2) = build_network(&spec2, 13).unwrap();
        let mut st2 = float_state(params2);
        for p in st2.params.iter_mut() {
            let src_name = format!("m0.{}", p.name.splitn(2, '.').nth(1).unwrap());
            let src = params1.iter().find(|(n, _, _)| *n == src_name).unwrap();
            p.shadow = src.2.clone();
            p.quantized = src.2.clone();
        }
        let x = rand_batch(&[2, 1, 8, 8], 5);
        let a = net1.logits_eval(&st1, &x).unwrap();
        let b = net2.logits_eval(&st2, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        let spec = tiny_spec();
        let (net, params) = build_network(&spec, 17).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[3, 1, 8, 8], 6);
        let mut g = net.forward_build(&st, &x, Mode::Train, None).unwrap();
        let loss = g.tape.softmax_cross_entropy(g.logits, &[0, 1, 2]).unwrap();
        let grads = g.tape.backward(loss).unwrap();
        for (i, pid) in g.param_ids.iter().enumerate() {
            let gt = grads.get(*pid);
            assert!(gt.is_some(), "no gradient for {}", st.params[i].name);
            assert!(gt.unwrap().all_finite());
        }
        assert!(grads.get(g.input).is_some());
        assert!(!g.bn_batch.is_empty());
    }

    #[test]
    fn whole_net_gradient_matches_finite_differences() {
        let mut spec = tiny_spec();
        spec.in_h = 6;
        spec.in_w = 6;
        let (net, params) = build_network(&spec, 19).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[2, 1, 6, 6], 7);
        let labels = vec![0usize, 2];
        let mut g = net.forward_build(&st, &x, Mode::Train, None).unwrap();
        let loss = g.tape.softmax_cross_entropy(g.logits, &labels).unwrap();
        let analytic = g.tape.backward(loss).unwrap();
        let h = 1e-4;
        let mut worst = 0.0_f64;
        for (pi, p) in st.params.iter().enumerate() {
            let ga = analytic.get(g.param_ids[pi]).unwrap();
            for ei in (0..p.quantized.numel()).step_by(7) {
                let mut stp = st.clone();
                stp.params[pi].quantized.data_mut()[ei] += h;
                let mut stm = st.clone();
                stm.params[pi].quantized.data_mut()[ei] -= h;
                let eval = |s: &QuantState| -> f64 {
                    let mut fb = net.forward_build(s, &x, Mode::Train, None).unwrap();
                    let l = fb.tape.softmax_cross_entropy(fb.logits, &labels).unwrap();
                    fb.tape.value(l).scalar_value()
                };
                let gn = (eval(&stp) - eval(&stm)) / (2.0 * h);
                let gav = ga.data()[ei];
                worst = worst.max((gav - gn).abs() / gav.abs().max(gn.abs()).max(1.0));
            }
        }
        assert!(worst < 1e-3, "worst={worst}");
    }

    #[test]
    fn bn_running_stats_move_toward_batch_stats() {
        let spec = tiny_spec();
        let (mut net, params) = build_network(&spec, 23).unwrap();
        let st = float_state(params);
        let x = rand_batch(&[4, 1, 8, 8], 8);
        let g = net.forward_build(&st, &x, Mode::Train, None).unwrap();
        let before = net.bn_stats.get("m0.stem.bn").unwrap().clone();
        net.apply_bn_updates(&g.bn_batch);
        let after = net.bn_stats.get("m0.stem.bn").unwrap().clone();
        let (_, bmean, _) = g
            .bn_batch
            .iter()
            .find(|(n, _, _)| n == "m0.stem.bn")
            .unwrap()
            .clone();
        for ((b, a), t) in before.mean.iter().zip(&after.mean).zip(&bmean) {
            let expect = 0.9 * b + 0.1 * t;
            assert!((a - expect).abs() < 1e-15);
        }
    }
}
