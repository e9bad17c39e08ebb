//! Training objectives and the epoch loop that binds them to the
//! quantization schedule.
//!
//! Four objectives are supported: plain cross-entropy, cross-entropy at
//! adversarial points, a divergence-regularized objective (natural loss
//! plus a weighted divergence between clean and perturbed predictions),
//! and the two-coefficient combination `alpha * natural + beta * robust`.
//! Every forward pass during training and evaluation reads the quantized
//! weights; the full-precision shadow weights only ever receive gradient
//! updates.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackConfig};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::nets::{Mode, Network, NetworkSpec};
use crate::quant::{QuantState, Scheme};
use crate::rng::{derive_rng, DOMAIN_ATTACK, DOMAIN_NOISE, DOMAIN_SHUFFLE};
use crate::sparsity::{bound_statistic, sparsity_report, BoundTrace};
use crate::tensor::Tensor;

/// Slack allowed before an adversarial batch loss below the clean loss is
/// counted as an ascent failure; covers random-start variance.
pub const ASCENT_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    Natural,
    Adversarial,
    Trades { beta: f64, soft_label_ce: bool },
    Tradeoff { alpha: f64, beta: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Natural | LossSpec::Adversarial => Ok(()),
            LossSpec::Trades { beta, .. } => {
                if beta < 0.0 || !beta.is_finite() {
                    return Err(Error::Config(format!("trades beta must be >= 0, got {beta}")));
                }
                Ok(())
            }
            LossSpec::Tradeoff { alpha, beta } => {
                if alpha < 0.0 || beta < 0.0 || !alpha.is_finite() || !beta.is_finite() {
                    return Err(Error::Config(format!(
                        "tradeoff coefficients must be >= 0, got alpha={alpha} beta={beta}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Natural => "natural",
            LossSpec::Adversarial => "adversarial",
            LossSpec::Trades { .. } => "trades",
            LossSpec::Tradeoff { .. } => "tradeoff",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate at each milestone epoch.
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub rho: f64,
    /// First epoch of the pure-projection regime.
    pub cutoff_epoch: usize,
    pub loss: LossSpec,
    /// Inner-maximization settings for adversarial objectives.
    pub pgd: AttackConfig,
    /// Keep the stem conv and the classifier full precision.
    pub exempt_first: bool,
    pub exempt_last: bool,
}

impl TrainConfig {
    /// Twenty-epoch schedule sized for single-core runs: cutoff at 80% of
    /// the epochs, learning-rate decay at 60% and 85%.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch: 50,
            lr: 0.02,
            lr_decay: 0.1,
            milestones: vec![12, 17],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            scheme: Scheme::Float,
            rho: 1.02,
            cutoff_epoch: 16,
            loss: LossSpec::Natural,
            pgd: AttackConfig {
                alpha: 0.007,
                iters: 10,
                ..AttackConfig::default()
            },
            exempt_first: true,
            exempt_last: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.loss.validate()?;
        self.pgd.validate()
    }

    /// Step-decayed learning rate for the given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

/// Clean and per-attack accuracies, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct AccTable {
    pub n: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Shared budget for the evaluation attacks; the one-step attack uses
    /// `eps` directly, the iterated attack uses `alpha`/`iters`, the margin
    /// attack uses `cw_lr`/50 iterations.
    pub attack: AttackConfig,
    pub include_cw: bool,
    /// Evaluate on the first `subset` samples; 0 means all.
    pub subset: usize,
    /// Run attacks every this many epochs during training; 0 = final only.
    pub eval_every: usize,
}

impl EvalConfig {
    pub fn standard() -> EvalConfig {
        EvalConfig {
            attack: AttackConfig {
                alpha: 1.0 / 255.0,
                iters: 20,
                ..AttackConfig::default()
            },
            include_cw: false,
            subset: 0,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub m_t: f64,
    pub lambda: f64,
    pub seconds: f64,
    /// Batches whose adversarial loss fell more than the tolerance below
    /// the clean loss.
    pub ascent_violations: usize,
}

/// One row of the per-epoch record assembled by [`run_training`].
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub acc: Option<AccTable>,
    pub m_t: f64,
    pub lambda: f64,
    pub weight_sparsity: f64,
    pub channel_sparsity: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub net: Network,
    pub state: QuantState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(spec: &NetworkSpec, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let (net, params) = crate::nets::build_network(spec, cfg.seed)?;
        let state = crate::nets::build_quant_state(
            params,
            cfg.scheme,
            cfg.rho,
            cfg.cutoff_epoch,
            cfg.exempt_first,
            cfg.exempt_last,
        )?;
        Ok(Trainer { net, state, cfg })
    }

    /// Mean cross-entropy at the quantized weights, no perturbation.
    pub fn natural_loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut g = self.net.forward_build(&self.state, batch, Mode::Eval, None)?;
        let loss = g.tape.softmax_cross_entropy(g.logits, labels)?;
        Ok(g.tape.value(loss).scalar_value())
    }

    /// One gradient step on a mini-batch; returns the loss and, for
    /// adversarial objectives, whether the inner maximization stayed above
    /// the clean loss.
    fn batch_step(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        lr: f64,
        attack_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, bool)> {
        let loss_spec = self.cfg.loss.clone();
        let (loss_value, grads, ascent_ok) = match loss_spec {
            LossSpec::Natural => {
                let (v, g) = self.single_branch_grads(batch, labels, noise_rng)?;
                (v, g, true)
            }
            LossSpec::Adversarial => self.adversarial_grads(batch, labels, attack_rng, noise_rng)?,
            LossSpec::Trades { beta, soft_label_ce } => {
                if beta == 0.0 {
                    let (v, g) = self.single_branch_grads(batch, labels, noise_rng)?;
                    (v, g, true)
                } else {
                    self.trades_grads(batch, labels, beta, soft_label_ce, attack_rng, noise_rng)?
                }
            }
            LossSpec::Tradeoff { alpha, beta } => {
                if beta == 0.0 {
                    let (v, mut g) = self.single_branch_grads(batch, labels, noise_rng)?;
                    for t in g.iter_mut() {
                        *t = t.scale(alpha);
                    }
                    (alpha * v, g, true)
                } else if alpha == 0.0 && beta == 1.0 {
                    self.adversarial_grads(batch, labels, attack_rng, noise_rng)?
                } else {
                    self.tradeoff_grads(batch, labels, alpha, beta, attack_rng, noise_rng)?
                }
            }
        };
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss diverged at epoch {}",
                self.cfg.loss.name(),
                self.state.epoch
            )));
        }
        self.state
            .step(&grads, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        Ok((loss_value, ascent_ok))
    }

    fn single_branch_grads(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = self
            .net
            .forward_build(&self.state, batch, Mode::Train, Some(noise_rng))?;
        let loss = g.tape.softmax_cross_entropy(g.logits, labels)?;
        let grads = g.tape.backward(loss)?;
        let out = g
            .param_ids
            .iter()
            .map(|&id| grads.grad_or_zeros(&g.tape, id))
            .collect();
        self.net.apply_bn_updates(&g.bn_batch);
        Ok((g.tape.value(loss).scalar_value(), out))
    }

    fn adversarial_grads(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        attack_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>, bool)> {
        let clean = self.natural_loss(batch, labels)?;
        let adv = attack::pgd(&self.net, &self.state, batch, labels, &self.cfg.pgd, attack_rng)?;
        let (v, g) = self.single_branch_grads(&adv, labels, noise_rng)?;
        Ok((v, g, v >= clean - ASCENT_TOL))
    }

    fn trades_grads(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        beta: f64,
        soft_label_ce: bool,
        attack_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>, bool)> {
        let adv = attack::pgd_kl(&self.net, &self.state, batch, &self.cfg.pgd, attack_rng)?;
        let mut pg = self
            .net
            .forward_pair_build(&self.state, batch, &adv, Mode::Train, Some(noise_rng))?;
        let nat = pg.tape.softmax_cross_entropy(pg.logits_a, labels)?;
        let rob = if soft_label_ce {
            // Clean predictions become fixed soft labels for the perturbed
            // branch.
            let targets = softmax_tensor(pg.tape.value(pg.logits_a));
            pg.tape.soft_cross_entropy(pg.logits_b, &targets)?
        } else {
            pg.tape.kl_div_softmax(pg.logits_a, pg.logits_b)?
        };
        let scaled = pg.tape.mul_scalar(rob, beta);
        let total = pg.tape.add(nat, scaled)?;
        let grads = pg.tape.backward(total)?;
        let out = pg
            .param_ids
            .iter()
            .map(|&id| grads.grad_or_zeros(&pg.tape, id))
            .collect();
        self.net.apply_bn_updates(&pg.bn_batch);
        Ok((pg.tape.value(total).scalar_value(), out, true))
    }

    fn tradeoff_grads(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        alpha: f64,
        beta: f64,
        attack_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>, bool)> {
        let clean = self.natural_loss(batch, labels)?;
        let adv = attack::pgd(&self.net, &self.state, batch, labels, &self.cfg.pgd, attack_rng)?;
        let mut pg = self
            .net
            .forward_pair_build(&self.state, batch, &adv, Mode::Train, Some(noise_rng))?;
        let nat = pg.tape.softmax_cross_entropy(pg.logits_a, labels)?;
        let rob = pg.tape.softmax_cross_entropy(pg.logits_b, labels)?;
        let na = pg.tape.mul_scalar(nat, alpha);
        let rb = pg.tape.mul_scalar(rob, beta);
        let total = pg.tape.add(na, rb)?;
        let grads = pg.tape.backward(total)?;
        let out = pg
            .param_ids
            .iter()
            .map(|&id| grads.grad_or_zeros(&pg.tape, id))
            .collect();
        let rob_value = pg.tape.value(rob).scalar_value();
        self.net.apply_bn_updates(&pg.bn_batch);
        Ok((
            pg.tape.value(total).scalar_value(),
            out,
            rob_value >= clean - ASCENT_TOL,
        ))
    }

    /// One pass over the data: shuffle, step per mini-batch, advance the
    /// schedule epoch.
    pub fn train_epoch(&mut self, data: &DatasetHandle) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let t0 = Instant::now();
        let epoch = self.state.epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut shuffle_rng = derive_rng(self.cfg.seed, DOMAIN_SHUFFLE, epoch as u64);
        let mut attack_rng = derive_rng(self.cfg.seed, DOMAIN_ATTACK, epoch as u64);
        let mut noise_rng = derive_rng(self.cfg.seed, DOMAIN_NOISE, epoch as u64);

        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut total = 0.0;
        let mut batches = 0usize;
        let mut violations = 0usize;
        for chunk in order.chunks(self.cfg.batch) {
            let (batch, labels) = data.batch(chunk);
            let (loss, ascent_ok) = self
                .batch_step(&batch, &labels, lr, &mut attack_rng, &mut noise_rng)
                .map_err(|e| {
                    Error::NonFinite(format!("epoch {epoch}, batch {batches}: {e}"))
                })?;
            total += loss;
            batches += 1;
            if !ascent_ok {
                violations += 1;
            }
        }
        self.state.set_epoch(epoch + 1);
        Ok(EpochReport {
            epoch,
            loss: total / batches as f64,
            m_t: bound_statistic(&self.state),
            lambda: self.state.lambda,
            seconds: t0.elapsed().as_secs_f64(),
            ascent_violations: violations,
        })
    }
}

fn softmax_tensor(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &v in row {
            z += (v - mx).exp();
        }
        for j in 0..k {
            out[i * k + j] = (row[j] - mx).exp() / z;
        }
    }
    Tensor::new(vec![n, k], out).expect("softmax shape")
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax_row(&logits.data()[i * k..(i + 1) * k]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Clean accuracy plus accuracy under the three evaluation attacks
/// (one-step sign, iterated sign, margin descent), all computed at the
/// quantized weights.
pub fn evaluate(
    net: &Network,
    state: &QuantState,
    data: &DatasetHandle,
    ecfg: &EvalConfig,
) -> Result<AccTable> {
    let ds = if ecfg.subset > 0 && ecfg.subset < data.len() {
        data.take(ecfg.subset)
    } else {
        data.clone()
    };
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let mut cfg1 = ecfg.attack.clone();
    cfg1.final_clip_only = false;
    let (mut hits_n, mut hits_1, mut hits_2, mut hits_3) = (0.0, 0.0, 0.0, 0.0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(50) {
        let (batch, labels) = ds.batch(chunk);
        let w = labels.len() as f64;
        hits_n += accuracy(&net.logits_eval(state, &batch)?, &labels) * w;
        let x1 = attack::fgsm(net, state, &batch, &labels, &cfg1)?;
        hits_1 += accuracy(&net.logits_eval(state, &x1)?, &labels) * w;
        let x2 = attack::ifgsm(net, state, &batch, &labels, &cfg1)?;
        hits_2 += accuracy(&net.logits_eval(state, &x2)?, &labels) * w;
        if ecfg.include_cw {
            let x3 = attack::cw_linf(net, state, &batch, &labels, &cfg1)?;
            hits_3 += accuracy(&net.logits_eval(state, &x3)?, &labels) * w;
        }
    }
    let n = ds.len() as f64;
    Ok(AccTable {
        n: hits_n / n,
        a1: hits_1 / n,
        a2: hits_2 / n,
        a3: ecfg.include_cw.then_some(hits_3 / n),
    })
}

/// Full run: per-epoch training, scheduled evaluation, bound tracking.
/// The callback receives each finished row; the last row always carries
/// a full evaluation. Starts at the trainer's current epoch, so a state
/// restored from a snapshot continues where it left off.
pub fn run_training(
    trainer: &mut Trainer,
    train: &DatasetHandle,
    test: &DatasetHandle,
    ecfg: &EvalConfig,
    mut on_row: impl FnMut(&Trainer, &EpochRow) -> Result<()>,
) -> Result<(Vec<EpochRow>, BoundTrace, AccTable)> {
    let mut rows = Vec::new();
    let mut trace = BoundTrace::new();
    let mut final_acc = AccTable::default();
    for e in trainer.state.epoch..trainer.cfg.epochs {
        let report = trainer.train_epoch(train)?;
        trace.append(report.m_t);
        let last = e + 1 == trainer.cfg.epochs;
        let scheduled = ecfg.eval_every > 0 && (e + 1) % ecfg.eval_every == 0;
        let acc = if last || scheduled {
            let mut cfg = ecfg.clone();
            if !last {
                cfg.include_cw = false;
            } else {
                cfg.subset = 0;
            }
            let table = evaluate(&trainer.net, &trainer.state, test, &cfg)?;
            if last {
                final_acc = table;
            }
            Some(table)
        } else {
            None
        };
        let sp = sparsity_report(&trainer.state);
        let row = EpochRow {
            epoch: report.epoch,
            loss: report.loss,
            acc,
            m_t: report.m_t,
            lambda: report.lambda,
            weight_sparsity: sp.weight_sparsity,
            channel_sparsity: sp.channel_sparsity,
            seconds: report.seconds,
        };
        on_row(trainer, &row)?;
        rows.push(row);
    }
    Ok((rows, trace, final_acc))
}
