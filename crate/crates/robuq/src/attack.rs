//! White-box evasion attacks under an ℓ∞ budget.
//!
//! All attacks are pure: they never mutate the input batch, they evaluate
//! gradients against eval-mode forwards (running batch-norm statistics, no
//! noise injection), and given the same weights, inputs, and seed they
//! reproduce the same adversarial examples. Outputs always satisfy
//! `‖x′ − x‖∞ ≤ ε` and stay inside the pixel range.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{Mode, Network};
use crate::quant::QuantState;
use crate::tape::sign0;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttackConfig {
    /// ℓ∞ perturbation budget.
    pub eps: f64,
    /// Per-iteration step size for sign-gradient attacks.
    pub alpha: f64,
    pub iters: usize,
    /// Learning rate of the margin-loss descent.
    pub cw_lr: f64,
    /// Margin floor: descent stops gaining once the true-class margin is
    /// below `-kappa`.
    pub kappa: f64,
    pub pixel_lo: f64,
    pub pixel_hi: f64,
    /// Project the cumulative perturbation only once, after the last
    /// iteration, instead of every iteration.
    pub final_clip_only: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps: 0.031,
            alpha: 1.0 / 255.0,
            iters: 20,
            cw_lr: 0.0006,
            kappa: 0.0,
            pixel_lo: 0.0,
            pixel_hi: 1.0,
            final_clip_only: false,
        }
    }
}

impl AttackConfig {
    /// Iterative sign attack at evaluation strength.
    pub fn eval_ifgsm() -> Self {
        AttackConfig::default()
    }

    /// Margin-descent attack at evaluation strength.
    pub fn eval_cw() -> Self {
        AttackConfig {
            iters: 50,
            ..AttackConfig::default()
        }
    }

    /// Inner maximizer used by adversarial training.
    pub fn train_pgd() -> Self {
        AttackConfig {
            alpha: 0.007,
            iters: 10,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Attack(format!("bad budget ε = {}", self.eps)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Attack(format!("bad step size α = {}", self.alpha)));
        }
        if self.cw_lr <= 0.0 {
            return Err(Error::Attack(format!("bad learning rate {}", self.cw_lr)));
        }
        if self.kappa < 0.0 {
            return Err(Error::Attack(format!("bad confidence κ = {}", self.kappa)));
        }
        if self.pixel_lo >= self.pixel_hi {
            return Err(Error::Attack(format!(
                "bad pixel range [{}, {}]",
                self.pixel_lo, self.pixel_hi
            )));
        }
        Ok(())
    }
}

/// Component-wise clamp of a perturbation to `[-ε, ε]`.
pub fn clip_eps(v: &Tensor, eps: f64) -> Tensor {
    v.clamp(-eps, eps)
}

/// Gradient of the mean cross-entropy with respect to the input batch.
fn input_gradient(net: &Network, state: &QuantState, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = net.forward_build(state, x, Mode::Eval, None)?;
    let loss = g.tape.softmax_cross_entropy(g.logits, labels)?;
    let grads = g.tape.backward_wrt(loss, &[g.input])?;
    let gx = grads.grad_or_zeros(&g.tape, g.input);
    if !gx.all_finite() {
        return Err(Error::Attack("non-finite input gradient".into()));
    }
    Ok(gx)
}

/// Single sign-gradient step of size ε, then pixel clamp.
pub fn fgsm(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return Ok(x.clone());
    }
    let gx = input_gradient(net, state, x, labels)?;
    let adv = x.zip_map(&gx, |xv, gv| xv + cfg.eps * sign0(gv))?;
    Ok(adv.clamp(cfg.pixel_lo, cfg.pixel_hi))
}

/// Iterated sign-gradient steps of size α; the cumulative perturbation is
/// projected into the ε-ball (every iteration by default) and pixels are
/// clamped.
pub fn ifgsm(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = x.clone();
    for _ in 0..cfg.iters {
        let gx = input_gradient(net, state, &cur, labels)?;
        cur = cur.zip_map(&gx, |xv, gv| xv + cfg.alpha * sign0(gv))?;
        if !cfg.final_clip_only {
            cur = project_ball(x, &cur, cfg)?;
        } else {
            cur = cur.clamp(cfg.pixel_lo, cfg.pixel_hi);
        }
    }
    if cfg.final_clip_only {
        cur = project_ball(x, &cur, cfg)?;
    }
    Ok(cur)
}

/// Untargeted margin-descent attack: gradient descent on
/// `max(z_y − max_{j≠y} z_j, −κ)` over the perturbation, projected into the
/// ε-ball each iteration.
pub fn cw_linf(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = x.shape()[0] as f64;
    let mut cur = x.clone();
    for _ in 0..cfg.iters {
        let mut g = net.forward_build(state, &cur, Mode::Eval, None)?;
        let loss = g.tape.margin_loss(g.logits, labels, cfg.kappa)?;
        let grads = g.tape.backward_wrt(loss, &[g.input])?;
        let gx = grads.grad_or_zeros(&g.tape, g.input);
        if !gx.all_finite() {
            return Err(Error::Attack("non-finite input gradient".into()));
        }
        // The margin reduces by batch mean; scale by n so the step size per
        // sample does not depend on how samples are batched.
        cur = cur.zip_map(&gx, |xv, gv| xv - cfg.cw_lr * n * gv)?;
        cur = project_ball(x, &cur, cfg)?;
    }
    Ok(cur)
}

/// Sign-gradient ascent on the cross-entropy from a uniform random start in
/// the ε-ball: the inner maximizer of adversarial training.
pub fn pgd(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = random_start(x, cfg, rng);
    for _ in 0..cfg.iters {
        let gx = input_gradient(net, state, &cur, labels)?;
        cur = cur.zip_map(&gx, |xv, gv| xv + cfg.alpha * sign0(gv))?;
        cur = project_ball(x, &cur, cfg)?;
    }
    Ok(cur)
}

/// PGD ascending the KL divergence between the model's distribution at `x`
/// (held fixed) and at the perturbed point.
pub fn pgd_kl(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let nat_logits = net.logits_eval(state, x)?;
    let mut cur = random_start(x, cfg, rng);
    for _ in 0..cfg.iters {
        let mut g = net.forward_build(state, &cur, Mode::Eval, None)?;
        let nat = g.tape.leaf(nat_logits.clone());
        let kl = g.tape.kl_div_softmax(nat, g.logits)?;
        let grads = g.tape.backward_wrt(kl, &[g.input])?;
        let gx = grads.grad_or_zeros(&g.tape, g.input);
        if !gx.all_finite() {
            return Err(Error::Attack("non-finite input gradient".into()));
        }
        cur = cur.zip_map(&gx, |xv, gv| xv + cfg.alpha * sign0(gv))?;
        cur = project_ball(x, &cur, cfg)?;
    }
    Ok(cur)
}

fn random_start(x: &Tensor, cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let noisy = x.map(|v| v + rng.random_range(-cfg.eps..=cfg.eps));
    noisy.clamp(cfg.pixel_lo, cfg.pixel_hi)
}

fn project_ball(x: &Tensor, cur: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let delta = clip_eps(&cur.sub(x)?, cfg.eps);
    Ok(x.add(&delta)?.clamp(cfg.pixel_lo, cfg.pixel_hi))
}

/// Largest ℓ∞ distance of `adv` from `x`.
pub fn linf_distance(x: &Tensor, adv: &Tensor) -> f64 {
    x.max_abs_diff(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_network, build_quant_state, NetworkSpec};
    use crate::quant::Scheme;
    use crate::rng::{derive_rng, DOMAIN_ATTACK, DOMAIN_NOISE};
    use crate::tensor::Tensor;

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, DOMAIN_NOISE, 40);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
    }

    fn small_net(seed: u64) -> (Network, QuantState) {
        let spec = NetworkSpec {
            in_channels: 1,
            in_h: 6,
            in_w: 6,
            classes: 3,
            blocks: vec![1],
            widths: vec![4],
            ensemble: 1,
            noise_std: 0.0,
            batch_norm: true,
        };
        let (net, params) = build_network(&spec, seed).unwrap();
        let st = build_quant_state(params, Scheme::Float, 1.02, 0, false, false).unwrap();
        (net, st)
    }

    /// Net whose logits are exactly linear in the input on the attacked
    /// region: 1x1 spatial extent, one conv (center tap only), and a bias
    /// large enough to keep every pre-activation positive over the ball.
    fn linear_region_net(d: usize) -> (Network, QuantState) {
        let spec = NetworkSpec {
            in_channels: d,
            in_h: 1,
            in_w: 1,
            classes: 2,
            blocks: vec![0],
            widths: vec![d],
            ensemble: 1,
            noise_std: 0.0,
            batch_norm: false,
        };
        let (net, params) = build_network(&spec, 1).unwrap();
        let mut st = build_quant_state(params, Scheme::Float, 1.02, 0, false, false).unwrap();
        let mut rng = derive_rng(77, DOMAIN_NOISE, 0);
        for p in st.params.iter_mut() {
            if p.name == "m0.stem.w" {
                let mut w = vec![0.0; d * d * 9];
                for co in 0..d {
                    for ci in 0..d {
                        w[(co * d + ci) * 9 + 4] = rng.random_range(-1.0..1.0);
                    }
                }
                p.shadow = Tensor::new(vec![d, d, 3, 3], w).unwrap();
            } else if p.name == "m0.stem.b" {
                p.shadow = Tensor::full(&[d], 5.0);
            } else if p.name == "m0.fc.w" {
                let w: Vec<f64> = (0..d * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
                p.shadow = Tensor::new(vec![d, 2], w).unwrap();
            }
            p.quantized = p.shadow.clone();
        }
        (net, st)
    }

    fn ce_at(net: &Network, st: &QuantState, x: &Tensor, y: &[usize]) -> f64 {
        let mut g = net.forward_build(st, x, Mode::Eval, None).unwrap();
        let l = g.tape.softmax_cross_entropy(g.logits, y).unwrap();
        g.tape.value(l).scalar_value()
    }

    #[test]
    fn clip_eps_piecewise() {
        let t = Tensor::from_vec(vec![0.05, 0.01, -0.05]);
        assert_eq!(clip_eps(&t, 0.031).data(), &[0.031, 0.01, -0.031]);
    }

    #[test]
    fn fgsm_zero_budget_returns_input() {
        let (net, st) = small_net(3);
        let x = rand_batch(&[2, 1, 6, 6], 1);
        let cfg = AttackConfig {
            eps: 0.0,
            ..AttackConfig::default()
        };
        let adv = fgsm(&net, &st, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn fgsm_respects_ball_and_pixels() {
        let (net, st) = small_net(4);
        let x = rand_batch(&[3, 1, 6, 6], 2);
        let cfg = AttackConfig::default();
        let adv = fgsm(&net, &st, &x, &[0, 1, 2], &cfg).unwrap();
        assert!(linf_distance(&x, &adv) <= cfg.eps + 1e-15);
        assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(adv.data(), x.data());
    }

    #[test]
    fn fgsm_is_exact_worst_case_on_linear_model() {
        let d = 6;
        let (net, st) = linear_region_net(d);
        let x = Tensor::new(vec![1, d, 1, 1], vec![0.5; d]).unwrap();
        let y = vec![0usize];
        let cfg = AttackConfig {
            eps: 0.05,
            ..AttackConfig::default()
        };
        let adv = fgsm(&net, &st, &x, &y, &cfg).unwrap();
        let attacked = ce_at(&net, &st, &adv, &y);
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << d) {
            let mut v = vec![0.5; d];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot += if mask & (1 << i) != 0 { cfg.eps } else { -cfg.eps };
            }
            let vx = Tensor::new(vec![1, d, 1, 1], v).unwrap();
            best = best.max(ce_at(&net, &st, &vx, &y));
        }
        assert!(attacked >= best - 1e-10, "attacked={attacked} best={best}");
        assert!(attacked >= ce_at(&net, &st, &x, &y));
    }

    #[test]
    fn ifgsm_single_large_step_equals_fgsm() {
        let (net, st) = small_net(5);
        let x = rand_batch(&[2, 1, 6, 6], 3);
        let y = vec![0, 2];
        let cfg = AttackConfig {
            iters: 1,
            alpha: 0.05,
            eps: 0.031,
            ..AttackConfig::default()
        };
        let a = ifgsm(&net, &st, &x, &y, &cfg).unwrap();
        let b = fgsm(&net, &st, &x, &y, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ifgsm_stays_in_ball_both_projection_modes() {
        let (net, st) = small_net(6);
        let x = rand_batch(&[2, 1, 6, 6], 4);
        let y = vec![1, 2];
        for final_only in [false, true] {
            let cfg = AttackConfig {
                final_clip_only: final_only,
                ..AttackConfig::default()
            };
            let adv = ifgsm(&net, &st, &x, &y, &cfg).unwrap();
            assert!(linf_distance(&x, &adv) <= cfg.eps + 1e-15);
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cw_stays_in_ball_and_reduces_margin() {
        let (net, st) = small_net(7);
        let x = rand_batch(&[4, 1, 6, 6], 5);
        let y = vec![0, 1, 2, 0];
        let cfg = AttackConfig {
            iters: 30,
            ..AttackConfig::eval_cw()
        };
        let adv = cw_linf(&net, &st, &x, &y, &cfg).unwrap();
        assert!(linf_distance(&x, &adv) <= cfg.eps + 1e-15);
        let margin = |inp: &Tensor| {
            let mut g = net.forward_build(&st, inp, Mode::Eval, None).unwrap();
            let l = g.tape.margin_loss(g.logits, &y, cfg.kappa).unwrap();
            g.tape.value(l).scalar_value()
        };
        assert!(margin(&adv) <= margin(&x) + 1e-12);
    }

    #[test]
    fn pgd_zero_iters_is_random_point_in_ball() {
        let (net, st) = small_net(8);
        let x = rand_batch(&[2, 1, 6, 6], 6);
        let cfg = AttackConfig {
            iters: 0,
            ..AttackConfig::train_pgd()
        };
        let mut rng = derive_rng(9, DOMAIN_ATTACK, 0);
        let adv = pgd(&net, &st, &x, &[0, 1], &cfg, &mut rng).unwrap();
        assert!(linf_distance(&x, &adv) <= cfg.eps + 1e-15);
        assert_ne!(adv.data(), x.data());
    }

    #[test]
    fn pgd_is_deterministic_given_seed() {
        let (net, st) = small_net(9);
        let x = rand_batch(&[2, 1, 6, 6], 7);
        let cfg = AttackConfig::train_pgd();
        let mut r1 = derive_rng(42, DOMAIN_ATTACK, 3);
        let mut r2 = derive_rng(42, DOMAIN_ATTACK, 3);
        let a = pgd(&net, &st, &x, &[0, 1], &cfg, &mut r1).unwrap();
        let b = pgd(&net, &st, &x, &[0, 1], &cfg, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pgd_ascends_loss_on_linear_model() {
        let d = 5;
        let (net, st) = linear_region_net(d);
        let x = Tensor::new(vec![1, d, 1, 1], vec![0.5; d]).unwrap();
        let y = vec![1usize];
        let cfg = AttackConfig {
            eps: 0.05,
            alpha: 0.1,
            iters: 2,
            ..AttackConfig::default()
        };
        let mut rng = derive_rng(10, DOMAIN_ATTACK, 1);
        let adv = pgd(&net, &st, &x, &y, &cfg, &mut rng).unwrap();
        assert!(ce_at(&net, &st, &adv, &y) >= ce_at(&net, &st, &x, &y) - 1e-12);
    }

    #[test]
    fn pgd_kl_output_in_ball_with_positive_divergence() {
        let (net, st) = small_net(11);
        let x = rand_batch(&[2, 1, 6, 6], 8);
        let cfg = AttackConfig::train_pgd();
        let mut rng = derive_rng(11, DOMAIN_ATTACK, 2);
        let adv = pgd_kl(&net, &st, &x, &cfg, &mut rng).unwrap();
        assert!(linf_distance(&x, &adv) <= cfg.eps + 1e-15);
        let nat = net.logits_eval(&st, &x).unwrap();
        let mut tape = crate::tape::Tape::new();
        let a = tape.leaf(nat);
        let b = tape.leaf(net.logits_eval(&st, &adv).unwrap());
        let kl = tape.kl_div_softmax(a, b).unwrap();
        assert!(tape.value(kl).scalar_value() > 0.0);
    }

    #[test]
    fn non_finite_weights_surface_attack_error() {
        let (net, mut st) = small_net(12);
        st.params[0].quantized.data_mut()[0] = f64::NAN;
        let x = rand_batch(&[1, 1, 6, 6], 9);
        let err = fgsm(&net, &st, &x, &[0], &AttackConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn attacks_do_not_mutate_input() {
        let (net, st) = small_net(13);
        let x = rand_batch(&[2, 1, 6, 6], 10);
        let before = x.clone();
        let _ = fgsm(&net, &st, &x, &[0, 1], &AttackConfig::default()).unwrap();
        let _ = ifgsm(&net, &st, &x, &[0, 1], &AttackConfig::default()).unwrap();
        let mut rng = derive_rng(1, DOMAIN_ATTACK, 4);
        let _ = pgd(&net, &st, &x, &[0, 1], &AttackConfig::train_pgd(), &mut rng).unwrap();
        assert_eq!(x.data(), before.data());
    }
}
