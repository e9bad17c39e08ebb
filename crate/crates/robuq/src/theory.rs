//! Brute-force verification of two risk inequalities on finite toy
//! problems.
//!
//! Two risks are compared. Both share a first term penalizing label
//! errors at the clean points; they differ in the second term. One
//! penalizes prediction *disagreement* between the clean point and its
//! worst in-ball perturbation, the other penalizes *label* errors at the
//! worst perturbation:
//!
//! `R(f)  = mean phi(sig f(x) * y) + mean phi(sig f(x) * sig f(x'))`
//! `R*(f) = mean phi(sig f(x) * y) + mean phi(sig f(x') * y)`
//!
//! where each x' maximizes its own term over an exhaustive grid in the
//! ball. Ties keep x itself, then the lowest grid index; keeping x is
//! what empties the pathological set E (wrong at x, right at x') below,
//! and the first claim fails without some such convention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, DOMAIN_VERIFY};

/// Squashing applied to classifier outputs before the margin loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Squash {
    Identity,
    Tanh,
}

impl Squash {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Squash::Identity => v,
            Squash::Tanh => v.tanh(),
        }
    }
}

/// Margin losses, all non-increasing in the margin argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiLoss {
    ZeroOne,
    Hinge,
    Sigmoid,
    Logistic,
}

impl PhiLoss {
    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            PhiLoss::ZeroOne => {
                if theta < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            PhiLoss::Hinge => (1.0 - theta).max(0.0),
            PhiLoss::Sigmoid => 1.0 - theta.tanh(),
            PhiLoss::Logistic => (1.0 + (-theta).exp()).log2(),
        }
    }

    pub fn parse(s: &str) -> Result<PhiLoss> {
        match s {
            "zero-one" | "0-1" => Ok(PhiLoss::ZeroOne),
            "hinge" => Ok(PhiLoss::Hinge),
            "sigmoid" => Ok(PhiLoss::Sigmoid),
            "logistic" => Ok(PhiLoss::Logistic),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhiLoss::ZeroOne => "zero-one",
            PhiLoss::Hinge => "hinge",
            PhiLoss::Sigmoid => "sigmoid",
            PhiLoss::Logistic => "logistic",
        }
    }

    /// Dense-sampling audit that the loss never increases on `[-1, 1]`.
    pub fn is_monotone_decreasing_on_unit(&self) -> bool {
        let steps = 2000;
        let mut prev = self.eval(-1.0);
        for i in 1..=steps {
            let theta = -1.0 + 2.0 * i as f64 / steps as f64;
            let v = self.eval(theta);
            if v > prev + 1e-12 {
                return false;
            }
            prev = v;
        }
        true
    }
}

/// Finite binary-labeled sample set with an enumeration ball per sample.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    /// Points of dimension 1 or 2.
    pub xs: Vec<Vec<f64>>,
    /// Labels in {-1, +1}.
    pub ys: Vec<f64>,
    /// Ball radius in the max norm.
    pub delta: f64,
    /// Grid points per axis; odd so the grid contains the center.
    pub grid_points: usize,
}

impl ToyProblem {
    pub fn validate(&self) -> Result<()> {
        if self.xs.is_empty() || self.xs.len() != self.ys.len() {
            return Err(Error::Contract(format!(
                "{} points, {} labels",
                self.xs.len(),
                self.ys.len()
            )));
        }
        let dim = self.xs[0].len();
        if dim == 0 || dim > 2 || self.xs.iter().any(|x| x.len() != dim) {
            return Err(Error::Contract("points must share dimension 1 or 2".into()));
        }
        if self.ys.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Contract("labels must be -1 or +1".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Contract("ball radius must be >= 0".into()));
        }
        if self.grid_points == 0 || self.grid_points % 2 == 0 {
            return Err(Error::Contract(format!(
                "grid needs an odd point count, got {}",
                self.grid_points
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.xs[0].len()
    }

    fn offsets(&self) -> Vec<f64> {
        let g = self.grid_points;
        if g == 1 {
            return vec![0.0];
        }
        (0..g)
            .map(|k| self.delta * (2.0 * k as f64 / (g - 1) as f64 - 1.0))
            .collect()
    }

    /// Visit every grid point of the ball around `x` in index order.
    fn for_each_grid(&self, x: &[f64], mut visit: impl FnMut(&[f64])) {
        let offs = self.offsets();
        match x.len() {
            1 => {
                for &o in &offs {
                    visit(&[x[0] + o]);
                }
            }
            2 => {
                for &o0 in &offs {
                    for &o1 in &offs {
                        visit(&[x[0] + o0, x[1] + o1]);
                    }
                }
            }
            _ => unreachable!("validated dimension"),
        }
    }
}

/// Deterministic scalar-output toy classifiers; the predicted label is the
/// sign of the output.
#[derive(Clone, Debug)]
pub enum ToyClassifier {
    Affine { w: Vec<f64>, b: f64 },
    Cubic { a: f64, b: f64, c: f64, d: f64 },
    Sine { amp: f64, freq: f64, phase: f64 },
}

impl ToyClassifier {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ToyClassifier::Affine { w, b } => {
                w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b
            }
            ToyClassifier::Cubic { a, b, c, d } => {
                let t = x[0];
                ((a * t + b) * t + c) * t + d
            }
            ToyClassifier::Sine { amp, freq, phase } => (freq * x[0] + phase).sin() * amp,
        }
    }
}

/// Which second-term objective the perturbation maximizes.
#[derive(Clone, Copy, Debug)]
pub enum Criterion {
    /// Maximize `phi(sig f(x') * y)`.
    Label,
    /// Maximize `phi(sig f(x) * sig f(x'))` with the clean output fixed.
    Agreement,
}

/// Exhaustive in-ball maximizer of the criterion's loss; ties keep `x`,
/// then the lowest grid index.
pub fn worst_case_perturbation(
    f: &ToyClassifier,
    problem: &ToyProblem,
    x: &[f64],
    y: f64,
    phi: PhiLoss,
    squash: Squash,
    criterion: Criterion,
) -> (Vec<f64>, f64) {
    let sfx = squash.apply(f.eval(x));
    let loss_at = |p: &[f64]| -> f64 {
        let sfp = squash.apply(f.eval(p));
        match criterion {
            Criterion::Label => phi.eval(sfp * y),
            Criterion::Agreement => phi.eval(sfx * sfp),
        }
    };
    let mut best = x.to_vec();
    let mut best_loss = loss_at(x);
    problem.for_each_grid(x, |p| {
        let l = loss_at(p);
        if l > best_loss {
            best_loss = l;
            best = p.to_vec();
        }
    });
    (best, best_loss)
}

/// Index sets by sign pattern of `(f(x) y, f(x') y)` with x' the
/// label-criterion worst case: both right, attackable, wrong-then-right,
/// both wrong.
#[derive(Clone, Debug, Default)]
pub struct PartitionSets {
    pub b: Vec<usize>,
    pub d: Vec<usize>,
    pub e: Vec<usize>,
    pub f: Vec<usize>,
}

pub fn partition(
    f: &ToyClassifier,
    problem: &ToyProblem,
    phi: PhiLoss,
    squash: Squash,
) -> Result<PartitionSets> {
    problem.validate()?;
    let mut sets = PartitionSets::default();
    for (i, (x, &y)) in problem.xs.iter().zip(&problem.ys).enumerate() {
        let (xp, _) = worst_case_perturbation(f, problem, x, y, phi, squash, Criterion::Label);
        let clean_ok = f.eval(x) * y >= 0.0;
        let worst_ok = f.eval(&xp) * y >= 0.0;
        match (clean_ok, worst_ok) {
            (true, true) => sets.b.push(i),
            (true, false) => sets.d.push(i),
            (false, true) => sets.e.push(i),
            (false, false) => sets.f.push(i),
        }
    }
    Ok(sets)
}

/// Disagreement-based risk: label errors at x plus prediction changes at
/// the agreement-criterion worst perturbation.
pub fn risk_r(f: &ToyClassifier, problem: &ToyProblem, phi: PhiLoss, squash: Squash) -> Result<f64> {
    problem.validate()?;
    let n = problem.xs.len() as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for (x, &y) in problem.xs.iter().zip(&problem.ys) {
        first += phi.eval(squash.apply(f.eval(x)) * y);
        let (_, worst) = worst_case_perturbation(f, problem, x, y, phi, squash, Criterion::Agreement);
        second += worst;
    }
    Ok(first / n + second / n)
}

/// Label-based risk: label errors at x plus label errors at the
/// label-criterion worst perturbation.
pub fn risk_r_star(
    f: &ToyClassifier,
    problem: &ToyProblem,
    phi: PhiLoss,
    squash: Squash,
) -> Result<f64> {
    problem.validate()?;
    let n = problem.xs.len() as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for (x, &y) in problem.xs.iter().zip(&problem.ys) {
        first += phi.eval(squash.apply(f.eval(x)) * y);
        let (_, worst) = worst_case_perturbation(f, problem, x, y, phi, squash, Criterion::Label);
        second += worst;
    }
    Ok(first / n + second / n)
}

#[derive(Clone, Debug)]
pub struct PropReport {
    pub trials: usize,
    pub violations: usize,
    /// Samples landing in the wrong-then-right set across all trials.
    pub e_samples: usize,
    pub witness: Option<String>,
}

impl PropReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.e_samples == 0
    }
}

fn random_problem(rng: &mut ChaCha8Rng, trial: usize) -> (ToyProblem, ToyClassifier) {
    let dim = if rng.random_range(0..2) == 0 { 1 } else { 2 };
    let n = rng.random_range(5..=20);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<f64> = (0..n)
        .map(|_| if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 })
        .collect();
    let delta = rng.random_range(0.05..0.5);
    let problem = ToyProblem {
        xs,
        ys,
        delta,
        grid_points: 41,
    };
    // Mostly random affine maps; in one dimension, cycle in fixed
    // nonlinear classifiers to stress non-convexity.
    let f = if dim == 1 && trial % 4 == 3 {
        match (trial / 4) % 4 {
            0 => ToyClassifier::Cubic { a: 2.0, b: 0.0, c: -1.0, d: 0.1 },
            1 => ToyClassifier::Cubic { a: 1.0, b: -1.5, c: 0.5, d: 0.0 },
            2 => ToyClassifier::Sine { amp: 1.0, freq: 3.0, phase: 0.4 },
            _ => ToyClassifier::Sine { amp: 0.8, freq: 5.0, phase: -1.0 },
        }
    } else {
        ToyClassifier::Affine {
            w: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            b: rng.random_range(-1.0..1.0),
        }
    };
    (problem, f)
}

/// Brute-force campaign for the first claim: with the 0-1 loss and no
/// squashing, the disagreement risk never exceeds the label risk.
pub fn verify_prop1(trials: usize, seed: u64) -> Result<PropReport> {
    let mut report = PropReport {
        trials,
        violations: 0,
        e_samples: 0,
        witness: None,
    };
    for t in 0..trials {
        let mut rng = derive_rng(seed, DOMAIN_VERIFY, t as u64);
        let (problem, f) = random_problem(&mut rng, t);
        problem.validate()?;
        // 0-1 terms are integer counts; compare counts, not float sums.
        let mut count_r = 0usize;
        let mut count_star = 0usize;
        for (x, &y) in problem.xs.iter().zip(&problem.ys) {
            let first = PhiLoss::ZeroOne.eval(f.eval(x) * y) as usize;
            let (_, wa) = worst_case_perturbation(
                &f,
                &problem,
                x,
                y,
                PhiLoss::ZeroOne,
                Squash::Identity,
                Criterion::Agreement,
            );
            let (_, wl) = worst_case_perturbation(
                &f,
                &problem,
                x,
                y,
                PhiLoss::ZeroOne,
                Squash::Identity,
                Criterion::Label,
            );
            count_r += first + wa as usize;
            count_star += first + wl as usize;
        }
        let sets = partition(&f, &problem, PhiLoss::ZeroOne, Squash::Identity)?;
        report.e_samples += sets.e.len();
        if count_r > count_star {
            report.violations += 1;
            if report.witness.is_none() {
                report.witness = Some(format!(
                    "trial {t}: R count {count_r} > R* count {count_star}; problem {problem:?}, classifier {f:?}"
                ));
            }
        }
    }
    Ok(report)
}

/// Brute-force campaign for the second claim: with tanh squashing and a
/// monotone decreasing loss, the agreement term dominates the label term
/// pointwise on the both-right set and is dominated on its complement.
pub fn verify_prop2(trials: usize, seed: u64, phi: PhiLoss) -> Result<PropReport> {
    if phi == PhiLoss::ZeroOne {
        return Err(Error::Config(
            "the pointwise comparison needs a margin loss, not 0-1".into(),
        ));
    }
    if !phi.is_monotone_decreasing_on_unit() {
        return Err(Error::Contract(format!(
            "loss {} is not monotone decreasing on [-1, 1]",
            phi.name()
        )));
    }
    let squash = Squash::Tanh;
    let mut report = PropReport {
        trials,
        violations: 0,
        e_samples: 0,
        witness: None,
    };
    for t in 0..trials {
        let mut rng = derive_rng(seed, DOMAIN_VERIFY, 0x2000_0000 + t as u64);
        let (problem, f) = random_problem(&mut rng, t);
        let sets = partition(&f, &problem, phi, squash)?;
        report.e_samples += sets.e.len();
        let mut bad: Option<String> = None;
        let mut check = |idx: &[usize], on_b: bool| {
            for &i in idx {
                let x = &problem.xs[i];
                let y = problem.ys[i];
                let (xp, _) =
                    worst_case_perturbation(&f, &problem, x, y, phi, squash, Criterion::Label);
                let sfx = squash.apply(f.eval(x));
                let sfp = squash.apply(f.eval(&xp));
                let agree = phi.eval(sfp * sfx);
                let label = phi.eval(sfp * y);
                let ok = if on_b {
                    agree >= label - 1e-12
                } else {
                    agree <= label + 1e-12
                };
                if !ok && bad.is_none() {
                    bad = Some(format!(
                        "trial {t} sample {i}: agreement {agree} vs label {label} (on_b={on_b})"
                    ));
                }
            }
        };
        check(&sets.b, true);
        check(&sets.d, false);
        check(&sets.f, false);
        if let Some(w) = bad {
            report.violations += 1;
            if report.witness.is_none() {
                report.witness = Some(w);
            }
        }
    }
    Ok(report)
}
