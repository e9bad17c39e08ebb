//! Exhaustively checks the two risk inequalities on randomized toy
//! problems and walks through one hand-computed instance showing where
//! the disagreement risk and the label risk differ.

use robuq::theory::{
    partition, risk_r, risk_r_star, verify_prop1, verify_prop2, PhiLoss, Squash, ToyClassifier,
    ToyProblem,
};

fn main() -> robuq::Result<()> {
    // Hand instance: the constant classifier f = -1 on a single correct
    // sample. It is wrong everywhere, but its prediction never changes, so
    // the disagreement term is 0 while the label term pays again.
    let f = ToyClassifier::Affine { w: vec![0.0], b: -1.0 };
    let p = ToyProblem {
        xs: vec![vec![0.5]],
        ys: vec![1.0],
        delta: 0.3,
        grid_points: 41,
    };
    let r = risk_r(&f, &p, PhiLoss::ZeroOne, Squash::Identity)?;
    let rs = risk_r_star(&f, &p, PhiLoss::ZeroOne, Squash::Identity)?;
    let sets = partition(&f, &p, PhiLoss::ZeroOne, Squash::Identity)?;
    println!("constant wrong classifier: R = {r}, R* = {rs} (sample in the both-wrong set: {:?})", sets.f);
    assert_eq!((r, rs), (1.0, 2.0));

    // Randomized campaigns over affine, cubic, and sine classifiers in one
    // and two dimensions.
    let p1 = verify_prop1(500, 101)?;
    println!(
        "claim 1 (0-1 loss, identity): {} trials, {} violations, wrong-then-right set empty: {}",
        p1.trials,
        p1.violations,
        p1.e_samples == 0
    );
    assert!(p1.passed());

    for loss in [PhiLoss::Hinge, PhiLoss::Sigmoid, PhiLoss::Logistic] {
        let p2 = verify_prop2(300, 103, loss)?;
        println!(
            "claim 2 ({} loss, tanh): {} trials, {} pointwise violations",
            loss.name(),
            p2.trials,
            p2.violations
        );
        assert_eq!(p2.violations, 0);
    }

    // The pointwise mechanics on one number: wrong at both x and the
    // worst perturbation, so the agreement argument is a product of two
    // negatives and the hinge penalty drops.
    let (fx, fxp, y) = (-0.5_f64, -0.7_f64, 1.0_f64);
    let agree = PhiLoss::Hinge.eval(fxp.tanh() * fx.tanh());
    let label = PhiLoss::Hinge.eval(fxp.tanh() * y);
    println!("hand check: phi(tanh f(x') tanh f(x)) = {agree:.4} <= phi(tanh f(x') y) = {label:.4}");
    assert!(agree <= label);
    println!("all inequalities verified");
    Ok(())
}
