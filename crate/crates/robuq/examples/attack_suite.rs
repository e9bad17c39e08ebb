//! Runs the four gradient attacks against one trained model at the same
//! perturbation budget and reports accuracy degradation and the actual
//! perturbation sizes, which never exceed the budget.

use robuq::attack::{self, AttackConfig};
use robuq::data::{gen_synthetic, Split, SyntheticKind};
use robuq::nets::NetworkSpec;
use robuq::rng::{derive_rng, DOMAIN_ATTACK};
use robuq::train::{run_training, EvalConfig, LossSpec, TrainConfig, Trainer};

fn main() -> robuq::Result<()> {
    let train = gen_synthetic(SyntheticKind::Digits, 300, 0.05, 29, Split::Train)?;
    let test = gen_synthetic(SyntheticKind::Digits, 80, 0.05, 29, Split::Test)?;
    let spec = NetworkSpec {
        in_channels: 1,
        in_h: 28,
        in_w: 28,
        classes: 10,
        blocks: vec![1],
        widths: vec![6],
        ensemble: 1,
        noise_std: 0.0,
        batch_norm: true,
    };
    let mut cfg = TrainConfig::desk(29);
    cfg.epochs = 5;
    cfg.batch = 50;
    cfg.lr = 0.05;
    cfg.milestones = vec![];
    cfg.loss = LossSpec::Natural;
    let mut ecfg = EvalConfig::standard();
    ecfg.eval_every = 0; // final evaluation only
    let mut trainer = Trainer::new(&spec, cfg)?;
    let (_, _, acc) = run_training(&mut trainer, &train, &test, &ecfg, |_, _| Ok(()))?;
    println!("trained 5 epochs, clean accuracy {:.3}", acc.n);

    let acfg = AttackConfig {
        eps: 0.031,
        alpha: 1.0 / 255.0,
        iters: 20,
        ..AttackConfig::default()
    };
    let idx: Vec<usize> = (0..test.len()).collect();
    let (batch, labels) = test.batch(&idx);
    let net = &trainer.net;
    let state = &trainer.state;

    let acc_of = |x: &robuq::Tensor| -> robuq::Result<f64> {
        let logits = net.logits_eval(state, x)?;
        let k = logits.shape()[1];
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let row = &logits.data()[i * k..(i + 1) * k];
                (0..k).all(|j| row[j] <= row[y]) // y attains the max
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    };

    println!("attack   | accuracy | max linf (budget {})", acfg.eps);
    let clean = acc_of(&batch)?;
    println!("none     | {clean:>8.3} | 0.000000");

    let variants: Vec<(&str, robuq::Tensor)> = vec![
        ("fgsm", attack::fgsm(net, state, &batch, &labels, &acfg)?),
        ("ifgsm", attack::ifgsm(net, state, &batch, &labels, &acfg)?),
        ("cw", attack::cw_linf(net, state, &batch, &labels, &acfg)?),
        ("pgd", {
            let mut rng = derive_rng(29, DOMAIN_ATTACK, 0);
            attack::pgd(net, state, &batch, &labels, &acfg, &mut rng)?
        }),
    ];
    for (name, adv) in &variants {
        let a = acc_of(adv)?;
        let d = attack::linf_distance(&batch, adv);
        println!("{name:<8} | {a:>8.3} | {d:.6}");
        assert!(d <= acfg.eps + 1e-12, "{name} exceeded the budget");
        assert!(
            adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "{name} left the pixel range"
        );
    }
    println!("all perturbations respect the budget and the pixel range");
    Ok(())
}
