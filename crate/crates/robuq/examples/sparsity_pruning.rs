//! Trains with exact ternary quantization (which drives many weights to
//! exact zero), reports weight and channel sparsity, prunes dead
//! channels, and verifies the pruned network computes identical logits.

use robuq::data::{gen_synthetic, Split, SyntheticKind};
use robuq::nets::{param_count, NetworkSpec};
use robuq::quant::Scheme;
use robuq::sparsity::{prune_channels, sparsity_report};
use robuq::train::{run_training, EvalConfig, TrainConfig, Trainer};

fn main() -> robuq::Result<()> {
    let train = gen_synthetic(SyntheticKind::Digits, 300, 0.05, 37, Split::Train)?;
    let test = gen_synthetic(SyntheticKind::Digits, 60, 0.05, 37, Split::Test)?;
    let spec = NetworkSpec {
        in_channels: 1,
        in_h: 28,
        in_w: 28,
        classes: 10,
        blocks: vec![1, 1],
        widths: vec![6, 8],
        ensemble: 1,
        noise_std: 0.0,
        batch_norm: true,
    };
    let mut cfg = TrainConfig::desk(37);
    cfg.epochs = 6;
    cfg.batch = 50;
    cfg.lr = 0.05;
    cfg.milestones = vec![];
    cfg.scheme = Scheme::Ternary;
    cfg.cutoff_epoch = 4;
    let mut ecfg = EvalConfig::standard();
    ecfg.eval_every = 0;

    let mut trainer = Trainer::new(&spec, cfg)?;
    let (_, _, acc) = run_training(&mut trainer, &train, &test, &ecfg, |_, _| Ok(()))?;

    let sp = sparsity_report(&trainer.state);
    println!(
        "after ternary training: clean accuracy {:.3}, weight sparsity {:.3}, channel sparsity {:.3}",
        acc.n, sp.weight_sparsity, sp.channel_sparsity
    );
    for l in &sp.per_layer {
        println!(
            "  {}: {}/{} zero weights, {}/{} dead filters",
            l.layer, l.zeros, l.total, l.zero_channels, l.channels
        );
    }

    let before = param_count(&trainer.state);
    let (pnet, pstate, report) = prune_channels(&trainer.net, &trainer.state)?;
    let after = param_count(&pstate);
    println!(
        "pruning removed {} filters ({} masked in place), parameters {} -> {}",
        report.pruned, report.masked_only, before, after
    );

    // The pruned network must be the same function, bit for bit.
    let idx: Vec<usize> = (0..test.len()).collect();
    let (batch, _) = test.batch(&idx);
    let a = trainer.net.logits_eval(&trainer.state, &batch)?;
    let b = pnet.logits_eval(&pstate, &batch)?;
    let diff = a.max_abs_diff(&b);
    println!("max |logit difference| over {} inputs: {}", test.len(), diff);
    assert_eq!(diff, 0.0, "pruning must preserve outputs exactly");
    println!("pruned network verified output-identical");
    Ok(())
}
