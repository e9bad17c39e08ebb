//! Shows the relaxed quantization schedule in action: before the cutoff
//! epoch the forward weights blend the projection with the full-precision
//! shadow and the blend weight grows geometrically; from the cutoff on,
//! weights sit exactly on the grid.

use robuq::data::{gen_synthetic, Split, SyntheticKind};
use robuq::nets::NetworkSpec;
use robuq::quant::Scheme;
use robuq::train::{TrainConfig, Trainer};

fn main() -> robuq::Result<()> {
    let spec = NetworkSpec {
        in_channels: 2,
        in_h: 1,
        in_w: 1,
        classes: 2,
        blocks: vec![1],
        widths: vec![6],
        ensemble: 1,
        noise_std: 0.0,
        batch_norm: true,
    };
    let mut cfg = TrainConfig::desk(23);
    cfg.epochs = 8;
    cfg.batch = 10;
    cfg.lr = 0.05;
    cfg.scheme = Scheme::Binary;
    cfg.cutoff_epoch = 5; // relax for epochs 0..5, pure projection after
    let data = gen_synthetic(SyntheticKind::Blobs, 60, 0.05, 23, Split::Train)?;

    let mut t = Trainer::new(&spec, cfg)?;
    println!("epoch | lambda      | phase      | max |u - proj(w)| | on grid");
    for _ in 0..t.cfg.epochs {
        let phase = if t.state.in_relax_phase() { "relaxed" } else { "projected" };
        let report = t.train_epoch(&data)?;
        // Distance between the forward weights and the pure projection of
        // the shadow weights; shrinks as lambda grows, zero after cutoff.
        let mut max_gap = 0.0_f64;
        for p in t.state.params.iter().filter(|p| p.quantize) {
            let proj = robuq::quant::project(t.state.scheme, &p.shadow);
            max_gap = max_gap.max(p.quantized.max_abs_diff(&proj.u));
        }
        println!(
            "{:>5} | {:>11.4} | {:>9} | {:>17.6} | {}",
            report.epoch,
            report.lambda,
            phase,
            max_gap,
            t.state.on_grid()
        );
    }
    assert!(t.state.on_grid(), "weights must be on the grid after the cutoff");

    // The blend weight grows by a fixed factor once per optimizer step
    // during the relaxed phase and then freezes.
    let steps_per_epoch = 60usize.div_ceil(t.cfg.batch);
    let relax_steps = (t.cfg.cutoff_epoch * steps_per_epoch) as i32;
    let expected = t.state.rho.powi(relax_steps);
    println!(
        "lambda {:.6} equals rho^(relax steps) = {:.4}^{} = {:.6}",
        t.state.lambda, t.state.rho, relax_steps, expected
    );
    assert!((t.state.lambda - expected).abs() < 1e-9);
    Ok(())
}
