//! Checks reverse-mode gradients against central finite differences,
//! first on a composed scalar expression, then through a full network
//! forward pass with batch norm, residual blocks, and cross-entropy.

use rand::Rng;
use robuq::nets::{Mode, Network, NetworkSpec};
use robuq::quant::{QuantState, Scheme};
use robuq::rng::{derive_rng, DOMAIN_INIT};
use robuq::tape::grad_check;
use robuq::tensor::Tensor;

fn main() -> robuq::Result<()> {
    let mut rng = derive_rng(7, DOMAIN_INIT, 100);

    // A hand-composed expression: mean(relu(a*b) + tanh(a)).
    let a = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let b = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let err = grad_check(&[a, b], 1e-4, |tape, ids| {
        let prod = tape.mul(ids[0], ids[1])?;
        let r = tape.relu(prod);
        let t = tape.tanh(ids[0]);
        let s = tape.add(r, t)?;
        Ok(tape.mean(s))
    })?;
    println!("composed expression: max normalized gradient error {err:.3e}");
    assert!(err < 1e-4);

    // The same comparison through an entire conv net with a loss on top.
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
    let (net, params) = robuq::nets::build_network(&spec, 7)?;
    let state = robuq::nets::build_quant_state(params, Scheme::Float, 1.02, 100, true, true)?;
    let x = Tensor::new(
        vec![2, 1, 6, 6],
        (0..72).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let labels = vec![0usize, 2];

    let err = network_grad_check(&net, &state, &x, &labels, 1e-4)?;
    println!("full network loss:   max normalized gradient error {err:.3e}");
    assert!(err < 1e-4, "gradient mismatch {err}");
    println!("both checks below 1e-4: analytic gradients agree with finite differences");
    Ok(())
}

/// Analytic gradients from one backward sweep versus numeric gradients
/// from re-running the forward pass at nudged parameter values.
fn network_grad_check(
    net: &Network,
    state: &QuantState,
    x: &Tensor,
    labels: &[usize],
    h: f64,
) -> robuq::Result<f64> {
    let net = net.clone();
    let graph = net.forward_build(state, x, Mode::Eval, None)?;
    let mut tape = graph.tape;
    let loss = tape.softmax_cross_entropy(graph.logits, labels)?;
    let grads = tape.backward_wrt(loss, &graph.param_ids)?;

    let eval = |st: &QuantState| -> robuq::Result<f64> {
        let g = net.clone().forward_build(st, x, Mode::Eval, None)?;
        let mut t = g.tape;
        let l = t.softmax_cross_entropy(g.logits, labels)?;
        Ok(t.value(l).scalar_value())
    };

    let mut worst = 0.0_f64;
    for (pi, id) in graph.param_ids.iter().enumerate() {
        let ga = grads.grad_or_zeros(&tape, *id);
        for ei in 0..state.params[pi].quantized.numel() {
            let mut plus = state.clone();
            plus.params[pi].quantized.data_mut()[ei] += h;
            let mut minus = state.clone();
            minus.params[pi].quantized.data_mut()[ei] -= h;
            let gn = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let gav = ga.data()[ei];
            let e = (gav - gn).abs() / gav.abs().max(gn.abs()).max(1.0);
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
