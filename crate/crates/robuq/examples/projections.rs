//! Projects a weight vector onto binary, ternary, and 4-bit grids and
//! shows that the exact ternary projection beats (or ties) the threshold
//! heuristic in squared distance, verified against brute force.

use rand::Rng;
use robuq::quant::{
    project_4bit_traced, project_binary, project_ternary, project_ternary_threshold,
    tensor_on_grid, Scheme,
};
use robuq::rng::{derive_rng, DOMAIN_INIT};
use robuq::tensor::Tensor;

fn dist2(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Best ternary point by trying every support size and sign pattern via
/// sorted magnitudes (the optimum keeps the k largest magnitudes).
fn ternary_brute_force(w: &Tensor) -> f64 {
    let mut mags: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = mags.iter().map(|m| m * m).sum();
    let mut best = total; // empty support: u = 0
    let mut prefix = 0.0;
    for (k, m) in mags.iter().enumerate() {
        prefix += m;
        let s = prefix / (k + 1) as f64;
        // distance^2 = total - 2 s prefix + (k+1) s^2
        let d = total - 2.0 * s * prefix + (k + 1) as f64 * s * s;
        if d < best {
            best = d;
        }
    }
    best
}

fn main() -> robuq::Result<()> {
    let mut rng = derive_rng(11, DOMAIN_INIT, 0);
    let w = Tensor::new(
        vec![12],
        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    println!("weights: {:?}", w.data().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());

    let b = project_binary(&w);
    println!(
        "binary:  scale {:.4}, distance^2 {:.4}, on grid: {}",
        b.scale,
        dist2(&w, &b.u),
        tensor_on_grid(Scheme::Binary, b.scale, &b.u)
    );

    let t = project_ternary(&w);
    let th = project_ternary_threshold(&w);
    let brute = ternary_brute_force(&w);
    println!(
        "ternary exact:     scale {:.4}, distance^2 {:.6} (brute force best {:.6})",
        t.scale,
        dist2(&w, &t.u),
        brute
    );
    println!(
        "ternary threshold: scale {:.4}, distance^2 {:.6}",
        th.scale,
        dist2(&w, &th.u)
    );
    assert!((dist2(&w, &t.u) - brute).abs() < 1e-12, "exact projection must match brute force");
    assert!(dist2(&w, &t.u) <= dist2(&w, &th.u) + 1e-12, "exact must not lose to the heuristic");

    let (f, trace) = project_4bit_traced(&w);
    println!(
        "4-bit:   scale {:.4}, distance^2 {:.6}, per-round residual: {:?}",
        f.scale,
        dist2(&w, &f.u),
        trace.iter().map(|v| (v * 1e6).round() / 1e6).collect::<Vec<_>>()
    );
    // The alternating refinement never increases the residual.
    assert!(trace.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    assert!(dist2(&w, &f.u) <= dist2(&w, &project_binary(&w).u) + 1e-12);
    println!("all projections verified");
    Ok(())
}
