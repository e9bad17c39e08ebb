//! Weight quantization by projection, and the relaxed training step that
//! anneals float weights onto a discrete grid.
//!
//! Each layer carries one positive scale `s`. Grids: binary `{±s}`, ternary
//! `{0, ±s}`, four-bit `{0, ±s·k/7, k = 1..7}` (15 symmetric levels).
//! Training keeps full-precision shadow weights `w` beside grid-constrained
//! weights `u`; forward and backward passes see only `u`, and the gradient
//! step moves `w`. Before the cutoff epoch, `u` is the blend
//! `(λ·proj(w) + w)/(λ + 1)` with `λ` multiplied by `ρ` every mini-batch;
//! from the cutoff on, `u = proj(w)` exactly.

use crate::error::{Error, Result};
use crate::tape::sign0;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// No quantization; `u` tracks `w`.
    Float,
    Binary,
    /// Exact closest-point ternary projection.
    Ternary,
    /// Ternary via the 0.7·mean|w| threshold heuristic.
    TernaryThreshold,
    FourBit,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s {
            "none" | "float" => Ok(Scheme::Float),
            "binary" => Ok(Scheme::Binary),
            "ternary" => Ok(Scheme::Ternary),
            "ternary-threshold" => Ok(Scheme::TernaryThreshold),
            "4bit" | "four-bit" => Ok(Scheme::FourBit),
            other => Err(Error::Config(format!("unknown quantization scheme '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Float => "none",
            Scheme::Binary => "binary",
            Scheme::Ternary => "ternary",
            Scheme::TernaryThreshold => "ternary-threshold",
            Scheme::FourBit => "4bit",
        }
    }
}

/// Result of projecting one layer onto its grid.
#[derive(Clone, Debug)]
pub struct Projection {
    pub u: Tensor,
    pub scale: f64,
    /// True when the input was all zeros and no positive scale exists.
    pub degenerate: bool,
}

/// Closest point of the form `s·sign(w)` with `s = mean|w|`; zeros map to
/// `+s` so the output takes exactly two values.
pub fn project_binary(w: &Tensor) -> Projection {
    let s = w.mean_abs();
    if s == 0.0 {
        return Projection {
            u: Tensor::zeros(w.shape()),
            scale: 0.0,
            degenerate: true,
        };
    }
    let u = w.map(|v| if v < 0.0 { -s } else { s });
    Projection {
        u,
        scale: s,
        degenerate: false,
    }
}

/// Exact closest point on `{0, ±s}ⁿ`, minimizing over both the support and
/// the scale.
///
/// For a fixed support of size `k` the best choice keeps the `k` largest
/// magnitudes with `s` equal to their mean, and the squared residual is
/// `Σw² − (prefix_k)²/k`. Scanning `k` over the magnitude-sorted prefix
/// maximizes `(prefix_k)²/k`; ties resolve to the smaller support.
pub fn project_ternary(w: &Tensor) -> Projection {
    let n = w.numel();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ma = w.data()[a].abs();
        let mb = w.data()[b].abs();
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut best_k = 0usize;
    let mut best_obj = 0.0_f64;
    let mut prefix = 0.0_f64;
    for (rank, &i) in order.iter().enumerate() {
        prefix += w.data()[i].abs();
        let k = rank + 1;
        let obj = prefix * prefix / k as f64;
        if obj > best_obj {
            best_obj = obj;
            best_k = k;
        }
    }
    if best_k == 0 {
        return Projection {
            u: Tensor::zeros(w.shape()),
            scale: 0.0,
            degenerate: true,
        };
    }
    let sum: f64 = order[..best_k].iter().map(|&i| w.data()[i].abs()).sum();
    let s = sum / best_k as f64;
    let mut u = vec![0.0; n];
    for &i in &order[..best_k] {
        u[i] = s * sign0(w.data()[i]);
    }
    Projection {
        u: Tensor::new(w.shape().to_vec(), u).expect("projection shape"),
        scale: s,
        degenerate: false,
    }
}

/// Ternary projection by thresholding: keep entries with `|w| > 0.7·mean|w|`
/// and set them to `±s` with `s` the mean magnitude of the kept entries.
pub fn project_ternary_threshold(w: &Tensor) -> Projection {
    let delta = 0.7 * w.mean_abs();
    let kept: Vec<f64> = w.data().iter().filter(|v| v.abs() > delta).map(|v| v.abs()).collect();
    if kept.is_empty() {
        return Projection {
            u: Tensor::zeros(w.shape()),
            scale: 0.0,
            degenerate: true,
        };
    }
    let s = kept.iter().sum::<f64>() / kept.len() as f64;
    let u = w.map(|v| if v.abs() > delta { s * sign0(v) } else { 0.0 });
    Projection {
        u,
        scale: s,
        degenerate: false,
    }
}

/// Alternating minimization onto 15 symmetric levels `{0, ±s·k/7}`.
///
/// Starts from `s = max|w|/7` scaled so the top level covers the largest
/// weight, then alternates level assignment and the least-squares optimal
/// scale for a fixed number of rounds.
pub fn project_4bit(w: &Tensor) -> Projection {
    project_4bit_traced(w).0
}

/// `project_4bit` plus the squared residual after each round, for
/// monotonicity checks.
pub fn project_4bit_traced(w: &Tensor) -> (Projection, Vec<f64>) {
    let top = w.max_abs();
    if top == 0.0 {
        return (
            Projection {
                u: Tensor::zeros(w.shape()),
                scale: 0.0,
                degenerate: true,
            },
            Vec::new(),
        );
    }
    let n = w.numel();
    let mut s = top;
    let mut levels = vec![0i32; n];
    let mut trace = Vec::with_capacity(10);
    for _ in 0..10 {
        let step = s / 7.0;
        let mut dot_wk = 0.0;
        let mut dot_kk = 0.0;
        for (i, &v) in w.data().iter().enumerate() {
            let k = (v / step).round().clamp(-7.0, 7.0);
            levels[i] = k as i32;
            dot_wk += v * k;
            dot_kk += k * k;
        }
        if dot_kk > 0.0 {
            s = 7.0 * dot_wk / dot_kk;
        }
        let mut resid = 0.0;
        for (i, &v) in w.data().iter().enumerate() {
            let d = v - s * levels[i] as f64 / 7.0;
            resid += d * d;
        }
        trace.push(resid);
    }
    let mut u = vec![0.0; n];
    for (i, &k) in levels.iter().enumerate() {
        u[i] = s * k as f64 / 7.0;
    }
    (
        Projection {
            u: Tensor::new(w.shape().to_vec(), u).expect("projection shape"),
            scale: s,
            degenerate: false,
        },
        trace,
    )
}

/// Projection for a scheme; `Float` is the identity with no grid.
pub fn project(scheme: Scheme, w: &Tensor) -> Projection {
    match scheme {
        Scheme::Float => Projection {
            u: w.clone(),
            scale: 0.0,
            degenerate: false,
        },
        Scheme::Binary => project_binary(w),
        Scheme::Ternary => project_ternary(w),
        Scheme::TernaryThreshold => project_ternary_threshold(w),
        Scheme::FourBit => project_4bit(w),
    }
}

/// `(λ·proj + w)/(λ + 1)`: the pull of `w` toward its projection,
/// identity at `λ = 0`, converging to `proj` as `λ → ∞`.
pub fn relax_blend(w: &Tensor, proj: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("relax_blend requires λ ≥ 0, got {lambda}")));
    }
    w.zip_map(proj, |wv, pv| (lambda * pv + wv) / (lambda + 1.0))
}

/// Exact membership of `v` in the scheme's grid at scale `s`, using the
/// same arithmetic that constructed the grid values.
pub fn grid_contains(scheme: Scheme, scale: f64, v: f64) -> bool {
    match scheme {
        Scheme::Float => true,
        Scheme::Binary => {
            if scale == 0.0 {
                v == 0.0
            } else {
                v == scale || v == -scale
            }
        }
        Scheme::Ternary | Scheme::TernaryThreshold => v == 0.0 || v == scale || v == -scale,
        Scheme::FourBit => (-7..=7).any(|k| v == scale * k as f64 / 7.0),
    }
}

pub fn tensor_on_grid(scheme: Scheme, scale: f64, t: &Tensor) -> bool {
    t.data().iter().all(|&v| grid_contains(scheme, scale, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_weight_matrix(&self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

/// One trainable tensor with its shadow value, grid value, and momentum
/// buffer.
#[derive(Clone, Debug)]
pub struct ParamState {
    pub name: String,
    pub kind: ParamKind,
    /// Full-precision weights updated by gradient steps.
    pub shadow: Tensor,
    /// Weights used by every forward pass; equals `shadow` for
    /// non-quantized parameters.
    pub quantized: Tensor,
    pub scale: f64,
    pub momentum: Tensor,
    pub quantize: bool,
}

/// All trainable parameters plus the relaxation schedule state.
#[derive(Clone, Debug)]
pub struct QuantState {
    pub params: Vec<ParamState>,
    pub scheme: Scheme,
    pub lambda: f64,
    pub rho: f64,
    /// First epoch of the pure-projection regime.
    pub cutoff_epoch: usize,
    pub epoch: usize,
}

impl QuantState {
    /// Wrap named parameters. Only conv and linear weight matrices are
    /// quantized; `exempt_first` skips the first conv weight, `exempt_last`
    /// the last linear weight. Initially `u = w` everywhere.
    pub fn new(
        params: Vec<(String, ParamKind, Tensor)>,
        scheme: Scheme,
        rho: f64,
        cutoff_epoch: usize,
        exempt_first: bool,
        exempt_last: bool,
    ) -> Result<QuantState> {
        let first_conv = params.iter().position(|(_, k, _)| *k == ParamKind::ConvWeight);
        let last_linear = params.iter().rposition(|(_, k, _)| *k == ParamKind::LinearWeight);
        let flags = params
            .iter()
            .enumerate()
            .map(|(i, (_, kind, _))| {
                let mut q = scheme != Scheme::Float && kind.is_weight_matrix();
                if exempt_first && Some(i) == first_conv {
                    q = false;
                }
                if exempt_last && Some(i) == last_linear {
                    q = false;
                }
                q
            })
            .collect();
        QuantState::new_with(params, scheme, rho, cutoff_epoch, flags)
    }

    /// Constructor with an explicit per-parameter quantize flag (same order
    /// as `params`).
    pub fn new_with(
        params: Vec<(String, ParamKind, Tensor)>,
        scheme: Scheme,
        rho: f64,
        cutoff_epoch: usize,
        quantize_flags: Vec<bool>,
    ) -> Result<QuantState> {
        if rho <= 1.0 {
            return Err(Error::Config(format!("growth rate must exceed 1, got {rho}")));
        }
        if quantize_flags.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} quantize flags for {} parameters",
                quantize_flags.len(),
                params.len()
            )));
        }
        let states = params
            .into_iter()
            .zip(quantize_flags)
            .map(|((name, kind, t), quantize)| {
                let momentum = Tensor::zeros(t.shape());
                ParamState {
                    name,
                    kind,
                    quantized: t.clone(),
                    shadow: t,
                    scale: 0.0,
                    momentum,
                    quantize: quantize && scheme != Scheme::Float && kind.is_weight_matrix(),
                }
            })
            .collect();
        Ok(QuantState {
            params: states,
            scheme,
            lambda: 1.0,
            rho,
            cutoff_epoch,
            epoch: 0,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// True when the current epoch uses the blended (relaxed) update rather
    /// than the pure projection.
    pub fn in_relax_phase(&self) -> bool {
        self.scheme != Scheme::Float && self.epoch < self.cutoff_epoch
    }

    /// One mini-batch update. Gradients must be listed in parameter order
    /// and are taken at `u`; the step moves `w` by SGD with momentum and
    /// weight decay, then refreshes `u` from `w` (blend before the cutoff
    /// epoch, projection after). A non-finite gradient rejects the whole
    /// step and leaves the state untouched.
    pub fn step(&mut self, grads: &[Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.shape() != p.shadow.shape() {
                return Err(Error::shape(
                    "quant step",
                    format!("gradient {:?} for parameter {} {:?}", g.shape(), p.name, p.shadow.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for parameter {}", p.name)));
            }
        }
        let relax = self.in_relax_phase();
        for (p, g) in self.params.iter_mut().zip(grads) {
            let w = p.shadow.data_mut();
            let m = p.momentum.data_mut();
            let gd = g.data();
            for i in 0..w.len() {
                let step = gd[i] + weight_decay * w[i];
                m[i] = momentum * m[i] + step;
                w[i] -= lr * m[i];
            }
            if p.quantize {
                let proj = project(self.scheme, &p.shadow);
                p.scale = proj.scale;
                p.quantized = if relax {
                    relax_blend(&p.shadow, &proj.u, self.lambda)?
                } else {
                    proj.u
                };
            } else {
                p.quantized = p.shadow.clone();
            }
        }
        if relax {
            self.lambda *= self.rho;
        }
        Ok(())
    }

    /// Re-derive every `u` from the current shadow weights without moving
    /// them (used when loading checkpoints or entering a new phase).
    pub fn refresh_quantized(&mut self) -> Result<()> {
        let relax = self.in_relax_phase();
        for p in self.params.iter_mut() {
            if p.quantize {
                let proj = project(self.scheme, &p.shadow);
                p.scale = proj.scale;
                p.quantized = if relax {
                    relax_blend(&p.shadow, &proj.u, self.lambda)?
                } else {
                    proj.u
                };
            } else {
                p.quantized = p.shadow.clone();
            }
        }
        Ok(())
    }

    /// All quantized parameters sit exactly on their layer grids.
    pub fn on_grid(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.quantize)
            .all(|p| tensor_on_grid(self.scheme, p.scale, &p.quantized))
    }

    pub fn param(&self, name: &str) -> Option<&ParamState> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn quantized_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.quantized).collect()
    }
}
