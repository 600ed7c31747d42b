//! Cross-entropy machinery and the quadratic upper bound (QUB) objective.
//!
//! Everything here works on per-sample logit vectors. The central objects:
//!
//! * softmax cross-entropy `L(z) = −z_y + ln Σ exp(z_k)`, always evaluated
//!   in max-shifted form (never exponentiating raw logits);
//! * its closed-form logit gradient `ŷ − y` and Hessian `diag(ŷ) − ŷŷᵀ`;
//! * the norm chain `‖H‖₂ ≤ √(‖H‖₁‖H‖∞) = ‖H‖₁ = max_j 2ŷ_j(1−ŷ_j) ≤ ½`,
//!   which licenses a ¼-coefficient quadratic majorizer of the loss under
//!   logit perturbations;
//! * the QUB objective
//!   `L(z_clean) + (z_adv−z_clean)ᵀ(ŷ−y) + ¼‖z_adv−z_clean‖²`,
//!   an upper bound on `L(z_adv)` that needs no gradient evaluation at the
//!   perturbed point;
//! * the blend `(1−λ)·QUB + λ·L(z_adv)` used by the decreasing schedule.
//!
//! The gradient factor `ŷ − y` inside the QUB linear term is a constant: no
//! gradient flows through it when the objective is built on a tape. The ¼
//! coefficient is part of the bound's validity and is not tunable.
//!
//! The taped builders ([`taped_mean_ce`], [`taped_qub_rows`],
//! [`taped_blended_rows`]) evaluate, summand for summand, in the same order
//! as the pure functions, so a taped batch loss equals the mean of the pure
//! per-sample losses bit-for-bit.

use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::{log_sum_exp, softmax};

// ── Bundles and blend weights ───────────────────────────────────────────────

/// Everything needed to evaluate per-sample losses at one input: clean
/// logits, perturbed logits, the one-hot target, and the clean softmax.
#[derive(Debug, Clone)]
pub struct LogitBundle {
    pub z_clean: Vec<f64>,
    pub z_adv: Vec<f64>,
    /// One-hot target.
    pub y: Vec<f64>,
    /// `softmax(z_clean)`, cached at construction.
    pub y_hat: Vec<f64>,
    label: usize,
}

impl LogitBundle {
    pub fn new(z_clean: Vec<f64>, z_adv: Vec<f64>, label: usize) -> Result<Self> {
        let c = z_clean.len();
        if c < 2 {
            return Err(Error::contract(format!(
                "logit bundle needs at least 2 classes, got {c}"
            )));
        }
        if z_adv.len() != c {
            return Err(Error::ShapeMismatch {
                op: "logit_bundle",
                left: vec![c],
                right: vec![z_adv.len()],
            });
        }
        if label >= c {
            return Err(Error::contract(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        if z_clean.iter().chain(&z_adv).any(|v| !v.is_finite()) {
            return Err(Error::contract("logit bundle contains non-finite logits"));
        }
        let y_hat = softmax(&z_clean);
        let mut y = vec![0.0; c];
        y[label] = 1.0;
        Ok(LogitBundle {
            z_clean,
            z_adv,
            y,
            y_hat,
            label,
        })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn n_classes(&self) -> usize {
        self.z_clean.len()
    }
}

/// Blend weight λ ∈ [0, 1] between the QUB term and the plain adversarial
/// loss. Construction fails outside the closed interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::contract(format!(
                "blend weight must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(BlendWeight(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// ── Pure per-sample losses ──────────────────────────────────────────────────

fn validate_one_hot(y: &[f64], c: usize) -> Result<usize> {
    if y.len() != c {
        return Err(Error::ShapeMismatch {
            op: "one_hot",
            left: vec![c],
            right: vec![y.len()],
        });
    }
    let mut label = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if label.is_some() {
                return Err(Error::contract("malformed one-hot: multiple ones"));
            }
            label = Some(i);
        } else if v != 0.0 {
            return Err(Error::contract(format!(
                "malformed one-hot: entry {i} is {v}, expected 0 or 1"
            )));
        }
    }
    label.ok_or_else(|| Error::contract("malformed one-hot: no entry equals 1"))
}

/// Softmax cross-entropy `−z_y + ln Σ exp(z_k)` against a one-hot target.
/// Max-shifted, so valid for arbitrarily large logits; always ≥ 0.
pub fn cross_entropy(z: &[f64], y: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::contract("cross_entropy needs at least 2 classes"));
    }
    let label = validate_one_hot(y, z.len())?;
    Ok(cross_entropy_label(z, label))
}

/// Cross-entropy against an integer label (no one-hot validation).
/// Caller must guarantee `label < z.len()`.
pub fn cross_entropy_label(z: &[f64], label: usize) -> f64 {
    log_sum_exp(z) - z[label]
}

/// Closed-form gradient of the cross-entropy with respect to logits:
/// `ŷ − y`.
pub fn logit_gradient(y_hat: &[f64], y: &[f64]) -> Vec<f64> {
    y_hat.iter().zip(y).map(|(&p, &t)| p - t).collect()
}

/// [`logit_gradient`] evaluated at a bundle's clean logits.
pub fn ce_logit_gradient(bundle: &LogitBundle) -> Vec<f64> {
    logit_gradient(&bundle.y_hat, &bundle.y)
}

/// Closed-form Hessian of the cross-entropy with respect to logits:
/// `diag(ŷ) − ŷŷᵀ`, row-major `C×C`. Symmetric, PSD, rows sum to zero.
pub fn ce_logit_hessian(y_hat: &[f64]) -> Vec<f64> {
    let c = y_hat.len();
    let mut h = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let v = if i == j {
                y_hat[i] - y_hat[i] * y_hat[j]
            } else {
                -(y_hat[i] * y_hat[j])
            };
            h[i * c + j] = v;
        }
    }
    h
}

/// Norm bound for the logit Hessian: returns `(‖H‖₁, bound on ‖H‖₂)`.
///
/// Column `j` of `diag(ŷ) − ŷŷᵀ` has absolute sum `2ŷ_j(1−ŷ_j)`, so
/// `‖H‖₁ = max_j 2ŷ_j(1−ŷ_j) ≤ ½`, and by symmetry `‖H‖∞ = ‖H‖₁`, giving
/// `‖H‖₂ ≤ √(‖H‖₁‖H‖∞) = ‖H‖₁ ≤ ½` — the inequality behind the ¼
/// coefficient in [`qub_loss`].
pub fn hessian_norm_bound(y_hat: &[f64]) -> (f64, f64) {
    let l1 = y_hat
        .iter()
        .map(|&p| 2.0 * p * (1.0 - p))
        .fold(f64::NEG_INFINITY, f64::max);
    let linf = l1; // symmetric matrix
    (l1, (l1 * linf).sqrt())
}

/// The quadratic upper bound on the adversarial loss:
///
/// `L(z_clean) + (z_adv − z_clean)ᵀ(ŷ − y) + ¼‖z_adv − z_clean‖²`.
///
/// Guaranteed ≥ `L(z_adv)` because the logit Hessian's spectral norm never
/// exceeds ½. The coefficient ¼ is structural; see [`hessian_norm_bound`].
pub fn qub_loss(bundle: &LogitBundle) -> f64 {
    let ce = cross_entropy_label(&bundle.z_clean, bundle.label);
    let mut linear = 0.0;
    let mut quad = 0.0;
    for i in 0..bundle.n_classes() {
        let d = bundle.z_adv[i] - bundle.z_clean[i];
        linear += d * (bundle.y_hat[i] - bundle.y[i]);
        quad += d * d;
    }
    (ce + linear) + 0.25 * quad
}

/// Adversarial cross-entropy `L(z_adv)` for a bundle.
pub fn adv_loss(bundle: &LogitBundle) -> f64 {
    cross_entropy_label(&bundle.z_adv, bundle.label)
}

/// The schedule objective `(1−λ)·qub_loss + λ·L(z_adv)`.
///
/// λ = 0 is the pure QUB objective; λ = 1 equals the plain adversarial loss
/// bit-for-bit (the QUB term is multiplied by exactly 0.0).
pub fn blended_loss(bundle: &LogitBundle, lambda: BlendWeight) -> f64 {
    let l = lambda.value();
    (1.0 - l) * qub_loss(bundle) + l * adv_loss(bundle)
}

/// Midpoint-style convexity probe: checks
/// `L(λz₁ + (1−λ)z₂) ≤ λL(z₁) + (1−λ)L(z₂) + 1e-12`
/// for cross-entropy in logit space (true analytically; the slack absorbs
/// rounding).
pub fn check_ce_convexity(z1: &[f64], z2: &[f64], y: &[f64], lambda: f64) -> Result<bool> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch {
            op: "check_ce_convexity",
            left: vec![z1.len()],
            right: vec![z2.len()],
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!(
            "convexity probe weight must lie in [0,1], got {lambda}"
        )));
    }
    let mid: Vec<f64> = z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let lhs = cross_entropy(&mid, y)?;
    let rhs = lambda * cross_entropy(z1, y)? + (1.0 - lambda) * cross_entropy(z2, y)?;
    Ok(lhs <= rhs + 1e-12)
}

// ── Model-level helpers ─────────────────────────────────────────────────────

/// Forward-only per-sample cross-entropies `L(f(xᵢ), yᵢ)` for a batch.
pub fn per_sample_ce(model: &Mlp, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let z = model.forward(x)?;
    let c = z.cols();
    if labels.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            op: "per_sample_ce",
            left: vec![z.rows()],
            right: vec![labels.len()],
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= c {
                return Err(Error::contract(format!(
                    "label {label} out of range for {c} classes (row {i})"
                )));
            }
            Ok(cross_entropy_label(z.row(i), label))
        })
        .collect()
}

/// Per-sample cross-entropies and the input gradient `∂/∂x Σᵢ L(f(xᵢ), yᵢ)`
/// for a batch. Parameters are bound frozen, so only the input gradient is
/// computed. Row `i` of the returned tensor is `∇ₓ L(f(xᵢ), yᵢ)`.
pub fn input_gradient(model: &Mlp, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let xv = tape.leaf(&x.data, &x.shape, true)?;
    let z = bound.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy_rows(z, labels)?;
    let losses = tape.value(ce)?.to_vec();
    let total = tape.sum(ce)?;
    tape.backward(total)?;
    let grad = tape.grad(xv)?.to_vec();
    Ok((losses, Tensor::new(x.shape.clone(), grad)?))
}

/// Exact vs. chain-rule-approximated first-order term for a single sample:
///
/// * exact: `(f(x+δ) − f(x))ᵀ (ŷ − y)`
/// * approx: `δᵀ ∇ₓ L(f(x), y)`
///
/// For a twice-differentiable network the gap shrinks quadratically in
/// `‖δ‖`; for a single linear layer the two agree to rounding.
pub fn second_term_approximation_error(
    model: &Mlp,
    x: &[f64],
    label: usize,
    delta: &[f64],
) -> Result<(f64, f64)> {
    if x.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "second_term_approximation_error",
            left: vec![x.len()],
            right: vec![delta.len()],
        });
    }
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let z0 = model.forward(&xt)?;
    let xp: Vec<f64> = x.iter().zip(delta).map(|(&a, &d)| a + d).collect();
    let z1 = model.forward(&Tensor::new(vec![1, x.len()], xp)?)?;
    let y_hat = softmax(&z0.data);
    let mut exact = 0.0;
    for i in 0..z0.data.len() {
        let t = if i == label { 1.0 } else { 0.0 };
        exact += (z1.data[i] - z0.data[i]) * (y_hat[i] - t);
    }
    let (_, grad) = input_gradient(model, &xt, &[label])?;
    let approx: f64 = delta.iter().zip(&grad.data).map(|(&d, &g)| d * g).sum();
    Ok((exact, approx))
}

// ── Taped builders (training objectives) ────────────────────────────────────

/// `mean(ce_rows(z, labels))` as a scalar tape node.
pub fn taped_mean_ce(tape: &mut Tape, z: Var, labels: &[usize]) -> Result<Var> {
    let rows = tape.cross_entropy_rows(z, labels)?;
    taped_mean(tape, rows, labels.len())
}

/// Mean of a `[B]` vector of per-sample losses.
pub fn taped_mean(tape: &mut Tape, rows: Var, batch: usize) -> Result<Var> {
    let total = tape.sum(rows)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// Per-sample QUB rows on tape:
/// `ce(z_clean) + rowsum(diff ⊙ g) + ¼·rowsum(diff ⊙ diff)` with
/// `diff = z_adv − z_clean` and `g = softmax(z_clean) − y` entered as a
/// constant, so no gradient flows through the linear term's coefficient.
pub fn taped_qub_rows(tape: &mut Tape, z_clean: Var, z_adv: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(z_clean)?.to_vec();
    let (b, c) = match shape.as_slice() {
        [b, c] => (*b, *c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "taped_qub_rows",
                left: other.to_vec(),
                right: vec![],
            })
        }
    };
    // Detached linear-term coefficient, computed with the same softmax the
    // fused cross-entropy op uses internally.
    let zc = tape.value(z_clean)?.to_vec();
    let mut g = Vec::with_capacity(b * c);
    for (i, &label) in labels.iter().enumerate().take(b) {
        let probs = softmax(&zc[i * c..(i + 1) * c]);
        for (j, p) in probs.into_iter().enumerate() {
            g.push(p - if j == label { 1.0 } else { 0.0 });
        }
    }
    let ce = tape.cross_entropy_rows(z_clean, labels)?;
    let gconst = tape.constant(&g, &[b, c])?;
    let diff = tape.sub(z_adv, z_clean)?;
    let lin = tape.mul(diff, gconst)?;
    let lin_rows = tape.row_sum(lin)?;
    let sq = tape.mul(diff, diff)?;
    let sq_rows = tape.row_sum(sq)?;
    let quad_rows = tape.scale(sq_rows, 0.25)?;
    let partial = tape.add(ce, lin_rows)?;
    tape.add(partial, quad_rows)
}

/// Per-sample blend `(1−λ)·qub_rows + λ·at_rows`. At λ = 1 this equals
/// `at_rows` bit-for-bit; at λ = 0, `qub_rows`.
pub fn taped_blended_rows(
    tape: &mut Tape,
    qub_rows: Var,
    at_rows: Var,
    lambda: BlendWeight,
) -> Result<Var> {
    let l = lambda.value();
    let left = tape.scale(qub_rows, 1.0 - l)?;
    let right = tape.scale(at_rows, l)?;
    tape.add(left, right)
}

// ── Tests ───────────────────────────────────────────────────────────────────
