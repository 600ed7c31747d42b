//! L∞-bounded input perturbation generators and robust-accuracy evaluation.
//!
//! Four attack families, all maximizing cross-entropy inside (or, for
//! `n_fgsm`, near) an ∞-norm ball of radius ε around the clean input:
//!
//! * `fgsm` — single signed-gradient step of size ε from the clean input;
//! * `fgsm_rs` — uniform random start in the ε-ball, one signed step of
//!   size α, then projection back to the ε-ball;
//! * `n_fgsm` — uniform random start in the *scaled* ball of radius
//!   `noise_scale·ε`, one signed step of size α, and **no** projection —
//!   its defining feature; the result satisfies `‖δ‖∞ ≤ noise_scale·ε + α`;
//! * `pgd` — iterated signed steps with per-step projection of δ onto the
//!   ε-ball, multiple random restarts, keeping per sample the restart whose
//!   final iterate has the highest loss.
//!
//! Conventions, chosen once and relied on by tests:
//!
//! * `sign(0) = 0`: a coordinate with exactly zero gradient is left alone.
//! * A zero budget is legal and returns the clean input, so accuracy under
//!   an ε = 0 attack equals standard accuracy exactly.
//! * When a `clip_input` box is set, clipping happens after projection, and
//!   δ is recomputed as `x_adv − x` so `x_adv = x + delta` always holds.
//! * Attacks run on detached values — nothing here touches a training tape;
//!   callers re-run their own forward pass on `x_adv`.
//! * `queries` counts gradient evaluations per sample: 1 for the single-step
//!   families, `steps·restarts` for PGD.
//!
//! Every attack is a pure function of (model, inputs, labels, spec): the
//! same spec (including its seed) yields bit-identical perturbations.

use rand::distributions::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::loss::{input_gradient, per_sample_ce};
use crate::model::Mlp;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{sign, Tensor};

/// Attack family selector. Serialized names are the lowercase snake-case
/// forms used in config files: `fgsm`, `fgsm_rs`, `n_fgsm`, `pgd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    FgsmRs,
    NFgsm,
    Pgd,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::FgsmRs => "fgsm_rs",
            AttackFamily::NFgsm => "n_fgsm",
            AttackFamily::Pgd => "pgd",
        }
    }
}

fn default_noise_scale() -> f64 {
    2.0
}

fn default_steps() -> usize {
    1
}

fn default_restarts() -> usize {
    1
}

fn default_random_start() -> bool {
    true
}

/// Full description of one attack: family, budget, step size, iteration
/// structure, noise scale, optional input box, and RNG seed.
///
/// `alpha` resolves per family when left unset: FGSM ignores it (the single
/// step has size ε), FGSM-RS defaults to `1.25·ε`, N-FGSM defaults to `ε`,
/// and PGD requires it explicitly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// L∞ budget in input units. Zero is allowed (clean input).
    pub epsilon: f64,
    /// Step size; see type-level docs for per-family defaults.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Random-start radius multiplier, used only by `n_fgsm`.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// Whether PGD starts each restart uniformly inside the ε-ball
    /// (otherwise from the clean input).
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    /// Optional `(lo, hi)` input box; x_adv is clamped into it after
    /// projection and δ recomputed. Inputs must already lie inside.
    #[serde(default)]
    pub clip_input: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            alpha: None,
            steps: 1,
            restarts: 1,
            noise_scale: default_noise_scale(),
            random_start: true,
            clip_input: None,
            seed,
        }
    }

    pub fn fgsm_rs(epsilon: f64, alpha: Option<f64>, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::FgsmRs,
            alpha,
            ..AttackSpec::fgsm(epsilon, seed)
        }
    }

    pub fn n_fgsm(epsilon: f64, alpha: Option<f64>, noise_scale: f64, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::NFgsm,
            alpha,
            noise_scale,
            ..AttackSpec::fgsm(epsilon, seed)
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, restarts: usize, seed: u64) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            alpha: Some(alpha),
            steps,
            restarts,
            ..AttackSpec::fgsm(epsilon, seed)
        }
    }

    /// Step size after per-family default resolution.
    pub fn effective_alpha(&self) -> f64 {
        match self.family {
            AttackFamily::Fgsm => self.epsilon,
            AttackFamily::FgsmRs => self.alpha.unwrap_or(1.25 * self.epsilon),
            AttackFamily::NFgsm => self.alpha.unwrap_or(self.epsilon),
            AttackFamily::Pgd => self.alpha.unwrap_or(f64::NAN),
        }
    }

    /// The ∞-norm bound this attack promises for its perturbations.
    ///
    /// Projected families never exceed ε. `n_fgsm` deliberately skips the
    /// projection, so its worst case is the noise radius plus one signed
    /// step: `noise_scale·ε + α`.
    pub fn linf_bound(&self) -> f64 {
        match self.family {
            AttackFamily::Fgsm | AttackFamily::FgsmRs | AttackFamily::Pgd => self.epsilon,
            AttackFamily::NFgsm => self.noise_scale * self.epsilon + self.effective_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::config(format!(
                "attack budget must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::config(format!(
                    "attack step size must be finite and > 0, got {a}"
                )));
            }
        }
        if self.steps < 1 || self.restarts < 1 {
            return Err(Error::config(format!(
                "attack needs steps >= 1 and restarts >= 1, got steps={} restarts={}",
                self.steps, self.restarts
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::config(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        match self.family {
            AttackFamily::Pgd => {
                if self.alpha.is_none() {
                    return Err(Error::config("pgd requires an explicit step size alpha"));
                }
            }
            _ => {
                if self.steps != 1 {
                    return Err(Error::config(format!(
                        "{} is single-step; steps must be 1, got {}",
                        self.family.name(),
                        self.steps
                    )));
                }
                if self.restarts != 1 {
                    return Err(Error::config(format!(
                        "{} takes no restarts; restarts must be 1, got {}",
                        self.family.name(),
                        self.restarts
                    )));
                }
            }
        }
        if let Some((lo, hi)) = self.clip_input {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::config(format!(
                    "clip_input box must satisfy lo < hi with finite bounds, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one attack on a batch: the perturbed inputs, the perturbation
/// itself, per-sample cross-entropy at `x_adv`, and the number of gradient
/// evaluations spent per sample.
///
/// Without a clip box, `x_adv` is constructed literally as `x + delta`, so
/// the identity holds bit-for-bit and `‖delta‖∞ ≤ ε` exactly (projected
/// families). With a clip box, `x_adv` is clamped into the box and `delta`
/// recomputed as `x_adv − x`, so both the identity and the budget hold to
/// within one rounding (≤ 1e-12 at these scales).
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    pub final_loss: Vec<f64>,
    pub queries: usize,
}

/// Elementwise clamp of a perturbation to the `[−ε, +ε]` box. Idempotent,
/// per-coordinate non-expansive, identity on feasible inputs.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::config(format!(
            "projection radius must be finite and >= 0, got {epsilon}"
        )));
    }
    let data = delta.data.iter().map(|&v| v.clamp(-epsilon, epsilon)).collect();
    Tensor::new(delta.shape.clone(), data)
}

fn check_batch(x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<()> {
    spec.validate()?;
    if x.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "attack",
            left: x.shape.clone(),
            right: vec![0, 0],
        });
    }
    if labels.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "attack",
            left: vec![x.rows()],
            right: vec![labels.len()],
        });
    }
    if let Some((lo, hi)) = spec.clip_input {
        for (i, &v) in x.data.iter().enumerate() {
            if v < lo || v > hi {
                return Err(Error::contract(format!(
                    "input element {i} = {v} lies outside the clip box [{lo}, {hi}]"
                )));
            }
        }
    }
    Ok(())
}

/// Derive `x_adv = x + delta`; when a clip box is set, clamp `x_adv` into
/// it and recompute δ as the (rounded) difference.
fn finish(x: &Tensor, mut delta: Vec<f64>, spec: &AttackSpec) -> (Vec<f64>, Vec<f64>) {
    let mut x_adv: Vec<f64> = x.data.iter().zip(&delta).map(|(&c, &d)| c + d).collect();
    if let Some((lo, hi)) = spec.clip_input {
        for (v, (&c, d)) in x_adv.iter_mut().zip(x.data.iter().zip(&mut delta)) {
            *v = v.clamp(lo, hi);
            *d = *v - c;
        }
    }
    (x_adv, delta)
}

fn result_from(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    x_adv: Vec<f64>,
    delta: Vec<f64>,
    queries: usize,
) -> Result<AttackResult> {
    let x_adv = Tensor::new(x.shape.clone(), x_adv)?;
    let delta = Tensor::new(x.shape.clone(), delta)?;
    let final_loss = per_sample_ce(model, &x_adv, labels)?;
    Ok(AttackResult {
        x_adv,
        delta,
        final_loss,
        queries,
    })
}

/// Single signed-gradient step of size ε from the clean input:
/// `x_adv = x + ε·sign(∇ₓ L(f(x), y))`. One gradient evaluation.
pub fn fgsm(model: &Mlp, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    if spec.family != AttackFamily::Fgsm {
        return Err(Error::config("fgsm called with a non-fgsm spec"));
    }
    check_batch(x, labels, spec)?;
    let (_, grad) = input_gradient(model, x, labels)?;
    let delta: Vec<f64> = grad.data.iter().map(|&g| spec.epsilon * sign(g)).collect();
    let (x_adv, delta) = finish(x, delta, spec);
    result_from(model, x, labels, x_adv, delta, 1)
}

fn uniform_start(rng: &mut impl rand::Rng, n: usize, radius: f64) -> Vec<f64> {
    // new_inclusive tolerates a zero radius (degenerate interval).
    let dist = Uniform::new_inclusive(-radius, radius);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Random start uniform in the ε-ball, one signed step of size α
/// (default `1.25·ε`), then projection back to the ε-ball.
pub fn fgsm_rs(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.family != AttackFamily::FgsmRs {
        return Err(Error::config("fgsm_rs called with a non-fgsm_rs spec"));
    }
    check_batch(x, labels, spec)?;
    let alpha = spec.effective_alpha();
    let mut rng = rng_from_seed(spec.seed);
    let delta0 = uniform_start(&mut rng, x.numel(), spec.epsilon);

    let mut x0: Vec<f64> = x.data.iter().zip(&delta0).map(|(&xv, &d)| xv + d).collect();
    if let Some((lo, hi)) = spec.clip_input {
        for v in &mut x0 {
            *v = v.clamp(lo, hi);
        }
    }
    let x0 = Tensor::new(x.shape.clone(), x0)?;
    let (_, grad) = input_gradient(model, &x0, labels)?;
    let delta: Vec<f64> = x
        .data
        .iter()
        .zip(x0.data.iter().zip(&grad.data))
        .map(|(&xv, (&x0v, &g))| {
            let stepped = x0v + alpha * sign(g);
            (stepped - xv).clamp(-spec.epsilon, spec.epsilon)
        })
        .collect();
    let (x_adv, delta) = finish(x, delta, spec);
    result_from(model, x, labels, x_adv, delta, 1)
}

/// Random start uniform in the scaled ball of radius `noise_scale·ε`, one
/// signed step of size α (default ε), and no projection: the perturbation
/// may leave the ε-ball, bounded only by `noise_scale·ε + α`.
pub fn n_fgsm(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    if spec.family != AttackFamily::NFgsm {
        return Err(Error::config("n_fgsm called with a non-n_fgsm spec"));
    }
    check_batch(x, labels, spec)?;
    let alpha = spec.effective_alpha();
    let mut rng = rng_from_seed(spec.seed);
    let delta0 = uniform_start(&mut rng, x.numel(), spec.noise_scale * spec.epsilon);

    let mut x0: Vec<f64> = x.data.iter().zip(&delta0).map(|(&xv, &d)| xv + d).collect();
    if let Some((lo, hi)) = spec.clip_input {
        for v in &mut x0 {
            *v = v.clamp(lo, hi);
        }
    }
    let x0 = Tensor::new(x.shape.clone(), x0)?;
    let (_, grad) = input_gradient(model, &x0, labels)?;
    let delta: Vec<f64> = x
        .data
        .iter()
        .zip(x0.data.iter().zip(&grad.data))
        .map(|(&xv, (&x0v, &g))| (x0v + alpha * sign(g)) - xv)
        .collect();
    let (x_adv, delta) = finish(x, delta, spec);
    result_from(model, x, labels, x_adv, delta, 1)
}

/// PGD with per-restart final losses exposed, for auditing the keep-best
/// bookkeeping: returns the attack result plus, per restart, the per-sample
/// final losses of that restart's last iterate.
pub fn pgd_detailed(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<(AttackResult, Vec<Vec<f64>>)> {
    if spec.family != AttackFamily::Pgd {
        return Err(Error::config("pgd called with a non-pgd spec"));
    }
    check_batch(x, labels, spec)?;
    let alpha = spec.effective_alpha();
    let (b, d) = (x.rows(), x.cols());

    let mut best_loss = vec![f64::NEG_INFINITY; b];
    let mut best_adv = x.data.clone();
    let mut best_delta = vec![0.0; x.numel()];
    let mut restart_losses = Vec::with_capacity(spec.restarts);

    for restart in 0..spec.restarts {
        let mut rng = rng_from_seed(derive_seed(spec.seed, &[restart as u64]));
        let mut d_t = if spec.random_start {
            uniform_start(&mut rng, x.numel(), spec.epsilon)
        } else {
            vec![0.0; x.numel()]
        };
        let mut x_t: Vec<f64> = x.data.iter().zip(&d_t).map(|(&xv, &dv)| xv + dv).collect();
        if let Some((lo, hi)) = spec.clip_input {
            for (v, (&c, dv)) in x_t.iter_mut().zip(x.data.iter().zip(&mut d_t)) {
                *v = v.clamp(lo, hi);
                *dv = *v - c;
            }
        }

        for _ in 0..spec.steps {
            let xt = Tensor::new(x.shape.clone(), x_t.clone())?;
            let (_, grad) = input_gradient(model, &xt, labels)?;
            for i in 0..x.numel() {
                let stepped = x_t[i] + alpha * sign(grad.data[i]);
                let mut dv = (stepped - x.data[i]).clamp(-spec.epsilon, spec.epsilon);
                let mut v = x.data[i] + dv;
                if let Some((lo, hi)) = spec.clip_input {
                    v = v.clamp(lo, hi);
                    dv = v - x.data[i];
                }
                x_t[i] = v;
                d_t[i] = dv;
            }
        }

        let xt = Tensor::new(x.shape.clone(), x_t.clone())?;
        let losses = per_sample_ce(model, &xt, labels)?;
        for i in 0..b {
            // Strict comparison: ties keep the earlier restart.
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best_adv[i * d..(i + 1) * d].copy_from_slice(&x_t[i * d..(i + 1) * d]);
                best_delta[i * d..(i + 1) * d].copy_from_slice(&d_t[i * d..(i + 1) * d]);
            }
        }
        restart_losses.push(losses);
    }

    let result = AttackResult {
        x_adv: Tensor::new(x.shape.clone(), best_adv)?,
        delta: Tensor::new(x.shape.clone(), best_delta)?,
        final_loss: best_loss,
        queries: spec.steps * spec.restarts,
    };
    Ok((result, restart_losses))
}

/// Projected gradient descent: optional random start in the ε-ball, `steps`
/// signed steps of size α with per-step projection of δ, per-sample best
/// final loss kept across `restarts` restarts.
pub fn pgd(model: &Mlp, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<AttackResult> {
    pgd_detailed(model, x, labels, spec).map(|(r, _)| r)
}

/// Dispatch on `spec.family`.
pub fn run_attack(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackResult> {
    match spec.family {
        AttackFamily::Fgsm => fgsm(model, x, labels, spec),
        AttackFamily::FgsmRs => fgsm_rs(model, x, labels, spec),
        AttackFamily::NFgsm => n_fgsm(model, x, labels, spec),
        AttackFamily::Pgd => pgd(model, x, labels, spec),
    }
}

/// Index of the row maximum, ties broken toward the lowest index.
pub fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels under the argmax-lowest-index tie rule.
pub fn predict(model: &Mlp, x: &Tensor) -> Result<Vec<usize>> {
    let z = model.forward(x)?;
    Ok((0..z.rows()).map(|i| argmax_tie_low(z.row(i))).collect())
}

/// Fraction of samples classified correctly on clean inputs.
pub fn standard_accuracy(model: &Mlp, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy over an empty batch is undefined"));
    }
    let preds = predict(model, x)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of samples still classified correctly after attacking with
/// `spec`. With ε = 0 this equals [`standard_accuracy`] exactly.
pub fn evaluate_robust_accuracy(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("robust accuracy over an empty batch is undefined"));
    }
    let result = run_attack(model, x, labels, spec)?;
    let preds = predict(model, &result.x_adv)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
