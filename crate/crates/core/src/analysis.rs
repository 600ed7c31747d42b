//! Flatness and sparsity diagnostics over trained models.
//!
//! Three read-only probes of the input-space loss surface:
//!
//! * [`landscape`] — a square grid of loss values around one sample, spanned
//!   by the signed-gradient direction `d_g` and a seeded random-sign
//!   direction `d_r`, both with unit ∞-norm so the axes are in raw ε units;
//! * [`dominant_input_eigenvalue`] / [`mean_dominant_eigenvalue`] — the
//!   dominant eigenvalue of the loss Hessian with respect to the *input*,
//!   estimated matrix-free by power iteration over finite-difference
//!   Hessian-vector products of the first-order input gradient;
//! * [`sparsity`] / [`sparsity_sweep`] — the distance to the nearest
//!   attackable point inside an L∞ ball, estimated by bisecting along a
//!   PGD-derived ray plus seeded random-sign rays.
//!
//! All diagnostics take `&Mlp` and never mutate parameters. Everything is
//! deterministic given its seed; a sweep reuses one set of ray directions
//! across budgets (computed at the largest ε and rescaled), so a singleton
//! sweep is bit-identical to a single call.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{argmax_tie_low, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_label, input_gradient};
use crate::model::Mlp;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{sign, Tensor};

/// Loss surface around one sample in the plane spanned by the gradient-sign
/// direction and a random-sign direction. `values[i][j]` is the loss at
/// `x + (i·step)·d_g + (j·step)·d_r` with `step = eps/(resolution−1)`;
/// `correct[i][j]` records whether the prediction there still matches the
/// label (argmax, ties toward the lowest index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub eps: f64,
    /// Signed input gradient at the clean sample; entries in {−1, 0, +1}.
    pub d_g: Vec<f64>,
    /// Seeded random-sign direction; entries in {−1, +1}.
    pub d_r: Vec<f64>,
    /// True when the clean input gradient vanished, leaving `d_g` all zero.
    pub zero_gradient: bool,
    pub values: Vec<Vec<f64>>,
    pub correct: Vec<Vec<bool>>,
}

impl LandscapeGrid {
    /// Grid spacing along both axes.
    pub fn step(&self) -> f64 {
        self.eps / (self.resolution - 1) as f64
    }

    /// CSV rendering: header `i,j,offset_g,offset_r,loss,correct`, one row
    /// per grid point in i-major order.
    pub fn to_csv(&self) -> String {
        let step = self.step();
        let mut out = String::from("i,j,offset_g,offset_r,loss,correct\n");
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    i,
                    j,
                    i as f64 * step,
                    j as f64 * step,
                    self.values[i][j],
                    self.correct[i][j]
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Loss grid around a single sample. The origin cell reproduces the clean
/// loss exactly; a zero clean gradient degrades `d_g` to all zeros and sets
/// the `zero_gradient` flag instead of failing.
pub fn landscape(
    model: &Mlp,
    x_row: &[f64],
    label: usize,
    eps: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::config(format!(
            "landscape eps must be finite and > 0, got {eps}"
        )));
    }
    if resolution < 2 {
        return Err(Error::config("landscape resolution must be at least 2"));
    }
    let d = x_row.len();
    if d != model.config.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "landscape",
            left: vec![model.config.input_dim()],
            right: vec![d],
        });
    }
    if label >= model.config.output_dim() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            model.config.output_dim()
        )));
    }

    let x = Tensor::new(vec![1, d], x_row.to_vec())?;
    let (_, grad) = input_gradient(model, &x, &[label])?;
    let d_g: Vec<f64> = grad.data.iter().map(|&g| sign(g)).collect();
    let zero_gradient = d_g.iter().all(|&v| v == 0.0);

    let mut rng = rng_from_seed(seed);
    let d_r: Vec<f64> = (0..d)
        .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 })
        .collect();

    // One batched forward over all resolution² points.
    let step = eps / (resolution - 1) as f64;
    let mut points = Vec::with_capacity(resolution * resolution * d);
    for i in 0..resolution {
        for j in 0..resolution {
            let (og, or) = (i as f64 * step, j as f64 * step);
            for k in 0..d {
                points.push(x_row[k] + og * d_g[k] + or * d_r[k]);
            }
        }
    }
    let logits = model.forward(&Tensor::new(vec![resolution * resolution, d], points)?)?;
    let c = model.config.output_dim();

    let mut values = vec![vec![0.0; resolution]; resolution];
    let mut correct = vec![vec![false; resolution]; resolution];
    for i in 0..resolution {
        for j in 0..resolution {
            let row = &logits.data[(i * resolution + j) * c..(i * resolution + j + 1) * c];
            values[i][j] = cross_entropy_label(row, label);
            correct[i][j] = argmax_tie_low(row) == label;
        }
    }

    Ok(LandscapeGrid {
        resolution,
        eps,
        d_g,
        d_r,
        zero_gradient,
        values,
        correct,
    })
}

/// Knobs for the power-iteration eigenvalue estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    pub max_iters: usize,
    /// Convergence threshold on the residual ‖Hv − λv‖ (v kept unit-norm).
    pub tol: f64,
    /// Finite-difference step; the probe displacement is `fd_step/‖v‖`.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            max_iters: 100,
            tol: 1e-6,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl EigenOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::config("power iteration needs max_iters >= 1"));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::config(format!(
                "power iteration tol must be finite and > 0, got {}",
                self.tol
            )));
        }
        if !self.fd_step.is_finite() || self.fd_step <= 0.0 {
            return Err(Error::config(format!(
                "finite-difference step must be finite and > 0, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Result of one power-iteration run. `lambda` is the signed Rayleigh
/// quotient at the last iterate, so a dominant *negative* curvature is
/// reported negative rather than folded into a magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub lambda: f64,
    /// ‖Hv − λv‖ at the reported iterate (v unit-norm).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The Hessian-vector product vanished exactly; `lambda` is 0.
    pub zero_hvp: bool,
    /// Largest observed drop of the Rayleigh quotient between consecutive
    /// iterations — should stay at the finite-difference noise floor for
    /// positive-semidefinite surfaces.
    pub max_rayleigh_decrease: f64,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite-difference Hessian-vector product of a gradient field:
/// `Hv ≈ [g(center + h·v) − g(center − h·v)] / (2h)` with `h = fd_step/‖v‖`.
pub fn fd_hvp(
    center: &[f64],
    grad_fn: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    v: &[f64],
    fd_step: f64,
) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(Error::contract("hvp direction must be non-zero"));
    }
    let h = fd_step / norm;
    let plus: Vec<f64> = center.iter().zip(v).map(|(c, d)| c + h * d).collect();
    let minus: Vec<f64> = center.iter().zip(v).map(|(c, d)| c - h * d).collect();
    let gp = grad_fn(&plus)?;
    let gm = grad_fn(&minus)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// Power iteration over a matrix-free symmetric operator given only the
/// gradient field it is the Jacobian of. Starts from a seeded random unit
/// vector; each iteration evaluates two gradients. Non-convergence within
/// `max_iters` is reported, not an error.
pub fn power_iteration(
    center: &[f64],
    grad_fn: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    opts: &EigenOptions,
) -> Result<EigenEstimate> {
    opts.validate()?;
    let d = center.len();
    if d == 0 {
        return Err(Error::contract("power iteration needs a non-empty input"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut v: Vec<f64> = (0..d)
        .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
        .collect();
    let norm = l2_norm(&v);
    if norm == 0.0 {
        return Err(Error::contract("degenerate power-iteration start vector"));
    }
    v.iter_mut().for_each(|x| *x /= norm);

    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let mut prev_lambda: Option<f64> = None;
    let mut max_drop = 0.0f64;

    for k in 1..=opts.max_iters {
        let w = fd_hvp(center, grad_fn, &v, opts.fd_step)?;
        let wnorm = l2_norm(&w);
        if wnorm == 0.0 {
            return Ok(EigenEstimate {
                lambda: 0.0,
                residual: 0.0,
                iterations: k,
                converged: true,
                zero_hvp: true,
                max_rayleigh_decrease: max_drop,
            });
        }
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        residual = v
            .iter()
            .zip(&w)
            .map(|(vi, wi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if let Some(prev) = prev_lambda {
            max_drop = max_drop.max(prev - lambda);
        }
        prev_lambda = Some(lambda);
        if residual <= opts.tol {
            return Ok(EigenEstimate {
                lambda,
                residual,
                iterations: k,
                converged: true,
                zero_hvp: false,
                max_rayleigh_decrease: max_drop,
            });
        }
        v = w.iter().map(|x| x / wnorm).collect();
    }

    Ok(EigenEstimate {
        lambda,
        residual,
        iterations: opts.max_iters,
        converged: false,
        zero_hvp: false,
        max_rayleigh_decrease: max_drop,
    })
}

/// Dominant eigenvalue of the input-space Hessian of the loss at one sample.
pub fn dominant_input_eigenvalue(
    model: &Mlp,
    x_row: &[f64],
    label: usize,
    opts: &EigenOptions,
) -> Result<EigenEstimate> {
    let d = x_row.len();
    if d != model.config.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "dominant_input_eigenvalue",
            left: vec![model.config.input_dim()],
            right: vec![d],
        });
    }
    let mut grad_fn = |p: &[f64]| -> Result<Vec<f64>> {
        let x = Tensor::new(vec![1, d], p.to_vec())?;
        let (_, g) = input_gradient(model, &x, &[label])?;
        Ok(g.data)
    };
    power_iteration(x_row, &mut grad_fn, opts)
}

/// Per-sample eigenvalue estimates over the head of a dataset, plus the mean
/// over converged samples. Sample `i` uses a start vector seeded from
/// `(options.seed, i)` so runs are reproducible yet samples independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub n_samples: usize,
    pub estimates: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub n_converged: usize,
    /// Converged estimates below −1e-6 (curvature that is genuinely
    /// negative rather than finite-difference noise).
    pub n_negative: usize,
    /// Mean over converged samples; absent when none converged.
    pub mean: Option<f64>,
    pub options: EigenOptions,
}

pub fn mean_dominant_eigenvalue(
    model: &Mlp,
    dataset: &Dataset,
    n_samples: usize,
    opts: &EigenOptions,
) -> Result<EigenReport> {
    opts.validate()?;
    if n_samples < 1 || n_samples > dataset.len() {
        return Err(Error::contract(format!(
            "n_samples {} outside [1, {}]",
            n_samples,
            dataset.len()
        )));
    }
    let d = dataset.dim();
    // Samples are independent read-only computations; run them in parallel
    // and collect in index order so the aggregate is thread-count-invariant.
    let per_sample: Result<Vec<EigenEstimate>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let row = &dataset.x.data[i * d..(i + 1) * d];
            let sample_opts = EigenOptions {
                seed: derive_seed(opts.seed, &[i as u64]),
                ..*opts
            };
            dominant_input_eigenvalue(model, row, dataset.labels[i], &sample_opts)
        })
        .collect();
    let per_sample = per_sample?;
    let mut estimates = Vec::with_capacity(n_samples);
    let mut residuals = Vec::with_capacity(n_samples);
    let mut iterations = Vec::with_capacity(n_samples);
    let mut converged = Vec::with_capacity(n_samples);
    for est in &per_sample {
        estimates.push(est.lambda);
        residuals.push(est.residual);
        iterations.push(est.iterations);
        converged.push(est.converged);
    }
    let kept: Vec<f64> = estimates
        .iter()
        .zip(&converged)
        .filter(|(_, &c)| c)
        .map(|(&e, _)| e)
        .collect();
    let n_converged = kept.len();
    let n_negative = kept.iter().filter(|&&e| e < -1e-6).count();
    let mean = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    };
    Ok(EigenReport {
        n_samples,
        estimates,
        residuals,
        iterations,
        converged,
        n_converged,
        n_negative,
        mean,
        options: *opts,
    })
}

/// Knobs for the nearest-attackable-point search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityOptions {
    /// Number of candidate rays per sample: one PGD-derived ray plus
    /// `directions − 1` random-sign rays.
    pub directions: usize,
    /// Bisection count; the scale resolution is 2^−iters of the budget.
    pub line_search_iters: usize,
    pub seed: u64,
}

impl Default for SparsityOptions {
    fn default() -> Self {
        SparsityOptions {
            directions: 8,
            line_search_iters: 20,
            seed: 0,
        }
    }
}

/// Distances to the nearest attackable point along candidate rays, in raw
/// ∞-norm units. `distances[i]` is `None` when no ray flips the prediction
/// at full budget (the sample is unattackable at this ε and excluded from
/// the mean); cleanly misclassified samples score 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub eps: f64,
    pub directions: usize,
    pub line_search_iters: usize,
    pub seed: u64,
    pub distances: Vec<Option<f64>>,
    /// Mean over attackable samples; absent when none are attackable.
    pub mean: Option<f64>,
    pub n_attackable: usize,
    pub n_unattackable: usize,
    pub n_clean_misclassified: usize,
}

fn predict_row(model: &Mlp, row: &[f64]) -> Result<usize> {
    let logits = model.forward(&Tensor::new(vec![1, row.len()], row.to_vec())?)?;
    Ok(argmax_tie_low(&logits.data))
}

/// Smallest misclassifying scale along `x + s·delta`, `s ∈ (0, 1]`, by
/// bisection — or `None` when even `s = 1` keeps the prediction correct.
fn ray_flip_scale(
    model: &Mlp,
    x_row: &[f64],
    label: usize,
    delta: &[f64],
    iters: usize,
) -> Result<Option<f64>> {
    let probe = |s: f64| -> Result<bool> {
        let point: Vec<f64> = x_row.iter().zip(delta).map(|(x, d)| x + s * d).collect();
        Ok(predict_row(model, &point)? != label)
    };
    if !probe(1.0)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Unit-∞-norm ray directions for one correctly classified sample: the PGD
/// perturbation direction (when non-zero) plus seeded random-sign rays.
fn sample_rays(
    model: &Mlp,
    x_row: &[f64],
    label: usize,
    eps_max: f64,
    opts: &SparsityOptions,
    sample_idx: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = x_row.len();
    let mut rays = Vec::with_capacity(opts.directions);

    let spec = AttackSpec::pgd(
        eps_max,
        eps_max / 4.0,
        10,
        1,
        derive_seed(opts.seed, &[sample_idx as u64, 0]),
    );
    let x = Tensor::new(vec![1, d], x_row.to_vec())?;
    let res = crate::attack::pgd(model, &x, &[label], &spec)?;
    let max_abs = res.delta.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        rays.push(res.delta.data.iter().map(|v| v / max_abs).collect());
    }

    for k in 1..opts.directions {
        let mut rng = rng_from_seed(derive_seed(opts.seed, &[sample_idx as u64, k as u64]));
        rays.push(
            (0..d)
                .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1.0 } else { -1.0 })
                .collect(),
        );
    }
    Ok(rays)
}

/// Nearest-attackable-point distances at a single budget.
pub fn sparsity(
    model: &Mlp,
    dataset: &Dataset,
    eps: f64,
    opts: &SparsityOptions,
) -> Result<SparsityReport> {
    Ok(sparsity_sweep(model, dataset, &[eps], opts)?.pop().expect("one report per eps"))
}

/// Nearest-attackable-point distances at several budgets, sharing one set of
/// ray directions per sample (computed at the largest budget and rescaled),
/// so distances across budgets are directly comparable.
pub fn sparsity_sweep(
    model: &Mlp,
    dataset: &Dataset,
    eps_list: &[f64],
    opts: &SparsityOptions,
) -> Result<Vec<SparsityReport>> {
    if eps_list.is_empty() {
        return Err(Error::config("sparsity sweep needs at least one eps"));
    }
    for &eps in eps_list {
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::config(format!(
                "sparsity eps must be finite and > 0, got {eps}"
            )));
        }
    }
    if opts.directions < 1 {
        return Err(Error::config("sparsity needs at least one direction"));
    }
    if opts.line_search_iters < 1 {
        return Err(Error::config("sparsity needs at least one bisection step"));
    }
    if dataset.dim() != model.config.input_dim() || dataset.n_classes != model.config.output_dim()
    {
        return Err(Error::config(
            "sparsity model and dataset have mismatched shapes",
        ));
    }

    let eps_max = eps_list.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = dataset.len();
    let d = dataset.dim();
    let clean_pred = crate::attack::predict(model, &dataset.x)?;

    // Each sample is an independent read-only search; parallelize per sample
    // and transpose afterwards so per-ε vectors keep dataset order exactly.
    let per_sample: Result<Vec<Vec<Option<f64>>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &dataset.x.data[i * d..(i + 1) * d];
            let label = dataset.labels[i];
            if clean_pred[i] != label {
                return Ok(vec![Some(0.0); eps_list.len()]);
            }
            let rays = sample_rays(model, row, label, eps_max, opts, i)?;
            let mut row_dists = Vec::with_capacity(eps_list.len());
            for &eps in eps_list {
                let mut best: Option<f64> = None;
                for ray in &rays {
                    let delta: Vec<f64> = ray.iter().map(|u| eps * u).collect();
                    if let Some(s) =
                        ray_flip_scale(model, row, label, &delta, opts.line_search_iters)?
                    {
                        let dist = s * eps;
                        best = Some(best.map_or(dist, |b: f64| b.min(dist)));
                    }
                }
                row_dists.push(best);
            }
            Ok(row_dists)
        })
        .collect();
    let per_sample = per_sample?;

    // distances[e][i]
    let mut distances: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n); eps_list.len()];
    for row_dists in &per_sample {
        for (e, dist) in row_dists.iter().enumerate() {
            distances[e].push(*dist);
        }
    }

    let mut reports = Vec::with_capacity(eps_list.len());
    for (e, &eps) in eps_list.iter().enumerate() {
        let dist = std::mem::take(&mut distances[e]);
        let attackable: Vec<f64> = dist.iter().flatten().copied().collect();
        let n_attackable = attackable.len();
        let mean = if attackable.is_empty() {
            None
        } else {
            Some(attackable.iter().sum::<f64>() / attackable.len() as f64)
        };
        let n_clean_misclassified = (0..n).filter(|&i| clean_pred[i] != dataset.labels[i]).count();
        reports.push(SparsityReport {
            eps,
            directions: opts.directions,
            line_search_iters: opts.line_search_iters,
            seed: opts.seed,
            distances: dist,
            mean,
            n_attackable,
            n_unattackable: n - n_attackable,
            n_clean_misclassified,
        });
    }
    Ok(reports)
}
