//! Outer-minimization loops: clean training, adversarial training, and the
//! two QUB schedules (static and decreasing), with heavy-ball SGD, milestone
//! LR decay, best-checkpoint selection, and per-epoch metric records.
//!
//! Objective per batch, by mode:
//!
//! * `clean` — mean cross-entropy at the clean inputs;
//! * `at` — mean cross-entropy at the attacked inputs;
//! * `qub_static` — mean quadratic-upper-bound loss (see [`crate::loss`]);
//! * `qub_decreasing` — mean of `(1−λₜ)·QUB + λₜ·CE(z_adv)` with
//!   `λₜ = t/T` for 1-based epoch `t`, constant within an epoch.
//!
//! The attack always runs on a frozen snapshot of the current parameters and
//! never participates in the training tape; the loop re-runs its own forward
//! pass on the attacked inputs. Every batch builds both the clean and (for
//! attack modes) adversarial forward passes on one tape, so the objective
//! graphs differ only in the loss head — this is what makes the schedule
//! endpoints collapse bit-exactly onto their simpler counterparts (λ = 1
//! reproduces `at`; a zero-perturbation attack reproduces `clean`).
//!
//! Randomness is compartmentalized per purpose so streams never interfere:
//! the train/validation split uses a seed derived from `(plan.seed, 1)`; the
//! per-epoch batch shuffle uses `plan.seed XOR epoch`; the attack at
//! `(epoch, batch)` uses a seed derived from `(plan.seed, 2, epoch, batch)`;
//! the early-stop probe at `epoch` uses `(plan.seed, 3, epoch)`. Identical
//! plans therefore produce bit-identical parameters and records (modulo
//! `wall_seconds`).

use std::path::Path;
use std::time::Instant;

use crate::attack::{evaluate_robust_accuracy, run_attack, standard_accuracy, AttackSpec};
use crate::data::{Batch, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::loss::{taped_blended_rows, taped_qub_rows, BlendWeight};
use crate::model::Mlp;
use crate::rng::derive_seed;
use crate::tensor::Tape;

/// Fraction of the dataset used for training; the rest is validation.
pub const TRAIN_FRAC: f64 = 0.9;

/// The 90/10 train/validation split a plan induces on a dataset. Exposed so
/// post-training evaluation can target exactly the held-out samples.
pub fn plan_split(dataset: &Dataset, plan: &TrainPlan) -> Result<(Dataset, Dataset)> {
    dataset.split(SplitSpec {
        train_frac: TRAIN_FRAC,
        shuffle_seed: derive_seed(plan.seed, &[1]),
    })
}

/// Which objective the loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Clean,
    At,
    QubStatic,
    QubDecreasing,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Clean => "clean",
            LossMode::At => "at",
            LossMode::QubStatic => "qub_static",
            LossMode::QubDecreasing => "qub_decreasing",
        }
    }

    pub fn needs_attack(self) -> bool {
        !matches!(self, LossMode::Clean)
    }
}

/// Checkpoint-selection policy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EarlyStop {
    /// Return the final model.
    #[default]
    None,
    /// Probe validation robust accuracy with a PGD attack every
    /// `every_n_epochs` epochs and return the checkpoint with the highest
    /// probed value. Training still runs all epochs.
    BestPgdVal { steps: usize, every_n_epochs: usize },
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    /// Required by every mode except `clean`.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)` pairs; the learning rate at epoch `e` is the base
    /// rate times the product of factors of all milestones with
    /// `milestone_epoch ≤ e`. Epochs must be strictly increasing.
    #[serde(default)]
    pub lr_milestones: Vec<(usize, f64)>,
    #[serde(default)]
    pub early_stop: EarlyStop,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("training needs at least 1 epoch"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.loss_mode.needs_attack() && self.attack.is_none() {
            return Err(Error::config(format!(
                "loss mode {} requires an attack",
                self.loss_mode.name()
            )));
        }
        if let Some(spec) = &self.attack {
            spec.validate()?;
        }
        let mut prev = 0usize;
        for &(epoch, factor) in &self.lr_milestones {
            if epoch <= prev {
                return Err(Error::config(format!(
                    "lr milestones must have strictly increasing epochs (offender: {epoch})"
                )));
            }
            if !factor.is_finite() || factor <= 0.0 {
                return Err(Error::config(format!(
                    "lr milestone factor must be finite and > 0, got {factor}"
                )));
            }
            prev = epoch;
        }
        if let EarlyStop::BestPgdVal {
            steps,
            every_n_epochs,
        } = self.early_stop
        {
            if steps < 1 || every_n_epochs < 1 {
                return Err(Error::config(
                    "best_pgd_val needs steps >= 1 and every_n_epochs >= 1",
                ));
            }
            if self.attack.is_none() {
                return Err(Error::config(
                    "best_pgd_val early stopping needs an attack to take its budget from",
                ));
            }
        }
        Ok(())
    }
}

/// One completed epoch's metrics. `robust_val_acc` is set only on epochs
/// where the early-stop policy probed the validation set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda_t: f64,
    pub mean_train_loss: f64,
    pub clean_val_acc: f64,
    pub robust_val_acc: Option<f64>,
    pub wall_seconds: f64,
}

/// Serialize records as JSON Lines: one object per epoch, keys in the fixed
/// order `epoch, lambda_t, mean_train_loss, clean_val_acc, robust_val_acc,
/// wall_seconds`.
pub fn write_epoch_records(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Blend weight `λₜ = t/T` for 1-based epoch `t` of `total`.
pub fn lambda_schedule(t: usize, total: usize) -> Result<f64> {
    if total < 1 || t < 1 || t > total {
        return Err(Error::contract(format!(
            "epoch {t} outside the valid range [1, {total}]"
        )));
    }
    Ok(t as f64 / total as f64)
}

/// Learning rate in effect at a 1-based epoch: base rate times the factors
/// of every milestone whose epoch has been reached.
pub fn lr_at(epoch: usize, plan: &TrainPlan) -> f64 {
    let mut lr = plan.lr;
    for &(milestone, factor) in &plan.lr_milestones {
        if milestone <= epoch {
            lr *= factor;
        }
    }
    lr
}

/// Momentum buffers, aligned with the parameter order
/// `weights[0], biases[0], weights[1], biases[1], …`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &Mlp) -> Self {
        let velocity = model
            .weights
            .iter()
            .zip(&model.biases)
            .flat_map(|(w, b)| [vec![0.0; w.numel()], vec![0.0; b.numel()]])
            .collect();
        SgdState { velocity }
    }
}

/// Heavy-ball SGD step: `v ← momentum·v + (g + weight_decay·θ)` then
/// `θ ← θ − lr·v`. Weight decay is folded into the gradient, not decoupled.
pub fn sgd_step(
    model: &mut Mlp,
    grads: &[Vec<f64>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n_layers = model.weights.len();
    if grads.len() != 2 * n_layers || state.velocity.len() != 2 * n_layers {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            left: vec![2 * n_layers],
            right: vec![grads.len(), state.velocity.len()],
        });
    }
    for layer in 0..n_layers {
        for (slot, param) in [
            (2 * layer, &mut model.weights[layer]),
            (2 * layer + 1, &mut model.biases[layer]),
        ] {
            let g = &grads[slot];
            let v = &mut state.velocity[slot];
            if g.len() != param.numel() || v.len() != param.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: vec![param.numel()],
                    right: vec![g.len(), v.len()],
                });
            }
            for i in 0..g.len() {
                let update = momentum * v[i] + (g[i] + weight_decay * param.data[i]);
                v[i] = update;
                let new = param.data[i] - lr * update;
                if !new.is_finite() {
                    return Err(Error::NonFinite {
                        op: "sgd_step",
                        index: i,
                        value: new,
                    });
                }
                param.data[i] = new;
            }
        }
    }
    Ok(())
}

/// The PGD spec used by `best_pgd_val` probing at a given epoch: budget and
/// box from the plan's attack, step size `alpha` (falling back to ε/4),
/// single restart, probe-specific derived seed.
pub fn early_stop_probe_spec(plan: &TrainPlan, epoch: usize) -> Result<AttackSpec> {
    let (steps, base) = match (plan.early_stop, &plan.attack) {
        (EarlyStop::BestPgdVal { steps, .. }, Some(base)) => (steps, base),
        _ => {
            return Err(Error::config(
                "probe spec requested without best_pgd_val early stopping and an attack",
            ))
        }
    };
    let alpha = base.alpha.unwrap_or(base.epsilon / 4.0);
    let mut spec = AttackSpec::pgd(base.epsilon, alpha.max(f64::MIN_POSITIVE), steps, 1, 0);
    spec.clip_input = base.clip_input;
    spec.seed = derive_seed(plan.seed, &[3, epoch as u64]);
    Ok(spec)
}

fn at_coords(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| Error::contract(format!("training aborted at epoch {epoch}, batch {batch}: {e}"))
}

/// One optimizer step on one batch. Returns the sum of per-sample losses.
fn train_batch(
    model: &mut Mlp,
    state: &mut SgdState,
    batch: &Batch,
    plan: &TrainPlan,
    lambda: f64,
    lr: f64,
    epoch: usize,
    batch_idx: usize,
) -> Result<f64> {
    let wrap = at_coords(epoch, batch_idx);
    let b = batch.labels.len();

    // Inner maximization on a frozen parameter snapshot, outside the tape.
    let x_adv = if plan.loss_mode.needs_attack() {
        let mut spec = plan.attack.clone().expect("validated");
        spec.seed = derive_seed(plan.seed, &[2, epoch as u64, batch_idx as u64]);
        Some(run_attack(model, &batch.x, &batch.labels, &spec).map_err(&wrap)?.x_adv)
    } else {
        None
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let xc = tape.constant(&batch.x.data, &batch.x.shape)?;
    let z_clean = bound.forward(&mut tape, xc).map_err(&wrap)?;
    let rows = match plan.loss_mode {
        LossMode::Clean => tape.cross_entropy_rows(z_clean, &batch.labels).map_err(&wrap)?,
        LossMode::At | LossMode::QubStatic | LossMode::QubDecreasing => {
            let adv = x_adv.as_ref().expect("attack modes produced x_adv");
            let xa = tape.constant(&adv.data, &adv.shape)?;
            let z_adv = bound.forward(&mut tape, xa).map_err(&wrap)?;
            match plan.loss_mode {
                LossMode::At => tape.cross_entropy_rows(z_adv, &batch.labels).map_err(&wrap)?,
                LossMode::QubStatic => {
                    taped_qub_rows(&mut tape, z_clean, z_adv, &batch.labels).map_err(&wrap)?
                }
                LossMode::QubDecreasing => {
                    let qub = taped_qub_rows(&mut tape, z_clean, z_adv, &batch.labels)
                        .map_err(&wrap)?;
                    let at = tape
                        .cross_entropy_rows(z_adv, &batch.labels)
                        .map_err(&wrap)?;
                    taped_blended_rows(&mut tape, qub, at, BlendWeight::new(lambda)?)
                        .map_err(&wrap)?
                }
                LossMode::Clean => unreachable!(),
            }
        }
    };
    let total = tape.sum(rows).map_err(&wrap)?;
    let loss = tape.scale(total, 1.0 / b as f64).map_err(&wrap)?;
    let loss_sum = tape.value(total)?[0];
    tape.backward(loss).map_err(&wrap)?;

    let mut grads = Vec::with_capacity(2 * bound.weights.len());
    for (&w, &bias) in bound.weights.iter().zip(&bound.biases) {
        grads.push(tape.grad(w)?.to_vec());
        grads.push(tape.grad(bias)?.to_vec());
    }
    sgd_step(model, &grads, state, lr, plan.momentum, plan.weight_decay).map_err(&wrap)?;
    Ok(loss_sum)
}

/// Train `model` on a 90/10 split of `dataset` according to `plan`.
///
/// Returns the trained model — the final one, or the best-probed checkpoint
/// under `best_pgd_val` — along with one record per completed epoch.
pub fn train(model: Mlp, dataset: &Dataset, plan: &TrainPlan) -> Result<(Mlp, Vec<EpochRecord>)> {
    plan.validate()?;
    if model.config.input_dim() != dataset.dim() {
        return Err(Error::config(format!(
            "model expects {} input features but the dataset has {}",
            model.config.input_dim(),
            dataset.dim()
        )));
    }
    if model.config.output_dim() != dataset.n_classes {
        return Err(Error::config(format!(
            "model emits {} logits but the dataset has {} classes",
            model.config.output_dim(),
            dataset.n_classes
        )));
    }

    let (train_ds, val_ds) = plan_split(dataset, plan)?;

    let mut model = model;
    let mut state = SgdState::new(&model);
    let mut records = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, Mlp)> = None;

    for epoch in 1..=plan.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, plan);
        let lambda = match plan.loss_mode {
            LossMode::QubDecreasing => lambda_schedule(epoch, plan.epochs)?,
            _ => 0.0,
        };

        let mut loss_sum = 0.0;
        let batches = train_ds.batches(plan.batch_size, plan.seed ^ epoch as u64)?;
        for (batch_idx, batch) in batches.iter().enumerate() {
            loss_sum += train_batch(
                &mut model, &mut state, batch, plan, lambda, lr, epoch, batch_idx,
            )?;
        }

        let clean_val_acc = standard_accuracy(&model, &val_ds.x, &val_ds.labels)?;
        let mut robust_val_acc = None;
        if let EarlyStop::BestPgdVal { every_n_epochs, .. } = plan.early_stop {
            if epoch % every_n_epochs == 0 {
                let spec = early_stop_probe_spec(plan, epoch)?;
                let ra = evaluate_robust_accuracy(&model, &val_ds.x, &val_ds.labels, &spec)?;
                robust_val_acc = Some(ra);
                if best.as_ref().map_or(true, |(b, _)| ra > *b) {
                    best = Some((ra, model.clone()));
                }
            }
        }

        records.push(EpochRecord {
            epoch,
            lambda_t: lambda,
            mean_train_loss: loss_sum / train_ds.len() as f64,
            clean_val_acc,
            robust_val_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let chosen = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok((chosen, records))
}
