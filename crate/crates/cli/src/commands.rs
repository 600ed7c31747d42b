//! The four subcommands. Each takes the already-merged config, performs all
//! validation before any compute, writes its artifacts under `out_dir`, and
//! returns `Ok(())` or a [`CliError`] that main maps to an exit code.
//!
//! Output layout (per command):
//! - `train`:   `checkpoint.rkpt`, `epochs.jsonl`, `effective-config.toml`
//! - `eval`:    `eval.json` (also printed), `effective-config.toml`
//! - `analyze`: `landscape.csv` / `eigen.json` / `sparsity.json`,
//!   `effective-config.toml`
//! - `verify`:  stdout only, nothing written
//!
//! No command writes to its input checkpoint; eval and analyze open it
//! read-only and never re-save it.

use std::path::{Path, PathBuf};

use robustkit::analysis;
use robustkit::attack::{evaluate_robust_accuracy, standard_accuracy};
use robustkit::train::{train, write_epoch_records};
use robustkit::verify::run_all_with_quad_coeff;
use robustkit::{Dataset, Mlp};
use serde::Serialize;

use crate::config::{one_line, RunConfig};
use crate::CliError;

/// Which analysis artifact `analyze` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Landscape,
    Eigen,
    Sparsity,
}

impl std::str::FromStr for AnalyzeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "landscape" => Ok(AnalyzeKind::Landscape),
            "eigen" => Ok(AnalyzeKind::Eigen),
            "sparsity" => Ok(AnalyzeKind::Sparsity),
            other => Err(format!(
                "unknown analysis `{other}` (expected landscape|eigen|sparsity)"
            )),
        }
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.out_dir.clone().ok_or_else(|| {
        CliError::Config("out_dir is required (set it in the config or pass --out)".into())
    })?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Serializes the post-override config tree next to the other artifacts so
/// every output directory records exactly what produced it.
fn write_effective_config(dir: &Path, table: &toml::Table) -> Result<(), CliError> {
    let text = toml::to_string_pretty(table)
        .map_err(|e| CliError::Runtime(format!("cannot render effective config: {e}")))?;
    std::fs::write(dir.join("effective-config.toml"), text)
        .map_err(|e| CliError::Runtime(format!("cannot write effective config: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_checkpoint(config: &RunConfig) -> Result<Mlp, CliError> {
    let path = config.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config(
            "checkpoint is required (set it in the config or pass --checkpoint)".into(),
        )
    })?;
    Mlp::load(path).map_err(CliError::config_from)
}

fn check_dataset_fits(model: &Mlp, dataset: &Dataset) -> Result<(), CliError> {
    let (din, dout) = (model.config.input_dim(), model.config.output_dim());
    if dataset.dim() != din || dataset.n_classes != dout {
        return Err(CliError::Config(format!(
            "model expects {din}-dim inputs over {dout} classes but data provides \
             {}-dim inputs over {} classes",
            dataset.dim(),
            dataset.n_classes
        )));
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────────

pub fn cmd_train(config: &RunConfig, table: &toml::Table) -> Result<(), CliError> {
    let train_cfg = config
        .train
        .as_ref()
        .ok_or_else(|| CliError::Config("train requires a [train] section".into()))?;
    let model_cfg = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("train requires a [model] section".into()))?;
    if model_cfg.activation.as_deref() == Some("tanh") {
        return Err(CliError::Config(
            "model.activation tanh is not trainable through this command: \
             checkpoint format v1 stores relu networks only"
                .into(),
        ));
    }
    let needs_attack = !matches!(train_cfg.loss_mode()?, robustkit::LossMode::Clean);
    // The loop re-derives per-batch attack seeds from the plan seed, so the
    // spec's own seed field is inert here.
    let attack = match (&config.attack, needs_attack) {
        (Some(a), _) => Some(a.build(0)?),
        (None, false) => None,
        (None, true) => {
            return Err(CliError::Config(format!(
                "loss_mode {} requires an [attack] section",
                train_cfg.loss_mode
            )))
        }
    };

    let dir = out_dir(config)?;
    let dataset = config.data.build(config.seed)?;
    let model = model_cfg.build(config.seed)?;
    check_dataset_fits(&model, &dataset)?;
    let plan = train_cfg.plan(attack, config.seed)?;
    write_effective_config(&dir, table)?;

    let (trained, records) = train(model, &dataset, &plan).map_err(CliError::runtime_from)?;
    for r in &records {
        println!(
            "epoch {}/{} lambda={:.4} loss={:.6} clean_val_acc={:.4}",
            r.epoch, plan.epochs, r.lambda_t, r.mean_train_loss, r.clean_val_acc
        );
    }
    let ckpt = dir.join("checkpoint.rkpt");
    trained.save(&ckpt).map_err(CliError::runtime_from)?;
    write_epoch_records(dir.join("epochs.jsonl"), &records).map_err(CliError::runtime_from)?;
    println!(
        "wrote {} and {}",
        ckpt.display(),
        dir.join("epochs.jsonl").display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct AttackOutcome {
    name: String,
    family: String,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    restarts: usize,
    robust_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    n_samples: usize,
    standard_accuracy: f64,
    attacks: Vec<AttackOutcome>,
}

pub fn cmd_eval(config: &RunConfig, table: &toml::Table) -> Result<(), CliError> {
    let eval_cfg = config
        .eval
        .as_ref()
        .ok_or_else(|| CliError::Config("eval requires an [eval] section".into()))?;
    if eval_cfg.attacks.is_empty() {
        return Err(CliError::Config("eval.attacks must name at least one attack".into()));
    }
    // Expand all attacks before any compute so a typo in the last name fails
    // the run before the first forward pass.
    let dir = out_dir(config)?;
    let model = load_checkpoint(config)?;
    let dataset = config.data.build(config.seed)?;
    check_dataset_fits(&model, &dataset)?;
    let specs: Vec<_> = eval_cfg
        .attacks
        .iter()
        .enumerate()
        .map(|(k, name)| {
            eval_cfg
                .expand(name, config.seed, k, dataset.feature_box)
                .map(|s| (name.clone(), s))
        })
        .collect::<Result<_, _>>()?;
    write_effective_config(&dir, table)?;

    let sa = standard_accuracy(&model, &dataset.x, &dataset.labels)
        .map_err(CliError::runtime_from)?;
    let mut outcomes = Vec::with_capacity(specs.len());
    for (name, spec) in specs {
        let ra = evaluate_robust_accuracy(&model, &dataset.x, &dataset.labels, &spec)
            .map_err(CliError::runtime_from)?;
        outcomes.push(AttackOutcome {
            name,
            family: spec.family.name().to_string(),
            epsilon: spec.epsilon,
            alpha: spec.effective_alpha(),
            steps: spec.steps,
            restarts: spec.restarts,
            robust_accuracy: ra,
        });
    }
    let output = EvalOutput {
        n_samples: dataset.len(),
        standard_accuracy: sa,
        attacks: outcomes,
    };
    write_json(&dir.join("eval.json"), &output)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&output)
            .map_err(|e| CliError::Runtime(format!("cannot render eval output: {e}")))?
    );
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────────

pub fn cmd_analyze(
    config: &RunConfig,
    table: &toml::Table,
    kind: AnalyzeKind,
) -> Result<(), CliError> {
    let analysis_cfg = config
        .analysis
        .as_ref()
        .ok_or_else(|| CliError::Config("analyze requires an [analysis] section".into()))?;
    let dir = out_dir(config)?;
    let model = load_checkpoint(config)?;
    let dataset = config.data.build(config.seed)?;
    check_dataset_fits(&model, &dataset)?;
    write_effective_config(&dir, table)?;

    match kind {
        AnalyzeKind::Landscape => {
            let lc = analysis_cfg.landscape.as_ref().ok_or_else(|| {
                CliError::Config("analyze landscape requires an [analysis.landscape] section".into())
            })?;
            if lc.sample_index >= dataset.len() {
                return Err(CliError::Config(format!(
                    "analysis.landscape.sample_index {} outside dataset of {} samples",
                    lc.sample_index,
                    dataset.len()
                )));
            }
            let d = dataset.dim();
            let row = &dataset.x.data[lc.sample_index * d..(lc.sample_index + 1) * d];
            let grid = analysis::landscape(
                &model,
                row,
                dataset.labels[lc.sample_index],
                lc.eps,
                lc.resolution,
                lc.seed(config.seed),
            )
            .map_err(CliError::runtime_from)?;
            let path = dir.join("landscape.csv");
            grid.write_csv(&path).map_err(CliError::runtime_from)?;
            println!(
                "wrote {} ({}x{} grid{})",
                path.display(),
                grid.resolution,
                grid.resolution,
                if grid.zero_gradient {
                    ", zero clean gradient"
                } else {
                    ""
                }
            );
        }
        AnalyzeKind::Eigen => {
            let ec = analysis_cfg.eigen.as_ref().ok_or_else(|| {
                CliError::Config("analyze eigen requires an [analysis.eigen] section".into())
            })?;
            let report = analysis::mean_dominant_eigenvalue(
                &model,
                &dataset,
                ec.n_samples,
                &ec.options(config.seed),
            )
            .map_err(CliError::runtime_from)?;
            let path = dir.join("eigen.json");
            write_json(&path, &report)?;
            println!(
                "wrote {} (n={}, converged={}, mean={})",
                path.display(),
                report.n_samples,
                report.n_converged,
                report
                    .mean
                    .map(|m| format!("{m:.6}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        AnalyzeKind::Sparsity => {
            let sc = analysis_cfg.sparsity.as_ref().ok_or_else(|| {
                CliError::Config("analyze sparsity requires an [analysis.sparsity] section".into())
            })?;
            let reports = analysis::sparsity_sweep(
                &model,
                &dataset,
                &sc.eps,
                &sc.options(config.seed),
            )
            .map_err(CliError::runtime_from)?;
            let path = dir.join("sparsity.json");
            write_json(&path, &reports)?;
            for r in &reports {
                println!(
                    "eps={:.6}: attackable={} mean_distance={}",
                    r.eps,
                    r.n_attackable,
                    r.mean
                        .map(|m| format!("{m:.6}"))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

// ── verify ──────────────────────────────────────────────────────────────────

pub fn cmd_verify(seed: u64, quad_coeff: f64) -> Result<(), CliError> {
    let report = run_all_with_quad_coeff(seed, quad_coeff);
    for r in &report.results {
        println!("{}", r.render());
    }
    if report.all_passed() {
        Ok(())
    } else {
        let first = report
            .results
            .iter()
            .find(|r| !r.passed)
            .expect("at least one failure");
        Err(CliError::Verify(format!(
            "property {} failed: {}",
            first.name,
            one_line(&first.detail)
        )))
    }
}
