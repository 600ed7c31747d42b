//! Run configuration: one TOML file per run, merged with command-line
//! overrides before anything is computed.
//!
//! The file carries up to five sections — `[data]`, `[model]`, `[train]`,
//! `[attack]`, `[eval]`, `[analysis]` — plus top-level `seed`, `out_dir` and
//! `checkpoint`. Each subcommand validates exactly the sections it needs and
//! rejects the run before any compute when one is missing or inconsistent.
//!
//! Seed discipline: the top-level `seed` is the only required randomness
//! input. Every derived purpose (dataset noise, model init, evaluation
//! attacks, analysis probes) uses its own fixed derivation lane so that runs
//! are reproducible and purposes never share a stream. Any lane can still be
//! pinned explicitly in its section.

use std::path::PathBuf;

use robustkit::analysis::{EigenOptions, SparsityOptions};
use robustkit::rng::derive_seed;
use robustkit::{Activation, AttackSpec, Dataset, EarlyStop, LossMode, Mlp, MlpConfig, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Derivation lanes for the purpose-specific seeds (top-level seed is the
/// parent). Lane values are arbitrary but frozen: changing them would change
/// every artifact produced from existing configs.
const LANE_MODEL_INIT: u64 = 10;
const LANE_EVAL_ATTACK: u64 = 20;
const LANE_EIGEN: u64 = 30;
const LANE_SPARSITY: u64 = 31;
const LANE_LANDSCAPE: u64 = 32;
const LANE_DATA: u64 = 40;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Model file consumed by `eval` and `analyze` (flag `--checkpoint`
    /// overrides).
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub analysis: Option<AnalysisConfig>,
}

// ── Data ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    TwoGaussians {
        n: usize,
        separation: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Spirals {
        n: usize,
        turns: f64,
        noise: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

impl DataConfig {
    pub fn build(&self, top_seed: u64) -> Result<Dataset, CliError> {
        let lane = derive_seed(top_seed, &[LANE_DATA]);
        match self {
            DataConfig::TwoGaussians {
                n,
                separation,
                sigma,
                seed,
            } => robustkit::data::gen_two_gaussians(*n, *separation, *sigma, seed.unwrap_or(lane)),
            DataConfig::Spirals {
                n,
                turns,
                noise,
                seed,
            } => robustkit::data::gen_spirals(*n, *turns, *noise, seed.unwrap_or(lane)),
            DataConfig::Idx {
                images,
                labels,
                limit,
            } => robustkit::data::load_idx(images, labels, *limit),
        }
        .map_err(CliError::config_from)
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    /// `relu` (default) or `tanh`. Note the v1 checkpoint format stores relu
    /// networks only, so `train` rejects `tanh` up front.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

impl ModelConfig {
    pub fn build(&self, top_seed: u64) -> Result<Mlp, CliError> {
        let activation = match self.activation.as_deref() {
            None | Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown activation `{other}` in field model.activation (expected relu|tanh)"
                )))
            }
        };
        let mut cfg = MlpConfig::new(
            self.layer_widths.clone(),
            self.init_seed
                .unwrap_or_else(|| derive_seed(top_seed, &[LANE_MODEL_INIT])),
        );
        cfg.activation = activation;
        Mlp::new(cfg).map_err(CliError::config_from)
    }
}

// ── Train ───────────────────────────────────────────────────────────────────

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: String,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_milestones: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStopConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub every_n_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn loss_mode(&self) -> Result<LossMode, CliError> {
        match self.loss_mode.as_str() {
            "clean" => Ok(LossMode::Clean),
            "at" => Ok(LossMode::At),
            "qub_static" => Ok(LossMode::QubStatic),
            "qub_decreasing" => Ok(LossMode::QubDecreasing),
            other => Err(CliError::Config(format!(
                "unknown loss_mode `{other}` in field train.loss_mode \
                 (expected clean|at|qub_static|qub_decreasing)"
            ))),
        }
    }

    fn early_stop(&self) -> Result<EarlyStop, CliError> {
        match &self.early_stop {
            None => Ok(EarlyStop::None),
            Some(es) => match es.kind.as_str() {
                "none" => Ok(EarlyStop::None),
                "best_pgd_val" => Ok(EarlyStop::BestPgdVal {
                    steps: es.steps.unwrap_or(10),
                    every_n_epochs: es.every_n_epochs.unwrap_or(1),
                }),
                other => Err(CliError::Config(format!(
                    "unknown kind `{other}` in field train.early_stop.kind \
                     (expected none|best_pgd_val)"
                ))),
            },
        }
    }

    pub fn plan(&self, attack: Option<AttackSpec>, seed: u64) -> Result<TrainPlan, CliError> {
        let plan = TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss_mode: self.loss_mode()?,
            attack,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_milestones: self.lr_milestones.clone(),
            early_stop: self.early_stop()?,
            seed,
        };
        plan.validate().map_err(CliError::config_from)?;
        Ok(plan)
    }
}

// ── Attack ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub family: String,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<(f64, f64)>,
}

impl AttackConfig {
    pub fn build(&self, seed: u64) -> Result<AttackSpec, CliError> {
        let reject = |field: &str| {
            Err(CliError::Config(format!(
                "attack.{field} does not apply to family `{}`",
                self.family
            )))
        };
        let mut spec = match self.family.as_str() {
            "fgsm" => {
                if self.alpha.is_some() {
                    return reject("alpha");
                }
                if self.steps.is_some() || self.restarts.is_some() {
                    return reject("steps/restarts");
                }
                if self.noise_scale.is_some() {
                    return reject("noise_scale");
                }
                AttackSpec::fgsm(self.epsilon, seed)
            }
            "fgsm_rs" => {
                if self.steps.is_some() || self.restarts.is_some() {
                    return reject("steps/restarts");
                }
                if self.noise_scale.is_some() {
                    return reject("noise_scale");
                }
                AttackSpec::fgsm_rs(self.epsilon, self.alpha, seed)
            }
            "n_fgsm" => {
                if self.steps.is_some() || self.restarts.is_some() {
                    return reject("steps/restarts");
                }
                AttackSpec::n_fgsm(
                    self.epsilon,
                    self.alpha,
                    self.noise_scale.unwrap_or(2.0),
                    seed,
                )
            }
            "pgd" => {
                if self.noise_scale.is_some() {
                    return reject("noise_scale");
                }
                AttackSpec::pgd(
                    self.epsilon,
                    self.alpha.unwrap_or(self.epsilon / 4.0),
                    self.steps.unwrap_or(10),
                    self.restarts.unwrap_or(1),
                    seed,
                )
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown family `{other}` in field attack.family \
                     (expected fgsm|fgsm_rs|n_fgsm|pgd)"
                )))
            }
        };
        spec.clip_input = self.clip;
        spec.validate().map_err(CliError::config_from)?;
        Ok(spec)
    }
}

// ── Eval ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub epsilon: f64,
    /// Step size of the multi-step presets; defaults to ε/4. At ε = 0 the
    /// default is an arbitrary positive value instead — projection onto the
    /// zero-radius ball returns the clean input whatever the step size, and
    /// a zero-budget evaluation must succeed (robust accuracy then equals
    /// standard accuracy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Attack names: `fgsm`, `fgsm_rs`, `n_fgsm`, or the hard-coded PGD
    /// presets `pgd10`, `pgd20`, `pgd50-10` (50 iterations per restart over
    /// 10 restarts).
    pub attacks: Vec<String>,
    /// Input box; defaults to the dataset's feature box when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<(f64, f64)>,
}

impl EvalConfig {
    /// Expands one named attack. `index` feeds the per-attack seed lane so
    /// different entries never share randomness.
    pub fn expand(
        &self,
        name: &str,
        top_seed: u64,
        index: usize,
        box_default: Option<(f64, f64)>,
    ) -> Result<AttackSpec, CliError> {
        let seed = derive_seed(top_seed, &[LANE_EVAL_ATTACK, index as u64]);
        let eps = self.epsilon;
        let alpha = self
            .alpha
            .unwrap_or(if eps > 0.0 { eps / 4.0 } else { 0.25 });
        let mut spec = match name {
            "fgsm" => AttackSpec::fgsm(eps, seed),
            "fgsm_rs" => AttackSpec::fgsm_rs(eps, None, seed),
            "n_fgsm" => AttackSpec::n_fgsm(eps, None, 2.0, seed),
            "pgd10" => AttackSpec::pgd(eps, alpha, 10, 1, seed),
            "pgd20" => AttackSpec::pgd(eps, alpha, 20, 1, seed),
            "pgd50-10" => AttackSpec::pgd(eps, alpha, 50, 10, seed),
            other => {
                return Err(CliError::Config(format!(
                    "unknown attack `{other}` in field eval.attacks \
                     (expected fgsm|fgsm_rs|n_fgsm|pgd10|pgd20|pgd50-10)"
                )))
            }
        };
        spec.clip_input = self.clip.or(box_default);
        spec.validate().map_err(CliError::config_from)?;
        Ok(spec)
    }
}

// ── Analysis ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen: Option<EigenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityConfig>,
}

fn default_resolution() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    #[serde(default)]
    pub sample_index: usize,
    pub eps: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl LandscapeConfig {
    pub fn seed(&self, top_seed: u64) -> u64 {
        self.seed
            .unwrap_or_else(|| derive_seed(top_seed, &[LANE_LANDSCAPE]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenConfig {
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EigenConfig {
    pub fn options(&self, top_seed: u64) -> EigenOptions {
        let d = EigenOptions::default();
        EigenOptions {
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
            fd_step: self.fd_step.unwrap_or(d.fd_step),
            seed: self
                .seed
                .unwrap_or_else(|| derive_seed(top_seed, &[LANE_EIGEN])),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub eps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_search_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SparsityConfig {
    pub fn options(&self, top_seed: u64) -> SparsityOptions {
        let d = SparsityOptions::default();
        SparsityOptions {
            directions: self.directions.unwrap_or(d.directions),
            line_search_iters: self.line_search_iters.unwrap_or(d.line_search_iters),
            seed: self
                .seed
                .unwrap_or_else(|| derive_seed(top_seed, &[LANE_SPARSITY])),
        }
    }
}

// ── Loading and overrides ───────────────────────────────────────────────────

/// Reads the config file, applies `--seed`/`--out`/`--checkpoint` and every
/// `--set key=value` override onto the raw TOML tree, and returns both the
/// typed config and the merged tree (the latter is echoed next to outputs).
pub fn load(
    path: &std::path::Path,
    seed: Option<u64>,
    out: Option<&std::path::Path>,
    checkpoint: Option<&std::path::Path>,
    sets: &[String],
) -> Result<(RunConfig, toml::Table), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(o) = out {
        table.insert("out_dir".into(), toml::Value::String(o.display().to_string()));
    }
    if let Some(c) = checkpoint {
        table.insert(
            "checkpoint".into(),
            toml::Value::String(c.display().to_string()),
        );
    }
    for kv in sets {
        apply_set(&mut table, kv)?;
    }
    let config: RunConfig = table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
    Ok((config, table))
}

/// Applies one `--set dotted.key=value` override. The value is parsed as a
/// TOML literal (so `0.5`, `true`, `[1, 2]` keep their types) and falls back
/// to a plain string.
fn apply_set(table: &mut toml::Table, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| {
        CliError::Config(format!("--set expects key=value, got `{kv}`"))
    })?;
    let value = parse_literal(raw);
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("--set key `{key}` has an empty segment")));
    }
    let mut node = table;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!(
                    "--set key `{key}`: `{seg}` is not a table in the config"
                ))
            })?;
    }
    node.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Collapses a multi-line error rendering into the single-line diagnostic
/// format promised on standard error.
pub fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}
