//! Method-by-seed comparison harness: trains one model per
//! (training objective, seed) cell on a shared task, evaluates every cell
//! with identical attacks and diagnostics, and serializes the results as
//! per-metric CSV tables plus a JSON bundle.
//!
//! The default task is a two-spiral classification problem — non-linear
//! enough that adversarial training is non-trivial — with an MLP
//! `[2, 64, 64, 2]`, budget ε = 0.1, a 10-step PGD inner maximizer during
//! training, and 60 epochs of momentum SGD with two step-decay milestones.
//! Metrics per cell: standard accuracy, robust accuracy under 20-step PGD,
//! mean dominant input-Hessian eigenvalue, sparsity means across a budget
//! sweep, summed training wall time, and the final epoch's blend weight.
//!
//! Cells are fully independent: every random stream inside a cell derives
//! from that cell's seed alone, so removing or reordering methods and seeds
//! never changes another cell's numbers. Cell failures are isolated into
//! failure markers; the matrix always completes.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    mean_dominant_eigenvalue, sparsity_sweep, EigenOptions, SparsityOptions,
};
use crate::attack::{evaluate_robust_accuracy, standard_accuracy, AttackFamily, AttackSpec};
use crate::data::gen_spirals;
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpConfig};
use crate::rng::derive_seed;
use crate::train::{plan_split, train, EarlyStop, LossMode, TrainPlan};

/// Shared settings for every cell of a comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    /// Spiral sample count; 10% is held out for evaluation.
    pub n_points: usize,
    pub turns: f64,
    pub noise: f64,
    pub layer_widths: Vec<usize>,
    pub epsilon: f64,
    /// PGD steps of the training-time inner maximizer.
    pub train_attack_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<(usize, f64)>,
    /// PGD steps of the evaluation attack (single restart).
    pub eval_attack_steps: usize,
    /// Eigenvalue samples drawn from the head of the evaluation split.
    pub eigen_samples: usize,
    pub eigen: EigenOptions,
    /// Budgets of the sparsity sweep.
    pub sparsity_eps: Vec<f64>,
    pub sparsity: SparsityOptions,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            n_points: 2000,
            turns: 1.0,
            noise: 0.08,
            layer_widths: vec![2, 64, 64, 2],
            epsilon: 0.1,
            train_attack_steps: 10,
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![(42, 0.1), (51, 0.1)],
            eval_attack_steps: 20,
            eigen_samples: 200,
            eigen: EigenOptions::default(),
            sparsity_eps: vec![0.05, 0.1, 0.15, 0.2],
            sparsity: SparsityOptions::default(),
        }
    }
}

/// One comparison row: a training objective plus the attack family that
/// feeds it. Clean training carries no attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub loss_mode: LossMode,
    /// Ignored for clean training.
    pub attack_family: AttackFamily,
}

impl MethodSpec {
    pub fn new(loss_mode: LossMode, attack_family: AttackFamily) -> Self {
        MethodSpec {
            loss_mode,
            attack_family,
        }
    }

    /// Row label, e.g. `at+pgd` or `clean`.
    pub fn name(&self) -> String {
        if self.loss_mode == LossMode::Clean {
            "clean".to_string()
        } else {
            format!("{}+{}", self.loss_mode.name(), self.attack_family.name())
        }
    }
}

/// The standard comparison lineup: adversarial training and both
/// quadratic-bound schedules, all fed by PGD.
pub fn default_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::new(LossMode::At, AttackFamily::Pgd),
        MethodSpec::new(LossMode::QubStatic, AttackFamily::Pgd),
        MethodSpec::new(LossMode::QubDecreasing, AttackFamily::Pgd),
    ]
}

/// Metrics from one successfully trained and evaluated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub standard_accuracy: f64,
    pub robust_accuracy: f64,
    /// Mean dominant eigenvalue over converged samples; `None` when power
    /// iteration converged nowhere.
    pub eigen_mean: Option<f64>,
    pub eigen_converged: usize,
    /// One mean per entry of `sparsity_eps`; `None` marks a budget at which
    /// no sample was attackable.
    pub sparsity_means: Vec<Option<f64>>,
    /// Total training time (sum of epoch wall clocks), seconds.
    pub wall_seconds: f64,
    /// Blend weight of the final epoch (1 for the decreasing schedule,
    /// 0 elsewhere).
    pub final_lambda: f64,
    /// CRC-32 of the serialized cell configuration, for provenance.
    pub config_hash: String,
}

/// A cell either produced metrics or an isolated failure message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok { metrics: CellMetrics },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl Cell {
    pub fn metrics(&self) -> Option<&CellMetrics> {
        match &self.outcome {
            CellOutcome::Ok { metrics } => Some(metrics),
            CellOutcome::Failed { .. } => None,
        }
    }
}

/// Completed comparison: configuration echo plus one cell per
/// (method, seed) pair, in method-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub config: MatrixConfig,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

/// Training plan for one cell.
pub fn cell_plan(config: &MatrixConfig, method: MethodSpec, seed: u64) -> TrainPlan {
    let attack = if method.loss_mode == LossMode::Clean {
        None
    } else {
        let eps = config.epsilon;
        Some(match method.attack_family {
            AttackFamily::Fgsm => AttackSpec::fgsm(eps, 0),
            AttackFamily::FgsmRs => AttackSpec::fgsm_rs(eps, None, 0),
            AttackFamily::NFgsm => AttackSpec::n_fgsm(eps, None, 2.0, 0),
            AttackFamily::Pgd => {
                AttackSpec::pgd(eps, eps / 4.0, config.train_attack_steps, 1, 0)
            }
        })
    };
    TrainPlan {
        epochs: config.epochs,
        batch_size: config.batch_size,
        loss_mode: method.loss_mode,
        attack,
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        lr_milestones: config.lr_milestones.clone(),
        early_stop: EarlyStop::None,
        seed,
    }
}

fn config_hash(config: &MatrixConfig, method: MethodSpec, seed: u64) -> Result<String> {
    let blob = serde_json::to_string(&(config, method.name(), seed))?;
    Ok(format!("{:08x}", crc32fast::hash(blob.as_bytes())))
}

/// Train and evaluate one cell. Every random stream derives from `seed`.
pub fn run_cell(config: &MatrixConfig, method: MethodSpec, seed: u64) -> Result<CellMetrics> {
    let dataset = gen_spirals(
        config.n_points,
        config.turns,
        config.noise,
        derive_seed(seed, &[100]),
    )?;
    let plan = cell_plan(config, method, seed);
    let model = Mlp::new(MlpConfig::new(
        config.layer_widths.clone(),
        derive_seed(seed, &[101]),
    ))?;
    let (trained, records) = train(model, &dataset, &plan)?;
    let wall_seconds: f64 = records.iter().map(|r| r.wall_seconds).sum();
    let final_lambda = records.last().map_or(0.0, |r| r.lambda_t);

    let (_, val) = plan_split(&dataset, &plan)?;
    let standard = standard_accuracy(&trained, &val.x, &val.labels)?;
    let eval_attack = {
        let mut spec = AttackSpec::pgd(
            config.epsilon,
            config.epsilon / 4.0,
            config.eval_attack_steps,
            1,
            derive_seed(seed, &[102]),
        );
        spec.clip_input = None;
        spec
    };
    let robust = evaluate_robust_accuracy(&trained, &val.x, &val.labels, &eval_attack)?;

    let eigen_opts = EigenOptions {
        seed: derive_seed(seed, &[103]),
        ..config.eigen
    };
    let eigen = mean_dominant_eigenvalue(
        &trained,
        &val,
        config.eigen_samples.min(val.len()),
        &eigen_opts,
    )?;

    let sparsity_opts = SparsityOptions {
        seed: derive_seed(seed, &[104]),
        ..config.sparsity
    };
    let sweeps = sparsity_sweep(&trained, &val, &config.sparsity_eps, &sparsity_opts)?;
    let sparsity_means = sweeps.iter().map(|r| r.mean).collect();

    Ok(CellMetrics {
        standard_accuracy: standard,
        robust_accuracy: robust,
        eigen_mean: eigen.mean,
        eigen_converged: eigen.n_converged,
        sparsity_means,
        wall_seconds,
        final_lambda,
        config_hash: config_hash(config, method, seed)?,
    })
}

/// Run every (method, seed) cell, isolating failures into markers.
pub fn run_matrix(
    config: &MatrixConfig,
    methods: &[MethodSpec],
    seeds: &[u64],
) -> Result<ComparisonMatrix> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::config(
            "a comparison needs at least one method and one seed",
        ));
    }
    let mut cells = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        for &seed in seeds {
            let outcome = match run_cell(config, method, seed) {
                Ok(metrics) => CellOutcome::Ok { metrics },
                Err(e) => CellOutcome::Failed {
                    error: e.to_string(),
                },
            };
            cells.push(Cell {
                method: method.name(),
                seed,
                outcome,
            });
        }
    }
    Ok(ComparisonMatrix {
        config: config.clone(),
        methods: methods.iter().map(MethodSpec::name).collect(),
        seeds: seeds.to_vec(),
        cells,
    })
}

fn mean_and_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() < 2 {
        None
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (values.len() - 1) as f64;
        Some(var.sqrt())
    };
    (Some(mean), std)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| format!("{x}"))
}

impl ComparisonMatrix {
    pub fn cell(&self, method: &str, seed: u64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.seed == seed)
    }

    /// Per-seed values of one metric for one method row, skipping failed
    /// cells.
    pub fn metric_row(
        &self,
        method: &str,
        metric: impl Fn(&CellMetrics) -> Option<f64>,
    ) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|&s| self.cell(method, s).and_then(|c| c.metrics()).and_then(&metric))
            .collect()
    }

    /// Seed-mean of one metric for one method, over cells that produced it.
    pub fn seed_mean(
        &self,
        method: &str,
        metric: impl Fn(&CellMetrics) -> Option<f64>,
    ) -> Option<f64> {
        let vals: Vec<f64> = self.metric_row(method, metric).into_iter().flatten().collect();
        mean_and_std(&vals).0
    }

    fn table(&self, metric: impl Fn(&CellMetrics) -> Option<f64>) -> String {
        let mut out = String::from("method");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",mean,std\n");
        for m in &self.methods {
            let row = self.metric_row(m, &metric);
            let present: Vec<f64> = row.iter().flatten().copied().collect();
            let (mean, std) = mean_and_std(&present);
            out.push_str(m);
            for v in row {
                out.push_str(&format!(",{}", fmt_opt(v)));
            }
            out.push_str(&format!(",{},{}\n", fmt_opt(mean), fmt_opt(std)));
        }
        out
    }

    /// Sparsity table with one row per (method, budget) pair.
    fn sparsity_table(&self) -> String {
        let mut out = String::from("method,eps");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",mean,std\n");
        for m in &self.methods {
            for (k, &eps) in self.config.sparsity_eps.iter().enumerate() {
                let row = self.metric_row(m, |c| c.sparsity_means.get(k).copied().flatten());
                let present: Vec<f64> = row.iter().flatten().copied().collect();
                let (mean, std) = mean_and_std(&present);
                out.push_str(&format!("{m},{eps}"));
                for v in row {
                    out.push_str(&format!(",{}", fmt_opt(v)));
                }
                out.push_str(&format!(",{},{}\n", fmt_opt(mean), fmt_opt(std)));
            }
        }
        out
    }

    /// Human-readable mean ± std summary, one row per method.
    pub fn render_summary(&self) -> String {
        let mut out = format!(
            "{:<24} {:>16} {:>16} {:>16} {:>12}\n",
            "method", "SA", "RA", "eigen_mean", "wall_s"
        );
        let cell = |row: Vec<Option<f64>>| {
            let present: Vec<f64> = row.into_iter().flatten().collect();
            match mean_and_std(&present) {
                (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                (Some(m), None) => format!("{m:.4}"),
                _ => "n/a".to_string(),
            }
        };
        for m in &self.methods {
            out.push_str(&format!(
                "{:<24} {:>16} {:>16} {:>16} {:>12}\n",
                m,
                cell(self.metric_row(m, |c| Some(c.standard_accuracy))),
                cell(self.metric_row(m, |c| Some(c.robust_accuracy))),
                cell(self.metric_row(m, |c| c.eigen_mean)),
                cell(self.metric_row(m, |c| Some(c.wall_seconds))),
            ));
        }
        out
    }

    /// Write `comparison_SA.csv`, `comparison_RA.csv`,
    /// `comparison_eigen.csv`, `comparison_sparsity.csv`, and `bundle.json`
    /// into `dir`.
    pub fn write_artifacts(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("comparison_SA.csv"),
            self.table(|c| Some(c.standard_accuracy)),
        )?;
        std::fs::write(
            dir.join("comparison_RA.csv"),
            self.table(|c| Some(c.robust_accuracy)),
        )?;
        std::fs::write(dir.join("comparison_eigen.csv"), self.table(|c| c.eigen_mean))?;
        std::fs::write(dir.join("comparison_sparsity.csv"), self.sparsity_table())?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("bundle.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A configuration small enough for unit tests: tiny spiral set, narrow
    /// net, few epochs, light diagnostics.
    fn tiny_config() -> MatrixConfig {
        MatrixConfig {
            n_points: 120,
            layer_widths: vec![2, 8, 2],
            train_attack_steps: 3,
            epochs: 2,
            batch_size: 32,
            lr_milestones: vec![],
            eval_attack_steps: 5,
            eigen_samples: 4,
            eigen: EigenOptions {
                max_iters: 40,
                ..EigenOptions::default()
            },
            sparsity_eps: vec![0.1],
            sparsity: SparsityOptions {
                directions: 3,
                line_search_iters: 8,
                seed: 0,
            },
            ..MatrixConfig::default()
        }
    }

    #[test]
    fn matrix_fills_every_cell_with_all_metrics() {
        let cfg = tiny_config();
        let methods = [
            MethodSpec::new(LossMode::At, AttackFamily::Pgd),
            MethodSpec::new(LossMode::QubStatic, AttackFamily::Pgd),
        ];
        let matrix = run_matrix(&cfg, &methods, &[0, 1, 2]).unwrap();
        assert_eq!(matrix.cells.len(), 6);
        for cell in &matrix.cells {
            let m = cell.metrics().unwrap_or_else(|| panic!("cell {} seed {} failed", cell.method, cell.seed));
            assert!((0.0..=1.0).contains(&m.standard_accuracy));
            assert!((0.0..=1.0).contains(&m.robust_accuracy));
            assert!(m.wall_seconds > 0.0);
            assert_eq!(m.sparsity_means.len(), 1);
            assert_eq!(m.config_hash.len(), 8);
        }
    }

    #[test]
    fn decreasing_schedule_ends_at_full_blend() {
        let cfg = tiny_config();
        let methods = [MethodSpec::new(LossMode::QubDecreasing, AttackFamily::Pgd)];
        let matrix = run_matrix(&cfg, &methods, &[0]).unwrap();
        let m = matrix.cells[0].metrics().expect("cell ok");
        assert_eq!(m.final_lambda, 1.0);
    }

    #[test]
    fn cells_are_independent_of_the_surrounding_matrix() {
        let cfg = tiny_config();
        let at = MethodSpec::new(LossMode::At, AttackFamily::Pgd);
        let qub = MethodSpec::new(LossMode::QubStatic, AttackFamily::Pgd);

        let solo = run_matrix(&cfg, &[at], &[1]).unwrap();
        let joint = run_matrix(&cfg, &[qub, at], &[1, 0]).unwrap();

        let solo_m = solo.cell("at+pgd", 1).unwrap().metrics().unwrap();
        let joint_m = joint.cell("at+pgd", 1).unwrap().metrics().unwrap();
        assert_eq!(
            solo_m.standard_accuracy.to_bits(),
            joint_m.standard_accuracy.to_bits()
        );
        assert_eq!(
            solo_m.robust_accuracy.to_bits(),
            joint_m.robust_accuracy.to_bits()
        );
        assert_eq!(solo_m.eigen_mean, joint_m.eigen_mean);
        assert_eq!(solo_m.sparsity_means, joint_m.sparsity_means);
    }

    #[test]
    fn rerunning_a_cell_reproduces_every_number_except_wall_time() {
        let cfg = tiny_config();
        let m1 = run_cell(&cfg, MethodSpec::new(LossMode::At, AttackFamily::Pgd), 7).unwrap();
        let m2 = run_cell(&cfg, MethodSpec::new(LossMode::At, AttackFamily::Pgd), 7).unwrap();
        assert_eq!(m1.standard_accuracy.to_bits(), m2.standard_accuracy.to_bits());
        assert_eq!(m1.robust_accuracy.to_bits(), m2.robust_accuracy.to_bits());
        assert_eq!(m1.eigen_mean, m2.eigen_mean);
        assert_eq!(m1.sparsity_means, m2.sparsity_means);
        assert_eq!(m1.config_hash, m2.config_hash);
    }

    #[test]
    fn artifacts_have_the_documented_shapes() {
        let cfg = tiny_config();
        let methods = [
            MethodSpec::new(LossMode::At, AttackFamily::Pgd),
            MethodSpec::new(LossMode::QubStatic, AttackFamily::Pgd),
        ];
        let matrix = run_matrix(&cfg, &methods, &[0, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        matrix.write_artifacts(dir.path()).unwrap();

        let sa = std::fs::read_to_string(dir.path().join("comparison_SA.csv")).unwrap();
        let mut lines = sa.lines();
        assert_eq!(lines.next().unwrap(), "method,seed_0,seed_1,mean,std");
        assert_eq!(lines.count(), 2);

        let sparsity =
            std::fs::read_to_string(dir.path().join("comparison_sparsity.csv")).unwrap();
        assert_eq!(
            sparsity.lines().next().unwrap(),
            "method,eps,seed_0,seed_1,mean,std"
        );
        assert_eq!(sparsity.lines().count(), 1 + 2);

        let bundle = std::fs::read_to_string(dir.path().join("bundle.json")).unwrap();
        let back: ComparisonMatrix = serde_json::from_str(&bundle).unwrap();
        assert_eq!(back, matrix);
    }

    #[test]
    fn method_names_read_as_objective_plus_attack() {
        assert_eq!(
            MethodSpec::new(LossMode::QubStatic, AttackFamily::Pgd).name(),
            "qub_static+pgd"
        );
        assert_eq!(
            MethodSpec::new(LossMode::Clean, AttackFamily::Pgd).name(),
            "clean"
        );
        let names: Vec<String> = default_methods().iter().map(MethodSpec::name).collect();
        assert_eq!(names, ["at+pgd", "qub_static+pgd", "qub_decreasing+pgd"]);
    }

    #[test]
    fn degenerate_matrix_requests_are_rejected() {
        let cfg = tiny_config();
        assert!(run_matrix(&cfg, &[], &[0]).is_err());
        assert!(run_matrix(&cfg, &default_methods(), &[]).is_err());
    }

    #[test]
    fn failures_are_isolated_into_markers() {
        let mut cfg = tiny_config();
        cfg.layer_widths = vec![3, 4, 2]; // input width mismatches the 2-D task
        let matrix = run_matrix(&cfg, &[MethodSpec::new(LossMode::At, AttackFamily::Pgd)], &[0])
            .unwrap();
        match &matrix.cells[0].outcome {
            CellOutcome::Failed { error } => assert!(!error.is_empty()),
            CellOutcome::Ok { .. } => panic!("expected an isolated failure"),
        }
        let dir = tempfile::tempdir().unwrap();
        matrix.write_artifacts(dir.path()).unwrap();
        let sa = std::fs::read_to_string(dir.path().join("comparison_SA.csv")).unwrap();
        assert!(sa.contains("failed"));
    }
}
