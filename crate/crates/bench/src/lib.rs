//! Shared fixtures for the microbenchmarks: one deterministic model, batch,
//! and logit bundle, sized like the comparison harness's defaults so the
//! numbers are representative of real runs.

use robustkit::{Dataset, LogitBundle, Mlp, MlpConfig};

pub const BATCH: usize = 128;

/// The comparison harness's default architecture.
pub fn bench_model() -> Mlp {
    Mlp::new(MlpConfig::new(vec![2, 64, 64, 2], 7)).expect("valid config")
}

/// One deterministic 128-sample spirals batch.
pub fn bench_dataset() -> Dataset {
    robustkit::data::gen_spirals(BATCH, 1.0, 0.08, 11).expect("valid dataset")
}

/// A 10-class bundle with a moderately large perturbation.
pub fn bench_bundle() -> LogitBundle {
    let z_clean: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
    let z_adv: Vec<f64> = z_clean.iter().map(|z| z + 0.25).collect();
    LogitBundle::new(z_clean, z_adv, 3).expect("valid bundle")
}
