//! Runs the method-by-seed comparison harness on the default spirals task
//! and writes the per-metric CSV tables plus the JSON bundle.
//!
//! Usage:
//!   cargo run --release --example comparison_matrix [OUT_DIR] [--quick]
//!
//! OUT_DIR defaults to `comparison-out`. With `--quick`, a scaled-down task
//! (fewer points, epochs, and diagnostic samples) demonstrates the full
//! artifact layout in well under a minute; without it, the default task
//! (2,000 spirals, [2, 64, 64, 2], 60 epochs, 10-step PGD during training)
//! runs the real comparison and can take tens of minutes on one core.

use robustkit::matrix::{default_methods, run_matrix, MatrixConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut out_dir = String::from("comparison-out");
    let mut quick = false;
    for arg in std::env::args().skip(1) {
        match arg.as_str() {
            "--quick" => quick = true,
            other if !other.starts_with('-') => out_dir = other.to_string(),
            other => return Err(format!("unknown flag {other}").into()),
        }
    }

    let mut config = MatrixConfig::default();
    if quick {
        config.n_points = 400;
        config.epochs = 10;
        config.lr_milestones = vec![(8, 0.1)];
        config.eigen_samples = 40;
    }

    let seeds = [0, 1, 2];
    let matrix = run_matrix(&config, &default_methods(), &seeds)?;
    matrix.write_artifacts(&out_dir)?;

    println!("{}", matrix.render_summary());
    println!("artifacts written to {out_dir}/");
    Ok(())
}
