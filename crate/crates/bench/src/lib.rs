//! Shared fixtures for the criterion benchmarks.

use fedstil_core::numeric::{Matrix, SeededRng};
use fedstil_core::ExperimentConfig;

/// A random `rows × cols` matrix of standard normal entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let values = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::new(rows, cols, values).expect("finite entries")
}

/// The default desk-scale experiment with checkpoint files disabled.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.checkpoint = false;
    cfg
}
