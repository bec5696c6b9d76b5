//! Sweeps the number of shared layers and reports expected leakage and how
//! well a single training image is recovered from the shared gradients.

use blindfl::attack::{run_sweep, write_sweep_csv, AttackConfig};
use blindfl::training::Activation;

fn main() {
    let config = AttackConfig {
        widths: vec![64, 32, 16, 10],
        activation: Activation::Relu,
        trials: 200,
        seed: 3,
        n_values: None,
        image_noise: 0.1,
    };
    let rows = run_sweep(&config).expect("sweep");
    write_sweep_csv(&rows, std::io::stdout().lock()).expect("csv");
}
