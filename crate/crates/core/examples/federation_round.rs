//! Runs a small encrypted, segmented federation, first in-process and then
//! over loopback TCP, and checks both produce the same metrics.

use blindfl::runtime::{metrics_csv, run_experiment, DatasetConfig, FederationConfig, FheMode, TransportConfig};

fn main() {
    let base = FederationConfig {
        clients: 6,
        selected: 4,
        rounds: 5,
        fhe: FheMode::Ckks,
        dataset: DatasetConfig::Digits {
            samples: 600,
            noise: 0.25,
        },
        deterministic: true,
        ..FederationConfig::default()
    };
    let local = run_experiment(base.clone()).expect("in-process run");
    println!("round  selected        mean up (B)  accuracy  train loss");
    for m in &local {
        println!(
            "{:>5}  {:<14}  {:>11.0}  {:>8.3}  {:>10.4}",
            m.round,
            format!("{:?}", m.selected),
            m.bytes_up_mean(),
            m.mean_accuracy,
            m.train_loss
        );
    }

    let socket = run_experiment(FederationConfig {
        transport: TransportConfig::Socket {
            address: "127.0.0.1:0".into(),
        },
        timeout_ms: Some(30_000),
        ..base
    })
    .expect("socket run");
    let same = metrics_csv(&local).unwrap() == metrics_csv(&socket).unwrap();
    println!("\nsocket transport reproduces in-process metrics: {same}");
}
