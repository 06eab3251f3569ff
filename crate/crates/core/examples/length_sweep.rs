//! Trains at one chunk length and evaluates at shorter and longer ones.
//! Lengths beyond the temporal encoding's capacity are rejected.
//!
//! cargo run --release --example length_sweep -- [STEPS]

use nrsfm::data::{split_dataset, synth_sequence, SyntheticSpec};
use nrsfm::runner::{length_sweep, sweep_csv, train, EvalOptions, TrainConfig};

fn main() -> nrsfm::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let spec = SyntheticSpec {
        noise_sigma: 0.01,
        seed: 0,
        ..SyntheticSpec::new(1024, 15, 3)
    };
    let (train_part, test_part) = split_dataset(&synth_sequence(&spec)?, 0.8, 0)?;
    let run = train(
        &train_part,
        &TrainConfig {
            total_steps: steps,
            ..TrainConfig::default()
        },
        &mut |_| {},
    )?;
    let model = run.checkpoint.model()?;

    let rows = length_sweep(
        &model,
        &test_part,
        &[1, 4, 8, 16, 32],
        &EvalOptions::default(),
    )?;
    print!("{}", sweep_csv(&rows));
    match length_sweep(&model, &test_part, &[64], &EvalOptions::default()) {
        Err(e) => println!("length 64: {e}"),
        Ok(_) => println!("length 64 unexpectedly accepted"),
    }
    Ok(())
}
