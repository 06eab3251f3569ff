//! Trains on the first 80% of a synthetic sequence and evaluates the held-out
//! tail under every ablation mode.
//!
//! cargo run --release --example train_and_evaluate -- [STEPS] [standard|tiny]

use nrsfm::data::{split_dataset, synth_sequence, SyntheticSpec};
use nrsfm::metrics::Metric;
use nrsfm::runner::{evaluate, save_checkpoint, train, EvalMode, EvalOptions, TrainConfig, Width};

fn main() -> nrsfm::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let width: Width = args.next().as_deref().unwrap_or("standard").parse()?;

    let spec = SyntheticSpec {
        noise_sigma: 0.01,
        seed: 0,
        ..SyntheticSpec::new(2048, 15, 3)
    };
    let (train_part, test_part) = split_dataset(&synth_sequence(&spec)?, 0.8, 0)?;
    let cfg = TrainConfig {
        total_steps: steps,
        width,
        ..TrainConfig::default()
    };

    let start = std::time::Instant::now();
    let run = train(&train_part, &cfg, &mut |r| {
        if r.step % 100 == 0 {
            println!(
                "step {:>5}  lr {:.0e}  data {:.4}  norm {:.3}  cano {:.4}",
                r.step, r.lr, r.data, r.nuclear, r.cano
            );
        }
    })?;
    println!("{steps} steps in {:.1}s", start.elapsed().as_secs_f64());

    let model = run.checkpoint.model()?;
    for mode in [
        EvalMode::Normal,
        EvalMode::Shuffle,
        EvalMode::Reverse,
        EvalMode::SingleFrame,
    ] {
        let report = evaluate(
            &model,
            &test_part,
            &EvalOptions {
                mode,
                ..EvalOptions::default()
            },
        )?;
        println!(
            "{:<12} e3d {:.4}  mpjpe {:.4}  stress {:.4}  reprojection {:.4}",
            mode.name(),
            report.mean(Metric::E3d).unwrap_or(f64::NAN),
            report.mean(Metric::Mpjpe).unwrap_or(f64::NAN),
            report.mean(Metric::Stress).unwrap_or(f64::NAN),
            report.reprojection_rmse
        );
    }

    let path = std::env::temp_dir().join("nrsfm_example.ckpt");
    save_checkpoint(&path, &run.checkpoint)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
