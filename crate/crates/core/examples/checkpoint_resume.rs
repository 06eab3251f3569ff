//! Pausing training, saving a checkpoint and resuming from the file
//! reproduces the uninterrupted run bit for bit.
//!
//! cargo run --release --example checkpoint_resume

use nrsfm::data::{synth_sequence, SyntheticSpec};
use nrsfm::runner::{load_checkpoint, save_checkpoint, train, TrainConfig, Trainer, Width};

fn main() -> nrsfm::Result<()> {
    let d = synth_sequence(&SyntheticSpec {
        seed: 4,
        ..SyntheticSpec::new(256, 10, 2)
    })?;
    let cfg = TrainConfig {
        total_steps: 60,
        seq_len: 16,
        width: Width::Tiny,
        seed: 9,
        ..TrainConfig::default()
    };
    let full = train(&d, &cfg, &mut |_| {})?;

    let mut log = Vec::new();
    let mut first = Trainer::new(d.points(), cfg.clone())?;
    first.run_until(&d, 25, &mut |r| log.push(r.clone()))?;
    let path = std::env::temp_dir().join("nrsfm_resume.ckpt");
    save_checkpoint(&path, &first.checkpoint())?;
    println!(
        "paused at step {}; checkpoint is {} bytes",
        first.step(),
        std::fs::metadata(&path)?.len()
    );

    let mut second = Trainer::from_checkpoint(&load_checkpoint(&path)?)?;
    second.run_until(&d, u64::MAX, &mut |r| log.push(r.clone()))?;
    let same_params = second.checkpoint().params.values == full.checkpoint.params.values;
    println!(
        "resumed to step {}: parameters identical {same_params}, logs identical {}",
        second.step(),
        log == full.log
    );
    Ok(())
}
