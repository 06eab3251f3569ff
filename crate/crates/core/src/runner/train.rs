use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{param_specs, Checkpoint, CheckpointMeta};
use super::TrainConfig;
use crate::data::{chunk_observations, make_chunks, ChunkMode, Dataset};
use crate::diffcore::{adam_step, AdamState, Tape};
use crate::losses::total_loss;
use crate::model::Model;
use crate::{Error, Result};

const LOSS_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1 << 32;

/// `lr0 / 10^k` where `k` counts decay steps at or before update `t`.
pub fn lr_at(lr0: f64, decay_steps: &[usize], t: u64) -> f64 {
    let k = decay_steps.iter().filter(|&&d| d as u64 <= t).count();
    lr0 / 10f64.powi(k as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(rename = "L_data")]
    pub data: f64,
    #[serde(rename = "L_norm")]
    pub nuclear: f64,
    #[serde(rename = "L_cano")]
    pub cano: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// A training run that can pause at any step, e.g. to evaluate.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(points: usize, mut cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.decay_steps = Some(cfg.decay_schedule());
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::<f32>::new(cfg.width.model_config(points, cfg.seq_len), &mut init)?;
        let adam = AdamState::zeros_like(&model.params.values);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(LOSS_STREAM);
        Ok(Self {
            cfg,
            model,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let adam = match &ckpt.adam {
            Some(a) => a.clone(),
            None if ckpt.meta.step == 0 => AdamState::zeros_like(&model.params.values),
            None => {
                return Err(Error::Checkpoint(
                    "cannot resume without optimizer moments".into(),
                ))
            }
        };
        Ok(Self {
            cfg: ckpt.meta.train.clone(),
            model,
            adam,
            rng: ckpt.meta.rng.clone(),
            step: ckpt.meta.step,
        })
    }

    fn epoch_order(&self, frames: usize, epoch: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(EPOCH_STREAM_BASE + epoch);
        let plan = make_chunks(frames, self.cfg.seq_len, ChunkMode::Train, &mut rng)?;
        let mut starts: Vec<usize> = plan.chunks.iter().map(|c| c[0]).collect();
        if !self.cfg.shuffle_chunks {
            starts.sort_unstable();
        }
        Ok(starts)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Trains up to `min(until, total_steps)` updates.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: u64,
        sink: &mut dyn FnMut(&LogRecord),
    ) -> Result<()> {
        let l = self.cfg.seq_len;
        if data.points() != self.model.config.points {
            return Err(Error::SizeConflict(format!(
                "dataset has {} points, model expects {}",
                data.points(),
                self.model.config.points
            )));
        }
        let per_epoch = data.frames() / l;
        if per_epoch == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} frames hold no full chunk of length {l}",
                data.frames()
            )));
        }
        let decay = self.cfg.decay_schedule();
        let total = until.min(self.cfg.total_steps as u64);
        while self.step < total {
            let epoch = self.step / per_epoch as u64;
            let order = self.epoch_order(data.frames(), epoch)?;
            let start = order[(self.step % per_epoch as u64) as usize];
            let chunk: Vec<usize> = (start..start + l).collect();
            let w = chunk_observations(data, &chunk).mapv(|x| x as f32);
            let lr = lr_at(self.cfg.lr, &decay, self.step);
            let record = self.update(w, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", self.step)),
                other => other,
            })?;
            sink(&record);
            self.step += 1;
        }
        Ok(())
    }

    fn update(&mut self, w: Array2<f32>, lr: f64) -> Result<LogRecord> {
        let (grads, b) = {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let wv = tape.leaf(w);
            let out = self.model.forward_sequence(&mut tape, &bound, wv)?;
            let (terms, b) = total_loss(
                &mut tape,
                &self.model,
                &bound,
                wv,
                &out,
                &self.cfg.weights,
                &mut self.rng,
            )?;
            let mut g = tape.backward(terms.total)?;
            (
                bound.vars().iter().map(|v| g.take(*v)).collect::<Vec<_>>(),
                b,
            )
        };
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let mut grads = grads;
        if let Some(max) = self.cfg.clip_norm {
            if grad_norm > max {
                let k = (max / grad_norm) as f32;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * k));
            }
        }
        adam_step(
            &mut self.model.params.values,
            &grads,
            &mut self.adam,
            &self.cfg.adam(lr),
        )?;
        Ok(LogRecord {
            step: self.step,
            lr,
            data: b.data,
            nuclear: b.nuclear,
            cano: b.cano,
            total: b.total,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.config.clone(),
                train: self.cfg.clone(),
                step: self.step,
                rng: self.rng.clone(),
                params: param_specs(&self.model.params),
                adam_step: Some(self.adam.step),
            },
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }
}

/// Trains from a fresh initialization, streaming each record to `sink`.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<TrainRun> {
    let mut t = Trainer::new(data.points(), cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.total_steps);
    t.run_until(data, u64::MAX, &mut |r| {
        sink(r);
        log.push(r.clone());
    })?;
    Ok(TrainRun {
        checkpoint: t.checkpoint(),
        log,
    })
}

/// Continues a run up to `total_steps` with its saved schedule, optimizer and rng state.
pub fn resume(
    ckpt: &Checkpoint,
    data: &Dataset,
    total_steps: usize,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<TrainRun> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    t.cfg.total_steps = total_steps;
    t.cfg.validate()?;
    let mut log = Vec::new();
    t.run_until(data, u64::MAX, &mut |r| {
        sink(r);
        log.push(r.clone());
    })?;
    Ok(TrainRun {
        checkpoint: t.checkpoint(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sequence, SyntheticSpec};
    use crate::runner::Width;

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            seq_len: 8,
            total_steps: steps,
            width: Width::Tiny,
            seed: 5,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn data() -> Dataset {
        synth_sequence(&SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::new(40, 6, 2)
        })
        .unwrap()
    }

    #[test]
    fn schedule_is_exact() {
        let d = [1800, 6400];
        assert_eq!(lr_at(1e-3, &d, 0), 1e-3);
        assert_eq!(lr_at(1e-3, &d, 1799), 1e-3);
        assert_eq!(lr_at(1e-3, &d, 1800), 1e-3 / 10.0);
        assert_eq!(lr_at(1e-3, &d, 6400), 1e-3 / 100.0);
        let c = TrainConfig {
            total_steps: 20_000,
            ..TrainConfig::default()
        };
        assert_eq!(c.decay_schedule(), vec![8000, 16_000]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (
                c.weights.alpha,
                c.weights.lambda,
                c.lr,
                c.seq_len,
                c.weights.m_samples
            ),
            (0.01, 0.003, 0.001, 32, 4)
        );
        assert!(TrainConfig {
            decay_steps: Some(vec![5, 5]),
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            decay_steps: Some(vec![5, 3]),
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            decay_steps: Some(vec![c.total_steps]),
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            total_steps: 0,
            ..c.clone()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let d = data();
        let run = train(&d, &tiny_cfg(0), &mut |_| {}).unwrap();
        assert!(run.log.is_empty());
        let mut init = ChaCha8Rng::seed_from_u64(5);
        let fresh = Model::<f32>::new(Width::Tiny.model_config(6, 8), &mut init).unwrap();
        assert_eq!(run.checkpoint.params, fresh.params);
        assert_eq!(run.checkpoint.meta.step, 0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let d = data();
        let a = train(&d, &tiny_cfg(12), &mut |_| {}).unwrap();
        let b = train(&d, &tiny_cfg(12), &mut |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
        assert_eq!(a.log.len(), 12);
        assert!(a.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data();
        let first = train(
            &d,
            &TrainConfig {
                decay_steps: Some(vec![5]),
                ..tiny_cfg(6)
            },
            &mut |_| {},
        )
        .unwrap();
        let long = train(
            &d,
            &TrainConfig {
                decay_steps: Some(vec![5]),
                ..tiny_cfg(14)
            },
            &mut |_| {},
        )
        .unwrap();
        let bytes = first.checkpoint.to_bytes().unwrap();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        let rest = resume(&reloaded, &d, 14, &mut |_| {}).unwrap();
        assert_eq!([first.log, rest.log].concat(), long.log);
        assert_eq!(rest.checkpoint.params, long.checkpoint.params);
        assert_eq!(rest.checkpoint.meta.rng, long.checkpoint.meta.rng);
    }

    #[test]
    fn pausing_does_not_change_the_run() {
        let d = data();
        let whole = train(&d, &tiny_cfg(10), &mut |_| {}).unwrap();
        let mut t = Trainer::new(6, tiny_cfg(10)).unwrap();
        let mut log = Vec::new();
        for stop in [3, 7, 50] {
            t.run_until(&d, stop, &mut |r| log.push(r.clone())).unwrap();
        }
        assert_eq!(t.step(), 10);
        assert_eq!(log, whole.log);
        assert_eq!(t.checkpoint(), whole.checkpoint);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let d = data();
        let run = train(
            &d,
            &TrainConfig {
                decay_steps: Some(vec![]),
                ..tiny_cfg(300)
            },
            &mut |_| {},
        )
        .unwrap();
        let head: f64 = run.log[..20].iter().map(|r| r.data).sum::<f64>() / 20.0;
        let tail: f64 = run.log[280..].iter().map(|r| r.data).sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn rejects_short_or_mismatched_data() {
        let d = synth_sequence(&SyntheticSpec::new(5, 6, 1)).unwrap();
        assert!(train(&d, &tiny_cfg(1), &mut |_| {}).is_err());
        let run = train(&data(), &tiny_cfg(1), &mut |_| {}).unwrap();
        let other = synth_sequence(&SyntheticSpec::new(40, 7, 1)).unwrap();
        assert!(resume(&run.checkpoint, &other, 2, &mut |_| {}).is_err());
    }

    #[test]
    fn log_records_serialize_with_loss_names() {
        let r = LogRecord {
            step: 3,
            lr: 1e-3,
            data: 1.0,
            nuclear: 2.0,
            cano: 3.0,
            total: 4.0,
            grad_norm: 5.0,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in [
            "step",
            "lr",
            "L_data",
            "L_norm",
            "L_cano",
            "total",
            "grad_norm",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
