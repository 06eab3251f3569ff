use nalgebra::DMatrix;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    chunk_observations, make_chunks, perturb_order, ChunkMode, Dataset, Perturbation,
};
use crate::diffcore::Tape;
use crate::metrics::{depth_flip_eval, EvalReport, Metric};
use crate::model::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Normal,
    Shuffle,
    Reverse,
    SingleFrame,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Normal => "normal",
            EvalMode::Shuffle => "shuffle",
            EvalMode::Reverse => "reverse",
            EvalMode::SingleFrame => "single_frame",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            EvalMode::Normal,
            EvalMode::Shuffle,
            EvalMode::Reverse,
            EvalMode::SingleFrame,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown eval mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub metrics: Vec<Metric>,
    pub flip: bool,
    /// Chunk length; the model's capacity when unset.
    pub seq_len: Option<usize>,
    /// Seeds the shuffle permutation.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Normal,
            metrics: Metric::ALL.to_vec(),
            flip: true,
            seq_len: None,
            seed: 0,
        }
    }
}

/// Camera-frame predictions `R_i S_i` (`F x 3P`, original frame order) and the chunk count.
pub fn predict_camera_shapes(
    model: &Model<f32>,
    data: &Dataset,
    mode: EvalMode,
    seq_len: usize,
    seed: u64,
) -> Result<(Array2<f64>, usize)> {
    let p = model.config.points;
    if data.points() != p {
        return Err(Error::SizeConflict(format!(
            "dataset has {} points, model expects {p}",
            data.points()
        )));
    }
    if seq_len > model.config.max_len {
        return Err(Error::SequenceTooLong {
            len: seq_len,
            capacity: model.config.max_len,
        });
    }
    let len = if mode == EvalMode::SingleFrame {
        1
    } else {
        seq_len
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = make_chunks(data.frames(), len, ChunkMode::Eval, &mut rng)?;
    let mut out = Array2::<f64>::zeros((data.frames(), 3 * p));
    for chunk in &plan.chunks {
        let order = match mode {
            EvalMode::Shuffle => perturb_order(chunk, Perturbation::Shuffle, &mut rng),
            EvalMode::Reverse => perturb_order(chunk, Perturbation::Reverse, &mut rng),
            EvalMode::Normal | EvalMode::SingleFrame => chunk.clone(),
        };
        let w = chunk_observations(data, &order).mapv(|x| x as f32);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let wv = tape.leaf(w);
        let o = model.forward_sequence(&mut tape, &bound, wv)?;
        let rot = tape.value(o.rotations);
        let shp = tape.value(o.shapes);
        for (row, &frame) in order.iter().enumerate() {
            for b in 0..3 {
                for j in 0..p {
                    out[[frame, b * p + j]] = (0..3)
                        .map(|a| rot[[row, 3 * b + a]] as f64 * shp[[row, a * p + j]] as f64)
                        .sum();
                }
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("evaluation prediction".into()));
    }
    Ok((out, plan.chunks.len()))
}

fn frames_of(m: &Array2<f64>, p: usize) -> Vec<DMatrix<f64>> {
    m.rows()
        .into_iter()
        .map(|r: ndarray::ArrayView1<f64>| DMatrix::from_fn(3, p, |a, j| r[a * p + j]))
        .collect()
}

/// `RMS(W - proj) / RMS(W)`.
pub fn reprojection_rmse(w: &Array2<f64>, camera: &Array2<f64>) -> f64 {
    let cols = w.ncols();
    let mut num = 0.0;
    let mut den = 0.0;
    for (wr, cr) in w.rows().into_iter().zip(camera.rows()) {
        for c in 0..cols {
            num += (wr[c] - cr[c]).powi(2);
            den += wr[c] * wr[c];
        }
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let gt = data.camera_shapes();
    if gt.is_none() && !opts.metrics.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "3-D metrics {:?} requested but the dataset has no ground truth",
            opts.metrics.iter().map(|m| m.name()).collect::<Vec<_>>()
        )));
    }
    let len = opts.seq_len.unwrap_or(model.config.max_len);
    let (pred, chunks) = predict_camera_shapes(model, data, opts.mode, len, opts.seed)?;
    let p = data.points();
    let mut metrics = Vec::new();
    if let Some(gt) = &gt {
        let (pf, gf) = (frames_of(&pred, p), frames_of(gt, p));
        for &m in &opts.metrics {
            metrics.push(depth_flip_eval(&pf, &gf, m, opts.flip)?);
        }
    }
    Ok(EvalReport {
        mode: opts.mode.name().into(),
        frames: data.frames(),
        points: p,
        chunks,
        flip: opts.flip,
        metrics,
        reprojection_rmse: reprojection_rmse(&data.observations, &pred),
    })
}

/// One report per chunk length, all in normal order.
pub fn length_sweep(
    model: &Model<f32>,
    data: &Dataset,
    lengths: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<(usize, EvalReport)>> {
    if let Some(&bad) = lengths.iter().find(|&&l| l > model.config.max_len) {
        return Err(Error::SequenceTooLong {
            len: bad,
            capacity: model.config.max_len,
        });
    }
    lengths
        .iter()
        .map(|&l| {
            let o = EvalOptions {
                mode: EvalMode::Normal,
                seq_len: Some(l),
                ..opts.clone()
            };
            Ok((l, evaluate(model, data, &o)?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(usize, EvalReport)]) -> String {
    let mut out = String::from("length,mpjpe,stress,e3d,reprojection_rmse\n");
    for (l, r) in rows {
        let cell = |m: Metric| r.mean(m).map(|v| format!("{v:.9e}")).unwrap_or_default();
        out.push_str(&format!(
            "{l},{},{},{},{:.9e}\n",
            cell(Metric::Mpjpe),
            cell(Metric::Stress),
            cell(Metric::E3d),
            r.reprojection_rmse
        ));
    }
    out
}
