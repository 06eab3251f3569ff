//! Reprojection, reshuffled nuclear-norm and canonicalization losses.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{random_rotation, Rotation3};
use crate::model::{Bound, Model, SequenceOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the nuclear-norm term.
    pub alpha: f64,
    /// Weight of the canonicalization term.
    pub lambda: f64,
    /// Random rotations drawn per canonicalization pass.
    pub m_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: 0.003,
            m_samples: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) || self.m_samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights need alpha >= 0, lambda >= 0, m >= 1 (got {}, {}, {})",
                self.alpha, self.lambda, self.m_samples
            )));
        }
        Ok(())
    }
}

/// `(1/L) Σ_i ‖W_i − (R_i S_i)_{xy}‖²_F` for `w: L x 2P`, `rotations: L x 9`,
/// `shapes: L x 3P`.
pub fn loss_data<T: Real>(
    tape: &mut Tape<'_, T>,
    w: Var,
    rotations: Var,
    shapes: Var,
) -> Result<Var> {
    let (len, cols) = tape.shape(w);
    let rotated = tape.rotate_points(rotations, shapes)?;
    let projected = tape.cols(rotated, 0..cols)?;
    let residual = tape.sub(w, projected)?;
    let sq = tape.square(residual);
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::of_f64(1.0 / len.max(1) as f64)))
}

/// Nuclear norm of the reshuffled `L x 3P` chunk.
pub fn loss_nuclear<T: Real>(tape: &mut Tape<'_, T>, shapes: Var) -> Result<Var> {
    tape.nuclear_norm(shapes)
}

pub fn sample_rotations<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<Rotation3> {
    (0..m).map(|_| random_rotation(rng)).collect()
}

/// `(1/(L·M)) Σ_i Σ_j ‖S_i − Ψ(R̂_j S_i)‖²_F` for the given rotations.
pub fn loss_cano_with<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    params: &Bound,
    shapes: Var,
    rotations: &[Rotation3],
) -> Result<Var> {
    let len = tape.shape(shapes).0;
    let canon = model.canonicalize(tape, params, shapes, rotations)?;
    let target = tape.concat_rows(&vec![shapes; rotations.len()])?;
    let diff = tape.sub(target, canon)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(
        total,
        T::of_f64(1.0 / (len * rotations.len()).max(1) as f64),
    ))
}

/// Canonicalization loss with `m` fresh rotations drawn from `rng`.
pub fn loss_cano<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    params: &Bound,
    shapes: Var,
    m: usize,
    rng: &mut R,
) -> Result<Var> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "canonicalization needs m >= 1".into(),
        ));
    }
    let rotations = sample_rotations(rng, m);
    loss_cano_with(tape, model, params, shapes, &rotations)
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub nuclear: f64,
    pub cano: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub data: Var,
    pub nuclear: Var,
    pub cano: Var,
    pub total: Var,
}

/// `L_data + α L_norm + λ L_cano` on one chunk.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    params: &Bound,
    w: Var,
    out: &SequenceOutput,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(LossTerms, LossBreakdown)> {
    weights.validate()?;
    let data = loss_data(tape, w, out.rotations, out.shapes)?;
    let nuclear = loss_nuclear(tape, out.shapes)?;
    let cano = loss_cano(tape, model, params, out.shapes, weights.m_samples, rng)?;
    for (name, v) in [("L_data", data), ("L_norm", nuclear), ("L_cano", cano)] {
        if !tape.scalar_value(v).is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let a = tape.scale(nuclear, T::of_f64(weights.alpha));
    let l = tape.scale(cano, T::of_f64(weights.lambda));
    let total = tape.add(data, a)?;
    let total = tape.add(total, l)?;
    let breakdown = LossBreakdown {
        data: tape.scalar_value(data).as_f64(),
        nuclear: tape.scalar_value(nuclear).as_f64(),
        cano: tape.scalar_value(cano).as_f64(),
        total: tape.scalar_value(total).as_f64(),
    };
    Ok((
        LossTerms {
            data,
            nuclear,
            cano,
            total,
        },
        breakdown,
    ))
}

/// Row-major `L x 9` rotation rows.
pub fn rotation_rows<T: Real>(rotations: &[Rotation3]) -> Array2<T> {
    Array2::from_shape_fn((rotations.len(), 9), |(i, e)| {
        T::of_f64(rotations[i].row_vec()[e])
    })
}
