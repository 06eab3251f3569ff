//! Central finite-difference checks of tape gradients (64-bit).
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (sampled without replacement).
    pub max_coords: Option<usize>,
    /// Norms below this are treated as zero when forming relative errors.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            abs_floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` for each input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, for every input.
pub fn check_op<F>(f: F, inputs: &[Array2<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let mut g = tape.backward(loss)?;
        vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>()
    };

    let eval = |xs: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let n = x.len();
        let idx: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let cols = x.ncols();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &flat in &idx {
            let (i, j) = (flat / cols, flat % cols);
            let orig = x[[i, j]];
            work[k][[i, j]] = orig + cfg.h;
            let fp = eval(&work)?;
            work[k][[i, j]] = orig - cfg.h;
            let fm = eval(&work)?;
            work[k][[i, j]] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[k][[i, j]];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        coords_checked += idx.len();
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < cfg.abs_floor {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        rel_errors.push(rel);
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_errors,
        max_rel_error,
        coords_checked,
    })
}

/// Result of checking one named operation at several random points.
#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Names accepted by [`op_suite`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "concat_cols",
    "concat_rows",
    "transpose",
    "slice",
    "reshape",
    "sum",
    "mean",
    "relu",
    "softmax",
    "sin",
    "square",
    "sqrt",
    "rodrigues",
    "rotate_points",
    "nuclear_norm",
    "total_loss",
];

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NUCLEAR_TOLERANCE: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

/// Uniform in `±[0.1, 1]`, keeping values clear of the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts `y` against a fixed random weight so every output entry matters.
fn weighted_sum<'a>(t: &mut Tape<'a, f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = t.leaf(uniform(&mut rng, r, c, -1.0, 1.0));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Runs the finite-difference suite for the named ops (all when `filter` is `None`).
pub fn op_suite(filter: Option<&str>, trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    for &name in OP_NAMES.iter().filter(|n| filter.is_none_or(|f| f == **n)) {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let wseed = rng.random();
            let report = check_named(name, &mut rng, wseed, &cfg)?;
            worst = worst.max(report.max_rel_error);
        }
        let tolerance = if name == "nuclear_norm" {
            NUCLEAR_TOLERANCE
        } else {
            OP_TOLERANCE
        };
        out.push(OpCheck {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
    }
    Ok(out)
}

fn check_named(
    name: &str,
    rng: &mut ChaCha8Rng,
    ws: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (r, c) = (rng.random_range(2..6), rng.random_range(2..6));
    let a = uniform(rng, r, c, -1.0, 1.0);
    let b = uniform(rng, r, c, -1.0, 1.0);
    match name {
        "matmul" => {
            let b = uniform(rng, c, 3, -1.0, 1.0);
            check_op(
                |t, x| {
                    let y = t.matmul(x[0], x[1])?;
                    weighted_sum(t, y, ws)
                },
                &[a, b],
                cfg,
            )
        }
        "add" => check_op(
            |t, x| {
                let y = t.add(x[0], x[1])?;
                weighted_sum(t, y, ws)
            },
            &[a, b],
            cfg,
        ),
        "sub" => check_op(
            |t, x| {
                let y = t.sub(x[0], x[1])?;
                weighted_sum(t, y, ws)
            },
            &[a, b],
            cfg,
        ),
        "mul" => check_op(
            |t, x| {
                let y = t.mul(x[0], x[1])?;
                weighted_sum(t, y, ws)
            },
            &[a, b],
            cfg,
        ),
        "add_row" => {
            let row = uniform(rng, 1, c, -1.0, 1.0);
            check_op(
                |t, x| {
                    let y = t.add_row(x[0], x[1])?;
                    weighted_sum(t, y, ws)
                },
                &[a, row],
                cfg,
            )
        }
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            check_op(
                |t, x| {
                    let y = t.scale(x[0], k);
                    weighted_sum(t, y, ws)
                },
                &[a],
                cfg,
            )
        }
        "concat_cols" => {
            let b = uniform(rng, r, 3, -1.0, 1.0);
            check_op(
                |t, x| {
                    let y = t.concat_cols(&[x[0], x[1], x[0]])?;
                    weighted_sum(t, y, ws)
                },
                &[a, b],
                cfg,
            )
        }
        "concat_rows" => {
            let b = uniform(rng, 2, c, -1.0, 1.0);
            check_op(
                |t, x| {
                    let y = t.concat_rows(&[x[1], x[0]])?;
                    weighted_sum(t, y, ws)
                },
                &[a, b],
                cfg,
            )
        }
        "transpose" => check_op(
            |t, x| {
                let y = t.transpose(x[0]);
                weighted_sum(t, y, ws)
            },
            &[a],
            cfg,
        ),
        "slice" => {
            let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
            check_op(
                |t, x| {
                    let y = t.slice(x[0], r0..r, c0..c)?;
                    weighted_sum(t, y, ws)
                },
                &[a],
                cfg,
            )
        }
        "reshape" => check_op(
            |t, x| {
                let y = t.reshape(x[0], (1, r * c))?;
                weighted_sum(t, y, ws)
            },
            &[a],
            cfg,
        ),
        "sum" => check_op(
            |t, x| {
                let y = t.sum(x[0]);
                let z = t.square(y);
                Ok(t.sum(z))
            },
            &[a],
            cfg,
        ),
        "mean" => check_op(
            |t, x| {
                let y = t.mean(x[0]);
                let z = t.sin(y);
                Ok(t.sum(z))
            },
            &[a],
            cfg,
        ),
        "relu" => {
            let a = away_from_zero(rng, r, c);
            check_op(
                |t, x| {
                    let y = t.relu(x[0]);
                    weighted_sum(t, y, ws)
                },
                &[a],
                cfg,
            )
        }
        "softmax" => {
            let a = uniform(rng, r, c, -3.0, 3.0);
            check_op(
                |t, x| {
                    let y = t.softmax(x[0]);
                    weighted_sum(t, y, ws)
                },
                &[a],
                cfg,
            )
        }
        "sin" => check_op(
            |t, x| {
                let y = t.sin(x[0]);
                weighted_sum(t, y, ws)
            },
            &[a.mapv(|v| 3.0 * v)],
            cfg,
        ),
        "square" => check_op(
            |t, x| {
                let y = t.square(x[0]);
                weighted_sum(t, y, ws)
            },
            &[a],
            cfg,
        ),
        "sqrt" => {
            let a = uniform(rng, r, c, 0.5, 2.0);
            check_op(
                |t, x| {
                    let y = t.sqrt(x[0]);
                    weighted_sum(t, y, ws)
                },
                &[a],
                cfg,
            )
        }
        "rodrigues" => {
            let v = uniform(rng, 1, 3, -1.8, 1.8);
            check_op(
                |t, x| {
                    let y = t.rodrigues(x[0])?;
                    weighted_sum(t, y, ws)
                },
                &[v],
                cfg,
            )
        }
        "rotate_points" => {
            let v = uniform(rng, 3, 3, -1.5, 1.5);
            let s = uniform(rng, 3, 12, -1.0, 1.0);
            check_op(
                |t, x| {
                    let rot = t.rodrigues_rows(x[0])?;
                    let y = t.rotate_points(rot, x[1])?;
                    weighted_sum(t, y, ws)
                },
                &[v, s],
                cfg,
            )
        }
        "nuclear_norm" => {
            let m = well_separated(rng, 8, 12);
            check_op(|t, x| t.nuclear_norm(x[0]), &[m], cfg)
        }
        "total_loss" => check_total_loss(rng, cfg),
        other => Err(crate::error::Error::InvalidArgument(format!(
            "unknown op {other:?}"
        ))),
    }
}

/// Full narrow model forward plus total loss, differentiated with respect to
/// every parameter array and the input frames.
fn check_total_loss(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    use crate::losses::{total_loss, LossWeights};
    use crate::model::{Bound, Model, ModelConfig};

    let (points, len) = (3, rng.random_range(2..5));
    let mut model = Model::<f64>::new(ModelConfig::tiny(points, 4), rng)?;
    // Ψ starts as the identity; perturb its last layer so that branch is exercised.
    let last = *model.canon.layers.last().expect("canon layers");
    model.params.values[last.weight.0].mapv_inplace(|_| rng.random_range(-0.2..0.2));
    let mut inputs = model.params.values.clone();
    inputs.push(uniform(rng, len, 2 * points, -1.0, 1.0));
    let weights = LossWeights {
        alpha: 0.3,
        lambda: 0.5,
        m_samples: 2,
    };
    let loss_seed: u64 = rng.random();
    let n = inputs.len() - 1;
    check_op(
        |t, xs| {
            let p = Bound::from_vars(xs[..n].to_vec());
            let out = model.forward_sequence(t, &p, xs[n])?;
            let mut r = ChaCha8Rng::seed_from_u64(loss_seed);
            Ok(total_loss(t, &model, &p, xs[n], &out, &weights, &mut r)?
                .0
                .total)
        },
        &inputs,
        cfg,
    )
}

/// Random matrix whose singular values are pairwise separated by at least 5%.
fn well_separated(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    loop {
        let m = uniform(rng, r, c, -1.0, 1.0);
        let dm = nalgebra::DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
        let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv.windows(2).all(|w| w[0] - w[1] > 0.05 * sv[0]) && sv[sv.len() - 1] > 0.05 * sv[0] {
            return m;
        }
    }
}
