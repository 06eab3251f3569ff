use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Array2<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() || p.dim() != state.v[i].dim() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.dim(),
                rhs: g.dim(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::of_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::of_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::of_f64(cfg.lr);
    let eps = T::of_f64(cfg.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = (b1 * *m + (one - b1) * g).flush_subnormal();
            *v = (b2 * *v + (one - b2) * g * g).flush_subnormal();
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn moments_never_go_subnormal() {
        let mut p = vec![Array2::<f32>::zeros((1, 2))];
        let g = vec![ndarray::array![[1e-20f32, 1e-30]]];
        let mut st = AdamState::zeros_like(&p);
        for _ in 0..50 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        for x in st.m[0].iter().chain(st.v[0].iter()) {
            assert!(*x == 0.0 || x.is_normal(), "{x:e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![array![[1.0, -2.0], [0.5, 3.0]]];
        let before = p.clone();
        let mut st = AdamState::zeros_like(&p);
        for _ in 0..5 {
            adam_step(
                &mut p,
                &[Array2::zeros((2, 2))],
                &mut st,
                &AdamConfig::default(),
            )
            .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let g = array![[0.5, -4.0, 1e-3]];
        let mut p = vec![array![[1.0, 1.0, 1.0]]];
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        adam_step(&mut p, &[g.clone()], &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        for j in 0..3 {
            let gj: f64 = g[[0, j]];
            let expected = 1.0 - 0.01 * gj / (gj.abs() + 1e-8);
            assert!((p[0][[0, j]] - expected).abs() < 1e-15);
        }
        assert!((st.m[0][[0, 1]] - 0.1 * -4.0).abs() < 1e-15);
        assert!((st.v[0][[0, 1]] - 0.001 * 16.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![array![[1.5, -0.7, 2.0, 0.3]]];
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        for _ in 0..500 {
            let g = p[0].mapv(|x| 2.0 * x);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        let norm = p[0].mapv(|x: f64| x * x).sum().sqrt();
        assert!(norm < 1e-3, "|x| = {norm}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Array2::<f64>::zeros((2, 2))];
        let mut st = AdamState::zeros_like(&p);
        let err = adam_step(
            &mut p,
            &[Array2::zeros((2, 3))],
            &mut st,
            &AdamConfig::default(),
        );
        assert!(err.is_err());
        assert_eq!(st.step, 0);
    }
}
