//! Numerical checks of the rank-inflation result: nine signed-permutation basis
//! rotations, strict-rank testing, and Monte-Carlo rank experiments.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    block_component, independent_rotations, synth_sequence, RotationMode, SyntheticSpec,
};
use crate::geometry::Rotation3;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;

pub fn m1(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(x, y, -z, y, z, -x, z, x, -y)
}

pub fn m2(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(-y, z, x, -z, x, y, -x, y, z)
}

pub fn m3(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(z, -x, y, x, -y, z, y, -z, x)
}

/// `M_k(e_1), M_k(e_2), M_k(e_3)` for `k = 1, 2, 3`, in that order.
pub fn basis_rotations() -> [Rotation3; 9] {
    let templates: [fn(f64, f64, f64) -> Matrix3<f64>; 3] = [m1, m2, m3];
    let mut out = [Rotation3::identity(); 9];
    for (k, m) in templates.iter().enumerate() {
        out[3 * k] = Rotation3::from_matrix_unchecked(m(1.0, 0.0, 0.0));
        out[3 * k + 1] = Rotation3::from_matrix_unchecked(m(0.0, 1.0, 0.0));
        out[3 * k + 2] = Rotation3::from_matrix_unchecked(m(0.0, 0.0, 1.0));
    }
    out
}

/// Coefficients over [`basis_rotations`], already halved.
pub fn decompose_matrix(r: &Matrix3<f64>) -> [f64; 9] {
    let e = |i: usize, j: usize| r[(i - 1, j - 1)];
    [
        e(1, 1) + e(3, 2),
        e(1, 2) + e(2, 1),
        e(2, 2) + e(3, 1),
        e(1, 3) + e(2, 2),
        e(2, 3) + e(3, 2),
        e(1, 2) + e(3, 3),
        e(2, 1) + e(3, 3),
        e(1, 3) + e(3, 1),
        e(1, 1) + e(2, 3),
    ]
    .map(|c| c / 2.0)
}

pub fn decompose_rotation(r: &Rotation3) -> [f64; 9] {
    decompose_matrix(r.matrix())
}

pub fn reconstruct(coeffs: &[f64; 9]) -> Matrix3<f64> {
    basis_rotations()
        .iter()
        .zip(coeffs)
        .fold(Matrix3::zeros(), |acc, (b, c)| acc + b.matrix() * *c)
}

/// `9 x 9` matrix whose columns are the row-straightened basis elements.
pub fn basis_matrix() -> DMatrix<f64> {
    let b = basis_rotations();
    DMatrix::from_fn(9, 9, |e, k| b[k].row_vec()[e])
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let svd = m
        .clone()
        .try_svd(false, false, 1e-15, 10_000)
        .ok_or_else(|| Error::SvdFailure {
            rows: m.nrows(),
            cols: m.ncols(),
            max_abs: m.amax(),
            finite: m.iter().all(|x| x.is_finite()),
        })?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Count of singular values above `rel_tol * sigma_max`.
pub fn numeric_rank(m: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    match sv.first() {
        Some(&top) if top > 0.0 => Ok(sv.iter().filter(|&&s| s > rel_tol * top).count()),
        _ => Ok(0),
    }
}

/// Removes `floor(eps F)` random rows, `trials` times; false if any removal lowers the rank.
pub fn strict_rank_check<R: Rng + ?Sized>(
    s_sharp: &DMatrix<f64>,
    eps: f64,
    trials: usize,
    rel_tol: f64,
    rng: &mut R,
) -> Result<bool> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1)")));
    }
    let f = s_sharp.nrows();
    let remove = (eps * f as f64).floor() as usize;
    if remove == 0 || remove >= f {
        return Ok(true);
    }
    let full = numeric_rank(s_sharp, rel_tol)?;
    for _ in 0..trials {
        let mut drop = vec![false; f];
        for i in sample(rng, f, remove).iter() {
            drop[i] = true;
        }
        let keep: Vec<usize> = (0..f).filter(|&i| !drop[i]).collect();
        if numeric_rank(&s_sharp.select_rows(&keep), rel_tol)? < full {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Frame-wise `Q_i^T S_i` in the `F x 3P` row layout.
pub fn rotate_rows(s_sharp: &DMatrix<f64>, q: &[Rotation3]) -> Result<DMatrix<f64>> {
    if q.len() != s_sharp.nrows() || s_sharp.ncols() % 3 != 0 {
        return Err(Error::SizeConflict(format!(
            "{} rotations for a {}x{} reshuffled shape",
            q.len(),
            s_sharp.nrows(),
            s_sharp.ncols()
        )));
    }
    let p = s_sharp.ncols() / 3;
    let mut out = DMatrix::zeros(s_sharp.nrows(), s_sharp.ncols());
    for (i, qi) in q.iter().enumerate() {
        let m = qi.matrix();
        for b in 0..3 {
            for j in 0..p {
                out[(i, b * p + j)] = (0..3).map(|a| m[(a, b)] * s_sharp[(i, a * p + j)]).sum();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub frames: usize,
    pub points: usize,
    pub components: usize,
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    pub base_ranks: Vec<usize>,
    pub ranks: Vec<usize>,
    /// Inclusive bounds on the ambiguous rank.
    pub expected_low: usize,
    pub expected_high: usize,
    pub violations: usize,
}

impl RankReport {
    pub fn min_rank(&self) -> usize {
        self.ranks.iter().copied().min().unwrap_or(0)
    }

    pub fn max_rank(&self) -> usize {
        self.ranks.iter().copied().max().unwrap_or(0)
    }
}

/// Inclusive rank interval for `s` ambiguity components over a rank-`k` sequence.
pub fn expected_bounds(k: usize, s: usize) -> (usize, usize) {
    match s {
        0 | 1 => (k, k),
        2..=9 => ((s - 1) * k + 1, s * k),
        _ => (9 * k, 9 * k),
    }
}

pub fn theorem1_experiment(
    k: usize,
    frames: usize,
    points: usize,
    s: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<RankReport> {
    if k == 0 || s == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "rank, components and trials must be positive".into(),
        ));
    }
    if 9 * k > frames.min(3 * points) {
        return Err(Error::InvalidArgument(format!(
            "9K = {} exceeds min(F, 3P) = {}; saturation would be unobservable",
            9 * k,
            frames.min(3 * points)
        )));
    }
    if s * k > frames {
        return Err(Error::InvalidArgument(format!(
            "{s} components cannot each cover {k} of {frames} frames"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (low, high) = expected_bounds(k, s);
    let mut report = RankReport {
        rank: k,
        frames,
        points,
        components: s,
        trials,
        tol,
        seed,
        base_ranks: Vec::with_capacity(trials),
        ranks: Vec::with_capacity(trials),
        expected_low: low,
        expected_high: high,
        violations: 0,
    };
    for _ in 0..trials {
        let spec = SyntheticSpec {
            rotation_mode: RotationMode::Smooth,
            seed: master.random(),
            ..SyntheticSpec::new(frames, points, k)
        };
        let shapes = synth_sequence(&spec)?
            .shapes
            .expect("synthetic data has shapes");
        let s_sharp = DMatrix::from_fn(frames, 3 * points, |i, j| shapes[[i, j]]);
        let comps = independent_rotations(&mut master, s);
        let q: Vec<Rotation3> = (0..frames)
            .map(|t| comps[block_component(t, frames, s)])
            .collect();
        let r0 = numeric_rank(&s_sharp, tol)?;
        let r1 = numeric_rank(&rotate_rows(&s_sharp, &q)?, tol)?;
        let ok = r1 >= low && r1 <= high && (s > 1 || r0 == k);
        if !ok {
            report.violations += 1;
        }
        report.base_ranks.push(r0);
        report.ranks.push(r1);
    }
    Ok(report)
}

pub const SUMMARY_HEADER: &str = "s,min_rank,max_rank,expected_low,expected_high,violations";

/// One CSV row per report; `expected_low` is the exclusive lower bound as printed, `(s-1)K`.
pub fn summary_csv(reports: &[RankReport]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in reports {
        let low = if r.components == 1 || r.components > 9 {
            r.expected_low
        } else {
            r.expected_low - 1
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.components,
            r.min_rank(),
            r.max_rank(),
            low,
            r.expected_high,
            r.violations
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_ambiguity, random_rotation, reshuffle, StackedShape};
    use rand_distr::StandardNormal;

    #[test]
    fn first_basis_element_as_printed() {
        let b = basis_rotations();
        assert_eq!(
            *b[0].matrix(),
            Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn basis_elements_are_rotations() {
        for b in basis_rotations() {
            assert!(b.is_valid(1e-12));
            assert!((b.matrix().determinant() - 1.0).abs() < 1e-12);
            assert!(b.matrix().iter().all(|&x| x == 0.0 || x.abs() == 1.0));
        }
        assert_eq!(numeric_rank(&basis_matrix(), DEFAULT_TOL).unwrap(), 9);
    }

    #[test]
    fn decomposition_reconstructs() {
        assert!(
            (reconstruct(&decompose_rotation(&Rotation3::identity())) - Matrix3::identity()).norm()
                < 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            worst = worst.max((reconstruct(&decompose_rotation(&r)) - r.matrix()).norm());
        }
        assert!(worst < 1e-10, "{worst}");
        for b in basis_rotations() {
            assert_eq!(reconstruct(&decompose_rotation(&b)), *b.matrix());
        }
    }

    #[test]
    fn decomposition_is_the_unique_basis_solve() {
        // the formulas must agree with solving the 9x9 linear system directly
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lu = basis_matrix().lu();
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let rhs = DMatrix::from_row_slice(9, 1, &r.row_vec());
            let solved = lu.solve(&rhs).unwrap();
            let printed = decompose_rotation(&r);
            for k in 0..9 {
                assert!((solved[k] - printed[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numeric_rank(&DMatrix::zeros(4, 5), DEFAULT_TOL).unwrap(), 0);
        assert_eq!(
            numeric_rank(&DMatrix::identity(6, 6), DEFAULT_TOL).unwrap(),
            6
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DMatrix::from_fn(7, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = DMatrix::from_fn(1, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(numeric_rank(&(u * v), DEFAULT_TOL).unwrap(), 1);
    }

    #[test]
    fn rank_ignores_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(3, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = a * b;
        let rows: Vec<usize> = vec![7, 2, 5, 0, 1, 6, 4, 3];
        let cols: Vec<usize> = vec![9, 0, 8, 1, 7, 2, 6, 3, 5, 4];
        let pm = m.select_rows(&rows).select_columns(&cols);
        assert_eq!(numeric_rank(&m, DEFAULT_TOL).unwrap(), 3);
        assert_eq!(numeric_rank(&pm, DEFAULT_TOL).unwrap(), 3);
    }

    #[test]
    fn strict_rank_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = synth_sequence(&SyntheticSpec {
            seed: 4,
            ..SyntheticSpec::new(60, 20, 3)
        })
        .unwrap();
        let s = d.shapes.unwrap();
        let m = DMatrix::from_fn(60, 60, |i, j| s[[i, j]]);
        assert!(strict_rank_check(&m, 0.1, 50, DEFAULT_TOL, &mut rng).unwrap());

        let mut adversarial = DMatrix::zeros(20, 6);
        adversarial[(3, 0)] = 1.0;
        adversarial[(11, 4)] = 2.0;
        assert!(!strict_rank_check(&adversarial, 0.5, 50, DEFAULT_TOL, &mut rng).unwrap());

        assert!(strict_rank_check(
            &DMatrix::from_element(1, 3, 1.0),
            0.5,
            50,
            DEFAULT_TOL,
            &mut rng
        )
        .unwrap());
        assert!(strict_rank_check(&m, 0.0, 50, DEFAULT_TOL, &mut rng).is_err());
    }

    #[test]
    fn rotate_rows_matches_stacked_ambiguity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<DMatrix<f64>> = (0..4)
            .map(|_| DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let stacked = StackedShape::from_frames(&frames).unwrap();
        let q: Vec<Rotation3> = (0..4).map(|_| random_rotation(&mut rng)).collect();
        let expected = reshuffle(&apply_ambiguity(&stacked, &q).unwrap());
        let got = rotate_rows(reshuffle(&stacked).matrix(), &q).unwrap();
        assert!((got - expected.matrix()).amax() < 1e-14);
    }

    #[test]
    fn global_rotation_keeps_rank_and_per_frame_raises_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = synth_sequence(&SyntheticSpec {
            seed: 6,
            ..SyntheticSpec::new(40, 12, 2)
        })
        .unwrap();
        let s = d.shapes.unwrap();
        let m = DMatrix::from_fn(40, 36, |i, j| s[[i, j]]);
        let g = random_rotation(&mut rng);
        assert_eq!(
            numeric_rank(&rotate_rows(&m, &vec![g; 40]).unwrap(), DEFAULT_TOL).unwrap(),
            2
        );
        let q: Vec<Rotation3> = (0..40).map(|_| random_rotation(&mut rng)).collect();
        assert!(numeric_rank(&rotate_rows(&m, &q).unwrap(), DEFAULT_TOL).unwrap() > 2);
    }

    #[test]
    fn experiment_bounds_hold() {
        for s in [1, 2, 4, 9] {
            let r = theorem1_experiment(3, 60, 20, s, 5, DEFAULT_TOL, 11).unwrap();
            assert_eq!(r.violations, 0, "s = {s}: {:?}", r.ranks);
            assert!(r.base_ranks.iter().all(|&b| b == 3));
        }
        let r = theorem1_experiment(3, 120, 20, 12, 3, DEFAULT_TOL, 11).unwrap();
        assert!(r.ranks.iter().all(|&x| x == 27));
    }

    #[test]
    fn experiment_is_deterministic_and_checks_preconditions() {
        let a = theorem1_experiment(2, 40, 10, 3, 4, DEFAULT_TOL, 7).unwrap();
        let b = theorem1_experiment(2, 40, 10, 3, 4, DEFAULT_TOL, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(theorem1_experiment(3, 20, 20, 2, 1, DEFAULT_TOL, 0).is_err());
        assert!(theorem1_experiment(3, 60, 5, 2, 1, DEFAULT_TOL, 0).is_err());
        assert!(theorem1_experiment(3, 60, 20, 0, 1, DEFAULT_TOL, 0).is_err());
    }

    #[test]
    fn summary_has_one_row_per_setting() {
        let reports: Vec<RankReport> = [1, 3]
            .iter()
            .map(|&s| theorem1_experiment(2, 40, 10, s, 2, DEFAULT_TOL, 1).unwrap())
            .collect();
        let csv = summary_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines[1], "1,2,2,2,2,0");
        assert_eq!(lines[2], "3,6,6,4,6,0");
    }
}
