//! Exact (64-bit) rotation and shape geometry.
//!
//! Shapes are kept in two layouts. The stacked layout is `3F x P`, one
//! `3 x P` block per frame. The reshuffled layout is `F x 3P`, where row `i`
//! holds frame `i` as `[x_0..x_{P-1}, y_0..y_{P-1}, z_0..z_{P-1}]`.

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Angles below this use the second-order series of the exponential map.
pub const SMALL_ANGLE: f64 = 1e-8;

/// A 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking orthonormality and unit determinant to `tol`.
    pub fn try_from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let r = Self(m);
        let (orth, det) = r.invariant_errors();
        if orth > tol || det > tol {
            return Err(Error::InvalidArgument(format!(
                "not a rotation: |RtR - I| = {orth:e}, |det - 1| = {det:e}"
            )));
        }
        Ok(r)
    }

    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    /// Returns `(max |RᵀR - I|, |det R - 1|)`.
    pub fn invariant_errors(&self) -> (f64, f64) {
        let orth = (self.0.transpose() * self.0 - Matrix3::identity())
            .abs()
            .max();
        let det = (self.0.determinant() - 1.0).abs();
        (orth, det)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (orth, det) = self.invariant_errors();
        orth <= tol && det <= tol
    }

    /// Row-major flattening, used by the rank oracle.
    pub fn row_vec(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

/// Axis-angle vector: direction is the axis, norm is the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Closed-form exponential map `exp([v]x)`.
pub fn rodrigues_exp(v: &AxisAngle) -> Rotation3 {
    let k = skew(&v.0);
    let k2 = k * k;
    let theta = v.angle();
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k2 * 0.5
    } else {
        Matrix3::identity()
            + k * (theta.sin() / theta)
            + k2 * ((1.0 - theta.cos()) / (theta * theta))
    };
    Rotation3(m)
}

/// Orthographic camera: the first two rows of `r * s_frame`.
pub fn project_orthographic(r: &Rotation3, s_frame: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s_frame.nrows() != 3 {
        return Err(Error::SizeConflict(format!(
            "frame has {} rows, rotation expects 3",
            s_frame.nrows()
        )));
    }
    let rows = r.0.fixed_rows::<2>(0);
    Ok(DMatrix::from_fn(2, s_frame.ncols(), |i, j| {
        (0..3).map(|k| rows[(i, k)] * s_frame[(k, j)]).sum()
    }))
}

/// Stacked `3F x P` shape sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedShape {
    s: DMatrix<f64>,
}

impl StackedShape {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "stacked shape has {} rows, not divisible by 3",
                s.nrows()
            )));
        }
        Ok(Self { s })
    }

    pub fn from_frames(frames: &[DMatrix<f64>]) -> Result<Self> {
        let p = frames.first().map_or(0, |f| f.ncols());
        let mut s = DMatrix::zeros(3 * frames.len(), p);
        for (i, f) in frames.iter().enumerate() {
            if f.nrows() != 3 || f.ncols() != p {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} is {}x{}, expected 3x{p}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            s.view_mut((3 * i, 0), (3, p)).copy_from(f);
        }
        Ok(Self { s })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.s
    }

    pub fn frames(&self) -> usize {
        self.s.nrows() / 3
    }

    pub fn points(&self) -> usize {
        self.s.ncols()
    }

    pub fn frame(&self, i: usize) -> DMatrix<f64> {
        self.s.rows(3 * i, 3).into_owned()
    }
}

/// Reshuffled `F x 3P` shape sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshuffledShape {
    s_sharp: DMatrix<f64>,
}

impl ReshuffledShape {
    pub fn new(s_sharp: DMatrix<f64>) -> Result<Self> {
        if s_sharp.ncols() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "reshuffled shape has {} columns, not divisible by 3",
                s_sharp.ncols()
            )));
        }
        Ok(Self { s_sharp })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s_sharp
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.s_sharp
    }

    pub fn frames(&self) -> usize {
        self.s_sharp.nrows()
    }

    pub fn points(&self) -> usize {
        self.s_sharp.ncols() / 3
    }
}

pub fn reshuffle(s: &StackedShape) -> ReshuffledShape {
    let (f, p) = (s.frames(), s.points());
    let m = &s.s;
    let s_sharp = DMatrix::from_fn(f, 3 * p, |i, c| m[(3 * i + c / p, c % p)]);
    ReshuffledShape { s_sharp }
}

pub fn unshuffle(s_sharp: &ReshuffledShape) -> StackedShape {
    let (f, p) = (s_sharp.frames(), s_sharp.points());
    let m = &s_sharp.s_sharp;
    let s = DMatrix::from_fn(3 * f, p, |r, j| m[(r / 3, (r % 3) * p + j)]);
    StackedShape { s }
}

/// Replaces every frame `S_i` with `Q_iᵀ S_i`.
pub fn apply_ambiguity(s: &StackedShape, q: &[Rotation3]) -> Result<StackedShape> {
    if q.len() != s.frames() {
        return Err(Error::SizeConflict(format!(
            "{} ambiguity rotations for {} frames",
            q.len(),
            s.frames()
        )));
    }
    let mut out = s.s.clone();
    for (i, qi) in q.iter().enumerate() {
        let block = qi.0.transpose() * s.s.rows(3 * i, 3);
        out.rows_mut(3 * i, 3).copy_from(&block);
    }
    Ok(StackedShape { s: out })
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return Rotation3(uq.to_rotation_matrix().into_inner());
        }
    }
}

/// Spherical interpolation between two rotations, `t` in `[0, 1]`.
pub fn slerp(a: &Rotation3, b: &Rotation3, t: f64) -> Rotation3 {
    let qa = UnitQuaternion::from_matrix(&a.0);
    let qb = UnitQuaternion::from_matrix(&b.0);
    Rotation3(qa.slerp(&qb, t).to_rotation_matrix().into_inner())
}

/// Subtracts each frame's per-row mean over points (columns).
pub fn center_frame(frame: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = frame.clone();
    let p = frame.ncols();
    if p == 0 {
        return out;
    }
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / p as f64;
        row.add_scalar_mut(-mean);
    }
    out
}

pub fn center_frames(frames: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    frames.iter().map(center_frame).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(
            rodrigues_exp(&AxisAngle::new(0.0, 0.0, 0.0)),
            Rotation3::identity()
        );
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues_exp(&AxisAngle::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_quaternion_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let axis = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            )
            .normalize();
            let angle = rng.random_range(0.0..=PI);
            let r = rodrigues_exp(&AxisAngle(axis * angle));
            assert!(r.is_valid(1e-10));
            let reference = UnitQuaternion::from_scaled_axis(axis * angle).to_rotation_matrix();
            assert!((r.matrix() - reference.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rodrigues_series_branch_is_continuous() {
        let v = Vector3::new(3e-9, -2e-9, 1e-9);
        let a = rodrigues_exp(&AxisAngle(v));
        let b = UnitQuaternion::from_scaled_axis(v).to_rotation_matrix();
        assert!((a.matrix() - b.matrix()).abs().max() < 1e-16);
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_matrix(&mut rng, 3, 5);
        let w = project_orthographic(&Rotation3::identity(), &s).unwrap();
        assert_eq!(w, s.rows(0, 2).into_owned());

        let rz = rodrigues_exp(&AxisAngle::new(0.0, 0.0, FRAC_PI_2));
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = project_orthographic(&rz, &s).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        assert!((w - expected).abs().max() < 1e-15);

        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let s = random_matrix(&mut rng, 3, 7);
            let w = project_orthographic(&r, &s).unwrap();
            assert!(w.norm() <= s.norm() + 1e-12);
        }
    }

    #[test]
    fn projection_rejects_bad_frame() {
        let err = project_orthographic(&Rotation3::identity(), &DMatrix::zeros(2, 4)).unwrap_err();
        assert!(err.to_string().contains("shape/rotation size conflict"));
    }

    #[test]
    fn projection_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_rotation(&mut rng);
        let s1 = random_matrix(&mut rng, 3, 6);
        let s2 = random_matrix(&mut rng, 3, 6);
        let (a, b) = (1.7, -0.3);
        let lhs = project_orthographic(&r, &(&s1 * a + &s2 * b)).unwrap();
        let rhs =
            project_orthographic(&r, &s1).unwrap() * a + project_orthographic(&r, &s2).unwrap() * b;
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn reshuffle_examples() {
        let s =
            StackedShape::new(DMatrix::from_row_slice(3, 2, &[1., 2., 3., 4., 5., 6.])).unwrap();
        let sharp = reshuffle(&s);
        assert_eq!(
            sharp.matrix(),
            &DMatrix::from_row_slice(1, 6, &[1., 2., 3., 4., 5., 6.])
        );
        assert_eq!(unshuffle(&sharp), s);

        let z = StackedShape::new(DMatrix::zeros(6, 4)).unwrap();
        assert_eq!(reshuffle(&z).matrix(), &DMatrix::zeros(2, 12));
        let zs = ReshuffledShape::new(DMatrix::zeros(2, 12)).unwrap();
        assert_eq!(unshuffle(&zs).matrix(), &DMatrix::zeros(6, 4));
    }

    #[test]
    fn reshuffle_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = rng.random_range(1..8);
            let p = rng.random_range(1..10);
            let s = StackedShape::new(random_matrix(&mut rng, 3 * f, p)).unwrap();
            assert_eq!(unshuffle(&reshuffle(&s)), s);
            let sharp = ReshuffledShape::new(random_matrix(&mut rng, f, 3 * p)).unwrap();
            assert_eq!(reshuffle(&unshuffle(&sharp)), sharp);
        }
    }

    #[test]
    fn indivisible_layouts_rejected() {
        assert!(ReshuffledShape::new(DMatrix::zeros(2, 7)).is_err());
        assert!(StackedShape::new(DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn ambiguity_identity_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = StackedShape::new(random_matrix(&mut rng, 9, 4)).unwrap();
        let out = apply_ambiguity(&s, &[Rotation3::identity(); 3]).unwrap();
        assert_eq!(out, s);
        assert!(apply_ambiguity(&s, &[Rotation3::identity(); 2]).is_err());
    }

    #[test]
    fn random_rotation_is_valid_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let ra = random_rotation(&mut a);
            assert!(ra.is_valid(1e-10));
            assert_eq!(ra, random_rotation(&mut b));
        }
    }

    #[test]
    fn haar_mean_trace_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| random_rotation(&mut rng).matrix().trace())
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.05, "mean trace {mean}");
    }

    #[test]
    fn centering_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_matrix(&mut rng, 3, 9);
        let c = center_frame(&f);
        for row in c.row_iter() {
            assert!(row.sum().abs() / 9.0 < 1e-12);
        }
        assert!((center_frame(&c) - &c).abs().max() < 1e-15);

        let constant = DMatrix::from_fn(2, 5, |i, _| i as f64 + 0.5);
        assert_eq!(center_frame(&constant), DMatrix::zeros(2, 5));
    }

    #[test]
    fn centering_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_matrix(&mut rng, 3, 6);
        let t = nalgebra::DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let shifted = DMatrix::from_fn(3, 6, |i, j| f[(i, j)] + t[i]);
        assert!((center_frame(&shifted) - center_frame(&f)).abs().max() < 1e-12);
    }
}
