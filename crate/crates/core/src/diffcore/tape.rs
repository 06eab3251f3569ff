use std::borrow::Cow;
use std::ops::Range;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::Real;
use crate::error::{Error, Result};
use crate::geometry::{rodrigues_exp, AxisAngle, SMALL_ANGLE};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Slice(Var, Range<usize>, Range<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Softmax(Var),
    Sin(Var),
    Square(Var),
    Sqrt(Var),
    /// `n x 3` axis-angle rows to `n x 9` row-major rotations; holds the
    /// per-row `9 x 3` Jacobians stacked as `9n x 3`.
    Rodrigues(Var, Array2<T>),
    /// Per-row rotation of reshuffled shapes by row-major `n x 9` rotations.
    RotatePoints(Var, Var),
    /// Holds the `U Vᵀ` subgradient.
    NuclearNorm(Var, Array2<T>),
}

#[derive(Debug)]
struct Node<'p, T: Real> {
    value: Cow<'p, Array2<T>>,
    op: Op<T>,
}

/// Records operations for one forward/backward pass.
///
/// Parameter leaves may borrow their values for the lifetime `'p`, so binding
/// a large model to a fresh tape does not copy any weights.
#[derive(Debug, Default)]
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materialized as zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Array2<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn dims<T>(a: &Array2<T>) -> (usize, usize) {
    a.dim()
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Array2<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Leaf holding its own value (inputs, constants).
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.owned(value, Op::Leaf)
    }

    /// Leaf borrowing a parameter array.
    pub fn param(&mut self, value: &'p Array2<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.owned(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.owned(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.owned(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.owned(v, Op::Mul(a, b)))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a) + self.value(b);
        Ok(self.owned(v, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.owned(v, Op::Scale(a, c))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.owned(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.owned(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.owned(v, Op::Transpose(a))
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let sa = self.shape(a);
        if rows.start > rows.end || cols.start > cols.end || rows.end > sa.0 || cols.end > sa.1 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: sa,
                rhs: (rows.end, cols.end),
            });
        }
        let v = self
            .value(a)
            .slice(s![rows.clone(), cols.clone()])
            .to_owned();
        Ok(self.owned(v, Op::Slice(a, rows, cols)))
    }

    pub fn rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let c = self.shape(a).1;
        self.slice(a, rows, 0..c)
    }

    pub fn cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let r = self.shape(a).0;
        self.slice(a, 0..r, cols)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Result<Var> {
        let sa = self.shape(a);
        if sa.0 * sa.1 != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: sa,
                rhs: shape,
            });
        }
        let flat: Vec<T> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("element count checked");
        Ok(self.owned(v, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.owned(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::of_f64(x.len().max(1) as f64);
        let v = Array2::from_elem((1, 1), x.sum() / n);
        self.owned(v, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.owned(v, Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row
                .iter()
                .copied()
                .fold(T::min_value().unwrap(), |acc, x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.owned(v, Op::Softmax(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sin());
        self.owned(v, Op::Sin(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.owned(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.owned(v, Op::Sqrt(a))
    }

    /// Exponential map of a single `1 x 3` (or `3 x 1`) axis-angle vector to a `3 x 3` rotation.
    pub fn rodrigues(&mut self, v: Var) -> Result<Var> {
        let sv = self.shape(v);
        if sv.0 * sv.1 != 3 {
            return Err(Error::ShapeMismatch {
                op: "rodrigues",
                lhs: sv,
                rhs: (1, 3),
            });
        }
        let row = self.reshape(v, (1, 3))?;
        let rows = self.rodrigues_rows(row)?;
        self.reshape(rows, (3, 3))
    }

    /// Exponential map applied to each row of an `n x 3` matrix, giving `n x 9`
    /// row-major rotations.
    pub fn rodrigues_rows(&mut self, v: Var) -> Result<Var> {
        let sv = self.shape(v);
        if sv.1 != 3 {
            return Err(Error::ShapeMismatch {
                op: "rodrigues_rows",
                lhs: sv,
                rhs: (sv.0, 3),
            });
        }
        let n = sv.0;
        let mut out = Array2::zeros((n, 9));
        let mut jac = Array2::zeros((9 * n, 3));
        for (i, row) in self.value(v).rows().into_iter().enumerate() {
            let w = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()];
            let (r, j) = rodrigues_with_jacobian(w);
            for e in 0..9 {
                out[[i, e]] = T::of_f64(r[e]);
                for k in 0..3 {
                    jac[[9 * i + e, k]] = T::of_f64(j[e][k]);
                }
            }
        }
        Ok(self.owned(out, Op::Rodrigues(v, jac)))
    }

    /// `out[i] = reshuffle(R_i · unshuffle(shapes[i]))` with `R_i` the
    /// row-major rotation in `rot[i]`.
    pub fn rotate_points(&mut self, rot: Var, shapes: Var) -> Result<Var> {
        let (sr, ss) = (self.shape(rot), self.shape(shapes));
        if sr.1 != 9 || sr.0 != ss.0 || ss.1 % 3 != 0 {
            return Err(Error::ShapeMismatch {
                op: "rotate_points",
                lhs: sr,
                rhs: ss,
            });
        }
        let p = ss.1 / 3;
        let (r, s) = (self.value(rot), self.value(shapes));
        let mut out = Array2::zeros(ss);
        for i in 0..ss.0 {
            for b in 0..3 {
                for a in 0..3 {
                    let c = r[[i, 3 * b + a]];
                    for j in 0..p {
                        out[[i, b * p + j]] += c * s[[i, a * p + j]];
                    }
                }
            }
        }
        Ok(self.owned(out, Op::RotatePoints(rot, shapes)))
    }

    /// Sum of singular values. The backward pass uses the `U Vᵀ` subgradient
    /// of the thin SVD.
    pub fn nuclear_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dim();
        let dm = DMatrix::from_fn(m, n, |i, j| x[[i, j]].as_f64());
        let svd = dm
            .clone()
            .try_svd(true, true, 1e-15, 10_000)
            .ok_or_else(|| Error::SvdFailure {
                rows: m,
                cols: n,
                max_abs: dm.abs().max(),
                finite: dm.iter().all(|v| v.is_finite()),
            })?;
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let uvt = u * vt;
        let value = svd.singular_values.iter().sum::<f64>();
        let sub = Array2::from_shape_fn((m, n), |(i, j)| T::of_f64(uvt[(i, j)]));
        let out = Array2::from_elem((1, 1), T::of_f64(value));
        Ok(self.owned(out, Op::NuclearNorm(a, sub)))
    }

    /// Reverse sweep from a scalar `loss`. Returns leaf gradients and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let sl = self.shape(loss);
        if sl != (1, 1) {
            return Err(Error::NonScalarLoss(sl));
        }
        let n = self.nodes.len();
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|nd| dims(&nd.value)).collect();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| -> &Array2<T> { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = shapes[p.0].1;
                        accumulate(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = shapes[p.0].0;
                        accumulate(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().as_standard_layout().into_owned());
                }
                Op::Slice(a, rows, cols) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    ga.slice_mut(s![rows.clone(), cols.clone()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let flat: Vec<T> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shapes[a.0], flat).expect("reshape backward");
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, Array2::from_elem(shapes[a.0], g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let (r, c) = shapes[a.0];
                    let k = g[[0, 0]] / T::of_f64((r * c).max(1) as f64);
                    accumulate(&mut grads, *a, Array2::from_elem((r, c), k));
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|gi, &x| {
                        if x <= T::zero() {
                            *gi = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * &**y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|gi, &yi| *gi -= yi * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = &g * &val(*a).mapv(|x| x.cos());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = T::of_f64(2.0);
                    let ga = &g * &val(*a).mapv(|x| two * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let two = T::of_f64(2.0);
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&*node.value)
                        .for_each(|gi, &y| *gi /= two * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Rodrigues(a, jac) => {
                    let n = shapes[a.0].0;
                    let mut ga = Array2::zeros((n, 3));
                    for i in 0..n {
                        for e in 0..9 {
                            let ge = g[[i, e]];
                            for k in 0..3 {
                                ga[[i, k]] += ge * jac[[9 * i + e, k]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RotatePoints(rot, shp) => {
                    let (r, sv) = (val(*rot), val(*shp));
                    let (n, w) = shapes[shp.0];
                    let p = w / 3;
                    let mut gr = Array2::zeros((n, 9));
                    let mut gs = Array2::zeros((n, w));
                    for i in 0..n {
                        for b in 0..3 {
                            for a in 0..3 {
                                let c = r[[i, 3 * b + a]];
                                let mut acc = T::zero();
                                for j in 0..p {
                                    let gij = g[[i, b * p + j]];
                                    acc += gij * sv[[i, a * p + j]];
                                    gs[[i, a * p + j]] += c * gij;
                                }
                                gr[[i, 3 * b + a]] = acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *rot, gr);
                    accumulate(&mut grads, *shp, gs);
                }
                Op::NuclearNorm(a, sub) => {
                    accumulate(&mut grads, *a, sub * g[[0, 0]]);
                }
            }
        }

        for (i, nd) in self.nodes.iter().enumerate() {
            if !matches!(nd.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Rotation (row-major) and its Jacobian `d vec(R) / d v` for the closed-form
/// exponential map, evaluated in 64-bit.
pub(crate) fn rodrigues_with_jacobian(v: [f64; 3]) -> ([f64; 9], [[f64; 3]; 9]) {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = theta2.sqrt();
    let k = skew(v);
    let k2 = mat_mul(&k, &k);

    // R = I + a K + b K², with ca = a'(θ)/θ and cb = b'(θ)/θ.
    let (a, b, ca, cb) = if theta < SMALL_ANGLE {
        (1.0, 0.5, -1.0 / 3.0, -1.0 / 12.0)
    } else if theta < 1e-2 {
        let t2 = theta2;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / theta2,
            (theta * c - s) / (theta2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2),
        )
    };
    let rot = rodrigues_exp(&AxisAngle::new(v[0], v[1], v[2]));
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[3 * i + j] = rot.matrix()[(i, j)];
        }
    }

    let mut jac = [[0.0; 3]; 9];
    for (d, col) in (0..3).map(|d| (d, unit_skew(d))) {
        let ek_k = mat_mul(&col, &k);
        let k_ek = mat_mul(&k, &col);
        for i in 0..3 {
            for j in 0..3 {
                jac[3 * i + j][d] = ca * v[d] * k[i][j]
                    + a * col[i][j]
                    + cb * v[d] * k2[i][j]
                    + b * (ek_k[i][j] + k_ek[i][j]);
            }
        }
    }
    (r, jac)
}

type M3 = [[f64; 3]; 3];

fn skew(v: [f64; 3]) -> M3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn unit_skew(d: usize) -> M3 {
    let mut e = [0.0; 3];
    e[d] = 1.0;
    skew(e)
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}
