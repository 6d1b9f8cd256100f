//! Dense row-major matrices, entrywise ops with analytic derivatives, and Adam.
//!
//! All reductions accumulate left to right in index order, so results are
//! bit-reproducible for a fixed input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, format!("{} (row {i})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0; an empty-column matrix has no row data.
        (0..self.rows).map(move |r| self.row(r))
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(self, context: &str) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{context} produced {} at ({}, {})",
                self.data[i],
                i / self.cols.max(1),
                i % self.cols.max(1)
            )));
        }
        Ok(self)
    }

    /// Standard matrix product. Each output entry sums over the inner index
    /// in ascending order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(n, m, out)?.ensure_finite("matmul")
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul", self.rows, other.rows));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(n, m, out)?.ensure_finite("t_matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out.ensure_finite("matmul_t")
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dim(
                "add_row_broadcast",
                format!("1x{}", self.cols),
                format!("{}x{}", bias.rows, bias.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out.ensure_finite("add_row_broadcast")
    }

    /// Column sums as a 1×cols row vector (the bias gradient of a broadcast add).
    pub fn sum_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Matrix> {
        if op == UnaryOp::Log {
            if let Some(v) = self.data.iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {v}")));
            }
        }
        let data = self.data.iter().map(|&x| op.apply(x)).collect();
        Matrix::new(self.rows, self.cols, data)?.ensure_finite(op.name())
    }

    /// Gradient of a unary op: `upstream ⊙ op'(input)`.
    pub fn unary_backward(op: UnaryOp, input: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if input.shape() != upstream.shape() {
            return Err(Error::dim(
                "unary_backward",
                format!("{:?}", input.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let data = input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| g * op.derivative(x))
            .collect();
        Matrix::new(input.rows, input.cols, data)?.ensure_finite("unary_backward")
    }

    pub fn binary(&self, op: BinaryOp, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op.name(),
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Matrix::new(self.rows, self.cols, data)?.ensure_finite(op.name())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Dot product with left-to-right accumulation.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Overflow-free `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
    Softplus,
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Softplus => softplus(x),
        }
    }

    /// Derivative at `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Softplus => sigmoid(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Softplus => "softplus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        if g.shape() != self.grad.shape() {
            return Err(Error::dim(
                "ParamTensor::accumulate",
                format!("{:?}", self.grad.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        Self {
            first_moment: Matrix::zeros(shape.0, shape.1),
            second_moment: Matrix::zeros(shape.0, shape.1),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update. The gradient is left in place; callers
/// zero it explicitly before the next accumulation.
pub fn adam_step(param: &mut ParamTensor, state: &mut AdamState) -> Result<()> {
    if state.first_moment.shape() != param.value.shape() {
        return Err(Error::dim(
            "adam_step",
            format!("{:?}", param.value.shape()),
            format!("{:?}", state.first_moment.shape()),
        ));
    }
    if let Some(i) = param.grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}; aborting optimizer step {}",
            param.grad.data()[i],
            state.step + 1
        )));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let grads = param.grad.data();
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((w, &g), mi), vi) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let tm = a.transpose().t_matmul(&b).unwrap();
        let mt = a.matmul_t(&b.transpose()).unwrap();
        for ((x, y), z) in tm.data().iter().zip(mt.data()).zip(slow.data()) {
            assert!((x - z).abs() <= 1e-12 && (y - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(4, 6, &mut rng);
            let b = random(6, 5, &mut rng);
            let c = random(5, 3, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let v = Matrix::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(v.unary(UnaryOp::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Matrix::row_vector(&[0.0]).unary(UnaryOp::Exp).unwrap().data(), &[1.0]);
        // 50 + log1p(e^-50): e^-50 ≈ 1.93e-22 is below half an ulp of 50.
        let sp = Matrix::row_vector(&[50.0]).unary(UnaryOp::Softplus).unwrap();
        assert_eq!(sp.data()[0], 50.0);
        let big = Matrix::row_vector(&[800.0, -800.0]).unary(UnaryOp::Softplus).unwrap();
        assert_eq!(big.data()[0], 800.0);
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    }

    #[test]
    fn elementwise_errors() {
        let v = Matrix::row_vector(&[1.0, 0.0]);
        assert!(matches!(v.unary(UnaryOp::Log), Err(Error::Domain(_))));
        assert!(matches!(
            Matrix::row_vector(&[1000.0]).unary(UnaryOp::Exp),
            Err(Error::NonFinite(_))
        ));
        let w = Matrix::zeros(1, 3);
        assert!(matches!(v.binary(BinaryOp::Add, &w), Err(Error::Dimension { .. })));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for op in [UnaryOp::Relu, UnaryOp::Exp, UnaryOp::Log, UnaryOp::Softplus] {
            let x = Matrix::from_fn(3, 4, |_, _| {
                // keep clear of the ReLU kink and the log pole
                let v: f64 = rng.random_range(0.1..2.0);
                if op == UnaryOp::Log || rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            let up = random(3, 4, &mut rng);
            let analytic = Matrix::unary_backward(op, &x, &up).unwrap();
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fp = dot(xp.unary(op).unwrap().data(), up.data());
                let fm = dot(xm.unary(op).unwrap().data(), up.data());
                let fd = (fp - fm) / (2.0 * h);
                assert!(rel_err(analytic.data()[i], fd) < 1e-4, "{op:?} entry {i}");
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let up = random(3, 2, &mut rng);
        let loss = |a: &Matrix, b: &Matrix| dot(a.matmul(b).unwrap().data(), up.data());
        let ga = up.matmul_t(&b).unwrap();
        let gb = a.t_matmul(&up).unwrap();
        for i in 0..a.data().len() {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap.data_mut()[i] += h;
            am.data_mut()[i] -= h;
            let fd = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            assert!(rel_err(ga.data()[i], fd) < 1e-4);
        }
        for i in 0..b.data().len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp.data_mut()[i] += h;
            bm.data_mut()[i] -= h;
            let fd = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            assert!(rel_err(gb.data()[i], fd) < 1e-4);
        }
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(2, 3, &mut rng);
        let b = random(2, 3, &mut rng);
        let up = random(2, 3, &mut rng);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            // d(a∘b)/da and d(a∘b)/db, entrywise
            let (da, db): (Vec<f64>, Vec<f64>) = a
                .data()
                .iter()
                .zip(b.data())
                .zip(up.data())
                .map(|((&x, &y), &g)| match op {
                    BinaryOp::Add => (g, g),
                    BinaryOp::Sub => (g, -g),
                    BinaryOp::Mul => (g * y, g * x),
                })
                .unzip();
            let loss = |a: &Matrix, b: &Matrix| dot(a.binary(op, b).unwrap().data(), up.data());
            for i in 0..6 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap.data_mut()[i] += h;
                am.data_mut()[i] -= h;
                assert!(rel_err(da[i], (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h)) < 1e-4);
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.data_mut()[i] += h;
                bm.data_mut()[i] -= h;
                assert!(rel_err(db[i], (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h)) < 1e-4);
            }
        }
    }

    #[test]
    fn bias_broadcast_and_column_sums() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::row_vector(&[10.0, 20.0]);
        assert_eq!(x.add_row_broadcast(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(x.sum_rows().data(), &[4.0, 6.0]);
    }

    /// Scalar Adam written out independently of the matrix path.
    fn scalar_adam(w0: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powf(t));
            let vh = v / (1.0 - cfg.beta2.powf(t));
            w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
        w
    }

    #[test]
    fn adam_zero_grad_leaves_param() {
        let mut p = ParamTensor::new(Matrix::row_vector(&[1.0, -2.0]));
        let mut s = AdamState::new((1, 2), AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let cfg = AdamConfig::default();
        let g = [0.3, -7.0, 1e-3];
        let mut p = ParamTensor::new(Matrix::zeros(1, 3));
        p.grad = Matrix::row_vector(&g);
        let mut s = AdamState::new((1, 3), cfg);
        adam_step(&mut p, &mut s).unwrap();
        for (w, g) in p.value.data().iter().zip(g) {
            assert_relative_eq!(*w, -cfg.learning_rate * g / (g.abs() + cfg.eps), max_relative = 1e-9);
            assert_relative_eq!(*w, scalar_adam(0.0, &[g], cfg), max_relative = 1e-12);
        }
        // grad left intact
        assert_eq!(p.grad.data(), &g);
    }

    #[test]
    fn adam_constant_grad_matches_scalar_reference() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut p = ParamTensor::new(Matrix::row_vector(&[0.5, 0.5]));
        let mut s = AdamState::new((1, 2), cfg);
        for _ in 0..200 {
            p.grad = Matrix::row_vector(&[2.0, -0.5]);
            adam_step(&mut p, &mut s).unwrap();
        }
        let expect_pos = scalar_adam(0.5, &[2.0; 200], cfg);
        let expect_neg = scalar_adam(0.5, &[-0.5; 200], cfg);
        assert_relative_eq!(p.value.data()[0], expect_pos, max_relative = 1e-12);
        assert_relative_eq!(p.value.data()[1], expect_neg, max_relative = 1e-12);
        assert!(p.value.data()[0] < 0.5 && p.value.data()[1] > 0.5);
        assert_eq!(s.step, 200);
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut p = ParamTensor::new(Matrix::zeros(1, 2));
        p.grad = Matrix::row_vector(&[f64::NAN, 0.0]);
        let mut s = AdamState::new((1, 2), AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
    }
}
