//! Dense f64 kernels: matrices, softmax, row means and the LSTM cell that
//! backs the chunk gate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data", rows * cols, data.len()));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Seeded uniform(-0.5/sqrt(fan_in), +0.5/sqrt(fan_in)) initialization.
    pub fn seeded_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut rng::SimRng) -> Self {
        let bound = init_bound(fan_in);
        Self {
            rows,
            cols,
            data: rng::uniform_vec(rng, rows * cols, bound),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec input", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `x · self` for a row vector `x` of length `rows`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape("vecmat input", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }
}

pub(crate) fn init_bound(fan_in: usize) -> f64 {
    0.5 / libm::sqrt(fan_in.max(1) as f64)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul inner dimension", a.cols, b.rows));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Domain("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Column-wise arithmetic mean.
pub fn mean_rows(rows: &Matrix) -> Result<Vec<f64>> {
    if rows.rows == 0 {
        return Err(Error::Domain("mean of zero rows"));
    }
    let mut acc = vec![0.0; rows.cols];
    for i in 0..rows.rows {
        for (a, v) in acc.iter_mut().zip(rows.row(i)) {
            *a += v;
        }
    }
    let n = rows.rows as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Weights of a single-layer LSTM cell (no peepholes) plus a scalar score
/// head `sigmoid(score_w · h + score_b)`.
///
/// Each gate matrix is `hidden_dim × (input_dim + hidden_dim)` and acts on
/// the concatenation `[input; hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Matrix,
    pub w_forget: Matrix,
    pub w_cell: Matrix,
    pub w_output: Matrix,
    pub b_input: Vec<f64>,
    pub b_forget: Vec<f64>,
    pub b_cell: Vec<f64>,
    pub b_output: Vec<f64>,
    pub score_w: Vec<f64>,
    pub score_b: f64,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let width = input_dim + hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w_input: Matrix::zeros(hidden_dim, width),
            w_forget: Matrix::zeros(hidden_dim, width),
            w_cell: Matrix::zeros(hidden_dim, width),
            w_output: Matrix::zeros(hidden_dim, width),
            b_input: vec![0.0; hidden_dim],
            b_forget: vec![0.0; hidden_dim],
            b_cell: vec![0.0; hidden_dim],
            b_output: vec![0.0; hidden_dim],
            score_w: vec![0.0; hidden_dim],
            score_b: 0.0,
        }
    }

    pub fn seeded(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0x4c53_544d);
        let width = input_dim + hidden_dim;
        let gate_bound = init_bound(width);
        let score_bound = init_bound(hidden_dim);
        let w_input = Matrix::seeded_uniform(hidden_dim, width, width, &mut rng);
        let w_forget = Matrix::seeded_uniform(hidden_dim, width, width, &mut rng);
        let w_cell = Matrix::seeded_uniform(hidden_dim, width, width, &mut rng);
        let w_output = Matrix::seeded_uniform(hidden_dim, width, width, &mut rng);
        let b_input = rng::uniform_vec(&mut rng, hidden_dim, gate_bound);
        let b_forget = rng::uniform_vec(&mut rng, hidden_dim, gate_bound);
        let b_cell = rng::uniform_vec(&mut rng, hidden_dim, gate_bound);
        let b_output = rng::uniform_vec(&mut rng, hidden_dim, gate_bound);
        let score_w = rng::uniform_vec(&mut rng, hidden_dim, score_bound);
        let score_b = rng::uniform_vec(&mut rng, 1, score_bound)[0];
        Self {
            input_dim,
            hidden_dim,
            w_input,
            w_forget,
            w_cell,
            w_output,
            b_input,
            b_forget,
            b_cell,
            b_output,
            score_w,
            score_b,
        }
    }

    /// Order-sensitive checksum over every weight.
    pub fn checksum(&self) -> f64 {
        let mats = [&self.w_input, &self.w_forget, &self.w_cell, &self.w_output];
        let vecs = [
            &self.b_input,
            &self.b_forget,
            &self.b_cell,
            &self.b_output,
            &self.score_w,
        ];
        let mut acc = self.score_b;
        let mut k = 1.0;
        for v in mats
            .iter()
            .map(|m| m.data())
            .chain(vecs.iter().map(|v| v.as_slice()))
        {
            for x in v {
                acc += k * x;
                k += 1e-3;
            }
        }
        acc
    }
}

/// Recurrent state `(h, c)` of the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            hidden: vec![0.0; hidden_dim],
            cell: vec![0.0; hidden_dim],
        }
    }

    /// Euclidean norm of `[hidden; cell]`.
    pub fn norm(&self) -> f64 {
        let s: f64 = self.hidden.iter().chain(&self.cell).map(|x| x * x).sum();
        libm::sqrt(s)
    }
}

/// One LSTM step; returns the new state and the gate score in `(0, 1)`.
pub fn lstm_step(
    params: &LstmParams,
    state: &LstmState,
    input: &[f64],
) -> Result<(LstmState, f64)> {
    if input.len() != params.input_dim {
        return Err(Error::shape("lstm input", params.input_dim, input.len()));
    }
    if state.hidden.len() != params.hidden_dim || state.cell.len() != params.hidden_dim {
        return Err(Error::shape(
            "lstm state",
            params.hidden_dim,
            state.hidden.len(),
        ));
    }
    let mut z = Vec::with_capacity(params.input_dim + params.hidden_dim);
    z.extend_from_slice(input);
    z.extend_from_slice(&state.hidden);

    let pre = |w: &Matrix, b: &[f64]| -> Vec<f64> {
        (0..params.hidden_dim)
            .map(|j| dot(w.row(j), &z) + b[j])
            .collect()
    };
    let i_gate = pre(&params.w_input, &params.b_input);
    let f_gate = pre(&params.w_forget, &params.b_forget);
    let g_cand = pre(&params.w_cell, &params.b_cell);
    let o_gate = pre(&params.w_output, &params.b_output);

    let mut next = LstmState::zeros(params.hidden_dim);
    for j in 0..params.hidden_dim {
        let c = sigmoid(f_gate[j]) * state.cell[j] + sigmoid(i_gate[j]) * tanh(g_cand[j]);
        next.cell[j] = c;
        next.hidden[j] = sigmoid(o_gate[j]) * tanh(c);
    }
    let score = sigmoid(dot(&params.score_w, &next.hidden) + params.score_b);
    Ok((next, score))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rng::stream(7, 1);
        let a = Matrix::new(4, 5, rng::uniform_vec(&mut rng, 20, 1.0)).unwrap();
        let b = Matrix::new(5, 3, rng::uniform_vec(&mut rng, 15, 1.0)).unwrap();
        let got = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&Matrix::zeros(2, 3)),
            Err(Error::Shape { .. })
        ));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax_row(&[1000.0, 1000.0, 1000.0]).unwrap();
        assert!(close(&s, &[1.0 / 3.0; 3], 1e-15));
        let s = softmax_row(&[0.0, libm::log(3.0)]).unwrap();
        assert!(close(&s, &[0.25, 0.75], 1e-12));
        assert_eq!(
            softmax_row(&[]),
            Err(Error::Domain("softmax of an empty vector"))
        );
    }

    #[test]
    fn mean_rows_examples() {
        let m = Matrix::from_rows(&[[2.0, 2.0], [2.0, 2.0]]).unwrap();
        assert_eq!(mean_rows(&m).unwrap(), vec![2.0, 2.0]);
        let m = Matrix::from_rows(&[[1.0, 0.0], [3.0, 2.0]]).unwrap();
        assert_eq!(mean_rows(&m).unwrap(), vec![2.0, 1.0]);
        assert!(mean_rows(&Matrix::zeros(0, 3)).is_err());

        let mut rng = rng::stream(3, 3);
        let m = Matrix::new(7, 4, rng::uniform_vec(&mut rng, 28, 5.0)).unwrap();
        let got = mean_rows(&m).unwrap();
        for j in 0..4 {
            let col: f64 = (0..7).map(|i| m.get(i, j)).sum();
            assert!((got[j] - col / 7.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_zero_params() {
        let p = LstmParams::zeros(3, 2);
        let (s, score) = lstm_step(&p, &LstmState::zeros(2), &[1.0, -4.0, 9.0]).unwrap();
        assert_eq!(s.hidden, vec![0.0, 0.0]);
        assert_eq!(score, 0.5);

        let state = LstmState {
            hidden: vec![0.0, 0.0],
            cell: vec![0.8, -2.0],
        };
        let (s, _) = lstm_step(&p, &state, &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(s.cell, vec![0.4, -1.0]);
    }

    #[test]
    fn lstm_shape_errors() {
        let p = LstmParams::zeros(3, 2);
        assert!(matches!(
            lstm_step(&p, &LstmState::zeros(2), &[1.0]),
            Err(Error::Shape {
                expected: 3,
                found: 1,
                ..
            })
        ));
        assert!(lstm_step(&p, &LstmState::zeros(4), &[0.0; 3]).is_err());
    }

    #[test]
    fn lstm_seeded_is_reproducible() {
        assert_eq!(LstmParams::seeded(6, 4, 11), LstmParams::seeded(6, 4, 11));
        assert_ne!(LstmParams::seeded(6, 4, 11), LstmParams::seeded(6, 4, 12));
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(x in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let s = softmax_row(&x).unwrap();
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x[i] < x[j] {
                        prop_assert!(s[i] <= s[j]);
                    }
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..20), c in -1e3f64..1e3) {
            let a = softmax_row(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax_row(&shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn matmul_associative(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, k in 1usize..5, l in 1usize..5) {
            let mut rng = rng::stream(seed, 0);
            let a = Matrix::new(n, m, rng::uniform_vec(&mut rng, n * m, 2.0)).unwrap();
            let b = Matrix::new(m, k, rng::uniform_vec(&mut rng, m * k, 2.0)).unwrap();
            let c = Matrix::new(k, l, rng::uniform_vec(&mut rng, k * l, 2.0)).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(close(left.data(), right.data(), 1e-9));
        }

        #[test]
        fn lstm_score_in_open_interval(seed in any::<u64>(), x in prop::collection::vec(-100.0f64..100.0, 5)) {
            let p = LstmParams::seeded(5, 3, seed);
            let (s, score) = lstm_step(&p, &LstmState::zeros(3), &x).unwrap();
            prop_assert!(score > 0.0 && score < 1.0);
            prop_assert!(s.hidden.iter().chain(&s.cell).all(|v| v.is_finite()));
        }

        #[test]
        fn mean_of_single_row_is_row(x in prop::collection::vec(-1e6f64..1e6, 1..10)) {
            let m = Matrix::from_rows(std::slice::from_ref(&x)).unwrap();
            prop_assert_eq!(mean_rows(&m).unwrap(), x);
        }
    }
}
