//! A minimal reverse-mode tape over row-major matrices.
//!
//! Nodes are appended in execution order, so walking them backwards is a
//! reverse topological order. Parameters are borrowed, never copied; a
//! parameter used by several nodes accumulates gradient from each use.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, Matrix};

pub type ValueId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv1d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad_left: usize,
        kernel: usize,
    },
    Gelu(ValueId),
    AddConst(ValueId),
    Add(ValueId, ValueId),
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    MatMul(ValueId, ValueId),
    MatMulT(ValueId, ValueId),
    Scale(ValueId, f64),
    SoftmaxRows(ValueId),
    LayerNorm {
        x: ValueId,
        g: ValueId,
        b: ValueId,
    },
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    ops: Vec<Op>,
    values: Vec<Option<Matrix>>,
}

/// Gradients of every parameter plus the order nodes were visited in.
pub struct TapeGrads {
    pub params: Vec<Matrix>,
    pub visit_order: Vec<ValueId>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Output length of a strided 1D convolution with explicit padding.
pub fn conv_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
) -> usize {
    let padded = len + pad_left + pad_right;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        match &self.ops[id] {
            Op::Param(p) => &self.params[*p],
            _ => self.values[id].as_ref().expect("tape value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Matrix>) -> ValueId {
        self.ops.push(op);
        self.values.push(value);
        self.ops.len() - 1
    }

    pub fn input(&mut self, m: Matrix) -> ValueId {
        self.push(Op::Input, Some(m))
    }

    pub fn param(&mut self, index: usize) -> ValueId {
        assert!(index < self.params.len(), "unknown parameter {index}");
        self.push(Op::Param(index), None)
    }

    /// `x: L×Cin`, `w: Cout×(K·Cin)` laid out `[o][k·Cin + c]`, `b: 1×Cout`.
    /// Output length is `conv_out_len(L, K, stride, pad_left, pad_right)`.
    pub fn conv1d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> ValueId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let cin = xv.cols();
        let cout = wv.rows();
        assert_eq!(
            wv.cols() % cin,
            0,
            "conv weight width must be a multiple of input channels"
        );
        let kernel = wv.cols() / cin;
        let lout = conv_out_len(xv.rows(), kernel, stride, pad_left, pad_right);
        let mut out = Matrix::zeros(lout, cout);
        for t in 0..lout {
            let row = out.row_mut(t);
            row.copy_from_slice(bv.row(0));
            for k in 0..kernel {
                let Some(src) = (t * stride + k).checked_sub(pad_left) else {
                    continue;
                };
                if src >= xv.rows() {
                    continue;
                }
                let xr = xv.row(src);
                for (o, acc) in row.iter_mut().enumerate() {
                    *acc += dot(&wv.row(o)[k * cin..(k + 1) * cin], xr);
                }
            }
        }
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                kernel,
            },
            Some(out),
        )
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let mut out = self.value(x).clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(Op::Gelu(x), Some(out))
    }

    /// `x + c` where `c` receives no gradient.
    pub fn add_const(&mut self, x: ValueId, c: &Matrix) -> ValueId {
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push(Op::AddConst(x), Some(out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    /// `x·w + b` with `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let mut out = self.value(x).matmul(self.value(w));
        let bias = self.value(b).row(0);
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(Op::Linear { x, w, b }, Some(out))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(out))
    }

    /// `a·bᵀ`.
    pub fn matmul_t(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), Some(out))
    }

    pub fn scale(&mut self, x: ValueId, s: f64) -> ValueId {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(Op::Scale(x, s), Some(out))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), Some(out))
    }

    /// Per-row layer norm with gain `g` and offset `b` (both `1×cols`).
    pub fn layer_norm(&mut self, x: ValueId, g: ValueId, b: ValueId) -> ValueId {
        let (xv, gv, bv) = (self.value(x), self.value(g).row(0), self.value(b).row(0));
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let (mean, rstd) = row_stats(xv.row(r));
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (xv.get(r, c) - mean) * rstd * gv[c] + bv[c];
            }
        }
        self.push(Op::LayerNorm { x, g, b }, Some(out))
    }

    /// Reverse pass from `output`, seeded with `d output = seed`.
    pub fn backward(&self, output: ValueId, seed: Matrix) -> TapeGrads {
        assert_eq!(
            self.value(output).shape(),
            seed.shape(),
            "seed gradient shape"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.ops.len()];
        let mut param_grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let mut visit_order = Vec::new();
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            visit_order.push(id);
            match self.ops[id] {
                Op::Input => {}
                Op::Param(p) => param_grads[p].add_assign(&dy),
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad_left,
                    kernel,
                } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let cin = xv.cols();
                    let mut dx = Matrix::zeros(xv.rows(), cin);
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    let mut db = Matrix::zeros(1, wv.rows());
                    for t in 0..dy.rows() {
                        let dyr = dy.row(t);
                        for (o, d) in db.row_mut(0).iter_mut().enumerate() {
                            *d += dyr[o];
                        }
                        for k in 0..kernel {
                            let Some(src) = (t * stride + k).checked_sub(pad_left) else {
                                continue;
                            };
                            if src >= xv.rows() {
                                continue;
                            }
                            for (o, &g) in dyr.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                let wk = &wv.row(o)[k * cin..(k + 1) * cin];
                                for (d, &wvv) in dx.row_mut(src).iter_mut().zip(wk) {
                                    *d += g * wvv;
                                }
                                let xr = xv.row(src);
                                for (d, &xx) in
                                    dw.row_mut(o)[k * cin..(k + 1) * cin].iter_mut().zip(xr)
                                {
                                    *d += g * xx;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, db);
                }
                Op::Gelu(x) => {
                    let mut dx = dy;
                    for (d, &xx) in dx.as_mut_slice().iter_mut().zip(self.value(x).as_slice()) {
                        *d *= gelu_grad(xx);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::AddConst(x) => accumulate(&mut grads, x, dy),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, dy.clone());
                    accumulate(&mut grads, b, dy);
                }
                Op::Linear { x, w, b } => {
                    let dx = dy.matmul_t(self.value(w));
                    let dw = self.value(x).t_matmul(&dy);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                    accumulate(&mut grads, b, column_sums(&dy));
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(b));
                    let db = self.value(a).t_matmul(&dy);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.matmul(self.value(b));
                    let db = dy.t_matmul(self.value(a));
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Scale(x, s) => {
                    let mut dx = dy;
                    dx.scale(s);
                    accumulate(&mut grads, x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = self.value(id);
                    let mut dx = dy;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner = dot(dx.row(r), yr);
                        for (d, &yy) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yy * (*d - inner);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::LayerNorm { x, g, b } => {
                    let (xv, gv) = (self.value(x), self.value(g).row(0));
                    let cols = xv.cols();
                    let mut dx = Matrix::zeros(xv.rows(), cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..xv.rows() {
                        let (mean, rstd) = row_stats(xv.row(r));
                        for c in 0..cols {
                            xhat[c] = (xv.get(r, c) - mean) * rstd;
                            let d = dy.get(r, c);
                            dxhat[c] = d * gv[c];
                            dg.row_mut(0)[c] += d * xhat[c];
                            dbeta.row_mut(0)[c] += d;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, &xhat) / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, g, dg);
                    accumulate(&mut grads, b, dbeta);
                }
            }
        }
        TapeGrads {
            params: param_grads,
            visit_order,
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: ValueId, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LN_EPS))
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{GaussianStream, Rng};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let mut g = GaussianStream::new(rng);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| g.sample()).collect())
    }

    /// Scalar objective `sum(out ⊙ probe)`; checks every parameter entry by central differences.
    fn check<F>(params: &mut [Matrix], build: F, tol: f64)
    where
        F: Fn(&mut Tape) -> ValueId,
    {
        let probe_rng = &mut Rng::seed_from_u64(99);
        let (out_shape, analytic) = {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            let shape = tape.value(out).shape();
            let probe = random(shape.0, shape.1, probe_rng);
            (shape, tape.backward(out, probe).params)
        };
        let probe = random(out_shape.0, out_shape.1, &mut Rng::seed_from_u64(99));
        let objective = |params: &[Matrix]| {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            dot(tape.value(out).as_slice(), probe.as_slice())
        };
        let h = 1e-6;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].as_slice()[i];
                params[p].as_mut_slice()[i] = orig + h;
                let up = objective(params);
                params[p].as_mut_slice()[i] = orig - h;
                let down = objective(params);
                params[p].as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[p].as_slice()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(err < tol, "param {p}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv_output_lengths() {
        for len in 1..100 {
            assert_eq!(conv_out_len(len, 5, 2, 2, 1), len / 2);
        }
        assert_eq!(conv_out_len(10, 3, 1, 1, 1), 10);
    }

    #[test]
    fn conv_gelu_gradients() {
        let rng = &mut Rng::seed_from_u64(1);
        let mut params = vec![random(11, 3, rng), random(4, 5 * 3, rng), random(1, 4, rng)];
        check(
            &mut params,
            |t| {
                let x = t.param(0);
                let w = t.param(1);
                let b = t.param(2);
                let c = t.conv1d(x, w, b, 2, 2, 1);
                t.gelu(c)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_and_norm_gradients() {
        let rng = &mut Rng::seed_from_u64(2);
        let mut params = vec![
            random(5, 4, rng),
            random(4, 4, rng),
            random(1, 4, rng),
            random(1, 4, rng),
            random(1, 4, rng),
        ];
        check(
            &mut params,
            |t| {
                let x = t.param(0);
                let g = t.param(3);
                let b = t.param(4);
                let h = t.layer_norm(x, g, b);
                let w = t.param(1);
                let bias = t.param(2);
                let q = t.linear(h, w, bias);
                let s = t.matmul_t(q, h);
                let s = t.scale(s, 0.5);
                let p = t.softmax_rows(s);
                let a = t.matmul(p, h);
                t.add(a, x)
            },
            1e-5,
        );
    }

    #[test]
    fn linear_weight_gradient_is_input_transpose_times_upstream() {
        let rng = &mut Rng::seed_from_u64(3);
        let params = vec![random(3, 2, rng), Matrix::zeros(1, 2)];
        let x = random(4, 3, rng);
        let up = random(4, 2, rng);
        let mut tape = Tape::new(&params);
        let xi = tape.input(x.clone());
        let (w, b) = (tape.param(0), tape.param(1));
        let y = tape.linear(xi, w, b);
        let g = tape.backward(y, up.clone());
        let expected = x.t_matmul(&up);
        for (a, e) in g.params[0].as_slice().iter().zip(expected.as_slice()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_and_fan_out_adds() {
        let params = vec![Matrix::filled(1, 3, 2.0), Matrix::filled(1, 3, 5.0)];
        let mut tape = Tape::new(&params);
        let a = tape.param(0);
        let a2 = tape.param(0);
        let y = tape.add(a, a2);
        let y = tape.add(y, a);
        let g = tape.backward(y, Matrix::filled(1, 3, 1.0));
        assert_eq!(g.params[0].as_slice(), &[3.0, 3.0, 3.0]);
        assert!(g.params[1].as_slice().iter().all(|&v| v == 0.0));
        assert!(g.visit_order.windows(2).all(|w| w[0] > w[1]));
    }
}
