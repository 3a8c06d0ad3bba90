//! A small eager reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every op computes its value immediately; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates gradients. The op set is exactly
//! what the conditioning and denoiser graphs need.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `a + row`, row broadcast over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Im2Col3 {
        input: Var,
        height: usize,
        width: usize,
    },
    Mse(Var, Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// 3x3 same-padded patches of an `(height*width) x c` row-major grid.
///
/// Column block `k = (dy + 1) * 3 + (dx + 1)` holds the neighbour at offset `(dy, dx)`.
pub fn im2col3(x: ArrayView2<f64>, height: usize, width: usize) -> Matrix {
    let c = x.ncols();
    let mut out = Matrix::zeros((height * width, 9 * c));
    for y in 0..height {
        for xx in 0..width {
            let row = y * width + xx;
            for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                let (ny, nx) = (y as isize + dy, xx as isize + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let src = ny as usize * width + nx as usize;
                out.slice_mut(s![row, k * c..(k + 1) * c])
                    .assign(&x.row(src));
            }
        }
    }
    out
}

const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn im2col3_backward(g: ArrayView2<f64>, height: usize, width: usize, c: usize) -> Matrix {
    let mut out = Matrix::zeros((height * width, c));
    for y in 0..height {
        for xx in 0..width {
            let row = y * width + xx;
            for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                let (ny, nx) = (y as isize + dy, xx as isize + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let src = ny as usize * width + nx as usize;
                let mut dst = out.row_mut(src);
                dst += &g.slice(s![row, k * c..(k + 1) * c]);
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn im2col3(&mut self, input: Var, height: usize, width: usize) -> Var {
        let v = im2col3(self.value(input).view(), height, width);
        self.push(
            v,
            Op::Im2Col3 {
                input,
                height,
                width,
            },
        )
    }

    /// Mean squared difference as a 1x1 matrix.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = self.value(a) - self.value(b);
        let v = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        self.push(Matrix::from_elem((1, 1), v), Op::Mse(a, b))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut acc = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            acc += self.value(p);
        }
        self.push(acc, Op::Sum(parts.to_vec()))
    }

    /// Gradients of the 1x1 node `out` with respect to every earlier node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::ones(self.value(out).dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= silu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::Im2Col3 {
                    input,
                    height,
                    width,
                } => {
                    let c = self.value(*input).ncols();
                    accumulate(
                        &mut grads,
                        *input,
                        im2col3_backward(g.view(), *height, *width, c),
                    );
                }
                Op::Mse(a, b) => {
                    let diff = self.value(*a) - self.value(*b);
                    let n = diff.len().max(1) as f64;
                    let ga = diff * (2.0 * g[[0, 0]] / n);
                    accumulate(&mut grads, *b, -&ga);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}
