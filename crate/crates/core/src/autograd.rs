//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! The reference denoiser records its forward pass here so that guidance can
//! pull feature cotangents back onto the input latent. Matrices are laid out
//! as `[tokens × channels]`. Weight matrices are borrowed for the tape's
//! lifetime and never receive gradients.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'w> {
    Leaf,
    /// `x · w`
    MatMulW(Var, &'w Array2<f64>),
    /// `p · x`, `p` fixed (pooling / upsampling operators)
    LeftMul(&'w Array2<f64>, Var),
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node<'w> {
    value: Array2<f64>,
    op: Op<'w>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op<'w>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul_w(&mut self, x: Var, w: &'w Array2<f64>) -> Var {
        let value = self.value(x).dot(w);
        let ng = self.ng(x);
        self.push(value, Op::MatMulW(x, w), ng)
    }

    pub fn left_mul(&mut self, p: &'w Array2<f64>, x: Var) -> Var {
        let value = p.dot(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::LeftMul(p, x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: &Array1<f64>) -> Var {
        let value = self.value(x) + &row.view().insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(value, Op::AddRow(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x).view());
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::ColSlice(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Vector-Jacobian product: given cotangents on some outputs, returns the
    /// gradient that reaches `wrt`.
    pub fn backward(&self, seeds: &[(Var, &Array2<f64>)], wrt: Var) -> Array2<f64> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, (*g).clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for idx in (wrt.0 + 1..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMulW(x, w) => self.send(&mut grads, *x, || g.dot(&w.t())),
                Op::LeftMul(p, x) => self.send(&mut grads, *x, || p.t().dot(&g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.send(&mut grads, *a, || g.dot(&bv.t()));
                    self.send(&mut grads, *b, || av.t().dot(&g));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.send(&mut grads, *a, || g.dot(bv));
                    self.send(&mut grads, *b, || g.t().dot(av));
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, || g.clone());
                    self.send(&mut grads, *b, || g.clone());
                }
                Op::AddRow(x) => self.send(&mut grads, *x, || g.clone()),
                Op::Scale(x, s) => self.send(&mut grads, *x, || &g * *s),
                Op::Tanh(x) => {
                    let y = &node.value;
                    self.send(&mut grads, *x, || &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    self.send(&mut grads, *x, || {
                        let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                        y * &(&g - &dot)
                    });
                }
                Op::ColSlice(x, start) => {
                    let shape = self.value(*x).dim();
                    self.send(&mut grads, *x, || {
                        let mut full = Array2::zeros(shape);
                        full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        full
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let o = offset;
                        self.send(&mut grads, *p, || g.slice(s![.., o..o + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let o = offset;
                        self.send(&mut grads, *p, || g.slice(s![o..o + h, ..]).to_owned());
                        offset += h;
                    }
                }
            }
        }
        grads[wrt.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.value(wrt).dim()))
    }

    fn send(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: Var,
        f: impl FnOnce() -> Array2<f64>,
    ) {
        if self.ng(target) {
            accumulate(grads, target, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
