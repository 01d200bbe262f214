//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order, so node ids are a
//! topological order by construction. [`Tape::backward`] walks the ids in
//! reverse once and accumulates exact adjoints into a [`Gradients`] table.
//!
//! ```
//! use card_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::flows::{dsf_backward, dsf_forward};
use crate::kernels::{gaussian_kernel, sq_dist};
use crate::math;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Square,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Softplus => math::softplus(x),
            Activation::Exp => math::exp(x),
            Activation::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => math::sigmoid(x),
            Activation::Exp => y,
            Activation::Square => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GaussLogPdf(Var, Var, Var),
    Dsf(Var, Var, usize),
    Hsic { x: Var, centered: Tensor, sigma2: f64, median_pairs: Vec<(usize, usize)> },
    Mmd2 { x: Var, y: Var, sigma2: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Single owner, single thread.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, rec: Op) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node { value, op: rec });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or parameter node. Tensors are finite by construction.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `x + b` with the `1×m` row `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", vx.shape(), vb.shape())));
        }
        let cols = vx.cols();
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % cols];
        }
        self.push("add_row", out, Op::AddRow(x, b))
    }

    /// `x + c` with the `n×1` column `c` broadcast over every column of `x`.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(c));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(shape_err("add_col", format!("{:?} + {:?}", vx.shape(), vc.shape())));
        }
        let cols = vx.cols();
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vc.data()[i / cols];
        }
        self.push("add_col", out, Op::AddCol(x, c))
    }

    /// `x ⊙ c` with the `n×1` column `c` broadcast over every column of `x`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(c));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", vx.shape(), vc.shape())));
        }
        let cols = vx.cols().max(1);
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vc.data()[i / cols];
        }
        self.push("mul_col", out, Op::MulCol(x, c))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_raw(va.rows(), va.cols(), data);
        self.push(op, out, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push("scale", out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + k);
        let out = out.map_err(|_| Error::NonFinite { op: "add_scalar" })?;
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(alpha) = kind {
            if !(alpha > 0.0) {
                return Err(Error::InvalidParameter(format!("leaky_relu slope must be > 0, got {alpha}")));
            }
        }
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kind.apply(x)).collect();
        let out = Tensor::from_raw(va.rows(), va.cols(), data);
        self.push("activation", out, Op::Act(a, kind))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_raw(va.rows(), va.cols(), data);
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::from_raw(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(shape_err("mean", format!("empty tensor")));
        }
        let s = va.sum() / va.len() as f64;
        self.push("mean", Tensor::from_raw(1, 1, vec![s]), Op::Mean(a))
    }

    /// Sum across columns: `n×m → n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Tensor::from_raw(va.rows(), 1, data);
        self.push("sum_rows", out, Op::SumRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(shape_err("slice_cols", format!("[{start},{end}) of {} columns", va.cols())));
        }
        let out = va.slice_cols(start, end);
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hcat(&vals)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Elementwise `−½(ln 2π + log_var + (x − mean)² e^{−log_var})`.
    pub fn gaussian_log_pdf(&mut self, x: Var, mean: Var, log_var: Var) -> Result<Var> {
        let (vx, vm, vl) = (self.value(x), self.value(mean), self.value(log_var));
        same_shape("gaussian_log_pdf", vx, vm)?;
        same_shape("gaussian_log_pdf", vx, vl)?;
        let data = vx
            .data()
            .iter()
            .zip(vm.data())
            .zip(vl.data())
            .map(|((x, m), l)| {
                let d = x - m;
                -0.5 * (math::LN_2PI + l + d * d * math::exp(-l))
            })
            .collect();
        let out = Tensor::from_raw(vx.rows(), vx.cols(), data);
        self.push("gaussian_log_pdf", out, Op::GaussLogPdf(x, mean, log_var))
    }

    /// Deep sigmoidal flow on each row: `z` is `n×1`, `params` is `n×3K`.
    /// Output is `n×2`: transformed noise and log-derivative.
    pub fn dsf(&mut self, z: Var, params: Var, units: usize) -> Result<Var> {
        let (vz, vp) = (self.value(z), self.value(params));
        if vz.cols() != 1 || vp.rows() != vz.rows() || vp.cols() != 3 * units {
            return Err(shape_err(
                "dsf",
                format!("z {:?}, params {:?}, units {units}", vz.shape(), vp.shape()),
            ));
        }
        let mut data = Vec::with_capacity(vz.rows() * 2);
        for r in 0..vz.rows() {
            let (e, ld) = dsf_forward(vz.get(r, 0), vp.row(r), units);
            data.push(e);
            data.push(ld);
        }
        let out = Tensor::from_raw(vz.rows(), 2, data);
        self.push("dsf", out, Op::Dsf(z, params, units))
    }

    /// `Σ_ij K_ij M_ij` where `K` is the Gaussian Gram matrix of `x`'s rows
    /// and `centered` is a fixed symmetric matrix (usually `HLH/(n−1)²`).
    pub fn hsic_term(&mut self, x: Var, centered: Tensor, sigma2: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows();
        if centered.shape() != [n, n] {
            return Err(shape_err("hsic", format!("{n} rows vs centered {:?}", centered.shape())));
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += gaussian_kernel(sq_dist(vx.row(i), vx.row(j)), sigma2) * centered.get(i, j);
            }
        }
        self.push(
            "hsic",
            Tensor::from_raw(1, 1, vec![s]),
            Op::Hsic {
                x,
                centered,
                sigma2,
                median_pairs: Vec::new(),
            },
        )
    }

    /// [`Tape::hsic_term`] with the median-heuristic bandwidth of `x`'s rows.
    /// The bandwidth is part of the graph: gradients flow through the pair(s)
    /// realising the median distance.
    pub fn hsic_term_median(&mut self, x: Var, centered: Tensor) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows();
        if n < 2 {
            return Err(Error::Contract(format!("hsic bandwidth needs at least 2 rows, got {n}")));
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((sq_dist(vx.row(i), vx.row(j)), i, j));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let m = pairs.len();
        let mid: Vec<(f64, usize, usize)> = if m % 2 == 1 {
            vec![pairs[m / 2]]
        } else {
            vec![pairs[m / 2 - 1], pairs[m / 2]]
        };
        let sigma2 = 0.5 * mid.iter().map(|p| p.0).sum::<f64>() / mid.len() as f64;
        if !(sigma2 > 0.0) {
            return Err(Error::Degenerate(format!("median pairwise distance is zero; bandwidth undefined")));
        }
        let var = self.hsic_term(x, centered, sigma2)?;
        if let Some(Node { op: Op::Hsic { median_pairs, .. }, .. }) = self.nodes.last_mut() {
            *median_pairs = mid.iter().map(|p| (p.1, p.2)).collect();
        }
        Ok(var)
    }

    /// Biased squared MMD between the rows of `x` and `y` with a shared
    /// Gaussian bandwidth.
    pub fn mmd2(&mut self, x: Var, y: Var, sigma2: f64) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        if vx.cols() != vy.cols() || vx.rows() == 0 || vy.rows() == 0 {
            return Err(shape_err("mmd2", format!("{:?} vs {:?}", vx.shape(), vy.shape())));
        }
        let s = crate::kernels::mmd2_value(vx, vy, sigma2);
        self.push("mmd2", Tensor::from_raw(1, 1, vec![s]), Op::Mmd2 { x, y, sigma2 })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_raw(1, 1, vec![1.0]));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, va);
                gemm(g, false, vb, true, ga, 1.0);
                let gb = slot(grads, *b, vb);
                gemm(va, true, g, false, gb, 1.0);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, self.value(*x), g.data().iter().copied());
                let cols = g.cols();
                let mut colsum = vec![0.0; cols];
                for (i, v) in g.data().iter().enumerate() {
                    colsum[i % cols] += v;
                }
                accumulate(grads, *b, self.value(*b), colsum.into_iter());
            }
            Op::AddCol(x, c) => {
                accumulate(grads, *x, self.value(*x), g.data().iter().copied());
                let rs = (0..g.rows()).map(|r| g.row(r).iter().sum::<f64>());
                accumulate(grads, *c, self.value(*c), rs);
            }
            Op::MulCol(x, c) => {
                let (vx, vc) = (self.value(*x), self.value(*c));
                let cols = vx.cols().max(1);
                let gx = g.data().iter().enumerate().map(|(i, gv)| gv * vc.data()[i / cols]);
                accumulate(grads, *x, vx, gx);
                let gc = (0..vx.rows()).map(|r| {
                    g.row(r).iter().zip(vx.row(r)).map(|(a, b)| a * b).sum::<f64>()
                });
                accumulate(grads, *c, vc, gc);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a), g.data().iter().copied());
                accumulate(grads, *b, self.value(*b), g.data().iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.value(*a), g.data().iter().copied());
                accumulate(grads, *b, self.value(*b), g.data().iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, va, g.data().iter().zip(vb.data()).map(|(x, y)| x * y));
                accumulate(grads, *b, vb, g.data().iter().zip(va.data()).map(|(x, y)| x * y));
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, self.value(*a), g.data().iter().map(|v| v * k));
            }
            Op::AddScalar(a) => {
                accumulate(grads, *a, self.value(*a), g.data().iter().copied());
            }
            Op::Act(a, kind) => {
                let va = self.value(*a);
                let it = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(node.value.data())
                    .map(|((gv, x), y)| gv * kind.derivative(*x, *y));
                accumulate(grads, *a, va, it);
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let it = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gv, x)| if *x >= *lo && *x <= *hi { *gv } else { 0.0 });
                accumulate(grads, *a, va, it);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let s = g.item();
                accumulate(grads, *a, va, core::iter::repeat(s).take(va.len()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = g.item() / va.len() as f64;
                accumulate(grads, *a, va, core::iter::repeat(s).take(va.len()));
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let cols = va.cols().max(1);
                accumulate(grads, *a, va, (0..va.len()).map(|i| g.data()[i / cols]));
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let target = slot(grads, *a, va);
                let (cols, w) = (va.cols(), g.cols());
                let td = target.data_mut();
                for r in 0..g.rows() {
                    for c in 0..w {
                        td[r * cols + start + c] += g.get(r, c);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let w = vp.cols();
                    let piece = g.slice_cols(offset, offset + w);
                    accumulate(grads, *p, vp, piece.data().iter().copied());
                    offset += w;
                }
            }
            Op::GaussLogPdf(x, m, l) => {
                let (vx, vm, vl) = (self.value(*x), self.value(*m), self.value(*l));
                let n = vx.len();
                let mut gx = Vec::with_capacity(n);
                let mut gm = Vec::with_capacity(n);
                let mut gl = Vec::with_capacity(n);
                for i in 0..n {
                    let d = vx.data()[i] - vm.data()[i];
                    let inv = math::exp(-vl.data()[i]);
                    let gv = g.data()[i];
                    gx.push(-gv * d * inv);
                    gm.push(gv * d * inv);
                    gl.push(gv * (-0.5 + 0.5 * d * d * inv));
                }
                accumulate(grads, *x, vx, gx.into_iter());
                accumulate(grads, *m, vm, gm.into_iter());
                accumulate(grads, *l, vl, gl.into_iter());
            }
            Op::Dsf(z, p, units) => {
                let (vz, vp) = (self.value(*z), self.value(*p));
                let mut gz = Vec::with_capacity(vz.rows());
                let mut gp = vec![0.0; vp.len()];
                let w = vp.cols();
                for r in 0..vz.rows() {
                    let dz = dsf_backward(
                        vz.get(r, 0),
                        vp.row(r),
                        *units,
                        g.get(r, 0),
                        g.get(r, 1),
                        &mut gp[r * w..(r + 1) * w],
                    );
                    gz.push(dz);
                }
                accumulate(grads, *z, vz, gz.into_iter());
                accumulate(grads, *p, vp, gp.into_iter());
            }
            Op::Hsic {
                x,
                centered,
                sigma2,
                median_pairs,
            } => {
                let vx = self.value(*x);
                let (n, d) = (vx.rows(), vx.cols());
                let scale = g.item();
                let mut gx = vec![0.0; n * d];
                if !median_pairs.is_empty() {
                    // d/dσ² of Σ K_ij M_ij, routed through the median pair(s).
                    let mut g_sigma2 = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let d2 = sq_dist(vx.row(i), vx.row(j));
                            g_sigma2 += centered.get(i, j) * gaussian_kernel(d2, *sigma2) * d2;
                        }
                    }
                    g_sigma2 *= scale / (2.0 * sigma2 * sigma2);
                    let w = g_sigma2 / median_pairs.len() as f64;
                    for &(a, b) in median_pairs {
                        for c in 0..d {
                            let diff = vx.get(a, c) - vx.get(b, c);
                            gx[a * d + c] += w * diff;
                            gx[b * d + c] -= w * diff;
                        }
                    }
                }
                for i in 0..n {
                    let xi = vx.row(i);
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let xj = vx.row(j);
                        let k = gaussian_kernel(sq_dist(xi, xj), *sigma2);
                        let coef = -2.0 * scale * centered.get(i, j) * k / sigma2;
                        for c in 0..d {
                            gx[i * d + c] += coef * (xi[c] - xj[c]);
                        }
                    }
                }
                accumulate(grads, *x, vx, gx.into_iter());
            }
            Op::Mmd2 { x, y, sigma2 } => {
                let (vx, vy) = (self.value(*x), self.value(*y));
                let (gx, gy) = crate::kernels::mmd2_grad(vx, vy, *sigma2, g.item());
                accumulate(grads, *x, vx, gx.into_iter());
                accumulate(grads, *y, vy, gy.into_iter());
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, it: impl Iterator<Item = f64>) {
    let target = slot(grads, v, like);
    for (t, g) in target.data_mut().iter_mut().zip(it) {
        *t += g;
    }
}

/// Adjoints indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros of the right shape when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    /// Fails with [`Error::NonFinite`] if any adjoint is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        for g in self.grads.iter().flatten() {
            check_finite("backward", g.data())?;
        }
        Ok(())
    }
}
