//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every tape value is a 2-D array: feature maps are `[cells, channels]`,
//! vectors are `[1, n]` rows, scalars are `[1, 1]`. The tape records the
//! forward pass; [`Tape::backward`] walks it in reverse and accumulates exact
//! analytic gradients. Loss terms with closed-form gradients enter the graph
//! via [`Tape::custom_scalar`].

use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry, im2col: Array2<f64> },
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    L2NormalizeRows(Var),
    CustomScalar { x: Var, grad: Array2<f64> },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a trainable parameter (gradients will be accumulated).
    pub fn param(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.leaf_shared(value, true)
    }

    /// Register a constant input (no gradient tracked).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Register a leaf without copying the backing array.
    pub fn leaf_shared(&mut self, value: Arc<Array2<f64>>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Broadcast-add a `[1, n]` row vector to every row of `[m, n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(x).ncols(), self.value(row).ncols());
        let v = self.value(x) + &self.value(row).row(0);
        let ng = self.needs(x) || self.needs(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// `x @ w + b` with `b` a `[1, n]` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    /// 2-D convolution over a `[in_h*in_w, in_c]` cell matrix. The weight is
    /// laid out `[in_c*k*k, out_c]` with column index `c*k*k + ky*k + kx`,
    /// and the result is `[out_h*out_w, out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.dim(), (geom.in_h * geom.in_w, geom.in_c));
        debug_assert_eq!(self.value(w).dim(), (geom.in_c * geom.kernel * geom.kernel, geom.out_c));
        let im2col = build_im2col(xv, &geom);
        let mut out = im2col.dot(self.value(w));
        out += &self.value(b).row(0);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, geom, im2col }, ng)
    }

    /// Column-wise mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.nrows() as f64;
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        let ng = self.needs(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    /// Row-major reinterpretation to a new `(rows, cols)` of equal length.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        debug_assert_eq!(x.len(), rows * cols);
        let v = Array2::from_shape_vec((rows, cols), x.iter().cloned().collect())
            .expect("reshape length checked");
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols { x: a, start, len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Normalize each row to unit L2 norm (norms below 1e-12 are clamped).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let r = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / r);
        }
        let ng = self.needs(a);
        self.push(v, Op::L2NormalizeRows(a), ng)
    }

    /// Insert a scalar whose gradient with respect to `x` was computed in
    /// closed form by the caller. `grad` must have the shape of `x`.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(self.value(x).dim(), grad.dim());
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), value), Op::CustomScalar { x, grad }, ng)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[(0, 0)]
    }

    /// Backpropagate from a `[1, 1]` scalar root. Returns per-node gradients;
    /// index with the `Var`s returned during the forward pass.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::AddRow(x, row) => {
                acc(grads, *x, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::Relu(a) => {
                let y = self.value(Var(id));
                let mut d = g.clone();
                d.zip_mut_with(y, |dv, &yv| {
                    if yv <= 0.0 {
                        *dv = 0.0;
                    }
                });
                acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(id));
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *dv -= dot * yv;
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).row(0).to_owned();
                let n = xv.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                let mut dgamma = Array2::<f64>::zeros((1, xv.ncols()));
                let mut dbeta = Array2::<f64>::zeros((1, xv.ncols()));
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let mean = xrow.sum() / n;
                    let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let grow = g.row(r);
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gv.iter()).map(|(gd, gm)| gd * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..xv.ncols() {
                        dx[(r, j)] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[(0, j)] += grow[j] * xhat[j];
                        dbeta[(0, j)] += grow[j];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, geom, im2col } => {
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *w, im2col.t().dot(g));
                if self.needs(*x) {
                    let dcol = g.dot(&self.value(*w).t());
                    acc(grads, *x, col2im(&dcol, geom));
                }
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).nrows();
                let scaled = g.row(0).mapv(|v| v / m as f64);
                let mut d = Array2::<f64>::zeros(self.value(*a).dim());
                for mut row in d.rows_mut() {
                    row.assign(&scaled);
                }
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let s = g[(0, 0)];
                acc(grads, *a, Array2::from_elem(self.value(*a).dim(), s));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).dim();
                let d = Array2::from_shape_vec(shape, g.iter().cloned().collect())
                    .expect("reshape grad length");
                acc(grads, *a, d);
            }
            Op::SliceCols { x, start, len } => {
                let mut d = Array2::<f64>::zeros(self.value(*x).dim());
                d.slice_mut(ndarray::s![.., *start..start + len]).assign(g);
                acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    let d = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                    acc(grads, p, d);
                    offset += w;
                }
            }
            Op::L2NormalizeRows(a) => {
                let xv = self.value(*a);
                let y = self.value(Var(id));
                let mut d = Array2::<f64>::zeros(xv.dim());
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let norm = xrow.dot(&xrow).sqrt().max(1e-12);
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let dot = yrow.dot(&grow);
                    for j in 0..xv.ncols() {
                        d[(r, j)] = (grow[j] - yrow[j] * dot) / norm;
                    }
                }
                acc(grads, *a, d);
            }
            Op::CustomScalar { x, grad } => {
                acc(grads, *x, grad * g[(0, 0)]);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn build_im2col(x: &Array2<f64>, geom: &ConvGeometry) -> Array2<f64> {
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    let mut col = Array2::<f64>::zeros((oh * ow, geom.in_c * k * k));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.in_w as isize {
                        continue;
                    }
                    let cell = iy as usize * geom.in_w + ix as usize;
                    for c in 0..geom.in_c {
                        col[(row, c * k * k + ky * k + kx)] = x[(cell, c)];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, geom: &ConvGeometry) -> Array2<f64> {
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    let mut dx = Array2::<f64>::zeros((geom.in_h * geom.in_w, geom.in_c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.in_w as isize {
                        continue;
                    }
                    let cell = iy as usize * geom.in_w + ix as usize;
                    for c in 0..geom.in_c {
                        dx[(cell, c)] += dcol[(row, c * k * k + ky * k + kx)];
                    }
                }
            }
        }
    }
    dx
}
