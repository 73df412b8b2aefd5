use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{Mat, ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `(n,c) + (1,c)`
    AddRow(Var, Var),
    /// `(n,c) ⊙ (1,c)`
    MulRow(Var, Var),
    /// `(n,c) ⊙ (n,1)`
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    RowMax { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    /// `(n,c) -> (1,c)`
    SumRows(Var),
    /// `(n,c) -> (n,1)`
    SumCols(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    InverseSigmoid { x: Var, eps: f64 },
    Rearrange { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Reverse-mode tape over `f64` matrices.
///
/// Parameters are pulled from a borrowed [`ParamStore`]; each parameter gets one leaf
/// per graph so its gradient accumulates in one place.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `(1,1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).t().to_owned();
        self.push(y, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) / self.value(b);
        self.push(y, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a (1,c) row");
        let y = self.value(a) + self.value(row);
        self.push(y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a (1,c) row");
        let y = self.value(a) * self.value(row);
        self.push(y, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an (n,1) column");
        let y = self.value(a) * self.value(col);
        self.push(y, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a) * s;
        self.push(y, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a) + s;
        self.push(y, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(a).mapv(f);
        self.push(y, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let y = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        self.push(y, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let y = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        self.push(y, Op::Minimum(a, b))
    }

    /// Row-wise softmax. Columns with `keep[j] == false` get weight exactly zero.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(keep) = keep {
            assert_eq!(keep.len(), x.ncols(), "mask length");
            assert!(keep.iter().any(|&k| k), "softmax over a fully masked row");
        }
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| kept(*j))
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if kept(j) { (*v - max).exp() } else { 0.0 };
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        self.push(y, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for mut row in y.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        self.push(y, Op::LogSoftmax(a))
    }

    /// Standardize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(y, Op::LayerNorm { x: a, inv_std })
    }

    /// Divide each row by `max(‖row‖, eps)`; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = row.dot(&row).sqrt();
            let d = n.max(eps);
            row.mapv_inplace(|v| v / d);
            norms.push(n);
        }
        self.push(y, Op::L2Normalize { x: a, norms, eps })
    }

    /// Per-row maximum over kept columns, shape `(n,1)`. Ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var, keep: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let mut argmax = Vec::with_capacity(x.nrows());
        let mut y = Mat::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if keep.is_some_and(|k| !k[j]) {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.expect("row_max over a fully masked row");
            argmax.push(j);
            y[[i, 0]] = v;
        }
        self.push(y, Op::RowMax { x: a, argmax })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(y, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(y, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let y = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(y, Op::SumCols(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let y = self.value(a).select(Axis(0), idx);
        self.push(
            y,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(y, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let y = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(y, Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(y, Op::SliceRows { x: a, start })
    }

    /// `ln(x / (1 - x))` with `x` clamped into `[eps, 1 - eps]`.
    pub fn inverse_sigmoid(&mut self, a: Var, eps: f64) -> Var {
        self.unary(
            a,
            move |x| {
                let x = x.clamp(eps, 1.0 - eps);
                (x / (1.0 - x)).ln()
            },
            Op::InverseSigmoid { x: a, eps },
        )
    }

    /// Build a matrix of `shape` whose flat entry `i` is `x`'s flat entry `idx[i]`.
    pub fn rearrange(&mut self, a: Var, shape: (usize, usize), idx: Vec<usize>) -> Var {
        assert_eq!(shape.0 * shape.1, idx.len(), "rearrange index length");
        let src = self.value(a);
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let y = Mat::from_shape_vec(shape, data).expect("shape checked");
        self.push(y, Op::Rearrange { x: a, idx })
    }

    /// Gradients of the sum of `root`'s entries with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v.0).and_then(|g| g.as_ref()) {
                params.insert(id, g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, dy.dot(&val(*b).t()));
                acc(grads, *b, val(*a).t().dot(dy));
            }
            Op::MatMulNt(a, b) => {
                acc(grads, *a, dy.dot(val(*b)));
                acc(grads, *b, dy.t().dot(val(*a)));
            }
            Op::Transpose(a) => acc(grads, *a, dy.t().to_owned()),
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, -dy);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, dy * val(*b));
                acc(grads, *b, dy * val(*a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, dy / bv);
                let db = Zip::from(dy)
                    .and(av)
                    .and(bv)
                    .map_collect(|&g, &x, &y| -g * x / (y * y));
                acc(grads, *b, db);
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, dy.clone());
                acc(grads, *r, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                acc(grads, *a, dy * val(*r));
                acc(
                    grads,
                    *r,
                    (dy * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::MulCol(a, c) => {
                acc(grads, *a, dy * val(*c));
                acc(
                    grads,
                    *c,
                    (dy * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)),
                );
            }
            Op::Scale(a, s) => acc(grads, *a, dy * *s),
            Op::AddScalar(a) => acc(grads, *a, dy.clone()),
            Op::Relu(a) => {
                let g = Zip::from(dy)
                    .and(val(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = Zip::from(dy)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                acc(grads, *a, g);
            }
            Op::Exp(a) => acc(grads, *a, dy * &node.value),
            Op::Ln(a) => acc(grads, *a, dy / val(*a)),
            Op::Softplus(a) => {
                let g = Zip::from(dy)
                    .and(val(*a))
                    .map_collect(|&g, &x| g * sigmoid(x));
                acc(grads, *a, g);
            }
            Op::Square(a) => acc(grads, *a, dy * val(*a) * 2.0),
            Op::Abs(a) => {
                let g = Zip::from(dy)
                    .and(val(*a))
                    .map_collect(|&g, &x| g * x.signum() * f64::from(x != 0.0));
                acc(grads, *a, g);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let take_a = matches!(node.op, Op::Maximum(..));
                let mut ga = Mat::zeros(dy.dim());
                let mut gb = Mat::zeros(dy.dim());
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(dy)
                    .and(val(*a))
                    .and(val(*b))
                    .for_each(|ga, gb, &g, &x, &y| {
                        let first = if take_a { x >= y } else { x <= y };
                        if first {
                            *ga = g;
                        } else {
                            *gb = g;
                        }
                    });
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = y * dy;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = grow.sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv -= yv * s);
                }
                acc(grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut g = dy.clone();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = grow.sum();
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|gv, &yv| *gv -= yv.exp() * s);
                }
                acc(grads, *a, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.ncols() as f64;
                let mut g = Mat::zeros(y.dim());
                for (r, (mut grow, (yrow, dyrow))) in g
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(dy.rows()))
                    .enumerate()
                {
                    let mean_dy = dyrow.sum() / c;
                    let mean_dyy = dyrow.dot(&yrow) / c;
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .and(&dyrow)
                        .for_each(|gv, &yv, &d| *gv = inv_std[r] * (d - mean_dy - yv * mean_dyy));
                }
                acc(grads, *x, g);
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = &node.value;
                let mut g = Mat::zeros(y.dim());
                for (r, (mut grow, (yrow, dyrow))) in g
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(dy.rows()))
                    .enumerate()
                {
                    let n = norms[r];
                    if n > *eps {
                        let proj = yrow.dot(&dyrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .and(&dyrow)
                            .for_each(|gv, &yv, &d| *gv = (d - yv * proj) / n);
                    } else {
                        Zip::from(&mut grow).and(&dyrow).for_each(|gv, &d| *gv = d / eps);
                    }
                }
                acc(grads, *x, g);
            }
            Op::RowMax { x, argmax } => {
                let mut g = Mat::zeros(val(*x).dim());
                for (r, &j) in argmax.iter().enumerate() {
                    g[[r, j]] = dy[[r, 0]];
                }
                acc(grads, *x, g);
            }
            Op::SumAll(a) => {
                let g = Mat::from_elem(val(*a).dim(), dy[[0, 0]]);
                acc(grads, *a, g);
            }
            Op::SumRows(a) => {
                let g = dy
                    .broadcast(val(*a).dim())
                    .expect("row broadcast")
                    .to_owned();
                acc(grads, *a, g);
            }
            Op::SumCols(a) => {
                let g = dy
                    .broadcast(val(*a).dim())
                    .expect("column broadcast")
                    .to_owned();
                acc(grads, *a, g);
            }
            Op::GatherRows { x, idx } => {
                let mut g = Mat::zeros(val(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = g.row_mut(src);
                    row += &dy.row(r);
                }
                acc(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    acc(grads, p, dy.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).ncols();
                    acc(grads, p, dy.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let mut g = Mat::zeros(val(*x).dim());
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                acc(grads, *x, g);
            }
            Op::SliceRows { x, start } => {
                let mut g = Mat::zeros(val(*x).dim());
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                acc(grads, *x, g);
            }
            Op::Rearrange { x, idx } => {
                let mut g = Mat::zeros(val(*x).dim());
                let flat = g.as_slice_mut().expect("standard layout");
                for (&src, &d) in idx.iter().zip(dy.iter()) {
                    flat[src] += d;
                }
                acc(grads, *x, g);
            }
            Op::InverseSigmoid { x, eps } => {
                let g = Zip::from(dy).and(val(*x)).map_collect(|&g, &v| {
                    if v > *eps && v < 1.0 - *eps {
                        g / (v * (1.0 - v))
                    } else {
                        0.0
                    }
                });
                acc(grads, *x, g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    /// Dense per-parameter gradients in store order; unused parameters get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Mat> {
        store
            .ids()
            .map(|id| {
                self.params
                    .remove(&id)
                    .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Max-shifted `ln Σ exp(x)`.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
