//! Reverse-mode differentiation over a recorded graph of tensor ops.
//!
//! Backward passes are themselves recorded as graph ops, so the gradient of
//! one output can be used inside another differentiable expression. The
//! gradient penalty of the bridge discriminator relies on this: it takes the
//! input gradient of the critic, builds a penalty from it, and differentiates
//! that penalty again with respect to the critic's parameters.
//!
//! Shape errors inside the graph are programming errors and panic. Public
//! building blocks in [`super::nn`] validate user-facing shapes first.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{log_sum_exp, Tensor};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D unfold (im2col) and its adjoint fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_rows: usize,
    pub channels: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_rows: usize,
}

impl ConvGeom {
    pub fn new(
        in_rows: usize,
        channels: usize,
        width: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NumericsError> {
        if width == 0 || stride == 0 {
            return Err(NumericsError::InvalidArgument("conv width and stride must be >= 1".into()));
        }
        let padded = in_rows + 2 * padding;
        if padded < width {
            return Err(NumericsError::InvalidArgument(format!(
                "conv output would be empty: {in_rows} rows, padding {padding}, width {width}"
            )));
        }
        let out_rows = (padded - width) / stride + 1;
        Ok(Self { in_rows, channels, width, stride, padding, out_rows })
    }

    /// Input row feeding tap `k` of output row `i`, if inside the input.
    #[inline]
    fn source_row(&self, i: usize, k: usize) -> Option<usize> {
        let r = (i * self.stride + k) as isize - self.padding as isize;
        (r >= 0 && (r as usize) < self.in_rows).then_some(r as usize)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    Expand(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    MaskMul(Var, Rc<Tensor>),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    Square(Var),
    LogSoftmax(Var),
    Unfold(Var, ConvGeom),
    Fold(Var, ConvGeom),
    SliceRows(Var, usize),
    PadRows(Var, usize),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    PickCols(Var, Rc<Vec<usize>>),
    ScatterCols(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.map {
            match self.map.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn into_map(self) -> HashMap<String, Tensor> {
        self.map
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    poisoned: Option<(usize, String)>,
}

impl Graph {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reports the first op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match &self.poisoned {
            Some((idx, op)) => Err(NumericsError::NonFinite(format!("node {idx} ({op})"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some((idx, format!("{op:?}").chars().take(40).collect()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(idx)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf that gradients can be requested for via [`Graph::grad`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Looks up `name` in `store`; repeated calls return the same node.
    /// Frozen parameters enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not present in store"));
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::AddConst(a), ng)
    }

    /// `a + row`, with the `1 x c` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.any_grad(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a `1 x 1` value to `rows x cols`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::full(rows, cols, self.value(a).item());
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Expand(a), ng)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = vec![0.0; av.cols()];
        for i in 0..av.rows() {
            for (o, x) in out.iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(Tensor::row(&out), Op::SumRows(a), ng)
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1);
        let mut data = Vec::with_capacity(rows * av.cols());
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let v = Tensor::from_rows(rows, av.cols(), data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::BroadcastRows(a), ng)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect();
        let v = Tensor::from_rows(av.rows(), 1, data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Repeats a single column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1);
        let mut data = Vec::with_capacity(av.rows() * cols);
        for &x in av.data() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Tensor::from_rows(av.rows(), cols, data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::BroadcastCols(a), ng)
    }

    /// Elementwise product with a fixed mask.
    pub fn mask_mul(&mut self, a: Var, mask: Rc<Tensor>) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::MaskMul(a, mask), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mask_mul(a, Rc::new(mask))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(stable_sigmoid);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Log(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    /// `log(sigmoid(a))`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        let ng = self.any_grad(&[a]);
        self.push(v, Op::LogSigmoid(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..av.rows() {
            let lse = log_sum_exp(av.row_slice(i));
            for x in out.row_slice_mut(i) {
                *x -= lse;
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let l = self.log_softmax(a);
        self.exp(l)
    }

    /// im2col: `T x D -> T' x (width * D)`, tap-major columns.
    pub fn unfold(&mut self, a: Var, geom: ConvGeom) -> Var {
        let av = self.value(a);
        assert_eq!((av.rows(), av.cols()), (geom.in_rows, geom.channels), "unfold geometry");
        let d = geom.channels;
        let mut out = Tensor::zeros(geom.out_rows, geom.width * d);
        for i in 0..geom.out_rows {
            for k in 0..geom.width {
                if let Some(r) = geom.source_row(i, k) {
                    out.row_slice_mut(i)[k * d..(k + 1) * d].copy_from_slice(av.row_slice(r));
                }
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Unfold(a, geom), ng)
    }

    /// Adjoint of [`Graph::unfold`]: scatter-adds columns back onto input rows.
    pub fn fold(&mut self, a: Var, geom: ConvGeom) -> Var {
        let av = self.value(a);
        let d = geom.channels;
        assert_eq!((av.rows(), av.cols()), (geom.out_rows, geom.width * d), "fold geometry");
        let mut out = Tensor::zeros(geom.in_rows, d);
        for i in 0..geom.out_rows {
            for k in 0..geom.width {
                if let Some(r) = geom.source_row(i, k) {
                    let src = &av.row_slice(i)[k * d..(k + 1) * d];
                    for (o, s) in out.row_slice_mut(r).iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Fold(a, geom), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let v = Tensor::from_rows(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let ng = self.any_grad(&[a]);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    /// Places `a` at row offset `start` inside a zero matrix of `total` rows.
    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert!(start + av.rows() <= total);
        let mut out = Tensor::zeros(total, c);
        out.data_mut()[start * c..(start + av.rows()) * c].copy_from_slice(av.data());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::PadRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(av.rows() * len);
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(i)[start..start + len]);
        }
        let v = Tensor::from_rows(av.rows(), len, data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let av = self.value(a);
        assert!(start + av.cols() <= total);
        let mut out = Tensor::zeros(av.rows(), total);
        for i in 0..av.rows() {
            out.row_slice_mut(i)[start..start + av.cols()].copy_from_slice(av.row_slice(i));
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::PadCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::from_rows(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_slice_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row_slice(i));
            }
            off += pv.cols();
        }
        let ng = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            data.extend_from_slice(av.row_slice(r));
        }
        let v = Tensor::from_rows(idx.len(), c, data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    /// Adjoint of gather: row `i` of `a` is added into output row `idx[i]`.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len());
        let mut out = Tensor::zeros(rows, av.cols());
        for (i, &r) in idx.iter().enumerate() {
            for (o, x) in out.row_slice_mut(r).iter_mut().zip(av.row_slice(i)) {
                *o += x;
            }
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::ScatterRows(a, idx), ng)
    }

    /// Picks `a[i, idx[i]]` for every row: `r x c -> r x 1`.
    pub fn pick_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "pick_cols needs one index per row");
        let data = idx.iter().enumerate().map(|(i, &j)| av.get(i, j)).collect();
        let v = Tensor::from_rows(idx.len(), 1, data);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::PickCols(a, idx), ng)
    }

    pub fn scatter_cols(&mut self, a: Var, idx: Rc<Vec<usize>>, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1);
        let mut out = Tensor::zeros(idx.len(), cols);
        for (i, &j) in idx.iter().enumerate() {
            out.set(i, j, av.get(i, 0));
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::ScatterCols(a, idx), ng)
    }

    /// Differentiates the scalar `output` with respect to `wrt`.
    ///
    /// The returned gradients are graph nodes, so they can take part in
    /// further differentiable computation. Entries are `None` when `output`
    /// does not depend on the corresponding var.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>, NumericsError> {
        let grads = self.backprop(output)?;
        Ok(wrt.iter().map(|w| grads[w.0]).collect())
    }

    /// Gradients of the scalar `output` for every parameter that entered the
    /// graph. Frozen parameters get zero tensors.
    pub fn backward(&mut self, output: Var) -> Result<Gradients, NumericsError> {
        let grads = self.backprop(output)?;
        let mut out = Gradients::default();
        let params: Vec<(String, Var)> = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (name, v) in params {
            let g = match grads[v.0] {
                Some(g) if self.nodes[v.0].needs_grad => self.value(g).clone(),
                _ => {
                    let shape = self.value(v);
                    Tensor::zeros(shape.rows(), shape.cols())
                }
            };
            out.insert(name, g);
        }
        self.check_finite()?;
        Ok(out)
    }

    fn backprop(&mut self, output: Var) -> Result<Vec<Option<Var>>, NumericsError> {
        if self.value(output).len() != 1 {
            return Err(NumericsError::NonScalarOutput(self.value(output).shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contribs = self.vjp(Var(i), &op, g);
            for (parent, c) in contribs {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }
        self.check_finite()?;
        Ok(grads)
    }

    /// Vector-Jacobian products of one node, emitted as graph ops.
    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Vec<(Var, Var)> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => {
                let nb = self.lazy(*b, |s| s.scale(g, -1.0));
                with(vec![(*a, Some(g)), (*b, nb)])
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = self.lazy(a, |s| s.mul(g, b));
                let gb = self.lazy(b, |s| s.mul(g, a));
                with(vec![(a, ga), (b, gb)])
            }
            Op::Scale(a, c) => vec![(*a, self.scale(g, *c))],
            Op::AddConst(a) => vec![(*a, g)],
            Op::AddRow(a, row) => {
                let gr = self.lazy(*row, |s| s.sum_rows(g));
                with(vec![(*a, Some(g)), (*row, gr)])
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = self.lazy(a, |s| {
                    let bt = s.transpose(b);
                    s.matmul(g, bt)
                });
                let gb = self.lazy(b, |s| {
                    let at = s.transpose(a);
                    s.matmul(at, g)
                });
                with(vec![(a, ga), (b, gb)])
            }
            Op::Transpose(a) => vec![(*a, self.transpose(g))],
            Op::SumAll(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                vec![(*a, self.expand(g, r, c))]
            }
            Op::Expand(a) => vec![(*a, self.sum(g))],
            Op::SumRows(a) => {
                let r = self.value(*a).rows();
                vec![(*a, self.broadcast_rows(g, r))]
            }
            Op::BroadcastRows(a) => vec![(*a, self.sum_rows(g))],
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                vec![(*a, self.broadcast_cols(g, c))]
            }
            Op::BroadcastCols(a) => vec![(*a, self.sum_cols(g))],
            Op::MaskMul(a, m) => vec![(*a, self.mask_mul(g, m.clone()))],
            Op::Sigmoid(a) => {
                // σ' = σ (1 - σ)
                let neg = self.scale(out, -1.0);
                let one_minus = self.add_const(neg, 1.0);
                let d = self.mul(out, one_minus);
                vec![(*a, self.mul(g, d))]
            }
            Op::LogSigmoid(a) => {
                // d/da log σ(a) = σ(-a)
                let na = self.scale(*a, -1.0);
                let s = self.sigmoid(na);
                vec![(*a, self.mul(g, s))]
            }
            Op::Tanh(a) => {
                let sq = self.square(out);
                let neg = self.scale(sq, -1.0);
                let d = self.add_const(neg, 1.0);
                vec![(*a, self.mul(g, d))]
            }
            Op::Exp(a) => vec![(*a, self.mul(g, out))],
            Op::Log(a) => {
                let r = self.recip(*a);
                vec![(*a, self.mul(g, r))]
            }
            Op::Recip(a) => {
                let sq = self.square(out);
                let m = self.mul(g, sq);
                vec![(*a, self.scale(m, -1.0))]
            }
            Op::Sqrt(a) => {
                let r = self.recip(out);
                let h = self.scale(r, 0.5);
                vec![(*a, self.mul(g, h))]
            }
            Op::Square(a) => {
                let two = self.scale(*a, 2.0);
                vec![(*a, self.mul(g, two))]
            }
            Op::LogSoftmax(a) => {
                let c = self.value(*a).cols();
                let p = self.exp(out);
                let gs = self.sum_cols(g);
                let gb = self.broadcast_cols(gs, c);
                let pg = self.mul(p, gb);
                vec![(*a, self.sub(g, pg))]
            }
            Op::Unfold(a, geom) => vec![(*a, self.fold(g, *geom))],
            Op::Fold(a, geom) => vec![(*a, self.unfold(g, *geom))],
            Op::SliceRows(a, start) => {
                let total = self.value(*a).rows();
                vec![(*a, self.pad_rows(g, *start, total))]
            }
            Op::PadRows(a, start) => {
                let len = self.value(*a).rows();
                vec![(*a, self.slice_rows(g, *start, len))]
            }
            Op::SliceCols(a, start) => {
                let total = self.value(*a).cols();
                vec![(*a, self.pad_cols(g, *start, total))]
            }
            Op::PadCols(a, start) => {
                let len = self.value(*a).cols();
                vec![(*a, self.slice_cols(g, *start, len))]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        res.push((p, self.slice_rows(g, off, n)));
                    }
                    off += n;
                }
                res
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        res.push((p, self.slice_cols(g, off, n)));
                    }
                    off += n;
                }
                res
            }
            Op::GatherRows(a, idx) => {
                let rows = self.value(*a).rows();
                vec![(*a, self.scatter_rows(g, idx.clone(), rows))]
            }
            Op::ScatterRows(a, idx) => vec![(*a, self.gather_rows(g, idx.clone()))],
            Op::PickCols(a, idx) => {
                let cols = self.value(*a).cols();
                vec![(*a, self.scatter_cols(g, idx.clone(), cols))]
            }
            Op::ScatterCols(a, idx) => vec![(*a, self.pick_cols(g, idx.clone()))],
        }
    }

    /// Emits `f` only when `target` needs a gradient.
    fn lazy(&mut self, target: Var, f: impl FnOnce(&mut Self) -> Var) -> Option<Var> {
        self.nodes[target.0].needs_grad.then(|| f(self))
    }
}

fn with(pairs: Vec<(Var, Option<Var>)>) -> Vec<(Var, Var)> {
    pairs.into_iter().filter_map(|(p, g)| g.map(|g| (p, g))).collect()
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let gx = g.grad(y, &[x]).unwrap()[0].unwrap();
        assert_eq!(g.scalar(gx), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(2.0));
        let x2 = g.mul(x, x);
        let y = g.mul(x2, x);
        let dy = g.grad(y, &[x]).unwrap()[0].unwrap();
        assert_eq!(g.scalar(dy), 12.0);
        let d2y = g.grad(dy, &[x]).unwrap()[0].unwrap();
        assert_eq!(g.scalar(d2y), 12.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(2, 2));
        assert!(matches!(g.grad(x, &[x]), Err(NumericsError::NonScalarOutput(_))));
    }

    #[test]
    fn nan_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(-1.0));
        let y = g.sqrt(x);
        assert!(matches!(g.grad(y, &[x]), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_negative() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(-800.0));
        let y = g.log_sigmoid(x);
        assert_eq!(g.scalar(y), -800.0);
    }

    #[test]
    fn unfold_then_fold_is_adjoint() {
        // <unfold(x), y> == <x, fold(y)>
        let geom = ConvGeom::new(5, 2, 3, 2, 1).unwrap();
        let mut g = Graph::new();
        let x = Tensor::from_rows(5, 2, (0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
        let y = Tensor::from_rows(
            geom.out_rows,
            6,
            (0..geom.out_rows * 6).map(|i| (i as f64).sin()).collect(),
        );
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let ux = g.unfold(xv, geom);
        let fy = g.fold(yv, geom);
        let lhs: f64 = g.value(ux).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(fy).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
