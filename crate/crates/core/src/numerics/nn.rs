//! Layers built from graph primitives: linear, 1-D convolution, layer norm
//! and multihead attention.

use rand::Rng;

use super::graph::{ConvGeom, Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

/// Registers `{name}.w` (`din x dout`, scaled Gaussian) and `{name}.b` (zeros).
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    group: &str,
    din: usize,
    dout: usize,
    rng: &mut impl Rng,
) {
    let std = (1.0 / din as f64).sqrt();
    store.insert_normal(&format!("{name}.w"), group, din, dout, std, rng);
    store.insert_zeros(&format!("{name}.b"), group, 1, dout);
}

/// `x @ {name}.w + {name}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// Kernel shape for [`conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn output_len(&self, t: usize) -> Result<usize, NumericsError> {
        Ok(ConvGeom::new(t, 1, self.width, self.stride, self.padding)?.out_rows)
    }
}

/// 1-D convolution over rows. `weight` is `(width * D_in) x D_out` with
/// tap-major rows, `bias` is `1 x D_out`.
pub fn conv1d(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    spec: ConvSpec,
) -> Result<Var, NumericsError> {
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    let geom = ConvGeom::new(t, d, spec.width, spec.stride, spec.padding)?;
    if g.value(weight).rows() != spec.width * d {
        return Err(NumericsError::ShapeMismatch(format!(
            "conv weight has {} rows, expected width {} x channels {d}",
            g.value(weight).rows(),
            spec.width
        )));
    }
    if g.value(bias).cols() != g.value(weight).cols() {
        return Err(NumericsError::ShapeMismatch("conv bias width".into()));
    }
    let cols = g.unfold(x, geom);
    let y = g.matmul(cols, weight);
    Ok(g.add_row(y, bias))
}

/// Layer norm over each row with learned gain and bias (`1 x D` each).
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    let s = g.sum_cols(x);
    let mean = g.scale(s, 1.0 / d as f64);
    let mean_b = g.broadcast_cols(mean, d);
    let centered = g.sub(x, mean_b);
    let sq = g.square(centered);
    let ss = g.sum_cols(sq);
    let var = g.scale(ss, 1.0 / d as f64);
    let var_eps = g.add_const(var, eps);
    let std = g.sqrt(var_eps);
    let inv = g.recip(std);
    let inv_b = g.broadcast_cols(inv, d);
    let normed = g.mul(centered, inv_b);
    let gain_b = g.broadcast_rows(gain, t);
    let scaled = g.mul(normed, gain_b);
    g.add_row(scaled, bias)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, group: &str, d: usize) {
    store.insert_full(&format!("{name}.g"), group, 1, d, 1.0);
    store.insert_zeros(&format!("{name}.b"), group, 1, d);
}

pub fn layer_norm_named(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let gain = g.param(store, &format!("{name}.g"));
    let bias = g.param(store, &format!("{name}.b"));
    layer_norm(g, x, gain, bias, 1e-5)
}

/// Projection matrices of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `D_q x D_k`
    pub wq: Var,
    /// `D_kv x D_k`
    pub wk: Var,
    /// `D_kv x D_v`
    pub wv: Var,
    /// `D_v x D_out`
    pub wo: Var,
    pub heads: usize,
}

/// Registers `{name}.{q,k,v,o}` without biases. When `zero_output` is set the
/// output projection starts at zero, so the block initially contributes
/// nothing.
#[allow(clippy::too_many_arguments)]
pub fn init_attention(
    store: &mut ParamStore,
    name: &str,
    group: &str,
    d_query: usize,
    d_kv: usize,
    d_model: usize,
    zero_output: bool,
    rng: &mut impl Rng,
) {
    let sq = (1.0 / d_query as f64).sqrt();
    let skv = (1.0 / d_kv as f64).sqrt();
    store.insert_normal(&format!("{name}.q"), group, d_query, d_model, sq, rng);
    store.insert_normal(&format!("{name}.k"), group, d_kv, d_model, skv, rng);
    store.insert_normal(&format!("{name}.v"), group, d_kv, d_model, skv, rng);
    if zero_output {
        store.insert_zeros(&format!("{name}.o"), group, d_model, d_model);
    } else {
        let so = (1.0 / d_model as f64).sqrt();
        store.insert_normal(&format!("{name}.o"), group, d_model, d_model, so, rng);
    }
}

pub fn attention_params(g: &mut Graph, store: &ParamStore, name: &str, heads: usize) -> AttentionParams {
    AttentionParams {
        wq: g.param(store, &format!("{name}.q")),
        wk: g.param(store, &format!("{name}.k")),
        wv: g.param(store, &format!("{name}.v")),
        wo: g.param(store, &format!("{name}.o")),
        heads,
    }
}

/// Output of [`multihead_attention`].
pub struct AttentionOutput {
    pub output: Var,
    /// One `Tq x Tk` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads: queries come from
/// `queries` (`Tq x D_q`), keys and values from `memory` (`Tk x D_kv`).
/// `mask`, when given, is added to the `Tq x Tk` scores of every head (use a
/// large negative value to block a position).
pub fn multihead_attention(
    g: &mut Graph,
    queries: Var,
    memory: Var,
    p: &AttentionParams,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput, NumericsError> {
    let d_model = g.value(p.wq).cols();
    if p.heads == 0 || d_model % p.heads != 0 {
        return Err(NumericsError::ShapeMismatch(format!(
            "model width {d_model} not divisible by {} heads",
            p.heads
        )));
    }
    if g.value(queries).cols() != g.value(p.wq).rows() {
        return Err(NumericsError::ShapeMismatch(format!(
            "query width {} vs projection {}",
            g.value(queries).cols(),
            g.value(p.wq).rows()
        )));
    }
    if g.value(memory).cols() != g.value(p.wk).rows() || g.value(memory).cols() != g.value(p.wv).rows() {
        return Err(NumericsError::ShapeMismatch("key/value width vs projection".into()));
    }
    if g.value(p.wk).cols() != d_model {
        return Err(NumericsError::ShapeMismatch("query/key projection widths differ".into()));
    }
    let (tq, tk) = (g.value(queries).rows(), g.value(memory).rows());
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (tq, tk) {
            return Err(NumericsError::ShapeMismatch("attention mask shape".into()));
        }
    }
    let dv = g.value(p.wv).cols();
    if dv % p.heads != 0 {
        return Err(NumericsError::ShapeMismatch("value width not divisible by heads".into()));
    }
    let dh = d_model / p.heads;
    let dvh = dv / p.heads;
    let q = g.matmul(queries, p.wq);
    let k = g.matmul(memory, p.wk);
    let v = g.matmul(memory, p.wv);
    let mask_var = mask.map(|m| g.constant(m.clone()));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dvh, dvh))
        };
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let mut scores = g.scale(raw, scale);
        if let Some(m) = mask_var {
            scores = g.add(scores, m);
        }
        let a = g.softmax(scores);
        weights.push(a);
        head_outs.push(g.matmul(a, vh));
    }
    let cat = if head_outs.len() == 1 { head_outs[0] } else { g.concat_cols(&head_outs) };
    let output = g.matmul(cat, p.wo);
    Ok(AttentionOutput { output, weights })
}

/// Additive causal mask: position `i` may attend to `j <= i` only.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, -1e9);
        }
    }
    m
}

/// Mean negative log-likelihood of `targets` under row-wise `log_probs`,
/// summed (not averaged) over rows.
pub fn nll_sum(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Var {
    let picked = g.pick_cols(log_probs, std::rc::Rc::new(targets.to_vec()));
    let s = g.sum(picked);
    g.scale(s, -1.0)
}
