//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::params::ParamStore;
use super::{ConvGeom, NumericsError, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over all checked entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every non-frozen parameter in `store`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// entries whose true gradient is ~0 from dominating.
pub fn check(
    store: &ParamStore,
    eps: f64,
    floor: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> Result<GradCheck, NumericsError> {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out)?;
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let v = f(&mut g, s);
        g.scalar(v)
    };
    let mut report = GradCheck { max_rel_error: 0.0, worst_param: String::new(), checked: 0 };
    let mut probe = store.clone();
    for p in store.iter().filter(|p| !p.frozen) {
        let analytic = grads.get(&p.name).expect("gradient for every parameter");
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe.get_mut(&p.name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", p.name);
            }
        }
    }
    Ok(report)
}

/// A scalar function of the parameters in `store`, ready for [`check`].
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    pub f: Box<dyn Fn(&mut Graph, &ParamStore) -> Var>,
}

impl Case {
    pub fn new(name: &'static str, store: ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var + 'static) -> Self {
        Self { name, store, f: Box::new(f) }
    }

    pub fn run(&self, eps: f64, floor: f64) -> Result<GradCheck, NumericsError> {
        check(&self.store, eps, floor, |g, s| (self.f)(g, s))
    }
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output entry contributes a distinct amount to the checked gradient.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::from_rows(shape[0], n / shape[0].max(1), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let c = g.constant(w);
    let m = g.mul(v, c);
    g.sum(m)
}

/// Entries uniform in `[lo, hi]`, each with a random sign when `signed`.
fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, signed: bool, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let x = rng.random_range(lo..hi);
            if signed && rng.random_bool(0.5) { -x } else { x }
        })
        .collect();
    Tensor::from_rows(rows, cols, data)
}

/// One case per differentiable graph operation and per composite layer.
/// Inputs of kinked ops stay away from the kink; inputs of `log`, `sqrt`
/// and `recip` stay positive.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let store = |specs: &[(&str, usize, usize, f64, f64, bool)], rng: &mut ChaCha8Rng| {
        let mut s = ParamStore::new();
        for &(name, r, c, lo, hi, signed) in specs {
            s.insert(name, "x", random_tensor(r, c, lo, hi, signed, rng));
        }
        s
    };
    let ab = [("a", 3, 4, 0.1, 1.0, true), ("b", 3, 4, 0.1, 1.0, true)];
    let pos = [("a", 3, 4, 0.5, 2.0, false)];
    let one = [("a", 3, 4, 0.1, 1.0, true)];
    let p = seed.wrapping_mul(31);
    macro_rules! unary {
        ($name:expr, $specs:expr, |$g:ident, $a:ident| $body:expr) => {{
            let s = store(&$specs, &mut rng);
            out.push(Case::new($name, s, move |$g: &mut Graph, st: &ParamStore| {
                let $a = $g.param(st, "a");
                let y = $body;
                project($g, y, p)
            }));
        }};
    }
    macro_rules! binary {
        ($name:expr, $specs:expr, |$g:ident, $a:ident, $b:ident| $body:expr) => {{
            let s = store(&$specs, &mut rng);
            out.push(Case::new($name, s, move |$g: &mut Graph, st: &ParamStore| {
                let $a = $g.param(st, "a");
                let $b = $g.param(st, "b");
                let y = $body;
                project($g, y, p)
            }));
        }};
    }
    binary!("add", ab, |g, a, b| g.add(a, b));
    binary!("sub", ab, |g, a, b| g.sub(a, b));
    binary!("mul", ab, |g, a, b| g.mul(a, b));
    binary!("add_row", [("a", 3, 4, 0.1, 1.0, true), ("b", 1, 4, 0.1, 1.0, true)], |g, a, b| g.add_row(a, b));
    binary!("matmul", [("a", 3, 4, 0.1, 1.0, true), ("b", 4, 2, 0.1, 1.0, true)], |g, a, b| g.matmul(a, b));
    binary!("concat_rows", [("a", 2, 3, 0.1, 1.0, true), ("b", 3, 3, 0.1, 1.0, true)], |g, a, b| g.concat_rows(&[a, b, a]));
    binary!("concat_cols", [("a", 3, 2, 0.1, 1.0, true), ("b", 3, 1, 0.1, 1.0, true)], |g, a, b| g.concat_cols(&[b, a]));
    unary!("scale", one, |g, a| g.scale(a, -1.7));
    unary!("add_const", one, |g, a| g.add_const(a, 0.3));
    unary!("transpose", one, |g, a| g.transpose(a));
    unary!("sum", one, |g, a| g.sum(a));
    unary!("mean", one, |g, a| g.mean(a));
    unary!("expand", [("a", 1, 1, 0.1, 1.0, true)], |g, a| g.expand(a, 3, 2));
    unary!("sum_rows", one, |g, a| g.sum_rows(a));
    unary!("sum_cols", one, |g, a| g.sum_cols(a));
    unary!("broadcast_rows", [("a", 1, 4, 0.1, 1.0, true)], |g, a| g.broadcast_rows(a, 3));
    unary!("broadcast_cols", [("a", 3, 1, 0.1, 1.0, true)], |g, a| g.broadcast_cols(a, 4));
    let mask = std::rc::Rc::new(random_tensor(3, 4, 0.0, 1.0, true, &mut rng));
    unary!("mask_mul", one, |g, a| g.mask_mul(a, mask.clone()));
    unary!("leaky_relu", one, |g, a| g.leaky_relu(a, 0.2));
    unary!("relu", one, |g, a| g.relu(a));
    unary!("sigmoid", one, |g, a| g.sigmoid(a));
    unary!("tanh", one, |g, a| g.tanh(a));
    unary!("exp", one, |g, a| g.exp(a));
    unary!("log", pos, |g, a| g.log(a));
    unary!("recip", pos, |g, a| g.recip(a));
    unary!("sqrt", pos, |g, a| g.sqrt(a));
    unary!("square", one, |g, a| g.square(a));
    unary!("log_sigmoid", one, |g, a| g.log_sigmoid(a));
    unary!("log_softmax", one, |g, a| g.log_softmax(a));
    unary!("softmax", one, |g, a| g.softmax(a));
    let geom = ConvGeom::new(5, 3, 3, 2, 1).expect("valid geometry");
    unary!("unfold", [("a", 5, 3, 0.1, 1.0, true)], |g, a| g.unfold(a, geom));
    unary!("fold", [("a", geom.out_rows, 9, 0.1, 1.0, true)], |g, a| g.fold(a, geom));
    unary!("slice_rows", one, |g, a| g.slice_rows(a, 1, 2));
    unary!("pad_rows", one, |g, a| g.pad_rows(a, 1, 5));
    unary!("slice_cols", one, |g, a| g.slice_cols(a, 1, 2));
    unary!("pad_cols", one, |g, a| g.pad_cols(a, 2, 7));
    let rows = std::rc::Rc::new(vec![2, 0, 2, 1]);
    unary!("gather_rows", one, |g, a| g.gather_rows(a, rows.clone()));
    let targets = std::rc::Rc::new(vec![1, 0, 1]);
    unary!("scatter_rows", one, |g, a| g.scatter_rows(a, targets.clone(), 4));
    let cols = std::rc::Rc::new(vec![3, 0, 3]);
    unary!("pick_cols", one, |g, a| g.pick_cols(a, cols.clone()));
    let spread = std::rc::Rc::new(vec![3, 0, 3]);
    unary!("scatter_cols", [("a", 3, 1, 0.1, 1.0, true)], |g, a| g.scatter_cols(a, spread.clone(), 5));
    // Second order: the gradient of an inner scalar is itself differentiated.
    unary!("grad", one, |g, a| {
        let t = g.tanh(a);
        let sq = g.square(t);
        let inner = g.sum(sq);
        g.grad(inner, &[a]).expect("scalar output")[0].expect("depends on a")
    });

    // Composite layers.
    let mut s = ParamStore::new();
    s.insert("x", "x", random_tensor(6, 3, 0.1, 1.0, true, &mut rng));
    s.insert("w", "x", random_tensor(9, 4, 0.1, 1.0, true, &mut rng));
    s.insert("b", "x", random_tensor(1, 4, 0.1, 1.0, true, &mut rng));
    out.push(Case::new("conv1d", s, move |g, st| {
        let (x, w, b) = (g.param(st, "x"), g.param(st, "w"), g.param(st, "b"));
        let y = super::nn::conv1d(g, x, w, b, super::nn::ConvSpec { width: 3, stride: 2, padding: 1 }).expect("valid conv");
        project(g, y, p)
    }));
    let mut s = ParamStore::new();
    s.insert("x", "x", random_tensor(3, 5, 0.1, 2.0, true, &mut rng));
    s.insert("ln.g", "x", random_tensor(1, 5, 0.5, 1.5, false, &mut rng));
    s.insert("ln.b", "x", random_tensor(1, 5, 0.1, 1.0, true, &mut rng));
    out.push(Case::new("layer_norm", s, move |g, st| {
        let x = g.param(st, "x");
        let y = super::nn::layer_norm_named(g, st, "ln", x);
        project(g, y, p)
    }));
    let mut s = ParamStore::new();
    s.insert("q", "x", random_tensor(3, 4, 0.1, 1.0, true, &mut rng));
    s.insert("m", "x", random_tensor(4, 3, 0.1, 1.0, true, &mut rng));
    super::nn::init_attention(&mut s, "att", "x", 4, 3, 4, false, &mut rng);
    let mut mask = Tensor::zeros(3, 4);
    mask.set(0, 3, -1e9);
    out.push(Case::new("multihead_attention", s, move |g, st| {
        let (q, m) = (g.param(st, "q"), g.param(st, "m"));
        let ap = super::nn::attention_params(g, st, "att", 2);
        let y = super::nn::multihead_attention(g, q, m, &ap, Some(&mask)).expect("valid attention").output;
        project(g, y, p)
    }));
    let mut s = ParamStore::new();
    s.insert("a", "x", random_tensor(6, 4, 0.1, 1.0, true, &mut rng));
    out.push(Case::new("ctc_loss", s, move |g, st| {
        let a = g.param(st, "a");
        let lp = g.log_softmax(a);
        super::ctc::ctc_loss_node(g, lp, &[0, 2, 2], 3).expect("finite").expect("feasible target")
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        for seed in [1, 2, 3] {
            for case in op_cases(seed) {
                let r = case.run(1e-6, 1e-6).unwrap();
                assert!(r.checked > 0, "{}", case.name);
                assert!(r.max_rel_error <= 1e-4, "{} seed {seed}: {} ({})", case.name, r.max_rel_error, r.worst_param);
            }
        }
    }
}
