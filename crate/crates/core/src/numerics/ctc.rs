//! Connectionist temporal classification loss (forward-backward in log space).
//!
//! Inputs are per-frame log-probabilities over `V + 1` classes; the blank is
//! the last class unless stated otherwise.

use super::graph::{Graph, Var};
use super::tensor::{log_softmax_rows, log_sum_exp, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    /// No blank-augmented alignment of `frames` steps collapses to the target.
    #[error("infeasible CTC target: {target_len} labels need at least {required} frames, got {frames}")]
    Infeasible { target_len: usize, required: usize, frames: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target contains the blank label")]
    BlankInTarget,
}

/// Loss plus its gradient with respect to the log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    /// `d loss / d log_probs`, i.e. minus the per-frame label occupancy.
    pub grad: Tensor,
}

/// Minimum number of frames needed to emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn ctc_forward_backward(
    log_probs: &Tensor,
    target: &[usize],
    blank: usize,
) -> Result<CtcOutput, CtcError> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    for &l in target {
        if l >= classes {
            return Err(CtcError::LabelOutOfRange { label: l, classes });
        }
        if l == blank {
            return Err(CtcError::BlankInTarget);
        }
    }
    let required = min_frames(target);
    if t_len < required.max(1) {
        return Err(CtcError::Infeasible { target_len: target.len(), required, frames: t_len });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = [alpha[t - 1][s], neg, neg];
            if s >= 1 {
                terms[1] = alpha[t - 1][s - 1];
            }
            if skip_ok(s) {
                terms[2] = alpha[t - 1][s - 2];
            }
            let acc = log_sum_exp(&terms);
            if acc > neg {
                alpha[t][s] = acc + log_probs.get(t, ext[s]);
            }
        }
    }
    let last = t_len - 1;
    let log_z = if s_len > 1 {
        log_sum_exp(&[alpha[last][s_len - 1], alpha[last][s_len - 2]])
    } else {
        alpha[last][0]
    };
    if log_z == neg {
        return Err(CtcError::Infeasible { target_len: target.len(), required, frames: t_len });
    }

    // beta[t][s]: log-probability of finishing from state s after frame t.
    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[last][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last][s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut terms = [neg; 3];
            terms[0] = beta[t + 1][s] + log_probs.get(t + 1, ext[s]);
            if s + 1 < s_len {
                terms[1] = beta[t + 1][s + 1] + log_probs.get(t + 1, ext[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms[2] = beta[t + 1][s + 2] + log_probs.get(t + 1, ext[s + 2]);
            }
            beta[t][s] = log_sum_exp(&terms);
        }
    }

    let mut grad = Tensor::zeros(t_len, classes);
    for t in 0..t_len {
        for s in 0..s_len {
            let lp = alpha[t][s] + beta[t][s];
            if lp > neg {
                let k = ext[s];
                let v = grad.get(t, k) - (lp - log_z).exp();
                grad.set(t, k, v);
            }
        }
    }
    Ok(CtcOutput { loss: -log_z, grad })
}

/// CTC loss of raw logits (`T x (V + 1)`, blank last).
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<f64, CtcError> {
    let blank = logits.cols() - 1;
    ctc_forward_backward(&log_softmax_rows(logits), target, blank).map(|o| o.loss)
}

/// Graph node whose value is the CTC loss of `log_probs` and whose gradient
/// is the exact CTC gradient. Not twice differentiable.
pub fn ctc_loss_node(
    g: &mut Graph,
    log_probs: Var,
    target: &[usize],
    blank: usize,
) -> Result<Result<Var, CtcError>, NumericsError> {
    let out = match ctc_forward_backward(g.value(log_probs), target, blank) {
        Ok(o) => o,
        Err(e) => return Ok(Err(e)),
    };
    // loss = <grad, lp> + c with c chosen so the value matches exactly; the
    // gradient of this expression with respect to lp is `grad`.
    let lin = g.mask_mul(log_probs, std::rc::Rc::new(out.grad));
    let s = g.sum(lin);
    let offset = out.loss - g.scalar(s);
    Ok(Ok(g.add_const(s, offset)))
}

/// Greedy CTC decode: argmax per frame, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let k = log_probs.argmax_row(t);
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
