//! The adversarial objective and its four regularizers.

use serde::{Deserialize, Serialize};

use super::BridgeError;
use crate::numerics::{Graph, Tensor, Var};

/// Probability window applied before taking logs of discriminator outputs.
pub const PROB_CLAMP: f64 = 1e-12;

/// `E[log C(real)] + E[log(1 - C(fake))]` from critic scores, with
/// `C = sigmoid(score)`.
pub fn gan_loss(g: &mut Graph, real_scores: &[Var], fake_scores: &[Var]) -> Result<Var, BridgeError> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(BridgeError::EmptyBatch);
    }
    let real: Vec<Var> = real_scores.iter().map(|&s| g.log_sigmoid(s)).collect();
    let fake: Vec<Var> = fake_scores
        .iter()
        .map(|&s| {
            let neg = g.scale(s, -1.0);
            g.log_sigmoid(neg)
        })
        .collect();
    let r = mean_of(g, &real);
    let f = mean_of(g, &fake);
    Ok(g.add(r, f))
}

/// The same objective evaluated on discriminator probabilities.
pub fn gan_loss_from_probs(c_real: &[f64], c_fake: &[f64]) -> Result<f64, BridgeError> {
    if c_real.is_empty() || c_fake.is_empty() {
        return Err(BridgeError::EmptyBatch);
    }
    let check = |c: f64| {
        if (0.0..=1.0).contains(&c) {
            Ok(c.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        } else {
            Err(BridgeError::InvalidProbability(c))
        }
    };
    let mut real = 0.0;
    for &c in c_real {
        real += check(c)?.ln();
    }
    let mut fake = 0.0;
    for &c in c_fake {
        fake += (1.0 - check(c)?).ln();
    }
    Ok(real / c_real.len() as f64 + fake / c_fake.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Minimizes `E[log(1 - C(G(X)))]` exactly as in the min-max game.
    Minimax,
    /// Minimizes `-E[log C(G(X))]`; same fixed point, stronger early gradients.
    #[default]
    NonSaturating,
}

/// Adversarial term the generator minimizes.
pub fn generator_adversarial(g: &mut Graph, fake_scores: &[Var], objective: GeneratorObjective) -> Result<Var, BridgeError> {
    if fake_scores.is_empty() {
        return Err(BridgeError::EmptyBatch);
    }
    let terms: Vec<Var> = fake_scores
        .iter()
        .map(|&s| match objective {
            GeneratorObjective::Minimax => {
                let neg = g.scale(s, -1.0);
                g.log_sigmoid(neg)
            }
            GeneratorObjective::NonSaturating => {
                let l = g.log_sigmoid(s);
                g.scale(l, -1.0)
            }
        })
        .collect();
    Ok(mean_of(g, &terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Input gradient by double backpropagation.
    #[default]
    Exact,
    /// Input gradient by central differences with the given step.
    FiniteDifference(f64),
}

/// `(||grad_x C(x)|| - 1)^2` at `x = mu * fake + (1 - mu) * real`, both
/// truncated to their common length. The norm is `sqrt(sum + 1e-16)` so its
/// derivative stays finite at zero.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &mut dyn FnMut(&mut Graph, Var) -> Result<Var, BridgeError>,
    real: &Tensor,
    fake: &Tensor,
    mu: f64,
    mode: PenaltyMode,
) -> Result<Var, BridgeError> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(BridgeError::Shape(format!("interpolation coefficient {mu} outside [0, 1]")));
    }
    if real.cols() != fake.cols() {
        return Err(BridgeError::Shape("real and fake widths differ".into()));
    }
    let n = real.rows().min(fake.rows());
    if n == 0 {
        return Err(BridgeError::EmptyBatch);
    }
    let k = real.cols();
    let mut interp = Tensor::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            interp.set(i, j, mu * fake.get(i, j) + (1.0 - mu) * real.get(i, j));
        }
    }
    let sq = match mode {
        PenaltyMode::Exact => {
            let x = g.input_with_grad(interp);
            let score = critic(g, x)?;
            match g.grad(score, &[x])?[0] {
                Some(dx) => {
                    let s = g.square(dx);
                    g.sum(s)
                }
                None => g.constant(Tensor::scalar(0.0)),
            }
        }
        PenaltyMode::FiniteDifference(eps) => {
            let mut total: Option<Var> = None;
            for i in 0..n {
                for j in 0..k {
                    let mut up = interp.clone();
                    up.set(i, j, interp.get(i, j) + eps);
                    let mut down = interp.clone();
                    down.set(i, j, interp.get(i, j) - eps);
                    let xu = g.constant(up);
                    let su = critic(g, xu)?;
                    let xd = g.constant(down);
                    let sd = critic(g, xd)?;
                    let diff = g.sub(su, sd);
                    let d = g.scale(diff, 0.5 / eps);
                    let d2 = g.square(d);
                    total = Some(match total {
                        Some(t) => g.add(t, d2),
                        None => d2,
                    });
                }
            }
            total.expect("at least one entry")
        }
    };
    let sq = g.add_const(sq, 1e-16);
    let norm = g.sqrt(sq);
    let dev = g.add_const(norm, -1.0);
    let pen = g.square(dev);
    if !g.value(pen).is_finite() {
        return Err(BridgeError::NonFinite("gradient penalty".into()));
    }
    Ok(pen)
}

/// `sum_t ||p_t - p_{t+1}||^2` over consecutive rows of `probs`.
pub fn smoothness(g: &mut Graph, probs: Var) -> Var {
    let t = g.value(probs).rows();
    if t < 2 {
        return g.constant(Tensor::scalar(0.0));
    }
    let head = g.slice_rows(probs, 0, t - 1);
    let tail = g.slice_rows(probs, 1, t - 1);
    let d = g.sub(head, tail);
    let s = g.square(d);
    g.sum(s)
}

/// Batch mean of `-H(mean_t p_t)`: minimizing it spreads phoneme usage.
pub fn diversity(g: &mut Graph, batch: &[Var]) -> Result<Var, BridgeError> {
    if batch.is_empty() {
        return Err(BridgeError::EmptyBatch);
    }
    let terms: Vec<Var> = batch
        .iter()
        .map(|&p| {
            let t = g.value(p).rows() as f64;
            let s = g.sum_rows(p);
            let avg = g.scale(s, 1.0 / t);
            let shifted = g.add_const(avg, 1e-12);
            let logp = g.log(shifted);
            let plogp = g.mul(avg, logp);
            g.sum(plogp)
        })
        .collect();
    Ok(mean_of(g, &terms))
}

/// `-sum_t log P(cluster_t)` under the auxiliary head.
pub fn reconstruction(g: &mut Graph, aux_logits: Var, clusters: &[usize]) -> Result<Var, BridgeError> {
    let (t, k) = (g.value(aux_logits).rows(), g.value(aux_logits).cols());
    if clusters.len() != t {
        return Err(BridgeError::Shape(format!("{} cluster targets for {t} steps", clusters.len())));
    }
    if let Some(&c) = clusters.iter().find(|&&c| c >= k) {
        return Err(BridgeError::Shape(format!("cluster {c} outside {k} classes")));
    }
    let lp = g.log_softmax(aux_logits);
    Ok(crate::numerics::nn::nll_sum(g, lp, clusters))
}

/// Majority cluster of each step's frame span; ties go to the lower id.
pub fn step_clusters(frame_clusters: &[usize], stride_map: &[(usize, usize)], k: usize) -> Vec<usize> {
    stride_map
        .iter()
        .map(|&(s, e)| {
            let mut counts = vec![0usize; k];
            for &c in &frame_clusters[s..e] {
                counts[c] += 1;
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            counts.iter().position(|&c| c == best).unwrap_or(0)
        })
        .collect()
}

/// Gradient-check cases for each bridge loss term on a small random
/// generator and critic. The penalty case differentiates the critic only,
/// matching how it is trained.
pub fn loss_cases(seed: u64) -> Vec<crate::numerics::gradcheck::Case> {
    use super::model::{aux_logits, discriminator_score, generator_forward, init_discriminator, init_generator};
    use super::model::{DiscriminatorConfig, GeneratorConfig, AUX_GROUP, DISC_GROUP, GEN_GROUP};
    use crate::numerics::gradcheck::Case;
    use crate::numerics::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let (dim, k, clusters) = (3, 4, 3);
    let gcfg = GeneratorConfig { hidden: 5, ..GeneratorConfig::default() };
    let dcfg = DiscriminatorConfig { hidden: 5, ..DiscriminatorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Tensor::from_rows(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut store = ParamStore::new();
    init_generator(&mut store, &gcfg, dim, k, clusters, &mut rng);
    init_discriminator(&mut store, &dcfg, k, &mut rng);
    // Nonzero biases keep activations off the leaky kink.
    for name in ["gen.conv.b", "disc.c1.b", "disc.c2.b"] {
        let (r, c) = (store.value(name).rows(), store.value(name).cols());
        store.get_mut(name).expect("initialized").value = random(r, c, &mut rng);
    }
    let utts: Vec<Tensor> = (0..2).map(|i| random(6 + i, dim, &mut rng)).collect();
    let real: Vec<Tensor> = (0..2)
        .map(|i| {
            let mut t = Tensor::zeros(5 + i, k);
            (0..5 + i).for_each(|r| t.set(r, rng.random_range(0..k), 1.0));
            t
        })
        .collect();
    let probs = move |g: &mut Graph, st: &ParamStore, x: &Tensor| {
        let out = generator_forward(g, st, &gcfg, x).expect("long enough");
        (g.softmax(out.logits), out.hidden)
    };

    let mut out = Vec::new();
    let (u, r) = (utts.clone(), real.clone());
    let mut gen_disc = store.subset(GEN_GROUP);
    gen_disc.merge(store.subset(DISC_GROUP));
    out.push(Case::new("gan", gen_disc, move |g, st| {
        let real: Vec<Var> = r
            .iter()
            .map(|t| {
                let c = g.constant(t.clone());
                discriminator_score(g, st, &dcfg, c).expect("valid critic")
            })
            .collect();
        let fake: Vec<Var> = u
            .iter()
            .map(|x| {
                let p = probs(g, st, x).0;
                discriminator_score(g, st, &dcfg, p).expect("valid critic")
            })
            .collect();
        gan_loss(g, &real, &fake).expect("nonempty")
    }));

    let critic = store.subset(DISC_GROUP);
    let fake = {
        let mut g = Graph::new();
        let p = probs(&mut g, &store, &utts[0]).0;
        g.value(p).clone()
    };
    let r0 = real[0].clone();
    out.push(Case::new("gp", critic, move |g, st| {
        let mut c = |g: &mut Graph, x: Var| discriminator_score(g, st, &dcfg, x);
        gradient_penalty(g, &mut c, &r0, &fake, 0.4, PenaltyMode::Exact).expect("finite")
    }));

    let u = utts.clone();
    out.push(Case::new("sp", store.subset(GEN_GROUP), move |g, st| {
        let p = probs(g, st, &u[0]).0;
        smoothness(g, p)
    }));
    let u = utts.clone();
    out.push(Case::new("pd", store.subset(GEN_GROUP), move |g, st| {
        let batch: Vec<Var> = u.iter().map(|x| probs(g, st, x).0).collect();
        diversity(g, &batch).expect("nonempty")
    }));
    let mut gen_aux = store.subset(GEN_GROUP);
    gen_aux.merge(store.subset(AUX_GROUP));
    let u = utts[1].clone();
    let targets: Vec<usize> = (0..u.rows()).map(|_| rng.random_range(0..clusters)).collect();
    out.push(Case::new("ss", gen_aux, move |g, st| {
        let h = probs(g, st, &u).1;
        let a = aux_logits(g, st, h);
        reconstruction(g, a, &targets).expect("aligned targets")
    }));
    out
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::init_linear;
    use crate::numerics::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_var(g: &mut Graph, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn gan_constant_half() {
        let mut g = Graph::new();
        let zero = scalar_var(&mut g, 0.0);
        let l = gan_loss(&mut g, &[zero, zero], &[zero]).unwrap();
        assert!((g.scalar(l) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let p = gan_loss_from_probs(&[0.5], &[0.5, 0.5]).unwrap();
        assert!((p - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gan_perfect_discriminator_limit() {
        let mut prev = f64::NEG_INFINITY;
        for e in [1e-2, 1e-4, 1e-6, 1e-9] {
            let v = gan_loss_from_probs(&[1.0 - e], &[e]).unwrap();
            assert!(v < 0.0 && v > prev);
            prev = v;
        }
        assert!(prev > -1e-8);
        assert!(gan_loss_from_probs(&[1.5], &[0.1]).is_err());
        assert!(gan_loss_from_probs(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn gan_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = (0..3).map(|i| sig(scores[i]).ln()).sum::<f64>() / 3.0
            + (3..6).map(|i| (1.0 - sig(scores[i])).ln()).sum::<f64>() / 3.0;
        let mut g = Graph::new();
        let v: Vec<Var> = scores.iter().map(|&s| scalar_var(&mut g, s)).collect();
        let l = gan_loss(&mut g, &v[..3], &v[3..]).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-12);
    }

    fn linear_critic(w: Tensor) -> impl FnMut(&mut Graph, Var) -> Result<Var, BridgeError> {
        move |g: &mut Graph, x: Var| {
            let wv = g.constant(w.clone());
            let m = g.mul(x, wv);
            Ok(g.sum(m))
        }
    }

    #[test]
    fn penalty_unit_gradient_is_zero() {
        let mut w = Tensor::zeros(3, 4);
        w.set(0, 1, 0.6);
        w.set(2, 3, 0.8);
        let real = Tensor::from_rows(3, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let fake = Tensor::full(5, 4, 0.25);
        let mut g = Graph::new();
        let p = gradient_penalty(&mut g, &mut linear_critic(w), &real, &fake, 0.3, PenaltyMode::Exact).unwrap();
        assert!(g.scalar(p).abs() < 1e-12);
    }

    #[test]
    fn penalty_zero_critic_is_one() {
        let real = Tensor::full(2, 3, 0.0);
        let fake = Tensor::full(2, 3, 1.0 / 3.0);
        let mut zero = |g: &mut Graph, _x: Var| Ok(g.constant(Tensor::scalar(0.0)));
        let mut g = Graph::new();
        let p = gradient_penalty(&mut g, &mut zero, &real, &fake, 0.5, PenaltyMode::Exact).unwrap();
        // The 1e-16 stabilizer shifts the value by about 2e-8.
        assert!((g.scalar(p) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn penalty_exact_matches_finite_difference_for_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_linear(&mut store, "l1", "d", 3, 5, &mut rng);
        init_linear(&mut store, "l2", "d", 5, 1, &mut rng);
        let mut critic = |g: &mut Graph, x: Var| {
            let h = crate::numerics::nn::linear(g, &store, "l1", x);
            let h = g.tanh(h);
            let o = crate::numerics::nn::linear(g, &store, "l2", h);
            Ok(g.mean(o))
        };
        let real = Tensor::from_rows(4, 3, (0..12).map(|_| rng.random::<f64>()).collect());
        let fake = Tensor::from_rows(3, 3, (0..9).map(|_| rng.random::<f64>()).collect());
        let mut g = Graph::new();
        let exact = gradient_penalty(&mut g, &mut critic, &real, &fake, 0.7, PenaltyMode::Exact).unwrap();
        let fd = gradient_penalty(&mut g, &mut critic, &real, &fake, 0.7, PenaltyMode::FiniteDifference(1e-4)).unwrap();
        assert!((g.scalar(exact) - g.scalar(fd)).abs() < 1e-3);
    }

    #[test]
    fn smoothness_values() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(4, 3, 1.0 / 3.0));
        let s = smoothness(&mut g, c);
        assert_eq!(g.scalar(s), 0.0);
        let one = g.constant(Tensor::full(1, 3, 1.0 / 3.0));
        let s1 = smoothness(&mut g, one);
        assert_eq!(g.scalar(s1), 0.0);
        let p = g.constant(Tensor::from_rows(3, 2, vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.8]));
        let s = smoothness(&mut g, p);
        // (0.4^2 + 0.4^2) + (0.3^2 + 0.3^2)
        assert!((g.scalar(s) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn diversity_values() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::full(5, 4, 0.25));
        let d = diversity(&mut g, &[u]).unwrap();
        assert!((g.scalar(d) + 4f64.ln()).abs() < 1e-9);
        let oh = g.constant(Tensor::from_rows(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
        let d = diversity(&mut g, &[oh]).unwrap();
        assert!(g.scalar(d).abs() < 1e-9);
        // Hand case: averages (0.5, 0.5) and (0.75, 0.25).
        let a = g.constant(Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.5, 0.5]));
        let d = diversity(&mut g, &[a, b]).unwrap();
        let h1 = 2.0 * 0.5 * 0.5f64.ln();
        let h2 = 0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln();
        assert!((g.scalar(d) - (h1 + h2) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_values() {
        let mut g = Graph::new();
        let mut sharp = Tensor::full(3, 4, -1e3);
        for (t, c) in [2, 0, 3].iter().enumerate() {
            sharp.set(t, *c, 0.0);
        }
        let s = g.constant(sharp);
        let l = reconstruction(&mut g, s, &[2, 0, 3]).unwrap();
        assert!(g.scalar(l).abs() < 1e-9);
        let u = g.constant(Tensor::zeros(10, 8));
        let l = reconstruction(&mut g, u, &[1; 10]).unwrap();
        assert!((g.scalar(l) - 10.0 * 8f64.ln()).abs() < 1e-9);
        assert!(reconstruction(&mut g, u, &[1; 9]).is_err());
    }

    #[test]
    fn reconstruction_matches_hand_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::from_rows(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
        let targets = [3, 1, 1];
        let mut want = 0.0;
        for (t, &c) in targets.iter().enumerate() {
            let z: f64 = (0..4).map(|j| logits.get(t, j).exp()).sum();
            want -= (logits.get(t, c).exp() / z).ln();
        }
        let mut g = Graph::new();
        let v = g.constant(logits);
        let l = reconstruction(&mut g, v, &targets).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn majority_vote() {
        assert_eq!(step_clusters(&[1, 1, 2, 0, 0, 3], &[(0, 3), (3, 6)], 4), vec![1, 0]);
        assert_eq!(step_clusters(&[2, 1], &[(0, 2)], 3), vec![1]);
    }

    #[test]
    fn loss_terms_match_central_differences() {
        for seed in [1, 2, 3] {
            for case in loss_cases(seed) {
                let r = case.run(1e-6, 1e-6).unwrap();
                assert!(r.checked > 0, "{}", case.name);
                assert!(r.max_rel_error <= 1e-4, "{} seed {seed}: {} ({})", case.name, r.max_rel_error, r.worst_param);
            }
        }
    }
}
