//! Closed-form checks of the policy-gradient losses, GAE and Adam.

use cogrnn::laplace::MemoryConfig;
use cogrnn::nets::{log_softmax, Agent, AgentSpec, CoreKind, CoreSpec, Gradients};
use cogrnn::trainer::{a2c_gradients, adam_step, compute_gae, discounted_returns, reinforce_gradients, AdamState, TrainConfig, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_agent(kind: CoreKind) -> Agent {
    let mut core = CoreSpec::new(kind);
    core.hidden = 6;
    let mem = MemoryConfig {
        taustar_min: 1.0,
        taustar_max: 20.0,
        n_taus: 4,
        k: 4,
        ..MemoryConfig::default()
    };
    let mut spec = AgentSpec::new(core, mem);
    spec.dense = 5;
    Agent::new(spec, 1, 3, 11).unwrap()
}

fn zero_value_head(a: &mut Agent) {
    for p in a.params.params.iter_mut().filter(|p| p.name.starts_with("value.")) {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn trajectory(a: &Agent, obs: &[f64], actions: &[usize], rewards: &[f64]) -> Trajectory {
    let obs: Vec<Vec<f64>> = obs.iter().map(|&o| vec![o]).collect();
    let caches = a.core_forward(&obs).unwrap();
    let mut tr = Trajectory::default();
    for ((c, &act), &r) in caches.into_iter().zip(actions).zip(rewards) {
        let lp = log_softmax(&c.logits);
        let h = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        tr.push(c, act, lp[act], h, r);
    }
    tr
}

fn grad_of<'a>(a: &Agent, g: &'a Gradients, name: &str) -> &'a [f64] {
    &g.grads[a.params.index_of(name).unwrap()]
}

fn max_abs_diff(a: &Gradients, b: &Gradients) -> f64 {
    a.grads
        .iter()
        .flatten()
        .zip(b.grads.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn a2c_single_step_matches_hand_derivation() {
    let a = small_agent(CoreKind::CogrnnTilde);
    let tr = trajectory(&a, &[1.0], &[2], &[1.0]);
    let cfg = TrainConfig {
        entropy_coef: 0.03,
        value_coef: 0.5,
        ..TrainConfig::default()
    };
    let (g, m) = a2c_gradients(&a, &tr, &cfg).unwrap();
    let c = &tr.caches[0];
    let v = c.value;
    let adv = 1.0 - v;
    let lp = log_softmax(&c.logits);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let h = -p.iter().zip(&lp).map(|(x, y)| x * y).sum::<f64>();
    let gb = grad_of(&a, &g, "policy.b");
    for j in 0..3 {
        let onehot = if j == 2 { 1.0 } else { 0.0 };
        let want = -adv * (onehot - p[j]) + 0.03 * p[j] * (lp[j] + h);
        assert!((gb[j] - want).abs() < 1e-12, "policy.b[{j}] {} vs {want}", gb[j]);
    }
    let gv = grad_of(&a, &g, "value.b");
    assert!((gv[0] - 2.0 * 0.5 * (v - 1.0)).abs() < 1e-12);
    assert!((m.policy_loss + adv * lp[2]).abs() < 1e-12);
    assert!((m.value_loss - (v - 1.0) * (v - 1.0)).abs() < 1e-12);
}

#[test]
fn reinforce_is_a2c_with_full_lambda_and_no_critic() {
    let mut a = small_agent(CoreKind::Rnn);
    zero_value_head(&mut a);
    let tr = trajectory(&a, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0], &[0, 0, 1, 0, 2, 1], &[0.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
    let base = TrainConfig {
        lambda: 1.0,
        value_coef: 0.0,
        ..TrainConfig::default()
    };
    let (ga, _) = a2c_gradients(&a, &tr, &base).unwrap();
    let (gr, _) = reinforce_gradients(&a, &tr, &base).unwrap();
    assert!(max_abs_diff(&ga, &gr) < 1e-12);
}

#[test]
fn entropy_term_is_linear_in_its_coefficient() {
    let a = small_agent(CoreKind::Lstm);
    let tr = trajectory(&a, &[1.0, 0.0, 0.0, 1.0], &[0, 0, 0, 2], &[0.0, 0.0, 0.0, 1.0]);
    let g = |ce: f64| {
        let cfg = TrainConfig {
            entropy_coef: ce,
            ..TrainConfig::default()
        };
        reinforce_gradients(&a, &tr, &cfg).unwrap().0
    };
    let (g0, g1, g2) = (g(0.0), g(0.05), g(0.1));
    for ((x0, x1), x2) in g0.grads.iter().flatten().zip(g1.grads.iter().flatten()).zip(g2.grads.iter().flatten()) {
        assert!((x2 - x1 - (x1 - x0)).abs() < 1e-12);
    }
}

#[test]
fn doubling_the_advantage_doubles_the_policy_gradient() {
    let mut a = small_agent(CoreKind::CogrnnTilde);
    zero_value_head(&mut a);
    let obs = [0.0, 1.0, 0.0, 1.0, 0.0];
    let acts = [0, 0, 0, 1, 2];
    let cfg = TrainConfig {
        entropy_coef: 0.0,
        value_coef: 0.0,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let (g1, _) = a2c_gradients(&a, &trajectory(&a, &obs, &acts, &[0.0, 0.0, 0.0, 0.0, 1.0]), &cfg).unwrap();
    let (g2, _) = a2c_gradients(&a, &trajectory(&a, &obs, &acts, &[0.0, 0.0, 0.0, 0.0, 2.0]), &cfg).unwrap();
    let mut doubled = g1.clone();
    doubled.scale(2.0);
    assert!(max_abs_diff(&doubled, &g2) < 1e-12);
}

#[test]
fn gae_lambda_one_telescopes_to_discounted_return_minus_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma = rng.gen_range(0.5..1.0);
        let adv = compute_gae(&r, &v, gamma, 1.0).unwrap();
        let ret = discounted_returns(&r, gamma, v[n]);
        for t in 0..n {
            assert!((adv[t] - (ret[t] - v[t])).abs() < 1e-12);
        }
        let td = compute_gae(&r, &v, gamma, 0.0).unwrap();
        for t in 0..n {
            assert_eq!(td[t], r[t] + gamma * v[t + 1] - v[t]);
        }
    }
}

/// Textbook Adam written independently over flat vectors.
fn reference_adam(theta: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as f64;
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i].powi(2);
            let mh = m[i] / (1.0 - b1.powf(t));
            let vh = v[i] / (1.0 - b2.powf(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_reference_over_100_steps() {
    let mut agent = small_agent(CoreKind::Rnn);
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shapes: Vec<usize> = agent.params.params.iter().map(|p| p.len()).collect();
    let total: usize = shapes.iter().sum();
    let steps: Vec<Vec<f64>> = (0..100).map(|_| (0..total).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let mut flat: Vec<f64> = agent.params.params.iter().flat_map(|p| p.data.clone()).collect();
    reference_adam(&mut flat, &steps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut st = AdamState::new(&agent.params);
    for g in &steps {
        let mut off = 0;
        let grads = Gradients {
            grads: shapes
                .iter()
                .map(|&n| {
                    off += n;
                    g[off - n..off].to_vec()
                })
                .collect(),
        };
        adam_step(&mut st, &mut agent.params, &grads, &cfg).unwrap();
    }
    let ours: Vec<f64> = agent.params.params.iter().flat_map(|p| p.data.clone()).collect();
    let err = ours.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12, "max deviation {err}");
}

#[test]
fn adam_leaves_frozen_parameters_alone() {
    let mut core = CoreSpec::new(CoreKind::Lstm);
    core.hidden = 4;
    core.frozen = true;
    let mut a = Agent::new(AgentSpec::new(core, MemoryConfig::default()), 1, 3, 2).unwrap();
    let before = a.params.clone();
    let mut st = AdamState::new(&a.params);
    let ones = Gradients {
        grads: a.params.params.iter().map(|p| vec![1.0; p.len()]).collect(),
    };
    adam_step(&mut st, &mut a.params, &ones, &TrainConfig::default()).unwrap();
    for (p, q) in a.params.params.iter().zip(&before.params) {
        assert_eq!(p.data == q.data, !p.trainable, "{}", p.name);
    }
}
