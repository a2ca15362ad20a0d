//! Canonical small instances shared by tests, benches and the `validate` verb.
//!
//! T1 is the two-step instance: `x0 -a-> u`, `x0 -b-> v`, both `u` and `v`
//! lead to the sink `xL`. Reward 1 on `(x0,a)`, constraint `+1` on `(x0,a)`
//! and `-1` on `(x0,b)`.

use rand::Rng;

use crate::cmdp::{Layout, LoopFreeCmdp};
use crate::scenario::{
    ConstraintModel, ConstraintScript, ConstraintSpec, EnvironmentSpec, RewardModel, RewardSpec,
};

pub fn t1_layout() -> Layout {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Layout::new(
        vec![names(&["x0"]), names(&["u", "v"]), names(&["xL"])],
        names(&["a", "b"]),
    )
    .expect("T1 layout is well formed")
}

pub fn t1_cmdp() -> LoopFreeCmdp {
    let probs = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    LoopFreeCmdp::new(t1_layout(), probs).expect("T1 kernel is well formed")
}

/// Mean rewards over pairs: 1 on `(x0,a)`.
pub fn t1_reward_mean() -> Vec<f64> {
    let mut r = vec![0.0; 8];
    r[0] = 1.0;
    r
}

/// Mean constraint over pairs (m = 1): `+1` on `(x0,a)`, `-1` on `(x0,b)`.
pub fn t1_constraint_mean() -> Vec<f64> {
    let mut g = vec![0.0; 8];
    g[0] = 1.0;
    g[1] = -1.0;
    g
}

/// A layered CMDP with the given layer sizes (first and last must be 1) and
/// kernel rows drawn from a Dirichlet-like normalization of uniforms.
/// A fraction of entries is zeroed to exercise sparse supports.
pub fn random_cmdp<R: Rng + ?Sized>(sizes: &[usize], n_actions: usize, rng: &mut R) -> LoopFreeCmdp {
    let layout = Layout::from_sizes(sizes, n_actions).expect("valid sizes");
    let mut probs = vec![0.0; layout.num_triples()];
    for (x, a) in layout.decision_pairs().collect::<Vec<_>>() {
        let range = layout.triples_of_pair(x, a);
        let mut w: Vec<f64> = range
            .clone()
            .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen::<f64>() + 1e-3 })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            let k = rng.gen_range(0..w.len());
            w[k] = 1.0;
        }
        let s: f64 = w.iter().sum();
        for (t, v) in range.zip(w) {
            probs[t] = v / s;
        }
    }
    LoopFreeCmdp::new(layout, probs).expect("rows normalized")
}

/// T1 with point-mass rewards and constraints at their means.
pub fn t1_environment() -> EnvironmentSpec {
    EnvironmentSpec {
        m: 1,
        rewards: RewardSpec::Stochastic {
            model: RewardModel::PointMass { mean: t1_reward_mean() },
        },
        constraints: ConstraintSpec::Stochastic {
            model: ConstraintModel::PointMass {
                mean: vec![t1_constraint_mean()],
            },
        },
    }
}

/// T1 with Bernoulli rewards and two-point constraints around the T1 means:
/// `g(x0,a) ∈ {0.5, 1}`, `g(x0,b) ∈ {-1, -0.5}`, zero elsewhere.
pub fn t1_noisy_environment() -> EnvironmentSpec {
    let mut reward = vec![0.1; 8];
    reward[0] = 0.9;
    let mut shift = vec![0.0; 8];
    let mut scale = vec![0.0; 8];
    let mut p = vec![0.0; 8];
    shift[0] = 0.5;
    scale[0] = 0.5;
    p[0] = 0.5;
    shift[1] = -1.0;
    scale[1] = 0.5;
    p[1] = 0.5;
    EnvironmentSpec {
        m: 1,
        rewards: RewardSpec::Stochastic {
            model: RewardModel::Bernoulli { mean: reward },
        },
        constraints: ConstraintSpec::Stochastic {
            model: ConstraintModel::ShiftedBernoulli {
                shift: vec![shift],
                scale: vec![scale],
                p: vec![p],
            },
        },
    }
}

/// Three-step instance with layers `1, 2, 2, 1`, two actions and a
/// stochastic kernel. In every state one action is both more rewarding and
/// safe; the other is less rewarding and violates the single constraint.
pub fn three_step_cmdp() -> LoopFreeCmdp {
    let layout = Layout::from_sizes(&[1, 2, 2, 1], 2).expect("valid sizes");
    let probs = vec![
        // s0: a0, a1 over layer 1
        0.8, 0.2, 0.3, 0.7, //
        // s1_0, s1_1 over layer 2
        0.6, 0.4, 0.1, 0.9, 0.5, 0.5, 0.25, 0.75, //
        // layer 2 to the sink
        1.0, 1.0, 1.0, 1.0,
    ];
    LoopFreeCmdp::new(layout, probs).expect("rows normalized")
}

/// The action of each non-terminal state of [`three_step_cmdp`] that is
/// rewarding and safe, indexed by state id.
pub const THREE_STEP_GOOD_ACTION: [usize; 5] = [0, 0, 1, 0, 1];

fn three_step_rewards() -> Vec<f64> {
    let good = [0.7, 0.6, 0.6, 0.8, 0.7];
    let bad = [0.3, 0.2, 0.3, 0.1, 0.2];
    let mut r = vec![0.0; 12];
    for x in 0..5 {
        let g = THREE_STEP_GOOD_ACTION[x];
        r[2 * x + g] = good[x];
        r[2 * x + 1 - g] = bad[x];
    }
    r
}

/// Stochastic rewards and constraints on [`three_step_cmdp`] with a wide
/// safety margin. Safe actions draw `g ∈ {-0.9, -0.5}`, unsafe ones
/// `g ∈ {0.6, 1.0}`, so `ρ = 3 · 0.7 = 2.1`.
pub fn wide_margin_environment() -> EnvironmentSpec {
    let mut shift = vec![0.0; 12];
    let mut scale = vec![0.0; 12];
    let mut p = vec![0.0; 12];
    for x in 0..5 {
        let g = THREE_STEP_GOOD_ACTION[x];
        shift[2 * x + g] = -0.9;
        scale[2 * x + g] = 0.4;
        p[2 * x + g] = 0.5;
        shift[2 * x + 1 - g] = 0.6;
        scale[2 * x + 1 - g] = 0.4;
        p[2 * x + 1 - g] = 0.5;
    }
    EnvironmentSpec {
        m: 1,
        rewards: RewardSpec::Stochastic {
            model: RewardModel::Bernoulli {
                mean: three_step_rewards(),
            },
        },
        constraints: ConstraintSpec::Stochastic {
            model: ConstraintModel::ShiftedBernoulli {
                shift: vec![shift],
                scale: vec![scale],
                p: vec![p],
            },
        },
    }
}

/// Same rewards as [`wide_margin_environment`] but deterministic constraints
/// `-0.005` on safe actions and `0.5` on unsafe ones, so `ρ = 0.015`.
pub fn thin_margin_environment() -> EnvironmentSpec {
    let mut g = vec![0.0; 12];
    for x in 0..5 {
        let good = THREE_STEP_GOOD_ACTION[x];
        g[2 * x + good] = -0.005;
        g[2 * x + 1 - good] = 0.5;
    }
    EnvironmentSpec {
        m: 1,
        rewards: RewardSpec::Stochastic {
            model: RewardModel::Bernoulli {
                mean: three_step_rewards(),
            },
        },
        constraints: ConstraintSpec::Stochastic {
            model: ConstraintModel::PointMass { mean: vec![g] },
        },
    }
}

/// Sign-alternating constraints on T1. The `a`-branch always costs
/// `-0.5` per step; the `b`-branch costs `±1` per step with the sign of
/// `(-1)^t`. The adversarial margin is `ρ = 1`, attained on the `a`-branch,
/// which also carries the larger Bernoulli rewards.
pub fn alternating_environment() -> EnvironmentSpec {
    // pairs: (x0,a) (x0,b) (u,a) (u,b) (v,a) (v,b) (xL,a) (xL,b)
    let offset = vec![-0.5, 0.0, -0.5, -0.5, 0.0, 0.0, 0.0, 0.0];
    let amplitude = vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let reward = vec![0.9, 0.3, 0.5, 0.5, 0.2, 0.2, 0.0, 0.0];
    EnvironmentSpec {
        m: 1,
        rewards: RewardSpec::Stochastic {
            model: RewardModel::Bernoulli { mean: reward },
        },
        constraints: ConstraintSpec::Adversarial {
            script: ConstraintScript::Alternating {
                offset: vec![offset],
                amplitude: vec![amplitude],
            },
        },
    }
}

pub const CMDP_FIXTURES: [&str; 2] = ["t1", "three_step"];

pub const ENVIRONMENT_FIXTURES: [&str; 5] = ["t1", "t1_noisy", "wide_margin", "thin_margin", "alternating"];

pub fn cmdp_by_name(name: &str) -> Option<LoopFreeCmdp> {
    match name {
        "t1" => Some(t1_cmdp()),
        "three_step" => Some(three_step_cmdp()),
        _ => None,
    }
}

pub fn environment_by_name(name: &str) -> Option<EnvironmentSpec> {
    match name {
        "t1" => Some(t1_environment()),
        "t1_noisy" => Some(t1_noisy_environment()),
        "wide_margin" => Some(wide_margin_environment()),
        "thin_margin" => Some(thin_margin_environment()),
        "alternating" => Some(alternating_environment()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_named_fixture_resolves() {
        for name in CMDP_FIXTURES {
            assert!(cmdp_by_name(name).is_some(), "{name}");
        }
        for name in ENVIRONMENT_FIXTURES {
            assert!(environment_by_name(name).is_some(), "{name}");
        }
        assert!(cmdp_by_name("nope").is_none());
    }

    #[test]
    fn t1_shapes() {
        let p = t1_cmdp();
        let l = p.layout();
        assert_eq!(l.horizon(), 2);
        assert_eq!(l.num_states(), 4);
        assert_eq!(l.num_pairs(), 8);
        assert_eq!(l.num_triples(), 8);
        assert_eq!(l.triple(0, 0, 1), 0);
        assert_eq!(l.triple(0, 1, 2), 3);
        assert_eq!(l.pair(0, 1), 1);
        assert_eq!(l.state_id("u"), Some(1));
    }

    #[test]
    fn designed_instances_have_stated_margins() {
        use crate::scenario::{solve_offline, Environment};
        let p = three_step_cmdp();
        let env = Environment::new(&wide_margin_environment(), p.layout(), 32_000, None).unwrap();
        let rep = solve_offline(&env, &p).unwrap();
        assert!((rep.rho - 2.1).abs() < 1e-7, "{}", rep.rho);
        assert!(!rep.condition2_holds);
        let env = Environment::new(&thin_margin_environment(), p.layout(), 32_000, None).unwrap();
        let rep = solve_offline(&env, &p).unwrap();
        assert!((rep.rho - 0.015).abs() < 1e-9, "{}", rep.rho);

        let t1 = t1_cmdp();
        let env = Environment::new(&alternating_environment(), t1.layout(), 32_000, None).unwrap();
        let rep = solve_offline(&env, &t1).unwrap();
        assert!((rep.rho - 1.0).abs() < 1e-7, "{}", rep.rho);
        assert!((rep.opt.unwrap() - 1.4).abs() < 1e-7);
        assert_eq!(rep.q_tilde_safe, Some(true));
    }

    #[test]
    fn random_instances_are_valid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_cmdp(&[1, 3, 2, 1], 2, &mut rng);
            assert_eq!(p.horizon(), 3);
        }
    }
}
