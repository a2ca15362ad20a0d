//! The primal-dual episode loop.
//!
//! Each episode plays `π^{q̂_t}`, samples a trajectory from the true kernel,
//! reveals `(r_t, G_t)`, forms `ℓ_t = G_t λ_t − r_t`, then updates the primal
//! player (counters, step size, projected step) and the dual player (with
//! `G_tᵀ q̂_t`), in that order.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    dot, induce_occupancy, induce_policy_with_tol, sample_trajectory_with, ConstraintSample, Layout, LoopFreeCmdp,
    OccupancyMeasure, RewardSample, Trajectory,
};
use crate::dual::{DualOptions, DualState};
use crate::error::{Error, Result};
use crate::polytope::ProjectionSettings;
use crate::primal::{PrimalOptions, PrimalState};
use crate::scenario::{solve_offline, Environment, OracleReport};

const ENV_STREAM: u64 = 1;
const TRAJECTORY_STREAM: u64 = 2;

fn default_delta() -> f64 {
    0.1
}

fn default_tol() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Episode budget `T`.
    pub episodes: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub projection_tol: f64,
    #[serde(default)]
    pub projection_max_iter: Option<usize>,
    /// Overrides the primal step constant `C`.
    #[serde(default)]
    pub step_constant: Option<f64>,
    /// Overrides the dual learning rate outright.
    #[serde(default)]
    pub dual_rate: Option<f64>,
    /// Overrides `K` in the default dual learning rate.
    #[serde(default)]
    pub dual_k: Option<f64>,
    #[serde(default)]
    pub trace_csv: Option<PathBuf>,
    #[serde(default)]
    pub summary_json: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            delta: default_delta(),
            seed,
            projection_tol: default_tol(),
            projection_max_iter: None,
            step_constant: None,
            dual_rate: None,
            dual_k: None,
            trace_csv: None,
            summary_json: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 2 {
            return Err(Error::Config(format!("episodes must be at least 2, got {}", self.episodes)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.projection_tol > 0.0) {
            return Err(Error::Config(format!("projection tolerance must be positive, got {}", self.projection_tol)));
        }
        Ok(())
    }

    fn projection_settings(&self) -> ProjectionSettings {
        let mut s = ProjectionSettings::with_tol(self.projection_tol);
        if let Some(it) = self.projection_max_iter {
            s.max_iter = it;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub t: usize,
    pub trajectory: Trajectory,
    pub reward: Vec<f64>,
    /// `G_t` flattened row-major.
    pub constraint: Vec<f64>,
    /// Learner's occupancy `q̂_t` (triples).
    pub q_hat: Vec<f64>,
    /// True-kernel occupancy of the played policy (triples).
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
    pub loss: Vec<f64>,
    /// Epoch whose confidence set `q̂_t` was projected onto.
    pub epoch: usize,
    /// KKT residual of the projection that produced `q̂_{t+1}`.
    pub proj_residual: f64,
    /// Primal step size `η_t`.
    pub step: f64,
    /// Reward collected along the sampled trajectory.
    pub reward_realized: f64,
    /// `r_tᵀ q_t`.
    pub expected_reward: f64,
    /// `[G_tᵀ q_t]_i`.
    pub violations: Vec<f64>,
    /// `[G_tᵀ q̂_t]_i`, the dual player's utility.
    pub intended_violations: Vec<f64>,
}

impl EpisodeRecord {
    pub fn lambda_l1(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

/// Deterministic run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub seed: u64,
    /// `T · OPT − Σ_t r_tᵀ q_t`.
    pub regret: Option<f64>,
    /// `Σ_t r̄ᵀ(q* − q_t)`.
    pub pseudo_regret: Option<f64>,
    /// `max_i Σ_t [G_tᵀ q_t]_i`.
    pub violation: f64,
    /// `max_i Σ_t max(0, [G_tᵀ q_t]_i)`.
    pub violation_pos: f64,
    pub cumulative_reward: f64,
    /// `Σ_t r_tᵀ q_t / (T · OPT)`.
    pub reward_fraction: Option<f64>,
    pub max_lambda_l1: f64,
    pub final_epoch: usize,
    /// Epochs whose confidence set excluded the true kernel.
    pub coverage_failures: usize,
    pub max_proj_residual: f64,
    pub dual_rate: f64,
    pub lambda_cap: f64,
    pub step_constant: f64,
    pub opt: Option<f64>,
    pub rho: f64,
    pub zeta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    layout: Arc<Layout>,
    pub config: RunConfig,
    pub oracle: OracleReport,
    pub records: Vec<EpisodeRecord>,
    pub summary: RunSummary,
    pub wall_time_s: f64,
}

/// `ℓ(x,a) = Σ_i g_i(x,a) λ_i − r(x,a)`.
pub fn build_loss(r: &RewardSample, g: &ConstraintSample, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != g.m {
        return Err(Error::DimensionMismatch {
            what: "multipliers",
            expected: g.m,
            got: lambda.len(),
        });
    }
    if g.num_pairs() != r.values.len() {
        return Err(Error::DimensionMismatch {
            what: "constraint pairs",
            expected: r.values.len(),
            got: g.num_pairs(),
        });
    }
    let mut loss: Vec<f64> = r.values.iter().map(|v| -v).collect();
    for (i, &l) in lambda.iter().enumerate() {
        if l != 0.0 {
            for (out, gv) in loss.iter_mut().zip(g.row(i)) {
                *out += gv * l;
            }
        }
    }
    Ok(loss)
}

/// Runs the loop, computing the offline oracle first.
pub fn run(cfg: &RunConfig, p: &LoopFreeCmdp, env: &Environment) -> Result<RunTrace> {
    let oracle = solve_offline(env, p)?;
    run_with_oracle(cfg, p, env, &oracle)
}

/// Runs the loop with a precomputed oracle (used for the summary only).
pub fn run_with_oracle(cfg: &RunConfig, p: &LoopFreeCmdp, env: &Environment, oracle: &OracleReport) -> Result<RunTrace> {
    cfg.validate()?;
    if env.horizon_t() != cfg.episodes {
        return Err(Error::Config(format!(
            "environment built for {} episodes, run asks for {}",
            env.horizon_t(),
            cfg.episodes
        )));
    }
    let start = Instant::now();
    let layout = p.layout().clone();
    let m = env.m();
    let big_t = cfg.episodes;
    let mut primal = PrimalState::init(
        layout.clone(),
        cfg.delta,
        big_t,
        PrimalOptions {
            step_constant: cfg.step_constant,
            projection: cfg.projection_settings(),
        },
    )?;
    let mut dual = DualState::init(
        m,
        big_t,
        cfg.delta,
        layout.num_states(),
        layout.num_actions(),
        &DualOptions {
            learning_rate: cfg.dual_rate,
            k: cfg.dual_k,
        },
    )?;
    let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    env_rng.set_stream(ENV_STREAM);
    let mut traj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    traj_rng.set_stream(TRAJECTORY_STREAM);
    let policy_tol = (10.0 * cfg.projection_tol).max(1e-6);

    let mut records = Vec::with_capacity(big_t);
    let mut coverage_failures = usize::from(!primal.confidence().covers(p.kernel()));
    for t in 1..=big_t {
        let wrap = |e: Error| Error::Episode {
            episode: t,
            source: Box::new(e),
        };
        let q_hat = primal.q_hat();
        let lambda = dual.lambda().to_vec();
        let epoch = primal.epoch();
        let pi = induce_policy_with_tol(&q_hat, policy_tol).map_err(wrap)?;
        let q = induce_occupancy(p, &pi);
        let traj = sample_trajectory_with(p, &pi, &mut traj_rng);
        let (r, g) = env.draw_episode(t, &mut env_rng).map_err(wrap)?;
        let loss = build_loss(&r, &g, &lambda).map_err(wrap)?;

        let q_hat_pairs = q_hat.pair_marginal();
        let intended = g.violations(&q_hat_pairs);
        primal.update(&loss, &traj).map_err(wrap)?;
        dual.update(&intended).map_err(wrap)?;
        if primal.epoch() != epoch && !primal.confidence().covers(p.kernel()) {
            coverage_failures += 1;
        }

        let q_pairs = q.pair_marginal();
        let reward_realized = traj.steps().map(|(x, a, _)| r.values[layout.pair(x, a)]).sum();
        records.push(EpisodeRecord {
            t,
            expected_reward: dot(&r.values, &q_pairs),
            violations: g.violations(&q_pairs),
            intended_violations: intended,
            reward_realized,
            trajectory: traj,
            reward: r.values,
            constraint: g.values,
            q_hat: q_hat.into_values(),
            q: q.into_values(),
            lambda,
            loss,
            epoch,
            proj_residual: primal.last_residual(),
            step: primal.last_step(),
        });
    }

    let summary = summarize(cfg, &layout, oracle, &records, &dual, &primal, coverage_failures);
    let trace = RunTrace {
        layout,
        config: cfg.clone(),
        oracle: oracle.clone(),
        records,
        summary,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(path) = &cfg.trace_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        trace.write_csv(&mut f)?;
        f.flush()?;
    }
    if let Some(path) = &cfg.summary_json {
        std::fs::write(path, trace.summary_json()?)?;
    }
    Ok(trace)
}

/// Running totals shared by the loop summary and the metrics module.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Totals {
    pub cumulative_reward: f64,
    pub pseudo_regret: Option<f64>,
    pub violation_sums: Vec<f64>,
    pub violation_pos_sums: Vec<f64>,
    pub max_lambda_l1: f64,
}

pub(crate) fn totals(layout: &Layout, oracle: &OracleReport, records: &[EpisodeRecord]) -> Totals {
    let m = oracle.m;
    let mut cumulative_reward = 0.0;
    let mut pseudo = 0.0;
    let mut violation_sums = vec![0.0; m];
    let mut violation_pos_sums = vec![0.0; m];
    let mut max_lambda_l1 = 0.0f64;
    let opt_mean = oracle
        .q_star
        .as_ref()
        .map(|q| dot(&oracle.reward_mean, &layout.pair_marginal(q)));
    for rec in records {
        cumulative_reward += rec.expected_reward;
        if let Some(opt_mean) = opt_mean {
            pseudo += opt_mean - dot(&oracle.reward_mean, &layout.pair_marginal(&rec.q));
        }
        for i in 0..m {
            violation_sums[i] += rec.violations[i];
            violation_pos_sums[i] += rec.violations[i].max(0.0);
        }
        max_lambda_l1 = max_lambda_l1.max(rec.lambda_l1());
    }
    Totals {
        cumulative_reward,
        pseudo_regret: opt_mean.map(|_| pseudo),
        violation_sums,
        violation_pos_sums,
        max_lambda_l1,
    }
}

pub(crate) fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn summarize(
    cfg: &RunConfig,
    layout: &Layout,
    oracle: &OracleReport,
    records: &[EpisodeRecord],
    dual: &DualState,
    primal: &PrimalState,
    coverage_failures: usize,
) -> RunSummary {
    let tot = totals(layout, oracle, records);
    let big_t = records.len() as f64;
    RunSummary {
        episodes: records.len(),
        seed: cfg.seed,
        regret: oracle.opt.map(|opt| big_t * opt - tot.cumulative_reward),
        pseudo_regret: tot.pseudo_regret,
        violation: max_of(&tot.violation_sums),
        violation_pos: max_of(&tot.violation_pos_sums),
        cumulative_reward: tot.cumulative_reward,
        reward_fraction: oracle
            .opt
            .filter(|o| *o > 0.0)
            .map(|opt| tot.cumulative_reward / (big_t * opt)),
        max_lambda_l1: tot.max_lambda_l1,
        final_epoch: primal.epoch(),
        coverage_failures,
        max_proj_residual: records.iter().map(|r| r.proj_residual).fold(0.0, f64::max),
        dual_rate: dual.eta(),
        lambda_cap: dual.cap(),
        step_constant: primal.step_constant(),
        opt: oracle.opt,
        rho: oracle.rho,
        zeta: oracle.zeta,
    }
}

#[derive(Serialize)]
struct SummaryDocument<'a> {
    summary: &'a RunSummary,
    condition2_holds: bool,
    slater_holds: bool,
    config: &'a RunConfig,
    wall_time_s: f64,
}

impl RunTrace {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn m(&self) -> usize {
        self.oracle.m
    }

    /// One row per episode: `t, reward_realized, expected_reward,
    /// violation_0.., lambda_l1, epoch, proj_residual`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "reward_realized".into(), "expected_reward".into()];
        header.extend((0..self.m()).map(|i| format!("violation_{i}")));
        header.extend(["lambda_l1".into(), "epoch".into(), "proj_residual".into()]);
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![
                rec.t.to_string(),
                rec.reward_realized.to_string(),
                rec.expected_reward.to_string(),
            ];
            row.extend(rec.violations.iter().map(|v| v.to_string()));
            row.push(rec.lambda_l1().to_string());
            row.push(rec.epoch.to_string());
            row.push(rec.proj_residual.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Summary, feasibility flags, config echo and wall time as pretty JSON.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SummaryDocument {
            summary: &self.summary,
            condition2_holds: self.oracle.condition2_holds,
            slater_holds: self.oracle.slater_holds,
            config: &self.config,
            wall_time_s: self.wall_time_s,
        })?)
    }

    /// True-kernel occupancy of episode `t` (1-based) as a measure.
    pub fn occupancy(&self, t: usize) -> OccupancyMeasure {
        OccupancyMeasure::new(self.layout.clone(), self.records[t - 1].q.clone()).expect("record lengths match")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::scenario::{ConstraintModel, ConstraintSpec, EnvironmentSpec, RewardModel, RewardSpec};

    fn spec(r: Vec<f64>, g: Vec<f64>) -> EnvironmentSpec {
        EnvironmentSpec {
            m: 1,
            rewards: RewardSpec::Stochastic {
                model: RewardModel::PointMass { mean: r },
            },
            constraints: ConstraintSpec::Stochastic {
                model: ConstraintModel::PointMass { mean: vec![g] },
            },
        }
    }

    #[test]
    fn build_loss_examples() {
        let r = RewardSample::new(vec![0.5]).unwrap();
        let g = ConstraintSample::new(1, vec![-0.25]).unwrap();
        assert_eq!(build_loss(&r, &g, &[2.0]).unwrap(), vec![-1.0]);
        assert_eq!(build_loss(&r, &g, &[0.0]).unwrap(), vec![-0.5]);
        let r0 = RewardSample::new(vec![0.0]).unwrap();
        let g2 = ConstraintSample::new(2, vec![1.0, -1.0]).unwrap();
        assert_eq!(build_loss(&r0, &g2, &[3.0, 3.0]).unwrap(), vec![0.0]);
        assert!(build_loss(&r0, &g2, &[3.0]).is_err());
    }

    #[test]
    fn null_environment() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(&spec(vec![0.0; 8], vec![0.0; 8]), p.layout(), 10, None).unwrap();
        let trace = run(&RunConfig::new(10, 7), &p, &env).unwrap();
        assert_eq!(trace.records.len(), 10);
        assert!(trace.records.iter().all(|r| r.lambda == vec![0.0]));
        assert_eq!(trace.summary.regret, Some(0.0));
        assert_eq!(trace.summary.violation, 0.0);
        assert_eq!(trace.summary.violation_pos, 0.0);
        for w in trace.records.windows(2) {
            for (a, b) in w[0].q_hat.iter().zip(&w[1].q_hat) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(
            &spec(fixtures::t1_reward_mean(), fixtures::t1_constraint_mean()),
            p.layout(),
            50,
            None,
        )
        .unwrap();
        let a = run(&RunConfig::new(50, 3), &p, &env).unwrap();
        let b = run(&RunConfig::new(50, 3), &p, &env).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.csv_bytes().unwrap(), b.csv_bytes().unwrap());
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn record_invariants_and_csv_shape() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(
            &spec(fixtures::t1_reward_mean(), fixtures::t1_constraint_mean()),
            p.layout(),
            40,
            None,
        )
        .unwrap();
        let mut cfg = RunConfig::new(40, 11);
        cfg.dual_rate = Some(0.05);
        let trace = run(&cfg, &p, &env).unwrap();
        for rec in &trace.records {
            let sup = rec.loss.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(sup <= 1.0 + rec.lambda_l1() + 1e-12);
            let pi = induce_policy_with_tol(
                &OccupancyMeasure::new(p.layout().clone(), rec.q_hat.clone()).unwrap(),
                1e-6,
            )
            .unwrap();
            let q = induce_occupancy(&p, &pi);
            assert_eq!(q.values(), &rec.q[..]);
        }
        assert!(trace.records.iter().any(|r| r.lambda[0] > 0.0));
        let text = String::from_utf8(trace.csv_bytes().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,reward_realized,expected_reward,violation_0,lambda_l1,epoch,proj_residual"
        );
        assert_eq!(lines.count(), 40);
        let doc: serde_json::Value = serde_json::from_str(&trace.summary_json().unwrap()).unwrap();
        assert!(doc["summary"]["regret"].is_number());
        assert!(doc["config"]["episodes"] == 40);
    }

    #[test]
    fn mismatched_budget_rejected() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(&spec(vec![0.0; 8], vec![0.0; 8]), p.layout(), 10, None).unwrap();
        assert!(run(&RunConfig::new(12, 0), &p, &env).is_err());
        assert!(run(&RunConfig::new(1, 0), &p, &env).is_err());
    }
}
