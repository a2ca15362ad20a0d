//! Environments for the four regimes (stochastic or adversarial rewards,
//! stochastic or adversarial constraints) and the offline oracles computed
//! from the true kernel: `OPT`, `q*`, the feasibility margin `ρ` with its
//! witness `q°`, Slater and margin-condition flags, `ζ` and the mixture `q̃`.
//!
//! Reward vectors are pair-indexed (`|X||A|` entries, terminal pairs
//! included and ignored). Constraint matrices are written as `m` pair-indexed
//! rows.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::cmdp::{ConstraintSample, Layout, LoopFreeCmdp, OccupancyMeasure, RewardSample};
use crate::error::{Error, Result};
use crate::polytope::{LinearInequality, LpStatus, OccupancyPolytope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RewardModel {
    PointMass { mean: Vec<f64> },
    Bernoulli { mean: Vec<f64> },
    Beta { alpha: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConstraintModel {
    PointMass {
        mean: Vec<Vec<f64>>,
    },
    /// `g = shift + scale · B` with `B ~ Bernoulli(p)`.
    ShiftedBernoulli {
        shift: Vec<Vec<f64>>,
        scale: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
    },
    Uniform {
        low: Vec<Vec<f64>>,
        high: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardScript {
    /// `values[t-1]` is `r_t`.
    Schedule { values: Vec<Vec<f64>> },
    /// Reward columns of a schedule CSV.
    ScheduleFile { path: PathBuf },
    /// `before` for `t ≤ switch_at` (default `T/2`), `after` afterwards.
    PhaseSwitch {
        #[serde(default)]
        switch_at: Option<usize>,
        before: Vec<f64>,
        after: Vec<f64>,
    },
    /// `r_t = offset + (-1)^t · amplitude`.
    Alternating { offset: Vec<f64>, amplitude: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintScript {
    /// `values[t-1]` is `G_t` as `m` rows.
    Schedule { values: Vec<Vec<Vec<f64>>> },
    ScheduleFile { path: PathBuf },
    PhaseSwitch {
        #[serde(default)]
        switch_at: Option<usize>,
        before: Vec<Vec<f64>>,
        after: Vec<Vec<f64>>,
    },
    /// `G_t = offset + (-1)^t · amplitude`.
    Alternating {
        offset: Vec<Vec<f64>>,
        amplitude: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum RewardSpec {
    Stochastic { model: RewardModel },
    Adversarial { script: RewardScript },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum ConstraintSpec {
    Stochastic { model: ConstraintModel },
    Adversarial { script: ConstraintScript },
}

/// JSON-facing environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub m: usize,
    pub rewards: RewardSpec,
    pub constraints: ConstraintSpec,
}

impl EnvironmentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A validated environment bound to a layout and an episode budget, with
/// schedule files already loaded.
#[derive(Debug, Clone)]
pub struct Environment {
    m: usize,
    n_pairs: usize,
    horizon_t: usize,
    rewards: RewardSpec,
    constraints: ConstraintSpec,
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

fn check_range(what: &str, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    match values.iter().find(|v| !(lo..=hi).contains(*v)) {
        Some(v) => Err(Error::Config(format!("{what}: value {v} outside [{lo},{hi}]"))),
        None => Ok(()),
    }
}

impl Environment {
    /// Validates `spec` against `layout`, resolving schedule files relative to
    /// `base_dir`.
    pub fn new(spec: &EnvironmentSpec, layout: &Layout, horizon_t: usize, base_dir: Option<&Path>) -> Result<Self> {
        let m = spec.m;
        let n = layout.num_pairs();
        if m == 0 {
            return Err(Error::Config("environment needs m >= 1".into()));
        }
        if horizon_t < 2 {
            return Err(Error::Config(format!("episode budget must be at least 2, got {horizon_t}")));
        }
        let resolve = |p: &Path| match base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        let mut file_cache: Option<(PathBuf, Schedule)> = None;
        let mut load = |p: &Path| -> Result<Schedule> {
            let full = resolve(p);
            if let Some((cached, s)) = &file_cache {
                if *cached == full {
                    return Ok(s.clone());
                }
            }
            let s = read_schedule_csv(&full, m, n)?;
            file_cache = Some((full, s.clone()));
            Ok(s)
        };

        let pair_vec = |what: &'static str, v: &[f64], lo: f64, hi: f64| -> Result<()> {
            check_len(what, n, v.len())?;
            check_range(what, v, lo, hi)
        };
        let matrix = |what: &'static str, rows: &[Vec<f64>], lo: f64, hi: f64| -> Result<()> {
            check_len(what, m, rows.len())?;
            for r in rows {
                pair_vec(what, r, lo, hi)?;
            }
            Ok(())
        };

        let rewards = match &spec.rewards {
            RewardSpec::Stochastic { model } => {
                match model {
                    RewardModel::PointMass { mean } | RewardModel::Bernoulli { mean } => {
                        pair_vec("reward mean", mean, 0.0, 1.0)?
                    }
                    RewardModel::Beta { alpha, beta } => {
                        check_len("beta alpha", n, alpha.len())?;
                        check_len("beta beta", n, beta.len())?;
                        if alpha.iter().chain(beta).any(|v| !(*v > 0.0)) {
                            return Err(Error::Config("beta parameters must be positive".into()));
                        }
                    }
                }
                spec.rewards.clone()
            }
            RewardSpec::Adversarial { script } => {
                let script = match script {
                    RewardScript::ScheduleFile { path } => RewardScript::Schedule {
                        values: load(path)?.rewards,
                    },
                    other => other.clone(),
                };
                match &script {
                    RewardScript::Schedule { values } => {
                        if values.len() < horizon_t {
                            return Err(Error::ScheduleExhausted {
                                t: horizon_t,
                                len: values.len(),
                            });
                        }
                        for v in values {
                            pair_vec("scheduled reward", v, 0.0, 1.0)?;
                        }
                    }
                    RewardScript::PhaseSwitch { before, after, .. } => {
                        pair_vec("phase reward", before, 0.0, 1.0)?;
                        pair_vec("phase reward", after, 0.0, 1.0)?;
                    }
                    RewardScript::Alternating { offset, amplitude } => {
                        check_len("alternating offset", n, offset.len())?;
                        check_len("alternating amplitude", n, amplitude.len())?;
                        let hi: Vec<f64> = offset.iter().zip(amplitude).map(|(o, a)| o + a).collect();
                        let lo: Vec<f64> = offset.iter().zip(amplitude).map(|(o, a)| o - a).collect();
                        check_range("alternating reward", &hi, 0.0, 1.0)?;
                        check_range("alternating reward", &lo, 0.0, 1.0)?;
                    }
                    RewardScript::ScheduleFile { .. } => unreachable!("resolved above"),
                }
                RewardSpec::Adversarial { script }
            }
        };

        let constraints = match &spec.constraints {
            ConstraintSpec::Stochastic { model } => {
                match model {
                    ConstraintModel::PointMass { mean } => matrix("constraint mean", mean, -1.0, 1.0)?,
                    ConstraintModel::ShiftedBernoulli { shift, scale, p } => {
                        matrix("bernoulli shift", shift, -1.0, 1.0)?;
                        matrix("bernoulli scale", scale, -2.0, 2.0)?;
                        matrix("bernoulli p", p, 0.0, 1.0)?;
                        let top: Vec<f64> = flatten(shift).iter().zip(flatten(scale)).map(|(s, c)| s + c).collect();
                        check_range("bernoulli upper value", &top, -1.0, 1.0)?;
                    }
                    ConstraintModel::Uniform { low, high } => {
                        matrix("uniform low", low, -1.0, 1.0)?;
                        matrix("uniform high", high, -1.0, 1.0)?;
                        if flatten(low).iter().zip(flatten(high)).any(|(l, h)| *l > h) {
                            return Err(Error::Config("uniform low exceeds high".into()));
                        }
                    }
                }
                spec.constraints.clone()
            }
            ConstraintSpec::Adversarial { script } => {
                let script = match script {
                    ConstraintScript::ScheduleFile { path } => ConstraintScript::Schedule {
                        values: load(path)?.constraints,
                    },
                    other => other.clone(),
                };
                match &script {
                    ConstraintScript::Schedule { values } => {
                        if values.len() < horizon_t {
                            return Err(Error::ScheduleExhausted {
                                t: horizon_t,
                                len: values.len(),
                            });
                        }
                        for g in values {
                            matrix("scheduled constraint", g, -1.0, 1.0)?;
                        }
                    }
                    ConstraintScript::PhaseSwitch { before, after, .. } => {
                        matrix("phase constraint", before, -1.0, 1.0)?;
                        matrix("phase constraint", after, -1.0, 1.0)?;
                    }
                    ConstraintScript::Alternating { offset, amplitude } => {
                        check_len("alternating offset rows", m, offset.len())?;
                        check_len("alternating amplitude rows", m, amplitude.len())?;
                        let (o, a) = (flatten(offset), flatten(amplitude));
                        check_len("alternating offset", m * n, o.len())?;
                        check_len("alternating amplitude", m * n, a.len())?;
                        let hi: Vec<f64> = o.iter().zip(&a).map(|(o, a)| o + a).collect();
                        let lo: Vec<f64> = o.iter().zip(&a).map(|(o, a)| o - a).collect();
                        check_range("alternating constraint", &hi, -1.0, 1.0)?;
                        check_range("alternating constraint", &lo, -1.0, 1.0)?;
                    }
                    ConstraintScript::ScheduleFile { .. } => unreachable!("resolved above"),
                }
                ConstraintSpec::Adversarial { script }
            }
        };

        Ok(Self {
            m,
            n_pairs: n,
            horizon_t,
            rewards,
            constraints,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon_t(&self) -> usize {
        self.horizon_t
    }

    pub fn stochastic_rewards(&self) -> bool {
        matches!(self.rewards, RewardSpec::Stochastic { .. })
    }

    pub fn stochastic_constraints(&self) -> bool {
        matches!(self.constraints, ConstraintSpec::Stochastic { .. })
    }

    fn switch_point(&self, switch_at: Option<usize>) -> usize {
        switch_at.unwrap_or(self.horizon_t / 2)
    }

    fn sign(t: usize) -> f64 {
        if t.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Scripted reward at episode `t` (1-based); `None` for stochastic rewards.
    pub fn scripted_reward(&self, t: usize) -> Result<Option<Vec<f64>>> {
        let RewardSpec::Adversarial { script } = &self.rewards else {
            return Ok(None);
        };
        Ok(Some(match script {
            RewardScript::Schedule { values } => values
                .get(t - 1)
                .cloned()
                .ok_or(Error::ScheduleExhausted { t, len: values.len() })?,
            RewardScript::PhaseSwitch { switch_at, before, after } => {
                if t <= self.switch_point(*switch_at) {
                    before.clone()
                } else {
                    after.clone()
                }
            }
            RewardScript::Alternating { offset, amplitude } => {
                let s = Self::sign(t);
                offset.iter().zip(amplitude).map(|(o, a)| (o + s * a).clamp(0.0, 1.0)).collect()
            }
            RewardScript::ScheduleFile { .. } => unreachable!("resolved at construction"),
        }))
    }

    /// Scripted constraint matrix (flattened rows) at episode `t`; `None` for
    /// stochastic constraints.
    pub fn scripted_constraint(&self, t: usize) -> Result<Option<Vec<f64>>> {
        let ConstraintSpec::Adversarial { script } = &self.constraints else {
            return Ok(None);
        };
        Ok(Some(match script {
            ConstraintScript::Schedule { values } => flatten(
                values
                    .get(t - 1)
                    .ok_or(Error::ScheduleExhausted { t, len: values.len() })?,
            ),
            ConstraintScript::PhaseSwitch { switch_at, before, after } => {
                if t <= self.switch_point(*switch_at) {
                    flatten(before)
                } else {
                    flatten(after)
                }
            }
            ConstraintScript::Alternating { offset, amplitude } => {
                let s = Self::sign(t);
                flatten(offset)
                    .iter()
                    .zip(flatten(amplitude))
                    .map(|(o, a)| (o + s * a).clamp(-1.0, 1.0))
                    .collect()
            }
            ConstraintScript::ScheduleFile { .. } => unreachable!("resolved at construction"),
        }))
    }

    /// Samples `(r_t, G_t)` for episode `t` (1-based). Scripted sides ignore
    /// `rng`; stochastic sides draw from it in a fixed order.
    pub fn draw_episode<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<(RewardSample, ConstraintSample)> {
        if t == 0 || t > self.horizon_t {
            return Err(Error::ScheduleExhausted {
                t,
                len: self.horizon_t,
            });
        }
        let r = match &self.rewards {
            RewardSpec::Stochastic { model } => match model {
                RewardModel::PointMass { mean } => mean.clone(),
                RewardModel::Bernoulli { mean } => mean
                    .iter()
                    .map(|&p| if rng.gen_bool(p) { 1.0 } else { 0.0 })
                    .collect(),
                RewardModel::Beta { alpha, beta } => alpha
                    .iter()
                    .zip(beta)
                    .map(|(&a, &b)| {
                        Beta::new(a, b)
                            .map_err(|e| Error::Config(format!("beta({a},{b}): {e}")))
                            .map(|d| d.sample(rng))
                    })
                    .collect::<Result<_>>()?,
            },
            RewardSpec::Adversarial { .. } => self.scripted_reward(t)?.expect("adversarial"),
        };
        let g = match &self.constraints {
            ConstraintSpec::Stochastic { model } => match model {
                ConstraintModel::PointMass { mean } => flatten(mean),
                ConstraintModel::ShiftedBernoulli { shift, scale, p } => flatten(shift)
                    .iter()
                    .zip(flatten(scale))
                    .zip(flatten(p))
                    .map(|((s, c), p)| if rng.gen_bool(p) { (s + c).clamp(-1.0, 1.0) } else { *s })
                    .collect(),
                ConstraintModel::Uniform { low, high } => flatten(low)
                    .iter()
                    .zip(flatten(high))
                    .map(|(&l, h)| if h > l { rng.gen_range(l..=h) } else { l })
                    .collect(),
            },
            ConstraintSpec::Adversarial { .. } => self.scripted_constraint(t)?.expect("adversarial"),
        };
        Ok((RewardSample::new(r)?, ConstraintSample::new(self.m, g)?))
    }

    /// `r̄`: the distribution mean, or the time average of the script over `T`.
    pub fn reward_mean(&self) -> Result<Vec<f64>> {
        match &self.rewards {
            RewardSpec::Stochastic { model } => Ok(match model {
                RewardModel::PointMass { mean } | RewardModel::Bernoulli { mean } => mean.clone(),
                RewardModel::Beta { alpha, beta } => alpha.iter().zip(beta).map(|(a, b)| a / (a + b)).collect(),
            }),
            RewardSpec::Adversarial { .. } => {
                let mut acc = vec![0.0; self.n_pairs];
                for t in 1..=self.horizon_t {
                    for (s, v) in acc.iter_mut().zip(self.scripted_reward(t)?.expect("adversarial")) {
                        *s += v;
                    }
                }
                Ok(acc.into_iter().map(|s| s / self.horizon_t as f64).collect())
            }
        }
    }

    /// `Ḡ` flattened row-major: the distribution mean, or the script's time
    /// average over `T`.
    pub fn constraint_mean(&self) -> Result<Vec<f64>> {
        match &self.constraints {
            ConstraintSpec::Stochastic { model } => Ok(match model {
                ConstraintModel::PointMass { mean } => flatten(mean),
                ConstraintModel::ShiftedBernoulli { shift, scale, p } => flatten(shift)
                    .iter()
                    .zip(flatten(scale))
                    .zip(flatten(p))
                    .map(|((s, c), p)| s + c * p)
                    .collect(),
                ConstraintModel::Uniform { low, high } => flatten(low)
                    .iter()
                    .zip(flatten(high))
                    .map(|(l, h)| 0.5 * (l + h))
                    .collect(),
            }),
            ConstraintSpec::Adversarial { .. } => {
                let mut acc = vec![0.0; self.m * self.n_pairs];
                for t in 1..=self.horizon_t {
                    for (s, v) in acc.iter_mut().zip(self.scripted_constraint(t)?.expect("adversarial")) {
                        *s += v;
                    }
                }
                Ok(acc.into_iter().map(|s| s / self.horizon_t as f64).collect())
            }
        }
    }

    /// Distinct scripted constraint matrices over episodes `1..=T`, in order of
    /// first appearance.
    pub fn distinct_constraints(&self) -> Result<Vec<Vec<f64>>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in 1..=self.horizon_t {
            let g = self.scripted_constraint(t)?.ok_or_else(|| {
                Error::Config("stochastic constraints have no schedule to materialize".into())
            })?;
            let key: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                out.push(g);
            }
        }
        Ok(out)
    }
}

/// Rewards and constraints read from a schedule CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub rewards: Vec<Vec<f64>>,
    pub constraints: Vec<Vec<Vec<f64>>>,
}

/// Reads a schedule CSV with one row per episode: `t`, then `G_t` row-major
/// (`m · |X||A|` columns), then `r_t` (`|X||A|` columns). A header row is
/// expected.
pub fn read_schedule_csv(path: &Path, m: usize, n_pairs: usize) -> Result<Schedule> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = 1 + m * n_pairs + n_pairs;
    let mut rewards = Vec::new();
    let mut constraints = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::DimensionMismatch {
                what: "schedule columns",
                expected: width,
                got: rec.len(),
            });
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("schedule row {}: {e}", row + 1)))
            })
            .collect::<Result<_>>()?;
        let t = vals[0] as usize;
        if t != row + 1 {
            return Err(Error::Config(format!("schedule row {} carries t = {}", row + 1, vals[0])));
        }
        let g = &vals[1..1 + m * n_pairs];
        constraints.push(g.chunks(n_pairs).map(|c| c.to_vec()).collect());
        rewards.push(vals[1 + m * n_pairs..].to_vec());
    }
    Ok(Schedule { rewards, constraints })
}

pub fn write_schedule_csv(path: &Path, schedule: &Schedule) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = schedule.constraints.first().map_or(0, |g| g.len());
    let n = schedule.rewards.first().map_or(0, |r| r.len());
    let mut header = vec!["t".to_string()];
    for i in 0..m {
        header.extend((0..n).map(|p| format!("g{i}_{p}")));
    }
    header.extend((0..n).map(|p| format!("r{p}")));
    w.write_record(&header)?;
    for (t, (r, g)) in schedule.rewards.iter().zip(&schedule.constraints).enumerate() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(g.iter().flatten().map(|v| v.to_string()));
        rec.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Offline quantities of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub episodes: usize,
    pub horizon: usize,
    pub m: usize,
    pub stochastic_rewards: bool,
    pub stochastic_constraints: bool,
    /// `r̄` over pairs.
    pub reward_mean: Vec<f64>,
    /// `Ḡ` as `m` pair-indexed rows.
    pub constraint_mean: Vec<Vec<f64>>,
    pub opt_status: LpStatus,
    pub opt: Option<f64>,
    /// Triple-indexed `q*`.
    pub q_star: Option<Vec<f64>>,
    pub rho: f64,
    /// Triple-indexed `q°`.
    pub q_circ: Vec<f64>,
    pub slater_holds: bool,
    pub condition2_threshold: f64,
    pub condition2_holds: bool,
    pub zeta: Option<f64>,
    /// Adversarial constraints only.
    pub q_tilde: Option<Vec<f64>>,
    /// Whether `q̃` satisfies every scheduled constraint (adversarial only).
    pub q_tilde_safe: Option<bool>,
}

impl OracleReport {
    pub fn q_star_measure(&self, layout: &std::sync::Arc<Layout>) -> Option<OccupancyMeasure> {
        self.q_star
            .as_ref()
            .and_then(|q| OccupancyMeasure::new(layout.clone(), q.clone()).ok())
    }

    /// `Ḡ` flattened row-major.
    pub fn constraint_mean_flat(&self) -> Vec<f64> {
        flatten(&self.constraint_mean)
    }
}

/// `T^{-1/8} · L · √(20m)`.
pub fn condition2_threshold(horizon_t: usize, horizon: usize, m: usize) -> f64 {
    (horizon_t as f64).powf(-0.125) * horizon as f64 * (20.0 * m as f64).sqrt()
}

/// `ζ = 20 m L² / ρ²`, absent when `ρ ≤ 0`.
pub fn zeta(rho: f64, horizon: usize, m: usize) -> Option<f64> {
    (rho > 0.0).then(|| 20.0 * m as f64 * (horizon * horizon) as f64 / (rho * rho))
}

/// `max_{q ∈ Δ(M)} min_row −rowᵀq` over pair-indexed rows, with its argmax.
pub fn feasibility_margin(p: &LoopFreeCmdp, pair_rows: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let poly = OccupancyPolytope::exact(p);
    let rows: Vec<Vec<f64>> = pair_rows.iter().map(|r| p.layout().broadcast(r)).collect();
    let sol = poly.lp_max_margin(&rows)?;
    match (sol.status, sol.argmax) {
        (LpStatus::Optimal, Some(q)) => Ok((sol.optimum, q.into_values())),
        (status, _) => Err(Error::Config(format!("feasibility LP ended with status {status:?}"))),
    }
}

/// Offline oracle for `env` on the true CMDP `p`.
pub fn solve_offline(env: &Environment, p: &LoopFreeCmdp) -> Result<OracleReport> {
    let layout = p.layout();
    let n = layout.num_pairs();
    let m = env.m();
    let horizon_t = env.horizon_t();
    let r_bar = env.reward_mean()?;
    let g_bar = env.constraint_mean()?;
    let g_rows: Vec<Vec<f64>> = g_bar.chunks(n).map(|c| c.to_vec()).collect();

    let poly = OccupancyPolytope::exact(p);
    let extra: Vec<LinearInequality> = g_rows
        .iter()
        .map(|g| LinearInequality {
            coeffs: layout.broadcast(g),
            rhs: 0.0,
        })
        .collect();
    let lp = poly.lp_maximize(&layout.broadcast(&r_bar), &extra)?;
    let (opt, q_star) = match (&lp.status, lp.argmax) {
        (LpStatus::Optimal, Some(q)) => (Some(lp.optimum), Some(q.into_values())),
        _ => (None, None),
    };

    let margin_rows: Vec<Vec<f64>> = if env.stochastic_constraints() {
        g_rows.clone()
    } else {
        env.distinct_constraints()?
            .into_iter()
            .flat_map(|g| g.chunks(n).map(|c| c.to_vec()).collect::<Vec<_>>())
            .collect()
    };
    let (rho, q_circ) = feasibility_margin(p, &margin_rows)?;
    let threshold = condition2_threshold(horizon_t, layout.horizon(), m);

    let (q_tilde, q_tilde_safe) = match (&q_star, env.stochastic_constraints()) {
        (Some(qs), false) if rho > 0.0 => {
            let w = rho / (1.0 + rho);
            let qt: Vec<f64> = qs.iter().zip(&q_circ).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            let marg = layout.pair_marginal(&qt);
            let safe = margin_rows
                .iter()
                .all(|row| row.iter().zip(&marg).map(|(g, q)| g * q).sum::<f64>() <= 1e-9);
            (Some(qt), Some(safe))
        }
        _ => (None, None),
    };

    Ok(OracleReport {
        episodes: horizon_t,
        horizon: layout.horizon(),
        m,
        stochastic_rewards: env.stochastic_rewards(),
        stochastic_constraints: env.stochastic_constraints(),
        reward_mean: r_bar,
        constraint_mean: g_rows,
        opt_status: lp.status,
        opt,
        q_star,
        rho,
        q_circ,
        slater_holds: rho > 0.0,
        condition2_threshold: threshold,
        condition2_holds: rho >= threshold,
        zeta: zeta(rho, layout.horizon(), m),
        q_tilde,
        q_tilde_safe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1_spec() -> EnvironmentSpec {
        EnvironmentSpec {
            m: 1,
            rewards: RewardSpec::Stochastic {
                model: RewardModel::PointMass {
                    mean: fixtures::t1_reward_mean(),
                },
            },
            constraints: ConstraintSpec::Stochastic {
                model: ConstraintModel::PointMass {
                    mean: vec![fixtures::t1_constraint_mean()],
                },
            },
        }
    }

    #[test]
    fn t1_oracle_values() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(&t1_spec(), p.layout(), 100, None).unwrap();
        let rep = solve_offline(&env, &p).unwrap();
        assert!((rep.opt.unwrap() - 0.5).abs() < 1e-7);
        assert!((rep.rho - 1.0).abs() < 1e-7);
        assert!((rep.zeta.unwrap() - 80.0).abs() < 1e-6);
        let qc = p.layout().pair_marginal(&rep.q_circ);
        assert!((qc[1] - 1.0).abs() < 1e-7);
        let qs = p.layout().pair_marginal(rep.q_star.as_ref().unwrap());
        assert!((qs[0] - 0.5).abs() < 1e-7 && (qs[1] - 0.5).abs() < 1e-7);
        assert!(rep.slater_holds);
        assert!(rep.q_tilde.is_none());
    }

    #[test]
    fn condition2_threshold_flip() {
        let th = condition2_threshold(256, 2, 1);
        assert!((th - 0.5 * 2.0 * 20f64.sqrt()).abs() < 1e-12);
        assert!(th > 1.0);
        assert!(condition2_threshold(100_000_000, 2, 1) <= 1.0);
        let p = fixtures::t1_cmdp();
        let env = Environment::new(&t1_spec(), p.layout(), 256, None).unwrap();
        assert!(!solve_offline(&env, &p).unwrap().condition2_holds);
        let env = Environment::new(&t1_spec(), p.layout(), 100_000_000, None).unwrap();
        assert!(solve_offline(&env, &p).unwrap().condition2_holds);
    }

    #[test]
    fn all_positive_constraint_breaks_slater() {
        let p = fixtures::t1_cmdp();
        let mut spec = t1_spec();
        spec.constraints = ConstraintSpec::Stochastic {
            model: ConstraintModel::PointMass { mean: vec![vec![1.0; 8]] },
        };
        let env = Environment::new(&spec, p.layout(), 100, None).unwrap();
        let rep = solve_offline(&env, &p).unwrap();
        assert!(!rep.slater_holds);
        assert_eq!(rep.opt_status, LpStatus::Infeasible);
        assert!(rep.opt.is_none());
        assert!((rep.rho + 2.0).abs() < 1e-7);
        assert!(rep.zeta.is_none());
    }

    #[test]
    fn point_mass_draws_are_constant() {
        let p = fixtures::t1_cmdp();
        let env = Environment::new(&t1_spec(), p.layout(), 10, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=10 {
            let (r, g) = env.draw_episode(t, &mut rng).unwrap();
            assert_eq!(r.values, fixtures::t1_reward_mean());
            assert_eq!(g.values, fixtures::t1_constraint_mean());
        }
        assert!(env.draw_episode(11, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_reward_mean() {
        let p = fixtures::t1_cmdp();
        let mut spec = t1_spec();
        spec.rewards = RewardSpec::Stochastic {
            model: RewardModel::Bernoulli { mean: vec![0.5; 8] },
        };
        let env = Environment::new(&spec, p.layout(), 10_000, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let hits: f64 = (1..=n).map(|t| env.draw_episode(t, &mut rng).unwrap().0.values[0]).sum();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.5).abs() <= 3.0 * sigma);
    }

    #[test]
    fn alternating_constraint_sign() {
        let p = fixtures::t1_cmdp();
        let g = fixtures::t1_constraint_mean();
        let mut spec = t1_spec();
        spec.constraints = ConstraintSpec::Adversarial {
            script: ConstraintScript::Alternating {
                offset: vec![vec![0.0; 8]],
                amplitude: vec![g.clone()],
            },
        };
        let env = Environment::new(&spec, p.layout(), 10, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(env.draw_episode(2, &mut rng).unwrap().1.values, g);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(env.draw_episode(3, &mut rng).unwrap().1.values, neg);
        assert_eq!(env.distinct_constraints().unwrap().len(), 2);
        assert!(env.constraint_mean().unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn phase_switch_defaults_to_half() {
        let p = fixtures::t1_cmdp();
        let mut spec = t1_spec();
        spec.rewards = RewardSpec::Adversarial {
            script: RewardScript::PhaseSwitch {
                switch_at: None,
                before: vec![1.0; 8],
                after: vec![0.0; 8],
            },
        };
        let env = Environment::new(&spec, p.layout(), 10, None).unwrap();
        assert_eq!(env.scripted_reward(5).unwrap().unwrap()[0], 1.0);
        assert_eq!(env.scripted_reward(6).unwrap().unwrap()[0], 0.0);
        assert!((env.reward_mean().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn schedule_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sched.csv");
        let sched = Schedule {
            rewards: (0..4).map(|t| vec![0.1 * t as f64; 8]).collect(),
            constraints: (0..4).map(|t| vec![vec![-0.25 * t as f64; 8]]).collect(),
        };
        write_schedule_csv(&path, &sched).unwrap();
        assert_eq!(read_schedule_csv(&path, 1, 8).unwrap(), sched);

        let p = fixtures::t1_cmdp();
        let spec = EnvironmentSpec {
            m: 1,
            rewards: RewardSpec::Adversarial {
                script: RewardScript::ScheduleFile { path: "sched.csv".into() },
            },
            constraints: ConstraintSpec::Adversarial {
                script: ConstraintScript::ScheduleFile { path: "sched.csv".into() },
            },
        };
        let env = Environment::new(&spec, p.layout(), 4, Some(dir.path())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, g) = env.draw_episode(3, &mut rng).unwrap();
        assert_eq!(r.values, sched.rewards[2]);
        assert_eq!(g.values, sched.constraints[2][0]);
        assert!(matches!(
            Environment::new(&spec, p.layout(), 5, Some(dir.path())),
            Err(Error::ScheduleExhausted { .. })
        ));
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = t1_spec();
        let text = spec.to_json().unwrap();
        assert_eq!(EnvironmentSpec::from_json(&text).unwrap(), spec);
        let p = fixtures::t1_cmdp();
        let mut bad = spec.clone();
        bad.rewards = RewardSpec::Stochastic {
            model: RewardModel::PointMass { mean: vec![2.0; 8] },
        };
        assert!(Environment::new(&bad, p.layout(), 10, None).is_err());
        let mut short = spec;
        short.rewards = RewardSpec::Stochastic {
            model: RewardModel::PointMass { mean: vec![0.0; 3] },
        };
        assert!(Environment::new(&short, p.layout(), 10, None).is_err());
    }
}
