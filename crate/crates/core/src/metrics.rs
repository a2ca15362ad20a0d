//! Run metrics: regret and violation totals, interval regret over a dyadic
//! window grid, concentration margins, and log-log growth fits.
//!
//! The dyadic grid holds every window `[j·2^k + 1, (j+1)·2^k]` inside
//! `[1, T]` plus `[1, T]` itself. It has fewer than `2T` windows.

use serde::{Deserialize, Serialize};

use crate::cmdp::dot;
use crate::error::{Error, Result};
use crate::orchestrator::{max_of, totals, RunTrace};
use crate::scenario::OracleReport;

/// `E^r_δ = (L/√2) √(T ln(2/δ))`.
pub fn reward_azuma_bound(horizon: usize, episodes: usize, delta: f64) -> f64 {
    horizon as f64 / 2f64.sqrt() * (episodes as f64 * (2.0 / delta).ln()).sqrt()
}

/// `E^G_{t1,t2,δ} = 2L √(2 (t2 − t1 + 1) ln(T²/δ))`.
pub fn constraint_azuma_bound(horizon: usize, episodes: usize, t1: usize, t2: usize, delta: f64) -> f64 {
    let t = episodes as f64;
    2.0 * horizon as f64 * (2.0 * (t2 + 1 - t1) as f64 * (t * t / delta).ln()).sqrt()
}

/// 1-based inclusive windows of the dyadic grid over `[1, T]`.
pub fn dyadic_windows(episodes: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut size = 1;
    while size <= episodes {
        let mut start = 1;
        while start + size - 1 <= episodes {
            out.push((start, start + size - 1));
            start += size;
        }
        size *= 2;
    }
    if episodes > 0 && !episodes.is_power_of_two() {
        out.push((1, episodes));
    }
    out
}

/// Max of `values` over every dyadic window, aligned with [`dyadic_windows`].
fn window_maxima(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = Vec::new();
    let mut level = values.to_vec();
    let mut size = 1;
    while size <= n {
        out.extend_from_slice(&level);
        level = level.chunks_exact(2).map(|c| c[0].max(c[1])).collect();
        size *= 2;
    }
    if n > 0 && !n.is_power_of_two() {
        out.push(max_of(values));
    }
    out
}

fn prefix(values: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(values.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for v in values {
        acc += v;
        p.push(acc);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Least-squares fit of `ln value` against `ln T`. Values below 1 are
/// floored at 1 first.
pub fn fit_growth(points: &[(f64, f64)]) -> Result<GrowthFit> {
    if points.len() < 3 {
        return Err(Error::TooFewCheckpoints {
            needed: 3,
            got: points.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.max(1.0).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("growth fit needs at least two distinct T values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(GrowthFit {
        slope,
        intercept,
        residual: (sse / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    pub regret: Option<f64>,
    pub pseudo_regret: Option<f64>,
    pub violation: f64,
    pub violation_pos: f64,
    pub cumulative_reward: f64,
    pub reward_fraction: Option<f64>,
    pub max_lambda_l1: f64,
    /// Largest one-step increase of `||λ||₁`.
    pub max_lambda_step: f64,
    /// `mηL`.
    pub lambda_step_bound: f64,
    pub lambda_in_box: bool,
    pub lambda_cap_hit: bool,
    /// `R^D_T(0) = −Σ_t λ_tᵀ v_t`.
    pub dual_regret_zero: f64,
    pub window_count: usize,
    /// Max over dyadic windows of `Σ ℓ_tᵀ(q̂_t − q*)`.
    pub max_interval_regret_q_star: Option<f64>,
    /// Max over dyadic windows of `Σ ℓ_tᵀ(q̂_t − q°)`.
    pub max_interval_regret_q_circ: f64,
    /// `|Σ_t (r_t − r̄)ᵀ q*|`.
    pub reward_margin: Option<f64>,
    pub reward_bound: f64,
    pub reward_event_holds: Option<bool>,
    /// Max over windows of `|Σ λ_tᵀ(G_t − Ḡ)ᵀ q*| / (λ_{t1,t2} E^G_{t1,t2})`.
    pub constraint_ratio_q_star: Option<f64>,
    pub constraint_ratio_q_circ: f64,
    pub constraint_event_holds: bool,
    pub final_epoch: usize,
    pub max_proj_residual: f64,
}

fn window_interval_regret(
    trace: &RunTrace,
    comparator: &[f64],
    windows: &[(usize, usize)],
) -> f64 {
    let layout = trace.layout();
    let cmp = layout.pair_marginal(comparator);
    let per: Vec<f64> = trace
        .records
        .iter()
        .map(|r| {
            let q = layout.pair_marginal(&r.q_hat);
            r.loss.iter().zip(q.iter().zip(&cmp)).map(|(l, (a, b))| l * (a - b)).sum()
        })
        .collect();
    let ps = prefix(&per);
    windows
        .iter()
        .map(|&(a, b)| ps[b] - ps[a - 1])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Max over windows of `|Σ λ_tᵀ(G_t − Ḡ)ᵀ q| / (λ_{t1,t2} · E^G)`, where
/// `λ_{t1,t2}` is the window's largest `||λ_t||₁`; windows with
/// `λ_{t1,t2} = 0` contribute 0.
fn constraint_ratio(
    trace: &RunTrace,
    oracle: &OracleReport,
    comparator: &[f64],
    windows: &[(usize, usize)],
    lambda_max: &[f64],
) -> f64 {
    let layout = trace.layout();
    let n = layout.num_pairs();
    let q = layout.pair_marginal(comparator);
    let g_bar = oracle.constraint_mean_flat();
    let per: Vec<f64> = trace
        .records
        .iter()
        .map(|r| {
            r.lambda
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let diff: Vec<f64> = (0..n).map(|p| r.constraint[i * n + p] - g_bar[i * n + p]).collect();
                    l * dot(&diff, &q)
                })
                .sum()
        })
        .collect();
    let ps = prefix(&per);
    windows
        .iter()
        .zip(lambda_max)
        .map(|(&(a, b), &lm)| {
            let s = (ps[b] - ps[a - 1]).abs();
            if lm <= 0.0 {
                0.0
            } else {
                s / (lm * constraint_azuma_bound(oracle.horizon, oracle.episodes, a, b, trace.config.delta))
            }
        })
        .fold(0.0, f64::max)
}

pub fn compute_metrics(trace: &RunTrace, oracle: &OracleReport) -> Result<MetricsSummary> {
    let layout = trace.layout();
    let big_t = trace.records.len();
    if big_t == 0 {
        return Err(Error::Config("empty trace".into()));
    }
    if oracle.m != trace.m() {
        return Err(Error::DimensionMismatch {
            what: "oracle constraints",
            expected: trace.m(),
            got: oracle.m,
        });
    }
    if oracle.reward_mean.len() != layout.num_pairs() || oracle.q_circ.len() != layout.num_triples() {
        return Err(Error::DimensionMismatch {
            what: "oracle pairs",
            expected: layout.num_pairs(),
            got: oracle.reward_mean.len(),
        });
    }
    let tot = totals(layout, oracle, &trace.records);
    let m = oracle.m;
    let delta = trace.config.delta;

    let cap = trace.summary.lambda_cap;
    let l1: Vec<f64> = trace.records.iter().map(|r| r.lambda_l1()).collect();
    let max_lambda_step = l1.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let lambda_in_box = trace
        .records
        .iter()
        .all(|r| r.lambda.iter().all(|&l| (0.0..=cap).contains(&l)));
    let lambda_cap_hit = trace.records.iter().any(|r| r.lambda.iter().any(|&l| l >= cap));
    let dual_regret_zero = -trace
        .records
        .iter()
        .map(|r| dot(&r.lambda, &r.intended_violations))
        .sum::<f64>();

    let windows = dyadic_windows(big_t);
    let lambda_max = window_maxima(&l1);
    debug_assert_eq!(lambda_max.len(), windows.len());

    let reward_bound = reward_azuma_bound(oracle.horizon, oracle.episodes, delta);
    let reward_margin = oracle.q_star.as_ref().map(|qs| {
        let q = layout.pair_marginal(qs);
        trace
            .records
            .iter()
            .map(|r| {
                r.reward
                    .iter()
                    .zip(&oracle.reward_mean)
                    .zip(&q)
                    .map(|((rt, rb), qv)| (rt - rb) * qv)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .abs()
    });
    let ratio_star = oracle
        .q_star
        .as_ref()
        .map(|qs| constraint_ratio(trace, oracle, qs, &windows, &lambda_max));
    let ratio_circ = constraint_ratio(trace, oracle, &oracle.q_circ, &windows, &lambda_max);

    Ok(MetricsSummary {
        episodes: big_t,
        regret: oracle.opt.map(|opt| big_t as f64 * opt - tot.cumulative_reward),
        pseudo_regret: tot.pseudo_regret,
        violation: max_of(&tot.violation_sums),
        violation_pos: max_of(&tot.violation_pos_sums),
        cumulative_reward: tot.cumulative_reward,
        reward_fraction: oracle
            .opt
            .filter(|o| *o > 0.0)
            .map(|opt| tot.cumulative_reward / (big_t as f64 * opt)),
        max_lambda_l1: tot.max_lambda_l1,
        max_lambda_step,
        lambda_step_bound: m as f64 * trace.summary.dual_rate * oracle.horizon as f64,
        lambda_in_box,
        lambda_cap_hit,
        dual_regret_zero,
        window_count: windows.len(),
        max_interval_regret_q_star: oracle
            .q_star
            .as_ref()
            .map(|qs| window_interval_regret(trace, qs, &windows)),
        max_interval_regret_q_circ: window_interval_regret(trace, &oracle.q_circ, &windows),
        reward_event_holds: reward_margin.map(|mg| mg <= reward_bound),
        reward_margin,
        reward_bound,
        constraint_event_holds: ratio_circ <= 1.0 && ratio_star.is_none_or(|r| r <= 1.0),
        constraint_ratio_q_star: ratio_star,
        constraint_ratio_q_circ: ratio_circ,
        final_epoch: trace.summary.final_epoch,
        max_proj_residual: trace.summary.max_proj_residual,
    })
}
