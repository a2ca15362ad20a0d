//! Transition confidence sets: visit counters, epoch doubling, the empirical
//! kernel and its L1 radii.
//!
//! `epsilon` and `empirical_kernel` read only the counters snapshotted at the
//! start of the current epoch; live counters advance every episode and are
//! copied into the snapshot when some visited pair has doubled its count.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cmdp::{Layout, TransitionKernel, Trajectory};
use crate::error::{Error, Result};
use crate::polytope::{build_polytope, OccupancyPolytope, PolytopeSource, MAX_RADIUS};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceState {
    layout: Arc<Layout>,
    epoch: usize,
    delta: f64,
    horizon_t: usize,
    log_term: f64,
    epoch_pairs: Vec<u64>,
    live_pairs: Vec<u64>,
    epoch_triples: Vec<u64>,
    live_triples: Vec<u64>,
}

impl ConfidenceState {
    /// Epoch 1 with all counters at zero.
    pub fn new(layout: Arc<Layout>, delta: f64, horizon_t: usize) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0,1), got {delta}")));
        }
        if horizon_t == 0 {
            return Err(Error::Config("episode budget must be positive".into()));
        }
        let np = layout.num_pairs();
        let nt = layout.num_triples();
        let log_term = (horizon_t as f64 * np as f64 / delta).ln();
        Ok(Self {
            layout,
            epoch: 1,
            delta,
            horizon_t,
            log_term,
            epoch_pairs: vec![0; np],
            live_pairs: vec![0; np],
            epoch_triples: vec![0; nt],
            live_triples: vec![0; nt],
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn horizon_t(&self) -> usize {
        self.horizon_t
    }

    /// Counters at the start of the current epoch, `N_i(x, a)`.
    pub fn epoch_count(&self, x: usize, a: usize) -> u64 {
        self.epoch_pairs[self.layout.pair(x, a)]
    }

    pub fn live_count(&self, x: usize, a: usize) -> u64 {
        self.live_pairs[self.layout.pair(x, a)]
    }

    pub fn live_triple_count(&self, x: usize, a: usize, y: usize) -> u64 {
        self.live_triples[self.layout.triple(x, a, y)]
    }

    /// Counts one visit per step of `traj`; returns whether a new epoch began.
    pub fn record_trajectory(&mut self, traj: &Trajectory) -> Result<bool> {
        traj.validate(&self.layout, None)?;
        let mut triggered = false;
        for (x, a, y) in traj.steps() {
            let p = self.layout.pair(x, a);
            self.live_pairs[p] += 1;
            self.live_triples[self.layout.triple(x, a, y)] += 1;
        }
        for (x, a, _) in traj.steps() {
            let p = self.layout.pair(x, a);
            if self.live_pairs[p] >= (2 * self.epoch_pairs[p]).max(1) {
                triggered = true;
            }
        }
        if triggered {
            self.epoch += 1;
            self.epoch_pairs.copy_from_slice(&self.live_pairs);
            self.epoch_triples.copy_from_slice(&self.live_triples);
        }
        Ok(triggered)
    }

    /// Radius before clamping to the L1 diameter.
    pub fn epsilon_raw(&self, x: usize, a: usize) -> f64 {
        let next = self.layout.next_layer_size(x) as f64;
        let n = self.epoch_count(x, a).max(1) as f64;
        (2.0 * next * self.log_term / n).sqrt()
    }

    pub fn epsilon(&self, x: usize, a: usize) -> f64 {
        self.epsilon_raw(x, a).min(MAX_RADIUS)
    }

    /// `M_i(·|x,a) / max{1, N_i(x,a)}` over the next layer.
    pub fn empirical_kernel(&self, x: usize, a: usize) -> Vec<f64> {
        let n = self.epoch_count(x, a).max(1) as f64;
        self.layout
            .triples_of_pair(x, a)
            .map(|t| self.epoch_triples[t] as f64 / n)
            .collect()
    }

    /// Empirical kernel on the full triple space.
    pub fn center(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.num_triples()];
        for (x, a) in self.layout.decision_pairs() {
            let range = self.layout.triples_of_pair(x, a);
            out[range.clone()].copy_from_slice(&self.empirical_kernel(x, a));
        }
        out
    }

    /// Clamped radii on the pair space; terminal pairs are zero.
    pub fn radii(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.num_pairs()];
        for (x, a) in self.layout.decision_pairs() {
            out[self.layout.pair(x, a)] = self.epsilon(x, a);
        }
        out
    }

    /// `Δ(P_i)` for the current epoch.
    pub fn polytope(&self) -> OccupancyPolytope {
        let center = self.center();
        let radius = self.radii();
        build_polytope(
            self.layout.clone(),
            PolytopeSource::Confidence {
                center: &center,
                radius: &radius,
            },
        )
        .expect("shapes come from the same layout")
    }

    /// Whether `kernel` lies in the current confidence set.
    pub fn covers(&self, kernel: &TransitionKernel) -> bool {
        self.layout.decision_pairs().all(|(x, a)| {
            let dist: f64 = kernel
                .row(&self.layout, x, a)
                .iter()
                .zip(self.empirical_kernel(x, a))
                .map(|(p, q)| (p - q).abs())
                .sum();
            dist <= self.epsilon(x, a) + 1e-12
        })
    }

    pub fn snapshot(&self) -> ConfidenceSnapshot {
        ConfidenceSnapshot {
            epoch: self.epoch,
            delta: self.delta,
            horizon_t: self.horizon_t,
            epoch_pair_counts: self.epoch_pairs.clone(),
            live_pair_counts: self.live_pairs.clone(),
            epoch_triple_counts: self.epoch_triples.clone(),
            live_triple_counts: self.live_triples.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    /// Restores counters dumped by [`ConfidenceState::to_json`], checking
    /// shapes and the pair/triple count consistency.
    pub fn from_snapshot(layout: Arc<Layout>, snap: ConfidenceSnapshot) -> Result<Self> {
        let mut state = Self::new(layout, snap.delta, snap.horizon_t)?;
        let (np, nt) = (state.layout.num_pairs(), state.layout.num_triples());
        for (what, expected, got) in [
            ("epoch pair counts", np, snap.epoch_pair_counts.len()),
            ("live pair counts", np, snap.live_pair_counts.len()),
            ("epoch triple counts", nt, snap.epoch_triple_counts.len()),
            ("live triple counts", nt, snap.live_triple_counts.len()),
        ] {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        if snap.epoch == 0 {
            return Err(Error::Config("epoch index starts at 1".into()));
        }
        state.epoch = snap.epoch;
        state.epoch_pairs = snap.epoch_pair_counts;
        state.live_pairs = snap.live_pair_counts;
        state.epoch_triples = snap.epoch_triple_counts;
        state.live_triples = snap.live_triple_counts;
        for (pairs, triples) in [
            (&state.epoch_pairs, &state.epoch_triples),
            (&state.live_pairs, &state.live_triples),
        ] {
            for (x, a) in state.layout.decision_pairs() {
                let sum: u64 = triples[state.layout.triples_of_pair(x, a)].iter().sum();
                if sum != pairs[state.layout.pair(x, a)] {
                    return Err(Error::Config(format!(
                        "triple counts of ({}, {}) do not add up to the pair count",
                        state.layout.state_name(x),
                        state.layout.action_name(a)
                    )));
                }
            }
        }
        if state.live_pairs.iter().zip(&state.epoch_pairs).any(|(l, e)| l < e) {
            return Err(Error::Config("live counts below epoch-start counts".into()));
        }
        Ok(state)
    }

    pub fn from_json(layout: Arc<Layout>, text: &str) -> Result<Self> {
        Self::from_snapshot(layout, serde_json::from_str(text)?)
    }
}

/// JSON dump of the counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSnapshot {
    pub epoch: usize,
    pub delta: f64,
    pub horizon_t: usize,
    pub epoch_pair_counts: Vec<u64>,
    pub live_pair_counts: Vec<u64>,
    pub epoch_triple_counts: Vec<u64>,
    pub live_triple_counts: Vec<u64>,
}
