//! Layered (loop-free) constrained MDPs and the occupancy-measure view of them.
//!
//! States carry a global integer id. Every state belongs to exactly one layer
//! `0..=L`, the first and last layer are singletons, and transitions only move
//! from layer `k` to layer `k + 1`. Vectors over `(x, a, x')` triples are stored
//! densely layer by layer, so an occupancy measure, a transition kernel and an
//! empirical kernel estimate share one index space (see [`Layout::triple`]).
//! Vectors over `(x, a)` pairs cover every state including the terminal one,
//! whose entries never receive occupancy mass.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation tolerance for probability sums and flow conservation.
pub const TOL: f64 = 1e-9;

/// State/action index spaces of a layered MDP. Known to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    state_names: Vec<String>,
    action_names: Vec<String>,
    layers: Vec<Vec<usize>>,
    layer_of: Vec<usize>,
    position: Vec<usize>,
    // layer_offset[k] = first triple index of layer k; layer_offset[L] = total
    layer_offset: Vec<usize>,
    triples: Vec<(usize, usize, usize)>,
}

impl Layout {
    /// Builds a layout from named layers. State ids are assigned in layer order.
    pub fn new(layers: Vec<Vec<String>>, actions: Vec<String>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidModel(
                "need at least two layers (horizon >= 1)".into(),
            ));
        }
        if layers[0].len() != 1 || layers[layers.len() - 1].len() != 1 {
            return Err(Error::InvalidModel(
                "first and last layers must be singletons".into(),
            ));
        }
        if let Some(k) = layers.iter().position(|l| l.is_empty()) {
            return Err(Error::InvalidModel(format!("layer {k} is empty")));
        }
        if actions.is_empty() {
            return Err(Error::InvalidModel("action set is empty".into()));
        }

        let mut state_names = Vec::new();
        let mut ids = Vec::with_capacity(layers.len());
        let mut layer_of = Vec::new();
        let mut position = Vec::new();
        for (k, names) in layers.into_iter().enumerate() {
            let mut layer = Vec::with_capacity(names.len());
            for (j, name) in names.into_iter().enumerate() {
                if state_names.contains(&name) {
                    return Err(Error::InvalidModel(format!("duplicate state name {name:?}")));
                }
                layer.push(state_names.len());
                state_names.push(name);
                layer_of.push(k);
                position.push(j);
            }
            ids.push(layer);
        }
        let mut seen = std::collections::HashSet::new();
        for a in &actions {
            if !seen.insert(a) {
                return Err(Error::InvalidModel(format!("duplicate action name {a:?}")));
            }
        }

        let n_actions = actions.len();
        let horizon = ids.len() - 1;
        let mut layer_offset = Vec::with_capacity(horizon + 1);
        let mut triples = Vec::new();
        for k in 0..horizon {
            layer_offset.push(triples.len());
            for &x in &ids[k] {
                for a in 0..n_actions {
                    for &y in &ids[k + 1] {
                        triples.push((x, a, y));
                    }
                }
            }
        }
        layer_offset.push(triples.len());

        Ok(Self {
            state_names,
            action_names: actions,
            layers: ids,
            layer_of,
            position,
            layer_offset,
            triples,
        })
    }

    /// Layout with generated names `s{k}_{j}` and `a{j}`.
    pub fn from_sizes(sizes: &[usize], n_actions: usize) -> Result<Self> {
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| (0..n).map(|j| format!("s{k}_{j}")).collect())
            .collect();
        let actions = (0..n_actions).map(|j| format!("a{j}")).collect();
        Self::new(layers, actions)
    }

    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    /// `|X||A|`, the length of every pair-indexed vector.
    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_actions()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &[usize] {
        &self.layers[k]
    }

    pub fn layer_of(&self, x: usize) -> usize {
        self.layer_of[x]
    }

    pub fn position(&self, x: usize) -> usize {
        self.position[x]
    }

    pub fn initial_state(&self) -> usize {
        self.layers[0][0]
    }

    pub fn terminal_state(&self) -> usize {
        self.layers[self.horizon()][0]
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.layer_of[x] == self.horizon()
    }

    pub fn state_name(&self, x: usize) -> &str {
        &self.state_names[x]
    }

    pub fn action_name(&self, a: usize) -> &str {
        &self.action_names[a]
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    pub fn state_id(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    pub fn action_id(&self, name: &str) -> Option<usize> {
        self.action_names.iter().position(|n| n == name)
    }

    /// Size of the layer following `x`'s layer.
    pub fn next_layer_size(&self, x: usize) -> usize {
        self.layers[self.layer_of[x] + 1].len()
    }

    pub fn pair(&self, x: usize, a: usize) -> usize {
        x * self.num_actions() + a
    }

    pub fn pair_parts(&self, p: usize) -> (usize, usize) {
        (p / self.num_actions(), p % self.num_actions())
    }

    /// Index of `(x, a, y)` with `y` in the layer after `x`.
    pub fn triple(&self, x: usize, a: usize, y: usize) -> usize {
        debug_assert_eq!(self.layer_of[y], self.layer_of[x] + 1);
        self.triples_of_pair(x, a).start + self.position[y]
    }

    /// Contiguous triple range `(x, a, ·)`.
    pub fn triples_of_pair(&self, x: usize, a: usize) -> Range<usize> {
        let k = self.layer_of[x];
        let width = self.layers[k + 1].len();
        let start = self.layer_offset[k] + (self.position[x] * self.num_actions() + a) * width;
        start..start + width
    }

    pub fn layer_triples(&self, k: usize) -> Range<usize> {
        self.layer_offset[k]..self.layer_offset[k + 1]
    }

    pub fn triple_parts(&self, t: usize) -> (usize, usize, usize) {
        self.triples[t]
    }

    /// Non-terminal `(x, a)` pairs, in pair-index order.
    pub fn decision_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_states())
            .filter(|&x| !self.is_terminal(x))
            .flat_map(move |x| (0..self.num_actions()).map(move |a| (x, a)))
    }

    /// Copies a pair-indexed vector onto every triple `(x, a, ·)`.
    pub fn broadcast(&self, pair_values: &[f64]) -> Vec<f64> {
        self.triples
            .iter()
            .map(|&(x, a, _)| pair_values[self.pair(x, a)])
            .collect()
    }

    /// `q(x, a) = Σ_{x'} q(x, a, x')`.
    pub fn pair_marginal(&self, triple_values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_pairs()];
        for (t, &(x, a, _)) in self.triples.iter().enumerate() {
            out[self.pair(x, a)] += triple_values[t];
        }
        out
    }

    /// `q(x) = Σ_a q(x, a)`; zero for the terminal state.
    pub fn state_marginal(&self, triple_values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states()];
        for (t, &(x, _, _)) in self.triples.iter().enumerate() {
            out[x] += triple_values[t];
        }
        out
    }

    fn check_len(&self, what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected != got {
            return Err(Error::DimensionMismatch { what, expected, got });
        }
        Ok(())
    }
}

/// `P(x' | x, a)` stored on the triple index space.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    probs: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(layout: &Layout, probs: Vec<f64>) -> Result<Self> {
        layout.check_len("kernel triples", layout.num_triples(), probs.len())?;
        for (t, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                let (x, a, y) = layout.triple_parts(t);
                return Err(Error::InvalidModel(format!(
                    "P({}|{},{}) = {p} is not a probability",
                    layout.state_name(y),
                    layout.state_name(x),
                    layout.action_name(a)
                )));
            }
        }
        for (x, a) in layout.decision_pairs() {
            let sum: f64 = probs[layout.triples_of_pair(x, a)].iter().sum();
            if (sum - 1.0).abs() > TOL {
                return Err(Error::InvalidModel(format!(
                    "P(.|{},{}) sums to {sum}",
                    layout.state_name(x),
                    layout.action_name(a)
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, layout: &Layout, x: usize, a: usize) -> &[f64] {
        &self.probs[layout.triples_of_pair(x, a)]
    }
}

/// A layered CMDP: the shared layout plus the true kernel, which only the
/// simulator reads.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopFreeCmdp {
    layout: Arc<Layout>,
    kernel: TransitionKernel,
}

impl LoopFreeCmdp {
    pub fn new(layout: Layout, kernel_probs: Vec<f64>) -> Result<Self> {
        let kernel = TransitionKernel::new(&layout, kernel_probs)?;
        Ok(Self {
            layout: Arc::new(layout),
            kernel,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon()
    }

    pub fn to_document(&self) -> CmdpDocument {
        let l = &self.layout;
        let mut transitions = BTreeMap::new();
        for (x, a) in l.decision_pairs() {
            let row: BTreeMap<String, f64> = l
                .layer(l.layer_of(x) + 1)
                .iter()
                .zip(self.kernel.row(l, x, a))
                .filter(|(_, &p)| p > 0.0)
                .map(|(&y, &p)| (l.state_name(y).to_string(), p))
                .collect();
            transitions
                .entry(l.state_name(x).to_string())
                .or_insert_with(BTreeMap::new)
                .insert(l.action_name(a).to_string(), row);
        }
        CmdpDocument {
            layers: l
                .layers()
                .iter()
                .map(|layer| layer.iter().map(|&x| l.state_name(x).to_string()).collect())
                .collect(),
            actions: l.action_names().to_vec(),
            transitions,
        }
    }

    pub fn from_document(doc: &CmdpDocument) -> Result<Self> {
        let layout = Layout::new(doc.layers.clone(), doc.actions.clone())?;
        let mut probs = vec![0.0; layout.num_triples()];
        for (x, a) in layout.decision_pairs().collect::<Vec<_>>() {
            let (xn, an) = (layout.state_name(x), layout.action_name(a));
            let row = doc.transitions.get(xn).and_then(|m| m.get(an));
            let next = layout.layer(layout.layer_of(x) + 1);
            match row {
                Some(row) => {
                    for (name, &p) in row {
                        let y = layout.state_id(name).ok_or_else(|| {
                            Error::InvalidModel(format!("unknown state {name:?}"))
                        })?;
                        if !next.contains(&y) {
                            return Err(Error::InvalidModel(format!(
                                "transition {xn} -{an}-> {name} skips a layer"
                            )));
                        }
                        probs[layout.triple(x, a, y)] = p;
                    }
                }
                // a singleton next layer needs no explicit row
                None if next.len() == 1 => probs[layout.triple(x, a, next[0])] = 1.0,
                None => {
                    return Err(Error::InvalidModel(format!(
                        "missing transition row for ({xn}, {an})"
                    )))
                }
            }
        }
        for name in doc.transitions.keys() {
            if layout.state_id(name).is_none() {
                return Err(Error::InvalidModel(format!("unknown state {name:?}")));
            }
        }
        Self::new(layout, probs)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// JSON form of a [`LoopFreeCmdp`].
///
/// ```json
/// { "layers": [["x0"], ["u", "v"], ["xL"]],
///   "actions": ["a", "b"],
///   "transitions": { "x0": { "a": { "u": 1.0 }, "b": { "v": 1.0 } } } }
/// ```
///
/// Absent next states have probability zero. A row may be omitted entirely
/// when the next layer is a singleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpDocument {
    pub layers: Vec<Vec<String>>,
    pub actions: Vec<String>,
    #[serde(default)]
    pub transitions: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
}

/// `π(a | x)` over pairs. Terminal-state entries are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    layout: Arc<Layout>,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(layout: Arc<Layout>, probs: Vec<f64>) -> Result<Self> {
        layout.check_len("policy pairs", layout.num_pairs(), probs.len())?;
        for x in 0..layout.num_states() {
            if layout.is_terminal(x) {
                continue;
            }
            let row = &probs[layout.pair(x, 0)..layout.pair(x, 0) + layout.num_actions()];
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidPolicy(format!(
                    "entries of pi(.|{}) outside [0,1]",
                    layout.state_name(x)
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > TOL {
                return Err(Error::InvalidPolicy(format!(
                    "pi(.|{}) sums to {sum}",
                    layout.state_name(x)
                )));
            }
        }
        Ok(Self { layout, probs })
    }

    pub fn uniform(layout: Arc<Layout>) -> Self {
        let n = layout.num_pairs();
        let p = 1.0 / layout.num_actions() as f64;
        Self {
            layout,
            probs: vec![p; n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[self.layout.pair(x, a)]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn action_probs(&self, x: usize) -> &[f64] {
        let start = self.layout.pair(x, 0);
        &self.probs[start..start + self.layout.num_actions()]
    }
}

/// A vector `q(x, a, x')` over the triple index space.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl OccupancyMeasure {
    /// Wraps raw triple values without checking the occupancy conditions.
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        layout.check_len("occupancy triples", layout.num_triples(), values.len())?;
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, a: usize, y: usize) -> f64 {
        self.values[self.layout.triple(x, a, y)]
    }

    pub fn pair_marginal(&self) -> Vec<f64> {
        self.layout.pair_marginal(&self.values)
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.layout.state_marginal(&self.values)
    }

    /// `Σ_{x,a} v(x, a) q(x, a)` for a pair-indexed `v`.
    pub fn dot_pairs(&self, pair_values: &[f64]) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(t, &q)| {
                let (x, a, _) = self.layout.triple_parts(t);
                pair_values[self.layout.pair(x, a)] * q
            })
            .sum()
    }

    /// Checks non-negativity, per-layer normalization and flow conservation.
    /// The error names the first violated condition.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let l = &self.layout;
        if let Some(t) = self.values.iter().position(|&v| !v.is_finite() || v < -tol) {
            let (x, a, y) = l.triple_parts(t);
            return Err(Error::InvalidOccupancy {
                condition: format!(
                    "non-negativity: q({},{},{}) = {}",
                    l.state_name(x),
                    l.action_name(a),
                    l.state_name(y),
                    self.values[t]
                ),
            });
        }
        for k in 0..l.horizon() {
            let sum: f64 = self.values[l.layer_triples(k)].iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidOccupancy {
                    condition: format!("normalization: layer {k} sums to {sum}"),
                });
            }
        }
        let outflow = self.state_marginal();
        let mut inflow = vec![0.0; l.num_states()];
        for (t, &v) in self.values.iter().enumerate() {
            inflow[l.triple_parts(t).2] += v;
        }
        for k in 1..l.horizon() {
            for &x in l.layer(k) {
                if (inflow[x] - outflow[x]).abs() > tol {
                    return Err(Error::InvalidOccupancy {
                        condition: format!(
                            "flow conservation at {}: inflow {} != outflow {}",
                            l.state_name(x),
                            inflow[x],
                            outflow[x]
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One episode: `states[k] ∈ X_k` for `k = 0..=L`, `actions[k]` taken at `states[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.actions
            .iter()
            .enumerate()
            .map(move |(k, &a)| (self.states[k], a, self.states[k + 1]))
    }

    pub fn terminal(&self) -> usize {
        self.states[self.states.len() - 1]
    }

    /// Checks layer membership and, when a kernel is given, that every step
    /// has positive probability.
    pub fn validate(&self, layout: &Layout, kernel: Option<&TransitionKernel>) -> Result<()> {
        let horizon = layout.horizon();
        if self.states.len() != horizon + 1 || self.actions.len() != horizon {
            return Err(Error::InvalidModel(format!(
                "trajectory has {} states and {} actions for horizon {horizon}",
                self.states.len(),
                self.actions.len()
            )));
        }
        for (k, &x) in self.states.iter().enumerate() {
            if x >= layout.num_states() || layout.layer_of(x) != k {
                return Err(Error::InvalidModel(format!("state {x} is not in layer {k}")));
            }
        }
        if self.actions.iter().any(|&a| a >= layout.num_actions()) {
            return Err(Error::InvalidModel("action out of range".into()));
        }
        if let Some(kernel) = kernel {
            for (x, a, y) in self.steps() {
                if kernel.probs()[layout.triple(x, a, y)] <= 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "zero-probability step {} -{}-> {}",
                        layout.state_name(x),
                        layout.action_name(a),
                        layout.state_name(y)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-episode reward vector `r(x, a) ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSample {
    pub values: Vec<f64>,
}

impl RewardSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidModel(format!("reward {v} outside [0,1]")));
        }
        Ok(Self { values })
    }
}

/// Per-episode constraint matrix: `values[i * num_pairs + p] = g_i(x, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSample {
    pub m: usize,
    pub values: Vec<f64>,
}

impl ConstraintSample {
    pub fn new(m: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 || !values.len().is_multiple_of(m) {
            return Err(Error::InvalidModel(format!(
                "{} constraint entries do not split into {m} rows",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidModel(format!("constraint entry {v} outside [-1,1]")));
        }
        Ok(Self { m, values })
    }

    pub fn num_pairs(&self) -> usize {
        self.values.len() / self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.num_pairs();
        &self.values[i * n..(i + 1) * n]
    }

    /// `[Gᵀ q]_i = Σ_{x,a} g_i(x, a) q(x, a)` from pair marginals.
    pub fn violations(&self, pair_marginal: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| dot(self.row(i), pair_marginal))
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `π^q(a|x) = q(x,a) / q(x)`, uniform where `q(x) = 0`.
pub fn induce_policy(q: &OccupancyMeasure) -> Result<Policy> {
    induce_policy_with_tol(q, TOL)
}

/// [`induce_policy`] with an explicit validation tolerance. Entries within
/// `tol` below zero are treated as zero.
pub fn induce_policy_with_tol(q: &OccupancyMeasure, tol: f64) -> Result<Policy> {
    q.validate(tol)?;
    let l = q.layout();
    let n_actions = l.num_actions();
    let mut pair = vec![0.0; l.num_pairs()];
    for (t, &v) in q.values().iter().enumerate() {
        let (x, a, _) = l.triple_parts(t);
        pair[l.pair(x, a)] += v.max(0.0);
    }
    let uniform = 1.0 / n_actions as f64;
    let mut probs = vec![uniform; l.num_pairs()];
    for x in 0..l.num_states() {
        if l.is_terminal(x) {
            continue;
        }
        let row = &pair[l.pair(x, 0)..l.pair(x, 0) + n_actions];
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            for a in 0..n_actions {
                probs[l.pair(x, a)] = row[a] / mass;
            }
        }
    }
    Ok(Policy {
        layout: l.clone(),
        probs,
    })
}

/// Exact forward computation of `q^{P,π}(x, a, x') = Pr[x_k=x, a_k=a, x_{k+1}=x']`.
pub fn induce_occupancy(p: &LoopFreeCmdp, pi: &Policy) -> OccupancyMeasure {
    let l = p.layout();
    let mut reach = vec![0.0; l.num_states()];
    reach[l.initial_state()] = 1.0;
    let mut values = vec![0.0; l.num_triples()];
    for k in 0..l.horizon() {
        for &x in l.layer(k) {
            if reach[x] == 0.0 {
                continue;
            }
            for a in 0..l.num_actions() {
                let w = reach[x] * pi.prob(x, a);
                if w == 0.0 {
                    continue;
                }
                let range = l.triples_of_pair(x, a);
                for (t, &pt) in range.clone().zip(&p.kernel().probs()[range]) {
                    values[t] = w * pt;
                    reach[l.triple_parts(t).2] += w * pt;
                }
            }
        }
    }
    OccupancyMeasure {
        layout: l.clone(),
        values,
    }
}

/// Samples one episode from the chain induced by `(P, π)`; deterministic in `seed`.
pub fn sample_trajectory(p: &LoopFreeCmdp, pi: &Policy, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_trajectory_with(p, pi, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    p: &LoopFreeCmdp,
    pi: &Policy,
    rng: &mut R,
) -> Trajectory {
    let l = p.layout();
    let mut states = Vec::with_capacity(l.horizon() + 1);
    let mut actions = Vec::with_capacity(l.horizon());
    let mut x = l.initial_state();
    states.push(x);
    for k in 0..l.horizon() {
        let a = sample_index(pi.action_probs(x), rng);
        let next = l.layer(k + 1);
        let y = next[sample_index(p.kernel().row(l, x, a), rng)];
        actions.push(a);
        states.push(y);
        x = y;
    }
    Trajectory { states, actions }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    // rounding left u above the cumulative sum
    last_positive
}

/// An unlayered finite MDP: `transitions[x][a][x']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub start: usize,
}

/// Maps state `x` at step `k` to a layered copy `(x, k)` for `k = 1..L-1`,
/// with the start state alone in layer 0 and a single sink in layer `L`.
/// Copies that no positive-probability transition can reach are dropped.
pub fn cast_loop_free(mdp: &FiniteMdp, horizon: usize) -> Result<LoopFreeCmdp> {
    if horizon < 1 {
        return Err(Error::InvalidModel("horizon must be at least 1".into()));
    }
    let n = mdp.n_states;
    if mdp.start >= n || mdp.transitions.len() != n {
        return Err(Error::InvalidModel("transition table does not match state count".into()));
    }
    for (x, row) in mdp.transitions.iter().enumerate() {
        if row.len() != mdp.n_actions {
            return Err(Error::InvalidModel(format!("state {x} has {} actions", row.len())));
        }
        for dist in row {
            if dist.len() != n {
                return Err(Error::InvalidModel(format!("state {x} has a short transition row")));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > TOL || dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidModel(format!(
                    "transition row of state {x} is not a distribution"
                )));
            }
        }
    }

    // original ids present at each layer
    let mut present: Vec<Vec<usize>> = vec![vec![mdp.start]];
    for _ in 1..horizon {
        let prev = present.last().expect("nonempty");
        let mut reach = vec![false; n];
        for &x in prev {
            for dist in &mdp.transitions[x] {
                for (y, &p) in dist.iter().enumerate() {
                    if p > 0.0 {
                        reach[y] = true;
                    }
                }
            }
        }
        present.push((0..n).filter(|&y| reach[y]).collect());
    }

    let mut layers: Vec<Vec<String>> = present
        .iter()
        .enumerate()
        .map(|(k, xs)| xs.iter().map(|x| format!("s{x}@{k}")).collect())
        .collect();
    layers.push(vec!["sink".to_string()]);
    let actions = (0..mdp.n_actions).map(|a| format!("a{a}")).collect();
    let layout = Layout::new(layers, actions)?;

    let mut probs = vec![0.0; layout.num_triples()];
    for k in 0..horizon {
        for (j, &x) in present[k].iter().enumerate() {
            let from = layout.layer(k)[j];
            for a in 0..mdp.n_actions {
                if k + 1 == horizon {
                    probs[layout.triple(from, a, layout.terminal_state())] = 1.0;
                    continue;
                }
                for (jj, &y) in present[k + 1].iter().enumerate() {
                    let to = layout.layer(k + 1)[jj];
                    probs[layout.triple(from, a, to)] = mdp.transitions[x][a][y];
                }
            }
        }
    }
    LoopFreeCmdp::new(layout, probs)
}

/// Original state id of each layered state produced by [`cast_loop_free`];
/// `None` for the sink.
pub fn cast_origin(layout: &Layout, x: usize) -> Option<usize> {
    let name = layout.state_name(x);
    let (id, _) = name.strip_prefix('s')?.split_once('@')?;
    id.parse().ok()
}
