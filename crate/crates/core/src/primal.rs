//! Projected online gradient descent over the estimated occupancy polytope,
//! with the adaptive step size `η_t = 1 / (ℓ̄_t C √T)`.

use std::sync::Arc;

use crate::cmdp::{Layout, OccupancyMeasure, Trajectory};
use crate::confidence::ConfidenceState;
use crate::error::{Error, Result};
use crate::polytope::{OccupancyPolytope, ProjectionSettings, ProjectionWorkspace};

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct PrimalOptions {
    /// Step constant `C`; defaults to `5|X||A|/L`.
    pub step_constant: Option<f64>,
    pub projection: ProjectionSettings,
}


/// `C = 5|X||A| / L`.
pub fn default_step_constant(layout: &Layout) -> f64 {
    5.0 * layout.num_pairs() as f64 / layout.horizon() as f64
}

#[derive(Debug, Clone)]
pub struct PrimalState {
    layout: Arc<Layout>,
    q_hat: Vec<f64>,
    confidence: ConfidenceState,
    polytope: OccupancyPolytope,
    workspace: ProjectionWorkspace,
    loss_sup: f64,
    step_constant: f64,
    horizon_t: usize,
    settings: ProjectionSettings,
    last_residual: f64,
    last_step: f64,
}

/// Uniform triples per layer: `1 / (|X_k||A||X_{k+1}|)`.
pub fn uniform_occupancy(layout: &Layout) -> Vec<f64> {
    let mut q = vec![0.0; layout.num_triples()];
    for k in 0..layout.horizon() {
        let w = 1.0 / layout.layer_triples(k).len() as f64;
        for t in layout.layer_triples(k) {
            q[t] = w;
        }
    }
    q
}

impl PrimalState {
    pub fn init(layout: Arc<Layout>, delta: f64, horizon_t: usize, options: PrimalOptions) -> Result<Self> {
        let confidence = ConfidenceState::new(layout.clone(), delta, horizon_t)?;
        let polytope = confidence.polytope();
        let step_constant = options
            .step_constant
            .unwrap_or_else(|| default_step_constant(&layout));
        if !(step_constant > 0.0) {
            return Err(Error::Config(format!("step constant must be positive, got {step_constant}")));
        }
        Ok(Self {
            q_hat: uniform_occupancy(&layout),
            layout,
            confidence,
            polytope,
            workspace: ProjectionWorkspace::default(),
            loss_sup: 0.0,
            step_constant,
            horizon_t,
            settings: options.projection,
            last_residual: 0.0,
            last_step: 0.0,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn q_hat(&self) -> OccupancyMeasure {
        OccupancyMeasure::new(self.layout.clone(), self.q_hat.clone()).expect("length fixed")
    }

    pub fn q_hat_values(&self) -> &[f64] {
        &self.q_hat
    }

    pub fn confidence(&self) -> &ConfidenceState {
        &self.confidence
    }

    pub fn polytope(&self) -> &OccupancyPolytope {
        &self.polytope
    }

    pub fn epoch(&self) -> usize {
        self.confidence.epoch()
    }

    pub fn loss_sup(&self) -> f64 {
        self.loss_sup
    }

    pub fn step_constant(&self) -> f64 {
        self.step_constant
    }

    /// KKT residual of the last projection.
    pub fn last_residual(&self) -> f64 {
        self.last_residual
    }

    /// Step size used by the last update.
    pub fn last_step(&self) -> f64 {
        self.last_step
    }

    /// `η = 1 / (ℓ̄ C √T)` at the current running loss bound; `ℓ̄ = 0` counts as 1.
    pub fn step_size(&self) -> f64 {
        step_size(self.loss_sup, self.step_constant, self.horizon_t)
    }

    /// Records the episode's trajectory, then takes the projected gradient step
    /// with `loss` broadcast from pairs onto triples.
    pub fn update(&mut self, loss: &[f64], traj: &Trajectory) -> Result<()> {
        if loss.len() != self.layout.num_pairs() {
            return Err(Error::DimensionMismatch {
                what: "loss pairs",
                expected: self.layout.num_pairs(),
                got: loss.len(),
            });
        }
        if loss.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss has non-finite entries".into()));
        }
        if self.confidence.record_trajectory(traj)? {
            self.polytope = self.confidence.polytope();
            if !self.polytope.contains(&self.q_hat, self.settings.tol) {
                let re = self
                    .polytope
                    .project_warm(&self.q_hat, &self.settings, &mut self.workspace)?;
                self.q_hat = re.q.into_values();
            }
        }
        let norm = loss.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.loss_sup = self.loss_sup.max(norm);
        let eta = self.step_size();
        self.last_step = eta;

        let target: Vec<f64> = self
            .q_hat
            .iter()
            .enumerate()
            .map(|(t, &q)| {
                let (x, a, _) = self.layout.triple_parts(t);
                q - eta * loss[self.layout.pair(x, a)]
            })
            .collect();
        let proj = self
            .polytope
            .project_warm(&target, &self.settings, &mut self.workspace)?;
        self.last_residual = proj.residual;
        self.q_hat = proj.q.into_values();
        Ok(())
    }
}

pub fn step_size(loss_sup: f64, step_constant: f64, horizon_t: usize) -> f64 {
    let sup = if loss_sup > 0.0 { loss_sup } else { 1.0 };
    1.0 / (sup * step_constant * (horizon_t as f64).sqrt())
}

/// `Σ_{t=t1}^{t2} ℓ_tᵀ(q_t − q)` with 1-based inclusive episode indices.
/// Losses are pair-indexed; iterates and comparator are triple-indexed.
pub fn interval_regret(
    layout: &Layout,
    losses: &[Vec<f64>],
    iterates: &[Vec<f64>],
    comparator: &[f64],
    t1: usize,
    t2: usize,
) -> Result<f64> {
    if t1 < 1 || t1 > t2 || t2 > losses.len() || t2 > iterates.len() {
        return Err(Error::Config(format!(
            "window [{t1}, {t2}] outside a trace of length {}",
            losses.len().min(iterates.len())
        )));
    }
    let cmp = layout.pair_marginal(comparator);
    let mut total = 0.0;
    for t in t1..=t2 {
        let q = layout.pair_marginal(&iterates[t - 1]);
        total += losses[t - 1]
            .iter()
            .zip(q.iter().zip(&cmp))
            .map(|(l, (a, b))| l * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{induce_occupancy, Policy};
    use crate::fixtures;

    #[test]
    fn init_is_uniform_and_flow_valid() {
        let l = fixtures::t1_cmdp().layout().clone();
        let st = PrimalState::init(l.clone(), 0.1, 100, PrimalOptions::default()).unwrap();
        for t in l.layer_triples(0) {
            assert_eq!(st.q_hat_values()[t], 0.25);
        }
        st.q_hat().validate(1e-12).unwrap();
        let inflow_u: f64 = [l.triple(0, 0, 1), l.triple(0, 1, 1)]
            .iter()
            .map(|&t| st.q_hat_values()[t])
            .sum();
        assert_eq!(inflow_u, 0.5);
        assert_eq!(st.q_hat().state_marginal()[1], 0.5);
        assert_eq!(st.epoch(), 1);
    }

    #[test]
    fn step_size_values() {
        let l = fixtures::t1_cmdp().layout().clone();
        assert_eq!(default_step_constant(&l), 20.0);
        assert!((step_size(2.0, 20.0, 100) - 0.0025).abs() < 1e-15);
        assert!((step_size(4.0, 20.0, 100) - 0.00125).abs() < 1e-15);
        assert!((step_size(0.0, 20.0, 100) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_keeps_feasible_iterate() {
        let p = fixtures::t1_cmdp();
        let l = p.layout().clone();
        let mut st = PrimalState::init(l.clone(), 0.1, 100, PrimalOptions::default()).unwrap();
        let traj = crate::cmdp::sample_trajectory(&p, &Policy::uniform(l.clone()), 3);
        st.update(&[0.0; 8], &traj).unwrap();
        let before = st.q_hat_values().to_vec();
        // a second zero step inside the same epoch must not move
        let traj = crate::cmdp::sample_trajectory(&p, &Policy::uniform(l), 4);
        let epoch = st.epoch();
        st.update(&[0.0; 8], &traj).unwrap();
        if st.epoch() == epoch {
            for (a, b) in before.iter().zip(st.q_hat_values()) {
                assert!((a - b).abs() < 1e-7);
            }
        }
        st.q_hat().validate(1e-6).unwrap();
    }

    #[test]
    fn interval_regret_identities() {
        let l = fixtures::t1_cmdp().layout().clone();
        let q = uniform_occupancy(&l);
        let mut cmp = vec![0.0; 8];
        cmp[0] = 1.0; // (x0,a,u)
        cmp[l.triple(1, 0, 3)] = 1.0;
        let loss = vec![-1.0, 0.5, 0.2, 0.0, 0.3, 0.0, 0.0, 0.0];
        let losses = vec![loss.clone(); 5];
        let iterates = vec![q.clone(); 5];
        assert_eq!(interval_regret(&l, &losses, &iterates, &q, 1, 5).unwrap(), 0.0);
        let one = interval_regret(&l, &losses, &iterates, &cmp, 2, 2).unwrap();
        let qm = l.pair_marginal(&q);
        let cm = l.pair_marginal(&cmp);
        let direct: f64 = loss.iter().zip(qm.iter().zip(&cm)).map(|(l, (a, b))| l * (a - b)).sum();
        assert!((one - direct).abs() < 1e-15);
        let four = interval_regret(&l, &losses, &iterates, &cmp, 2, 5).unwrap();
        assert!((four - 4.0 * direct).abs() < 1e-12);
        assert!(interval_regret(&l, &losses, &iterates, &cmp, 0, 2).is_err());
        assert!(interval_regret(&l, &losses, &iterates, &cmp, 3, 6).is_err());
    }

    #[test]
    fn lossy_pair_loses_mass_under_known_kernel() {
        // ε = 0 around the true kernel: the confidence polytope is Δ(M)
        let p = fixtures::t1_cmdp();
        let l = p.layout().clone();
        let poly = crate::polytope::build_polytope(
            l.clone(),
            crate::polytope::PolytopeSource::Confidence {
                center: p.kernel().probs(),
                radius: &vec![0.0; l.num_pairs()],
            },
        )
        .unwrap();
        let q = induce_occupancy(&p, &Policy::uniform(l.clone()));
        let mut loss = [0.0; 8];
        loss[l.pair(0, 0)] = 1.0;
        let eta = step_size(1.0, 20.0, 100);
        let target: Vec<f64> = q
            .values()
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                let (x, a, _) = l.triple_parts(t);
                v - eta * loss[l.pair(x, a)]
            })
            .collect();
        let next = poly.project(&target, 1e-9).unwrap().q;
        let before = q.pair_marginal()[l.pair(0, 0)];
        let after = next.pair_marginal()[l.pair(0, 0)];
        // with α = q(x0,a) the projection minimizes
        // (α − ½ + η)² + (½ − α)² + 2(α/2 − ¼)² + 2((1 − α)/2 − ¼)², so α = ½ − η/3
        assert!(after < before);
        assert!((before - after - eta / 3.0).abs() < 1e-7, "{before} {after}");
    }
}
