//! Projected online gradient ascent on the multiplier box `[0, T^{1/4}]^m`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct DualOptions {
    /// Replaces the learning rate outright.
    pub learning_rate: Option<f64>,
    /// Replaces the instance constant `K = 100 m |X||A|` in the default rate.
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    lambda: Vec<f64>,
    eta: f64,
    cap: f64,
    horizon_t: usize,
    delta: f64,
}

/// `η = 1 / (K √(T ln(T²/δ)))` with `K = 100 m |X||A|` unless overridden.
pub fn default_learning_rate(m: usize, horizon_t: usize, delta: f64, num_states: usize, num_actions: usize) -> f64 {
    let k = 100.0 * (m * num_states * num_actions) as f64;
    rate_with_k(k, horizon_t, delta)
}

fn rate_with_k(k: f64, horizon_t: usize, delta: f64) -> f64 {
    let t = horizon_t as f64;
    1.0 / (k * (t * (t * t / delta).ln()).sqrt())
}

impl DualState {
    pub fn init(
        m: usize,
        horizon_t: usize,
        delta: f64,
        num_states: usize,
        num_actions: usize,
        options: &DualOptions,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("need at least one constraint".into()));
        }
        if horizon_t < 2 {
            return Err(Error::Config(format!("episode budget must be at least 2, got {horizon_t}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0,1), got {delta}")));
        }
        let eta = match (options.learning_rate, options.k) {
            (Some(eta), _) => eta,
            (None, Some(k)) => rate_with_k(k, horizon_t, delta),
            (None, None) => default_learning_rate(m, horizon_t, delta, num_states, num_actions),
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("dual learning rate must be positive, got {eta}")));
        }
        Ok(Self {
            lambda: vec![0.0; m],
            eta,
            cap: (horizon_t as f64).powf(0.25),
            horizon_t,
            delta,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn l1(&self) -> f64 {
        self.lambda.iter().sum()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Upper end `T^{1/4}` of every coordinate.
    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn horizon_t(&self) -> usize {
        self.horizon_t
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `λ ← clamp(λ + η v, 0, T^{1/4})` with `v = Gᵀq̂` the violation vector.
    pub fn update(&mut self, violation: &[f64]) -> Result<()> {
        if violation.len() != self.lambda.len() {
            return Err(Error::DimensionMismatch {
                what: "violation vector",
                expected: self.lambda.len(),
                got: violation.len(),
            });
        }
        for (l, v) in self.lambda.iter_mut().zip(violation) {
            *l = (*l + self.eta * v).clamp(0.0, self.cap);
        }
        Ok(())
    }
}

/// `Σ_{t=t1}^{t2} (λ − λ_t)ᵀ v_t`, 1-based inclusive.
pub fn dual_regret(lambdas: &[Vec<f64>], violations: &[Vec<f64>], comparator: &[f64], t1: usize, t2: usize) -> Result<f64> {
    if t1 < 1 || t1 > t2 || t2 > lambdas.len() || t2 > violations.len() {
        return Err(Error::Config(format!(
            "window [{t1}, {t2}] outside a trace of length {}",
            lambdas.len().min(violations.len())
        )));
    }
    Ok((t1..=t2)
        .map(|t| {
            comparator
                .iter()
                .zip(&lambdas[t - 1])
                .zip(&violations[t - 1])
                .map(|((c, l), v)| (c - l) * v)
                .sum::<f64>()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rate_matches_closed_form() {
        let eta = default_learning_rate(1, 100, 0.1, 4, 2);
        let expected = 1.0 / (800.0 * (100.0 * 1e5f64.ln()).sqrt());
        assert!((eta - expected).abs() < 1e-18);
        assert!((eta - 3.684e-5).abs() < 1e-8);
    }

    #[test]
    fn rate_decreases_in_every_size() {
        let base = default_learning_rate(1, 100, 0.1, 4, 2);
        assert!(default_learning_rate(2, 100, 0.1, 4, 2) < base);
        assert!(default_learning_rate(1, 200, 0.1, 4, 2) < base);
        assert!(default_learning_rate(1, 100, 0.1, 5, 2) < base);
        assert!(default_learning_rate(1, 100, 0.1, 4, 3) < base);
    }

    #[test]
    fn starts_at_zero_and_clamps() {
        let opts = DualOptions {
            learning_rate: Some(0.1),
            k: None,
        };
        let mut d = DualState::init(1, 16, 0.1, 4, 2, &opts).unwrap();
        assert_eq!(d.lambda(), &[0.0]);
        assert_eq!(d.cap(), 2.0);
        d.update(&[0.3]).unwrap();
        assert!((d.lambda()[0] - 0.03).abs() < 1e-15);

        let mut low = DualState::init(1, 16, 0.1, 4, 2, &opts).unwrap();
        low.update(&[-1.0]).unwrap();
        assert_eq!(low.lambda(), &[0.0]);

        let mut high = DualState::init(1, 16, 0.1, 4, 2, &DualOptions { learning_rate: Some(10.0), k: None }).unwrap();
        high.update(&[1.0]).unwrap();
        assert_eq!(high.lambda(), &[2.0]);
        high.update(&[0.5]).unwrap();
        assert_eq!(high.lambda(), &[2.0]);
    }

    #[test]
    fn k_override() {
        let d = DualState::init(1, 100, 0.1, 4, 2, &DualOptions { learning_rate: None, k: Some(800.0) }).unwrap();
        assert!((d.eta() - default_learning_rate(1, 100, 0.1, 4, 2)).abs() < 1e-18);
    }

    #[test]
    fn init_validation() {
        let o = DualOptions::default();
        assert!(DualState::init(0, 100, 0.1, 4, 2, &o).is_err());
        assert!(DualState::init(1, 1, 0.1, 4, 2, &o).is_err());
        assert!(DualState::init(1, 100, 1.5, 4, 2, &o).is_err());
    }

    #[test]
    fn dual_regret_examples() {
        let lam = vec![vec![0.2]; 3];
        let v = vec![vec![0.5]; 3];
        assert_eq!(dual_regret(&lam, &v, &[0.2], 1, 3).unwrap(), 0.0);
        assert!((dual_regret(&lam, &v, &[0.0], 1, 1).unwrap() + 0.1).abs() < 1e-15);
        let zero = vec![vec![0.0]; 3];
        assert_eq!(dual_regret(&lam, &zero, &[1.7], 1, 3).unwrap(), 0.0);
        assert!(dual_regret(&lam, &v, &[0.0], 2, 4).is_err());
    }
}
