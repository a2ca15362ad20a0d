//! Occupancy polytopes `Δ(M)` (exact kernel) and `Δ(P_i)` (L1 confidence set
//! around an empirical kernel), with Euclidean projection and LP optimization.
//!
//! The decision vector is `q` over triples, followed in confidence mode by one
//! auxiliary `s(x,a,x')` per triple bounding `|q(x,a,x') − P̄(x'|x,a) q(x,a)|`.
//! Every constraint is a row `lower ≤ aᵀz ≤ upper`; bounds on `z` are rows too,
//! which is the form the splitting solver consumes.

mod admm;
pub mod simplex;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::cmdp::{Layout, LoopFreeCmdp, OccupancyMeasure};
use crate::error::{Error, Result};

pub use admm::{Projection, ProjectionSettings, ProjectionWorkspace};
pub use simplex::{LinearProgram, LpOutcome, LpRow, LpStatus};

/// Largest meaningful L1 radius between two distributions.
pub const MAX_RADIUS: f64 = 2.0;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolytopeMode {
    Exact,
    Confidence,
}

/// Data a polytope is built from.
#[derive(Debug, Clone, Copy)]
pub enum PolytopeSource<'a> {
    /// Triple-indexed `P(x'|x,a)`.
    Kernel(&'a [f64]),
    /// Triple-indexed center `P̄(x'|x,a)` and pair-indexed radius `ε(x,a)`.
    Confidence { center: &'a [f64], radius: &'a [f64] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Normalization { layer: usize },
    Flow { state: usize },
    Bound { var: usize },
    Kernel { triple: usize },
    AbsUpper { triple: usize },
    AbsLower { triple: usize },
    Radius { pair: usize },
}

/// `coeffs · q ≤ rhs` over the triple space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInequality {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub optimum: f64,
    pub argmax: Option<OccupancyMeasure>,
    /// Full solution vector (triples, then auxiliaries).
    pub point: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OccupancyPolytope {
    id: u64,
    layout: Arc<Layout>,
    mode: PolytopeMode,
    n_vars: usize,
    a: DMatrix<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    kinds: Vec<RowKind>,
    center: Vec<f64>,
    radius: Vec<f64>,
}

/// Builds `Δ(M)` from a kernel or `Δ(P_i)` from a confidence set.
pub fn build_polytope(layout: Arc<Layout>, source: PolytopeSource<'_>) -> Result<OccupancyPolytope> {
    let nt = layout.num_triples();
    let check = |what, expected, got| {
        if expected != got {
            Err(Error::DimensionMismatch { what, expected, got })
        } else {
            Ok(())
        }
    };
    match source {
        PolytopeSource::Kernel(p) => {
            check("kernel triples", nt, p.len())?;
            Ok(OccupancyPolytope::assemble(layout, PolytopeMode::Exact, p.to_vec(), Vec::new()))
        }
        PolytopeSource::Confidence { center, radius } => {
            check("confidence center triples", nt, center.len())?;
            check("confidence radius pairs", layout.num_pairs(), radius.len())?;
            if let Some(r) = radius.iter().find(|r| !(**r >= 0.0)) {
                return Err(Error::InvalidModel(format!("negative confidence radius {r}")));
            }
            let radius = radius.iter().map(|r| r.min(MAX_RADIUS)).collect();
            Ok(OccupancyPolytope::assemble(
                layout,
                PolytopeMode::Confidence,
                center.to_vec(),
                radius,
            ))
        }
    }
}

impl OccupancyPolytope {
    pub fn exact(cmdp: &LoopFreeCmdp) -> Self {
        Self::assemble(
            cmdp.layout().clone(),
            PolytopeMode::Exact,
            cmdp.kernel().probs().to_vec(),
            Vec::new(),
        )
    }

    fn assemble(layout: Arc<Layout>, mode: PolytopeMode, center: Vec<f64>, radius: Vec<f64>) -> Self {
        let nt = layout.num_triples();
        let n_vars = match mode {
            PolytopeMode::Exact => nt,
            PolytopeMode::Confidence => 2 * nt,
        };
        let mut rows: Vec<(Vec<(usize, f64)>, f64, f64, RowKind)> = Vec::new();

        for k in 0..layout.horizon() {
            let coeffs = layout.layer_triples(k).map(|t| (t, 1.0)).collect();
            rows.push((coeffs, 1.0, 1.0, RowKind::Normalization { layer: k }));
        }
        for k in 1..layout.horizon() {
            for &x in layout.layer(k) {
                let mut coeffs: Vec<(usize, f64)> = Vec::new();
                for a in 0..layout.num_actions() {
                    coeffs.extend(layout.triples_of_pair(x, a).map(|t| (t, 1.0)));
                }
                for &y in layout.layer(k - 1) {
                    for a in 0..layout.num_actions() {
                        coeffs.push((layout.triple(y, a, x), -1.0));
                    }
                }
                rows.push((coeffs, 0.0, 0.0, RowKind::Flow { state: x }));
            }
        }
        for var in 0..n_vars {
            rows.push((vec![(var, 1.0)], 0.0, 1.0, RowKind::Bound { var }));
        }
        for (x, a) in layout.decision_pairs().collect::<Vec<_>>() {
            let range = layout.triples_of_pair(x, a);
            for t in range.clone() {
                // q_t − P_t Σ_{t'} q_{t'}
                let mut diff: Vec<(usize, f64)> =
                    range.clone().map(|tt| (tt, -center[t])).collect();
                diff[t - range.start].1 += 1.0;
                match mode {
                    PolytopeMode::Exact => {
                        rows.push((diff, 0.0, 0.0, RowKind::Kernel { triple: t }));
                    }
                    PolytopeMode::Confidence => {
                        let s = nt + t;
                        let mut up = diff.clone();
                        up.push((s, -1.0));
                        rows.push((up, f64::NEG_INFINITY, 0.0, RowKind::AbsUpper { triple: t }));
                        let mut down: Vec<(usize, f64)> =
                            diff.into_iter().map(|(j, v)| (j, -v)).collect();
                        down.push((s, -1.0));
                        rows.push((down, f64::NEG_INFINITY, 0.0, RowKind::AbsLower { triple: t }));
                    }
                }
            }
            if mode == PolytopeMode::Confidence {
                let pair = layout.pair(x, a);
                let eps = radius[pair];
                let mut coeffs: Vec<(usize, f64)> = range.clone().map(|t| (nt + t, 1.0)).collect();
                coeffs.extend(range.map(|t| (t, -eps)));
                rows.push((coeffs, f64::NEG_INFINITY, 0.0, RowKind::Radius { pair }));
            }
        }

        let mut a = DMatrix::zeros(rows.len(), n_vars);
        let mut lower = Vec::with_capacity(rows.len());
        let mut upper = Vec::with_capacity(rows.len());
        let mut kinds = Vec::with_capacity(rows.len());
        for (i, (coeffs, lo, hi, kind)) in rows.into_iter().enumerate() {
            for (j, v) in coeffs {
                a[(i, j)] += v;
            }
            lower.push(lo);
            upper.push(hi);
            kinds.push(kind);
        }
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            layout,
            mode,
            n_vars,
            a,
            lower,
            upper,
            kinds,
            center,
            radius,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn mode(&self) -> PolytopeMode {
        self.mode
    }

    /// Length of the full decision vector (triples plus auxiliaries).
    pub fn num_vars(&self) -> usize {
        self.n_vars
    }

    pub fn num_rows(&self) -> usize {
        self.kinds.len()
    }

    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn row_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn row_kinds(&self) -> &[RowKind] {
        &self.kinds
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Confidence radii after clamping; empty in exact mode.
    pub fn radius(&self) -> &[f64] {
        &self.radius
    }

    /// Kernel (exact) or empirical center (confidence), triple-indexed.
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Completes a triple vector with the tightest auxiliaries
    /// `s = |q − P̄ q(x,a)|` in confidence mode.
    pub fn lift(&self, q: &[f64]) -> Vec<f64> {
        let mut z = q.to_vec();
        if self.mode == PolytopeMode::Confidence {
            let marg = self.layout.pair_marginal(q);
            for t in 0..q.len() {
                let (x, a, _) = self.layout.triple_parts(t);
                z.push((q[t] - self.center[t] * marg[self.layout.pair(x, a)]).abs());
            }
        }
        z
    }

    /// Largest violation of any row at the full vector `z`.
    pub fn row_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.num_rows() {
            let v: f64 = (0..self.n_vars).map(|j| self.a[(i, j)] * z[j]).sum();
            worst = worst.max(self.lower[i] - v).max(v - self.upper[i]);
        }
        worst
    }

    /// Largest constraint violation of the triple vector `q`, using the best
    /// auxiliaries in confidence mode.
    pub fn violation(&self, q: &[f64]) -> f64 {
        self.row_violation(&self.lift(q))
    }

    pub fn contains(&self, q: &[f64], tol: f64) -> bool {
        self.violation(q) <= tol
    }

    /// Euclidean projection of `q0` (triple space) onto the polytope.
    pub fn project(&self, q0: &[f64], tol: f64) -> Result<Projection> {
        let mut ws = ProjectionWorkspace::default();
        self.project_warm(q0, &ProjectionSettings::with_tol(tol), &mut ws)
    }

    /// Projection reusing factorizations and iterates from `ws`.
    pub fn project_warm(
        &self,
        q0: &[f64],
        settings: &ProjectionSettings,
        ws: &mut ProjectionWorkspace,
    ) -> Result<Projection> {
        if q0.len() != self.layout.num_triples() {
            return Err(Error::DimensionMismatch {
                what: "projection point triples",
                expected: self.layout.num_triples(),
                got: q0.len(),
            });
        }
        admm::project(self, q0, settings, ws)
    }

    /// This polytope as a [`LinearProgram`] with zero objective; bound rows
    /// become variable bounds.
    pub fn linear_program(&self) -> LinearProgram {
        let mut lp = LinearProgram::new(self.n_vars);
        for i in 0..self.num_rows() {
            if let RowKind::Bound { var } = self.kinds[i] {
                lp.var_lower[var] = self.lower[i];
                lp.var_upper[var] = self.upper[i];
                continue;
            }
            let coeffs = (0..self.n_vars)
                .filter(|&j| self.a[(i, j)] != 0.0)
                .map(|j| (j, self.a[(i, j)]))
                .collect();
            lp.rows.push(LpRow {
                coeffs,
                lower: self.lower[i],
                upper: self.upper[i],
            });
        }
        lp
    }

    /// `max objectiveᵀq` over the polytope intersected with `extra`.
    pub fn lp_maximize(&self, objective: &[f64], extra: &[LinearInequality]) -> Result<LpSolution> {
        let nt = self.layout.num_triples();
        if objective.len() != nt {
            return Err(Error::DimensionMismatch {
                what: "objective triples",
                expected: nt,
                got: objective.len(),
            });
        }
        let mut lp = self.linear_program();
        lp.objective[..nt].copy_from_slice(objective);
        for ineq in extra {
            if ineq.coeffs.len() != nt {
                return Err(Error::DimensionMismatch {
                    what: "inequality triples",
                    expected: nt,
                    got: ineq.coeffs.len(),
                });
            }
            lp.rows.push(LpRow {
                coeffs: sparse(&ineq.coeffs),
                lower: f64::NEG_INFINITY,
                upper: ineq.rhs,
            });
        }
        Ok(self.finish_lp(lp.solve()))
    }

    /// Epigraph LP `max s` subject to `rowᵀq + s ≤ 0` for every row, i.e. the
    /// largest uniform slack by which some point satisfies all rows. The slack
    /// is the optimum; the point is the argmax.
    pub fn lp_max_margin(&self, rows: &[Vec<f64>]) -> Result<LpSolution> {
        let nt = self.layout.num_triples();
        let mut lp = self.linear_program();
        let s = lp.add_free_var(1.0);
        for row in rows {
            if row.len() != nt {
                return Err(Error::DimensionMismatch {
                    what: "margin row triples",
                    expected: nt,
                    got: row.len(),
                });
            }
            let mut coeffs = sparse(row);
            coeffs.push((s, 1.0));
            lp.rows.push(LpRow {
                coeffs,
                lower: f64::NEG_INFINITY,
                upper: 0.0,
            });
        }
        Ok(self.finish_lp(lp.solve()))
    }

    pub(crate) fn finish_lp(&self, out: LpOutcome) -> LpSolution {
        let nt = self.layout.num_triples();
        let argmax = (out.status == LpStatus::Optimal).then(|| {
            let q: Vec<f64> = out.x[..nt].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            OccupancyMeasure::new(self.layout.clone(), q).expect("length checked")
        });
        LpSolution {
            status: out.status,
            optimum: out.objective,
            argmax,
            point: out.x,
        }
    }
}

pub(crate) fn sparse(dense: &[f64]) -> Vec<(usize, f64)> {
    dense
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, &v)| (j, v))
        .collect()
}

/// Free-function form of [`OccupancyPolytope::lp_maximize`].
pub fn lp_maximize(
    objective: &[f64],
    poly: &OccupancyPolytope,
    extra: Option<&[LinearInequality]>,
) -> Result<LpSolution> {
    poly.lp_maximize(objective, extra.unwrap_or(&[]))
}

/// Free-function form of [`OccupancyPolytope::project`].
pub fn project(q0: &[f64], poly: &OccupancyPolytope, tol: f64) -> Result<Projection> {
    poly.project(q0, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{induce_occupancy, Policy};
    use crate::fixtures;

    fn t1_exact() -> (LoopFreeCmdp, OccupancyPolytope) {
        let p = fixtures::t1_cmdp();
        let poly = OccupancyPolytope::exact(&p);
        (p, poly)
    }

    #[test]
    fn induced_occupancy_is_feasible() {
        let (p, poly) = t1_exact();
        let l = p.layout().clone();
        for w in [0.0, 0.3, 1.0] {
            let mut probs = vec![0.5; l.num_pairs()];
            probs[0] = w;
            probs[1] = 1.0 - w;
            let q = induce_occupancy(&p, &Policy::new(l.clone(), probs).unwrap());
            assert!(poly.contains(q.values(), 1e-12));
        }
    }

    #[test]
    fn max_radius_admits_every_flow_valid_point() {
        let p = fixtures::t1_cmdp();
        let l = p.layout().clone();
        let center = vec![0.0; l.num_triples()];
        let radius = vec![5.0; l.num_pairs()];
        let poly = build_polytope(l.clone(), PolytopeSource::Confidence { center: &center, radius: &radius }).unwrap();
        assert!(poly.radius().iter().all(|&r| r == MAX_RADIUS));
        // uniform triples are flow-valid but not consistent with P
        let uniform = vec![0.25; l.num_triples()];
        assert!(poly.contains(&uniform, 1e-12));
        assert!(!OccupancyPolytope::exact(&p).contains(&uniform, 1e-6));
    }

    #[test]
    fn shape_errors() {
        let l = fixtures::t1_cmdp().layout().clone();
        assert!(build_polytope(l.clone(), PolytopeSource::Kernel(&[1.0; 3])).is_err());
        let c = vec![0.0; 8];
        assert!(build_polytope(l.clone(), PolytopeSource::Confidence { center: &c, radius: &[1.0] }).is_err());
        assert!(build_polytope(l, PolytopeSource::Confidence { center: &c, radius: &[-1.0; 8] }).is_err());
    }

    #[test]
    fn projection_is_identity_on_feasible_points() {
        let (p, poly) = t1_exact();
        let q = induce_occupancy(&p, &Policy::uniform(p.layout().clone()));
        let proj = poly.project(q.values(), 1e-7).unwrap();
        for (a, b) in proj.q.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(proj.residual <= 1e-7);
    }

    #[test]
    fn projection_restores_normalization() {
        let (p, poly) = t1_exact();
        let q = induce_occupancy(&p, &Policy::uniform(p.layout().clone()));
        let mut q0 = q.values().to_vec();
        // push along the normal of the layer-0 normalization row
        for t in p.layout().layer_triples(0) {
            q0[t] += 0.1;
        }
        let proj = poly.project(&q0, 1e-7).unwrap();
        let sum: f64 = proj.q.values()[p.layout().layer_triples(0)].iter().sum();
        assert!((sum - 1.0).abs() < 1e-7);
        for (a, b) in proj.q.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lp_t1_constrained_and_unconstrained() {
        let (p, poly) = t1_exact();
        let l = p.layout();
        let r = l.broadcast(&fixtures::t1_reward_mean());
        let g = l.broadcast(&fixtures::t1_constraint_mean());
        let con = poly
            .lp_maximize(&r, &[LinearInequality { coeffs: g, rhs: 0.0 }])
            .unwrap();
        assert_eq!(con.status, LpStatus::Optimal);
        assert!((con.optimum - 0.5).abs() < 1e-9);
        let marg = con.argmax.unwrap().pair_marginal();
        assert!((marg[0] - 0.5).abs() < 1e-9 && (marg[1] - 0.5).abs() < 1e-9);

        let free = poly.lp_maximize(&r, &[]).unwrap();
        assert!((free.optimum - 1.0).abs() < 1e-9);
        assert!((free.argmax.unwrap().pair_marginal()[0] - 1.0).abs() < 1e-9);

        let zero = poly.lp_maximize(&[0.0; 8], &[]).unwrap();
        assert_eq!(zero.status, LpStatus::Optimal);
        assert!(zero.optimum.abs() < 1e-12);
    }

    #[test]
    fn lp_reports_infeasible_safe_set() {
        let (p, poly) = t1_exact();
        let g = vec![1.0; p.layout().num_triples()];
        let sol = poly
            .lp_maximize(&[0.0; 8], &[LinearInequality { coeffs: g, rhs: 0.0 }])
            .unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
        assert!(sol.argmax.is_none());
    }
}
