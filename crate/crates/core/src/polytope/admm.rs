//! Euclidean projection by operator splitting.
//!
//! Solves `min ½‖q − q0‖²` over `lower ≤ A z ≤ upper` with the ADMM splitting
//! `A z = w`, `w ∈ [lower, upper]` (over-relaxed, adaptive penalty), then
//! polishes by solving the equality-constrained KKT system on the active set
//! the iterates identify. A result is only returned once its KKT residual
//! (primal infeasibility, stationarity, complementarity) is within tolerance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use super::{OccupancyPolytope, PolytopeMode, RowKind};
use crate::cmdp::OccupancyMeasure;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ProjectionSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub polish: bool,
    pub check_every: usize,
}

impl ProjectionSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 100_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            polish: true,
            check_every: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub q: OccupancyMeasure,
    /// KKT residual of the returned point.
    pub residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// Row-compressed copy of the constraint matrix for the iteration kernels.
#[derive(Debug, Clone, Default)]
struct SparseRows {
    start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    fn from_dense(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut out = SparseRows {
            start: Vec::with_capacity(m + 1),
            ..Self::default()
        };
        out.start.push(0);
        for i in 0..m {
            for j in 0..n {
                let v = a[(i, j)];
                if v != 0.0 {
                    out.col.push(j);
                    out.val.push(v);
                }
            }
            out.start.push(out.col.len());
        }
        out
    }

    /// `out = A x`
    fn mul(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.start.len() - 1 {
            let mut acc = 0.0;
            for k in self.start[i]..self.start[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            out[i] = acc;
        }
    }

    /// `out = Aᵀ y`
    fn mul_tr(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        for i in 0..self.start.len() - 1 {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for k in self.start[i]..self.start[i + 1] {
                out[self.col[k]] += self.val[k] * yi;
            }
        }
    }
}

/// Iterates and factorization carried between projections onto the same
/// (or a same-shaped) polytope.
#[derive(Debug, Clone, Default)]
pub struct ProjectionWorkspace {
    poly_id: u64,
    rho: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    rho_rows: Vec<f64>,
    sparse: SparseRows,
    polish: Option<PolishCache>,
    x: Option<DVector<f64>>,
    z: Option<DVector<f64>>,
    y: Option<DVector<f64>>,
}

impl ProjectionWorkspace {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

const EQ_RHO_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const TIGHT: f64 = 1e-9;
/// Weight pulling auxiliary variables (which carry no curvature) toward the
/// current iterate during polishing.
const AUX_ANCHOR: f64 = 1e-8;
const WARM_ROUNDS: usize = 4;

fn is_eq(lo: f64, hi: f64) -> bool {
    lo == hi
}

fn factor(poly: &OccupancyPolytope, nt: usize, sigma: f64, rho: f64, ws: &mut ProjectionWorkspace) {
    let a = &poly.a;
    let (m, n) = a.shape();
    ws.rho_rows = (0..m)
        .map(|i| {
            if is_eq(poly.lower[i], poly.upper[i]) {
                rho * EQ_RHO_SCALE
            } else {
                rho
            }
        })
        .collect();
    let mut ra = a.clone();
    for i in 0..m {
        let r = ws.rho_rows[i];
        for j in 0..n {
            ra[(i, j)] *= r;
        }
    }
    let mut k = a.tr_mul(&ra);
    for j in 0..n {
        k[(j, j)] += sigma + if j < nt { 1.0 } else { 0.0 };
    }
    ws.chol = Some(Cholesky::new(k).expect("P + σI + AᵀRA is positive definite"));
    if ws.poly_id != poly.id() || ws.sparse.start.len() != m + 1 {
        ws.sparse = SparseRows::from_dense(a);
    }
    ws.rho = rho;
    ws.poly_id = poly.id();
}

struct Kkt {
    prim: f64,
    dual: f64,
    comp: f64,
}

impl Kkt {
    fn max(&self) -> f64 {
        self.prim.max(self.dual).max(self.comp)
    }
}

fn kkt(poly: &OccupancyPolytope, nt: usize, c: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>) -> Kkt {
    let ax = &poly.a * x;
    let mut prim: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..ax.len() {
        let (lo, hi) = (poly.lower[i], poly.upper[i]);
        prim = prim.max(lo - ax[i]).max(ax[i] - hi);
        if is_eq(lo, hi) {
            continue;
        }
        if y[i] > 0.0 {
            comp = comp.max(y[i].min(hi - ax[i]));
        } else if y[i] < 0.0 {
            comp = comp.max((-y[i]).min(ax[i] - lo));
        }
    }
    let mut grad = poly.a.tr_mul(y);
    for j in 0..x.len() {
        grad[j] += c[j] + if j < nt { x[j] } else { 0.0 };
    }
    Kkt {
        prim,
        dual: grad.amax(),
        comp,
    }
}

/// Factorized KKT matrix of one active set, reused while the active set of
/// successive projections stays the same.
#[derive(Debug, Clone)]
struct PolishCache {
    poly_id: u64,
    active: Vec<(usize, f64)>,
    k0: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

fn active_set(poly: &OccupancyPolytope, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, f64)> {
    let m = poly.a.nrows();
    let mut active = Vec::new();
    for i in 0..m {
        let (lo, hi) = (poly.lower[i], poly.upper[i]);
        if is_eq(lo, hi) || (lo.is_finite() && z[i] - lo < -y[i]) {
            active.push((i, lo));
        } else if hi.is_finite() && hi - z[i] < y[i] {
            active.push((i, hi));
        }
    }
    active
}

/// Rows whose bound holds with equality at `z`, multiplier sign aside.
fn tight_set(poly: &OccupancyPolytope, z: &DVector<f64>) -> Vec<(usize, f64)> {
    let mut active = Vec::new();
    for i in 0..poly.a.nrows() {
        let (lo, hi) = (poly.lower[i], poly.upper[i]);
        if lo.is_finite() && (z[i] - lo).abs() <= TIGHT {
            active.push((i, lo));
        } else if hi.is_finite() && (hi - z[i]).abs() <= TIGHT {
            active.push((i, hi));
        }
    }
    active
}

/// One primal-dual active-set revision: drops rows whose multiplier has the
/// wrong sign and adds rows the point violates. Returns false if nothing
/// changed.
fn revise_active(
    poly: &OccupancyPolytope,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
    active: &mut Vec<(usize, f64)>,
) -> bool {
    let before = active.len();
    active.retain(|&(i, b)| {
        let (lo, hi) = (poly.lower[i], poly.upper[i]);
        is_eq(lo, hi) || (b == hi && y[i] >= -tol) || (b == lo && y[i] <= tol)
    });
    let mut changed = active.len() != before;
    let ax = &poly.a * x;
    for i in 0..ax.len() {
        if active.iter().any(|&(j, _)| j == i) {
            continue;
        }
        if ax[i] > poly.upper[i] + tol {
            active.push((i, poly.upper[i]));
            changed = true;
        } else if ax[i] < poly.lower[i] - tol {
            active.push((i, poly.lower[i]));
            changed = true;
        }
    }
    active.sort_by_key(|&(i, _)| i);
    changed
}

fn polish_factor(poly: &OccupancyPolytope, nt: usize, active: Vec<(usize, f64)>) -> PolishCache {
    let n = poly.a.ncols();
    let na = active.len();
    let dim = n + na;
    let delta = 1e-7;
    let mut k0 = DMatrix::zeros(dim, dim);
    for j in 0..n {
        k0[(j, j)] = if j < nt { 1.0 } else { AUX_ANCHOR };
    }
    for (r, &(i, _)) in active.iter().enumerate() {
        for j in 0..n {
            let v = poly.a[(i, j)];
            k0[(n + r, j)] = v;
            k0[(j, n + r)] = v;
        }
    }
    let mut kreg = k0.clone();
    for r in 0..na {
        kreg[(n + r, n + r)] -= delta;
    }
    PolishCache {
        poly_id: poly.id(),
        active,
        k0,
        lu: kreg.lu(),
    }
}

/// Re-chooses the auxiliaries of every pair whose auxiliary rows are all
/// inactive, splitting the unused radius evenly above the tightest values.
fn relift_aux(poly: &OccupancyPolytope, active: &[(usize, f64)], x: &mut DVector<f64>) {
    if poly.mode != PolytopeMode::Confidence {
        return;
    }
    let layout = &poly.layout;
    let nt = layout.num_triples();
    let pair_of = |t: usize| {
        let (x, a, _) = layout.triple_parts(t);
        layout.pair(x, a)
    };
    let mut pinned = vec![false; layout.num_pairs()];
    for &(i, _) in active {
        match poly.kinds[i] {
            RowKind::AbsUpper { triple } | RowKind::AbsLower { triple } => pinned[pair_of(triple)] = true,
            RowKind::Radius { pair } => pinned[pair] = true,
            RowKind::Bound { var } if var >= nt => pinned[pair_of(var - nt)] = true,
            _ => {}
        }
    }
    for (xs, a) in layout.decision_pairs().collect::<Vec<_>>() {
        let pair = layout.pair(xs, a);
        if pinned[pair] {
            continue;
        }
        let range = layout.triples_of_pair(xs, a);
        let mass: f64 = range.clone().map(|t| x[t]).sum();
        let diff: Vec<f64> = range.clone().map(|t| (x[t] - poly.center[t] * mass).abs()).collect();
        let spare = poly.radius[pair] * mass - diff.iter().sum::<f64>();
        if spare < 0.0 {
            continue;
        }
        let share = spare / diff.len() as f64;
        for (t, d) in range.zip(diff) {
            x[nt + t] = (d + share).min(1.0);
        }
    }
}

/// Equality-constrained solve on the guessed active set.
fn polish(
    poly: &OccupancyPolytope,
    nt: usize,
    c: &DVector<f64>,
    anchor: &DVector<f64>,
    active: Vec<(usize, f64)>,
    cache: &mut Option<PolishCache>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let (m, n) = poly.a.shape();
    let hit = matches!(cache, Some(pc) if pc.poly_id == poly.id() && pc.active == active);
    if !hit {
        *cache = Some(polish_factor(poly, nt, active));
    }
    let pc = cache.as_ref().expect("filled above");
    let dim = n + pc.active.len();
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = if j < nt { -c[j] } else { AUX_ANCHOR * anchor[j] };
    }
    for (r, &(_, b)) in pc.active.iter().enumerate() {
        rhs[n + r] = b;
    }
    let mut sol = pc.lu.solve(&rhs)?;
    for _ in 0..8 {
        let res = &rhs - &pc.k0 * &sol;
        if res.amax() < 1e-14 {
            break;
        }
        sol += pc.lu.solve(&res)?;
    }
    let mut x = sol.rows(0, n).into_owned();
    relift_aux(poly, &pc.active, &mut x);
    let mut yf = DVector::zeros(m);
    for (r, &(i, _)) in pc.active.iter().enumerate() {
        yf[i] = sol[n + r];
    }
    Some((x, yf))
}

fn clamp_rows(poly: &OccupancyPolytope, ax: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        ax.len(),
        ax.iter().enumerate().map(|(i, v)| v.clamp(poly.lower[i], poly.upper[i])),
    )
}

pub(super) fn project(
    poly: &OccupancyPolytope,
    q0: &[f64],
    s: &ProjectionSettings,
    ws: &mut ProjectionWorkspace,
) -> Result<Projection> {
    let nt = poly.layout.num_triples();
    let (m, n) = poly.a.shape();

    if ws.x.as_ref().map(|x| x.len()) != Some(n) || ws.y.as_ref().map(|y| y.len()) != Some(m) {
        ws.x = Some(DVector::zeros(n));
        ws.z = Some(DVector::zeros(m));
        ws.y = Some(DVector::zeros(m));
        ws.chol = None;
    }
    if ws.chol.is_none() || ws.poly_id != poly.id() {
        let rho = if ws.rho > 0.0 { ws.rho } else { s.rho };
        factor(poly, nt, s.sigma, rho, ws);
    }

    let mut c = DVector::zeros(n);
    for j in 0..nt {
        c[j] = -q0[j];
    }
    let mut x = ws.x.take().expect("initialized");
    let mut z = ws.z.take().expect("initialized");
    let mut y = ws.y.take().expect("initialized");

    let finish = |ws: &mut ProjectionWorkspace,
                  x: DVector<f64>,
                  z: DVector<f64>,
                  y: DVector<f64>,
                  residual: f64,
                  iterations: usize,
                  polished: bool| {
        let q = x.as_slice()[..nt].to_vec();
        ws.x = Some(x);
        ws.z = Some(z);
        ws.y = Some(y);
        Projection {
            q: OccupancyMeasure::new(poly.layout.clone(), q).expect("length matches"),
            residual,
            iterations,
            polished,
        }
    };

    // warm start may already be optimal for this q0 (e.g. a zero step)
    let start = kkt(poly, nt, &c, &x, &y);
    if start.max() <= s.tol {
        return Ok(finish(ws, x, z, y, start.max(), 0, false));
    }
    if s.polish && ws.polish.is_some() {
        let mut active = tight_set(poly, &z);
        for _ in 0..WARM_ROUNDS {
            let Some((xp, yp)) = polish(poly, nt, &c, &x, active.clone(), &mut ws.polish) else {
                break;
            };
            let res = kkt(poly, nt, &c, &xp, &yp).max();
            if res <= s.tol {
                let zp = clamp_rows(poly, &(&poly.a * &xp));
                return Ok(finish(ws, xp, zp, yp, res, 0, true));
            }
            if !revise_active(poly, &xp, &yp, s.tol, &mut active) {
                break;
            }
        }
    }

    let mut rhs = DVector::zeros(n);
    let mut tmp_m = DVector::zeros(m);
    let mut x_tilde = DVector::zeros(n);
    let mut z_tilde = DVector::zeros(m);
    let mut y_prev = y.clone();
    let mut last_polish_at = 0usize;
    let mut checks = 0usize;
    let alpha = s.alpha;
    let mut best = start.max();

    for it in 1..=s.max_iter {
        // rhs = σx − c + Aᵀ(R z − y)
        for i in 0..m {
            tmp_m[i] = ws.rho_rows[i] * z[i] - y[i];
        }
        ws.sparse.mul_tr(&tmp_m, &mut rhs);
        rhs.axpy(s.sigma, &x, 1.0);
        rhs -= &c;
        x_tilde.copy_from(&rhs);
        ws.chol.as_ref().expect("factored").solve_mut(&mut x_tilde);
        ws.sparse.mul(&x_tilde, &mut z_tilde);

        let check = it % s.check_every == 0;
        if check {
            y_prev.copy_from(&y);
        }
        x *= 1.0 - alpha;
        x.axpy(alpha, &x_tilde, 1.0);
        for i in 0..m {
            let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let r = ws.rho_rows[i];
            let zn = (relaxed + y[i] / r).clamp(poly.lower[i], poly.upper[i]);
            y[i] += r * (relaxed - zn);
            z[i] = zn;
        }
        if !check {
            continue;
        }
        checks += 1;

        ws.sparse.mul(&x, &mut tmp_m);
        let mut r_prim: f64 = 0.0;
        let mut ax_norm: f64 = 0.0;
        for i in 0..m {
            r_prim = r_prim.max((tmp_m[i] - z[i]).abs());
            ax_norm = ax_norm.max(tmp_m[i].abs()).max(z[i].abs());
        }
        let mut aty = DVector::zeros(n);
        ws.sparse.mul_tr(&y, &mut aty);
        let aty_norm = aty.amax();
        let mut r_dual: f64 = 0.0;
        let mut px_norm: f64 = 0.0;
        for j in 0..n {
            let px = if j < nt { x[j] } else { 0.0 };
            px_norm = px_norm.max(px.abs());
            r_dual = r_dual.max((px + c[j] + aty[j]).abs());
        }

        // primal infeasibility certificate from the dual increment
        let dy = &y - &y_prev;
        let dy_norm = dy.amax();
        if dy_norm > 1e-8 {
            let mut atdy = DVector::zeros(n);
            ws.sparse.mul_tr(&dy, &mut atdy);
            let mut support = 0.0;
            let mut unbounded = false;
            for i in 0..m {
                if dy[i] > 0.0 {
                    if poly.upper[i].is_finite() {
                        support += poly.upper[i] * dy[i];
                    } else {
                        unbounded = true;
                    }
                } else if dy[i] < 0.0 {
                    if poly.lower[i].is_finite() {
                        support += poly.lower[i] * dy[i];
                    } else {
                        unbounded = true;
                    }
                }
            }
            let eps_inf = 1e-6 * dy_norm;
            if !unbounded && atdy.amax() <= eps_inf && support < -eps_inf {
                return Err(Error::Infeasible { residual: r_prim });
            }
        }

        let converged = r_prim <= 0.5 * s.tol && r_dual <= 0.5 * s.tol;
        let near = r_prim <= 1e-4 && r_dual <= 1e-4;
        if s.polish && (converged || (near && it - last_polish_at >= 25)) {
            last_polish_at = it;
            if let Some((xp, yp)) = polish(poly, nt, &c, &x, active_set(poly, &z, &y), &mut ws.polish) {
                let res = kkt(poly, nt, &c, &xp, &yp).max();
                if res <= s.tol {
                    let zp = clamp_rows(poly, &(&poly.a * &xp));
                    return Ok(finish(ws, xp, zp, yp, res, it, true));
                }
            }
        }
        if converged {
            let res = kkt(poly, nt, &c, &x, &y).max();
            best = best.min(res);
            if res <= s.tol {
                return Ok(finish(ws, x, z, y, res, it, false));
            }
        }

        if checks.is_multiple_of(10) {
            let prim_scaled = r_prim / ax_norm.max(1e-10);
            let dual_scaled = r_dual / px_norm.max(aty_norm).max(c.amax()).max(1e-10);
            if prim_scaled > 0.0 && dual_scaled > 0.0 {
                let rho_new = (ws.rho * (prim_scaled / dual_scaled).sqrt()).clamp(RHO_MIN, RHO_MAX);
                if rho_new > 5.0 * ws.rho || rho_new < 0.2 * ws.rho {
                    factor(poly, nt, s.sigma, rho_new, ws);
                }
            }
        }
    }

    let res = kkt(poly, nt, &c, &x, &y).max().min(best);
    ws.x = Some(x);
    ws.z = Some(z);
    ws.y = Some(y);
    Err(Error::NotConverged {
        iterations: s.max_iter,
        residual: res,
    })
}
