//! Dense revised simplex with Bland's rule.
//!
//! Problems are stated as `max cᵀx` subject to two-sided row ranges and
//! variable bounds, converted internally to `min c'ᵀx', A'x' = b', x' ≥ 0`
//! and solved in two phases with an explicit basis inverse.

use nalgebra::DMatrix;

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
const REINVERT_EVERY: usize = 40;
const MAX_PIVOTS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

/// `max objectiveᵀx` s.t. `row.lower ≤ row·x ≤ row.upper`, `var_lower ≤ x ≤ var_upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<LpRow>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    /// The objective grew without bound; cannot happen on occupancy polytopes.
    UnboundedGuard,
}

#[derive(Debug, Clone)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    pub pivots: usize,
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        Self {
            objective: vec![0.0; n],
            rows: Vec::new(),
            var_lower: vec![0.0; n],
            var_upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Appends a free variable and returns its index.
    pub fn add_free_var(&mut self, objective: f64) -> usize {
        self.objective.push(objective);
        self.var_lower.push(f64::NEG_INFINITY);
        self.var_upper.push(f64::INFINITY);
        self.objective.len() - 1
    }

    pub fn solve(&self) -> LpOutcome {
        StandardForm::build(self).solve(self)
    }
}

// How an original variable is expressed in standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    Shifted { col: usize, offset: f64 },
    Mirrored { col: usize, offset: f64 },
    Split { pos: usize, neg: usize },
}

struct StandardForm {
    a: DMatrix<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    vars: Vec<VarMap>,
}

impl StandardForm {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let mut vars = Vec::with_capacity(n);
        let mut ncols = 0;
        let mut bound_rows: Vec<(usize, f64)> = Vec::new();
        for j in 0..n {
            let (lo, hi) = (lp.var_lower[j], lp.var_upper[j]);
            if lo.is_finite() {
                vars.push(VarMap::Shifted { col: ncols, offset: lo });
                if hi.is_finite() {
                    bound_rows.push((ncols, hi - lo));
                }
                ncols += 1;
            } else if hi.is_finite() {
                vars.push(VarMap::Mirrored { col: ncols, offset: hi });
                ncols += 1;
            } else {
                vars.push(VarMap::Split { pos: ncols, neg: ncols + 1 });
                ncols += 2;
            }
        }

        // (coefficients over structural columns, sense, rhs)
        // sense: 0 equality, 1 "≤" (slack +1), -1 "≥" (slack -1)
        let mut rows: Vec<(Vec<(usize, f64)>, i8, f64)> = Vec::new();
        let mut push_row = |coeffs: &[(usize, f64)], lower: f64, upper: f64| {
            let mut mapped = Vec::with_capacity(coeffs.len() + 1);
            let mut shift = 0.0;
            for &(j, v) in coeffs {
                match vars[j] {
                    VarMap::Shifted { col, offset } => {
                        mapped.push((col, v));
                        shift += v * offset;
                    }
                    VarMap::Mirrored { col, offset } => {
                        mapped.push((col, -v));
                        shift += v * offset;
                    }
                    VarMap::Split { pos, neg } => {
                        mapped.push((pos, v));
                        mapped.push((neg, -v));
                    }
                }
            }
            if lower == upper {
                rows.push((mapped, 0, lower - shift));
            } else {
                if upper.is_finite() {
                    rows.push((mapped.clone(), 1, upper - shift));
                }
                if lower.is_finite() {
                    rows.push((mapped, -1, lower - shift));
                }
            }
        };
        for row in &lp.rows {
            push_row(&row.coeffs, row.lower, row.upper);
        }
        for (col, width) in bound_rows {
            rows.push((vec![(col, 1.0)], 1, width));
        }

        let n_slack = rows.iter().filter(|r| r.1 != 0).count();
        let m = rows.len();
        let total = ncols + n_slack;
        let mut a = DMatrix::zeros(m, total);
        let mut b = vec![0.0; m];
        let mut slack = ncols;
        for (i, (coeffs, sense, rhs)) in rows.into_iter().enumerate() {
            for (col, v) in coeffs {
                a[(i, col)] += v;
            }
            if sense != 0 {
                a[(i, slack)] = f64::from(sense);
                slack += 1;
            }
            b[i] = rhs;
            if rhs < 0.0 {
                for j in 0..total {
                    a[(i, j)] = -a[(i, j)];
                }
                b[i] = -rhs;
            }
        }

        let mut c = vec![0.0; total];
        for (j, map) in vars.iter().enumerate() {
            let obj = lp.objective[j];
            // minimize -objective
            match *map {
                VarMap::Shifted { col, .. } => c[col] = -obj,
                VarMap::Mirrored { col, .. } => c[col] = obj,
                VarMap::Split { pos, neg } => {
                    c[pos] = -obj;
                    c[neg] = obj;
                }
            }
        }
        Self { a, b, c, vars }
    }

    fn recover(&self, lp: &LinearProgram, xs: &[f64]) -> Vec<f64> {
        self.vars
            .iter()
            .map(|map| match *map {
                VarMap::Shifted { col, offset } => offset + xs[col],
                VarMap::Mirrored { col, offset } => offset - xs[col],
                VarMap::Split { pos, neg } => xs[pos] - xs[neg],
            })
            .take(lp.num_vars())
            .collect()
    }

    fn solve(&self, lp: &LinearProgram) -> LpOutcome {
        let (m, n) = self.a.shape();
        // columns n..n+m are artificials
        let mut tab = Revised::new(&self.a, &self.b, n);
        let mut phase1 = vec![0.0; n + m];
        for v in &mut phase1[n..] {
            *v = 1.0;
        }
        let mut pivots = match tab.optimize(&phase1, n + m) {
            Ok(p) => p,
            Err(p) => {
                return LpOutcome {
                    status: LpStatus::UnboundedGuard,
                    objective: f64::NAN,
                    x: vec![f64::NAN; lp.num_vars()],
                    pivots: p,
                }
            }
        };
        let infeas: f64 = tab
            .basis
            .iter()
            .zip(&tab.x_basic)
            .filter(|(&j, _)| j >= n)
            .map(|(_, &v)| v)
            .sum();
        if infeas > FEAS_TOL {
            return LpOutcome {
                status: LpStatus::Infeasible,
                objective: f64::NAN,
                x: vec![f64::NAN; lp.num_vars()],
                pivots,
            };
        }
        pivots += tab.drive_out_artificials(n);

        let mut cost = self.c.clone();
        cost.extend(std::iter::repeat_n(0.0, m));
        let status = match tab.optimize(&cost, n) {
            Ok(p) => {
                pivots += p;
                LpStatus::Optimal
            }
            Err(p) => {
                pivots += p;
                LpStatus::UnboundedGuard
            }
        };
        let mut xs = vec![0.0; n];
        for (&j, &v) in tab.basis.iter().zip(&tab.x_basic) {
            if j < n {
                xs[j] = v.max(0.0);
            }
        }
        let x = self.recover(lp, &xs);
        let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        LpOutcome {
            status,
            objective,
            x,
            pivots,
        }
    }
}

struct Revised<'a> {
    a: &'a DMatrix<f64>,
    b: &'a [f64],
    n_struct: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: DMatrix<f64>,
    x_basic: Vec<f64>,
    since_reinvert: usize,
}

impl<'a> Revised<'a> {
    fn new(a: &'a DMatrix<f64>, b: &'a [f64], n_struct: usize) -> Self {
        let m = a.nrows();
        let basis: Vec<usize> = (n_struct..n_struct + m).collect();
        let mut in_basis = vec![false; n_struct + m];
        for &j in &basis {
            in_basis[j] = true;
        }
        Self {
            a,
            b,
            n_struct,
            basis,
            in_basis,
            binv: DMatrix::identity(m, m),
            x_basic: b.to_vec(),
            since_reinvert: 0,
        }
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        if j < self.n_struct {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.a[(i, j)];
            }
        } else {
            out.fill(0.0);
            out[j - self.n_struct] = 1.0;
        }
    }

    // B⁻¹ · column j
    fn ftran(&self, j: usize, out: &mut [f64]) {
        let m = self.binv.nrows();
        let mut col = vec![0.0; m];
        self.column(j, &mut col);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..m).map(|k| self.binv[(i, k)] * col[k]).sum();
        }
    }

    fn reinvert(&mut self) {
        let m = self.binv.nrows();
        let mut bmat = DMatrix::zeros(m, m);
        let mut col = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for i in 0..m {
                bmat[(i, k)] = col[i];
            }
        }
        if let Some(inv) = bmat.try_inverse() {
            self.binv = inv;
            for i in 0..m {
                self.x_basic[i] = (0..m).map(|k| self.binv[(i, k)] * self.b[k]).sum();
            }
        }
        self.since_reinvert = 0;
    }

    fn pivot(&mut self, row: usize, entering: usize, dir: &[f64]) {
        let m = self.binv.nrows();
        let step = self.x_basic[row] / dir[row];
        for i in 0..m {
            if i != row {
                self.x_basic[i] -= step * dir[i];
            }
        }
        self.x_basic[row] = step;
        let p = dir[row];
        for k in 0..m {
            self.binv[(row, k)] /= p;
        }
        for i in 0..m {
            if i == row || dir[i] == 0.0 {
                continue;
            }
            let f = dir[i];
            for k in 0..m {
                let v = self.binv[(row, k)];
                self.binv[(i, k)] -= f * v;
            }
        }
        self.in_basis[self.basis[row]] = false;
        self.in_basis[entering] = true;
        self.basis[row] = entering;
        self.since_reinvert += 1;
        if self.since_reinvert >= REINVERT_EVERY {
            self.reinvert();
        }
    }

    /// Minimizes `costᵀx` over columns `< allowed` entering. `Err` on unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<usize, usize> {
        let m = self.binv.nrows();
        let mut dir = vec![0.0; m];
        let mut col = vec![0.0; m];
        let mut pivots = 0;
        while pivots < MAX_PIVOTS {
            // simplex multipliers yᵀ = c_Bᵀ B⁻¹
            let y: Vec<f64> = (0..m)
                .map(|k| (0..m).map(|i| cost[self.basis[i]] * self.binv[(i, k)]).sum())
                .collect();
            let mut entering = None;
            for j in 0..allowed {
                if self.in_basis[j] {
                    continue;
                }
                self.column(j, &mut col);
                let reduced = cost[j] - y.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>();
                if reduced < -COST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else {
                return Ok(pivots);
            };
            self.ftran(j, &mut dir);
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                if dir[i] > PIVOT_TOL {
                    let ratio = self.x_basic[i].max(0.0) / dir[i];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            if ratio < best - 1e-12
                                || (ratio <= best + 1e-12 && self.basis[i] < self.basis[r])
                            {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(pivots);
            };
            self.pivot(row, j, &dir);
            pivots += 1;
        }
        Ok(pivots)
    }

    /// Replaces zero-valued artificial basics by structural columns where possible.
    /// Rows where no replacement exists are redundant and keep their artificial at zero.
    fn drive_out_artificials(&mut self, n: usize) -> usize {
        let m = self.binv.nrows();
        let mut dir = vec![0.0; m];
        let mut pivots = 0;
        for row in 0..m {
            if self.basis[row] < n {
                continue;
            }
            for j in 0..n {
                if self.in_basis[j] {
                    continue;
                }
                self.ftran(j, &mut dir);
                if dir[row].abs() > 1e-7 {
                    self.pivot(row, j, &dir);
                    pivots += 1;
                    break;
                }
            }
        }
        pivots
    }
}
