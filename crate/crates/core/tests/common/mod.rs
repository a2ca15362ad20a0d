//! Brute-force oracles used by the integration tests. They share nothing with
//! the library's solvers beyond the layout indexing.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pdgd_core::{LoopFreeCmdp, Policy};

/// Equality description `E q = b` of `Δ(M)`, assembled directly from the
/// definition: each layer sums to one, inflow equals outflow at every inner
/// state, and every triple equals `P(x'|x,a)` times its pair's mass.
pub fn equality_system(p: &LoopFreeCmdp) -> (DMatrix<f64>, DVector<f64>) {
    let l = p.layout();
    let nt = l.num_triples();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for k in 0..l.horizon() {
        let mut r = vec![0.0; nt];
        for t in 0..nt {
            let (x, _, _) = l.triple_parts(t);
            if l.layer_of(x) == k {
                r[t] = 1.0;
            }
        }
        rows.push((r, 1.0));
    }
    for k in 1..l.horizon() {
        for &s in l.layer(k) {
            let mut r = vec![0.0; nt];
            for t in 0..nt {
                let (x, _, y) = l.triple_parts(t);
                if x == s {
                    r[t] += 1.0;
                }
                if y == s {
                    r[t] -= 1.0;
                }
            }
            rows.push((r, 0.0));
        }
    }
    let probs = p.kernel().probs();
    for t in 0..nt {
        let (x, a, _) = l.triple_parts(t);
        let mut r = vec![0.0; nt];
        for u in 0..nt {
            let (xu, au, _) = l.triple_parts(u);
            if xu == x && au == a {
                r[u] -= probs[t];
            }
        }
        r[t] += 1.0;
        rows.push((r, 0.0));
    }
    let e = DMatrix::from_fn(rows.len(), nt, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (e, b)
}

fn columns(e: &DMatrix<f64>, free: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(e.nrows(), free.len(), |i, j| e[(i, free[j])])
}

fn free_set(nt: usize, zero_mask: u32) -> Vec<usize> {
    (0..nt).filter(|j| zero_mask & (1 << j) == 0).collect()
}

/// Euclidean projection onto `Δ(M)` by enumerating every set of triples
/// pinned at zero, solving the equality-constrained least-squares problem on
/// the rest, and keeping the closest feasible candidate.
/// Returns the point and `½‖q − q0‖²`.
pub fn brute_force_projection(p: &LoopFreeCmdp, q0: &[f64]) -> (Vec<f64>, f64) {
    let (e, b) = equality_system(p);
    let nt = q0.len();
    assert!(nt <= 16, "enumeration is exponential in the number of triples");
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0..(1u32 << nt) {
        let free = free_set(nt, mask);
        if free.is_empty() {
            continue;
        }
        let ef = columns(&e, &free);
        let x0 = DVector::from_iterator(free.len(), free.iter().map(|&j| q0[j]));
        let gram = &ef * ef.transpose();
        let pinv = match gram.clone().pseudo_inverse(1e-10) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let w = pinv * (&ef * &x0 - &b);
        let xf = &x0 - ef.transpose() * w;
        if (&ef * &xf - &b).amax() > 1e-9 || xf.min() < -1e-10 {
            continue;
        }
        let mut q = vec![0.0; nt];
        for (k, &j) in free.iter().enumerate() {
            q[j] = xf[k].max(0.0);
        }
        let obj = 0.5 * q.iter().zip(q0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if best.as_ref().is_none_or(|(_, o)| obj < *o) {
            best = Some((q, obj));
        }
    }
    best.expect("Δ(M) is nonempty")
}

/// `max cᵀq` over `Δ(M) ∩ {aᵀq ≤ β}` by enumerating basic solutions: every
/// zero pattern combined with every subset of the extra inequalities taken
/// as equalities, kept when the resulting system has a unique feasible
/// solution. `None` when no vertex is feasible.
pub fn brute_force_lp(p: &LoopFreeCmdp, c: &[f64], extra: &[(Vec<f64>, f64)]) -> Option<f64> {
    let (e, b) = equality_system(p);
    let nt = c.len();
    assert!(nt <= 16 && extra.len() <= 4);
    let mut best: Option<f64> = None;
    for mask in 0..(1u32 << nt) {
        let free = free_set(nt, mask);
        if free.is_empty() {
            continue;
        }
        for tight in 0..(1u32 << extra.len()) {
            let chosen: Vec<&(Vec<f64>, f64)> =
                (0..extra.len()).filter(|i| tight & (1 << i) != 0).map(|i| &extra[i]).collect();
            let rows = e.nrows() + chosen.len();
            let a = DMatrix::from_fn(rows, free.len(), |i, j| {
                if i < e.nrows() {
                    e[(i, free[j])]
                } else {
                    chosen[i - e.nrows()].0[free[j]]
                }
            });
            let rhs = DVector::from_fn(rows, |i, _| if i < e.nrows() { b[i] } else { chosen[i - e.nrows()].1 });
            let svd = a.clone().svd(true, true);
            if svd.rank(1e-9) < free.len() {
                continue;
            }
            let Ok(x) = svd.solve(&rhs, 1e-12) else { continue };
            if (&a * &x - &rhs).amax() > 1e-9 || x.min() < -1e-10 {
                continue;
            }
            let mut q = vec![0.0; nt];
            for (k, &j) in free.iter().enumerate() {
                q[j] = x[k];
            }
            let feasible = extra
                .iter()
                .all(|(row, beta)| row.iter().zip(&q).map(|(r, v)| r * v).sum::<f64>() <= beta + 1e-9);
            if !feasible {
                continue;
            }
            let val: f64 = c.iter().zip(&q).map(|(a, b)| a * b).sum();
            best = Some(best.map_or(val, |v: f64| v.max(val)));
        }
    }
    best
}

/// Occupancy of `pi` on `p` by summing the probability of every complete
/// path through the layers.
pub fn occupancy_by_paths(p: &LoopFreeCmdp, pi: &Policy) -> Vec<f64> {
    let l = p.layout();
    let mut q = vec![0.0; l.num_triples()];
    let mut stack: Vec<(usize, f64, Vec<usize>)> = vec![(l.initial_state(), 1.0, Vec::new())];
    while let Some((x, prob, visited)) = stack.pop() {
        if l.is_terminal(x) {
            for &t in &visited {
                q[t] += prob;
            }
            continue;
        }
        for a in 0..l.num_actions() {
            let pa = pi.prob(x, a);
            for t in l.triples_of_pair(x, a) {
                let (_, _, y) = l.triple_parts(t);
                let w = prob * pa * p.kernel().probs()[t];
                if w > 0.0 {
                    let mut v = visited.clone();
                    v.push(t);
                    stack.push((y, w, v));
                }
            }
        }
    }
    q
}
