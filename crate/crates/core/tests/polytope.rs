mod common;

use std::sync::Arc;

use pdgd_core::fixtures::random_cmdp;
use pdgd_core::polytope::ProjectionWorkspace;
use pdgd_core::{
    build_polytope, induce_occupancy, LinearInequality, LoopFreeCmdp, LpStatus, OccupancyPolytope, Policy,
    PolytopeSource, ProjectionSettings,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(sizes: &[usize], seed: u64) -> LoopFreeCmdp {
    random_cmdp(sizes, 2, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_agrees_with_active_set_enumeration(
        seed in 0u64..10_000,
        q0 in prop::collection::vec(-0.5f64..1.5, 8),
    ) {
        let p = instance(&[1, 2, 1], seed);
        let poly = OccupancyPolytope::exact(&p);
        let got = poly.project(&q0, 1e-9).unwrap();
        let (want, obj) = common::brute_force_projection(&p, &q0);
        let got_obj = 0.5 * dist(got.q.values(), &q0).powi(2);
        prop_assert!((got_obj - obj).abs() < 1e-6, "{got_obj} vs {obj}");
        prop_assert!(dist(got.q.values(), &want) < 1e-4);
    }

    #[test]
    fn projection_is_nonexpansive(
        seed in 0u64..10_000,
        a in prop::collection::vec(-1.0f64..2.0, 16),
        b in prop::collection::vec(-1.0f64..2.0, 16),
    ) {
        let p = instance(&[1, 2, 2, 1], seed);
        let poly = OccupancyPolytope::exact(&p);
        let pa = poly.project(&a, 1e-9).unwrap();
        let pb = poly.project(&b, 1e-9).unwrap();
        prop_assert!(dist(pa.q.values(), pb.q.values()) <= dist(&a, &b) + 1e-6);
    }

    #[test]
    fn projection_fixes_feasible_points(seed in 0u64..10_000, w in prop::collection::vec(0.0f64..1.0, 10)) {
        let p = instance(&[1, 2, 2, 1], seed);
        let l = p.layout().clone();
        let probs = (0..l.num_pairs()).map(|i| {
            let k = i - i % 2;
            if i % 2 == 0 { w[(k / 2) % w.len()] } else { 1.0 - w[(k / 2) % w.len()] }
        }).collect();
        let q = induce_occupancy(&p, &Policy::new(l, probs).unwrap());
        let poly = OccupancyPolytope::exact(&p);
        let proj = poly.project(q.values(), 1e-9).unwrap();
        prop_assert!(dist(proj.q.values(), q.values()) < 1e-6);
    }

    #[test]
    fn lp_agrees_with_vertex_enumeration(
        seed in 0u64..10_000,
        c in prop::collection::vec(-1.0f64..1.0, 8),
        row in prop::collection::vec(-1.0f64..1.0, 8),
        beta in -0.3f64..0.5,
    ) {
        let p = instance(&[1, 2, 1], seed);
        let poly = OccupancyPolytope::exact(&p);
        let extra = [LinearInequality { coeffs: row.clone(), rhs: beta }];
        let got = poly.lp_maximize(&c, &extra).unwrap();
        match common::brute_force_lp(&p, &c, &[(row, beta)]) {
            Some(want) => {
                prop_assert_eq!(got.status, LpStatus::Optimal);
                prop_assert!((got.optimum - want).abs() < 1e-6, "{} vs {}", got.optimum, want);
            }
            None => prop_assert_eq!(got.status, LpStatus::Infeasible),
        }
    }

    #[test]
    fn lp_optimum_is_invariant_to_row_scaling(
        seed in 0u64..10_000,
        c in prop::collection::vec(-1.0f64..1.0, 8),
        row in prop::collection::vec(-1.0f64..1.0, 8),
        scale in 0.01f64..100.0,
    ) {
        let p = instance(&[1, 2, 1], seed);
        let poly = OccupancyPolytope::exact(&p);
        let base = poly.lp_maximize(&c, &[LinearInequality { coeffs: row.clone(), rhs: 0.1 }]).unwrap();
        let scaled_row: Vec<f64> = row.iter().map(|v| v * scale).collect();
        let scaled = poly.lp_maximize(&c, &[LinearInequality { coeffs: scaled_row, rhs: 0.1 * scale }]).unwrap();
        prop_assert_eq!(base.status, scaled.status);
        if base.status == LpStatus::Optimal {
            prop_assert!((base.optimum - scaled.optimum).abs() < 1e-7);
        }
    }

    #[test]
    fn confidence_polytopes_nest_in_the_radius(
        seed in 0u64..10_000,
        r1 in prop::collection::vec(0.0f64..1.0, 10),
        extra in prop::collection::vec(0.0f64..1.0, 10),
        c in prop::collection::vec(-1.0f64..1.0, 16),
        q0 in prop::collection::vec(-0.5f64..1.5, 16),
    ) {
        let p = instance(&[1, 2, 2, 1], seed);
        let l = p.layout().clone();
        let center = instance(&[1, 2, 2, 1], seed + 1).kernel().probs().to_vec();
        let mut small = vec![0.0; l.num_pairs()];
        let mut big = vec![0.0; l.num_pairs()];
        for (i, (x, a)) in l.decision_pairs().enumerate() {
            small[l.pair(x, a)] = r1[i];
            big[l.pair(x, a)] = r1[i] + extra[i];
        }
        let ps = build_polytope(l.clone(), PolytopeSource::Confidence { center: &center, radius: &small }).unwrap();
        let pb = build_polytope(l.clone(), PolytopeSource::Confidence { center: &center, radius: &big }).unwrap();
        let ls = ps.lp_maximize(&c, &[]).unwrap();
        let lb = pb.lp_maximize(&c, &[]).unwrap();
        if ls.status == LpStatus::Optimal {
            prop_assert_eq!(lb.status, LpStatus::Optimal);
            prop_assert!(lb.optimum >= ls.optimum - 1e-7);
        }
        if let Ok(proj) = ps.project(&q0, 1e-8) {
            prop_assert!(pb.contains(proj.q.values(), 1e-6));
            let big_proj = pb.project(&q0, 1e-8).unwrap();
            prop_assert!(dist(big_proj.q.values(), &q0) <= dist(proj.q.values(), &q0) + 1e-6);
        }
    }

    #[test]
    fn exact_polytope_lies_in_any_confidence_set_around_the_true_kernel(
        seed in 0u64..10_000,
        radius in prop::collection::vec(0.0f64..0.5, 10),
        q0 in prop::collection::vec(-0.5f64..1.5, 16),
    ) {
        let p = instance(&[1, 2, 2, 1], seed);
        let l = p.layout().clone();
        let mut r = vec![0.0; l.num_pairs()];
        for (i, (x, a)) in l.decision_pairs().enumerate() {
            r[l.pair(x, a)] = radius[i];
        }
        let conf = build_polytope(l, PolytopeSource::Confidence { center: p.kernel().probs(), radius: &r }).unwrap();
        let exact = OccupancyPolytope::exact(&p).project(&q0, 1e-9).unwrap();
        prop_assert!(conf.contains(exact.q.values(), 1e-7));
    }
}

#[test]
fn warm_projection_sequence_matches_cold_projections() {
    let p = instance(&[1, 2, 2, 1], 5);
    let l = p.layout().clone();
    let center = p.kernel().probs().to_vec();
    let radius = vec![0.3; l.num_pairs()];
    let poly = build_polytope(l.clone(), PolytopeSource::Confidence { center: &center, radius: &radius }).unwrap();
    let settings = ProjectionSettings::with_tol(1e-9);
    let mut ws = ProjectionWorkspace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut q = vec![1.0 / 8.0; l.num_triples()];
    for _ in 0..200 {
        let step: Vec<f64> = (0..q.len()).map(|_| rand::Rng::gen_range(&mut rng, -0.05..0.05)).collect();
        let target: Vec<f64> = q.iter().zip(&step).map(|(a, b)| a + b).collect();
        let warm = poly.project_warm(&target, &settings, &mut ws).unwrap();
        let cold = poly.project(&target, 1e-9).unwrap();
        assert!(dist(warm.q.values(), cold.q.values()) < 1e-5);
        assert!(warm.residual <= 1e-9);
        q = warm.q.into_values();
    }
}

#[test]
fn projection_objective_is_first_order_optimal_against_vertices() {
    // for the projection q̂ of q0, (q0 − q̂)ᵀ(v − q̂) ≤ 0 for every feasible v;
    // deterministic-policy occupancies are a sufficient set of test points
    let p = instance(&[1, 2, 2, 1], 11);
    let l = Arc::clone(p.layout());
    let poly = OccupancyPolytope::exact(&p);
    let q0: Vec<f64> = (0..l.num_triples()).map(|t| ((t * 37 % 11) as f64 - 3.0) / 5.0).collect();
    let proj = poly.project(&q0, 1e-10).unwrap();
    let qh = proj.q.values();
    let decision: Vec<usize> = (0..l.num_states()).filter(|&x| !l.is_terminal(x)).collect();
    for bits in 0..(1u32 << decision.len()) {
        let mut probs = vec![0.5; l.num_pairs()];
        for (i, &x) in decision.iter().enumerate() {
            let a = ((bits >> i) & 1) as usize;
            probs[l.pair(x, a)] = 1.0;
            probs[l.pair(x, 1 - a)] = 0.0;
        }
        let v = induce_occupancy(&p, &Policy::new(l.clone(), probs).unwrap());
        let lhs: f64 = q0
            .iter()
            .zip(qh)
            .zip(v.values())
            .map(|((a, b), c)| (a - b) * (c - b))
            .sum();
        assert!(lhs <= 1e-6, "variational inequality violated by {lhs}");
    }
}
