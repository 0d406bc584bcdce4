mod common;

use common::*;
use proptest::prelude::*;
use seqgraph::compatible::{compatible_bounds, compatible_bounds_adjustment};
use seqgraph::dual::{build_dual_graph, local_alpha, local_levels, DualNode};
use seqgraph::engine::efficient_multiple_adjustment;
use seqgraph::graph::{run_graph_test_with, run_single_stage_test, ValidatedGraph};
use seqgraph::informative::{
    in_confidence_set, isci_efficient_adjustment, limit_residuals, primary_algorithm, IterationConfig,
};
use seqgraph::pvalue::{stage_views, HypothesisSeries, Lambda};
use seqgraph::sim::oracle::exhaustive_rejection_sets;
use seqgraph::spending::SpendingFunction;
use seqgraph::Error;

const ALPHA: f64 = 0.025;

fn raw_graph(max_m: usize) -> impl Strategy<Value = ValidatedGraph> {
    (1..=max_m).prop_flat_map(|m| {
        (
            prop::collection::vec(0.0..1.0f64, m),
            prop::collection::vec(0.0..1.0f64, m * m),
            prop::collection::vec(prop_oneof![Just(1.0), 0.0..1.0f64], m),
            prop::collection::vec(0.0..1.0f64, m),
        )
            .prop_map(|(w, g, r, e)| graph_from_raw(&w, &g, &r, &e))
    })
}

fn shift() -> impl Strategy<Value = f64> {
    prop_oneof![Just(f64::NEG_INFINITY), -3.0..3.0f64, Just(0.0)]
}

fn graph_and_mu(max_m: usize) -> impl Strategy<Value = (ValidatedGraph, Vec<f64>)> {
    raw_graph(max_m).prop_flat_map(|g| {
        let m = g.m();
        (Just(g), prop::collection::vec(shift(), m))
    })
}

/// Graph, stage index per hypothesis and z-statistics for a random trial.
fn trial(max_m: usize) -> impl Strategy<Value = (ValidatedGraph, Vec<HypothesisSeries>, Vec<usize>)> {
    raw_graph(max_m).prop_flat_map(|g| {
        let m = g.m();
        (
            Just(g),
            prop::collection::vec((0..3usize, prop::collection::vec(-1.5..4.0f64, 3), 0..3usize), m),
        )
            .prop_map(|(g, per)| {
                let mut series = Vec::new();
                let mut stages = Vec::new();
                for (b, z, k) in per {
                    let bd = boundary(b);
                    let k = k.min(bd.stages() - 1);
                    series.push(series_from_z(bd, &z[..=k]));
                    stages.push(k);
                }
                (g, series, stages)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_conserved_along_rejections(g in raw_graph(5), order in prop::collection::vec(0..5usize, 0..5)) {
        let mut st = g.initial_state();
        for j in order {
            if j >= g.m() || !st.is_active(j) { continue; }
            st.reject(j).unwrap();
            let s: f64 = st.weights().iter().sum();
            prop_assert!(s <= 1.0 + 1e-10);
            for i in 0..g.m() {
                if !st.is_active(i) { prop_assert_eq!(st.weight(i), 0.0); }
                let row: f64 = (0..g.m()).map(|l| st.g(i, l)).sum();
                prop_assert!(row <= 1.0 + 1e-10);
                prop_assert!(st.weight(i) >= 0.0);
            }
        }
    }

    #[test]
    fn rejection_set_is_order_invariant(g in raw_graph(4), p in prop::collection::vec(prop_oneof![0.0..0.03f64, 0.0..1.0f64], 4)) {
        let p = &p[..g.m()];
        let (mut r, _) = run_single_stage_test(&g, p, ALPHA).unwrap();
        r.sort_unstable();
        let all = exhaustive_rejection_sets(&g, p, ALPHA).unwrap();
        prop_assert_eq!(all, vec![r]);
    }

    #[test]
    fn local_levels_conserve_alpha((g, mu) in graph_and_mu(5), q in 0.01..0.99f64) {
        let lv = local_levels(&g, &mu, q, ALPHA).unwrap();
        let s: f64 = lv.alpha_mu.iter().sum();
        let w: f64 = g.weights().iter().sum();
        prop_assert!((s - w * ALPHA).abs() < 1e-10, "sum {} vs {}", s, w * ALPHA);
        for j in 0..g.m() {
            let f = q.powf(mu[j].max(0.0)) * lv.nu[j];
            prop_assert!(f <= 1.0 + 1e-10);
            prop_assert!((lv.alpha_mu[j] - f * ALPHA).abs() < 1e-12);
            if mu[j] <= 0.0 {
                prop_assert!(lv.alpha_mu[j] >= g.weights()[j] * ALPHA - 1e-15);
            }
        }
        let d = build_dual_graph(&g, &mu, q).unwrap();
        for j in 0..g.m() {
            prop_assert_eq!(d.has_node(DualNode::Original(j)), mu[j] > 0.0);
            prop_assert_eq!(d.weight(DualNode::Shifted(j)), if mu[j] > 0.0 { 0.0 } else { g.weights()[j] });
        }
    }

    #[test]
    fn nu_non_decreasing_in_other_shifts((g, mu) in graph_and_mu(5), i in 0..5usize, bump in 0.0..2.0f64, q in 0.05..0.95f64) {
        let i = i % g.m();
        let mut mu2 = mu.clone();
        mu2[i] = if mu[i] == f64::NEG_INFINITY { bump - 1.0 } else { mu[i] + bump };
        let a = local_levels(&g, &mu, q, ALPHA).unwrap();
        let b = local_levels(&g, &mu2, q, ALPHA).unwrap();
        for j in (0..g.m()).filter(|&j| j != i) {
            prop_assert!(b.nu[j] >= a.nu[j] - 1e-12, "j={} {} -> {}", j, a.nu[j], b.nu[j]);
        }
    }

    #[test]
    fn non_positive_shifts_do_not_interact((g, mu) in graph_and_mu(5), i in 0..5usize, x in prop_oneof![Just(f64::NEG_INFINITY), -5.0..0.0f64], q in 0.05..0.95f64) {
        let i = i % g.m();
        prop_assume!(mu[i] <= 0.0);
        let mut mu2 = mu.clone();
        mu2[i] = x;
        let a = local_alpha(&g, &mu, q, ALPHA).unwrap();
        let b = local_alpha(&g, &mu2, q, ALPHA).unwrap();
        for j in 0..g.m() {
            prop_assert!((a[j] - b[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn small_q_recovers_original_levels((g, mu) in graph_and_mu(5)) {
        let pos: Vec<usize> = (0..g.m()).filter(|&j| mu[j] > 0.0).collect();
        prop_assume!(pos.len() < g.m());
        let a = local_alpha(&g, &mu, 1e-6, ALPHA).unwrap();
        let w = g.weights_without(&pos);
        for j in (0..g.m()).filter(|j| !pos.contains(j)) {
            // Shifts near zero keep q^mu far from 0; only check clear positives.
            if pos.iter().all(|&i| mu[i] > 0.5) {
                prop_assert!((a[j] - w[j] * ALPHA).abs() < 1e-4, "j={} {} vs {}", j, a[j], w[j] * ALPHA);
            }
        }
    }

    #[test]
    fn pvalue_families_ordered(b in 0..3usize, z in prop::collection::vec(-2.0..4.0f64, 3), mu in -0.5..0.5f64) {
        let s = series_from_z(boundary(b), &z[..boundary(b).stages()]);
        for k in 0..s.observed_stages() {
            let pr = match s.repeated_p(k, mu) {
                Ok(p) => p,
                // Outside the monotone part of the OBF-like function.
                Err(Error::SpendingMonotonicityViolation { .. }) => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let ps = s.sequential_p(k, mu).unwrap();
            prop_assert!(ps <= pr && pr <= 1.0 && ps >= 0.0);
            if k > 0 {
                prop_assert!(ps <= s.sequential_p(k - 1, mu).unwrap());
            }
            if let Ok(p2) = s.repeated_p(k, mu + 0.05) {
                prop_assert!(p2 >= pr);
            }
        }
    }

    #[test]
    fn nominal_levels_increase_in_gamma(b in 0..3usize, g1 in 0.001..0.3f64, d in 0.001..0.01f64) {
        let bd = boundary(b);
        for k in 0..bd.stages() {
            prop_assert!(bd.nominal_level(k, g1 + d).unwrap() > bd.nominal_level(k, g1).unwrap());
        }
    }

    #[test]
    fn spending_shape(rho in 0.2..5.0f64, g in 0.001..0.3f64, t in 0.0..1.0f64) {
        for f in [SpendingFunction::PocockLike, SpendingFunction::ObfLike, SpendingFunction::Power { rho }] {
            prop_assert!(f.spend(g, 0.0).unwrap().abs() < 1e-15);
            prop_assert!((f.spend(g, 1.0).unwrap() - g).abs() < 1e-15);
            prop_assert!(f.spend(g, (t + 0.01).min(1.0)).unwrap() >= f.spend(g, t).unwrap());
        }
    }

    #[test]
    fn adjustment_dominated_and_retest_dominance((g, series, stages) in trial(4)) {
        let mut st = g.initial_state();
        let mut rs = run_graph_test_with(&mut st, |j, l| series[j].rejects(stages[j], Lambda::Sequential, l), ALPHA, |e| e[0]).unwrap();
        rs.sort_unstable();
        let rc = efficient_multiple_adjustment(&g, &rs, &stages, &series, ALPHA).unwrap();
        prop_assert!(rc.iter().all(|j| rs.contains(j)));
        // Retesting with the sequential p-value reproduces R_s.
        let same: Vec<usize> = rs.iter().copied().filter(|&j| {
            let others: Vec<usize> = rs.iter().copied().filter(|&i| i != j).collect();
            series[j].rejects(stages[j], Lambda::Sequential, g.weights_without(&others)[j] * ALPHA).unwrap()
        }).collect();
        prop_assert_eq!(same, rs.clone());
        let bs = compatible_bounds(&g, &series, Lambda::Sequential, ALPHA, &rs, &stages).unwrap();
        let bc = compatible_bounds_adjustment(&g, &series, ALPHA, &rs, &rc, &stages).unwrap();
        for j in 0..g.m() {
            prop_assert_eq!(bs.lower[j] >= 0.0, rs.contains(&j));
            prop_assert_eq!(bc.lower[j] >= 0.0, rc.contains(&j));
            prop_assert!(bc.lower[j] <= bs.lower[j]);
        }
    }

    #[test]
    fn compatible_sign_pattern_repeated((g, series, stages) in trial(4)) {
        let mut st = g.initial_state();
        let mut r = run_graph_test_with(&mut st, |j, l| series[j].rejects(stages[j], Lambda::Repeated, l), ALPHA, |e| e[0]).unwrap();
        r.sort_unstable();
        let b = compatible_bounds(&g, &series, Lambda::Repeated, ALPHA, &r, &stages).unwrap();
        for j in 0..g.m() {
            prop_assert_eq!(b.lower[j] >= 0.0, r.contains(&j));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn bracket_properties((g, series, stages) in trial(4), lam in prop::bool::ANY, q in 0.1..0.9f64) {
        let lambda = if lam { Lambda::Repeated } else { Lambda::Sequential };
        let pv = stage_views(&series, &stages, lambda);
        let mut cfg = IterationConfig::new(q, ALPHA);
        cfg.trace = true;
        let b = primary_algorithm(&g, &pv, ALPHA, &cfg, None, None).unwrap();
        prop_assert!(b.converged);
        for w in b.trace.windows(2) {
            prop_assert!(w[1].gap <= w[0].gap);
            for j in 0..g.m() {
                prop_assert!(w[1].lower[j] >= w[0].lower[j] && w[1].upper[j] <= w[0].upper[j]);
            }
        }
        for step in &b.trace {
            for j in 0..g.m() {
                prop_assert!(step.lower[j] <= step.upper[j]);
            }
            prop_assert!(in_confidence_set(&g, &pv, ALPHA, q, &step.upper).unwrap());
        }
        for r in limit_residuals(&g, &pv, ALPHA, q, &b.lower).unwrap() {
            prop_assert!(r.abs() < 1e-6, "residual {}", r);
        }
        // Informativeness (a): finite wherever a direct level exists.
        for j in 0..g.m() {
            if g.weights()[j] > 0.0 {
                prop_assert!(b.lower[j] > f64::NEG_INFINITY);
            }
        }
        // A second valid lower start converges to the same limit.
        let start: Vec<f64> = b.lower.iter().map(|x| x - 1.0).collect();
        let b2 = primary_algorithm(&g, &pv, ALPHA, &cfg, Some(&start), None).unwrap();
        for j in 0..g.m() {
            let (x, y) = (b.lower[j], b2.lower[j]);
            prop_assert!(x == y || (x - y).abs() < 2.0 * cfg.epsilon, "{} vs {}", x, y);
        }
    }

    #[test]
    fn adjustment_bounds_below_sequential((g, series, stages) in trial(4), q in 0.1..0.9f64) {
        let cfg = IterationConfig::new(q, ALPHA);
        let ps = stage_views(&series, &stages, Lambda::Sequential);
        let ls = primary_algorithm(&g, &ps, ALPHA, &cfg, None, None).unwrap().lower;
        let pr = stage_views(&series, &stages, Lambda::Repeated);
        let (lc, rc) = isci_efficient_adjustment(&g, &ls, &pr, q, ALPHA).unwrap();
        for j in 0..g.m() {
            prop_assert!(lc[j] <= ls[j]);
            prop_assert_eq!(rc.contains(&j), lc[j] >= 0.0);
        }
    }

    #[test]
    fn single_hypothesis_adjustment_equals_repeated_limit(b in 0..3usize, z in prop::collection::vec(-1.0..4.0f64, 3), q in 0.1..0.9f64) {
        let bd = boundary(b);
        let k = bd.stages() - 1;
        let s = vec![series_from_z(bd, &z[..=k])];
        let g = ValidatedGraph::new(&seqgraph::graph::GraphSpec::hierarchical(1)).unwrap();
        let cfg = IterationConfig::new(q, ALPHA);
        let ls = primary_algorithm(&g, &stage_views(&s, &[k], Lambda::Sequential), ALPHA, &cfg, None, None).unwrap().lower;
        let pr = stage_views(&s, &[k], Lambda::Repeated);
        let (lc, _) = isci_efficient_adjustment(&g, &ls, &pr, q, ALPHA).unwrap();
        let lr = primary_algorithm(&g, &pr, ALPHA, &cfg, None, None).unwrap().lower;
        prop_assert!((lc[0] - lr[0]).abs() < 1e-6, "{} vs {}", lc[0], lr[0]);
    }
}
