//! Independent oracles for the affinity solvers: direct constraint checks,
//! an entropic variational characterization, exhaustive assignment search,
//! and a grid optimizer on a low-dimensional transport polytope.

use moe_core::affinity::{sinkhorn_plan, sparse_ot_plan};
use moe_core::rng::Rng;
use moe_core::tensor::Tensor;

/// `<plan, scores> - <plan, log plan>` (the entropic objective).
fn entropic_objective(plan: &Tensor, scores: &Tensor) -> f64 {
    plan.data()
        .iter()
        .zip(scores.data())
        .map(|(&p, &s)| p * s - p * p.ln())
        .sum()
}

#[test]
fn row_softmax_maximizes_the_entropic_objective() {
    let mut rng = Rng::new(200);
    let scores = rng.normal_tensor(&[6, 4], 1.0).unwrap();
    let softmax = scores.softmax_rows().unwrap();
    let best = entropic_objective(&softmax, &scores);
    for _ in 0..100 {
        // random positive row-stochastic competitor
        let raw = rng.normal_tensor(&[6, 4], 1.0).unwrap();
        let positive = raw.map("exp", f64::exp).unwrap();
        let rows = positive.sum_axis(1).unwrap();
        let mut competitor = positive.clone();
        for i in 0..6 {
            for j in 0..4 {
                let v = competitor.at2(i, j) / rows.data()[i];
                competitor.set2(i, j, v);
            }
        }
        let other = entropic_objective(&competitor, &scores);
        assert!(
            best >= other - 1e-10,
            "softmax objective {best} beaten by perturbation {other}"
        );
    }
}

#[test]
fn sinkhorn_two_by_two_long_run_oracle() {
    // symmetric logits with a strong diagonal; run far past convergence and
    // verify the fixed point directly
    let logits = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap();
    let (plan, res, trace) = sinkhorn_plan(&logits, 10_000, 0.0).unwrap();

    assert!(res.row_sum_dev < 1e-8);
    assert!(res.col_sum_dev < 1e-8);
    // symmetry of the instance carries to the plan
    assert!((plan.at2(0, 0) - plan.at2(1, 1)).abs() < 1e-12);
    assert!((plan.at2(0, 1) - plan.at2(1, 0)).abs() < 1e-12);
    // diagonal dominance
    assert!(plan.at2(0, 0) > plan.at2(0, 1));
    // dual objective is monotone along the whole run
    for pair in trace.dual_objectives.windows(2) {
        assert!(
            pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0),
            "dual objective decreased: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}

#[test]
fn sinkhorn_dual_objective_monotone_on_random_instances() {
    let mut rng = Rng::new(201);
    for _ in 0..10 {
        let logits = rng.normal_tensor(&[12, 5], 1.5).unwrap();
        let (_, _, trace) = sinkhorn_plan(&logits, 300, 0.0).unwrap();
        for pair in trace.dual_objectives.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
        }
    }
}

#[test]
fn sinkhorn_converged_feasibility_at_tight_tolerance() {
    let mut rng = Rng::new(202);
    for _ in 0..5 {
        let logits = rng.normal_tensor(&[32, 8], 1.0).unwrap();
        let (_, res, _) = sinkhorn_plan(&logits, 5_000, 1e-8).unwrap();
        assert!(res.row_sum_dev <= 1e-12, "row dev {}", res.row_sum_dev);
        assert!(res.col_sum_dev <= 1e-6, "col dev {}", res.col_sum_dev);
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, &mut out);
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Utility matrix whose dominant entries follow `perm` (column r prefers
/// token perm[r]).
fn permutation_utility(perm: &[usize], strength: f64) -> Tensor {
    let n = perm.len();
    let mut logits = Tensor::zeros(&[n, n]);
    for (r, &t) in perm.iter().enumerate() {
        logits.set2(t, r, strength);
    }
    logits.softmax_rows().unwrap()
}

#[test]
fn sparse_ot_matches_brute_force_assignment_search() {
    // with capacity 1 and unit column mass, feasible plans are assignments;
    // enumerate all of them and compare objectives
    let mut rng = Rng::new(203);
    for n in 2..=5usize {
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let utility = permutation_utility(&perm, 4.0);
            let (plan, res) = sparse_ot_plan(&utility, 1, 500, 0.25).unwrap();

            // brute force: quadratic term is constant over assignments
            let mut best_perm = None;
            let mut best_value = f64::NEG_INFINITY;
            for candidate in permutations(n) {
                let value: f64 = candidate
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| utility.at2(t, r))
                    .sum();
                if value > best_value {
                    best_value = value;
                    best_perm = Some(candidate);
                }
            }
            let best_perm = best_perm.unwrap();
            assert_eq!(best_perm, perm, "dominant permutation should win");

            for r in 0..n {
                for t in 0..n {
                    let want = if best_perm[r] == t { 1.0 } else { 0.0 };
                    assert!(
                        (plan.at2(t, r) - want).abs() < 1e-9,
                        "n={n} entry ({t},{r}) = {} want {want}",
                        plan.at2(t, r)
                    );
                }
            }
            assert!(res.col_nonzeros.iter().all(|&c| c <= 1));
        }
    }
}

/// Exhaustive zooming grid search over the 2-parameter transport polytope
/// of a 3x2 instance (rows sum to 1, columns to 1.5).
fn grid_oracle_3x2(utility: &Tensor) -> Tensor {
    let objective = |a: f64, b: f64| -> Option<f64> {
        let c = 1.5 - a - b;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&c) {
            return None;
        }
        let entries = [a, 1.0 - a, b, 1.0 - b, c, 1.0 - c];
        let mut value = 0.0;
        for (idx, &p) in entries.iter().enumerate() {
            let (t, r) = (idx / 2, idx % 2);
            value += p * utility.at2(t, r) - 0.5 * p * p;
        }
        Some(value)
    };
    let mut center = (0.5, 0.5);
    let mut radius = 0.5;
    for _ in 0..4 {
        let mut best = (f64::NEG_INFINITY, center);
        let steps = 200;
        for i in 0..=steps {
            for j in 0..=steps {
                let a = center.0 - radius + 2.0 * radius * i as f64 / steps as f64;
                let b = center.1 - radius + 2.0 * radius * j as f64 / steps as f64;
                if let Some(v) = objective(a, b) {
                    if v > best.0 {
                        best = (v, (a, b));
                    }
                }
            }
        }
        center = best.1;
        radius /= 50.0;
    }
    let (a, b) = center;
    let c = 1.5 - a - b;
    Tensor::from_rows(&[vec![a, 1.0 - a], vec![b, 1.0 - b], vec![c, 1.0 - c]]).unwrap()
}

#[test]
fn sparse_ot_with_inactive_cap_matches_grid_oracle() {
    let mut rng = Rng::new(204);
    for _ in 0..3 {
        let logits = rng.normal_tensor(&[3, 2], 1.0).unwrap();
        let utility = logits.softmax_rows().unwrap();
        // capacity = T makes the cardinality constraint vacuous
        let (plan, _) = sparse_ot_plan(&utility, 3, 20_000, 0.4).unwrap();
        let oracle = grid_oracle_3x2(&utility);
        let diff = plan.max_abs_diff(&oracle).unwrap();
        assert!(diff < 1e-4, "plan differs from grid oracle by {diff}");
    }
}

#[test]
fn sparse_ot_cardinality_cap_always_holds() {
    let mut rng = Rng::new(205);
    for trial in 0..50 {
        let t = 4 + rng.below(12);
        let e = 2 + rng.below(4);
        let cap_min = t.div_ceil(e);
        let cap = cap_min + rng.below(3);
        let logits = rng.normal_tensor(&[t, e], 2.0).unwrap();
        let utility = logits.softmax_rows().unwrap();
        let (plan, res) = sparse_ot_plan(&utility, cap, 60, 1.0 / e as f64).unwrap();
        for (r, &nnz) in res.col_nonzeros.iter().enumerate() {
            assert!(nnz <= cap, "trial {trial}: column {r} has {nnz} > {cap}");
        }
        // column mass is exact by construction
        let cols = plan.sum_axis(0).unwrap();
        for &c in cols.data() {
            assert!((c - t as f64 / e as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn sparse_ot_row_residual_decreases_from_first_iteration() {
    let mut rng = Rng::new(206);
    let mut strict = 0;
    let trials = 20;
    for _ in 0..trials {
        let logits = rng.normal_tensor(&[12, 4], 1.5).unwrap();
        let utility = logits.softmax_rows().unwrap();
        let (_, first) = sparse_ot_plan(&utility, 6, 1, 0.0625).unwrap();
        let (_, last) = sparse_ot_plan(&utility, 6, 300, 0.0625).unwrap();
        assert!(
            last.row_sum_dev <= first.row_sum_dev,
            "row residual got worse: {} -> {}",
            first.row_sum_dev,
            last.row_sum_dev
        );
        if last.row_sum_dev < first.row_sum_dev {
            strict += 1;
        }
    }
    assert!(
        strict * 2 > trials,
        "residual strictly improved on only {strict}/{trials} instances"
    );
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = Rng::new(207);
    let logits = rng.normal_tensor(&[5, 4], 1.0).unwrap();
    let shifted = logits.map("shift", |v| v + 123.0).unwrap();
    let a = logits.softmax_rows().unwrap();
    let b = shifted.softmax_rows().unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}
