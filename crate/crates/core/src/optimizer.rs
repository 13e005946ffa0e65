//! Plan search: exhaustive grid search over `(cut, θ1, θ2)` and a
//! finite-difference descent on the continuous partition fraction.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::cost::{compute_time, evaluate, transfer_time, CostError, PartitionPlan, Problem};
use crate::profiles::{Load, ModelProfile};
use crate::scalar::Scalar;
use crate::strategy::FusionStrategy;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OptimizeError {
    #[error("NoFeasiblePlan: no candidate satisfies the intensity requirements on both devices")]
    NoFeasiblePlan,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Central-difference step used by [`refine_lambda`].
pub const FD_STEP: f64 = 1e-6;

/// Two boundary fractions closer than this are treated as equidistant.
pub const SNAP_TIE_TOLERANCE: f64 = 1e-9;

/// Total order used to pick the winner: objective, then latency, then the
/// candidate key `(cut, θ1, θ2)`.
pub fn rank_order<T: Scalar>(a: &PartitionPlan<T>, b: &PartitionPlan<T>) -> Ordering {
    cmp_scalar(a.cost.lagrangian, b.cost.lagrangian)
        .then_with(|| cmp_scalar(a.cost.t_total, b.cost.t_total))
        .then_with(|| candidate_key(a).cmp(&candidate_key(b)))
}

fn candidate_key<T>(p: &PartitionPlan<T>) -> (usize, FusionStrategy, FusionStrategy) {
    (p.cut_index, p.theta1, p.theta2)
}

fn cmp_scalar<T: Scalar>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.is_nan().cmp(&b.is_nan()))
}

/// Every interior boundary × 4 × 4 strategies, in canonical key order.
pub fn enumerate_candidates<T: Scalar>(problem: &Problem<'_, T>) -> Result<Vec<PartitionPlan<T>>, OptimizeError> {
    let keys: Vec<_> = problem
        .model
        .interior_cuts()
        .flat_map(|cut| {
            FusionStrategy::ALL
                .into_iter()
                .flat_map(move |t1| FusionStrategy::ALL.into_iter().map(move |t2| (cut, t1, t2)))
        })
        .collect();
    keys.into_par_iter()
        .map(|(cut, t1, t2)| evaluate(problem, cut, t1, t2).map_err(OptimizeError::from))
        .collect()
}

/// All candidates sorted best-first by [`rank_order`].
pub fn ranked_candidates<T: Scalar>(problem: &Problem<'_, T>) -> Result<Vec<PartitionPlan<T>>, OptimizeError> {
    let mut all = enumerate_candidates(problem)?;
    all.par_sort_by(rank_order);
    Ok(all)
}

/// Minimizes the Lagrangian over the full candidate grid.
///
/// With `require_feasible`, candidates whose sub-models fall below either
/// device's ridge point are discarded instead of merely priced.
pub fn grid_search<T: Scalar>(problem: &Problem<'_, T>, require_feasible: bool) -> Result<PartitionPlan<T>, OptimizeError> {
    enumerate_candidates(problem)?
        .into_par_iter()
        .filter(|p| !require_feasible || (p.feasible.0 && p.feasible.1))
        .min_by(rank_order)
        .ok_or(OptimizeError::NoFeasiblePlan)
}

/// Result of the continuous partition-point descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement<T> {
    pub lambda: T,
    /// `(λ, T_total(λ))` before the first step and after every step.
    pub trace: Vec<(T, T)>,
}

/// Total latency with the cut placed at cumulative FLOP fraction `lambda`
/// (measured on the full three-branch structure). Between two boundaries the
/// straddled layer is split linearly, as is the transmitted activation size.
pub fn relaxed_latency<T: Scalar>(problem: &Problem<'_, T>, theta1: FusionStrategy, theta2: FusionStrategy, lambda: T) -> T {
    let model = problem.model;
    let n = model.layer_count();
    let fractions = model.boundary_fractions();
    let lambda = lambda.max(T::zero()).min(T::one());
    let j = (0..n).find(|&j| lambda <= fractions[j + 1]).unwrap_or(n - 1);
    let width = fractions[j + 1] - fractions[j];
    let s = if width > T::zero() {
        (lambda - fractions[j]) / width
    } else {
        T::zero()
    };

    let mut first = model.segment_load(0..j, theta1);
    let straddled = &model.layers[j];
    first.flops = first.flops + s * straddled.flops[theta1];
    first.bytes = first.bytes + s * straddled.bytes[theta1];

    let rest = model.segment_load(j + 1..n, theta2);
    let second = Load {
        flops: (T::one() - s) * straddled.flops[theta2] + rest.flops,
        bytes: (T::one() - s) * straddled.bytes[theta2] + rest.bytes,
    };

    let activation = |k: usize| model.cut_activation_bytes(k.clamp(1, n - 1));
    let embedding = (T::one() - s) * activation(j) + s * activation(j + 1);

    let mut total = transfer_time(embedding, problem.link);
    if first.flops > T::zero() {
        total = total + compute_time(&first, problem.device1);
    }
    if second.flops > T::zero() {
        total = total + compute_time(&second, problem.device2);
    }
    total
}

/// Gradient descent on the relaxed latency starting from the plan's cut
/// fraction, keeping the plan's strategies fixed.
pub fn refine_lambda<T: Scalar>(problem: &Problem<'_, T>, start: &PartitionPlan<T>, alpha: T, iters: usize) -> Refinement<T> {
    let lambda0 = problem.model.boundary_fractions()[start.cut_index];
    refine_lambda_from(problem, start.theta1, start.theta2, lambda0, alpha, iters)
}

pub fn refine_lambda_from<T: Scalar>(
    problem: &Problem<'_, T>,
    theta1: FusionStrategy,
    theta2: FusionStrategy,
    lambda0: T,
    alpha: T,
    iters: usize,
) -> Refinement<T> {
    let h = T::of(FD_STEP);
    let two = T::of(2.0);
    let lo = two * h;
    let hi = T::one() - two * h;
    let objective = |l: T| relaxed_latency(problem, theta1, theta2, l);

    let mut lambda = lambda0;
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push((lambda, objective(lambda)));
    for _ in 0..iters {
        let grad = (objective(lambda + h) - objective(lambda - h)) / (two * h);
        let next = lambda - alpha * grad;
        lambda = if next.is_finite() { next.max(lo).min(hi) } else { lambda };
        trace.push((lambda, objective(lambda)));
    }
    Refinement { lambda, trace }
}

/// Interior boundary whose cumulative FLOP fraction is nearest to `lambda`;
/// ties go to the smaller index.
pub fn snap_to_boundary<T: Scalar>(lambda: T, model: &ModelProfile<T>) -> usize {
    let fractions = model.boundary_fractions();
    let tol = T::of(SNAP_TIE_TOLERANCE);
    let mut best = 1;
    let mut best_dist = (fractions[1] - lambda).abs();
    for k in model.interior_cuts().skip(1) {
        let dist = (fractions[k] - lambda).abs();
        if dist < best_dist - tol {
            best = k;
            best_dist = dist;
        }
    }
    best
}

/// Discrete plan for a relaxed `lambda`: the snapped boundary compared with
/// the two boundaries bracketing `lambda`, best by [`rank_order`].
pub fn snap_and_compare<T: Scalar>(
    problem: &Problem<'_, T>,
    theta1: FusionStrategy,
    theta2: FusionStrategy,
    lambda: T,
) -> Result<PartitionPlan<T>, OptimizeError> {
    let model = problem.model;
    let fractions = model.boundary_fractions();
    let cuts = model.interior_cuts();
    let upper = (cuts.start..cuts.end).find(|&k| fractions[k] >= lambda).unwrap_or(cuts.end - 1);
    let lower = upper.saturating_sub(1).max(cuts.start);
    let snapped = snap_to_boundary(lambda, model);

    let mut candidates = Vec::with_capacity(3);
    for cut in [snapped, lower, upper] {
        candidates.push(evaluate(problem, cut, theta1, theta2)?);
    }
    Ok(candidates.into_iter().min_by(rank_order).expect("three candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{AccuracyPenaltyTable, DeviceProfile, LayerProfile, LinkProfile};
    use crate::strategy::StrategyTable;
    use FusionStrategy::*;

    struct Fixture {
        model: ModelProfile<f64>,
        d1: DeviceProfile<f64>,
        d2: DeviceProfile<f64>,
        link: LinkProfile<f64>,
        penalties: AccuracyPenaltyTable<f64>,
    }

    impl Fixture {
        fn problem(&self, lambda1: f64) -> Problem<'_, f64> {
            Problem {
                model: &self.model,
                device1: &self.d1,
                device2: &self.d2,
                link: &self.link,
                penalties: &self.penalties,
                lambda1,
            }
        }
    }

    fn fusible(index: usize, base: f64, out: f64) -> LayerProfile<f64> {
        LayerProfile {
            index,
            flops: StrategyTable([base, base * 1.05, base * 1.1, base * 1.15]),
            bytes: StrategyTable([base / 30.0, base / 30.0, base / 29.0, base / 29.0]),
            output_activation_bytes: out,
            fusible: true,
        }
    }

    fn fixture(layers: Vec<LayerProfile<f64>>) -> Fixture {
        Fixture {
            model: ModelProfile::new("m", layers).unwrap(),
            d1: DeviceProfile::new("nano", 472e9, 25.6e9, 1.0).unwrap(),
            d2: DeviceProfile::new("nx", 21e12, 51.2e9, 1.0).unwrap(),
            link: LinkProfile::new(12.5e6, 0.0).unwrap(),
            penalties: AccuracyPenaltyTable::new(
                StrategyTable([3.0, 1.0, 2.0, 0.0]),
                StrategyTable([2.0, 1.5, 0.5, 0.0]),
            )
            .unwrap(),
        }
    }

    fn brute_force_min_latency(p: &Problem<'_, f64>) -> (usize, FusionStrategy, FusionStrategy) {
        let mut best = None;
        let mut best_t = f64::INFINITY;
        for cut in p.model.interior_cuts() {
            for t1 in FusionStrategy::ALL {
                for t2 in FusionStrategy::ALL {
                    let l = crate::cost::latency(p.model, cut, t1, t2, p.device1, p.device2, p.link).unwrap();
                    if l.t_total < best_t {
                        best_t = l.t_total;
                        best = Some((cut, t1, t2));
                    }
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn zero_weight_matches_latency_brute_force() {
        let f = fixture(vec![fusible(0, 2e9, 4e6), fusible(1, 3e9, 1e5), fusible(2, 1e9, 8e5)]);
        let p = f.problem(0.0);
        let plan = grid_search(&p, false).unwrap();
        assert_eq!((plan.cut_index, plan.theta1, plan.theta2), brute_force_min_latency(&p));
    }

    #[test]
    fn huge_weight_forces_full_structure() {
        let f = fixture(vec![fusible(0, 2e9, 4e6), fusible(1, 3e9, 1e5), fusible(2, 1e9, 8e5)]);
        let plan = grid_search(&f.problem(1e9), false).unwrap();
        assert_eq!((plan.theta1, plan.theta2), (S3SsS1, S3SsS1));
    }

    #[test]
    fn singleton_search_space() {
        let f = fixture(vec![LayerProfile::plain(0, 1e9, 1e7, 1e5), LayerProfile::plain(1, 1e9, 1e7, 1e5)]);
        let mut f = f;
        f.penalties = AccuracyPenaltyTable::zero();
        let plan = grid_search(&f.problem(0.0), false).unwrap();
        // Every strategy costs the same: the enumeration-order first wins.
        assert_eq!((plan.cut_index, plan.theta1, plan.theta2), (1, S3, S3));
        assert_eq!(enumerate_candidates(&f.problem(0.0)).unwrap().len(), 16);
    }

    #[test]
    fn strict_mode_without_feasible_candidate() {
        // Intensity 1 FLOP/byte is below every ridge point.
        let f = fixture(vec![LayerProfile::plain(0, 1e9, 1e9, 1e5), LayerProfile::plain(1, 1e9, 1e9, 1e5)]);
        assert_eq!(grid_search(&f.problem(0.0), true).unwrap_err(), OptimizeError::NoFeasiblePlan);
        assert!(grid_search(&f.problem(0.0), false).is_ok());
    }

    #[test]
    fn ranking_is_deterministic() {
        let f = fixture(vec![fusible(0, 2e9, 4e6), fusible(1, 3e9, 1e5), fusible(2, 1e9, 8e5), fusible(3, 1e9, 1e3)]);
        let a = ranked_candidates(&f.problem(0.01)).unwrap();
        let b = ranked_candidates(&f.problem(0.01)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], grid_search(&f.problem(0.01), false).unwrap());
        for w in a.windows(2) {
            assert_ne!(rank_order(&w[0], &w[1]), Ordering::Greater);
        }
    }

    fn uniform(n: usize) -> Vec<LayerProfile<f64>> {
        (0..n).map(|i| LayerProfile::plain(i, 1e9, 1e8, 1e5)).collect()
    }

    #[test]
    fn snap_examples() {
        let m = ModelProfile::new("u4", uniform(4)).unwrap();
        assert_eq!(snap_to_boundary(0.5, &m), 2);
        let m = ModelProfile::new("u10", uniform(10)).unwrap();
        assert_eq!(snap_to_boundary(0.49, &m), 5);
        let skewed = ModelProfile::new(
            "skew",
            vec![
                LayerProfile::plain(0, 70.0, 1.0, 1.0),
                LayerProfile::plain(1, 20.0, 1.0, 1.0),
                LayerProfile::plain(2, 10.0, 1.0, 1.0),
            ],
        )
        .unwrap();
        assert_eq!(snap_to_boundary(0.8, &skewed), 1);
    }

    /// Ten identical layers on identical devices with a V-shaped activation
    /// profile: the relaxed latency is convex with its kink at λ = 0.3.
    fn v_shaped() -> Fixture {
        let bw = 12.5e6;
        let a = 0.05 * bw;
        let layers = (0..10)
            .map(|i| {
                let boundary = (i + 1) as f64;
                LayerProfile::plain(i, 1e9, 1e8, 1e6 + a * (boundary - 3.0).abs())
            })
            .collect();
        let d = DeviceProfile::new("d", 1e12, 1e11, 1.0).unwrap();
        Fixture {
            model: ModelProfile::new("v", layers).unwrap(),
            d1: d.clone(),
            d2: d,
            link: LinkProfile::new(bw, 0.0).unwrap(),
            penalties: AccuracyPenaltyTable::zero(),
        }
    }

    #[test]
    fn dense_scan_locates_v_minimum() {
        let f = v_shaped();
        let p = f.problem(0.0);
        let (mut best, mut best_t) = (0.0, f64::INFINITY);
        for i in 1..10_000 {
            let l = i as f64 * 1e-4;
            let t = relaxed_latency(&p, S3, S3, l);
            if t < best_t {
                best_t = t;
                best = l;
            }
        }
        assert!((best - 0.3).abs() <= 1e-4);
    }

    #[test]
    fn relaxed_latency_matches_boundaries() {
        let f = v_shaped();
        let p = f.problem(0.0);
        let fr = f.model.boundary_fractions();
        for cut in f.model.interior_cuts() {
            let discrete = evaluate(&p, cut, S3, S3).unwrap().cost.t_total;
            let relaxed = relaxed_latency(&p, S3, S3, fr[cut]);
            assert!((discrete - relaxed).abs() <= 1e-12 * discrete);
        }
    }

    #[test]
    fn descent_converges_to_kink() {
        let f = v_shaped();
        let p = f.problem(0.0);
        let start = evaluate(&p, 5, S3, S3).unwrap();
        let r = refine_lambda(&p, &start, 1e-3, 500);
        assert!((r.lambda - 0.3).abs() < 1e-3, "λ* = {}", r.lambda);
        assert_eq!(r.trace.len(), 501);
        for w in r.trace.windows(2) {
            // Fixed step on a kinked objective may bounce by at most one step.
            assert!(w[1].1 <= w[0].1 + 1e-3, "{:?}", w);
        }
    }

    #[test]
    fn descent_fixed_point_and_zero_step() {
        let f = v_shaped();
        let p = f.problem(0.0);
        let r = refine_lambda_from(&p, S3, S3, 0.3, 1e-3, 50);
        assert!((r.lambda - 0.3).abs() <= 1e-3 * 0.5 * 1.01);
        let start = evaluate(&p, 7, S3, S3).unwrap();
        let r = refine_lambda(&p, &start, 0.0, 20);
        assert_eq!(r.lambda, f.model.boundary_fractions()[7]);
    }

    #[test]
    fn snapped_plan_no_worse_than_neighbors() {
        let f = v_shaped();
        let p = f.problem(0.0);
        for i in 1..40 {
            let lambda = i as f64 / 40.0;
            let plan = snap_and_compare(&p, S3, S3, lambda).unwrap();
            let fr = f.model.boundary_fractions();
            let upper = f.model.interior_cuts().find(|&k| fr[k] >= lambda).unwrap_or(9);
            let lower = (upper - 1).max(1);
            for cut in [lower, upper] {
                let other = evaluate(&p, cut, S3, S3).unwrap();
                assert!(plan.cost.lagrangian <= other.cost.lagrangian);
            }
        }
    }
}
