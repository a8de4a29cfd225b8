use proptest::prelude::*;

use soupmix::dfo::{self, OptimizationProblem, Solver};
use soupmix::partition::{auto_partition, mix_components, MixingVector, PartitionSpec, Strategy as Split};
use soupmix::soups::{
    greedy_soup, manifold_mix_soup, CountingEvaluator, EvalError, FnEvaluator, ManifoldConfig, ModelPool, PoolMember,
};
use soupmix::tensor_store::{self, lincomb, mean, Metadata, ParameterSet};

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        8 => -1e3f32..1e3f32,
        1 => Just(-0.0f32),
        1 => prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
    ]
}

prop_compose! {
    fn schema()(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6)) -> Vec<(String, Vec<usize>)> {
        shapes.into_iter().enumerate().map(|(i, s)| (format!("block{}.t{i}", i % 3), s)).collect()
    }
}

fn params_for(schema: Vec<(String, Vec<usize>)>) -> impl Strategy<Value = ParameterSet> {
    let parts: Vec<_> = schema
        .into_iter()
        .map(|(n, s)| {
            let len = s.iter().product::<usize>();
            prop::collection::vec(finite_f32(), len).prop_map(move |d| (n.clone(), s.clone(), d))
        })
        .collect();
    parts.prop_map(|entries| ParameterSet::from_entries(entries).unwrap())
}

fn bits(ps: &ParameterSet) -> Vec<u32> {
    ps.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn flat(ps: &ParameterSet) -> Vec<f32> {
    ps.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Pairs of same-schema parameter sets with moderate values.
fn pair() -> impl Strategy<Value = (ParameterSet, ParameterSet)> {
    schema().prop_flat_map(|s| {
        let mk = |s: Vec<(String, Vec<usize>)>| {
            let parts: Vec<_> = s
                .into_iter()
                .map(|(n, sh)| {
                    let len = sh.iter().product::<usize>();
                    prop::collection::vec(-10f32..10f32, len).prop_map(move |d| (n.clone(), sh.clone(), d))
                })
                .collect();
            parts.prop_map(|e| ParameterSet::from_entries(e).unwrap())
        };
        (mk(s.clone()), mk(s))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_roundtrip_is_bitwise(ps in schema().prop_flat_map(params_for)) {
        let mut meta = Metadata::new();
        meta.insert("k".into(), "v".into());
        let bytes = tensor_store::to_bytes(&ps, &meta);
        let (back, meta_back) = tensor_store::from_bytes(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&ps));
        prop_assert_eq!(back.names(), ps.names());
        prop_assert_eq!(&meta_back, &meta);
        prop_assert_eq!(tensor_store::to_bytes(&back, &meta), bytes);
    }

    #[test]
    fn mix_endpoints_and_hull((psi, theta) in pair(), m in 1usize..4, raw in prop::collection::vec(0.0f64..=1.0, 4)) {
        let names = psi.names();
        let m = m.min(names.len());
        let spec = auto_partition(&names, m, Split::ContiguousBlocks).unwrap();
        let one = mix_components(&psi, &theta, &spec, &MixingVector::uniform(m, 1.0).unwrap()).unwrap();
        let zero = mix_components(&psi, &theta, &spec, &MixingVector::uniform(m, 0.0).unwrap()).unwrap();
        prop_assert_eq!(bits(&one), bits(&psi));
        prop_assert_eq!(bits(&zero), bits(&theta));

        let lambda = MixingVector::new(raw[..m].to_vec()).unwrap();
        let mixed = mix_components(&psi, &theta, &spec, &lambda).unwrap();
        for ((v, a), b) in flat(&mixed).iter().zip(flat(&psi)).zip(flat(&theta)) {
            prop_assert!(*v >= a.min(b) && *v <= a.max(b));
        }
    }

    #[test]
    fn lincomb_and_mean_stay_in_hull((x, y) in pair(), w in 0.0f64..=1.0) {
        let c = lincomb(w, &x, 1.0 - w, &y).unwrap();
        let m = mean(&[&x, &y, &x]).unwrap();
        for (((cv, mv), a), b) in flat(&c).iter().zip(flat(&m)).zip(flat(&x)).zip(flat(&y)) {
            prop_assert!(*cv >= a.min(b) && *cv <= a.max(b));
            prop_assert!(mv >= a.min(b) && mv <= a.max(b));
        }
    }

    #[test]
    fn auto_partition_covers_schema(n in 1usize..12, m in 1usize..12, prefix_mod in 1usize..5) {
        let names: Vec<String> = (0..n).map(|i| format!("layer{}.sub{}.w{i}", i % prefix_mod, i % 2)).collect();
        if m <= n {
            let spec = auto_partition(&names, m, Split::ContiguousBlocks).unwrap();
            spec.validate(&names).unwrap();
            let comps: Vec<usize> = names.iter().map(|t| spec.component_of(t).unwrap()).collect();
            prop_assert!(comps.windows(2).all(|w| w[0] <= w[1]));
            let sizes: Vec<usize> = (1..=m).map(|c| comps.iter().filter(|&&x| x == c).count()).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        } else {
            prop_assert!(auto_partition(&names, m, Split::ContiguousBlocks).is_err());
        }
        if let Ok(spec) = auto_partition(&names, m, Split::ByNamePrefix) {
            spec.validate(&names).unwrap();
            prop_assert_eq!(spec.m, m);
        }
    }

    #[test]
    fn optimizer_respects_box_and_budget(
        init in prop::collection::vec(0.0f64..=1.0, 1..6),
        centre in prop::collection::vec(0.0f64..1.0, 6),
        budget in 1usize..80,
        nm in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let solver = if nm { Solver::NelderMead } else { Solver::Cobyla };
        let problem = OptimizationProblem::unit_box(init.clone(), budget).with_seed(seed).with_solver(solver);
        let mut calls = 0usize;
        let f = |x: &[f64]| -> f64 { -x.iter().zip(&centre).map(|(a, c)| (a - c).powi(2)).sum::<f64>() };
        let r = dfo::optimize(&problem, |x: &[f64]| -> Result<f64, std::convert::Infallible> {
            calls += 1;
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(f(x))
        }).unwrap();
        prop_assert!(calls <= budget);
        prop_assert_eq!(r.evaluations, calls);
        prop_assert!(r.best_point.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(r.best_value >= f(&init));
        prop_assert_eq!(r.best_value, f(&r.best_point));

        let mut out = init.clone();
        out[0] = 1.5;
        let rejected = dfo::optimize(&OptimizationProblem::unit_box(out, budget), |x: &[f64]| -> Result<f64, std::convert::Infallible> { Ok(f(x)) });
        prop_assert!(rejected.is_err());
    }
}

// ---------------------------------------------------------------------------
// Soup invariants on random pools with a deterministic surrogate accuracy.

fn surrogate(ps: &ParameterSet) -> Result<f64, EvalError> {
    // bumpy landscape, quantized to 1/500 like a 500-example validation set
    let x = flat(ps);
    let d: f64 = x.iter().enumerate().map(|(i, v)| {
        let v = f64::from(*v);
        (v - 0.3 * (i as f64).sin()).powi(2) + 0.05 * (7.0 * v).sin()
    }).sum();
    let acc = 1.0 / (1.0 + d.max(0.0));
    Ok((acc * 500.0).floor() / 500.0)
}

fn random_pool() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (2usize..7, 1usize..6).prop_flat_map(|(n, dim)| {
        prop::collection::vec(prop::collection::vec(-1.5f32..1.5, dim * 2), n)
    })
}

fn pool_from(models: &[Vec<f32>]) -> ModelPool {
    let half = models[0].len() / 2;
    ModelPool::new(
        models
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ps = ParameterSet::from_entries([
                    ("enc.weight".to_string(), vec![half], v[..half].to_vec()),
                    ("head.weight".to_string(), vec![half], v[half..].to_vec()),
                ])
                .unwrap();
                PoolMember::new(format!("m{i}"), ps, None)
            })
            .collect(),
    )
    .unwrap()
}

fn two_components() -> PartitionSpec {
    auto_partition(&["enc.weight", "head.weight"], 2, Split::ContiguousBlocks).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn manifold_soup_invariants(models in random_pool(), tau in prop_oneof![Just(0.998), 0.9f64..=1.0], budget in 1usize..40, seed in any::<u64>()) {
        let eval = CountingEvaluator::new(FnEvaluator::new("surrogate", surrogate));
        let cfg = ManifoldConfig { tau, budget, seed, ..ManifoldConfig::default() };
        let (fused, report) = manifold_mix_soup(pool_from(&models), &two_components(), &eval, &cfg).unwrap();

        // accounting reconciles with the real number of evaluator calls
        let e = &report.evaluations;
        prop_assert_eq!(e.total, eval.calls());
        prop_assert_eq!(e.total, e.sorting + e.gates + e.optimizer + e.acceptance);
        prop_assert_eq!(e.sorting, models.len());

        // monotone: accepted steps strictly improve
        let theta0 = surrogate(&pool_from(&models).members().iter().map(|m| m.params.clone()).max_by(|a, b| surrogate(a).unwrap().total_cmp(&surrogate(b).unwrap())).unwrap()).unwrap();
        let mut acc = theta0;
        let mut accepted = 0;
        for c in &report.candidates {
            prop_assert!(c.optimizer_evals <= budget);
            if c.accepted {
                prop_assert!(c.acc_after.unwrap() > acc);
                acc = c.acc_after.unwrap();
                accepted += 1;
            }
        }
        prop_assert_eq!(report.final_state.k, 1 + accepted);
        prop_assert!(report.final_state.val_acc.unwrap() >= theta0);
        prop_assert_eq!(report.final_state.val_acc.unwrap(), surrogate(&fused).unwrap());

        // convex hull of θ_0 and the accepted ingredients
        let pool = pool_from(&models);
        let members: Vec<Vec<f32>> = report.final_state.ingredients.iter()
            .map(|id| flat(&pool.members().iter().find(|m| &m.id == id).unwrap().params))
            .collect();
        for (j, v) in flat(&fused).iter().enumerate() {
            let lo = members.iter().map(|m| m[j]).fold(f32::INFINITY, f32::min);
            let hi = members.iter().map(|m| m[j]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }

        // determinism
        let (again, report2) = manifold_mix_soup(pool_from(&models), &two_components(), &FnEvaluator::new("surrogate", surrogate), &cfg).unwrap();
        prop_assert_eq!(bits(&again), bits(&fused));
        prop_assert_eq!(report2.to_json(), report.to_json());
    }

    #[test]
    fn greedy_soup_invariants(models in random_pool()) {
        let eval = CountingEvaluator::new(FnEvaluator::new("surrogate", surrogate));
        let (fused, report) = greedy_soup(pool_from(&models), &eval).unwrap();
        prop_assert_eq!(report.evaluations.total, eval.calls());
        let mut acc = report.candidates.first().and_then(|c| c.acc_before).unwrap_or(0.0);
        let theta0 = acc;
        for c in &report.candidates {
            prop_assert_eq!(c.acc_before, Some(acc));
            if c.accepted {
                prop_assert!(c.acc_after.unwrap() > acc);
                acc = c.acc_after.unwrap();
            }
        }
        prop_assert!(report.final_state.val_acc.unwrap() >= theta0);
        prop_assert_eq!(surrogate(&fused).unwrap(), report.final_state.val_acc.unwrap());
    }

    /// With budget 1 and τ = 0 every gate passes and the optimizer only sees
    /// λ = k/(k+1), so the run reduces to a running average that keeps a
    /// candidate iff that average improves accuracy.
    #[test]
    fn budget_one_tau_zero_is_running_average(models in random_pool()) {
        let cfg = ManifoldConfig { tau: 0.0, budget: 1, ..ManifoldConfig::default() };
        let eval = FnEvaluator::new("surrogate", surrogate);
        let (fused, report) = manifold_mix_soup(pool_from(&models), &two_components(), &eval, &cfg).unwrap();

        // replay
        let mut members: Vec<(f64, ParameterSet)> = pool_from(&models).members().iter()
            .map(|m| (surrogate(&m.params).unwrap(), m.params.clone())).collect();
        members.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut acc, mut psi) = members[0].clone();
        let mut k = 1usize;
        let mut decisions = Vec::new();
        for (_, theta) in &members[1..] {
            let kf = k as f64;
            let avg = lincomb(kf / (kf + 1.0), &psi, 1.0 / (kf + 1.0), theta).unwrap();
            let a = surrogate(&avg).unwrap();
            let keep = a > acc;
            decisions.push(keep);
            if keep {
                psi = avg;
                acc = a;
                k += 1;
            }
        }
        let got: Vec<bool> = report.candidates.iter().map(|c| c.accepted).collect();
        prop_assert_eq!(got, decisions);
        prop_assert!(report.candidates.iter().all(|c| c.gate_pass == Some(true)));
        prop_assert_eq!(report.final_state.k, k);
        prop_assert_eq!(bits(&fused), bits(&psi));
    }
}
