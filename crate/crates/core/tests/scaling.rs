mod common;

use common::{byte_config, perturbed, small_corpus};
use elastron::latency::{build_cost_table, CostKind, MeasureOptions};
use elastron::model::Selection;
use elastron::rng::Rng;
use elastron::scaling::{
    band_median, eval_law, fit_scaling_law, frontier, pareto_sweep, write_pareto_csv, ScalingFit,
};
use elastron::Error;
use proptest::prelude::*;

fn points(n_c: f64, alpha: f64, e: f64) -> Vec<(f64, f64)> {
    (0..8)
        .map(|i| {
            let n = 10f64.powf(-1.0 + 0.5 * i as f64);
            (n, (n / n_c).powf(-alpha) + e)
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn matformer_row_and_identity_at_n_c() {
    let m = ScalingFit::law(1.680, 52.74, 1.729);
    assert!((eval_law(&m, 1.680).unwrap() - 2.729).abs() < 1e-12);
    let f = ScalingFit::law(2.0, 0.5, 1.7);
    assert_eq!(eval_law(&f, 2.0).unwrap(), 1.7 + 1.0);
    assert!(matches!(eval_law(&f, 0.0), Err(Error::Domain(_))));
    assert!(matches!(eval_law(&f, -3.0), Err(Error::Domain(_))));
}

#[test]
fn approaches_the_floor_from_above() {
    let f = ScalingFit::law(2.0, 0.5, 1.7);
    let mut prev = f64::INFINITY;
    for i in 0..30 {
        let l = eval_law(&f, 10f64.powi(i)).unwrap();
        assert!(l > 1.7 && l < prev);
        prev = l;
    }
    assert!(prev - 1.7 < 1e-12);
}

#[test]
fn recovers_generating_parameters() {
    let fit = fit_scaling_law(&points(2.0, 0.5, 1.7)).unwrap();
    assert!(rel(fit.n_c, 2.0) < 0.01, "{fit:?}");
    assert!(rel(fit.alpha_n, 0.5) < 0.01);
    assert!(rel(fit.e_n, 1.7) < 0.01);
    assert!(fit.rmse < 1e-6);
    assert_eq!(fit.n_points, 8);
}

#[test]
fn constant_shift_moves_only_the_floor() {
    let base = fit_scaling_law(&points(2.0, 0.5, 1.7)).unwrap();
    let shifted: Vec<(f64, f64)> = points(2.0, 0.5, 1.7).into_iter().map(|(n, l)| (n, l + 0.75)).collect();
    let s = fit_scaling_law(&shifted).unwrap();
    assert!(rel(s.n_c, base.n_c) < 0.01);
    assert!(rel(s.alpha_n, base.alpha_n) < 0.01);
    assert!(rel(s.e_n - base.e_n, 0.75) < 0.01);
}

#[test]
fn fits_are_deterministic() {
    let p = points(50.0, 0.3, 0.9);
    let a = fit_scaling_law(&p).unwrap();
    assert_eq!(a, fit_scaling_law(&p).unwrap());
    let doubled: Vec<_> = p.iter().chain(&p).copied().collect();
    let d = fit_scaling_law(&doubled).unwrap();
    assert_eq!(d, fit_scaling_law(&doubled).unwrap());
    assert!(rel(d.n_c, a.n_c) < 1e-3 && rel(d.alpha_n, a.alpha_n) < 1e-3 && rel(d.e_n, a.e_n) < 1e-3);
}

#[test]
fn too_few_distinct_sizes_are_underdetermined() {
    let p = vec![(1.0, 3.0), (1.0, 3.1), (2.0, 2.5), (4.0, 2.2), (4.0, 2.2)];
    assert!(matches!(
        fit_scaling_law(&p),
        Err(Error::Underdetermined { needed: 4, got: 3 })
    ));
}

#[test]
fn sweep_points_carry_parameter_counts_and_sorted_csv() {
    let m = perturbed(byte_config(), 1);
    let t = build_cost_table(&m, CostKind::AnalyticFlops, &MeasureOptions::default()).unwrap();
    let val = small_corpus(1).validation_batches(4, 17, 8).unwrap();
    let given: Vec<Selection> = (1..=4).rev().map(|j| Selection::uniform(2, j)).collect();
    let sweep = pareto_sweep(&m, None, &t, &val, &[], &given, 12, &mut Rng::new(2)).unwrap();
    assert_eq!(sweep.points.len(), 4);
    assert_eq!(sweep.cloud.len(), 12);
    for (p, j) in sweep.points.iter().zip(1..=4) {
        let sel = Selection::uniform(2, j);
        assert_eq!(p.params, m.count_params(&sel).unwrap());
        assert_eq!(p.selection, sel.describe());
    }
    assert!(sweep.cloud.windows(2).all(|w| w[0].cost <= w[1].cost));
    let f = frontier(&sweep.cloud);
    assert!(f.windows(2).all(|w| w[0].cost <= w[1].cost && w[0].loss > w[1].loss));
    assert!(band_median(&sweep.cloud, sweep.cloud[0].cost, 0.0).is_some());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pareto.csv");
    let mut all = sweep.cloud.clone();
    all.extend(sweep.points.iter().cloned());
    write_pareto_csv(&all, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("budget,params,cost,loss,selection"));
    let costs: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(costs.len(), 16);
    assert!(costs.windows(2).all(|w| w[0] <= w[1]));
    assert!(text.lines().all(|l| !l.contains("NaN")));

    let mut bad = all;
    bad[0].loss = f64::NAN;
    assert!(write_pareto_csv(&bad, &path).is_err());
}

proptest! {
    #[test]
    fn law_is_strictly_decreasing(
        n_c in 0.1f64..1e4,
        alpha in 0.01f64..3.0,
        e in 0.0f64..5.0,
        x in 0.01f64..100.0,
        ratio in 1.01f64..10.0,
    ) {
        // N within four decades of N_c keeps the power term above rounding
        let f = ScalingFit::law(n_c, alpha, e);
        let a = x * n_c;
        let (l1, l2) = (eval_law(&f, a).unwrap(), eval_law(&f, a * ratio).unwrap());
        prop_assert!(l2 < l1, "{l1} {l2}");
        prop_assert!(l2 > e);
    }
}
