mod common;

use common::byte_config;
use elastron::latency::{
    build_cost_table, constraint_loss, constraint_loss_on, selection_cost, BudgetTarget, CostKind,
    CostTable, MeasureOptions,
};
use elastron::model::{ElasticModel, LayerChoice, Selection};
use elastron::rng::Rng;
use elastron::tape::Tape;
use elastron::tensor::Tensor;
use proptest::prelude::*;

fn model() -> ElasticModel {
    ElasticModel::new(byte_config(), &mut Rng::new(0)).unwrap()
}

fn table(kind: CostKind) -> CostTable {
    let opts = MeasureOptions {
        warmups: 1,
        repeats: 3,
        ..MeasureOptions::default()
    };
    build_cost_table(&model(), kind, &opts).unwrap()
}

fn selection_from(raw: &[usize], k: usize) -> Selection {
    Selection(
        raw.chunks(2)
            .map(|p| LayerChoice { mha: 1 + p[0] % k, mlp: 1 + p[1] % k })
            .collect(),
    )
}

#[test]
fn parameter_kind_mlp_is_two_d_c() {
    let m = model();
    let t = table(CostKind::ParameterCount);
    let c = m.config.embed_dim as f64;
    for layer in 0..m.config.num_layers {
        for (j, &d) in m.config.mlp_widths.iter().enumerate() {
            assert_eq!(t.mlp[layer][j], 2.0 * d as f64 * c);
        }
    }
}

#[test]
fn every_kind_is_strictly_nested() {
    for kind in [CostKind::AnalyticFlops, CostKind::ParameterCount, CostKind::MeasuredLatency] {
        let t = table(kind);
        assert_eq!(t.kind, kind);
        for s in 0..2 * t.layers() {
            assert!(t.slot(s).windows(2).all(|w| w[0] < w[1]), "{kind:?} slot {s}");
        }
    }
}

#[test]
fn attention_score_term_is_linear_in_width() {
    let m = model();
    let at = |seq_len| {
        let opts = MeasureOptions { seq_len, ..MeasureOptions::default() };
        build_cost_table(&m, CostKind::AnalyticFlops, &opts).unwrap()
    };
    let (short, long) = (at(4), at(12));
    // the sequence-dependent part is the score term; per unit width it is constant
    let per_width: Vec<f64> = m
        .config
        .head_counts
        .iter()
        .enumerate()
        .map(|(j, &a)| (long.mha[0][j] - short.mha[0][j]) / (a * m.config.head_dim) as f64)
        .collect();
    assert!(per_width.iter().all(|&v| (v - per_width[0]).abs() < 1e-9 && v > 0.0));
    assert_eq!(short.mlp, long.mlp);
}

#[test]
fn full_and_minimal_costs() {
    let m = model();
    let t = table(CostKind::AnalyticFlops);
    assert_eq!(selection_cost(&t, &Selection::full(&m.config)).unwrap(), t.full_cost());
    let smallest: f64 = (0..2 * t.layers()).map(|s| t.slot(s)[0]).sum();
    assert_eq!(selection_cost(&t, &Selection::minimal(&m.config)).unwrap(), t.overhead + smallest);
}

#[test]
fn bad_selection_is_rejected() {
    let t = table(CostKind::AnalyticFlops);
    assert!(selection_cost(&t, &Selection::uniform(3, 1)).is_err());
    assert!(selection_cost(&t, &Selection::uniform(2, 5)).is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lut.csv");
    for kind in [CostKind::AnalyticFlops, CostKind::ParameterCount] {
        let t = table(kind);
        t.write_csv(&path).unwrap();
        assert_eq!(CostTable::read_csv(&path).unwrap(), t);
    }
}

#[test]
fn budget_targets_round_trip_and_validate() {
    let t = table(CostKind::AnalyticFlops);
    let b = BudgetTarget::new(0.6).unwrap();
    let back = BudgetTarget::from_absolute(b.absolute(&t), &t).unwrap();
    assert!((back.normalized - 0.6).abs() < 1e-12);
    assert!(BudgetTarget::new(0.0).is_err());
    assert!(BudgetTarget::new(1.5).is_err());
}

#[test]
fn hinge_examples_and_subgradient() {
    assert_eq!(constraint_loss(&[5.0], &[7.0]).unwrap(), 0.0);
    assert_eq!(constraint_loss(&[7.0], &[5.0]).unwrap(), 2.0);
    assert_eq!(constraint_loss(&[5.0, 5.0], &[4.0, 6.0]).unwrap(), 1.0);

    let mut tape = Tape::new();
    let costs: Vec<_> = [5.0, 5.0].iter().map(|&c| tape.param(Tensor::scalar(c))).collect();
    let l = constraint_loss_on(&mut tape, &costs, &[4.0, 6.0]).unwrap();
    assert_eq!(tape.value(l).item(), 1.0);
    let g = tape.backward(l).unwrap();
    let slopes: Vec<f64> = costs.iter().map(|&v| g.get(v).map_or(0.0, |t| t.item())).collect();
    assert_eq!(slopes, vec![1.0, 0.0]);
}

proptest! {
    #[test]
    fn parameter_cost_equals_count_params(raw in proptest::collection::vec(0usize..4, 4)) {
        let m = model();
        let sel = selection_from(&raw, 4);
        let t = table(CostKind::ParameterCount);
        prop_assert_eq!(selection_cost(&t, &sel).unwrap(), m.count_params(&sel).unwrap() as f64);
    }

    #[test]
    fn one_slot_change_moves_cost_by_its_delta(
        raw in proptest::collection::vec(0usize..4, 4),
        slot in 0usize..4,
        to in 0usize..4,
    ) {
        let t = table(CostKind::AnalyticFlops);
        let a = selection_from(&raw, 4);
        let mut changed = raw.clone();
        changed[slot] = to;
        let b = selection_from(&changed, 4);
        let delta = t.slot(slot)[to] - t.slot(slot)[raw[slot]];
        let d = selection_cost(&t, &b).unwrap() - selection_cost(&t, &a).unwrap();
        prop_assert!((d - delta).abs() <= 1e-9 * t.full_cost());
        // monotone in each index
        prop_assert_eq!(d > 0.0, to > raw[slot]);
    }

    #[test]
    fn hinge_is_zero_iff_budgets_met(
        pairs in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..6),
    ) {
        let (costs, targets): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let l = constraint_loss(&costs, &targets).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, costs.iter().zip(&targets).all(|(c, t)| c <= t));
    }
}
