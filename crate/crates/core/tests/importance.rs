mod common;

use common::{byte_config, perturbed, random_batch};
use elastron::importance::{
    apply_plan, build_plan, score_importance, ImportanceScores, LayerPerm, LayerScores,
    PermutationPlan,
};
use elastron::model::Selection;
use elastron::rng::Rng;
use elastron::tensor::Tensor;
use elastron::Error;
use proptest::prelude::*;

fn calib(seed: u64) -> Vec<elastron::model::TokenBatch> {
    let mut rng = Rng::new(seed);
    (0..2).map(|_| random_batch(&mut rng, 3, 12, 256)).collect()
}

fn random_plan(rng: &mut Rng, heads: usize, hidden: usize, layers: usize) -> PermutationPlan {
    let mut plan = PermutationPlan::identity(heads, hidden, layers);
    for l in &mut plan.layers {
        rng.shuffle(&mut l.head_perm);
        rng.shuffle(&mut l.neuron_perm);
    }
    plan
}

#[test]
fn zero_first_mlp_matrix_gives_zero_neuron_scores() {
    let mut m = perturbed(byte_config(), 1);
    for b in &mut m.weights.blocks {
        b.w1 = Tensor::zeros(b.w1.shape());
    }
    let s = score_importance(&m, &calib(0), 100).unwrap();
    assert!(s.layers.iter().all(|l| l.neuron_scores.iter().all(|&v| v == 0.0)));
    assert!(s.layers.iter().all(|l| l.head_scores.iter().all(|&v| v > 0.0)));
}

#[test]
fn duplicated_calibration_doubles_every_score() {
    let m = perturbed(byte_config(), 2);
    let once = calib(3);
    let twice: Vec<_> = once.iter().chain(once.iter()).cloned().collect();
    let a = score_importance(&m, &once, 1000).unwrap();
    let b = score_importance(&m, &twice, 1000).unwrap();
    assert_eq!(b.sample_count, 2 * a.sample_count);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la.head_scores.iter().chain(&la.neuron_scores).zip(lb.head_scores.iter().chain(&lb.neuron_scores)) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs(), "{x} vs {y}");
        }
    }
}

#[test]
fn empty_calibration_is_a_data_error() {
    let m = perturbed(byte_config(), 0);
    assert!(matches!(score_importance(&m, &[], 8), Err(Error::Data(_))));
    assert!(matches!(score_importance(&m, &calib(0), 0), Err(Error::Param(_))));
}

#[test]
fn plan_examples() {
    let scores = ImportanceScores {
        layers: vec![LayerScores {
            head_scores: vec![3.0, 1.0, 2.0],
            neuron_scores: vec![0.5; 4],
        }],
        sample_count: 1,
    };
    let plan = build_plan(&scores);
    assert_eq!(plan.layers[0].head_perm, vec![0, 2, 1]);
    assert_eq!(plan.layers[0].neuron_perm, vec![0, 1, 2, 3]);
}

#[test]
fn identity_plan_leaves_weights_bitwise() {
    let m = perturbed(byte_config(), 4);
    let c = &m.config;
    let out = apply_plan(&m, &PermutationPlan::identity(c.num_heads, c.mlp_hidden, c.num_layers)).unwrap();
    assert_eq!(out, m);
}

#[test]
fn plan_then_inverse_restores_weights_bitwise() {
    let m = perturbed(byte_config(), 5);
    let c = m.config.clone();
    let plan = random_plan(&mut Rng::new(6), c.num_heads, c.mlp_hidden, c.num_layers);
    let back = apply_plan(&apply_plan(&m, &plan).unwrap(), &plan.inverse()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn mismatched_plan_is_rejected() {
    let m = perturbed(byte_config(), 0);
    let c = &m.config;
    let short = PermutationPlan::identity(c.num_heads, c.mlp_hidden, c.num_layers - 1);
    assert!(apply_plan(&m, &short).is_err());
    let mut bad = PermutationPlan::identity(c.num_heads, c.mlp_hidden, c.num_layers);
    bad.layers[0] = LayerPerm {
        head_perm: vec![0, 0, 1, 2],
        neuron_perm: (0..c.mlp_hidden).collect(),
    };
    assert!(apply_plan(&m, &bad).is_err());
}

#[test]
fn sorted_model_rescored_is_non_increasing() {
    let m = perturbed(byte_config(), 7);
    let cal = calib(8);
    let sorted = apply_plan(&m, &build_plan(&score_importance(&m, &cal, 100).unwrap())).unwrap();
    let again = score_importance(&sorted, &cal, 100).unwrap();
    for l in &again.layers {
        for s in [&l.head_scores, &l.neuron_scores] {
            for w in s.windows(2) {
                assert!(w[0] >= w[1] - 1e-9 * w[0].abs(), "{:?}", s);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_plan_preserves_full_logits(seed in 0u64..1000) {
        let m = perturbed(byte_config(), seed);
        let c = m.config.clone();
        let mut rng = Rng::stream(seed, "plan");
        let plan = random_plan(&mut rng, c.num_heads, c.mlp_hidden, c.num_layers);
        let p = apply_plan(&m, &plan).unwrap();
        let batch = random_batch(&mut rng, 2, 9, c.vocab_size);
        let full = Selection::full(&c);
        let d = m.forward(&batch, &full).unwrap().max_abs_diff(&p.forward(&batch, &full).unwrap());
        prop_assert!(d < 1e-10, "max diff {d}");
    }

    #[test]
    fn planned_scores_are_non_increasing(scores in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
        let plan = build_plan(&ImportanceScores {
            layers: vec![LayerScores { head_scores: scores.clone(), neuron_scores: scores.clone() }],
            sample_count: 1,
        });
        let ordered: Vec<f64> = plan.layers[0].head_perm.iter().map(|&i| scores[i]).collect();
        prop_assert!(ordered.windows(2).all(|w| w[0] >= w[1]));
        let mut seen = plan.layers[0].head_perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
    }
}
