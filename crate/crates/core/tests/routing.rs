mod common;

use common::{byte_config, perturbed, random_batch, rel_err, small_corpus};
use elastron::corpus::Corpus;
use elastron::latency::{build_cost_table, selection_cost, CostKind, CostTable, MeasureOptions};
use elastron::model::{ElasticModel, LayerChoice, Selection};
use elastron::rng::Rng;
use elastron::routing::{
    dynamic_eval, extract_selection, extract_subnetwork, joint_finetune, route_static,
    router_decision_stats, surrogate_forward, train_dynamic_routers, train_routers,
    DynamicRouter, ParamSet, Phase, RouterConfig, RouterTrainState, StaticRouter, SurrogateModel,
};
use elastron::tape::{Tape, Var};
use elastron::tensor::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn setup() -> (ElasticModel, CostTable, Corpus) {
    let m = ElasticModel::new(byte_config(), &mut Rng::new(0)).unwrap();
    let t = build_cost_table(&m, CostKind::AnalyticFlops, &MeasureOptions::default()).unwrap();
    (m, t, small_corpus(0))
}

fn quick(tau: f64) -> RouterConfig {
    RouterConfig {
        tau,
        steps: 40,
        batch_size: 4,
        seq_len: 17,
        monitor_sequences: 4,
        finetune_steps: 0,
        ..RouterConfig::default()
    }
}

fn fresh_router(m: &ElasticModel, seed: u64) -> StaticRouter {
    StaticRouter::new(2 * m.config.num_layers, m.config.candidates(), 16, &mut Rng::new(seed))
}

#[test]
fn routing_is_deterministic() {
    let r = fresh_router(&ElasticModel::new(byte_config(), &mut Rng::new(0)).unwrap(), 3);
    for t in [0.3, 0.5, 0.9] {
        assert_eq!(route_static(&r, t).unwrap(), route_static(&r, t).unwrap());
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let sm = SurrogateModel::new(8, 6, None, &mut Rng::new(1));
    let mut rng = Rng::new(2);
    let r = Tensor::new(vec![3, 8], (0..24).map(|_| rng.normal(1.0)).collect()).unwrap();
    let total = |r: &Tensor| surrogate_forward(&sm, r, None).unwrap().iter().sum::<f64>();

    let mut tape = Tape::new();
    let vars: Vec<Var> = sm.params().into_iter().map(|t| tape.constant(t.clone())).collect();
    let rv = tape.param(r.clone());
    let out = sm.forward_on(&mut tape, &vars, rv, None).unwrap();
    assert_eq!(tape.value(out).shape(), &[3, 1]);
    let s = tape.sum(out);
    let analytic = tape.backward(s).unwrap().get(rv).unwrap().data().to_vec();
    let numeric: Vec<f64> = (0..r.len())
        .map(|e| {
            let (mut p, mut q) = (r.clone(), r.clone());
            p.data_mut()[e] += H;
            q.data_mut()[e] -= H;
            (total(&p) - total(&q)) / (2.0 * H)
        })
        .collect();
    assert!(rel_err(&analytic, &numeric) < 1e-6);
}

#[test]
fn infinite_tau_opens_the_gate_at_once() {
    let (m, t, c) = setup();
    let out = train_routers(&m, &fresh_router(&m, 0), &t, &c, &quick(f64::INFINITY)).unwrap();
    assert!(out.log.records.iter().all(|r| r.phase == Phase::Joint));
    assert_eq!(out.log.records.len(), 40);
}

#[test]
fn zero_tau_trains_on_the_budget_alone() {
    let (m, t, c) = setup();
    // the byte head dominates this tiny model: the minimal selection costs 0.58
    let cfg = RouterConfig { targets: vec![0.65, 0.75, 0.85], ..quick(0.0) };
    assert!(t.min_cost() < 0.65 * t.full_cost());
    let out = train_routers(&m, &fresh_router(&m, 0), &t, &c, &cfg).unwrap();
    assert!(out.log.records.iter().all(|r| r.phase == Phase::SmOnly));
    for &target in &cfg.targets {
        let (sel, _) = route_static(&out.router, target).unwrap();
        assert!(selection_cost(&t, &sel).unwrap() <= 1.02 * target * t.full_cost());
    }
    // a closed gate means the surrogate cannot influence the routers
    let other = RouterConfig { sm_hidden: 7, sm_lr: 1e-1, ..cfg };
    let out2 = train_routers(&m, &fresh_router(&m, 0), &t, &c, &other).unwrap();
    assert_eq!(out.router, out2.router);
    assert_ne!(out.surrogate.w1.shape(), out2.surrogate.w1.shape());
}

#[test]
fn logged_phases_follow_the_error_average() {
    let (m, t, c) = setup();
    let cfg = RouterConfig { tau: 0.5, ema_decay: 0.8, ..quick(0.5) };
    let out = train_routers(&m, &fresh_router(&m, 1), &t, &c, &cfg).unwrap();
    let mut replay = RouterTrainState::new(&cfg);
    for r in &out.log.records {
        replay.observe(r.l2_loss);
        assert_eq!(replay.phase, r.phase, "step {}", r.step);
        assert!(r.l2_loss.is_finite() && r.lm_loss.is_finite() && r.latency_loss >= 0.0);
    }
    assert_eq!(replay, out.state);
}

#[test]
fn training_is_reproducible() {
    let (m, t, c) = setup();
    let a = train_routers(&m, &fresh_router(&m, 2), &t, &c, &quick(0.1)).unwrap();
    let b = train_routers(&m, &fresh_router(&m, 2), &t, &c, &quick(0.1)).unwrap();
    assert_eq!(a.router, b.router);
    assert_eq!(a.surrogate, b.surrogate);
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_finetune_steps_is_a_no_op() {
    let (m, t, c) = setup();
    let r = fresh_router(&m, 4);
    let (m2, r2) = joint_finetune(&m, &r, &t, &c, &quick(0.1)).unwrap();
    assert_eq!(m2, m);
    assert_eq!(r2, r);
}

#[test]
fn finetune_moves_weights_and_keeps_finite() {
    let (m, t, c) = setup();
    let r = fresh_router(&m, 4);
    let cfg = RouterConfig { finetune_steps: 3, ..quick(0.1) };
    let (m2, r2) = joint_finetune(&m, &r, &t, &c, &cfg).unwrap();
    assert_ne!(m2, m);
    assert!(m2.weights.tensors().iter().all(|t| t.is_finite()));
    assert!(r2.params.iter().all(|t| t.is_finite()));
}

#[test]
fn full_budget_extraction_is_the_full_model() {
    let m = perturbed(byte_config(), 5);
    let (dense, sel) = extract_subnetwork(&m, &fresh_router(&m, 5), 1.0).unwrap();
    assert_eq!(sel, Selection::full(&m.config));
    assert_eq!(dense.weights, m.weights);
}

#[test]
fn decision_histograms_sum_to_one() {
    let (m, _, c) = setup();
    let r = DynamicRouter::new(4, 4, 8, m.config.embed_dim, &mut Rng::new(6));
    let rows = router_decision_stats(&m, &r, &c, 0.6, 16, 6).unwrap();
    for domain in &c.domains {
        for slot in 0..4 {
            let s: f64 = rows
                .iter()
                .filter(|x| &x.domain == domain && x.slot == slot)
                .map(|x| x.frequency)
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicated_domain_gives_identical_histograms() {
    let (m, _, c) = setup();
    let seqs: Vec<Vec<usize>> = c.validation.iter().map(|s| s.tokens.clone()).collect();
    let twin = Corpus::from_domains(vec![("a".into(), seqs.clone()), ("b".into(), seqs)], 0.0).unwrap();
    let r = DynamicRouter::new(4, 4, 8, m.config.embed_dim, &mut Rng::new(7));
    let rows = router_decision_stats(&m, &r, &twin, 0.5, 16, 8).unwrap();
    let of = |d: &str| -> Vec<(usize, usize, f64)> {
        rows.iter().filter(|x| x.domain == d).map(|x| (x.slot, x.candidate, x.frequency)).collect()
    };
    assert_eq!(of("a"), of("b"));
    assert!(!of("a").is_empty());
}

#[test]
fn dynamic_training_runs_and_evaluates() {
    let (m, t, c) = setup();
    let r = DynamicRouter::new(4, 4, 8, m.config.embed_dim, &mut Rng::new(8));
    let cfg = RouterConfig { targets: vec![0.6], steps: 10, ..quick(0.1) };
    let out = train_dynamic_routers(&m, &r, &t, &c, &cfg).unwrap();
    assert_eq!(out.log.records.len(), 10);
    let val = c.validation_batches(4, 17, 8).unwrap();
    let (loss, cost) = dynamic_eval(&m, &out.router, &t, &val, 0.6).unwrap();
    assert!(loss.is_finite());
    assert!(cost > t.min_cost() / t.full_cost() - 1e-12 && cost <= 1.0 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn extracted_model_matches_elastic_forward(raw in proptest::collection::vec(1usize..=4, 4), seed in 0u64..100) {
        let m = perturbed(byte_config(), seed);
        let sel = Selection(raw.chunks(2).map(|p| LayerChoice { mha: p[0], mlp: p[1] }).collect());
        let dense = extract_selection(&m, &sel).unwrap();
        let batch = random_batch(&mut Rng::new(seed), 2, 8, 256);
        prop_assert_eq!(dense.forward(&batch).unwrap(), m.forward(&batch, &sel).unwrap());
        prop_assert_eq!(dense.count_params(), m.count_params(&sel).unwrap());
    }

    #[test]
    fn argmax_survives_positive_scaling(seed in 0u64..1000, scale in 0.01f64..100.0, t_hat in 0.05f64..1.0) {
        let m = ElasticModel::new(byte_config(), &mut Rng::new(0)).unwrap();
        let mut r = fresh_router(&m, seed);
        let mut rng = Rng::stream(seed, "out");
        for s in 0..r.slots() {
            for i in [4 * s + 2, 4 * s + 3] {
                for v in r.params[i].data_mut() {
                    *v = rng.normal(1.0);
                }
            }
        }
        let before = route_static(&r, t_hat).unwrap().0;
        // the output layer is linear, so scaling it scales the logits
        for s in 0..r.slots() {
            for i in [4 * s + 2, 4 * s + 3] {
                r.params[i] = r.params[i].map(|v| v * scale);
            }
        }
        prop_assert_eq!(route_static(&r, t_hat).unwrap().0, before);
    }
}
