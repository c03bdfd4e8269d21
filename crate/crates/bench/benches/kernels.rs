use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elastron::model::{ElasticModel, ModelConfig, Selection, TokenBatch};
use elastron::rng::Rng;
use elastron::tape::Tape;
use elastron::tensor::{matmul, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = random(&[n, n], &mut rng);
        let b = random(&[n, n], &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(&a, &b).unwrap())
        });
    }
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (batch, seq, heads, hd) = (4, 64, 4, 16);
    let q = random(&[batch * seq, heads * hd], &mut rng);
    let k = random(&[batch * seq, heads * hd], &mut rng);
    let v = random(&[batch * seq, heads * hd], &mut rng);
    c.bench_function("attention_fwd_bwd", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.param(q.clone()), tape.param(k.clone()), tape.param(v.clone()));
            let out = tape.attention(qv, kv, vv, batch, seq, heads).unwrap();
            let s = tape.sum(out);
            tape.backward(s).unwrap()
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = ElasticModel::new(cfg.clone(), &mut Rng::new(2)).unwrap();
    let mut rng = Rng::new(3);
    let rows: Vec<Vec<usize>> = (0..4)
        .map(|_| (0..cfg.context_len).map(|_| rng.below(cfg.vocab_size)).collect())
        .collect();
    let tokens = TokenBatch::from_rows(&rows).unwrap();
    let mut g = c.benchmark_group("elastic_forward");
    for j in 1..=cfg.candidates() {
        let sel = Selection::uniform(cfg.num_layers, j);
        g.bench_with_input(BenchmarkId::from_parameter(sel.describe()), &sel, |bch, sel| {
            bch.iter(|| model.forward(&tokens, sel).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_forward);
criterion_main!(benches);
