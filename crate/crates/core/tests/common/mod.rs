//! Small models and corpora shared by the integration tests.
#![allow(dead_code)]

use elastron::corpus::{synth_corpus, Corpus, DomainKind, DomainSpec, SynthSpec};
use elastron::model::{ElasticModel, ModelConfig, TokenBatch};
use elastron::rng::Rng;

/// Byte vocabulary, two layers, four candidates per slot.
pub fn byte_config() -> ModelConfig {
    ModelConfig::evenly_spaced(256, 16, 2, 4, 32, 16, 4)
}

/// Random init plus a wide perturbation so every weight matters numerically.
pub fn perturbed(config: ModelConfig, seed: u64) -> ElasticModel {
    let mut m = ElasticModel::new(config, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::stream(seed, "perturb");
    for t in m.weights.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.normal(0.3);
        }
    }
    m
}

pub fn random_batch(rng: &mut Rng, batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.below(vocab)).collect())
        .collect();
    TokenBatch::from_rows(&rows).unwrap()
}

pub fn small_spec(per_domain: usize, seq_len: usize) -> SynthSpec {
    SynthSpec {
        domains: vec![
            DomainSpec {
                name: "easy".into(),
                kind: DomainKind::Easy,
                sequences: per_domain,
            },
            DomainSpec {
                name: "hard".into(),
                kind: DomainKind::Hard,
                sequences: per_domain,
            },
        ],
        seq_len,
        ..SynthSpec::default()
    }
}

pub fn small_corpus(seed: u64) -> Corpus {
    synth_corpus(&Rng::new(seed), &small_spec(60, 17)).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
