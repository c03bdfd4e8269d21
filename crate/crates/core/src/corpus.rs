//! Byte-token corpora: file ingestion, a two-domain synthetic generator, and
//! batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub domain: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    /// Domain label of each shard, indexed by [`Sequence::domain`].
    pub domains: Vec<String>,
    pub train: Vec<Sequence>,
    pub validation: Vec<Sequence>,
}

/// UTF-8 text to byte tokens.
pub fn bytes_to_tokens(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

fn split_point(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).min(n)
}

impl Corpus {
    /// Builds a corpus from per-domain sequence lists, splitting each domain by
    /// sequence index.
    pub fn from_domains(shards: Vec<(String, Vec<Vec<usize>>)>, train_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Param(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut corpus = Corpus {
            domains: Vec::new(),
            train: Vec::new(),
            validation: Vec::new(),
        };
        for (d, (name, seqs)) in shards.into_iter().enumerate() {
            corpus.domains.push(name);
            let cut = split_point(seqs.len(), train_fraction);
            for (i, tokens) in seqs.into_iter().enumerate() {
                let s = Sequence { domain: d, tokens };
                if i < cut {
                    corpus.train.push(s);
                } else {
                    corpus.validation.push(s);
                }
            }
        }
        Ok(corpus)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    /// Validation sequences of one domain.
    pub fn validation_of(&self, domain: usize) -> Vec<&Sequence> {
        self.validation.iter().filter(|s| s.domain == domain).collect()
    }

    /// 64-bit FNV-1a digest over domains and token streams.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for d in &self.domains {
            for b in d.bytes() {
                eat(b as u64);
            }
            eat(u64::MAX);
        }
        for (tag, part) in [(1u64, &self.train), (2, &self.validation)] {
            eat(tag);
            for s in part {
                eat(s.domain as u64);
                for &t in &s.tokens {
                    eat(t as u64);
                }
            }
        }
        h
    }

    /// Up to `max_sequences` validation sequences taken round-robin across
    /// domains, so a cap keeps every domain represented.
    pub fn validation_sample(&self, max_sequences: usize) -> Vec<&Sequence> {
        let per: Vec<Vec<&Sequence>> = (0..self.domains.len()).map(|d| self.validation_of(d)).collect();
        let longest = per.iter().map(Vec::len).max().unwrap_or(0);
        (0..longest)
            .flat_map(|i| per.iter().filter_map(move |p| p.get(i).copied()))
            .take(max_sequences)
            .collect()
    }

    /// Fixed validation batches of up to `batch_size` sequences, cropped to `seq_len`.
    pub fn validation_batches(
        &self,
        batch_size: usize,
        seq_len: usize,
        max_sequences: usize,
    ) -> Result<Vec<TokenBatch>> {
        batches_of(&self.validation_sample(max_sequences), batch_size, seq_len)
    }
}

pub fn batches_of(seqs: &[&Sequence], batch_size: usize, seq_len: usize) -> Result<Vec<TokenBatch>> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences to batch".into()));
    }
    seqs.chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<Vec<usize>> = chunk
                .iter()
                .map(|s| s.tokens[..seq_len.min(s.tokens.len())].to_vec())
                .collect();
            TokenBatch::from_rows(&rows)
        })
        .collect()
}

/// Reads each file as one domain (named by its file stem), maps UTF-8 bytes
/// to tokens and cuts non-overlapping sequences of `seq_len`.
pub fn ingest_corpus(paths: &[PathBuf], seq_len: usize, train_fraction: f64) -> Result<Corpus> {
    if seq_len == 0 {
        return Err(Error::Param("sequence length must be positive".into()));
    }
    let mut shards = Vec::with_capacity(paths.len());
    for path in paths {
        let fail = |reason: String| Error::Ingestion {
            path: path.clone(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        if text.is_empty() {
            return Err(fail("file is empty".into()));
        }
        let tokens = bytes_to_tokens(&text);
        if tokens.len() < seq_len {
            return Err(fail(format!(
                "{} bytes is shorter than one sequence of {seq_len}",
                tokens.len()
            )));
        }
        let seqs = tokens.chunks_exact(seq_len).map(<[usize]>::to_vec).collect();
        shards.push((shard_name(path), seqs));
    }
    if shards.is_empty() {
        return Err(Error::Data("no corpus files given".into()));
    }
    Corpus::from_domains(shards, train_fraction)
}

fn shard_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// Short motifs over a four-letter alphabet, repeated to fill the sequence.
    Easy,
    /// Sixteen-letter order-2 Markov text with a fixed random transition
    /// table, uniform noise, and a closing segment that copies the opening.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub kind: DomainKind,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub domains: Vec<DomainSpec>,
    pub seq_len: usize,
    pub train_fraction: f64,
    /// Probability that a hard-domain token ignores the transition table.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            domains: vec![
                DomainSpec {
                    name: "easy".into(),
                    kind: DomainKind::Easy,
                    sequences: 600,
                },
                DomainSpec {
                    name: "hard".into(),
                    kind: DomainKind::Hard,
                    sequences: 600,
                },
            ],
            seq_len: 33,
            train_fraction: 0.9,
            noise: 0.25,
        }
    }
}

const EASY_ALPHABET: &[u8] = b"abcd";
const HARD_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOP";

fn easy_sequence(rng: &mut Rng, len: usize) -> Vec<usize> {
    let period = 2 + rng.below(3);
    let motif: Vec<usize> = (0..period)
        .map(|_| EASY_ALPHABET[rng.below(EASY_ALPHABET.len())] as usize)
        .collect();
    let phase = rng.below(period);
    (0..len).map(|i| motif[(i + phase) % period]).collect()
}

fn hard_sequence(rng: &mut Rng, table: &[usize], noise: f64, len: usize) -> Vec<usize> {
    let a = HARD_ALPHABET.len();
    let mut idx: Vec<usize> = vec![rng.below(a), rng.below(a)];
    while idx.len() < len {
        let n = idx.len();
        let next = if rng.uniform() < noise {
            rng.below(a)
        } else {
            table[idx[n - 2] * a + idx[n - 1]]
        };
        idx.push(next);
    }
    // closing quarter repeats the opening quarter
    let q = len / 4;
    for i in 0..q {
        idx[len - q + i] = idx[i];
    }
    idx.into_iter().map(|i| HARD_ALPHABET[i] as usize).collect()
}

/// Labeled synthetic shards; identical `(rng seed, spec)` yields an identical corpus.
pub fn synth_corpus(rng: &Rng, spec: &SynthSpec) -> Result<Corpus> {
    if spec.domains.is_empty() {
        return Err(Error::Param("synthetic corpus needs at least one domain".into()));
    }
    if spec.seq_len < 2 {
        return Err(Error::Param("synthetic sequences need at least 2 tokens".into()));
    }
    let a = HARD_ALPHABET.len();
    let mut table_rng = rng.substream("synth.table");
    let table: Vec<usize> = (0..a * a).map(|_| table_rng.below(a)).collect();
    let mut shards = Vec::with_capacity(spec.domains.len());
    for d in &spec.domains {
        let mut r = rng.substream(&format!("synth.{}", d.name));
        let seqs = (0..d.sequences)
            .map(|_| match d.kind {
                DomainKind::Easy => easy_sequence(&mut r, spec.seq_len),
                DomainKind::Hard => hard_sequence(&mut r, &table, spec.noise, spec.seq_len),
            })
            .collect();
        shards.push((d.name.clone(), seqs));
    }
    Corpus::from_domains(shards, spec.train_fraction)
}

/// Empirical unigram entropy in bits.
pub fn byte_entropy<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> f64 {
    let mut counts = [0usize; 256];
    let mut total = 0usize;
    for s in seqs {
        for &t in &s.tokens {
            counts[t.min(255)] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Shuffled-epoch sampler over the training split.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(corpus: &Corpus, rng: Rng) -> Result<Self> {
        if corpus.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut b = Self {
            order: (0..corpus.train.len()).collect(),
            cursor: 0,
            rng,
        };
        b.rng.shuffle(&mut b.order);
        Ok(b)
    }

    pub fn next_batch(&mut self, corpus: &Corpus, batch_size: usize, seq_len: usize) -> Result<TokenBatch> {
        let mut rows = Vec::with_capacity(batch_size);
        while rows.len() < batch_size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.rng.shuffle(&mut self.order);
            }
            let s = &corpus.train[self.order[self.cursor]];
            self.cursor += 1;
            if s.tokens.len() < seq_len {
                return Err(Error::Data(format!(
                    "sequence of {} tokens is shorter than {seq_len}",
                    s.tokens.len()
                )));
            }
            rows.push(s.tokens[..seq_len].to_vec());
        }
        TokenBatch::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(bytes_to_tokens("AB"), vec![65, 66]);
    }

    #[test]
    fn split_by_sequence_index() {
        let seqs: Vec<Vec<usize>> = (0..100).map(|i| vec![i % 256, 1]).collect();
        let c = Corpus::from_domains(vec![("x".into(), seqs)], 0.9).unwrap();
        assert_eq!(c.train.len(), 90);
        assert_eq!(c.validation.len(), 10);
        assert_eq!(c.validation[0].tokens[0], 90);
    }

    #[test]
    fn ingestion_reads_chunks_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("prose.txt");
        fs::write(&a, "ABCDEFGHIJ").unwrap();
        let c = ingest_corpus(std::slice::from_ref(&a), 4, 0.5).unwrap();
        assert_eq!(c.domains, vec!["prose"]);
        assert_eq!(c.train[0].tokens, vec![65, 66, 67, 68]);
        assert_eq!(c.validation[0].tokens, vec![69, 70, 71, 72]);
        let again = ingest_corpus(&[a], 4, 0.5).unwrap();
        assert_eq!(c.fingerprint(), again.fingerprint());

        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        assert!(matches!(
            ingest_corpus(&[empty], 4, 0.5),
            Err(Error::Ingestion { .. })
        ));
        assert!(matches!(
            ingest_corpus(&[dir.path().join("missing.txt")], 4, 0.5),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn synthetic_is_seeded_and_easy_has_lower_entropy() {
        let spec = SynthSpec::default();
        let a = synth_corpus(&Rng::new(5), &spec).unwrap();
        let b = synth_corpus(&Rng::new(5), &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&Rng::new(6), &spec).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());

        let easy = a.domain_index("easy").unwrap();
        let hard = a.domain_index("hard").unwrap();
        let h_easy = byte_entropy(a.train.iter().filter(|s| s.domain == easy));
        let h_hard = byte_entropy(a.train.iter().filter(|s| s.domain == hard));
        assert!(h_easy < 2.0 + 1e-9);
        assert!(h_hard > 3.5, "hard entropy {h_hard}");
        assert!(h_easy < h_hard);
    }

    #[test]
    fn hard_sequences_copy_their_opening() {
        let spec = SynthSpec::default();
        let c = synth_corpus(&Rng::new(1), &spec).unwrap();
        let hard = c.domain_index("hard").unwrap();
        let q = spec.seq_len / 4;
        for s in c.train.iter().filter(|s| s.domain == hard).take(5) {
            assert_eq!(&s.tokens[..q], &s.tokens[spec.seq_len - q..]);
        }
    }

    #[test]
    fn validation_sample_alternates_domains() {
        let c = synth_corpus(&Rng::new(2), &SynthSpec::default()).unwrap();
        let sample = c.validation_sample(6);
        let domains: Vec<usize> = sample.iter().map(|s| s.domain).collect();
        assert_eq!(domains, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn batcher_is_deterministic() {
        let c = synth_corpus(&Rng::new(2), &SynthSpec::default()).unwrap();
        let mut a = Batcher::new(&c, Rng::stream(2, "batches")).unwrap();
        let mut b = Batcher::new(&c, Rng::stream(2, "batches")).unwrap();
        for _ in 0..3 {
            assert_eq!(a.next_batch(&c, 4, 16).unwrap(), b.next_batch(&c, 4, 16).unwrap());
        }
    }
}
