//! Elastic continued-training: every step sums the LM loss of the full model
//! and `k` randomly sampled sub-models on one tape and takes one Adam step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batcher, Corpus};
use crate::error::{Error, Result};
use crate::model::{ElasticModel, LayerChoice, ModelConfig, Selection, TokenBatch};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training sequence; the model sees `seq_len - 1` inputs.
    pub seq_len: usize,
    /// Sampled sub-models per step.
    pub k: usize,
    pub always_include_full: bool,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub val_interval: usize,
    pub val_sequences: usize,
    pub random_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 65,
            k: 3,
            always_include_full: true,
            learning_rate: 3e-4,
            warmup_steps: 100,
            seed: 0,
            val_interval: 100,
            val_sequences: 64,
            random_probes: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.val_interval == 0 {
            return Err(Error::Param(
                "steps, batch_size and val_interval must be positive".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::Param("seq_len must be at least 2".into()));
        }
        if self.k == 0 && !self.always_include_full {
            return Err(Error::Param("a step needs at least one sub-model".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Param("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant. `step` counts from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Independent uniform draw of every slot's candidate.
pub fn sample_selection(rng: &mut Rng, config: &ModelConfig) -> Selection {
    let k = config.candidates();
    Selection(
        (0..config.num_layers)
            .map(|_| {
                let mha = 1 + rng.below(k);
                let mlp = 1 + rng.below(k);
                LayerChoice { mha, mlp }
            })
            .collect(),
    )
}

/// Losses of each selection and the gradient of their sum, one entry per
/// weight tensor in [`crate::model::Weights::tensors`] order.
pub fn joint_gradients(
    model: &ElasticModel,
    batch: &TokenBatch,
    sels: &[Selection],
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if sels.is_empty() {
        return Err(Error::Param("no sub-models to train".into()));
    }
    let mut tape = Tape::new();
    let bound = model.weights.bind(&mut tape, true);
    let mut total = None;
    let mut losses = Vec::with_capacity(sels.len());
    for sel in sels {
        let l = model.lm_loss_on(&mut tape, &bound, batch, sel)?;
        losses.push(tape.value(l).item());
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    tape.check()?;
    let mut grads = tape.backward(total.expect("at least one loss"))?;
    let tensors = model.weights.tensors();
    let g = bound
        .all()
        .into_iter()
        .zip(tensors)
        .map(|(v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((losses, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub selections: Vec<Selection>,
    pub losses: Vec<f64>,
}

/// Full model (if requested) plus `k` sampled sub-models, summed, one update.
pub fn joint_step(
    model: &mut ElasticModel,
    batch: &TokenBatch,
    k: usize,
    include_full: bool,
    rng: &mut Rng,
    optimizer: &mut Adam,
    lr: f64,
) -> Result<StepReport> {
    let mut sels = Vec::with_capacity(k + 1);
    if include_full {
        sels.push(Selection::full(&model.config));
    }
    for _ in 0..k {
        sels.push(sample_selection(rng, &model.config));
    }
    let (losses, grads) = joint_gradients(model, batch, &sels)?;
    optimizer.step_with_lr(&mut model.weights.tensors_mut(), &grads, lr)?;
    Ok(StepReport {
        selections: sels,
        losses,
    })
}

/// Mean LM loss over batches.
pub fn mean_loss(model: &ElasticModel, batches: &[TokenBatch], sel: &Selection) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Data("no evaluation batches".into()));
    }
    let mut sum = 0.0;
    let mut weight = 0usize;
    for b in batches {
        sum += model.lm_loss(b, sel)? * b.batch as f64;
        weight += b.batch;
    }
    Ok(sum / weight as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub probe: String,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectoryLog {
    pub fn steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.points.iter().map(|p| p.step).collect();
        s.dedup();
        s
    }

    pub fn series(&self, probe: &str) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.probe == probe)
            .map(|p| (p.step, p.loss))
            .collect()
    }

    pub fn final_loss(&self, probe: &str) -> Option<f64> {
        self.series(probe).last().map(|&(_, l)| l)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "probe", "loss"])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), p.probe.clone(), format!("{:.12}", p.loss)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform probes at 25/50/75/100% of the candidate range, plus `full`.
pub fn probe_selections(config: &ModelConfig) -> Vec<(String, Selection)> {
    let k = config.candidates();
    let mut out = vec![("full".to_string(), Selection::full(config))];
    for pct in [25usize, 50, 75, 100] {
        let j = ((pct * k + 50) / 100).clamp(1, k);
        out.push((format!("uniform-{pct}"), Selection::uniform(config.num_layers, j)));
    }
    out
}

/// Runs `config.steps` joint steps over shuffled batches, logging validation
/// losses every `val_interval` steps and after the last one.
pub fn run_elastic_ct(
    model: &ElasticModel,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(ElasticModel, TrajectoryLog)> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::Data("corpus needs training and validation sequences".into()));
    }
    let mut model = model.clone();
    let mut batcher = Batcher::new(corpus, Rng::stream(config.seed, "train.batches"))?;
    let mut sel_rng = Rng::stream(config.seed, "train.selections");
    let mut probe_rng = Rng::stream(config.seed, "train.probes");
    let val = corpus.validation_batches(config.batch_size, config.seq_len, config.val_sequences)?;
    let probes = probe_selections(&model.config);
    let mut optimizer = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    })?;
    let mut log = TrajectoryLog::default();
    for step in 1..=config.steps {
        let batch = batcher.next_batch(corpus, config.batch_size, config.seq_len)?;
        joint_step(
            &mut model,
            &batch,
            config.k,
            config.always_include_full,
            &mut sel_rng,
            &mut optimizer,
            config.lr_at(step),
        )?;
        if step % config.val_interval == 0 || step == config.steps {
            for (name, sel) in &probes {
                log.points.push(TrajectoryPoint {
                    step,
                    probe: name.clone(),
                    loss: mean_loss(&model, &val, sel)?,
                });
            }
            for r in 0..config.random_probes {
                let sel = sample_selection(&mut probe_rng, &model.config);
                log.points.push(TrajectoryPoint {
                    step,
                    probe: format!("random-{r}"),
                    loss: mean_loss(&model, &val, &sel)?,
                });
            }
        }
    }
    Ok((model, log))
}

/// Ordinary LM training of the full model: the `k = 0` case.
pub fn pretrain(
    model: &ElasticModel,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(ElasticModel, TrajectoryLog)> {
    let plain = TrainConfig {
        k: 0,
        always_include_full: true,
        random_probes: 0,
        ..config.clone()
    };
    run_elastic_ct(model, corpus, &plain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_samples_all_ones() {
        let mut cfg = ModelConfig::evenly_spaced(16, 8, 3, 2, 8, 4, 1);
        cfg.validate().unwrap();
        let mut rng = Rng::new(0);
        let s = sample_selection(&mut rng, &cfg);
        assert_eq!(s, Selection::uniform(3, 1));
        cfg.num_layers = 2;
        assert_eq!(sample_selection(&mut rng, &cfg).slots(), vec![1; 4]);
    }

    #[test]
    fn warmup_is_linear() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(100), 1.0);
    }

    #[test]
    fn probes_cover_quartiles() {
        let cfg = ModelConfig::default();
        let names: Vec<String> = probe_selections(&cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["full", "uniform-25", "uniform-50", "uniform-75", "uniform-100"]);
        assert_eq!(probe_selections(&cfg)[1].1, Selection::uniform(4, 1));
    }

    #[test]
    fn config_rejects_empty_steps() {
        let c = TrainConfig {
            k: 0,
            always_include_full: false,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Param(_))));
    }
}
