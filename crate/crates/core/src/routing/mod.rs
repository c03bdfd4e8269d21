//! Budget-conditioned routers over the elastic slots, the surrogate loss
//! model that trains them, sub-network extraction and decision statistics.

mod dynamic;
mod static_router;
mod surrogate;
mod train;

pub use dynamic::{route_dynamic, DynamicHook, DynamicRouter};
pub use static_router::{route_static, StaticRouter};
pub use surrogate::{surrogate_forward, SurrogateModel};
pub use train::{
    dynamic_eval, joint_finetune, phase_split, routed_loss, train_dynamic_routers, train_routers,
    DynamicTrainOutput, LossLog, LossRecord, Phase, RouterTrainState, TrainOutput,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{batches_of, Corpus};
use crate::error::{Error, Result};
use crate::model::{Block, DenseModel, ElasticModel, Selection, Weights};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// What the surrogate consumes per slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmInput {
    /// Straight-through one-hot of the realized choice over softmax probabilities.
    Softmax,
    /// Raw router logits.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    /// Normalized budgets trained jointly.
    pub targets: Vec<f64>,
    pub lambda: f64,
    /// Budget weight for dynamic routers, whose per-token cost gradient is
    /// otherwise strong enough to drown out domain differences.
    pub dynamic_lambda: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub temperature: f64,
    pub estimator: Estimator,
    /// Probability that a slot's executed choice is drawn uniformly instead
    /// of from the router, so the surrogate sees the whole selection space.
    pub explore: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub router_lr: f64,
    pub sm_lr: f64,
    pub router_hidden: usize,
    pub sm_hidden: usize,
    pub dynamic_width: usize,
    pub sm_input: SmInput,
    pub seed: u64,
    /// Validation sequences used to log the routed LM loss each step.
    pub monitor_sequences: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            targets: vec![0.5, 0.6, 0.7],
            lambda: 5.0,
            dynamic_lambda: 0.5,
            tau: 0.05,
            ema_decay: 0.99,
            temperature: 1.0,
            estimator: Estimator::LocalExpectation,
            explore: 0.25,
            steps: 1500,
            batch_size: 32,
            seq_len: 65,
            router_lr: 3e-3,
            sm_lr: 3e-3,
            router_hidden: 16,
            sm_hidden: 64,
            dynamic_width: 32,
            sm_input: SmInput::Softmax,
            seed: 0,
            monitor_sequences: 16,
            finetune_steps: 200,
            finetune_lr: 1e-4,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Param("at least one budget target is required".into()));
        }
        for &t in &self.targets {
            check_budget(t)?;
        }
        if !(self.temperature > 0.0) || !(self.lambda >= 0.0) || !(self.dynamic_lambda >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::Param(
                "temperature must be positive; lambda and tau nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.explore) {
            return Err(Error::Param("explore must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Param("ema_decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Param("batch_size ≥ 1 and seq_len ≥ 2 required".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_budget(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("budget {t} outside (0, 1]")))
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Tensors of a parameter set in a fixed order, for binding and optimizing.
pub trait ParamSet {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// How static routers take the surrogate's gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Differentiate the surrogate at the straight-through one-hot.
    StraightThrough,
    /// Per slot, weight the surrogate's value at each single-slot swap by
    /// the router's probabilities. Falls back to straight-through for raw
    /// logit input, where no swap is defined.
    LocalExpectation,
}

/// Straight-through relaxation of a categorical choice per row of `logits`.
pub(crate) struct StChoice {
    /// Forward value is the one-hot of `choices`; gradient flows into `probs`.
    pub st: Var,
    pub probs: Var,
    /// The router's own 0-based choice per row.
    pub choices: Vec<usize>,
    /// The choice actually executed: `choices`, except that with probability
    /// `explore` a row is replaced by a uniform draw.
    pub realized: Vec<usize>,
}

/// Softmax at `temperature`; the router's choice is the argmax of the
/// tempered logits, perturbed by Gumbel noise when `noise` is given.
pub(crate) fn st_choice(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    explore: f64,
    mut noise: Option<&mut Rng>,
) -> Result<StChoice> {
    let scaled = tape.scale(logits, 1.0 / temperature);
    let probs = tape.softmax_rows(scaled);
    let z = tape.value(scaled).clone();
    let p = tape.value(probs).clone();
    let k = z.cols();
    let mut choices = Vec::with_capacity(z.rows());
    let mut realized = Vec::with_capacity(z.rows());
    let mut offset = p.map(|v| -v);
    for r in 0..z.rows() {
        let (c, real) = match noise.as_deref_mut() {
            Some(rng) => {
                let row: Vec<f64> = z.row(r).iter().map(|v| v + rng.gumbel()).collect();
                let c = argmax(&row);
                let real = if rng.uniform() < explore { rng.below(k) } else { c };
                (c, real)
            }
            None => {
                let c = argmax(z.row(r));
                (c, c)
            }
        };
        offset.data_mut()[r * k + c] += 1.0;
        choices.push(c);
        realized.push(real);
    }
    let off = tape.constant(offset);
    let st = tape.add(off, probs)?;
    Ok(StChoice {
        st,
        probs,
        choices,
        realized,
    })
}

/// `[rows × K]` one-hot rows of 0-based choices.
pub(crate) fn one_hot(choices: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[choices.len(), k]);
    for (r, &c) in choices.iter().enumerate() {
        t.data_mut()[r * k + c] = 1.0;
    }
    t
}

/// Selection from 0-based per-slot choices.
pub(crate) fn selection_of(choices: &[usize]) -> Result<Selection> {
    let slots: Vec<usize> = choices.iter().map(|c| c + 1).collect();
    Selection::from_slots(&slots)
}

/// Materializes the weights of `route_static(router, t_hat)` into a dense model.
pub fn extract_subnetwork(
    model: &ElasticModel,
    router: &StaticRouter,
    t_hat: f64,
) -> Result<(DenseModel, Selection)> {
    let (sel, _) = route_static(router, t_hat)?;
    Ok((extract_selection(model, &sel)?, sel))
}

/// Slices every layer of `model` to the candidates of `sel`.
pub fn extract_selection(model: &ElasticModel, sel: &Selection) -> Result<DenseModel> {
    let plan = model.plan(sel)?;
    let hd = model.config.head_dim;
    let mut blocks = Vec::with_capacity(plan.len());
    for (b, p) in model.weights.blocks.iter().zip(&plan) {
        let rows = p.heads * hd;
        blocks.push(Block {
            ln1_g: b.ln1_g.clone(),
            ln1_b: b.ln1_b.clone(),
            wq: b.wq.slice_rows(0, rows)?,
            wk: b.wk.slice_rows(0, rows)?,
            wv: b.wv.slice_rows(0, rows)?,
            wo: b.wo.slice_rows(0, rows)?,
            ln2_g: b.ln2_g.clone(),
            ln2_b: b.ln2_b.clone(),
            w1: b.w1.slice_rows(0, p.width)?,
            w2: b.w2.slice_rows(0, p.width)?,
        });
    }
    let w = &model.weights;
    Ok(DenseModel {
        vocab_size: model.config.vocab_size,
        embed_dim: model.config.embed_dim,
        head_dim: hd,
        context_len: model.config.context_len,
        weights: Weights {
            tok_emb: w.tok_emb.clone(),
            pos_emb: w.pos_emb.clone(),
            blocks,
            lnf_g: w.lnf_g.clone(),
            lnf_b: w.lnf_b.clone(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub slot: usize,
    /// 1-based.
    pub candidate: usize,
    pub domain: String,
    pub frequency: f64,
}

/// Per-slot candidate frequencies of the dynamic routers' argmax decisions
/// over each domain's validation tokens.
pub fn router_decision_stats(
    model: &ElasticModel,
    router: &DynamicRouter,
    corpus: &Corpus,
    t_hat: f64,
    seq_len: usize,
    max_sequences: usize,
) -> Result<Vec<HistogramRow>> {
    check_budget(t_hat)?;
    let k = model.config.candidates();
    let slots = 2 * model.config.num_layers;
    let mut rows = Vec::new();
    for (d, name) in corpus.domains.iter().enumerate() {
        let seqs: Vec<_> = corpus.validation_of(d).into_iter().take(max_sequences).collect();
        if seqs.is_empty() {
            continue;
        }
        let mut counts = vec![vec![0usize; k]; slots];
        let mut total = 0usize;
        for batch in batches_of(&seqs, 16, seq_len.min(model.config.context_len))? {
            let decisions = dynamic::decide(model, router, &batch, t_hat)?;
            for (s, choices) in decisions.iter().enumerate() {
                for &c in choices {
                    counts[s][c] += 1;
                }
            }
            total += batch.batch * batch.seq;
        }
        for (s, cs) in counts.iter().enumerate() {
            for (j, &c) in cs.iter().enumerate() {
                rows.push(HistogramRow {
                    slot: s,
                    candidate: j + 1,
                    domain: name.clone(),
                    frequency: c as f64 / total as f64,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no validation sequences to route".into()));
    }
    Ok(rows)
}

/// Frequency of the largest candidate in one domain, averaged over slots.
pub fn largest_candidate_share(rows: &[HistogramRow], domain: &str, k: usize) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.domain == domain && r.candidate == k)
        .map(|r| r.frequency)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

pub fn write_histogram_csv(rows: &[HistogramRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slot", "candidate", "domain", "frequency"])?;
    for r in rows {
        w.write_record([
            r.slot.to_string(),
            r.candidate.to_string(),
            r.domain.clone(),
            format!("{:.12}", r.frequency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0, -0.5]), 1);
    }

    #[test]
    fn straight_through_value_is_one_hot() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::from_rows(&[&[0.1, 2.0, -1.0], &[3.0, 0.0, 0.0]]).unwrap());
        let c = st_choice(&mut tape, l, 1.0, 0.0, None).unwrap();
        assert_eq!(c.choices, vec![1, 0]);
        let v = tape.value(c.st);
        for (got, want) in v.data().iter().zip([0.0, 1.0, 0.0, 1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        // gradient reaches the logits through the softmax
        let s = tape.sum(c.st);
        let g = tape.backward(s).unwrap();
        assert!(g.get(l).is_some());
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::default().validate().is_ok());
        let bad = RouterConfig {
            targets: vec![1.5],
            ..RouterConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
