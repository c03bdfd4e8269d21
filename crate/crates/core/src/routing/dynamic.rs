use serde_json::json;

use super::{argmax, check_budget, st_choice, ParamSet, StChoice};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_hooked, ElasticModel, Gate, ModelConfig, Selection, SlotHook, TokenBatch};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-token routers: `σ(T̂·w + h·W_Hᵀ + b)·W_Rᵀ + b_R` for every slot.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRouter {
    pub k: usize,
    /// Embedding width `U`.
    pub width: usize,
    pub embed_dim: usize,
    /// Five tensors per slot: `w [U×1]`, `w_h [U×C]`, `b [U]`, `w_r [K×U]`, `b_r [K]`.
    pub params: Vec<Tensor>,
}

impl DynamicRouter {
    pub fn new(slots: usize, k: usize, width: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(5 * slots);
        let hs = 1.0 / (embed_dim as f64).sqrt();
        for _ in 0..slots {
            let mut draw = |n: usize, s: f64| (0..n).map(|_| rng.normal(s)).collect::<Vec<f64>>();
            params.push(Tensor::new(vec![width, 1], draw(width, 1.0)).expect("shape"));
            params.push(Tensor::new(vec![width, embed_dim], draw(width * embed_dim, hs)).expect("shape"));
            params.push(Tensor::new(vec![width], draw(width, 1.0)).expect("shape"));
            params.push(Tensor::zeros(&[k, width]));
            params.push(Tensor::zeros(&[k]));
        }
        Self {
            k,
            width,
            embed_dim,
            params,
        }
    }

    pub fn slots(&self) -> usize {
        self.params.len() / 5
    }

    /// Logits `[rows×K]` of one slot for hidden states `h: [rows×C]`.
    pub fn logits_on(&self, tape: &mut Tape, vars: &[Var], slot: usize, t_hat: f64, h: Var) -> Result<Var> {
        if slot >= self.slots() {
            return Err(Error::Index(format!("slot {slot} of {}", self.slots())));
        }
        let v = &vars[5 * slot..5 * slot + 5];
        let pre = tape.matmul_nt(h, v[1])?;
        let w = tape.reshape(v[0], vec![self.width])?;
        let tw = tape.scale(w, t_hat);
        let pre = tape.add_row(pre, tw)?;
        let pre = tape.add_row(pre, v[2])?;
        let a = tape.gelu(pre);
        let out = tape.matmul_nt(a, v[3])?;
        tape.add_row(out, v[4])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "dynamic-router",
            json!({"k": self.k, "width": self.width, "embed_dim": self.embed_dim, "slots": self.slots()}),
        );
        for (i, p) in self.params.iter().enumerate() {
            ck.push(format!("slot{}.{}", i / 5, ["w", "w_h", "b", "w_r", "b_r"][i % 5]), p.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "dynamic-router" {
            return Err(Error::Format(format!("expected dynamic-router, found {}", ck.kind)));
        }
        let field = |n: &str| {
            ck.meta
                .get(n)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("router manifest lacks {n}")))
        };
        let (k, width, embed_dim, slots) =
            (field("k")?, field("width")?, field("embed_dim")?, field("slots")?);
        let params: Vec<Tensor> = ck.tensors.iter().map(|(_, t)| t.clone()).collect();
        let shapes = [vec![width, 1], vec![width, embed_dim], vec![width], vec![k, width], vec![k]];
        if params.len() != 5 * slots || params.iter().enumerate().any(|(i, p)| p.shape() != shapes[i % 5]) {
            return Err(Error::Format("router tensors do not match their manifest".into()));
        }
        Ok(Self {
            k,
            width,
            embed_dim,
            params,
        })
    }
}

impl ParamSet for DynamicRouter {
    fn params(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

/// Routes every token of every slot during a forward pass, masking heads and
/// neurons beyond each token's chosen candidate.
pub struct DynamicHook<'a> {
    pub(crate) router: &'a DynamicRouter,
    pub(crate) vars: &'a [Var],
    pub(crate) config: &'a ModelConfig,
    pub(crate) t_hat: f64,
    pub(crate) temperature: f64,
    /// Probability that one sequence's choice in a slot is replaced by a
    /// uniform draw for all of its tokens.
    pub(crate) explore: f64,
    /// Tokens per sequence, for sequence-level exploration.
    pub(crate) seq: usize,
    pub(crate) noise: Option<&'a mut Rng>,
    pub(crate) records: Vec<StChoice>,
}

impl<'a> DynamicHook<'a> {
    pub(crate) fn new(
        router: &'a DynamicRouter,
        vars: &'a [Var],
        config: &'a ModelConfig,
        t_hat: f64,
        temperature: f64,
        explore: f64,
        seq: usize,
        noise: Option<&'a mut Rng>,
    ) -> Self {
        Self {
            router,
            vars,
            config,
            t_hat,
            temperature,
            explore,
            seq: seq.max(1),
            noise,
            records: Vec::new(),
        }
    }
}

impl SlotHook for DynamicHook<'_> {
    fn gate(&mut self, tape: &mut Tape, slot: usize, input: Var) -> Result<Option<Gate>> {
        let logits = self.router.logits_on(tape, self.vars, slot, self.t_hat, input)?;
        let mut choice = st_choice(tape, logits, self.temperature, 0.0, self.noise.as_deref_mut())?;
        if let Some(rng) = self.noise.as_deref_mut() {
            for seq in choice.realized.chunks_mut(self.seq) {
                if rng.uniform() < self.explore {
                    seq.fill(rng.below(self.router.k));
                }
            }
        }
        let cfg = self.config;
        let (width, active): (usize, Vec<usize>) = if slot % 2 == 0 {
            let w = cfg.num_heads * cfg.head_dim;
            (w, cfg.head_counts.iter().map(|h| h * cfg.head_dim).collect())
        } else {
            (cfg.mlp_hidden, cfg.mlp_widths.clone())
        };
        let rows = choice.realized.len();
        let mut mask = vec![0.0; rows * width];
        for (r, &c) in choice.realized.iter().enumerate() {
            mask[r * width..r * width + active[c]].fill(1.0);
        }
        let m = tape.constant(Tensor::new(vec![rows, width], mask)?);
        self.records.push(choice);
        Ok(Some(Gate::Mask(m)))
    }
}

/// Argmax decisions (0-based) per slot for every token of `batch`.
pub(crate) fn decide(
    model: &ElasticModel,
    router: &DynamicRouter,
    batch: &TokenBatch,
    t_hat: f64,
) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::new();
    let bound = model.weights.bind(&mut tape, false);
    let vars: Vec<Var> = router.params.iter().map(|p| tape.constant(p.clone())).collect();
    let plan = model.plan(&Selection::full(&model.config))?;
    let mut hook = DynamicHook::new(router, &vars, &model.config, t_hat, 1.0, 0.0, batch.seq, None);
    forward_hooked(&mut tape, &bound, model.config.head_dim, batch, &plan, &mut hook)?;
    tape.check()?;
    Ok(hook.records.into_iter().map(|r| r.choices).collect())
}

/// Per-token argmax choice (1-based) and logits `[rows×K]` of one slot for
/// hidden states `h` shaped `[B×S×C]` or `[rows×C]`.
pub fn route_dynamic(
    router: &DynamicRouter,
    t_hat: f64,
    h: &Tensor,
    slot: usize,
) -> Result<(Vec<usize>, Tensor)> {
    check_budget(t_hat)?;
    let c = *h.shape().last().unwrap_or(&0);
    if c != router.embed_dim {
        return Err(Error::Shape(format!(
            "hidden width {c}, router expects {}",
            router.embed_dim
        )));
    }
    let rows = h.len() / c.max(1);
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone().reshape(vec![rows, c])?);
    let vars: Vec<Var> = router.params.iter().map(|p| tape.constant(p.clone())).collect();
    let logits = router.logits_on(&mut tape, &vars, slot, t_hat, hv)?;
    tape.check()?;
    let l = tape.value(logits).clone();
    let choices = (0..rows).map(|r| argmax(l.row(r)) + 1).collect();
    Ok((choices, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router() -> DynamicRouter {
        let mut r = DynamicRouter::new(2, 3, 4, 5, &mut Rng::new(4));
        let mut rng = Rng::new(5);
        for s in 0..2 {
            for v in r.params[5 * s + 3].data_mut() {
                *v = rng.normal(1.0);
            }
        }
        r
    }

    #[test]
    fn zero_hidden_projection_gives_uniform_decisions() {
        let mut r = router();
        r.params[1] = Tensor::zeros(&[4, 5]);
        let mut rng = Rng::new(6);
        let h = Tensor::new(vec![2, 3, 5], (0..30).map(|_| rng.normal(1.0)).collect()).unwrap();
        let (choices, _) = route_dynamic(&r, 0.6, &h, 0).unwrap();
        assert!(choices.iter().all(|&c| c == choices[0]));
    }

    #[test]
    fn equal_hidden_states_equal_decisions() {
        let r = router();
        let row: Vec<f64> = vec![0.3, -1.0, 0.2, 0.9, -0.4];
        let h = Tensor::new(vec![2, 5], [row.clone(), row].concat()).unwrap();
        let (choices, logits) = route_dynamic(&r, 0.5, &h, 1).unwrap();
        assert_eq!(choices[0], choices[1]);
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let r = router();
        assert!(route_dynamic(&r, 0.5, &Tensor::zeros(&[2, 4]), 0).is_err());
        assert!(route_dynamic(&r, 0.5, &Tensor::zeros(&[2, 5]), 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = router();
        assert_eq!(DynamicRouter::from_checkpoint(&r.to_checkpoint()).unwrap(), r);
    }
}
