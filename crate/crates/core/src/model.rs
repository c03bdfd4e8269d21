//! Decoder-only transformer with nested elastic MHA and MLP layers.
//!
//! Every layer stores its heads and hidden neurons in nesting order: candidate
//! `j` of a slot uses the first `d_j` head blocks (or rows) of the shared
//! matrices. The block skeleton is pre-norm with learned positions and an
//! output head tied to the token embedding.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub context_len: usize,
    /// Hidden-neuron count of each MLP candidate, strictly increasing.
    pub mlp_widths: Vec<usize>,
    /// Head count of each MHA candidate, strictly increasing.
    pub head_counts: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            mlp_hidden: 256,
            context_len: 64,
            mlp_widths: vec![64, 128, 192, 256],
            head_counts: vec![1, 2, 3, 4],
        }
    }
}

impl ModelConfig {
    /// Config with `k` evenly spaced candidates per slot.
    pub fn evenly_spaced(
        vocab_size: usize,
        embed_dim: usize,
        num_layers: usize,
        num_heads: usize,
        mlp_hidden: usize,
        context_len: usize,
        k: usize,
    ) -> Self {
        Self {
            vocab_size,
            embed_dim,
            num_layers,
            num_heads,
            head_dim: embed_dim / num_heads.max(1),
            mlp_hidden,
            context_len,
            mlp_widths: (1..=k).map(|j| mlp_hidden * j / k).collect(),
            head_counts: (1..=k).map(|j| num_heads * j / k).collect(),
        }
    }

    /// Candidates per slot (`K`).
    pub fn candidates(&self) -> usize {
        self.mlp_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.mlp_hidden,
            self.context_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Param("all model extents must be positive".into()));
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(Error::Param(format!(
                "embed_dim {} != num_heads {} × head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        let k = self.candidates();
        if k == 0 || self.head_counts.len() != k {
            return Err(Error::Param(
                "mlp_widths and head_counts need the same non-zero length".into(),
            ));
        }
        let increasing = |v: &[usize]| v[0] > 0 && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.mlp_widths) || self.mlp_widths[k - 1] != self.mlp_hidden {
            return Err(Error::Param(format!(
                "mlp_widths {:?} must increase strictly up to {}",
                self.mlp_widths, self.mlp_hidden
            )));
        }
        if !increasing(&self.head_counts) || self.head_counts[k - 1] != self.num_heads {
            return Err(Error::Param(format!(
                "head_counts {:?} must increase strictly up to {}",
                self.head_counts, self.num_heads
            )));
        }
        Ok(())
    }

    /// Non-embedding parameters of one layer at the given head count and width.
    pub fn layer_params(&self, heads: usize, width: usize) -> usize {
        let c = self.embed_dim;
        4 * c + 4 * heads * self.head_dim * c + 2 * width * c
    }

    /// Closed-form dense non-embedding count.
    pub fn dense_params(&self) -> usize {
        self.num_layers * self.layer_params(self.num_heads, self.mlp_hidden) + 2 * self.embed_dim
    }
}

/// Which candidate (1-based) every MHA and MLP slot uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerChoice {
    pub mha: usize,
    pub mlp: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection(pub Vec<LayerChoice>);

impl Selection {
    pub fn uniform(num_layers: usize, candidate: usize) -> Self {
        Self(vec![
            LayerChoice {
                mha: candidate,
                mlp: candidate
            };
            num_layers
        ])
    }

    pub fn full(config: &ModelConfig) -> Self {
        Self::uniform(config.num_layers, config.candidates())
    }

    pub fn minimal(config: &ModelConfig) -> Self {
        Self::uniform(config.num_layers, 1)
    }

    /// Build from the flattened slot order `[mha₀, mlp₀, mha₁, mlp₁, …]`.
    pub fn from_slots(slots: &[usize]) -> Result<Self> {
        if slots.len() % 2 != 0 {
            return Err(Error::Length(format!("{} slots is not even", slots.len())));
        }
        Ok(Self(
            slots
                .chunks(2)
                .map(|c| LayerChoice {
                    mha: c[0],
                    mlp: c[1],
                })
                .collect(),
        ))
    }

    pub fn slots(&self) -> Vec<usize> {
        self.0.iter().flat_map(|c| [c.mha, c.mlp]).collect()
    }

    pub fn layers(&self) -> &[LayerChoice] {
        &self.0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.0.len() != config.num_layers {
            return Err(Error::Length(format!(
                "selection has {} layers, model has {}",
                self.0.len(),
                config.num_layers
            )));
        }
        let k = config.candidates();
        for &index in self.slots().iter() {
            if index == 0 || index > k {
                return Err(Error::Candidate { index, k });
            }
        }
        Ok(())
    }

    /// Elementwise `self ≤ other`.
    pub fn le(&self, other: &Selection) -> bool {
        self.slots()
            .iter()
            .zip(other.slots())
            .all(|(&a, b)| a <= b)
    }

    /// Compact text form, e.g. `4.4-2.3`.
    pub fn describe(&self) -> String {
        self.0
            .iter()
            .map(|c| format!("{}.{}", c.mha, c.mlp))
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Token ids laid out `[batch × seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Length("token rows must be non-empty and equal length".into()));
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Inputs `[:, :S−1]` and flattened next-token targets `[:, 1:]`.
    pub fn shifted(&self) -> Result<(TokenBatch, Vec<usize>)> {
        if self.seq < 2 {
            return Err(Error::Length(format!(
                "next-token loss needs sequences of at least 2, got {}",
                self.seq
            )));
        }
        let mut inputs = Vec::with_capacity(self.batch * (self.seq - 1));
        let mut targets = Vec::with_capacity(self.batch * (self.seq - 1));
        for b in 0..self.batch {
            let r = self.row(b);
            inputs.extend_from_slice(&r[..self.seq - 1]);
            targets.extend_from_slice(&r[1..]);
        }
        Ok((
            TokenBatch {
                batch: self.batch,
                seq: self.seq - 1,
                ids: inputs,
            },
            targets,
        ))
    }
}

/// Weights of one transformer block. Head blocks of `wq/wk/wv` and the
/// matching row blocks of `wo` are `[head_dim × C]` slabs stacked in
/// nesting order; `w1`/`w2` are `[hidden × C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Block {
    pub const NAMES: [&'static str; 10] = [
        "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "w2",
    ];

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.w2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.w2,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }
}

/// All tensors of a transformer, shared by elastic and extracted models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl Weights {
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            names.extend(Block::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.push("lnf_g".into());
        names.push("lnf_b".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    /// Rebuild from tensors in [`Weights::tensors`] order.
    pub fn from_tensors(mut tensors: Vec<Tensor>, num_layers: usize) -> Result<Self> {
        if tensors.len() != 4 + 10 * num_layers {
            return Err(Error::Format(format!(
                "expected {} tensors for {num_layers} layers, got {}",
                4 + 10 * num_layers,
                tensors.len()
            )));
        }
        let lnf_b = tensors.pop().unwrap();
        let lnf_g = tensors.pop().unwrap();
        let mut it = tensors.into_iter();
        let tok_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let mut blocks = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let mut t: Vec<Tensor> = it.by_ref().take(10).collect();
            let mut take = || t.remove(0);
            blocks.push(Block {
                ln1_g: take(),
                ln1_b: take(),
                wq: take(),
                wk: take(),
                wv: take(),
                wo: take(),
                ln2_g: take(),
                ln2_b: take(),
                w1: take(),
                w2: take(),
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundWeights {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let v = b.tensors().map(&mut leaf);
                BoundBlock {
                    ln1_g: v[0],
                    ln1_b: v[1],
                    wq: v[2],
                    wk: v[3],
                    wv: v[4],
                    wo: v[5],
                    ln2_g: v[6],
                    ln2_b: v[7],
                    w1: v[8],
                    w2: v[9],
                }
            })
            .collect();
        let lnf_g = leaf(&self.lnf_g);
        let lnf_b = leaf(&self.lnf_b);
        BoundWeights {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub w2: Var,
}

impl BoundBlock {
    fn all(&self) -> [Var; 10] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g, self.ln2_b,
            self.w1, self.w2,
        ]
    }
}

/// Tape handles for a [`Weights`], in the same order as [`Weights::tensors`].
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl BoundWeights {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

/// Token plus positional embedding, `[B·S × C]`.
pub fn embed(tape: &mut Tape, w: &BoundWeights, tokens: &TokenBatch) -> Result<Var> {
    let ctx = tape.value(w.pos_emb).rows();
    if tokens.seq > ctx {
        return Err(Error::Length(format!(
            "sequence of {} exceeds context of {ctx}",
            tokens.seq
        )));
    }
    let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
    let tok = tape.gather(w.tok_emb, &tokens.ids)?;
    let pos = tape.gather(w.pos_emb, &positions)?;
    tape.add(tok, pos)
}

/// Multi-head attention over the first `heads` head blocks.
///
/// `head_mask`, when given, is a `[B·S × heads·H]` multiplier applied to the
/// concatenated head outputs before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    tape: &mut Tape,
    blk: &BoundBlock,
    x: Var,
    heads: usize,
    head_dim: usize,
    batch: usize,
    seq: usize,
    head_mask: Option<Var>,
) -> Result<Var> {
    let rows = heads * head_dim;
    let stored = tape.value(blk.wq).rows();
    if rows == 0 || rows > stored {
        return Err(shape_err(format!("{heads} heads exceed stored {}", stored / head_dim)));
    }
    let prefix = |tape: &mut Tape, w: Var| -> Result<Var> {
        if rows == stored {
            Ok(w)
        } else {
            tape.slice_rows(w, rows)
        }
    };
    let wq = prefix(tape, blk.wq)?;
    let wk = prefix(tape, blk.wk)?;
    let wv = prefix(tape, blk.wv)?;
    let wo = prefix(tape, blk.wo)?;
    let q = tape.matmul_nt(x, wq)?;
    let k = tape.matmul_nt(x, wk)?;
    let v = tape.matmul_nt(x, wv)?;
    let mut att = tape.attention(q, k, v, batch, seq, heads)?;
    if let Some(mask) = head_mask {
        att = tape.mul(att, mask)?;
    }
    tape.matmul(att, wo)
}

/// GELU MLP over the first `width` hidden neurons; `mask` multiplies the
/// `[B·S × width]` activations.
pub fn mlp(
    tape: &mut Tape,
    blk: &BoundBlock,
    x: Var,
    width: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let stored = tape.value(blk.w1).rows();
    if width == 0 || width > stored {
        return Err(shape_err(format!("width {width} exceeds stored {stored}")));
    }
    let (w1, w2) = if width == stored {
        (blk.w1, blk.w2)
    } else {
        (tape.slice_rows(blk.w1, width)?, tape.slice_rows(blk.w2, width)?)
    };
    let pre = tape.matmul_nt(x, w1)?;
    let mut act = tape.gelu(pre);
    if let Some(m) = mask {
        act = tape.mul(act, m)?;
    }
    tape.matmul(act, w2)
}

/// Final norm and tied output projection, `[B·S × V]`.
pub fn head(tape: &mut Tape, w: &BoundWeights, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, w.lnf_g, w.lnf_b, LN_EPS)?;
    tape.matmul_nt(h, w.tok_emb)
}

/// Per-layer active head count and MLP width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub heads: usize,
    pub width: usize,
}

/// How a hook modifies one slot of the forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gate {
    /// Multiplies the slot output by a one-element node.
    Scale(Var),
    /// Per-token multiplier on the concatenated head outputs (MHA) or the
    /// hidden activations (MLP), shaped `[B·S × active width]`.
    Mask(Var),
}

/// Called before every slot in `[mha₀, mlp₀, mha₁, …]` order with the
/// normalized input the slot is about to consume.
pub trait SlotHook {
    fn gate(&mut self, tape: &mut Tape, slot: usize, input: Var) -> Result<Option<Gate>>;
}

pub struct NoHook;

impl SlotHook for NoHook {
    fn gate(&mut self, _: &mut Tape, _: usize, _: Var) -> Result<Option<Gate>> {
        Ok(None)
    }
}

/// Full pre-norm stack under a per-layer plan; returns `[B·S × V]` logits.
pub fn forward_plan(
    tape: &mut Tape,
    w: &BoundWeights,
    head_dim: usize,
    tokens: &TokenBatch,
    plan: &[LayerPlan],
) -> Result<Var> {
    Ok(forward_hooked(tape, w, head_dim, tokens, plan, &mut NoHook)?.0)
}

/// [`forward_plan`] with a hook per slot; also returns the final normalized
/// hidden states `[B·S × C]`.
pub fn forward_hooked(
    tape: &mut Tape,
    w: &BoundWeights,
    head_dim: usize,
    tokens: &TokenBatch,
    plan: &[LayerPlan],
    hook: &mut dyn SlotHook,
) -> Result<(Var, Var)> {
    let mut x = embed(tape, w, tokens)?;
    for (i, (blk, p)) in w.blocks.iter().zip(plan).enumerate() {
        let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS)?;
        let gate = hook.gate(tape, 2 * i, h)?;
        let mask = match gate {
            Some(Gate::Mask(m)) => Some(m),
            _ => None,
        };
        let mut a = mha(tape, blk, h, p.heads, head_dim, tokens.batch, tokens.seq, mask)?;
        if let Some(Gate::Scale(g)) = gate {
            a = tape.mul_scalar(a, g)?;
        }
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS)?;
        let gate = hook.gate(tape, 2 * i + 1, h)?;
        let mask = match gate {
            Some(Gate::Mask(m)) => Some(m),
            _ => None,
        };
        let mut m = mlp(tape, blk, h, p.width, mask)?;
        if let Some(Gate::Scale(g)) = gate {
            m = tape.mul_scalar(m, g)?;
        }
        x = tape.add(x, m)?;
    }
    let h = tape.layer_norm(x, w.lnf_g, w.lnf_b, LN_EPS)?;
    let logits = tape.matmul_nt(h, w.tok_emb)?;
    Ok((logits, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticModel {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl ElasticModel {
    /// Fresh model with N(0, 0.02) weights; residual projections scaled by 1/√(2N).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, c, ctx) = (config.vocab_size, config.embed_dim, config.context_len);
        let lh = config.num_heads * config.head_dim;
        let d = config.mlp_hidden;
        let std = 0.02;
        let resid = std / (2.0 * config.num_layers as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(s)).collect())
                .expect("shape matches count")
        };
        let tok_emb = normal(&[v, c], std);
        let pos_emb = normal(&[ctx, c], std);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_g: Tensor::full(&[c], 1.0),
                ln1_b: Tensor::zeros(&[c]),
                wq: normal(&[lh, c], std),
                wk: normal(&[lh, c], std),
                wv: normal(&[lh, c], std),
                wo: normal(&[lh, c], resid),
                ln2_g: Tensor::full(&[c], 1.0),
                ln2_b: Tensor::zeros(&[c]),
                w1: normal(&[d, c], std),
                w2: normal(&[d, c], resid),
            })
            .collect();
        Ok(Self {
            config,
            weights: Weights {
                tok_emb,
                pos_emb,
                blocks,
                lnf_g: Tensor::full(&[c], 1.0),
                lnf_b: Tensor::zeros(&[c]),
            },
        })
    }

    pub fn plan(&self, sel: &Selection) -> Result<Vec<LayerPlan>> {
        sel.validate(&self.config)?;
        Ok(sel
            .layers()
            .iter()
            .map(|c| LayerPlan {
                heads: self.config.head_counts[c.mha - 1],
                width: self.config.mlp_widths[c.mlp - 1],
            })
            .collect())
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.context_len {
            return Err(Error::Length(format!(
                "sequence of {} exceeds context of {}",
                tokens.seq, self.config.context_len
            )));
        }
        if let Some(&t) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[B·S × V]` on an existing tape.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        tokens: &TokenBatch,
        sel: &Selection,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let plan = self.plan(sel)?;
        forward_plan(tape, bound, self.config.head_dim, tokens, &plan)
    }

    /// Logits shaped `[B × S × V]`.
    pub fn forward(&self, tokens: &TokenBatch, sel: &Selection) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let logits = self.forward_on(&mut tape, &bound, tokens, sel)?;
        tape.check()?;
        tape.value(logits).clone().reshape(vec![
            tokens.batch,
            tokens.seq,
            self.config.vocab_size,
        ])
    }

    /// Next-token cross-entropy node on an existing tape.
    pub fn lm_loss_on(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        tokens: &TokenBatch,
        sel: &Selection,
    ) -> Result<Var> {
        let (inputs, targets) = tokens.shifted()?;
        let logits = self.forward_on(tape, bound, &inputs, sel)?;
        tape.cross_entropy(logits, &targets)
    }

    pub fn lm_loss(&self, tokens: &TokenBatch, sel: &Selection) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let loss = self.lm_loss_on(&mut tape, &bound, tokens, sel)?;
        tape.check()?;
        Ok(tape.value(loss).item())
    }

    /// Active non-embedding parameters under `sel`.
    pub fn count_params(&self, sel: &Selection) -> Result<usize> {
        Ok(self
            .plan(sel)?
            .iter()
            .map(|p| self.config.layer_params(p.heads, p.width))
            .sum::<usize>()
            + 2 * self.config.embed_dim)
    }

    /// Candidate `j` of layer `layer`'s MLP applied to `x: [B×C]`.
    pub fn elastic_mlp_forward(&self, x: &Tensor, layer: usize, j: usize) -> Result<Tensor> {
        let k = self.config.candidates();
        if j == 0 || j > k {
            return Err(Error::Candidate { index: j, k });
        }
        let blk = self.block(layer)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = bind_block(&mut tape, blk);
        let y = mlp(&mut tape, &b, xv, self.config.mlp_widths[j - 1], None)?;
        tape.check()?;
        Ok(tape.value(y).clone())
    }

    /// Candidate `j` of layer `layer`'s causal MHA; `x` holds `batch`
    /// sequences of `seq` tokens stacked as `[batch·seq × C]`.
    pub fn elastic_mha_forward(
        &self,
        x: &Tensor,
        layer: usize,
        j: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Tensor> {
        let k = self.config.candidates();
        if j == 0 || j > k {
            return Err(Error::Candidate { index: j, k });
        }
        let blk = self.block(layer)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = bind_block(&mut tape, blk);
        let heads = self.config.head_counts[j - 1];
        let y = mha(&mut tape, &b, xv, heads, self.config.head_dim, batch, seq, None)?;
        tape.check()?;
        Ok(tape.value(y).clone())
    }

    fn block(&self, layer: usize) -> Result<&Block> {
        self.weights.blocks.get(layer).ok_or_else(|| {
            Error::Index(format!(
                "layer {layer} outside model of {}",
                self.config.num_layers
            ))
        })
    }
}

fn bind_block(tape: &mut Tape, b: &Block) -> BoundBlock {
    let v = b.tensors().map(|t| tape.constant(t.clone()));
    BoundBlock {
        ln1_g: v[0],
        ln1_b: v[1],
        wq: v[2],
        wk: v[3],
        wv: v[4],
        wo: v[5],
        ln2_g: v[6],
        ln2_b: v[7],
        w1: v[8],
        w2: v[9],
    }
}

/// A standalone dense transformer whose layers may differ in head count and
/// MLP width, e.g. a sub-network materialized from an elastic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseModel {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub weights: Weights,
}

impl DenseModel {
    pub fn plan(&self) -> Vec<LayerPlan> {
        self.weights
            .blocks
            .iter()
            .map(|b| LayerPlan {
                heads: b.wq.rows() / self.head_dim,
                width: b.hidden(),
            })
            .collect()
    }

    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let logits = forward_plan(&mut tape, &bound, self.head_dim, tokens, &self.plan())?;
        tape.check()?;
        tape.value(logits)
            .clone()
            .reshape(vec![tokens.batch, tokens.seq, self.vocab_size])
    }

    pub fn lm_loss(&self, tokens: &TokenBatch) -> Result<f64> {
        let (inputs, targets) = tokens.shifted()?;
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let logits = forward_plan(&mut tape, &bound, self.head_dim, &inputs, &self.plan())?;
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.check()?;
        Ok(tape.value(loss).item())
    }

    pub fn count_params(&self) -> usize {
        let c = self.embed_dim;
        self.plan()
            .iter()
            .map(|p| 4 * c + 4 * p.heads * self.head_dim * c + 2 * p.width * c)
            .sum::<usize>()
            + 2 * c
    }
}
