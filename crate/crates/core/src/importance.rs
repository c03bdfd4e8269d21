//! Activation-magnitude importance of heads and MLP neurons, and the
//! function-preserving permutation that stores them in decreasing order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{ElasticModel, TokenBatch, LN_EPS};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub head_scores: Vec<f64>,
    pub neuron_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub layers: Vec<LayerScores>,
    pub sample_count: usize,
}

/// Per layer, `perm[p]` is the original index stored at position `p` (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPerm {
    pub head_perm: Vec<usize>,
    pub neuron_perm: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub layers: Vec<LayerPerm>,
}

/// `‖·‖₁` of each `head_dim`-wide column block of `att: [rows × heads·head_dim]`.
pub fn head_l1(att: &Tensor, head_dim: usize) -> Vec<f64> {
    let heads = att.cols() / head_dim;
    let mut out = vec![0.0; heads];
    for r in 0..att.rows() {
        for (h, chunk) in att.row(r).chunks_exact(head_dim).enumerate() {
            out[h] += chunk.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    out
}

/// `‖X·w_rᵀ‖₁` for every row `w_r` of `w1`.
pub fn neuron_l1(x: &Tensor, w1: &Tensor) -> Result<Vec<f64>> {
    let pre = crate::tensor::matmul_nt(x, w1)?;
    Ok(column_l1(&pre))
}

fn column_l1(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v.abs();
        }
    }
    out
}

/// Accumulates head and neuron scores over the full-selection forward pass of
/// each calibration batch, stopping after `num_samples` sequences. Rows longer
/// than the context are cropped.
pub fn score_importance(
    model: &ElasticModel,
    calib: &[TokenBatch],
    num_samples: usize,
) -> Result<ImportanceScores> {
    if num_samples == 0 {
        return Err(Error::Param("num_samples must be at least 1".into()));
    }
    let cfg = &model.config;
    let mut layers = vec![
        LayerScores {
            head_scores: vec![0.0; cfg.num_heads],
            neuron_scores: vec![0.0; cfg.mlp_hidden],
        };
        cfg.num_layers
    ];
    let mut seen = 0;
    for batch in calib {
        if seen >= num_samples {
            break;
        }
        let take = batch.batch.min(num_samples - seen);
        let len = batch.seq.min(cfg.context_len);
        let rows: Vec<Vec<usize>> = (0..take).map(|b| batch.row(b)[..len].to_vec()).collect();
        let tokens = TokenBatch::from_rows(&rows)?;
        accumulate(model, &tokens, &mut layers)?;
        seen += take;
    }
    if seen == 0 {
        return Err(Error::Data("calibration set is empty".into()));
    }
    Ok(ImportanceScores {
        layers,
        sample_count: seen,
    })
}

fn accumulate(model: &ElasticModel, tokens: &TokenBatch, layers: &mut [LayerScores]) -> Result<()> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let w = model.weights.bind(&mut tape, false);
    let mut x = crate::model::embed(&mut tape, &w, tokens)?;
    for (blk, acc) in w.blocks.iter().zip(layers.iter_mut()) {
        let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS)?;
        let q = tape.matmul_nt(h, blk.wq)?;
        let k = tape.matmul_nt(h, blk.wk)?;
        let v = tape.matmul_nt(h, blk.wv)?;
        let att = tape.attention(q, k, v, tokens.batch, tokens.seq, cfg.num_heads)?;
        for (s, a) in acc.head_scores.iter_mut().zip(head_l1(tape.value(att), cfg.head_dim)) {
            *s += a;
        }
        let o = tape.matmul(att, blk.wo)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS)?;
        let pre = tape.matmul_nt(h, blk.w1)?;
        for (s, a) in acc.neuron_scores.iter_mut().zip(column_l1(tape.value(pre))) {
            *s += a;
        }
        let act = tape.gelu(pre);
        let m = tape.matmul(act, blk.w2)?;
        x = tape.add(x, m)?;
    }
    tape.check()
}

/// Indices by descending score, ties to the lower original index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn build_plan(scores: &ImportanceScores) -> PermutationPlan {
    PermutationPlan {
        layers: scores
            .layers
            .iter()
            .map(|l| LayerPerm {
                head_perm: descending_order(&l.head_scores),
                neuron_perm: descending_order(&l.neuron_scores),
            })
            .collect(),
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (p, &o) in perm.iter().enumerate() {
        inv[o] = p;
    }
    inv
}

fn is_bijection(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n
        && perm
            .iter()
            .all(|&o| o < n && !std::mem::replace(&mut seen[o], true))
}

impl PermutationPlan {
    pub fn identity(heads: usize, hidden: usize, num_layers: usize) -> Self {
        Self {
            layers: vec![
                LayerPerm {
                    head_perm: (0..heads).collect(),
                    neuron_perm: (0..hidden).collect(),
                };
                num_layers
            ],
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerPerm {
                    head_perm: invert(&l.head_perm),
                    neuron_perm: invert(&l.neuron_perm),
                })
                .collect(),
        }
    }
}

/// Reorders `block`-row slabs so slab `p` of the result is slab `perm[p]` of `t`.
fn permute_row_blocks(t: &Tensor, perm: &[usize], block: usize) -> Result<Tensor> {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for &o in perm {
        out.extend_from_slice(&t.data()[o * block * c..(o + 1) * block * c]);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Applies the plan to every layer; the full-selection function is unchanged.
pub fn apply_plan(model: &ElasticModel, plan: &PermutationPlan) -> Result<ElasticModel> {
    let cfg = &model.config;
    if plan.layers.len() != cfg.num_layers {
        return Err(shape_err(format!(
            "plan has {} layers, model {}",
            plan.layers.len(),
            cfg.num_layers
        )));
    }
    let mut out = model.clone();
    for (i, (blk, lp)) in out.weights.blocks.iter_mut().zip(&plan.layers).enumerate() {
        if !is_bijection(&lp.head_perm, cfg.num_heads)
            || !is_bijection(&lp.neuron_perm, cfg.mlp_hidden)
        {
            return Err(shape_err(format!(
                "layer {i}: plan is not a permutation of {} heads and {} neurons",
                cfg.num_heads, cfg.mlp_hidden
            )));
        }
        let hd = cfg.head_dim;
        blk.wq = permute_row_blocks(&blk.wq, &lp.head_perm, hd)?;
        blk.wk = permute_row_blocks(&blk.wk, &lp.head_perm, hd)?;
        blk.wv = permute_row_blocks(&blk.wv, &lp.head_perm, hd)?;
        blk.wo = permute_row_blocks(&blk.wo, &lp.head_perm, hd)?;
        blk.w1 = permute_row_blocks(&blk.w1, &lp.neuron_perm, 1)?;
        blk.w2 = permute_row_blocks(&blk.w2, &lp.neuron_perm, 1)?;
    }
    Ok(out)
}
