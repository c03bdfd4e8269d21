//! Per-layer, per-candidate cost lookup table, selection cost, and the hinge
//! budget loss.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ElasticModel, Selection};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    MeasuredLatency,
    AnalyticFlops,
    ParameterCount,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::MeasuredLatency => "measured-latency",
            CostKind::AnalyticFlops => "analytic-flops",
            CostKind::ParameterCount => "parameter-count",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "measured-latency" => Ok(CostKind::MeasuredLatency),
            "analytic-flops" => Ok(CostKind::AnalyticFlops),
            "parameter-count" => Ok(CostKind::ParameterCount),
            other => Err(Error::Param(format!("unknown cost kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub kind: CostKind,
    /// Embeddings, norms and output head.
    pub overhead: f64,
    pub mha: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureOptions {
    pub batch: usize,
    pub seq_len: usize,
    pub warmups: usize,
    pub repeats: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            batch: 2,
            seq_len: 64,
            warmups: 5,
            repeats: 30,
        }
    }
}

/// A budget as a fraction of the full-model cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTarget {
    pub normalized: f64,
}

impl BudgetTarget {
    pub fn new(normalized: f64) -> Result<Self> {
        if !(normalized > 0.0 && normalized <= 1.0) {
            return Err(Error::Param(format!(
                "budget {normalized} outside (0, 1]"
            )));
        }
        Ok(Self { normalized })
    }

    pub fn from_absolute(value: f64, table: &CostTable) -> Result<Self> {
        Self::new(value / table.full_cost())
    }

    pub fn absolute(&self, table: &CostTable) -> f64 {
        self.normalized * table.full_cost()
    }
}

impl CostTable {
    pub fn layers(&self) -> usize {
        self.mha.len()
    }

    pub fn candidates(&self) -> usize {
        self.mha.first().map_or(0, Vec::len)
    }

    /// Costs of slot `s` in the flattened `[mha₀, mlp₀, mha₁, …]` order.
    pub fn slot(&self, s: usize) -> &[f64] {
        if s % 2 == 0 {
            &self.mha[s / 2]
        } else {
            &self.mlp[s / 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.candidates();
        if k == 0 || self.mlp.len() != self.mha.len() {
            return Err(Error::Param("cost table is empty or ragged".into()));
        }
        if !(self.overhead.is_finite() && self.overhead >= 0.0) {
            return Err(Error::Param("overhead must be finite and nonnegative".into()));
        }
        for s in 0..2 * self.layers() {
            let c = self.slot(s);
            if c.len() != k
                || c.iter().any(|v| !v.is_finite() || *v < 0.0)
                || c.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::Param(format!(
                    "slot {s} costs {c:?} are not finite, nonnegative and increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn full_cost(&self) -> f64 {
        self.overhead
            + self.mha.iter().chain(&self.mlp).map(|c| c[c.len() - 1]).sum::<f64>()
    }

    pub fn min_cost(&self) -> f64 {
        self.overhead + self.mha.iter().chain(&self.mlp).map(|c| c[0]).sum::<f64>()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["kind", "overhead", "layer", "slot", "candidate", "cost"])?;
        for layer in 0..self.layers() {
            for (slot, costs) in [("mha", &self.mha[layer]), ("mlp", &self.mlp[layer])] {
                for (j, c) in costs.iter().enumerate() {
                    w.write_record([
                        self.kind.as_str().to_string(),
                        self.overhead.to_string(),
                        layer.to_string(),
                        slot.to_string(),
                        (j + 1).to_string(),
                        c.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        let mut kind = None;
        let mut overhead = 0.0;
        let mut entries: Vec<(usize, bool, usize, f64)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(bad(format!("row of {} fields", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i])))
            };
            kind = Some(CostKind::parse(&rec[0])?);
            overhead = num(1)?;
            let layer = num(2)? as usize;
            let is_mha = match &rec[3] {
                "mha" => true,
                "mlp" => false,
                s => return Err(bad(format!("unknown slot {s:?}"))),
            };
            entries.push((layer, is_mha, num(4)? as usize, num(5)?));
        }
        let kind = kind.ok_or_else(|| bad("no rows".into()))?;
        let layers = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let k = entries.iter().map(|e| e.2).max().unwrap_or(0);
        let mut mha = vec![vec![f64::NAN; k]; layers];
        let mut mlp = vec![vec![f64::NAN; k]; layers];
        for (layer, is_mha, j, c) in entries {
            if j == 0 {
                return Err(bad("candidate indices are 1-based".into()));
            }
            if is_mha {
                mha[layer][j - 1] = c;
            } else {
                mlp[layer][j - 1] = c;
            }
        }
        let t = CostTable {
            kind,
            overhead,
            mha,
            mlp,
        };
        t.validate()?;
        Ok(t)
    }
}

fn analytic(model: &ElasticModel, seq_len: usize) -> CostTable {
    let cfg = &model.config;
    let (c, h, s) = (cfg.embed_dim as f64, cfg.head_dim as f64, seq_len as f64);
    // per-token multiply-adds ×2: four projections, scores and weighted values
    let mha: Vec<f64> = cfg
        .head_counts
        .iter()
        .map(|&a| {
            let d = a as f64 * h;
            8.0 * d * c + 4.0 * d * s
        })
        .collect();
    let mlp: Vec<f64> = cfg
        .mlp_widths
        .iter()
        .map(|&w| 4.0 * w as f64 * c)
        .collect();
    let n = cfg.num_layers;
    CostTable {
        kind: CostKind::AnalyticFlops,
        overhead: 2.0 * cfg.vocab_size as f64 * c,
        mha: vec![mha; n],
        mlp: vec![mlp; n],
    }
}

fn parameters(model: &ElasticModel) -> CostTable {
    let cfg = &model.config;
    let c = cfg.embed_dim as f64;
    let mha: Vec<f64> = cfg
        .head_counts
        .iter()
        .map(|&a| 4.0 * (a * cfg.head_dim) as f64 * c)
        .collect();
    let mlp: Vec<f64> = cfg.mlp_widths.iter().map(|&w| 2.0 * w as f64 * c).collect();
    let n = cfg.num_layers;
    CostTable {
        kind: CostKind::ParameterCount,
        overhead: (4 * n + 2) as f64 * c,
        mha: vec![mha; n],
        mlp: vec![mlp; n],
    }
}

fn median_ms(opts: &MeasureOptions, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..opts.warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let m = times[times.len() / 2];
    if !m.is_finite() {
        return Err(Error::Measurement("non-finite timing".into()));
    }
    Ok(m)
}

/// Timing noise can invert neighbouring medians; lift each entry to just
/// above its predecessor so the table keeps the nesting order.
fn enforce_increasing(costs: &mut [f64]) {
    for j in 1..costs.len() {
        let floor = costs[j - 1] * (1.0 + 1e-6) + 1e-9;
        if costs[j] < floor {
            costs[j] = floor;
        }
    }
}

fn measured(model: &ElasticModel, opts: &MeasureOptions) -> Result<CostTable> {
    let cfg = &model.config;
    let seq = opts.seq_len.min(cfg.context_len);
    let rows = opts.batch * seq;
    let mut rng = Rng::stream(0, "latency.input");
    let x = Tensor::new(
        vec![rows, cfg.embed_dim],
        (0..rows * cfg.embed_dim).map(|_| rng.normal(1.0)).collect(),
    )?;
    let k = cfg.candidates();
    let mut mha = Vec::with_capacity(cfg.num_layers);
    let mut mlp = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let mut a = Vec::with_capacity(k);
        let mut m = Vec::with_capacity(k);
        for j in 1..=k {
            a.push(median_ms(opts, || {
                model.elastic_mha_forward(&x, layer, j, opts.batch, seq).map(drop)
            })?);
            m.push(median_ms(opts, || model.elastic_mlp_forward(&x, layer, j).map(drop))?);
        }
        enforce_increasing(&mut a);
        enforce_increasing(&mut m);
        mha.push(a);
        mlp.push(m);
    }
    let overhead = median_ms(opts, || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(model.weights.lnf_g.clone());
        let b = tape.constant(model.weights.lnf_b.clone());
        let e = tape.constant(model.weights.tok_emb.clone());
        let h = tape.layer_norm(xv, g, b, crate::model::LN_EPS)?;
        tape.matmul_nt(h, e)?;
        tape.check()
    })?;
    Ok(CostTable {
        kind: CostKind::MeasuredLatency,
        overhead,
        mha,
        mlp,
    })
}

/// Builds the table for one metric. Measured tables time each candidate in
/// isolation on a single thread.
pub fn build_cost_table(
    model: &ElasticModel,
    kind: CostKind,
    opts: &MeasureOptions,
) -> Result<CostTable> {
    let table = match kind {
        CostKind::AnalyticFlops => analytic(model, opts.seq_len.min(model.config.context_len)),
        CostKind::ParameterCount => parameters(model),
        CostKind::MeasuredLatency => {
            if opts.repeats == 0 {
                return Err(Error::Param("measured costs need at least one repeat".into()));
            }
            measured(model, opts)?
        }
    };
    table.validate()?;
    Ok(table)
}

pub fn selection_cost(table: &CostTable, sel: &Selection) -> Result<f64> {
    if sel.layers().len() != table.layers() {
        return Err(Error::Length(format!(
            "selection of {} layers for a table of {}",
            sel.layers().len(),
            table.layers()
        )));
    }
    let k = table.candidates();
    let mut total = table.overhead;
    for (i, c) in sel.layers().iter().enumerate() {
        for j in [c.mha, c.mlp] {
            if j == 0 || j > k {
                return Err(Error::Candidate { index: j, k });
            }
        }
        total += table.mha[i][c.mha - 1] + table.mlp[i][c.mlp - 1];
    }
    Ok(total)
}

/// `Σ_t max(cost_t − T_t, 0)`.
pub fn constraint_loss(costs: &[f64], targets: &[f64]) -> Result<f64> {
    if costs.len() != targets.len() {
        return Err(Error::Length(format!(
            "{} costs for {} targets",
            costs.len(),
            targets.len()
        )));
    }
    Ok(costs.iter().zip(targets).map(|(c, t)| (c - t).max(0.0)).sum())
}

/// Tape form of [`constraint_loss`] over one-element cost nodes.
pub fn constraint_loss_on(tape: &mut Tape, costs: &[Var], targets: &[f64]) -> Result<Var> {
    if costs.len() != targets.len() || costs.is_empty() {
        return Err(Error::Length(format!(
            "{} costs for {} targets",
            costs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&c, &t) in costs.iter().zip(targets) {
        let tv = tape.constant(Tensor::full(tape.value(c).shape(), t));
        let d = tape.sub(c, tv)?;
        let h = tape.relu(d);
        let h = tape.sum(h);
        total = Some(match total {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
    }
    Ok(total.expect("non-empty"))
}
