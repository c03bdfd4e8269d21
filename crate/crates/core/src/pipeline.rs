//! Stage-by-stage conversion of a trained model into an elastic one, with
//! every artifact written to one output directory.
//!
//! Each stage reads what earlier stages wrote and fails with
//! [`Error::StageOrder`] when an input is missing. Stages never touch files
//! owned by other stages, so rerunning one with the same config and seed
//! rewrites its own outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::{batches_of, ingest_corpus, synth_corpus, Corpus, Sequence, SynthSpec};
use crate::error::{Error, Result};
use crate::importance::{apply_plan, build_plan, score_importance, ImportanceScores, PermutationPlan};
use crate::latency::{build_cost_table, selection_cost, CostKind, CostTable, MeasureOptions};
use crate::model::{ElasticModel, ModelConfig, TokenBatch};
use crate::rng::Rng;
use crate::routing::{
    extract_selection, joint_finetune, route_static, router_decision_stats, train_dynamic_routers,
    train_routers, write_histogram_csv, DynamicRouter, RouterConfig, StaticRouter,
};
use crate::scaling::{fit_scaling_law, pareto_sweep, write_pareto_csv, ParetoPoint};
use crate::training::{mean_loss, pretrain, run_elastic_ct, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Sort,
    ElasticCt,
    BuildLut,
    TrainRouters,
    Finetune,
    Extract,
    Eval,
    Pareto,
    FitLaw,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Pretrain,
        Stage::Sort,
        Stage::ElasticCt,
        Stage::BuildLut,
        Stage::TrainRouters,
        Stage::Finetune,
        Stage::Extract,
        Stage::Eval,
        Stage::Pareto,
        Stage::FitLaw,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sort => "sort",
            Stage::ElasticCt => "elastic-ct",
            Stage::BuildLut => "build-lut",
            Stage::TrainRouters => "train-routers",
            Stage::Finetune => "finetune",
            Stage::Extract => "extract",
            Stage::Eval => "eval",
            Stage::Pareto => "pareto",
            Stage::FitLaw => "fit-law",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Text files, one domain per file stem. Empty means the synthetic corpus.
    pub paths: Vec<PathBuf>,
    /// Tokens per sequence, for ingested and synthetic data alike.
    pub seq_len: usize,
    pub train_fraction: f64,
    pub synthetic: SynthSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            seq_len: 65,
            train_fraction: 0.9,
            synthetic: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Required. Overrides the seeds of every sub-config.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub cost_kind: CostKind,
    /// Training sequences scored for importance.
    pub calibration_samples: usize,
    /// Validation sequences for eval and pareto.
    pub eval_sequences: usize,
    pub eval_budgets: Vec<f64>,
    pub extract_budget: f64,
    pub pareto_budgets: Vec<f64>,
    /// Uniformly sampled selections evaluated next to the routed ones.
    pub pareto_random: usize,
    /// Also train per-token routers and write their domain histogram.
    pub dynamic_routers: bool,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: TrainConfig,
    pub elastic: TrainConfig,
    pub router: RouterConfig,
    pub measure: MeasureOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let base = TrainConfig {
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        Self {
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            cost_kind: CostKind::AnalyticFlops,
            calibration_samples: 256,
            eval_sequences: 64,
            eval_budgets: vec![0.5, 0.7, 1.0],
            extract_budget: 0.6,
            pareto_budgets: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            pareto_random: 64,
            dynamic_routers: false,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: TrainConfig {
                k: 0,
                random_probes: 0,
                ..base.clone()
            },
            elastic: base,
            router: RouterConfig::default(),
            measure: MeasureOptions::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub budget: Option<f64>,
}

impl PipelineConfig {
    /// Parses a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let rebase = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.output_dir = rebase(&cfg.output_dir);
        cfg.corpus.paths = cfg.corpus.paths.iter().map(|p| rebase(p)).collect();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies overrides, pushes the seed and sequence length into the
    /// sub-configs, and validates the result.
    pub fn effective(&self, o: &Overrides) -> Result<Self> {
        let mut c = self.clone();
        if let Some(s) = o.seed {
            c.seed = Some(s);
        }
        if let Some(d) = &o.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(b) = o.budget {
            c.extract_budget = b;
        }
        let seed = c
            .seed
            .ok_or_else(|| Error::Param("a seed is required (config `seed` or --seed)".into()))?;
        c.pretrain.seed = seed;
        c.elastic.seed = seed;
        c.router.seed = seed;
        c.pretrain.seq_len = c.corpus.seq_len;
        c.elastic.seq_len = c.corpus.seq_len;
        c.router.seq_len = c.corpus.seq_len;
        c.corpus.synthetic.seq_len = c.corpus.seq_len;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.elastic.validate()?;
        self.router.validate()?;
        if self.corpus.seq_len < 2 || self.corpus.seq_len > self.model.context_len + 1 {
            return Err(Error::Param(format!(
                "corpus seq_len {} must lie in 2..={}",
                self.corpus.seq_len,
                self.model.context_len + 1
            )));
        }
        for p in &self.corpus.paths {
            if !p.is_file() {
                return Err(Error::Ingestion {
                    path: p.clone(),
                    reason: "not a readable file".into(),
                });
            }
        }
        let budgets = self.eval_budgets.iter().chain(&self.pareto_budgets);
        for &b in budgets.chain([&self.extract_budget]) {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Param(format!("budget {b} outside (0, 1]")));
            }
        }
        if self.calibration_samples == 0 || self.eval_sequences == 0 {
            return Err(Error::Param(
                "calibration_samples and eval_sequences must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let c = &self.corpus;
        if c.paths.is_empty() {
            let spec = SynthSpec {
                seq_len: c.seq_len,
                train_fraction: c.train_fraction,
                ..c.synthetic.clone()
            };
            synth_corpus(&Rng::stream(self.seed(), "corpus"), &spec)
        } else {
            ingest_corpus(&c.paths, c.seq_len, c.train_fraction)
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn meta(&self, stage: Stage, corpus: &Corpus) -> serde_json::Value {
        json!({
            "stage": stage.as_str(),
            "seed": self.seed(),
            "corpus_fingerprint": format!("{:016x}", corpus.fingerprint()),
        })
    }
}

fn budget_tag(b: f64) -> String {
    format!("b{:.2}", b)
}

fn require(cfg: &PipelineConfig, stage: Stage, name: &str, producer: Stage, checkpoint: bool) -> Result<PathBuf> {
    let p = cfg.path(name);
    let present = if checkpoint { Checkpoint::exists(&p) } else { p.is_file() };
    if present {
        Ok(p)
    } else {
        Err(Error::StageOrder {
            stage: stage.as_str().into(),
            missing: producer.as_str().into(),
            path: p,
        })
    }
}

fn load_model(cfg: &PipelineConfig, stage: Stage, name: &str, producer: Stage) -> Result<ElasticModel> {
    ElasticModel::load(&require(cfg, stage, name, producer, true)?)
}

fn load_router(cfg: &PipelineConfig, stage: Stage, name: &str, producer: Stage) -> Result<StaticRouter> {
    StaticRouter::from_checkpoint(&Checkpoint::load(&require(cfg, stage, name, producer, true)?)?)
}

fn eval_batches(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Vec<TokenBatch>> {
    corpus.validation_batches(cfg.pretrain.batch_size, cfg.corpus.seq_len, cfg.eval_sequences)
}

fn write_importance_csv(scores: &ImportanceScores, plan: &PermutationPlan, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "kind", "index", "score", "rank"])?;
    for (l, (s, p)) in scores.layers.iter().zip(&plan.layers).enumerate() {
        let inv = |perm: &[usize], i: usize| perm.iter().position(|&o| o == i).unwrap_or(i);
        for (kind, vals, perm) in [("head", &s.head_scores, &p.head_perm), ("neuron", &s.neuron_scores, &p.neuron_perm)] {
            for (i, v) in vals.iter().enumerate() {
                w.write_record([
                    l.to_string(),
                    kind.to_string(),
                    i.to_string(),
                    format!("{v:.12e}"),
                    inv(perm, i).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_eval_csv(rows: &[(f64, ParetoPoint)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["budget", "selection", "params", "cost", "loss", "perplexity"])?;
    for (b, p) in rows {
        w.write_record([
            format!("{b:.6}"),
            p.selection.clone(),
            p.params.to_string(),
            format!("{:.6}", p.cost),
            format!("{:.12}", p.loss),
            format!("{:.12}", p.loss.exp()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one stage against an effective config. Returns the files written.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::new();
    let echo = cfg.path(&format!("config.{}.toml", stage.as_str()));
    fs::write(&echo, cfg.to_toml()?)?;
    written.push(echo);
    let corpus = cfg.corpus()?;
    let meta = cfg.meta(stage, &corpus);
    match stage {
        Stage::Pretrain => {
            let init = ElasticModel::new(cfg.model.clone(), &mut Rng::stream(cfg.seed(), "init"))?;
            let (model, log) = pretrain(&init, &corpus, &cfg.pretrain)?;
            let stem = cfg.path("pretrained");
            model.save(&stem, meta)?;
            log.write_csv(&cfg.path("pretrain_log.csv"))?;
            written.extend([stem, cfg.path("pretrain_log.csv")]);
        }
        Stage::Sort => {
            let model = load_model(cfg, stage, "pretrained", Stage::Pretrain)?;
            let calib: Vec<&Sequence> = corpus.train.iter().step_by(2).take(cfg.calibration_samples).collect();
            let batches = batches_of(&calib, 16, cfg.corpus.seq_len)?;
            let scores = score_importance(&model, &batches, cfg.calibration_samples)?;
            let plan = build_plan(&scores);
            let sorted = apply_plan(&model, &plan)?;
            let stem = cfg.path("sorted");
            sorted.save(&stem, meta)?;
            write_importance_csv(&scores, &plan, &cfg.path("importance.csv"))?;
            written.extend([stem, cfg.path("importance.csv")]);
        }
        Stage::ElasticCt => {
            let model = load_model(cfg, stage, "sorted", Stage::Sort)?;
            let (elastic, log) = run_elastic_ct(&model, &corpus, &cfg.elastic)?;
            let stem = cfg.path("elastic");
            elastic.save(&stem, meta)?;
            log.write_csv(&cfg.path("trajectory.csv"))?;
            written.extend([stem, cfg.path("trajectory.csv")]);
        }
        Stage::BuildLut => {
            let model = load_model(cfg, stage, "elastic", Stage::ElasticCt)?;
            let table = build_cost_table(&model, cfg.cost_kind, &cfg.measure)?;
            table.write_csv(&cfg.path("cost_table.csv"))?;
            written.push(cfg.path("cost_table.csv"));
        }
        Stage::TrainRouters => {
            let model = load_model(cfg, stage, "elastic", Stage::ElasticCt)?;
            let table = CostTable::read_csv(&require(cfg, stage, "cost_table.csv", Stage::BuildLut, false)?)?;
            let slots = 2 * cfg.model.num_layers;
            let k = cfg.model.candidates();
            let init = StaticRouter::new(slots, k, cfg.router.router_hidden, &mut Rng::stream(cfg.seed(), "router.init"));
            let out = train_routers(&model, &init, &table, &corpus, &cfg.router)?;
            let stem = cfg.path("router");
            let mut ck = out.router.to_checkpoint();
            ck.meta["pipeline"] = meta.clone();
            ck.save(&stem)?;
            out.log.write_csv(&cfg.path("router_log.csv"))?;
            written.extend([stem, cfg.path("router_log.csv")]);
            if cfg.dynamic_routers {
                let init = DynamicRouter::new(
                    slots,
                    k,
                    cfg.router.dynamic_width,
                    cfg.model.embed_dim,
                    &mut Rng::stream(cfg.seed(), "dynamic.init"),
                );
                let dynamic = train_dynamic_routers(&model, &init, &table, &corpus, &cfg.router)?;
                let stem = cfg.path("dynamic_router");
                let mut ck = dynamic.router.to_checkpoint();
                ck.meta["pipeline"] = meta;
                ck.save(&stem)?;
                dynamic.log.write_csv(&cfg.path("dynamic_router_log.csv"))?;
                let mut rows = Vec::new();
                for &t in &cfg.router.targets {
                    let mut h = router_decision_stats(&model, &dynamic.router, &corpus, t, cfg.corpus.seq_len, cfg.eval_sequences)?;
                    rows.append(&mut h);
                }
                write_histogram_csv(&rows, &cfg.path("histogram.csv"))?;
                written.extend([stem, cfg.path("dynamic_router_log.csv"), cfg.path("histogram.csv")]);
            }
        }
        Stage::Finetune => {
            let model = load_model(cfg, stage, "elastic", Stage::ElasticCt)?;
            let router = load_router(cfg, stage, "router", Stage::TrainRouters)?;
            let table = CostTable::read_csv(&require(cfg, stage, "cost_table.csv", Stage::BuildLut, false)?)?;
            let (tuned, tuned_router) = joint_finetune(&model, &router, &table, &corpus, &cfg.router)?;
            let stem = cfg.path("finetuned");
            tuned.save(&stem, meta.clone())?;
            let rstem = cfg.path("router_finetuned");
            let mut ck = tuned_router.to_checkpoint();
            ck.meta["pipeline"] = meta;
            ck.save(&rstem)?;
            written.extend([stem, rstem]);
        }
        Stage::Extract => {
            let model = load_model(cfg, stage, "finetuned", Stage::Finetune)?;
            let router = load_router(cfg, stage, "router_finetuned", Stage::Finetune)?;
            let sel = route_static(&router, cfg.extract_budget)?.0;
            let dense = extract_selection(&model, &sel)?;
            let mut m = meta;
            m["budget"] = json!(cfg.extract_budget);
            m["selection"] = json!(sel.describe());
            let stem = cfg.path(&format!("extracted_{}", budget_tag(cfg.extract_budget)));
            dense.save(&stem, m)?;
            written.push(stem);
        }
        Stage::Eval => {
            let model = load_model(cfg, stage, "finetuned", Stage::Finetune)?;
            let router = load_router(cfg, stage, "router_finetuned", Stage::Finetune)?;
            let table = CostTable::read_csv(&require(cfg, stage, "cost_table.csv", Stage::BuildLut, false)?)?;
            let batches = eval_batches(cfg, &corpus)?;
            let mut rows = Vec::new();
            for &b in &cfg.eval_budgets {
                let sel = route_static(&router, b)?.0;
                let loss = mean_loss(&model, &batches, &sel)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("eval"));
                }
                rows.push((
                    b,
                    ParetoPoint {
                        budget: b,
                        params: model.count_params(&sel)?,
                        cost: selection_cost(&table, &sel)?,
                        loss,
                        selection: sel.describe(),
                    },
                ));
            }
            write_eval_csv(&rows, &cfg.path("eval.csv"))?;
            written.push(cfg.path("eval.csv"));
        }
        Stage::Pareto => {
            let model = load_model(cfg, stage, "finetuned", Stage::Finetune)?;
            let router = load_router(cfg, stage, "router_finetuned", Stage::Finetune)?;
            let table = CostTable::read_csv(&require(cfg, stage, "cost_table.csv", Stage::BuildLut, false)?)?;
            let batches = eval_batches(cfg, &corpus)?;
            let mut rng = Rng::stream(cfg.seed(), "pareto.cloud");
            let sweep = pareto_sweep(&model, Some(&router), &table, &batches, &cfg.pareto_budgets, &[], cfg.pareto_random, &mut rng)?;
            write_pareto_csv(&sweep.points, &cfg.path("pareto.csv"))?;
            write_pareto_csv(&sweep.cloud, &cfg.path("pareto_random.csv"))?;
            written.extend([cfg.path("pareto.csv"), cfg.path("pareto_random.csv")]);
        }
        Stage::FitLaw => {
            let mut points = Vec::new();
            for name in ["pareto.csv", "pareto_random.csv"] {
                let path = require(cfg, stage, name, Stage::Pareto, false)?;
                let mut r = csv::Reader::from_path(&path)?;
                for rec in r.records() {
                    let rec = rec?;
                    let parse = |i: usize| -> Result<f64> {
                        rec.get(i)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| Error::Format(format!("{}: bad field {i}", path.display())))
                    };
                    points.push((parse(1)?, parse(3)?));
                }
            }
            let fit = fit_scaling_law(&points)?;
            fit.write_csv(&cfg.path("fit.csv"))?;
            written.push(cfg.path("fit.csv"));
        }
        Stage::Report => {
            require(cfg, stage, "eval.csv", Stage::Eval, false)?;
            let mut w = csv::Writer::from_path(cfg.path("report.csv"))?;
            w.write_record(["source", "record"])?;
            for name in REPORT_SOURCES {
                let path = cfg.path(name);
                if !path.is_file() {
                    continue;
                }
                for line in fs::read_to_string(&path)?.lines() {
                    w.write_record([name, line])?;
                }
            }
            w.flush()?;
            written.push(cfg.path("report.csv"));
        }
    }
    Ok(written)
}

const REPORT_SOURCES: [&str; 11] = [
    "pretrain_log.csv",
    "importance.csv",
    "trajectory.csv",
    "cost_table.csv",
    "router_log.csv",
    "dynamic_router_log.csv",
    "histogram.csv",
    "eval.csv",
    "pareto.csv",
    "pareto_random.csv",
    "fit.csv",
];

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for s in Stage::ALL {
        out.extend(run_stage(cfg, s)?);
    }
    Ok(out)
}
