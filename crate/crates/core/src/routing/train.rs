use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dynamic::DynamicHook;
use super::{check_budget, one_hot, surrogate_forward, Estimator, route_static, selection_of, st_choice, DynamicRouter, ParamSet,
    RouterConfig, SmInput, StChoice, StaticRouter, SurrogateModel};
use crate::corpus::{Batcher, Corpus};
use crate::error::{Error, Result};
use crate::latency::CostTable;
use crate::model::{forward_hooked, ElasticModel, Gate, Selection, SlotHook, TokenBatch};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tape::{cross_entropy_rows, Tape, Var};
use crate::tensor::Tensor;
use crate::training::mean_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SmOnly,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SmOnly => "sm-only",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Surrogate mean squared error against the measured losses this step.
    pub l2_loss: f64,
    /// Mean over targets of the argmax-routed LM loss on the monitor set.
    pub lm_loss: f64,
    pub latency_loss: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "l2_loss", "lm_loss", "latency_loss", "phase"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:.12}", r.l2_loss),
                format!("{:.12}", r.lm_loss),
                format!("{:.12}", r.latency_loss),
                r.phase.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First step in the joint phase, and first step at which the trailing-mean
/// LM loss has covered half of its total decline (base: mean of the first
/// `window` steps; final: mean of the last `window`). `None` where the event
/// never happens.
pub fn phase_split(log: &LossLog, window: usize) -> (Option<usize>, Option<usize>) {
    let cross = log
        .records
        .iter()
        .find(|r| r.phase == Phase::Joint)
        .map(|r| r.step);
    let lm: Vec<f64> = log.records.iter().map(|r| r.lm_loss).collect();
    let w = window.max(1);
    if lm.len() < 2 * w {
        return (cross, None);
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let base = mean(&lm[..w]);
    let fin = mean(&lm[lm.len() - w..]);
    let decline = base - fin;
    if !(decline > 0.0) {
        return (cross, None);
    }
    let half = (w..=lm.len())
        .find(|&end| mean(&lm[end - w..end]) <= base - decline / 2.0)
        .map(|end| log.records[end - 1].step);
    (cross, half)
}

/// Gate state: the surrogate-error EMA against `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainState {
    pub phase: Phase,
    pub sm_error_ema: Option<f64>,
    pub tau: f64,
    pub lambda: f64,
    pub decay: f64,
}

impl RouterTrainState {
    pub fn new(config: &RouterConfig) -> Self {
        Self {
            phase: Phase::SmOnly,
            sm_error_ema: None,
            tau: config.tau,
            lambda: config.lambda,
            decay: config.ema_decay,
        }
    }

    /// Folds in this step's error and returns whether routers may take the
    /// surrogate gradient.
    pub fn observe(&mut self, mse: f64) -> bool {
        let ema = match self.sm_error_ema {
            None => mse,
            Some(e) => self.decay * e + (1.0 - self.decay) * mse,
        };
        self.sm_error_ema = Some(ema);
        self.phase = if ema < self.tau { Phase::Joint } else { Phase::SmOnly };
        self.phase == Phase::Joint
    }
}

pub struct TrainOutput {
    pub router: StaticRouter,
    pub surrogate: SurrogateModel,
    pub log: LossLog,
    pub state: RouterTrainState,
}

pub struct DynamicTrainOutput {
    pub router: DynamicRouter,
    pub surrogate: SurrogateModel,
    pub log: LossLog,
    pub state: RouterTrainState,
}

/// Table costs divided by the full-model cost: per slot `[K×1]` columns and overhead.
struct NormCosts {
    slots: Vec<Tensor>,
    overhead: f64,
}

impl NormCosts {
    fn new(table: &CostTable, slots: usize, k: usize) -> Result<Self> {
        table.validate()?;
        if 2 * table.layers() != slots || table.candidates() != k {
            return Err(Error::Shape(format!(
                "cost table of {} slots × {} candidates for {slots} × {k}",
                2 * table.layers(),
                table.candidates()
            )));
        }
        let full = table.full_cost();
        Ok(Self {
            slots: (0..slots)
                .map(|s| {
                    Tensor::new(vec![k, 1], table.slot(s).iter().map(|c| c / full).collect())
                        .expect("shape")
                })
                .collect(),
            overhead: table.overhead / full,
        })
    }

    /// `overhead + Σ_slots weights_s · cost_s`, each `weights_s: [rows×K]`
    /// reduced by `reduce: [out×rows]` (pass `None` for `out = rows`).
    fn cost(&self, tape: &mut Tape, weights: &[Var], reduce: Option<Var>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (w, c) in weights.iter().zip(&self.slots) {
            let cv = tape.constant(c.clone());
            let mut x = tape.matmul(*w, cv)?;
            if let Some(r) = reduce {
                x = tape.matmul(r, x)?;
            }
            total = Some(match total {
                None => x,
                Some(t) => tape.add(t, x)?,
            });
        }
        let t = total.ok_or_else(|| Error::Param("no slots".into()))?;
        let o = tape.constant(Tensor::full(tape.value(t).shape(), self.overhead));
        tape.add(t, o)
    }
}

/// `λ·Σ [max(E − T, 0) + max(H − T, 0)]` for expected cost `E` and
/// straight-through hard cost `H`, both `[T×1]`.
fn budget_hinge(
    tape: &mut Tape,
    expected: Var,
    hard: Var,
    targets: &[f64],
    lambda: f64,
) -> Result<Var> {
    let t = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let e = tape.sub(expected, t)?;
    let e = tape.relu(e);
    let h = tape.sub(hard, t)?;
    let h = tape.relu(h);
    let both = tape.add(e, h)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, lambda))
}

fn mse(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let y = tape.constant(Tensor::new(vec![target.len(), 1], target.to_vec())?);
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

fn add_grads(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                for (v, d) in x.data_mut().iter_mut().zip(g.data()) {
                    *v += d;
                }
            }
        }
    }
}

fn take_grads(tape: &Tape, loss: Var, vars: &[Var], params: &[&Tensor]) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

fn adam(lr: f64) -> Result<Adam> {
    Adam::new(AdamConfig {
        learning_rate: lr,
        ..AdamConfig::default()
    })
}

fn monitor_batches(corpus: &Corpus, config: &RouterConfig, ctx: usize) -> Result<Vec<TokenBatch>> {
    corpus.validation_batches(
        config.batch_size,
        config.seq_len.min(ctx + 1),
        config.monitor_sequences.max(1),
    )
}

/// Mean validation loss of the argmax-routed sub-network at `t_hat`.
pub fn routed_loss(
    model: &ElasticModel,
    router: &StaticRouter,
    batches: &[TokenBatch],
    t_hat: f64,
) -> Result<(Selection, f64)> {
    let (sel, _) = route_static(router, t_hat)?;
    let loss = mean_loss(model, batches, &sel)?;
    Ok((sel, loss))
}

fn check_setup(model: &ElasticModel, corpus: &Corpus, config: &RouterConfig) -> Result<()> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::Data("router training needs train and validation data".into()));
    }
    model.config.validate()
}

/// Trains static routers and the surrogate against the frozen `model`.
///
/// Each step realizes one Gumbel-perturbed selection per target, measures
/// its LM loss, and fits the surrogate to it. Routers always follow the
/// budget hinge; they also descend the surrogate's prediction once the
/// surrogate-error EMA is below `tau`.
pub fn train_routers(
    model: &ElasticModel,
    router: &StaticRouter,
    table: &CostTable,
    corpus: &Corpus,
    config: &RouterConfig,
) -> Result<TrainOutput> {
    check_setup(model, corpus, config)?;
    let k = model.config.candidates();
    let slots = 2 * model.config.num_layers;
    if router.slots() != slots || router.k != k {
        return Err(Error::Shape("router does not match the model".into()));
    }
    let costs = NormCosts::new(table, slots, k)?;
    let seq_len = config.seq_len.min(model.config.context_len + 1);
    let monitor = monitor_batches(corpus, config, model.config.context_len)?;
    let mut batcher = Batcher::new(corpus, Rng::stream(config.seed, "routers.batches"))?;
    let mut noise = Rng::stream(config.seed, "routers.gumbel");
    let mut sm = SurrogateModel::new(
        slots * k,
        config.sm_hidden,
        None,
        &mut Rng::stream(config.seed, "routers.surrogate"),
    );
    let mut router = router.clone();
    let mut router_opt = adam(config.router_lr)?;
    let mut sm_opt = adam(config.sm_lr)?;
    let mut state = RouterTrainState::new(config);
    let mut log = LossLog::default();
    let mut monitor_cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let targets = &config.targets;

    for step in 1..=config.steps {
        let batch = batcher.next_batch(corpus, config.batch_size, seq_len)?;
        let mut tape = Tape::new();
        let rvars = router.bind(&mut tape);
        let svars = sm.bind(&mut tape);
        let logits = router.logits_on(&mut tape, &rvars, targets)?;
        let mut choices: Vec<StChoice> = Vec::with_capacity(slots);
        for &l in &logits {
            choices.push(st_choice(
                &mut tape,
                l,
                config.temperature,
                config.explore,
                Some(&mut noise),
            )?);
        }
        let mut measured = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let per_slot: Vec<usize> = choices.iter().map(|c| c.realized[t]).collect();
            measured.push(model.lm_loss(&batch, &selection_of(&per_slot)?)?);
        }
        // The surrogate fits the executed selections; routers descend its
        // prediction at their own straight-through choice.
        let (seen, own): (Vec<Var>, Vec<Var>) = match config.sm_input {
            SmInput::Softmax => (
                choices.iter().map(|c| tape.constant(one_hot(&c.realized, k))).collect(),
                choices.iter().map(|c| c.st).collect(),
            ),
            SmInput::Raw => (logits.clone(), logits.clone()),
        };
        let r_seen = tape.concat_cols(&seen)?;
        let fitted = sm.forward_on(&mut tape, &svars, r_seen, None)?;
        let err = mse(&mut tape, fitted, &measured)?;
        let r_own = tape.concat_cols(&own)?;
        let pred = sm.forward_on(&mut tape, &svars, r_own, None)?;
        let probs: Vec<Var> = choices.iter().map(|c| c.probs).collect();
        let sts: Vec<Var> = choices.iter().map(|c| c.st).collect();
        let expected = costs.cost(&mut tape, &probs, None)?;
        let hard = costs.cost(&mut tape, &sts, None)?;
        let latency = budget_hinge(&mut tape, expected, hard, targets, config.lambda)?;
        tape.check()?;
        let l2 = tape.value(err).item();
        let gate = state.observe(l2);
        let router_loss = if gate {
            let p = match (config.estimator, config.sm_input) {
                (Estimator::LocalExpectation, SmInput::Softmax) => {
                    local_expectation(&mut tape, &sm, &choices, k)?
                }
                _ => tape.mean(pred),
            };
            tape.add(latency, p)?
        } else {
            latency
        };
        let sm_grads = take_grads(&tape, err, &svars, &sm.params())?;
        let r_grads = take_grads(&tape, router_loss, &rvars, &router.params())?;
        let latency_loss = tape.value(latency).item();
        drop(tape);
        sm_opt.step(&mut sm.params_mut(), &sm_grads)?;
        router_opt.step(&mut router.params_mut(), &r_grads)?;

        let mut lm = 0.0;
        for &t in targets {
            let (sel, _) = route_static(&router, t)?;
            let key = sel.slots();
            let loss = match monitor_cache.get(&key) {
                Some(&l) => l,
                None => {
                    let l = mean_loss(model, &monitor, &sel)?;
                    monitor_cache.insert(key, l);
                    l
                }
            };
            lm += loss / targets.len() as f64;
        }
        log.records.push(LossRecord {
            step,
            l2_loss: l2,
            lm_loss: lm,
            latency_loss,
            phase: state.phase,
        });
    }
    Ok(TrainOutput {
        router,
        surrogate: sm,
        log,
        state,
    })
}

/// `(1/T)·Σ_t Σ_s Σ_j p_tsj·v_tsj`, where `v_tsj` is the surrogate's value with
/// slot `s` of target `t`'s own choice swapped to candidate `j`. Its gradient
/// in the logits is `p_j·(v_j − v̄)` per slot, exact for one slot at a time.
fn local_expectation(
    tape: &mut Tape,
    sm: &SurrogateModel,
    choices: &[StChoice],
    k: usize,
) -> Result<Var> {
    let slots = choices.len();
    let targets = choices[0].choices.len();
    let width = slots * k;
    let mut rows = Vec::with_capacity(targets * slots * k * width);
    for t in 0..targets {
        let mut base = vec![0.0; width];
        for (s, c) in choices.iter().enumerate() {
            base[s * k + c.choices[t]] = 1.0;
        }
        for (s, c) in choices.iter().enumerate() {
            for j in 0..k {
                let mut r = base.clone();
                r[s * k + c.choices[t]] = 0.0;
                r[s * k + j] = 1.0;
                rows.extend(r);
            }
        }
    }
    let v = surrogate_forward(sm, &Tensor::new(vec![targets * slots * k, width], rows)?, None)?;
    let mut total: Option<Var> = None;
    for (s, c) in choices.iter().enumerate() {
        let mut vs = Vec::with_capacity(targets * k);
        for t in 0..targets {
            let at = (t * slots + s) * k;
            vs.extend_from_slice(&v[at..at + k]);
        }
        let vv = tape.constant(Tensor::new(vec![targets, k], vs)?);
        let pv = tape.mul(c.probs, vv)?;
        let term = tape.sum(pv);
        total = Some(match total {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Param("no slots".into()))?;
    Ok(tape.scale(total, 1.0 / targets as f64))
}

/// `[B × B·S]` matrix averaging each sequence's rows.
fn sequence_mean(batch: usize, seq: usize) -> Result<Tensor> {
    let mut a = vec![0.0; batch * batch * seq];
    for b in 0..batch {
        a[b * batch * seq + b * seq..b * batch * seq + (b + 1) * seq].fill(1.0 / seq as f64);
    }
    Tensor::new(vec![batch, batch * seq], a)
}

/// Dynamic-routed forward of `tokens` (already shifted) at one budget.
/// Returns the tape pieces the trainers need.
struct DynamicPass {
    tape: Tape,
    rvars: Vec<Var>,
    choices: Vec<StChoice>,
    hidden: Var,
    token_losses: Vec<f64>,
}

fn dynamic_pass(
    model: &ElasticModel,
    router: &DynamicRouter,
    inputs: &TokenBatch,
    targets: &[usize],
    t_hat: f64,
    temperature: f64,
    explore: f64,
    noise: Option<&mut Rng>,
) -> Result<DynamicPass> {
    let mut tape = Tape::new();
    let bound = model.weights.bind(&mut tape, false);
    let rvars = router.bind(&mut tape);
    let plan = model.plan(&Selection::full(&model.config))?;
    let mut hook = DynamicHook::new(router, &rvars, &model.config, t_hat, temperature, explore, inputs.seq, noise);
    let (logits, hidden) =
        forward_hooked(&mut tape, &bound, model.config.head_dim, inputs, &plan, &mut hook)?;
    let choices = std::mem::take(&mut hook.records);
    drop(hook);
    let token_losses = cross_entropy_rows(tape.value(logits), targets)?;
    Ok(DynamicPass {
        tape,
        rvars,
        choices,
        hidden,
        token_losses,
    })
}

/// Mean LM loss and token-frequency-weighted normalized cost of the argmax
/// dynamic routing at `t_hat`.
pub fn dynamic_eval(
    model: &ElasticModel,
    router: &DynamicRouter,
    table: &CostTable,
    batches: &[TokenBatch],
    t_hat: f64,
) -> Result<(f64, f64)> {
    let k = model.config.candidates();
    let full = table.full_cost();
    let (mut loss, mut cost, mut n) = (0.0, 0.0, 0usize);
    for b in batches {
        let (inputs, targets) = b.shifted()?;
        let pass = dynamic_pass(model, router, &inputs, &targets, t_hat, 1.0, 0.0, None)?;
        pass.tape.check()?;
        let rows = targets.len();
        loss += pass.token_losses.iter().sum::<f64>();
        let mut c = table.overhead * rows as f64;
        for (s, ch) in pass.choices.iter().enumerate() {
            c += ch.choices.iter().map(|&j| table.slot(s)[j.min(k - 1)]).sum::<f64>();
        }
        cost += c / full;
        n += rows;
    }
    if n == 0 {
        return Err(Error::Data("no evaluation batches".into()));
    }
    Ok((loss / n as f64, cost / n as f64))
}

/// Trains per-token routers with a hidden-state-aware surrogate that
/// predicts each sequence's mean loss from its mean routing decisions.
pub fn train_dynamic_routers(
    model: &ElasticModel,
    router: &DynamicRouter,
    table: &CostTable,
    corpus: &Corpus,
    config: &RouterConfig,
) -> Result<DynamicTrainOutput> {
    check_setup(model, corpus, config)?;
    let k = model.config.candidates();
    let slots = 2 * model.config.num_layers;
    if router.slots() != slots || router.k != k || router.embed_dim != model.config.embed_dim {
        return Err(Error::Shape("router does not match the model".into()));
    }
    let costs = NormCosts::new(table, slots, k)?;
    let seq_len = config.seq_len.min(model.config.context_len + 1);
    let monitor = monitor_batches(corpus, config, model.config.context_len)?;
    let mut batcher = Batcher::new(corpus, Rng::stream(config.seed, "dynamic.batches"))?;
    let mut noise = Rng::stream(config.seed, "dynamic.gumbel");
    let mut sm = SurrogateModel::new(
        slots * k,
        config.sm_hidden,
        Some(model.config.embed_dim),
        &mut Rng::stream(config.seed, "dynamic.surrogate"),
    );
    let mut router = router.clone();
    let mut router_opt = adam(config.router_lr)?;
    let mut sm_opt = adam(config.sm_lr)?;
    let mut state = RouterTrainState::new(config);
    let mut log = LossLog::default();

    for step in 1..=config.steps {
        let batch = batcher.next_batch(corpus, config.batch_size, seq_len)?;
        let (inputs, targets) = batch.shifted()?;
        let (b, s) = (inputs.batch, inputs.seq);
        let avg = sequence_mean(b, s)?;
        let tok = Tensor::full(&[1, b * s], 1.0 / (b * s) as f64);
        let mut pending = Vec::with_capacity(config.targets.len());
        let mut l2 = 0.0;
        for &t_hat in &config.targets {
            let mut pass = dynamic_pass(
                model,
                &router,
                &inputs,
                &targets,
                t_hat,
                config.temperature,
                config.explore,
                Some(&mut noise),
            )?;
            let measured: Vec<f64> = pass.token_losses.chunks(s).map(|c| c.iter().sum::<f64>() / s as f64).collect();
            let tape = &mut pass.tape;
            let svars = sm.bind(tape);
            let a = tape.constant(avg.clone());
            let mut seen = Vec::with_capacity(pass.choices.len());
            let mut own = Vec::with_capacity(pass.choices.len());
            for c in &pass.choices {
                let real = tape.constant(one_hot(&c.realized, k));
                seen.push(tape.matmul(a, real)?);
                own.push(tape.matmul(a, c.st)?);
            }
            let h = tape.matmul(a, pass.hidden)?;
            let r_seen = tape.concat_cols(&seen)?;
            let fitted = sm.forward_on(tape, &svars, r_seen, Some(h))?;
            let err = mse(tape, fitted, &measured)?;
            let r_own = tape.concat_cols(&own)?;
            let pred = sm.forward_on(tape, &svars, r_own, Some(h))?;
            let red = tape.constant(tok.clone());
            let probs: Vec<Var> = pass.choices.iter().map(|c| c.probs).collect();
            let sts: Vec<Var> = pass.choices.iter().map(|c| c.st).collect();
            let expected = costs.cost(tape, &probs, Some(red))?;
            let hard = costs.cost(tape, &sts, Some(red))?;
            let latency = budget_hinge(tape, expected, hard, &[t_hat], config.dynamic_lambda)?;
            tape.check()?;
            l2 += tape.value(err).item() / config.targets.len() as f64;
            pending.push((pass, svars, pred, err, latency));
        }
        let gate = state.observe(l2);
        let mut sm_acc = None;
        let mut r_acc = None;
        let mut latency_loss = 0.0;
        for (mut pass, svars, pred, err, latency) in pending {
            let tape = &mut pass.tape;
            latency_loss += tape.value(latency).item();
            let router_loss = if gate {
                let p = tape.mean(pred);
                tape.add(latency, p)?
            } else {
                latency
            };
            add_grads(&mut sm_acc, take_grads(tape, err, &svars, &sm.params())?);
            add_grads(&mut r_acc, take_grads(tape, router_loss, &pass.rvars, &router.params())?);
        }
        sm_opt.step(&mut sm.params_mut(), &sm_acc.expect("targets"))?;
        router_opt.step(&mut router.params_mut(), &r_acc.expect("targets"))?;

        let mut lm = 0.0;
        for &t in &config.targets {
            lm += dynamic_eval(model, &router, table, &monitor, t)?.0 / config.targets.len() as f64;
        }
        log.records.push(LossRecord {
            step,
            l2_loss: l2,
            lm_loss: lm,
            latency_loss,
            phase: state.phase,
        });
    }
    Ok(DynamicTrainOutput {
        router,
        surrogate: sm,
        log,
        state,
    })
}

/// Scales each slot's output by a straight-through gate of its chosen candidate.
struct ScaleHook {
    gates: Vec<Var>,
}

impl SlotHook for ScaleHook {
    fn gate(&mut self, _: &mut Tape, slot: usize, _: Var) -> Result<Option<Gate>> {
        Ok(Some(Gate::Scale(self.gates[slot])))
    }
}

/// Fine-tunes model and static routers together on the routed LM loss of
/// every target plus the budget hinge; the surrogate plays no part.
pub fn joint_finetune(
    model: &ElasticModel,
    router: &StaticRouter,
    table: &CostTable,
    corpus: &Corpus,
    config: &RouterConfig,
) -> Result<(ElasticModel, StaticRouter)> {
    let mut model = model.clone();
    let mut router = router.clone();
    if config.finetune_steps == 0 {
        return Ok((model, router));
    }
    check_setup(&model, corpus, config)?;
    let k = model.config.candidates();
    let slots = 2 * model.config.num_layers;
    let costs = NormCosts::new(table, slots, k)?;
    let seq_len = config.seq_len.min(model.config.context_len + 1);
    let mut batcher = Batcher::new(corpus, Rng::stream(config.seed, "finetune.batches"))?;
    let mut model_opt = adam(config.finetune_lr)?;
    let mut router_opt = adam(config.router_lr)?;
    let targets = &config.targets;
    for &t in targets {
        check_budget(t)?;
    }
    for _ in 0..config.finetune_steps {
        let batch = batcher.next_batch(corpus, config.batch_size, seq_len)?;
        let (inputs, next) = batch.shifted()?;
        let mut tape = Tape::new();
        let bound = model.weights.bind(&mut tape, true);
        let rvars = router.bind(&mut tape);
        let logits = router.logits_on(&mut tape, &rvars, targets)?;
        let mut choices = Vec::with_capacity(slots);
        for &l in &logits {
            choices.push(st_choice(&mut tape, l, config.temperature, 0.0, None)?);
        }
        let mut total: Option<Var> = None;
        for t in 0..targets.len() {
            let per_slot: Vec<usize> = choices.iter().map(|c| c.choices[t]).collect();
            let sel = selection_of(&per_slot)?;
            let plan = model.plan(&sel)?;
            let mut gates = Vec::with_capacity(slots);
            for (c, &j) in choices.iter().zip(&per_slot) {
                let row = tape.gather(c.st, &[t])?;
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                let ev = tape.constant(Tensor::new(vec![k, 1], e)?);
                gates.push(tape.matmul(row, ev)?);
            }
            let mut hook = ScaleHook { gates };
            let (out, _) = forward_hooked(
                &mut tape,
                &bound,
                model.config.head_dim,
                &inputs,
                &plan,
                &mut hook,
            )?;
            let l = tape.cross_entropy(out, &next)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let probs: Vec<Var> = choices.iter().map(|c| c.probs).collect();
        let sts: Vec<Var> = choices.iter().map(|c| c.st).collect();
        let expected = costs.cost(&mut tape, &probs, None)?;
        let hard = costs.cost(&mut tape, &sts, None)?;
        let latency = budget_hinge(&mut tape, expected, hard, targets, config.lambda)?;
        let loss = tape.add(total.expect("targets"), latency)?;
        tape.check()?;
        let mut grads = tape.backward(loss)?;
        let mg: Vec<Tensor> = bound
            .all()
            .into_iter()
            .zip(model.weights.tensors())
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let rg: Vec<Tensor> = rvars
            .iter()
            .zip(router.params())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(tape);
        model_opt.step(&mut model.weights.tensors_mut(), &mg)?;
        router_opt.step(&mut router.params_mut(), &rg)?;
    }
    Ok((model, router))
}
