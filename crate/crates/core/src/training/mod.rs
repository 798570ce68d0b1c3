//! Composite-loss training with early stopping, grid search over learning
//! rates and temperatures, and the ablation runner.

mod ablation;
mod grid;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{self, ContrastiveConfig, MemoryBank, RepRecord};
use crate::corpus::{label_matrices, CaseDocument, Splits};
use crate::diff::{grad_check, AdamConfig, AdamState, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, ReportPair};
use crate::network::{forward, BoundParams, ForwardVars, ModelParams, NetworkConfig};
use crate::Task;

pub use ablation::{run_ablation, AblationCondition, AblationOutcome, AblationSettings};
pub use grid::{grid_search, GridCell, GridResult, GridSpec};

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossMask {
    pub bce_a: bool,
    pub bce_b: bool,
    pub contrastive_a: bool,
    pub contrastive_b: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossMask {
    pub const ALL: Self = Self {
        bce_a: true,
        bce_b: true,
        contrastive_a: true,
        contrastive_b: true,
    };
    pub const NONE: Self = Self {
        bce_a: false,
        bce_b: false,
        contrastive_a: false,
        contrastive_b: false,
    };

    pub fn any(&self) -> bool {
        self.bce_a || self.bce_b || self.contrastive_a || self.contrastive_b
    }

    pub fn any_contrastive(&self) -> bool {
        self.contrastive_a || self.contrastive_b
    }

    /// A task counts as active when its classification loss is on.
    pub fn task_active(&self, task: Task) -> bool {
        match task {
            Task::A => self.bce_a,
            Task::B => self.bce_b,
        }
    }
}

/// Dev score used for early stopping and grid selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Mean dev m-F1 of the tasks whose classification loss is active.
    MeanActiveMacro,
    TaskAMacro,
    TaskBMacro,
    TaskAHardMacro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Candidates for [`grid_search`].
    pub learning_rates: Vec<f64>,
    /// Weight of the summed contrastive terms.
    pub beta: f64,
    pub loss_mask: LossMask,
    pub selection: SelectionMetric,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            learning_rate: 1e-3,
            learning_rates: vec![1e-3, 3e-4, 1e-4],
            beta: 1.0,
            loss_mask: LossMask::ALL,
            selection: SelectionMetric::MeanActiveMacro,
            contrastive: ContrastiveConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.loss_mask.any() {
            return Err(Error::Contract("every loss term is masked".into()));
        }
        if self.batch_size == 0 || (self.loss_mask.any_contrastive() && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} too small (contrastive terms need at least 2)",
                self.batch_size
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and beta {} nonnegative",
                self.learning_rate, self.beta
            )));
        }
        self.contrastive.validate()
    }
}

/// Scalar values of the loss terms of one batch; masked terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub bce_a: f64,
    pub bce_b: f64,
    pub contrastive_a: f64,
    pub contrastive_b: f64,
}

/// Memory-bank pools for each task, as seen by one step.
#[derive(Clone, Debug, Default)]
pub struct BankSnapshot {
    pub task_a: Vec<RepRecord>,
    pub task_b: Vec<RepRecord>,
}

impl BankSnapshot {
    pub fn of(bank: &MemoryBank) -> Self {
        Self {
            task_a: bank.snapshot(Task::A),
            task_b: bank.snapshot(Task::B),
        }
    }
}

fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    tape.concat(rows, 0)
}

/// `BCE_B + BCE_A + beta * (L_hc_B + L_hc_A)` over the active terms of a batch.
pub fn composite_loss(
    tape: &mut Tape,
    outputs: &[ForwardVars],
    cases: &[&CaseDocument],
    bank: &BankSnapshot,
    cfg: &TrainConfig,
) -> Result<(Var, LossComponents)> {
    let mask = cfg.loss_mask;
    if !mask.any() {
        return Err(Error::Contract("every loss term is masked".into()));
    }
    if outputs.len() != cases.len() || outputs.is_empty() {
        return Err(Error::dim(
            "composite_loss",
            format!("{} forward outputs for {} cases", outputs.len(), cases.len()),
        ));
    }
    let alleged: Vec<Vec<u8>> = cases.iter().map(|c| c.labels.alleged.clone()).collect();
    let violated: Vec<Vec<u8>> = cases.iter().map(|c| c.labels.violated.clone()).collect();
    let as_targets = |m: &[Vec<u8>]| {
        Tensor::from_rows(&m.iter().map(|r| r.iter().map(|&b| f64::from(b)).collect()).collect::<Vec<_>>())
    };

    let mut comps = LossComponents::default();
    let mut terms = Vec::new();
    if mask.bce_b {
        let logits: Vec<Var> = outputs.iter().map(|o| o.o_b).collect();
        let logits = stack_rows(tape, &logits)?;
        let l = tape.bce_with_logits(logits, &as_targets(&alleged)?)?;
        comps.bce_b = tape.value(l).item();
        terms.push(l);
    }
    if mask.bce_a {
        let logits: Vec<Var> = outputs.iter().map(|o| o.o_a).collect();
        let logits = stack_rows(tape, &logits)?;
        let l = tape.bce_with_logits(logits, &as_targets(&violated)?)?;
        comps.bce_a = tape.value(l).item();
        terms.push(l);
    }
    if mask.contrastive_b {
        let views: Vec<Var> = outputs.iter().map(|o| o.views_b).collect();
        let l = contrastive::batch_loss(tape, &views, &alleged, &bank.task_b, &cfg.contrastive)?;
        comps.contrastive_b = tape.value(l).item();
        terms.push(tape.scale(l, cfg.beta));
    }
    if mask.contrastive_a {
        let views: Vec<Var> = outputs.iter().map(|o| o.views_a).collect();
        let l = contrastive::batch_loss(tape, &views, &violated, &bank.task_a, &cfg.contrastive)?;
        comps.contrastive_a = tape.value(l).item();
        terms.push(tape.scale(l, cfg.beta));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    comps.total = tape.value(total).item();
    Ok((total, comps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// One epoch of training: mean train loss terms and dev scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce_a: f64,
    pub bce_b: f64,
    pub contrastive_a: f64,
    pub contrastive_b: f64,
    pub dev_b_micro_f1: f64,
    pub dev_b_macro_f1: f64,
    pub dev_a_micro_f1: f64,
    pub dev_a_macro_f1: f64,
    pub dev_a_hard_macro_f1: f64,
    pub selection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned parameters.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Binary predictions of both tasks, one row per case.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub task_a: Vec<Vec<u8>>,
    pub task_b: Vec<Vec<u8>>,
}

pub fn predict(params: &ModelParams, cases: &[CaseDocument]) -> Result<Predictions> {
    let mut task_a = Vec::with_capacity(cases.len());
    let mut task_b = Vec::with_capacity(cases.len());
    for case in cases {
        let (b, a) = params.infer(case, params.gold_for(case))?.predictions();
        task_a.push(a);
        task_b.push(b);
    }
    Ok(Predictions { task_a, task_b })
}

pub fn evaluate(params: &ModelParams, cases: &[CaseDocument]) -> Result<ReportPair> {
    if cases.is_empty() {
        return Err(Error::Contract("evaluation over an empty split".into()));
    }
    let preds = predict(params, cases)?;
    let (alleged, violated) = label_matrices(cases);
    metrics::report(&preds.task_a, &preds.task_b, &violated, &alleged)
}

fn selection_score(report: &ReportPair, cfg: &TrainConfig) -> f64 {
    match cfg.selection {
        SelectionMetric::TaskAMacro => report.task_a.macro_f1,
        SelectionMetric::TaskBMacro => report.task_b.macro_f1,
        SelectionMetric::TaskAHardMacro => report.task_a.hard_macro_f1.unwrap_or(0.0),
        SelectionMetric::MeanActiveMacro => {
            let mut scores = Vec::new();
            if cfg.loss_mask.bce_b {
                scores.push(report.task_b.macro_f1);
            }
            if cfg.loss_mask.bce_a {
                scores.push(report.task_a.macro_f1);
            }
            if scores.is_empty() {
                // Contrastive-only training: fall back to both tasks.
                scores = vec![report.task_a.macro_f1, report.task_b.macro_f1];
            }
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }
}

fn check_corpus(cases: &[CaseDocument], net: &NetworkConfig, split: &str) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Contract(format!("{split} split is empty")));
    }
    for c in cases {
        if c.k() != net.k || c.embedding_width() != net.d_e {
            return Err(Error::dim(
                "train",
                format!(
                    "{split} case {} has k = {} and d_e = {}, network expects k = {} and d_e = {}",
                    c.case_id,
                    c.k(),
                    c.embedding_width(),
                    net.k,
                    net.d_e
                ),
            ));
        }
    }
    Ok(())
}

/// Gradient of the composite loss for one batch, with the loss components.
pub fn batch_gradients<R: rand::Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&CaseDocument],
    bank: &BankSnapshot,
    cfg: &TrainConfig,
    train: bool,
    rng: &mut R,
) -> Result<(Vec<Option<Vec<f64>>>, LossComponents, Vec<(Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut outputs = Vec::with_capacity(batch.len());
    for case in batch {
        outputs.push(forward(&mut tape, &bound, case, train, params.gold_for(case), rng)?);
    }
    let (loss, comps) = composite_loss(&mut tape, &outputs, batch, bank, cfg)?;
    let views = outputs
        .iter()
        .map(|o| (tape.value(o.views_a).clone(), tape.value(o.views_b).clone()))
        .collect();
    let vars = bound.vars.clone();
    let mut grads = tape.backward(loss)?;
    Ok((vars.iter().map(|v| grads.take(*v)).collect(), comps, views))
}

/// Trains from `seed`-initialised parameters; returns the best dev epoch's parameters.
pub fn train(splits: &Splits, net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    check_corpus(&splits.train, net, "train")?;
    check_corpus(&splits.dev, net, "dev")?;

    let mut params = ModelParams::init(net, cfg.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        params.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut bank = MemoryBank::new(cfg.contrastive.bank_capacity);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&CaseDocument> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let snapshot = if cfg.loss_mask.any_contrastive() {
                BankSnapshot::of(&bank)
            } else {
                BankSnapshot::default()
            };
            let (mut grads, comps, views) = batch_gradients(&params, &batch, &snapshot, cfg, true, &mut rng)?;
            if !comps.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch} step {step} ({comps:?})",
                    comps.total
                )));
            }
            for (g, t) in grads.iter_mut().zip(params.tensors()) {
                match g {
                    Some(v) if v.iter().any(|x| !x.is_finite()) => {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient at epoch {epoch} step {step}"
                        )))
                    }
                    Some(_) => {}
                    None => *g = Some(vec![0.0; t.len()]),
                }
            }
            adam.step(params.tensors_mut(), &mut grads)?;
            if cfg.loss_mask.any_contrastive() {
                let (a_rows, b_rows): (Vec<Tensor>, Vec<Tensor>) = views.into_iter().unzip();
                let alleged: Vec<Vec<u8>> = batch.iter().map(|c| c.labels.alleged.clone()).collect();
                let violated: Vec<Vec<u8>> = batch.iter().map(|c| c.labels.violated.clone()).collect();
                if cfg.loss_mask.contrastive_b {
                    bank.update(contrastive::records_from_rows(Task::B, &b_rows, &alleged));
                }
                if cfg.loss_mask.contrastive_a {
                    bank.update(contrastive::records_from_rows(Task::A, &a_rows, &violated));
                }
            }
            sums.total += comps.total;
            sums.bce_a += comps.bce_a;
            sums.bce_b += comps.bce_b;
            sums.contrastive_a += comps.contrastive_a;
            sums.contrastive_b += comps.contrastive_b;
            batches += 1;
        }
        let dev = evaluate(&params, &splits.dev)?;
        let score = selection_score(&dev, cfg);
        let nb = batches as f64;
        epochs.push(EpochRecord {
            epoch,
            loss: sums.total / nb,
            bce_a: sums.bce_a / nb,
            bce_b: sums.bce_b / nb,
            contrastive_a: sums.contrastive_a / nb,
            contrastive_b: sums.contrastive_b / nb,
            dev_b_micro_f1: dev.task_b.micro_f1,
            dev_b_macro_f1: dev.task_b.macro_f1,
            dev_a_micro_f1: dev.task_a.micro_f1,
            dev_a_macro_f1: dev.task_a.macro_f1,
            dev_a_hard_macro_f1: dev.task_a.hard_macro_f1.unwrap_or(0.0),
            selection: score,
        });
        log::info!("epoch {epoch}: loss {:.4} dev selection {score:.4}", sums.total / nb);
        match &best {
            Some((_, s, _)) if score <= *s => {
                if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
                    stop_reason = StopReason::Patience;
                    break;
                }
            }
            _ => best = Some((epoch, score, params.clone())),
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        history: TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    })
}

/// Finite-difference check of the composite loss gradient for `batch` at `params`.
///
/// Runs in evaluation mode (no dropout) with an empty memory bank.
pub fn model_grad_check(
    params: &ModelParams,
    batch: &[&CaseDocument],
    cfg: &TrainConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let net = params.config().clone();
    grad_check(
        |tape, vars| {
            let layout = params.layout();
            let bound = BoundParams {
                layout,
                config: &net,
                vars: vars.to_vec(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut outputs = Vec::with_capacity(batch.len());
            for case in batch {
                let gold = net.dependency_mode.needs_gold().then_some(case.labels.alleged.as_slice());
                outputs.push(forward(tape, &bound, case, false, gold, &mut rng)?);
            }
            Ok(composite_loss(tape, &outputs, batch, &BankSnapshot::default(), cfg)?.0)
        },
        params.tensors(),
        step,
    )
}

/// Gradient check of the composite loss on a random batch of `batch_size` small cases
/// (3 sentences of 4 tokens) for a freshly initialised network.
pub fn probe_grad_check(net: &NetworkConfig, cfg: &TrainConfig, batch_size: usize, seed: u64, step: f64) -> Result<GradCheckReport> {
    use rand::Rng;

    let net = NetworkConfig {
        dropout: 0.0,
        ..net.clone()
    };
    let params = ModelParams::init(&net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let (m, n, k, d) = (3, 4, net.k, net.d_e);
    let mut cases = Vec::with_capacity(batch_size);
    for j in 0..batch_size {
        let sentences = (0..m)
            .map(|_| Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let alleged: Vec<u8> = (0..k).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let violated = alleged.iter().map(|&a| a & u8::from(rng.random_bool(0.5))).collect();
        let date = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
        cases.push(CaseDocument::new(format!("probe-{j}"), date, sentences, crate::corpus::LabelSet { alleged, violated })?);
    }
    let batch: Vec<&CaseDocument> = cases.iter().collect();
    model_grad_check(&params, &batch, cfg, step)
}

#[cfg(test)]
mod tests;
