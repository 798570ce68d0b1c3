//! Two-level hierarchical contrastive loss over interaction-aware article rows.
//!
//! For an anchor row (case `j`, article `i`) the pool is every other live row
//! of the batch plus the memory bank of the same task:
//!
//! * `P`: every pool member (the anchor itself is never in the pool),
//! * `Q`: members for article `i`,
//! * `R`: members of `Q` with the anchor's outcome.
//!
//! The default loss per anchor is
//! `-log(sum_Q e^{s/tau_a} / sum_P e^{s/tau_a}) - alpha * log(sum_R e^{s/tau_c} / sum_Q e^{s/tau_c})`,
//! averaged over all `N * k` live anchors. Anchors with empty `Q` add 0;
//! anchors with empty `R` add only the article-level term.

mod bank;

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::Task;

pub use bank::{MemoryBank, DEFAULT_BANK_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Dot product of L2-normalised rows.
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Sum of the two negative log-ratios.
    NegativeLogSum,
    /// `log(sum_Q / sum_P) * alpha * (sum_R / sum_Q)`, the product as typeset.
    PaperLiteralProduct,
}

/// Which pool members form the article-level denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorSet {
    /// Every representation except the anchor.
    AllExceptAnchor,
    /// Only representations of other articles from other cases.
    OtherArticleOtherCase,
}

pub const TEMPERATURE_GRID: [f64; 6] = [0.07, 0.1, 0.14, 0.2, 0.25, 0.3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau_a: f64,
    pub tau_c: f64,
    pub alpha: f64,
    pub similarity: Similarity,
    pub formulation: Formulation,
    pub denominator: DenominatorSet,
    /// When false only the outcome-level term is kept.
    pub article_term: bool,
    pub bank_capacity: usize,
    pub temperature_grid: Vec<f64>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau_a: 0.1,
            tau_c: 0.2,
            alpha: 0.5,
            similarity: Similarity::Cosine,
            formulation: Formulation::NegativeLogSum,
            denominator: DenominatorSet::AllExceptAnchor,
            article_term: true,
            bank_capacity: DEFAULT_BANK_CAPACITY,
            temperature_grid: TEMPERATURE_GRID.to_vec(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0 && self.tau_c > 0.0) {
            return Err(Error::Config(format!(
                "contrastive: temperatures must be positive, got tau_a={} tau_c={}",
                self.tau_a, self.tau_c
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("contrastive: alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.article_term && self.formulation == Formulation::PaperLiteralProduct {
            return Err(Error::Config(
                "contrastive: the product formulation cannot drop the article-level term".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered `(tau_a, tau_c)` pairs from `grid` with `tau_a < tau_c`.
pub fn temperature_pairs(grid: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (i, &a) in grid.iter().enumerate() {
        for &c in &grid[i + 1..] {
            if a < c {
                out.push((a, c));
            } else if c < a {
                out.push((c, a));
            }
        }
    }
    out.sort_by(|x, y| x.partial_cmp(y).expect("finite temperatures"));
    out
}

/// A representation in the contrastive pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RepRecord {
    pub representation: Vec<f64>,
    pub article: usize,
    pub outcome: u8,
    pub task: Task,
    /// Batch index of the case it came from; `None` for bank entries.
    pub case: Option<usize>,
}

/// Pool indices of the three anchor sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorSets {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub r: Vec<usize>,
}

fn denominator_member(anchor: &RepRecord, other: &RepRecord, rule: DenominatorSet) -> bool {
    match rule {
        DenominatorSet::AllExceptAnchor => true,
        DenominatorSet::OtherArticleOtherCase => {
            other.article != anchor.article && (other.case.is_none() || other.case != anchor.case)
        }
    }
}

/// Anchor sets over `pool`, which must not contain the anchor itself.
pub fn build_sets(anchor: &RepRecord, pool: &[RepRecord], rule: DenominatorSet) -> AnchorSets {
    let mut sets = AnchorSets::default();
    for (idx, rec) in pool.iter().enumerate() {
        if denominator_member(anchor, rec, rule) {
            sets.p.push(idx);
        }
        if rec.article == anchor.article {
            sets.q.push(idx);
            if rec.outcome == anchor.outcome {
                sets.r.push(idx);
            }
        }
    }
    sets
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn similarity(a: &[f64], b: &[f64], kind: Similarity) -> f64 {
    match kind {
        Similarity::Dot => dot(a, b),
        Similarity::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot(a, b) / (na * nb)
            }
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return None;
    }
    Some(max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Loss of one anchor representation against `pool` given precomputed sets.
pub fn anchor_loss(anchor: &[f64], sets: &AnchorSets, pool: &[RepRecord], cfg: &ContrastiveConfig) -> Result<f64> {
    if sets.q.is_empty() || (cfg.article_term && sets.p.is_empty()) {
        return Ok(0.0);
    }
    let sims: Vec<f64> = pool
        .iter()
        .map(|r| similarity(anchor, &r.representation, cfg.similarity))
        .collect();
    let lse = |idx: &[usize], tau: f64| log_sum_exp(idx.iter().map(|&i| sims[i] / tau));
    let log_ratio_article = lse(&sets.q, cfg.tau_a).unwrap_or(0.0) - lse(&sets.p, cfg.tau_a).unwrap_or(0.0);
    let outcome = lse(&sets.r, cfg.tau_c).map(|r| r - lse(&sets.q, cfg.tau_c).expect("q nonempty"));
    let loss = match cfg.formulation {
        Formulation::NegativeLogSum => {
            let article = if cfg.article_term { -log_ratio_article } else { 0.0 };
            article - cfg.alpha * outcome.unwrap_or(0.0)
        }
        Formulation::PaperLiteralProduct => match outcome {
            Some(log_ratio) => log_ratio_article * cfg.alpha * log_ratio.exp(),
            None => log_ratio_article,
        },
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite contrastive loss {loss} for anchor")));
    }
    Ok(loss)
}

/// Mean hierarchical contrastive loss over every live anchor.
///
/// `live[j]` is the `k x w` row block of case `j`, `outcomes[j]` its `k` binary
/// labels for the task. `bank` entries only enter the pool; they never anchor and
/// never receive gradient.
pub fn batch_loss(
    tape: &mut Tape,
    live: &[Var],
    outcomes: &[Vec<u8>],
    bank: &[RepRecord],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let bank_var = if bank.is_empty() {
        None
    } else {
        let rows: Vec<Vec<f64>> = bank.iter().map(|r| r.representation.clone()).collect();
        Some(tape.constant(Tensor::from_rows(&rows)?))
    };
    let meta: Vec<(usize, u8)> = bank.iter().map(|r| (r.article, r.outcome)).collect();
    batch_loss_with_bank_var(tape, live, outcomes, bank_var, &meta, cfg)
}

/// As [`batch_loss`], with the bank already on the tape as an `M x w` variable
/// and `(article, outcome)` per bank row. The bank is detached before use.
pub fn batch_loss_with_bank_var(
    tape: &mut Tape,
    live: &[Var],
    outcomes: &[Vec<u8>],
    bank: Option<Var>,
    bank_meta: &[(usize, u8)],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    if live.is_empty() {
        return Err(Error::Contract("contrastive loss over an empty batch".into()));
    }
    if outcomes.len() != live.len() {
        return Err(Error::dim(
            "contrastive",
            format!("{} cases but {} outcome rows", live.len(), outcomes.len()),
        ));
    }
    let (k, w) = tape.value(live[0]).rows_cols();
    for (j, v) in live.iter().enumerate() {
        if tape.value(*v).rows_cols() != (k, w) || outcomes[j].len() != k {
            return Err(Error::dim(
                "contrastive",
                format!("case {j}: rows {:?}, {} outcomes, expected {k} x {w}", tape.shape(*v), outcomes[j].len()),
            ));
        }
    }
    let bank_rows = bank.map_or(0, |b| tape.value(b).rows());
    if bank_rows != bank_meta.len() || bank.is_some_and(|b| tape.value(b).cols() != w) {
        return Err(Error::dim(
            "contrastive",
            format!("bank of {bank_rows} rows with {} labels, width must be {w}", bank_meta.len()),
        ));
    }

    let n = live.len();
    let anchors = n * k;
    let total = anchors + bank_rows;

    // (article, outcome, case) for every pool column.
    let mut column: Vec<(usize, u8, Option<usize>)> = Vec::with_capacity(total);
    for (j, o) in outcomes.iter().enumerate() {
        for (i, &y) in o.iter().enumerate() {
            column.push((i, y, Some(j)));
        }
    }
    column.extend(bank_meta.iter().map(|&(a, y)| (a, y, None)));

    let mut p_mask = vec![false; anchors * total];
    let mut q_mask = vec![false; anchors * total];
    let mut r_mask = vec![false; anchors * total];
    let mut has_p = vec![false; anchors];
    let mut has_q = vec![false; anchors];
    let mut has_r = vec![false; anchors];
    for a in 0..anchors {
        let (ai, ay, aj) = column[a];
        for (b, &(bi, by, bj)) in column.iter().enumerate() {
            if b == a {
                continue;
            }
            let at = a * total + b;
            p_mask[at] = match cfg.denominator {
                DenominatorSet::AllExceptAnchor => true,
                DenominatorSet::OtherArticleOtherCase => bi != ai && (bj.is_none() || bj != aj),
            };
            if bi == ai {
                q_mask[at] = true;
                r_mask[at] = by == ay;
            }
            has_p[a] |= p_mask[at];
            has_q[a] |= q_mask[at];
            has_r[a] |= r_mask[at];
        }
    }

    let live_rows = tape.concat(live, 0)?;
    let bank_rows_var = bank.map(|b| tape.detach(b));
    let (anchor_rows, bank_rows_var) = match cfg.similarity {
        Similarity::Cosine => (
            tape.l2_normalize(live_rows, 1)?,
            bank_rows_var.map(|b| tape.l2_normalize(b, 1)).transpose()?,
        ),
        Similarity::Dot => (live_rows, bank_rows_var),
    };
    let anchor_t = tape.transpose(anchor_rows)?;
    let live_sims = tape.matmul(anchor_rows, anchor_t)?;
    let sims = match bank_rows_var {
        Some(b) => {
            let bank_t = tape.transpose(b)?;
            let bank_sims = tape.matmul(anchor_rows, bank_t)?;
            tape.concat(&[live_sims, bank_sims], 1)?
        }
        None => live_sims,
    };

    let indicator = |flags: &[bool]| Tensor::matrix(anchors, 1, flags.iter().map(|&f| f64::from(f)).collect());
    let q_ok: Vec<bool> = (0..anchors)
        .map(|a| has_q[a] && (has_p[a] || !cfg.article_term))
        .collect();
    let r_ok: Vec<bool> = (0..anchors).map(|a| q_ok[a] && has_r[a]).collect();
    let q_ind = indicator(&q_ok)?;
    let r_ind = indicator(&r_ok)?;

    let s_a = tape.scale(sims, 1.0 / cfg.tau_a);
    let s_c = tape.scale(sims, 1.0 / cfg.tau_c);
    let per_anchor = match cfg.formulation {
        Formulation::NegativeLogSum => {
            let lse_qc = tape.masked_logsumexp(s_c, &q_mask)?;
            let lse_rc = tape.masked_logsumexp(s_c, &r_mask)?;
            let outcome = tape.sub(lse_qc, lse_rc)?;
            let outcome = tape.mul_const(outcome, &r_ind)?;
            let outcome = tape.scale(outcome, cfg.alpha);
            if cfg.article_term {
                let lse_p = tape.masked_logsumexp(s_a, &p_mask)?;
                let lse_qa = tape.masked_logsumexp(s_a, &q_mask)?;
                let article = tape.sub(lse_p, lse_qa)?;
                let article = tape.mul_const(article, &q_ind)?;
                tape.add(article, outcome)?
            } else {
                outcome
            }
        }
        Formulation::PaperLiteralProduct => {
            let lse_p = tape.masked_logsumexp(s_a, &p_mask)?;
            let lse_qa = tape.masked_logsumexp(s_a, &q_mask)?;
            let log_ratio = tape.sub(lse_qa, lse_p)?;
            let lse_qc = tape.masked_logsumexp(s_c, &q_mask)?;
            let lse_rc = tape.masked_logsumexp(s_c, &r_mask)?;
            let outcome_log = tape.sub(lse_rc, lse_qc)?;
            let ratio = tape.exp(outcome_log);
            let ratio = tape.mul_const(ratio, &r_ind)?;
            let ratio = tape.scale(ratio, cfg.alpha);
            let no_r = Tensor::matrix(anchors, 1, r_ok.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect())?;
            let no_r = tape.constant(no_r);
            let factor = tape.add(ratio, no_r)?;
            let per = tape.mul(log_ratio, factor)?;
            tape.mul_const(per, &q_ind)?
        }
    };
    if let Some(bad) = tape.value(per_anchor).values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite contrastive loss for anchor case {} article {}",
            bad / k,
            bad % k
        )));
    }
    let sum = tape.sum(per_anchor);
    Ok(tape.scale(sum, 1.0 / anchors as f64))
}

/// Detached records of a batch, ready for [`MemoryBank::update`].
pub fn records_from_rows(task: Task, rows: &[Tensor], outcomes: &[Vec<u8>]) -> Vec<RepRecord> {
    let mut out = Vec::new();
    for (j, (block, ys)) in rows.iter().zip(outcomes).enumerate() {
        for (i, &y) in ys.iter().enumerate() {
            out.push(RepRecord {
                representation: block.row(i).to_vec(),
                article: i,
                outcome: y,
                task,
                case: Some(j),
            });
        }
    }
    out
}
