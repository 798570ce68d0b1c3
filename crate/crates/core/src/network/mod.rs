//! Forward architecture: token attention, BiGRU sentence encoder, per-article
//! attention, Task B interaction and heads, then the Task A branch fed with
//! Task B features and logits.

mod config;
pub mod layers;
mod params;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::corpus::CaseDocument;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::Task;

pub use config::{DependencyMode, LabelSignal, NetworkConfig};
pub use params::{AttentionIdx, BoundParams, GruIdx, HeadIdx, Layout, ModelParams, SelfAttentionIdx};

use layers::{GruVars, HeadVars, SelfAttentionVars};

/// Tape handles produced by one forward pass over a case.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `1 x k` allegation logits.
    pub o_b: Var,
    /// `1 x k` violation logits.
    pub o_a: Var,
    /// `k x 2*d_gru` interaction-aware Task B rows.
    pub views_b: Var,
    /// `k x (4*d_gru + 1)` interaction-aware Task A rows.
    pub views_a: Var,
    /// `k x 2*d_gru` article views before interaction.
    pub article_views: Var,
    pub token_weights: Vec<Var>,
    pub sentence_weights: Vec<Var>,
    pub interaction_weights: Vec<Var>,
}

/// Per-article rows after self-attention, tagged with their task.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionViews {
    pub task: Task,
    pub rows: Tensor,
}

/// Detached forward results for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub o_b: Vec<f64>,
    pub o_a: Vec<f64>,
    pub views_b: InteractionViews,
    pub views_a: InteractionViews,
}

impl ForwardOutput {
    /// Predicted iff the logit is strictly positive.
    pub fn predictions(&self) -> (Vec<u8>, Vec<u8>) {
        (threshold(&self.o_b), threshold(&self.o_a))
    }
}

pub fn threshold(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&x| u8::from(x > 0.0)).collect()
}

fn attention_vars(p: &BoundParams, idx: AttentionIdx) -> (Var, Var, Var) {
    (p.var(idx.w), p.var(idx.b), p.var(idx.u))
}

fn gru_vars(p: &BoundParams, idx: GruIdx) -> GruVars {
    GruVars {
        w_x: p.var(idx.w_x),
        w_h: p.var(idx.w_h),
        b: p.var(idx.b),
    }
}

fn self_attention_vars(p: &BoundParams, idx: SelfAttentionIdx) -> SelfAttentionVars {
    SelfAttentionVars {
        q: p.var(idx.q),
        k: p.var(idx.k),
        v: p.var(idx.v),
        o: p.var(idx.o),
    }
}

fn head_vars(p: &BoundParams, heads: &[HeadIdx]) -> Vec<HeadVars> {
    heads
        .iter()
        .map(|h| HeadVars {
            w1: p.var(h.w1),
            b1: p.var(h.b1),
            w2: p.var(h.w2),
            b2: p.var(h.b2),
        })
        .collect()
}

/// Records the full forward pass for `case` on `tape`.
///
/// `gold_alleged` must be given exactly when the dependency mode uses gold labels.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &BoundParams,
    case: &CaseDocument,
    train: bool,
    gold_alleged: Option<&[u8]>,
    rng: &mut R,
) -> Result<ForwardVars> {
    let cfg = params.config;
    let layout = &params.layout;
    let mode = cfg.dependency_mode;
    match (mode.needs_gold(), gold_alleged) {
        (true, None) => {
            return Err(Error::Contract(format!(
                "dependency mode {mode:?} needs gold allegation labels"
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Contract(format!(
                "gold allegation labels given but dependency mode {mode:?} does not use them"
            )))
        }
        (true, Some(g)) if g.len() != cfg.k => {
            return Err(Error::dim("forward", format!("gold labels of length {} for k = {}", g.len(), cfg.k)))
        }
        _ => {}
    }
    if case.embedding_width() != cfg.d_e {
        return Err(Error::dim(
            "forward",
            format!("case {} has embedding width {}, network expects {}", case.case_id, case.embedding_width(), cfg.d_e),
        ));
    }
    let k = cfg.k;
    let wb = cfg.width_b();

    let (tw, tb, tu) = attention_vars(params, layout.token);
    let mut sentence_vecs = Vec::with_capacity(case.sentences.len());
    let mut token_weights = Vec::with_capacity(case.sentences.len());
    for s in &case.sentences {
        let z = tape.constant(s.clone());
        let (f, alpha) = layers::token_attention(tape, z, tw, tb, tu)?;
        sentence_vecs.push(f);
        token_weights.push(alpha);
    }
    let f = tape.concat(&sentence_vecs, 0)?;
    let f = tape.dropout(f, cfg.dropout, train, rng)?;

    let h = layers::sentence_encoder(tape, f, gru_vars(params, layout.gru_fwd), gru_vars(params, layout.gru_bwd))?;
    let h = tape.dropout(h, cfg.dropout, train, rng)?;

    let mut views = Vec::with_capacity(k);
    let mut sentence_weights = Vec::with_capacity(layout.sentence.len());
    for idx in &layout.sentence {
        let (w, b, u) = attention_vars(params, *idx);
        let (c, alpha) = layers::article_attention(tape, h, w, b, u)?;
        views.push(c);
        sentence_weights.push(alpha);
    }
    if views.len() == 1 && k > 1 {
        views = vec![views[0]; k];
    }
    let c = tape.concat(&views, 0)?;

    let inter_b = layers::interaction(tape, c, self_attention_vars(params, layout.interaction_b), cfg.heads)?;
    let views_b = inter_b.rows;
    let cls_in_b = tape.dropout(views_b, cfg.dropout, train, rng)?;
    let o_b = layers::classify(tape, cls_in_b, &head_vars(params, &layout.heads_b))?;

    let feature_block = if mode.passes_features() {
        views_b
    } else {
        tape.constant(Tensor::zeros(&[k, wb]))
    };
    let label_column = if let Some(g) = gold_alleged {
        tape.constant(Tensor::matrix(k, 1, g.iter().map(|&b| f64::from(b)).collect())?)
    } else if mode.passes_logits() {
        let signal = match cfg.label_signal {
            LabelSignal::Logit => o_b,
            LabelSignal::Probability => tape.sigmoid(o_b),
        };
        tape.transpose(signal)?
    } else {
        tape.constant(Tensor::zeros(&[k, 1]))
    };
    let c_a = tape.concat(&[c, feature_block, label_column], 1)?;
    let inter_a = layers::interaction(tape, c_a, self_attention_vars(params, layout.interaction_a), cfg.heads)?;
    let views_a = inter_a.rows;
    let cls_in_a = tape.dropout(views_a, cfg.dropout, train, rng)?;
    let o_a = layers::classify(tape, cls_in_a, &head_vars(params, &layout.heads_a))?;

    let mut interaction_weights = inter_b.weights;
    interaction_weights.extend(inter_a.weights);
    Ok(ForwardVars {
        o_b,
        o_a,
        views_b,
        views_a,
        article_views: c,
        token_weights,
        sentence_weights,
        interaction_weights,
    })
}

impl ModelParams {
    /// Evaluation-mode forward pass (no dropout, no gradients).
    pub fn infer(&self, case: &CaseDocument, gold_alleged: Option<&[u8]>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        // Never drawn from in eval mode.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, &bound, case, false, gold_alleged, &mut rng)?;
        Ok(ForwardOutput {
            o_b: tape.value(out.o_b).values().to_vec(),
            o_a: tape.value(out.o_a).values().to_vec(),
            views_b: InteractionViews {
                task: Task::B,
                rows: tape.value(out.views_b).clone(),
            },
            views_a: InteractionViews {
                task: Task::A,
                rows: tape.value(out.views_a).clone(),
            },
        })
    }

    /// Gold allegation labels for `case` when the config's dependency mode needs them.
    pub fn gold_for<'c>(&self, case: &'c CaseDocument) -> Option<&'c [u8]> {
        self.config()
            .dependency_mode
            .needs_gold()
            .then_some(case.labels.alleged.as_slice())
    }
}
