//! Browser demo: contrastive loss against temperature, the three F1 scores on
//! hand-edited label matrices, and a toy training run on a synthetic corpus.

use coc_core::contrastive::{anchor_loss, build_sets, ContrastiveConfig, RepRecord, TEMPERATURE_GRID};
use coc_core::corpus::{chronological_split, generate_synthetic, SyntheticConfig};
use coc_core::metrics::{self, MetricsReport};
use coc_core::network::NetworkConfig;
use coc_core::training::{self, TrainConfig};
use coc_core::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SWEEP_CASES: usize = 6;
const SWEEP_ARTICLES: usize = 4;
const SWEEP_WIDTH: usize = 8;

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub tau_a: f64,
    pub loss: f64,
}

/// Pool of `SWEEP_CASES x SWEEP_ARTICLES` representations: article `i` sits near
/// axis `i` scaled by `separation`, and positive outcomes are shifted along the
/// last axis by `outcome_shift`.
fn sweep_pool(separation: f64, outcome_shift: f64, noise: f64, seed: u64) -> Result<Vec<RepRecord>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| e.to_string())?;
    let mut pool = Vec::new();
    for case in 0..SWEEP_CASES {
        for article in 0..SWEEP_ARTICLES {
            let outcome = u8::from((case + article) % 2 == 0);
            let mut v: Vec<f64> = (0..SWEEP_WIDTH).map(|_| normal.sample(&mut rng)).collect();
            v[article] += separation;
            v[SWEEP_WIDTH - 1] += outcome_shift * f64::from(outcome);
            pool.push(RepRecord {
                representation: v,
                article,
                outcome,
                task: Task::A,
                case: Some(case),
            });
        }
    }
    Ok(pool)
}

/// Mean loss over every anchor in the pool for each article temperature of the grid.
pub fn sweep(
    separation: f64,
    outcome_shift: f64,
    noise: f64,
    tau_c: f64,
    alpha: f64,
    seed: u64,
) -> Result<Vec<SweepPoint>, String> {
    if !(tau_c > 0.0) {
        return Err(format!("tau_c must be positive, got {tau_c}"));
    }
    let pool = sweep_pool(separation, outcome_shift, noise, seed)?;
    TEMPERATURE_GRID
        .iter()
        .map(|&tau_a| {
            let cfg = ContrastiveConfig {
                tau_a,
                tau_c,
                alpha,
                ..ContrastiveConfig::default()
            };
            let mut total = 0.0;
            for (i, anchor) in pool.iter().enumerate() {
                let others: Vec<RepRecord> = pool
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, r)| r.clone())
                    .collect();
                let sets = build_sets(anchor, &others, cfg.denominator);
                total += anchor_loss(&anchor.representation, &sets, &others, &cfg).map_err(|e| e.to_string())?;
            }
            Ok(SweepPoint {
                tau_a,
                loss: total / pool.len() as f64,
            })
        })
        .collect()
}

/// Parses rows of `0`/`1` characters; blank lines and whitespace are ignored.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<u8>>, String> {
    text.lines()
        .map(|l| l.split_whitespace().collect::<String>())
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| {
            l.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(format!("row {}: unexpected character {other:?}", n + 1)),
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Scores {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub hard_macro_f1: f64,
    pub per_article_f1: Vec<f64>,
    /// Articles left out of the hard macro average because nobody alleged them.
    pub excluded: Vec<usize>,
}

/// Task A scores of predicted violations against gold violations and allegations.
pub fn score(preds_a: &str, golds_a: &str, golds_b: &str) -> Result<Scores, String> {
    let p = parse_matrix(preds_a)?;
    let ga = parse_matrix(golds_a)?;
    let gb = parse_matrix(golds_b)?;
    let report = MetricsReport::task_a(&p, &ga, &gb).map_err(|e| e.to_string())?;
    let k = ga.first().map_or(0, Vec::len);
    let excluded = (0..k).filter(|&i| gb.iter().all(|row| row[i] == 0)).collect();
    Ok(Scores {
        micro_f1: report.micro_f1,
        macro_f1: report.macro_f1,
        hard_macro_f1: metrics::hard_macro_f1(&p, &ga, &gb).map_err(|e| e.to_string())?,
        per_article_f1: report.per_article_f1,
        excluded,
    })
}

#[derive(Debug, Serialize)]
pub struct ToyEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub dev_b_macro_f1: f64,
    pub dev_a_macro_f1: f64,
}

/// Trains a small model on a small synthetic corpus and returns the per-epoch history.
pub fn toy_training(epochs: usize, beta: f64, seed: u64) -> Result<Vec<ToyEpoch>, String> {
    let synthetic = SyntheticConfig {
        num_cases: 160,
        k: 3,
        d_e: 8,
        sentences: (2, 4),
        tokens: (3, 5),
        noise_std: 0.3,
        seed,
        ..SyntheticConfig::default()
    };
    let net = NetworkConfig {
        k: 3,
        d_e: 8,
        d_att_tok: 8,
        d_gru: 4,
        d_att_sent: 8,
        heads: 2,
        d_cls: 8,
        dropout: 0.0,
        ..NetworkConfig::default()
    };
    let train = TrainConfig {
        batch_size: 16,
        max_epochs: epochs.clamp(1, 50),
        patience: usize::MAX,
        learning_rate: 1e-2,
        beta,
        seed,
        ..TrainConfig::default()
    };
    let run = || -> coc_core::Result<_> {
        let splits = chronological_split(generate_synthetic(&synthetic)?, 0.7, 0.15)?;
        training::train(&splits, &net, &train)
    };
    let outcome = run().map_err(|e| e.to_string())?;
    Ok(outcome
        .history
        .epochs
        .iter()
        .map(|e| ToyEpoch {
            epoch: e.epoch,
            loss: e.loss,
            dev_b_macro_f1: e.dev_b_macro_f1,
            dev_a_macro_f1: e.dev_a_macro_f1,
        })
        .collect())
}

fn to_js<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = contrastiveSweep)]
pub fn contrastive_sweep(
    separation: f64,
    outcome_shift: f64,
    noise: f64,
    tau_c: f64,
    alpha: f64,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(sweep(separation, outcome_shift, noise, tau_c, alpha, u64::from(seed)))
}

#[wasm_bindgen(js_name = scoreMatrices)]
pub fn score_matrices(preds_a: &str, golds_a: &str, golds_b: &str) -> Result<String, JsValue> {
    to_js(score(preds_a, golds_a, golds_b))
}

#[wasm_bindgen(js_name = trainToy)]
pub fn train_toy(epochs: u32, beta: f64, seed: u32) -> Result<String, JsValue> {
    to_js(toy_training(epochs as usize, beta, u64::from(seed)))
}
