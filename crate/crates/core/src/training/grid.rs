use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainOutcome};
use crate::contrastive::temperature_pairs;
use crate::corpus::Splits;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

/// Values to search. Temperature pairs are only varied when a contrastive term is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub temperature_pairs: Vec<(f64, f64)>,
}

impl GridSpec {
    /// Learning rates and the `tau_a < tau_c` pairs of the temperature grid from `cfg`.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            learning_rates: cfg.learning_rates.clone(),
            temperature_pairs: temperature_pairs(&cfg.contrastive.temperature_grid),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub tau_a: f64,
    pub tau_c: f64,
    pub dev_score: f64,
    pub best_epoch: usize,
}

pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index of the selected cell; ties keep the earliest.
    pub best: usize,
    pub outcome: TrainOutcome,
    pub config: TrainConfig,
}

pub fn grid_search(splits: &Splits, net: &NetworkConfig, base: &TrainConfig, spec: &GridSpec) -> Result<GridResult> {
    if spec.learning_rates.is_empty() || spec.temperature_pairs.is_empty() {
        return Err(Error::Config("grid search needs at least one learning rate and temperature pair".into()));
    }
    let pairs = if base.loss_mask.any_contrastive() {
        spec.temperature_pairs.clone()
    } else {
        vec![(base.contrastive.tau_a, base.contrastive.tau_c)]
    };
    let mut cells = Vec::new();
    let mut best: Option<(usize, TrainOutcome, TrainConfig)> = None;
    for &lr in &spec.learning_rates {
        for &(tau_a, tau_c) in &pairs {
            let mut cfg = base.clone();
            cfg.learning_rate = lr;
            cfg.contrastive.tau_a = tau_a;
            cfg.contrastive.tau_c = tau_c;
            let outcome = train(splits, net, &cfg)?;
            let score = outcome.history.best().selection;
            log::info!("grid lr={lr} tau_a={tau_a} tau_c={tau_c}: dev {score:.4}");
            cells.push(GridCell {
                learning_rate: lr,
                tau_a,
                tau_c,
                dev_score: score,
                best_epoch: outcome.history.best_epoch,
            });
            if best.as_ref().is_none_or(|(i, _, _)| score > cells[*i].dev_score) {
                best = Some((cells.len() - 1, outcome, cfg));
            }
        }
    }
    let (best, outcome, config) = best.expect("nonempty grid");
    Ok(GridResult {
        cells,
        best,
        outcome,
        config,
    })
}
