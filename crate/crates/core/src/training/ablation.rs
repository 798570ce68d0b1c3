use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, LossMask, TrainConfig, TrainHistory};
use crate::corpus::Splits;
use crate::error::{Error, Result};
use crate::metrics::{ReportPair, TableRow};
use crate::network::{DependencyMode, NetworkConfig};

/// The model rows of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCondition {
    TaskBOnly,
    TaskAOnly,
    MultiTask,
    Full,
    WoFeatAndLabel,
    WoFeature,
    WoLabel,
    GoldLabelsOnly,
    GoldLabelsPlusFeatures,
    WoOutcomeContrastive,
    WoArticleContrastive,
    TaskAContrastive,
    TaskBContrastive,
}

/// Configuration tuple a condition induces on top of the shared configs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationSettings {
    pub dependency_mode: DependencyMode,
    pub loss_mask: LossMask,
    pub article_attention: bool,
    /// Outcome-level weight override.
    pub alpha: Option<f64>,
    pub article_term: bool,
}

const BCE_A: LossMask = LossMask {
    bce_a: true,
    ..LossMask::NONE
};
const BCE_B: LossMask = LossMask {
    bce_b: true,
    ..LossMask::NONE
};
const BCE_BOTH: LossMask = LossMask {
    bce_a: true,
    bce_b: true,
    ..LossMask::NONE
};

impl AblationCondition {
    pub const ALL: [Self; 13] = [
        Self::TaskBOnly,
        Self::TaskAOnly,
        Self::MultiTask,
        Self::Full,
        Self::WoFeatAndLabel,
        Self::WoFeature,
        Self::WoLabel,
        Self::GoldLabelsOnly,
        Self::GoldLabelsPlusFeatures,
        Self::WoOutcomeContrastive,
        Self::WoArticleContrastive,
        Self::TaskAContrastive,
        Self::TaskBContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TaskBOnly => "task_b_only",
            Self::TaskAOnly => "task_a_only",
            Self::MultiTask => "multi_task",
            Self::Full => "full",
            Self::WoFeatAndLabel => "wo_feat_and_label",
            Self::WoFeature => "wo_feature",
            Self::WoLabel => "wo_label",
            Self::GoldLabelsOnly => "gold_labels_only",
            Self::GoldLabelsPlusFeatures => "gold_labels_plus_features",
            Self::WoOutcomeContrastive => "wo_outcome_contrastive",
            Self::WoArticleContrastive => "wo_article_contrastive",
            Self::TaskAContrastive => "task_a_contrastive",
            Self::TaskBContrastive => "task_b_contrastive",
        }
    }

    pub fn settings(self) -> AblationSettings {
        let full = AblationSettings {
            dependency_mode: DependencyMode::Full,
            loss_mask: LossMask::ALL,
            article_attention: true,
            alpha: None,
            article_term: true,
        };
        // Baselines drop contrastive loss, dependency and article-specific attention.
        let baseline = |loss_mask| AblationSettings {
            dependency_mode: DependencyMode::None,
            loss_mask,
            article_attention: false,
            ..full
        };
        match self {
            Self::TaskBOnly => baseline(BCE_B),
            Self::TaskAOnly => baseline(BCE_A),
            Self::MultiTask => baseline(BCE_BOTH),
            Self::Full => full,
            Self::WoFeatAndLabel => AblationSettings {
                dependency_mode: DependencyMode::None,
                ..full
            },
            Self::WoFeature => AblationSettings {
                dependency_mode: DependencyMode::LabelsOnly,
                ..full
            },
            Self::WoLabel => AblationSettings {
                dependency_mode: DependencyMode::FeaturesOnly,
                ..full
            },
            Self::GoldLabelsOnly => AblationSettings {
                dependency_mode: DependencyMode::GoldLabels,
                ..full
            },
            Self::GoldLabelsPlusFeatures => AblationSettings {
                dependency_mode: DependencyMode::GoldLabelsPlusFeatures,
                ..full
            },
            Self::WoOutcomeContrastive => AblationSettings {
                alpha: Some(0.0),
                ..full
            },
            Self::WoArticleContrastive => AblationSettings {
                article_term: false,
                ..full
            },
            Self::TaskAContrastive => AblationSettings {
                dependency_mode: DependencyMode::None,
                loss_mask: LossMask {
                    contrastive_a: true,
                    ..BCE_A
                },
                ..full
            },
            Self::TaskBContrastive => AblationSettings {
                dependency_mode: DependencyMode::None,
                loss_mask: LossMask {
                    contrastive_b: true,
                    ..BCE_B
                },
                ..full
            },
        }
    }

    /// Shared configs specialised to this condition.
    pub fn apply(self, net: &NetworkConfig, train: &TrainConfig) -> (NetworkConfig, TrainConfig) {
        let s = self.settings();
        let net = NetworkConfig {
            dependency_mode: s.dependency_mode,
            article_attention: s.article_attention,
            ..net.clone()
        };
        let mut train = TrainConfig {
            loss_mask: s.loss_mask,
            ..train.clone()
        };
        if let Some(alpha) = s.alpha {
            train.contrastive.alpha = alpha;
        }
        train.contrastive.article_term = s.article_term;
        (net, train)
    }

    /// Row for the results table, with columns of untrained tasks left blank.
    pub fn table_row(self, reports: &ReportPair) -> TableRow {
        let mask = self.settings().loss_mask;
        TableRow::from_reports(
            self.name(),
            mask.bce_a.then_some(&reports.task_a),
            mask.bce_b.then_some(&reports.task_b),
        )
    }
}

impl fmt::Display for AblationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation condition {s:?}")))
    }
}

pub struct AblationOutcome {
    pub condition: AblationCondition,
    pub test: ReportPair,
    pub row: TableRow,
    pub history: TrainHistory,
}

/// Trains `condition` on `splits` and scores the best checkpoint on the test split.
pub fn run_ablation(
    splits: &Splits,
    condition: AblationCondition,
    net: &NetworkConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationOutcome> {
    let (net, cfg) = condition.apply(net, train_cfg);
    let outcome = train(splits, &net, &cfg)?;
    let test = evaluate(&outcome.params, &splits.test)?;
    Ok(AblationOutcome {
        condition,
        row: condition.table_row(&test),
        test,
        history: outcome.history,
    })
}
