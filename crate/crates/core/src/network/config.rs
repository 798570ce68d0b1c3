use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the Task A branch receives from Task B next to each article view `c_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyMode {
    /// `[c_i, c'_bi, o'_bi]`
    Full,
    /// `[c_i, 0, o'_bi]`
    LabelsOnly,
    /// `[c_i, c'_bi, 0]`
    FeaturesOnly,
    /// `[c_i, 0, 0]`
    None,
    /// `[c_i, 0, g_i]` with `g` the gold allegation bits.
    GoldLabels,
    /// `[c_i, c'_bi, g_i]`
    GoldLabelsPlusFeatures,
}

impl DependencyMode {
    pub fn needs_gold(self) -> bool {
        matches!(self, Self::GoldLabels | Self::GoldLabelsPlusFeatures)
    }

    pub fn passes_features(self) -> bool {
        matches!(self, Self::Full | Self::FeaturesOnly | Self::GoldLabelsPlusFeatures)
    }

    pub fn passes_logits(self) -> bool {
        matches!(self, Self::Full | Self::LabelsOnly)
    }
}

/// Form of the Task B label signal handed to Task A.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSignal {
    Logit,
    Probability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub k: usize,
    pub d_e: usize,
    pub d_att_tok: usize,
    /// GRU hidden size per direction; sentence states are `2 * d_gru` wide.
    pub d_gru: usize,
    pub d_att_sent: usize,
    pub heads: usize,
    pub d_cls: usize,
    pub dropout: f64,
    pub dependency_mode: DependencyMode,
    pub label_signal: LabelSignal,
    /// One sentence-attention pooling per article. When off, a single pooled
    /// case vector is shared by every article row.
    pub article_attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            k: 10,
            d_e: 64,
            d_att_tok: 300,
            d_gru: 200,
            d_att_sent: 200,
            heads: 4,
            d_cls: 100,
            dropout: 0.1,
            dependency_mode: DependencyMode::Full,
            label_signal: LabelSignal::Logit,
            article_attention: true,
        }
    }
}

impl NetworkConfig {
    /// Width of the article views `c_i` and of the Task B interaction rows.
    pub fn width_b(&self) -> usize {
        2 * self.d_gru
    }

    /// Width of the Task A rows `[c_i, c'_bi, o'_bi]`.
    pub fn width_a(&self) -> usize {
        2 * self.width_b() + 1
    }

    /// Inner projection width of both self-attention blocks.
    pub fn attention_inner(&self) -> usize {
        self.width_b()
    }

    pub fn head_dim(&self) -> usize {
        self.attention_inner() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("k", self.k),
            ("d_e", self.d_e),
            ("d_att_tok", self.d_att_tok),
            ("d_gru", self.d_gru),
            ("d_att_sent", self.d_att_sent),
            ("heads", self.heads),
            ("d_cls", self.d_cls),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("network: {name} must be positive")));
        }
        if self.width_b() % self.heads != 0 {
            return Err(Error::Config(format!(
                "network: 2 * d_gru = {} is not divisible by heads = {}",
                self.width_b(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("network: dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
