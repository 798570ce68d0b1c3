//! Case documents, JSONL ingestion, chronological splits and the synthetic
//! planted-dependency generator.

mod jsonl;
mod split;
mod synthetic;

use chrono::NaiveDate;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub use jsonl::{load_jsonl, write_jsonl, LoadedCorpus};
pub use split::{chronological_split, Splits};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Allegation (Task B) and violation (Task A) targets over `k` articles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub alleged: Vec<u8>,
    pub violated: Vec<u8>,
}

impl LabelSet {
    pub fn k(&self) -> usize {
        self.alleged.len()
    }

    /// Indices where a violation is recorded without the matching allegation.
    pub fn unalleged_violations(&self) -> Vec<usize> {
        self.alleged
            .iter()
            .zip(&self.violated)
            .enumerate()
            .filter(|(_, (&a, &v))| v == 1 && a == 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One case: ordered sentences, each an `n_i x d_e` token-embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseDocument {
    pub case_id: String,
    pub date: NaiveDate,
    pub sentences: Vec<Tensor>,
    pub labels: LabelSet,
}

impl CaseDocument {
    pub fn new(case_id: impl Into<String>, date: NaiveDate, sentences: Vec<Tensor>, labels: LabelSet) -> Result<Self> {
        let case = Self {
            case_id: case_id.into(),
            date,
            sentences,
            labels,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn embedding_width(&self) -> usize {
        self.sentences.first().map_or(0, Tensor::cols)
    }

    pub fn k(&self) -> usize {
        self.labels.k()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.case_id;
        if self.sentences.is_empty() {
            return Err(Error::Schema(format!("case {id}: no sentences")));
        }
        let width = self.embedding_width();
        for (i, s) in self.sentences.iter().enumerate() {
            if s.shape().len() != 2 || s.rows() == 0 {
                return Err(Error::Schema(format!("case {id}: sentence {i} has no tokens")));
            }
            if s.cols() != width || width == 0 {
                return Err(Error::Schema(format!(
                    "case {id}: sentence {i} has width {}, expected {width}",
                    s.cols()
                )));
            }
        }
        let LabelSet { alleged, violated } = &self.labels;
        if alleged.len() != violated.len() || alleged.is_empty() {
            return Err(Error::Schema(format!(
                "case {id}: alleged has {} entries, violated {}",
                alleged.len(),
                violated.len()
            )));
        }
        if alleged.iter().chain(violated).any(|&b| b > 1) {
            return Err(Error::Schema(format!("case {id}: labels must be 0 or 1")));
        }
        Ok(())
    }
}

/// `N x k` label matrices of a case list.
pub fn label_matrices(cases: &[CaseDocument]) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    cases
        .iter()
        .map(|c| (c.labels.alleged.clone(), c.labels.violated.clone()))
        .unzip()
}
