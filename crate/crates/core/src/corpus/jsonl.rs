use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CaseDocument, LabelSet};
use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    case_id: String,
    date: NaiveDate,
    sentences: Vec<Vec<Vec<f64>>>,
    alleged: Vec<u8>,
    violated: Vec<u8>,
}

impl CaseRecord {
    fn from_case(c: &CaseDocument) -> Self {
        Self {
            case_id: c.case_id.clone(),
            date: c.date,
            sentences: c
                .sentences
                .iter()
                .map(|s| (0..s.rows()).map(|r| s.row(r).to_vec()).collect())
                .collect(),
            alleged: c.labels.alleged.clone(),
            violated: c.labels.violated.clone(),
        }
    }

    fn into_case(self) -> Result<CaseDocument> {
        let sentences = self
            .sentences
            .iter()
            .map(|rows| Tensor::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        CaseDocument::new(
            self.case_id,
            self.date,
            sentences,
            LabelSet {
                alleged: self.alleged,
                violated: self.violated,
            },
        )
    }
}

/// Parsed cases in file order, plus the label warnings raised while loading.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub cases: Vec<CaseDocument>,
    pub warnings: Vec<String>,
}

pub fn load_jsonl(path: &Path) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    let mut k: Option<usize> = None;
    let mut width: Option<usize> = None;

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: CaseRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let case = record.into_case().map_err(|e| parse_err(e.to_string()))?;

        match k {
            None => k = Some(case.k()),
            Some(k) if k != case.k() => {
                return Err(Error::Schema(format!(
                    "{}:{line_no}: case {} has {} articles, earlier lines have {k}",
                    path.display(),
                    case.case_id,
                    case.k()
                )))
            }
            _ => {}
        }
        match width {
            None => width = Some(case.embedding_width()),
            Some(w) if w != case.embedding_width() => {
                return Err(Error::Schema(format!(
                    "{}:{line_no}: case {} has embedding width {}, earlier lines have {w}",
                    path.display(),
                    case.case_id,
                    case.embedding_width()
                )))
            }
            _ => {}
        }
        if !ids.insert(case.case_id.clone()) {
            return Err(parse_err(format!("duplicate case_id {}", case.case_id)));
        }
        let bad = case.labels.unalleged_violations();
        if !bad.is_empty() {
            let msg = format!(
                "{}:{line_no}: case {} has violations without allegation at articles {bad:?}",
                path.display(),
                case.case_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        cases.push(case);
    }
    Ok(LoadedCorpus { cases, warnings })
}

pub fn write_jsonl(cases: &[CaseDocument], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for case in cases {
        let line = serde_json::to_string(&CaseRecord::from_case(case))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
