//! Multi-label F1 scores and Table-1-shaped report rows.
//!
//! An article with no true positives, false positives or false negatives scores
//! F1 = 0. Hard-macro-F1 restricts each article to the cases alleging it and
//! leaves articles nobody alleged out of the mean.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Task;

/// Confusion counts for one article.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    fn add(&mut self, pred: u8, gold: u8) {
        match (pred != 0, gold != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Per-article confusion counts, optionally with the cases each article counted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_article: Vec<Confusion>,
    /// `included[i][c]` is true when case `c` entered article `i`'s counts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub included: Option<Vec<Vec<bool>>>,
}

impl ConfusionCounts {
    pub fn pooled(&self) -> Confusion {
        self.per_article.iter().fold(Confusion::default(), |mut acc, c| {
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
            acc.tn += c.tn;
            acc
        })
    }
}

fn check_shapes(op: &'static str, mats: &[&[Vec<u8>]]) -> Result<(usize, usize)> {
    let n = mats[0].len();
    let k = mats[0].first().map_or(0, Vec::len);
    for m in mats {
        if m.len() != n || m.iter().any(|row| row.len() != k) {
            return Err(Error::dim(op, format!("label matrices disagree, expected {n} x {k}")));
        }
    }
    Ok((n, k))
}

/// Counts over every case for each article.
pub fn confusion(preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<ConfusionCounts> {
    let (_, k) = check_shapes("confusion", &[preds, golds])?;
    let mut per_article = vec![Confusion::default(); k];
    for (p, g) in preds.iter().zip(golds) {
        for i in 0..k {
            per_article[i].add(p[i], g[i]);
        }
    }
    Ok(ConfusionCounts {
        per_article,
        included: None,
    })
}

/// Counts for each article over the cases whose allegation label is set.
pub fn hard_confusion(preds_a: &[Vec<u8>], golds_a: &[Vec<u8>], golds_b: &[Vec<u8>]) -> Result<ConfusionCounts> {
    let (n, k) = check_shapes("hard_confusion", &[preds_a, golds_a, golds_b])?;
    let mut per_article = vec![Confusion::default(); k];
    let mut included = vec![vec![false; n]; k];
    for c in 0..n {
        for i in 0..k {
            if golds_b[c][i] != 0 {
                per_article[i].add(preds_a[c][i], golds_a[c][i]);
                included[i][c] = true;
            }
        }
    }
    Ok(ConfusionCounts {
        per_article,
        included: Some(included),
    })
}

pub fn micro_f1(preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<f64> {
    Ok(confusion(preds, golds)?.pooled().f1())
}

pub fn macro_f1(preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<f64> {
    let counts = confusion(preds, golds)?;
    Ok(mean(counts.per_article.iter().map(Confusion::f1)))
}

pub fn hard_macro_f1(preds_a: &[Vec<u8>], golds_a: &[Vec<u8>], golds_b: &[Vec<u8>]) -> Result<f64> {
    let counts = hard_confusion(preds_a, golds_a, golds_b)?;
    Ok(mean(counts.per_article.iter().filter(|c| c.total() > 0).map(Confusion::f1)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Task A only.
    pub hard_macro_f1: Option<f64>,
    pub per_article_f1: Vec<f64>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn task_b(preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<Self> {
        let counts = confusion(preds, golds)?;
        Ok(Self::from_counts(Task::B, counts, None))
    }

    pub fn task_a(preds_a: &[Vec<u8>], golds_a: &[Vec<u8>], golds_b: &[Vec<u8>]) -> Result<Self> {
        let counts = confusion(preds_a, golds_a)?;
        let hard = hard_macro_f1(preds_a, golds_a, golds_b)?;
        Ok(Self::from_counts(Task::A, counts, Some(hard)))
    }

    fn from_counts(task: Task, counts: ConfusionCounts, hard: Option<f64>) -> Self {
        let per_article_f1: Vec<f64> = counts.per_article.iter().map(Confusion::f1).collect();
        Self {
            task,
            micro_f1: counts.pooled().f1(),
            macro_f1: mean(per_article_f1.iter().copied()),
            hard_macro_f1: hard,
            per_article_f1,
            counts,
        }
    }
}

/// Reports for both tasks of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPair {
    pub task_a: MetricsReport,
    pub task_b: MetricsReport,
}

pub fn report(preds_a: &[Vec<u8>], preds_b: &[Vec<u8>], golds_a: &[Vec<u8>], golds_b: &[Vec<u8>]) -> Result<ReportPair> {
    check_shapes("report", &[preds_a, preds_b, golds_a, golds_b])?;
    Ok(ReportPair {
        task_a: MetricsReport::task_a(preds_a, golds_a, golds_b)?,
        task_b: MetricsReport::task_b(preds_b, golds_b)?,
    })
}

/// One table row: Task B μ-F1, m-F1; Task A μ-F1, m-F1, hm-F1. Scores are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub b_micro: Option<f64>,
    pub b_macro: Option<f64>,
    pub a_micro: Option<f64>,
    pub a_macro: Option<f64>,
    pub a_hard_macro: Option<f64>,
}

pub const TABLE_HEADER: [&str; 6] = ["model", "task_b_micro_f1", "task_b_macro_f1", "task_a_micro_f1", "task_a_macro_f1", "task_a_hard_macro_f1"];

impl TableRow {
    /// Row from whichever task reports are present.
    pub fn from_reports(name: &str, task_a: Option<&MetricsReport>, task_b: Option<&MetricsReport>) -> Self {
        let pct = |x: f64| 100.0 * x;
        Self {
            name: name.to_string(),
            b_micro: task_b.map(|r| pct(r.micro_f1)),
            b_macro: task_b.map(|r| pct(r.macro_f1)),
            a_micro: task_a.map(|r| pct(r.micro_f1)),
            a_macro: task_a.map(|r| pct(r.macro_f1)),
            a_hard_macro: task_a.and_then(|r| r.hard_macro_f1.map(pct)),
        }
    }

    fn cells(&self) -> [Option<f64>; 5] {
        [self.b_micro, self.b_macro, self.a_micro, self.a_macro, self.a_hard_macro]
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn write_table_csv(rows: &[TableRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    for r in rows {
        let mut rec = vec![r.name.clone()];
        rec.extend(r.cells().into_iter().map(cell));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Vec<TableRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TABLE_HEADER {
        return Err(Error::Schema(format!("{}: unexpected table header {header:?}", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::Schema(format!("{}: bad score {s:?}", path.display())))
        };
        rows.push(TableRow {
            name: rec.get(0).unwrap_or("").to_string(),
            b_micro: num(1)?,
            b_macro: num(2)?,
            a_micro: num(3)?,
            a_macro: num(4)?,
            a_hard_macro: num(5)?,
        });
    }
    Ok(rows)
}

/// Aligned plain-text rendering with "-" for absent cells.
pub fn table_text(rows: &[TableRow]) -> String {
    let titles = ["Model", "B μ-F1", "B m-F1", "A μ-F1", "A m-F1", "A hm-F1"];
    let name_w = rows
        .iter()
        .map(|r| r.name.chars().count())
        .chain([titles[0].len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", titles[0]);
    for t in &titles[1..] {
        let _ = write!(out, "  {t:>8}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<name_w$}", r.name);
        for c in r.cells() {
            let s = c.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
            let _ = write!(out, "  {s:>8}");
        }
        out.push('\n');
    }
    out
}

/// Published scores for the reference table, not reproduced here.
pub fn published_reference() -> Vec<TableRow> {
    let row = |name: &str, v: [Option<f64>; 5]| TableRow {
        name: name.to_string(),
        b_micro: v[0],
        b_macro: v[1],
        a_micro: v[2],
        a_macro: v[3],
        a_hard_macro: v[4],
    };
    vec![row("task_b_only", [Some(76.20), Some(67.15), None, None, None])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize, p: f64) -> Vec<Vec<u8>> {
        (0..n).map(|_| (0..k).map(|_| u8::from(rng.random_bool(p))).collect()).collect()
    }

    fn oracle_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        if tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(micro_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(macro_f1(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_is_zero() {
        let z = vec![vec![0, 0]; 3];
        assert_eq!(micro_f1(&z, &z).unwrap(), 0.0);
        assert_eq!(macro_f1(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn empty_article_scores_zero_in_macro() {
        let g = vec![vec![1, 0], vec![0, 0]];
        assert_eq!(macro_f1(&g, &g).unwrap(), 0.5);
    }

    #[test]
    fn worked_hard_macro_example() {
        let pred = vec![vec![1], vec![1], vec![1]];
        let viol = vec![vec![1], vec![0], vec![0]];
        let alleg = vec![vec![1], vec![1], vec![0]];
        assert!((hard_macro_f1(&pred, &viol, &alleg).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((macro_f1(&pred, &viol).unwrap() - 0.5).abs() < 1e-15);
        let counts = hard_confusion(&pred, &viol, &alleg).unwrap();
        assert_eq!(counts.included.unwrap()[0], vec![true, true, false]);
    }

    #[test]
    fn no_allegations_gives_zero_hard_macro() {
        let z = vec![vec![0, 0]; 4];
        let p = vec![vec![1, 1]; 4];
        assert_eq!(hard_macro_f1(&p, &z, &z).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = vec![vec![1, 0]];
        let b = vec![vec![1]];
        assert!(matches!(micro_f1(&a, &b), Err(Error::Dimension { .. })));
        assert!(hard_macro_f1(&a, &a, &b).is_err());
    }

    #[test]
    fn random_matrices_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let n = rng.random_range(1..40);
            let k = 10;
            let pred = random_matrix(&mut rng, n, k, 0.3);
            let alleg = random_matrix(&mut rng, n, k, 0.4);
            let viol: Vec<Vec<u8>> = alleg
                .iter()
                .map(|r| r.iter().map(|&a| a & u8::from(rng.random_bool(0.6))).collect())
                .collect();
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            let mut per = Vec::new();
            let mut hard = Vec::new();
            for i in 0..k {
                let (mut t, mut f, mut m) = (0, 0, 0);
                let (mut ht, mut hf, mut hm, mut seen) = (0, 0, 0, 0);
                for c in 0..n {
                    let (p, g) = (pred[c][i] == 1, viol[c][i] == 1);
                    t += usize::from(p && g);
                    f += usize::from(p && !g);
                    m += usize::from(!p && g);
                    if alleg[c][i] == 1 {
                        seen += 1;
                        ht += usize::from(p && g);
                        hf += usize::from(p && !g);
                        hm += usize::from(!p && g);
                    }
                }
                tp += t;
                fp += f;
                fn_ += m;
                per.push(oracle_f1(t, f, m));
                if seen > 0 {
                    hard.push(oracle_f1(ht, hf, hm));
                }
            }
            let macro_ = per.iter().sum::<f64>() / k as f64;
            let hard_ = if hard.is_empty() { 0.0 } else { hard.iter().sum::<f64>() / hard.len() as f64 };
            assert_eq!(micro_f1(&pred, &viol).unwrap(), oracle_f1(tp, fp, fn_));
            assert_eq!(macro_f1(&pred, &viol).unwrap(), macro_);
            assert_eq!(hard_macro_f1(&pred, &viol, &alleg).unwrap(), hard_);
        }
    }

    #[test]
    fn report_fields_match_individual_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pa = random_matrix(&mut rng, 30, 10, 0.3);
        let pb = random_matrix(&mut rng, 30, 10, 0.3);
        let gb = random_matrix(&mut rng, 30, 10, 0.4);
        let ga = random_matrix(&mut rng, 30, 10, 0.2);
        let r = report(&pa, &pb, &ga, &gb).unwrap();
        assert_eq!(r.task_b.micro_f1, micro_f1(&pb, &gb).unwrap());
        assert_eq!(r.task_b.macro_f1, macro_f1(&pb, &gb).unwrap());
        assert_eq!(r.task_a.macro_f1, macro_f1(&pa, &ga).unwrap());
        assert_eq!(r.task_a.hard_macro_f1, Some(hard_macro_f1(&pa, &ga, &gb).unwrap()));
        assert_eq!(r.task_b.hard_macro_f1, None);
        for c in &r.task_a.counts.per_article {
            assert_eq!(c.total(), 30);
        }
    }

    #[test]
    fn reference_row_renders_with_blanks() {
        let rows = published_reference();
        let csv = table_csv(&rows).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("task_b_only,76.20,67.15,,,"));
        assert!(table_text(&rows).contains("76.20"));
    }

    #[test]
    fn table_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            TableRow {
                name: "full".into(),
                b_micro: Some(80.0),
                b_macro: Some(70.5),
                a_micro: Some(60.25),
                a_macro: Some(50.0),
                a_hard_macro: Some(40.0),
            },
            published_reference().remove(0),
        ];
        write_table_csv(&rows, &path).unwrap();
        assert_eq!(read_table_csv(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..5000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            let p = random_matrix(&mut rng, n, k, 0.4);
            let ga = random_matrix(&mut rng, n, k, 0.4);
            let gb = random_matrix(&mut rng, n, k, 0.5);
            let case_perm: Vec<usize> = (0..n).rev().collect();
            let art_perm = [2usize, 0, 3, 1];
            let rows = |m: &Vec<Vec<u8>>| -> Vec<Vec<u8>> {
                case_perm.iter().map(|&c| art_perm.iter().map(|&i| m[c][i]).collect()).collect()
            };
            let (p2, ga2, gb2) = (rows(&p), rows(&ga), rows(&gb));
            prop_assert_eq!(micro_f1(&p, &ga).unwrap(), micro_f1(&p2, &ga2).unwrap());
            prop_assert!((macro_f1(&p, &ga).unwrap() - macro_f1(&p2, &ga2).unwrap()).abs() < 1e-15);
            prop_assert!((hard_macro_f1(&p, &ga, &gb).unwrap() - hard_macro_f1(&p2, &ga2, &gb2).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn scores_lie_in_unit_interval(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_matrix(&mut rng, 10, 10, 0.5);
            let g = random_matrix(&mut rng, 10, 10, 0.5);
            for v in [micro_f1(&p, &g).unwrap(), macro_f1(&p, &g).unwrap(), hard_macro_f1(&p, &g, &g).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
