use super::CaseDocument;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<CaseDocument>,
    pub dev: Vec<CaseDocument>,
    pub test: Vec<CaseDocument>,
}

/// Sorts by (date, case_id) and cuts into train/dev/test by rounded fractions.
/// Every split receives at least one case.
pub fn chronological_split(mut cases: Vec<CaseDocument>, train_frac: f64, dev_frac: f64) -> Result<Splits> {
    if !(train_frac > 0.0 && dev_frac > 0.0 && train_frac + dev_frac < 1.0) {
        return Err(Error::Contract(format!(
            "split fractions must be positive with train + dev < 1, got {train_frac} / {dev_frac}"
        )));
    }
    let n = cases.len();
    if n < 3 {
        return Err(Error::Contract(format!("need at least 3 cases to split, got {n}")));
    }
    cases.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.case_id.cmp(&b.case_id)));

    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 2);
    let n_dev = ((n as f64 * dev_frac).round() as usize).clamp(1, n - n_train - 1);
    let test = cases.split_off(n_train + n_dev);
    let dev = cases.split_off(n_train);
    Ok(Splits {
        train: cases,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::corpus::LabelSet;
    use crate::diff::Tensor;

    fn case(id: &str, day: u32) -> CaseDocument {
        CaseDocument::new(
            id,
            NaiveDate::from_ymd_opt(2005, 1, day).unwrap(),
            vec![Tensor::zeros(&[1, 2])],
            LabelSet {
                alleged: vec![0, 1],
                violated: vec![0, 0],
            },
        )
        .unwrap()
    }

    #[test]
    fn distinct_dates_split_in_order() {
        let cases: Vec<_> = (1..=10).rev().map(|d| case(&format!("c{d:02}"), d)).collect();
        let s = chronological_split(cases, 0.8, 0.1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        let max_train = s.train.iter().map(|c| c.date).max().unwrap();
        assert!(max_train <= s.dev[0].date && s.dev[0].date <= s.test[0].date);
    }

    #[test]
    fn same_date_breaks_ties_by_id() {
        let cases: Vec<_> = ["j", "b", "e", "a", "c", "i", "d", "h", "g", "f"]
            .iter()
            .map(|id| case(id, 7))
            .collect();
        let s = chronological_split(cases, 0.8, 0.1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s.dev[0].case_id, "i");
        assert_eq!(s.test[0].case_id, "j");
    }

    #[test]
    fn full_scale_split_sizes() {
        // 11k cases at 0.818 / 0.091 gives roughly 9k / 1k / 1k.
        let n = 11_000usize;
        let n_train = (n as f64 * 0.818).round() as usize;
        let n_dev = (n as f64 * 0.091).round() as usize;
        assert_eq!((n_train, n_dev, n - n_train - n_dev), (8998, 1001, 1001));
    }

    #[test]
    fn too_few_cases_or_bad_fractions() {
        assert!(chronological_split(vec![case("a", 1), case("b", 2)], 0.5, 0.2).is_err());
        let three = vec![case("a", 1), case("b", 2), case("c", 3)];
        assert!(chronological_split(three.clone(), 0.9, 0.1).is_err());
        let s = chronological_split(three, 0.34, 0.33).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (1, 1, 1));
    }
}
