use chrono::{Days, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CaseDocument, LabelSet};
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Generator settings for a planted-dependency corpus.
///
/// Every article `i` owns an allegation signature `a_i` and a violation
/// signature `v_i`. A case alleging `i` carries `a_i` on a few tokens of one
/// sentence; if it also violates `i`, the same tokens additionally carry
/// `violation_strength * v_i`. Everything else is isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_cases: usize,
    pub k: usize,
    pub d_e: usize,
    /// Inclusive range of sentences per case.
    pub sentences: (usize, usize),
    /// Inclusive range of tokens per sentence.
    pub tokens: (usize, usize),
    /// Per-article allegation probability; `None` spreads 0.15..=0.45 over articles.
    pub allegation_prevalence: Option<Vec<f64>>,
    /// Per-article P(violated | alleged); `None` spreads 0.3..=0.9 over articles.
    pub violation_given_allegation: Option<Vec<f64>>,
    /// Standard deviation of the per-coordinate token noise.
    pub noise_std: f64,
    /// Tokens carrying an article's signature in a case alleging it.
    pub signal_tokens: usize,
    pub violation_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_cases: 500,
            k: 10,
            d_e: 64,
            sentences: (4, 8),
            tokens: (4, 10),
            allegation_prevalence: None,
            violation_given_allegation: None,
            noise_std: 0.5,
            signal_tokens: 2,
            violation_strength: 1.0,
            seed: 0,
        }
    }
}

fn spread(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

impl SyntheticConfig {
    pub fn prevalences(&self) -> Vec<f64> {
        self.allegation_prevalence
            .clone()
            .unwrap_or_else(|| spread(self.k, 0.15, 0.45))
    }

    pub fn violation_rates(&self) -> Vec<f64> {
        self.violation_given_allegation
            .clone()
            .unwrap_or_else(|| spread(self.k, 0.3, 0.9))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.d_e == 0 {
            return bad("d_e must be positive".into());
        }
        let (s0, s1) = self.sentences;
        let (t0, t1) = self.tokens;
        if s0 == 0 || s0 > s1 || t0 == 0 || t0 > t1 {
            return bad(format!("invalid ranges sentences={:?} tokens={:?}", self.sentences, self.tokens));
        }
        if self.signal_tokens == 0 {
            return bad("signal_tokens must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        for (name, probs) in [("allegation_prevalence", self.prevalences()), ("violation_given_allegation", self.violation_rates())] {
            if probs.len() != self.k {
                return bad(format!("{name} has {} entries, expected k = {}", probs.len(), self.k));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("{name} entries must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `count` random unit vectors, mutually orthogonal when `count <= d`.
pub(crate) fn signatures(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = unit_gaussian(rng, d);
        if out.len() < d {
            for _ in 0..2 {
                for u in &out {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2001, 1, 1).expect("valid date")
}

/// Deterministic corpus from `config`; dates increase strictly with case index.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<CaseDocument>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (k, d) = (config.k, config.d_e);
    let sigs = signatures(&mut rng, 2 * k, d);
    let (allegation_sig, violation_sig) = sigs.split_at(k);
    let prevalence = config.prevalences();
    let violation_rate = config.violation_rates();

    let mut cases = Vec::with_capacity(config.num_cases);
    for idx in 0..config.num_cases {
        let m = rng.random_range(config.sentences.0..=config.sentences.1);
        let mut sentences: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut lengths = Vec::with_capacity(m);
        for _ in 0..m {
            let n = rng.random_range(config.tokens.0..=config.tokens.1);
            let values = (0..n * d)
                .map(|_| config.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            sentences.push(values);
            lengths.push(n);
        }

        let mut alleged = vec![0u8; k];
        let mut violated = vec![0u8; k];
        for i in 0..k {
            if rng.random::<f64>() < prevalence[i] {
                alleged[i] = 1;
                if rng.random::<f64>() < violation_rate[i] {
                    violated[i] = 1;
                }
            }
        }

        for i in 0..k {
            if alleged[i] == 0 {
                continue;
            }
            let s = rng.random_range(0..m);
            let n = lengths[s];
            let picks = sample(&mut rng, n, config.signal_tokens.min(n));
            for t in picks.iter() {
                let tok = &mut sentences[s][t * d..(t + 1) * d];
                for (x, a) in tok.iter_mut().zip(&allegation_sig[i]) {
                    *x += a;
                }
                if violated[i] == 1 {
                    for (x, v) in tok.iter_mut().zip(&violation_sig[i]) {
                        *x += config.violation_strength * v;
                    }
                }
            }
        }

        let sentences = sentences
            .into_iter()
            .zip(&lengths)
            .map(|(values, &n)| Tensor::matrix(n, d, values))
            .collect::<Result<Vec<_>>>()?;
        let date = base_date() + Days::new(idx as u64);
        cases.push(CaseDocument::new(
            format!("case-{idx:06}"),
            date,
            sentences,
            LabelSet { alleged, violated },
        )?);
    }
    Ok(cases)
}
