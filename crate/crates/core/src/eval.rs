//! Strict entity-level micro P/R/F1 and percentile bootstrap intervals.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;
use crate::exec::Execution;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sentence {0} is missing from the predictions")]
    MissingPrediction(String),
    #[error("sentence {0} has predictions but no gold entry")]
    UnexpectedPrediction(String),
    #[error("sentence id {0} appears more than once")]
    DuplicateId(String),
    #[error("invalid bootstrap arguments: {0}")]
    Bootstrap(String),
    #[error("no runs to aggregate")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    /// Precision, recall and F1; each is 0 when its denominator is 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.predicted());
        let r = ratio(self.tp, self.support());
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

/// One-to-one exact matching on `(start, end, etype)` within a sentence.
pub fn score_sentence(gold: &[EntitySpan], pred: &[EntitySpan]) -> Counts {
    let mut open: HashMap<&EntitySpan, usize> = HashMap::new();
    for g in gold {
        *open.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = open.get_mut(p).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, other: &Interval) -> bool {
        self.lower <= other.lower && other.upper <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub precision: Interval,
    pub recall: Interval,
    pub f1: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ci: Option<ConfidenceIntervals>,
    pub n_boot: usize,
    pub seed: Option<u64>,
    pub support: usize,
    pub predicted: usize,
}

impl MetricReport {
    pub fn from_counts(c: Counts) -> Self {
        let (precision, recall, f1) = c.prf();
        Self {
            precision,
            recall,
            f1,
            ci: None,
            n_boot: 0,
            seed: None,
            support: c.support(),
            predicted: c.predicted(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub totals: Counts,
    /// Counts per sentence, in gold order.
    pub per_sentence: Vec<(String, Counts)>,
    pub report: MetricReport,
}

/// Scores predictions against gold. Both sides are keyed by sentence id and
/// must cover exactly the same ids.
pub fn score_corpus(
    gold: &[(String, Vec<EntitySpan>)],
    pred: &[(String, Vec<EntitySpan>)],
) -> Result<CorpusScore, EvalError> {
    let mut by_id: HashMap<&str, &[EntitySpan]> = HashMap::with_capacity(pred.len());
    for (id, spans) in pred {
        if by_id.insert(id, spans).is_some() {
            return Err(EvalError::DuplicateId(id.clone()));
        }
    }
    let mut seen = HashSet::with_capacity(gold.len());
    let mut per_sentence = Vec::with_capacity(gold.len());
    for (id, g) in gold {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicateId(id.clone()));
        }
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(id.clone()))?;
        per_sentence.push((id.clone(), score_sentence(g, p)));
    }
    if let Some((id, _)) = pred.iter().find(|(id, _)| !seen.contains(id.as_str())) {
        return Err(EvalError::UnexpectedPrediction(id.clone()));
    }
    let totals: Counts = per_sentence.iter().map(|(_, c)| *c).sum();
    Ok(CorpusScore {
        totals,
        report: MetricReport::from_counts(totals),
        per_sentence,
    })
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Indices drawn for resample `b`: a ChaCha8 generator seeded with `seed`
/// on stream `b`, drawing `n` uniform indices in `0..n`.
pub fn resample_indices(seed: u64, b: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Percentile bootstrap over sentences. Each resample owns its RNG stream,
/// so the result does not depend on `exec`.
pub fn bootstrap_ci(
    counts: &[Counts],
    n_boot: usize,
    seed: u64,
    level: f64,
    exec: Execution,
) -> Result<ConfidenceIntervals, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::Bootstrap("no sentences".into()));
    }
    if n_boot == 0 {
        return Err(EvalError::Bootstrap("n_boot must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::Bootstrap(format!("level {level} outside (0, 1)")));
    }
    let stats = exec.map_range(n_boot, |b| {
        resample_indices(seed, b, counts.len())
            .into_iter()
            .map(|i| counts[i])
            .sum::<Counts>()
            .prf()
    });
    let alpha = (1.0 - level) / 2.0;
    let bounds = |pick: fn(&(f64, f64, f64)) -> f64| {
        let mut xs: Vec<f64> = stats.iter().map(pick).collect();
        xs.sort_by(f64::total_cmp);
        Interval {
            lower: percentile(&xs, alpha),
            upper: percentile(&xs, 1.0 - alpha),
        }
    };
    Ok(ConfidenceIntervals {
        level,
        precision: bounds(|s| s.0),
        recall: bounds(|s| s.1),
        f1: bounds(|s| s.2),
    })
}

/// Point metrics plus bootstrap intervals.
pub fn report_with_ci(
    counts: &[Counts],
    n_boot: usize,
    seed: u64,
    level: f64,
    exec: Execution,
) -> Result<MetricReport, EvalError> {
    let mut report = MetricReport::from_counts(counts.iter().copied().sum());
    report.ci = Some(bootstrap_ci(counts, n_boot, seed, level, exec)?);
    report.n_boot = n_boot;
    report.seed = Some(seed);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of the per-run bounds, present when every run has intervals.
    pub ci: Option<ConfidenceIntervals>,
    pub runs: Vec<MetricReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Arithmetic mean of run-level P, R and F1.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let cis: Option<Vec<ConfidenceIntervals>> = reports.iter().map(|r| r.ci).collect();
    let ci = cis.map(|cis| {
        let avg = |pick: fn(&ConfidenceIntervals) -> Interval| Interval {
            lower: mean(cis.iter().map(|c| pick(c).lower)),
            upper: mean(cis.iter().map(|c| pick(c).upper)),
        };
        ConfidenceIntervals {
            level: cis[0].level,
            precision: avg(|c| c.precision),
            recall: avg(|c| c.recall),
            f1: avg(|c| c.f1),
        }
    });
    Ok(AggregateReport {
        precision: mean(reports.iter().map(|r| r.precision)),
        recall: mean(reports.iter().map(|r| r.recall)),
        f1: mean(reports.iter().map(|r| r.f1)),
        ci,
        runs: reports.to_vec(),
    })
}
