//! Tile-level classification metrics, overall and per cohort.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

/// Row order of the per-cohort table; other cohorts follow alphabetically.
pub const COHORT_ORDER: [&str; 5] = ["MEL", "HCC", "CRC", "NSCLC", "PDAC"];
pub const OVERALL: &str = "Overall";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no scores given")]
    EmptyInput,
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    OneClassOnly { positives: usize, negatives: usize },
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One row of the predictions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    #[serde(default)]
    pub slide_id: String,
    #[serde(default)]
    pub col: u32,
    #[serde(default)]
    pub row: u32,
    pub p_pos: f64,
    pub label: u8,
    pub cohort: String,
}

impl LabeledScore {
    pub fn new(p_pos: f64, label: u8, cohort: &str) -> Self {
        Self {
            slide_id: String::new(),
            col: 0,
            row: 0,
            p_pos,
            label,
            cohort: cohort.to_string(),
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.label > 1 {
            return Err(MetricsError::InvalidScore(format!("label {} is not 0 or 1", self.label)));
        }
        if !(0.0..=1.0).contains(&self.p_pos) {
            return Err(MetricsError::InvalidScore(format!("p_pos {} outside [0, 1]", self.p_pos)));
        }
        Ok(())
    }
}

pub fn read_predictions_csv<R: io::Read>(reader: R) -> Result<Vec<LabeledScore>, MetricsError> {
    let scores: Vec<LabeledScore> = csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<_, _>>()?;
    scores.iter().try_for_each(LabeledScore::validate)?;
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with predicted positive iff `p_pos >= t`.
pub fn confusion(scores: &[LabeledScore], t: f64) -> Result<Confusion, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for s in scores {
        s.validate()?;
        match (s.p_pos >= t, s.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Rates derived from a confusion table; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub misclassification_rate: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn summary_stats(c: &Confusion) -> SummaryStats {
    SummaryStats {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        misclassification_rate: ratio(c.fp + c.fn_, c.n()),
    }
}

/// Mann-Whitney AUC from average ranks; ties earn half credit.
pub fn roc_auc(scores: &[LabeledScore]) -> Result<f64, MetricsError> {
    scores.iter().try_for_each(LabeledScore::validate)?;
    let positives = scores.iter().filter(|s| s.label == 1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::OneClassOnly { positives, negatives });
    }
    let mut order: Vec<&LabeledScore> = scores.iter().collect();
    order.sort_by(|a, b| a.p_pos.total_cmp(&b.p_pos));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].p_pos == order[i].p_pos {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_run = order[i..=j].iter().filter(|s| s.label == 1).count();
        rank_sum += avg * pos_in_run as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cohort: String,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub n_tiles: u64,
    pub misclassification_rate: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricsRow {
    fn compute(cohort: &str, scores: &[LabeledScore], t: f64) -> Result<Self, MetricsError> {
        let c = confusion(scores, t)?;
        let stats = summary_stats(&c);
        let auc = match roc_auc(scores) {
            Ok(a) => Some(a),
            Err(MetricsError::OneClassOnly { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            cohort: cohort.to_string(),
            auc,
            f1: stats.f1,
            sensitivity: stats.sensitivity,
            specificity: stats.specificity,
            n_tiles: c.n(),
            misclassification_rate: stats.misclassification_rate,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub rows: Vec<MetricsRow>,
}

fn cohort_rank(name: &str) -> (usize, &str) {
    let known = COHORT_ORDER.iter().position(|c| *c == name);
    (known.unwrap_or(COHORT_ORDER.len()), name)
}

/// One row per cohort in table order, then the overall row.
pub fn stratified_report(scores: &[LabeledScore], t: f64) -> Result<MetricsReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut by_cohort: BTreeMap<&str, Vec<LabeledScore>> = BTreeMap::new();
    for s in scores {
        by_cohort.entry(&s.cohort).or_default().push(s.clone());
    }
    let mut cohorts: Vec<_> = by_cohort.into_iter().collect();
    cohorts.sort_by(|a, b| cohort_rank(a.0).cmp(&cohort_rank(b.0)));
    let mut rows = cohorts
        .iter()
        .map(|(name, s)| MetricsRow::compute(name, s, t))
        .collect::<Result<Vec<_>, _>>()?;
    rows.push(MetricsRow::compute(OVERALL, scores, t)?);
    Ok(MetricsReport { threshold: t, rows })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table with three decimals.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "{:<10} {:>7} {:>7} {:>11} {:>11} {:>8}\n",
            "Cohort", "AUC", "F1", "Sensitivity", "Specificity", "nTiles"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>11} {:>11} {:>8}",
                r.cohort,
                cell(r.auc),
                cell(r.f1),
                cell(r.sensitivity),
                cell(r.specificity),
                r.n_tiles
            );
        }
        out
    }
}
