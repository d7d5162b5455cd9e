//! Label parsing, precision/recall/F1, probability densities, and
//! robustness reports.
//!
//! Scoring convention: a prediction that cannot be parsed into 0 or 1 counts
//! as the incorrect class (a detector that fails to answer has failed the
//! task) and is additionally tallied in `n_unparsed` so the effect stays
//! visible. Every rendered report states this convention in its header.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and ground truth ({truth}) differ in length")]
    LengthMismatch { predictions: usize, truth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedLabel {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "unparsed")]
    Unparsed,
}

impl ParsedLabel {
    pub fn from_u8(v: u8) -> ParsedLabel {
        if v == 1 {
            ParsedLabel::One
        } else {
            ParsedLabel::Zero
        }
    }

    pub fn as_u8(self) -> Option<u8> {
        match self {
            ParsedLabel::Zero => Some(0),
            ParsedLabel::One => Some(1),
            ParsedLabel::Unparsed => None,
        }
    }
}

/// Words for label scanning: maximal [A-Za-z0-9_] runs, with '.' absorbed
/// only between digits so "0.9" is one word but a sentence-final "0." is not.
fn label_words(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut words = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_alphanumeric() || b == b'_' {
            let start = i;
            i += 1;
            while i < bytes.len() {
                let c = bytes[i];
                if c.is_ascii_alphanumeric() || c == b'_' {
                    i += 1;
                } else if c == b'.'
                    && bytes[i - 1].is_ascii_digit()
                    && bytes.get(i + 1).is_some_and(|n| n.is_ascii_digit())
                {
                    i += 1;
                } else {
                    break;
                }
            }
            if let Ok(w) = std::str::from_utf8(&bytes[start..i]) {
                words.push(w);
            }
        } else {
            i += 1;
        }
    }
    words
}

/// First standalone '0' or '1' wins; otherwise case-insensitive patterns,
/// negation first ("not vulnerable", "no vulnerab…" → 0; "vulnerable", the
/// word "yes" → 1); otherwise unparsed.
pub fn parse_label(raw_text: &str) -> ParsedLabel {
    for w in label_words(raw_text) {
        match w {
            "0" => return ParsedLabel::Zero,
            "1" => return ParsedLabel::One,
            _ => {}
        }
    }
    let lower = raw_text.to_lowercase();
    if lower.contains("not vulnerable") || lower.contains("no vulnerab") {
        return ParsedLabel::Zero;
    }
    if lower.contains("vulnerable") {
        return ParsedLabel::One;
    }
    if label_words(&lower).iter().any(|w| *w == "yes") {
        return ParsedLabel::One;
    }
    ParsedLabel::Unparsed
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Unparsed predictions, already folded into fp/fn above.
    pub n_unparsed: u64,
}

/// Standard confusion counting; unparsed predictions score as the incorrect
/// class and increment `n_unparsed`.
pub fn score(predictions: &[ParsedLabel], ground_truth: &[u8]) -> Result<ConfusionCounts, EvalError> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: ground_truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, &t) in predictions.iter().zip(ground_truth) {
        let effective = match p.as_u8() {
            Some(v) => v,
            None => {
                c.n_unparsed += 1;
                1 - t // the incorrect class
            }
        };
        match (t, effective) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!("labels are 0/1"),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "MHM")]
    Mhm,
    #[serde(rename = "WIR")]
    Wir,
    #[serde(rename = "DCI")]
    Dci,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Condition::Clean => "clean",
            Condition::Mhm => "MHM",
            Condition::Wir => "WIR",
            Condition::Dci => "DCI",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub condition: Condition,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

/// P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R); each 0 when its
/// denominator is 0.
pub fn prf1(counts: ConfusionCounts, dataset: &str, condition: Condition) -> EvalReport {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EvalReport {
        dataset: dataset.to_string(),
        condition,
        precision,
        recall,
        f1,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    /// bins+1 edges, uniform over [0,1].
    pub bin_edges: Vec<f64>,
    /// Normalized so that sum(density * width) = 1 for non-empty populations.
    pub densities: Vec<f64>,
    pub population: usize,
    pub empty: bool,
}

/// Histogram over the probabilities of correct predictions. Values clamp
/// into [0,1]; 1.0 lands in the last bin.
pub fn density(correct_probabilities: &[f64], bins: usize) -> DensityHistogram {
    let bins = bins.max(1);
    let width = 1.0 / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &p in correct_probabilities {
        let p = p.clamp(0.0, 1.0);
        let idx = ((p / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = correct_probabilities.len();
    let densities = counts
        .iter()
        .map(|&c| {
            if n == 0 {
                0.0
            } else {
                c as f64 / (n as f64 * width)
            }
        })
        .collect();
    DensityHistogram {
        bin_edges,
        densities,
        population: n,
        empty: n == 0,
    }
}

pub const DEFAULT_DENSITY_BINS: usize = 20;

/// (bin_mid, density) pairs for external plotting.
pub fn density_csv(hist: &DensityHistogram) -> String {
    let mut out = String::from("bin_mid,density\n");
    for (i, d) in hist.densities.iter().enumerate() {
        let mid = (hist.bin_edges[i] + hist.bin_edges[i + 1]) / 2.0;
        out.push_str(&format!("{mid:.4},{d:.6}\n"));
    }
    out
}

/// One record's worth of robustness evidence: the clean prediction plus
/// whether an attack on it succeeded (None when the record was not attacked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub record_id: String,
    pub truth: u8,
    pub clean: ParsedLabel,
    pub attack_success: Option<bool>,
}

/// Re-scores the dataset as if the attacked predictions had been made: a
/// successful attack flips a correct clean prediction; everything else keeps
/// its clean label.
pub fn robustness_report(dataset: &str, condition: Condition, rows: &[RobustnessRow]) -> EvalReport {
    let mut predictions = Vec::with_capacity(rows.len());
    let mut truths = Vec::with_capacity(rows.len());
    for row in rows {
        let clean_correct = row.clean.as_u8() == Some(row.truth);
        let predicted = if clean_correct && row.attack_success == Some(true) {
            ParsedLabel::from_u8(1 - row.truth)
        } else {
            row.clean
        };
        predictions.push(predicted);
        truths.push(row.truth);
    }
    let counts = score(&predictions, &truths).expect("lengths match by construction");
    prf1(counts, dataset, condition)
}

/// Aligned-column text table with the scoring convention in the header.
pub fn render_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str("# unparsed predictions scored as the incorrect class (see n_unparsed)\n");
    out.push_str(&format!(
        "{:<16} {:<9} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6} {:>6} {:>9}\n",
        "dataset", "condition", "precision", "recall", "f1", "tp", "fp", "fn", "tn", "unparsed"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<16} {:<9} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6} {:>6} {:>9}\n",
            r.dataset,
            r.condition.to_string(),
            r.precision,
            r.recall,
            r.f1,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.counts.tn,
            r.counts.n_unparsed
        ));
    }
    out
}
