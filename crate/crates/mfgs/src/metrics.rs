//! Evaluation metrics: error rate, NLL, expected calibration error, and
//! the OOD-detection family (AUROC, AUPR both ways, detection accuracy).
//!
//! Metric functions return natural units in [0, 1] (NLL in nats); the
//! report structs convert rates to percent for presentation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsint::ProbVector;

/// Probabilities are clamped here before taking logs, since mean-field
/// outputs can underflow to zero for extreme logits.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of equal-width calibration bins.
pub const DEFAULT_ECE_BINS: usize = 10;

const REPORT_VERSION: u32 = 1;

fn check_nonempty(len: usize, what: &'static str) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            left: a,
            right: b,
            context,
        });
    }
    Ok(())
}

/// Expected calibration error over equal-width bins on (0, 1]; bin s
/// covers ((s-1)/B, s/B] with zero confidence assigned to the first bin.
/// Empty bins contribute nothing.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    check_nonempty(confidences.len(), "calibration confidences")?;
    check_same_len(confidences.len(), correct.len(), "calibration inputs")?;
    assert!(n_bins >= 1, "need at least one bin");
    assert!(
        confidences.iter().all(|c| (0.0..=1.0).contains(c)),
        "confidences must lie in [0, 1]"
    );
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let bin = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[bin] += 1;
        conf_sum[bin] += c;
        acc_sum[bin] += if ok { 1.0 } else { 0.0 };
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for s in 0..n_bins {
        if count[s] == 0 {
            continue;
        }
        let m = count[s] as f64;
        total += (m / n) * ((conf_sum[s] / m) - (acc_sum[s] / m)).abs();
    }
    Ok(total)
}

/// Ascending sort with average ranks (1-based) assigned to ties.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUROC: the probability a random in-domain score exceeds a
/// random out score, with half credit for ties. Higher score means more
/// in-domain.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check_nonempty(scores_in.len(), "in-domain scores")?;
    check_nonempty(scores_out.len(), "out-of-domain scores")?;
    let mut all = Vec::with_capacity(scores_in.len() + scores_out.len());
    all.extend_from_slice(scores_in);
    all.extend_from_slice(scores_out);
    let ranks = average_ranks(&all);
    let n_in = scores_in.len() as f64;
    let n_out = scores_out.len() as f64;
    let rank_sum: f64 = ranks[..scores_in.len()].iter().sum();
    let u = rank_sum - n_in * (n_in + 1.0) / 2.0;
    Ok(u / (n_in * n_out))
}

/// Average precision with positives scored high: walk distinct score
/// values in descending order and credit each group's positives with the
/// precision after the whole group is included. Tied scores therefore
/// share one precision value, and all-tied inputs give the positive
/// prevalence.
pub fn aupr(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    check_nonempty(scores_pos.len(), "positive scores")?;
    check_nonempty(scores_neg.len(), "negative scores")?;
    let mut tagged: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&s| (s, true))
        .chain(scores_neg.iter().map(|&s| (s, false)))
        .collect();
    tagged.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut cum_tp = 0.0;
    let mut cum_fp = 0.0;
    let mut total = 0.0;
    let mut i = 0;
    while i < tagged.len() {
        let mut j = i;
        let mut tp = 0.0;
        let mut fp = 0.0;
        loop {
            if tagged[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            if j + 1 < tagged.len() && tagged[j + 1].0 == tagged[i].0 {
                j += 1;
            } else {
                break;
            }
        }
        cum_tp += tp;
        cum_fp += fp;
        total += tp * (cum_tp / (cum_tp + cum_fp));
        i = j + 1;
    }
    Ok(total / scores_pos.len() as f64)
}

/// Best achievable accuracy when predicting in-domain for score > t,
/// maximized over midpoints between adjacent distinct scores plus the two
/// infinite thresholds.
pub fn detection_accuracy(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check_nonempty(scores_in.len(), "in-domain scores")?;
    check_nonempty(scores_out.len(), "out-of-domain scores")?;
    let mut sorted_in = scores_in.to_vec();
    let mut sorted_out = scores_out.to_vec();
    sorted_in.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted_out.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let mut distinct: Vec<f64> = sorted_in.iter().chain(&sorted_out).copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();

    let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
    for pair in distinct.windows(2) {
        thresholds.push(pair[0] + (pair[1] - pair[0]) / 2.0);
    }

    let total = (scores_in.len() + scores_out.len()) as f64;
    let mut best = 0.0f64;
    for &t in &thresholds {
        let in_correct = sorted_in.len() - sorted_in.partition_point(|&s| s <= t);
        let out_correct = sorted_out.partition_point(|&s| s <= t);
        best = best.max((in_correct + out_correct) as f64 / total);
    }
    Ok(best)
}

/// In-domain quality metrics; rates are percents, NLL is per-sample nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InDomainMetrics {
    pub error_rate: f64,
    pub nll: f64,
    pub ece: f64,
    pub n_bins: usize,
}

/// OOD-detection metrics as percents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub detection_accuracy: f64,
}

/// Error rate, NLL, and ECE of predictive distributions against labels.
pub fn evaluate_in_domain(
    predictions: &[ProbVector],
    labels: &[usize],
    n_bins: usize,
) -> Result<InDomainMetrics> {
    check_nonempty(predictions.len(), "predictions")?;
    check_same_len(predictions.len(), labels.len(), "evaluation inputs")?;
    let n = predictions.len() as f64;
    let mut errors = 0usize;
    let mut nll = 0.0;
    let mut confidences = Vec::with_capacity(predictions.len());
    let mut correct = Vec::with_capacity(predictions.len());
    for (p, &y) in predictions.iter().zip(labels) {
        let probs = p.as_slice();
        assert!(y < probs.len(), "label out of range");
        let pred = crate::model::argmax(probs);
        if pred != y {
            errors += 1;
        }
        nll += -(probs[y].max(PROB_FLOOR)).ln();
        confidences.push(probs[pred]);
        correct.push(pred == y);
    }
    let ece_frac = ece(&confidences, &correct, n_bins)?;
    Ok(InDomainMetrics {
        error_rate: 100.0 * errors as f64 / n,
        nll: nll / n,
        ece: 100.0 * ece_frac,
        n_bins,
    })
}

/// The full OOD-detection panel on uncertainty scores where higher means
/// more in-domain; the out-positive AUPR negates scores per this crate's
/// documented orientation.
pub fn evaluate_ood(scores_in: &[f64], scores_out: &[f64]) -> Result<OodMetrics> {
    let neg = |v: &[f64]| -> Vec<f64> { v.iter().map(|s| -s).collect() };
    Ok(OodMetrics {
        auroc: 100.0 * auroc(scores_in, scores_out)?,
        aupr_in: 100.0 * aupr(scores_in, scores_out)?,
        aupr_out: 100.0 * aupr(&neg(scores_out), &neg(scores_in))?,
        detection_accuracy: 100.0 * detection_accuracy(scores_in, scores_out)?,
    })
}

/// One evaluation run: in-domain metrics, the OOD panel when an OOD set
/// was scored, and an echo of the configuration that produced the run.
/// Serializes to JSON and to one flat CSV row with fixed field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub error_rate: f64,
    pub nll: f64,
    pub ece: f64,
    pub n_bins: usize,
    pub auroc: Option<f64>,
    pub aupr_in: Option<f64>,
    pub aupr_out: Option<f64>,
    pub detection_accuracy: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(
        in_domain: InDomainMetrics,
        ood: Option<OodMetrics>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        let percent = |v: f64| (0.0..=100.0).contains(&v);
        assert!(percent(in_domain.error_rate) && percent(in_domain.ece));
        assert!(in_domain.nll >= 0.0);
        if let Some(o) = &ood {
            assert!(
                percent(o.auroc)
                    && percent(o.aupr_in)
                    && percent(o.aupr_out)
                    && percent(o.detection_accuracy)
            );
        }
        EvalReport {
            version: REPORT_VERSION,
            error_rate: in_domain.error_rate,
            nll: in_domain.nll,
            ece: in_domain.ece,
            n_bins: in_domain.n_bins,
            auroc: ood.as_ref().map(|o| o.auroc),
            aupr_in: ood.as_ref().map(|o| o.aupr_in),
            aupr_out: ood.as_ref().map(|o| o.aupr_out),
            detection_accuracy: ood.as_ref().map(|o| o.detection_accuracy),
            metadata,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("bad report: {e}")))
    }

    pub fn csv_header() -> &'static str {
        "version,error_rate,nll,ece,n_bins,auroc,aupr_in,aupr_out,detection_accuracy,metadata"
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let meta: Vec<String> = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.version,
            self.error_rate,
            self.nll,
            self.ece,
            self.n_bins,
            opt(self.auroc),
            opt(self.aupr_in),
            opt(self.aupr_out),
            opt(self.detection_accuracy),
            meta.join(";")
        )
    }
}
