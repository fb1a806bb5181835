//! Output scoring: the clinical F1 family over observation labels, NLG
//! metrics, grounding accuracy/mIoU, and VQA accuracy/recall/BLEU-1.

pub mod text;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::conversation::FindingVocabulary;
use crate::error::{Error, Result};
use crate::geometry::{self, parse_bboxes_from_text, NormalizedBBox};

pub use text::{corpus_bleu, mean_rouge_l, mean_sentence_bleu1, rouge_l, tokenize};

/// Predicted and reference positive-label sets for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPredictionPair {
    pub sample_id: String,
    pub predicted: BTreeSet<String>,
    pub reference: BTreeSet<String>,
}

/// Micro-, macro-, and example-averaged F1 with per-label detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
    pub example: f64,
    pub per_label: BTreeMap<String, f64>,
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        None
    } else {
        Some(2.0 * tp as f64 / denom as f64)
    }
}

/// F1 over pooled counts (micro), per-label means (macro, zero-support
/// labels contribute 0), and per-sample means (example-based, 1.0 when
/// both sets are empty). `subset` restricts scoring to those labels.
pub fn f1_scores(
    pairs: &[LabelPredictionPair],
    vocab: &FindingVocabulary,
    subset: Option<&[String]>,
) -> Result<F1Scores> {
    if pairs.is_empty() {
        return Err(Error::BadMetricInput("no label pairs".into()));
    }
    let scored: Vec<&String> = match subset {
        Some(labels) => {
            for label in labels {
                if !vocab.contains(label) {
                    return Err(Error::BadMetricInput(format!(
                        "subset label `{label}` is not in the vocabulary"
                    )));
                }
            }
            labels.iter().collect()
        }
        None => vocab.names().iter().collect(),
    };
    for pair in pairs {
        for label in pair.predicted.iter().chain(&pair.reference) {
            if !vocab.contains(label) {
                return Err(Error::BadMetricInput(format!(
                    "sample `{}` uses label `{label}` outside the vocabulary",
                    pair.sample_id
                )));
            }
        }
    }
    let scored_set: BTreeSet<&str> = scored.iter().map(|s| s.as_str()).collect();

    let mut pooled = (0u64, 0u64, 0u64);
    let mut per_label_counts: BTreeMap<&str, (u64, u64, u64)> =
        scored.iter().map(|l| (l.as_str(), (0, 0, 0))).collect();
    let mut example_sum = 0.0;
    for pair in pairs {
        let predicted: BTreeSet<&str> = pair
            .predicted
            .iter()
            .map(|s| s.as_str())
            .filter(|l| scored_set.contains(l))
            .collect();
        let reference: BTreeSet<&str> = pair
            .reference
            .iter()
            .map(|s| s.as_str())
            .filter(|l| scored_set.contains(l))
            .collect();
        let tp = predicted.intersection(&reference).count() as u64;
        let fp = predicted.difference(&reference).count() as u64;
        let fn_ = reference.difference(&predicted).count() as u64;
        pooled.0 += tp;
        pooled.1 += fp;
        pooled.2 += fn_;
        for label in &predicted {
            let slot = per_label_counts.get_mut(label).unwrap();
            if reference.contains(label) {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
        for label in reference.difference(&predicted) {
            per_label_counts.get_mut(label).unwrap().2 += 1;
        }
        example_sum += f1_from_counts(tp, fp, fn_).unwrap_or(1.0);
    }
    let per_label: BTreeMap<String, f64> = per_label_counts
        .iter()
        .map(|(label, &(tp, fp, fn_))| {
            (label.to_string(), f1_from_counts(tp, fp, fn_).unwrap_or(0.0))
        })
        .collect();
    let macro_ = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(F1Scores {
        micro: f1_from_counts(pooled.0, pooled.1, pooled.2).unwrap_or(1.0),
        macro_,
        example: example_sum / pairs.len() as f64,
        per_label,
    })
}

/// Per-sample IoU plus the derived accuracy and mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub per_sample_iou: Vec<f64>,
    pub mean_iou: f64,
    /// Fraction of samples with IoU >= 0.5 (the boundary counts).
    pub accuracy: f64,
}

impl GroundingReport {
    pub fn accuracy_at(&self, threshold: f64) -> f64 {
        let hits = self.per_sample_iou.iter().filter(|&&v| v >= threshold).count();
        hits as f64 / self.per_sample_iou.len() as f64
    }
}

pub const GROUNDING_IOU_THRESHOLD: f64 = 0.5;

/// Scores generated grounding text against reference boxes. The first
/// parsable box in each prediction is used; a sample with no parsable box
/// scores IoU 0.
pub fn grounding_eval(samples: &[(String, NormalizedBBox)]) -> Result<GroundingReport> {
    if samples.is_empty() {
        return Err(Error::BadMetricInput("no grounding samples".into()));
    }
    let per_sample_iou: Vec<f64> = samples
        .iter()
        .map(|(text, reference)| {
            parse_bboxes_from_text(text)
                .first()
                .map(|predicted| geometry::iou(&predicted.to_bbox(), &reference.to_bbox()))
                .unwrap_or(0.0)
        })
        .collect();
    let mean_iou = per_sample_iou.iter().sum::<f64>() / per_sample_iou.len() as f64;
    let report = GroundingReport {
        mean_iou,
        accuracy: 0.0,
        per_sample_iou,
    };
    Ok(GroundingReport {
        accuracy: report.accuracy_at(GROUNDING_IOU_THRESHOLD),
        ..report
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    /// Exact match after lowercasing and trimming.
    pub accuracy: f64,
    /// Mean fraction of unique reference words present in the prediction;
    /// samples with zero reference words are skipped.
    pub recall: f64,
    /// Mean per-sample BLEU-1.
    pub bleu1: f64,
}

pub fn vqa_eval(pairs: &[(String, String)]) -> Result<VqaReport> {
    if pairs.is_empty() {
        return Err(Error::BadMetricInput("no VQA samples".into()));
    }
    let mut exact = 0u64;
    let mut recall_sum = 0.0;
    let mut recall_count = 0u64;
    for (prediction, reference) in pairs {
        if prediction.trim().to_lowercase() == reference.trim().to_lowercase() {
            exact += 1;
        }
        let ref_words: BTreeSet<String> = tokenize(reference).into_iter().collect();
        if !ref_words.is_empty() {
            let pred_words: BTreeSet<String> = tokenize(prediction).into_iter().collect();
            recall_sum += ref_words.intersection(&pred_words).count() as f64 / ref_words.len() as f64;
            recall_count += 1;
        }
    }
    Ok(VqaReport {
        accuracy: exact as f64 / pairs.len() as f64,
        recall: if recall_count == 0 {
            0.0
        } else {
            recall_sum / recall_count as f64
        },
        bleu1: mean_sentence_bleu1(pairs)?,
    })
}

/// Named metric values with optional per-label breakdown, renderable as
/// text and as a machine-readable table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: String,
    pub sample_count: usize,
    /// Values in [0, 1]; multiplied by 100 for presentation.
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_label: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(kind: &str, sample_count: usize) -> MetricReport {
        MetricReport {
            kind: kind.to_string(),
            sample_count,
            values: BTreeMap::new(),
            per_label: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    /// Human-readable rendering, values scaled to the 0-100 presentation.
    pub fn render_text(&self) -> String {
        let mut out = format!("{} metrics over {} samples\n", self.kind, self.sample_count);
        for (name, value) in &self.values {
            out.push_str(&format!("  {name}: {:.2}\n", value * 100.0));
        }
        if !self.per_label.is_empty() {
            out.push_str("  per-label F1:\n");
            for (label, value) in &self.per_label {
                out.push_str(&format!("    {label}: {:.2}\n", value * 100.0));
            }
        }
        out
    }

    /// CSV rendering: `metric,value` rows scaled to 0-100.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("samples,{}\n", self.sample_count));
        for (name, value) in &self.values {
            out.push_str(&format!("{name},{:.4}\n", value * 100.0));
        }
        for (label, value) in &self.per_label {
            out.push_str(&format!("f1[{label}],{:.4}\n", value * 100.0));
        }
        out
    }
}
