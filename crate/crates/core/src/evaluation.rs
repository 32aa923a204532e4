//! Ranked-keyphrase metrics: macro-averaged F1@K and MAP@5, plus the
//! dataset-level report used for validation and the `evaluate` command.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::generator;
use crate::model::{EvalSample, Model};
use crate::numerics::Real;

/// Lowercase and collapse whitespace so matching is exact-string.
pub fn normalize_phrase(s: &str) -> String {
    let lowered = s.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    words.join(" ")
}

fn dedup_normalized(preds: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(preds.len());
    for p in preds {
        let n = normalize_phrase(p);
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// F1 of the top-k predictions against the gold set.
/// P = hits / min(k, |preds|), R = hits / |gold|, zero when degenerate.
pub fn f1_at_k(preds: &[String], gold: &[String], k: usize) -> f64 {
    debug_assert!(k >= 1);
    let preds = dedup_normalized(preds);
    let gold: Vec<String> = dedup_normalized(gold);
    if gold.is_empty() {
        return 0.0;
    }
    if preds.is_empty() {
        return 0.0;
    }
    let cut = k.min(preds.len());
    let hits = preds[..cut].iter().filter(|p| gold.contains(p)).count() as f64;
    let p = hits / cut as f64;
    let r = hits / gold.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Truncated average precision over the top five ranks:
/// AP = (sum of precision@r at the hit ranks r <= 5) / min(5, |gold|).
pub fn map_at_5(preds: &[String], gold: &[String]) -> f64 {
    let preds = dedup_normalized(preds);
    let gold: Vec<String> = dedup_normalized(gold);
    if gold.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let cut = 5.min(preds.len());
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (r, p) in preds[..cut].iter().enumerate() {
        if gold.contains(p) {
            hits += 1;
            acc += hits as f64 / (r + 1) as f64;
        }
    }
    acc / 5.0f64.min(gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub f1_at_1: f64,
    pub f1_at_3: f64,
    pub ap_at_5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub f1_at_1: f64,
    pub f1_at_3: f64,
    pub map_at_5: f64,
    /// Samples scored.
    pub n: usize,
    /// Samples skipped for having no gold keyphrases.
    pub skipped: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        MetricsReport {
            f1_at_1: 0.0,
            f1_at_3: 0.0,
            map_at_5: 0.0,
            n: 0,
            skipped: 0,
            per_sample: Vec::new(),
        }
    }
}

/// Corpus-level macro averages over ranked predictions. Samples with an
/// empty gold set are skipped (and counted).
pub fn evaluate_ranked(preds: &[Vec<String>], golds: &[Vec<String>]) -> MetricsReport {
    debug_assert_eq!(preds.len(), golds.len());
    let mut report = MetricsReport::empty();
    let mut sums = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        if dedup_normalized(g).is_empty() {
            report.skipped += 1;
            continue;
        }
        let m = SampleMetrics {
            f1_at_1: f1_at_k(p, g, 1),
            f1_at_3: f1_at_k(p, g, 3),
            ap_at_5: map_at_5(p, g),
        };
        sums.0 += m.f1_at_1;
        sums.1 += m.f1_at_3;
        sums.2 += m.ap_at_5;
        report.per_sample.push(m);
        report.n += 1;
    }
    if report.n > 0 {
        let n = report.n as f64;
        report.f1_at_1 = sums.0 / n;
        report.f1_at_3 = sums.1 / n;
        report.map_at_5 = sums.2 / n;
    }
    report
}

/// Decode every sample with beam search and score the ranked outputs.
pub fn decode_and_evaluate<F: Real>(
    model: &Model<F>,
    samples: &[EvalSample],
    beam_size: usize,
    max_len: usize,
) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut golds = Vec::with_capacity(samples.len());
    for s in samples {
        let ctx = model.decode_context(&s.input, &s.features)?;
        let ranked = generator::beam_search(model, &ctx, beam_size, max_len)?;
        preds.push(ranked.into_iter().map(|(kp, _)| kp).collect::<Vec<_>>());
        golds.push(s.gold.clone());
    }
    Ok(evaluate_ranked(&preds, &golds))
}
