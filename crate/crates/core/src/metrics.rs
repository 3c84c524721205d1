//! ROC AUC, average precision and detection reports.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, parse_f64, Label};
use crate::error::{Error, Result};

fn counts(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == Label::Candidate).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Probability that a random positive (`Candidate`) outscores a random
/// negative, ties counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} positives, {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, doubled to stay integral) mid-ranks of the positives
    let mut pos_rank_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_x2 = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == Label::Candidate).count() as u128;
        pos_rank_x2 += mid_x2 * pos_in_tie;
        i = j + 1;
    }
    let np = n_pos as u128;
    let u_x2 = pos_rank_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean precision at each positive, walking scores in descending order with
/// ties broken by sample index.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, _) = counts(labels);
    if n_pos == 0 {
        return Err(Error::SingleClass("no positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == Label::Candidate {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// ROC operating points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, lowering the
/// threshold one distinct score at a time.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} positives, {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] == Label::Candidate {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(i + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
    }
    Ok(points)
}

/// `statistic,fpr,tpr` rows, one per operating point of each report.
pub fn write_roc_csv<W: Write>(reports: &[DetectionReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["statistic", "fpr", "tpr"])?;
    for r in reports {
        for (fpr, tpr) in roc_curve(&r.scores, &r.labels)? {
            w.write_record([r.statistic.clone(), fmt_f64(fpr), fmt_f64(tpr)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample: Vec<f64>,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub statistic: String,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub auc: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl DetectionReport {
    pub fn from_scores(statistic: impl Into<String>, scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        let auc = roc_auc(&scores, &labels)?;
        let ap = average_precision(&scores, &labels)?;
        let (n_pos, n_neg) = counts(&labels);
        Ok(Self { statistic: statistic.into(), scores, labels, auc, ap, n_pos, n_neg })
    }

    /// Writes `sample_id,statistic_name,score,label` rows.
    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<()> {
        write_scores_csv(std::slice::from_ref(self), out)
    }
}

pub fn build_report(statistic: &str, scored: &[ScoredSample]) -> Result<DetectionReport> {
    let scores = scored.iter().map(|s| s.score).collect();
    let labels = scored.iter().map(|s| s.label).collect();
    DetectionReport::from_scores(statistic, scores, labels)
}

/// One `statistic,auc,ap,n_pos,n_neg` row per report.
pub fn write_summary_csv<W: Write>(reports: &[DetectionReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["statistic", "auc", "ap", "n_pos", "n_neg"])?;
    for r in reports {
        w.write_record([r.statistic.clone(), fmt_f64(r.auc), fmt_f64(r.ap), r.n_pos.to_string(), r.n_neg.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores_csv<W: Write>(reports: &[DetectionReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "statistic_name", "score", "label"])?;
    for r in reports {
        for (i, (s, l)) in r.scores.iter().zip(&r.labels).enumerate() {
            w.write_record([i.to_string(), r.statistic.clone(), fmt_f64(*s), l.as_u8().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds reports (recomputing AUC and AP) from a score table, keeping the
/// order in which statistics first appear.
pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<DetectionReport>> {
    let mut r = csv::Reader::from_reader(input);
    let mut groups: Vec<(String, Vec<f64>, Vec<Label>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("score row needs 4 fields, got {}", rec.len())));
        }
        let name = rec[1].to_string();
        let score = parse_f64(&rec[2])?;
        let label =
            Label::from_u8(rec[3].trim().parse().map_err(|_| Error::Parse(format!("bad label {:?}", &rec[3])))?)?;
        match groups.iter_mut().find(|g| g.0 == name) {
            Some(g) => {
                g.1.push(score);
                g.2.push(label);
            }
            None => groups.push((name, vec![score], vec![label])),
        }
    }
    groups.into_iter().map(|(n, s, l)| DetectionReport::from_scores(n, s, l)).collect()
}

pub fn save_reports(reports: &[DetectionReport], summary: impl AsRef<Path>, scores: impl AsRef<Path>) -> Result<()> {
    write_summary_csv(reports, std::io::BufWriter::new(std::fs::File::create(summary)?))?;
    write_scores_csv(reports, std::io::BufWriter::new(std::fs::File::create(scores)?))
}
