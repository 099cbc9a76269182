//! Word accuracy, ED1, character and word error rates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ed1: f64,
    /// Total edit distance over total reference length.
    pub cer: f64,
    /// `1 − acc` at word level.
    pub wer: f64,
    pub n_samples: usize,
    /// Samples with an empty reference; they add errors but no length to CER.
    pub empty_references: usize,
    pub case_folded: bool,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One row of the per-sample error dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleResult {
    pub index: usize,
    pub reference: String,
    pub prediction: String,
    pub distance: usize,
}

fn prepare(s: &str, fold: bool) -> String {
    if fold {
        s.to_lowercase()
    } else {
        s.to_string()
    }
}

pub fn per_sample(predictions: &[String], references: &[String], case_fold: bool) -> Vec<SampleResult> {
    predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(index, (p, r))| SampleResult {
            index,
            reference: r.clone(),
            prediction: p.clone(),
            distance: edit_distance(&prepare(p, case_fold), &prepare(r, case_fold)),
        })
        .collect()
}

pub fn evaluate(predictions: &[String], references: &[String], case_fold: bool) -> Result<MetricsReport> {
    if predictions.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Argument("cannot evaluate zero samples".into()));
    }
    let rows = per_sample(predictions, references, case_fold);
    let n = rows.len() as f64;
    let exact = rows.iter().filter(|r| r.distance == 0).count() as f64;
    let near = rows.iter().filter(|r| r.distance <= 1).count() as f64;
    let errors: usize = rows.iter().map(|r| r.distance).sum();
    let length: usize = references.iter().map(|r| r.chars().count()).sum();
    let empty_references = references.iter().filter(|r| r.is_empty()).count();
    if empty_references > 0 {
        log::warn!("{empty_references} empty reference(s): their errors count toward CER with zero length");
    }
    let cer = if length == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / length as f64
    };
    let acc = exact / n;
    Ok(MetricsReport {
        acc,
        ed1: near / n,
        cer,
        wer: 1.0 - acc,
        n_samples: rows.len(),
        empty_references,
        case_folded: case_fold,
    })
}

/// Writes `index,reference,prediction,distance` rows.
pub fn write_samples_csv(rows: &[SampleResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
