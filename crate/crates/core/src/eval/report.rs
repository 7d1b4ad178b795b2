use std::fmt::Write as _;

use super::wilcoxon::wilcoxon_signed_rank;
use crate::error::{Error, Result};

/// Scores of one predicted class mask against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub class: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub surface_distance: Option<f64>,
}

pub const RECORDS_HEADER: &str = "id,class,dice,jaccard,surface_distance";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// `id,class,dice,jaccard,surface_distance`, one row per record; missing
/// distances are written as `NA`.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.class,
            r.dice,
            r.jaccard,
            fmt_opt(r.surface_distance)
        );
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RECORDS_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "records header must be {RECORDS_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!("records line {}: expected 5 fields", i + 2)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Data(format!("records line {}: bad number {s:?}", i + 2)))
        };
        out.push(EvalRecord {
            id: f[0].to_string(),
            class: f[1].to_string(),
            dice: num(f[2])?,
            jaccard: num(f[3])?,
            surface_distance: if f[4].trim() == "NA" { None } else { Some(num(f[4])?) },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub class: String,
    pub images: usize,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    /// Mean over the images where the distance is defined.
    pub mean_surface_distance: Option<f64>,
}

/// Per-class means over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub label: String,
    pub rows: Vec<ClassSummary>,
}

impl ReportTable {
    /// Aggregates records in their given order; classes keep first-seen order.
    pub fn from_records(label: impl Into<String>, records: &[EvalRecord]) -> Self {
        let rows = record_classes(records)
            .into_iter()
            .map(|class| {
                let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.class == class).collect();
                let n = rs.len() as f64;
                let sd: Vec<f64> = rs.iter().filter_map(|r| r.surface_distance).collect();
                ClassSummary {
                    images: rs.len(),
                    mean_dice: rs.iter().map(|r| r.dice).sum::<f64>() / n,
                    mean_jaccard: rs.iter().map(|r| r.jaccard).sum::<f64>() / n,
                    mean_surface_distance: (!sd.is_empty()).then(|| sd.iter().sum::<f64>() / sd.len() as f64),
                    class,
                }
            })
            .collect();
        Self {
            label: label.into(),
            rows,
        }
    }

    pub fn row(&self, class: &str) -> Option<&ClassSummary> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,class,images,dice,jaccard,surface_distance\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                self.label,
                r.class,
                r.images,
                r.mean_dice,
                r.mean_jaccard,
                r.mean_surface_distance.map_or("NA".to_string(), |v| format!("{v:.6}"))
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.label);
        let _ = writeln!(out, "{:<12} {:>6} {:>7} {:>7} {:>8}", "class", "images", "D", "J", "S_d");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>7.3} {:>7.3} {:>8}",
                r.class,
                r.images,
                r.mean_dice,
                r.mean_jaccard,
                r.mean_surface_distance.map_or("NA".to_string(), |v| format!("{v:.3}"))
            );
        }
        out
    }
}

/// Pairwise two-sided p-values; the diagonal is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceMatrix {
    pub class: String,
    pub labels: Vec<String>,
    pub p: Vec<Vec<Option<f64>>>,
}

impl SignificanceMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = self.class.clone();
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.p) {
            out.push_str(label);
            for v in row {
                let _ = write!(out, ",{}", v.map_or("NA".to_string(), |p| format!("{p:.6e}")));
            }
            out.push('\n');
        }
        out
    }
}

/// Wilcoxon matrix over the per-image Jaccard scores of `class`. Every model
/// must score the same ids in the same order.
pub fn significance_matrix(models: &[(String, Vec<EvalRecord>)], class: &str) -> Result<SignificanceMatrix> {
    let mut scores: Vec<(Vec<&str>, Vec<f64>)> = Vec::with_capacity(models.len());
    for (label, records) in models {
        let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.class == class).collect();
        if rs.is_empty() {
            return Err(Error::Data(format!("{label} has no records for class {class}")));
        }
        scores.push((rs.iter().map(|r| r.id.as_str()).collect(), rs.iter().map(|r| r.jaccard).collect()));
    }
    for ((label, _), (ids, _)) in models.iter().zip(&scores).skip(1) {
        if *ids != scores[0].0 {
            return Err(Error::Data(format!(
                "{label} scores different image ids (or order) than {} for class {class}",
                models[0].0
            )));
        }
    }
    let k = models.len();
    let mut p = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = wilcoxon_signed_rank(&scores[i].1, &scores[j].1)?;
            p[i][j] = Some(v);
            p[j][i] = Some(v);
        }
    }
    Ok(SignificanceMatrix {
        class: class.to_string(),
        labels: models.iter().map(|(l, _)| l.clone()).collect(),
        p,
    })
}

/// Classes present in `records`, in first-seen order.
pub fn record_classes(records: &[EvalRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.class) {
            out.push(r.class.clone());
        }
    }
    out
}
