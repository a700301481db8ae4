use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, histogram, Histogram, DEFAULT_BINS};
use crate::backbone::BackboneKind;
use crate::error::{DdadError, Result};
use crate::scoring::ScoreKind;

/// Run description carried by every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub backbone: Option<BackboneKind>,
    pub k: Option<usize>,
    pub anomaly_rate: Option<f64>,
    pub seeds: Vec<u64>,
    /// free-form extra settings (epochs, learning rate, ...)
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub label: u8,
    pub scores: BTreeMap<ScoreKind, f64>,
}

/// Image scores, labels, AUCs and histograms of one scored test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub auc: BTreeMap<ScoreKind, f64>,
    pub histograms: BTreeMap<ScoreKind, Histogram>,
    pub images: Vec<ImageRecord>,
}

impl EvalReport {
    /// Builds the report from one score per image and kind.
    pub fn build(
        ids: &[String],
        labels: &[u8],
        scores: &BTreeMap<ScoreKind, Vec<f64>>,
        metadata: ReportMetadata,
    ) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(DdadError::Eval(format!("{} ids but {} labels", ids.len(), labels.len())));
        }
        let mut auc_by_kind = BTreeMap::new();
        let mut histograms = BTreeMap::new();
        for (&kind, s) in scores {
            if s.len() != ids.len() {
                return Err(DdadError::Eval(format!("{kind}: {} scores for {} images", s.len(), ids.len())));
            }
            auc_by_kind.insert(kind, auc(s, labels)?);
            histograms.insert(kind, histogram(s, labels, DEFAULT_BINS)?);
        }
        let images = ids
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(j, (id, &label))| ImageRecord {
                id: id.clone(),
                label,
                scores: scores.iter().map(|(&k, s)| (k, s[j])).collect(),
            })
            .collect();
        Ok(Self { metadata, auc: auc_by_kind, histograms, images })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(|e| DdadError::Eval(e.to_string()))? + "\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backbone: BackboneKind,
    pub score_kind: ScoreKind,
    pub auc: f64,
}

/// Method-by-backbone AUC table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    fn method_name(row: &ComparisonRow) -> String {
        let b = row.backbone.as_str().to_uppercase().replace("AEU", "AE-U");
        match row.score_kind {
            ScoreKind::Rec => format!("{b} (A_rec)"),
            k => format!("{b} + DDAD ({})", k.as_str()),
        }
    }

    /// Plain-text table with aligned columns.
    pub fn to_table(&self) -> String {
        let names: Vec<String> = self.rows.iter().map(Self::method_name).collect();
        let width = names.iter().map(String::len).max().unwrap_or(0).max("Method".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}", "Method", "AUC");
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(6));
        for (name, row) in names.iter().zip(&self.rows) {
            let _ = writeln!(out, "{name:<width$}  {:>6.4}", row.auc);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(|e| DdadError::Eval(e.to_string()))? + "\n")
    }
}
