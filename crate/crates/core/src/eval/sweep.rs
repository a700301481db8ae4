use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auc;
use super::report::{ComparisonReport, ComparisonRow, ReportMetadata};
use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::{generate_synthetic, DatasetSpec, SyntheticParams};
use crate::error::{DdadError, Result};
use crate::scoring::{score_pool, ScoreKind, SigmaPooling};
use crate::trainer::{train_ensemble, EnsembleModule, Role, TrainConfig};

pub const DEFAULT_AR_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Everything an experiment needs besides the anomaly rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub kinds: Vec<ScoreKind>,
    pub pooling: SigmaPooling,
    /// batch size of the scoring forward passes
    pub score_batch: usize,
}

impl ExperimentSettings {
    pub fn new(kind: BackboneKind, train: TrainConfig) -> Self {
        let mut kinds = vec![ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter];
        if kind == BackboneKind::Aeu {
            kinds.extend([ScoreKind::IntraRefined, ScoreKind::InterRefined]);
        }
        Self {
            backbone: BackboneConfig::new(kind, train.base_seed),
            train,
            kinds,
            pooling: SigmaPooling::default(),
            score_batch: 64,
        }
    }

    fn metadata(&self, anomaly_rate: Option<f64>) -> ReportMetadata {
        let t = &self.train;
        ReportMetadata {
            backbone: Some(self.backbone.kind),
            k: Some(t.k),
            anomaly_rate,
            seeds: (0..t.k)
                .map(|i| t.member_seed(Role::A, i))
                .chain((0..t.k).map(|i| t.member_seed(Role::B, i)))
                .collect(),
            settings: BTreeMap::from([
                ("epochs".to_string(), t.epochs.to_string()),
                ("learning_rate".to_string(), t.learning_rate.to_string()),
                ("batch_size".to_string(), t.batch_size.to_string()),
                ("base_seed".to_string(), t.base_seed.to_string()),
                ("sigma_pooling".to_string(), format!("{:?}", self.pooling)),
            ]),
        }
    }
}

/// AUC of every requested kind on the labeled test set.
pub fn evaluate_modules(
    module_a: Option<&mut EnsembleModule>,
    module_b: &mut EnsembleModule,
    data: &DatasetSpec,
    settings: &ExperimentSettings,
) -> Result<BTreeMap<ScoreKind, f64>> {
    let scored =
        score_pool(module_a, module_b, &data.test.images, &settings.kinds, settings.pooling, settings.score_batch)?;
    settings
        .kinds
        .iter()
        .map(|&k| {
            let s = scored.image_scores(k).expect("requested kind was scored");
            Ok((k, auc(&s, &data.test.labels)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ar: f64,
    pub score_kind: ScoreKind,
    pub backbone: BackboneKind,
    /// `None` when this AR point failed
    pub auc: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub metadata: ReportMetadata,
    pub rows: Vec<SweepRow>,
    /// AR value and message of every failed point
    pub failures: Vec<(f64, String)>,
}

impl SweepTable {
    pub fn auc(&self, ar: f64, kind: ScoreKind) -> Option<f64> {
        self.rows.iter().find(|r| r.ar == ar && r.score_kind == kind).and_then(|r| r.auc)
    }

    /// `ar,score_kind,backbone,auc,seed`; failed points carry `failed` in the auc column.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ar,score_kind,backbone,auc,seed")?;
        for r in &self.rows {
            let auc = r.auc.map_or_else(|| "failed".to_string(), |a| a.to_string());
            writeln!(out, "{},{},{},{},{}", r.ar, r.score_kind, r.backbone, auc, r.seed)?;
        }
        Ok(())
    }
}

/// Trains module B once on the normal pool, then for every AR regenerates
/// the unlabeled pool, trains module A and scores the test set.
///
/// Module B, and therefore every B-only score, is shared by all points:
/// the normal pool does not depend on the anomaly rate. A failing point is
/// recorded and the others still run.
pub fn run_ar_sweep(ar_values: &[f64], data: &SyntheticParams, settings: &ExperimentSettings) -> Result<SweepTable> {
    if let Some(bad) = ar_values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(DdadError::Config(format!("anomaly rate {bad} outside [0, 1]")));
    }
    settings.train.validate()?;
    let base = generate_synthetic(&SyntheticParams { anomaly_rate: 0.0, ..data.clone() })?;
    let module_b = train_ensemble(Role::B, &base.normal, &settings.backbone, &settings.train)?;

    let points: Vec<Result<BTreeMap<ScoreKind, f64>>> = ar_values
        .par_iter()
        .map(|&ar| {
            let d = generate_synthetic(&SyntheticParams { anomaly_rate: ar, ..data.clone() })?;
            let mut a = train_ensemble(Role::A, &d.combined_pool()?, &settings.backbone, &settings.train)?;
            let mut b = EnsembleModule {
                role: Role::B,
                nets: module_b.nets.iter().map(|n| n.deep_copy()).collect::<Result<_>>()?,
                loss_curves: module_b.loss_curves.clone(),
            };
            evaluate_modules(Some(&mut a), &mut b, &d, settings)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&ar, point) in ar_values.iter().zip(points) {
        let aucs = match point {
            Ok(aucs) => Some(aucs),
            Err(e) => {
                failures.push((ar, format!("[{}] {e}", e.module())));
                None
            }
        };
        for &kind in &settings.kinds {
            rows.push(SweepRow {
                ar,
                score_kind: kind,
                backbone: settings.backbone.kind,
                auc: aucs.as_ref().map(|a| a[&kind]),
                seed: settings.train.base_seed,
            });
        }
    }
    Ok(SweepTable { metadata: settings.metadata(None), rows, failures })
}

/// Trains one dual ensemble per backbone on `data` and reports the AUC of
/// each requested `(backbone, score kind)` pair, in the given order.
pub fn method_comparison_report(
    specs: &[(BackboneKind, ScoreKind)],
    data: &DatasetSpec,
    train: &TrainConfig,
) -> Result<ComparisonReport> {
    if specs.is_empty() {
        return Err(DdadError::Config("no methods to compare".into()));
    }
    let mut results = BTreeMap::new();
    for kind in specs.iter().map(|s| s.0) {
        if results.contains_key(&kind.as_str()) {
            continue;
        }
        let mut settings = ExperimentSettings::new(kind, train.clone());
        settings.kinds = specs.iter().filter(|s| s.0 == kind).map(|s| s.1).collect();
        let needs_a = settings.kinds.iter().any(|k| k.needs_module_a());
        let mut b = train_ensemble(Role::B, &data.normal, &settings.backbone, train)?;
        let mut a = if needs_a {
            Some(train_ensemble(Role::A, &data.combined_pool()?, &settings.backbone, train)?)
        } else {
            None
        };
        results.insert(kind.as_str(), evaluate_modules(a.as_mut(), &mut b, data, &settings)?);
    }
    let rows = specs
        .iter()
        .map(|&(backbone, score_kind)| ComparisonRow {
            backbone,
            score_kind,
            auc: results[backbone.as_str()][&score_kind],
        })
        .collect();
    let mut metadata = ExperimentSettings::new(specs[0].0, train.clone()).metadata(data.anomaly_rate);
    metadata.backbone = None;
    Ok(ComparisonReport { metadata, rows })
}
