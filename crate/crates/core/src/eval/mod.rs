//! Cross-domain k-fold protocol and the accuracy report.
//!
//! For every fold a classifier is trained on the other source folds, then
//! tested on the held-out source fold and on the whole target domain. The
//! autoencoder producing the features is trained once, label-free, on both
//! domains; only the classifiers are refit per fold.

mod reference;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autoencoder::FeatureTable;
use crate::classifiers::{accuracy, build_classifier, ClassifierSpec};
use crate::dataset::{DomainId, FoldAssignment};
use crate::{Error, Result};

pub use reference::{reference_rows, ReferenceCell, ReferenceRow};
pub use render::{render_markdown, render_report, DASH};

/// Table column order: (trained on, tested on).
pub const CELL_ORDER: [(DomainId, DomainId); 4] = [
    (DomainId::Matek19, DomainId::Matek19),
    (DomainId::Matek19, DomainId::Acevedo20),
    (DomainId::Acevedo20, DomainId::Matek19),
    (DomainId::Acevedo20, DomainId::Acevedo20),
];

pub fn cell_key(train: DomainId, test: DomainId) -> String {
    format!("{}->{}", train.as_str(), test.as_str())
}

/// Mean and population std of per-fold accuracies, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
    pub test_sizes: Vec<usize>,
}

impl CellStats {
    pub fn from_folds(folds: Vec<f64>, test_sizes: Vec<usize>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let std = (folds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        CellStats {
            mean,
            std,
            folds,
            test_sizes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub source_test_size: usize,
    pub target_test_size: usize,
    /// Fractions in `[0, 1]`.
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

/// Row indices of one fold's split of the source table.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits the source rows by fold, checking the fold file covers exactly the
/// source ids (ids of the target domain may also appear and are ignored).
pub fn fold_splits(src: &FeatureTable, tgt: &FeatureTable, folds: &FoldAssignment) -> Result<Vec<FoldSplit>> {
    if folds.k < 2 {
        return Err(Error::FoldMismatch(format!("k = {} is below 2", folds.k)));
    }
    let src_ids: BTreeSet<&str> = src.ids().into_iter().collect();
    let tgt_ids: BTreeSet<&str> = tgt.ids().into_iter().collect();
    let missing: Vec<&str> = src_ids.iter().filter(|id| !folds.fold_of.contains_key(**id)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::FoldMismatch(format!(
            "{} source ids have no fold, e.g. {:?}",
            missing.len(),
            &missing[..missing.len().min(5)]
        )));
    }
    let stray: Vec<&str> = folds
        .fold_of
        .keys()
        .map(|k| k.as_str())
        .filter(|id| !src_ids.contains(id) && !tgt_ids.contains(id))
        .collect();
    if !stray.is_empty() {
        return Err(Error::FoldMismatch(format!(
            "{} fold ids have no features, e.g. {:?}",
            stray.len(),
            &stray[..stray.len().min(5)]
        )));
    }
    if let Some(id) = src_ids.intersection(&tgt_ids).next() {
        return Err(Error::FoldMismatch(format!("id {id} appears in both source and target features")));
    }
    let fold_of_row: Vec<usize> = src.rows().iter().map(|r| folds.fold_of[&r.image_id]).collect();
    let splits: Vec<FoldSplit> = (0..folds.k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..src.len()).partition(|&i| fold_of_row[i] == f);
            FoldSplit { fold: f, train, test }
        })
        .collect();
    for s in &splits {
        let train: BTreeSet<&str> = s.train.iter().map(|&i| src.rows()[i].image_id.as_str()).collect();
        assert!(
            s.test.iter().all(|&i| !train.contains(src.rows()[i].image_id.as_str())),
            "fold {} leaks test ids into training",
            s.fold
        );
        if s.test.is_empty() || s.train.is_empty() {
            return Err(Error::FoldMismatch(format!("fold {} has an empty train or test side", s.fold)));
        }
    }
    Ok(splits)
}

/// One classifier family under the protocol, in one training direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub spec: ClassifierSpec,
    pub source_domain: DomainId,
    pub target_domain: DomainId,
    pub k: usize,
    pub seed: u64,
    pub source: CellStats,
    pub target: CellStats,
    pub folds: Vec<FoldRecord>,
    pub fold_hash: String,
    pub source_features_hash: String,
    pub target_features_hash: String,
}

fn single_domain(t: &FeatureTable, what: &str) -> Result<DomainId> {
    let domains: BTreeSet<DomainId> = t.rows().iter().map(|r| r.domain).collect();
    match domains.len() {
        1 => Ok(*domains.iter().next().expect("one domain")),
        0 => Err(Error::InvalidArgument(format!("{what} features are empty"))),
        _ => Err(Error::InvalidArgument(format!("{what} features mix domains {domains:?}"))),
    }
}

/// Runs the protocol; fold `f` uses classifier seed `seed + f`.
pub fn run_protocol(
    src: &FeatureTable,
    tgt: &FeatureTable,
    spec: &ClassifierSpec,
    folds: &FoldAssignment,
    seed: u64,
) -> Result<ProtocolRun> {
    let source_domain = single_domain(src, "source")?;
    let target_domain = single_domain(tgt, "target")?;
    if source_domain == target_domain {
        return Err(Error::InvalidArgument(format!(
            "source and target are both {source_domain}"
        )));
    }
    spec.validate()?;
    let splits = fold_splits(src, tgt, folds)?;
    let x_src = src.matrix();
    let y_src = src.labels();
    let x_tgt = tgt.matrix();
    let y_tgt = tgt.labels();
    let records: Vec<FoldRecord> = splits
        .par_iter()
        .map(|s| {
            let fold_seed = seed.wrapping_add(s.fold as u64);
            let clf = build_classifier(spec, fold_seed)?;
            let x_train = x_src.select(Axis(0), &s.train);
            let y_train: Vec<_> = s.train.iter().map(|&i| y_src[i].clone()).collect();
            let model = clf.fit(x_train.view(), &y_train)?;
            let x_test = x_src.select(Axis(0), &s.test);
            let y_test: Vec<_> = s.test.iter().map(|&i| y_src[i].clone()).collect();
            let source_accuracy = accuracy(&model.predict(x_test.view())?, &y_test)?;
            let target_accuracy = accuracy(&model.predict(x_tgt.view())?, &y_tgt)?;
            log::info!(
                "stage=evaluate family={} fold={} source_acc={source_accuracy:.4} target_acc={target_accuracy:.4}",
                spec.family(),
                s.fold
            );
            Ok(FoldRecord {
                fold: s.fold,
                seed: fold_seed,
                train_size: s.train.len(),
                source_test_size: s.test.len(),
                target_test_size: tgt.len(),
                source_accuracy,
                target_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pct = |f: fn(&FoldRecord) -> f64| records.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>();
    let source = CellStats::from_folds(
        pct(|r| r.source_accuracy),
        records.iter().map(|r| r.source_test_size).collect(),
    );
    let target = CellStats::from_folds(
        pct(|r| r.target_accuracy),
        records.iter().map(|r| r.target_test_size).collect(),
    );
    Ok(ProtocolRun {
        spec: spec.clone(),
        source_domain,
        target_domain,
        k: folds.k,
        seed,
        source,
        target,
        folds: records,
        fold_hash: folds.hash(),
        source_features_hash: src.hash(),
        target_features_hash: tgt.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub k: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    pub spec_hashes: BTreeMap<String, String>,
    pub hyperparams: BTreeMap<String, BTreeMap<String, Value>>,
    pub fold_hashes: BTreeMap<String, String>,
    pub feature_hashes: BTreeMap<String, String>,
    pub folds: BTreeMap<String, BTreeMap<String, Vec<FoldRecord>>>,
    pub notes: BTreeMap<String, String>,
    pub extra: BTreeMap<String, Value>,
}

/// Accuracy table plus everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Family names in insertion order.
    pub classifiers: Vec<String>,
    /// family → cell key (`train->test`) → stats.
    pub cells: BTreeMap<String, BTreeMap<String, CellStats>>,
    /// family → mean of its four cell means, absent while any cell is missing.
    pub average: BTreeMap<String, Option<f64>>,
    pub incomplete: bool,
    pub reference: Vec<ReferenceRow>,
    pub metadata: ReportMetadata,
}

fn standard_notes() -> BTreeMap<String, String> {
    [
        ("std", "population std over the per-fold accuracies"),
        (
            "autoencoder",
            "trained once on both domains without labels; only classifiers are refit per fold",
        ),
        (
            "feature_scaling",
            "svm and ann see features standardized with statistics of each fold's training split",
        ),
        ("fold_seed", "classifier seed for fold f is seed + f"),
        (
            "reference",
            "reference rows are published full-scale numbers for comparison, not produced by this run",
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl EvaluationReport {
    pub fn new() -> Self {
        EvaluationReport {
            classifiers: Vec::new(),
            cells: BTreeMap::new(),
            average: BTreeMap::new(),
            incomplete: true,
            reference: reference_rows(),
            metadata: ReportMetadata {
                k: None,
                seeds: BTreeMap::new(),
                spec_hashes: BTreeMap::new(),
                hyperparams: BTreeMap::new(),
                fold_hashes: BTreeMap::new(),
                feature_hashes: BTreeMap::new(),
                folds: BTreeMap::new(),
                notes: standard_notes(),
                extra: BTreeMap::new(),
            },
        }
    }

    /// Merges one protocol run (its source cell and its cross-domain cell).
    pub fn add_run(&mut self, run: &ProtocolRun) -> Result<()> {
        if let Some(k) = self.metadata.k {
            if k != run.k {
                return Err(Error::InvalidArgument(format!("report holds k = {k}, run has k = {}", run.k)));
            }
        }
        self.metadata.k = Some(run.k);
        let family = run.spec.family().as_str().to_string();
        if !self.classifiers.contains(&family) {
            self.classifiers.push(family.clone());
        }
        let cells = self.cells.entry(family.clone()).or_default();
        cells.insert(cell_key(run.source_domain, run.source_domain), run.source.clone());
        cells.insert(cell_key(run.source_domain, run.target_domain), run.target.clone());
        let m = &mut self.metadata;
        m.seeds.insert(family.clone(), run.seed);
        m.spec_hashes.insert(family.clone(), run.spec.hash());
        m.hyperparams.insert(family.clone(), run.spec.hyperparam_map());
        m.fold_hashes.insert(run.source_domain.as_str().into(), run.fold_hash.clone());
        m.feature_hashes.insert(run.source_domain.as_str().into(), run.source_features_hash.clone());
        m.feature_hashes.insert(run.target_domain.as_str().into(), run.target_features_hash.clone());
        m.folds
            .entry(family)
            .or_default()
            .insert(run.source_domain.as_str().into(), run.folds.clone());
        self.refresh();
        Ok(())
    }

    /// Recomputes averages and the incomplete flag from the cells.
    pub fn refresh(&mut self) {
        let k = self.metadata.k;
        self.average.clear();
        let mut incomplete = self.classifiers.is_empty();
        for family in &self.classifiers {
            let cells = self.cells.get(family);
            let means: Vec<f64> = CELL_ORDER
                .iter()
                .filter_map(|(a, b)| cells.and_then(|c| c.get(&cell_key(*a, *b))))
                .filter(|c| Some(c.folds.len()) == k)
                .map(|c| c.mean)
                .collect();
            if means.len() == CELL_ORDER.len() {
                self.average.insert(family.clone(), Some(means.iter().sum::<f64>() / means.len() as f64));
            } else {
                incomplete = true;
                self.average.insert(family.clone(), None);
            }
        }
        self.incomplete = incomplete;
    }

    pub fn cell(&self, family: &str, train: DomainId, test: DomainId) -> Option<&CellStats> {
        self.cells.get(family)?.get(&cell_key(train, test))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut r: EvaluationReport = serde_json::from_str(text).map_err(|e| Error::json("report", e))?;
        r.refresh();
        Ok(r)
    }

    /// Merges another report's runs into this one (cells of the same family/key are replaced).
    pub fn merge(&mut self, other: &EvaluationReport) -> Result<()> {
        if let (Some(a), Some(b)) = (self.metadata.k, other.metadata.k) {
            if a != b {
                return Err(Error::InvalidArgument(format!("cannot merge reports with k = {a} and k = {b}")));
            }
        }
        self.metadata.k = self.metadata.k.or(other.metadata.k);
        for family in &other.classifiers {
            if !self.classifiers.contains(family) {
                self.classifiers.push(family.clone());
            }
        }
        for (family, cells) in &other.cells {
            self.cells.entry(family.clone()).or_default().extend(cells.clone());
        }
        let (m, o) = (&mut self.metadata, &other.metadata);
        m.seeds.extend(o.seeds.clone());
        m.spec_hashes.extend(o.spec_hashes.clone());
        m.hyperparams.extend(o.hyperparams.clone());
        m.fold_hashes.extend(o.fold_hashes.clone());
        m.feature_hashes.extend(o.feature_hashes.clone());
        for (family, per_domain) in &o.folds {
            m.folds.entry(family.clone()).or_default().extend(per_domain.clone());
        }
        m.extra.extend(o.extra.clone());
        self.refresh();
        Ok(())
    }
}

impl Default for EvaluationReport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_folds_have_zero_std() {
        let c = CellStats::from_folds(vec![80.0; 5], vec![10; 5]);
        assert_eq!(c.std, 0.0);
        assert_eq!(c.mean, 80.0);
    }

    #[test]
    fn population_std() {
        let c = CellStats::from_folds(vec![1.0, 3.0], vec![1, 1]);
        assert_eq!(c.std, 1.0);
    }

    #[test]
    fn empty_report_is_incomplete() {
        let mut r = EvaluationReport::new();
        r.refresh();
        assert!(r.incomplete);
        assert_eq!(r.reference.len(), 7);
    }
}
