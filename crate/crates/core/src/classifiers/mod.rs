//! Classical classifiers over the 50-dim latent features.
//!
//! Every family sits behind the same build / fit / predict interface. The
//! hyperparameters pinned for the experiments are the defaults of
//! [`ClassifierSpec::for_family`]; anything the experiments leave open falls back to the
//! conventional library default and is spelled out in the `ClassifierSpec` so reports can
//! record it.

mod boosting;
mod forest;
mod mlp;
mod svm;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::UnifiedClass;
use crate::{Error, Result};

pub use boosting::BoostParams;
pub use forest::ForestParams;
pub use mlp::MlpParams;
pub use svm::{Gamma, Kernel, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierFamily {
    Rf,
    SvmRbf,
    SvmPoly,
    Ann,
    Xgb,
}

impl ClassifierFamily {
    pub const ALL: [ClassifierFamily; 5] = [
        ClassifierFamily::Rf,
        ClassifierFamily::SvmRbf,
        ClassifierFamily::SvmPoly,
        ClassifierFamily::Ann,
        ClassifierFamily::Xgb,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierFamily::Rf => "rf",
            ClassifierFamily::SvmRbf => "svm_rbf",
            ClassifierFamily::SvmPoly => "svm_poly",
            ClassifierFamily::Ann => "ann",
            ClassifierFamily::Xgb => "xgb",
        }
    }

    /// Row label used in rendered tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            ClassifierFamily::Rf => "BC-SAM-RF",
            ClassifierFamily::SvmRbf => "BC-SAM-SVM(rbf)",
            ClassifierFamily::SvmPoly => "BC-SAM-SVM(poly)",
            ClassifierFamily::Ann => "BC-SAM-ANN",
            ClassifierFamily::Xgb => "BC-SAM-XGBoost",
        }
    }

    /// SVM and ANN see standardized features.
    pub fn standardizes(&self) -> bool {
        matches!(self, ClassifierFamily::SvmRbf | ClassifierFamily::SvmPoly | ClassifierFamily::Ann)
    }
}

impl fmt::Display for ClassifierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassifierFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '(', ')'], "_");
        let key = key.trim_end_matches('_');
        match key {
            "rf" | "random_forest" => Ok(ClassifierFamily::Rf),
            "svm_rbf" | "svm" => Ok(ClassifierFamily::SvmRbf),
            "svm_poly" => Ok(ClassifierFamily::SvmPoly),
            "ann" | "mlp" => Ok(ClassifierFamily::Ann),
            "xgb" | "xgboost" => Ok(ClassifierFamily::Xgb),
            _ => Err(Error::InvalidArgument(format!(
                "unknown classifier family {s:?} (expected one of rf, svm_rbf, svm_poly, ann, xgb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Hyperparams {
    Rf(ForestParams),
    SvmRbf(SvmParams),
    SvmPoly(SvmParams),
    Ann(MlpParams),
    Xgb(BoostParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hyperparams: Hyperparams,
}

impl ClassifierSpec {
    pub fn for_family(family: ClassifierFamily) -> Self {
        let hyperparams = match family {
            ClassifierFamily::Rf => Hyperparams::Rf(ForestParams::default()),
            ClassifierFamily::SvmRbf => Hyperparams::SvmRbf(SvmParams::rbf()),
            ClassifierFamily::SvmPoly => Hyperparams::SvmPoly(SvmParams::poly()),
            ClassifierFamily::Ann => Hyperparams::Ann(MlpParams::default()),
            ClassifierFamily::Xgb => Hyperparams::Xgb(BoostParams::default()),
        };
        ClassifierSpec { hyperparams }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::for_family(name.parse()?))
    }

    pub fn family(&self) -> ClassifierFamily {
        match &self.hyperparams {
            Hyperparams::Rf(_) => ClassifierFamily::Rf,
            Hyperparams::SvmRbf(_) => ClassifierFamily::SvmRbf,
            Hyperparams::SvmPoly(_) => ClassifierFamily::SvmPoly,
            Hyperparams::Ann(_) => ClassifierFamily::Ann,
            Hyperparams::Xgb(_) => ClassifierFamily::Xgb,
        }
    }

    /// Flat name → value dump for report metadata.
    pub fn hyperparam_map(&self) -> BTreeMap<String, Value> {
        let value = match &self.hyperparams {
            Hyperparams::Rf(p) => serde_json::to_value(p),
            Hyperparams::SvmRbf(p) | Hyperparams::SvmPoly(p) => serde_json::to_value(p),
            Hyperparams::Ann(p) => serde_json::to_value(p),
            Hyperparams::Xgb(p) => serde_json::to_value(p),
        }
        .expect("hyperparameters serialize");
        let mut map: BTreeMap<String, Value> = match value {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        map.insert("standardize_features".into(), Value::Bool(self.family().standardizes()));
        map
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    /// Rejects specs that drift from the values pinned for each family.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match &self.hyperparams {
            Hyperparams::Rf(p) => {
                if p.n_estimators != 200 || p.max_depth != 16 {
                    return bad(format!(
                        "random forest must use 200 trees of depth 16, got {} / {}",
                        p.n_estimators, p.max_depth
                    ));
                }
            }
            Hyperparams::SvmRbf(p) => {
                if p.kernel != Kernel::Rbf {
                    return bad("svm_rbf spec carries a non-rbf kernel".into());
                }
                p.validate()?;
            }
            Hyperparams::SvmPoly(p) => {
                if p.kernel != Kernel::Poly {
                    return bad("svm_poly spec carries a non-poly kernel".into());
                }
                p.validate()?;
            }
            Hyperparams::Ann(p) => {
                if p.hidden_layer_sizes != [100] {
                    return bad(format!("ann must have one hidden layer of 100, got {:?}", p.hidden_layer_sizes));
                }
                p.validate()?;
            }
            Hyperparams::Xgb(p) => p.validate()?,
        }
        Ok(())
    }
}

/// Per-dimension zero mean / unit variance scaling. Constant dimensions keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let scale = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// An unfitted model: spec plus the seed its stochastic parts draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    seed: u64,
}

pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<Classifier> {
    spec.validate()?;
    Ok(Classifier {
        spec: spec.clone(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Model {
    Forest(forest::Forest),
    Svm(svm::SvmModel),
    Mlp(mlp::Mlp),
    Boost(boosting::Booster),
}

impl Classifier {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn family(&self) -> ClassifierFamily {
        self.spec.family()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.spec.hyperparams
    }

    pub fn fit(&self, x: ArrayView2<f64>, y: &[UnifiedClass]) -> Result<TrainedClassifier> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot fit on an empty feature matrix".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} feature rows but {} labels", x.nrows(), y.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature matrix contains non-finite values".into()));
        }
        let mut classes: Vec<UnifiedClass> = y.to_vec();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "training labels hold a single class ({}); nothing to discriminate",
                classes.first().map(|c| c.as_str()).unwrap_or("")
            )));
        }
        let targets: Vec<usize> = y
            .iter()
            .map(|c| classes.binary_search(c).expect("class present"))
            .collect();
        let scaler = self.family().standardizes().then(|| Standardizer::fit(x));
        let scaled;
        let xs = match &scaler {
            Some(s) => {
                scaled = s.transform(x);
                scaled.view()
            }
            None => x.view(),
        };
        let k = classes.len();
        let model = match &self.spec.hyperparams {
            Hyperparams::Rf(p) => Model::Forest(forest::Forest::fit(p, xs, &targets, k, self.seed)?),
            Hyperparams::SvmRbf(p) | Hyperparams::SvmPoly(p) => Model::Svm(svm::SvmModel::fit(p, xs, &targets, k)?),
            Hyperparams::Ann(p) => Model::Mlp(mlp::Mlp::fit(p, xs, &targets, k, self.seed)?),
            Hyperparams::Xgb(p) => Model::Boost(boosting::Booster::fit(p, xs, &targets, k)?),
        };
        Ok(TrainedClassifier {
            spec: self.spec.clone(),
            seed: self.seed,
            n_features: x.ncols(),
            classes,
            scaler,
            model,
        })
    }
}

/// Sidecar written next to the model blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    spec: ClassifierSpec,
    seed: u64,
    n_features: usize,
    classes: Vec<UnifiedClass>,
    scaler: Option<Standardizer>,
    blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    spec: ClassifierSpec,
    seed: u64,
    n_features: usize,
    classes: Vec<UnifiedClass>,
    scaler: Option<Standardizer>,
    model: Model,
}

impl TrainedClassifier {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Classes seen in training, sorted.
    pub fn classes(&self) -> &[UnifiedClass] {
        &self.classes
    }

    pub fn scaler(&self) -> Option<&Standardizer> {
        self.scaler.as_ref()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<UnifiedClass>> {
        if x.ncols() != self.n_features {
            return Err(Error::Shape(format!(
                "model was fitted on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let scaled;
        let xs = match &self.scaler {
            Some(s) => {
                scaled = s.transform(x);
                scaled.view()
            }
            None => x.view(),
        };
        let idx = match &self.model {
            Model::Forest(m) => m.predict(xs),
            Model::Svm(m) => m.predict(xs),
            Model::Mlp(m) => m.predict(xs),
            Model::Boost(m) => m.predict(xs),
        };
        Ok(idx.into_iter().map(|i| self.classes[i].clone()).collect())
    }

    /// Structural facts about the fitted model, for checking that what was
    /// trained matches its `ClassifierSpec`.
    pub fn fitted_summary(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        out.insert("classes".into(), Value::from(self.classes.len()));
        match &self.model {
            Model::Forest(m) => {
                out.insert("n_trees".into(), Value::from(m.trees.len()));
                out.insert("max_tree_depth".into(), Value::from(m.max_depth_reached()));
            }
            Model::Svm(m) => {
                out.insert("n_support".into(), Value::from(m.support.len()));
                out.insert("n_pairs".into(), Value::from(m.pairs.len()));
                out.insert("gamma".into(), Value::from(m.gamma));
            }
            Model::Mlp(m) => {
                out.insert("layer_sizes".into(), Value::from(m.layer_sizes()));
                out.insert("n_iter".into(), Value::from(m.n_iter));
            }
            Model::Boost(m) => {
                out.insert("n_rounds".into(), Value::from(m.rounds.len()));
                out.insert("max_tree_depth".into(), Value::from(m.max_depth_reached()));
            }
        }
        out
    }

    /// Writes `<stem>.model` (opaque blob) and `<stem>.json` (spec, seed, scaler, classes).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = serde_json::to_vec(&self.model).map_err(|e| Error::json("classifier model", e))?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            seed: self.seed,
            n_features: self.n_features,
            classes: self.classes.clone(),
            scaler: self.scaler.clone(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let blob_path = dir.join(format!("{stem}.model"));
        std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let side_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("classifier sidecar", e))?;
        std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let side_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(side_path.display().to_string(), e))?;
        let blob_path = dir.join(format!("{stem}.model"));
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&blob)) != sidecar.blob_sha256 {
            return Err(Error::Checkpoint(format!("{} does not match its sidecar hash", blob_path.display())));
        }
        let model: Model = serde_json::from_slice(&blob).map_err(|e| Error::json("classifier model", e))?;
        sidecar.spec.validate()?;
        Ok(TrainedClassifier {
            spec: sidecar.spec,
            seed: sidecar.seed,
            n_features: sidecar.n_features,
            classes: sidecar.classes,
            scaler: sidecar.scaler,
            model,
        })
    }
}

/// Fraction of positions where the two label lists agree.
pub fn accuracy(pred: &[UnifiedClass], truth: &[UnifiedClass]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set is undefined".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> Vec<UnifiedClass> {
        names.iter().map(|n| UnifiedClass::new(*n)).collect()
    }

    #[test]
    fn accuracy_basics() {
        let t = labels(&["a", "b", "a", "b"]);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(accuracy(&labels(&["a", "a", "a", "a"]), &t).unwrap(), 0.5);
        assert!(accuracy(&t[..3], &t).is_err());
    }

    #[test]
    fn family_names() {
        assert_eq!("SVM_RBF".parse::<ClassifierFamily>().unwrap(), ClassifierFamily::SvmRbf);
        assert_eq!("XGBoost".parse::<ClassifierFamily>().unwrap(), ClassifierFamily::Xgb);
        assert!("knn".parse::<ClassifierFamily>().is_err());
        for f in ClassifierFamily::ALL {
            assert_eq!(f.as_str().parse::<ClassifierFamily>().unwrap(), f);
        }
    }

    #[test]
    fn drifted_forest_rejected() {
        let mut spec = ClassifierSpec::for_family(ClassifierFamily::Rf);
        if let Hyperparams::Rf(p) = &mut spec.hyperparams {
            p.max_depth = 8;
        }
        assert!(build_classifier(&spec, 0).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let clf = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::SvmRbf), 0).unwrap();
        let x = Array2::zeros((4, 3));
        assert!(clf.fit(x.view(), &labels(&["a", "a", "a", "a"])).is_err());
        assert!(clf.fit(Array2::zeros((0, 3)).view(), &[]).is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_var() {
        let x = ndarray::array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let s = Standardizer::fit(x.view());
        let t = s.transform(x.view());
        assert!((t.column(0).sum()).abs() < 1e-12);
        assert!((t.column(0).mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(s.scale[1], 1.0);
    }
}
