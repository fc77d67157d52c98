mod common;

use bcsam_core::classifiers::*;
use bcsam_core::dataset::UnifiedClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_family_fits_separable_blobs() {
    let (x, y) = common::blobs(200, 2, 6.0, 1);
    for family in ClassifierFamily::ALL {
        let clf = build_classifier(&ClassifierSpec::for_family(family), 0).unwrap();
        let model = clf.fit(x.view(), &y).unwrap();
        let acc = accuracy(&model.predict(x.view()).unwrap(), &y).unwrap();
        assert!(acc >= 0.99, "{family}: {acc}");
    }
}

#[test]
fn refit_with_same_seed_predicts_identically() {
    let (x, y) = common::blobs(150, 3, 2.0, 2);
    let (probe, _) = common::blobs(60, 3, 2.0, 3);
    for family in ClassifierFamily::ALL {
        let spec = ClassifierSpec::for_family(family);
        let a = build_classifier(&spec, 7).unwrap().fit(x.view(), &y).unwrap();
        let b = build_classifier(&spec, 7).unwrap().fit(x.view(), &y).unwrap();
        assert_eq!(a.predict(probe.view()).unwrap(), b.predict(probe.view()).unwrap(), "{family}");
    }
}

#[test]
fn predictions_stay_within_training_classes() {
    let (x, y) = common::blobs(90, 3, 3.0, 4);
    let (probe, _) = common::blobs(40, 5, 3.0, 5);
    for family in ClassifierFamily::ALL {
        let model = build_classifier(&ClassifierSpec::for_family(family), 0)
            .unwrap()
            .fit(x.view(), &y)
            .unwrap();
        for p in model.predict(probe.view()).unwrap() {
            assert!(model.classes().contains(&p));
        }
    }
}

#[test]
fn pinned_hyperparameters() {
    let rf = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::Rf), 0).unwrap();
    match rf.hyperparams() {
        Hyperparams::Rf(p) => {
            assert_eq!(p.n_estimators, 200);
            assert_eq!(p.max_depth, 16);
        }
        other => panic!("unexpected {other:?}"),
    }
    let ann = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::Ann), 0).unwrap();
    match ann.hyperparams() {
        Hyperparams::Ann(p) => assert_eq!(p.hidden_layer_sizes, vec![100]),
        other => panic!("unexpected {other:?}"),
    }
    for (family, kernel) in [(ClassifierFamily::SvmRbf, Kernel::Rbf), (ClassifierFamily::SvmPoly, Kernel::Poly)] {
        match ClassifierSpec::for_family(family).hyperparams {
            Hyperparams::SvmRbf(p) | Hyperparams::SvmPoly(p) => {
                assert_eq!(p.kernel, kernel);
                assert_eq!(p.c, 1.0);
                assert_eq!(p.degree, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(ClassifierSpec::parse("knn").is_err());
}

#[test]
fn fitted_forest_matches_spec() {
    let (x, y) = common::blobs(120, 4, 1.0, 6);
    let model = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::Rf), 0)
        .unwrap()
        .fit(x.view(), &y)
        .unwrap();
    let s = model.fitted_summary();
    assert_eq!(s["n_trees"], 200);
    assert!(s["max_tree_depth"].as_u64().unwrap() <= 16);
    let ann = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::Ann), 0)
        .unwrap()
        .fit(x.view(), &y)
        .unwrap();
    assert_eq!(ann.fitted_summary()["layer_sizes"], serde_json::json!([50, 100, 4]));
}

#[test]
fn save_load_round_trip() {
    let (x, y) = common::blobs(80, 3, 3.0, 8);
    let dir = tempfile::tempdir().unwrap();
    for family in ClassifierFamily::ALL {
        let model = build_classifier(&ClassifierSpec::for_family(family), 1)
            .unwrap()
            .fit(x.view(), &y)
            .unwrap();
        model.save(dir.path(), family.as_str()).unwrap();
        let back = TrainedClassifier::load(dir.path(), family.as_str()).unwrap();
        assert_eq!(back.predict(x.view()).unwrap(), model.predict(x.view()).unwrap());
    }
    std::fs::write(dir.path().join("rf.model"), b"{}").unwrap();
    assert!(TrainedClassifier::load(dir.path(), "rf").is_err());
}

#[test]
fn dimension_mismatch_on_predict() {
    let (x, y) = common::blobs(40, 2, 3.0, 9);
    let model = build_classifier(&ClassifierSpec::for_family(ClassifierFamily::SvmRbf), 0)
        .unwrap()
        .fit(x.view(), &y)
        .unwrap();
    assert!(model.predict(ndarray::Array2::zeros((3, 7)).view()).is_err());
}

#[test]
fn uniform_random_predictions_score_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = common::random_labels(10_000, 13, &mut rng);
    let pred = common::random_labels(10_000, 13, &mut rng);
    let acc = accuracy(&pred, &truth).unwrap();
    assert!((acc - 1.0 / 13.0).abs() <= 0.01, "{acc}");
    let half: Vec<UnifiedClass> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| if i % 2 == 0 { t.clone() } else { UnifiedClass::new("none") })
        .collect();
    assert_eq!(accuracy(&half, &truth).unwrap(), 0.5);
}
