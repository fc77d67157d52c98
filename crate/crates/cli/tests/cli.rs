use std::collections::BTreeMap;
use std::path::Path;

use bcsam_cli::dispatch;
use bcsam_core::autoencoder::{FeatureRow, FeatureTable, LATENT_DIM};
use bcsam_core::dataset::{DomainId, FoldAssignment, UnifiedClass};
use bcsam_core::eval::{cell_key, EvaluationReport};
use bcsam_core::synthetic::{write_synthetic_dataset, SyntheticConfig};

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("bcsam").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three well-separated classes on the first three axes, zero elsewhere;
/// `shift` moves each class center along its axis.
fn features(domain: DomainId, per_class: usize, shift: f32) -> FeatureTable {
    let mut rows = Vec::new();
    for c in 0..3 {
        for i in 0..per_class {
            let z = (0..LATENT_DIM)
                .map(|j| {
                    let jitter = ((i * 31 + j * 17 + c * 7) % 13) as f32 / 13.0 - 0.5;
                    match j {
                        _ if j == c => 4.0 + shift + jitter * 0.3,
                        0..3 => jitter * 0.3,
                        _ => 0.0,
                    }
                })
                .collect();
            rows.push(FeatureRow {
                image_id: format!("{domain}/c{c}/{i:03}.png"),
                domain,
                label: UnifiedClass::new(format!("class{c}")),
                z,
            });
        }
    }
    FeatureTable::new(rows).unwrap()
}

#[test]
fn bad_flag_and_unknown_subcommand_fail() {
    assert_ne!(run(&["ingest", "--bad-flag"]), 0);
    assert_ne!(run(&["frobnicate"]), 0);
    assert_ne!(run(&[]), 0);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn evaluate_file_mode_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let src = features(DomainId::Matek19, 10, 0.0);
    let tgt = features(DomainId::Acevedo20, 6, 0.2);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    src.write_csv(&a).unwrap();
    tgt.write_csv(&b).unwrap();
    let fold_of: BTreeMap<String, usize> = src.ids().iter().enumerate().map(|(i, id)| (id.to_string(), i % 5)).collect();
    let folds = FoldAssignment { k: 5, seed: 0, fold_of };
    let f = dir.path().join("f.json");
    folds.save(&f).unwrap();
    let out = dir.path().join("report.json");
    let args = ["evaluate", "--features-src", s(&a), "--features-tgt", s(&b), "--folds", s(&f), "--spec", "svm_rbf", "--out", s(&out)];
    assert_eq!(run(&args), 0);
    let first = std::fs::read_to_string(&out).unwrap();
    let report = EvaluationReport::from_json(&first).unwrap();
    assert_eq!(report.classifiers, vec!["svm_rbf".to_string()]);
    let cell = report.cell("svm_rbf", DomainId::Matek19, DomainId::Acevedo20).unwrap();
    assert_eq!(cell.folds.len(), 5);
    assert!(cell.mean > 99.0, "{}", cell.mean);
    assert!(report.cells["svm_rbf"].contains_key(&cell_key(DomainId::Matek19, DomainId::Matek19)));
    assert!(report.incomplete);
    assert!(dir.path().join("config.resolved.json").exists());

    assert_eq!(run(&args), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);

    let md = dir.path().join("report.md");
    assert_eq!(run(&["report", "--report", s(&out), "--out", s(&md)]), 0);
    assert!(std::fs::read_to_string(&md).unwrap().contains("BC-SAM-SVM(rbf)"));

    // Folds that do not cover the source ids are a runtime failure.
    let partial = FoldAssignment {
        k: 5,
        seed: 0,
        fold_of: folds.fold_of.iter().skip(1).map(|(k, v)| (k.clone(), *v)).collect(),
    };
    partial.save(&f).unwrap();
    assert_eq!(run(&args), 1);
}

fn smoke_config(dir: &Path, data: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "datasets": {"matek19": data.join("matek19"), "acevedo20": data.join("acevedo20")},
        "label_map": data.join("label_map.json"),
        "output_dir": out,
        "backbone": {"variant": "stub", "stub_channels": 8, "stub_grid": 8},
        "training": {"epochs_ae": 2, "batch_ae": 16},
        "autoencoder": {"encoder_channels": [16, 50], "decoder_channels": [32, 16, 8]},
        "classifiers": ["svm_rbf", "rf"],
        "k": 3,
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_all_on_synthetic_fixture_matches_stagewise_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(
        &data,
        &SyntheticConfig {
            per_class: 4,
            side: 48,
            seed: 1,
            noise: 0.02,
        },
    )
    .unwrap();
    let out_all = dir.path().join("all");
    let cfg = smoke_config(dir.path(), &data, &out_all);
    assert_eq!(run(&["run-all", "--config", s(&cfg)]), 0);
    let md = std::fs::read_to_string(out_all.join("report.md")).unwrap();
    assert!(md.contains("BC-SAM-SVM(rbf)") && md.contains("BC-SAM-RF"));
    let report = EvaluationReport::from_json(&std::fs::read_to_string(out_all.join("report.json")).unwrap()).unwrap();
    assert!(!report.incomplete);
    for stem in ["manifest.jsonl", "config.resolved.json", "autoencoder/history.json", "features/all.csv"] {
        assert!(out_all.join(stem).exists(), "{stem}");
    }

    // Same config through the individual subcommands.
    let out_seq = dir.path().join("seq");
    for stage in ["ingest", "finetune-seg", "embed", "train-ae", "features", "evaluate", "report"] {
        assert_eq!(run(&[stage, "--config", s(&cfg), "--output-dir", s(&out_seq)]), 0, "{stage}");
    }
    for f in ["report.json", "report.md", "features/all.csv", "manifest.jsonl"] {
        assert_eq!(
            std::fs::read(out_all.join(f)).unwrap(),
            std::fs::read(out_seq.join(f)).unwrap(),
            "{f} differs"
        );
    }

    // Replaying the snapshot reproduces the report byte for byte.
    let snap = out_all.join("config.resolved.json");
    let before = std::fs::read(out_all.join("report.json")).unwrap();
    assert_eq!(run(&["run-all", "--config", s(&snap)]), 0);
    assert_eq!(std::fs::read(out_all.join("report.json")).unwrap(), before);
}

#[test]
fn missing_inputs_fail_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["embed", "--backbone", "stub", "--output-dir", s(&out)]), 1);
    assert_eq!(run(&["ingest", "--output-dir", s(&out)]), 1);
    assert_eq!(run(&["ingest", "--output-dir", s(&out), "--classifiers", "knn"]), 1);
}
