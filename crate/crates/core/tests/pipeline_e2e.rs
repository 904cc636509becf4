use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use curate_core::export::parse_export_jsonl;
use curate_core::pipeline::{Pipeline, PipelineConfig, RunOptions, Stage, StageStatus};
use curate_core::types::QaType;
use curate_core::validate::RouteDecision;

fn fixture_config(out: &Path) -> PipelineConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/pipeline.toml");
    let mut cfg = PipelineConfig::load(&path).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn fixture_corpus_reaches_export() {
    let out = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fixture_config(out.path()), None).unwrap();
    let outcomes = p.run(&RunOptions::default()).unwrap();
    assert!(outcomes.iter().all(|o| o.status == StageStatus::Ran));
    for s in Stage::ALL {
        assert!(out.path().join(format!("manifests/{s}.json")).is_file(), "{s}");
    }

    let (header, records) = parse_export_jsonl(&read(out.path(), "export/dataset.jsonl")).unwrap();
    assert_eq!(header.records, records.len());
    let mut by_type: BTreeMap<QaType, usize> = BTreeMap::new();
    for r in &records {
        *by_type.entry(r.qa_type).or_default() += 1;
    }
    for t in QaType::ALL {
        assert!(by_type.get(&t).copied().unwrap_or(0) >= 1, "{t:?}: {by_type:?}");
    }

    // the reprint duplicates three pages of the first edition
    let clusters = read(out.path(), "dedup/clusters.jsonl");
    assert_eq!(clusters.lines().count(), 3, "{clusters}");
    let lineage = read(out.path(), "dedup/lineage.jsonl");
    assert!(lineage.contains("ed-charaka-reprint"), "{lineage}");

    // the low-confidence page is excluded, the middling one strictly cleaned
    let quality = read(out.path(), "ocrqa/quality.jsonl");
    assert!(quality.contains("\"Exclude\""), "{quality}");
    assert!(quality.contains("\"StrictClean\""), "{quality}");

    let decisions = read(out.path(), "validate/decisions.jsonl");
    assert!(decisions.lines().count() >= records.len());
    let _ = RouteDecision::Accept;
}

#[test]
fn rerun_skips_every_stage_and_from_forces() {
    let out = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fixture_config(out.path()), None).unwrap();
    p.run(&RunOptions::default()).unwrap();
    let first = read(out.path(), "export/dataset.jsonl");

    let again = p.run(&RunOptions::default()).unwrap();
    assert!(again.iter().all(|o| o.status == StageStatus::Skipped));

    let forced = p
        .run(&RunOptions {
            from: Some(Stage::Validate),
            ..Default::default()
        })
        .unwrap();
    let ran: Vec<Stage> = forced.iter().filter(|o| o.status == StageStatus::Ran).map(|o| o.stage).collect();
    assert_eq!(ran, vec![Stage::Validate, Stage::AuditSample, Stage::Export]);
    assert_eq!(read(out.path(), "export/dataset.jsonl"), first);
}

#[test]
fn changed_config_reruns_downstream_only() {
    let out = tempfile::tempdir().unwrap();
    Pipeline::new(fixture_config(out.path()), None)
        .unwrap()
        .run(&RunOptions::default())
        .unwrap();
    let mut cfg = fixture_config(out.path());
    cfg.export.val_fraction = 0.5;
    let outcomes = Pipeline::new(cfg, None).unwrap().run(&RunOptions::default()).unwrap();
    for o in outcomes {
        let expect = if o.stage == Stage::Export { StageStatus::Ran } else { StageStatus::Skipped };
        assert_eq!(o.status, expect, "{}", o.stage);
    }
}

#[test]
fn dry_run_writes_nothing() {
    let out = tempfile::tempdir().unwrap();
    let p = Pipeline::new(fixture_config(&out.path().join("o")), None).unwrap();
    let outcomes = p
        .run(&RunOptions {
            dry_run: true,
            ..Default::default()
        })
        .unwrap();
    assert!(outcomes.iter().all(|o| o.status == StageStatus::Planned));
    assert!(!out.path().join("o").exists());
}

#[test]
fn outputs_identical_across_job_counts() {
    let mut runs = Vec::new();
    for jobs in [1, 4] {
        let out = tempfile::tempdir().unwrap();
        let p = Pipeline::new(fixture_config(out.path()), None).unwrap();
        let outcomes = p
            .run(&RunOptions {
                jobs: Some(jobs),
                ..Default::default()
            })
            .unwrap();
        let digests: Vec<String> = outcomes.into_iter().map(|o| o.manifest.unwrap().output_digest).collect();
        runs.push(digests);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn failed_stage_keeps_earlier_outputs() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(out.path());
    let p = Pipeline::new(cfg.clone(), None).unwrap();
    p.run(&RunOptions::default()).unwrap();
    let before = read(out.path(), "ledger/trainable.jsonl");

    // a page file that names the wrong edition fails normalization
    let corpus = tempfile::tempdir().unwrap();
    let src = cfg.input_dir();
    fs::create_dir_all(corpus.path().join("pages")).unwrap();
    fs::copy(src.join("catalog.jsonl"), corpus.path().join("catalog.jsonl")).unwrap();
    for f in ["ed-charaka-en", "ed-ashtanga-hi", "ed-charaka-reprint"] {
        let text = fs::read_to_string(src.join(format!("pages/{f}.jsonl"))).unwrap();
        let text = if f == "ed-ashtanga-hi" { text.replace("ed-ashtanga-hi", "someone-else") } else { text };
        fs::write(corpus.path().join(format!("pages/{f}.jsonl")), text).unwrap();
    }
    cfg.input_dir = corpus.path().to_path_buf();
    let err = Pipeline::new(cfg, None).unwrap().run(&RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("normalize"), "{err}");
    assert_eq!(read(out.path(), "ledger/trainable.jsonl"), before);
}
