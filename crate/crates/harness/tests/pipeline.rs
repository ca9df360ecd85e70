// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::path::Path;

use common::tiny;
use desksteer_harness::checkpoint::Checkpoint;
use desksteer_harness::pipeline::{Pipeline, Stage, STAGES};

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn second_run_reuses_every_stage_and_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = Pipeline::new(tiny(), a.path()).unwrap();
    let first = pa.run_all().unwrap();
    assert_eq!(first.len(), STAGES.len());
    assert!(first.iter().all(|r| r.computed));
    let before = artifacts(a.path());
    assert!(pa.run_all().unwrap().iter().all(|r| !r.computed));
    assert_eq!(artifacts(a.path()), before);

    Pipeline::new(tiny(), b.path()).unwrap().run_all().unwrap();
    assert_eq!(artifacts(b.path()), before);
}

#[test]
fn changing_one_section_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(), dir.path()).unwrap().run_all().unwrap();

    let mut cfg = tiny();
    cfg.eval.beta = 1.0;
    let computed: Vec<Stage> = Pipeline::new(cfg, dir.path())
        .unwrap()
        .run_all()
        .unwrap()
        .into_iter()
        .filter(|r| r.computed)
        .map(|r| r.stage)
        .collect();
    assert_eq!(computed, vec![Stage::Eval]);

    let mut cfg = tiny();
    cfg.eval.beta = 1.0;
    cfg.extract.n_pairs = 4;
    let computed: Vec<Stage> = Pipeline::new(cfg, dir.path())
        .unwrap()
        .run_all()
        .unwrap()
        .into_iter()
        .filter(|r| r.computed)
        .map(|r| r.stage)
        .collect();
    assert_eq!(computed, vec![Stage::Extract, Stage::Eval]);
}

#[test]
fn tampered_artifact_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    p.ensure(Stage::Extract).unwrap();
    let path = p.artifact_path(Stage::Extract);
    let original = std::fs::read(&path).unwrap();
    let mut bytes = original.clone();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(!p.is_fresh(Stage::Extract));
    assert!(p.is_fresh(Stage::TrainDebias));

    let err = Checkpoint::load(&path).unwrap_err();
    assert!(err.message.contains("corrupt checkpoint section `"), "{err}");
    assert_eq!(err.exit_code(), 3);

    let reports = p.ensure(Stage::Extract).unwrap();
    assert!(reports.iter().find(|r| r.stage == Stage::Extract).unwrap().computed);
    assert_eq!(std::fs::read(&path).unwrap(), original);
}

#[test]
fn stages_load_what_they_saved() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    p.run_all().unwrap();
    let model = p.load_model().unwrap();
    assert_eq!(model.config().d_model, 32);
    let layers = p.load_layers().unwrap();
    assert_eq!(layers.selection.layers.len(), 1);
    let (blocks, _) = p.load_debias().unwrap();
    assert_eq!(blocks.layers(), layers.selection.layers);
    let rep = p.load_steering().unwrap();
    assert_eq!(rep.layers, layers.selection.layers);
    let eval = p.load_eval().unwrap();
    assert_eq!(eval.steered.curve.len(), 2);
    assert!(eval.baseline.is_some());
    assert!((0.0..=1.0).contains(&eval.steered.attribute_rate));
}

#[test]
fn downstream_stage_without_upstream_runs_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    let reports = p.ensure(Stage::TrainDebias).unwrap();
    let stages: Vec<Stage> = reports.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![Stage::Pretrain, Stage::SelectLayers, Stage::TrainDebias]);
    assert!(!p.artifact_path(Stage::AuditBias).exists());
}
