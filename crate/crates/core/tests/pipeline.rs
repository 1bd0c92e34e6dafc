use std::fs;
use std::path::Path;
use std::process::Command;

use synthbench::bench::{
    cmd_evaluate, cmd_infer, cmd_phantom, cmd_preprocess, cmd_rank, collect_summaries, means_from_summaries,
    read_prediction, ExperimentConfig, MeanRow, RunOptions,
};
use synthbench::ingest::{split_subjects, DatasetManifest, Task};
use synthbench::volume::{read_nifti, Modality};
use synthbench::Error;

const OPTS: RunOptions = RunOptions { jobs: 2 };

fn task() -> Task {
    Task {
        source: Modality::MriT1w,
        target: Modality::Ct,
    }
}

fn setup(dir: &Path, model: &str, count: usize) -> ExperimentConfig {
    cmd_phantom(&dir.join("data"), task(), count, [30, 28, 16], [1.4, 1.4, 2.5], 1).unwrap();
    let cfg = format!(
        r#"{{"manifest": "data/manifest.json",
            "pipeline": {{"target_spacing": [2, 2, 2], "pad_multiple": 16, "patch_size": [16, 16, 16]}},
            "patching": {{"patch_size": [16, 16, 16]}},
            "split": {{"validation_count": 1}},
            "model": {{"name": "{model}"}}, "output_dir": "out", "seed": 2}}"#
    );
    let path = dir.join(format!("{model}.json"));
    fs::write(&path, cfg).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn preprocess_writes_one_set_per_subject_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "identity", 8);
    assert!(cmd_preprocess(&cfg, OPTS).unwrap().is_success());
    let pre = cfg.output_dir.join("preprocessed");
    let subjects: Vec<_> = fs::read_dir(&pre).unwrap().collect();
    assert_eq!(subjects.len(), 8);
    let first = fs::read(pre.join("phantom-003/source.nii.gz")).unwrap();
    let sidecar = fs::read_to_string(pre.join("phantom-003/target.transform.json")).unwrap();
    assert!(sidecar.contains("\"schema_version\": 1"));
    assert!(cmd_preprocess(&cfg, OPTS).unwrap().is_success());
    assert_eq!(fs::read(pre.join("phantom-003/source.nii.gz")).unwrap(), first);
}

#[test]
fn missing_input_fails_only_that_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "identity", 8);
    fs::remove_file(dir.path().join("data/phantom-005_source.nii.gz")).unwrap();
    let r = cmd_preprocess(&cfg, OPTS).unwrap();
    assert_eq!(r.succeeded.len(), 7);
    assert_eq!(r.failed.len(), 1);
    assert_eq!(r.failed[0].0, "phantom-005");
}

#[test]
fn baseline_predicts_water() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "baseline", 8);
    cmd_preprocess(&cfg, OPTS).unwrap();
    assert!(cmd_infer(&cfg, OPTS).unwrap().is_success());
    let manifest = DatasetManifest::load(&cfg.manifest).unwrap();
    let split = split_subjects(&manifest, &cfg.split).unwrap();
    for id in &split.test {
        let pred = read_prediction(&cfg, task(), id).unwrap();
        let original = read_nifti(&manifest.subject(id).unwrap().target_path).unwrap();
        assert_eq!(pred.geometry(), original.geometry());
        assert!(pred.data().iter().all(|&v| v.abs() < 1e-3), "{id}");
    }
}

#[test]
fn evaluate_reports_each_test_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "identity", 8);
    cmd_preprocess(&cfg, OPTS).unwrap();
    // Nothing inferred yet: every subject is incomplete.
    let r = cmd_evaluate(&cfg, OPTS).unwrap();
    assert!(r.succeeded.is_empty());
    assert!(r.failed.iter().all(|(_, e)| matches!(e, Error::Completeness(_))));

    cmd_infer(&cfg, OPTS).unwrap();
    assert!(cmd_evaluate(&cfg, OPTS).unwrap().is_success());
    let manifest = DatasetManifest::load(&cfg.manifest).unwrap();
    let n_test = split_subjects(&manifest, &cfg.split).unwrap().test.len();
    let csv = fs::read_to_string(cfg.output_dir.join("metrics/identity/subjects.csv")).unwrap();
    assert_eq!(csv.lines().count(), n_test + 1);
    assert!(cfg.output_dir.join("metrics/identity/lesions.csv").exists());
    let summaries = collect_summaries(std::slice::from_ref(&cfg.output_dir)).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].subjects, n_test);
}

#[test]
fn unknown_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "no-such-model", 8);
    cmd_preprocess(&cfg, OPTS).unwrap();
    assert!(matches!(cmd_infer(&cfg, OPTS), Err(Error::Lookup(_))));
}

#[test]
fn rank_over_result_directories() {
    let dir = tempfile::tempdir().unwrap();
    let a = setup(dir.path(), "identity", 8);
    let b = setup(dir.path(), "baseline", 8);
    cmd_preprocess(&a, OPTS).unwrap();
    for cfg in [&a, &b] {
        cmd_infer(cfg, OPTS).unwrap();
        cmd_evaluate(cfg, OPTS).unwrap();
    }
    let rows = means_from_summaries(&collect_summaries(std::slice::from_ref(&a.output_dir)).unwrap());
    assert_eq!(rows.len(), 2);
    let out = dir.path().join("rank");
    cmd_rank(&rows, &out).unwrap();
    let detail = fs::read_to_string(out.join("psnr_pairwise_detail.csv")).unwrap();
    // One task: the better model dominates once, p = 1/2.
    assert!(detail.lines().any(|l| l.ends_with(",1,1,0.5000000000,false")), "{detail}");
    let single: Vec<MeanRow> = rows.into_iter().filter(|r| r.model == "identity").collect();
    assert!(matches!(cmd_rank(&single, &out), Err(Error::Alignment(_))));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_synthbench"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "identity", 8);
    let cfg_path = dir.path().join("identity.json");
    let ok = bin().arg("validate").arg(&cfg_path).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    fs::remove_file(dir.path().join("data/phantom-002_target.nii.gz")).unwrap();
    let bad = bin().arg("validate").arg(&cfg_path).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let partial = bin().args(["preprocess", "--jobs", "2"]).arg(&cfg_path).output().unwrap();
    assert_eq!(partial.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&partial.stderr);
    assert!(stderr.contains("failed subject phantom-002"), "{stderr}");
    assert!(cfg.output_dir.join("preprocessed/phantom-001/source.nii.gz").exists());
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "identity", 8);
    std::env::set_var("BENCH_SEED", "77");
    let cfg = ExperimentConfig::load(dir.path().join("identity.json"));
    std::env::remove_var("BENCH_SEED");
    let cfg = cfg.unwrap();
    assert_eq!((cfg.seed, cfg.split.seed), (77, 77));
}

#[test]
fn cli_rank_from_means_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("means.csv");
    let mut text = String::from("task,model,psnr_db,ssim\n");
    for t in 0..11 {
        text += &format!("t{t},good,{},0.9\nt{t},bad,{},0.5\n", 30 + t, 20 + t);
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("rank");
    let r = bin().args(["rank", "--means-csv"]).arg(&csv).arg("--out").arg(&out).output().unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = fs::read_to_string(out.join("psnr_pairwise.csv")).unwrap();
    assert_eq!(table, "model,good,bad\ngood,-,11*\nbad,0,-\n");
}
