//! End-to-end pipeline behaviour on the seconds-scale smoke configuration.

use std::path::Path;

use memlab::attack::{read_scores, Method};
use memlab::backend::mock::MockServer;
use memlab::backend::RemoteConfig;
use memlab::config::{BackendChoice, RunConfig, Sweep};
use memlab::microlm;
use memlab::pipeline::{self, read_meta, run_all, run_experiment, Stage, Workspace};
use memlab::Error;

fn smoke_ws(dir: &Path, seed: u64) -> Workspace {
    Workspace::new(dir, RunConfig::smoke(seed)).unwrap()
}

#[test]
fn evaluate_without_attack_names_missing_scores_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = Stage::Evaluate.run(&smoke_ws(dir.path(), 1)).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(*stage, "evaluate");
            assert!(matches!(**source, Error::MissingArtifact(ref p) if p.ends_with("scores.csv")));
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("scores.csv"));
}

#[test]
fn full_run_writes_every_artifact_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let ws = smoke_ws(dir.path(), 2);
    let report = run_all(&ws).unwrap();
    for m in Method::ALL {
        assert!(report.methods.contains_key(&m), "{m} missing");
        assert!(dir.path().join(format!("roc_{m}.csv")).exists());
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(pipeline::METRICS)).unwrap()).unwrap();
    let spv = &metrics["spv"];
    assert_eq!(spv.as_object().unwrap().len(), 3);
    for k in ["auc", "tpr_at_1pct", "tpr_at_01pct"] {
        assert!(spv[k].is_f64(), "{k}");
    }
    assert_eq!(read_meta(&dir.path().join(pipeline::METRICS)).unwrap().config_hash, ws.hashes.evaluate);
    assert_eq!(read_meta(&dir.path().join(pipeline::SCORES)).unwrap().config_hash, ws.hashes.attack);
    assert_eq!(report.config_hash, ws.hashes.evaluate);
    assert_eq!(report.seeds["target"], 2);

    // Every method scored the same record set.
    let scores = read_scores(&dir.path().join(pipeline::SCORES)).unwrap();
    let ids = |m: Method| {
        let mut v: Vec<_> = scores.iter().filter(|s| s.method == m).map(|s| s.record_id.clone()).collect();
        v.sort();
        v
    };
    assert_eq!(ids(Method::Spv).len(), 60);
    assert_eq!(ids(Method::Spv), ids(Method::SpvNoPdc));
    assert_eq!(ids(Method::Spv), ids(Method::SpvNoPva));

    let refs = report.reference_comparison.as_ref().unwrap();
    assert_eq!(refs.len(), 3);
    let audit = std::fs::read_to_string(dir.path().join(pipeline::PAIRS)).unwrap();
    assert_eq!(audit.lines().count(), 60 * 3);
}

#[test]
fn evaluate_refuses_mismatched_hash_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let ws = smoke_ws(dir.path(), 3);
    run_all(&ws).unwrap();
    let mut changed = ws.config.clone();
    changed.attack.mink_k = 10.0;
    let other = Workspace::new(dir.path(), changed).unwrap();
    let err = Stage::Evaluate.run(&other).unwrap_err();
    assert!(
        matches!(&err, Error::Stage { stage: "evaluate", source } if matches!(**source, Error::ConfigHashMismatch { .. })),
        "{err}"
    );
    Stage::Evaluate.run(&other.with_force(true)).unwrap();
}

#[test]
fn train_target_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let ws = smoke_ws(dir.path(), 4);
    Stage::PrepareData.run(&ws).unwrap();
    Stage::TrainTarget.run(&ws).unwrap();
    let first = std::fs::read(dir.path().join("models/target.mlm")).unwrap();
    Stage::TrainTarget.run(&ws).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("models/target.mlm")).unwrap());
}

#[test]
fn two_runs_give_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(&smoke_ws(a.path(), 5)).unwrap();
    run_all(&smoke_ws(b.path(), 5)).unwrap();
    let read = |d: &Path| std::fs::read(d.join(pipeline::METRICS)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let csv = |d: &Path| std::fs::read(d.join(pipeline::SCORES)).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
}

#[test]
fn prompt_length_sweep_emits_three_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke(6);
    cfg.eval.sweep = Some(Sweep::PromptLength(vec![8, 16, 32]));
    let ws = Workspace::new(dir.path(), cfg).unwrap();
    let (_, points) = run_experiment(&ws).unwrap();
    assert_eq!(points.len(), 3);
    for (r, l) in points.iter().zip([8, 16, 32]) {
        let p = r.sweep.as_ref().unwrap();
        assert_eq!(p.axis, "prompt_length");
        assert_eq!(p.value, l);
        assert_eq!(r.config.selfprompt.prompt_length, l as usize);
        let on_disk = pipeline::read_report(&dir.path().join(format!("sweep/prompt_length-{l}"))).unwrap();
        assert_eq!(on_disk.sweep, r.sweep);
    }
    // Sweep points reuse the main run's target instead of retraining it.
    assert!(!dir.path().join("sweep/prompt_length-8/models/target.mlm").exists());
}

#[test]
fn remote_pipeline_matches_in_process() {
    let (local, remote) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = RunConfig::smoke(7);
    run_all(&Workspace::new(local.path(), cfg.clone()).unwrap()).unwrap();

    let server = MockServer::start().unwrap();
    server.add_model("base-model", microlm::load(&local.path().join("models/base.mlm")).unwrap());
    server.add_model("target-model", microlm::load(&local.path().join("models/target.mlm")).unwrap());
    let mut rcfg = cfg.clone();
    rcfg.backend.kind = BackendChoice::Remote;
    rcfg.backend.base_model = Some("base-model".into());
    rcfg.backend.remote = Some(RemoteConfig { poll_interval_secs: 0.0, ..RemoteConfig::new(server.base_url(), "target-model") });
    // The attacker's mask filler is local either way; share it.
    let ws = Workspace::new(remote.path(), rcfg).unwrap().with_upstream(local.path());
    for stage in Stage::ALL {
        stage.run(&ws).unwrap();
    }
    assert!(remote.path().join("models/reference.remote.json").exists());
    let a = read_scores(&local.path().join(pipeline::SCORES)).unwrap();
    let b = read_scores(&remote.path().join(pipeline::SCORES)).unwrap();
    assert_eq!(a, b);
}
