mod common;

use std::fs;
use std::path::Path;

use setexp::pipeline::{
    self, cell_config, replay, resume, AblationGrid, PipelineError, Stage, StageError, Workspace, MANIFEST_FILE,
    METRICS_FILE, PLAN_FILE, RESULT_FILE, TRANSCRIPTS_FILE,
};
use setexp::ranker::{NoisyOracle, PerfectOracle, RankError, RankerConfig};

use common::{toy_config, CountingOracle};

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn fresh_oracle_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    let manifest = ws.run(&PerfectOracle).unwrap();
    let root = ws.dir.root();
    assert!(root.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    for name in [PLAN_FILE, TRANSCRIPTS_FILE, RESULT_FILE, METRICS_FILE, MANIFEST_FILE] {
        assert!(root.join(name).exists(), "{name} missing");
    }
    assert_eq!(manifest.degraded_lists, 0);
    assert!(!manifest.degraded_over_threshold);
    assert_eq!(manifest.ranker_calls, manifest.lists);
    let metrics = manifest.metrics.expect("toy queries carry ground truth");
    assert_eq!(metrics["MAP@10"], 1.0);
    assert_eq!(manifest.queries.len(), 2);
    assert!(manifest.queries.iter().all(|q| q.clamped));

    let lists = setexp::sampler::read_lists_jsonl(&read(root, PLAN_FILE)[..]).unwrap();
    assert_eq!(manifest.plan_digest, setexp::sampler::plan_digest(&lists));
    let stored: setexp::pipeline::RunManifest = serde_json::from_slice(&read(root, MANIFEST_FILE)).unwrap();
    assert_eq!(stored.config, manifest.config);
}

#[test]
fn rerun_reuses_transcripts_and_regenerates_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    ws.run(&PerfectOracle).unwrap();
    let root = ws.dir.root().to_path_buf();
    let metrics = read(&root, METRICS_FILE);
    fs::remove_file(root.join(METRICS_FILE)).unwrap();

    let counting = CountingOracle::default();
    let manifest = resume(&root, &counting).unwrap();
    assert_eq!(counting.calls(), 0);
    assert_eq!(manifest.ranker_calls, 0);
    assert_eq!(manifest.reused_transcripts, manifest.lists);
    assert_eq!(read(&root, METRICS_FILE), metrics);
}

#[test]
fn interrupted_rank_stage_resumes_without_double_counting() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = Workspace::create(toy_config(tmp.path())).unwrap();
    reference.run(&PerfectOracle).unwrap();
    let expected = read(reference.dir.root(), RESULT_FILE);

    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    ws.run(&PerfectOracle).unwrap();
    let root = ws.dir.root().to_path_buf();
    // Keep ten complete records and a torn eleventh, as after a crash mid-write.
    let text = fs::read_to_string(root.join(TRANSCRIPTS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut kept = lines[..10].join("\n");
    kept.push('\n');
    kept.push_str(&lines[10][..lines[10].len() / 2]);
    fs::write(root.join(TRANSCRIPTS_FILE), kept).unwrap();
    fs::remove_file(root.join(RESULT_FILE)).unwrap();

    let counting = CountingOracle::default();
    let manifest = resume(&root, &counting).unwrap();
    assert_eq!(counting.calls() as u64, manifest.lists - 10);
    assert_eq!(read(&root, RESULT_FILE), expected);
    assert_eq!(
        setexp::transcript::load(&root.join(TRANSCRIPTS_FILE)).unwrap().len() as u64,
        manifest.lists
    );
}

#[test]
fn replay_is_byte_identical_and_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = toy_config(tmp.path());
    config.ranker = RankerConfig::NoisyOracle { tau: 0.3, seed: 5 };
    let ws = Workspace::create(config).unwrap();
    ws.run(&NoisyOracle::new(0.3, 5)).unwrap();
    let root = ws.dir.root().to_path_buf();
    let (result, metrics) = (read(&root, RESULT_FILE), read(&root, METRICS_FILE));
    fs::remove_file(root.join(RESULT_FILE)).unwrap();
    fs::remove_file(root.join(METRICS_FILE)).unwrap();
    let manifest = replay(&root).unwrap();
    assert_eq!(manifest.ranker_calls, 0);
    assert_eq!(read(&root, RESULT_FILE), result);
    assert_eq!(read(&root, METRICS_FILE), metrics);
}

#[test]
fn replay_refuses_lists_without_transcripts() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    ws.run(&PerfectOracle).unwrap();
    let root = ws.dir.root().to_path_buf();
    let text = fs::read_to_string(root.join(TRANSCRIPTS_FILE)).unwrap();
    let rest: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(root.join(TRANSCRIPTS_FILE), rest).unwrap();
    let err = replay(&root).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage {
            stage: Stage::Rank,
            source: StageError::Rank(RankError::MissingTranscript(_)),
            ..
        }
    ));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn stage_errors_name_the_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    let candidates = ws.decode().unwrap();
    let plans = ws.plan(&candidates).unwrap();
    let err = ws.score(&candidates, &plans).unwrap_err();
    match &err {
        PipelineError::Stage { stage, checkpoint, .. } => {
            assert_eq!(*stage, Stage::Score);
            assert_eq!(*checkpoint, Some(Stage::Plan));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("last completed stage: plan"));
}

#[test]
fn reopening_with_a_different_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::create(toy_config(tmp.path())).unwrap();
    ws.decode().unwrap();
    let mut changed = toy_config(tmp.path());
    changed.sampler.o = 3;
    let err = Workspace::open(changed, ws.dir.root()).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn oracle_without_ground_truth_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let queries = tmp.path().join("queries.jsonl");
    fs::write(
        &queries,
        "{\"query_id\":\"fruit\",\"seeds\":[\"f00\",\"f01\",\"f02\"]}\n",
    )
    .unwrap();
    let mut config = toy_config(tmp.path());
    config.paths.queries = queries;
    let err = Workspace::create(config).unwrap().run(&PerfectOracle).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn ablation_grid_shape_and_padding() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = toy_config(tmp.path());
    config.ranker = RankerConfig::NoisyOracle { tau: 0.2, seed: 0 };
    config.metrics.ks = vec![10];
    let grid = AblationGrid {
        ns: vec![3, 5, 7],
        os: vec![2, 5, 10],
        repeats: 5,
    };
    let report = pipeline::run_ablation(&config, &grid, &NoisyOracle::new(0.2, 0)).unwrap();
    assert_eq!(report.cells.len(), 9);
    for n in [3, 5, 7] {
        let taus: Vec<f64> = [2, 5, 10]
            .iter()
            .map(|&o| report.cell(n, o).unwrap().mean_kendall_tau.unwrap())
            .collect();
        assert!(taus.windows(2).all(|w| w[0] <= w[1]), "n={n}: {taus:?}");
    }
    // The toy queries decode 17 and 15 candidates.
    assert!(report.cell(5, 2).unwrap().padded);
    assert!(!report.cell(5, 5).unwrap().padded);
    assert!(report.to_table().contains("5   2*"));
}

#[test]
fn failing_cells_are_recorded_and_the_grid_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let config = toy_config(tmp.path());
    let grid = AblationGrid {
        ns: vec![1, 5, 40],
        os: vec![2],
        repeats: 1,
    };
    let report = pipeline::run_ablation(&config, &grid, &PerfectOracle).unwrap();
    assert!(report
        .cell(1, 2)
        .unwrap()
        .error
        .as_deref()
        .unwrap()
        .contains("sampler.n"));
    assert!(report.cell(5, 2).unwrap().error.is_none());
    // Lists longer than the candidate sets leave decoder order in place.
    let long = report.cell(40, 2).unwrap();
    assert!(long.error.is_none());
    assert_eq!(long.lists, 0);
    assert!(report.to_table().contains("failed"));
}

#[test]
fn single_cell_ablation_is_a_plain_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = toy_config(tmp.path());
    let grid = AblationGrid {
        ns: vec![5],
        os: vec![4],
        repeats: 1,
    };
    let report = pipeline::run_ablation(&config, &grid, &PerfectOracle).unwrap();
    let cell = &report.cells[0];
    let ws = Workspace::create(cell_config(&config, 5, 4, 0)).unwrap();
    let output = ws.run_detailed(&PerfectOracle).unwrap();
    assert_eq!(cell.lists as u64, output.manifest.lists);
    let mean = output.kendall_taus.iter().sum::<f64>() / output.kendall_taus.len() as f64;
    assert_eq!(cell.mean_kendall_tau, Some(mean));
    let ablate_dir = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("ablate-"))
        .unwrap();
    assert_eq!(
        read(&ablate_dir.join("n5-o4-r0"), RESULT_FILE),
        read(ws.dir.root(), RESULT_FILE)
    );
}
