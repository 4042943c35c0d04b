use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/toy")
        .join(name)
}

fn setexp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setexp")).args(args).output().unwrap()
}

fn toy_args(out: &Path) -> Vec<String> {
    vec![
        "--vocab".into(),
        toy("vocab.jsonl").display().to_string(),
        "--queries".into(),
        toy("queries.jsonl").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn run(verb: &str, extra: &[&str], out: &Path) -> Output {
    let mut args: Vec<String> = vec![verb.into()];
    args.extend(toy_args(out));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    setexp(&refs)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text
        .lines()
        .find(|l| l.starts_with("run directory: "))
        .expect("run directory line");
    PathBuf::from(line.trim_start_matches("run directory: "))
}

#[test]
fn expand_then_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run("expand", &[], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("MAP@10") && text.contains("degraded: 0"));
    let dir = run_dir(&out);
    for name in [
        "plan.jsonl",
        "transcripts.jsonl",
        "result.json",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(dir.join(name).exists(), "{name}");
    }
    let result = fs::read(dir.join("result.json")).unwrap();
    fs::remove_file(dir.join("result.json")).unwrap();
    let replayed = setexp(&["replay", dir.to_str().unwrap()]);
    assert!(replayed.status.success());
    assert!(stdout(&replayed).contains("0 ranked now"));
    assert_eq!(fs::read(dir.join("result.json")).unwrap(), result);
}

#[test]
fn stage_verbs_build_a_run_step_by_step() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("staged");
    let dir_s = dir.to_str().unwrap();
    let decode = run("decode", &["--run-dir", dir_s, "-o", "4"], tmp.path());
    assert!(decode.status.success(), "{}", String::from_utf8_lossy(&decode.stderr));
    assert!(stdout(&decode).contains("fruit: 17 candidates"));
    assert!(dir.join("candidates.json").exists() && !dir.join("plan.jsonl").exists());

    // Later stages pick the configuration up from the run directory.
    for verb in ["plan", "rank", "score"] {
        let o = setexp(&[verb, "--run-dir", dir_s]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let plan = fs::read_to_string(dir.join("plan.jsonl")).unwrap();
    // 17 * 4 / 5 and 15 * 4 / 5 rounded up.
    assert_eq!(plan.lines().count(), 14 + 12);
    let eval = setexp(&["eval", "--run-dir", dir_s]);
    assert!(eval.status.success());
    assert!(stdout(&eval).contains("combined"));
    assert!(dir.join("metrics.json").exists());
}

#[test]
fn config_file_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        serde_json_text(&toy("vocab.jsonl"), &toy("queries.jsonl"), &tmp.path().join("runs")),
    )
    .unwrap();
    let out = setexp(&[
        "expand",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "sampler.o=3",
        "--set",
        "metrics.ks=[5]",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("MAP@5"));
    let manifest = fs::read_to_string(run_dir(&out).join("manifest.json")).unwrap();
    assert!(manifest.contains("\"o\": 3"));
    assert!(manifest.contains("\"n\": 4"));
}

fn serde_json_text(vocab: &Path, queries: &Path, out: &Path) -> String {
    format!(
        r#"{{"paths": {{"vocab": {:?}, "queries": {:?}, "output_dir": {:?}}}, "sampler": {{"n": 4}}}}"#,
        vocab.display().to_string(),
        queries.display().to_string(),
        out.display().to_string()
    )
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        run("expand", &["--set", "sampler.n=1"], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        run("expand", &["--set", "sampler.bogus=1"], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        run("expand", &["--noise-tau", "0.3"], tmp.path()).status.code(),
        Some(2)
    );

    let missing = setexp(&[
        "expand",
        "--vocab",
        "/nonexistent/vocab.jsonl",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("stage `load`"));

    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let degraded = run(
        "expand",
        &[
            "--ranker",
            "remote-chat",
            "--endpoint",
            &endpoint,
            "--set",
            "ranker.max_attempts=2",
            "--set",
            "ranker.backoff_base_ms=1",
        ],
        tmp.path(),
    );
    assert_eq!(degraded.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&degraded.stderr).contains("degraded"));
    assert!(run_dir(&degraded).join("manifest.json").exists());
}

#[test]
fn ablate_prints_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        "ablate",
        &[
            "--ranker",
            "noisy-oracle",
            "--noise-tau",
            "0.2",
            "--ns",
            "3,5",
            "--os",
            "2,5",
            "--ks",
            "10",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("MAP@10"));
    assert_eq!(
        text.lines().filter(|l| l.trim_start().starts_with(['3', '5'])).count(),
        4
    );
    assert!(text.contains("* padded cell"));
}
