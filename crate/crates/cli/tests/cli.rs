use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn optdisc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optdisc"))
        .args(args)
        .output()
        .expect("spawn optdisc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_small(dir: &Path, extra: &[&str], workers: &str) -> Output {
    let mut args = vec![
        "train",
        "--epochs",
        "3",
        "--paths",
        "12",
        "--log-every",
        "0",
        "--workers",
        workers,
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    optdisc(&args)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&optdisc(&["--help"])), 0);
    assert_eq!(code(&optdisc(&["--version"])), 0);
    assert_eq!(code(&optdisc(&["train", "--help"])), 0);
}

#[test]
fn unknown_subcommand_and_bad_flags_exit_one() {
    assert_eq!(code(&optdisc(&["frobnicate"])), 1);
    assert_eq!(code(&optdisc(&["train", "--K", "minus-three"])), 1);
    assert_eq!(code(&optdisc(&["train", "--embed", "--one-hot"])), 1);
}

#[test]
fn invalid_configuration_leaves_no_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["--algo", "vic", "--beta", "0.1"],
        &["--algo", "valor", "--gamma", "1.5"],
        &["--algo", "valor", "--curriculum", "--K", "4"],
        &["--algo", "valor", "--K-max", "8"],
        &["--algo", "random_reward", "--curriculum", "--K-max", "8"],
        &["--algo", "nope"],
        &["--env", "maze"],
    ];
    for (i, extra) in cases.iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        let out = train_small(&dir, extra, "1");
        assert_eq!(code(&out), 1, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!dir.exists(), "{extra:?} created {}", dir.display());
    }
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nalgo = diayn\nK = 3\nseed = 4\nepochs = 50\n").unwrap();
    let dir = tmp.path().join("run");
    let out = train_small(&dir, &["--config", cfg.to_str().unwrap()], "1");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let snapshot = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(snapshot.contains("algo = diayn"));
    assert!(snapshot.contains("seed = 4"));
    assert!(snapshot.contains("epochs = 3"), "flag overrides file: {snapshot}");
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn train_writes_manifest_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = train_small(&dir, &["--algo", "valor", "--K", "3", "--embed"], "2");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["workers"], 2);
    let artifacts: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for f in [
        "metrics.csv",
        "config.txt",
        "policy.ckpt",
        "value.ckpt",
        "decoder.ckpt",
        "summary.json",
    ] {
        assert!(artifacts.contains(&f), "{f} missing from {artifacts:?}");
        assert!(dir.join(f).exists());
    }
    assert!(manifest["config"]
        .as_array()
        .unwrap()
        .iter()
        .any(|l| l == "embed = true"));
}

#[test]
fn training_output_does_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let extra = [
        "--algo",
        "valor",
        "--curriculum",
        "--K-max",
        "5",
        "--threshold",
        "0.3",
        "--seed",
        "9",
    ];
    assert_eq!(code(&train_small(&a, &extra, "1")), 0);
    assert_eq!(code(&train_small(&b, &extra, "4")), 0);
    for f in [
        "metrics.csv",
        "config.txt",
        "policy.ckpt",
        "value.ckpt",
        "decoder.ckpt",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn evaluate_writes_scores_traces_and_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&train_small(&dir, &["--algo", "vic", "--K", "4"], "1")), 0);
    let out = optdisc(&["evaluate", "--run", dir.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let scores = fs::read_to_string(dir.join("scores.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("context_id,mean,std"));
    let means: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(means.len(), 4);
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "sorted descending: {means:?}");

    let traces = fs::read_to_string(dir.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 4 * 5);
    let first: serde_json::Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    assert_eq!(first["mode"], "deterministic");
    assert!(first["xy_points"].as_array().unwrap().len() > 2);

    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(info["score_mode"], "stochastic");
    assert_eq!(info["rollouts_per_context"], 5);
}

#[test]
fn evaluate_missing_run_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optdisc(&["evaluate", "--run", tmp.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn interpolate_needs_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let onehot = tmp.path().join("onehot");
    assert_eq!(code(&train_small(&onehot, &["--K", "3"], "1")), 0);
    let out = optdisc(&[
        "interpolate",
        "--run",
        onehot.to_str().unwrap(),
        "--from",
        "0",
        "--to",
        "1",
    ]);
    assert_eq!(code(&out), 1);

    let embed = tmp.path().join("embed");
    assert_eq!(code(&train_small(&embed, &["--K", "3", "--embed"], "1")), 0);
    let file = tmp.path().join("sweep.jsonl");
    let out = optdisc(&[
        "interpolate",
        "--run",
        embed.to_str().unwrap(),
        "--from",
        "0",
        "--to",
        "2",
        "--alphas",
        "0,0.5,1",
        "--out",
        file.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&file)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["alpha"], 0.5);
    assert_eq!(lines[1]["other_id"], 2);

    let out = optdisc(&[
        "interpolate",
        "--run",
        embed.to_str().unwrap(),
        "--from",
        "0",
        "--to",
        "7",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn klcheck_fixtures_pass_and_report_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optdisc(&["klcheck", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let report = fs::read_to_string(tmp.path().join("klcheck.txt")).unwrap();
    assert!(report.contains("line3_random"));
    assert!(report.contains("pair_deterministic"));
}

#[test]
fn klcheck_custom_mdp_and_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let mdp = tmp.path().join("m.txt");
    fs::write(
        &mdp,
        "name = ring\nstart_state = 0\nhorizon = 4\ntransition.0 = 1, 0\ntransition.1 = 0, 1\npolicy.0 = 0.25, 0.75\npolicy.1 = 0.5, 0.5\n",
    )
    .unwrap();
    let out = optdisc(&["klcheck", "--mdp", mdp.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("ring"));

    // an impossible tolerance turns the check red with the numerical exit code
    let out = optdisc(&["klcheck", "--mdp", mdp.to_str().unwrap(), "--tol", "1e-300"]);
    assert_eq!(code(&out), 2);

    fs::write(&mdp, "start_state = 0\nhorizon = 4\ntransition.0 = 3\npolicy.0 = 1\n").unwrap();
    assert_eq!(code(&optdisc(&["klcheck", "--mdp", mdp.to_str().unwrap()])), 1);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let out = optdisc(&["gradcheck", "--layer", "lstm"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("bilstm") && text.contains("worst:"));

    let out = optdisc(&["gradcheck", "--layer", "mlp", "--corrupt-backward", "tanh"]);
    assert_eq!(code(&out), 2, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));

    assert_eq!(code(&optdisc(&["gradcheck", "--layer", "no_such_case"])), 1);
}
