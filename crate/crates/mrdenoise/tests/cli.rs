//! End-to-end tests of the command-line binary: spawn the real executable,
//! check outputs, exit codes, and the error JSON contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mrdenoise")
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(bin())
        .args(args)
        .envs(envs.iter().copied().map(|(k, v)| (k.to_owned(), v.to_owned())))
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Second CSV line of an `evaluate` run, split into fields.
fn evaluate_fields(dir: &Path, truth: &str, test: &str) -> Vec<String> {
    let out = run_in(dir, &["evaluate", "--truth", truth, "--test", test], &[]);
    assert_ok(&out, "evaluate");
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("psnr_db,ssim,rmse,roi_voxels"));
    lines
        .next()
        .expect("data row")
        .split(',')
        .map(str::to_owned)
        .collect()
}

#[test]
fn phantom_noise_denoise_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let out = run_in(dir, &["phantom", "--dims", "32", "t.vol"], &[]);
    assert_ok(&out, "phantom");
    assert!(dir.join("t.vol").exists());
    assert!(dir.join("t.vol.json").exists());

    let out = run_in(dir, &["addnoise", "--percent", "5", "t.vol", "n.vol"], &[]);
    assert_ok(&out, "addnoise");
    let reported: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!((reported["sigma_g"].as_f64().unwrap() - 12.75).abs() < 1e-12);

    let out = run_in(dir, &["estimate-noise", "n.vol"], &[]);
    assert_ok(&out, "estimate-noise");
    let est: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let sigma = est["sigma_g"].as_f64().unwrap();
    assert!(
        (sigma - 12.75).abs() / 12.75 < 0.15,
        "background estimate {sigma} too far from 12.75"
    );

    let out = run_in(
        dir,
        &["denoise", "--pipeline", "d", "n.vol", "d.vol", "--report", "r.json"],
        &[],
    );
    assert_ok(&out, "denoise");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 1);

    let noisy_psnr: f64 = evaluate_fields(dir, "t.vol", "n.vol")[0].parse().unwrap();
    let denoised_psnr: f64 = evaluate_fields(dir, "t.vol", "d.vol")[0].parse().unwrap();
    assert!(
        denoised_psnr > noisy_psnr + 3.0,
        "{denoised_psnr} dB vs {noisy_psnr} dB"
    );

    // identical volumes: infinite PSNR, perfect SSIM, zero RMSE
    let fields = evaluate_fields(dir, "t.vol", "t.vol");
    assert_eq!(fields[0], "inf");
    assert_eq!(fields[1], "1");
    assert_eq!(fields[2], "0");
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    // usage error: unknown flag
    let out = run_in(dir, &["denoise", "--bogus", "a", "b"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(&last_stderr_line(&out)).unwrap();
    assert_eq!(err["kind"], "usage");

    // usage error: invalid token order
    let out = run_in(dir, &["denoise", "--pipeline", "gd", "a.vol", "b.vol"], &[]);
    assert_eq!(out.status.code(), Some(1));

    // data error: missing input file
    let out = run_in(dir, &["denoise", "--pipeline", "d", "missing.vol", "o.vol"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(&last_stderr_line(&out)).unwrap();
    assert_eq!(err["kind"], "data");

    // numerical/estimation error: no background to split off
    let spec = r#"{"dims":[12,12,12],"profile":"t1_like","margin_fraction":0.1,
                   "primitives":[],"smooth_edges":false,"jitter_voxels":0}"#;
    std::fs::write(dir.join("flat.json"), spec).unwrap();
    let out = run_in(dir, &["phantom", "--spec", "flat.json", "flat.vol"], &[]);
    assert_ok(&out, "phantom --spec");
    let out = run_in(dir, &["estimate-noise", "flat.vol"], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_str(&last_stderr_line(&out)).unwrap();
    assert_eq!(err["kind"], "numerical");

    // --help is not an error
    let out = run_in(dir, &["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    assert_ok(&run_in(dir, &["phantom", "--dims", "24", "t.vol"], &[]), "phantom");
    assert_ok(
        &run_in(dir, &["addnoise", "--percent", "5", "t.vol", "n.vol"], &[]),
        "addnoise",
    );
    assert_ok(
        &run_in(
            dir,
            &["denoise", "--pipeline", "d", "--threads", "1", "n.vol", "one.vol"],
            &[],
        ),
        "denoise --threads 1",
    );
    // thread count via the environment variable this time
    assert_ok(
        &run_in(
            dir,
            &["denoise", "--pipeline", "d", "n.vol", "three.vol"],
            &[("MRDENOISE_THREADS", "3")],
        ),
        "denoise with MRDENOISE_THREADS=3",
    );
    let one = std::fs::read(dir.join("one.vol")).unwrap();
    let three = std::fs::read(dir.join("three.vol")).unwrap();
    assert_eq!(one, three, "outputs differ across thread counts");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    assert_ok(&run_in(dir, &["phantom", "--dims", "16", "t.vol"], &[]), "phantom");
    assert_ok(
        &run_in(dir, &["addnoise", "--percent", "5", "t.vol", "n.vol"], &[]),
        "addnoise",
    );
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"seed": 7, "denoise": {"pipeline": "dd"}}"#,
    )
    .unwrap();

    let out = run_in(
        dir,
        &["denoise", "--config", "cfg.json", "n.vol", "a.vol"],
        &[],
    );
    assert_ok(&out, "denoise from config");
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 2);

    let out = run_in(
        dir,
        &["denoise", "--config", "cfg.json", "--pipeline", "d", "n.vol", "b.vol"],
        &[],
    );
    assert_ok(&out, "denoise with override");
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 1);

    // malformed config is a usage error
    std::fs::write(dir.join("bad.json"), r#"{"denoise": {"pipelin": "d"}}"#).unwrap();
    let out = run_in(
        dir,
        &["denoise", "--config", "bad.json", "n.vol", "c.vol"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reproduce_emits_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let out = run_in(
        dir,
        &["reproduce", "table2", "--dims", "16", "--levels", "5"],
        &[],
    );
    assert_ok(&out, "reproduce table2");
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,metric,5%"));
    let methods: Vec<&str> = lines
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(methods, ["n", "d", "dd", "dg", "dgd", "dgp", "dgpp", "dgpd"]);
}

#[test]
fn tune_grid_emits_ranked_csv() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let out = run_in(
        dir,
        &["tune", "--mode", "grid", "--dims", "16", "--grid", "2.0,2.46"],
        &[],
    );
    assert_ok(&out, "tune grid");
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rank,d,m,w,tau_beta,t,objective"));
    let first = lines.next().expect("one ranked row");
    assert!(first.starts_with("1,3,27,3,"), "row was {first}");
    assert_eq!(lines.count(), 1);
}

#[test]
fn denoise_accepts_parameter_files() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    assert_ok(&run_in(dir, &["phantom", "--dims", "16", "t.vol"], &[]), "phantom");
    assert_ok(
        &run_in(dir, &["addnoise", "--percent", "5", "t.vol", "n.vol"], &[]),
        "addnoise",
    );
    std::fs::write(
        dir.join("nl.json"),
        r#"{"d": 3, "m": 27, "w": 3, "grouping": "similar-to-center"}"#,
    )
    .unwrap();
    let out = run_in(
        dir,
        &[
            "denoise",
            "--pipeline",
            "d",
            "--nlpca",
            "nl.json",
            "n.vol",
            "o.vol",
        ],
        &[],
    );
    assert_ok(&out, "denoise --nlpca");

    // infeasible parameter file is a usage error
    std::fs::write(dir.join("bad.json"), r#"{"d": 3, "m": 5}"#).unwrap();
    let out = run_in(
        dir,
        &[
            "denoise",
            "--pipeline",
            "d",
            "--nlpca",
            "bad.json",
            "n.vol",
            "o.vol",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn limit_beats_standard_chain() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    assert_ok(&run_in(dir, &["phantom", "--dims", "24", "t.vol"], &[]), "phantom");
    assert_ok(
        &run_in(dir, &["addnoise", "--percent", "5", "t.vol", "n.vol"], &[]),
        "addnoise",
    );
    let out = run_in(
        dir,
        &["limit", "--truth", "t.vol", "--percent", "5", "n.vol", "ceil.vol"],
        &[],
    );
    assert_ok(&out, "limit");
    let ceiling: f64 = stdout(&out)
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let noisy: f64 = evaluate_fields(dir, "t.vol", "n.vol")[0].parse().unwrap();
    assert!(ceiling > noisy + 5.0, "{ceiling} dB vs noisy {noisy} dB");
    // the ceiling is not the truth itself
    let rmse: f64 = evaluate_fields(dir, "t.vol", "ceil.vol")[2].parse().unwrap();
    assert!(rmse > 0.0);
}
