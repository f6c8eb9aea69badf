use std::io::Write;
use std::process::{Command, Output, Stdio};

fn dpguard(args: &[&str], stdin: &str, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpguard"));
    cmd.args(args)
        .env_remove("DPGUARD_EPSILON")
        .env_remove("DPGUARD_SEED")
        .envs(env.iter().copied())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn().unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(stdin.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scores_of(line: &str) -> Vec<f64> {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

#[test]
fn defends_two_class_example() {
    let out = dpguard(
        &["--epsilon", "2", "--m", "5", "--seed", "7", "defend"],
        "{\"scores\":[0.2,0.8]}\n",
        &[],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    let z = scores_of(text.lines().next().unwrap());
    assert!(z[1] > z[0]);
    assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn empty_input_gives_empty_output() {
    let out = dpguard(&["--epsilon", "1", "--seed", "1", "defend"], "", &[]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_line_reported_and_stream_continues() {
    let input = "{\"scores\":[0.3,0.6]}\nnot json\n{\"record_id\":\"r\",\"scores\":[0.5,0.5]}\n";
    let out = dpguard(&["--epsilon", "1", "--seed", "1", "defend"], input, &[]);
    assert!(out.status.success());
    let lines: Vec<_> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("{\"line\":1,\"error\":\"invalid_vector\""));
    assert!(lines[1].contains("\"error\":\"parse_error\""));
    assert!(lines[2].starts_with("{\"record_id\":\"r\",\"scores\":"));
    let side = String::from_utf8(out.stderr).unwrap();
    assert!(side.contains("record 1: invalid_vector"));
    assert!(side.contains("record 2: parse_error"));
    assert!(!side.contains("0.3") && !side.contains("0.6"));
}

#[test]
fn output_is_reproducible_under_a_seed() {
    let input: String = (0..50)
        .map(|i| {
            let a = 0.01 + i as f64 / 100.0;
            format!("{{\"scores\":[{a},{},0.25]}}\n", 0.75 - a)
        })
        .collect();
    let args = ["--epsilon", "0.7", "--seed", "99", "defend"];
    let a = dpguard(&args, &input, &[]);
    let b = dpguard(&args, &input, &[]);
    assert_eq!(a.stdout, b.stdout);
    let c = dpguard(
        &["--epsilon", "0.7", "--seed", "100", "defend"],
        &input,
        &[],
    );
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn csv_stream() {
    let input = "record_id,s1,s2,s3\na,0.1,0.2,0.7\n,0.5,0.25,0.25\nc,0.5,0.5,0.5\n";
    let out = dpguard(
        &["--epsilon", "1", "--seed", "3", "--format", "csv", "defend"],
        input,
        &[],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<_> = text.lines().collect();
    assert_eq!(
        rows[0],
        "record_id,s1,s2,s3,epsilon_used,budget_remaining,error"
    );
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("a,0."));
    assert!(rows[1].ends_with(",1,unlimited,"));
    assert_eq!(rows[3], "c,,,,,,invalid_vector");
}

#[test]
fn budget_denies_repeats_in_batch() {
    let input = "{\"record_id\":\"x\",\"scores\":[0.2,0.8]}\n".repeat(3);
    let out = dpguard(
        &[
            "--epsilon",
            "0.5",
            "--seed",
            "1",
            "--budget-total-epsilon",
            "1.0",
            "--num-classes",
            "2",
            "defend",
        ],
        &input,
        &[],
    );
    assert!(out.status.success());
    let lines: Vec<_> = stdout(&out).lines().map(str::to_string).collect();
    assert!(lines[0].contains("\"budget_remaining\":0"));
    assert!(lines[1].contains("budget_exhausted") && lines[2].contains("budget_exhausted"));
}

#[test]
fn flags_beat_environment() {
    let input = "{\"scores\":[0.2,0.8]}\n";
    let env_only = dpguard(
        &["defend"],
        input,
        &[("DPGUARD_EPSILON", "3"), ("DPGUARD_SEED", "5")],
    );
    assert!(env_only.status.success());
    assert!(stdout(&env_only).contains("\"epsilon_used\":3"));
    let flag = dpguard(
        &["--epsilon", "2", "defend"],
        input,
        &[("DPGUARD_EPSILON", "3"), ("DPGUARD_SEED", "5")],
    );
    assert!(stdout(&flag).contains("\"epsilon_used\":2"));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dpguard.toml");
    std::fs::write(&path, "[mechanism]\nepsilon = 1.5\nseed = 2\n").unwrap();
    let out = dpguard(
        &["--config", path.to_str().unwrap(), "defend"],
        "{\"scores\":[0.2,0.8]}\n",
        &[],
    );
    assert!(out.status.success());
    assert!(stdout(&out).contains("\"epsilon_used\":1.5"));
}

#[test]
fn malformed_config_exits_one() {
    let out = dpguard(&["defend"], "", &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = dpguard(&["--epsilon=-1", "defend"], "", &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = dpguard(&["--epsilon", "abc", "defend"], "", &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn calibrate_reports_fixed_point() {
    let out = dpguard(
        &["calibrate", "--y", "0.3,0.7", "--y-prime", "0.4,0.9"],
        "",
        &[],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let star: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("epsilon_star="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((star - 3.3892).abs() < 1e-3);
    assert!(text.contains("eps_confident=") && text.contains("eps_unconfident="));
}

#[test]
fn calibrate_recovers_constructed_budget() {
    // y = normalize(<0.1, 0.5, 0.8>, 2.5)
    let yp = [0.1f64, 0.5, 0.8];
    let w: Vec<f64> = yp.iter().map(|x| (1.25 * x).exp()).collect();
    let t: f64 = w.iter().sum();
    let y: Vec<String> = w.iter().map(|x| format!("{:.17}", x / t)).collect();
    let out = dpguard(
        &[
            "calibrate",
            "--json",
            "--y",
            &y.join(","),
            "--y-prime",
            "0.1,0.5,0.8",
        ],
        "",
        &[],
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["epsilon_star"].as_f64().unwrap() - 2.5).abs() < 1e-6);
}

#[test]
fn calibrate_degenerate_fails() {
    let out = dpguard(
        &["calibrate", "--y", "0.5,0.5", "--y-prime", "0.5,0.5"],
        "",
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("constant"));
}

#[test]
fn evaluate_prints_report() {
    let out = dpguard(
        &[
            "--epsilon",
            "1",
            "--seed",
            "1",
            "evaluate",
            "--k",
            "4",
            "--n-members",
            "200",
            "--n-nonmembers",
            "200",
        ],
        "",
        &[],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("argmax_preservation_rate=1\n"));
    assert!(text.contains("attack_accuracy_before="));
}
