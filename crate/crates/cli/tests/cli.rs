use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use psopt_cli::validate_run_json;

fn psopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psopt")).args(args).env_remove("PSOPT_LOG").output().expect("binary runs")
}

fn run_in(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    psopt(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(out: &str, key: &str) -> String {
    out.lines().find_map(|l| l.strip_prefix(key)).unwrap_or_else(|| panic!("no {key} in {out}")).trim().to_string()
}

fn lq_text() -> String {
    let o = psopt(&["catalog", "lq"]);
    assert_eq!(o.status.code(), Some(0));
    stdout(&o)
}

#[test]
fn lq_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["--catalog", "lq", "--n0", "8", "--nmax", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(field(&out, "status"), "Converged");
    let cost: f64 = field(&out, "cost").parse().unwrap();
    assert!((cost - 0.5).abs() <= 1e-8, "cost {cost}");

    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x_0,u_0,lambda_0,H");
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(!csv.contains('\r'));
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((v[2] - 1.0).abs() < 1e-8 && (v[3] + 1.0).abs() < 1e-8 && (v[4] + 0.5).abs() < 1e-8, "{line}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("events.csv")).unwrap().lines().count(), 3);
    let vnv = fs::read_to_string(dir.path().join("vnv.txt")).unwrap();
    assert!(vnv.trim_end().ends_with("overall: pass"), "{vnv}");
    assert!(fs::read_to_string(dir.path().join("vnv_traces.csv")).unwrap().starts_with("t,H,lambda_0"));

    let report = validate_run_json(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!((report.status.as_str(), report.exit_code, report.degree), ("Converged", 0, 8));
    assert!(report.vnv.unwrap().passed);
}

#[test]
fn robot_run_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["--catalog", "robot"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let h: f64 = field(&out, "mean H").parse().unwrap();
    assert!((h + 1.0).abs() <= 0.05, "mean H {h}");
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|c| c.starts_with("lambda_")).count(), 3);
    assert_eq!(header.iter().filter(|c| c.starts_with("mu_")).count(), 4);
    let report = validate_run_json(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert!(report.tf > 9.0 && report.tf < 13.0, "tf {}", report.tf);
}

#[test]
fn same_seed_gives_identical_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(run_in(d.path(), &["--catalog", "lq", "--seed", "11", "--nmax", "32"]).status.code(), Some(0));
    }
    for f in ["solution.csv", "events.csv", "vnv.txt", "run.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn problem_file_settings_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.toml");
    fs::write(&path, lq_text() + "\n[solver]\nn0 = 4\nn_max = 4\n").unwrap();
    let out = dir.path().join("out");
    let o = psopt(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-vnv"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("solution.csv")).unwrap().lines().count(), 1 + 5);
    assert!(!out.join("vnv.txt").exists());
    let report = validate_run_json(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(report.vnv.is_none());

    // A flag beats the file.
    let o = psopt(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--nmax", "8", "--n0", "8"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("solution.csv")).unwrap().lines().count(), 1 + 9);
}

#[test]
fn contradictory_events_exit_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, lq_text().replace("e = [\"x0[0]\", \"xf[0]\"]", "e = [\"x0[0]\", \"x0[0]\"]")).unwrap();
    let o = run_in(&dir.path().join("out"), &[path.to_str().unwrap(), "--no-vnv"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(field(&stdout(&o), "status"), "Infeasible");
    let report = validate_run_json(&fs::read_to_string(dir.path().join("out/run.json")).unwrap()).unwrap();
    assert_eq!(report.exit_code, 3);
}

#[test]
fn usage_and_configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = run_in(dir.path(), &[missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read problem file"));

    assert_eq!(run_in(dir.path(), &["--catalog", "nope"]).status.code(), Some(1));
    assert_eq!(run_in(dir.path(), &["--catalog", "lq", "--n0", "64", "--nmax", "8"]).status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, lq_text().replace("tf = [1.0, 1.0]", "tf = [2.0, 1.0]")).unwrap();
    let o = run_in(dir.path(), &[bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = psopt(&["doctor", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("InvertedBounds"), "{}", stdout(&o));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, lq_text().replace("[dynamics]", "[dynamix]")).unwrap();
    assert_eq!(run_in(dir.path(), &[typo.to_str().unwrap()]).status.code(), Some(1));
    assert!(!dir.path().join("solution.csv").exists());
}

#[test]
fn catalog_listing() {
    let o = psopt(&["catalog"]);
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), ["lq", "robot"]);
    let o = psopt(&["doctor", "--catalog", "robot"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no findings"));
}
