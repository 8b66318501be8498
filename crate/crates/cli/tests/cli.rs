use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const OU: &str = r#"seed = 1
[experiment]
kind = "ou"
a = A
x0 = 0.5
[time]
dt = 0.01
t_end = T
[noise]
q = 0.5
r = 0.01
[filter]
ensemble_size = 20
[filter.prior]
kind = "gaussian"
mean = -0.5
variance = 1.0
[output]
plots = false
"#;

fn enkbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enkbf")).args(args).output().unwrap()
}

fn write_ou(dir: &Path, name: &str, a: f64, t_end: f64) -> String {
    let text = OU.replace("A", &format!("{a:?}")).replace("T", &format!("{t_end:?}"));
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lists_and_prints_bundled_configs() {
    let list = enkbf(&["show-config"]);
    assert!(list.status.success());
    let names = stdout(&list);
    for n in ["fig1a", "fig3d", "fig4", "fig5_evidence"] {
        assert!(names.lines().any(|l| l == n), "{n} missing");
    }
    let fig1a = enkbf(&["show-config", "fig1a"]);
    assert!(stdout(&fig1a).contains("kind = \"ou\""));
    assert_eq!(enkbf(&["show-config", "fig9"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nbogus = 3\n").unwrap();
    let out = enkbf(&["filter", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let ragged = write_ou(dir.path(), "ragged.toml", -0.5, 1.005);
    assert_eq!(enkbf(&["generate", "-c", &ragged]).status.code(), Some(2));
    assert_eq!(enkbf(&["reproduce", "fig9"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_ou(dir.path(), "unstable.toml", 50.0, 100.0);
    let out_dir = dir.path().join("out");
    let out = enkbf(&["filter", "-c", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn filter_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_ou(dir.path(), "ou.toml", -0.5, 2.0);
    let out_dir = dir.path().join("run");
    let out = enkbf(&["filter", "-c", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "summary.toml", "trace.csv", "increments.csv", "ensemble_final.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 201);
    assert!(fs::read_to_string(out_dir.join("config.toml")).unwrap().contains("seed = 9"));
}

#[test]
fn filters_increments_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_ou(dir.path(), "ou.toml", -0.5, 1.0);
    let data = dir.path().join("data");
    assert!(enkbf(&["generate", "-c", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let incs = data.join("increments.csv");
    assert_eq!(fs::read_to_string(&incs).unwrap().lines().count(), 101);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let from_file = enkbf(&["filter", "-c", &cfg, "--increments", incs.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(from_file.status.success(), "{}", String::from_utf8_lossy(&from_file.stderr));
    assert!(enkbf(&["filter", "-c", &cfg, "--out", b.to_str().unwrap()]).status.success());
    // same data, same seeds: the loaded run matches the in-memory one
    assert_eq!(
        fs::read_to_string(a.join("trace.csv")).unwrap(),
        fs::read_to_string(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn evidence_over_explicit_thetas() {
    let dir = tempfile::tempdir().unwrap();
    let text = enkbf::canonical::config_text("fig5_evidence")
        .unwrap()
        .replace("t_end = 5.0", "t_end = 0.1");
    let cfg = dir.path().join("ev.toml");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("ev");
    let out = enkbf(&["evidence", "-c", cfg.to_str().unwrap(), "--thetas", "0.5,1,1.5", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = stdout(&out);
    assert_eq!(s.lines().filter(|l| l.contains('\t')).count(), 3);
    assert!(s.contains("argmax theta"));
    assert!(out_dir.join("evidence.csv").exists());
}
