use std::path::{Path, PathBuf};
use std::process::Command;

use homoglab_cli::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_homoglab"))
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
[sampler]
law = "checkerboard_two_phase"
a1 = 1.0
a2 = 4.0

[grid]
dim = 2
cells_per_unit = 2
side = 16

[seeds]
count = 24

[masks]
radii = [1.0, 2.0, 4.0]

[oscillation]
radii = [1.0, 2.0, 4.0, 8.0]

[additivity]
radii = [0.5, 1.0, 2.0]
"#;

const CONSTANT: &str = r#"
[sampler]
law = "constant"
matrix = [[2.0, 0.0], [0.0, 2.0]]

[grid]
dim = 2
cells_per_unit = 2
side = 16

[seeds]
count = 20

[masks]
radii = [1.0, 2.0, 4.0]
"#;

fn run(args: &[&str], config: &Path, out: &Path) -> std::process::Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("HOMOGLAB_CACHE")
        .output()
        .unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_parse() {
    let mut n = 0;
    for entry in std::fs::read_dir(repo_configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn field_output_is_reproducible_and_listed_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["field"], &cfg, &a).status.success());
    assert!(run(&["field"], &cfg, &b).status.success());
    let fa = read_dir_sorted(&a.join("field"));
    assert_eq!(fa, read_dir_sorted(&b.join("field")));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("field/manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    let mut written: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    written.sort();
    assert_eq!(listed, written);
}

#[test]
fn rerun_without_overwrite_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    assert!(run(&["field"], &cfg, &out).status.success());
    assert_eq!(run(&["field"], &cfg, &out).status.code(), Some(3));
    assert!(run(&["field", "--overwrite"], &cfg, &out).status.success());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), &SMALL.replace("[1.0, 2.0, 4.0]", "[1.0, 2.0, 5.0]"));
    assert_eq!(run(&["jscan"], &bad, &tmp.path().join("o")).status.code(), Some(2));
    let short = write_config(tmp.path(), &SMALL.replace("[0.5, 1.0, 2.0]", "[1.0, 2.0]"));
    assert_eq!(run(&["additivity"], &short, &tmp.path().join("o")).status.code(), Some(2));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(run(&["jscan"], &missing, &tmp.path().join("o")).status.code(), Some(2));
    // additivity needs its section
    let no_section = write_config(tmp.path(), CONSTANT);
    assert_eq!(run(&["additivity"], &no_section, &tmp.path().join("o")).status.code(), Some(2));
}

#[test]
fn constant_law_fluct_is_degenerate_not_failed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONSTANT);
    let out = tmp.path().join("o");
    let res = run(&["fluct"], &cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("fluct/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["criteria"][0]["status"], "degenerate");
    assert_eq!(summary["failed"], false);
}

#[test]
fn fluct_is_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run(&["fluct", "--workers", "1"], &cfg, &a);
    let rb = run(&["fluct", "--workers", "3"], &cfg, &b);
    // thresholds are not expected to hold on a 16-unit torus; only the
    // artifacts are compared
    for r in [&ra, &rb] {
        assert!(matches!(r.status.code(), Some(0) | Some(4)), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(ra.status.code(), rb.status.code());
    assert_eq!(read_dir_sorted(&a.join("fluct")), read_dir_sorted(&b.join("fluct")));
}

#[test]
fn report_lists_every_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    let r = run(&["additivity"], &cfg, &out);
    assert!(matches!(r.status.code(), Some(0) | Some(4)));
    let rep = run(&["report"], &cfg, &out);
    assert_eq!(rep.status.code(), r.status.code());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report/report.json")).unwrap()).unwrap();
    let criteria = doc["criteria"].as_array().unwrap();
    assert_eq!(criteria.len(), 10);
    assert_eq!(criteria[3]["command"], "additivity");
    assert_ne!(criteria[3]["status"], "not_run");
    assert_eq!(criteria[0]["status"], "not_run");
}

#[test]
fn corrector_cache_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cache = tmp.path().join("cache");
    let go = |out: &str| {
        bin()
            .args(["corrector", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(out))
            .env("HOMOGLAB_CACHE", &cache)
            .env("RUST_LOG", "info")
            .output()
            .unwrap()
    };
    let first = go("a");
    assert!(first.status.success());
    assert!(String::from_utf8_lossy(&first.stderr).contains("iterations"));
    let second = go("b");
    assert!(second.status.success());
    let log = String::from_utf8_lossy(&second.stderr);
    assert!(log.contains("cache hit") && !log.contains("solved direction"), "{log}");
    assert_eq!(read_dir_sorted(&tmp.path().join("a/corrector")), read_dir_sorted(&tmp.path().join("b/corrector")));
}
