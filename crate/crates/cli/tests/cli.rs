use std::path::Path;
use std::process::Command;
use twoscale::report::{read_manifest, sha256_hex, MANIFEST};

fn run(dir: &Path, config: &str, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("run.ini");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

const SMALL: &str = "[geometry]\ncell_res = 16\nmacro_n = 4\n[experiment]\nepsilon = [1/2, 1/3]\nk = 3\n";

#[test]
fn cell_mesh_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), SMALL, &["cell-mesh"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_manifest(&dir.path().join("out").join(MANIFEST)).unwrap();
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.file.as_str()).collect();
    assert_eq!(names, ["cell_mesh.json", "cell_mesh.txt", "config.ini"]);
    for a in &m.artifacts {
        assert_eq!(sha256_hex(&std::fs::read(dir.path().join("out").join(&a.file)).unwrap()), a.sha256);
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), "[geometry]\nradius = 0.2\n", &["cell-mesh"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), "[experiment]\nepsilon = [0.3]\n", &["cell-mesh"]).status.code(), Some(2));
    let out = run(dir.path(), "[experiment]\nf1 = sin(y1 +\n", &["cell-mesh"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn solver_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[geometry]\ndomain = [0, 0, 1, 0.5]\n[experiment]\nepsilon = [1/3]\n";
    assert_eq!(run(dir.path(), cfg, &["eps-eigs"]).status.code(), Some(3));
}

#[test]
fn chom_is_byte_identical_across_deterministic_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(d.path(), SMALL, &["--deterministic", "chom"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ma = read_manifest(&a.path().join("out").join(MANIFEST)).unwrap();
    let mb = read_manifest(&b.path().join("out").join(MANIFEST)).unwrap();
    let chom = |m: &twoscale::report::Manifest| m.artifacts.iter().find(|x| x.file == "chom.json").unwrap().sha256.clone();
    assert_eq!(chom(&ma), chom(&mb));
    assert_eq!(ma, mb);
}

#[test]
fn sweep_has_one_row_per_eps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), SMALL, &["--deterministic", "--workers", "2", "sweep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    let csv = std::fs::read_to_string(o.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    for f in ["run_1_2.json", "run_1_3.json", "spectra.svg", "limit_spectrum.csv", MANIFEST] {
        assert!(o.join(f).exists(), "{f}");
    }
}

#[test]
fn eps_solve_reports_the_distance() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), SMALL, &["eps-solve", "--inverse-eps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("l2 macro error"), "{stdout}");
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out").join("run_1_2.json")).unwrap()).unwrap();
    assert!(run["energy"]["defect"].as_f64().unwrap() < 1e-8);
}

#[test]
fn help_lists_the_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_twoscale")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("inclusion_mu_scale"));
    for sub in ["cell-mesh", "chom", "stokes-eigs", "limit-spectrum", "macro-eigs", "eps-solve", "eps-eigs", "sweep", "check"] {
        assert!(text.contains(sub), "{sub}");
    }
}
