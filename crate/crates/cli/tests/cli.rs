use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbmoment"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scales_for_a_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["scales", "fig1-dashed"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("rb2") && out.contains("regime"));
}

#[test]
fn config_errors_exit_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(tmp.path(), "bad.cfg", "preset = fig3\nbeam.colour = red\n");
    let o = run(&["scales", &c], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("line 2") && e.contains("beam.colour"), "{e}");

    let c = config(tmp.path(), "empty.cfg", "preset = fig3\nsweep.radii =\n");
    assert_eq!(run(&["sweep", &c], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["scales", "no-such-file.cfg"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["gamma4", "fig3", "--r", "0", "--rp", "0,0"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["sweep", "fig3", "--mode", "sideways"], tmp.path()).status.code(), Some(2));
}

#[test]
fn gamma4_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gamma4", "fig3", "--mode", "frozen,asymptotic", "--r", "0.01,0", "--rp", "-0.01,0"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    // Frozen quadrature and the closed form agree.
    assert!((rows[0][2] - rows[1][2]).abs() < 1e-6 * rows[1][2]);
}

#[test]
fn asymptotic_sweep_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(
        tmp.path(),
        "a.cfg",
        "preset = fig3\nname = quick\nrun.modes = asymptotic, frozen\nsweep.radii_w = 0.01, 0.1, 1\n",
    );
    let out = tmp.path().join("out");
    let args = ["sweep", &c, "--out-dir", out.to_str().unwrap(), "--svg", "log-log", "--seed", "11"];
    let o = run(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = fs::read(out.join("quick-sweep.csv")).unwrap();
    assert!(out.join("quick-sweep.svg").exists());
    let o = run(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(out.join("quick-sweep.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("# seed: 11"));
    assert!(text.lines().filter(|l| l.starts_with('#')).count() >= 4);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
}

#[test]
fn full_sweep_uses_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(
        tmp.path(),
        "f.cfg",
        "preset = fig3-weak\nname = full\nrun.modes = full\nsweep.radii_w = 0.05, 0.5\n",
    );
    let out = tmp.path().join("out");
    let o = run(&["cache", "build", &c, "--out-dir", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("built"));
    let o = run(&["cache", "build", &c, "--out-dir", out.to_str().unwrap()], tmp.path());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("cached"));

    let o = run(&["sweep", &c, "--out-dir", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("full-sweep.csv")).unwrap();
    assert!(text.contains("# calibration.full: flux"));
    assert!(text.contains("# kernel_asymptote:"));

    let o = run(&["cache", "clear", &c, "--out-dir", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("removed 1"));
}

#[test]
fn failed_points_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(
        tmp.path(),
        "p.cfg",
        "preset = fig3\nname = part\nrun.modes = frozen\nsweep.radii_w = 0.01, 1\nquad.aperture_rel_tol = 1e-15\nquad.aperture_max_subdivisions = 1\n",
    );
    let o = run(&["sweep", &c, "--out-dir", "."], tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("part-sweep.csv")).unwrap();
    assert!(text.contains("# failed.frozen:"));
}

#[test]
fn numerical_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(
        tmp.path(),
        "n.cfg",
        "preset = fig3\nrun.modes = full\nkernel.initial_nodes = 9\nkernel.max_nodes = 9\nkernel.probe_tol = 1e-12\nkernel.cache_dir = none\n",
    );
    let o = run(&["cache", "build", &c], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn rytov_sweep_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(
        tmp.path(),
        "r.cfg",
        "preset = fig4\nname = ry\nrun.modes = asymptotic\nrytov.values = 2, 20\n",
    );
    let o = run(&["rytov-sweep", &c, "--out-dir", ".", "--svg", "linear"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("ry-rytov.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3);
    assert!(fs::read_to_string(tmp.path().join("ry-rytov.svg")).unwrap().contains("Rytov variance"));
}
