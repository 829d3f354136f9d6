use std::path::Path;
use std::process::{Command, Output};

use hdg_cli::config::{Experiment, RunConfig, OUTPUT_DIR_ENV};
use hdg_cli::run::{CONFIG_FILE, CSV_FILE, FIELD_FILE, KAPPA_FILE, MANIFEST_FILE, MESH_FILE, VTK_FILE};

fn nsd_hdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsd-hdg")).args(args).env_remove(OUTPUT_DIR_ENV).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_round_trip_and_validation() {
    for exp in [Experiment::Example1, Experiment::Example2, Experiment::Custom] {
        let cfg = RunConfig::defaults(exp);
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }
    let text = RunConfig::defaults(Experiment::Example1).to_toml();
    assert!(RunConfig::from_toml(&format!("{text}\nunknown = 1\n")).is_err());
    assert!(RunConfig::from_toml(&text.replace("[solver]", "[solver]\nbogus = true")).is_err());

    let mut random = RunConfig::defaults(Experiment::Example2);
    random.seed = None;
    assert!(random.validate().is_err());
}

#[test]
fn convergence_writes_all_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| vec!["convergence".to_string(), "--k".into(), "1".into(), "--levels".into(), "3".into(), "--output-dir".into(), path(out).into()];
    let oa = Command::new(env!("CARGO_BIN_EXE_nsd-hdg")).args(args(&a)).output().unwrap();
    assert!(oa.status.success(), "{}", stderr(&oa));
    let ob = Command::new(env!("CARGO_BIN_EXE_nsd-hdg")).args(["--threads", "1"]).args(args(&b)).output().unwrap();
    assert!(ob.status.success(), "{}", stderr(&ob));
    for f in [CSV_FILE, FIELD_FILE, VTK_FILE, CONFIG_FILE, MANIFEST_FILE] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join(CSV_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "level,h,dofs,err_E_u,err_L2_u,err_L2_p,rate_E_u,rate_L2_u,rate_L2_p,picard_iters");
    assert_eq!(rows.iter().skip(1).filter(|r| !r.contains(",,")).count(), 2);
    for f in [CSV_FILE, FIELD_FILE, VTK_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["command"], "convergence");
    assert_eq!(manifest["config"]["k"], 1);
    assert_eq!(manifest["results"]["levels"].as_array().unwrap().len(), 3);

    // the echoed config reproduces the run and checks the stored field
    let check = nsd_hdg(&["check", "--config", path(&a.join(CONFIG_FILE)), "--field", path(&a.join(FIELD_FILE))]);
    assert!(check.status.success(), "{}", stderr(&check));
    assert!(String::from_utf8_lossy(&check.stdout).contains("conservation <= 1e-9: pass"));
}

#[test]
fn thresholds_set_the_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(Experiment::Example1);
    cfg.mesh.levels = 2;
    cfg.thresholds.min_rate_e_u = Some(5.0);
    let file = dir.path().join("strict.toml");
    std::fs::write(&file, cfg.to_toml()).unwrap();
    let o = nsd_hdg(&["convergence", "--config", path(&file), "--output-dir", path(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("threshold violated"));
}

#[test]
fn example2_small_run_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e2");
    let o = nsd_hdg(&["example2", "--n", "10", "--mu", "0.01", "--seed", "3", "--output-dir", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("200 triangles (120 porous)"), "{stdout}");
    let kappa = std::fs::read_to_string(out.join(KAPPA_FILE)).unwrap();
    let values: Vec<f64> = kappa.lines().filter(|l| !l.starts_with('#')).map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 120);
    assert!(values.iter().all(|v| (1e-8..=1e-4).contains(v)));
    let vtk = std::fs::read_to_string(out.join(VTK_FILE)).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0\n"));
    assert!(vtk.contains("CELL_DATA 200\n") && vtk.contains("SCALARS permeability double 1\n"));

    // the stored permeability can be read back as a file selector
    let check = nsd_hdg(&[
        "check", "--experiment", "example2", "--n", "10", "--mu", "0.01", "--kappa", "file", "--kappa-file", path(&out.join(KAPPA_FILE)),
        "--field", path(&out.join(FIELD_FILE)),
    ]);
    assert!(check.status.success(), "{}", stderr(&check));
    assert!(String::from_utf8_lossy(&check.stdout).contains("flux balance"));
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_nsd-hdg"))
        .args(["mesh-dump", "--n", "2"])
        .env(OUTPUT_DIR_ENV, &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join(MESH_FILE).is_file());

    let flag_dir = dir.path().join("from-flag");
    let o = Command::new(env!("CARGO_BIN_EXE_nsd-hdg"))
        .args(["mesh-dump", "--n", "2", "--output-dir", path(&flag_dir)])
        .env(OUTPUT_DIR_ENV, &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join(MESH_FILE).is_file());
}

#[test]
fn bad_input_is_an_error() {
    let o = nsd_hdg(&["example2", "--n", "12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("divisible by 5"), "{}", stderr(&o));
    let o = nsd_hdg(&["convergence", "--k", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = nsd_hdg(&["check", "--field", "/nonexistent/solution.field"]);
    assert_eq!(o.status.code(), Some(2));
}
