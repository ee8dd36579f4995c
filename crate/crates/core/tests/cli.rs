use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bsctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsctl")).args(args).output().expect("bsctl runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("bsctl-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn payload(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("result.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap()["payload"].clone()
}

#[test]
fn unknown_dipole_exits_2_without_outputs() {
    let d = scratch("unknown");
    let cfg = config(&d, "dipole = \"x_cubed\"\n");
    let out = d.join("out");
    let o = bsctl(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown dipole"));
    assert!(!out.exists());
}

#[test]
fn unknown_key_and_bad_values_exit_2() {
    let d = scratch("badkey");
    for body in ["colour = 3\n", "tol = -1.0\n", "n = 1\n", "control = \"noise\"\n"] {
        let cfg = config(&d, body);
        let o = bsctl(&["simulate", "--config", &cfg, "--out", d.join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
    let cfg = config(&d, "dipole = \"x_minus_half\"\nn = 8\nt = 2.0\n");
    let o = bsctl(&["synthesize", "--config", &cfg, "--out", d.join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn free_evolution_keeps_ground_state() {
    let d = scratch("free");
    let cfg = config(&d, "n = 16\ncells = 200\ncontrol = \"zero\"\n");
    let o = bsctl(&["simulate", "--config", &cfg, "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("final_state.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,re,im,abs"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((first[3] - 1.0).abs() < 1e-12);
    let traj = fs::read_to_string(d.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,re_c1,im_c1,re_c2"));
    assert!(d.join("timing.json").exists());
}

#[test]
fn seeded_runs_are_byte_identical() {
    let d = scratch("seed");
    let cfg = config(&d, "n = 12\ncells = 300\ncontrol = \"random\"\namplitude = 0.5\n");
    let run = |seed: &str, sub: &str| {
        let out = d.join(sub);
        let o = bsctl(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed, "--threads", "2"]);
        assert!(o.status.success());
        (fs::read(out.join("result.json")).unwrap(), fs::read(out.join("trajectory.csv")).unwrap())
    };
    let a = run("7", "a");
    let b = run("7", "b");
    let c = run("8", "c");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = scratch("threads");
    let cfg = config(&d, "dipole = \"x_minus_half\"\ngrid_cells = 64\nj_max = 64\nsine_modes = 16\nt_points = 6\n");
    let files: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|th| {
            let out = d.join(format!("t{th}"));
            let o = bsctl(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", th]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            fs::read(out.join("result.json")).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
}

#[test]
fn synthesize_zero_target_gives_empty_plan() {
    let d = scratch("zero");
    let cfg = config(&d, "dipole = \"two_lost\"\nn = 8\nt = 0.65\nt2_min = 0.0842\nz = [0.0, 0.0, 0.0]\n");
    let o = bsctl(&["synthesize", "--config", &cfg, "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = payload(&d);
    assert_eq!(p["plan"]["blocks"].as_array().unwrap().len(), 0);
    let u = fs::read_to_string(d.join("control.csv")).unwrap();
    assert!(u.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() == 0.0));
}

#[test]
fn forms_reports_series_comparison() {
    let d = scratch("forms");
    let cfg = config(&d, "control = \"v_plus\"\ncells = 4000\nn = 500\nj_max = 500\nk = 1\n");
    let o = bsctl(&["forms", "--config", &cfg, "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = payload(&d);
    assert!(p["series_comparison"]["relative_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(p["classification"]["order"], "order2");
}

#[test]
fn sweep_writes_lambda_table() {
    let d = scratch("sweep");
    let cfg = config(&d, "n = 8\ngrid_cells = 64\nj_max = 64\nsine_modes = 16\nt_min = 0.05\nt_max = 0.7\nt_points = 14\n");
    let o = bsctl(&["sweep", "--config", &cfg, "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(csv.lines().next(), Some("t,lambda,top_h10"));
    assert_eq!(rows.len(), 14);
    assert!((rows[0][0] - 0.05).abs() < 1e-12 && (rows[13][0] - 0.7).abs() < 1e-12);
    assert!(rows[0][1] > 0.0 && rows[13][1] < 0.0);
}

#[test]
fn numerical_failure_exits_1() {
    let d = scratch("numfail");
    // A dipole coupling φ₁ to itself has no k = 1 minimal-time problem.
    let cfg = config(&d, "dipole = \"x_squared\"\nn = 8\ngrid_cells = 32\nj_max = 32\nsine_modes = 8\n");
    let out = d.join("out");
    let o = bsctl(&["mintime", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}
