use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gridfree::io::{read_pfm, read_texture_csv};
use gridfree_cli::{run, CliError, RunOptions};

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p
}

fn serial(out: &Path) -> RunOptions {
    RunOptions {
        seed: None,
        threads: Some(1),
        out: Some(out.to_path_buf()),
    }
}

const POISSON: &str = r#"
command = "solve"
[pde]
kind = "poisson"
[domain]
preset = "unit-disk"
[grid]
resolution = 12
walks = 16
"#;

#[test]
fn solve_writes_images_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), POISSON);
    let out = dir.path().join("out");
    let s = run(&cfg, &serial(&out)).unwrap();
    for f in ["solution.pfm", "standard_error.pfm", "stats.csv", "summary.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(s.files.len(), 5);
    let img = read_pfm(&out.join("solution.pfm")).unwrap();
    assert_eq!((img.width, img.height), (12, 12));
    assert!(img.is_finite());
    // Center pixels approach u(0) = 1/4.
    let center = img.data[6 * 12 + 6];
    assert!((center - 0.25).abs() < 0.05, "{center}");
    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert!(stats.starts_with("x,y,mean,standard_error,mean_steps\n"));
    // No temporaries left behind.
    assert!(fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn screened_solution_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
command = "solve"
[pde]
kind = "screened"
[domain]
preset = "disk-with-obstacles"
[fields.screening]
type = "constant"
value = 10.0
[fields.source]
type = "preset"
name = "source"
resolution = 8
[boundary]
type = "linear"
gradient = [1.0, 0.0]
offset = 0.5
[grid]
resolution = 16
walks = 8
"#;
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("o");
    run(&cfg, &serial(&out)).unwrap();
    assert!(read_pfm(&out.join("solution.pfm")).unwrap().is_finite());
    assert!(read_pfm(&out.join("standard_error.pfm")).unwrap().is_finite());
}

#[test]
fn manifest_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), POISSON);
    let out = dir.path().join("out");
    run(&cfg, &RunOptions { seed: Some(77), ..serial(&out) }).unwrap();
    let m = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let parsed = gridfree_cli::ExperimentConfig::parse(&m).unwrap();
    assert_eq!(parsed.seed, 77);
    // Domain diameter is the bounding-box diagonal of the unit disk.
    let eps = parsed.pde.epsilon.unwrap();
    assert!((eps - 2e-3 * 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(parsed.pde.max_steps, 10_000);
    assert_eq!(parsed.grid.margin, 0.02);
    assert_eq!(parsed.validate.batches, 10);
    assert_eq!(parsed.optimize.step_size, 2e-2);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), POISSON);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run(&cfg, &serial(&a)).unwrap();
    run(&cfg, &serial(&b)).unwrap();
    run(&cfg, &RunOptions { threads: Some(2), ..serial(&c) }).unwrap();
    for f in ["solution.pfm", "standard_error.pfm", "stats.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let d = dir.path().join("d");
    run(&cfg, &RunOptions { seed: Some(2), ..serial(&d) }).unwrap();
    assert_ne!(fs::read(a.join("stats.csv")).unwrap(), fs::read(d.join("stats.csv")).unwrap());
}

#[test]
fn validate_grad_writes_per_texel_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
command = "validate-grad"
[pde]
kind = "screened"
[domain]
preset = "unit-disk"
[fields.screening]
type = "constant"
value = 10.0
[fields.source]
type = "preset"
name = "source"
resolution = 4
[grid]
resolution = 8
[validate]
param = "source"
walks_per_batch = 20
batches = 4
"#;
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("v");
    run(&cfg, &serial(&out)).unwrap();
    let csv = fs::read_to_string(out.join("gradient_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("status = PASS"));
    let g = read_texture_csv(&out.join("gradient_source.csv")).unwrap();
    assert!(g.values().iter().all(|v| *v > 0.0));
}

#[test]
fn failed_validation_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    // A huge finite-difference step on the nonlinear screening dependence.
    let text = r#"
command = "validate-grad"
[pde]
kind = "screened"
[domain]
preset = "unit-disk"
[fields.screening]
type = "constant"
value = 10.0
[grid]
resolution = 6
[validate]
param = "screening-scalar"
walks_per_batch = 20
batches = 4
relative_step = 0.9
"#;
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join("v");
    let e = run(&cfg, &serial(&out)).unwrap_err();
    assert!(matches!(e, CliError::ValidationFailed(_)));
    assert_eq!(e.exit_code(), 3);
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("status = FAIL"));
}

const OPTIMIZE: &str = r#"
command = "optimize"
[pde]
kind = "screened"
[domain]
preset = "unit-disk"
[fields.screening]
type = "constant"
value = 1.0
[fields.source]
type = "uniform"
value = 1.0
resolution = 4
[grid]
resolution = 8
walks = 16
[optimize]
params = ["source"]
iterations = 6
snapshot_every = 3
"#;

#[test]
fn optimize_writes_loss_history_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{OPTIMIZE}[optimize.target.source]\ntype = \"preset\"\nname = \"source\"\nresolution = 4\n");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("opt");
    run(&cfg, &serial(&out)).unwrap();
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 6);
    for f in [
        "source_target.pfm",
        "source_initial.csv",
        "source_0003.pfm",
        "gradient_source_0006.pfm",
        "source_final.csv",
        "reference.pfm",
        "final_solution.pfm",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

fn gradient_rms(path: &Path) -> f64 {
    let img = read_pfm(path).unwrap();
    (img.data.iter().map(|v| v * v).sum::<f64>() / img.data.len() as f64).sqrt()
}

#[test]
fn zero_loss_gradient_is_noise() {
    let dir = tempfile::tempdir().unwrap();
    // Target equals the initial guess.
    let zero = format!("{OPTIMIZE}[optimize.target.source]\ntype = \"uniform\"\nvalue = 1.0\nresolution = 4\n");
    let far = format!("{OPTIMIZE}[optimize.target.source]\ntype = \"uniform\"\nvalue = 3.0\nresolution = 4\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&write_config(dir.path(), &zero), &serial(&a)).unwrap();
    run(&write_config(dir.path(), &far), &serial(&b)).unwrap();
    let (g0, g1) = (gradient_rms(&a.join("gradient_source_0003.pfm")), gradient_rms(&b.join("gradient_source_0003.pfm")));
    assert!(g0 < 0.05 * g1, "{g0} vs {g1}");
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridfree"))
}

#[test]
fn negative_epsilon_exits_with_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &POISSON.replace("kind = \"poisson\"", "kind = \"poisson\"\nepsilon = -1e-3"));
    let o = binary().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pde.epsilon"));
}

#[test]
fn binary_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), POISSON);
    let out = dir.path().join("cli-out");
    let o = binary()
        .args(["run", cfg.to_str().unwrap(), "--seed", "3", "--threads", "1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("solution.pfm").exists());
}

#[test]
fn bad_invocations() {
    let o = binary().args(["run"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = binary().args(["run", "/nonexistent/config.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "command = \"solve\"\n[pde]\nkind = \"heat\"\n");
    let o = binary().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solver_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    // Every walk hits the step limit.
    let cfg = write_config(dir.path(), &POISSON.replace("kind = \"poisson\"", "kind = \"poisson\"\nmax_steps = 1"));
    let o = binary().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("x")).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_none_or(|x| x != "toml") {
            continue;
        }
        let c = gridfree_cli::ExperimentConfig::load(&p).unwrap();
        c.check().unwrap();
        c.build_problem(&dir).unwrap();
        if c.command == gridfree_cli::config::Command::Optimize {
            c.build_target(&dir).unwrap();
        }
        n += 1;
    }
    assert_eq!(n, 3);
}
