#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iqdet::gridops::FeatureGrid;
use iqdet::io::{self, Tensor};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_iqdet")
}

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub const GOLDEN_SEED: &str = "11";
pub const VIZ_RESOLUTION: &str = "32";
pub const VIZ_SEED: &str = "5";

fn feature_grid(channels: usize, n: usize, stride: f64, phase: f64) -> FeatureGrid<f64> {
    FeatureGrid::from_fn(channels, n, n, stride, |c, i, j| {
        (0.7 * c as f64 + 0.3 * i as f64 + 0.5 * j as f64 + phase).sin()
    })
    .expect("valid grid")
}

/// Writes the checked-in golden inputs. Only used when blessing.
pub fn write_golden_inputs(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let tensors: Vec<Tensor> = vec![
        io::grid_to_tensor("P3", &feature_grid(4, 8, 8.0, 0.0)).unwrap(),
        io::grid_to_tensor("P4", &feature_grid(4, 4, 16.0, 1.3)).unwrap(),
    ];
    io::write_tensor_file(&dir.join("features.iqt"), &tensors).unwrap();
    fs::write(
        dir.join("annotations.json"),
        r#"{
  "image_size": [64, 64],
  "instances": [
    {"box": [6, 9, 40, 33], "class": 0},
    {"box": [30, 28, 58, 61], "class": 1},
    {"box": [2.5, 40, 20, 62.25], "class": 0}
  ]
}
"#,
    )
    .unwrap();
    fs::write(
        dir.join("gmm.json"),
        r#"{"mu": [[0.25, -0.1], [-0.4, 0.35]], "sigma": [[0.4, 0.6], [0.3, 0.25]], "pi": [0.9, 0.5]}
"#,
    )
    .unwrap();
    fs::write(dir.join("assign.cfg"), "# golden assignment\nlevels = P3:8,P4:16\ngmm = gmm.json\ndraws_per_level = 20\ntop_k = 12\n")
        .unwrap();
}

/// Runs the golden commands, writing into `out`.
pub fn run_golden(out: &Path) -> Result<(), String> {
    let f = fixtures();
    let check = |o: Output| {
        if o.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&o.stderr).into_owned())
        }
    };
    check(run([
        "assign".as_ref(),
        f.join("features.iqt").as_os_str(),
        f.join("annotations.json").as_os_str(),
        "--config".as_ref(),
        f.join("assign.cfg").as_os_str(),
        "--seed".as_ref(),
        GOLDEN_SEED.as_ref(),
        "--out".as_ref(),
        out.join("assignment.json").as_os_str(),
    ]))?;
    check(run([
        "viz".as_ref(),
        f.join("gmm.json").as_os_str(),
        "--resolution".as_ref(),
        VIZ_RESOLUTION.as_ref(),
        "--seed".as_ref(),
        VIZ_SEED.as_ref(),
        "--out".as_ref(),
        out.join("viz").as_os_str(),
    ]))
}

pub const GOLDEN_OUTPUTS: [&str; 3] = ["assignment.json", "viz.pgm", "viz.ppm"];

/// Compares fresh outputs against the expected files; returns the names
/// that differ.
pub fn golden_mismatches() -> Result<Vec<String>, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_golden(tmp.path())?;
    let expected = fixtures().join("expected");
    Ok(GOLDEN_OUTPUTS
        .iter()
        .filter(|name| fs::read(tmp.path().join(name)).ok() != fs::read(expected.join(name)).ok())
        .map(|s| s.to_string())
        .collect())
}
