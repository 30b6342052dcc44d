#![allow(dead_code)]

use dpe::trajectory::{Trajectory, TrajectoryDataset};
use proptest::prelude::*;

/// Finite values of moderate magnitude.
pub fn finite() -> impl Strategy<Value = f64> {
    -50.0f64..50.0
}

/// A trajectory with `len` steps of the given dimensions.
pub fn trajectory(len: usize, ds: usize, da: usize) -> impl Strategy<Value = Trajectory> {
    (
        prop::collection::vec(prop::collection::vec(finite(), ds), len),
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, da), len),
        prop::collection::vec(-5.0f64..5.0, len),
    )
        .prop_map(|(s, a, r)| Trajectory::new(s, a, r).unwrap())
}

/// Datasets of 1 to 5 trajectories sharing dimensions, possibly of unequal length.
pub fn dataset() -> impl Strategy<Value = TrajectoryDataset> {
    (1usize..4, 1usize..3, 1usize..6, 0.05f64..=1.0).prop_flat_map(|(ds, da, h, gamma)| {
        prop::collection::vec((1..=h + 1).prop_flat_map(move |len| trajectory(len, ds, da)), 1..6)
            .prop_map(move |trajs| TrajectoryDataset::new(trajs, gamma, h, Some("fuzz".into())).unwrap())
    })
}

pub fn traj_1d(rewards: &[f64]) -> Trajectory {
    let n = rewards.len();
    Trajectory::new(
        (0..n).map(|t| vec![t as f64]).collect(),
        vec![vec![0.0]; n],
        rewards.to_vec(),
    )
    .unwrap()
}

/// Every subcommand in an order that satisfies their input dependencies.
pub const SUBCOMMANDS: [&str; 9] = [
    "gen-data",
    "fit-behavior",
    "train-bc",
    "train-dpe",
    "eval",
    "variance-study",
    "theorem-check",
    "kde",
    "plot-data",
];

/// A configuration small enough that the whole pipeline runs in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 3

[environment]
kind = "point_mass_1d"
horizon = 9

[dataset]
episodes = 12

[train]
pretrain_steps = 10
bc_steps = 20
train_steps = 6
batch_size = 4
heldout_windows = 4
epoch_steps = 5
context_len = 5

[train.model]
embed_dim = 8
n_layers = 1

[eval]
episodes = 3

[study]
replicates = 20
m = 10
bootstrap_resamples = 100

[theorem]
n = 500
seeds = 2

[kde]
grid = 20
"#;

pub struct CliRun {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn dpe_cli(args: &[&str], env: &[(&str, &std::path::Path)]) -> CliRun {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_dpe"));
    cmd.args(args).env_remove("DPE_OUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("the binary runs");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Writes the tiny config into `dir` and returns its path.
pub fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

/// Runs every subcommand into `out`, panicking on a non-zero exit.
pub fn run_pipeline(config: &std::path::Path, out: &std::path::Path, force: bool) {
    for sub in SUBCOMMANDS {
        let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if force {
            args.push("--force");
        }
        let r = dpe_cli(&args, &[]);
        assert_eq!(r.code, 0, "{sub} failed: {}", r.stderr);
    }
}

/// Sorted `(name, bytes)` of every CSV in `dir`.
pub fn csv_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Distinct values of the first column of a tidy CSV.
pub fn series(path: &std::path::Path) -> std::collections::BTreeSet<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}
