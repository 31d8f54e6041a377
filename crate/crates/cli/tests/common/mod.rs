#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qexpand::config::AppConfig;
use qexpand::pipeline::write_benchmark;
use qexpand_core::model::{ModelConfig, OptimizerKind};
use qexpand_core::synth::IntentBenchmarkConfig;

/// Writes a reduced intent benchmark and a config for a small, fast model.
pub fn small_workspace(dir: &Path) -> PathBuf {
    let mut app = AppConfig::default();
    app.vocab.min_freq = 1;
    app.model = ModelConfig {
        embed_dim: 32,
        layers: 1,
        heads: 2,
        feedforward_dim: 64,
        max_input_len: 16,
        ..ModelConfig::default()
    };
    app.train.epochs = 4;
    app.train.optimizer = OptimizerKind::Adam;
    app.train.batch_size = 8;
    app.eval.rand_seeds = vec![1, 2];
    let bench = IntentBenchmarkConfig {
        verbs: 6,
        objects: 4,
        langs: 3,
        ..IntentBenchmarkConfig::default()
    };
    write_benchmark(dir, &bench, &app).unwrap()
}

pub fn qexpand(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qexpand"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("run qexpand")
}

pub fn ok(config: &Path, args: &[&str]) -> String {
    let out = qexpand(config, args);
    assert!(
        out.status.success(),
        "qexpand {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}
