#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use cgan_inversion::dataset::{split_real_generated, synth_glyphs, GlyphConfig, LabeledImage};
use cgan_inversion::generator::GeneratorCheckpoint;
use cgan_inversion::recovery::{recover_batch, RecoveryConfig, RecoveryResult};

pub const SUITE_SIZE: usize = 200;
pub const HOLDOUT_SEED: u64 = 8;
pub const SPLIT_SEED: u64 = 2024;

pub fn asset_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/glyph-generator.ckpt")
}

pub fn generator() -> &'static GeneratorCheckpoint {
    static G: OnceLock<GeneratorCheckpoint> = OnceLock::new();
    G.get_or_init(|| GeneratorCheckpoint::load(asset_path()).expect("bundled generator checkpoint"))
}

/// Balanced generated and held-out real targets, 200 each.
pub fn split() -> &'static (Vec<LabeledImage>, Vec<LabeledImage>) {
    static S: OnceLock<(Vec<LabeledImage>, Vec<LabeledImage>)> = OnceLock::new();
    S.get_or_init(|| {
        let holdout = synth_glyphs(&GlyphConfig::default(), SUITE_SIZE / 10, HOLDOUT_SEED).unwrap();
        split_real_generated(generator(), &holdout, SUITE_SIZE, SPLIT_SEED).unwrap()
    })
}

/// Generated targets: stop once the summed loss is below 1e-3 per pixel.
pub fn generated_config(use_regularizer: bool) -> RecoveryConfig {
    RecoveryConfig {
        max_iterations: 10_000,
        loss_tolerance: Some(1e-3 * 1024.0),
        trace_stride: 10,
        use_regularizer,
        rng_seed: 11,
        ..RecoveryConfig::default()
    }
}

/// Real targets never reach the tolerance, so they get a fixed budget.
pub fn real_config(use_regularizer: bool) -> RecoveryConfig {
    RecoveryConfig {
        max_iterations: 2_000,
        trace_stride: 10,
        use_regularizer,
        rng_seed: 12,
        ..RecoveryConfig::default()
    }
}

pub struct Suite {
    pub results: Vec<RecoveryResult>,
    pub seconds: f64,
}

fn run(targets: &[LabeledImage], config: &RecoveryConfig) -> Suite {
    let start = Instant::now();
    let results = recover_batch(targets, generator(), config)
        .unwrap()
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    Suite {
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn generated_reg() -> &'static Suite {
    static R: OnceLock<Suite> = OnceLock::new();
    R.get_or_init(|| run(&split().0, &generated_config(true)))
}

pub fn generated_noreg() -> &'static Suite {
    static R: OnceLock<Suite> = OnceLock::new();
    R.get_or_init(|| run(&split().0, &generated_config(false)))
}

pub fn real_reg() -> &'static Suite {
    static R: OnceLock<Suite> = OnceLock::new();
    R.get_or_init(|| run(&split().1, &real_config(true)))
}

pub fn real_noreg() -> &'static Suite {
    static R: OnceLock<Suite> = OnceLock::new();
    R.get_or_init(|| run(&split().1, &real_config(false)))
}

pub fn accuracy(targets: &[LabeledImage], results: &[RecoveryResult]) -> f64 {
    let correct = targets
        .iter()
        .zip(results)
        .filter(|(t, r)| t.label == r.label)
        .count();
    correct as f64 / targets.len() as f64
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Writes a criterion line straight to stderr so it shows up even when
/// test output is captured.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {criterion:2}: {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}
