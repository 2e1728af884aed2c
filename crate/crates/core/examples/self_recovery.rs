//! Recovers (z, y) from images the generator produced itself.
//!
//! ```text
//! cargo run --release --example self_recovery -- [ckpt] [targets] [max_iters] [step]
//! ```
//!
//! Defaults to the bundled glyph generator, 20 targets and 10 000
//! iterations, and prints label accuracy, reconstruction and z errors.

use std::time::Instant;

use cgan_inversion::dataset::generate_targets;
use cgan_inversion::generator::GeneratorCheckpoint;
use cgan_inversion::metrics::{median, z_recovery_error};
use cgan_inversion::recovery::{recover_batch, RecoveryConfig};

fn main() -> cgan_inversion::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt_path = args.first().cloned().unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/assets/glyph-generator.ckpt").to_string()
    });
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let max_iterations = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);

    let ckpt = GeneratorCheckpoint::load(&ckpt_path)?;
    let targets = generate_targets(&ckpt, n, 2024)?;
    let mut config = RecoveryConfig {
        max_iterations,
        trace_stride: 1000,
        ..RecoveryConfig::default()
    };
    if let Some(step) = args.get(3).and_then(|s| s.parse().ok()) {
        config.alpha = step;
        config.beta = step;
    }

    let start = Instant::now();
    let results = recover_batch(&targets, &ckpt, &config)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut correct = 0;
    let mut mses = Vec::new();
    let mut iterations = 0;
    for (t, r) in targets.iter().zip(&results) {
        let r = r
            .as_ref()
            .map_err(|e| cgan_inversion::Error::Dataset(e.to_string()))?;
        let z_err = z_recovery_error(t.latent.as_ref().expect("generated"), &r.z_p)?;
        correct += usize::from(r.label == t.label);
        mses.push(r.recon_mse);
        iterations += r.iterations;
        println!(
            "{:>10}  label {} -> {}  mse {:.3e} (start {:.3})  |z - z_p| {:.3}  iters {}",
            t.id, t.label, r.label, r.recon_mse, r.initial_recon_mse, z_err, r.iterations
        );
    }
    println!("accuracy      {:.3}", correct as f64 / n as f64);
    println!("median mse    {:.3e}", median(&mses).unwrap_or(f64::NAN));
    println!(
        "time          {elapsed:.1}s ({:.3} ms/iteration)",
        1e3 * elapsed / iterations.max(1) as f64
    );
    Ok(())
}
