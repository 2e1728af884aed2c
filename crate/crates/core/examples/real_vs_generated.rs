//! Generated versus real targets, with and without the one-hot penalty,
//! summarised as `loss (initial loss) accuracy` rows.
//!
//! ```text
//! cargo run --release --example real_vs_generated -- [ckpt] [n] [max_iters] [out_dir]
//! ```

use std::path::PathBuf;

use cgan_inversion::cli::eval_record;
use cgan_inversion::dataset::{split_real_generated, synth_glyphs, GlyphConfig, LabeledImage};
use cgan_inversion::generator::GeneratorCheckpoint;
use cgan_inversion::metrics::{
    aggregate, config_digest, loss_series, write_records_csv, write_svg_curves,
};
use cgan_inversion::recovery::{recover_batch, RecoveryConfig};

fn main() -> cgan_inversion::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = GeneratorCheckpoint::load(args.first().map_or(
        concat!(env!("CARGO_MANIFEST_DIR"), "/assets/glyph-generator.ckpt"),
        String::as_str,
    ))?;
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let max_iterations = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let out = PathBuf::from(args.get(3).map_or("runs/real-vs-generated", String::as_str));
    std::fs::create_dir_all(&out).map_err(|e| cgan_inversion::Error::io(&out, e))?;

    let holdout = synth_glyphs(&GlyphConfig::default(), n.div_ceil(10).max(1), 8)?;
    let (generated, real) = split_real_generated(&ckpt, &holdout, n, 2024)?;

    let mut all = Vec::new();
    let mut curves = Vec::new();
    println!("{:<10} {:<6} loss (initial) accuracy", "targets", "reg");
    for (name, targets) in [("generated", &generated), ("real", &real)] {
        for reg in [true, false] {
            let config = RecoveryConfig {
                max_iterations,
                use_regularizer: reg,
                trace_stride: 10,
                ..RecoveryConfig::default()
            };
            let records = run(&ckpt, targets, &config, reg, &mut curves, name)?;
            let report = aggregate(&records, &config_digest(&config)?)?;
            println!(
                "{name:<10} {:<6} {}",
                if reg { "yes" } else { "no" },
                report.table_row()
            );
            all.extend(records);
        }
    }
    write_records_csv(out.join("records.csv"), &all)?;
    write_svg_curves(
        out.join("loss.svg"),
        "per-pixel loss, first target",
        &curves,
        true,
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(
    ckpt: &GeneratorCheckpoint,
    targets: &[LabeledImage],
    config: &RecoveryConfig,
    reg: bool,
    curves: &mut Vec<cgan_inversion::metrics::Series>,
    name: &str,
) -> cgan_inversion::Result<Vec<cgan_inversion::metrics::EvalRecord>> {
    let results = recover_batch(targets, ckpt, config)?;
    let mut records = Vec::new();
    for (t, r) in targets.iter().zip(results) {
        let r = r?;
        if records.is_empty() {
            curves.push(loss_series(&format!("{name} reg={reg}"), &r.trace));
        }
        records.push(eval_record(t, &r, reg)?);
    }
    Ok(records)
}
