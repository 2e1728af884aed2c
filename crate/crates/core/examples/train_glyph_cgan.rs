//! Trains the compact conditional generator on synthetic glyphs.
//!
//! ```text
//! cargo run --release --example train_glyph_cgan -- [out_dir] [epochs] [per_class]
//! ```
//!
//! Writes per-epoch checkpoints, sample grids and `training.csv` to
//! `out_dir` (default `runs/glyph-cgan`), then reports how often a
//! nearest-class-mean classifier fit on real glyphs agrees with the
//! conditioning label of generated samples.

use std::path::PathBuf;

use cgan_inversion::dataset::{split_real_generated, synth_glyphs, GlyphConfig, NearestClassMean};
use cgan_inversion::generator::GeneratorSpec;
use cgan_inversion::trainer::{train, DiscriminatorSpec, TrainConfig};

fn main() -> cgan_inversion::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(
        args.first()
            .map(String::as_str)
            .unwrap_or("runs/glyph-cgan"),
    );
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let per_class = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let glyphs = GlyphConfig::default();
    let data = synth_glyphs(&glyphs, per_class, 7)?;
    let config = TrainConfig {
        batch_size: 64,
        epochs,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(
        GeneratorSpec::compact(),
        &DiscriminatorSpec::compact(),
        &data,
        &config,
        Some(&out),
        &mut |e| {
            println!(
                "epoch {:3}  d_loss {:.4}  g_loss {:.4}  D(real) {:.3}  D(fake) {:.3}",
                e.epoch + 1,
                e.d_loss,
                e.g_loss,
                e.d_real,
                e.d_fake
            );
        },
    )?;

    let holdout = synth_glyphs(&glyphs, 50, 8)?;
    let classifier = NearestClassMean::fit(&holdout, glyphs.classes)?;
    let (_, generated) = split_real_generated(&ckpt, &holdout, 500, 9)?;
    println!(
        "real glyph accuracy      {:.3}",
        classifier.accuracy(&holdout)
    );
    println!(
        "conditional fidelity     {:.3}",
        classifier.accuracy(&generated)
    );
    ckpt.save(out.join("generator.ckpt"))?;
    Ok(())
}
