//! Renders the synthetic glyph set, or pads an MNIST-style IDX pair, and
//! writes it as an image set plus a preview mosaic.
//!
//! ```text
//! cargo run --release --example glyph_dataset -- [out_dir] [per_class]
//! cargo run --release --example glyph_dataset -- out_dir --idx images.idx labels.idx
//! ```

use std::path::PathBuf;

use cgan_inversion::dataset::{
    load_image_set, read_idx, save_image_set, synth_glyphs, GlyphConfig,
};
use cgan_inversion::imageio::{mosaic, write_pnm};

fn main() -> cgan_inversion::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("runs/glyphs", String::as_str));
    std::fs::create_dir_all(&out).map_err(|e| cgan_inversion::Error::io(&out, e))?;

    let images = if args.get(1).map(String::as_str) == Some("--idx") {
        read_idx(&args[2], &args[3])?
    } else {
        let per_class = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
        synth_glyphs(&GlyphConfig::default(), per_class, 0)?
    };

    let index = out.join("images.json");
    save_image_set(&index, &images)?;
    assert_eq!(load_image_set(&index)?, images);

    let cols = 10.min(images.len());
    let rows = (images.len().min(100)).div_ceil(cols);
    let tiles: Vec<_> = images
        .iter()
        .take(rows * cols)
        .map(|i| i.pixels.clone())
        .collect();
    write_pnm(out.join("preview.pgm"), &mosaic(&tiles, rows, cols)?)?;

    let mut counts = [0usize; 16];
    for im in &images {
        counts[im.label.min(15)] += 1;
    }
    println!(
        "{} images of shape {:?}",
        images.len(),
        images[0].pixels.shape()
    );
    println!(
        "per class {:?}",
        &counts[..=images.iter().map(|i| i.label).max().unwrap_or(0)]
    );
    println!("wrote {} and preview.pgm", index.display());
    Ok(())
}
