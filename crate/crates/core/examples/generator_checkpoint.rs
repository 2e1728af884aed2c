//! Builds a generator from a layer spec, round-trips it through the
//! checkpoint format and renders one sample per class.
//!
//! ```text
//! cargo run --release --example generator_checkpoint -- [out_dir] [compact|desk]
//! ```

use std::path::PathBuf;

use cgan_inversion::generator::{build_generator, GeneratorCheckpoint, GeneratorSpec};
use cgan_inversion::imageio::{mosaic, write_pnm};
use cgan_inversion::Tensor;

fn main() -> cgan_inversion::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("runs/generator", String::as_str));
    let spec = match args.get(1).map(String::as_str) {
        Some("desk") => GeneratorSpec::desk_default(),
        _ => GeneratorSpec::compact(),
    };
    std::fs::create_dir_all(&out).map_err(|e| cgan_inversion::Error::io(&out, e))?;

    let g = build_generator(spec, 42)?;
    let net = g.network();
    println!(
        "input {:?} + side {:?}",
        net.input_shape(),
        net.side_shape().unwrap_or(&[])
    );
    for (layer, shape) in net.layers().iter().zip(net.layer_output_shapes()) {
        println!("  {:<20} -> {shape:?}", layer.name());
    }
    println!("{} parameters", net.num_params());

    let path = out.join("generator.ckpt");
    g.save(&path)?;
    let back = GeneratorCheckpoint::load(&path)?;
    assert_eq!(back.to_bytes()?, g.to_bytes()?);

    let z = Tensor::vector(vec![0.0; g.latent_dim()]);
    let samples = (0..g.cond_dim())
        .map(|c| g.generate(&z, &Tensor::one_hot(g.cond_dim(), c)))
        .collect::<cgan_inversion::Result<Vec<_>>>()?;
    write_pnm(
        out.join("classes.pgm"),
        &mosaic(&samples, 1, samples.len())?,
    )?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).map_or(0, |m| m.len())
    );
    Ok(())
}
