//! Compares backpropagated gradients with central finite differences on a
//! freshly initialized compact generator. A difference step that crosses a
//! ReLU kink shows up as an error around 1e-5; smooth regions agree to 1e-9.
//!
//! ```text
//! cargo run --release --example gradient_check -- [seed]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgan_inversion::diffnet::{finite_difference_gradient, max_relative_error};
use cgan_inversion::generator::{build_generator, GeneratorSpec};
use cgan_inversion::recovery::{objective, objective_gradients};
use cgan_inversion::Tensor;

fn main() -> cgan_inversion::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let g = build_generator(GeneratorSpec::compact(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: f64, hi: f64| {
        Tensor::vector((0..n).map(|_| rng.random_range(lo..hi)).collect())
    };

    let z = draw(g.latent_dim(), -1.0, 1.0);
    let y = draw(g.cond_dim(), 0.0, 0.15);
    let target = draw(1024, -1.0, 1.0).reshaped(g.image_shape().to_vec())?;
    let lambda = 0.1;

    let (gz, gy) = objective_gradients(&target, &g, &z, &y, lambda)?;
    let h = 1e-5;
    let fz = finite_difference_gradient(
        |t| objective(&target, &g, t, &y, lambda).unwrap().total,
        &z,
        h,
    );
    let fy = finite_difference_gradient(
        |t| objective(&target, &g, &z, t, lambda).unwrap().total,
        &y,
        h,
    );

    println!(
        "loss                {:.6}",
        objective(&target, &g, &z, &y, lambda)?.total
    );
    println!(
        "dL/dz rel. error    {:.2e}",
        max_relative_error(gz.data(), fz.data())
    );
    println!(
        "dL/dy rel. error    {:.2e}",
        max_relative_error(gy.data(), fy.data())
    );
    Ok(())
}
