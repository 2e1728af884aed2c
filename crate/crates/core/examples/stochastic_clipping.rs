//! Shows what the feasibility steps do to an out-of-range probe: latent
//! coordinates outside [-1, 1] are redrawn uniformly, label coordinates are
//! clamped into [0, 1].
//!
//! ```text
//! cargo run --release --example stochastic_clipping
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cgan_inversion::recovery::{project_unit_box, stochastic_clip};
use cgan_inversion::Tensor;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Tensor::vector(vec![-3.0, -1.0, -0.25, 0.0, 0.5, 1.0, 1.0001, 7.0]);
    let y = Tensor::vector(vec![-0.5, 0.0, 0.3, 1.0, 2.5]);
    println!("z    {:?}", z.data());
    for _ in 0..3 {
        println!(
            "clip {:?}",
            stochastic_clip(&z, &mut rng)
                .data()
                .iter()
                .map(|v| (v * 1e3).round() / 1e3)
                .collect::<Vec<_>>()
        );
    }
    println!("y    {:?}", y.data());
    println!("proj {:?}", project_unit_box(&y).data());

    // a boundary clamp would pile mass at +-1; redraws stay spread out
    let wide = Tensor::vector(
        (0..100_000)
            .map(|i| 4.0 * (i as f64 / 100_000.0) - 2.0)
            .collect(),
    );
    let clipped = stochastic_clip(&wide, &mut rng);
    let at_edge = clipped.data().iter().filter(|v| v.abs() > 0.999).count();
    println!("coordinates within 1e-3 of the boundary after clipping: {at_edge} of 100000");
}
