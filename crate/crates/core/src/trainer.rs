//! Minimal conditional-GAN training on a labeled image set.
//!
//! The discriminator sees the image concatenated depth-wise with the one-hot
//! label broadcast to full image planes and ends in a sigmoid score. Each
//! step updates the discriminator on real (target 1) and generated (target
//! 0) examples with binary cross-entropy, then the generator on generated
//! examples with target 1. Both use Adam.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::diffnet::{LayerSpec, Network, ParameterSet};
use crate::error::{Error, Result};
use crate::generator::{build_generator, GeneratorCheckpoint, GeneratorSpec};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub image_shape: [usize; 3],
    pub cond_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl DiscriminatorSpec {
    /// `concat(image, label planes) -> [conv s2 -> leaky relu] x 3 -> dense -> sigmoid`
    /// for 32x32 images, doubling channels at each stride.
    pub fn dcgan32(image_channels: usize, cond_dim: usize, base_channels: usize) -> Self {
        let b = base_channels;
        let down = |cin: usize, cout: usize| LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        DiscriminatorSpec {
            image_shape: [image_channels, 32, 32],
            cond_dim,
            layers: vec![
                LayerSpec::ConcatChannels {
                    side: vec![cond_dim, 32, 32],
                },
                down(image_channels + cond_dim, b),
                LayerSpec::leaky_relu(),
                down(b, 2 * b),
                LayerSpec::leaky_relu(),
                down(2 * b, 4 * b),
                LayerSpec::leaky_relu(),
                LayerSpec::Reshape {
                    shape: vec![4 * b * 16],
                },
                LayerSpec::Dense {
                    inputs: 4 * b * 16,
                    outputs: 1,
                },
                LayerSpec::Sigmoid,
            ],
        }
    }

    pub fn compact() -> Self {
        Self::dcgan32(1, 10, 8)
    }

    pub fn build_network(&self) -> Result<Network> {
        let [c, h, w] = self.image_shape;
        match self.layers.first() {
            Some(LayerSpec::ConcatChannels { side })
                if side.as_slice() == [self.cond_dim, h, w] => {}
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "discriminator must start by concatenating [{}, {h}, {w}] label planes",
                    self.cond_dim
                )))
            }
        }
        if self.layers.last() != Some(&LayerSpec::Sigmoid) {
            return Err(Error::InvalidSpec(
                "discriminator must end in a sigmoid".into(),
            ));
        }
        let net = Network::new(&[c, h, w], self.layers.clone())?;
        if net.output_shape() != [1] {
            return Err(Error::InvalidSpec(format!(
                "discriminator outputs {:?}, not a scalar",
                net.output_shape()
            )));
        }
        Ok(net)
    }
}

/// `d_y` planes of size `h x w`; plane `k` is all ones iff `y[k] = 1`.
pub fn broadcast_label(y: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let ones = y.data().iter().filter(|&&v| v == 1.0).count();
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    if y.shape().len() != 1 || ones != 1 || ones + zeros != y.len() {
        return Err(Error::Shape(format!(
            "broadcast_label needs a one-hot vector, got {:?}",
            y.data()
        )));
    }
    let plane = height * width;
    let mut out = Tensor::zeros(&[y.len(), height, width]);
    for (k, &v) in y.data().iter().enumerate() {
        out.data_mut()[k * plane..(k + 1) * plane].fill(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Examples per step, split evenly between real and generated.
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Constant weight std; `None` scales each layer by `sqrt(2 / fan_in)`.
    pub init_std: Option<f64>,
    pub generator_seed: u64,
    pub discriminator_seed: u64,
    pub data_seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 10,
            steps_per_epoch: None,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            init_std: None,
            generator_seed: 1,
            discriminator_seed: 2,
            data_seed: 3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "learning rate must be positive and betas in [0, 1)".into(),
            ));
        }
        if self.init_std.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator score on real and generated examples.
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub sample_grids: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

struct Adam {
    m: ParameterSet,
    v: ParameterSet,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &ParameterSet, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads.tensor(i).data();
            let m = self.m.tensor_mut(i).data_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = self.v.tensor_mut(i).data_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (self.m.tensor(i).data(), self.v.tensor(i).data());
            for ((p, m), v) in params.tensor_mut(i).data_mut().iter_mut().zip(m).zip(v) {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}

const PROB_FLOOR: f64 = 1e-12;

fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d BCE / d p, to be multiplied by the sigmoid derivative on the way back.
fn bce_grad(p: f64, target: f64) -> f64 {
    (p - target) / (p * (1.0 - p)).max(PROB_FLOOR)
}

fn init(net: &Network, rng: &mut ChaCha8Rng, std: Option<f64>) -> ParameterSet {
    match std {
        Some(std) => net.init_params(rng, std),
        None => net.init_params_fan_in(rng, std::f64::consts::SQRT_2),
    }
}

fn sum_in_order(parts: Vec<ParameterSet>, like: &ParameterSet) -> ParameterSet {
    let mut total = like.zeros_like();
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    total
}

/// Full training state; exposed so callers can step it manually.
pub struct Trainer {
    generator: GeneratorCheckpoint,
    g_params: ParameterSet,
    disc: Network,
    d_params: ParameterSet,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
}

struct StepStats {
    d_loss: f64,
    g_loss: f64,
    d_real: f64,
    d_fake: f64,
}

impl Trainer {
    pub fn new(
        gen_spec: GeneratorSpec,
        disc_spec: &DiscriminatorSpec,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if disc_spec.cond_dim != gen_spec.cond_dim || disc_spec.image_shape != gen_spec.image_shape
        {
            return Err(Error::InvalidSpec(
                "generator and discriminator disagree on d_y or image shape".into(),
            ));
        }
        let mut generator = build_generator(gen_spec, config.generator_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.generator_seed);
        let g_params = init(generator.network(), &mut rng, config.init_std);
        generator.replace_params(g_params.clone());
        let disc = disc_spec.build_network()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.discriminator_seed);
        let d_params = init(&disc, &mut rng, config.init_std);
        Ok(Trainer {
            g_opt: Adam::new(&g_params, &config),
            d_opt: Adam::new(&d_params, &config),
            rng: ChaCha8Rng::seed_from_u64(config.data_seed),
            generator,
            g_params,
            disc,
            d_params,
        })
    }

    pub fn generator(&self) -> &GeneratorCheckpoint {
        &self.generator
    }

    pub fn discriminator(&self) -> (&Network, &ParameterSet) {
        (&self.disc, &self.d_params)
    }

    /// Discriminator score for one image under a label.
    pub fn score(&self, image: &Tensor, label: usize) -> Result<f64> {
        let [_, h, w] = self.generator.spec().image_shape;
        let planes = broadcast_label(&Tensor::one_hot(self.generator.cond_dim(), label), h, w)?;
        Ok(self.disc.eval(&self.d_params, image, Some(&planes))?.data()[0])
    }

    fn sample_latent(&mut self, n: usize) -> Vec<(Tensor, usize)> {
        let (dz, dy) = (self.generator.latent_dim(), self.generator.cond_dim());
        (0..n)
            .map(|_| {
                let z = Tensor::vector((0..dz).map(|_| self.rng.random_range(-1.0..1.0)).collect());
                (z, self.rng.random_range(0..dy))
            })
            .collect()
    }

    fn step(&mut self, real: &[&LabeledImage]) -> Result<StepStats> {
        let half = real.len();
        let [_, h, w] = self.generator.spec().image_shape;
        let dy = self.generator.cond_dim();
        let planes = |label: usize| broadcast_label(&Tensor::one_hot(dy, label), h, w);
        let fakes_in = self.sample_latent(half);
        let gnet = self.generator.network();
        let scale = 1.0 / half as f64;

        let fakes: Vec<Tensor> = fakes_in
            .par_iter()
            .map(|(z, label)| gnet.eval(&self.g_params, z, Some(&Tensor::one_hot(dy, *label))))
            .collect::<Result<_>>()?;

        // discriminator: real -> 1, fake -> 0
        let examples: Vec<(&Tensor, usize, f64)> = real
            .iter()
            .map(|r| (&r.pixels, r.label, 1.0))
            .chain(fakes.iter().zip(&fakes_in).map(|(f, (_, l))| (f, *l, 0.0)))
            .collect();
        let disc = &self.disc;
        let d_params = &self.d_params;
        let d_parts: Vec<(f64, f64, ParameterSet)> = examples
            .par_iter()
            .map(|&(img, label, target)| {
                let side = planes(label)?;
                let (out, mut tape) = disc.forward(d_params, img, Some(&side))?;
                let p = out.data()[0];
                let up = Tensor::vector(vec![scale * bce_grad(p, target)]);
                Ok((p, bce(p, target), tape.backward(&up)?.params))
            })
            .collect::<Result<_>>()?;
        let d_loss = d_parts.iter().map(|(_, l, _)| l).sum::<f64>() * scale;
        let d_real = d_parts[..half].iter().map(|(p, _, _)| p).sum::<f64>() * scale;
        let d_fake = d_parts[half..].iter().map(|(p, _, _)| p).sum::<f64>() * scale;
        let d_grads = sum_in_order(
            d_parts.into_iter().map(|(_, _, g)| g).collect(),
            &self.d_params,
        );
        self.d_opt.step(&mut self.d_params, &d_grads);

        // generator: fake -> 1 through the updated discriminator
        let d_params = &self.d_params;
        let g_params = &self.g_params;
        let g_parts: Vec<(f64, ParameterSet)> = fakes_in
            .par_iter()
            .map(|(z, label)| {
                let y = Tensor::one_hot(dy, *label);
                let (img, mut g_tape) = gnet.forward(g_params, z, Some(&y))?;
                let side = planes(*label)?;
                let (out, mut d_tape) = disc.forward(d_params, &img, Some(&side))?;
                let p = out.data()[0];
                let up = Tensor::vector(vec![scale * bce_grad(p, 1.0)]);
                let img_grad = d_tape.backward_inputs(&up)?.input;
                Ok((bce(p, 1.0), g_tape.backward(&img_grad)?.params))
            })
            .collect::<Result<_>>()?;
        let g_loss = g_parts.iter().map(|(l, _)| l).sum::<f64>() * scale;
        let g_grads = sum_in_order(
            g_parts.into_iter().map(|(_, g)| g).collect(),
            &self.g_params,
        );
        self.g_opt.step(&mut self.g_params, &g_grads);
        self.generator.replace_params(self.g_params.clone());
        Ok(StepStats {
            d_loss,
            g_loss,
            d_real,
            d_fake,
        })
    }
}

/// Trains on `dataset`. When `out_dir` is given, checkpoints, sample grids
/// and `training.csv` are written there; a diverged run keeps the last
/// checkpoint written before the failure.
pub fn train(
    gen_spec: GeneratorSpec,
    disc_spec: &DiscriminatorSpec,
    dataset: &[LabeledImage],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(GeneratorCheckpoint, TrainReport)> {
    let mut trainer = Trainer::new(gen_spec, disc_spec, config.clone())?;
    let dy = trainer.generator.cond_dim();
    let shape = trainer.generator.image_shape().to_vec();
    for img in dataset {
        img.check(dy)?;
        img.pixels.ensure_shape(&shape, "training image")?;
    }
    let half = config.batch_size / 2;
    if dataset.len() < half {
        return Err(Error::Dataset(format!(
            "{} images cannot fill half a batch of {}",
            dataset.len(),
            config.batch_size
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        sample_grids: Vec::new(),
        final_checkpoint: None,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut trainer.rng);
        let mut steps = dataset.len() / half;
        if let Some(cap) = config.steps_per_epoch {
            steps = steps.min(cap);
        }
        let mut acc = EpochStats {
            epoch,
            steps,
            d_loss: 0.0,
            g_loss: 0.0,
            d_real: 0.0,
            d_fake: 0.0,
        };
        for s in 0..steps {
            let batch: Vec<&LabeledImage> = order[s * half..(s + 1) * half]
                .iter()
                .map(|&i| &dataset[i])
                .collect();
            let st = trainer.step(&batch)?;
            for (v, what) in [
                (st.d_loss, "discriminator loss"),
                (st.g_loss, "generator loss"),
            ] {
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step: step_index,
                        what,
                    });
                }
            }
            if !trainer.g_params.all_finite() || !trainer.d_params.all_finite() {
                return Err(Error::Diverged {
                    step: step_index,
                    what: "parameters",
                });
            }
            debug_assert!(st.d_real > 0.0 && st.d_real < 1.0 && st.d_fake > 0.0 && st.d_fake < 1.0);
            acc.d_loss += st.d_loss / steps as f64;
            acc.g_loss += st.g_loss / steps as f64;
            acc.d_real += st.d_real / steps as f64;
            acc.d_fake += st.d_fake / steps as f64;
            step_index += 1;
        }
        on_epoch(&acc);
        report.epochs.push(acc);
        let last = epoch + 1 == config.epochs;
        let cadence = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        if let (Some(dir), true) = (out_dir, last || cadence) {
            let ckpt = trainer.generator.clone().with_provenance(provenance(
                config,
                epoch + 1,
                dataset.len(),
            ));
            let path = dir.join(format!("generator-epoch{:04}.ckpt", epoch + 1));
            ckpt.save(&path)?;
            let grid = dir.join(format!("samples-epoch{:04}.pgm", epoch + 1));
            sample_grid(&ckpt, dy, 8, config.data_seed, &grid)?;
            report.sample_grids.push(grid);
            report.final_checkpoint = Some(path);
        }
    }
    if let Some(dir) = out_dir {
        write_training_csv(&dir.join("training.csv"), &report.epochs)?;
    }
    let ckpt = trainer
        .generator
        .with_provenance(provenance(config, config.epochs, dataset.len()));
    Ok((ckpt, report))
}

fn provenance(config: &TrainConfig, epochs: usize, images: usize) -> String {
    format!(
        "cgan-train epochs={epochs} images={images} batch={} lr={} betas={},{} seeds={},{},{}",
        config.batch_size,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.generator_seed,
        config.discriminator_seed,
        config.data_seed
    )
}

fn write_training_csv(path: &Path, epochs: &[EpochStats]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mosaic with one row per class (`row mod d_y`) and one column per random
/// latent vector, written as PGM or PPM.
pub fn sample_grid(
    ckpt: &GeneratorCheckpoint,
    rows: usize,
    cols: usize,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<Tensor> {
    let grid = sample_grid_tensor(ckpt, rows, cols, seed)?;
    imageio::write_pnm(path, &grid)?;
    Ok(grid)
}

pub fn sample_grid_tensor(
    ckpt: &GeneratorCheckpoint,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(
            "grid needs at least one row and column".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Tensor> = (0..cols)
        .map(|_| {
            Tensor::vector(
                (0..ckpt.latent_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        })
        .collect();
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = Tensor::one_hot(ckpt.cond_dim(), r % ckpt.cond_dim());
        for z in &zs {
            tiles.push(ckpt.generate(z, &y)?);
        }
    }
    imageio::mosaic(&tiles, rows, cols)
}

#[cfg(test)]
mod tests;
