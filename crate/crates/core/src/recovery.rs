//! Joint recovery of the latent probe `z_p` and the relaxed conditional probe
//! `y_p` from a target image.
//!
//! Each iteration evaluates
//!
//! ```text
//! L = ||target - G(z_p, y_p)||² + λ · | ||y_p||₁ - 1 |
//! ```
//!
//! takes a plain gradient step on `z_p` (step `α`) and `y_p` (step `β`,
//! both per pixel by default, see [`StepUnits`]),
//! resamples every coordinate of `z_p` that left `[-1, 1]` uniformly from
//! `(-1, 1)`, and clamps `y_p` into `[0, 1]`. `z_p` starts uniform in
//! `(-1, 1)`, `y_p` starts at the zero vector, and the decoded label is
//! `argmax(y_p)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::generator::GeneratorCheckpoint;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Regularizer weight; `None` means `1 / d_y`.
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Update index from which `alpha` and `beta` are halved.
    pub schedule: u64,
    pub max_iterations: u64,
    /// Plateau window in iterations; 0 disables the plateau test.
    pub plateau_window: u64,
    /// Relative improvement the best loss must make within one window.
    pub plateau_tolerance: f64,
    /// Stop as soon as the total loss drops to this value.
    pub loss_tolerance: Option<f64>,
    pub use_regularizer: bool,
    pub rng_seed: u64,
    pub trace_stride: u64,
    /// How `alpha` and `beta` are measured against the summed loss.
    pub step_units: StepUnits,
}

/// With [`StepUnits::PerPixel`] the applied steps are `alpha / n` and
/// `beta / n` for an `n`-pixel target, i.e. unit steps on the per-pixel
/// loss. [`StepUnits::Raw`] applies them to the summed loss unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnits {
    #[default]
    PerPixel,
    Raw,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            lambda: None,
            alpha: 1.0,
            beta: 1.0,
            schedule: 50_000,
            max_iterations: 100_000,
            plateau_window: 5_000,
            plateau_tolerance: 1e-6,
            loss_tolerance: None,
            use_regularizer: true,
            rng_seed: 0,
            trace_stride: 100,
            step_units: StepUnits::PerPixel,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be non-negative, got {l}"));
            }
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.trace_stride < 1 {
            return bad("trace_stride must be at least 1".into());
        }
        if !(self.plateau_tolerance >= 0.0) {
            return bad("plateau_tolerance must be non-negative".into());
        }
        Ok(())
    }

    /// Weight actually applied to the penalty: 0 with the regularizer off.
    pub fn effective_lambda(&self, cond_dim: usize) -> f64 {
        if self.use_regularizer {
            self.lambda.unwrap_or(1.0 / cond_dim as f64)
        } else {
            0.0
        }
    }

    /// Factor between the configured and the applied step sizes.
    pub fn step_scale(&self, pixels: usize) -> f64 {
        match self.step_units {
            StepUnits::PerPixel => 1.0 / pixels as f64,
            StepUnits::Raw => 1.0,
        }
    }

    /// `(alpha, beta)` used for the update with index `iteration`.
    pub fn step_sizes(&self, iteration: u64) -> (f64, f64) {
        if iteration >= self.schedule {
            (self.alpha * 0.5, self.beta * 0.5)
        } else {
            (self.alpha, self.beta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Sum of squared pixel differences.
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub recon_mse: f64,
    pub recon_sum: f64,
    pub reg_term: f64,
    pub z_error: Option<f64>,
    pub label_correct: Option<bool>,
}

/// Sampled loss history; iterations strictly increase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecoveryTrace {
    pub points: Vec<TracePoint>,
}

impl RecoveryTrace {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Latest point at or before `iteration`.
    pub fn at(&self, iteration: u64) -> Option<&TracePoint> {
        self.points
            .iter()
            .take_while(|p| p.iteration <= iteration)
            .last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub z_p: Tensor,
    pub y_p: Tensor,
    pub label: usize,
    /// Several entries of `y_p` shared the maximum; the lowest index won.
    pub label_tie: bool,
    pub loss: LossTerms,
    /// Per-pixel reconstruction MSE at the final state.
    pub recon_mse: f64,
    /// Per-pixel reconstruction MSE before the first update.
    pub initial_recon_mse: f64,
    pub iterations: u64,
    pub termination: Termination,
    pub trace: RecoveryTrace,
}

/// Known answer for a target, used only to annotate the trace.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub z: Option<&'a Tensor>,
    pub label: usize,
}

/// Probe state after an update, passed to observers. `step` holds the
/// `(alpha, beta)` that produced it and is `None` for the initial state.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub iteration: u64,
    pub z_p: &'a Tensor,
    pub y_p: &'a Tensor,
    pub step: Option<(f64, f64)>,
}

fn check_shapes(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    z_p: &Tensor,
    y_p: &Tensor,
) -> Result<()> {
    target.ensure_shape(ckpt.image_shape(), "target image")?;
    z_p.ensure_shape(&[ckpt.latent_dim()], "latent probe")?;
    y_p.ensure_shape(&[ckpt.cond_dim()], "conditional probe")
}

fn l1_norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v.abs()).sum()
}

/// Sub-gradient of `λ | ||y||₁ - 1 |`. The kink at `||y||₁ = 1` gets 0 and a
/// zero coordinate is differentiated from the feasible (non-negative) side,
/// so inside `[0, 1]^d` this is `λ · sign(Σy - 1) · 1`.
fn penalty_gradient(y: &[f64], lambda: f64) -> impl Iterator<Item = f64> + '_ {
    let excess = l1_norm(y) - 1.0;
    let s = if excess > 0.0 {
        lambda
    } else if excess < 0.0 {
        -lambda
    } else {
        0.0
    };
    y.iter().map(move |&v| if v < 0.0 { -s } else { s })
}

/// Loss decomposition at `(z_p, y_p)`.
pub fn objective(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    z_p: &Tensor,
    y_p: &Tensor,
    lambda: f64,
) -> Result<LossTerms> {
    check_shapes(target, ckpt, z_p, y_p)?;
    let image = ckpt.generate(z_p, y_p)?;
    let recon = image
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    let reg = lambda * (l1_norm(y_p.data()) - 1.0).abs();
    Ok(LossTerms {
        recon,
        reg,
        total: recon + reg,
    })
}

/// Gradients of the total loss with respect to `z_p` and `y_p`.
pub fn objective_gradients(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    z_p: &Tensor,
    y_p: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    check_shapes(target, ckpt, z_p, y_p)?;
    Ok(evaluate(target, ckpt, z_p, y_p, lambda)?.1)
}

/// Loss terms and gradients from one forward/backward pass.
fn evaluate(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    z_p: &Tensor,
    y_p: &Tensor,
    lambda: f64,
) -> Result<(LossTerms, (Tensor, Tensor))> {
    let (image, mut tape) = ckpt.network().forward(ckpt.params(), z_p, Some(y_p))?;
    let mut recon = 0.0;
    let residual: Vec<f64> = image
        .data()
        .iter()
        .zip(target.data())
        .map(|(g, t)| {
            let d = g - t;
            recon += d * d;
            2.0 * d
        })
        .collect();
    let upstream = Tensor::new(image.shape().to_vec(), residual)?;
    let grads = tape.backward_inputs(&upstream)?;
    let reg = lambda * (l1_norm(y_p.data()) - 1.0).abs();
    let mut g_y = grads.side.expect("generator has a conditional junction");
    for (g, p) in g_y
        .data_mut()
        .iter_mut()
        .zip(penalty_gradient(y_p.data(), lambda))
    {
        *g += p;
    }
    Ok((
        LossTerms {
            recon,
            reg,
            total: recon + reg,
        },
        (grads.input, g_y),
    ))
}

/// Uniform draw from the open interval `(-1, 1)`.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v = rng.random_range(-1.0..1.0);
        if v > -1.0 {
            return v;
        }
    }
}

/// Resamples, independently per coordinate, every entry outside `[-1, 1]`.
pub fn stochastic_clip<R: Rng + ?Sized>(z_p: &Tensor, rng: &mut R) -> Tensor {
    let mut out = z_p.clone();
    stochastic_clip_in_place(&mut out, rng);
    out
}

fn stochastic_clip_in_place<R: Rng + ?Sized>(z_p: &mut Tensor, rng: &mut R) {
    for v in z_p.data_mut() {
        if !(-1.0..=1.0).contains(v) {
            *v = open_unit(rng);
        }
    }
}

/// Elementwise clamp into `[0, 1]`.
pub fn project_unit_box(y_p: &Tensor) -> Tensor {
    let mut out = y_p.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

pub fn recover(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    config: &RecoveryConfig,
) -> Result<RecoveryResult> {
    recover_observed(target, ckpt, config, None, &mut |_| {})
}

/// [`recover`] with an optional ground truth (adds z-error and label columns
/// to the trace) and an observer that sees every probe state.
pub fn recover_observed(
    target: &Tensor,
    ckpt: &GeneratorCheckpoint,
    config: &RecoveryConfig,
    truth: Option<GroundTruth<'_>>,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<RecoveryResult> {
    config.validate()?;
    target.ensure_shape(ckpt.image_shape(), "target image")?;
    if let Some(bad) = target.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Shape(format!("target pixel {bad} outside [-1, 1]")));
    }
    if let Some(GroundTruth { z: Some(z), .. }) = truth {
        z.ensure_shape(&[ckpt.latent_dim()], "true latent vector")?;
    }
    let lambda = config.effective_lambda(ckpt.cond_dim());
    let pixels = target.len() as f64;
    let scale = config.step_scale(target.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let mut z_p = Tensor::vector(
        (0..ckpt.latent_dim())
            .map(|_| open_unit(&mut rng))
            .collect(),
    );
    let mut y_p = Tensor::zeros(&[ckpt.cond_dim()]);
    observer(&StepEvent {
        iteration: 0,
        z_p: &z_p,
        y_p: &y_p,
        step: None,
    });

    let trace_point = |iteration: u64, loss: &LossTerms, z_p: &Tensor, y_p: &Tensor| TracePoint {
        iteration,
        recon_mse: loss.recon / pixels,
        recon_sum: loss.recon,
        reg_term: loss.reg,
        z_error: truth.and_then(|t| t.z).map(|z| euclidean(z, z_p)),
        label_correct: truth.map(|t| y_p.argmax().0 == t.label),
    };

    let mut trace = RecoveryTrace::default();
    let mut initial_recon_mse = None;
    let mut anchor = f64::INFINITY;
    let mut anchor_iter = 0u64;
    let mut termination = Termination::BudgetExhausted;
    let mut iteration = 0u64;
    while iteration < config.max_iterations {
        let (loss, (g_z, g_y)) = evaluate(target, ckpt, &z_p, &y_p, lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        initial_recon_mse.get_or_insert(loss.recon / pixels);
        if iteration.is_multiple_of(config.trace_stride) {
            trace.points.push(trace_point(iteration, &loss, &z_p, &y_p));
        }
        if config.loss_tolerance.is_some_and(|tol| loss.total <= tol) {
            termination = Termination::Converged;
            break;
        }
        if loss.total < anchor * (1.0 - config.plateau_tolerance) || anchor.is_infinite() {
            anchor = loss.total;
            anchor_iter = iteration;
        } else if config.plateau_window > 0 && iteration - anchor_iter >= config.plateau_window {
            termination = Termination::Converged;
            break;
        }

        let (alpha, beta) = config.step_sizes(iteration);
        let (a, b) = (alpha * scale, beta * scale);
        for (v, g) in z_p.data_mut().iter_mut().zip(g_z.data()) {
            *v -= a * g;
        }
        for (v, g) in y_p.data_mut().iter_mut().zip(g_y.data()) {
            *v -= b * g;
        }
        stochastic_clip_in_place(&mut z_p, &mut rng);
        y_p.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        debug_assert!(z_p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        debug_assert!(y_p.data().iter().all(|v| (0.0..=1.0).contains(v)));

        iteration += 1;
        observer(&StepEvent {
            iteration,
            z_p: &z_p,
            y_p: &y_p,
            step: Some((alpha, beta)),
        });
    }

    let loss = objective(target, ckpt, &z_p, &y_p, lambda)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration });
    }
    if trace.points.last().is_none_or(|p| p.iteration < iteration) {
        trace.points.push(trace_point(iteration, &loss, &z_p, &y_p));
    }
    let (label, label_tie) = y_p.argmax();
    Ok(RecoveryResult {
        recon_mse: loss.recon / pixels,
        initial_recon_mse: initial_recon_mse.unwrap_or(loss.recon / pixels),
        z_p,
        y_p,
        label,
        label_tie,
        loss,
        iterations: iteration,
        termination,
        trace,
    })
}

fn euclidean(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Seed used for the target at position `index` of a batch.
pub fn derived_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Recovers every target independently (in parallel) with seed
/// `config.rng_seed + index`. A failed entry does not abort the batch.
pub fn recover_batch(
    targets: &[LabeledImage],
    ckpt: &GeneratorCheckpoint,
    config: &RecoveryConfig,
) -> Result<Vec<Result<RecoveryResult>>> {
    if targets.is_empty() {
        return Err(Error::Empty("recovery batch".into()));
    }
    config.validate()?;
    Ok(targets
        .par_iter()
        .enumerate()
        .map(|(index, target)| {
            let cfg = RecoveryConfig {
                rng_seed: derived_seed(config.rng_seed, index),
                ..config.clone()
            };
            let truth = GroundTruth {
                z: target.latent.as_ref(),
                label: target.label,
            };
            recover_observed(&target.pixels, ckpt, &cfg, Some(truth), &mut |_| {})
        })
        .collect())
}
