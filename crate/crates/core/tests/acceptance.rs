//! End-to-end acceptance checks against the bundled glyph generator.
//!
//! Each test prints one `acceptance criterion N: PASS|FAIL | ...` line to
//! stderr before asserting.

mod common;

use std::fs;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgan_inversion::dataset::{generate_targets, save_image_set};
use cgan_inversion::diffnet::{
    finite_difference_gradient, max_relative_error, LayerSpec, Network, ParameterSet,
};
use cgan_inversion::generator::{
    CheckpointMetadata, GeneratorCheckpoint, GeneratorSpec, CHECKPOINT_VERSION,
};
use cgan_inversion::metrics::median;
use cgan_inversion::recovery::{
    objective, objective_gradients, recover, recover_batch, recover_observed, RecoveryConfig,
};
use cgan_inversion::Tensor;

use common::*;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;
const INSTANCES: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Inputs bounded away from the origin, for layers with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.01, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Largest norm-wise relative error over the input, side-input and
/// parameter gradients of `<u, net(x)>` for a random upstream `u`.
fn network_gradient_error(
    net: &Network,
    params: &ParameterSet,
    x: &Tensor,
    side: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let out_shape = net.output_shape().to_vec();
    let u = uniform(rng, &out_shape, -1.0, 1.0);
    let loss =
        |p: &ParameterSet, x: &Tensor, s: Option<&Tensor>| net.eval(p, x, s).unwrap().dot(&u);
    let (_, mut tape) = net.forward(params, x, side).unwrap();
    let grads = tape.backward(&u).unwrap();

    let mut worst = 0.0f64;
    let fx = finite_difference_gradient(|t| loss(params, t, side), x, H);
    worst = worst.max(max_relative_error(grads.inputs.input.data(), fx.data()));
    if let Some(s) = side {
        let fs = finite_difference_gradient(|t| loss(params, x, Some(t)), s, H);
        worst = worst.max(max_relative_error(
            grads.inputs.side.as_ref().unwrap().data(),
            fs.data(),
        ));
    }
    for i in 0..params.len() {
        let fp = finite_difference_gradient(
            |t| {
                let mut p = params.clone();
                *p.tensor_mut(i) = t.clone();
                loss(&p, x, side)
            },
            params.tensor(i),
            H,
        );
        worst = worst.max(max_relative_error(grads.params.tensor(i).data(), fp.data()));
    }
    worst
}

fn random_params(net: &Network, rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = net.init_params(rng, 0.5);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn layer_instance(kind: &str, rng: &mut ChaCha8Rng) -> (Network, Tensor, Option<Tensor>) {
    let c = rng.random_range(1..4);
    let hw = rng.random_range(2..6);
    let n = rng.random_range(1..8);
    match kind {
        "dense" => {
            let m = rng.random_range(1..6);
            let net = Network::new(
                &[n],
                vec![LayerSpec::Dense {
                    inputs: n,
                    outputs: m,
                }],
            )
            .unwrap();
            (net, uniform(rng, &[n], -1.0, 1.0), None)
        }
        "conv2d" => {
            let kernel = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2).min(kernel - 1);
            let size = (hw + kernel).max(kernel);
            let layer = LayerSpec::Conv2d {
                in_channels: c,
                out_channels: rng.random_range(1..4),
                kernel,
                stride,
                padding,
            };
            let net = Network::new(&[c, size, size], vec![layer]).unwrap();
            (net, uniform(rng, &[c, size, size], -1.0, 1.0), None)
        }
        "transposed_conv2d" => {
            let kernel = rng.random_range(2..5);
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2).min(kernel - 1);
            let out = (hw - 1) * stride + kernel - 2 * padding;
            let layer = LayerSpec::TransposedConv2d {
                in_channels: c,
                out_channels: rng.random_range(1..4),
                kernel,
                stride,
                padding,
                output_size: [out, out],
            };
            let net = Network::new(&[c, hw, hw], vec![layer]).unwrap();
            (net, uniform(rng, &[c, hw, hw], -1.0, 1.0), None)
        }
        "relu" | "leaky_relu" => {
            let layer = if kind == "relu" {
                LayerSpec::Relu
            } else {
                LayerSpec::LeakyRelu {
                    slope: rng.random_range(0.01..0.5),
                }
            };
            let net = Network::new(&[n], vec![layer]).unwrap();
            (net, off_kink(rng, &[n]), None)
        }
        "tanh" | "sigmoid" => {
            let layer = if kind == "tanh" {
                LayerSpec::Tanh
            } else {
                LayerSpec::Sigmoid
            };
            let net = Network::new(&[c, hw], vec![layer]).unwrap();
            (net, uniform(rng, &[c, hw], -3.0, 3.0), None)
        }
        "reshape" => {
            let net = Network::new(
                &[c, hw],
                vec![
                    LayerSpec::Reshape {
                        shape: vec![c * hw],
                    },
                    LayerSpec::Tanh,
                ],
            )
            .unwrap();
            (net, uniform(rng, &[c, hw], -2.0, 2.0), None)
        }
        "concat_channels" => {
            let d = rng.random_range(1..4);
            let layers = vec![
                LayerSpec::ConcatChannels {
                    side: vec![d, hw, hw],
                },
                LayerSpec::Conv2d {
                    in_channels: c + d,
                    out_channels: 2,
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                },
            ];
            let net = Network::new(&[c, hw, hw], layers).unwrap();
            let x = uniform(rng, &[c, hw, hw], -1.0, 1.0);
            (net, x, Some(uniform(rng, &[d, hw, hw], 0.0, 1.0)))
        }
        "affine_norm" => {
            let net =
                Network::new(&[c, hw, hw], vec![LayerSpec::AffineNorm { channels: c }]).unwrap();
            (net, uniform(rng, &[c, hw, hw], -2.0, 2.0), None)
        }
        other => panic!("unknown layer kind {other}"),
    }
}

fn random_generator(rng: &mut ChaCha8Rng) -> GeneratorCheckpoint {
    let spec = GeneratorSpec {
        latent_dim: 4,
        cond_dim: 3,
        image_shape: [1, 6, 6],
        layers: vec![
            LayerSpec::ConcatChannels { side: vec![3] },
            LayerSpec::Dense {
                inputs: 7,
                outputs: 2 * 9,
            },
            LayerSpec::Reshape {
                shape: vec![2, 3, 3],
            },
            LayerSpec::AffineNorm { channels: 2 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::TransposedConv2d {
                in_channels: 2,
                out_channels: 1,
                kernel: 4,
                stride: 2,
                padding: 1,
                output_size: [6, 6],
            },
            LayerSpec::Tanh,
        ],
        linear_output: false,
    };
    let net = spec.build_network().unwrap();
    let params = random_params(&net, rng);
    let meta = CheckpointMetadata {
        seed: 0,
        provenance: "random".into(),
        format_version: CHECKPOINT_VERSION,
    };
    GeneratorCheckpoint::from_parts(spec, params, meta).unwrap()
}

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let kinds = [
        "dense",
        "conv2d",
        "transposed_conv2d",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "reshape",
        "concat_channels",
        "affine_norm",
    ];
    let mut worst = Vec::new();
    for kind in kinds {
        let mut w = 0.0f64;
        for _ in 0..INSTANCES {
            let (net, x, side) = layer_instance(kind, &mut rng);
            let params = random_params(&net, &mut rng);
            w = w.max(network_gradient_error(
                &net,
                &params,
                &x,
                side.as_ref(),
                &mut rng,
            ));
        }
        worst.push((kind, w));
    }
    let mut objective_worst = 0.0f64;
    for _ in 0..INSTANCES {
        let g = random_generator(&mut rng);
        let target = uniform(&mut rng, &[1, 6, 6], -1.0, 1.0);
        let z = uniform(&mut rng, &[4], -1.0, 1.0);
        // ||y||₁ stays at least 0.1 away from the penalty kink
        let y = if rng.random_bool(0.5) {
            uniform(&mut rng, &[3], 0.0, 0.3)
        } else {
            uniform(&mut rng, &[3], 0.4, 1.0)
        };
        let lambda = 1.0 / 3.0;
        let (gz, gy) = objective_gradients(&target, &g, &z, &y, lambda).unwrap();
        let fz = finite_difference_gradient(
            |t| objective(&target, &g, t, &y, lambda).unwrap().total,
            &z,
            H,
        );
        let fy = finite_difference_gradient(
            |t| objective(&target, &g, &z, t, lambda).unwrap().total,
            &y,
            H,
        );
        objective_worst = objective_worst
            .max(max_relative_error(gz.data(), fz.data()))
            .max(max_relative_error(gy.data(), fy.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass =
        worst.iter().all(|(_, w)| *w < GRAD_TOL) && objective_worst < GRAD_TOL && secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(k, w)| format!("{k} {w:.1e}")).collect();
    report(
        1,
        pass,
        &format!(
            "{} instances/kind; {}; objective {objective_worst:.1e}; {secs:.1}s",
            INSTANCES,
            detail.join(", ")
        ),
    );
    assert!(pass);
}

/// Normal-equation solve by Gauss-Jordan elimination with partial pivoting.
fn least_squares(a: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let n = a[0].len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .map(|j| a.iter().map(|r| r[i] * r[j]).sum())
                .collect();
            row.push(a.iter().zip(t).map(|(r, t)| r[i] * t).sum());
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

#[test]
fn criterion_02_linear_generator_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (dz, dy, rows) = (4, 3, 16);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let a: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..dz + dy).map(|_| rng.random_range(-0.3..0.3)).collect())
            .collect();
        let mut x_star: Vec<f64> = (0..dz).map(|_| rng.random_range(-0.8..0.8)).collect();
        x_star.extend((0..dy).map(|_| rng.random_range(0.2..0.8)));
        // target = A x* + r with r orthogonal to range(A), so x* is the optimum
        let v: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.2..0.2)).collect();
        let coef = least_squares(&a, &v);
        let target: Vec<f64> = (0..rows)
            .map(|i| {
                let dot = |w: &[f64]| a[i].iter().zip(w).map(|(p, q)| p * q).sum::<f64>();
                dot(&x_star) + v[i] - dot(&coef)
            })
            .collect();
        let x = least_squares(&a, &target);

        let spec = GeneratorSpec {
            latent_dim: dz,
            cond_dim: dy,
            image_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::ConcatChannels { side: vec![dy] },
                LayerSpec::Dense {
                    inputs: dz + dy,
                    outputs: rows,
                },
                LayerSpec::Reshape {
                    shape: vec![1, 4, 4],
                },
            ],
            linear_output: true,
        };
        let mut params = ParameterSet::new();
        params
            .push(
                "1.weight",
                Tensor::new(vec![rows, dz + dy], a.concat()).unwrap(),
            )
            .unwrap();
        params.push("1.bias", Tensor::zeros(&[rows])).unwrap();
        let meta = CheckpointMetadata {
            seed: 0,
            provenance: "linear".into(),
            format_version: CHECKPOINT_VERSION,
        };
        let g = GeneratorCheckpoint::from_parts(spec, params, meta).unwrap();
        let cfg = RecoveryConfig {
            use_regularizer: false,
            max_iterations: 50_000,
            plateau_window: 0,
            rng_seed: trial,
            ..RecoveryConfig::default()
        };
        let r = recover(&Tensor::new(vec![1, 4, 4], target).unwrap(), &g, &cfg).unwrap();
        let got: Vec<f64> = r.z_p.data().iter().chain(r.y_p.data()).copied().collect();
        worst = got
            .iter()
            .zip(&x)
            .fold(worst, |w, (p, q)| w.max((p - q).abs()));
    }
    let pass = worst < 1e-6;
    report(
        2,
        pass,
        &format!(
            "max |x_p - x_ls| = {worst:.2e} over 5 generators; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_self_recovery() {
    let targets = &split().0;
    let suite = generated_reg();
    let acc = accuracy(targets, &suite.results);
    let mses: Vec<f64> = suite.results.iter().map(|r| r.recon_mse).collect();
    let med = median(&mses).unwrap();
    let max_iters = suite.results.iter().map(|r| r.iterations).max().unwrap();
    let pass = acc >= 0.99 && med < 1e-2 && max_iters <= 10_000 && suite.seconds <= 600.0;
    report(
        3,
        pass,
        &format!("{} targets: accuracy {acc:.4}, median mse {med:.2e}, max iterations {max_iters}, {:.0}s", targets.len(), suite.seconds),
    );
    assert!(pass);
}

#[test]
fn criterion_04_loss_curve_shape() {
    let g = generator();
    let targets = generate_targets(g, 50, 404).unwrap();
    let cfg = RecoveryConfig {
        max_iterations: 10_000,
        trace_stride: 10,
        rng_seed: 4,
        ..RecoveryConfig::default()
    };
    let results: Vec<_> = recover_batch(&targets, g, &cfg)
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let at = |it: u64| {
        median(
            &results
                .iter()
                .map(|r| r.trace.at(it).unwrap().recon_mse)
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let (a, b, c) = (at(10), at(1_000), at(10_000));
    let pass = a > b && b > c;
    report(
        4,
        pass,
        &format!("median per-pixel loss at 10 / 1000 / 10000: {a:.3e} / {b:.3e} / {c:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_generated_vs_real_gap() {
    let (generated, real) = split();
    let (g, r) = (generated_reg(), real_reg());
    let g_loss = mean(g.results.iter().map(|x| x.recon_mse));
    let r_loss = mean(r.results.iter().map(|x| x.recon_mse));
    let g_acc = accuracy(generated, &g.results);
    let r_acc = accuracy(real, &r.results);
    let pass = r_loss > g_loss && r_acc < g_acc;
    report(5, pass, &format!("loss generated {g_loss:.4} vs real {r_loss:.4}; accuracy generated {g_acc:.4} vs real {r_acc:.4}"));
    assert!(pass);
}

#[test]
fn criterion_06_regularization_gap_on_real() {
    let real = &split().1;
    let with = accuracy(real, &real_reg().results);
    let without = accuracy(real, &real_noreg().results);
    let pass = real.len() >= 200 && with >= without;
    report(
        6,
        pass,
        &format!(
            "{} real images: with regularizer {with:.4}, without {without:.4}, gap {:+.2} points",
            real.len(),
            100.0 * (with - without)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_regularizer_neutral_on_generated() {
    let generated = &split().0;
    let with = accuracy(generated, &generated_reg().results);
    let without = accuracy(generated, &generated_noreg().results);
    let diff = (with - without).abs();
    let pass = diff <= 0.01 + 1e-12;
    report(
        7,
        pass,
        &format!(
            "{} generated: with {with:.4}, without {without:.4}, |diff| {:.2} points",
            generated.len(),
            100.0 * diff
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_feasibility_invariants() {
    let g = generator();
    let target = &split().1[0].pixels;
    let cfg = RecoveryConfig {
        plateau_window: 0,
        trace_stride: 10_000,
        rng_seed: 8,
        ..RecoveryConfig::default()
    };
    let mut violations = 0u64;
    let mut events = 0u64;
    let mut halvings = Vec::new();
    let mut last_step = None;
    recover_observed(target, g, &cfg, None, &mut |e| {
        events += 1;
        violations += e
            .z_p
            .data()
            .iter()
            .filter(|v| !(-1.0..=1.0).contains(*v))
            .count() as u64;
        violations += e
            .y_p
            .data()
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count() as u64;
        if e.iteration == 0 && e.y_p.data().iter().any(|&v| v != 0.0) {
            violations += 1;
        }
        if let Some(step) = e.step {
            if last_step.is_some_and(|s| s != step) {
                // e.iteration counts completed updates; the update index is one less
                halvings.push((e.iteration - 1, step));
            }
            last_step = Some(step);
        }
    })
    .unwrap();
    let halving_ok = halvings == vec![(50_000, (0.5, 0.5))];
    let pass = violations == 0 && halving_ok && events == 100_001;
    report(
        8,
        pass,
        &format!("{events} probe states, {violations} violations, step changes {halvings:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let targets = generate_targets(generator(), 4, 909).unwrap();
    let set = dir.path().join("targets.json");
    save_image_set(&set, &targets).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cgan-inversion"))
            .args(["recover", "--ckpt"])
            .arg(asset_path())
            .arg("--targets")
            .arg(&set)
            .args([
                "--max-iters",
                "300",
                "--trace-stride",
                "7",
                "--seed",
                "5",
                "--jobs",
                "2",
                "--out",
            ])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut files: Vec<_> = fs::read_dir(a.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    let mut identical = !files.is_empty();
    for f in &files {
        identical &= fs::read(a.join("traces").join(f)).unwrap()
            == fs::read(b.join("traces").join(f)).unwrap();
    }
    identical &=
        fs::read(a.join("results.json")).unwrap() == fs::read(b.join("results.json")).unwrap();
    identical &=
        fs::read(a.join("records.csv")).unwrap() == fs::read(b.join("records.csv")).unwrap();
    report(
        9,
        identical,
        &format!(
            "{} trace files, results.json and records.csv compared byte for byte",
            files.len()
        ),
    );
    assert!(identical);
}

#[test]
fn criterion_10_initial_loss_sanity() {
    let g0 = mean(generated_reg().results.iter().map(|r| r.initial_recon_mse));
    let r0 = mean(real_reg().results.iter().map(|r| r.initial_recon_mse));
    let in_range = |v: f64| (0.1..=1.5).contains(&v);
    let pass = in_range(g0) && in_range(r0);
    report(10, pass, &format!("mean iteration-0 per-pixel loss: generated {g0:.4}, real {r0:.4} (reference range 0.58 to 0.61)"));
    assert!(pass);
}
