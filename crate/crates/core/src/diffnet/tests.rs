use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn params_from(net: &Network, values: Vec<Vec<f64>>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for ((name, shape), data) in net.param_layout().iter().zip(values) {
        p.push(name.clone(), Tensor::new(shape.clone(), data).unwrap())
            .unwrap();
    }
    p
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn small_net() -> Network {
    Network::new(
        &[3],
        vec![
            LayerSpec::ConcatChannels { side: vec![2] },
            LayerSpec::Dense {
                inputs: 5,
                outputs: 8,
            },
            LayerSpec::Reshape {
                shape: vec![2, 2, 2],
            },
            LayerSpec::AffineNorm { channels: 2 },
            LayerSpec::leaky_relu(),
            LayerSpec::TransposedConv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 4,
                stride: 2,
                padding: 1,
                output_size: [4, 4],
            },
            LayerSpec::Tanh,
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Sigmoid,
        ],
    )
    .unwrap()
}

#[test]
fn dense_identity() {
    let net = Network::new(
        &[2],
        vec![LayerSpec::Dense {
            inputs: 2,
            outputs: 2,
        }],
    )
    .unwrap();
    let params = params_from(&net, vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]]);
    let y = net
        .eval(&params, &Tensor::vector(vec![3.0, -1.0]), None)
        .unwrap();
    assert_eq!(y.data(), &[3.0, -1.0]);
}

#[test]
fn tanh_at_zero() {
    let net = Network::new(&[1], vec![LayerSpec::Tanh]).unwrap();
    let params = ParameterSet::new();
    let (y, mut tape) = net
        .forward(&params, &Tensor::vector(vec![0.0]), None)
        .unwrap();
    assert_eq!(y.data(), &[0.0]);
    let g = tape.backward(&Tensor::vector(vec![1.0])).unwrap();
    assert_eq!(g.inputs.input.data(), &[1.0]);
}

#[test]
fn dense_backward_closed_form() {
    let net = Network::new(
        &[3],
        vec![LayerSpec::Dense {
            inputs: 3,
            outputs: 2,
        }],
    )
    .unwrap();
    let w = vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
    let params = params_from(&net, vec![w.clone(), vec![0.1, -0.2]]);
    let x = vec![0.5, -2.0, 1.5];
    let gy = vec![2.0, -3.0];
    let (_, mut tape) = net
        .forward(&params, &Tensor::vector(x.clone()), None)
        .unwrap();
    let grads = tape.backward(&Tensor::vector(gy.clone())).unwrap();
    // W^T g
    let expect_gx: Vec<f64> = (0..3).map(|i| w[i] * gy[0] + w[3 + i] * gy[1]).collect();
    assert_eq!(grads.inputs.input.data(), expect_gx.as_slice());
    // g x^T
    let expect_gw: Vec<f64> = (0..2)
        .flat_map(|o| x.iter().map(|&xi| gy[o] * xi).collect::<Vec<_>>())
        .collect();
    assert_eq!(
        grads.params.get("0.weight").unwrap().data(),
        expect_gw.as_slice()
    );
    assert_eq!(grads.params.get("0.bias").unwrap().data(), gy.as_slice());
}

#[test]
fn forward_is_deterministic() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = net.init_params(&mut rng, 0.5);
    let x = random_tensor(&mut rng, &[3]);
    let s = random_tensor(&mut rng, &[2]);
    let a = net.eval(&params, &x, Some(&s)).unwrap();
    let b = net.eval(&params, &x, Some(&s)).unwrap();
    let (c, _) = net.forward(&params, &x, Some(&s)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), c.data());
}

#[test]
fn tape_is_single_use() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = net.init_params(&mut rng, 0.5);
    let x = random_tensor(&mut rng, &[3]);
    let s = random_tensor(&mut rng, &[2]);
    let (y, mut tape) = net.forward(&params, &x, Some(&s)).unwrap();
    let up = Tensor::filled(y.shape(), 1.0);
    tape.backward_inputs(&up).unwrap();
    assert!(tape.is_consumed());
    assert!(matches!(tape.backward(&up), Err(Error::TapeConsumed)));
}

#[test]
fn upstream_shape_is_checked() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = net.init_params(&mut rng, 0.5);
    let (_, mut tape) = net
        .forward(
            &params,
            &random_tensor(&mut rng, &[3]),
            Some(&random_tensor(&mut rng, &[2])),
        )
        .unwrap();
    assert!(matches!(
        tape.backward(&Tensor::zeros(&[5])),
        Err(Error::Shape(_))
    ));
    // a rejected upstream does not consume the tape
    assert!(!tape.is_consumed());
}

#[test]
fn shape_errors_name_the_layer() {
    let err = Network::new(
        &[4],
        vec![
            LayerSpec::Dense {
                inputs: 4,
                outputs: 8,
            },
            LayerSpec::Reshape {
                shape: vec![2, 2, 2],
            },
            LayerSpec::TransposedConv2d {
                in_channels: 2,
                out_channels: 1,
                kernel: 4,
                stride: 2,
                padding: 1,
                output_size: [5, 5],
            },
        ],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Layer { layer: 2, .. }), "{err}");

    let err = Network::new(
        &[4],
        vec![LayerSpec::Dense {
            inputs: 3,
            outputs: 1,
        }],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Layer { layer: 0, .. }));

    let two_junctions = Network::new(
        &[1],
        vec![
            LayerSpec::ConcatChannels { side: vec![1] },
            LayerSpec::ConcatChannels { side: vec![1] },
        ],
    );
    assert!(matches!(two_junctions, Err(Error::Layer { layer: 1, .. })));
}

#[test]
fn non_finite_intermediate_reports_layer() {
    let net = Network::new(
        &[1],
        vec![
            LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
            },
            LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
            },
        ],
    )
    .unwrap();
    let params = params_from(&net, vec![vec![1e300], vec![0.0], vec![1e300], vec![0.0]]);
    let err = net
        .eval(&params, &Tensor::vector(vec![1.0]), None)
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { layer: 1 }), "{err}");
}

#[test]
fn side_input_is_required_and_checked() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = net.init_params(&mut rng, 0.5);
    let x = random_tensor(&mut rng, &[3]);
    assert!(net.eval(&params, &x, None).is_err());
    assert!(net.eval(&params, &x, Some(&Tensor::zeros(&[3]))).is_err());
    assert!(net
        .eval(&params, &Tensor::zeros(&[4]), Some(&Tensor::zeros(&[2])))
        .is_err());
}

#[test]
fn parameter_layout_is_checked() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = net.init_params(&mut rng, 0.5);
    assert!(net.check_params(&params).is_ok());
    *params.tensor_mut(0) = Tensor::zeros(&[1]);
    assert!(net.check_params(&params).is_err());
    assert!(net.check_params(&ParameterSet::new()).is_err());
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut p = ParameterSet::new();
    p.push("a", Tensor::zeros(&[1])).unwrap();
    assert!(p.push("a", Tensor::zeros(&[2])).is_err());
}

#[test]
fn backward_is_linear_in_upstream() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let params = net.init_params(&mut rng, 0.6);
        let x = random_tensor(&mut rng, &[3]);
        let s = random_tensor(&mut rng, &[2]);
        let out = net.output_shape().to_vec();
        let g1 = random_tensor(&mut rng, &out);
        let g2 = random_tensor(&mut rng, &out);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed = Tensor::new(
            out.clone(),
            g1.data()
                .iter()
                .zip(g2.data())
                .map(|(u, v)| a * u + b * v)
                .collect(),
        )
        .unwrap();
        let run = |g: &Tensor| {
            let (_, mut tape) = net.forward(&params, &x, Some(&s)).unwrap();
            tape.backward(g).unwrap()
        };
        let (r1, r2, rm) = (run(&g1), run(&g2), run(&mixed));
        let close = |m: &Tensor, u: &Tensor, v: &Tensor| {
            for ((&m, &u), &v) in m.data().iter().zip(u.data()).zip(v.data()) {
                assert!(
                    (m - (a * u + b * v)).abs() <= 1e-12,
                    "{m} vs {}",
                    a * u + b * v
                );
            }
        };
        close(&rm.inputs.input, &r1.inputs.input, &r2.inputs.input);
        close(
            rm.inputs.side.as_ref().unwrap(),
            r1.inputs.side.as_ref().unwrap(),
            r2.inputs.side.as_ref().unwrap(),
        );
        for i in 0..rm.params.len() {
            close(
                rm.params.tensor(i),
                r1.params.tensor(i),
                r2.params.tensor(i),
            );
        }
    }
}

#[test]
fn output_shapes_match_validator() {
    let net = small_net();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = net.init_params(&mut rng, 0.5);
    let (y, _) = net
        .forward(
            &params,
            &random_tensor(&mut rng, &[3]),
            Some(&random_tensor(&mut rng, &[2])),
        )
        .unwrap();
    assert_eq!(y.shape(), net.output_shape());
    assert_eq!(net.output_shape(), &[2, 4, 4]);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let net = Network::new(
        &[4],
        vec![
            LayerSpec::Dense {
                inputs: 4,
                outputs: 6,
            },
            LayerSpec::Tanh,
            LayerSpec::Dense {
                inputs: 6,
                outputs: 3,
            },
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = net.init_params(&mut rng, 0.8);
    let x = random_tensor(&mut rng, &[4]);
    let up = random_tensor(&mut rng, &[3]);
    let (_, mut tape) = net.forward(&params, &x, None).unwrap();
    let analytic = tape.backward_inputs(&up).unwrap().input;
    let numeric =
        finite_difference_gradient(|t| net.eval(&params, t, None).unwrap().dot(&up), &x, 1e-5);
    assert!(max_relative_error(analytic.data(), numeric.data()) < 1e-6);
}

#[test]
fn layer_specs_serialize_with_kind_tags() {
    let json = serde_json::to_string(&LayerSpec::leaky_relu()).unwrap();
    assert_eq!(json, r#"{"kind":"leaky_relu","slope":0.2}"#);
    let parsed: LayerSpec = serde_json::from_str(r#"{"kind":"leaky_relu"}"#).unwrap();
    assert_eq!(parsed, LayerSpec::leaky_relu());
}
