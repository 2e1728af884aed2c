use super::*;
use crate::dataset::{synth_glyphs, GlyphConfig};

fn tiny() -> (GeneratorSpec, DiscriminatorSpec, Vec<LabeledImage>) {
    let glyphs = GlyphConfig {
        classes: 3,
        ..GlyphConfig::default()
    };
    let data = synth_glyphs(&glyphs, 4, 11).unwrap();
    (
        GeneratorSpec::dcgan32(6, 3, 1, 4),
        DiscriminatorSpec::dcgan32(1, 3, 2),
        data,
    )
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        steps_per_epoch: Some(2),
        ..TrainConfig::default()
    }
}

#[test]
fn broadcast_label_planes() {
    let planes = broadcast_label(&Tensor::one_hot(3, 1), 2, 2).unwrap();
    assert_eq!(planes.shape(), &[3, 2, 2]);
    assert_eq!(
        planes.data(),
        &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn broadcast_label_rejects_non_one_hot() {
    for y in [
        vec![0.5, 0.5, 0.0],
        vec![1.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0],
        vec![1.0, -0.0, 2.0],
    ] {
        assert!(matches!(
            broadcast_label(&Tensor::vector(y), 2, 2),
            Err(Error::Shape(_))
        ));
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for batch_size in [0, 1, 3, 7] {
        let cfg = TrainConfig {
            batch_size,
            ..TrainConfig::default()
        };
        assert!(
            matches!(cfg.validate(), Err(Error::Config(_))),
            "batch {batch_size}"
        );
    }
    let cfg: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"batch": 4}"#);
    assert!(cfg.is_err());
}

#[test]
fn discriminator_spec_checks() {
    assert!(DiscriminatorSpec::compact().build_network().is_ok());
    let mut spec = DiscriminatorSpec::compact();
    spec.layers.pop();
    assert!(matches!(spec.build_network(), Err(Error::InvalidSpec(_))));
    let mut spec = DiscriminatorSpec::compact();
    spec.layers.remove(0);
    assert!(matches!(spec.build_network(), Err(Error::InvalidSpec(_))));
}

#[test]
fn untrained_discriminator_is_near_chance() {
    let (g, d, data) = tiny();
    let trainer = Trainer::new(g, &d, tiny_config()).unwrap();
    let mut correct = 0;
    let mut total = 0;
    for img in &data {
        let p = trainer.score(&img.pixels, img.label).unwrap();
        correct += usize::from(p > 0.5);
        let fake = trainer
            .generator()
            .generate(&Tensor::filled(&[6], 0.3), &Tensor::one_hot(3, img.label))
            .unwrap();
        let q = trainer.score(&fake, img.label).unwrap();
        correct += usize::from(q <= 0.5);
        total += 2;
    }
    let acc = correct as f64 / total as f64;
    assert!((0.25..=0.75).contains(&acc), "accuracy {acc}");
}

#[test]
fn training_is_deterministic_and_writes_outputs() {
    let (g, d, data) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (a, report) = train(
        g.clone(),
        &d,
        &data,
        &tiny_config(),
        Some(dir.path()),
        &mut |_| {},
    )
    .unwrap();
    let (b, _) = train(g, &d, &data, &tiny_config(), None, &mut |_| {}).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(report.epochs.len(), 2);
    assert!(report
        .epochs
        .iter()
        .all(|e| e.steps == 2 && e.d_loss.is_finite() && e.g_loss.is_finite()));
    let ckpt = report.final_checkpoint.unwrap();
    assert_eq!(
        GeneratorCheckpoint::load(&ckpt).unwrap().params(),
        a.params()
    );
    assert!(dir.path().join("training.csv").exists());
    let grid = imageio::read_pnm(&report.sample_grids[0]).unwrap();
    assert_eq!(grid.shape(), &[1, 3 * 32, 8 * 32]);
}

#[test]
fn training_moves_parameters() {
    let (g, d, data) = tiny();
    let mut trainer = Trainer::new(g, &d, tiny_config()).unwrap();
    let init = trainer.generator().params().clone();
    let batch: Vec<&LabeledImage> = data.iter().take(2).collect();
    let st = trainer.step(&batch).unwrap();
    assert!(st.d_loss > 0.0 && st.g_loss > 0.0);
    assert_ne!(trainer.generator().params(), &init);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut params = ParameterSet::new();
    params.push("w", Tensor::vector(vec![3.0, -2.0])).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        beta1: 0.9,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&params, &cfg);
    for _ in 0..2000 {
        let mut g = params.zeros_like();
        for (gi, wi) in g
            .tensor_mut(0)
            .data_mut()
            .iter_mut()
            .zip(params.tensor(0).data())
        {
            *gi = 2.0 * wi;
        }
        adam.step(&mut params, &g);
    }
    assert!(
        params.tensor(0).data().iter().all(|w| w.abs() < 1e-3),
        "{:?}",
        params.tensor(0)
    );
}

#[test]
fn bce_gradient_matches_difference_quotient() {
    for &(p, t) in &[(0.3, 1.0), (0.8, 0.0), (0.5, 1.0)] {
        let h = 1e-6;
        let fd = (bce(p + h, t) - bce(p - h, t)) / (2.0 * h);
        assert!((fd - bce_grad(p, t)).abs() < 1e-6);
    }
}

#[test]
fn too_small_dataset_is_rejected() {
    let (g, d, data) = tiny();
    let cfg = TrainConfig {
        batch_size: 64,
        ..tiny_config()
    };
    assert!(matches!(
        train(g, &d, &data, &cfg, None, &mut |_| {}),
        Err(Error::Dataset(_))
    ));
}
