use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vib_core::diff::Tensor;
use vib_core::model::{tempered_softmax, BaselineConfig, BaselineModel, DecoderWeights, Model, VibConfig, VibModel};
use vib_core::modelfile::{load_model, save_model};
use vib_core::training::argmax;

fn golden_config() -> VibConfig {
    VibConfig {
        input_dim: 6,
        hidden: vec![8],
        latent_dim: 2,
        marginal_components: 3,
        decoder_components: 2,
        class_count: 3,
        ..VibConfig::default()
    }
}

fn golden_input() -> Tensor<f64> {
    Tensor::new(vec![1, 6], (0..6).map(|i| 0.15 * i as f64).collect()).unwrap()
}

#[test]
fn encoding_is_regression_locked() {
    let m = VibModel::<f64>::init(golden_config(), 42).unwrap();
    let e = m.encode(&golden_input()).unwrap();
    assert_eq!(e.mean.data(), &[-0.41173968205980455, -0.3602552172832135]);
    assert_eq!(e.chol.data(), &[1.0337550925685373, 0.0, 0.005517167830095631, 1.0334524863284342]);
}

#[test]
fn identical_inputs_encode_identically() {
    let m = VibModel::<f64>::init(golden_config(), 3).unwrap();
    let row: Vec<f64> = golden_input().into_data();
    let x = Tensor::new(vec![2, 6], [row.clone(), row].concat()).unwrap();
    let e = m.encode(&x).unwrap();
    assert_eq!(e.mean.row(0), e.mean.row(1));
    assert_eq!(&e.chol.data()[..4], &e.chol.data()[4..]);
}

#[test]
fn predictions_are_distributions_for_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let config = VibConfig {
            input_dim: 5,
            hidden: vec![rng.random_range(1..6)],
            latent_dim: rng.random_range(1..4),
            marginal_components: rng.random_range(1..5),
            decoder_components: rng.random_range(1..4),
            class_count: rng.random_range(2..6),
            decoder_weights: if i % 3 == 0 { DecoderWeights::Constant } else { DecoderWeights::Affine },
            ..VibConfig::default()
        };
        let mut m = VibModel::<f64>::init(config, i).unwrap();
        for t in m.params_mut() {
            for v in t.data_mut() {
                *v += rng.random::<f64>() - 0.5;
            }
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let p = m.predict(&x, 1 + i as usize % 8, i).unwrap();
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn predict_is_prefix_of_batch_evaluation() {
    let m = VibModel::<f64>::init(golden_config(), 5).unwrap();
    let x = golden_input();
    let single = m.predict(x.data(), 12, 77).unwrap();
    let row = x.data().to_vec();
    let batch = Tensor::new(vec![2, 6], [row.clone(), row].concat()).unwrap();
    let ev = m.evaluate(&batch, 12, 77, 0).unwrap();
    assert_eq!(single.as_slice(), ev.probs.row(0));
}

fn random_baseline(seed: u64) -> BaselineModel<f64> {
    BaselineModel::init(
        BaselineConfig {
            input_dim: 4,
            hidden: vec![6],
            class_count: 5,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn baseline_argmax_ignores_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..200 {
        let m = random_baseline(seed);
        let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let logits = m.logits(&Tensor::new(vec![1, 4], x.clone()).unwrap()).unwrap();
        let want = argmax(logits.data());
        for t in [0.5, 1.0, 100.0] {
            assert_eq!(argmax(&m.predict(&x, t).unwrap()), want);
        }
    }
    // ties resolve to the lowest index at every temperature
    let tied = Tensor::new(vec![1, 3], vec![2.0, 5.0, 5.0]).unwrap();
    for t in [0.5, 1.0, 100.0] {
        assert_eq!(argmax(tempered_softmax(&tied, t).unwrap().data()), 1);
    }
}

#[test]
fn huge_temperature_is_uniform() {
    let m = random_baseline(9);
    let p = m.predict(&[0.3, 0.1, 0.9, 0.5], 1e9).unwrap();
    assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-6));
    assert!(m.predict(&[0.3; 4], 0.0).is_err());
    assert!(m.predict(&[0.3; 4], -1.0).is_err());
}

#[test]
fn model_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let vib = Model::Vib(VibModel::<f64>::init(golden_config(), 8).unwrap());
    save_model(&vib, &path).unwrap();
    let back: Model<f64> = load_model(&path).unwrap();
    assert_eq!(back, vib);
    let (Model::Vib(a), Model::Vib(b)) = (&vib, &back) else { panic!("kind changed") };
    let x = golden_input();
    assert_eq!(a.predict(x.data(), 16, 1).unwrap(), b.predict(x.data(), 16, 1).unwrap());

    let base = Model::Baseline(random_baseline(4));
    save_model(&base, &path).unwrap();
    assert_eq!(load_model::<f64>(&path).unwrap(), base);
    assert!(load_model::<f64>(&dir.path().join("missing.json")).is_err());
}
