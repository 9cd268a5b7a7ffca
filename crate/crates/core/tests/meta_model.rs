//! Structural properties of the meta-model forward pass.

use icsid::backend::{Tape, Tensor};
use icsid::datagen::{sample_dataset, sample_rng, DatasetSample, Domain, StreamConfig};
use icsid::model::{param_count, BatchInputs, MetaModel, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn tiny_stream(seed: u64) -> StreamConfig {
    StreamConfig {
        m: 16,
        n: 12,
        n_in: 2,
        b: 2,
        seed,
        ..StreamConfig::default()
    }
}

fn samples(cfg: &StreamConfig, count: u64) -> Vec<DatasetSample> {
    (0..count)
        .map(|i| sample_dataset(&mut sample_rng(cfg.seed, Domain::Train, 0, i), cfg).unwrap())
        .collect()
}

fn model64(cfg: &ModelConfig, seed: u64) -> MetaModel<f64> {
    MetaModel::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn tiny_forward_is_finite_with_ten_outputs() {
    let m = MetaModel::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = samples(&tiny_stream(0), 3);
    let preds = m.predict_inputs(&BatchInputs::from_samples(&s).unwrap()).unwrap();
    assert_eq!(preds.len(), 3);
    for p in &preds {
        assert_eq!((p.mu.len(), p.sigma.len()), (10, 10));
        assert!(p.mu.iter().chain(&p.sigma).all(|v| v.is_finite()));
    }
}

#[test]
fn query_perturbations_never_reach_earlier_predictions() {
    let cfg = ModelConfig::tiny();
    let stream = tiny_stream(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let model = model64(&cfg, trial);
        let base = samples(&StreamConfig { seed: trial, ..stream.clone() }, 1);
        let t = rng.random_range(cfg.n_in..stream.n);
        let mut pert = base.clone();
        pert[0].qry_u[t] += rng.random_range(0.5f32..2.0);
        let a = &model.predict_inputs(&BatchInputs::from_samples(&base).unwrap()).unwrap()[0];
        let b = &model.predict_inputs(&BatchInputs::from_samples(&pert).unwrap()).unwrap()[0];
        let k = t - cfg.n_in;
        for j in 0..k {
            assert!((a.mu[j] - b.mu[j]).abs() <= 1e-10 && (a.sigma[j] - b.sigma[j]).abs() <= 1e-10);
        }
        assert!((a.mu[k] - b.mu[k]).abs() > 0.0, "position {t} itself must react");
    }
}

#[test]
fn patch_embeddings_are_local() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let model = MetaModel::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
        let u: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = rng.random_range(0..4);
        let (mut u2, mut y2) = (u.clone(), y.clone());
        let pos = j * 4 + rng.random_range(0..4);
        u2[pos] += 0.7;
        y2[pos] -= 0.3;
        let a = model.embed_context(&u, &y).unwrap();
        let b = model.embed_context(&u2, &y2).unwrap();
        assert_eq!(a.shape(), &[4, 8]);
        for i in 0..4 {
            if i == j {
                assert_ne!(a.row(i), b.row(i));
            } else {
                assert_eq!(a.row(i), b.row(i));
            }
        }
    }
}

#[test]
fn unpatched_embedding_is_a_plain_linear_map() {
    let cfg = ModelConfig {
        patch_len: 1,
        ..ModelConfig::tiny()
    };
    let model = model64(&cfg, 4);
    let w = model.params().by_name("ctx_embed.w").unwrap().value.clone();
    let bias = model.params().by_name("ctx_embed.b").unwrap().value.clone();
    let u = [0.3, -1.2, 0.5];
    let y = [1.1, 0.0, -0.4];
    let e = model.embed_context(&u, &y).unwrap();
    for t in 0..3 {
        for c in 0..8 {
            let want = u[t] * w.data()[c] + y[t] * w.data()[8 + c] + bias.data()[c];
            assert!((e.row(t)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_attends_over_patches() {
    let cfg = ModelConfig {
        patch_len: 8,
        ..ModelConfig::tiny()
    };
    let model = model64(&cfg, 5);
    let x = BatchInputs::<f64>::from_samples(&samples(&StreamConfig { m: 64, ..tiny_stream(5) }, 2)).unwrap();
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let p = model.patch_embed(&mut tape, &v, &x.ctx, 2).unwrap();
    assert_eq!(tape.shape(p), &[2 * 8, 8]);
    let z = model.encode::<NoRng>(&mut tape, &v, p, 2, None).unwrap();
    assert_eq!(tape.shape(z), &[2 * 8, 8]);
}

#[test]
fn single_patch_encoder_is_finite() {
    let model = model64(&ModelConfig::tiny(), 6);
    let e = model.embed_context(&[0.1, 0.2, 0.3, 0.4], &[1.0, 0.5, 0.0, -0.5]).unwrap();
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let p = tape.constant(e);
    let z = model.encode::<NoRng>(&mut tape, &v, p, 1, None).unwrap();
    assert_eq!(tape.shape(z), &[1, 8]);
    assert!(tape.value(z).all_finite());
}

#[test]
fn patch_order_matters_to_the_encoder() {
    let model = model64(&ModelConfig::tiny(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Tensor::new(vec![4, 8], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let perm = vec![2, 0, 3, 1];
    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let pv = tape.constant(p);
    let z = model.encode::<NoRng>(&mut tape, &v, pv, 1, None).unwrap();
    let z_perm = tape.gather_rows(z, perm.clone()).unwrap();
    let pp = tape.gather_rows(pv, perm).unwrap();
    let zp = model.encode::<NoRng>(&mut tape, &v, pp, 1, None).unwrap();
    assert!(tape.value(z_perm).max_abs_diff(tape.value(zp)) > 1e-6);
}

#[test]
fn context_changes_predictions() {
    let model = MetaModel::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let s = samples(&tiny_stream(8), 1);
    let mut other = s.clone();
    other[0].ctx_y.iter_mut().for_each(|y| *y = -*y);
    let a = model.predict_inputs(&BatchInputs::from_samples(&s).unwrap()).unwrap();
    let b = model.predict_inputs(&BatchInputs::from_samples(&other).unwrap()).unwrap();
    assert_ne!(a[0].mu, b[0].mu);
}

#[test]
fn batching_matches_single_samples() {
    let model = MetaModel::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let s = samples(&tiny_stream(9), 2);
    let both = model.predict_inputs(&BatchInputs::from_samples(&s).unwrap()).unwrap();
    for i in 0..2 {
        let one = model.predict_inputs(&BatchInputs::from_samples(&s[i..i + 1]).unwrap()).unwrap();
        for (a, b) in one[0].mu.iter().zip(&both[i].mu).chain(one[0].sigma.iter().zip(&both[i].sigma)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn sigma_respects_its_floor_under_extreme_weights() {
    let stream = tiny_stream(10);
    let mut count = 0;
    for trial in 0..1000u64 {
        let mut model = MetaModel::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
        let scale = [1.0f32, 10.0, 100.0][trial as usize % 3];
        for p in model.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|w| *w *= scale);
        }
        let s = samples(&StreamConfig { seed: trial, b: 1, ..stream.clone() }, 1);
        for p in model.predict_inputs(&BatchInputs::from_samples(&s).unwrap()).unwrap() {
            for sg in p.sigma {
                assert!(sg >= 1e-4 && sg > 0.0, "{sg}");
                count += 1;
            }
        }
    }
    assert_eq!(count, 10_000);
}

#[test]
fn patching_adds_rnn_and_projection_but_drops_the_plain_embed() {
    let base = ModelConfig::default();
    let patched = ModelConfig {
        patch_len: 4,
        ..base.clone()
    };
    let d = base.d_model;
    let w = base.n_u + base.n_y;
    let rnn = w * d + d * d + d;
    let proj = d * d + d;
    let plain = w * d + d;
    assert_eq!(param_count(&patched) - param_count(&base), rnn + proj - plain);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let model = MetaModel::<f32>::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let x = BatchInputs::from_samples(&samples(&tiny_stream(11), 4)).unwrap();
    let a = model.predict_inputs(&x).unwrap();
    let b = model.predict_inputs(&x).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parameter_count_is_a_function_of_config(d_heads in 1usize..4, heads in 1usize..4, layers in 1usize..3, l in 1usize..4) {
        let cfg = ModelConfig {
            d_model: d_heads * heads * 2,
            n_heads: heads,
            n_layers: layers,
            d_ff: 16,
            n_in: 2,
            patch_len: l,
            ..ModelConfig::default()
        };
        let m = MetaModel::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(m.param_count(), param_count(&cfg));
        prop_assert_eq!(cfg.param_count(), param_count(&cfg));
    }
}
