use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{ParamSet, Role, Scope};
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn single(kind: LayerKind) -> Vec<Layer> {
    vec![Layer::new(kind, Scope::Segment(1), 0)]
}

/// Random (non-identity) values for every parameter, positive variances.
fn random_params(layers: &[Layer], rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for layer in layers {
        for (role, shape) in layer.kind.param_shapes() {
            let t = rand_tensor(rng, &shape);
            let t = if role == Role::BnVar { t.map(|v| v.abs() + 0.5) } else { t };
            p.insert(layer.id(role), t);
        }
    }
    p
}

/// Scalar objective `sum(r * f(x))` so every output element gets a distinct
/// upstream gradient.
fn objective(layers: &[Layer], params: &ParamSet, x: &Tensor, r: &Tensor) -> f64 {
    let (y, _) = forward(layers, params, x, Mode::Train).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn grad_check(kind: LayerKind, in_shape: &[usize], seed: u64) {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = single(kind.clone());
    let params = random_params(&layers, &mut rng);
    let x = rand_tensor(&mut rng, in_shape);
    let (y, cache) = forward(&layers, &params, &x, Mode::Train).unwrap();
    let r = rand_tensor(&mut rng, y.shape());
    let (gx, gp) = backward(&layers, &params, &cache, &r).unwrap();

    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        numeric[i] = (objective(&layers, &params, &xp, &r) - objective(&layers, &params, &xm, &r)) / (2.0 * H);
    }
    let e = rel_err(gx.data(), &numeric);
    assert!(e < 1e-3, "{} input grad rel err {e} (seed {seed})", kind.name());

    let learnable: Vec<_> = params.keys().filter(|id| id.role.is_learnable()).copied().collect();
    assert_eq!(gp.keys().copied().collect::<Vec<_>>(), learnable);
    for id in learnable {
        let base = params.get(&id).unwrap();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut pp = params.clone();
            pp.get_mut(&id).unwrap().data_mut()[i] += H;
            let mut pm = params.clone();
            pm.get_mut(&id).unwrap().data_mut()[i] -= H;
            numeric[i] = (objective(&layers, &pp, &x, &r) - objective(&layers, &pm, &x, &r)) / (2.0 * H);
        }
        let got = gp.get(&id).unwrap();
        assert_eq!(got.shape(), base.shape());
        let e = rel_err(got.data(), &numeric);
        assert!(e < 1e-3, "{id} grad rel err {e} (seed {seed})");
    }
}

#[test]
fn finite_difference_every_layer_kind() {
    let cases: Vec<(LayerKind, Vec<usize>)> = vec![
        (LayerKind::conv3x3(2, 3), vec![2, 2, 5, 5]),
        (
            LayerKind::Conv2d {
                in_ch: 2,
                out_ch: 2,
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            vec![2, 2, 4, 6],
        ),
        (LayerKind::Dense { in_dim: 5, out_dim: 4 }, vec![3, 5]),
        (LayerKind::batch_norm(3), vec![4, 3, 2, 2]),
        (LayerKind::batch_norm(4), vec![5, 4]),
        (LayerKind::ReLU, vec![3, 7]),
        (LayerKind::MaxPool2d { kernel: 2, stride: 2 }, vec![2, 2, 4, 4]),
        (LayerKind::GlobalAvgPool, vec![2, 3, 3, 2]),
        (LayerKind::Flatten, vec![2, 2, 3, 1]),
    ];
    for (kind, shape) in cases {
        for seed in 0..5 {
            grad_check(kind.clone(), &shape, seed);
        }
    }
}

#[test]
fn stacked_network_gradients() {
    let layers = vec![
        Layer::new(LayerKind::conv3x3(1, 2), Scope::Segment(1), 0),
        Layer::new(LayerKind::batch_norm(2), Scope::Segment(1), 1),
        Layer::new(LayerKind::ReLU, Scope::Segment(1), 2),
        Layer::new(LayerKind::MaxPool2d { kernel: 2, stride: 2 }, Scope::Segment(1), 3),
        Layer::new(LayerKind::GlobalAvgPool, Scope::Exit(1), 0),
        Layer::new(LayerKind::Dense { in_dim: 2, out_dim: 3 }, Scope::Exit(1), 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = random_params(&layers, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 1, 4, 4]);
    let labels = [0, 2, 1];
    let loss = |p: &ParamSet| {
        let (y, _) = forward(&layers, p, &x, Mode::Train).unwrap();
        cross_entropy(&y, &labels).unwrap().0
    };
    let (y, cache) = forward(&layers, &params, &x, Mode::Train).unwrap();
    let (_, g) = cross_entropy(&y, &labels).unwrap();
    let (_, grads) = backward(&layers, &params, &cache, &g).unwrap();
    let id = layers[0].id(Role::ConvW);
    let analytic = grads.get(&id).unwrap();
    let mut numeric = vec![0.0; analytic.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut pp = params.clone();
        pp.get_mut(&id).unwrap().data_mut()[i] += 1e-5;
        let mut pm = params.clone();
        pm.get_mut(&id).unwrap().data_mut()[i] -= 1e-5;
        *n = (loss(&pp) - loss(&pm)) / 2e-5;
    }
    assert!(rel_err(analytic.data(), &numeric) < 1e-3);
}

#[test]
fn identity_kernel_passes_input_through() {
    let layers = single(LayerKind::Conv2d {
        in_ch: 1,
        out_ch: 1,
        kernel: 1,
        stride: 1,
        padding: 0,
    });
    let mut p = ParamSet::new();
    p.insert(layers[0].id(Role::ConvW), Tensor::full(&[1, 1, 1, 1], 1.0));
    p.insert(layers[0].id(Role::ConvB), Tensor::zeros(&[1]));
    let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.3 - 1.0);
    let (y, _) = forward(&layers, &p, &x, Mode::Eval).unwrap();
    assert_eq!(y, x);
}

#[test]
fn zero_input_gives_bias_planes() {
    let layers = single(LayerKind::conv3x3(2, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = random_params(&layers, &mut rng);
    p.insert(layers[0].id(Role::ConvB), Tensor::from_vec(vec![0.5, -1.0, 2.0]));
    let (y, _) = forward(&layers, &p, &Tensor::zeros(&[1, 2, 4, 4]), Mode::Eval).unwrap();
    for (c, plane) in y.data().chunks(16).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }
}

#[test]
fn maxpool_matches_nested_loop_oracle() {
    let layers = single(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
    let x = Tensor::new(vec![1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
    let (y, _) = forward(&layers, &ParamSet::new(), &x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
}

#[test]
fn relu_blocks_gradient_at_negative_preactivation() {
    let layers = single(LayerKind::ReLU);
    let x = Tensor::from_vec(vec![-1.0]).reshape(&[1, 1]).unwrap();
    let (_, cache) = forward(&layers, &ParamSet::new(), &x, Mode::Train).unwrap();
    let g = Tensor::from_vec(vec![5.0]).reshape(&[1, 1]).unwrap();
    let (gx, grads) = backward(&layers, &ParamSet::new(), &cache, &g).unwrap();
    assert_eq!(gx.data(), &[0.0]);
    assert!(grads.is_empty());
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let layers = single(LayerKind::Dense { in_dim: 3, out_dim: 2 });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_params(&layers, &mut rng);
    let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 1.5]).unwrap();
    let (_, cache) = forward(&layers, &p, &x, Mode::Train).unwrap();
    let gy = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
    let (_, grads) = backward(&layers, &p, &cache, &gy).unwrap();
    let gw = grads.get(&layers[0].id(Role::FcW)).unwrap();
    assert_eq!(gw.data(), &[1.5, -6.0, 4.5, -0.5, 2.0, -1.5]);
}

#[test]
fn shape_mismatch_names_layer_and_shapes() {
    let layers = single(LayerKind::conv3x3(3, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = random_params(&layers, &mut rng);
    let err = forward(&layers, &p, &Tensor::zeros(&[1, 2, 5, 5]), Mode::Eval).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("seg1.0"), "{msg}");
    assert!(msg.contains("[1, 2, 5, 5]"), "{msg}");
}

#[test]
fn backward_rejects_eval_cache() {
    let layers = single(LayerKind::ReLU);
    let x = Tensor::zeros(&[1, 2]);
    let (y, cache) = forward(&layers, &ParamSet::new(), &x, Mode::Eval).unwrap();
    assert!(matches!(
        backward(&layers, &ParamSet::new(), &cache, &y),
        Err(crate::error::Error::CacheMismatch(_))
    ));
}

#[test]
fn eval_forward_is_bit_reproducible() {
    let layers = vec![
        Layer::new(LayerKind::conv3x3(1, 4), Scope::Segment(1), 0),
        Layer::new(LayerKind::batch_norm(4), Scope::Segment(1), 1),
        Layer::new(LayerKind::ReLU, Scope::Segment(1), 2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(&layers, &mut rng);
    let x = rand_tensor(&mut rng, &[3, 1, 6, 6]);
    let (a, _) = forward(&layers, &p, &x, Mode::Eval).unwrap();
    let (b, _) = forward(&layers, &p, &x, Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn running_stats_follow_momentum() {
    let layers = single(LayerKind::batch_norm(1));
    let mut p = init_params(&layers, &mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let (_, cache) = forward(&layers, &p, &x, Mode::Train).unwrap();
    commit_running_stats(&layers, &mut p, &cache).unwrap();
    // batch mean 3, unbiased variance 14/3
    let mean = p.get(&layers[0].id(Role::BnMean)).unwrap().data()[0];
    let var = p.get(&layers[0].id(Role::BnVar)).unwrap().data()[0];
    assert!((mean - 0.3).abs() < 1e-15);
    assert!((var - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn cross_entropy_reference_values() {
    let uniform = Tensor::zeros(&[1, 10]);
    let (l, _) = cross_entropy(&uniform, &[3]).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-9);

    let two = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let (l, _) = cross_entropy(&two, &[1]).unwrap();
    assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.313262).abs() < 1e-6);

    let mut sat = vec![0.0; 10];
    sat[4] = 30.0;
    let (l, _) = cross_entropy(&Tensor::new(vec![1, 10], sat).unwrap(), &[4]).unwrap();
    assert!(l < 1e-9);

    assert!(matches!(
        cross_entropy(&uniform, &[10]),
        Err(crate::error::Error::LabelOutOfRange { label: 10, classes: 10 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = rand_tensor(&mut rng, &[4, 5]);
    let labels = [0, 4, 2, 2];
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    for i in 0..logits.len() {
        let mut lp = logits.clone();
        lp.data_mut()[i] += 1e-5;
        let mut lm = logits.clone();
        lm.data_mut()[i] -= 1e-5;
        let n = (cross_entropy(&lp, &labels).unwrap().0 - cross_entropy(&lm, &labels).unwrap().0) / 2e-5;
        assert!((n - g.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = rand_tensor(&mut rng, &[20, 7]).scale(40.0);
    let s = softmax_rows(&logits).unwrap();
    for row in s.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn scalar_set(v: f64) -> (ParamSet, crate::params::LayerId) {
    let id = crate::params::LayerId::new(Scope::Segment(1), 0, Role::FcB);
    let mut p = ParamSet::new();
    p.insert(id, Tensor::scalar(v));
    (p, id)
}

#[test]
fn adam_first_step_hand_calculation() {
    let (mut p, id) = scalar_set(0.0);
    let (g, _) = scalar_set(1.0);
    let mut st = AdamState::new(AdamConfig::default());
    st.step(&mut p, &g).unwrap();
    let theta = p.get(&id).unwrap().data()[0];
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    assert!((theta + 0.001 / (1.0 + 1e-8)).abs() < 1e-9);
    assert!((theta + 0.001).abs() < 1e-9);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_zero_gradient_and_zero_lr_are_no_ops() {
    let (mut p, id) = scalar_set(0.7);
    let (zero, _) = scalar_set(0.0);
    let mut st = AdamState::new(AdamConfig::default());
    st.step(&mut p, &zero).unwrap();
    assert_eq!(p.get(&id).unwrap().data()[0], 0.7);

    let (g, _) = scalar_set(-3.0);
    let mut st = AdamState::new(AdamConfig::with_lr(0.0));
    let before = p.clone();
    st.step(&mut p, &g).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_moves_against_gradient_sign() {
    let (mut p, id) = scalar_set(1.0);
    let (g, _) = scalar_set(2.0);
    let mut st = AdamState::new(AdamConfig::default());
    st.step(&mut p, &g).unwrap();
    let one = p.get(&id).unwrap().data()[0];
    st.step(&mut p, &g).unwrap();
    let two = p.get(&id).unwrap().data()[0];
    assert!(one < 1.0 && two < one);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let (mut p, id) = scalar_set(0.0);
    let mut g = ParamSet::new();
    g.insert(id, Tensor::zeros(&[2]));
    let mut st = AdamState::new(AdamConfig::default());
    assert!(st.step(&mut p, &g).is_err());
    assert_eq!(st.step_count(), 0);
}
