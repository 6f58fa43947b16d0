use proptest::prelude::*;

use super::*;

fn random_params(shapes: &LayerShapes, seed: u64) -> AdaptiveParams {
    let mut rng = SeededRng::new(seed);
    let n = shapes.param_count();
    let mut draw = |scale: f64, offset: f64| {
        ParamVector::from_vec((0..n).map(|_| offset + scale * rng.normal()).collect())
    };
    AdaptiveParams {
        a: draw(0.5, 0.0),
        b: draw(0.5, 0.0),
        alpha: draw(0.3, 1.0),
        a_anchor: draw(0.5, 0.0),
        alpha_anchor: draw(0.3, 1.0),
    }
}

fn random_batch(shapes: &LayerShapes, n: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let x = Matrix::new(
        n,
        shapes.proto_dim,
        (0..n * shapes.proto_dim).map(|_| rng.normal()).collect(),
    )
    .unwrap();
    let y = (0..n).map(|_| rng.below(shapes.num_labels)).collect();
    (x, y)
}

#[test]
fn fresh_params_compose_to_a() {
    let shapes = LayerShapes::new(4, 6, 3).unwrap();
    let p = init_adaptive(&shapes, 1);
    assert_eq!(compose(&p).unwrap(), p.a);
    assert!(p.b.as_slice().iter().all(|&v| v == 0.0));
    assert!(p.alpha.as_slice().iter().all(|&v| v == 1.0));
    assert_eq!(p.a_anchor, p.a);
    assert_eq!(p.alpha_anchor, p.alpha);
}

#[test]
fn base_started_params_compose_to_the_base() {
    let shapes = LayerShapes::new(4, 6, 3).unwrap();
    let base = init_adaptive(&shapes, 2).a;
    let p = from_base(base.clone());
    assert_eq!(compose(&p).unwrap(), base);
    assert!(p.a.as_slice().iter().all(|&v| v == 0.0));
    assert_eq!(p.a_anchor, p.a);
    assert_eq!(p.alpha_anchor, p.alpha);
}

#[test]
fn init_is_deterministic() {
    let shapes = LayerShapes::new(4, 6, 3).unwrap();
    assert_eq!(init_adaptive(&shapes, 9), init_adaptive(&shapes, 9));
    assert_ne!(init_adaptive(&shapes, 9), init_adaptive(&shapes, 10));
}

#[test]
fn init_scale_matches_he_normal() {
    let shapes = LayerShapes::new(64, 256, 10).unwrap();
    let p = init_adaptive(&shapes, 3);
    let w1 = p.a.w1(&shapes);
    let mean = w1.iter().sum::<f64>() / w1.len() as f64;
    let std = (w1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w1.len() as f64).sqrt();
    let target = (2.0f64 / 64.0).sqrt();
    assert!((std / target - 1.0).abs() < 0.1, "std {std} vs {target}");
}

#[test]
fn compose_degenerate_cases() {
    let shapes = LayerShapes::new(2, 3, 2).unwrap();
    let mut p = random_params(&shapes, 4);
    p.a = ParamVector::zeros(p.len());
    p.alpha = ParamVector::filled(p.len(), 1.0);
    assert_eq!(compose(&p).unwrap(), p.b);
}

#[test]
fn compose_matches_elementwise_loop() {
    let shapes = LayerShapes::new(3, 4, 5).unwrap();
    let p = random_params(&shapes, 5);
    let theta = compose(&p).unwrap();
    for i in 0..p.len() {
        let expected = p.b.as_slice()[i] * p.alpha.as_slice()[i] + p.a.as_slice()[i];
        assert_eq!(theta.as_slice()[i], expected);
    }
}

#[test]
fn compose_rejects_mismatched_lengths() {
    let shapes = LayerShapes::new(2, 2, 2).unwrap();
    let mut p = init_adaptive(&shapes, 0);
    p.b = ParamVector::zeros(3);
    assert!(matches!(compose(&p), Err(Error::Dimension { .. })));
}

#[test]
fn zero_theta_gives_zero_logits() {
    let shapes = LayerShapes::new(3, 4, 5).unwrap();
    let (x, _) = random_batch(&shapes, 6, 1);
    let cache = forward(&ParamVector::zeros(shapes.param_count()), &shapes, &x).unwrap();
    assert!(cache.logits.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn hand_sized_network() {
    let shapes = LayerShapes::new(2, 2, 2).unwrap();
    // W1 rows are inputs, columns hidden units; W2 rows hidden, columns labels.
    let theta = ParamVector::from_vec(vec![
        1.0, -1.0, 2.0, 0.5, // W1
        0.5, -1.0, // b1
        1.0, 2.0, -1.0, 3.0, // W2
    ]);
    let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
    let cache = forward(&theta, &shapes, &x).unwrap();
    // pre = [0.5 + 1 + 4, -1 - 1 + 1] = [5.5, -1]
    assert_eq!(cache.pre_activations.row(0), &[5.5, -1.0]);
    assert_eq!(cache.hidden.row(0), &[5.5, 0.0]);
    assert_eq!(cache.logits.row(0), &[5.5, 11.0]);
    assert_eq!(embed(&theta, &shapes, &x).unwrap(), cache.hidden);
}

#[test]
fn relu_zeroes_negative_preactivations() {
    let shapes = LayerShapes::new(3, 8, 2).unwrap();
    let p = random_params(&shapes, 2);
    let (x, _) = random_batch(&shapes, 5, 2);
    let cache = forward(&compose(&p).unwrap(), &shapes, &x).unwrap();
    for (pre, hid) in cache
        .pre_activations
        .as_slice()
        .iter()
        .zip(cache.hidden.as_slice())
    {
        if *pre < 0.0 {
            assert_eq!(*hid, 0.0);
        } else {
            assert_eq!(hid, pre);
        }
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let shapes = LayerShapes::new(3, 4, 2).unwrap();
    let x = Matrix::zeros(2, 4);
    assert!(forward(&ParamVector::zeros(shapes.param_count()), &shapes, &x).is_err());
}

#[test]
fn uniform_logits_give_ln_labels() {
    let shapes = LayerShapes::new(3, 4, 7).unwrap();
    let mut p = init_adaptive(&shapes, 0);
    p.a = ParamVector::zeros(p.len());
    p.snapshot_anchors();
    let (x, y) = random_batch(&shapes, 4, 0);
    let lg = loss_and_grad(&p, &shapes, &x, &y, 0.5).unwrap();
    assert!((lg.loss - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_base_has_no_alpha_gradient() {
    let shapes = LayerShapes::new(3, 4, 5).unwrap();
    let p = init_adaptive(&shapes, 8);
    let (x, y) = random_batch(&shapes, 4, 8);
    let lg = loss_and_grad(&p, &shapes, &x, &y, 0.0).unwrap();
    assert!(lg.grad_alpha.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn out_of_range_label() {
    let shapes = LayerShapes::new(3, 4, 5).unwrap();
    let p = init_adaptive(&shapes, 8);
    let (x, _) = random_batch(&shapes, 2, 8);
    assert!(matches!(
        loss_and_grad(&p, &shapes, &x, &[0, 5], 0.0),
        Err(Error::InvalidLabel { label: 5, .. })
    ));
}

/// Central finite differences on every coordinate of `A` and `alpha`.
pub(crate) fn check_gradients(shapes: &LayerShapes, seed: u64, tie_weight: f64) {
    let p = random_params(shapes, seed);
    let (x, y) = random_batch(shapes, 5, seed + 1000);
    let lg = loss_and_grad(&p, shapes, &x, &y, tie_weight).unwrap();
    let h = 1e-5;
    let loss_at = |q: &AdaptiveParams| loss_and_grad(q, shapes, &x, &y, tie_weight).unwrap().loss;
    for idx in 0..p.len() {
        for which in 0..2 {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let (gp, gm) = if which == 0 {
                (&mut plus.a, &mut minus.a)
            } else {
                (&mut plus.alpha, &mut minus.alpha)
            };
            gp.as_mut_slice()[idx] += h;
            gm.as_mut_slice()[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = if which == 0 {
                lg.grad_a.as_slice()[idx]
            } else {
                lg.grad_alpha.as_slice()[idx]
            };
            let err = (fd - analytic).abs();
            assert!(
                err <= 1e-7 || err <= 1e-4 * fd.abs().max(analytic.abs()),
                "seed {seed} coord {idx} ({}): fd {fd} analytic {analytic}",
                if which == 0 { "A" } else { "alpha" }
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let configs = [
        (LayerShapes::new(3, 4, 3).unwrap(), 0.0),
        (LayerShapes::new(2, 5, 4).unwrap(), 0.3),
        (LayerShapes::new(4, 3, 2).unwrap(), 1.0),
        (LayerShapes::new(5, 6, 5).unwrap(), 0.05),
        (LayerShapes::new(3, 3, 6).unwrap(), 2.0),
    ];
    for (i, (shapes, tie)) in configs.iter().enumerate() {
        check_gradients(shapes, i as u64, *tie);
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let shapes = LayerShapes::new(3, 4, 2).unwrap();
    let mut p = random_params(&shapes, 1);
    let before = p.clone();
    let mut state = AdamState::new(p.len());
    let zero = ParamVector::zeros(p.len());
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    adam_step(&mut p, &zero, Some(&zero), &mut state, &cfg).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_closed_form() {
    let shapes = LayerShapes::new(3, 4, 2).unwrap();
    let mut p = random_params(&shapes, 2);
    let before = p.clone();
    let mut rng = SeededRng::new(99);
    let g: Vec<f64> = (0..p.len()).map(|_| rng.normal()).collect();
    let ga: Vec<f64> = (0..p.len()).map(|_| rng.normal()).collect();
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(p.len());
    adam_step(
        &mut p,
        &ParamVector::from_vec(g.clone()),
        Some(&ParamVector::from_vec(ga.clone())),
        &mut state,
        &cfg,
    )
    .unwrap();
    for i in 0..p.len() {
        // Bias-corrected first step: m_hat = g, v_hat = g².
        let a0 = before.a.as_slice()[i];
        let expected = a0 - cfg.lr * (g[i] / (g[i].abs() + cfg.eps) + cfg.weight_decay * a0);
        assert!((p.a.as_slice()[i] - expected).abs() < 1e-15);
        let al0 = before.alpha.as_slice()[i];
        let expected = al0 - cfg.lr * (ga[i] / (ga[i].abs() + cfg.eps) + cfg.weight_decay * al0);
        assert!((p.alpha.as_slice()[i] - expected).abs() < 1e-15);
    }
    assert_eq!(p.b, before.b);
    assert_eq!(p.a_anchor, before.a_anchor);
    assert_eq!(p.alpha_anchor, before.alpha_anchor);
}

#[test]
fn frozen_alpha_is_untouched() {
    let shapes = LayerShapes::new(3, 4, 2).unwrap();
    let mut p = random_params(&shapes, 3);
    let before = p.clone();
    let g = ParamVector::filled(p.len(), 0.5);
    let mut state = AdamState::new(p.len());
    adam_step(&mut p, &g, None, &mut state, &AdamConfig::default()).unwrap();
    assert_eq!(p.alpha, before.alpha);
    assert_ne!(p.a, before.a);
}

#[test]
fn separable_toy_problem_trains() {
    let shapes = LayerShapes::new(4, 16, 2).unwrap();
    let mut p = init_adaptive(&shapes, 21);
    let mut rng = SeededRng::new(5);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..32 {
        let label = i % 2;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        rows.push(
            (0..4)
                .map(|k| if k == 0 { 2.0 * sign } else { 0.0 } + 0.1 * rng.normal())
                .collect::<Vec<_>>(),
        );
        labels.push(label);
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let cfg = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(p.len());
    let b = p.b.clone();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let lg = loss_and_grad(&p, &shapes, &x, &labels, 0.0).unwrap();
        loss = lg.loss;
        adam_step(&mut p, &lg.grad_a, Some(&lg.grad_alpha), &mut state, &cfg).unwrap();
    }
    assert!(loss < 0.1, "loss {loss}");
    assert_eq!(p.b, b);
}

#[test]
fn checkpoint_round_trip() {
    let shapes = LayerShapes::new(3, 4, 5).unwrap();
    let p = random_params(&shapes, 6);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &shapes, &p).unwrap();
    assert_eq!(buf.len(), 8 + 4 + 24 + 4 + 5 * 8 * shapes.param_count());
    assert_eq!(&buf[..8], b"FSTLPRM\0");
    let (s2, p2) = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(s2, shapes);
    assert_eq!(p2, p);

    buf[0] = b'X';
    assert!(read_checkpoint(buf.as_slice()).is_err());
    assert!(read_checkpoint(&[0u8; 3][..]).is_err());
}

proptest! {
    #[test]
    fn compose_is_linear(seed in any::<u64>(), s in -3.0f64..3.0) {
        let shapes = LayerShapes::new(2, 3, 2).unwrap();
        let p = random_params(&shapes, seed);
        let q = random_params(&shapes, seed.wrapping_add(1));
        // Linear in (A, B) jointly with alpha fixed.
        let mut mix = p.clone();
        for i in 0..p.len() {
            mix.a.as_mut_slice()[i] = p.a.as_slice()[i] + s * q.a.as_slice()[i];
            mix.b.as_mut_slice()[i] = p.b.as_slice()[i] + s * q.b.as_slice()[i];
        }
        let mut q_alpha = q.clone();
        q_alpha.alpha = p.alpha.clone();
        let lhs = compose(&mix).unwrap();
        let tp = compose(&p).unwrap();
        let tq = compose(&q_alpha).unwrap();
        for i in 0..p.len() {
            let rhs = tp.as_slice()[i] + s * tq.as_slice()[i];
            prop_assert!((lhs.as_slice()[i] - rhs).abs() < 1e-10);
        }
    }
}
