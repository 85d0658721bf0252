use super::*;
use crate::meanfield::init_softmax;
use crate::oracle::finite_difference_gradients;
use crate::synth::synth_dataset;
use rand::Rng;

fn specs() -> Vec<KernelSpec> {
    vec![
        KernelSpec::Spatial { theta_gamma: 3.0 },
        KernelSpec::Bilateral {
            theta_alpha: 20.0,
            theta_beta: 13.0,
        },
    ]
}

fn marginals(h: usize, w: usize, l: usize, seed: u64) -> MarginalField {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let u = Matrix::from_fn(h * w, l, |_, _| r.gen_range(-2.0..2.0));
    init_softmax(&UnaryField::new(h, w, u).unwrap())
}

#[test]
fn loss_examples() {
    let gt = LabelMap::new(2, 1, vec![1, 0]).unwrap();
    let onehot = MarginalField::new(
        1,
        2,
        Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
    )
    .unwrap();
    let (loss, _) = softmax_loss(&onehot, &gt, 255).unwrap();
    assert!(loss.abs() <= 1e-9);

    let uniform = MarginalField::new(1, 2, Matrix::filled(2, 4, 0.25)).unwrap();
    let gt = LabelMap::new(2, 1, vec![3, 0]).unwrap();
    let (loss, _) = softmax_loss(&uniform, &gt, 255).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);

    // a zero probability on the true label stays finite
    let gt = LabelMap::new(2, 1, vec![0, 1]).unwrap();
    let (loss, grad) = softmax_loss(&onehot, &gt, 255).unwrap();
    assert!(loss.is_finite() && grad.is_finite());
    assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let y = marginals(3, 4, 3, 1);
    let gt = LabelMap::new(4, 3, vec![0, 1, 2, 255, 1, 1, 0, 2, 255, 0, 0, 1]).unwrap();
    let (_, grad) = softmax_loss(&y, &gt, 255).unwrap();
    // the loss is a function of the raw entries, no renormalization
    let fd = finite_difference_gradients(
        |t| {
            let labels = gt.labels();
            let valid = labels.iter().filter(|&&g| g != 255).count() as f64;
            Ok(-labels
                .iter()
                .enumerate()
                .filter(|(_, &g)| g != 255)
                .map(|(i, &g)| t[i * 3 + usize::from(g)].ln())
                .sum::<f64>()
                / valid)
        },
        y.values().as_slice(),
        1e-7,
    )
    .unwrap();
    for (a, b) in grad.as_slice().iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3));
    }
    for i in [3, 8] {
        assert!(grad.row(i).iter().all(|&g| g == 0.0));
    }
}

#[test]
fn loss_errors() {
    let y = marginals(1, 2, 2, 1);
    let all_ignored = LabelMap::new(2, 1, vec![255, 255]).unwrap();
    assert!(softmax_loss(&y, &all_ignored, 255).is_err());
    let wrong_size = LabelMap::new(1, 1, vec![0]).unwrap();
    assert!(softmax_loss(&y, &wrong_size, 255).is_err());
    let out_of_range = LabelMap::new(2, 1, vec![0, 2]).unwrap();
    assert!(softmax_loss(&y, &out_of_range, 255).is_err());
}

#[test]
fn potts_initialization() {
    let p = init_params(3, &[3.0, 5.0]).unwrap();
    assert_eq!(
        p.compatibility.as_slice(),
        &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]
    );
    assert_eq!(p.weights.shape(), (3, 2));
    assert!(p.weights.row_iter().all(|r| r == [3.0, 5.0]));
    assert!(init_params(1, &[1.0]).is_err());
    assert!(init_params(2, &[]).is_err());
}

#[test]
fn potts_output_unchanged_by_negative_identity() {
    let s = &synth_dataset(4, 1, 12, 12, 0.2).unwrap()[0];
    let bank = KernelBank::build(&s.image, &specs()).unwrap();
    let potts = init_params(2, &[3.0, 5.0]).unwrap();
    let mut neg = potts.clone();
    neg.compatibility = Matrix::from_fn(2, 2, |a, b| if a == b { -1.0 } else { 0.0 });
    let a = crf_rnn_infer(&s.unary, &bank, &ParamSchedule::Shared(potts), 5).unwrap();
    let b = crf_rnn_infer(&s.unary, &bank, &ParamSchedule::Shared(neg), 5).unwrap();
    assert!(a.marginals.values().max_abs_diff(b.marginals.values()) < 1e-12);
}

#[test]
fn momentum_steps() {
    let theta = init_params(2, &[1.0]).unwrap();
    let g = CrfParams::new(
        Matrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap(),
        Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 4.0]).unwrap(),
    )
    .unwrap();

    // plain SGD
    let mut p = theta.clone();
    let mut v = CrfParams::zeros(2, 1);
    sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
    assert_eq!(p.weights.as_slice(), &[0.9, 1.2]);
    assert_eq!(p.compatibility.as_slice(), &[-0.05, 1.0, 1.0, -0.4]);

    // zero gradient, zero velocity
    let mut p = theta.clone();
    let mut v = CrfParams::zeros(2, 1);
    sgd_momentum_step(&mut p, &CrfParams::zeros(2, 1), &mut v, 0.1, 0.9).unwrap();
    assert_eq!(p, theta);

    // two steps with constant g: v₁ = −lr·g, v₂ = −(1 + m)·lr·g
    let mut p = theta.clone();
    let mut v = CrfParams::zeros(2, 1);
    for _ in 0..2 {
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.5).unwrap();
    }
    assert!((v.weights.get(0, 0) + 0.15).abs() < 1e-15);
    assert!((p.weights.get(0, 0) - (1.0 - 0.25)).abs() < 1e-15);
    assert!((p.compatibility.get(1, 1) - (0.0 - 0.25 * 4.0)).abs() < 1e-15);

    let mut bad = g.clone();
    bad.weights.set(0, 0, f64::NAN);
    assert!(matches!(
        sgd_momentum_step(&mut p, &bad, &mut v, 0.1, 0.5),
        Err(CrfError::NonFinite(_))
    ));
    assert!(sgd_momentum_step(&mut p, &CrfParams::zeros(3, 1), &mut v, 0.1, 0.5).is_err());
}

#[test]
fn config_validation() {
    let c = TrainConfig::default();
    assert_eq!((c.momentum, c.t_train, c.ignore_label), (0.99, 5, 255));
    assert!(c.validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: -1e-3,
            ..c.clone()
        },
        TrainConfig {
            momentum: 1.0,
            ..c.clone()
        },
        TrainConfig {
            t_train: 0,
            ..c.clone()
        },
        TrainConfig {
            clip: Some(-1.0),
            ..c.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn tiny_config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        t_train: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_history_flat() {
    let data = synth_dataset(5, 3, 12, 12, 0.2).unwrap();
    let p0 = ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap());
    let out = train(&data, &specs(), p0.clone(), &tiny_config(0.0, 4)).unwrap();
    assert_eq!(out.params, p0);
    assert_eq!(out.history.len(), 4);
    for r in &out.history {
        assert_eq!(r.loss, out.history[0].loss);
        assert_eq!(r.mean_iu, out.history[0].mean_iu);
    }
}

#[test]
fn single_sample_loss_decreases() {
    let data = synth_dataset(6, 1, 24, 24, 0.2).unwrap();
    let p0 = ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap());
    let out = train(&data, &specs(), p0, &tiny_config(2e-5, 50)).unwrap();
    for w in out.history[..10].windows(2) {
        assert!(w[1].loss < w[0].loss, "{:?}", out.history);
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset(7, 3, 12, 12, 0.2).unwrap();
    let p0 = ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap());
    let cfg = TrainConfig {
        clip: Some(0.5),
        ..tiny_config(1e-3, 3)
    };
    let a = train(&data, &specs(), p0.clone(), &cfg).unwrap();
    let b = train(&data, &specs(), p0.clone(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let c = train(&data, &specs(), p0, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn ignored_pixels_do_not_matter() {
    let mut s = synth_dataset(8, 1, 10, 10, 0.2).unwrap().remove(0);
    let ignored: Vec<usize> = (0..100).step_by(7).collect();
    let mut labels = s.ground_truth.labels().to_vec();
    for &i in &ignored {
        labels[i] = 255;
    }
    s.ground_truth = LabelMap::new(10, 10, labels).unwrap();
    let bank = Arc::new(KernelBank::build(&s.image, &specs()).unwrap());
    let run = |u: &UnaryField, sched: &ParamSchedule| {
        let (y, tape) = crf_rnn_forward(u, bank.clone(), sched, 3).unwrap();
        let (loss, d_y) = softmax_loss(&y, &s.ground_truth, 255).unwrap();
        for &i in &ignored {
            assert!(d_y.row(i).iter().all(|&g| g == 0.0));
        }
        (loss, crf_rnn_backward(&tape, &d_y).unwrap())
    };
    // with coupling the ignored pixels still pass messages, but their loss
    // gradient is zero
    run(
        &s.unary,
        &ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap()),
    );

    // without coupling they drop out entirely
    let uncoupled = ParamSchedule::Shared(CrfParams::zeros(2, 2));
    let (loss, g) = run(&s.unary, &uncoupled);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut u2 = s.unary.values().clone();
    for &i in &ignored {
        u2.row_mut(i)
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-9.0..9.0));
    }
    let (loss2, g2) = run(&UnaryField::new(10, 10, u2).unwrap(), &uncoupled);
    assert_eq!(loss, loss2);
    for &i in &ignored {
        assert!(g.d_unary.row(i).iter().all(|&x| x == 0.0));
        assert!(g2.d_unary.row(i).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn gradients_check_after_training_steps() {
    let data = synth_dataset(9, 2, 8, 8, 0.2).unwrap();
    let p0 = ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap());
    let trained = train(&data, &specs(), p0.clone(), &tiny_config(1e-3, 5)).unwrap();
    for sched in [p0, trained.params] {
        let s = &data[0];
        let bank = Arc::new(KernelBank::build(&s.image, &specs()).unwrap());
        let loss = |x: &[f64]| -> Result<f64> {
            let (y, _) = crf_rnn_forward(&s.unary, bank.clone(), &sched.from_flat_like(x)?, 3)?;
            Ok(softmax_loss(&y, &s.ground_truth, 255)?.0)
        };
        let (y, tape) = crf_rnn_forward(&s.unary, bank.clone(), &sched, 3).unwrap();
        let (_, d_y) = softmax_loss(&y, &s.ground_truth, 255).unwrap();
        let analytic = crf_rnn_backward(&tape, &d_y).unwrap().d_params.to_flat();
        let fd = finite_difference_gradients(loss, &sched.to_flat(), 1e-5).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(
                (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6),
                "{a} vs {b}"
            );
        }
    }
}

#[test]
fn dataset_errors() {
    let p0 = ParamSchedule::Shared(init_params(2, &[3.0, 5.0]).unwrap());
    assert!(train(&[], &specs(), p0.clone(), &TrainConfig::default()).is_err());
    let mut data = synth_dataset(1, 1, 8, 8, 0.1).unwrap();
    data.extend(crate::synth::synth_dataset_with_labels(1, 1, 8, 8, 0.1, 3).unwrap());
    assert!(train(&data, &specs(), p0.clone(), &tiny_config(1e-3, 1)).is_err());
    let data = synth_dataset(1, 1, 8, 8, 0.1).unwrap();
    assert!(train(&data, &specs()[..1], p0, &tiny_config(1e-3, 1)).is_err());

    let s = &data[0];
    assert!(Sample::new(
        RgbImage::filled(9, 8, [0, 0, 0]).unwrap(),
        s.unary.clone(),
        s.ground_truth.clone()
    )
    .is_err());
}

#[test]
fn grid_search_visits_every_point() {
    let data = synth_dataset(2, 2, 12, 12, 0.2).unwrap();
    let grid = vec![vec![0.0, 3.0], vec![1.0, 5.0, 9.0]];
    let points = grid_search(&data, &specs(), &grid, 3, 255).unwrap();
    let visited: Vec<Vec<f64>> = points.iter().map(|p| p.weights.clone()).collect();
    assert_eq!(
        visited,
        vec![
            vec![0.0, 1.0],
            vec![0.0, 5.0],
            vec![0.0, 9.0],
            vec![3.0, 1.0],
            vec![3.0, 5.0],
            vec![3.0, 9.0]
        ]
    );
    let best = best_grid_point(&points).unwrap();
    assert!(points.iter().all(|p| p.mean_iu <= best.mean_iu));
    let unary = evaluate_unaries(&data, 255).unwrap().mean_iu();
    assert!(best.mean_iu >= unary);
    assert!(grid_search(&data, &specs(), &grid[..1], 3, 255).is_err());
    assert!(grid_search(&data, &specs(), &[vec![], vec![1.0]], 3, 255).is_err());
}
