use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crfrnn_core::gradcheck::check_gradients;
use crfrnn_core::io;
use crfrnn_core::meanfield::{
    add_unary, build_kernel_features, compatibility_transform, init_softmax, message_passing,
    normalize, weight_filter_outputs,
};
use crfrnn_core::oracle::{
    brute_force_gaussian_filter, reference_mean_field, relative_l2_error, FILTER_TOLERANCE,
    GRADIENT_TOLERANCE, MEAN_FIELD_TOLERANCE,
};
use crfrnn_core::perf::{filter_scaling, fit_timings, random_image};
use crfrnn_core::synth::synth_dataset_with_labels;
use crfrnn_core::training::{
    best_grid_point, evaluate, evaluate_unaries, grid_search, train as run_training,
};
use crfrnn_core::{
    build_lattice, crf_rnn_infer, CrfParams, KernelBank, KernelSpec, LabelMap, Matrix,
    Normalization, ParamSchedule, RunConfig, UnaryField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    BenchArgs, CompareArgs, Failure, GradcheckArgs, GridsearchArgs, InferArgs, SynthArgs, TrainArgs,
};

type CmdResult = Result<(), Failure>;

const OVERLAY_ALPHA: f64 = 0.5;

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(name: &str, v: usize) -> Result<usize, Failure> {
    if v == 0 {
        Err(Failure::Input(format!("{name} must be at least 1")))
    } else {
        Ok(v)
    }
}

/// Random image, unaries in [-2, 2) and ground truth for the self-checks.
fn random_instance(
    (h, w): (usize, usize),
    labels: usize,
    seed: u64,
) -> Result<(crfrnn_core::RgbImage, UnaryField, LabelMap), Failure> {
    let img = random_image(w, h, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let u = UnaryField::new(
        h,
        w,
        Matrix::from_fn(h * w, labels, |_, _| r.gen_range(-2.0..2.0)),
    )?;
    let gt = LabelMap::new(
        w,
        h,
        (0..h * w).map(|_| r.gen_range(0..labels) as u8).collect(),
    )?;
    Ok((img, u, gt))
}

pub fn infer(a: InferArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let t = positive("iterations", a.iterations.unwrap_or(cfg.rnn.t_infer))?;
    let image = io::load_image(&a.image)?;
    let unary = io::load_unary(&a.unary, image.height(), image.width(), cfg.labels)?;
    let schedule = cfg.initial_params()?;
    let bank = KernelBank::build(&image, &cfg.kernel_specs())?;
    let inf = crf_rnn_infer(&unary, &bank, &schedule, t)?;
    let labels = io::labels_from_marginals(&inf.marginals)?;
    io::save_labels(&labels, &a.out_labels)?;
    if let Some(p) = &a.out_marginals {
        io::save_marginal(&inf.marginals, p)?;
    }
    if let Some(p) = &a.overlay {
        let blended = io::overlay(&image, &labels, OVERLAY_ALPHA, cfg.train.ignore_label)?;
        io::save_image(&blended, p)?;
    }
    let last = inf.deltas.last().copied().unwrap_or(0.0);
    println!("iterations: {t}");
    println!("final delta: {last:.3e}");
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let dataset = io::load_dataset(&a.manifest, cfg.labels, cfg.train.ignore_label)?;
    let kernels = cfg.kernel_specs();
    let mut train_cfg = cfg.train.clone();
    train_cfg.t_train = cfg.rnn.t_train;
    let initial = cfg.initial_params()?;
    let before = evaluate(
        &dataset,
        &kernels,
        &initial,
        cfg.rnn.t_infer,
        cfg.train.ignore_label,
    )?
    .mean_iu();
    let outcome = run_training(&dataset, &kernels, initial, &train_cfg)?;
    io::save_params(&outcome.params, &a.out_params)?;
    let after = evaluate(
        &dataset,
        &kernels,
        &outcome.params,
        cfg.rnn.t_infer,
        cfg.train.ignore_label,
    )?
    .mean_iu();
    if let Some(p) = &a.history {
        let mut csv = String::from("epoch,loss,mean_iu\n");
        for r in &outcome.history {
            let _ = writeln!(csv, "{},{},{}", r.epoch, r.loss, r.mean_iu);
        }
        fs::write(p, csv).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
    }
    println!("samples: {}", dataset.len());
    println!("epochs: {}", outcome.history.len());
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!("loss: {:.6} -> {:.6}", first.loss, last.loss);
    }
    println!("mean IU (T={}): {before:.4} -> {after:.4}", cfg.rnn.t_infer);
    Ok(())
}

fn perturbed(schedule: &ParamSchedule, seed: u64) -> Result<ParamSchedule, Failure> {
    // Potts initializations sit on symmetric points where some gradient
    // entries cancel exactly; jitter them so every entry is exercised.
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let flat: Vec<f64> = schedule
        .to_flat()
        .into_iter()
        .map(|x| x + r.gen_range(-0.25..0.25))
        .collect();
    Ok(schedule.from_flat_like(&flat)?)
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let labels = a.labels.unwrap_or(cfg.labels);
    if !(2..=255).contains(&labels) {
        return Err(Failure::Input("label count must lie in 2..=255".into()));
    }
    let t_max = positive("iterations", a.iterations)?;
    let base = if labels == cfg.labels {
        cfg.initial_params()?
    } else {
        let mut c = cfg.clone();
        c.labels = labels;
        c.params_path = None;
        c.initial_params()?
    };
    let schedule = perturbed(&base, a.seed)?;
    let (img, u, gt) = random_instance(a.size, labels, a.seed)?;
    let bank = Arc::new(KernelBank::build(&img, &cfg.kernel_specs())?);
    println!(
        "instance: {}x{}, {labels} labels, {} kernels, epsilon {:e}",
        a.size.0,
        a.size.1,
        bank.n_kernels(),
        a.epsilon
    );
    println!("   T  max_rel_err   |dL/dU|      |dL/dtheta|");
    let mut worst: f64 = 0.0;
    for t in 1..=t_max {
        let rep = check_gradients(&u, bank.clone(), &schedule, &gt, t, a.epsilon, 255)?;
        println!(
            "{:>4}  {:<11.3e}  {:<11.4e}  {:.4e}",
            t,
            rep.max_error(),
            rep.unary_grad_norm,
            rep.params_grad_norm
        );
        worst = worst.max(rep.max_error());
    }
    if worst > GRADIENT_TOLERANCE {
        return Err(Failure::Check(format!(
            "gradient error {worst:.3e} exceeds {GRADIENT_TOLERANCE:e}"
        )));
    }
    println!("gradients agree within {GRADIENT_TOLERANCE:e}");
    Ok(())
}

fn mean_time(
    repeat: usize,
    mut f: impl FnMut() -> Result<(), Failure>,
) -> Result<Duration, Failure> {
    let start = Instant::now();
    for _ in 0..repeat {
        f()?;
    }
    Ok(start.elapsed() / repeat as u32)
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let repeat = positive("repeat", a.repeat)?;
    if a.scaling {
        return bench_scaling(&a, repeat);
    }
    let (Some(config), Some(image), Some(unary)) = (&a.config, &a.image, &a.unary) else {
        return Err(Failure::Input(
            "bench needs --config, --image and --unary unless --scaling is given".into(),
        ));
    };
    let cfg = load_config(config)?;
    let t = positive("iterations", a.iterations.unwrap_or(cfg.rnn.t_infer))?;
    let image = io::load_image(image)?;
    let u = io::load_unary(unary, image.height(), image.width(), cfg.labels)?;
    let schedule = cfg.initial_params()?;
    let params: &CrfParams = schedule.for_iteration(0);
    let specs = cfg.kernel_specs();
    let (h, w) = (u.height(), u.width());

    let build = mean_time(repeat, || {
        std::hint::black_box(KernelBank::build(&image, &specs)?);
        Ok(())
    })?;
    let bank = KernelBank::build(&image, &specs)?;
    let q = init_softmax(&u);
    let msgs = message_passing(&q, &bank)?;
    let q_check = weight_filter_outputs(&msgs, &params.weights)?;
    let q_hat = compatibility_transform(&q_check, &params.compatibility)?;
    let q_breve = add_unary(&u, &q_hat)?;

    let stages = [
        (
            "message passing",
            mean_time(repeat, || {
                std::hint::black_box(message_passing(&q, &bank)?);
                Ok(())
            })?,
        ),
        (
            "weighting",
            mean_time(repeat, || {
                std::hint::black_box(weight_filter_outputs(&msgs, &params.weights)?);
                Ok(())
            })?,
        ),
        (
            "compatibility",
            mean_time(repeat, || {
                std::hint::black_box(compatibility_transform(&q_check, &params.compatibility)?);
                Ok(())
            })?,
        ),
        (
            "add unary",
            mean_time(repeat, || {
                std::hint::black_box(add_unary(&u, &q_hat)?);
                Ok(())
            })?,
        ),
        (
            "normalize",
            mean_time(repeat, || {
                std::hint::black_box(normalize(h, w, &q_breve)?);
                Ok(())
            })?,
        ),
    ];
    let full = mean_time(repeat, || {
        std::hint::black_box(crf_rnn_infer(&u, &bank, &schedule, t)?);
        Ok(())
    })?;

    println!(
        "image {w}x{h}, {} labels, {} kernels, mean of {repeat} runs",
        cfg.labels,
        specs.len()
    );
    println!("{:<18}{:>12.3} ms", "kernel build", ms(build));
    for (name, d) in &stages {
        println!("{name:<18}{:>12.3} ms", ms(*d));
    }
    let per_iter: Duration = stages.iter().map(|(_, d)| *d).sum();
    println!("{:<18}{:>12.3} ms", "one iteration", ms(per_iter));
    println!("{:<18}{:>12.3} ms", format!("inference T={t}"), ms(full));
    Ok(())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn bench_scaling(a: &BenchArgs, repeat: usize) -> CmdResult {
    if a.sides.len() < 2 || a.sides.contains(&0) {
        return Err(Failure::Input(
            "--sides needs at least two positive sizes".into(),
        ));
    }
    let spec = match &a.config {
        Some(p) => {
            let cfg = load_config(p)?;
            let specs = cfg.kernel_specs();
            specs
                .iter()
                .copied()
                .find(|k| matches!(k, KernelSpec::Bilateral { .. }))
                .unwrap_or(specs[0])
        }
        None => crfrnn_core::meanfield::default_kernels()[1].0,
    };
    let channels = 21;
    let timings = filter_scaling(&a.sides, &spec, channels, repeat, 0)?;
    println!(
        "{} kernel, {channels} channels, best of {repeat} filter runs",
        spec.kind_name()
    );
    println!("{:>10}  {:>12}  {:>12}", "pixels", "build ms", "filter ms");
    for t in &timings {
        println!(
            "{:>10}  {:>12.3}  {:>12.3}",
            t.n_pixels,
            ms(t.build),
            ms(t.filter)
        );
    }
    let fit = fit_timings(&timings)?;
    println!(
        "linear fit: {:.3e} s/pixel + {:.3e} s, R^2 = {:.4}",
        fit.slope, fit.intercept, fit.r_squared
    );
    Ok(())
}

pub fn compare(a: CompareArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let t = positive("iterations", a.iterations)?;
    let schedule = cfg.initial_params()?;
    let ParamSchedule::Shared(params) = &schedule else {
        return Err(Failure::Input(
            "compare runs the reference with one shared parameter set".into(),
        ));
    };
    let (img, u, _) = random_instance(a.size, cfg.labels, a.seed)?;
    let n = img.n_pixels();
    let mut r = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(3));
    let values = Matrix::from_fn(n, cfg.labels, |_, _| r.gen_range(0.0..1.0));
    let mut failed = Vec::new();

    println!(
        "instance: {}x{}, {} labels, seed {}",
        a.size.0, a.size.1, cfg.labels, a.seed
    );
    for (k, spec) in cfg.kernel_specs().iter().enumerate() {
        let f = build_kernel_features(&img, spec)?;
        let exact = brute_force_gaussian_filter(&f, &values, Normalization::Symmetric)?;
        let fast = build_lattice(&f)?.gaussian_filter(&values, false, Normalization::Symmetric)?;
        let err = relative_l2_error(&fast, &exact);
        println!(
            "filter {k} ({}): relative error {err:.4} (tolerance {FILTER_TOLERANCE})",
            spec.kind_name()
        );
        if err > FILTER_TOLERANCE {
            failed.push(format!("filter {k} error {err:.4}"));
        }
    }
    let bank = KernelBank::build(&img, &cfg.kernel_specs())?;
    let fast = crf_rnn_infer(&u, &bank, &schedule, t)?.marginals;
    let exact = reference_mean_field(&u, &img, params, &cfg.kernel_specs(), t)?;
    let err = relative_l2_error(fast.values(), exact.values());
    println!("mean field T={t}: relative error {err:.4} (tolerance {MEAN_FIELD_TOLERANCE})");
    if err > MEAN_FIELD_TOLERANCE {
        failed.push(format!("mean-field error {err:.4}"));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let (h, w) = a.size;
    let samples = synth_dataset_with_labels(a.seed, a.samples, h, w, a.noise, a.labels)?;
    let manifest = io::write_dataset(&samples, &a.out)?;
    let cfg_path = a.out.join("run.cfg");
    fs::write(&cfg_path, RunConfig::with_labels(a.labels).to_text())
        .map_err(|e| Failure::Input(format!("{}: {e}", cfg_path.display())))?;
    let unary_iu = evaluate_unaries(&samples, 255)?.mean_iu();
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    println!("manifest: {}", manifest.display());
    println!("config: {}", cfg_path.display());
    println!("unary mean IU: {unary_iu:.4}");
    Ok(())
}

fn parse_grid(raw: &[String], n_kernels: usize) -> Result<Vec<Vec<f64>>, Failure> {
    if raw.len() != n_kernels {
        return Err(Failure::Input(format!(
            "{} --grid lists for {n_kernels} kernels",
            raw.len()
        )));
    }
    raw.iter()
        .map(|list| {
            list.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Failure::Input(format!("bad grid weight {s:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn gridsearch(a: GridsearchArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let t = positive("iterations", a.iterations.unwrap_or(cfg.rnn.t_infer))?;
    let kernels = cfg.kernel_specs();
    let grid = parse_grid(&a.grid, kernels.len())?;
    let dataset = io::load_dataset(&a.manifest, cfg.labels, cfg.train.ignore_label)?;
    let points = grid_search(&dataset, &kernels, &grid, t, cfg.train.ignore_label)?;
    for p in &points {
        let w: Vec<String> = p.weights.iter().map(|x| x.to_string()).collect();
        println!("weights {:<20} mean IU {:.4}", w.join(","), p.mean_iu);
    }
    if let Some(best) = best_grid_point(&points) {
        let w: Vec<String> = best.weights.iter().map(|x| x.to_string()).collect();
        println!("best: weights {} mean IU {:.4}", w.join(","), best.mean_iu);
    }
    Ok(())
}
