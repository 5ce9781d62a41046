//! Acceptance checks, one line per criterion. Exits non-zero if any fail.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use surronas::{cmd_report, cmd_run, RunConfig, RunResult};
use surronas_core::analytics::{energy_kwh, kendall_tau, r2_score, EnergyParams};
use surronas_core::engine::{expected_improvement, EvolutionMode};
use surronas_core::genome::{random_genotype, repair, GeneGroup, GenomeConfig};
use surronas_core::phenotype::{to_phenotype, Architecture, LayerSpec};
use surronas_core::smallnet::{gradient_check, SyntheticSpec, TrainConfig, TrainedNet};
use surronas_core::surrogate::{kernel, KernelKind, KplsModel, PlsProjection, SurrogateConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn ei_vs_monte_carlo() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let samples = 10_000_000usize;
    let mut worst_z: f64 = 0.0;
    for _ in 0..100 {
        let mean = rng.gen_range(-1.0..1.0);
        let sigma = 10f64.powf(rng.gen_range(-2.0..0.5));
        let f_best = rng.gen_range(-1.0..1.0);
        let analytic = expected_improvement(mean, sigma, f_best).unwrap();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let z: f64 = StandardNormal.sample(&mut rng);
            let imp = (mean + sigma * z - f_best).max(0.0);
            sum += imp;
            sum_sq += imp * imp;
        }
        let n = samples as f64;
        let mc = sum / n;
        // when no draw improves, the estimator cannot resolve anything
        // below one draw's share, about sigma / n
        let se = ((sum_sq / n - mc * mc).max(0.0) / n).sqrt().max(sigma / n);
        let z = (analytic - mc).abs() / se;
        worst_z = worst_z.max(z);
    }
    let zero = expected_improvement(0.7, 0.0, 0.2).unwrap() == 0.0;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_z <= 3.0 && zero && secs < 30.0,
        format!("max |EI - MC| = {worst_z:.2} standard errors over 100 triples, EI(sigma=0)=0: {zero}, {secs:.1}s"),
    )
}

fn kriging_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let x: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| (2.0 * r[0]).sin() + r[1] * r[2] - 0.5 * r[3] + r[4] * r[4]).collect();
    let (mut max_err, mut max_var): (f64, f64) = (0.0, 0.0);
    for kind in [KernelKind::Kriging, KernelKind::Kpls] {
        let cfg = SurrogateConfig {
            kind,
            nugget: 1e-10,
            ..Default::default()
        };
        let model = KplsModel::fit(&x, &y, &cfg).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let p = model.predict(xi).unwrap();
            max_err = max_err.max((p.mean - yi).abs());
            max_var = max_var.max(p.variance);
        }
    }
    outcome(
        max_err < 1e-6 && max_var <= 1e-8,
        format!("max |mean - y| = {max_err:.2e}, max variance = {max_var:.2e} (Kriging and KPLS)"),
    )
}

fn kpls_identity_equals_kriging() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let m = 6;
    let p = PlsProjection::identity(m);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let theta: Vec<f64> = (0..m).map(|_| 10f64.powf(rng.gen_range(-3.0..1.0))).collect();
        let kp = kernel(&a, &b, &theta, Some(&p)).unwrap();
        let kk = kernel(&a, &b, &theta, None).unwrap();
        worst = worst.max((kp - kk).abs());
    }
    outcome(worst <= 1e-12, format!("max kernel difference {worst:.2e} over 1000 pairs"))
}

fn naive_prediction(model: &KplsModel, q: &[f64]) -> (f64, f64) {
    let n = model.x.len();
    let k = |a: &[f64], b: &[f64]| kernel(a, b, &model.theta, model.projection.as_ref()).unwrap();
    let mut r = DMatrix::from_fn(n, n, |i, j| k(&model.x[i], &model.x[j]));
    for i in 0..n {
        r[(i, i)] += model.nugget;
    }
    let ri = r.try_inverse().unwrap();
    let ones = DVector::from_element(n, 1.0);
    let y = DVector::from_column_slice(&model.y);
    let denom = (ones.transpose() * &ri * &ones)[0];
    let beta = (ones.transpose() * &ri * &y)[0] / denom;
    let resid = &y - &ones * beta;
    let sigma2 = (resid.transpose() * &ri * &resid)[0] / n as f64;
    let rv = DVector::from_fn(n, |i, _| k(q, &model.x[i]));
    let mean = beta + (rv.transpose() * &ri * &resid)[0];
    let u = 1.0 - (ones.transpose() * &ri * &rv)[0];
    (mean, (sigma2 * (1.0 - (rv.transpose() * &ri * &rv)[0] + u * u / denom)).max(0.0))
}

fn predictor_vs_naive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut dm, mut dv): (f64, f64) = (0.0, 0.0);
    for trial in 0..50u64 {
        let m = 3;
        let x: Vec<Vec<f64>> = (0..10).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let kind = if trial % 2 == 0 { KernelKind::Kpls } else { KernelKind::Kriging };
        let cfg = SurrogateConfig {
            kind,
            components: 2,
            seed: trial,
            ..Default::default()
        };
        let model = KplsModel::fit(&x, &y, &cfg).unwrap();
        for _ in 0..5 {
            let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.2..1.2)).collect();
            let p = model.predict(&q).unwrap();
            let (mean, var) = naive_prediction(&model, &q);
            dm = dm.max((p.mean - mean).abs());
            dv = dv.max((p.variance - var).abs());
        }
    }
    outcome(
        dm <= 1e-8 && dv <= 1e-8,
        format!("max mean difference {dm:.2e}, max variance difference {dv:.2e} over 50 models"),
    )
}

fn high_dimensional_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SurrogateConfig::default().seed);
    let m = 2000;
    let map: Vec<[f64; 3]> = (0..m)
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let draw = |rng: &mut ChaCha8Rng| {
        let z: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let x: Vec<f64> = map
            .iter()
            .map(|a| a[0] * z[0] + a[1] * z[1] + a[2] * z[2] + noise.sample(rng))
            .collect();
        (x, -z.iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>())
    };
    let (xt, yt): (Vec<_>, Vec<_>) = (0..40).map(|_| draw(&mut rng)).unzip();
    let (xh, yh): (Vec<_>, Vec<_>) = (0..40).map(|_| draw(&mut rng)).unzip();
    let start = Instant::now();
    let model = KplsModel::fit(&xt, &yt, &SurrogateConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pred: Vec<f64> = xh.iter().map(|x| model.predict(x).unwrap().mean).collect();
    let tau = kendall_tau(&pred, &yh).unwrap();
    let r2 = r2_score(&pred, &yh).unwrap();
    outcome(
        tau >= 0.8 && r2 >= 0.6 && secs < 10.0,
        format!("kendall tau {tau:.4}, R2 {r2:.4}, fit {secs:.2}s (n=40, m=2000, h=3)"),
    )
}

fn gradient_check_toy() -> Outcome {
    let data = SyntheticSpec {
        height: 8,
        width: 8,
        samples: 40,
        noise: 0.2,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let arch = Architecture {
        input_shape: data.shape(),
        num_classes: 2,
        layers: vec![
            LayerSpec::Conv { filters: 32, kernel: 3 },
            LayerSpec::MaxPool,
            LayerSpec::BatchNorm,
            LayerSpec::DenseOutput { units: 2 },
        ],
    };
    let err = gradient_check(&arch, &data.train.head(6), 1e-5, 200, 5).unwrap();
    outcome(err < 1e-5, format!("max relative error {err:.2e} over 200 parameters"))
}

fn intron_neutrality() -> Outcome {
    let data = SyntheticSpec {
        height: 4,
        width: 4,
        samples: 40,
        noise: 0.3,
        ratios: [20.0, 10.0, 10.0],
        ..Default::default()
    }
    .generate()
    .unwrap();
    let train = data.train.head(8);
    let eval = data.validation.head(6);
    let tc = TrainConfig {
        partial_epochs: 1,
        full_epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let cfg = GenomeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let semantics = |g: &surronas_core::genome::Genotype, seed: u64| {
        let arch = to_phenotype(g, data.shape(), 2).unwrap();
        let mut net = TrainedNet::init(&arch, seed).unwrap();
        net.train_until(&train, &tc, 1).unwrap();
        net.extract_semantics(&eval).unwrap().0
    };
    let mut mismatches = 0;
    for i in 0..1000u64 {
        let g = random_genotype(&cfg, &mut rng).unwrap();
        let r = repair(&g).unwrap();
        let (a, b) = (semantics(&g, i), semantics(&r, i));
        if a.iter().map(|v| v.to_bits()).ne(b.iter().map(|v| v.to_bits())) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 1000 genotypes differ bitwise from their repaired form"))
}

struct Smoke {
    full: RunResult,
    surrogate: RunResult,
    full_secs: f64,
    surrogate_secs: f64,
}

fn smoke_config(mode: EvolutionMode, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.evolution.mode = mode;
    cfg.evolution.population_size = 12;
    cfg.evolution.generations = 5;
    cfg.output = Some(dir.to_path_buf());
    cfg
}

fn smoke_runs(root: &Path) -> Smoke {
    let t = Instant::now();
    let full = cmd_run(&smoke_config(EvolutionMode::Full, &root.join("full"))).expect("full-mode smoke run");
    let full_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let surrogate =
        cmd_run(&smoke_config(EvolutionMode::Surrogate, &root.join("surrogate"))).expect("surrogate-mode smoke run");
    let surrogate_secs = t.elapsed().as_secs_f64();
    Smoke {
        full,
        surrogate,
        full_secs,
        surrogate_secs,
    }
}

fn split_accounting(s: &Smoke) -> Outcome {
    let (f, m) = (s.full.timing.counters, s.surrogate.timing.counters);
    let pass = f.full_trainings == 60
        && m.full_trainings == 32
        && m.epochs_trained < f.epochs_trained
        && s.full_secs + s.surrogate_secs < 900.0;
    outcome(
        pass,
        format!(
            "full trainings {} vs {}, epochs {} vs {}, wall {:.0}s + {:.0}s on {} core(s)",
            m.full_trainings,
            f.full_trainings,
            m.epochs_trained,
            f.epochs_trained,
            s.surrogate_secs,
            s.full_secs,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn quality_parity(s: &Smoke) -> Outcome {
    let best = |r: &RunResult| r.best.as_ref().map_or(0.0, |b| b.validation_accuracy);
    let (f, m) = (best(&s.full), best(&s.surrogate));
    outcome(
        (f - m).abs() <= 0.05,
        format!("best validation accuracy surrogate {m:.4} vs full {f:.4}"),
    )
}

fn mse_stability(s: &Smoke) -> Outcome {
    let series: Vec<(usize, f64)> = s
        .surrogate
        .reports
        .iter()
        .filter_map(|r| Some((r.generation, r.quality.as_ref()?.mse)))
        .collect();
    let mut pass = series.iter().all(|(_, v)| v.is_finite());
    for (i, (g, v)) in series.iter().enumerate() {
        if *g <= 3 {
            continue;
        }
        let mut prior: Vec<f64> = series[..i].iter().map(|p| p.1).collect();
        prior.sort_by(f64::total_cmp);
        let median = if prior.len() % 2 == 1 {
            prior[prior.len() / 2]
        } else {
            0.5 * (prior[prior.len() / 2 - 1] + prior[prior.len() / 2])
        };
        if *v > 3.0 * median {
            pass = false;
        }
    }
    let shown: Vec<String> = series.iter().map(|(g, v)| format!("g{g}={v:.2e}")).collect();
    outcome(pass, format!("MSE per generation: {}", shown.join(" ")))
}

fn energy_formula() -> Outcome {
    let p = EnergyParams {
        runtime_hours: 1.0,
        core_power_kw: 0.3,
        usage: 1.0,
        memory_power_kw: 0.05,
        pue: 1.67,
        psf: 1.0,
    };
    let e = energy_kwh(&p);
    let linear = [2.0, 3.0, 7.5].iter().all(|k| energy_kwh(&EnergyParams { psf: *k, ..p }) == k * e);
    outcome(
        (e - 0.5845).abs() <= 1e-9 && linear,
        format!("energy_kwh = {e:.9}, exact PSF linearity: {linear}"),
    )
}

fn initial_proportions() -> Outcome {
    let cfg = GenomeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let n = 10_000;
    let genes: Vec<_> = (0..n).map(|_| cfg.sample_gene(&mut rng)).collect();
    let mut worst_group: f64 = 0.0;
    for group in GeneGroup::ALL {
        let f = genes.iter().filter(|g| g.group() == group).count() as f64 / n as f64;
        worst_group = worst_group.max((f - 0.25).abs());
    }
    let mut worst_conv: f64 = 0.0;
    for gene in surronas_core::genome::Gene::all().into_iter().filter(|g| g.group() == GeneGroup::Convolution) {
        let f = genes.iter().filter(|g| **g == gene).count() as f64 / n as f64;
        worst_conv = worst_conv.max((f - 0.25 / 6.0).abs());
    }
    outcome(
        worst_group <= 0.02 && worst_conv <= 0.01,
        format!("max group deviation {worst_group:.4}, max conv gene deviation {worst_conv:.4}"),
    )
}

fn cli_run(dir: &Path) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_surronas"))
        .args([
            "run",
            "--population_size=6",
            "--generations=3",
            "--synthetic.height=8",
            "--synthetic.width=8",
            "--synthetic.samples=120",
            "--train.full_epochs=4",
        ])
        .arg(format!("--output={}", dir.display()))
        .env("RUST_LOG", "error")
        .status()
        .expect("run the CLI binary");
    status.success()
}

fn determinism(root: &Path) -> Outcome {
    let dirs = [root.join("det_a"), root.join("det_b")];
    if !dirs.iter().all(|d| cli_run(d)) {
        return outcome(false, "a run invocation failed".into());
    }
    let mut reports = Vec::new();
    for d in &dirs {
        match cmd_report(&[d.clone()], None) {
            Ok(r) => reports.push(r),
            Err(e) => return outcome(false, format!("report failed: {e}")),
        }
    }
    let names = ["quality_per_gen.csv", "pred_vs_actual.csv", "gene_proportions.csv"];
    let same: Vec<bool> = names
        .iter()
        .map(|n| std::fs::read(reports[0].join(n)).ok() == std::fs::read(reports[1].join(n)).ok())
        .collect();
    outcome(
        same.iter().all(|s| *s),
        format!("report CSVs identical: {}", names.iter().zip(&same).map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(" ")),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root: PathBuf = tmp.path().to_path_buf();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "EI matches Monte Carlo", &mut ei_vs_monte_carlo);
    record(2, "Kriging interpolates", &mut kriging_interpolation);
    record(3, "KPLS with identity directions equals Kriging", &mut kpls_identity_equals_kriging);
    record(4, "predictor matches naive inverse", &mut predictor_vs_naive);
    record(5, "high-dimensional surrogate quality", &mut high_dimensional_quality);
    record(6, "gradient check", &mut gradient_check_toy);
    record(7, "intron neutrality", &mut intron_neutrality);
    let smoke = smoke_runs(&root);
    record(8, "split-policy accounting", &mut || split_accounting(&smoke));
    record(9, "quality parity", &mut || quality_parity(&smoke));
    record(10, "surrogate MSE stability", &mut || mse_stability(&smoke));
    record(11, "energy formula", &mut energy_formula);
    record(12, "initial gene proportions", &mut initial_proportions);
    record(13, "determinism", &mut || determinism(&root));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
