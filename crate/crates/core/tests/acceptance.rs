//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use otafl::bound::{self, BoundReport};
use otafl::channel::{sample_fading, LargeScaleGains};
use otafl::harness::config::{ExperimentConfig, Scheme};
use otafl::harness::run::{run_cells, run_experiment, MetricsRecord, Setup};
use otafl::learner::model::{loss, loss_and_grad};
use otafl::learner::{GaussianMixture, ModelParams, ObjectiveSpec};
use otafl::ota::{make_design, ota_round, transmit_indicator};
use otafl::rng::{stream, Purpose};
use otafl::sca::barrier::BarrierOptions;
use otafl::sca::subproblem::{solve_subproblem, Anchor, Subproblem};
use otafl::sca::{closed_form_limits, sca_loop, DesignProblem, ScaOptions, ScaState};
use otafl::NetworkConfig;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn unit_vector<R: Rng>(d: usize, len: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x * len / n).collect()
}

fn truncation_statistics() -> Outcome {
    let mut rng = stream(101, 0, 0, Purpose::Search);
    let draws = 100_000u64;
    let mut worst = 0.0f64;
    for tuple in 0..20u64 {
        let lambda = 10f64.powf(rng.random_range(-2.0..1.0));
        let g_max = rng.random_range(1.0..20.0);
        let d = rng.random_range(10..2000usize);
        let e_s = 10f64.powf(rng.random_range(-1.0..1.0));
        let scale = rng.random_range(0.2..1.5);
        let gamma = scale * (d as f64 * lambda * e_s).sqrt() / g_max;
        let cfg = NetworkConfig::new(LargeScaleGains::new(vec![lambda]).unwrap(), e_s, 0.0, d, g_max).unwrap();
        let hits = (0..draws)
            .filter(|&t| transmit_indicator(sample_fading(&cfg.gains, 1000 + tuple, t).h[0], gamma, &cfg))
            .count();
        let q = (-(gamma * gamma) * g_max * g_max / (d as f64 * lambda * e_s)).exp();
        let se = (q * (1.0 - q) / draws as f64).sqrt();
        worst = worst.max((hits as f64 / draws as f64 - q).abs() / se);
    }
    outcome(worst <= 3.0, format!("max deviation {worst:.2} SE over 20 tuples"))
}

fn conditional_unbiasedness() -> Outcome {
    let (n, d) = (3, 50);
    let cfg = NetworkConfig::new(LargeScaleGains::new(vec![0.5, 1.0, 2.0]).unwrap(), 1.0, 0.05, d, 5.0).unwrap();
    let gamma: Vec<f64> = (0..n).map(|m| 0.7 * cfg.gamma_max(m)).collect();
    let design = make_design(&gamma, &cfg).unwrap();
    let mut rng = stream(102, 0, 0, Purpose::Search);
    let grads: Vec<Vec<f64>> = (0..n).map(|m| unit_vector(d, 2.0 + m as f64, &mut rng)).collect();
    let target: Vec<f64> = (0..d).map(|k| (0..n).map(|m| design.p[m] * grads[m][k]).sum()).collect();
    let rounds = 100_000u64;
    let noise = cfg.noise();
    let (mut mean, mut m2) = (vec![0.0; d], vec![0.0; d]);
    for t in 0..rounds {
        let est = ota_round(&grads, &design, &cfg, &sample_fading(&cfg.gains, 102, t), &noise.sample(102, t)).unwrap();
        let k = (t + 1) as f64;
        for i in 0..d {
            let delta = est.g_hat[i] - mean[i];
            mean[i] += delta / k;
            m2[i] += delta * (est.g_hat[i] - mean[i]);
        }
    }
    let worst = (0..d)
        .map(|i| {
            let se = (m2[i] / (rounds as f64 - 1.0) / rounds as f64).sqrt();
            (mean[i] - target[i]).abs() / se
        })
        .fold(0.0, f64::max);
    let err: f64 = mean.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    outcome(worst <= 3.0, format!("|mean - sum p g| = {err:.3e}, max component deviation {worst:.2} sigma"))
}

fn variance_bound() -> Outcome {
    let mut rng = stream(103, 0, 0, Purpose::Search);
    let trials = 20_000u64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut max_ratio = 0.0f64;
    let mut failures = 0;
    for k in 0..50u64 {
        let n = rng.random_range(2..6usize);
        let d = 10;
        let lambda: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let n0 = 10f64.powf(rng.random_range(-3.0..0.0));
        let cfg = NetworkConfig::new(LargeScaleGains::new(lambda).unwrap(), 1.0, n0, d, 3.0).unwrap();
        let gamma: Vec<f64> = (0..n).map(|m| rng.random_range(0.05..1.0) * cfg.gamma_max(m)).collect();
        let design = make_design(&gamma, &cfg).unwrap();
        // worst-case gradient norms make the transmission term tight
        let grads: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(d, cfg.g_max, &mut rng)).collect();
        let mean: Vec<f64> = (0..d).map(|i| (0..n).map(|m| design.p[m] * grads[m][i]).sum()).collect();
        let noise = cfg.noise();
        let (mut s, mut s2) = (0.0, 0.0);
        for t in 0..trials {
            let est = ota_round(&grads, &design, &cfg, &sample_fading(&cfg.gains, 2000 + k, t), &noise.sample(2000 + k, t))
                .unwrap();
            let v: f64 = est.g_hat.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
            s += v;
            s2 += v * v;
        }
        let var = s / trials as f64;
        let se = ((s2 / trials as f64 - var * var).max(0.0) / trials as f64).sqrt();
        let zeta = bound::zeta(&design, &vec![0.0; n], &cfg).unwrap().zeta;
        if var > zeta + 3.0 * se {
            failures += 1;
        }
        worst_excess = worst_excess.max((var - zeta) / se);
        max_ratio = max_ratio.max(var / zeta);
    }
    outcome(
        failures == 0,
        format!("50 designs, max var/zeta {max_ratio:.3}, max (var - zeta)/SE {worst_excess:.2}"),
    )
}

fn final_round(records: &[MetricsRecord]) -> &MetricsRecord {
    records.last().expect("non-empty run")
}

fn stationarity_bound(setup: &Setup, sca_runs: &[Vec<MetricsRecord>]) -> Outcome {
    let cfg = &setup.config;
    let t = cfg.t_rounds;
    let per_seed: Vec<f64> = sca_runs
        .iter()
        .map(|r| r.iter().filter(|x| x.round < t).map(|x| x.grad_norm_sq).sum::<f64>() / t as f64)
        .collect();
    let measured = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let design = &setup.sca.as_ref().expect("sca designed").design;
    let z = bound::zeta(design, &setup.sigma, &setup.network).unwrap();
    let init = bound::init_term(&setup.spec, &setup.w0, &setup.train, cfg.eta, t).unwrap();
    let report = BoundReport::assemble(z, bound::bias_term(&design.p, setup.kappa), init, cfg.eta, cfg.smoothness());
    outcome(
        measured <= report.total_bound,
        format!(
            "d = {}, {} seeds: measured {measured:.4} <= bound {:.4} (margin {:.4}; init {:.3}, 2*eta*L*zeta {:.3}, bias {:.3})",
            setup.network.d,
            per_seed.len(),
            report.total_bound,
            report.total_bound - measured,
            report.init_term,
            2.0 * cfg.eta * cfg.smoothness() * report.zeta,
            report.bias_term
        ),
    )
}

fn problem(lambda: Vec<f64>, n0: f64, kappa: f64, sigma: f64) -> DesignProblem {
    let n = lambda.len();
    DesignProblem::new(lambda, 10.0, 100, 1.0, n0, 0.1, 1.0, kappa, vec![sigma; n]).unwrap()
}

fn single_device_grid(pr: &DesignProblem, anchor: &Anchor) -> f64 {
    let (gmax, amax) = closed_form_limits(pr);
    let (gb, ab) = (anchor.gamma[0], anchor.alpha);
    let c = pr.g_max * pr.g_max / (pr.d as f64 * pr.lambda[0] * pr.e_s);
    let g2 = pr.g_max * pr.g_max;
    let value = |gamma: f64| -> f64 {
        let alpha = (ab * (1.0 + gamma.ln() - c * gamma * gamma - ab.ln())).min(2.0 * ab - ab * ab / amax[0]);
        if alpha <= 0.0 {
            return f64::INFINITY;
        }
        let z = gb * (gamma / gb - 1.0).exp() / alpha;
        pr.eta * pr.smoothness * (g2 * z + pr.d as f64 * pr.n0 / (alpha * alpha) + pr.sigma[0].powi(2) - g2)
    };
    let n = 200_000;
    let (mut best, mut arg) = (f64::INFINITY, 0.0);
    for i in 1..=n {
        let g = gmax[0] * i as f64 / n as f64;
        let v = value(g);
        if v < best {
            best = v;
            arg = g;
        }
    }
    let h = gmax[0] / n as f64;
    let (mut lo, mut hi) = ((arg - h).max(1e-300), (arg + h).min(gmax[0]));
    for _ in 0..200 {
        let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
        if value(m1) < value(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    best.min(value(0.5 * (lo + hi)))
}

fn sca_correctness(physical: &DesignProblem) -> Outcome {
    let mut rng = stream(105, 0, 0, Purpose::Search);
    let opts = ScaOptions::default();
    let mut problems = vec![physical.clone()];
    for _ in 0..9 {
        let n = rng.random_range(2..9usize);
        let lambda = (0..n).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        problems.push(problem(lambda, 10f64.powf(rng.random_range(-4.0..0.0)), rng.random_range(0.0..2.0), rng.random_range(0.0..0.5)));
    }
    let (mut trace_ok, mut cert_ok) = (true, true);
    let mut worst_residual = 0.0f64;
    for pr in &problems {
        let out = sca_loop(pr, None, &opts).unwrap();
        trace_ok &= out.state.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0));
        cert_ok &= out.certificate.accepted;
        let (_, amax) = closed_form_limits(pr);
        for (r, a) in out.certificate.coupling_residual.iter().zip(&amax) {
            worst_residual = worst_residual.max(r / a);
        }
        worst_residual = worst_residual.max(out.certificate.simplex_residual);
    }
    let mut uniform_dev = 0.0f64;
    for (n, l) in [(2, 0.5), (5, 1.0), (10, 3.0)] {
        let out = sca_loop(&problem(vec![l; n], 1e-3, 0.3, 0.1), None, &opts).unwrap();
        uniform_dev = uniform_dev.max(out.design.p.iter().map(|p| (p - 1.0 / n as f64).abs()).fold(0.0, f64::max));
    }
    let mut grid_err = 0.0f64;
    for (l, n0) in [(1.0, 1e-3), (0.3, 1e-1), (4.0, 1e-4)] {
        let pr = problem(vec![l], n0, 0.5, 0.2);
        let anchor = ScaState::default_init(&pr, 0.9).unwrap().anchor;
        let sub = Subproblem::new(&pr, anchor.clone(), 1e-9).unwrap();
        let sol = solve_subproblem(&sub, &BarrierOptions::default()).unwrap();
        let grid = single_device_grid(&pr, &anchor);
        grid_err = grid_err.max((sol.objective - grid).abs() / grid.abs());
    }
    let pass = trace_ok && cert_ok && worst_residual <= 1e-6 && uniform_dev <= 1e-5 && grid_err <= 1e-4;
    outcome(
        pass,
        format!(
            "(a) traces monotone: {trace_ok}; (b) certificates accepted: {cert_ok}, max residual {worst_residual:.1e}; \
             (c) homogeneous max |p - 1/N| {uniform_dev:.1e}; (d) N=1 vs grid rel err {grid_err:.1e}"
        ),
    )
}

fn gradient_check() -> Outcome {
    let data = GaussianMixture::default().generate(0).unwrap();
    let samples = &data.samples[..300];
    let spec = ObjectiveSpec::new(20, vec![32], 10, 1e-4).unwrap();
    let mut rng = stream(106, 0, 0, Purpose::Search);
    let mut worst = 0.0f64;
    for probe in 0..10 {
        let mut w = spec.init(probe);
        w.w.iter_mut().for_each(|v| *v += 0.1 * (rng.random::<f64>() - 0.5));
        let (_, g) = loss_and_grad(&spec, &w, samples);
        let v = unit_vector(spec.dim(), 1.0, &mut rng);
        let h = 1e-6;
        let at = |s: f64| ModelParams {
            w: w.w.iter().zip(&v).map(|(a, b)| a + s * b).collect(),
        };
        let fd = (loss(&spec, &at(h), samples) - loss(&spec, &at(-h), samples)) / (2.0 * h);
        let an: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()));
    }
    outcome(worst <= 1e-5, format!("10 probes, d = {}, max relative error {worst:.2e}", spec.dim()))
}

fn ordering(setup: &Setup, finals: &std::collections::BTreeMap<Scheme, Vec<f64>>) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let check = |a: Scheme, b: Scheme| -> (bool, String) {
        let (x, y) = (&finals[&a], &finals[&b]);
        let diffs: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        let m = mean(&diffs);
        let n = diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        (m >= -se, format!("{a}-{b} {m:+.4}±{se:.4}"))
    };
    use Scheme::*;
    let gated = [
        (IdealFedavg, Opc),
        (IdealFedavg, Sca),
        (Opc, Vanilla),
        (Sca, Vanilla),
        (Sca, Lcpc),
        (BbflAlternative, BbflInterior),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (a, b) in gated {
        let (ok, s) = check(a, b);
        pass &= ok;
        parts.push(if ok { s } else { format!("{s} FAILED") });
    }
    let (_, info) = check(Sca, Opc);
    let means: Vec<String> = Scheme::ALL.iter().map(|s| format!("{s} {:.4}", mean(&finals[s]))).collect();
    outcome(
        pass,
        format!(
            "{} seeds; {}; reported only: {info}; final accuracy: {}",
            setup.config.seeds.len(),
            parts.join(", "),
            means.join(", ")
        ),
    )
}

fn bias_arithmetic() -> Outcome {
    let two = bound::bias_term(&[1.0, 0.0], 1.0);
    let zeros: Vec<f64> = [2usize, 3, 4, 7, 10]
        .iter()
        .map(|&n| bound::bias_term(&vec![1.0 / n as f64; n], 2.5))
        .collect();
    outcome(
        two == 2.0 && zeros.iter().all(|z| *z == 0.0),
        format!("bias((1,0), kappa=1) = {two}, uniform = {zeros:?}"),
    )
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0, 1];
    cfg.t_rounds = 20;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect_files(a.path(), &mut fa);
    collect_files(b.path(), &mut fb);
    let same_names = fa.iter().map(|p| p.strip_prefix(a.path()).unwrap().to_path_buf()).collect::<Vec<_>>()
        == fb.iter().map(|p| p.strip_prefix(b.path()).unwrap().to_path_buf()).collect::<Vec<_>>();
    let identical = same_names && fa.iter().zip(&fb).all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap());
    outcome(identical, format!("{} output files compared byte for byte", fa.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let pass = o.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {id}. {name}: {} ({:.1}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    };
    report(1, "truncation statistics", Duration::from_secs(10), &mut truncation_statistics);
    report(2, "conditional unbiasedness", Duration::from_secs(30), &mut conditional_unbiasedness);
    report(3, "variance bound", Duration::from_secs(300), &mut variance_bound);

    let start = Instant::now();
    let setup = Setup::build(&ExperimentConfig::default()).expect("default setup");
    let cells = run_cells(&setup);
    let toy_time = start.elapsed();
    let mut finals = std::collections::BTreeMap::new();
    let mut sca_runs = Vec::new();
    for (scheme, _, res) in cells {
        let records = res.expect("cell run");
        finals.entry(scheme).or_insert_with(Vec::new).push(final_round(&records).test_accuracy);
        if scheme == Scheme::Sca {
            sca_runs.push(records);
        }
    }
    let per_scheme = toy_time / Scheme::ALL.len() as u32;
    report(4, "stationarity bound end to end", Duration::from_secs(600), &mut || {
        let mut o = stationarity_bound(&setup, &sca_runs);
        o.detail += &format!(" [sca cells ~{:.0}s]", per_scheme.as_secs_f64());
        o
    });
    let physical = setup.design_problem().expect("design problem");
    report(5, "SCA correctness", Duration::from_secs(120), &mut || sca_correctness(&physical));
    report(6, "gradient correctness", Duration::from_secs(10), &mut gradient_check);
    report(7, "scheme ordering", Duration::from_secs(1800), &mut || {
        let mut o = ordering(&setup, &finals);
        o.detail += &format!(" [all cells {:.0}s]", toy_time.as_secs_f64());
        o.pass &= toy_time <= Duration::from_secs(1800);
        o
    });
    report(8, "bias-term arithmetic", Duration::from_secs(1), &mut bias_arithmetic);
    report(9, "determinism", Duration::from_secs(300), &mut determinism);
    println!("{} of 9 acceptance criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
