//! Acceptance gate: one `[PASS]`/`[FAIL]` line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use depca::density::{g_closed_form, g_numeric, DependencyMatrix};
use depca::estimator::{estimate, EstimatorOptions};
use depca::eval::{
    amari_index, density_comparison, error_m, match_permutation, normalize_dependency,
    off_diagonal_mass, performance_matrix, reference_matrix, GridRange, Measures,
};
use depca::genmodel::{
    build_precision, build_precision_general, generate_dataset, generate_sources, sample_weights,
    GenerationSpec, InverseGamma, SignPattern,
};
use depca::preprocess::{apply_whitening, fit_whitening};
use depca::qpsolve::{solve_dependency_qp, ConstraintSet, FEASIBILITY_TOLERANCE};
use depca::rng::stream;
use depca::scorematch::{assemble_quadratic, grad_w, objective_j, QuadraticForm, UnmixingMatrix};
use depca_cli::config::{ExperimentConfig, GenerateConfig, Mode};
use depca_cli::run::{run, MANIFEST_FILE, STREAM_ESTIMATE, STREAM_GENERATE};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Restarts per estimation in the reduced reproduction; the library default is 10.
const REPRO_RESTARTS: usize = 4;
const REPRO_SEEDS: u64 = 10;

type WeightDensity = (String, Box<dyn Fn(f64) -> f64>, bool);
type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_instance(
    d: usize,
    t: usize,
    rng: &mut impl Rng,
) -> (DMatrix<f64>, UnmixingMatrix, DependencyMatrix) {
    let x = gaussian_matrix(t, d, rng);
    let w = UnmixingMatrix::with_unit_rows(gaussian_matrix(d, d, rng)).unwrap();
    let upper: Vec<f64> = (0..d * (d + 1) / 2)
        .map(|_| rng.random_range(0.0..1.5))
        .collect();
    (x, w, DependencyMatrix::from_upper(d, &upper).unwrap())
}

fn all_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .collect()
}

fn model_identities() -> Outcome {
    let mut rng = stream(101, 0);
    let mut worst_identity = 0.0f64;
    for k in 0..20 {
        let (x, w, m) = random_instance(2 + k % 5, 200, &mut rng);
        let j = objective_j(&x, &w, &m).unwrap();
        let q = assemble_quadratic(&x, &w).unwrap();
        let quad = q.value(&DVector::from_vec(m.to_upper()));
        worst_identity = worst_identity.max((j - quad).abs() / (1.0 + j.abs()));
    }

    let mut det_violations = 0;
    let mut dominance_violations = 0;
    for draw in 0..1000 {
        let d = 2 + draw % 7;
        let spec = GenerationSpec {
            dim: d,
            diagonal: InverseGamma::new(rng.random_range(0.5..3.0), rng.random_range(0.1..2.0))
                .unwrap(),
            off_diagonal: InverseGamma::new(rng.random_range(0.5..3.0), rng.random_range(0.1..2.0))
                .unwrap(),
            pattern: all_pairs(d)
                .into_iter()
                .filter(|_| rng.random_bool(0.7))
                .collect(),
            samples: 1,
            seed: 0,
        };
        let u = sample_weights(&spec, &mut rng).unwrap();
        let diag_product: f64 = (0..d).map(|i| u.as_matrix()[(i, i)]).product();
        if build_precision(&u).determinant() < diag_product * (1.0 - 1e-12) {
            det_violations += 1;
        }
        let mut theta = DMatrix::from_element(d, d, 0.0);
        for i in 0..d {
            theta[(i, i)] = 1.0;
            for j in i + 1..d {
                let s = [-1.0, 0.0, 1.0][rng.random_range(0..3)];
                theta[(i, j)] = s;
                theta[(j, i)] = s;
            }
        }
        let general = build_precision_general(&u, &SignPattern::new(theta).unwrap()).unwrap();
        if !general.is_strictly_diagonally_dominant() {
            dominance_violations += 1;
        }
    }
    outcome(
        worst_identity <= 1e-12 && det_violations == 0 && dominance_violations == 0,
        format!(
            "quadratic identity worst rel {worst_identity:.1e} (tol 1e-12); determinant bound violations {det_violations}/1000; \
             dominance violations {dominance_violations}/1000"
        ),
    )
}

fn g_transforms() -> Outcome {
    let grid: Vec<f64> = (0..100)
        .map(|k| 0.01 + k as f64 * (25.0 - 0.01) / 99.0)
        .collect();
    let mut densities: Vec<WeightDensity> = Vec::new();
    for m in [0.5, 1.0, 2.0] {
        let off = InverseGamma::off_diagonal_for(m).unwrap();
        densities.push((
            format!("off-diagonal inverse-Gamma m={m}"),
            Box::new(move |u| off.pdf(u)),
            false,
        ));
        let diag = InverseGamma::diagonal_for(m).unwrap();
        densities.push((
            format!("diagonal inverse-Gamma m={m}"),
            Box::new(move |u| diag.pdf(u)),
            true,
        ));
    }
    let shape2 = InverseGamma::new(2.0, 1.0).unwrap();
    densities.push((
        "inverse-Gamma(2, 1)".into(),
        Box::new(move |u| shape2.pdf(u)),
        false,
    ));
    densities.push((
        "Gamma(2, 1)".into(),
        Box::new(|u: f64| u * (-u).exp()),
        false,
    ));
    densities.push((
        "log-normal".into(),
        Box::new(|u: f64| (-(u.ln()).powi(2) / 2.0).exp() / u),
        false,
    ));

    let mut failures = Vec::new();
    let mut worst_offset = 0.0f64;
    for (k, (name, pdf, with_sqrt)) in densities.iter().enumerate() {
        let log_g: Vec<f64> = grid
            .iter()
            .map(|&v| g_numeric(v, pdf.as_ref(), *with_sqrt).unwrap().ln())
            .collect();
        let increasing = log_g.windows(2).any(|w| w[1] - w[0] > 1e-8);
        let concave = log_g.windows(3).any(|w| w[2] - 2.0 * w[1] + w[0] < -1e-8);
        if increasing || concave {
            failures.push(format!(
                "{name}: decreasing {} convex {}",
                !increasing, !concave
            ));
        }
        if k < 6 {
            let m = [0.5, 1.0, 2.0][k / 2];
            let offsets: Vec<f64> = grid
                .iter()
                .zip(&log_g)
                .map(|(&v, lg)| lg - g_closed_form(v, m).unwrap())
                .collect();
            let spread = offsets
                .iter()
                .map(|o| (o - offsets[0]).abs())
                .fold(0.0, f64::max);
            worst_offset = worst_offset.max(spread);
        }
    }
    outcome(
        failures.is_empty() && worst_offset <= 1e-6,
        format!(
            "{} weight densities monotone and convex{}; closed form vs quadrature worst spread {worst_offset:.1e} (tol 1e-6)",
            densities.len() - failures.len(),
            if failures.is_empty() { String::new() } else { format!(", failures: {}", failures.join("; ")) }
        ),
    )
}

fn score_matching() -> Outcome {
    let mut rng = stream(303, 0);
    let mut worst_quad = 0.0f64;
    let mut worst_direct = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let (x, w, m) = random_instance(4, 100, &mut rng);
        let j = objective_j(&x, &w, &m).unwrap();
        let q = assemble_quadratic(&x, &w).unwrap();
        worst_quad =
            worst_quad.max((j - q.value(&DVector::from_vec(m.to_upper()))).abs() / (1.0 + j.abs()));
        let direct = oracles::direct_objective(&x, w.as_matrix(), m.as_matrix());
        worst_direct = worst_direct.max((j - direct).abs() / (1.0 + j.abs()));
        let analytic = grad_w(&x, &w, &m).unwrap();
        let numeric = oracles::finite_difference_gradient(w.as_matrix(), 1e-5, |cand| {
            oracles::direct_objective(&x, cand, m.as_matrix())
        });
        worst_grad = worst_grad.max((&analytic - &numeric).norm() / numeric.norm());
    }
    outcome(
        worst_quad <= 1e-10 && worst_direct <= 1e-10 && worst_grad <= 1e-5,
        format!(
            "J vs quadratic form worst {worst_quad:.1e}, vs direct oracle {worst_direct:.1e} (tol 1e-10); \
             gradient vs finite differences worst rel {worst_grad:.1e} (tol 1e-5)"
        ),
    )
}

fn random_qp(d: usize, rng: &mut impl Rng) -> QuadraticForm {
    let p = d * (d + 1) / 2;
    let r = gaussian_matrix(p, p, rng);
    let h = r.transpose() * &r / p as f64 + DMatrix::identity(p, p) * 0.5;
    let b = gaussian_matrix(p, 1, rng).column(0) * 2.0;
    QuadraticForm { h, b }
}

fn qp_correctness() -> Outcome {
    let mut rng = stream(404, 0);
    let lambdas = [0.0, 0.25, 0.5, 1.0, 2.0];
    let mut worst_kkt = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut infeasible = 0;
    let mut mass_increases = 0;
    for k in 0..20 {
        let d = 2 + k % 5;
        let q = random_qp(d, &mut rng);
        let (_, oracle) = oracles::projected_gradient_qp(&q.h, &q.b, d, 1_000_000);
        let mut prev_mass = f64::INFINITY;
        for &lambda in &lambdas {
            let sol = solve_dependency_qp(&q, d, lambda).unwrap();
            worst_kkt = worst_kkt.max(sol.kkt_residual);
            if !ConstraintSet::new(d)
                .violations(&sol.m, FEASIBILITY_TOLERANCE)
                .is_empty()
            {
                infeasible += 1;
            }
            if lambda == 0.0 {
                worst_gap = worst_gap.max((sol.objective - oracle).abs());
            }
            let mass = sol.m.sum();
            if mass > prev_mass + 1e-9 {
                mass_increases += 1;
            }
            prev_mass = mass;
        }
    }
    outcome(
        worst_kkt <= 1e-6 && worst_gap <= 1e-8 && infeasible == 0 && mass_increases == 0,
        format!(
            "worst KKT {worst_kkt:.1e} (tol 1e-6); oracle gap {worst_gap:.1e} (tol 1e-8); infeasible {infeasible}/100; \
             mass increases along the 5-point sparsity grid {mass_increases}"
        ),
    )
}

fn approximation_quality() -> Outcome {
    let mut rng = stream(505, 0);
    let mut lines = Vec::new();
    let mut all = true;
    for m12 in [0.0, 0.25, 0.5, 0.75, 0.95] {
        let spec = GenerationSpec::pair_with_coupling(m12, 100_000, 505).unwrap();
        let s = generate_sources(&spec, &mut rng).unwrap();
        let m =
            DependencyMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, m12, m12, 1.0])).unwrap();
        let cmp = density_comparison(&s, &m, 100, GridRange::default()).unwrap();
        let beats = |base: &Measures| {
            cmp.model.ang > base.ang && cmp.model.kl < base.kl && cmp.model.sq < base.sq
        };
        let ok = beats(&cmp.gaussian) && beats(&cmp.laplace);
        all &= ok;
        let fmt = |x: &Measures| format!("{:.6}/{:.5}/{:.3e}", x.ang, x.kl, x.sq);
        lines.push(format!(
            "m12={m12}: model {} gauss {} laplace {}{}",
            fmt(&cmp.model),
            fmt(&cmp.gaussian),
            fmt(&cmp.laplace),
            if ok {
                ""
            } else {
                " <- not better on every measure"
            }
        ));
    }
    outcome(
        all,
        format!(
            "ang/kl/sq per coupling\n        {}",
            lines.join("\n        ")
        ),
    )
}

struct Scores {
    amari_full: f64,
    amari_ica: f64,
    error_full: f64,
    error_ica: f64,
    off_diagonal: f64,
}

fn reproduce_once(spec: &GenerationSpec, seed: u64) -> Scores {
    let data = generate_dataset(spec, &mut stream(seed, STREAM_GENERATE)).unwrap();
    let whitening = fit_whitening(&data.x, spec.dim).unwrap();
    let z = apply_whitening(&whitening, &data.x).unwrap();
    let opts = EstimatorOptions {
        restarts: REPRO_RESTARTS,
        seed,
        ..Default::default()
    };
    let res = estimate(&z, &opts, &mut stream(seed, STREAM_ESTIMATE)).unwrap();
    let reference = reference_matrix(spec);
    let score = |w: &DMatrix<f64>, m: &DependencyMatrix| {
        let p = performance_matrix(w, &data.mixing, Some(&whitening.projection)).unwrap();
        (
            amari_index(&p).unwrap(),
            error_m(m, &reference, &match_permutation(&p)).unwrap(),
        )
    };
    let (amari_full, error_full) = score(res.w_hat.as_matrix(), &res.m_hat);
    let (amari_ica, error_ica) = score(res.ica.w.as_matrix(), &res.ica.m);
    Scores {
        amari_full,
        amari_ica,
        error_full,
        error_ica,
        off_diagonal: off_diagonal_mass(&normalize_dependency(&res.m_hat)),
    }
}

fn simulation_reproduction() -> Outcome {
    let (d, t) = (10, 20_000);
    let mut independent = Vec::new();
    let mut block = Vec::new();
    for seed in 1..=REPRO_SEEDS {
        independent.push(reproduce_once(
            &GenerationSpec::independent(d, t, seed),
            seed,
        ));
        block.push(reproduce_once(&GenerationSpec::block(d, t, seed), seed));
        let (i, b) = (independent.last().unwrap(), block.last().unwrap());
        println!(
            "        seed {seed}: independent amari {:.4} (ica {:.4}) offdiag {:.3}; block amari {:.4} (ica {:.4}) error_m {:.3} (ica+qp {:.3})",
            i.amari_full, i.amari_ica, i.off_diagonal, b.amari_full, b.amari_ica, b.error_full, b.error_ica
        );
    }
    let med = |v: &[Scores], f: fn(&Scores) -> f64| median(v.iter().map(f).collect());
    let ind_amari = med(&independent, |s| s.amari_full);
    let ind_ica = med(&independent, |s| s.amari_ica);
    let ind_off = med(&independent, |s| s.off_diagonal);
    let blk_amari = med(&block, |s| s.amari_full);
    let blk_ica = med(&block, |s| s.amari_ica);
    let blk_err = med(&block, |s| s.error_full);
    let blk_err_ica = med(&block, |s| s.error_ica);
    let checks = [
        ind_amari <= 1.5 * ind_ica,
        ind_off < 0.1 * d as f64,
        blk_amari <= blk_ica,
        blk_err < blk_err_ica,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "{REPRO_SEEDS} seeds, {REPRO_RESTARTS} restarts. Independent: median amari {ind_amari:.4} vs 1.5 x ica {:.4} [{}], \
             median off-diagonal mass {ind_off:.3} < {:.1} [{}]. Block: median amari {blk_amari:.4} <= ica {blk_ica:.4} [{}], \
             median error_m {blk_err:.3} < ica+qp {blk_err_ica:.3} [{}]",
            1.5 * ind_ica,
            checks[0],
            0.1 * d as f64,
            checks[1],
            checks[2],
            checks[3]
        ),
    )
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        mode: Some(Mode::Pipeline),
        seed: 2024,
        generate: GenerateConfig {
            dim: 5,
            samples: 2000,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.estimator.restarts = 2;
    cfg.eval.lambda_grid = vec![0.0, 0.5];
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        cfg.output_dir = tmp.path().join(name);
        runs.push(outputs(&run(&cfg).unwrap()));
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        differing.is_empty() && runs[0].len() == runs[1].len() && !runs[0].is_empty(),
        format!(
            "{} files compared byte for byte (manifest excluded), differing: {differing:?}",
            runs[0].len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        (
            "AC1",
            "model identities",
            Duration::from_secs(10),
            model_identities,
        ),
        ("AC2", "g transforms", Duration::from_secs(30), g_transforms),
        (
            "AC3",
            "score matching correctness",
            Duration::from_secs(60),
            score_matching,
        ),
        (
            "AC4",
            "QP correctness",
            Duration::from_secs(120),
            qp_correctness,
        ),
        (
            "AC5",
            "two-source density approximation",
            Duration::from_secs(300),
            approximation_quality,
        ),
        (
            "AC6",
            "reduced simulation reproduction",
            Duration::from_secs(1800),
            simulation_reproduction,
        ),
        (
            "AC7",
            "pipeline determinism",
            Duration::from_secs(600),
            determinism,
        ),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let passed = result.passed && elapsed <= budget;
        failed += usize::from(!passed);
        println!(
            "[{}] {id} {name} ({:.1}s, budget {}s): {}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            result.detail
        );
    }
    println!("[EXCLUDED] AC8 real-data figures: excluded at desk scale; MDS is covered by the eval unit tests");
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
