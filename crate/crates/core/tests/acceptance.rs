//! End-to-end acceptance suite. Each numbered check prints one PASS/FAIL
//! line (SKIP for the conditional file-based check) and the test fails if
//! any check fails. Run with `--nocapture` to watch progress; the whole
//! suite is deterministic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use fme_core::benchmark::{run_benchmark, BenchmarkConfig};
use fme_core::{
    build_designs, coefficient_functions, cross_gram, derivative_operator, evaluate_ccr, fit,
    fit_with_responsibilities, nll_and_grad, predict_labels, simulate, solve_pwmlr, split_dataset,
    BSplineBasis, FitConfig, FitVariant, FunctionalDataset, PwmlrPoint, PwmlrProblem,
    Responsibilities, SimConfig, SolverOptions,
};

fn record(failures: &mut Vec<String>, number: u32, label: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number} ({label}): {verdict} - {detail}");
    if !pass {
        failures.push(format!("criterion {number} ({label}): {detail}"));
    }
}

fn sim_train(n: usize, seed: u64) -> FunctionalDataset {
    simulate(&SimConfig {
        n_train: n,
        n_test: 1,
        noise_var: 1.0,
        seed,
        truth_scale: 1.0,
    })
    .unwrap()
    .train
}

fn small_config(variant: FitVariant) -> FitConfig {
    let (chi, lambda) = variant.default_penalties();
    FitConfig {
        variant,
        chi,
        lambda,
        num_components: 2,
        r: 8,
        p: 8,
        q: 8,
        n_restarts: 1,
        max_em_iters: 60,
        ..FitConfig::default()
    }
}

#[test]
fn acceptance_criteria() {
    let mut failures: Vec<String> = Vec::new();

    // ----- 1 & 2: replicated benchmark ordering and noise degradation -----
    let low_noise = run_benchmark(&BenchmarkConfig::default()).unwrap();
    let high_noise = run_benchmark(&BenchmarkConfig {
        noise_vars: vec![5.0],
        ..BenchmarkConfig::default()
    })
    .unwrap();

    {
        let mean = |v: FitVariant| low_noise.cell(v, 1.0).unwrap().mean_ccr;
        let fails: usize = low_noise.cells.iter().map(|c| c.failures).sum();
        let (ifme, lasso, fme, fmlr) = (
            mean(FitVariant::IfmeEm),
            mean(FitVariant::FmeEmLasso),
            mean(FitVariant::FmeEm),
            mean(FitVariant::Fmlr),
        );
        let elapsed = low_noise.elapsed.as_secs_f64();
        let pass = ifme >= lasso
            && lasso >= fme + 0.02
            && ifme >= fme + 0.02
            && fme >= fmlr + 0.02
            && ifme >= 0.85
            && fails == 0
            && elapsed <= 900.0;
        record(
            &mut failures,
            1,
            "benchmark ordering",
            pass,
            format!(
                "mean test rates iFME-EM {ifme:.4} >= FME-EM-Lasso {lasso:.4} >= FME-EM \
                 {fme:.4}+0.02 >= FMLR {fmlr:.4}+0.02, iFME-EM >= 0.85, {fails} failed fits, \
                 {elapsed:.0}s <= 900s"
            ),
        );
    }

    {
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut lines = Vec::new();
        for &variant in &low_noise.variants {
            let low = low_noise.cell(variant, 1.0).unwrap().mean_ccr;
            let high = high_noise.cell(variant, 5.0).unwrap().mean_ccr;
            worst = worst.max(high - low);
            lines.push(format!("{} {low:.4}->{high:.4}", variant.name()));
        }
        record(
            &mut failures,
            2,
            "noise degradation",
            worst <= 0.01,
            format!(
                "every variant's noise_var=5 mean within +0.01 of its noise_var=1 mean \
                 (worst shift {worst:+.4}): {}",
                lines.join(", ")
            ),
        );
    }

    // ----- 3: EM ascent on 50 small instances -----
    {
        let mut worst_plain: f64 = 0.0;
        let mut worst_penalized: f64 = 0.0;
        let mut errors = 0usize;
        for i in 0..50u64 {
            let ds = sim_train(60, 300 + i);
            for variant in [
                FitVariant::FmeEm,
                FitVariant::FmeEmLasso,
                FitVariant::IfmeEm,
            ] {
                let mut config = small_config(variant);
                config.seed = i;
                match fit(&ds, &config) {
                    Ok(report) => {
                        for w in report.trace.windows(2) {
                            let drop = w[0] - w[1];
                            if variant == FitVariant::FmeEm {
                                worst_plain = worst_plain.max(drop);
                            } else {
                                worst_penalized = worst_penalized.max(drop);
                            }
                        }
                    }
                    Err(_) => errors += 1,
                }
            }
        }
        let pass = worst_plain <= 1e-8 && worst_penalized <= 1e-6 && errors == 0;
        record(
            &mut failures,
            3,
            "EM ascent",
            pass,
            format!(
                "50 instances x 3 variants: worst plain trace drop {worst_plain:.2e} <= 1e-8, \
                 worst penalized drop {worst_penalized:.2e} <= 1e-6, {errors} fit errors"
            ),
        );
    }

    // ----- 4: parameterization equivalence at zero penalty -----
    {
        let mut worst: f64 = 0.0;
        for i in 0..10u64 {
            let ds = sim_train(60, 400 + i);
            let mut rng = ChaCha12Rng::seed_from_u64(500 + i);
            let mut tau = DMatrix::zeros(ds.len(), 2);
            for row in 0..ds.len() {
                let p = rng.random_range(0.2..0.8);
                tau[(row, 0)] = p;
                tau[(row, 1)] = 1.0 - p;
            }
            let tau0 = Responsibilities::new(tau).unwrap();
            // the parameterizations are exactly equivalent at zero penalty,
            // so the residual gap is set by how hard both runs converge:
            // drive them well past the comparison tolerance
            let mut plain_cfg = small_config(FitVariant::FmeEm);
            plain_cfg.em_rel_tol = 1e-12;
            plain_cfg.max_em_iters = 3000;
            plain_cfg.solver.grad_tol = 1e-10;
            let mut reparam_cfg = small_config(FitVariant::IfmeEm);
            reparam_cfg.chi = 0.0;
            reparam_cfg.lambda = 0.0;
            reparam_cfg.em_rel_tol = 1e-12;
            reparam_cfg.max_em_iters = 3000;
            reparam_cfg.solver.grad_tol = 1e-10;
            let plain = fit_with_responsibilities(&ds, &plain_cfg, &tau0).unwrap();
            let reparam = fit_with_responsibilities(&ds, &reparam_cfg, &tau0).unwrap();
            worst = worst.max((plain.loglik - reparam.loglik).abs());
        }
        record(
            &mut failures,
            4,
            "parameterization equivalence",
            worst <= 1e-6,
            format!(
                "10 shared-initialization pairs: largest final log-likelihood gap \
                 {worst:.2e} <= 1e-6"
            ),
        );
    }

    // ----- 5: solver against a derivative-free oracle -----
    {
        let mut worst: f64 = 0.0;
        for i in 0..25u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(600 + i);
            let n = rng.random_range(20..=40);
            let d = rng.random_range(1..=2usize);
            let l1 = rng.random_range(0.05..1.0);
            let designs =
                DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
            let weights = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.5));
            let mut targets = DMatrix::zeros(n, 2);
            let true_b: f64 = rng.random_range(-2.0..2.0);
            let true_u: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for row in 0..n {
                let mut score = true_b;
                for j in 0..d {
                    score += designs[(row, j)] * true_u[j];
                }
                let p = 1.0 / (1.0 + (-score).exp());
                targets[(row, 0)] = p;
                targets[(row, 1)] = 1.0 - p;
            }

            let objective = |theta: &[f64]| -> f64 {
                let mut total = 0.0;
                for row in 0..n {
                    let mut score = theta[0];
                    for j in 0..d {
                        score += designs[(row, j)] * theta[1 + j];
                    }
                    // ln(1 + e^score), stable on both sides
                    let lse = if score > 0.0 {
                        score + (-score).exp().ln_1p()
                    } else {
                        score.exp().ln_1p()
                    };
                    total += weights[row] * (lse - targets[(row, 0)] * score);
                }
                total + l1 * theta[1..].iter().map(|v| v.abs()).sum::<f64>()
            };

            let problem = PwmlrProblem {
                designs: &designs,
                targets: &targets,
                weights: &weights,
                l1_weight: l1,
                penalty_map: None,
            };
            let solution = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();

            // cyclic golden-section descent on the box [-10, 10]^dim; the
            // objective is convex with a coordinate-separable nonsmooth part,
            // so coordinate minimization reaches the global optimum
            let mut theta = vec![0.0; 1 + d];
            for _ in 0..300 {
                let mut max_change: f64 = 0.0;
                for j in 0..theta.len() {
                    let frozen = theta.clone();
                    let best = golden_min(
                        |z| {
                            let mut probe = frozen.clone();
                            probe[j] = z;
                            objective(&probe)
                        },
                        -10.0,
                        10.0,
                        1e-11,
                    );
                    max_change = max_change.max((best - theta[j]).abs());
                    theta[j] = best;
                }
                if max_change < 1e-10 {
                    break;
                }
            }
            assert!(
                theta.iter().all(|z| z.abs() < 9.5),
                "oracle optimum pressed against the search box"
            );
            worst = worst.max((solution.objective - objective(&theta)).abs());
        }
        record(
            &mut failures,
            5,
            "solver oracle",
            worst <= 1e-3,
            format!("25 random problems: largest objective gap {worst:.2e} <= 1e-3"),
        );
    }

    // ----- 6: solver gradient against central differences -----
    {
        let mut worst: f64 = 0.0;
        for i in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(700 + i);
            let n = rng.random_range(15..=40);
            let d = rng.random_range(1..=4usize);
            let classes = rng.random_range(2..=3usize);
            let designs =
                DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
            let weights = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
            let mut targets = DMatrix::from_fn(n, classes, |_, _| rng.random_range(0.05..1.0));
            for row in 0..n {
                let s: f64 = targets.row(row).iter().sum();
                for c in 0..classes {
                    targets[(row, c)] /= s;
                }
            }
            let problem = PwmlrProblem {
                designs: &designs,
                targets: &targets,
                weights: &weights,
                l1_weight: 0.0,
                penalty_map: None,
            };
            let mut point = PwmlrPoint::zeros(classes - 1, d);
            for c in 0..classes - 1 {
                point.intercepts[c] = StandardNormal.sample(&mut rng);
                for j in 0..d {
                    point.coeffs[c][j] = StandardNormal.sample(&mut rng);
                }
            }

            let (_, grad) = nll_and_grad(&problem, &point).unwrap();
            let value_at = |p: &PwmlrPoint| nll_and_grad(&problem, p).unwrap().0;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let mut diff_at = |get: &dyn Fn(&PwmlrPoint) -> f64,
                               set: &dyn Fn(&mut PwmlrPoint, f64),
                               analytic: f64| {
                let x = get(&point);
                let h = 1e-6 * (1.0 + x.abs());
                let mut hi = point.clone();
                set(&mut hi, x + h);
                let mut lo = point.clone();
                set(&mut lo, x - h);
                let fd = (value_at(&hi) - value_at(&lo)) / (2.0 * h);
                num += (analytic - fd) * (analytic - fd);
                den += analytic * analytic;
            };
            for c in 0..classes - 1 {
                diff_at(
                    &|p: &PwmlrPoint| p.intercepts[c],
                    &|p: &mut PwmlrPoint, v| p.intercepts[c] = v,
                    grad.intercepts[c],
                );
                for j in 0..d {
                    diff_at(
                        &|p: &PwmlrPoint| p.coeffs[c][j],
                        &|p: &mut PwmlrPoint, v| p.coeffs[c][j] = v,
                        grad.coeffs[c][j],
                    );
                }
            }
            worst = worst.max(num.sqrt() / den.sqrt().max(1.0));
        }
        record(
            &mut failures,
            6,
            "gradient check",
            worst <= 1e-5,
            format!("20 random instances: largest relative gradient error {worst:.2e} <= 1e-5"),
        );
    }

    // ----- 7: basis and operator suite -----
    {
        let mut checks: Vec<(bool, String)> = Vec::new();

        let mut worst_unity: f64 = 0.0;
        for (order, dim) in [(2usize, 5usize), (3, 7), (4, 15), (6, 10)] {
            let basis = BSplineBasis::new(order, dim, (0.0, 1.0)).unwrap();
            for step in 0..=500 {
                let t = step as f64 / 500.0;
                let values = basis.eval(t).unwrap();
                worst_unity = worst_unity.max((values.sum() - 1.0).abs());
                assert!(values.iter().all(|&v| v >= -1e-15));
            }
        }
        checks.push((
            worst_unity <= 1e-12,
            format!("partition of unity {worst_unity:.1e}"),
        ));

        let basis = BSplineBasis::new(4, 12, (0.0, 1.0)).unwrap();
        let gram = cross_gram(&basis, &basis).unwrap().matrix;
        let asym = (&gram - gram.transpose()).amax();
        let min_eig = gram
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        checks.push((asym <= 1e-14, format!("Gram symmetry {asym:.1e}")));
        checks.push((min_eig >= -1e-10, format!("Gram min eigenvalue {min_eig:.1e}")));

        let wide = BSplineBasis::new(4, 15, (0.0, 1.0)).unwrap();
        let op = derivative_operator(&wide, 0, 2).unwrap();
        let mut eval_gap: f64 = 0.0;
        for (j, &t) in op.eval_points.iter().enumerate() {
            let values = wide.eval(t).unwrap();
            for col in 0..wide.dim() {
                eval_gap = eval_gap.max((op.block_d1[(j, col)] - values[col]).abs());
            }
        }
        checks.push((
            eval_gap <= 1e-14,
            format!("d1=0 block is the evaluation matrix {eval_gap:.1e}"),
        ));

        let identity_gap = (&op.block_d1 * &op.block_d1_inverse
            - DMatrix::<f64>::identity(wide.dim(), wide.dim()))
        .amax();
        checks.push((
            identity_gap <= 1e-8,
            format!("d1 block invertibility {identity_gap:.1e}"),
        ));

        let chain_gap = (&op.chain * &op.block_d1 - &op.block_d2).amax();
        checks.push((chain_gap <= 1e-10, format!("chain relation {chain_gap:.1e}")));

        // first differences of a partition of unity have zero row sums, so
        // d1 >= 1 must be rejected as structurally singular
        checks.push((
            derivative_operator(&wide, 1, 2).is_err(),
            "d1=1 operator rejected as singular".to_string(),
        ));

        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let coeffs = DVector::from_fn(12, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        });
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
        let samples: Vec<f64> = grid
            .iter()
            .map(|&t| basis.eval(t).unwrap().dot(&coeffs))
            .collect();
        let recovered = basis.project(&grid, &samples).unwrap().coeffs;
        let round_trip = (recovered - &coeffs).amax();
        checks.push((
            round_trip <= 1e-10,
            format!("in-span projection round trip {round_trip:.1e}"),
        ));

        let pass = checks.iter().all(|(ok, _)| *ok);
        let detail: Vec<String> = checks
            .iter()
            .map(|(ok, text)| format!("{text} [{}]", if *ok { "ok" } else { "FAIL" }))
            .collect();
        record(
            &mut failures,
            7,
            "basis and operator suite",
            pass,
            detail.join("; "),
        );
    }

    // ----- 8: FMLR equals an independent multinomial reference -----
    {
        let mut worst_coeff: f64 = 0.0;
        let mut mismatched_predictions = 0usize;
        for i in 0..10u64 {
            let ds = sim_train(120, 800 + i);
            let config = small_config(FitVariant::Fmlr);
            let report = fit(&ds, &config).unwrap();
            let designs = build_designs(&ds, &config.effective()).unwrap();

            let reference = reference_multinomial(
                &designs.bundle.expert,
                &designs.bundle.labels,
                ds.num_classes,
            );
            let block = &report.model.experts.blocks()[0];
            for c in 0..ds.num_classes - 1 {
                worst_coeff = worst_coeff
                    .max((block.intercepts[c] - reference[c][0]).abs());
                for j in 0..config.q {
                    worst_coeff = worst_coeff
                        .max((block.coeffs[c][j] - reference[c][j + 1]).abs());
                }
            }

            let fitted = predict_labels(&report.model, &designs.bundle).unwrap();
            for row in 0..ds.len() {
                let mut scores = vec![0.0; ds.num_classes];
                for (c, coeffs) in reference.iter().enumerate() {
                    scores[c] = coeffs[0]
                        + (1..coeffs.len())
                            .map(|j| coeffs[j] * designs.bundle.expert[(row, j - 1)])
                            .sum::<f64>();
                }
                let best = (0..ds.num_classes)
                    .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                    .unwrap();
                if best + 1 != fitted[row] {
                    mismatched_predictions += 1;
                }
            }
        }
        let pass = worst_coeff <= 1e-4 && mismatched_predictions == 0;
        record(
            &mut failures,
            8,
            "single-model equivalence",
            pass,
            format!(
                "10 datasets: largest coefficient gap {worst_coeff:.2e} <= 1e-4, \
                 {mismatched_predictions} prediction mismatches"
            ),
        );
    }

    // ----- 9: full-shrinkage limit -----
    {
        let ds = sim_train(100, 900);
        let mut config = small_config(FitVariant::FmeEmLasso);
        config.chi = 1e6;
        config.lambda = 1e6;
        let report = fit(&ds, &config).unwrap();

        let gating_zero = report
            .model
            .gating
            .coeffs()
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0));
        let experts_zero = report
            .model
            .experts
            .blocks()
            .iter()
            .all(|b| b.coeffs.iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let mut counts = vec![0usize; ds.num_classes];
        for &label in &ds.labels {
            counts[label - 1] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(idx, _)| idx + 1)
            .unwrap();
        let designs = build_designs(&ds, &config.effective()).unwrap();
        let predictions = predict_labels(&report.model, &designs.bundle).unwrap();
        let all_majority = predictions.iter().all(|&p| p == majority);

        let pass = gating_zero && experts_zero && all_majority;
        record(
            &mut failures,
            9,
            "full-shrinkage limit",
            pass,
            format!(
                "coefficients exactly zero (gating {gating_zero}, experts {experts_zero}), \
                 every prediction is the majority class {majority}: {all_majority}, df {}",
                report.df
            ),
        );
    }

    // ----- 10: conditional real-data check -----
    {
        let path = std::env::var("FME_PHONEME_FILE").unwrap_or_else(|_| {
            format!(
                "{}/../../data/phoneme.csv",
                env!("CARGO_MANIFEST_DIR")
            )
        });
        if !std::path::Path::new(&path).exists() {
            println!(
                "criterion 10 (real-data check): SKIP - no curve file at {path} \
                 (set FME_PHONEME_FILE to run)"
            );
        } else {
            let dataset = fme_core::load_dataset(std::path::Path::new(&path)).unwrap();
            let (train, test) = split_dataset(&dataset, 0.2, 0).unwrap();

            let mut lasso_cfg = FitConfig {
                variant: FitVariant::FmeEmLasso,
                n_restarts: 2,
                max_em_iters: 200,
                ..FitConfig::default()
            };
            let (chi, lambda) = lasso_cfg.variant.default_penalties();
            lasso_cfg.chi = chi;
            lasso_cfg.lambda = lambda;
            let lasso = fit(&train, &lasso_cfg).unwrap();
            let lasso_ccr = evaluate_ccr(&lasso.model, &test, &lasso_cfg).unwrap();

            let mut ifme_cfg = FitConfig {
                variant: FitVariant::IfmeEm,
                n_restarts: 2,
                max_em_iters: 200,
                ..FitConfig::default()
            };
            let (chi, lambda) = ifme_cfg.variant.default_penalties();
            ifme_cfg.chi = chi;
            ifme_cfg.lambda = lambda;
            let ifme = fit(&train, &ifme_cfg).unwrap();
            let ifme_ccr = evaluate_ccr(&ifme.model, &test, &ifme_cfg).unwrap();

            let (lo, hi) = ifme.model.basis_config.domain;
            let grid: Vec<f64> = (0..200)
                .map(|i| lo + (hi - lo) * i as f64 / 199.0)
                .collect();
            let curves = coefficient_functions(&ifme.model, &grid).unwrap();
            let mut zeros = 0usize;
            let mut total = 0usize;
            for block in &curves.experts {
                for export in block {
                    zeros += export.deriv_d2.iter().filter(|&&v| v == 0.0).count();
                    total += export.deriv_d2.len();
                }
            }
            let zero_fraction = zeros as f64 / total as f64;

            let pass = lasso_ccr >= 0.90 && ifme_ccr >= 0.90 && zero_fraction >= 0.5;
            record(
                &mut failures,
                10,
                "real-data check",
                pass,
                format!(
                    "held-out rates FME-EM-Lasso {lasso_ccr:.4} and iFME-EM {ifme_ccr:.4} \
                     >= 0.90; exported second derivatives exactly zero on \
                     {zero_fraction:.2} of the grid >= 0.50"
                ),
            );
        }
    }

    assert!(
        failures.is_empty(),
        "failed acceptance criteria:\n{}",
        failures.join("\n")
    );
}

/// Golden-section minimum of a unimodal function on [a, b].
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Textbook damped-Newton multinomial logistic regression with the last
/// class as reference: independent of the solver under test. Returns one
/// vector per free class, intercept first.
fn reference_multinomial(
    designs: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Vec<Vec<f64>> {
    let n = designs.nrows();
    let d = designs.ncols();
    let cfree = num_classes - 1;
    let dd = d + 1;
    let dim = cfree * dd;
    let mut theta = DVector::<f64>::zeros(dim);

    let scores = |theta: &DVector<f64>, row: usize| -> Vec<f64> {
        (0..cfree)
            .map(|c| {
                let base = c * dd;
                theta[base]
                    + (0..d)
                        .map(|j| theta[base + 1 + j] * designs[(row, j)])
                        .sum::<f64>()
            })
            .collect()
    };
    let nll = |theta: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for row in 0..n {
            let s = scores(theta, row);
            let m = s.iter().fold(0.0f64, |a, &b| a.max(b));
            let lse = m + (s.iter().map(|&v| (v - m).exp()).sum::<f64>() + (-m).exp()).ln();
            let hit = if labels[row] <= cfree {
                s[labels[row] - 1]
            } else {
                0.0
            };
            total += lse - hit;
        }
        total
    };

    for _ in 0..200 {
        // gradient and Hessian of the reference-class multinomial NLL
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for row in 0..n {
            let s = scores(&theta, row);
            let m = s.iter().fold(0.0f64, |a, &b| a.max(b));
            let denom = s.iter().map(|&v| (v - m).exp()).sum::<f64>() + (-m).exp();
            let probs: Vec<f64> = s.iter().map(|&v| (v - m).exp() / denom).collect();
            let mut aug = vec![1.0; dd];
            for j in 0..d {
                aug[1 + j] = designs[(row, j)];
            }
            for c in 0..cfree {
                let target = if labels[row] == c + 1 { 1.0 } else { 0.0 };
                let resid = probs[c] - target;
                for a in 0..dd {
                    grad[c * dd + a] += resid * aug[a];
                }
                for c2 in 0..cfree {
                    let curv = probs[c] * ((c == c2) as usize as f64 - probs[c2]);
                    for a in 0..dd {
                        for b in 0..dd {
                            hess[(c * dd + a, c2 * dd + b)] += curv * aug[a] * aug[b];
                        }
                    }
                }
            }
        }
        if grad.amax() <= 1e-10 {
            break;
        }
        let mut damping = 0.0;
        let step = loop {
            let mut h = hess.clone();
            if damping > 0.0 {
                for k in 0..dim {
                    h[(k, k)] += damping;
                }
            }
            match nalgebra::Cholesky::new(h) {
                Some(chol) => break chol.solve(&(-&grad)),
                None => damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 },
            }
        };
        let f0 = nll(&theta);
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        for _ in 0..60 {
            let trial = &theta + &step * alpha;
            if nll(&trial) <= f0 + 1e-4 * alpha * slope {
                theta = trial;
                break;
            }
            alpha *= 0.5;
        }
    }

    (0..cfree)
        .map(|c| (0..dd).map(|a| theta[c * dd + a]).collect())
        .collect()
}
