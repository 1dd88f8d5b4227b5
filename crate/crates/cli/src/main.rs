//! Command-line front end for the functional mixture-of-experts pipeline.
//!
//! Subcommands cover the full workflow: `simulate` draws synthetic data,
//! `fit` estimates a model, `predict`/`evaluate` apply it, `benchmark` runs
//! the replicated variant comparison, and `export-coefs` samples fitted
//! coefficient functions for plotting.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 fit did not
//! converge (outputs are still written). Every run echoes its resolved
//! configuration, defaults included, to standard error. Output files are
//! written atomically (temp file + rename), and identical invocations with
//! identical seeds produce byte-identical artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use fme_core::{
    coefficient_functions, evaluate_ccr, fit, load_dataset, run_benchmark, select_hyperparams,
    simulate, BenchmarkConfig, CandidateGrid, FitConfig, FitReport, FitVariant, FmeModel,
    FunctionalDataset, Parameterization, SelectionRule, SimConfig, SimOutput,
};
use nalgebra::DVector;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

/// Functional mixture-of-experts classification.
#[derive(Parser)]
#[command(name = "fme", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic train/test pair and write them with the generating truth
    Simulate(SimulateArgs),
    /// Fit a model to a training file; writes the model document and a fit report
    Fit(FitArgs),
    /// Classify every row of a data file with a fitted model
    Predict(PredictArgs),
    /// Print the correct classification rate of a model on a labeled file
    Evaluate(EvaluateArgs),
    /// Run the replicated variant comparison and write its table
    Benchmark(BenchmarkArgs),
    /// Sample every coefficient function and its derivatives to CSV files
    #[command(name = "export-coefs")]
    ExportCoefs(ExportCoefsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory for train.csv, test.csv, and truth.txt
    #[arg(long)]
    out_dir: PathBuf,
    /// Pointwise noise variance laid over the curves
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    #[arg(long, default_value_t = 300)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    /// Training data in matrix CSV form
    train: PathBuf,
    /// Output path for the fitted model document
    #[arg(long, default_value = "model.txt")]
    model_out: PathBuf,
    /// Output path for the fit report
    #[arg(long, default_value = "fit_report.txt")]
    report_out: PathBuf,
    /// One of fme-em, fme-em-lasso, ifme-em, fmlr
    #[arg(long, default_value = "fme-em")]
    variant: String,
    /// Number of mixture components
    #[arg(long = "K", default_value_t = 2)]
    num_components: usize,
    /// Gating penalty weight; defaults to the variant's own
    #[arg(long)]
    chi: Option<f64>,
    /// Expert penalty weight; defaults to the variant's own
    #[arg(long)]
    lambda: Option<f64>,
    /// Derivative order whose basis carries the coefficient L1 term
    #[arg(long, default_value_t = 0)]
    d1: usize,
    /// Derivative order penalized through the operator map
    #[arg(long, default_value_t = 2)]
    d2: usize,
    /// Curve basis dimension
    #[arg(long, default_value_t = 15)]
    r: usize,
    /// Gating coefficient basis dimension
    #[arg(long, default_value_t = 15)]
    p: usize,
    /// Expert coefficient basis dimension
    #[arg(long, default_value_t = 15)]
    q: usize,
    /// B-spline order (degree + 1)
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// EM restarts from perturbed initial partitions
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_em_iters: usize,
    /// Hyperparameter selection rule: none, bic, or val-ccr
    #[arg(long, default_value = "none")]
    select: String,
    /// Comma-separated gating penalty candidates for --select
    #[arg(long)]
    chi_grid: Option<String>,
    /// Comma-separated expert penalty candidates for --select
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Comma-separated component-count candidates for --select
    #[arg(long = "K-grid")]
    k_grid: Option<String>,
    /// Held-out fraction scored by --select val-ccr
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
}

#[derive(Args)]
struct PredictArgs {
    /// Data to classify, in matrix CSV form (labels may be placeholders)
    data: PathBuf,
    /// Fitted model document
    #[arg(long)]
    model: PathBuf,
    /// Output CSV of predicted labels and class probabilities
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Labeled data in matrix CSV form
    data: PathBuf,
    /// Fitted model document
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Noise variance; repeat or comma-separate for a multi-column table
    #[arg(long = "noise-var", value_delimiter = ',', default_values_t = [1.0])]
    noise_var: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// EM restarts per fit
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    /// Output path for the aligned text table
    #[arg(long, default_value = "benchmark.txt")]
    out: PathBuf,
    /// Output path for the machine-readable table
    #[arg(long, default_value = "benchmark.csv")]
    csv_out: PathBuf,
}

#[derive(Args)]
struct ExportCoefsArgs {
    /// Fitted model document
    #[arg(long)]
    model: PathBuf,
    /// Directory the per-function CSV files are written into
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of evaluation points across the model domain
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
}

/// An error carrying the exit code it should terminate with.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version are successful exits; everything else is a
            // usage error under this tool's exit-code contract.
            let kind = err.kind();
            let _ = err.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };

    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Benchmark(args) => cmd_benchmark(&args),
        Command::ExportCoefs(args) => cmd_export_coefs(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, Failure> {
    let config = SimConfig {
        n_train: args.n_train,
        n_test: args.n_test,
        noise_var: args.noise_var,
        seed: args.seed,
        truth_scale: 1.0,
    };
    eprintln!(
        "simulate: noise_var={} n_train={} n_test={} seed={} out_dir={}",
        config.noise_var,
        config.n_train,
        config.n_test,
        config.seed,
        args.out_dir.display()
    );
    let output = simulate(&config).map_err(|e| Failure::data(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::data(format!("{}: {e}", args.out_dir.display())))?;

    write_dataset_atomic(&output.train, &args.out_dir.join("train.csv"))?;
    write_dataset_atomic(&output.test, &args.out_dir.join("test.csv"))?;
    write_atomic(&args.out_dir.join("truth.txt"), &render_truth(&output))?;
    eprintln!(
        "simulate: wrote train.csv ({} rows), test.csv ({} rows), truth.txt",
        output.train.len(),
        output.test.len()
    );
    Ok(0)
}

fn cmd_fit(args: &FitArgs) -> Result<u8, Failure> {
    let variant = FitVariant::parse(&args.variant)
        .ok_or_else(|| Failure::usage(format!("--variant: unknown variant {:?}", args.variant)))?;
    let (default_chi, default_lambda) = variant.default_penalties();
    let config = FitConfig {
        variant,
        num_components: args.num_components,
        chi: args.chi.unwrap_or(default_chi),
        lambda: args.lambda.unwrap_or(default_lambda),
        order: args.order,
        r: args.r,
        p: args.p,
        q: args.q,
        d1: args.d1,
        d2: args.d2,
        max_em_iters: args.max_em_iters,
        n_restarts: args.restarts,
        seed: args.seed,
        ..FitConfig::default()
    };
    config
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    eprintln!(
        "fit: train={} variant={} K={} chi={} lambda={} order={} r={} p={} q={} d1={} d2={} \
         restarts={} max_em_iters={} seed={} select={}",
        args.train.display(),
        variant.name(),
        config.num_components,
        config.chi,
        config.lambda,
        config.order,
        config.r,
        config.p,
        config.q,
        config.d1,
        config.d2,
        config.n_restarts,
        config.max_em_iters,
        config.seed,
        args.select,
    );

    let dataset = load_dataset(&args.train)
        .map_err(|e| Failure::data(format!("{}: {e}", args.train.display())))?;

    let grid = CandidateGrid {
        num_components: parse_grid(&args.k_grid, "--K-grid")?,
        chi: parse_grid(&args.chi_grid, "--chi-grid")?,
        lambda: parse_grid(&args.lambda_grid, "--lambda-grid")?,
    };
    let has_grid =
        !(grid.num_components.is_empty() && grid.chi.is_empty() && grid.lambda.is_empty());

    let (report, selection_block) = match args.select.as_str() {
        "none" => {
            if has_grid {
                return Err(Failure::usage(
                    "--chi-grid/--lambda-grid/--K-grid require --select bic or val-ccr",
                ));
            }
            let report = fit(&dataset, &config).map_err(|e| Failure::data(e.to_string()))?;
            (report, String::new())
        }
        rule_name @ ("bic" | "val-ccr") => {
            let rule = match rule_name {
                "bic" => SelectionRule::Bic,
                _ => {
                    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
                        return Err(Failure::usage(
                            "--val-fraction must lie strictly between 0 and 1",
                        ));
                    }
                    SelectionRule::ValidationCcr {
                        fraction: args.val_fraction,
                    }
                }
            };
            let outcome = select_hyperparams(&dataset, &config, &grid, rule)
                .map_err(|e| Failure::data(e.to_string()))?;
            eprintln!(
                "fit: selected K={} chi={} lambda={}",
                outcome.config.num_components, outcome.config.chi, outcome.config.lambda
            );
            let block = render_selection(rule_name, &outcome.table);
            (outcome.report, block)
        }
        other => {
            return Err(Failure::usage(format!(
                "--select: expected none, bic, or val-ccr, got {other:?}"
            )));
        }
    };

    write_atomic(&args.model_out, &report.model.to_document())?;
    let mut text = render_fit_report(&report, &dataset);
    text.push_str(&selection_block);
    write_atomic(&args.report_out, &text)?;
    eprintln!(
        "fit: wrote {} and {}",
        args.model_out.display(),
        args.report_out.display()
    );
    if report.converged {
        Ok(0)
    } else {
        eprintln!("fit: EM did not converge within its iteration budget");
        Ok(EXIT_NONCONVERGED)
    }
}

fn cmd_predict(args: &PredictArgs) -> Result<u8, Failure> {
    eprintln!(
        "predict: data={} model={} out={}",
        args.data.display(),
        args.model.display(),
        args.out.display()
    );
    let (model, dataset, config) = load_model_and_data(&args.model, &args.data)?;
    let designs = fme_core::build_designs(&dataset, &config)
        .map_err(|e| Failure::data(e.to_string()))?;

    let mut out = String::from("label");
    for g in 1..=model.num_classes() {
        let _ = write!(out, ",prob_{g}");
    }
    out.push('\n');
    for i in 0..designs.bundle.len() {
        let gating_row = DVector::from_iterator(
            designs.bundle.gating.ncols(),
            designs.bundle.gating.row(i).iter().copied(),
        );
        let expert_row = DVector::from_iterator(
            designs.bundle.expert.ncols(),
            designs.bundle.expert.row(i).iter().copied(),
        );
        let prediction = model
            .predict(&gating_row, &expert_row)
            .map_err(|e| Failure::data(format!("row {}: {e}", i + 1)))?;
        let _ = write!(out, "{}", prediction.label);
        for value in prediction.class_probs.iter() {
            let _ = write!(out, ",{}", fmt_machine(*value));
        }
        out.push('\n');
    }
    write_atomic(&args.out, &out)?;
    eprintln!("predict: wrote {} rows", designs.bundle.len());
    Ok(0)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<u8, Failure> {
    eprintln!(
        "evaluate: data={} model={}",
        args.data.display(),
        args.model.display()
    );
    let (model, dataset, config) = load_model_and_data(&args.model, &args.data)?;
    let ccr = evaluate_ccr(&model, &dataset, &config).map_err(|e| Failure::data(e.to_string()))?;
    println!("ccr {ccr:.4}");
    Ok(0)
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<u8, Failure> {
    let config = BenchmarkConfig {
        replicates: args.replicates,
        n_train: args.n_train,
        n_test: args.n_test,
        noise_vars: args.noise_var.clone(),
        seed: args.seed,
        base: FitConfig {
            n_restarts: args.restarts,
            ..BenchmarkConfig::default().base
        },
        ..BenchmarkConfig::default()
    };
    eprintln!(
        "benchmark: replicates={} noise_var={:?} n_train={} n_test={} restarts={} seed={} \
         out={} csv_out={}",
        config.replicates,
        config.noise_vars,
        config.n_train,
        config.n_test,
        config.base.n_restarts,
        config.seed,
        args.out.display(),
        args.csv_out.display()
    );
    let report = run_benchmark(&config).map_err(|e| Failure::data(e.to_string()))?;
    let text = report.render_text();
    print!("{text}");
    // timing goes to stderr so the table files and stdout stay byte-identical
    // across same-seed reruns
    eprint!("{}", report.render_timing());
    for cell in &report.cells {
        for message in &cell.failure_messages {
            eprintln!(
                "benchmark: {} noise_var={}: {}",
                cell.variant.name(),
                cell.noise_var,
                message
            );
        }
    }
    write_atomic(&args.out, &text)?;
    write_atomic(&args.csv_out, &report.render_csv())?;
    eprintln!(
        "benchmark: wrote {} and {}",
        args.out.display(),
        args.csv_out.display()
    );
    Ok(0)
}

fn cmd_export_coefs(args: &ExportCoefsArgs) -> Result<u8, Failure> {
    if args.grid_points < 2 {
        return Err(Failure::usage("--grid-points must be at least 2"));
    }
    eprintln!(
        "export-coefs: model={} out_dir={} grid_points={}",
        args.model.display(),
        args.out_dir.display(),
        args.grid_points
    );
    let model = FmeModel::load(&args.model)
        .map_err(|e| Failure::data(format!("{}: {e}", args.model.display())))?;
    let (lo, hi) = model.basis_config.domain;
    let grid: Vec<f64> = (0..args.grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (args.grid_points - 1) as f64)
        .collect();
    let curves =
        coefficient_functions(&model, &grid).map_err(|e| Failure::data(e.to_string()))?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::data(format!("{}: {e}", args.out_dir.display())))?;
    let mut written = 0usize;
    for (k, export) in curves.gating.iter().enumerate() {
        let path = args.out_dir.join(format!("gating_{}.csv", k + 1));
        write_atomic(&path, &render_curve_csv(&curves.grid, export))?;
        written += 1;
    }
    for (k, block) in curves.experts.iter().enumerate() {
        for (g, export) in block.iter().enumerate() {
            let path = args
                .out_dir
                .join(format!("expert_{}_class_{}.csv", k + 1, g + 1));
            write_atomic(&path, &render_curve_csv(&curves.grid, export))?;
            written += 1;
        }
    }
    eprintln!("export-coefs: wrote {written} files");
    Ok(0)
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

/// Loads a model and a dataset and derives the fit configuration that
/// reproduces the model's designs. The dataset must live on the model's
/// domain; its class count is widened to the model's so predictions for
/// classes absent from the file stay representable.
fn load_model_and_data(
    model_path: &Path,
    data_path: &Path,
) -> Result<(FmeModel, FunctionalDataset, FitConfig), Failure> {
    let model = FmeModel::load(model_path)
        .map_err(|e| Failure::data(format!("{}: {e}", model_path.display())))?;
    let mut dataset = load_dataset(data_path)
        .map_err(|e| Failure::data(format!("{}: {e}", data_path.display())))?;

    let (lo, hi) = model.basis_config.domain;
    let (data_lo, data_hi) = dataset.domain();
    let span = (hi - lo).abs().max(1.0);
    if (lo - data_lo).abs() > 1e-9 * span || (hi - data_hi).abs() > 1e-9 * span {
        return Err(Failure::data(format!(
            "{}: data domain [{data_lo}, {data_hi}] does not match the model domain [{lo}, {hi}]",
            data_path.display()
        )));
    }
    if dataset.num_classes > model.num_classes() {
        return Err(Failure::data(format!(
            "{}: data has labels up to {} but the model knows {} classes",
            data_path.display(),
            dataset.num_classes,
            model.num_classes()
        )));
    }
    dataset.num_classes = model.num_classes();

    let cfg = &model.basis_config;
    let variant = match model.gating.parameterization() {
        Parameterization::DerivativeReparam => FitVariant::IfmeEm,
        Parameterization::Plain => FitVariant::FmeEm,
    };
    let config = FitConfig {
        variant,
        num_components: model.num_components(),
        order: cfg.order,
        r: cfg.r,
        p: cfg.p,
        q: cfg.q,
        d1: cfg.d1,
        d2: cfg.d2,
        ..FitConfig::default()
    };
    Ok((model, dataset, config))
}

fn parse_grid<T: std::str::FromStr>(
    flag_value: &Option<String>,
    flag_name: &str,
) -> Result<Vec<T>, Failure> {
    let Some(text) = flag_value else {
        return Ok(Vec::new());
    };
    text.split(',')
        .map(|cell| {
            cell.trim().parse::<T>().map_err(|_| {
                Failure::usage(format!("{flag_name}: {cell:?} is not a valid grid value"))
            })
        })
        .collect()
}

/// 17 significant digits: round-trips every finite f64 exactly.
fn fmt_machine(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_atomic(path: &Path, content: &str) -> Result<(), Failure> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Failure::data(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, content).map_err(|e| Failure::data(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_dataset_atomic(dataset: &FunctionalDataset, path: &Path) -> Result<(), Failure> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Failure::data(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fme_core::save_dataset(dataset, &tmp)
        .map_err(|e| Failure::data(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// renderers
// ---------------------------------------------------------------------------

fn push_machine_vector(out: &mut String, prefix: &str, v: &DVector<f64>) {
    out.push_str(prefix);
    for x in v.iter() {
        let _ = write!(out, " {}", fmt_machine(*x));
    }
    out.push('\n');
}

/// The generating law behind a simulated pair, at full precision, for oracle
/// evaluation and reproducibility audits.
fn render_truth(output: &SimOutput) -> String {
    let truth = &output.truth;
    let mut out = String::from("fme-truth v1\n");
    let _ = writeln!(out, "noise_sd {}", fmt_machine(truth.noise_sd));
    let _ = writeln!(out, "truth_scale {}", fmt_machine(truth.truth_scale));
    let _ = writeln!(out, "coeff_sd {}", fmt_machine(truth.coeff_sd));
    let _ = writeln!(out, "grid_len {}", truth.grid.len());
    let _ = writeln!(out, "basis_dim {}", truth.basis.dim());
    let _ = writeln!(out, "basis_order {}", truth.basis.order());
    for (b, mean) in truth.blob_means.iter().enumerate() {
        push_machine_vector(&mut out, &format!("blob_mean {b}"), mean);
    }
    push_machine_vector(&mut out, "gating_moment", &truth.gating_moment);
    let _ = writeln!(
        out,
        "gating_intercept {}",
        fmt_machine(truth.gating_intercept)
    );
    for (k, block) in truth.expert_moments.iter().enumerate() {
        for (g, moment) in block.iter().enumerate() {
            push_machine_vector(&mut out, &format!("expert_moment {k} {g}"), moment);
        }
    }
    for (k, block) in truth.expert_intercepts.iter().enumerate() {
        for (g, intercept) in block.iter().enumerate() {
            let _ = writeln!(out, "expert_intercept {k} {g} {}", fmt_machine(*intercept));
        }
    }
    push_machine_vector(&mut out, "mean_gating", &output.mean_gating);
    out.push_str("end\n");
    out
}

/// Human-readable fit summary: headline numbers, sparsity counts, and the
/// penalized log-likelihood trace, four decimals throughout.
fn render_fit_report(report: &FitReport, dataset: &FunctionalDataset) -> String {
    let mut out = String::from("fit report\n");
    let _ = writeln!(out, "observations       {}", dataset.len());
    let _ = writeln!(out, "classes            {}", report.model.num_classes());
    let _ = writeln!(out, "components         {}", report.model.num_components());
    let _ = writeln!(
        out,
        "converged          {}",
        if report.converged { "yes" } else { "no" }
    );
    let _ = writeln!(out, "em_iterations      {}", report.iterations);
    let _ = writeln!(out, "selected_restart   {}", report.selected_restart);
    let _ = writeln!(out, "failed_restarts    {}", report.failed_restarts);
    let _ = writeln!(
        out,
        "loose_solver_steps {}",
        report.solver_nonconverged_steps
    );
    let _ = writeln!(out, "loglik             {:.4}", report.loglik);
    let _ = writeln!(out, "penalized_loglik   {:.4}", report.penalized_loglik);
    let _ = writeln!(out, "df                 {}", report.df);
    let _ = writeln!(out, "bic                {:.4}", report.bic);

    let gating_counts: Vec<String> = report.nonzero_gating.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(
        out,
        "nonzero gating coefficients per component: {}",
        if gating_counts.is_empty() {
            "none (single component)".to_string()
        } else {
            gating_counts.join(" ")
        }
    );
    for (k, counts) in report.nonzero_experts.iter().enumerate() {
        let text: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "nonzero expert coefficients, component {}: {}",
            k + 1,
            text.join(" ")
        );
    }

    out.push_str("\npenalized log-likelihood trace\niter  value\n");
    for (i, value) in report.trace.iter().enumerate() {
        let _ = writeln!(out, "{:<5} {:.4}", i + 1, value);
    }
    out
}

/// Selection table appended to the fit report. BIC scores print as-is
/// (lower is better); validation scores are stored negated internally and
/// print as plain CCR (higher is better).
fn render_selection(rule_name: &str, table: &[fme_core::SelectionRow]) -> String {
    let mut out = String::new();
    let score_header = match rule_name {
        "bic" => "bic (lower is better)",
        _ => "validation ccr (higher is better)",
    };
    let _ = write!(
        out,
        "\nselection table\nK     chi         lambda      {score_header}\n"
    );
    for row in table {
        let score = if row.failed {
            "failed".to_string()
        } else if rule_name == "bic" {
            format!("{:.4}", row.score)
        } else {
            format!("{:.4}", -row.score)
        };
        let _ = writeln!(
            out,
            "{:<5} {:<11} {:<11} {}{}",
            row.num_components,
            row.chi,
            row.lambda,
            score,
            if row.converged { "" } else { " (not converged)" }
        );
    }
    out
}

fn render_curve_csv(grid: &[f64], export: &fme_core::CurveExport) -> String {
    let mut out = String::from("t,value,d1,d2\n");
    for (i, &t) in grid.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_machine(t),
            fmt_machine(export.values[i]),
            fmt_machine(export.deriv_d1[i]),
            fmt_machine(export.deriv_d2[i])
        );
    }
    out
}
