//! Replicated head-to-head comparison of the fitting variants on the
//! synthetic generator.
//!
//! Every replicate draws one train/test pair per noise level and hands the
//! same pair to every variant, and replicate `i` always simulates with seed
//! `base + i` regardless of the noise level, so the comparisons run on
//! common random numbers: differences between cells reflect the methods and
//! the noise, not independent sampling luck.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::{fmt_f64, simulate, SimConfig};
use crate::em::{evaluate_ccr, fit, FitConfig, FitError, FitVariant};

/// Replication plan: how many train/test pairs to draw, at which noise
/// levels, and which variants to fit on each. `base` carries the shared
/// fitting knobs (components, bases, solver, restarts); its `variant`,
/// `chi`, and `lambda` are ignored because each variant runs with its own
/// default penalties.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub replicates: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_vars: Vec<f64>,
    pub seed: u64,
    pub variants: Vec<FitVariant>,
    pub base: FitConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            n_train: 300,
            n_test: 200,
            noise_vars: vec![1.0],
            seed: 0,
            variants: vec![
                FitVariant::FmeEm,
                FitVariant::FmeEmLasso,
                FitVariant::IfmeEm,
                FitVariant::Fmlr,
            ],
            // Two restarts instead of five: the replication already averages
            // away initialization luck, and the table must stay affordable.
            base: FitConfig {
                n_restarts: 2,
                max_em_iters: 200,
                ..FitConfig::default()
            },
        }
    }
}

/// One variant-by-noise cell of the comparison: per-replicate test rates for
/// the fits that succeeded, summary statistics over them, and the errors of
/// the fits that did not.
#[derive(Debug, Clone)]
pub struct BenchmarkCell {
    pub variant: FitVariant,
    pub noise_var: f64,
    pub ccrs: Vec<f64>,
    pub mean_ccr: f64,
    pub std_error: f64,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub mean_seconds: f64,
}

/// The finished table plus the wall-clock cost of producing it.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub replicates: usize,
    pub noise_vars: Vec<f64>,
    pub variants: Vec<FitVariant>,
    pub cells: Vec<BenchmarkCell>,
    pub elapsed: Duration,
}

impl BenchmarkReport {
    pub fn cell(&self, variant: FitVariant, noise_var: f64) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.noise_var == noise_var)
    }

    /// Human-readable table: mean test rate with its standard error per
    /// variant and noise level, four decimals, plus failure counts. Depends
    /// only on the fitted results, so reruns with the same seed reproduce it
    /// byte for byte; timing lives in [`render_timing`](Self::render_timing).
    pub fn render_text(&self) -> String {
        let mut columns: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["variant".to_string()];
        let mut names: Vec<String> = vec![String::new(); self.variants.len()];
        for (row, v) in self.variants.iter().enumerate() {
            names[row] = v.name().to_string();
        }
        columns.push(names);
        for &noise in &self.noise_vars {
            header.push(format!("noise_var={noise}"));
            let mut col = Vec::with_capacity(self.variants.len());
            for &v in &self.variants {
                let text = match self.cell(v, noise) {
                    Some(cell) if !cell.ccrs.is_empty() => {
                        let mut s =
                            format!("{:.4} ({:.4})", cell.mean_ccr, cell.std_error);
                        if cell.failures > 0 {
                            let _ = write!(s, " [{} failed]", cell.failures);
                        }
                        s
                    }
                    Some(cell) => format!("all {} failed", cell.failures),
                    None => "-".to_string(),
                };
                col.push(text);
            }
            columns.push(col);
        }

        let mut out = format!(
            "test correct classification rate, mean (standard error) over {} replicates\n\n",
            self.replicates
        );
        let widths: Vec<usize> = columns
            .iter()
            .zip(&header)
            .map(|(col, h)| col.iter().map(String::len).max().unwrap_or(0).max(h.len()))
            .collect();
        for (j, h) in header.iter().enumerate() {
            let _ = write!(out, "{:<width$}  ", h, width = widths[j]);
        }
        out.push('\n');
        for row in 0..self.variants.len() {
            for (j, col) in columns.iter().enumerate() {
                let _ = write!(out, "{:<width$}  ", col[row], width = widths[j]);
            }
            out.push('\n');
        }

        out
    }

    /// Machine-readable twin of the text table, one row per cell, floats at
    /// full precision. Seed-deterministic like [`render_text`](Self::render_text).
    pub fn render_csv(&self) -> String {
        let mut out = String::from("variant,noise_var,replicates,failures,mean_ccr,std_error\n");
        for cell in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                cell.variant.name(),
                fmt_f64(cell.noise_var),
                cell.ccrs.len(),
                cell.failures,
                fmt_f64(cell.mean_ccr),
                fmt_f64(cell.std_error),
            );
        }
        out
    }

    /// Wall-clock summary, kept apart from the two artifact renderings so
    /// those stay identical across reruns.
    pub fn render_timing(&self) -> String {
        let mut out = String::from("mean seconds per fit:");
        for &v in &self.variants {
            let per_noise: Vec<String> = self
                .noise_vars
                .iter()
                .filter_map(|&noise| self.cell(v, noise))
                .map(|cell| format!("{:.1}", cell.mean_seconds))
                .collect();
            let _ = write!(out, " {} {}", v.name(), per_noise.join("/"));
        }
        let _ = write!(out, "\ntotal wall clock: {:.1}s\n", self.elapsed.as_secs_f64());
        out
    }
}

/// Runs the full comparison. Individual fit failures are recorded in their
/// cell rather than aborting the run; simulation failures abort because they
/// would leave the variants comparing different data.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport, FitError> {
    if config.replicates == 0 {
        return Err(FitError::InvalidConfig("need at least one replicate".into()));
    }
    if config.noise_vars.is_empty() || config.variants.is_empty() {
        return Err(FitError::InvalidConfig(
            "need at least one noise level and one variant".into(),
        ));
    }

    let start = Instant::now();
    let mut cells: Vec<BenchmarkCell> = Vec::new();
    for &noise in &config.noise_vars {
        for &variant in &config.variants {
            cells.push(BenchmarkCell {
                variant,
                noise_var: noise,
                ccrs: Vec::new(),
                mean_ccr: f64::NAN,
                std_error: f64::NAN,
                failures: 0,
                failure_messages: Vec::new(),
                mean_seconds: 0.0,
            });
        }
    }

    let mut seconds: Vec<f64> = vec![0.0; cells.len()];
    let mut attempts: Vec<usize> = vec![0; cells.len()];
    for (noise_idx, &noise) in config.noise_vars.iter().enumerate() {
        for rep in 0..config.replicates {
            let sim = simulate(&SimConfig {
                n_train: config.n_train,
                n_test: config.n_test,
                noise_var: noise,
                seed: config.seed + rep as u64,
                truth_scale: 1.0,
            })?;
            for (variant_idx, &variant) in config.variants.iter().enumerate() {
                let (chi, lambda) = variant.default_penalties();
                let fit_config = FitConfig {
                    variant,
                    chi,
                    lambda,
                    seed: config.seed + rep as u64,
                    ..config.base.clone()
                };
                let cell_idx = noise_idx * config.variants.len() + variant_idx;
                let clock = Instant::now();
                let outcome = fit(&sim.train, &fit_config)
                    .and_then(|report| evaluate_ccr(&report.model, &sim.test, &fit_config));
                seconds[cell_idx] += clock.elapsed().as_secs_f64();
                attempts[cell_idx] += 1;
                match outcome {
                    Ok(ccr) => cells[cell_idx].ccrs.push(ccr),
                    Err(err) => {
                        cells[cell_idx].failures += 1;
                        cells[cell_idx]
                            .failure_messages
                            .push(format!("replicate {rep}: {err}"));
                    }
                }
            }
        }
    }

    for (idx, cell) in cells.iter_mut().enumerate() {
        if attempts[idx] > 0 {
            cell.mean_seconds = seconds[idx] / attempts[idx] as f64;
        }
        let m = cell.ccrs.len();
        if m > 0 {
            cell.mean_ccr = cell.ccrs.iter().sum::<f64>() / m as f64;
        }
        if m > 1 {
            let mean = cell.mean_ccr;
            let var = cell
                .ccrs
                .iter()
                .map(|c| (c - mean) * (c - mean))
                .sum::<f64>()
                / (m - 1) as f64;
            cell.std_error = (var / m as f64).sqrt();
        } else if m == 1 {
            cell.std_error = 0.0;
        }
    }

    Ok(BenchmarkReport {
        replicates: config.replicates,
        noise_vars: config.noise_vars.clone(),
        variants: config.variants.clone(),
        cells,
        elapsed: start.elapsed(),
    })
}
