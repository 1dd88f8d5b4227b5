//! Functional classification datasets: matrix CSV I/O, a seeded synthetic
//! generator with a known mixture law (usable as a plug-in oracle), splits,
//! and scoring.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::basis::{gauss_legendre, BSplineBasis, BasisError};
use crate::model::log_softmax_with_reference;

/// Errors raised by dataset I/O, simulation, and scoring.
#[derive(Error, Debug)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Curves observed on a shared grid with 1-based class labels. When the data
/// came from the simulator, `cluster_truth` records the latent component that
/// generated each label.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    pub grid: Vec<f64>,
    pub curves: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub cluster_truth: Option<Vec<usize>>,
}

impl FunctionalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.grid.len() < 2 {
            return Err(DataError::InvalidDataset(
                "grid needs at least two points".into(),
            ));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::InvalidDataset(
                "grid must be strictly increasing".into(),
            ));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidDataset("grid has non-finite values".into()));
        }
        if self.curves.nrows() != self.labels.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} curves but {} labels",
                self.curves.nrows(),
                self.labels.len()
            )));
        }
        if self.curves.ncols() != self.grid.len() {
            return Err(DataError::InvalidDataset(format!(
                "curves sampled at {} points but the grid has {}",
                self.curves.ncols(),
                self.grid.len()
            )));
        }
        if self.labels.is_empty() {
            return Err(DataError::InvalidDataset("dataset is empty".into()));
        }
        if self.curves.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidDataset(
                "curves have non-finite samples".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(DataError::InvalidDataset(
                "need at least two classes".into(),
            ));
        }
        if self.labels.iter().any(|&y| y < 1 || y > self.num_classes) {
            return Err(DataError::InvalidDataset(format!(
                "labels must lie in 1..={}",
                self.num_classes
            )));
        }
        if let Some(clusters) = &self.cluster_truth {
            if clusters.len() != self.labels.len() {
                return Err(DataError::InvalidDataset(
                    "cluster annotations disagree with the label count".into(),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the dataset in the matrix CSV layout: a `label` header cell
/// followed by the grid, then one row per curve with the integer label first.
/// Numbers carry 17 significant digits so reloading is bit-exact.
pub fn save_dataset(dataset: &FunctionalDataset, path: &Path) -> Result<(), DataError> {
    dataset.validate()?;
    let mut out = String::new();
    out.push_str("label");
    for &t in &dataset.grid {
        out.push(',');
        out.push_str(&fmt_f64(t));
    }
    out.push('\n');
    for i in 0..dataset.len() {
        out.push_str(&dataset.labels[i].to_string());
        for j in 0..dataset.grid.len() {
            out.push(',');
            out.push_str(&fmt_f64(dataset.curves[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a matrix CSV dataset. The class count is the largest label present.
pub fn load_dataset(path: &Path) -> Result<FunctionalDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<FunctionalDataset, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut cells = header.split(',');
    let first = cells.next().unwrap_or("");
    if first != "label" {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("header must start with 'label', got {first:?}"),
        });
    }
    let grid: Vec<f64> = cells
        .enumerate()
        .map(|(i, c)| {
            c.trim().parse::<f64>().map_err(|_| DataError::Parse {
                line: 1,
                msg: format!("grid cell {} is not a number: {c:?}", i + 1),
            })
        })
        .collect::<Result<_, _>>()?;
    if grid.len() < 2 {
        return Err(DataError::Parse {
            line: 1,
            msg: "grid needs at least two points".into(),
        });
    }

    let mut labels = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label_cell = cells.next().unwrap_or("");
        let label: usize = label_cell.trim().parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("label {label_cell:?} is not a positive integer"),
        })?;
        if label == 0 {
            return Err(DataError::Parse {
                line: line_no,
                msg: "labels are 1-based".into(),
            });
        }
        let mut count = 0;
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("sample {cell:?} is not a number"),
            })?;
            rows.push(v);
            count += 1;
        }
        if count != grid.len() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected {} samples, got {count}", grid.len()),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let n = labels.len();
    let t_len = grid.len();
    let curves = DMatrix::from_row_iterator(n, t_len, rows.into_iter());
    let num_classes = *labels.iter().max().unwrap();
    let dataset = FunctionalDataset {
        grid,
        curves,
        labels,
        num_classes: num_classes.max(2),
        cluster_truth: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Splits a dataset into (retained, held-out) parts, stratified by label so
/// every class keeps its share. Deterministic in the seed.
pub fn split_dataset(
    dataset: &FunctionalDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(FunctionalDataset, FunctionalDataset), DataError> {
    dataset.validate()?;
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y - 1].push(i);
    }
    let mut holdout_idx = Vec::new();
    let mut retain_idx = Vec::new();
    for group in by_class.iter_mut() {
        // Fisher-Yates shuffle
        for i in (1..group.len()).rev() {
            let j = rng.random_range(0..=i);
            group.swap(i, j);
        }
        let n_hold = ((group.len() as f64) * holdout_fraction).round() as usize;
        let n_hold = n_hold.min(group.len().saturating_sub(1));
        holdout_idx.extend_from_slice(&group[..n_hold]);
        retain_idx.extend_from_slice(&group[n_hold..]);
    }
    retain_idx.sort_unstable();
    holdout_idx.sort_unstable();
    if retain_idx.is_empty() || holdout_idx.is_empty() {
        return Err(DataError::InvalidConfig(
            "split produced an empty part; adjust the fraction".into(),
        ));
    }
    Ok((
        subset(dataset, &retain_idx),
        subset(dataset, &holdout_idx),
    ))
}

fn subset(dataset: &FunctionalDataset, indices: &[usize]) -> FunctionalDataset {
    let t_len = dataset.grid.len();
    let mut curves = DMatrix::zeros(indices.len(), t_len);
    let mut labels = Vec::with_capacity(indices.len());
    let mut clusters = dataset.cluster_truth.as_ref().map(|_| Vec::new());
    for (row, &i) in indices.iter().enumerate() {
        curves.set_row(row, &dataset.curves.row(i));
        labels.push(dataset.labels[i]);
        if let (Some(out), Some(src)) = (&mut clusters, &dataset.cluster_truth) {
            out.push(src[i]);
        }
    }
    FunctionalDataset {
        grid: dataset.grid.clone(),
        curves,
        labels,
        num_classes: dataset.num_classes,
        cluster_truth: clusters,
    }
}

/// Fraction of positions where the two label sequences agree.
pub fn correct_classification_rate(
    predicted: &[usize],
    actual: &[usize],
) -> Result<f64, DataError> {
    if predicted.len() != actual.len() {
        return Err(DataError::InvalidConfig(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(DataError::InvalidConfig("no labels to score".into()));
    }
    let hits = predicted
        .iter()
        .zip(actual.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

/// Size, noise, and seed of a simulation run. The generative law itself is
/// frozen (see [`SimTruth`]); `truth_scale` multiplies every gating/expert
/// score and exists so tests can push the law toward determinism.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_var: f64,
    pub seed: u64,
    pub truth_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 200,
            noise_var: 1.0,
            seed: 0,
            truth_scale: 1.0,
        }
    }
}

/// Number of grid points curves are sampled on.
pub const SIM_GRID_LEN: usize = 100;
/// Dimension of the curve basis used by the generator.
pub const SIM_BASIS_DIM: usize = 15;
/// B-spline order of the curve basis.
pub const SIM_ORDER: usize = 4;
/// Number of mixture components in the generative law.
pub const SIM_COMPONENTS: usize = 2;
/// Number of classes in the generative law.
pub const SIM_CLASSES: usize = 3;

/// Standard deviation of the curve coefficients around their blob mean.
const COEFF_SD: f64 = 3.0;

/// Amplitude of the smooth bump that separates the two curve blobs.
const BLOB_AMPLITUDE: f64 = 9.0;

/// Gating coefficient function: piecewise linear through these nodes.
const GATING_NODES: [(f64, f64); 3] = [(0.0, -4.0), (0.5, 4.0), (1.0, -2.0)];
const GATING_INTERCEPT: f64 = 0.0;
/// Overall scale applied to the gating moment vector. Large enough that the
/// component membership is nearly deterministic in the curve, which keeps the
/// marginal class law decisive.
const GATING_SCALE: f64 = 12.0;

/// Expert coefficient functions, piecewise linear, one per
/// (component, non-reference class). Flat zero stretches keep part of each
/// function exactly zero, and piecewise linearity keeps second derivatives
/// zero almost everywhere. The second component flips the signs so the two
/// clusters map curves to classes in opposite ways.
const EXPERT_NODES_A: [(f64, f64); 4] = [(0.0, 1.2), (0.25, 1.2), (0.5, 0.0), (1.0, 0.0)];
const EXPERT_NODES_B: [(f64, f64); 5] = [
    (0.0, 0.0),
    (0.3, 0.0),
    (0.45, 1.0),
    (0.7, 1.0),
    (1.0, -1.0),
];
/// Overall scale applied to the expert moment vectors.
const EXPERT_SCALE: f64 = 40.0;
const EXPERT_INTERCEPTS: [[f64; 2]; 2] = [[0.3, -0.2], [-0.3, 0.2]];

/// The frozen generative law: a two-blob Gaussian population of curve
/// coefficients, a softmax gating over the latent component driven by the
/// noiseless curve, and per-component multinomial experts. Doubles as a
/// plug-in oracle for scoring.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub basis: BSplineBasis,
    pub grid: Vec<f64>,
    pub blob_means: [DVector<f64>; 2],
    pub coeff_sd: f64,
    pub gating_moment: DVector<f64>,
    pub gating_intercept: f64,
    pub expert_moments: [[DVector<f64>; 2]; 2],
    pub expert_intercepts: [[f64; 2]; 2],
    pub noise_sd: f64,
    pub truth_scale: f64,
    design: DMatrix<f64>,
}

impl SimTruth {
    fn build(noise_var: f64, truth_scale: f64) -> Result<Self, DataError> {
        let basis = BSplineBasis::new(SIM_ORDER, SIM_BASIS_DIM, (0.0, 1.0))?;
        let grid: Vec<f64> = (0..SIM_GRID_LEN)
            .map(|i| i as f64 / (SIM_GRID_LEN - 1) as f64)
            .collect();
        let design = basis.design_matrix(&grid)?;

        // smooth bump in coefficient space; the two blobs sit at +-mean
        let bump = DVector::from_fn(SIM_BASIS_DIM, |j, _| {
            let center = (SIM_BASIS_DIM - 1) as f64 / 2.0;
            BLOB_AMPLITUDE * (-((j as f64 - center) / 3.0).powi(2)).exp()
        });

        let gating_moment = basis_moments(&basis, &GATING_NODES) * GATING_SCALE;
        let moment_a = basis_moments(&basis, &EXPERT_NODES_A) * EXPERT_SCALE;
        let moment_b = basis_moments(&basis, &EXPERT_NODES_B) * EXPERT_SCALE;

        // The blob mean must carry no expert-score signal: the blob sign
        // tracks the component through the gating, and the second component
        // negates the expert moments, so any blob component along the
        // moments would cancel the sign flip and push every draw toward one
        // class. Project it out (2x2 normal equations), keep the amplitude.
        let mean = {
            let aa = moment_a.dot(&moment_a);
            let ab = moment_a.dot(&moment_b);
            let bb = moment_b.dot(&moment_b);
            let am = moment_a.dot(&bump);
            let bm = moment_b.dot(&bump);
            let det = aa * bb - ab * ab;
            let alpha = (bb * am - ab * bm) / det;
            let beta = (aa * bm - ab * am) / det;
            let flat = &bump - &moment_a * alpha - &moment_b * beta;
            let scaled = &flat * (bump.norm() / flat.norm());
            scaled
        };

        let expert_moments = [
            [moment_a.clone(), moment_b.clone()],
            [-moment_a, -moment_b],
        ];

        Ok(Self {
            blob_means: [mean.clone(), -mean],
            basis,
            grid,
            coeff_sd: COEFF_SD,
            gating_moment,
            gating_intercept: GATING_INTERCEPT,
            expert_moments,
            expert_intercepts: EXPERT_INTERCEPTS,
            noise_sd: noise_var.sqrt(),
            truth_scale,
            design,
        })
    }

    /// Component probabilities given true curve coefficients.
    pub fn gating_probs(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        let score =
            self.truth_scale * (self.gating_intercept + self.gating_moment.dot(coeffs));
        DVector::from_vec(log_softmax_with_reference(&[score]))
            .map(f64::exp)
    }

    /// Class probabilities under component `k` given true curve coefficients.
    pub fn expert_probs(&self, k: usize, coeffs: &DVector<f64>) -> DVector<f64> {
        let scores: Vec<f64> = (0..SIM_CLASSES - 1)
            .map(|g| {
                self.truth_scale
                    * (self.expert_intercepts[k][g] + self.expert_moments[k][g].dot(coeffs))
            })
            .collect();
        DVector::from_vec(log_softmax_with_reference(&scores)).map(f64::exp)
    }

    /// Marginal class probabilities given true curve coefficients.
    pub fn class_probs(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        let pi = self.gating_probs(coeffs);
        let mut out = DVector::zeros(SIM_CLASSES);
        for k in 0..SIM_COMPONENTS {
            out += self.expert_probs(k, coeffs) * pi[k];
        }
        out
    }

    /// Plug-in oracle label for observed samples: project onto the true
    /// basis, then classify with the true mixture law.
    pub fn oracle_label(&self, samples: &[f64]) -> Result<usize, DataError> {
        let coeffs = self.basis.project(&self.grid, samples)?.coeffs;
        let probs = self.class_probs(&coeffs);
        let mut label = 1;
        let mut best = probs[0];
        for g in 1..SIM_CLASSES {
            if probs[g] > best {
                best = probs[g];
                label = g + 1;
            }
        }
        Ok(label)
    }

    /// Oracle correct-classification rate on a dataset sampled on this grid.
    pub fn oracle_ccr(&self, dataset: &FunctionalDataset) -> Result<f64, DataError> {
        let mut predicted = Vec::with_capacity(dataset.len());
        for i in 0..dataset.len() {
            let samples: Vec<f64> = dataset.curves.row(i).iter().copied().collect();
            predicted.push(self.oracle_label(&samples)?);
        }
        correct_classification_rate(&predicted, &dataset.labels)
    }
}

/// A simulated train/test pair together with the law that produced it.
/// `mean_gating` is the average of the true gating probabilities over every
/// generated observation, for comparison against empirical cluster counts.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: FunctionalDataset,
    pub test: FunctionalDataset,
    pub truth: SimTruth,
    pub mean_gating: DVector<f64>,
}

/// Draws a train/test pair from the frozen law. Per observation: a blob is
/// chosen uniformly, coefficients are drawn around the blob mean, the latent
/// component is drawn from the gating law at the noiseless curve, the label
/// from that component's expert, and finally pointwise Gaussian noise is laid
/// over the curve samples.
pub fn simulate(config: &SimConfig) -> Result<SimOutput, DataError> {
    if config.n_train == 0 || config.n_test == 0 {
        return Err(DataError::InvalidConfig(
            "need at least one train and one test observation".into(),
        ));
    }
    if !(config.noise_var > 0.0) || !config.noise_var.is_finite() {
        return Err(DataError::InvalidConfig(format!(
            "noise variance must be positive and finite, got {}",
            config.noise_var
        )));
    }
    if !(config.truth_scale > 0.0) || !config.truth_scale.is_finite() {
        return Err(DataError::InvalidConfig(
            "truth scale must be positive and finite".into(),
        ));
    }

    let truth = SimTruth::build(config.noise_var, config.truth_scale)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let total = config.n_train + config.n_test;
    let t_len = SIM_GRID_LEN;

    let mut curves = DMatrix::zeros(total, t_len);
    let mut labels = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(total);
    let mut mean_gating = DVector::zeros(SIM_COMPONENTS);
    for i in 0..total {
        let blob = rng.random_range(0..2usize);
        let coeffs = DVector::from_fn(SIM_BASIS_DIM, |j, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            truth.blob_means[blob][j] + truth.coeff_sd * z
        });
        let noiseless = &truth.design * &coeffs;
        for j in 0..t_len {
            let z: f64 = StandardNormal.sample(&mut rng);
            curves[(i, j)] = noiseless[j] + truth.noise_sd * z;
        }
        let pi = truth.gating_probs(&coeffs);
        mean_gating += &pi;
        let component = draw_categorical(&mut rng, &pi);
        let class_probs = truth.expert_probs(component, &coeffs);
        let label = draw_categorical(&mut rng, &class_probs);
        labels.push(label + 1);
        clusters.push(component + 1);
    }
    mean_gating /= total as f64;

    let make = |range: std::ops::Range<usize>| -> FunctionalDataset {
        let idx: Vec<usize> = range.collect();
        let mut sub_curves = DMatrix::zeros(idx.len(), t_len);
        let mut sub_labels = Vec::with_capacity(idx.len());
        let mut sub_clusters = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            sub_curves.set_row(row, &curves.row(i));
            sub_labels.push(labels[i]);
            sub_clusters.push(clusters[i]);
        }
        FunctionalDataset {
            grid: truth.grid.clone(),
            curves: sub_curves,
            labels: sub_labels,
            num_classes: SIM_CLASSES,
            cluster_truth: Some(sub_clusters),
        }
    };

    let train = make(0..config.n_train);
    let test = make(config.n_train..total);
    Ok(SimOutput {
        train,
        test,
        truth,
        mean_gating,
    })
}

fn draw_categorical(rng: &mut ChaCha12Rng, probs: &DVector<f64>) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact integrals of every basis function against a piecewise-linear
/// function given by `nodes` (sorted by abscissa, spanning the domain).
fn basis_moments<const N: usize>(basis: &BSplineBasis, nodes: &[(f64, f64); N]) -> DVector<f64> {
    let mut breaks: Vec<f64> = basis.knots().to_vec();
    breaks.extend(nodes.iter().map(|&(t, _)| t));
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let (gl_nodes, gl_weights) = gauss_legendre(basis.order() + 2);
    let (lo, hi) = basis.domain();
    let mut moments = DVector::zeros(basis.dim());
    for w in breaks.windows(2) {
        if w[1] - w[0] <= 0.0 {
            continue;
        }
        let half = 0.5 * (w[1] - w[0]);
        let mid = 0.5 * (w[1] + w[0]);
        for (&x, &wt) in gl_nodes.iter().zip(gl_weights.iter()) {
            let t = (mid + half * x).clamp(lo, hi);
            let f = piecewise_linear(nodes, t);
            let vals = basis.eval_unchecked(t);
            moments += vals * (wt * half * f);
        }
    }
    moments
}

fn piecewise_linear(nodes: &[(f64, f64)], t: f64) -> f64 {
    if t <= nodes[0].0 {
        return nodes[0].1;
    }
    for w in nodes.windows(2) {
        let ((t0, v0), (t1, v1)) = (w[0], w[1]);
        if t <= t1 {
            let alpha = (t - t0) / (t1 - t0);
            return v0 + alpha * (v1 - v0);
        }
    }
    nodes[nodes.len() - 1].1
}
