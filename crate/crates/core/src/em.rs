//! EM fitting for the mixture-of-experts classifier: plain maximum
//! likelihood, the lasso-penalized variant, the derivative-reparameterized
//! sparse variant, and the single-component multinomial baseline, all built
//! on the shared penalized multinomial solver.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::basis::{cross_gram, derivative_operator, BSplineBasis, BasisError};
use crate::data::{DataError, FunctionalDataset};
use crate::model::{
    log_softmax_with_reference, log_sum_exp, BasisConfig, DesignBundle, ExpertBlock, ExpertParams,
    FmeModel, GatingParams, ModelError, ModelOperators, Parameterization,
};
use crate::solver::{
    solve_pwmlr, PwmlrPoint, PwmlrProblem, PwmlrSolution, SolverError, SolverOptions,
};

/// Errors raised while building designs or fitting.
#[derive(Error, Debug)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The four fitting strategies sharing one pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitVariant {
    /// Unpenalized mixture of experts (penalty weights forced to zero).
    FmeEm,
    /// L1 penalty on the projected coefficients.
    FmeEmLasso,
    /// Derivative reparameterization with the composite L1 penalty.
    IfmeEm,
    /// Single multinomial logistic model (one component, no gating).
    Fmlr,
}

impl FitVariant {
    pub fn name(&self) -> &'static str {
        match self {
            FitVariant::FmeEm => "FME-EM",
            FitVariant::FmeEmLasso => "FME-EM-Lasso",
            FitVariant::IfmeEm => "iFME-EM",
            FitVariant::Fmlr => "FMLR",
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self {
            FitVariant::IfmeEm => Parameterization::DerivativeReparam,
            _ => Parameterization::Plain,
        }
    }

    /// Parses the CLI-facing spelling.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "fme-em" => Some(FitVariant::FmeEm),
            "fme-em-lasso" => Some(FitVariant::FmeEmLasso),
            "ifme-em" => Some(FitVariant::IfmeEm),
            "fmlr" => Some(FitVariant::Fmlr),
            _ => None,
        }
    }

    /// Penalty weights `(chi, lambda)` a variant uses when the caller does
    /// not pick its own. The derivative-reparameterized penalty couples the
    /// coefficient and curvature terms through a single weight, and the
    /// curvature rows carry finite-difference scale (roughly the squared
    /// inverse knot spacing), so its nominal weight sits far below the plain
    /// lasso's to penalize comparably.
    pub fn default_penalties(&self) -> (f64, f64) {
        match self {
            FitVariant::FmeEm | FitVariant::Fmlr => (0.0, 0.0),
            FitVariant::FmeEmLasso => (1.0, 1.0),
            FitVariant::IfmeEm => (0.003, 0.003),
        }
    }
}

/// Everything a fit needs besides the data. `FmeEm` ignores the penalty
/// weights (they are forced to zero) and `Fmlr` forces a single component
/// with no gating penalty; the other knobs apply to every variant.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub variant: FitVariant,
    pub num_components: usize,
    pub chi: f64,
    pub lambda: f64,
    pub order: usize,
    pub r: usize,
    pub p: usize,
    pub q: usize,
    pub d1: usize,
    pub d2: usize,
    pub max_em_iters: usize,
    pub em_rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            variant: FitVariant::FmeEm,
            num_components: 2,
            chi: 0.0,
            lambda: 0.0,
            order: 4,
            r: 15,
            p: 15,
            q: 15,
            d1: 0,
            d2: 2,
            max_em_iters: 1000,
            em_rel_tol: 1e-6,
            n_restarts: 5,
            seed: 0,
            // M-steps are warm-started and re-run every EM iteration, so
            // they can afford far looser inner solves than a standalone
            // call; ascent still holds because a warm start that the solver
            // fails to improve on is kept as-is.
            solver: SolverOptions {
                max_admm_iters: 60,
                admm_tol: 1e-5,
                max_prox_iters: 600,
                ..SolverOptions::default()
            },
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.num_components == 0 {
            return Err(FitError::InvalidConfig(
                "need at least one component".into(),
            ));
        }
        if !(self.chi >= 0.0 && self.chi.is_finite())
            || !(self.lambda >= 0.0 && self.lambda.is_finite())
        {
            return Err(FitError::InvalidConfig(
                "penalty weights must be finite and nonnegative".into(),
            ));
        }
        if self.max_em_iters == 0 || self.n_restarts == 0 {
            return Err(FitError::InvalidConfig(
                "iteration and restart counts must be positive".into(),
            ));
        }
        if !(self.em_rel_tol > 0.0) {
            return Err(FitError::InvalidConfig(
                "the EM stopping tolerance must be positive".into(),
            ));
        }
        if self.order < 1 {
            return Err(FitError::InvalidConfig(format!(
                "spline order must be >= 1, got {}",
                self.order
            )));
        }
        for (name, dim) in [("r", self.r), ("p", self.p), ("q", self.q)] {
            if dim < self.order {
                return Err(FitError::InvalidConfig(format!(
                    "basis dimension {name} ({dim}) must be >= order ({})",
                    self.order
                )));
            }
        }
        if self.variant.parameterization() == Parameterization::DerivativeReparam
            && !(self.d1 < self.d2 && self.d2 < self.order)
        {
            return Err(FitError::InvalidConfig(format!(
                "derivative orders must satisfy d1 < d2 < order, got d1={} d2={} order={}",
                self.d1, self.d2, self.order
            )));
        }
        Ok(())
    }

    /// Applies the per-variant forcing rules: the unpenalized variant zeroes
    /// both penalty weights, and the single-model baseline collapses to one
    /// component without a gating penalty.
    pub fn effective(&self) -> FitConfig {
        let mut out = self.clone();
        match self.variant {
            FitVariant::FmeEm => {
                out.chi = 0.0;
                out.lambda = 0.0;
            }
            FitVariant::Fmlr => {
                out.num_components = 1;
                out.chi = 0.0;
            }
            _ => {}
        }
        out
    }

    fn basis_config(&self, domain: (f64, f64)) -> BasisConfig {
        BasisConfig {
            order: self.order,
            r: self.r,
            p: self.p,
            q: self.q,
            domain,
            d1: self.d1,
            d2: self.d2,
        }
    }
}

/// Posterior component memberships, one row per observation.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub tau: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(tau: DMatrix<f64>) -> Result<Self, FitError> {
        for i in 0..tau.nrows() {
            let mut sum = 0.0;
            for k in 0..tau.ncols() {
                let v = tau[(i, k)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(FitError::InvalidConfig(format!(
                        "responsibility ({i}, {k}) = {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(FitError::InvalidConfig(format!(
                    "responsibility row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { tau })
    }

    pub fn num_components(&self) -> usize {
        self.tau.ncols()
    }

    pub fn len(&self) -> usize {
        self.tau.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.nrows() == 0
    }
}

/// Designs plus whatever the variant needs to interpret them: the basis
/// layout and, for the derivative parameterization, the operators.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub bundle: DesignBundle,
    pub operators: Option<ModelOperators>,
    pub basis_config: BasisConfig,
}

/// Projects every curve onto the predictor basis and assembles the gating and
/// expert design rows; the derivative parameterization additionally maps them
/// through the inverse-transposed d1 blocks.
pub fn build_designs(
    dataset: &FunctionalDataset,
    config: &FitConfig,
) -> Result<DesignSet, FitError> {
    dataset.validate()?;
    config.validate()?;
    let basis_config = config.basis_config(dataset.domain());
    basis_config.validate()?;
    if dataset.grid.len() < config.r {
        return Err(FitError::InvalidConfig(format!(
            "grid of length {} cannot support a predictor basis of dimension {}",
            dataset.grid.len(),
            config.r
        )));
    }

    let basis_r = BSplineBasis::new(config.order, config.r, basis_config.domain)?;
    let basis_p = BSplineBasis::new(config.order, config.p, basis_config.domain)?;
    let basis_q = BSplineBasis::new(config.order, config.q, basis_config.domain)?;

    let n = dataset.len();
    let mut coeffs = DMatrix::zeros(n, config.r);
    for i in 0..n {
        let samples: Vec<f64> = dataset.curves.row(i).iter().copied().collect();
        let projected = basis_r.project(&dataset.grid, &samples)?;
        coeffs.row_mut(i).copy_from(&projected.coeffs.transpose());
    }

    // design rows: gating_i = [int b_p b_r^T] c_i, expert_i = [int b_q b_r^T] c_i
    let gram_pr = cross_gram(&basis_p, &basis_r)?.matrix;
    let gram_qr = cross_gram(&basis_q, &basis_r)?.matrix;
    let mut gating = &coeffs * gram_pr.transpose();
    let mut expert = &coeffs * gram_qr.transpose();

    let parameterization = config.variant.parameterization();
    let operators = match parameterization {
        Parameterization::Plain => None,
        Parameterization::DerivativeReparam => {
            let gating_op = derivative_operator(&basis_p, config.d1, config.d2)?;
            let expert_op = derivative_operator(&basis_q, config.d1, config.d2)?;
            // s_i = (A^{[d1]})^{-T} r_i, applied to every row at once
            gating *= &gating_op.block_d1_inverse;
            expert *= &expert_op.block_d1_inverse;
            Some(ModelOperators {
                gating_op,
                expert_op,
            })
        }
    };

    Ok(DesignSet {
        bundle: DesignBundle {
            gating,
            expert,
            labels: dataset.labels.clone(),
            num_classes: dataset.num_classes,
            parameterization,
        },
        operators,
        basis_config,
    })
}

/// Posterior responsibilities and the penalized observed log-likelihood of a
/// model on a design bundle.
pub fn e_step(
    model: &FmeModel,
    bundle: &DesignBundle,
    chi: f64,
    lambda: f64,
) -> Result<(Responsibilities, f64), FitError> {
    bundle.validate_against(model)?;
    let n = bundle.len();
    let k = model.num_components();
    let mut tau = DMatrix::zeros(n, k);
    let mut loglik = 0.0;
    let mut joint = vec![0.0; k];
    for i in 0..n {
        let gating_row = DVector::from_iterator(bundle.gating.ncols(), bundle.gating.row(i).iter().copied());
        let expert_row = DVector::from_iterator(bundle.expert.ncols(), bundle.expert.row(i).iter().copied());
        let log_pi = model.gating.log_probs(&gating_row)?;
        for (j, slot) in joint.iter_mut().enumerate() {
            let log_py = model.experts.log_probs(j, &expert_row)?;
            *slot = log_pi[j] + log_py[bundle.labels[i] - 1];
        }
        let ll_i = log_sum_exp(&joint);
        loglik += ll_i;
        for j in 0..k {
            tau[(i, j)] = (joint[j] - ll_i).exp();
        }
    }
    let penalty = crate::model::penalty_value(model, chi, lambda)?;
    Ok((Responsibilities::new(tau)?, loglik - penalty))
}

/// One gating update: a penalized multinomial solve against the soft
/// component memberships. A single component has no free gating parameters
/// and returns an empty point.
pub fn m_step_gating(
    tau: &Responsibilities,
    designs: &DMatrix<f64>,
    chi: f64,
    penalty_map: Option<&DMatrix<f64>>,
    options: &SolverOptions,
    warm: Option<&PwmlrPoint>,
) -> Result<PwmlrSolution, FitError> {
    if tau.len() != designs.nrows() {
        return Err(FitError::InvalidConfig(format!(
            "{} responsibility rows for {} design rows",
            tau.len(),
            designs.nrows()
        )));
    }
    if tau.num_components() == 1 {
        return Ok(PwmlrSolution {
            point: PwmlrPoint::zeros(0, designs.ncols()),
            objective: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let weights = DVector::from_element(designs.nrows(), 1.0);
    let problem = PwmlrProblem {
        designs,
        targets: &tau.tau,
        weights: &weights,
        l1_weight: chi,
        penalty_map,
    };
    Ok(solve_pwmlr(&problem, options, warm)?)
}

/// One expert update per component: a multinomial solve on the labels,
/// weighted by that component's responsibility column. A component whose
/// column is exactly zero carries no information and keeps its previous
/// parameters (freeze), which requires a warm start.
pub fn m_step_experts(
    tau: &Responsibilities,
    designs: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    penalty_map: Option<&DMatrix<f64>>,
    options: &SolverOptions,
    warm: Option<&[PwmlrPoint]>,
) -> Result<Vec<PwmlrSolution>, FitError> {
    let n = designs.nrows();
    if tau.len() != n || labels.len() != n {
        return Err(FitError::InvalidConfig(format!(
            "{} responsibility rows, {} labels, {} design rows",
            tau.len(),
            labels.len(),
            n
        )));
    }
    if num_classes < 2 || labels.iter().any(|&y| y < 1 || y > num_classes) {
        return Err(FitError::InvalidConfig(
            "labels must be 1-based and within the class count".into(),
        ));
    }
    if let Some(points) = warm {
        if points.len() != tau.num_components() {
            return Err(FitError::InvalidConfig(
                "warm start must carry one point per component".into(),
            ));
        }
    }
    let mut onehot = DMatrix::zeros(n, num_classes);
    for (i, &y) in labels.iter().enumerate() {
        onehot[(i, y - 1)] = 1.0;
    }
    let mut out = Vec::with_capacity(tau.num_components());
    for k in 0..tau.num_components() {
        let weights = DVector::from_column_slice(tau.tau.column(k).as_slice());
        if weights.amax() == 0.0 {
            let prev = warm.and_then(|w| w.get(k)).ok_or_else(|| {
                FitError::InvalidConfig(format!(
                    "component {k} has zero responsibility and no previous parameters to keep"
                ))
            })?;
            out.push(PwmlrSolution {
                point: prev.clone(),
                objective: 0.0,
                converged: true,
                iterations: 0,
            });
            continue;
        }
        let problem = PwmlrProblem {
            designs,
            targets: &onehot,
            weights: &weights,
            l1_weight: lambda,
            penalty_map,
        };
        out.push(solve_pwmlr(&problem, options, warm.map(|w| &w[k]))?);
    }
    Ok(out)
}

/// Result of a fit: the model, the optimization trail, and sparsity/model-
/// selection summaries. `trace` holds the penalized observed log-likelihood
/// at each EM iteration of the selected restart.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: FmeModel,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub selected_restart: usize,
    pub failed_restarts: usize,
    pub solver_nonconverged_steps: usize,
    pub nonzero_gating: Vec<usize>,
    pub nonzero_experts: Vec<Vec<usize>>,
    pub df: usize,
    pub bic: f64,
}

// ---------------------------------------------------------------------------
// internal EM machinery
// ---------------------------------------------------------------------------

/// Column centering/scaling applied to a design block before solving.
/// Constant columns keep scale 1 so the transform stays invertible.
struct Standardizer {
    means: DVector<f64>,
    scales: DVector<f64>,
}

impl Standardizer {
    fn fit(designs: &DMatrix<f64>) -> (DMatrix<f64>, Standardizer) {
        let n = designs.nrows() as f64;
        let d = designs.ncols();
        let mut means = DVector::zeros(d);
        let mut scales = DVector::zeros(d);
        for j in 0..d {
            let col = designs.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            means[j] = mean;
            scales[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let mut out = designs.clone();
        for j in 0..d {
            let mut col = out.column_mut(j);
            for x in col.iter_mut() {
                *x = (*x - means[j]) / scales[j];
            }
        }
        (out, Standardizer { means, scales })
    }

    /// Maps a solver point on the standardized scale back to the original
    /// design scale. Exact zeros stay exact: 0/sigma is 0.0 bitwise.
    fn restore(&self, point: &PwmlrPoint) -> PwmlrPoint {
        let mut out = point.clone();
        for (c, coeffs) in out.coeffs.iter_mut().enumerate() {
            let mut shift = 0.0;
            for j in 0..coeffs.len() {
                shift += coeffs[j] * self.means[j] / self.scales[j];
                coeffs[j] /= self.scales[j];
            }
            out.intercepts[c] = point.intercepts[c] - shift;
        }
        out
    }

    /// Rescales a penalty map so that applying it to standardized
    /// coefficients reproduces the original-scale products: the map's zeros
    /// keep their meaning in the units the model is exported in.
    fn map_through(&self, map: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = map.clone();
        for j in 0..out.ncols() {
            let mut col = out.column_mut(j);
            for x in col.iter_mut() {
                *x /= self.scales[j];
            }
        }
        out
    }
}

/// Parameters of one EM state on the standardized scale.
#[derive(Clone)]
struct EmParams {
    gating: PwmlrPoint,
    experts: Vec<PwmlrPoint>,
}

struct EmOutcome {
    params: EmParams,
    trace: Vec<f64>,
    converged: bool,
    nonconverged_steps: usize,
}

/// Shared state for the EM loop: standardized designs, penalty maps, and the
/// knobs from the configuration.
struct EmContext {
    sg: DMatrix<f64>,
    se: DMatrix<f64>,
    std_g: Standardizer,
    std_e: Standardizer,
    labels: Vec<usize>,
    num_components: usize,
    num_classes: usize,
    chi: f64,
    lambda: f64,
    map_g: Option<DMatrix<f64>>,
    map_e: Option<DMatrix<f64>>,
    solver: SolverOptions,
    max_em_iters: usize,
    em_rel_tol: f64,
}

impl EmContext {
    fn new(designs: &DesignSet, config: &FitConfig) -> Self {
        let (sg, std_g) = Standardizer::fit(&designs.bundle.gating);
        let (se, std_e) = Standardizer::fit(&designs.bundle.expert);
        let (map_g, map_e) = match &designs.operators {
            Some(ops) => (
                Some(std_g.map_through(&ops.gating_op.chain)),
                Some(std_e.map_through(&ops.expert_op.chain)),
            ),
            None => (None, None),
        };
        Self {
            sg,
            se,
            std_g,
            std_e,
            labels: designs.bundle.labels.clone(),
            num_components: config.num_components,
            num_classes: designs.bundle.num_classes,
            chi: config.chi,
            lambda: config.lambda,
            map_g,
            map_e,
            solver: config.solver.clone(),
            max_em_iters: config.max_em_iters,
            em_rel_tol: config.em_rel_tol,
        }
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    /// Penalty of one point under the solver's objective convention.
    fn point_penalty(&self, point: &PwmlrPoint, l1: f64, map: Option<&DMatrix<f64>>) -> f64 {
        if l1 == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for coeffs in &point.coeffs {
            total += coeffs.iter().map(|v| v.abs()).sum::<f64>();
            if let Some(m) = map {
                total += (m * coeffs).iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        l1 * total
    }

    /// Responsibilities and penalized observed log-likelihood at `params`.
    fn e_step(&self, params: &EmParams) -> (DMatrix<f64>, f64) {
        let n = self.n();
        let k = self.num_components;
        let mut tau = DMatrix::zeros(n, k);
        let mut loglik = 0.0;
        let mut gate_scores = vec![0.0; k.saturating_sub(1)];
        let mut class_scores = vec![0.0; self.num_classes - 1];
        let mut joint = vec![0.0; k];
        for i in 0..n {
            for (c, slot) in gate_scores.iter_mut().enumerate() {
                *slot = params.gating.intercepts[c]
                    + self.sg.row(i).transpose().dot(&params.gating.coeffs[c]);
            }
            let log_pi = log_softmax_with_reference(&gate_scores);
            for (j, slot) in joint.iter_mut().enumerate() {
                for (c, score) in class_scores.iter_mut().enumerate() {
                    *score = params.experts[j].intercepts[c]
                        + self.se.row(i).transpose().dot(&params.experts[j].coeffs[c]);
                }
                let log_py = log_softmax_with_reference(&class_scores);
                *slot = log_pi[j] + log_py[self.labels[i] - 1];
            }
            let ll_i = log_sum_exp(&joint);
            loglik += ll_i;
            for j in 0..k {
                tau[(i, j)] = (joint[j] - ll_i).exp();
            }
        }
        let mut penalty = self.point_penalty(&params.gating, self.chi, self.map_g.as_ref());
        for point in &params.experts {
            penalty += self.point_penalty(point, self.lambda, self.map_e.as_ref());
        }
        (tau, loglik - penalty)
    }

    /// One M-step from soft memberships; aborts on a degenerate component.
    fn m_step(
        &self,
        tau: &DMatrix<f64>,
        warm: Option<&EmParams>,
    ) -> Result<(EmParams, usize), FitError> {
        let mut nonconverged = 0;
        let resp = Responsibilities { tau: tau.clone() };

        for k in 0..self.num_components {
            let col_max = tau.column(k).amax();
            if col_max < 1e-8 {
                return Err(FitError::Degenerate(format!(
                    "component {k} lost all responsibility (max {col_max:.2e})"
                )));
            }
        }

        let gating_solution = m_step_gating(
            &resp,
            &self.sg,
            self.chi,
            self.map_g.as_ref(),
            &self.solver,
            warm.map(|w| &w.gating),
        )?;
        if !gating_solution.converged {
            nonconverged += 1;
        }

        let warm_experts: Option<Vec<PwmlrPoint>> = warm.map(|w| w.experts.clone());
        let expert_solutions = m_step_experts(
            &resp,
            &self.se,
            &self.labels,
            self.num_classes,
            self.lambda,
            self.map_e.as_ref(),
            &self.solver,
            warm_experts.as_deref(),
        )?;
        nonconverged += expert_solutions.iter().filter(|s| !s.converged).count();

        Ok((
            EmParams {
                gating: gating_solution.point,
                experts: expert_solutions.into_iter().map(|s| s.point).collect(),
            },
            nonconverged,
        ))
    }

    /// Full EM run from initial responsibilities.
    fn run(&self, tau0: &DMatrix<f64>) -> Result<EmOutcome, FitError> {
        let (mut params, mut nonconverged) = self.m_step(tau0, None)?;
        let mut trace = Vec::new();
        let mut converged = false;
        for iteration in 1..=self.max_em_iters {
            let (tau, lpen) = self.e_step(&params);
            if !lpen.is_finite() {
                return Err(FitError::Degenerate(format!(
                    "non-finite penalized log-likelihood at EM iteration {iteration}"
                )));
            }
            if let Some(&prev) = trace.last() {
                trace.push(lpen);
                if (lpen - prev).abs() <= self.em_rel_tol * (1.0 + lpen.abs()) {
                    converged = true;
                    break;
                }
            } else {
                trace.push(lpen);
            }
            if iteration == self.max_em_iters {
                break;
            }
            let (next, steps) = self.m_step(&tau, Some(&params))?;
            params = next;
            nonconverged += steps;
        }
        Ok(EmOutcome {
            params,
            trace,
            converged,
            nonconverged_steps: nonconverged,
        })
    }

    /// Seeded k-means-style partition of the expert design rows.
    fn initial_partition(&self, rng: &mut ChaCha12Rng) -> Vec<usize> {
        let n = self.n();
        let k = self.num_components;
        if k == 1 {
            return vec![0; n];
        }
        let rows: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::from_iterator(self.se.ncols(), self.se.row(i).iter().copied()))
            .collect();

        // k-means++ seeding: spread the initial centers out
        let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
        centers.push(rows[rng.random_range(0..n)].clone());
        let mut dist2: Vec<f64> = rows
            .iter()
            .map(|r| (r - &centers[0]).norm_squared())
            .collect();
        while centers.len() < k {
            let total: f64 = dist2.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &d) in dist2.iter().enumerate() {
                    if u < d {
                        pick = i;
                        break;
                    }
                    u -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            centers.push(rows[idx].clone());
            for (i, row) in rows.iter().enumerate() {
                dist2[i] = dist2[i].min((row - centers.last().unwrap()).norm_squared());
            }
        }

        // Lloyd iterations
        let mut assign = vec![0usize; n];
        for _ in 0..50 {
            let mut changed = false;
            for (i, row) in rows.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = (row - center).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                if assign[i] != best {
                    assign[i] = best;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    *center = rows[rng.random_range(0..n)].clone();
                    changed = true;
                    continue;
                }
                let mut mean = DVector::zeros(self.se.ncols());
                for &i in &members {
                    mean += &rows[i];
                }
                *center = mean / members.len() as f64;
            }
            if !changed {
                break;
            }
        }
        assign
    }

    /// Smoothed responsibilities from a hard partition.
    fn tau_from_partition(&self, assign: &[usize]) -> DMatrix<f64> {
        let k = self.num_components;
        if k == 1 {
            return DMatrix::from_element(assign.len(), 1, 1.0);
        }
        let off = 0.1 / (k as f64 - 1.0);
        DMatrix::from_fn(assign.len(), k, |i, c| if assign[i] == c { 0.9 } else { off })
    }

    /// Random perturbation of a partition for additional restarts.
    fn perturb(&self, assign: &[usize], rng: &mut ChaCha12Rng) -> Vec<usize> {
        let k = self.num_components;
        assign
            .iter()
            .map(|&a| {
                if k > 1 && rng.random_range(0.0..1.0) < 0.25 {
                    let shift = rng.random_range(1..k);
                    (a + shift) % k
                } else {
                    a
                }
            })
            .collect()
    }

    /// Maps standardized parameters into a model on the original scale.
    fn to_model(
        &self,
        params: &EmParams,
        designs: &DesignSet,
    ) -> Result<FmeModel, FitError> {
        let parameterization = designs.bundle.parameterization;
        let gating_point = self.std_g.restore(&params.gating);
        let gating = GatingParams::new(
            self.num_components,
            gating_point.intercepts,
            if self.num_components == 1 {
                Vec::new()
            } else {
                gating_point.coeffs
            },
            parameterization,
        )?;
        let blocks: Vec<ExpertBlock> = params
            .experts
            .iter()
            .map(|point| {
                let restored = self.std_e.restore(point);
                ExpertBlock {
                    intercepts: restored.intercepts,
                    coeffs: restored.coeffs,
                }
            })
            .collect();
        let experts = ExpertParams::new(self.num_classes, blocks, parameterization)?;
        Ok(FmeModel::new(
            designs.basis_config.clone(),
            gating,
            experts,
            designs.operators.clone(),
        )?)
    }
}

/// Fits the configured variant with seeded multi-restart EM and returns the
/// best run by final penalized log-likelihood.
pub fn fit(dataset: &FunctionalDataset, config: &FitConfig) -> Result<FitReport, FitError> {
    let cfg = config.effective();
    cfg.validate()?;
    dataset.validate()?;
    if dataset.len() < cfg.num_components {
        return Err(FitError::InvalidConfig(format!(
            "{} observations cannot support {} components",
            dataset.len(),
            cfg.num_components
        )));
    }

    let designs = build_designs(dataset, &cfg)?;
    let ctx = EmContext::new(&designs, &cfg);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let base = ctx.initial_partition(&mut rng);

    let mut best: Option<(EmOutcome, usize)> = None;
    let mut failed = 0usize;
    for restart in 0..cfg.n_restarts {
        let assign = if restart == 0 {
            base.clone()
        } else {
            ctx.perturb(&base, &mut rng)
        };
        let tau0 = ctx.tau_from_partition(&assign);
        match ctx.run(&tau0) {
            Ok(outcome) => {
                let lpen = *outcome.trace.last().unwrap();
                let better = match &best {
                    None => true,
                    Some((incumbent, _)) => lpen > *incumbent.trace.last().unwrap(),
                };
                if better {
                    best = Some((outcome, restart));
                }
            }
            Err(FitError::Degenerate(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }

    let (outcome, selected_restart) = best.ok_or_else(|| {
        FitError::Degenerate(format!("all {} restarts collapsed", cfg.n_restarts))
    })?;
    finish_report(&ctx, &designs, outcome, selected_restart, failed)
}

/// Single EM run from caller-provided responsibilities (no restarts). Used
/// for initialization-sensitive comparisons.
pub fn fit_with_responsibilities(
    dataset: &FunctionalDataset,
    config: &FitConfig,
    tau0: &Responsibilities,
) -> Result<FitReport, FitError> {
    let cfg = config.effective();
    cfg.validate()?;
    dataset.validate()?;
    if tau0.len() != dataset.len() || tau0.num_components() != cfg.num_components {
        return Err(FitError::InvalidConfig(format!(
            "initial responsibilities are {}x{}, expected {}x{}",
            tau0.len(),
            tau0.num_components(),
            dataset.len(),
            cfg.num_components
        )));
    }
    let designs = build_designs(dataset, &cfg)?;
    let ctx = EmContext::new(&designs, &cfg);
    let outcome = ctx.run(&tau0.tau)?;
    finish_report(&ctx, &designs, outcome, 0, 0)
}

fn finish_report(
    ctx: &EmContext,
    designs: &DesignSet,
    outcome: EmOutcome,
    selected_restart: usize,
    failed_restarts: usize,
) -> Result<FitReport, FitError> {
    let model = ctx.to_model(&outcome.params, designs)?;
    let loglik = crate::model::log_likelihood(&model, &designs.bundle)?;
    let penalized_loglik = *outcome.trace.last().unwrap();

    let count_nonzero = |v: &DVector<f64>| v.iter().filter(|x| **x != 0.0).count();
    let nonzero_gating: Vec<usize> = model.gating.coeffs().iter().map(count_nonzero).collect();
    let nonzero_experts: Vec<Vec<usize>> = model
        .experts
        .blocks()
        .iter()
        .map(|b| b.coeffs.iter().map(count_nonzero).collect())
        .collect();

    let k = model.num_components();
    let g = model.num_classes();
    let intercepts = (k - 1) + k * (g - 1);
    let df = intercepts
        + nonzero_gating.iter().sum::<usize>()
        + nonzero_experts.iter().flatten().sum::<usize>();
    let n = ctx.n() as f64;
    let bic = -2.0 * loglik + df as f64 * n.ln();

    let iterations = outcome.trace.len();
    Ok(FitReport {
        model,
        loglik,
        penalized_loglik,
        trace: outcome.trace,
        converged: outcome.converged,
        iterations,
        selected_restart,
        failed_restarts,
        solver_nonconverged_steps: outcome.nonconverged_steps,
        nonzero_gating,
        nonzero_experts,
        df,
        bic,
    })
}

// ---------------------------------------------------------------------------
// hyperparameter selection
// ---------------------------------------------------------------------------

/// Scoring rule for hyperparameter selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    /// Bayesian information criterion on the full data (lower is better);
    /// degrees of freedom count nonzero free parameters, intercepts included.
    Bic,
    /// Correct classification rate on a held-out fraction (higher is better).
    ValidationCcr { fraction: f64 },
}

/// Candidate grids; empty grids keep the base configuration's value.
#[derive(Debug, Clone, Default)]
pub struct CandidateGrid {
    pub num_components: Vec<usize>,
    pub chi: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// One scored candidate.
#[derive(Debug, Clone)]
pub struct SelectionRow {
    pub num_components: usize,
    pub chi: f64,
    pub lambda: f64,
    pub score: f64,
    pub converged: bool,
    pub failed: bool,
}

/// Winning configuration with its refit report and the full score table.
#[derive(Debug)]
pub struct SelectionOutcome {
    pub config: FitConfig,
    pub report: FitReport,
    pub table: Vec<SelectionRow>,
}

/// Scores every grid point and refits the winner on the full data. Ties
/// prefer fewer components, then larger chi, then larger lambda.
pub fn select_hyperparams(
    dataset: &FunctionalDataset,
    base: &FitConfig,
    grid: &CandidateGrid,
    rule: SelectionRule,
) -> Result<SelectionOutcome, FitError> {
    dataset.validate()?;
    let ks = if grid.num_components.is_empty() {
        vec![base.num_components]
    } else {
        grid.num_components.clone()
    };
    let chis = if grid.chi.is_empty() {
        vec![base.chi]
    } else {
        grid.chi.clone()
    };
    let lambdas = if grid.lambda.is_empty() {
        vec![base.lambda]
    } else {
        grid.lambda.clone()
    };

    let split = match rule {
        SelectionRule::ValidationCcr { fraction } => {
            Some(crate::data::split_dataset(dataset, fraction, base.seed)?)
        }
        SelectionRule::Bic => None,
    };

    let mut table = Vec::new();
    let mut best: Option<(f64, usize, f64, f64)> = None; // score, K, chi, lambda
    for &k in &ks {
        for &chi in &chis {
            for &lambda in &lambdas {
                let mut candidate = base.clone();
                candidate.num_components = k;
                candidate.chi = chi;
                candidate.lambda = lambda;

                let scored = score_candidate(dataset, &candidate, &split, rule);
                let (score, converged, failed) = match scored {
                    Ok((s, c)) => (s, c, false),
                    Err(FitError::Degenerate(_)) => (f64::INFINITY, false, true),
                    Err(e) => return Err(e),
                };
                table.push(SelectionRow {
                    num_components: k,
                    chi,
                    lambda,
                    score,
                    converged,
                    failed,
                });
                if failed {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((s, bk, bc, bl)) => {
                        let tie = (score - s).abs() <= 1e-12 * (1.0 + s.abs());
                        if tie {
                            (k, chi, lambda) != (bk, bc, bl)
                                && (k < bk
                                    || (k == bk && chi > bc)
                                    || (k == bk && chi == bc && lambda > bl))
                        } else {
                            score < s
                        }
                    }
                };
                if better {
                    best = Some((score, k, chi, lambda));
                }
            }
        }
    }

    let (_, k, chi, lambda) = best.ok_or_else(|| {
        FitError::Degenerate("every candidate configuration collapsed".into())
    })?;
    let mut winner = base.clone();
    winner.num_components = k;
    winner.chi = chi;
    winner.lambda = lambda;
    let report = fit(dataset, &winner)?;
    Ok(SelectionOutcome {
        config: winner,
        report,
        table,
    })
}

/// Lower-is-better score of one candidate (BIC, or negated holdout CCR).
fn score_candidate(
    dataset: &FunctionalDataset,
    candidate: &FitConfig,
    split: &Option<(FunctionalDataset, FunctionalDataset)>,
    rule: SelectionRule,
) -> Result<(f64, bool), FitError> {
    match rule {
        SelectionRule::Bic => {
            let report = fit(dataset, candidate)?;
            Ok((report.bic, report.converged))
        }
        SelectionRule::ValidationCcr { .. } => {
            let (train, holdout) = split.as_ref().unwrap();
            let report = fit(train, candidate)?;
            let ccr = evaluate_ccr(&report.model, holdout, candidate)?;
            Ok((-ccr, report.converged))
        }
    }
}

/// Builds designs for `dataset` under the model's variant and scores the
/// model's predictions against the labels.
pub fn evaluate_ccr(
    model: &FmeModel,
    dataset: &FunctionalDataset,
    config: &FitConfig,
) -> Result<f64, FitError> {
    let designs = build_designs(dataset, &config.effective())?;
    let labels = predict_labels(model, &designs.bundle)?;
    Ok(crate::data::correct_classification_rate(
        &labels,
        &dataset.labels,
    )?)
}

/// Predicted 1-based labels for every row of a bundle.
pub fn predict_labels(model: &FmeModel, bundle: &DesignBundle) -> Result<Vec<usize>, FitError> {
    let mut out = Vec::with_capacity(bundle.len());
    for i in 0..bundle.len() {
        let gating_row =
            DVector::from_iterator(bundle.gating.ncols(), bundle.gating.row(i).iter().copied());
        let expert_row =
            DVector::from_iterator(bundle.expert.ncols(), bundle.expert.row(i).iter().copied());
        out.push(model.predict(&gating_row, &expert_row)?.label);
    }
    Ok(out)
}
