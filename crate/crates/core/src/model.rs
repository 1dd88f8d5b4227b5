//! Mixture-of-experts model structure on projected functional designs:
//! softmax gating across components, per-component multinomial experts,
//! penalties, prediction, coefficient-function export, and a versioned
//! plain-text model document.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{derivative_operator, BSplineBasis, BasisError, DerivativeOperator};

/// Errors raised by model construction, evaluation, and (de)serialization.
#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),

    #[error("{what} index {got} out of range (max {max})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        max: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("model uses the derivative parameterization but carries no operator blocks")]
    MissingOperators,

    #[error("model document error at line {line}: {msg}")]
    Document { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// How coefficient vectors are to be read.
///
/// `Plain` stores basis coefficients directly. `DerivativeReparam` stores the
/// d1-derivative samples of each coefficient function at the operator's
/// evaluation points; the plain coefficients are recovered through the
/// inverse d1 block, and the d2-derivative samples through the chain matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Plain,
    DerivativeReparam,
}

impl Parameterization {
    fn tag(self) -> &'static str {
        match self {
            Parameterization::Plain => "plain",
            Parameterization::DerivativeReparam => "derivative",
        }
    }
}

/// Basis and derivative configuration shared by every block of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisConfig {
    /// B-spline order (degree + 1) used for every basis.
    pub order: usize,
    /// Dimension of the predictor-curve basis.
    pub r: usize,
    /// Dimension of the gating coefficient basis.
    pub p: usize,
    /// Dimension of the expert coefficient basis.
    pub q: usize,
    /// Closed interval the curves live on.
    pub domain: (f64, f64),
    /// Lower derivative order targeted by the sparsity penalty.
    pub d1: usize,
    /// Higher derivative order targeted by the sparsity penalty.
    pub d2: usize,
}

impl BasisConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.order < 1 || self.r < self.order || self.p < self.order || self.q < self.order {
            return Err(ModelError::InvalidShape(format!(
                "basis dimensions must be >= order {}: r={}, p={}, q={}",
                self.order, self.r, self.p, self.q
            )));
        }
        if !(self.domain.0 < self.domain.1)
            || !self.domain.0.is_finite()
            || !self.domain.1.is_finite()
        {
            return Err(ModelError::InvalidShape(format!(
                "degenerate domain [{}, {}]",
                self.domain.0, self.domain.1
            )));
        }
        if self.d2 <= self.d1 || self.d2 >= self.order {
            return Err(ModelError::InvalidShape(format!(
                "derivative orders must satisfy d1 < d2 < order, got d1={}, d2={}, order={}",
                self.d1, self.d2, self.order
            )));
        }
        Ok(())
    }
}

/// Softmax gating block: K-1 free score rows over a design of length p; the
/// last component is the reference with score zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    num_components: usize,
    intercepts: DVector<f64>,
    coeffs: Vec<DVector<f64>>,
    parameterization: Parameterization,
}

impl GatingParams {
    pub fn new(
        num_components: usize,
        intercepts: DVector<f64>,
        coeffs: Vec<DVector<f64>>,
        parameterization: Parameterization,
    ) -> Result<Self, ModelError> {
        if num_components < 1 {
            return Err(ModelError::InvalidShape(
                "gating needs at least one component".into(),
            ));
        }
        if intercepts.len() != num_components - 1 || coeffs.len() != num_components - 1 {
            return Err(ModelError::InvalidShape(format!(
                "gating with {} components needs {} intercepts and coefficient vectors, got {} and {}",
                num_components,
                num_components - 1,
                intercepts.len(),
                coeffs.len()
            )));
        }
        let dim = coeffs.first().map(|c| c.len()).unwrap_or(0);
        if coeffs.iter().any(|c| c.len() != dim) {
            return Err(ModelError::InvalidShape(
                "gating coefficient vectors differ in length".into(),
            ));
        }
        if intercepts.iter().any(|v| !v.is_finite())
            || coeffs.iter().any(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(ModelError::InvalidShape(
                "gating parameters must be finite".into(),
            ));
        }
        Ok(Self {
            num_components,
            intercepts,
            coeffs,
            parameterization,
        })
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.intercepts
    }

    pub fn coeffs(&self) -> &[DVector<f64>] {
        &self.coeffs
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    /// Length of the design vector this block expects (0 when K = 1).
    pub fn design_dim(&self) -> usize {
        self.coeffs.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Component log-probabilities for one design vector.
    pub fn log_probs(&self, design: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        if self.num_components > 1 && design.len() != self.design_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "gating design",
                expected: self.design_dim(),
                got: design.len(),
            });
        }
        let scores: Vec<f64> = (0..self.num_components - 1)
            .map(|k| self.intercepts[k] + self.coeffs[k].dot(design))
            .collect();
        Ok(DVector::from_vec(log_softmax_with_reference(&scores)))
    }

    /// Component probabilities for one design vector; nonnegative, sum to one.
    pub fn probs(&self, design: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(self.log_probs(design)?.map(f64::exp))
    }
}

/// One expert's multinomial block: G-1 free score rows over a design of
/// length q; the last class is the reference with score zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBlock {
    pub intercepts: DVector<f64>,
    pub coeffs: Vec<DVector<f64>>,
}

/// Per-component multinomial experts over a shared class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    num_classes: usize,
    blocks: Vec<ExpertBlock>,
    parameterization: Parameterization,
}

impl ExpertParams {
    pub fn new(
        num_classes: usize,
        blocks: Vec<ExpertBlock>,
        parameterization: Parameterization,
    ) -> Result<Self, ModelError> {
        if num_classes < 2 {
            return Err(ModelError::InvalidShape(
                "experts need at least two classes".into(),
            ));
        }
        if blocks.is_empty() {
            return Err(ModelError::InvalidShape(
                "experts need at least one block".into(),
            ));
        }
        let dim = blocks[0].coeffs.first().map(|c| c.len()).unwrap_or(0);
        for block in &blocks {
            if block.intercepts.len() != num_classes - 1 || block.coeffs.len() != num_classes - 1 {
                return Err(ModelError::InvalidShape(format!(
                    "expert block needs {} intercepts and coefficient vectors",
                    num_classes - 1
                )));
            }
            if block.coeffs.iter().any(|c| c.len() != dim) {
                return Err(ModelError::InvalidShape(
                    "expert coefficient vectors differ in length".into(),
                ));
            }
            if block.intercepts.iter().any(|v| !v.is_finite())
                || block
                    .coeffs
                    .iter()
                    .any(|c| c.iter().any(|v| !v.is_finite()))
            {
                return Err(ModelError::InvalidShape(
                    "expert parameters must be finite".into(),
                ));
            }
        }
        Ok(Self {
            num_classes,
            blocks,
            parameterization,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_experts(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ExpertBlock] {
        &self.blocks
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn design_dim(&self) -> usize {
        self.blocks[0].coeffs.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Class log-probabilities under expert `expert` (0-based).
    pub fn log_probs(
        &self,
        expert: usize,
        design: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        let block = self
            .blocks
            .get(expert)
            .ok_or(ModelError::IndexOutOfRange {
                what: "expert",
                got: expert,
                max: self.blocks.len() - 1,
            })?;
        if design.len() != self.design_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "expert design",
                expected: self.design_dim(),
                got: design.len(),
            });
        }
        let scores: Vec<f64> = (0..self.num_classes - 1)
            .map(|g| block.intercepts[g] + block.coeffs[g].dot(design))
            .collect();
        Ok(DVector::from_vec(log_softmax_with_reference(&scores)))
    }

    /// Class probabilities under expert `expert` (0-based).
    pub fn probs(&self, expert: usize, design: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(self.log_probs(expert, design)?.map(f64::exp))
    }
}

/// Derivative operators attached to a derivative-parameterized model: one for
/// the gating coefficient basis, one for the expert coefficient basis.
#[derive(Debug, Clone)]
pub struct ModelOperators {
    pub gating_op: DerivativeOperator,
    pub expert_op: DerivativeOperator,
}

/// A fitted functional mixture-of-experts classifier.
#[derive(Debug, Clone)]
pub struct FmeModel {
    pub basis_config: BasisConfig,
    pub gating: GatingParams,
    pub experts: ExpertParams,
    pub operators: Option<ModelOperators>,
}

impl FmeModel {
    pub fn new(
        basis_config: BasisConfig,
        gating: GatingParams,
        experts: ExpertParams,
        operators: Option<ModelOperators>,
    ) -> Result<Self, ModelError> {
        basis_config.validate()?;
        if gating.parameterization() != experts.parameterization() {
            return Err(ModelError::InvalidShape(
                "gating and experts disagree on the parameterization".into(),
            ));
        }
        if gating.num_components() != experts.num_experts() {
            return Err(ModelError::InvalidShape(format!(
                "gating has {} components but experts have {} blocks",
                gating.num_components(),
                experts.num_experts()
            )));
        }
        if gating.num_components() > 1 && gating.design_dim() != basis_config.p {
            return Err(ModelError::DimensionMismatch {
                what: "gating coefficients",
                expected: basis_config.p,
                got: gating.design_dim(),
            });
        }
        if experts.design_dim() != basis_config.q {
            return Err(ModelError::DimensionMismatch {
                what: "expert coefficients",
                expected: basis_config.q,
                got: experts.design_dim(),
            });
        }
        match (gating.parameterization(), &operators) {
            (Parameterization::DerivativeReparam, None) => {
                return Err(ModelError::MissingOperators)
            }
            (Parameterization::DerivativeReparam, Some(ops)) => {
                if ops.gating_op.dim() != basis_config.p || ops.expert_op.dim() != basis_config.q {
                    return Err(ModelError::InvalidShape(
                        "operator block dimensions disagree with the basis configuration".into(),
                    ));
                }
                if ops.gating_op.d1 != basis_config.d1
                    || ops.gating_op.d2 != basis_config.d2
                    || ops.expert_op.d1 != basis_config.d1
                    || ops.expert_op.d2 != basis_config.d2
                {
                    return Err(ModelError::InvalidShape(
                        "operator derivative orders disagree with the basis configuration".into(),
                    ));
                }
            }
            (Parameterization::Plain, _) => {}
        }
        Ok(Self {
            basis_config,
            gating,
            experts,
            operators,
        })
    }

    pub fn num_components(&self) -> usize {
        self.gating.num_components()
    }

    pub fn num_classes(&self) -> usize {
        self.experts.num_classes()
    }

    /// Marginal class probabilities: gating-weighted mixture of expert
    /// distributions, computed in log space.
    pub fn mixture_class_probs(
        &self,
        gating_design: &DVector<f64>,
        expert_design: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        let log_pi = self.gating.log_probs(gating_design)?;
        let g = self.num_classes();
        let k = self.num_components();
        let mut out = DVector::zeros(g);
        let mut log_terms = vec![0.0; k];
        let log_experts: Vec<DVector<f64>> = (0..k)
            .map(|j| self.experts.log_probs(j, expert_design))
            .collect::<Result<_, _>>()?;
        for class in 0..g {
            for j in 0..k {
                log_terms[j] = log_pi[j] + log_experts[j][class];
            }
            out[class] = log_sum_exp(&log_terms).exp();
        }
        Ok(out)
    }

    /// Classifies one observation; ties resolve to the smallest label.
    pub fn predict(
        &self,
        gating_design: &DVector<f64>,
        expert_design: &DVector<f64>,
    ) -> Result<Prediction, ModelError> {
        let class_probs = self.mixture_class_probs(gating_design, expert_design)?;
        let cluster_probs = self.gating.probs(gating_design)?;
        let mut label = 1;
        let mut best = class_probs[0];
        for g in 1..class_probs.len() {
            if class_probs[g] > best {
                best = class_probs[g];
                label = g + 1;
            }
        }
        Ok(Prediction {
            label,
            class_probs,
            cluster_probs,
        })
    }
}

/// One classified observation: 1-based label, class distribution, and the
/// gating distribution over components.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: usize,
    pub class_probs: DVector<f64>,
    pub cluster_probs: DVector<f64>,
}

/// Projected designs and labels for a set of observations, ready for
/// likelihood evaluation. Labels are 1-based.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub gating: DMatrix<f64>,
    pub expert: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub parameterization: Parameterization,
}

impl DesignBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate_against(&self, model: &FmeModel) -> Result<(), ModelError> {
        if self.parameterization != model.gating.parameterization() {
            return Err(ModelError::InvalidShape(
                "design bundle and model disagree on the parameterization".into(),
            ));
        }
        if self.num_classes != model.num_classes() {
            return Err(ModelError::DimensionMismatch {
                what: "bundle classes",
                expected: model.num_classes(),
                got: self.num_classes,
            });
        }
        if model.num_components() > 1 && self.gating.ncols() != model.basis_config.p {
            return Err(ModelError::DimensionMismatch {
                what: "bundle gating design",
                expected: model.basis_config.p,
                got: self.gating.ncols(),
            });
        }
        if self.expert.ncols() != model.basis_config.q {
            return Err(ModelError::DimensionMismatch {
                what: "bundle expert design",
                expected: model.basis_config.q,
                got: self.expert.ncols(),
            });
        }
        if self.gating.nrows() != self.len() || self.expert.nrows() != self.len() {
            return Err(ModelError::InvalidShape(
                "design bundle row counts disagree with the label count".into(),
            ));
        }
        if self
            .labels
            .iter()
            .any(|&y| y < 1 || y > self.num_classes)
        {
            return Err(ModelError::InvalidShape(format!(
                "labels must lie in 1..={}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Observed-data log-likelihood of the bundle under the model.
pub fn log_likelihood(model: &FmeModel, bundle: &DesignBundle) -> Result<f64, ModelError> {
    bundle.validate_against(model)?;
    let k = model.num_components();
    let mut total = 0.0;
    let mut log_terms = vec![0.0; k];
    for i in 0..bundle.len() {
        let r_i = DVector::from_iterator(bundle.gating.ncols(), bundle.gating.row(i).iter().copied());
        let x_i = DVector::from_iterator(bundle.expert.ncols(), bundle.expert.row(i).iter().copied());
        let log_pi = model.gating.log_probs(&r_i)?;
        let class = bundle.labels[i] - 1;
        for j in 0..k {
            log_terms[j] = log_pi[j] + model.experts.log_probs(j, &x_i)?[class];
        }
        total += log_sum_exp(&log_terms);
    }
    Ok(total)
}

/// L1 penalty of the model parameters: `chi` times the gating coefficient
/// norms plus `lambda` times the expert coefficient norms. Intercepts are
/// never penalized. In the derivative parameterization the norm of a block is
/// the norm of its stored d1 samples plus the norm of the chained d2 samples.
pub fn penalty_value(model: &FmeModel, chi: f64, lambda: f64) -> Result<f64, ModelError> {
    if !(chi >= 0.0) || !(lambda >= 0.0) {
        return Err(ModelError::InvalidShape(
            "penalty weights must be nonnegative".into(),
        ));
    }
    let block_norm = |coeffs: &DVector<f64>, op: Option<&DerivativeOperator>| -> f64 {
        match op {
            None => coeffs.iter().map(|v| v.abs()).sum(),
            Some(op) => {
                let d1_norm: f64 = coeffs.iter().map(|v| v.abs()).sum();
                let d2 = &op.chain * coeffs;
                d1_norm + d2.iter().map(|v| v.abs()).sum::<f64>()
            }
        }
    };

    let (gating_op, expert_op) = match model.gating.parameterization() {
        Parameterization::Plain => (None, None),
        Parameterization::DerivativeReparam => {
            let ops = model.operators.as_ref().ok_or(ModelError::MissingOperators)?;
            (Some(&ops.gating_op), Some(&ops.expert_op))
        }
    };

    let mut total = 0.0;
    for coeffs in model.gating.coeffs() {
        total += chi * block_norm(coeffs, gating_op);
    }
    for block in model.experts.blocks() {
        for coeffs in &block.coeffs {
            total += lambda * block_norm(coeffs, expert_op);
        }
    }
    Ok(total)
}

/// One exported coefficient function: smooth values on the grid plus the two
/// penalized derivative columns as step functions over the operator's
/// evaluation cells, so exact zeros in the derivative samples stay exact.
#[derive(Debug, Clone)]
pub struct CurveExport {
    pub values: Vec<f64>,
    pub deriv_d1: Vec<f64>,
    pub deriv_d2: Vec<f64>,
}

/// Coefficient functions of a model sampled on a grid: one per free gating
/// component, and one per (component, free class) expert pair.
#[derive(Debug, Clone)]
pub struct CoefficientCurves {
    pub grid: Vec<f64>,
    pub d1: usize,
    pub d2: usize,
    pub gating: Vec<CurveExport>,
    pub experts: Vec<Vec<CurveExport>>,
}

/// Samples every coefficient function (and its two penalized derivatives) on
/// `grid`. Grid points must lie inside the model domain.
pub fn coefficient_functions(
    model: &FmeModel,
    grid: &[f64],
) -> Result<CoefficientCurves, ModelError> {
    if grid.is_empty() {
        return Err(ModelError::InvalidShape("empty export grid".into()));
    }
    let cfg = &model.basis_config;
    let basis_p = BSplineBasis::new(cfg.order, cfg.p, cfg.domain)?;
    let basis_q = BSplineBasis::new(cfg.order, cfg.q, cfg.domain)?;

    // Operators: attached ones for the derivative parameterization, built on
    // demand for plain models so the export always carries derivative columns.
    let (gating_op, expert_op) = match &model.operators {
        Some(ops) => (ops.gating_op.clone(), ops.expert_op.clone()),
        None => (
            derivative_operator(&basis_p, cfg.d1, cfg.d2)?,
            derivative_operator(&basis_q, cfg.d1, cfg.d2)?,
        ),
    };

    let export_one = |stored: &DVector<f64>,
                      basis: &BSplineBasis,
                      op: &DerivativeOperator,
                      parameterization: Parameterization|
     -> Result<CurveExport, ModelError> {
        // stored = plain coefficients zeta (Plain) or d1 samples omega (reparam)
        let (zeta, omega_d1, omega_d2) = match parameterization {
            Parameterization::Plain => {
                let z = stored.clone();
                let w1 = op.apply_d1(&z);
                let w2 = op.apply_d2(&z);
                (z, w1, w2)
            }
            Parameterization::DerivativeReparam => {
                let z = op.invert_d1(stored);
                let mut w2 = &op.chain * stored;
                // The d1 samples are the stored coefficients themselves, so
                // their zeros are exact. The d2 samples are a recomputed
                // product: rows the fit drove to zero come back as ~1e-16
                // rounding residue, which would hide the sparsity pattern.
                // Snap anything far below the column scale back to zero.
                let tol = 1e-9 * (1.0 + w2.amax());
                for x in w2.iter_mut() {
                    if x.abs() <= tol {
                        *x = 0.0;
                    }
                }
                (z, stored.clone(), w2)
            }
        };
        let mut values = Vec::with_capacity(grid.len());
        let mut deriv_d1 = Vec::with_capacity(grid.len());
        let mut deriv_d2 = Vec::with_capacity(grid.len());
        let (lo, hi) = basis.domain();
        let dim = basis.dim() as f64;
        let h = (hi - lo) / dim;
        for &t in grid {
            values.push(basis.eval(t)?.dot(&zeta));
            let cell = (((t - lo) / h).floor() as isize)
                .clamp(0, basis.dim() as isize - 1) as usize;
            deriv_d1.push(omega_d1[cell]);
            deriv_d2.push(omega_d2[cell]);
        }
        Ok(CurveExport {
            values,
            deriv_d1,
            deriv_d2,
        })
    };

    let parameterization = model.gating.parameterization();
    let gating = model
        .gating
        .coeffs()
        .iter()
        .map(|c| export_one(c, &basis_p, &gating_op, parameterization))
        .collect::<Result<Vec<_>, _>>()?;
    let experts = model
        .experts
        .blocks()
        .iter()
        .map(|block| {
            block
                .coeffs
                .iter()
                .map(|c| export_one(c, &basis_q, &expert_op, parameterization))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(CoefficientCurves {
        grid: grid.to_vec(),
        d1: cfg.d1,
        d2: cfg.d2,
        gating,
        experts,
    })
}

// ---------------------------------------------------------------------------
// model document
// ---------------------------------------------------------------------------

const DOC_VERSION: &str = "fme-model v1";

fn fmt_f64(x: f64) -> String {
    // 17 significant digits round-trip every finite f64 exactly
    format!("{x:.16e}")
}

fn push_vector(out: &mut String, prefix: &str, v: &DVector<f64>) {
    out.push_str(prefix);
    for x in v.iter() {
        let _ = write!(out, " {}", fmt_f64(*x));
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, prefix: &str, m: &DMatrix<f64>) {
    for j in 0..m.nrows() {
        out.push_str(prefix);
        let _ = write!(out, " row {j}");
        for x in m.row(j).iter() {
            let _ = write!(out, " {}", fmt_f64(*x));
        }
        out.push('\n');
    }
}

impl FmeModel {
    /// Renders the model as a versioned plain-text document. Numeric fields
    /// use 17 significant digits so parameters survive a round trip bit for
    /// bit.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        out.push_str(DOC_VERSION);
        out.push('\n');
        let cfg = &self.basis_config;
        let _ = writeln!(out, "parameterization {}", self.gating.parameterization().tag());
        let _ = writeln!(out, "basis order {}", cfg.order);
        let _ = writeln!(out, "basis r {}", cfg.r);
        let _ = writeln!(out, "basis p {}", cfg.p);
        let _ = writeln!(out, "basis q {}", cfg.q);
        let _ = writeln!(
            out,
            "basis domain {} {}",
            fmt_f64(cfg.domain.0),
            fmt_f64(cfg.domain.1)
        );
        let _ = writeln!(out, "basis d1 {}", cfg.d1);
        let _ = writeln!(out, "basis d2 {}", cfg.d2);

        let _ = writeln!(out, "gating num_components {}", self.gating.num_components());
        push_vector(&mut out, "gating intercepts", self.gating.intercepts());
        for (k, c) in self.gating.coeffs().iter().enumerate() {
            push_vector(&mut out, &format!("gating coeffs {k}"), c);
        }

        let _ = writeln!(out, "experts num_classes {}", self.experts.num_classes());
        for (k, block) in self.experts.blocks().iter().enumerate() {
            push_vector(&mut out, &format!("expert {k} intercepts"), &block.intercepts);
            for (g, c) in block.coeffs.iter().enumerate() {
                push_vector(&mut out, &format!("expert {k} coeffs {g}"), c);
            }
        }

        if let Some(ops) = &self.operators {
            for (name, op) in [("gating", &ops.gating_op), ("expert", &ops.expert_op)] {
                push_vector(
                    &mut out,
                    &format!("operator {name} eval_points"),
                    &op.eval_points,
                );
                push_matrix(&mut out, &format!("operator {name} block_d1"), &op.block_d1);
                push_matrix(&mut out, &format!("operator {name} block_d2"), &op.block_d2);
            }
        }
        out.push_str("end\n");
        out
    }

    /// Parses a model document produced by [`FmeModel::to_document`].
    pub fn from_document(text: &str) -> Result<Self, ModelError> {
        Parser::new(text).parse()
    }

    /// Writes the document to a file.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_document())?;
        Ok(())
    }

    /// Loads a model document from a file.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_document(&text)
    }
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Self { lines, pos: 0 }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> ModelError {
        ModelError::Document {
            line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str), ModelError> {
        let item = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(self.lines.len(), "unexpected end of document"))?;
        self.pos += 1;
        Ok(item)
    }

    fn expect_tokens(&mut self, expected: &[&str]) -> Result<(usize, Vec<&'a str>), ModelError> {
        let (line, text) = self.next_line()?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() < expected.len() || &tokens[..expected.len()] != expected {
            return Err(self.err(
                line,
                format!("expected line starting with {:?}, got {text:?}", expected.join(" ")),
            ));
        }
        Ok((line, tokens[expected.len()..].to_vec()))
    }

    fn parse_usize(&self, line: usize, tok: &str) -> Result<usize, ModelError> {
        tok.parse()
            .map_err(|_| self.err(line, format!("invalid integer {tok:?}")))
    }

    fn parse_f64(&self, line: usize, tok: &str) -> Result<f64, ModelError> {
        tok.parse()
            .map_err(|_| self.err(line, format!("invalid number {tok:?}")))
    }

    fn parse_vector(
        &mut self,
        expected: &[&str],
        len: usize,
    ) -> Result<DVector<f64>, ModelError> {
        let (line, rest) = self.expect_tokens(expected)?;
        if rest.len() != len {
            return Err(self.err(
                line,
                format!("expected {len} numbers after {:?}, got {}", expected.join(" "), rest.len()),
            ));
        }
        let mut v = DVector::zeros(len);
        for (i, tok) in rest.iter().enumerate() {
            v[i] = self.parse_f64(line, tok)?;
        }
        Ok(v)
    }

    fn parse_matrix(
        &mut self,
        prefix: &[&str],
        nrows: usize,
        ncols: usize,
    ) -> Result<DMatrix<f64>, ModelError> {
        let mut m = DMatrix::zeros(nrows, ncols);
        for j in 0..nrows {
            let mut expected: Vec<&str> = prefix.to_vec();
            let row_idx = j.to_string();
            expected.push("row");
            expected.push(&row_idx);
            let (line, rest) = self.expect_tokens(&expected)?;
            if rest.len() != ncols {
                return Err(self.err(line, format!("expected {ncols} numbers in matrix row")));
            }
            for (i, tok) in rest.iter().enumerate() {
                m[(j, i)] = self.parse_f64(line, tok)?;
            }
        }
        Ok(m)
    }

    fn parse(mut self) -> Result<FmeModel, ModelError> {
        let (line, header) = self.next_line()?;
        if header != DOC_VERSION {
            return Err(self.err(line, format!("unsupported document header {header:?}")));
        }

        let (line, rest) = self.expect_tokens(&["parameterization"])?;
        let parameterization = match rest.as_slice() {
            ["plain"] => Parameterization::Plain,
            ["derivative"] => Parameterization::DerivativeReparam,
            other => return Err(self.err(line, format!("unknown parameterization {other:?}"))),
        };

        let (line, rest) = self.expect_tokens(&["basis", "order"])?;
        let order = self.parse_usize(line, rest[0])?;
        let (line, rest) = self.expect_tokens(&["basis", "r"])?;
        let r = self.parse_usize(line, rest[0])?;
        let (line, rest) = self.expect_tokens(&["basis", "p"])?;
        let p = self.parse_usize(line, rest[0])?;
        let (line, rest) = self.expect_tokens(&["basis", "q"])?;
        let q = self.parse_usize(line, rest[0])?;
        let (line, rest) = self.expect_tokens(&["basis", "domain"])?;
        if rest.len() != 2 {
            return Err(self.err(line, "domain needs two endpoints"));
        }
        let domain = (
            self.parse_f64(line, rest[0])?,
            self.parse_f64(line, rest[1])?,
        );
        let (line, rest) = self.expect_tokens(&["basis", "d1"])?;
        let d1 = self.parse_usize(line, rest[0])?;
        let (line, rest) = self.expect_tokens(&["basis", "d2"])?;
        let d2 = self.parse_usize(line, rest[0])?;
        let basis_config = BasisConfig {
            order,
            r,
            p,
            q,
            domain,
            d1,
            d2,
        };

        let (line, rest) = self.expect_tokens(&["gating", "num_components"])?;
        let num_components = self.parse_usize(line, rest[0])?;
        if num_components < 1 {
            return Err(self.err(line, "num_components must be >= 1"));
        }
        let intercepts = self.parse_vector(&["gating", "intercepts"], num_components - 1)?;
        let mut gating_coeffs = Vec::with_capacity(num_components.saturating_sub(1));
        for k in 0..num_components - 1 {
            let k_idx = k.to_string();
            gating_coeffs.push(self.parse_vector(&["gating", "coeffs", &k_idx], p)?);
        }
        let gating = GatingParams::new(num_components, intercepts, gating_coeffs, parameterization)?;

        let (line, rest) = self.expect_tokens(&["experts", "num_classes"])?;
        let num_classes = self.parse_usize(line, rest[0])?;
        if num_classes < 2 {
            return Err(self.err(line, "num_classes must be >= 2"));
        }
        let mut blocks = Vec::with_capacity(num_components);
        for k in 0..num_components {
            let k_idx = k.to_string();
            let intercepts = self.parse_vector(&["expert", &k_idx, "intercepts"], num_classes - 1)?;
            let mut coeffs = Vec::with_capacity(num_classes - 1);
            for g in 0..num_classes - 1 {
                let g_idx = g.to_string();
                coeffs.push(self.parse_vector(&["expert", &k_idx, "coeffs", &g_idx], q)?);
            }
            blocks.push(ExpertBlock { intercepts, coeffs });
        }
        let experts = ExpertParams::new(num_classes, blocks, parameterization)?;

        let operators = if parameterization == Parameterization::DerivativeReparam {
            let gate_pts = self.parse_vector(&["operator", "gating", "eval_points"], p)?;
            let gate_d1 = self.parse_matrix(&["operator", "gating", "block_d1"], p, p)?;
            let gate_d2 = self.parse_matrix(&["operator", "gating", "block_d2"], p, p)?;
            let exp_pts = self.parse_vector(&["operator", "expert", "eval_points"], q)?;
            let exp_d1 = self.parse_matrix(&["operator", "expert", "block_d1"], q, q)?;
            let exp_d2 = self.parse_matrix(&["operator", "expert", "block_d2"], q, q)?;
            Some(ModelOperators {
                gating_op: DerivativeOperator::from_blocks(d1, d2, gate_pts, gate_d1, gate_d2)?,
                expert_op: DerivativeOperator::from_blocks(d1, d2, exp_pts, exp_d1, exp_d2)?,
            })
        } else {
            None
        };

        let (line, text) = self.next_line()?;
        if text != "end" {
            return Err(self.err(line, format!("expected end marker, got {text:?}")));
        }

        FmeModel::new(basis_config, gating, experts, operators)
    }
}

// ---------------------------------------------------------------------------
// numeric helpers
// ---------------------------------------------------------------------------

/// Log-softmax over free scores with an implicit reference score of zero
/// appended last. Stable for arbitrarily large or small scores.
pub(crate) fn log_softmax_with_reference(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut sum = (-m).exp();
    for &s in scores {
        sum += (s - m).exp();
    }
    let lse = m + sum.ln();
    let mut out = Vec::with_capacity(scores.len() + 1);
    for &s in scores {
        out.push(s - lse);
    }
    out.push(-lse);
    out
}

/// Stable log(sum(exp(terms))).
pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
    m + sum.ln()
}
