//! Functional mixture-of-experts classification on univariate curves.
//!
//! The pipeline: curves observed on a grid are projected onto B-spline bases,
//! a softmax gating network splits the predictor space across mixture
//! components, and per-component multinomial experts map curves to class
//! probabilities. An optional derivative reparameterization lets L1 penalties
//! zero out chosen derivatives of the fitted coefficient functions, which
//! keeps the estimates interpretable.
//!
//! Modules:
//! - [`basis`]: B-spline systems, projection, cross-Gram integrals,
//!   finite-difference derivative operators
//! - [`model`]: gating/expert parameter blocks, likelihoods, penalties,
//!   prediction, coefficient-function export, model documents
//! - [`solver`]: penalized weighted multinomial logistic regression
//! - [`em`]: EM fitting with restarts and hyperparameter selection
//! - [`data`]: dataset I/O, the synthetic generator, splits, scoring
//! - [`benchmark`]: the replicated variant comparison table

pub mod basis;
pub mod benchmark;
pub mod data;
pub mod em;
pub mod model;
pub mod solver;

pub use basis::{
    cross_gram, derivative_operator, BSplineBasis, BasisError, CrossGram, CurveCoefficients,
    DerivativeOperator,
};
pub use benchmark::{run_benchmark, BenchmarkCell, BenchmarkConfig, BenchmarkReport};
pub use data::{
    correct_classification_rate, load_dataset, save_dataset, simulate, split_dataset, DataError,
    FunctionalDataset, SimConfig, SimOutput, SimTruth,
};
pub use em::{
    build_designs, e_step, evaluate_ccr, fit, fit_with_responsibilities, m_step_experts,
    m_step_gating, predict_labels, select_hyperparams, CandidateGrid, DesignSet, FitConfig,
    FitError, FitReport, FitVariant, Responsibilities, SelectionOutcome, SelectionRow,
    SelectionRule,
};
pub use model::{
    coefficient_functions, log_likelihood, penalty_value, BasisConfig, CoefficientCurves,
    CurveExport, DesignBundle, ExpertBlock, ExpertParams, FmeModel, GatingParams, ModelError,
    ModelOperators, Parameterization, Prediction,
};
pub use solver::{
    nll_and_grad, objective_value, solve_pwmlr, PwmlrPoint, PwmlrProblem, PwmlrSolution,
    SolverError, SolverOptions,
};
