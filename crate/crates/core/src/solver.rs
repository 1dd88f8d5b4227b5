//! Penalized weighted multinomial logistic regression.
//!
//! One entry point, [`solve_pwmlr`], covers the three penalty regimes that
//! appear in the M-steps:
//! - no penalty: damped Newton with line search,
//! - plain L1 on the coefficients: proximal gradient (FISTA with restarts),
//! - L1 on the coefficients plus L1 on a linear image of them
//!   (`||u||_1 + ||M u||_1` per class): consensus ADMM with the stacked
//!   split `v = [u; M u]` and damped-Newton theta-steps.
//!
//! Intercepts are never penalized. After the iterative phase an active-set
//! polish re-solves the smooth problem restricted to the detected sparsity
//! pattern, which simultaneously sharpens the objective and pins zeroed
//! entries (including rows of `M u`) down exactly. The returned point is the
//! best of {iterate, polished iterate, warm start, zero point, intercept-only
//! point} under the true objective, so a warm start can never make the result
//! worse.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Errors raised by the solver.
#[derive(Error, Debug)]
pub enum SolverError {
    #[error("invalid solver input: {0}")]
    InvalidInput(String),

    #[error("numerical failure in solver: {0}")]
    NumericalFailure(String),
}

/// One weighted multinomial problem with soft targets.
///
/// `designs` is n x d (no intercept column; one is added internally),
/// `targets` is n x C with nonnegative rows summing to one, `weights` is a
/// nonnegative length-n vector. `l1_weight` scales the coefficient penalty;
/// `penalty_map` adds `l1_weight * ||M u_c||_1` per class when present.
#[derive(Debug, Clone)]
pub struct PwmlrProblem<'a> {
    pub designs: &'a DMatrix<f64>,
    pub targets: &'a DMatrix<f64>,
    pub weights: &'a DVector<f64>,
    pub l1_weight: f64,
    pub penalty_map: Option<&'a DMatrix<f64>>,
}

/// Intercepts and per-class coefficient vectors for the C-1 free classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PwmlrPoint {
    pub intercepts: DVector<f64>,
    pub coeffs: Vec<DVector<f64>>,
}

impl PwmlrPoint {
    pub fn zeros(free_classes: usize, d: usize) -> Self {
        Self {
            intercepts: DVector::zeros(free_classes),
            coeffs: vec![DVector::zeros(d); free_classes],
        }
    }
}

/// Solver output: the point, its true penalized objective, and whether the
/// chosen iteration converged within its tolerance.
#[derive(Debug, Clone)]
pub struct PwmlrSolution {
    pub point: PwmlrPoint,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iteration caps and tolerances; the defaults are used everywhere in the
/// fitting pipeline.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_newton_iters: usize,
    pub grad_tol: f64,
    pub max_prox_iters: usize,
    pub prox_tol: f64,
    pub admm_rho: f64,
    pub max_admm_iters: usize,
    pub admm_tol: f64,
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_newton_iters: 200,
            grad_tol: 1e-8,
            max_prox_iters: 5000,
            prox_tol: 1e-6,
            admm_rho: 1.0,
            max_admm_iters: 500,
            admm_tol: 1e-6,
            polish: true,
        }
    }
}

/// Negative log-likelihood and gradient at a point, in the same structured
/// layout. Exposed so tests can check the gradient independently.
pub fn nll_and_grad(problem: &PwmlrProblem, point: &PwmlrPoint) -> Result<(f64, PwmlrPoint), SolverError> {
    let ctx = Ctx::new(problem)?;
    let theta = ctx.pack(point)?;
    let (nll, grad) = ctx.nll_grad(&theta);
    Ok((nll, ctx.unpack(&grad)))
}

/// True penalized objective at a point: weighted NLL plus the L1 terms.
pub fn objective_value(problem: &PwmlrProblem, point: &PwmlrPoint) -> Result<f64, SolverError> {
    let ctx = Ctx::new(problem)?;
    let theta = ctx.pack(point)?;
    Ok(ctx.true_objective(&theta))
}

/// Solves the penalized weighted multinomial logistic problem. `init` warm
/// starts the iteration; the returned objective is never worse than the
/// objective at the warm start or at the zero point.
pub fn solve_pwmlr(
    problem: &PwmlrProblem,
    options: &SolverOptions,
    init: Option<&PwmlrPoint>,
) -> Result<PwmlrSolution, SolverError> {
    let ctx = Ctx::new(problem)?;
    let theta0 = match init {
        Some(p) => ctx.pack(p)?,
        None => DVector::zeros(ctx.dim()),
    };

    let (theta_raw, stacked_aux, converged, iterations) = if problem.l1_weight == 0.0 {
        let (theta, converged, iters) = ctx.newton(&theta0, options)?;
        (theta, None, converged, iters)
    } else if problem.penalty_map.is_none() {
        let (theta, converged, iters) = ctx.fista(&theta0, options);
        (theta, None, converged, iters)
    } else {
        let (theta, v, converged, iters) = ctx.admm(&theta0, options)?;
        (theta, Some(v), converged, iters)
    };

    // Candidate set: raw iterate, optional polish, warm start, zero point,
    // intercept-only point at the weighted class log-odds. For the composite
    // route the auxiliary's value rows carry the exact zeros, so a snapped
    // copy of the iterate joins the pool and seeds the polish.
    let mut candidates: Vec<(DVector<f64>, bool)> = vec![(theta_raw.clone(), false)];
    let mut z_pattern: Option<DMatrix<f64>> = None;
    if let Some(v) = &stacked_aux {
        let mut snapped = theta_raw.clone();
        for c in 0..ctx.cfree {
            for j in 0..ctx.d {
                if v[(j, c)] == 0.0 {
                    snapped[ctx.idx(c, j + 1)] = 0.0;
                }
            }
        }
        z_pattern = Some(v.rows(ctx.d, v.nrows() - ctx.d).into_owned());
        candidates.push((snapped.clone(), false));
        if options.polish {
            if let Some(polished) = ctx.polish(&snapped, z_pattern.as_ref(), options) {
                candidates.push((polished, true));
            }
        }
    } else if options.polish && problem.l1_weight > 0.0 {
        if let Some(polished) = ctx.polish(&theta_raw, z_pattern.as_ref(), options) {
            candidates.push((polished, true));
        }
    }
    candidates.push((theta0.clone(), false));
    candidates.push((DVector::zeros(ctx.dim()), false));
    candidates.push((ctx.log_odds_point(), false));

    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for (theta, is_polished) in candidates {
        let obj = ctx.true_objective(&theta);
        if !obj.is_finite() {
            continue;
        }
        let replace = match &best {
            None => true,
            Some((best_obj, _, best_polished)) => {
                let tie = (obj - best_obj).abs() <= 1e-12 * (1.0 + best_obj.abs());
                (!tie && obj < *best_obj) || (tie && is_polished && !best_polished)
            }
        };
        if replace {
            best = Some((obj, theta, is_polished));
        }
    }
    let (objective, best_theta, _) = best.ok_or_else(|| {
        SolverError::NumericalFailure("every candidate evaluated to a non-finite objective".into())
    })?;

    Ok(PwmlrSolution {
        point: ctx.unpack(&best_theta),
        objective,
        converged,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// internal machinery on a flattened parameter vector
// ---------------------------------------------------------------------------

/// Problem context with the intercept-augmented design. The flattened layout
/// is class-major: for free class c, `theta[c*(d+1)]` is the intercept and
/// the next d entries are the coefficients.
struct Ctx<'a> {
    xt: DMatrix<f64>,
    targets: &'a DMatrix<f64>,
    weights: &'a DVector<f64>,
    cfree: usize,
    d: usize,
    l1: f64,
    map: Option<&'a DMatrix<f64>>,
}

impl<'a> Ctx<'a> {
    fn new(problem: &PwmlrProblem<'a>) -> Result<Self, SolverError> {
        let n = problem.designs.nrows();
        let d = problem.designs.ncols();
        let c = problem.targets.ncols();
        if c < 2 {
            return Err(SolverError::InvalidInput(format!(
                "need at least two target classes, got {c}"
            )));
        }
        if problem.targets.nrows() != n || problem.weights.len() != n {
            return Err(SolverError::InvalidInput(
                "designs, targets, and weights disagree on the row count".into(),
            ));
        }
        if n == 0 {
            return Err(SolverError::InvalidInput("no observations".into()));
        }
        if problem.designs.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::InvalidInput("non-finite design entry".into()));
        }
        if problem.weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(SolverError::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if problem.weights.sum() <= 0.0 {
            return Err(SolverError::InvalidInput("total weight is zero".into()));
        }
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..c {
                let t = problem.targets[(i, j)];
                if !t.is_finite() || t < 0.0 {
                    return Err(SolverError::InvalidInput(
                        "targets must be finite and nonnegative".into(),
                    ));
                }
                row_sum += t;
            }
            if (row_sum - 1.0).abs() > 1e-8 {
                return Err(SolverError::InvalidInput(format!(
                    "target row {i} sums to {row_sum}, expected 1"
                )));
            }
        }
        if !(problem.l1_weight >= 0.0) {
            return Err(SolverError::InvalidInput(
                "l1 weight must be nonnegative".into(),
            ));
        }
        if let Some(m) = problem.penalty_map {
            if m.ncols() != d {
                return Err(SolverError::InvalidInput(format!(
                    "penalty map has {} columns for {d} coefficients",
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::InvalidInput(
                    "penalty map has non-finite entries".into(),
                ));
            }
        }

        let mut xt = DMatrix::zeros(n, d + 1);
        for i in 0..n {
            xt[(i, 0)] = 1.0;
            for j in 0..d {
                xt[(i, j + 1)] = problem.designs[(i, j)];
            }
        }

        Ok(Self {
            xt,
            targets: problem.targets,
            weights: problem.weights,
            cfree: c - 1,
            d,
            l1: problem.l1_weight,
            map: problem.penalty_map,
        })
    }

    fn dim(&self) -> usize {
        self.cfree * (self.d + 1)
    }

    fn idx(&self, class: usize, j: usize) -> usize {
        class * (self.d + 1) + j
    }

    fn pack(&self, point: &PwmlrPoint) -> Result<DVector<f64>, SolverError> {
        if point.intercepts.len() != self.cfree || point.coeffs.len() != self.cfree {
            return Err(SolverError::InvalidInput(format!(
                "point has {} free classes, problem has {}",
                point.intercepts.len(),
                self.cfree
            )));
        }
        let mut theta = DVector::zeros(self.dim());
        for c in 0..self.cfree {
            if point.coeffs[c].len() != self.d {
                return Err(SolverError::InvalidInput(format!(
                    "coefficient vector {c} has length {}, expected {}",
                    point.coeffs[c].len(),
                    self.d
                )));
            }
            theta[self.idx(c, 0)] = point.intercepts[c];
            for j in 0..self.d {
                theta[self.idx(c, j + 1)] = point.coeffs[c][j];
            }
        }
        Ok(theta)
    }

    fn unpack(&self, theta: &DVector<f64>) -> PwmlrPoint {
        let mut intercepts = DVector::zeros(self.cfree);
        let mut coeffs = Vec::with_capacity(self.cfree);
        for c in 0..self.cfree {
            intercepts[c] = theta[self.idx(c, 0)];
            coeffs.push(DVector::from_fn(self.d, |j, _| theta[self.idx(c, j + 1)]));
        }
        PwmlrPoint { intercepts, coeffs }
    }

    /// n x cfree score matrix.
    fn scores(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let params = DMatrix::from_column_slice(self.d + 1, self.cfree, theta.as_slice());
        &self.xt * params
    }

    fn nll(&self, theta: &DVector<f64>) -> f64 {
        let scores = self.scores(theta);
        let n = self.xt.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let row = scores.row(i);
            let m = row.iter().fold(0.0f64, |a, &b| a.max(b));
            let mut sum = (-m).exp();
            for &s in row.iter() {
                sum += (s - m).exp();
            }
            let lse = m + sum.ln();
            let mut dot = 0.0;
            for c in 0..self.cfree {
                dot += self.targets[(i, c)] * row[c];
            }
            total += w * (lse - dot);
        }
        total
    }

    fn nll_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let scores = self.scores(theta);
        let n = self.xt.nrows();
        let mut total = 0.0;
        let mut resid = DMatrix::zeros(n, self.cfree);
        for i in 0..n {
            let w = self.weights[i];
            let row = scores.row(i);
            let m = row.iter().fold(0.0f64, |a, &b| a.max(b));
            let mut sum = (-m).exp();
            for &s in row.iter() {
                sum += (s - m).exp();
            }
            let lse = m + sum.ln();
            if w > 0.0 {
                let mut dot = 0.0;
                for c in 0..self.cfree {
                    dot += self.targets[(i, c)] * row[c];
                }
                total += w * (lse - dot);
            }
            for c in 0..self.cfree {
                let p = (row[c] - lse).exp();
                resid[(i, c)] = w * (p - self.targets[(i, c)]);
            }
        }
        let grad_mat = self.xt.transpose() * resid;
        let grad = DVector::from_column_slice(grad_mat.as_slice());
        (total, grad)
    }

    /// Dense Hessian of the weighted NLL, PSD by construction.
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let scores = self.scores(theta);
        let n = self.xt.nrows();
        let dim = self.dim();
        let dd = self.d + 1;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut probs = vec![0.0; self.cfree];
        for i in 0..n {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let row = scores.row(i);
            let m = row.iter().fold(0.0f64, |a, &b| a.max(b));
            let mut sum = (-m).exp();
            for &s in row.iter() {
                sum += (s - m).exp();
            }
            let lse = m + sum.ln();
            for c in 0..self.cfree {
                probs[c] = (row[c] - lse).exp();
            }
            for c in 0..self.cfree {
                for c2 in c..self.cfree {
                    let block = w
                        * (probs[c] * ((c == c2) as usize as f64 - probs[c2]));
                    if block == 0.0 {
                        continue;
                    }
                    for a in 0..dd {
                        let xa = self.xt[(i, a)];
                        if xa == 0.0 {
                            continue;
                        }
                        for b in 0..dd {
                            let v = block * xa * self.xt[(i, b)];
                            hess[(c * dd + a, c2 * dd + b)] += v;
                            if c != c2 {
                                hess[(c2 * dd + b, c * dd + a)] += v;
                            }
                        }
                    }
                }
            }
        }
        hess
    }

    /// True objective: NLL plus the L1 penalty (and mapped penalty) on the
    /// non-intercept coordinates.
    fn true_objective(&self, theta: &DVector<f64>) -> f64 {
        let mut obj = self.nll(theta);
        if self.l1 > 0.0 {
            for c in 0..self.cfree {
                let mut l1_norm = 0.0;
                for j in 0..self.d {
                    l1_norm += theta[self.idx(c, j + 1)].abs();
                }
                obj += self.l1 * l1_norm;
                if let Some(m) = self.map {
                    let u = DVector::from_fn(self.d, |j, _| theta[self.idx(c, j + 1)]);
                    let image = m * u;
                    obj += self.l1 * image.iter().map(|v| v.abs()).sum::<f64>();
                }
            }
        }
        obj
    }

    /// Soft-threshold of the non-intercept coordinates.
    fn prox(&self, theta: &DVector<f64>, threshold: f64) -> DVector<f64> {
        let mut out = theta.clone();
        for c in 0..self.cfree {
            for j in 0..self.d {
                let k = self.idx(c, j + 1);
                out[k] = soft_threshold(theta[k], threshold);
            }
        }
        out
    }

    /// Intercept-only fallback point: coefficients zero, intercepts at the
    /// weighted log-odds of the target means.
    fn log_odds_point(&self) -> DVector<f64> {
        let n = self.xt.nrows();
        let total_w = self.weights.sum();
        let mut means = vec![0.0; self.cfree + 1];
        for i in 0..n {
            let w = self.weights[i];
            for c in 0..=self.cfree {
                means[c] += w * self.targets[(i, c)];
            }
        }
        for m in means.iter_mut() {
            *m = (*m / total_w).max(1e-12);
        }
        let reference = means[self.cfree];
        let mut theta = DVector::zeros(self.dim());
        for c in 0..self.cfree {
            theta[self.idx(c, 0)] = (means[c] / reference).ln();
        }
        theta
    }

    /// Upper bound on the Lipschitz constant of the NLL gradient:
    /// 0.5 * largest eigenvalue of X^T W X (intercept column included).
    fn lipschitz_nll(&self) -> f64 {
        let n = self.xt.nrows();
        let mut g: DMatrix<f64> = DMatrix::zeros(self.d + 1, self.d + 1);
        for i in 0..n {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let xi = self.xt.row(i);
            for a in 0..=self.d {
                for b in a..=self.d {
                    let v = w * xi[a] * xi[b];
                    g[(a, b)] += v;
                    if a != b {
                        g[(b, a)] += v;
                    }
                }
            }
        }
        let eig = g.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v));
        (0.5 * lmax).max(1e-12)
    }

    // -- Newton ------------------------------------------------------------

    fn newton(
        &self,
        theta0: &DVector<f64>,
        options: &SolverOptions,
    ) -> Result<(DVector<f64>, bool, usize), SolverError> {
        let mut theta = theta0.clone();
        let (mut f, mut grad) = self.nll_grad(&theta);
        let mut converged = false;
        let mut iter = 0;
        while iter < options.max_newton_iters {
            iter += 1;
            if grad.amax() <= options.grad_tol {
                converged = true;
                break;
            }
            let hess = self.hessian(&theta);
            let mut damping = 0.0;
            let step = loop {
                let mut h = hess.clone();
                if damping > 0.0 {
                    for k in 0..h.nrows() {
                        h[(k, k)] += damping;
                    }
                }
                match Cholesky::new(h) {
                    Some(chol) => break chol.solve(&(-&grad)),
                    None => {
                        damping = if damping == 0.0 { 1e-8 } else { damping * 10.0 };
                        if damping > 1e12 {
                            return Err(SolverError::NumericalFailure(
                                "Newton system could not be stabilized".into(),
                            ));
                        }
                    }
                }
            };
            // Armijo backtracking on the NLL
            let slope = grad.dot(&step);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &theta + &step * alpha;
                let f_trial = self.nll(&trial);
                if f_trial <= f + 1e-4 * alpha * slope {
                    theta = trial;
                    let (nf, ng) = self.nll_grad(&theta);
                    f = nf;
                    grad = ng;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // step no longer reduces the objective: gradient is tiny or
                // the problem is separable; stop where we are
                break;
            }
        }
        if grad.amax() <= options.grad_tol {
            converged = true;
        }
        Ok((theta, converged, iter))
    }

    // -- proximal gradient ---------------------------------------------------

    /// FISTA with adaptive restart and a fixed valid Lipschitz bound;
    /// optional extra quadratic term `rho/2 ||M u_c - target_c||^2` used by
    /// the ADMM subproblem.
    fn fista_general(
        &self,
        theta0: &DVector<f64>,
        max_iters: usize,
        tol: f64,
    ) -> (DVector<f64>, bool, usize) {
        let lips = self.lipschitz_nll();
        let step = 1.0 / lips;

        let grad_full = |theta: &DVector<f64>| -> DVector<f64> {
            let (_, g) = self.nll_grad(theta);
            g
        };

        let mut theta = self.prox(&theta0.clone(), 0.0); // copy
        let mut prev = theta.clone();
        let mut t_prev = 1.0f64;
        let mut converged = false;
        let mut iter = 0;
        while iter < max_iters {
            iter += 1;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
            let momentum = (t_prev - 1.0) / t_next;
            let y = &theta + (&theta - &prev) * momentum;
            let gy = grad_full(&y);
            let next = self.prox(&(&y - &gy * step), self.l1 * step);

            // adaptive restart on loss of alignment
            if (&y - &next).dot(&(&next - &theta)) > 0.0 {
                t_prev = 1.0;
            } else {
                t_prev = t_next;
            }
            prev = theta;
            theta = next;

            // fixed-point residual of the prox-gradient map at theta
            let g = grad_full(&theta);
            let mapped = self.prox(&(&theta - &g * step), self.l1 * step);
            let residual = (&theta - &mapped).amax() / step;
            if residual <= tol {
                converged = true;
                break;
            }
        }
        (theta, converged, iter)
    }

    fn fista(&self, theta0: &DVector<f64>, options: &SolverOptions) -> (DVector<f64>, bool, usize) {
        self.fista_general(theta0, options.max_prox_iters, options.prox_tol)
    }

    // -- ADMM ----------------------------------------------------------------

    /// Consensus ADMM for the composite penalty: per class the stacked
    /// auxiliary `v_c = [u_c; M u_c]` carries both L1 terms, so the
    /// theta-subproblem is smooth and a few damped Newton steps solve it
    /// exactly — first-order inner loops would crawl here because the map's
    /// finite-difference weights make its spectral norm huge. Returns the
    /// final iterate and the stacked auxiliary (value rows above map rows),
    /// whose soft-threshold zeros are exact.
    fn admm(
        &self,
        theta0: &DVector<f64>,
        options: &SolverOptions,
    ) -> Result<(DVector<f64>, DMatrix<f64>, bool, usize), SolverError> {
        let m = self.map.expect("admm requires a penalty map");
        let rows = m.nrows();
        let total = self.d + rows;
        let mtm = m.transpose() * m;
        let mut rho = options.admm_rho;

        let mut theta = theta0.clone();
        let mut v = DMatrix::zeros(total, self.cfree);
        let mut w = DMatrix::zeros(total, self.cfree);
        let stack = |theta: &DVector<f64>, c: usize| -> DVector<f64> {
            let u = DVector::from_fn(self.d, |j, _| theta[self.idx(c, j + 1)]);
            let mut s = DVector::zeros(total);
            s.rows_mut(0, self.d).copy_from(&u);
            s.rows_mut(self.d, rows).copy_from(&(m * &u));
            s
        };
        for c in 0..self.cfree {
            v.set_column(c, &stack(&theta, c));
        }

        // augmented objective NLL + rho/2 sum_c ||S u_c - (v_c - w_c)||^2
        // and its gradient; S u_c is the stacked vector above
        let aug_value = |theta: &DVector<f64>, v: &DMatrix<f64>, w: &DMatrix<f64>, rho: f64| {
            let mut f = self.nll(theta);
            for c in 0..self.cfree {
                let resid = stack(theta, c) - v.column(c) + w.column(c);
                f += 0.5 * rho * resid.norm_squared();
            }
            f
        };
        let aug_grad = |theta: &DVector<f64>, v: &DMatrix<f64>, w: &DMatrix<f64>, rho: f64| {
            let (_, mut g) = self.nll_grad(theta);
            for c in 0..self.cfree {
                let resid = stack(theta, c) - v.column(c) + w.column(c);
                let pull = resid.rows(0, self.d).into_owned()
                    + m.transpose() * resid.rows(self.d, rows);
                for j in 0..self.d {
                    g[self.idx(c, j + 1)] += rho * pull[j];
                }
            }
            g
        };

        let mut converged = false;
        let mut iter = 0;
        while iter < options.max_admm_iters {
            iter += 1;

            // theta-step: a few damped Newton iterations on the augmented
            // objective. Solving it loosely is enough — the consensus
            // iteration refines theta every round anyway, and near the fixed
            // point one step from the previous iterate is already sharp.
            for _ in 0..4 {
                let grad = aug_grad(&theta, &v, &w, rho);
                if grad.amax() <= 1e-7 * (1.0 + rho) {
                    break;
                }
                let mut hess = self.hessian(&theta);
                for c in 0..self.cfree {
                    for j in 0..self.d {
                        let row_j = self.idx(c, j + 1);
                        hess[(row_j, row_j)] += rho;
                        for j2 in 0..self.d {
                            hess[(row_j, self.idx(c, j2 + 1))] += rho * mtm[(j, j2)];
                        }
                    }
                }
                let mut damping = 0.0;
                let step = loop {
                    let mut h = hess.clone();
                    if damping > 0.0 {
                        for k in 0..h.nrows() {
                            h[(k, k)] += damping;
                        }
                    }
                    match Cholesky::new(h) {
                        Some(chol) => break chol.solve(&(-&grad)),
                        None => {
                            damping = if damping == 0.0 { 1e-8 } else { damping * 10.0 };
                            if damping > 1e12 {
                                return Err(SolverError::NumericalFailure(
                                    "augmented Newton system could not be stabilized".into(),
                                ));
                            }
                        }
                    }
                };
                let f = aug_value(&theta, &v, &w, rho);
                let slope = grad.dot(&step);
                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let trial = &theta + &step * alpha;
                    if aug_value(&trial, &v, &w, rho) <= f + 1e-4 * alpha * slope {
                        theta = trial;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    break;
                }
            }

            // v-step: elementwise soft threshold of the stacked image plus
            // scaled dual, which owns both L1 terms
            let v_prev = v.clone();
            let mut primal = 0.0f64;
            for c in 0..self.cfree {
                let s = stack(&theta, c);
                for row in 0..total {
                    let vc = soft_threshold(s[row] + w[(row, c)], self.l1 / rho);
                    v[(row, c)] = vc;
                    w[(row, c)] += s[row] - vc;
                    primal = primal.max((s[row] - vc).abs());
                }
            }
            let mut dual_resid = 0.0f64;
            for c in 0..self.cfree {
                let dv = v.column(c) - v_prev.column(c);
                let pull = dv.rows(0, self.d).into_owned()
                    + m.transpose() * dv.rows(self.d, rows);
                dual_resid = dual_resid.max(pull.amax() * rho);
            }
            if primal <= options.admm_tol && dual_resid <= options.admm_tol {
                converged = true;
                break;
            }

            // residual balancing: grow rho when the primal residual lags,
            // shrink it when the dual residual lags, rescaling the duals to
            // keep the scaled iteration consistent
            if primal > 10.0 * dual_resid {
                rho *= 2.0;
                w /= 2.0;
            } else if dual_resid > 10.0 * primal {
                rho /= 2.0;
                w *= 2.0;
            }
        }

        Ok((theta, v, converged, iter))
    }

    // -- active-set polish ---------------------------------------------------

    /// Re-solves the smooth problem restricted to the sparsity pattern of
    /// `theta` (and, when a map is present, the pattern of the ADMM auxiliary
    /// `z`, whose soft-threshold zeros are exact), with the L1 terms
    /// linearized at their fixed signs. Returns a candidate point with exact
    /// zeros on the inactive pattern, or None when the reduction fails.
    fn polish(
        &self,
        theta: &DVector<f64>,
        z_pattern: Option<&DMatrix<f64>>,
        options: &SolverOptions,
    ) -> Option<DVector<f64>> {
        let activity_tol = 1e-8;
        let dim = self.dim();

        // Reduced parameterization: theta = phi * rho. Intercepts stay free;
        // per class the coefficients live in the null space of the inactive
        // constraints.
        let mut class_bases: Vec<DMatrix<f64>> = Vec::with_capacity(self.cfree);
        let mut lin_theta = DVector::zeros(dim);
        for c in 0..self.cfree {
            let u = DVector::from_fn(self.d, |j, _| theta[self.idx(c, j + 1)]);
            let mut constraint_rows: Vec<DVector<f64>> = Vec::new();
            for j in 0..self.d {
                if u[j].abs() <= activity_tol {
                    let mut e = DVector::zeros(self.d);
                    e[j] = 1.0;
                    constraint_rows.push(e);
                } else {
                    lin_theta[self.idx(c, j + 1)] += self.l1 * u[j].signum();
                }
            }
            if let Some(m) = self.map {
                let image = m * &u;
                for row in 0..m.nrows() {
                    let inactive = match z_pattern {
                        Some(z) => z[(row, c)] == 0.0,
                        None => image[row].abs() <= activity_tol,
                    };
                    if inactive {
                        constraint_rows.push(m.row(row).transpose());
                    } else {
                        let sign = match z_pattern {
                            Some(z) => z[(row, c)].signum(),
                            None => image[row].signum(),
                        };
                        for j in 0..self.d {
                            lin_theta[self.idx(c, j + 1)] += self.l1 * sign * m[(row, j)];
                        }
                    }
                }
            }

            let basis = if constraint_rows.is_empty() {
                DMatrix::identity(self.d, self.d)
            } else {
                let mut cmat = DMatrix::zeros(constraint_rows.len(), self.d);
                for (r, row) in constraint_rows.iter().enumerate() {
                    cmat.set_row(r, &row.transpose());
                }
                null_space(&cmat)?
            };
            class_bases.push(basis);
        }

        let reduced_dim: usize =
            self.cfree + class_bases.iter().map(|b| b.ncols()).sum::<usize>();
        if reduced_dim == 0 {
            return None;
        }

        // theta = phi * rho
        let mut phi = DMatrix::zeros(dim, reduced_dim);
        let mut offset = self.cfree;
        for c in 0..self.cfree {
            phi[(self.idx(c, 0), c)] = 1.0;
            let basis = &class_bases[c];
            for j in 0..self.d {
                for t in 0..basis.ncols() {
                    phi[(self.idx(c, j + 1), offset + t)] = basis[(j, t)];
                }
            }
            offset += basis.ncols();
        }

        // Project the current point into the reduced space (orthonormal
        // columns per class, identity on intercepts).
        let mut rho = DVector::zeros(reduced_dim);
        {
            let projected = phi.transpose() * theta;
            rho.copy_from(&projected);
        }

        let lin_reduced = phi.transpose() * &lin_theta;
        let objective = |rho: &DVector<f64>| -> f64 {
            let theta_full = &phi * rho;
            self.nll(&theta_full) + lin_reduced.dot(rho)
        };

        let norm_cap = 1e4 * (1.0 + theta.amax());
        let mut f = objective(&rho);
        for _ in 0..options.max_newton_iters.min(60) {
            let theta_full = &phi * &rho;
            if theta_full.amax() > norm_cap {
                return None; // separable direction, polish diverged
            }
            let (_, g_full) = self.nll_grad(&theta_full);
            let grad = phi.transpose() * g_full + &lin_reduced;
            if grad.amax() <= 1e-10 * (1.0 + f.abs()) {
                break;
            }
            let hess = phi.transpose() * self.hessian(&theta_full) * &phi;
            let mut damping = 0.0;
            let step = loop {
                let mut h = hess.clone();
                for k in 0..h.nrows() {
                    h[(k, k)] += damping + 1e-12;
                }
                match Cholesky::new(h) {
                    Some(chol) => break chol.solve(&(-&grad)),
                    None => {
                        damping = if damping == 0.0 { 1e-8 } else { damping * 10.0 };
                        if damping > 1e12 {
                            return None;
                        }
                    }
                }
            };
            let slope = grad.dot(&step);
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..50 {
                let trial = &rho + &step * alpha;
                let f_trial = objective(&trial);
                if f_trial <= f + 1e-4 * alpha * slope {
                    rho = trial;
                    f = f_trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }

        // Materialize and snap the constrained coordinates to exact zeros.
        let mut theta_pol = &phi * &rho;
        for c in 0..self.cfree {
            let u = DVector::from_fn(self.d, |j, _| theta[self.idx(c, j + 1)]);
            for j in 0..self.d {
                if u[j].abs() <= activity_tol {
                    theta_pol[self.idx(c, j + 1)] = 0.0;
                }
            }
        }
        Some(theta_pol)
    }
}

fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Orthonormal basis of the null space of `c`, via the eigen decomposition of
/// `c^T c`. Returns None when the null space is trivial.
fn null_space(c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram: DMatrix<f64> = c.transpose() * c;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let tol = 1e-12 * lmax.max(1.0);
    let cols: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] <= tol)
        .collect();
    if cols.is_empty() {
        // every direction constrained: null space is {0}; encode as a basis
        // with zero columns so the class is pinned entirely
        return Some(DMatrix::zeros(c.ncols(), 0));
    }
    let mut basis = DMatrix::zeros(c.ncols(), cols.len());
    for (out_col, &i) in cols.iter().enumerate() {
        basis.set_column(out_col, &eig.eigenvectors.column(i));
    }
    Some(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(labels.len(), classes);
        for (i, &y) in labels.iter().enumerate() {
            t[(i, y)] = 1.0;
        }
        t
    }

    fn random_problem_data(
        rng: &mut ChaCha12Rng,
        n: usize,
        d: usize,
        classes: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let designs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let targets = one_hot(&labels, classes);
        let weights = DVector::from_element(n, 1.0);
        (designs, targets, weights)
    }

    /// Independent oracle: cyclic coordinate minimization with golden-section
    /// line search on each coordinate over [-10, 10]. Valid for the smooth
    /// NLL plus separable L1 terms (penalty map absent or the identity).
    fn coordinate_descent_oracle(problem: &PwmlrProblem, sweeps: usize) -> (PwmlrPoint, f64) {
        let cfree = problem.targets.ncols() - 1;
        let d = problem.designs.ncols();
        let mut point = PwmlrPoint::zeros(cfree, d);
        let golden: f64 = (5.0f64.sqrt() - 1.0) / 2.0;
        let eval = |p: &PwmlrPoint| objective_value(problem, p).unwrap();
        for _ in 0..sweeps {
            for c in 0..cfree {
                for j in 0..=d {
                    let mut lo = -10.0f64;
                    let mut hi = 10.0f64;
                    let set = |p: &mut PwmlrPoint, v: f64| {
                        if j == 0 {
                            p.intercepts[c] = v;
                        } else {
                            p.coeffs[c][j - 1] = v;
                        }
                    };
                    for _ in 0..80 {
                        let m1 = hi - golden * (hi - lo);
                        let m2 = lo + golden * (hi - lo);
                        let mut p1 = point.clone();
                        set(&mut p1, m1);
                        let mut p2 = point.clone();
                        set(&mut p2, m2);
                        if eval(&p1) <= eval(&p2) {
                            hi = m2;
                        } else {
                            lo = m1;
                        }
                    }
                    let v = 0.5 * (lo + hi);
                    // snap near-zero coordinates so the oracle can represent
                    // the kink exactly
                    let v = if j > 0 && v.abs() < 1e-9 { 0.0 } else { v };
                    set(&mut point, v);
                }
            }
        }
        let obj = eval(&point);
        (point, obj)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (designs, targets, weights) = random_problem_data(&mut rng, 14, 3, 3);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.0,
            penalty_map: None,
        };
        let point = PwmlrPoint {
            intercepts: DVector::from_vec(vec![0.3, -0.2]),
            coeffs: vec![
                DVector::from_vec(vec![0.5, -0.1, 0.2]),
                DVector::from_vec(vec![-0.4, 0.3, 0.1]),
            ],
        };
        let (_, grad) = nll_and_grad(&problem, &point).unwrap();
        let h = 1e-5;
        let perturb = |p: &PwmlrPoint, c: usize, j: usize, delta: f64| {
            let mut q = p.clone();
            if j == 0 {
                q.intercepts[c] += delta;
            } else {
                q.coeffs[c][j - 1] += delta;
            }
            q
        };
        for c in 0..2 {
            for j in 0..=3 {
                let fp = nll_and_grad(&problem, &perturb(&point, c, j, h)).unwrap().0;
                let fm = nll_and_grad(&problem, &perturb(&point, c, j, -h)).unwrap().0;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = if j == 0 {
                    grad.intercepts[c]
                } else {
                    grad.coeffs[c][j - 1]
                };
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()),
                    "class {c} coord {j}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn newton_matches_coordinate_descent_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let (designs, targets, weights) = random_problem_data(&mut rng, 12, 2, 3);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.0,
            penalty_map: None,
        };
        let sol = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        let (_, oracle_obj) = coordinate_descent_oracle(&problem, 40);
        assert!(
            sol.objective <= oracle_obj + 1e-6,
            "solver {} vs oracle {}",
            sol.objective,
            oracle_obj
        );
        assert!(sol.converged);
    }

    #[test]
    fn lasso_matches_coordinate_descent_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let (designs, targets, weights) = random_problem_data(&mut rng, 16, 2, 3);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.35,
            penalty_map: None,
        };
        let sol = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        let (oracle_point, oracle_obj) = coordinate_descent_oracle(&problem, 60);
        assert!(
            sol.objective <= oracle_obj + 1e-5,
            "solver {} vs oracle {}",
            sol.objective,
            oracle_obj
        );
        // parameters agree loosely (both near the same optimum)
        for c in 0..2 {
            assert!((sol.point.intercepts[c] - oracle_point.intercepts[c]).abs() < 1e-2);
            for j in 0..2 {
                assert!((sol.point.coeffs[c][j] - oracle_point.coeffs[c][j]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn identity_map_doubles_the_penalty() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let (designs, targets, weights) = random_problem_data(&mut rng, 18, 3, 2);
        let ident = DMatrix::identity(3, 3);
        let with_map = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.2,
            penalty_map: Some(&ident),
        };
        let doubled = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.4,
            penalty_map: None,
        };
        let sol_map = solve_pwmlr(&with_map, &SolverOptions::default(), None).unwrap();
        let sol_dbl = solve_pwmlr(&doubled, &SolverOptions::default(), None).unwrap();
        // identical objectives: ||u||_1 + ||I u||_1 = 2 ||u||_1
        let obj_map_under_dbl = objective_value(&doubled, &sol_map.point).unwrap();
        assert_abs_diff_eq!(obj_map_under_dbl, sol_map.objective, epsilon = 1e-9);
        assert!((sol_map.objective - sol_dbl.objective).abs() < 1e-4);
    }

    #[test]
    fn huge_penalty_zeroes_all_coefficients() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let (designs, targets, weights) = random_problem_data(&mut rng, 30, 4, 3);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 1e6,
            penalty_map: None,
        };
        let sol = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        for c in 0..2 {
            for j in 0..4 {
                assert_eq!(sol.point.coeffs[c][j], 0.0);
            }
        }
        // intercepts sit at the class log-odds
        let mut counts = [0.0f64; 3];
        for i in 0..30 {
            for g in 0..3 {
                counts[g] += targets[(i, g)];
            }
        }
        for c in 0..2 {
            let expect = (counts[c] / counts[2]).ln();
            assert!((sol.point.intercepts[c] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn warm_start_never_worsens() {
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        for trial in 0..8 {
            let (designs, targets, weights) =
                random_problem_data(&mut rng, 15, 3, 3);
            let l1 = [0.0, 0.1, 0.5][trial % 3];
            let problem = PwmlrProblem {
                designs: &designs,
                targets: &targets,
                weights: &weights,
                l1_weight: l1,
                penalty_map: None,
            };
            let init = PwmlrPoint {
                intercepts: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                coeffs: (0..2)
                    .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0)))
                    .collect(),
            };
            let init_obj = objective_value(&problem, &init).unwrap();
            let sol = solve_pwmlr(&problem, &SolverOptions::default(), Some(&init)).unwrap();
            assert!(
                sol.objective <= init_obj + 1e-9,
                "trial {trial}: {} vs init {}",
                sol.objective,
                init_obj
            );
            let zero_obj =
                objective_value(&problem, &PwmlrPoint::zeros(2, 3)).unwrap();
            assert!(sol.objective <= zero_obj + 1e-9);
        }
    }

    #[test]
    fn admm_difference_map_zeroes_increments() {
        // strong mapped penalty with a first-difference map flattens the
        // coefficient profile within each class
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let n = 40;
        let d = 5;
        let designs = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n)
            .map(|i| (designs.row(i).sum() > 0.0) as usize)
            .collect();
        let targets = one_hot(&labels, 2);
        let weights = DVector::from_element(n, 1.0);
        let mut diff = DMatrix::zeros(d - 1, d);
        for r in 0..d - 1 {
            diff[(r, r)] = -1.0;
            diff[(r, r + 1)] = 1.0;
        }
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 2.0,
            penalty_map: Some(&diff),
        };
        let sol = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        let u = &sol.point.coeffs[0];
        let image = &diff * u;
        // active-set polish pins inactive increments down to float noise
        let zero_rows = image.iter().filter(|&&v| v.abs() <= 1e-12).count();
        assert!(
            zero_rows >= d - 2,
            "expected most increments at float-noise level, image {image:?}"
        );
    }

    #[test]
    fn weights_scale_like_duplication() {
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let (designs, targets, _) = random_problem_data(&mut rng, 10, 2, 2);
        // duplicate the first five rows vs doubling their weight
        let mut dup_designs = DMatrix::zeros(15, 2);
        let mut dup_targets = DMatrix::zeros(15, 2);
        for i in 0..10 {
            dup_designs.set_row(i, &designs.row(i));
            dup_targets.set_row(i, &targets.row(i));
        }
        for i in 0..5 {
            dup_designs.set_row(10 + i, &designs.row(i));
            dup_targets.set_row(10 + i, &targets.row(i));
        }
        let dup_weights = DVector::from_element(15, 1.0);
        let mut weights = DVector::from_element(10, 1.0);
        for i in 0..5 {
            weights[i] = 2.0;
        }
        let p_dup = PwmlrProblem {
            designs: &dup_designs,
            targets: &dup_targets,
            weights: &dup_weights,
            l1_weight: 0.05,
            penalty_map: None,
        };
        let p_w = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.05,
            penalty_map: None,
        };
        let sol_dup = solve_pwmlr(&p_dup, &SolverOptions::default(), None).unwrap();
        let sol_w = solve_pwmlr(&p_w, &SolverOptions::default(), None).unwrap();
        assert!((sol_dup.objective - sol_w.objective).abs() < 1e-6);
        assert!((sol_dup.point.intercepts[0] - sol_w.point.intercepts[0]).abs() < 1e-4);
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let (designs, targets, weights) = random_problem_data(&mut rng, 20, 3, 3);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.2,
            penalty_map: None,
        };
        let a = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        let b = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn rejects_malformed_inputs() {
        let designs = DMatrix::zeros(4, 2);
        let targets = DMatrix::from_element(4, 2, 0.5);
        let weights = DVector::from_element(4, 1.0);
        let bad_weights = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
        let base = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &bad_weights,
            l1_weight: 0.0,
            penalty_map: None,
        };
        assert!(matches!(
            solve_pwmlr(&base, &SolverOptions::default(), None),
            Err(SolverError::InvalidInput(_))
        ));

        let bad_targets = DMatrix::from_element(4, 2, 0.7); // rows sum to 1.4
        let p2 = PwmlrProblem {
            designs: &designs,
            targets: &bad_targets,
            weights: &weights,
            l1_weight: 0.0,
            penalty_map: None,
        };
        assert!(matches!(
            solve_pwmlr(&p2, &SolverOptions::default(), None),
            Err(SolverError::InvalidInput(_))
        ));

        let one_class = DMatrix::from_element(4, 1, 1.0);
        let p3 = PwmlrProblem {
            designs: &designs,
            targets: &one_class,
            weights: &weights,
            l1_weight: 0.0,
            penalty_map: None,
        };
        assert!(matches!(
            solve_pwmlr(&p3, &SolverOptions::default(), None),
            Err(SolverError::InvalidInput(_))
        ));
    }

    #[test]
    fn soft_labels_are_accepted() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let n = 12;
        let designs = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut targets = DMatrix::zeros(n, 3);
        for i in 0..n {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..(1.0 - a).max(1e-9));
            targets[(i, 0)] = a;
            targets[(i, 1)] = b;
            targets[(i, 2)] = 1.0 - a - b;
        }
        let weights = DVector::from_element(n, 1.0);
        let problem = PwmlrProblem {
            designs: &designs,
            targets: &targets,
            weights: &weights,
            l1_weight: 0.1,
            penalty_map: None,
        };
        let sol = solve_pwmlr(&problem, &SolverOptions::default(), None).unwrap();
        assert!(sol.objective.is_finite());
    }
}
