//! B-spline basis systems on a closed interval: construction, evaluation,
//! least-squares curve projection, cross-Gram matrices between bases, and
//! finite-difference derivative operator matrices.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Errors raised by basis construction and the operations built on it.
#[derive(Error, Debug)]
pub enum BasisError {
    #[error("invalid basis configuration: {0}")]
    InvalidConfiguration(String),

    #[error("evaluation point {t} outside basis domain [{lo}, {hi}]")]
    OutsideDomain { t: f64, lo: f64, hi: f64 },

    #[error("underdetermined projection: {got} samples for {needed} basis functions")]
    Underdetermined { needed: usize, got: usize },

    #[error("rank-deficient projection system (singular value ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("derivative operator block is numerically singular (condition number {cond:.3e})")]
    SingularOperator { cond: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// An order-`m` B-spline system of `dim` basis functions on a closed interval,
/// with uniform interior knots and `order`-fold replicated boundary knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    order: usize,
    dim: usize,
    domain: (f64, f64),
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Builds a clamped uniform B-spline basis. `order` is polynomial degree
    /// plus one, `dim` the number of basis functions.
    pub fn new(order: usize, dim: usize, domain: (f64, f64)) -> Result<Self, BasisError> {
        if order < 1 {
            return Err(BasisError::InvalidConfiguration(format!(
                "order must be >= 1, got {order}"
            )));
        }
        if dim < order {
            return Err(BasisError::InvalidConfiguration(format!(
                "dim ({dim}) must be >= order ({order})"
            )));
        }
        let (lo, hi) = domain;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(BasisError::InvalidConfiguration(format!(
                "degenerate domain [{lo}, {hi}]"
            )));
        }

        // dim + order knots: `order` copies of each boundary, dim - order
        // uniform interior knots splitting the domain into dim - order + 1 cells.
        let n_cells = dim - order + 1;
        let mut knots = Vec::with_capacity(dim + order);
        for _ in 0..order {
            knots.push(lo);
        }
        for i in 1..n_cells {
            knots.push(lo + (hi - lo) * i as f64 / n_cells as f64);
        }
        for _ in 0..order {
            knots.push(hi);
        }
        debug_assert_eq!(knots.len(), dim + order);

        Ok(Self {
            order,
            dim,
            domain,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_in_domain(&self, t: f64) -> Result<(), BasisError> {
        let (lo, hi) = self.domain;
        if !t.is_finite() || t < lo || t > hi {
            return Err(BasisError::OutsideDomain { t, lo, hi });
        }
        Ok(())
    }

    /// Index `s` of the knot span containing `t`: knots[s] <= t < knots[s+1],
    /// with the last nondegenerate span closed on the right.
    fn find_span(&self, t: f64) -> usize {
        let last = self.dim - 1;
        if t >= self.knots[last] {
            return last;
        }
        let mut lo = self.order - 1;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Evaluates all basis functions at `t`. Entries are nonnegative, sum to
    /// one, and at most `order` of them are nonzero.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>, BasisError> {
        self.check_in_domain(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> DVector<f64> {
        let span = self.find_span(t);
        let p = self.order - 1;
        // de Boor triangular scheme: values of the `order` splines that are
        // nonzero on this span, indices span-p .. span.
        let mut vals = vec![0.0; self.order];
        vals[0] = 1.0;
        let mut left = vec![0.0; self.order];
        let mut right = vec![0.0; self.order];
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom.abs() > 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }

        let mut out = DVector::zeros(self.dim);
        for (offset, &v) in vals.iter().enumerate() {
            let idx = span - p + offset;
            out[idx] = v;
        }
        out
    }

    /// Design matrix of basis values at each grid point (rows) for each basis
    /// function (columns).
    pub fn design_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        let mut mat = DMatrix::zeros(grid.len(), self.dim);
        for (i, &t) in grid.iter().enumerate() {
            self.check_in_domain(t)?;
            mat.set_row(i, &self.eval_unchecked(t).transpose());
        }
        Ok(mat)
    }

    /// Least-squares projection of sampled values onto the basis span.
    pub fn project(&self, grid: &[f64], samples: &[f64]) -> Result<CurveCoefficients, BasisError> {
        if grid.len() != samples.len() {
            return Err(BasisError::DimensionMismatch {
                expected: grid.len(),
                got: samples.len(),
            });
        }
        if grid.len() < self.dim {
            return Err(BasisError::Underdetermined {
                needed: self.dim,
                got: grid.len(),
            });
        }
        for w in grid.windows(2) {
            if w[1] <= w[0] {
                return Err(BasisError::InvalidConfiguration(
                    "projection grid must be strictly increasing".into(),
                ));
            }
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::InvalidConfiguration(
                "samples contain non-finite values".into(),
            ));
        }

        let design = self.design_matrix(grid)?;
        let y = DVector::from_column_slice(samples);
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin / smax < 1e-12 {
            return Err(BasisError::RankDeficient {
                ratio: if smax > 0.0 { smin / smax } else { 0.0 },
            });
        }
        let coeffs = svd
            .solve(&y, 1e-14 * smax)
            .map_err(|_| BasisError::RankDeficient { ratio: smin / smax })?;

        let fitted = &design * &coeffs;
        let residual_rms = ((&y - &fitted).norm_squared() / grid.len() as f64).sqrt();

        Ok(CurveCoefficients {
            coeffs,
            basis_dim: self.dim,
            residual_rms,
        })
    }

    /// Evaluates the basis expansion with the given coefficients on a grid.
    pub fn reconstruct(&self, coeffs: &DVector<f64>, grid: &[f64]) -> Result<DVector<f64>, BasisError> {
        if coeffs.len() != self.dim {
            return Err(BasisError::DimensionMismatch {
                expected: self.dim,
                got: coeffs.len(),
            });
        }
        let mut out = DVector::zeros(grid.len());
        for (i, &t) in grid.iter().enumerate() {
            self.check_in_domain(t)?;
            out[i] = self.eval_unchecked(t).dot(coeffs);
        }
        Ok(out)
    }
}

/// Coefficients of one curve in a basis, together with the least-squares
/// residual of the fit that produced them.
#[derive(Debug, Clone)]
pub struct CurveCoefficients {
    pub coeffs: DVector<f64>,
    pub basis_dim: usize,
    pub residual_rms: f64,
}

/// Matrix of pairwise integrals between two basis systems over their shared
/// domain, computed by per-span Gauss-Legendre quadrature.
#[derive(Debug, Clone)]
pub struct CrossGram {
    pub matrix: DMatrix<f64>,
    pub quadrature_nodes: usize,
}

/// Entries `\int b_a(t) b_b(t) dt` for every pair of functions from `a` and `b`.
/// The quadrature is exact for the piecewise-polynomial integrand.
pub fn cross_gram(a: &BSplineBasis, b: &BSplineBasis) -> Result<CrossGram, BasisError> {
    if a.domain != b.domain {
        return Err(BasisError::InvalidConfiguration(format!(
            "cross-Gram bases must share a domain: {:?} vs {:?}",
            a.domain, b.domain
        )));
    }

    // Integrand is polynomial of degree (order_a - 1) + (order_b - 1) on each
    // span of the union knot grid; n nodes integrate degree 2n - 1 exactly.
    let n_nodes = a.order + b.order;
    let (nodes, weights) = gauss_legendre(n_nodes);

    let mut breaks: Vec<f64> = a
        .knots
        .iter()
        .chain(b.knots.iter())
        .copied()
        .collect();
    breaks.sort_by(|x, y| x.partial_cmp(y).unwrap());
    breaks.dedup();

    let mut matrix = DMatrix::zeros(a.dim, b.dim);
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (&x, &wt) in nodes.iter().zip(weights.iter()) {
            let t = (mid + half * x).clamp(a.domain.0, a.domain.1);
            let va = a.eval_unchecked(t);
            let vb = b.eval_unchecked(t);
            let scale = wt * half;
            // rank-one update restricted to the nonzero bands
            for ia in 0..a.dim {
                if va[ia] == 0.0 {
                    continue;
                }
                for ib in 0..b.dim {
                    if vb[ib] != 0.0 {
                        matrix[(ia, ib)] += scale * va[ia] * vb[ib];
                    }
                }
            }
        }
    }

    Ok(CrossGram {
        matrix,
        quadrature_nodes: n_nodes,
    })
}

/// Finite-difference derivative matrices of a basis at an interior evaluation
/// grid: `block_d1` approximates the d1-th derivative of every basis function
/// at each point, `block_d2` the d2-th, and `chain = block_d2 * block_d1^{-1}`
/// carries one block onto the other.
#[derive(Debug, Clone)]
pub struct DerivativeOperator {
    pub d1: usize,
    pub d2: usize,
    pub eval_points: DVector<f64>,
    pub block_d1: DMatrix<f64>,
    pub block_d2: DMatrix<f64>,
    pub block_d1_inverse: DMatrix<f64>,
    pub chain: DMatrix<f64>,
}

impl DerivativeOperator {
    pub fn dim(&self) -> usize {
        self.block_d1.nrows()
    }

    /// Rebuilds the derived members from stored blocks (used when loading a
    /// serialized model).
    pub fn from_blocks(
        d1: usize,
        d2: usize,
        eval_points: DVector<f64>,
        block_d1: DMatrix<f64>,
        block_d2: DMatrix<f64>,
    ) -> Result<Self, BasisError> {
        let inv = invert_checked(&block_d1)?;
        let chain = &block_d2 * &inv;
        Ok(Self {
            d1,
            d2,
            eval_points,
            block_d1,
            block_d2,
            block_d1_inverse: inv,
            chain,
        })
    }

    /// Stacks the two blocks into the 2*dim x dim derivative matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(2 * dim, dim);
        out.view_mut((0, 0), (dim, dim)).copy_from(&self.block_d1);
        out.view_mut((dim, 0), (dim, dim)).copy_from(&self.block_d2);
        out
    }

    /// Applies the d1 block to a coefficient vector.
    pub fn apply_d1(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.block_d1 * coeffs
    }

    /// Applies the d2 block to a coefficient vector.
    pub fn apply_d2(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.block_d2 * coeffs
    }

    /// Recovers plain coefficients from a d1-derivative coefficient vector.
    pub fn invert_d1(&self, derivs: &DVector<f64>) -> DVector<f64> {
        &self.block_d1_inverse * derivs
    }
}

fn invert_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>, BasisError> {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smin > 0.0) || smin / smax < 1e-12 {
        return Err(BasisError::SingularOperator { cond });
    }
    m.clone()
        .try_inverse()
        .ok_or(BasisError::SingularOperator { cond })
}

/// Builds the derivative operator for `0 <= d1 < d2 < order`. Evaluation
/// points are `dim` equally spaced points offset half a spacing from the
/// domain boundary; differences are central where the stencil fits and shift
/// one-sided at the boundary, with step equal to the evaluation spacing.
pub fn derivative_operator(
    basis: &BSplineBasis,
    d1: usize,
    d2: usize,
) -> Result<DerivativeOperator, BasisError> {
    if d2 <= d1 || d2 >= basis.order {
        return Err(BasisError::InvalidConfiguration(format!(
            "derivative orders must satisfy 0 <= d1 < d2 < order, got d1={d1}, d2={d2}, order={}",
            basis.order
        )));
    }

    let dim = basis.dim;
    let (lo, hi) = basis.domain;
    let h = (hi - lo) / dim as f64;
    let eval_points = DVector::from_fn(dim, |j, _| lo + (j as f64 + 0.5) * h);

    let block_d1 = difference_block(basis, &eval_points, d1, h);
    let block_d2 = difference_block(basis, &eval_points, d2, h);
    let inv = invert_checked(&block_d1)?;
    let chain = &block_d2 * &inv;

    Ok(DerivativeOperator {
        d1,
        d2,
        eval_points,
        block_d1,
        block_d2,
        block_d1_inverse: inv,
        chain,
    })
}

/// Row j holds the d-th finite difference of every basis function at point j.
fn difference_block(
    basis: &BSplineBasis,
    points: &DVector<f64>,
    d: usize,
    h: f64,
) -> DMatrix<f64> {
    let dim = basis.dim;
    let (lo, hi) = basis.domain;
    let mut block = DMatrix::zeros(points.len(), dim);
    if d == 0 {
        for (j, &t) in points.iter().enumerate() {
            block.set_row(j, &basis.eval_unchecked(t).transpose());
        }
        return block;
    }

    let coeffs = binomial_row(d);
    let h_pow = h.powi(d as i32);
    for (j, &t) in points.iter().enumerate() {
        // centered stencil start, shifted to keep all d+1 nodes inside the domain
        let start = (t - 0.5 * d as f64 * h).clamp(lo, hi - d as f64 * h);
        let mut row = DVector::zeros(dim);
        for (i, &c) in coeffs.iter().enumerate() {
            let sign = if (d - i) % 2 == 0 { 1.0 } else { -1.0 };
            let x = (start + i as f64 * h).clamp(lo, hi);
            row += basis.eval_unchecked(x) * (sign * c / h_pow);
        }
        block.set_row(j, &row.transpose());
    }
    block
}

fn binomial_row(d: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..d {
        let mut next = vec![1.0];
        for w in row.windows(2) {
            next.push(w[0] + w[1]);
        }
        next.push(1.0);
        row = next;
    }
    row
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-based initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = pk;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
