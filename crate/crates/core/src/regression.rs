//! Least-squares solvers.
//!
//! * OLS: `min ‖y − Xβ‖²`.
//! * AUR: `min ‖y − Xβ‖² + λ‖β‖²`, the averaged-uncertainty form.
//! * WUR: `min ‖y − Xβ‖ + λ‖β‖` with unsquared norms, the worst-case form.
//!
//! There is no intercept; callers scale their data instead.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::{Error, Result};

/// Gram matrices with a larger condition estimate are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Normal-equation residual target for AUR/OLS solves.
pub const NORMAL_EQUATION_TOLERANCE: f64 = 1e-10;

/// Scaled subgradient target for WUR: `‖g‖ ≤ tol · (1 + ‖Xᵀy‖)`.
pub const WUR_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ols,
    Aur,
    Wur,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ols => "ols",
            Method::Aur => "aur",
            Method::Wur => "wur",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(Method::Ols),
            "aur" => Ok(Method::Aur),
            "wur" => Ok(Method::Wur),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Design matrix `X` (n × k) and target `y` (n).
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl RegressionProblem {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Data(format!(
                "design matrix must be non-empty, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension {
                expected: format!("{} targets", x.nrows()),
                got: format!("{} targets", y.len()),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("design and target must be finite".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    /// Problem restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        Self::new(x, y)
    }

    pub fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * beta
    }

    /// Mean squared prediction error of `beta`.
    pub fn mse(&self, beta: &DVector<f64>) -> f64 {
        self.residual(beta).norm_squared() / self.n() as f64
    }

    /// `‖y − Xβ‖² + λ‖β‖²`.
    pub fn aur_objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        self.residual(beta).norm_squared() + lambda * beta.norm_squared()
    }

    /// `‖y − Xβ‖ + λ‖β‖`.
    pub fn wur_objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        self.residual(beta).norm() + lambda * beta.norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub optimality_residual: f64,
    pub lambda_used: f64,
    pub method: Method,
}

impl FitResult {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// Cached `XᵀX` and `Xᵀy`.
struct Normal {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl Normal {
    fn new(problem: &RegressionProblem) -> Self {
        let xt = problem.x.transpose();
        Self {
            gram: &xt * &problem.x,
            rhs: &xt * &problem.y,
        }
    }

    fn shifted(&self, lambda: f64) -> DMatrix<f64> {
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        a
    }

    fn condition(&self) -> f64 {
        let eig = SymmetricEigen::new(self.gram.clone());
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Solves `(XᵀX + λI) β = Xᵀy` by Cholesky with one refinement step.
    fn solve(&self, lambda: f64) -> Result<(DVector<f64>, f64)> {
        if lambda == 0.0 {
            let condition = self.condition();
            if condition.is_nan() || condition > MAX_CONDITION {
                return Err(Error::RankDeficient { condition });
            }
        }
        let a = self.shifted(lambda);
        let chol = Cholesky::<f64, Dyn>::new(a.clone()).ok_or_else(|| Error::RankDeficient {
            condition: self.condition(),
        })?;
        let mut beta = chol.solve(&self.rhs);
        let r = &self.rhs - &a * &beta;
        beta += chol.solve(&r);
        let residual = (&a * &beta - &self.rhs).norm() / self.rhs.norm().max(1.0);
        Ok((beta, residual))
    }
}

/// Ordinary least squares.
pub fn fit_ols(problem: &RegressionProblem) -> Result<FitResult> {
    let mut fit = fit_aur(problem, 0.0)?;
    fit.method = Method::Ols;
    Ok(fit)
}

/// Ridge regression with penalty `λ ≥ 0`.
pub fn fit_aur(problem: &RegressionProblem, lambda: f64) -> Result<FitResult> {
    check_lambda(lambda)?;
    let normal = Normal::new(problem);
    let (beta, residual) = normal.solve(lambda)?;
    if residual > NORMAL_EQUATION_TOLERANCE {
        return Err(Error::NotConverged(format!(
            "normal-equation residual {residual:.3e} exceeds {NORMAL_EQUATION_TOLERANCE:.0e}"
        )));
    }
    Ok(FitResult {
        objective: problem.aur_objective(&beta, lambda),
        beta: beta.as_slice().to_vec(),
        optimality_residual: residual,
        lambda_used: lambda,
        method: Method::Aur,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )))
    }
}

/// Norm of the gradient of the WUR objective where it is differentiable.
/// Returns `None` at the kinks `β = 0` or `y = Xβ`.
fn wur_gradient_norm(problem: &RegressionProblem, beta: &DVector<f64>, lambda: f64) -> Option<f64> {
    let r = problem.residual(beta);
    let (rn, bn) = (r.norm(), beta.norm());
    if rn == 0.0 || bn == 0.0 {
        return None;
    }
    let g = -(problem.x.transpose() * &r) / rn + beta * (lambda / bn);
    Some(g.norm())
}

/// Worst-case robust regression `min ‖y − Xβ‖ + λ‖β‖`.
///
/// Any minimizer with `β ≠ 0` and `y ≠ Xβ` is a ridge solution
/// `β(t) = (XᵀX + tI)⁻¹Xᵀy` whose shift satisfies the fixed point
/// `t = λ‖y − Xβ(t)‖ / ‖β(t)‖`; the shift is found by bisection in `log t`.
/// The kinks `β = 0` and exact fit are handled by their subgradient
/// conditions.
pub fn fit_wur(problem: &RegressionProblem, lambda: f64) -> Result<FitResult> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        let ols = fit_ols(problem)?;
        let beta = ols.beta_vector();
        return Ok(FitResult {
            objective: problem.wur_objective(&beta, 0.0),
            optimality_residual: wur_gradient_norm(problem, &beta, 0.0)
                .unwrap_or(0.0)
                .min(ols.optimality_residual),
            beta: ols.beta,
            lambda_used: 0.0,
            method: Method::Wur,
        });
    }

    let normal = Normal::new(problem);
    let rhs_norm = normal.rhs.norm();
    let y_norm = problem.y.norm();
    let tolerance = WUR_TOLERANCE * (1.0 + rhs_norm);
    let k = problem.k();
    let zero = DVector::zeros(k);
    let zero_fit = |residual: f64| FitResult {
        beta: vec![0.0; k],
        objective: y_norm,
        optimality_residual: residual,
        lambda_used: lambda,
        method: Method::Wur,
    };

    // β = 0 is optimal iff Xᵀy/‖y‖ lies in the ball of radius λ.
    if y_norm == 0.0 || lambda * y_norm >= rhs_norm {
        return Ok(zero_fit(0.0));
    }

    let mut candidates: Vec<(DVector<f64>, f64)> = Vec::new();

    // Exact fit: the OLS point is optimal iff λβ/‖β‖ lies in the image of the
    // unit ball under Xᵀ, the ellipsoid {w : wᵀ(XᵀX)⁻¹w ≤ 1}.
    if let Ok((beta_ols, _)) = normal.solve(0.0) {
        let r_ols = problem.residual(&beta_ols).norm();
        if r_ols <= 1e-12 * y_norm.max(1.0) {
            let b2 = beta_ols.norm_squared();
            let chol = Cholesky::<f64, Dyn>::new(normal.gram.clone());
            if let Some(chol) = chol {
                let quad = beta_ols.dot(&chol.solve(&beta_ols));
                if lambda * lambda * quad <= b2 {
                    let objective = problem.wur_objective(&beta_ols, lambda);
                    return Ok(FitResult {
                        beta: beta_ols.as_slice().to_vec(),
                        objective,
                        optimality_residual: 0.0,
                        lambda_used: lambda,
                        method: Method::Wur,
                    });
                }
            }
        }
    }

    if let Some(beta) = wur_interior(problem, &normal, lambda)? {
        candidates.push((beta.clone(), problem.wur_objective(&beta, lambda)));
    }
    candidates.push((zero.clone(), y_norm));

    let (mut beta, _) = candidates
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least the zero candidate");

    let mut residual = wur_gradient_norm(problem, &beta, lambda).unwrap_or(f64::INFINITY);
    if residual > tolerance {
        beta = polish_wur(problem, beta, lambda);
        residual = wur_gradient_norm(problem, &beta, lambda).unwrap_or(f64::INFINITY);
    }
    if residual > tolerance {
        return Err(Error::NotConverged(format!(
            "WUR subgradient norm {residual:.3e} exceeds {tolerance:.3e}"
        )));
    }
    Ok(FitResult {
        objective: problem.wur_objective(&beta, lambda),
        beta: beta.as_slice().to_vec(),
        optimality_residual: residual,
        lambda_used: lambda,
        method: Method::Wur,
    })
}

/// Finds the interior fixed point, if the ridge path has one.
fn wur_interior(problem: &RegressionProblem, normal: &Normal, lambda: f64) -> Result<Option<DVector<f64>>> {
    let k = problem.k();
    let scale = (normal.gram.trace() / k as f64).max(f64::MIN_POSITIVE);
    let ridge = |t: f64| -> Option<DVector<f64>> {
        Cholesky::<f64, Dyn>::new(normal.shifted(t)).map(|c| {
            let mut b = c.solve(&normal.rhs);
            let r = &normal.rhs - normal.shifted(t) * &b;
            b += c.solve(&r);
            b
        })
    };
    // φ(t) = t‖β(t)‖ − λ‖y − Xβ(t)‖, negative below the fixed point.
    let phi = |t: f64| -> Option<(f64, DVector<f64>)> {
        let b = ridge(t)?;
        let value = t * b.norm() - lambda * problem.residual(&b).norm();
        Some((value, b))
    };

    let mut hi = scale;
    let mut grow = 0;
    loop {
        match phi(hi) {
            Some((v, _)) if v > 0.0 => break,
            _ => {
                hi *= 2.0;
                grow += 1;
                if grow > 2000 || !hi.is_finite() {
                    return Err(Error::NotConverged("could not bracket the WUR ridge shift".into()));
                }
            }
        }
    }
    let mut lo = scale * 1e-14;
    let mut shrink = 0;
    loop {
        match phi(lo) {
            Some((v, _)) if v < 0.0 => break,
            Some((0.0, b)) => return Ok(Some(b)),
            Some(_) => {
                lo *= 1e-4;
                shrink += 1;
                if shrink > 60 || lo == 0.0 {
                    // The fixed point sits at the origin of the ridge path.
                    return Ok(ridge(scale * 1e-300).or_else(|| ridge(f64::MIN_POSITIVE)));
                }
            }
            None => {
                lo = lo.max(f64::MIN_POSITIVE) * 10.0;
                if lo >= hi {
                    return Ok(None);
                }
            }
        }
    }
    for _ in 0..300 {
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) {
            break;
        }
        match phi(mid) {
            Some((0.0, b)) => return Ok(Some(b)),
            Some((v, _)) if v < 0.0 => lo = mid,
            _ => hi = mid,
        }
    }
    let best = [lo, hi].into_iter().filter_map(ridge).min_by(|a, b| {
        problem
            .wur_objective(a, lambda)
            .total_cmp(&problem.wur_objective(b, lambda))
    });
    Ok(best)
}

/// Gradient descent with backtracking, used when the fixed-point solve lands
/// short of the tolerance.
fn polish_wur(problem: &RegressionProblem, start: DVector<f64>, lambda: f64) -> DVector<f64> {
    let xt = problem.x.transpose();
    let mut beta = start;
    let mut value = problem.wur_objective(&beta, lambda);
    let mut step = 1.0;
    for _ in 0..10_000 {
        let r = problem.residual(&beta);
        let (rn, bn) = (r.norm(), beta.norm());
        if rn == 0.0 || bn == 0.0 {
            break;
        }
        let g = -(&xt * &r) / rn + &beta * (lambda / bn);
        if g.norm() == 0.0 {
            break;
        }
        let mut accepted = false;
        while step > 1e-18 {
            let candidate = &beta - &g * step;
            let cv = problem.wur_objective(&candidate, lambda);
            if cv < value {
                beta = candidate;
                value = cv;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    beta
}

/// Cross-validation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    #[serde(default = "CvSpec::default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "CvSpec::default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CvSpec {
    /// `0.00, 0.05, …, 1.00`.
    pub fn default_grid() -> Vec<f64> {
        (0..=20).map(|i| i as f64 / 20.0).collect()
    }

    fn default_folds() -> usize {
        5
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("CV grid must be nonempty".into()));
        }
        if self.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("CV grid values must be finite and nonnegative".into()));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("CV grid must be nondecreasing".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("CV needs at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            grid: Self::default_grid(),
            folds: Self::default_folds(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_mse: f64,
    pub std_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub lambda: f64,
    pub curve: Vec<CvPoint>,
}

/// Fits `method` with penalty `lambda`.
pub fn fit(problem: &RegressionProblem, method: Method, lambda: f64) -> Result<FitResult> {
    match method {
        Method::Ols => fit_ols(problem),
        Method::Aur => fit_aur(problem, lambda),
        Method::Wur => fit_wur(problem, lambda),
    }
}

/// Seeded fold assignment: a permutation cut into near-equal contiguous blocks.
pub fn fold_indices(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(seed));
    (0..folds)
        .map(|f| {
            let start = f * n / folds;
            let end = (f + 1) * n / folds;
            let mut fold = perm[start..end].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect()
}

/// k-fold cross-validation over `spec.grid`; ties go to the smaller λ.
///
/// Grid points are evaluated in parallel; folds are fixed before dispatch so
/// the result does not depend on scheduling.
pub fn select_lambda_cv(problem: &RegressionProblem, method: Method, spec: &CvSpec) -> Result<CvOutcome> {
    spec.validate()?;
    let n = problem.n();
    if n < spec.folds {
        return Err(Error::Config(format!("{} folds requested for {n} rows", spec.folds)));
    }
    let folds = fold_indices(n, spec.folds, spec.seed);
    let mut splits = Vec::with_capacity(folds.len());
    for (f, validation) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        if train.is_empty() || validation.is_empty() {
            return Err(Error::Config(format!(
                "fold {f} has an empty training or validation part"
            )));
        }
        let mut train = train;
        train.sort_unstable();
        splits.push((problem.select_rows(&train)?, problem.select_rows(validation)?));
    }

    let curve: Vec<CvPoint> = spec
        .grid
        .par_iter()
        .map(|&lambda| {
            let mses: Vec<f64> = splits
                .iter()
                .map(|(train, validation)| match fit(train, method, lambda) {
                    Ok(f) => validation.mse(&f.beta_vector()),
                    Err(_) => f64::INFINITY,
                })
                .collect();
            let stats: crate::stats::RunningStats = mses.iter().copied().collect();
            let finite = mses.iter().all(|v| v.is_finite());
            CvPoint {
                lambda,
                mean_mse: if finite { stats.mean() } else { f64::INFINITY },
                std_mse: if finite { stats.std_dev() } else { f64::INFINITY },
            }
        })
        .collect();

    let mut best: Option<&CvPoint> = None;
    for point in &curve {
        if point.mean_mse.is_finite() && best.is_none_or(|b| point.mean_mse < b.mean_mse) {
            best = Some(point);
        }
    }
    let lambda = best
        .ok_or_else(|| Error::Data("every CV grid point failed to fit".into()))?
        .lambda;
    Ok(CvOutcome { lambda, curve })
}
