//! Least-squares machinery: weighted linear regression with parameter
//! covariance, and a damped Gauss-Newton (Levenberg-Marquardt) solver with a
//! multi-start driver for the nonlinear models.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value floor below which a design is treated as rank deficient.
const RANK_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub params: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub dof: usize,
}

impl LinearFit {
    pub fn std_err(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }
}

/// Weighted linear least squares `y ~ X b`.
///
/// With `sigma` the weights are `1/sigma^2` and the covariance is the
/// unscaled `(X^T W X)^-1`. Without it, unit weights are used and the
/// covariance is scaled by the residual variance `chi2 / dof`.
pub fn weighted_linear_fit(design: &DMatrix<f64>, y: &[f64], sigma: Option<&[f64]>) -> Result<LinearFit> {
    let (n, k) = design.shape();
    if y.len() != n {
        return Err(Error::invalid(format!(
            "design has {n} rows but {} observations",
            y.len()
        )));
    }
    if n < k {
        return Err(Error::Degenerate(format!("{n} observations for {k} parameters")));
    }
    let w: Vec<f64> = match sigma {
        Some(s) => {
            if s.len() != n {
                return Err(Error::invalid("error column length does not match data"));
            }
            if let Some(bad) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::invalid(format!("uncertainties must be positive, got {bad}")));
            }
            s.iter().map(|v| 1.0 / v).collect()
        }
        None => vec![1.0; n],
    };
    let xw = DMatrix::from_fn(n, k, |i, j| design[(i, j)] * w[i]);
    let yw = DVector::from_iterator(n, y.iter().zip(&w).map(|(v, wi)| v * wi));

    let svd = xw.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|s| *s <= RANK_TOL * smax) || smax == 0.0 {
        return Err(Error::Degenerate("design matrix is rank deficient".into()));
    }
    let beta = svd.solve(&yw, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let resid = &yw - &xw * &beta;
    let chi2 = resid.norm_squared();
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let inv_s2 = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let mut covariance = v_t.transpose() * inv_s2 * v_t;
    let dof = n - k;
    if sigma.is_none() {
        let scale = if dof > 0 { chi2 / dof as f64 } else { 0.0 };
        covariance *= scale;
    }
    Ok(LinearFit {
        params: beta.iter().copied().collect(),
        covariance,
        chi2,
        dof,
    })
}

/// A nonlinear least-squares problem in weighted-residual form.
pub trait ResidualModel {
    fn n_params(&self) -> usize;

    /// Weighted residuals `(y_i - f_i(p)) / sigma_i`; `None` when `p` is
    /// outside the feasible region.
    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>>;

    /// Jacobian of the residuals. Defaults to central differences.
    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        numeric_jacobian(self, p)
    }
}

pub fn numeric_jacobian<M: ResidualModel + ?Sized>(model: &M, p: &[f64]) -> Option<DMatrix<f64>> {
    let r0 = model.residuals(p)?;
    let mut jac = DMatrix::zeros(r0.len(), p.len());
    let mut q = p.to_vec();
    for j in 0..p.len() {
        let h = 1e-6 * p[j].abs().max(1e-3);
        q[j] = p[j] + h;
        let plus = model.residuals(&q);
        q[j] = p[j] - h;
        let minus = model.residuals(&q);
        q[j] = p[j];
        let col = match (plus, minus) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - &r0) / h,
            (None, Some(b)) => (&r0 - b) / h,
            (None, None) => return None,
        };
        jac.set_column(j, &col);
    }
    Some(jac)
}

#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative chi-square decrease tolerance.
    pub ftol: f64,
    pub initial_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            xtol: 1e-12,
            ftol: 1e-15,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual Jacobian at the solution.
    pub jacobian: DMatrix<f64>,
    pub n_obs: usize,
}

impl LmResult {
    /// `(J^T J)^-1`, or `None` if the Jacobian is numerically rank deficient.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        covariance_from_jacobian(&self.jacobian)
    }

    pub fn dof(&self) -> usize {
        self.n_obs.saturating_sub(self.params.len())
    }
}

pub fn covariance_from_jacobian(jac: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if jac.nrows() < jac.ncols() {
        return None;
    }
    // column scaling keeps the conditioning test meaningful across units
    let scales: Vec<f64> = (0..jac.ncols()).map(|j| jac.column(j).norm()).collect();
    if scales.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return None;
    }
    let scaled = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| jac[(i, j)] / scales[j]);
    let svd = scaled.svd(false, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|s| *s <= 1e-10 * smax) {
        return None;
    }
    let v_t = svd.v_t.as_ref()?;
    let inv_s2 = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let cov_scaled = v_t.transpose() * inv_s2 * v_t;
    Some(DMatrix::from_fn(jac.ncols(), jac.ncols(), |i, j| {
        cov_scaled[(i, j)] / (scales[i] * scales[j])
    }))
}

/// Damped Gauss-Newton iteration from a single starting point.
pub fn levenberg_marquardt<M: ResidualModel + ?Sized>(model: &M, start: &[f64], cfg: &LmConfig) -> Option<LmResult> {
    let k = model.n_params();
    debug_assert_eq!(start.len(), k);
    let mut p = start.to_vec();
    let mut r = model.residuals(&p)?;
    let mut chi2 = r.norm_squared();
    let mut jac = model.jacobian(&p)?;
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        if chi2 == 0.0 {
            converged = true;
            break;
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &r;
        let diag: Vec<f64> = (0..k).map(|i| a[(i, i)].max(1e-300)).collect();

        let mut accepted = None;
        while lambda < 1e20 {
            let mut damped = a.clone();
            for i in 0..k {
                damped[(i, i)] += lambda * diag[i];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match model.residuals(&trial) {
                Some(rt) if rt.norm_squared().is_finite() && rt.norm_squared() < chi2 => {
                    accepted = Some((trial, rt, step));
                    lambda = (lambda / 10.0).max(1e-15);
                    break;
                }
                _ => lambda *= 10.0,
            }
        }

        let Some((trial, rt, step)) = accepted else {
            // no downhill step exists at working precision
            converged = true;
            break;
        };
        let new_chi2 = rt.norm_squared();
        let small_step = step
            .iter()
            .zip(&trial)
            .all(|(d, x)| d.abs() <= cfg.xtol * (x.abs() + cfg.xtol));
        let small_gain = chi2 - new_chi2 <= cfg.ftol * chi2;
        p = trial;
        r = rt;
        chi2 = new_chi2;
        jac = model.jacobian(&p)?;
        if small_step || small_gain {
            converged = true;
            break;
        }
    }

    Some(LmResult {
        params: p,
        chi2,
        iterations,
        converged,
        jacobian: jac,
        n_obs: r.len(),
    })
}

/// Runs the solver from every start and keeps the lowest chi-square among
/// converged runs.
pub fn multi_start<M: ResidualModel + ?Sized>(model: &M, starts: &[Vec<f64>], cfg: &LmConfig) -> Result<LmResult> {
    let mut best: Option<LmResult> = None;
    let mut best_any: Option<LmResult> = None;
    for s in starts {
        let Some(res) = levenberg_marquardt(model, s, cfg) else {
            continue;
        };
        if !res.chi2.is_finite() {
            continue;
        }
        let slot = if res.converged { &mut best } else { &mut best_any };
        if slot.as_ref().is_none_or(|b| res.chi2 < b.chi2) {
            *slot = Some(res);
        }
    }
    match (best, best_any) {
        (Some(b), _) => Ok(b),
        (None, Some(b)) => Err(Error::NonConvergence {
            starts: starts.len(),
            best_chi2: b.chi2,
            best_params: b.params,
            reason: "iteration limit reached from every start".into(),
        }),
        (None, None) => Err(Error::NonConvergence {
            starts: starts.len(),
            best_chi2: f64::INFINITY,
            best_params: Vec::new(),
            reason: "no start produced a feasible evaluation".into(),
        }),
    }
}
