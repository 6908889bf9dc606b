//! Point estimators of the calibration parameters: ordinary least squares,
//! projected-kernel generalized least squares and the penalized orthogonal
//! (adaptive-lasso) estimator.
//!
//! With a surrogate that is affine in theta, every loss here is a quadratic
//! in theta. A [`CalibrationProblem`] whitens each output once through the
//! cached factorization of its projected kernel and keeps the resulting
//! normal matrices, so solves at different penalties never touch the n x n
//! system again.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    project_kernel, quadratic_form, DomainBounds, KernelConfig, ProjectedKernelMatrix,
};
use crate::qmc::sobol_points;
use crate::surrogate::{LinearSurrogate, ParamBounds};

/// Relative (to each theta range) distance below which a coordinate counts
/// as unadjusted.
pub const ZERO_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct PhysicalDataset {
    pub x: DMatrix<f64>,
    /// n x q observations
    pub y: DMatrix<f64>,
    pub bounds: DomainBounds,
    pub noise_variance_hint: Option<f64>,
}

impl PhysicalDataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, bounds: DomainBounds) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if y.nrows() != n {
            return Err(Error::Dimension {
                expected: n,
                got: y.nrows(),
                context: "physical observations",
            });
        }
        if x.ncols() != bounds.dim() {
            return Err(Error::Dimension {
                expected: bounds.dim(),
                got: x.ncols(),
                context: "physical x columns",
            });
        }
        if y.ncols() == 0 {
            return Err(Error::Argument(
                "physical dataset needs at least one output".into(),
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument(
                "physical dataset contains non-finite values".into(),
            ));
        }
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            if !bounds.contains(&xi) {
                return Err(Error::Argument(format!(
                    "physical design point {} lies outside the domain",
                    i + 1
                )));
            }
        }
        Ok(Self {
            x,
            y,
            bounds,
            noise_variance_hint: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }
}

/// Relative RMS below which a surrogate gradient component counts as absent.
pub const VANISHING_GRADIENT: f64 = 1e-8;

/// Eigenvalue ratio (of the scaled gradient second-moment matrix) below
/// which a direction counts as outside the span of the surrogate gradient.
pub const SPAN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SurrogateProjection {
    pub kernel: ProjectedKernelMatrix,
    /// parameters the surrogate does not depend on (0-based)
    pub unprojected: Vec<usize>,
    /// dimension of the span of the remaining gradient components
    pub rank: usize,
}

/// Projected kernel on the physical design for the gradient of `surrogate`.
///
/// Components whose RMS over the domain is negligible (parameters the
/// surrogate does not depend on) are left out, since they would make H
/// singular without constraining anything. The projection only depends on
/// the span of the gradient, so when the remaining components are linearly
/// dependent (a slope model in one control variable, say) an orthonormal
/// basis of that span is projected out instead.
pub fn project_surrogate(
    surrogate: &LinearSurrogate,
    physical: &PhysicalDataset,
    config: &KernelConfig,
) -> Result<SurrogateProjection> {
    let m = surrogate.m();
    let bounds = &physical.bounds;
    let probe = sobol_points(1024, bounds.dim(), config.seed ^ 0x5DEE_CE66)?;
    let grads: Vec<DVector<f64>> = (0..probe.nrows())
        .map(|k| {
            let u: Vec<f64> = probe.row(k).iter().copied().collect();
            surrogate.g_hat(&bounds.unstandardize(&u))
        })
        .collect();
    let count = grads.len() as f64;
    let rms: Vec<f64> = (0..m)
        .map(|i| (grads.iter().map(|g| g[i] * g[i]).sum::<f64>() / count).sqrt())
        .collect();
    let top = rms.iter().cloned().fold(0.0, f64::max);
    let (keep, unprojected): (Vec<usize>, Vec<usize>) =
        (0..m).partition(|&i| top > 0.0 && rms[i] > VANISHING_GRADIENT * top);

    let k = keep.len();
    let mut second = DMatrix::zeros(k, k);
    for g in &grads {
        let gk = DVector::from_iterator(k, keep.iter().map(|&i| g[i] / rms[i]));
        second += &gk * gk.transpose();
    }
    second /= count;
    let eig = SymmetricEigen::new(second);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let span: Vec<usize> = (0..k)
        .filter(|&a| eig.eigenvalues[a] > SPAN_TOLERANCE * lmax)
        .collect();
    let rank = span.len();

    let keep_ref = &keep;
    let pk = if rank == k {
        project_kernel(
            |x: &[f64]| {
                let g = surrogate.g_hat(x);
                DVector::from_iterator(k, keep_ref.iter().map(|&i| g[i]))
            },
            k,
            &physical.x,
            bounds,
            config,
        )
        .map_err(|e| match e {
            Error::SingularProjection {
                condition,
                components,
            } => Error::SingularProjection {
                condition,
                components: components.iter().map(|&c| keep[c]).collect(),
            },
            other => other,
        })?
    } else {
        // rows of `basis` map a gradient to coordinates in its span
        let basis = DMatrix::from_fn(rank, k, |r, c| {
            eig.eigenvectors[(c, span[r])] / rms[keep[c]]
        });
        project_kernel(
            |x: &[f64]| {
                let g = surrogate.g_hat(x);
                &basis * DVector::from_iterator(k, keep_ref.iter().map(|&i| g[i]))
            },
            rank,
            &physical.x,
            bounds,
            config,
        )?
    };
    Ok(SurrogateProjection {
        kernel: pk,
        unprojected,
        rank,
    })
}

/// w_j = exp(-a (q - j)^2), j = 1..q
pub fn exponential_output_weights(a: f64, q: usize) -> Vec<f64> {
    (1..=q)
        .map(|j| (-a * ((q - j) as f64).powi(2)).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Adaptive,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorKind {
    Ols,
    Pk,
    Po { lambda: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub theta_hat: Vec<f64>,
    pub empirical_loss: f64,
    pub support: Vec<usize>,
    pub estimator: EstimatorKind,
    pub solver_iterations: usize,
    pub converged: bool,
    /// coordinates clipped to (or stopped at) a theta bound
    pub at_bound: Vec<usize>,
    pub warnings: Vec<String>,
    /// penalized objective after each sweep, when requested
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub objective_trace: Vec<f64>,
}

/// Per-output data whitened by the projected kernel: the loss of output j
/// is |b_j - G_j theta|^2 with b = L^{-1}(Y - F) and G = L^{-1} G_raw.
#[derive(Debug, Clone)]
struct WhitenedOutput {
    raw_residual: DVector<f64>,
    raw_gradient: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub physical: PhysicalDataset,
    pub surrogates: Vec<LinearSurrogate>,
    pub kernels: Vec<ProjectedKernelMatrix>,
    pub theta0: Vec<f64>,
    pub theta_bounds: ParamBounds,
    pub penalty_weights: Vec<f64>,
    pub weight_source: WeightSource,
    pub output_weights: Vec<f64>,
    outputs: Vec<WhitenedOutput>,
    /// sum_j w_j G_j^T G_j
    normal: DMatrix<f64>,
    /// sum_j w_j G_j^T b_j
    rhs: DVector<f64>,
    /// sum_j w_j |b_j|^2
    constant: f64,
}

impl CalibrationProblem {
    /// Problem with one surrogate and projected kernel per output, unit
    /// output weights and adaptive penalty weights.
    pub fn new(
        physical: PhysicalDataset,
        surrogates: Vec<LinearSurrogate>,
        kernels: Vec<ProjectedKernelMatrix>,
        theta0: Vec<f64>,
        theta_bounds: ParamBounds,
    ) -> Result<Self> {
        let q = physical.q();
        let n = physical.n();
        let m = theta0.len();
        if surrogates.len() != q || kernels.len() != q {
            return Err(Error::Dimension {
                expected: q,
                got: if surrogates.len() != q {
                    surrogates.len()
                } else {
                    kernels.len()
                },
                context: "surrogates/kernels per output",
            });
        }
        if theta_bounds.dim() != m {
            return Err(Error::Dimension {
                expected: m,
                got: theta_bounds.dim(),
                context: "theta bounds",
            });
        }
        if !theta_bounds.contains(&theta0) {
            return Err(Error::Argument("theta0 lies outside theta bounds".into()));
        }
        let mut outputs = Vec::with_capacity(q);
        for j in 0..q {
            let s = &surrogates[j];
            if s.m() != m {
                return Err(Error::Dimension {
                    expected: m,
                    got: s.m(),
                    context: "surrogate parameter count",
                });
            }
            if kernels[j].n() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: kernels[j].n(),
                    context: "projected kernel size",
                });
            }
            let mut resid = DVector::zeros(n);
            let mut grad = DMatrix::zeros(n, m);
            for i in 0..n {
                let (f, g) = s.f_and_g(&physical.point(i));
                resid[i] = physical.y[(i, j)] - f;
                grad.set_row(i, &g.transpose());
            }
            let b = whiten(&kernels[j], &resid)?;
            let gw = whiten_matrix(&kernels[j], &grad)?;
            outputs.push(WhitenedOutput {
                raw_residual: resid,
                raw_gradient: grad,
                b,
                g: gw,
            });
        }
        let mut p = Self {
            physical,
            surrogates,
            kernels,
            theta0,
            theta_bounds,
            penalty_weights: vec![1.0; m],
            weight_source: WeightSource::User,
            output_weights: vec![1.0; q],
            outputs,
            normal: DMatrix::zeros(m, m),
            rhs: DVector::zeros(m),
            constant: 0.0,
        };
        p.assemble();
        p.penalty_weights = compute_adaptive_weights(&p)?;
        p.weight_source = WeightSource::Adaptive;
        Ok(p)
    }

    pub fn single(
        physical: PhysicalDataset,
        surrogate: LinearSurrogate,
        kernel: ProjectedKernelMatrix,
        theta0: Vec<f64>,
        theta_bounds: ParamBounds,
    ) -> Result<Self> {
        Self::new(
            physical,
            vec![surrogate],
            vec![kernel],
            theta0,
            theta_bounds,
        )
    }

    /// Replace the output weights; adaptive penalty weights are recomputed.
    pub fn with_output_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.physical.q() {
            return Err(Error::Dimension {
                expected: self.physical.q(),
                got: weights.len(),
                context: "output weights",
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Argument(
                "output weights must be finite and nonnegative".into(),
            ));
        }
        self.output_weights = weights;
        self.assemble();
        if self.weight_source == WeightSource::Adaptive {
            self.penalty_weights = compute_adaptive_weights(&self)?;
        }
        Ok(self)
    }

    /// Use fixed penalty weights (`f64::INFINITY` pins a coordinate).
    pub fn with_penalty_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.m() {
            return Err(Error::Dimension {
                expected: self.m(),
                got: weights.len(),
                context: "penalty weights",
            });
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Argument(
                "penalty weights must be nonnegative".into(),
            ));
        }
        self.penalty_weights = weights;
        self.weight_source = WeightSource::User;
        Ok(self)
    }

    fn assemble(&mut self) {
        let m = self.m();
        let mut normal = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        let mut constant = 0.0;
        for (o, &w) in self.outputs.iter().zip(&self.output_weights) {
            normal += o.g.tr_mul(&o.g) * w;
            rhs += o.g.tr_mul(&o.b) * w;
            constant += w * o.b.norm_squared();
        }
        self.normal = (&normal + normal.transpose()) * 0.5;
        self.rhs = rhs;
        self.constant = constant;
    }

    pub fn m(&self) -> usize {
        self.theta0.len()
    }

    pub fn n(&self) -> usize {
        self.physical.n()
    }

    /// sum_j w_j G_j^T (Phi_j + eta2 I)^{-1} G_j
    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.normal
    }

    /// sum_j w_j G_j^T (Phi_j + eta2 I)^{-1} (Y_j - F_j)
    pub fn normal_rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    /// Loss from the cached quadratic; equals [`empirical_model_loss`] up to rounding.
    pub fn quadratic_loss(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        (self.constant - 2.0 * self.rhs.dot(&t) + t.dot(&(&self.normal * &t))).max(0.0)
    }

    /// Gradient of the loss in theta.
    pub fn loss_gradient(&self, theta: &[f64]) -> DVector<f64> {
        let t = DVector::from_column_slice(theta);
        (&self.normal * t - &self.rhs) * 2.0
    }

    pub fn support_of(&self, theta: &[f64]) -> Vec<usize> {
        (0..self.m())
            .filter(|&i| {
                (theta[i] - self.theta0[i]).abs() > ZERO_THRESHOLD * self.theta_bounds.range(i)
            })
            .collect()
    }

    fn clip(&self, theta: &mut [f64]) -> Vec<usize> {
        let mut hit = Vec::new();
        for (i, t) in theta.iter_mut().enumerate() {
            let (lo, hi) = (self.theta_bounds.lower()[i], self.theta_bounds.upper()[i]);
            if *t < lo {
                *t = lo;
                hit.push(i);
            } else if *t > hi {
                *t = hi;
                hit.push(i);
            }
        }
        hit
    }

    fn finish(
        &self,
        mut theta: Vec<f64>,
        estimator: EstimatorKind,
        mut warnings: Vec<String>,
    ) -> Result<CalibrationResult> {
        let at_bound = self.clip(&mut theta);
        if !at_bound.is_empty() {
            warnings.push(format!(
                "estimate clipped to theta bounds in coordinates {:?}",
                at_bound.iter().map(|i| i + 1).collect::<Vec<_>>()
            ));
        }
        let empirical_loss = empirical_model_loss(self, &theta)?;
        Ok(CalibrationResult {
            support: self.support_of(&theta),
            theta_hat: theta,
            empirical_loss,
            estimator,
            solver_iterations: 0,
            converged: true,
            at_bound,
            warnings,
            objective_trace: Vec::new(),
        })
    }
}

fn whiten(pk: &ProjectedKernelMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    Ok(pk.whiten(&m)?.column(0).into_owned())
}

fn whiten_matrix(pk: &ProjectedKernelMatrix, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pk.whiten(v)
}

/// Least squares via SVD; rank deficiency yields the minimum-norm solution
/// plus a warning naming the null-space components.
fn min_norm_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    what: &str,
) -> Result<(DVector<f64>, Vec<String>)> {
    let m = a.ncols();
    if m == 0 {
        return Ok((DVector::zeros(0), Vec::new()));
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
    let mut warnings = Vec::new();
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let mut null_comps = Vec::new();
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            for j in 0..m {
                if v_t[(idx, j)].abs() > 0.1 && !null_comps.contains(&(j + 1)) {
                    null_comps.push(j + 1);
                }
            }
        }
    }
    if !null_comps.is_empty() {
        null_comps.sort_unstable();
        warnings.push(format!(
            "{what}: non-identifiable directions; pseudo-inverse used, null space involves theta components {null_comps:?}"
        ));
    } else if svd.singular_values.len() < m {
        warnings.push(format!(
            "{what}: fewer observations than parameters; pseudo-inverse used"
        ));
    }
    let x = svd
        .solve(b, tol)
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok((x, warnings))
}

/// argmin_theta sum_j w_j |Y_j - F_j - G_j theta|^2, clipped to the box.
pub fn solve_ols(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    stacked_solve(problem, false)
}

/// Generalized least squares under (Phi_g + eta2 I)^{-1}, clipped to the box.
pub fn solve_pk(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    stacked_solve(problem, true)
}

// Solves for the shift from theta0 so that directions the data cannot
// identify stay at the design values.
fn stacked_solve(problem: &CalibrationProblem, whitened: bool) -> Result<CalibrationResult> {
    let (n, m) = (problem.n(), problem.m());
    let q = problem.outputs.len();
    let theta0 = DVector::from_column_slice(&problem.theta0);
    let mut a = DMatrix::zeros(n * q, m);
    let mut b = DVector::zeros(n * q);
    for (j, (o, &w)) in problem
        .outputs
        .iter()
        .zip(&problem.output_weights)
        .enumerate()
    {
        let s = w.sqrt();
        let (g, r) = if whitened {
            (&o.g, &o.b)
        } else {
            (&o.raw_gradient, &o.raw_residual)
        };
        a.view_mut((j * n, 0), (n, m)).copy_from(&(g * s));
        b.rows_mut(j * n, n).copy_from(&((r - g * &theta0) * s));
    }
    let (kind, label) = if whitened {
        (EstimatorKind::Pk, "PK")
    } else {
        (EstimatorKind::Ols, "OLS")
    };
    let (u, warnings) = min_norm_solve(&a, &b, label)?;
    problem.finish((&theta0 + u).iter().copied().collect(), kind, warnings)
}

/// w_i = 1 / |theta_or_i - theta0_i| with theta_or the projected-kernel
/// estimate; differences below the zero threshold give +inf.
pub fn compute_adaptive_weights(problem: &CalibrationProblem) -> Result<Vec<f64>> {
    let or = solve_pk(problem)?;
    Ok(adaptive_weights_from(
        &or.theta_hat,
        &problem.theta0,
        &problem.theta_bounds,
    ))
}

pub fn adaptive_weights_from(theta_or: &[f64], theta0: &[f64], bounds: &ParamBounds) -> Vec<f64> {
    theta_or
        .iter()
        .zip(theta0)
        .enumerate()
        .map(|(i, (a, b))| {
            let diff = (a - b).abs();
            if diff <= ZERO_THRESHOLD * bounds.range(i) {
                f64::INFINITY
            } else {
                1.0 / diff
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_sweeps: usize,
    /// stop when every coordinate moves less than this fraction of its range
    pub tolerance: f64,
    pub warm_start: Option<Vec<f64>>,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 100_000,
            tolerance: 1e-10,
            warm_start: None,
            record_trace: false,
        }
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Penalized orthogonal calibration at penalty `lambda`.
pub fn solve_po(problem: &CalibrationProblem, lambda: f64) -> Result<CalibrationResult> {
    solve_po_with(problem, lambda, &SolverOptions::default())
}

/// Cyclic coordinate descent on u = theta - theta0 for
/// u^T Q u - 2 c^T u + lambda sum w_i |u_i| inside the box, where
/// Q and c are the cached normal matrix and shifted right-hand side.
pub fn solve_po_with(
    problem: &CalibrationProblem,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<CalibrationResult> {
    if !(lambda >= 0.0) || lambda.is_infinite() {
        return Err(Error::Argument(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let m = problem.m();
    let q = &problem.normal;
    let theta0 = DVector::from_column_slice(&problem.theta0);
    let c = &problem.rhs - q * &theta0;
    let w = &problem.penalty_weights;
    let lo: Vec<f64> = (0..m)
        .map(|i| problem.theta_bounds.lower()[i] - problem.theta0[i])
        .collect();
    let hi: Vec<f64> = (0..m)
        .map(|i| problem.theta_bounds.upper()[i] - problem.theta0[i])
        .collect();
    let range: Vec<f64> = (0..m).map(|i| problem.theta_bounds.range(i)).collect();
    let max_diag = q.diagonal().iter().cloned().fold(0.0_f64, f64::max);

    let mut u = DVector::zeros(m);
    if let Some(ws) = &opts.warm_start {
        if ws.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: ws.len(),
                context: "warm start",
            });
        }
        for i in 0..m {
            if w[i].is_finite() {
                u[i] = (ws[i] - problem.theta0[i]).clamp(lo[i], hi[i]);
            }
        }
    }
    // r = c - Q u
    let mut r = &c - q * &u;
    let objective = |u: &DVector<f64>| -> f64 {
        let quad = u.dot(&(q * u)) - 2.0 * c.dot(u);
        let pen: f64 = (0..m)
            .filter(|&i| w[i].is_finite())
            .map(|i| lambda * w[i] * u[i].abs())
            .sum();
        quad + pen
    };
    let mut trace = Vec::new();
    let mut prev_obj = objective(&u);
    if opts.record_trace {
        trace.push(prev_obj);
    }

    let mut sweeps = 0;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for i in 0..m {
            if !w[i].is_finite() {
                continue;
            }
            let qii = q[(i, i)];
            let z = r[i] + qii * u[i];
            let thresh = 0.5 * lambda * w[i];
            let new = if qii > 1e-14 * max_diag && qii > 0.0 {
                (soft_threshold(z, thresh) / qii).clamp(lo[i], hi[i])
            } else if z.abs() <= thresh || z == 0.0 {
                // flat coordinate, penalty dominates
                0.0
            } else if z > 0.0 {
                hi[i]
            } else {
                lo[i]
            };
            let delta = new - u[i];
            if delta != 0.0 {
                u[i] = new;
                for k in 0..m {
                    r[k] -= q[(k, i)] * delta;
                }
                max_step = max_step.max(delta.abs() / range[i]);
            }
        }
        let obj = objective(&u);
        debug_assert!(
            obj <= prev_obj + 1e-9 * (1.0 + prev_obj.abs()),
            "coordinate descent increased the objective: {prev_obj} -> {obj}"
        );
        prev_obj = obj;
        if opts.record_trace {
            trace.push(obj);
        }
        last_step = max_step;
        if max_step < opts.tolerance {
            // recompute the residual to shed accumulated rounding, then
            // require a clean KKT certificate before stopping
            r = &c - q * &u;
            let scale = q.amax() * u.amax() + c.amax();
            if kkt_violation_raw(q, &c, &u, lambda, w, &lo, &hi) <= (1e-8f64).max(1e-13 * scale) {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps,
            duality_gap: duality_gap(q, &c, &u, lambda, w),
            max_step: last_step,
        });
    }
    let theta: Vec<f64> = (0..m).map(|i| problem.theta0[i] + u[i]).collect();
    let at_bound: Vec<usize> = (0..m)
        .filter(|&i| u[i] != 0.0 && (u[i] == lo[i] || u[i] == hi[i]))
        .collect();
    let empirical_loss = empirical_model_loss(problem, &theta)?;
    Ok(CalibrationResult {
        support: problem.support_of(&theta),
        theta_hat: theta,
        empirical_loss,
        estimator: EstimatorKind::Po { lambda },
        solver_iterations: sweeps,
        converged,
        at_bound,
        warnings: Vec::new(),
        objective_trace: trace,
    })
}

fn kkt_violation_raw(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    u: &DVector<f64>,
    lambda: f64,
    w: &[f64],
    lo: &[f64],
    hi: &[f64],
) -> f64 {
    let grad = (q * u - c) * 2.0;
    let mut worst: f64 = 0.0;
    for i in 0..u.len() {
        if !w[i].is_finite() {
            continue;
        }
        let g = grad[i];
        let t = lambda * w[i];
        let v = if u[i] == 0.0 {
            (g.abs() - t).max(0.0)
        } else if u[i] == hi[i] {
            (g + t).max(0.0)
        } else if u[i] == lo[i] {
            (t - g).max(0.0)
        } else {
            (g + t * u[i].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Largest violation of the optimality conditions of the penalized problem
/// at `theta`: zero coordinates need |grad_i| <= lambda w_i, free nonzero
/// ones grad_i = -lambda w_i sign(u_i), and coordinates on a bound only the
/// one-sided version.
pub fn kkt_violation(problem: &CalibrationProblem, theta: &[f64], lambda: f64) -> f64 {
    let m = problem.m();
    let theta0 = DVector::from_column_slice(&problem.theta0);
    let c = &problem.rhs - &problem.normal * &theta0;
    let u = DVector::from_iterator(m, (0..m).map(|i| theta[i] - problem.theta0[i]));
    let lo: Vec<f64> = (0..m)
        .map(|i| problem.theta_bounds.lower()[i] - problem.theta0[i])
        .collect();
    let hi: Vec<f64> = (0..m)
        .map(|i| problem.theta_bounds.upper()[i] - problem.theta0[i])
        .collect();
    kkt_violation_raw(
        &problem.normal,
        &c,
        &u,
        lambda,
        &problem.penalty_weights,
        &lo,
        &hi,
    )
}

/// Duality gap of the box-free weighted lasso restricted to the unpinned
/// coordinates; a diagnostic only when box constraints are active.
fn duality_gap(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    u: &DVector<f64>,
    lambda: f64,
    w: &[f64],
) -> f64 {
    let free: Vec<usize> = (0..u.len()).filter(|&i| w[i].is_finite()).collect();
    let k = free.len();
    if k == 0 {
        return 0.0;
    }
    let qf = DMatrix::from_fn(k, k, |a, b| q[(free[a], free[b])]);
    let cf = DVector::from_iterator(k, free.iter().map(|&i| c[i]));
    let uf = DVector::from_iterator(k, free.iter().map(|&i| u[i]));
    let jitter = 1e-12 * qf.trace().max(f64::MIN_POSITIVE) / k as f64;
    let chol = match Cholesky::new(&qf + DMatrix::identity(k, k) * jitter) {
        Some(c) => c,
        None => return f64::NAN,
    };
    let l = chol.l();
    let b = match l.solve_lower_triangular(&cf) {
        Some(b) => b,
        None => return f64::NAN,
    };
    let rho = &b - l.transpose() * &uf;
    let corr = &l * &rho;
    let mut s: f64 = 1.0;
    for (a, &i) in free.iter().enumerate() {
        let g = 2.0 * corr[a].abs();
        if g > 0.0 {
            s = s.min(lambda * w[i] / g);
        }
    }
    let nu = &rho * s;
    let pen: f64 = free.iter().map(|&i| lambda * w[i] * u[i].abs()).sum();
    let primal = rho.norm_squared() + pen;
    let dual = 2.0 * nu.dot(&b) - nu.norm_squared();
    primal - dual
}

/// sum_j w_j (Y_j - Yhat_j(theta))^T (Phi_j + eta2 I)^{-1} (Y_j - Yhat_j(theta))
pub fn empirical_model_loss(problem: &CalibrationProblem, theta: &[f64]) -> Result<f64> {
    if theta.len() != problem.m() {
        return Err(Error::Dimension {
            expected: problem.m(),
            got: theta.len(),
            context: "theta",
        });
    }
    let t = DVector::from_column_slice(theta);
    let mut total = 0.0;
    for ((o, pk), &w) in problem
        .outputs
        .iter()
        .zip(&problem.kernels)
        .zip(&problem.output_weights)
    {
        let r = &o.raw_residual - &o.raw_gradient * &t;
        total += w * quadratic_form(pk, &r)?;
    }
    Ok(total)
}

/// Symmetric eigenvalues of the normal matrix, smallest first; used to flag
/// poorly identified problems in reports.
pub fn normal_spectrum(problem: &CalibrationProblem) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(problem.normal.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Problem with f = 0, g(x_i) = rows of `g`, identity-like kernel
    /// `kernel + eta2 I`, observations `y` at x_i = i / n.
    pub fn linear_problem(
        g: DMatrix<f64>,
        y: Vec<f64>,
        kernel: DMatrix<f64>,
        eta2: f64,
        theta0: Vec<f64>,
        bounds: ParamBounds,
    ) -> CalibrationProblem {
        let n = g.nrows();
        let m = g.ncols();
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n.max(1) as f64).collect();
        let x = DMatrix::from_column_slice(n, 1, &xs);
        let phys = PhysicalDataset::new(
            x,
            DMatrix::from_column_slice(n, 1, &y),
            DomainBounds::unit(1),
        )
        .unwrap();
        let rows: Vec<(f64, DVector<f64>)> =
            (0..n).map(|i| (xs[i], g.row(i).transpose())).collect();
        let lookup = move |x: &[f64]| -> DVector<f64> {
            rows.iter()
                .find(|(xi, _)| (xi - x[0]).abs() < 1e-12)
                .map(|(_, g)| g.clone())
                .unwrap_or_else(|| DVector::zeros(m))
        };
        let s = LinearSurrogate::from_fns(m, |_| 0.0, lookup);
        let pk = ProjectedKernelMatrix::from_matrix(kernel, eta2).unwrap();
        CalibrationProblem::single(phys, s, pk, theta0, bounds).unwrap()
    }
}
