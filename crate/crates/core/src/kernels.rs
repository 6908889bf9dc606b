//! Gaussian kernel and its projection onto the orthogonal complement of the
//! surrogate's parameter gradients.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmc;

/// Condition number above which H_g is declared singular.
pub const MAX_PROJECTION_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub phi: f64,
    pub eta2: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl KernelConfig {
    pub fn new(phi: f64, eta2: f64, mc_samples: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            phi,
            eta2,
            mc_samples,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Argument(format!(
                "phi must be positive, got {}",
                self.phi
            )));
        }
        if !(self.eta2 >= 0.0 && self.eta2.is_finite()) {
            return Err(Error::Argument(format!(
                "eta2 must be nonnegative, got {}",
                self.eta2
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Argument("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            phi: 1.0,
            eta2: 1e-3,
            mc_samples: 4096,
            seed: 0,
        }
    }
}

/// Axis-aligned box of the control variables, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::Argument("bounds need at least one dimension".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
                context: "upper bounds",
            });
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Argument(format!(
                    "bounds for dimension {} must satisfy lower < upper, got [{lo}, {hi}]",
                    k + 1
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn range(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }

    /// Map a point of the box onto `[0,1]^d`.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - self.lower[k]) / self.range(k))
            .collect()
    }

    pub fn unstandardize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, v)| self.lower[k] + v * self.range(k))
            .collect()
    }
}

/// exp(-phi * |xi - xj|^2)
pub fn gaussian_kernel(xi: &[f64], xj: &[f64], phi: f64) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::Dimension {
            expected: xi.len(),
            got: xj.len(),
            context: "kernel arguments",
        });
    }
    if !(phi > 0.0) {
        return Err(Error::Argument(format!("phi must be positive, got {phi}")));
    }
    Ok(kernel_unchecked(xi, xj, phi))
}

#[inline]
pub(crate) fn kernel_unchecked(xi: &[f64], xj: &[f64], phi: f64) -> f64 {
    let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-phi * d2).exp()
}

/// The projected kernel as a function: Phi(x, y) - h(x)^T H^{-1} h(y), with
/// h and H replaced by their quadrature estimates.
#[derive(Debug, Clone)]
pub struct ProjectedKernel {
    bounds: DomainBounds,
    phi: f64,
    /// quadrature nodes in standardized coordinates, row-major
    nodes: Vec<f64>,
    count: usize,
    /// gradient evaluated at each node (M x m)
    grad_at_nodes: DMatrix<f64>,
    h_matrix: DMatrix<f64>,
    h_inverse: DMatrix<f64>,
}

impl ProjectedKernel {
    pub fn build<G>(
        gradient: G,
        m: usize,
        bounds: &DomainBounds,
        config: &KernelConfig,
    ) -> Result<Self>
    where
        G: Fn(&[f64]) -> DVector<f64> + Sync,
    {
        config.validate()?;
        let d = bounds.dim();
        let nodes = if m == 0 {
            DMatrix::zeros(0, d)
        } else {
            qmc::sobol_points(config.mc_samples, d, config.seed)?
        };
        let count = nodes.nrows();
        let nodes: Vec<f64> = (0..count)
            .flat_map(|k| nodes.row(k).iter().copied().collect::<Vec<_>>())
            .collect();

        let rows: Vec<DVector<f64>> = (0..count)
            .into_par_iter()
            .map(|k| gradient(&bounds.unstandardize(&nodes[k * d..(k + 1) * d])))
            .collect();
        let mut grad_at_nodes = DMatrix::zeros(count, m);
        for (k, g) in rows.iter().enumerate() {
            if g.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    got: g.len(),
                    context: "gradient output",
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!(
                    "gradient is not finite at quadrature node {k}"
                )));
            }
            grad_at_nodes.set_row(k, &g.transpose());
        }

        // h at the nodes themselves: h(u_k) = (1/M) sum_l g(u_l) Phi(u_l, u_k)
        let phi = config.phi;
        let h_rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|k| {
                let uk = &nodes[k * d..(k + 1) * d];
                let mut acc = vec![0.0; m];
                for l in 0..count {
                    let w = kernel_unchecked(uk, &nodes[l * d..(l + 1) * d], phi);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += w * grad_at_nodes[(l, j)];
                    }
                }
                acc.iter().map(|a| a / count as f64).collect()
            })
            .collect();
        let mut h_matrix = DMatrix::zeros(m, m);
        for (k, hk) in h_rows.iter().enumerate() {
            for i in 0..m {
                for j in 0..m {
                    h_matrix[(i, j)] += grad_at_nodes[(k, i)] * hk[j];
                }
            }
        }
        if count > 0 {
            h_matrix /= count as f64;
        }
        let h_matrix = (&h_matrix + h_matrix.transpose()) * 0.5;
        let h_inverse = invert_projection(&h_matrix)?;

        Ok(Self {
            bounds: bounds.clone(),
            phi,
            nodes,
            count,
            grad_at_nodes,
            h_matrix,
            h_inverse,
        })
    }

    pub fn m(&self) -> usize {
        self.h_matrix.nrows()
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn bounds(&self) -> &DomainBounds {
        &self.bounds
    }

    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h_matrix
    }

    /// Unprojected kernel between two points given in original units.
    pub fn base(&self, x: &[f64], y: &[f64]) -> f64 {
        kernel_unchecked(
            &self.bounds.standardize(x),
            &self.bounds.standardize(y),
            self.phi,
        )
    }

    /// Quadrature estimate of h_g(x) for x in original units.
    pub fn h_at(&self, x: &[f64]) -> DVector<f64> {
        let u = self.bounds.standardize(x);
        self.h_at_standardized(&u)
    }

    fn h_at_standardized(&self, u: &[f64]) -> DVector<f64> {
        let m = self.m();
        let count = self.count;
        let d = u.len();
        let mut acc = DVector::zeros(m);
        if count == 0 {
            return acc;
        }
        for l in 0..count {
            let w = kernel_unchecked(u, &self.nodes[l * d..(l + 1) * d], self.phi);
            for j in 0..m {
                acc[j] += w * self.grad_at_nodes[(l, j)];
            }
        }
        acc / count as f64
    }

    /// Projected kernel value for two points in original units.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let hx = self.h_at(x);
        let hy = self.h_at(y);
        self.base(x, y) - (hx.transpose() * &self.h_inverse * hy)[(0, 0)]
    }
}

fn invert_projection(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = h.nrows();
    if m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let max_diag = h.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let zero_components: Vec<usize> = (0..m)
        .filter(|&k| !(h[(k, k)] > 1e-14 * max_diag.max(f64::MIN_POSITIVE)))
        .collect();
    if max_diag <= 0.0 || !zero_components.is_empty() {
        return Err(Error::SingularProjection {
            condition: f64::INFINITY,
            components: if max_diag <= 0.0 {
                (0..m).collect()
            } else {
                zero_components
            },
        });
    }
    // the span of g is what matters, so judge conditioning after unit-diagonal scaling
    let scale = DVector::from_iterator(m, (0..m).map(|k| 1.0 / h[(k, k)].sqrt()));
    let corr = DMatrix::from_fn(m, m, |i, j| h[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(corr.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    if condition > MAX_PROJECTION_CONDITION {
        let mut components = Vec::new();
        for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= lmax / MAX_PROJECTION_CONDITION {
                let v = eig.eigenvectors.column(idx);
                for k in 0..m {
                    if v[k].abs() > 0.1 && !components.contains(&k) {
                        components.push(k);
                    }
                }
            }
        }
        components.sort_unstable();
        return Err(Error::SingularProjection {
            condition,
            components,
        });
    }
    let chol = match Cholesky::new(corr.clone()) {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * corr.trace() / m as f64;
            let jittered = &corr + DMatrix::identity(m, m) * jitter;
            Cholesky::new(jittered).ok_or(Error::SingularProjection {
                condition,
                components: (0..m).collect(),
            })?
        }
    };
    let corr_inv = chol.inverse();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        corr_inv[(i, j)] * scale[i] * scale[j]
    }))
}

/// Projected kernel evaluated on a design, together with the factorization
/// of `matrix + eta2 * I` used by every downstream quadratic form.
#[derive(Debug, Clone)]
pub struct ProjectedKernelMatrix {
    pub matrix: DMatrix<f64>,
    pub h_at_design: DMatrix<f64>,
    pub h_matrix: DMatrix<f64>,
    pub eta2: f64,
    factor: Cholesky<f64, Dyn>,
    kernel: Option<ProjectedKernel>,
}

impl ProjectedKernelMatrix {
    /// Wrap an explicit symmetric matrix (no underlying kernel function).
    pub fn from_matrix(matrix: DMatrix<f64>, eta2: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Argument(
                "projected kernel matrix must be square".into(),
            ));
        }
        let n = matrix.nrows();
        let factor = regularized_factor(&matrix, eta2)?;
        Ok(Self {
            h_at_design: DMatrix::zeros(n, 0),
            h_matrix: DMatrix::zeros(0, 0),
            matrix,
            eta2,
            factor,
            kernel: None,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn kernel(&self) -> Option<&ProjectedKernel> {
        self.kernel.as_ref()
    }

    /// Solve (matrix + eta2 I) z = v.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// Solve for every column of `v`.
    pub fn solve_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(v)
    }

    /// L^{-1} v with L the lower Cholesky factor of matrix + eta2 I.
    pub fn whiten(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.factor
            .l_dirty()
            .solve_lower_triangular(v)
            .ok_or(Error::IllConditioned {
                context: "whitening",
                hint: "eta2",
            })
    }

    /// Smallest and largest eigenvalues of the (unregularized) matrix.
    pub fn eigen_range(&self) -> (f64, f64) {
        let e = SymmetricEigen::new(self.matrix.clone()).eigenvalues;
        (e.min(), e.max())
    }
}

fn regularized_factor(matrix: &DMatrix<f64>, eta2: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = matrix.nrows();
    let reg = matrix + DMatrix::identity(n, n) * eta2;
    Cholesky::new(reg).ok_or(if eta2 == 0.0 {
        Error::Regularization
    } else {
        Error::IllConditioned {
            context: "projected kernel plus nugget",
            hint: "eta2",
        }
    })
}

/// Build the projected kernel for gradient `gradient` (R^d -> R^m, original
/// units) and evaluate it on the rows of `design`.
pub fn project_kernel<G>(
    gradient: G,
    m: usize,
    design: &DMatrix<f64>,
    bounds: &DomainBounds,
    config: &KernelConfig,
) -> Result<ProjectedKernelMatrix>
where
    G: Fn(&[f64]) -> DVector<f64> + Sync,
{
    let n = design.nrows();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if design.ncols() != bounds.dim() {
        return Err(Error::Dimension {
            expected: bounds.dim(),
            got: design.ncols(),
            context: "design columns",
        });
    }
    let kernel = ProjectedKernel::build(gradient, m, bounds, config)?;

    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| design.row(i).iter().copied().collect())
        .collect();
    let std_points: Vec<Vec<f64>> = points.iter().map(|p| bounds.standardize(p)).collect();
    let h_rows: Vec<DVector<f64>> = std_points
        .par_iter()
        .map(|u| kernel.h_at_standardized(u))
        .collect();
    let mut h_at_design = DMatrix::zeros(n, m);
    for (i, h) in h_rows.iter().enumerate() {
        h_at_design.set_row(i, &h.transpose());
    }

    let correction = &h_at_design * &kernel.h_inverse * h_at_design.transpose();
    let mut matrix = DMatrix::from_fn(n, n, |i, j| {
        kernel_unchecked(&std_points[i], &std_points[j], config.phi)
    });
    matrix -= correction;
    // exact symmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    let factor = regularized_factor(&matrix, config.eta2)?;
    Ok(ProjectedKernelMatrix {
        matrix,
        h_at_design,
        h_matrix: kernel.h_matrix.clone(),
        eta2: config.eta2,
        factor,
        kernel: Some(kernel),
    })
}

/// r^T (Phi_g + eta2 I)^{-1} r
pub fn quadratic_form(pk: &ProjectedKernelMatrix, residual: &DVector<f64>) -> Result<f64> {
    if residual.len() != pk.n() {
        return Err(Error::Dimension {
            expected: pk.n(),
            got: residual.len(),
            context: "residual length",
        });
    }
    let z = pk
        .factor
        .l_dirty()
        .solve_lower_triangular(residual)
        .ok_or(Error::IllConditioned {
            context: "triangular solve",
            hint: "eta2",
        })?;
    Ok(z.norm_squared())
}
