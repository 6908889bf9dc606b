//! Surrogates of the form y(x, theta) = f(x) + theta^T g(x), fitted from
//! computer-experiment runs.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::PhysicalDataset;
use crate::kernels::DomainBounds;

/// Box for the calibration parameters. Unlike [`DomainBounds`] it may be
/// zero-dimensional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
                context: "theta upper bounds",
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Argument(format!(
                    "theta_{} bounds must satisfy lower < upper, got [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn empty() -> Self {
        Self {
            lower: Vec::new(),
            upper: Vec::new(),
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

    pub fn range(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] + self.lower[i])
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// Affine map onto `[-1, 1]^m`.
    pub fn to_internal(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.center(i)) / (0.5 * self.range(i)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ComputerDataset {
    pub x: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    /// N x q simulator outputs
    pub y: DMatrix<f64>,
    pub bounds: DomainBounds,
    pub theta_bounds: ParamBounds,
}

impl ComputerDataset {
    pub fn new(
        x: DMatrix<f64>,
        theta: DMatrix<f64>,
        y: DMatrix<f64>,
        bounds: DomainBounds,
        theta_bounds: ParamBounds,
    ) -> Result<Self> {
        let n = x.nrows();
        if theta.nrows() != n || y.nrows() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if theta.nrows() != n {
                    theta.nrows()
                } else {
                    y.nrows()
                },
                context: "computer dataset rows",
            });
        }
        if x.ncols() != bounds.dim() {
            return Err(Error::Dimension {
                expected: bounds.dim(),
                got: x.ncols(),
                context: "computer x columns",
            });
        }
        if theta.ncols() != theta_bounds.dim() {
            return Err(Error::Dimension {
                expected: theta_bounds.dim(),
                got: theta.ncols(),
                context: "computer theta columns",
            });
        }
        if y.ncols() == 0 {
            return Err(Error::Argument(
                "computer dataset needs at least one output".into(),
            ));
        }
        if x.iter()
            .chain(theta.iter())
            .chain(y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Argument(
                "computer dataset contains non-finite values".into(),
            ));
        }
        for i in 0..n {
            let t: Vec<f64> = theta.row(i).iter().copied().collect();
            if !theta_bounds.contains(&t) {
                return Err(Error::Argument(format!(
                    "computer run {} has theta outside theta bounds",
                    i + 1
                )));
            }
        }
        let mut rows: Vec<Vec<u64>> = (0..n)
            .map(|i| {
                x.row(i)
                    .iter()
                    .chain(theta.row(i).iter())
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        rows.sort();
        if rows.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument(
                "computer dataset has duplicate (x, theta) rows".into(),
            ));
        }
        Ok(Self {
            x,
            theta,
            y,
            bounds,
            theta_bounds,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.theta.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    ParametricLeastSquares,
    GpConditionalMean,
    SlopeModel,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub residual_rms: f64,
    pub max_abs_residual: f64,
}

/// Which polynomial terms in x enter f and g.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParametricBasis {
    /// All monomials up to the given total degree, with intercept.
    Polynomial { f_degree: usize, g_degree: usize },
    /// Linear through the origin: f(x) = b0 . x, g_i(x) = b_i . x.
    Slope,
}

impl Default for ParametricBasis {
    fn default() -> Self {
        ParametricBasis::Polynomial {
            f_degree: 2,
            g_degree: 1,
        }
    }
}

type Exponents = Vec<u32>;

fn monomials(d: usize, max_degree: usize, intercept: bool) -> Vec<Exponents> {
    fn rec(d: usize, k: usize, left: usize, cur: &mut Exponents, out: &mut Vec<Exponents>) {
        if k == d {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[k] = e as u32;
            rec(d, k + 1, left - e, cur, out);
        }
        cur[k] = 0;
    }
    let mut out = Vec::new();
    rec(d, 0, max_degree, &mut vec![0; d], &mut out);
    out.retain(|e| intercept || e.iter().any(|&p| p > 0));
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

fn monomial_name(e: &Exponents) -> String {
    let parts: Vec<String> = e
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(k, &p)| {
            if p == 1 {
                format!("x{}", k + 1)
            } else {
                format!("x{}^{}", k + 1, p)
            }
        })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

#[derive(Debug, Clone)]
struct InputScaling {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl InputScaling {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - self.shift[k]) / self.scale[k])
            .collect()
    }
}

fn eval_terms(terms: &[Exponents], u: &[f64]) -> Vec<f64> {
    terms
        .iter()
        .map(|e| e.iter().zip(u).map(|(&p, &v)| v.powi(p as i32)).product())
        .collect()
}

#[derive(Clone)]
enum Model {
    Poly {
        scaling: InputScaling,
        f_terms: Vec<Exponents>,
        g_terms: Vec<Exponents>,
        f_coef: DVector<f64>,
        /// g_terms x m
        g_coef: DMatrix<f64>,
    },
    Gp {
        train_x: Vec<Vec<f64>>,
        /// internal theta of each training run, N x m
        train_theta: DMatrix<f64>,
        alpha: DVector<f64>,
        params: GpHyperParams,
        bounds: DomainBounds,
    },
    Explicit {
        f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        g: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
    },
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Poly {
                f_terms, g_terms, ..
            } => f
                .debug_struct("Poly")
                .field("f_terms", &f_terms.len())
                .field("g_terms", &g_terms.len())
                .finish(),
            Model::Gp { params, .. } => f.debug_struct("Gp").field("params", params).finish(),
            Model::Explicit { .. } => f.write_str("Explicit"),
        }
    }
}

/// y(x, theta) = f(x) + theta^T g(x), reported in original theta units.
#[derive(Debug, Clone)]
pub struct LinearSurrogate {
    pub kind: SurrogateKind,
    pub diagnostics: FitDiagnostics,
    m: usize,
    /// internal theta = (theta - center) / half_range; empty for explicit models
    theta_center: Vec<f64>,
    theta_half_range: Vec<f64>,
    model: Model,
}

impl LinearSurrogate {
    /// Surrogate given directly by closures in original units.
    pub fn from_fns<F, G>(m: usize, f: F, g: G) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            kind: SurrogateKind::Explicit,
            diagnostics: FitDiagnostics {
                residual_rms: 0.0,
                max_abs_residual: 0.0,
            },
            m,
            theta_center: vec![0.0; m],
            theta_half_range: vec![1.0; m],
            model: Model::Explicit {
                f: Arc::new(f),
                g: Arc::new(g),
            },
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn internal(&self, x: &[f64]) -> (f64, DVector<f64>) {
        match &self.model {
            Model::Poly {
                scaling,
                f_terms,
                g_terms,
                f_coef,
                g_coef,
            } => {
                let u = scaling.apply(x);
                let fb = eval_terms(f_terms, &u);
                let gb = eval_terms(g_terms, &u);
                let f: f64 = fb.iter().zip(f_coef.iter()).map(|(a, b)| a * b).sum();
                let gb = DVector::from_vec(gb);
                let g = g_coef.tr_mul(&gb);
                (f, g)
            }
            Model::Gp {
                train_x,
                train_theta,
                alpha,
                params,
                bounds,
            } => {
                let u = bounds.standardize(x);
                let kv = DVector::from_iterator(
                    train_x.len(),
                    train_x.iter().map(|t| params.correlation(t, &u)),
                );
                let weighted = kv.component_mul(alpha);
                let f = params.kappa2 * weighted.sum();
                let g = DVector::from_iterator(
                    self.m,
                    (0..self.m).map(|l| params.kappa2_g[l] * train_theta.column(l).dot(&weighted)),
                );
                (f, g)
            }
            Model::Explicit { f, g } => (f(x), g(x)),
        }
    }

    /// (f(x), g(x)) in original theta units.
    pub fn f_and_g(&self, x: &[f64]) -> (f64, DVector<f64>) {
        let (fi, gi) = self.internal(x);
        if matches!(self.model, Model::Explicit { .. }) {
            return (fi, gi);
        }
        let mut f = fi;
        let mut g = gi;
        for k in 0..self.m {
            let gk = g[k] / self.theta_half_range[k];
            f -= self.theta_center[k] * gk;
            g[k] = gk;
        }
        (f, g)
    }

    pub fn f_hat(&self, x: &[f64]) -> f64 {
        self.f_and_g(x).0
    }

    pub fn g_hat(&self, x: &[f64]) -> DVector<f64> {
        self.f_and_g(x).1
    }

    pub fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (f, g) = self.f_and_g(x);
        f + g.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn theta_scaling(tb: &ParamBounds) -> (Vec<f64>, Vec<f64>) {
    let m = tb.dim();
    (
        (0..m).map(|i| tb.center(i)).collect(),
        (0..m).map(|i| 0.5 * tb.range(i)).collect(),
    )
}

fn check_output(data: &ComputerDataset, output: usize) -> Result<()> {
    if output >= data.q() {
        return Err(Error::Argument(format!(
            "output index {} out of range for {} outputs",
            output + 1,
            data.q()
        )));
    }
    Ok(())
}

struct PolyDesign {
    a: DMatrix<f64>,
    names: Vec<String>,
    f_terms: Vec<Exponents>,
    g_terms: Vec<Exponents>,
    scaling: InputScaling,
    kind: SurrogateKind,
    center: Vec<f64>,
    half: Vec<f64>,
}

fn poly_design(data: &ComputerDataset, basis: ParametricBasis) -> Result<PolyDesign> {
    let (d, m, n) = (data.d(), data.m(), data.n());
    let (f_terms, g_terms, scaling, kind) = match basis {
        ParametricBasis::Polynomial { f_degree, g_degree } => (
            monomials(d, f_degree, true),
            monomials(d, g_degree, true),
            InputScaling {
                shift: data.bounds.lower().to_vec(),
                scale: (0..d).map(|k| data.bounds.range(k)).collect(),
            },
            SurrogateKind::ParametricLeastSquares,
        ),
        ParametricBasis::Slope => (
            monomials(d, 1, false),
            monomials(d, 1, false),
            InputScaling {
                shift: vec![0.0; d],
                scale: (0..d)
                    .map(|k| {
                        data.bounds.lower()[k]
                            .abs()
                            .max(data.bounds.upper()[k].abs())
                    })
                    .collect(),
            },
            SurrogateKind::SlopeModel,
        ),
    };
    let (center, half) = theta_scaling(&data.theta_bounds);
    let p = f_terms.len() + m * g_terms.len();
    if n < p {
        return Err(Error::InsufficientData { needed: p, got: n });
    }

    let mut names: Vec<String> = f_terms
        .iter()
        .map(|e| format!("f:{}", monomial_name(e)))
        .collect();
    for l in 0..m {
        names.extend(
            g_terms
                .iter()
                .map(|e| format!("g{}:{}", l + 1, monomial_name(e))),
        );
    }

    let mut a = DMatrix::zeros(n, p);
    for i in 0..n {
        let x: Vec<f64> = data.x.row(i).iter().copied().collect();
        let u = scaling.apply(&x);
        let fb = eval_terms(&f_terms, &u);
        let gb = eval_terms(&g_terms, &u);
        for (j, v) in fb.iter().enumerate() {
            a[(i, j)] = *v;
        }
        for l in 0..m {
            let t = (data.theta[(i, l)] - center[l]) / half[l];
            for (j, v) in gb.iter().enumerate() {
                a[(i, f_terms.len() + l * g_terms.len() + j)] = t * v;
            }
        }
    }
    Ok(PolyDesign {
        a,
        names,
        f_terms,
        g_terms,
        scaling,
        kind,
        center,
        half,
    })
}

impl PolyDesign {
    fn columns(&self, active: &[bool]) -> Vec<usize> {
        let (nf, ng) = (self.f_terms.len(), self.g_terms.len());
        let mut cols: Vec<usize> = (0..nf).collect();
        for (l, &on) in active.iter().enumerate() {
            if on {
                cols.extend((0..ng).map(|j| nf + l * ng + j));
            }
        }
        cols
    }

    /// Coefficients with the blocks of inactive parameters fixed at zero.
    fn solve(&self, y: &DVector<f64>, active: &[bool]) -> Result<(DVector<f64>, f64)> {
        let cols = self.columns(active);
        let sub = self.a.select_columns(&cols);
        let names: Vec<String> = cols.iter().map(|&c| self.names[c].clone()).collect();
        let c = least_squares(&sub, y, &names)?;
        let rss = (y - &sub * &c).norm_squared();
        let mut full = DVector::zeros(self.a.ncols());
        for (k, &j) in cols.iter().enumerate() {
            full[j] = c[k];
        }
        Ok((full, rss))
    }

    fn into_surrogate(self, y: &DVector<f64>, coef: DVector<f64>, m: usize) -> LinearSurrogate {
        let n = y.len();
        let resid = y - &self.a * &coef;
        let diagnostics = FitDiagnostics {
            residual_rms: (resid.norm_squared() / n as f64).sqrt(),
            max_abs_residual: resid.amax(),
        };
        let (nf, ng) = (self.f_terms.len(), self.g_terms.len());
        let f_coef = coef.rows(0, nf).into_owned();
        let g_coef = DMatrix::from_fn(ng, m, |j, l| coef[nf + l * ng + j]);
        LinearSurrogate {
            kind: self.kind,
            diagnostics,
            m,
            theta_center: self.center,
            theta_half_range: self.half,
            model: Model::Poly {
                scaling: self.scaling,
                f_terms: self.f_terms,
                g_terms: self.g_terms,
                f_coef,
                g_coef,
            },
        }
    }
}

/// Ordinary least squares fit of polynomial f and g.
pub fn fit_parametric(
    data: &ComputerDataset,
    output: usize,
    basis: ParametricBasis,
) -> Result<LinearSurrogate> {
    check_output(data, output)?;
    let design = poly_design(data, basis)?;
    let y = data.y.column(output).into_owned();
    let (coef, _) = design.solve(&y, &vec![true; data.m()])?;
    Ok(design.into_surrogate(&y, coef, data.m()))
}

/// Least squares fit in which the g-block of a parameter is dropped (its
/// g fixed at zero) when removing the block lowers the BIC of the fit,
/// N ln(RSS/N) + p ln N. Parameters that do not affect the simulator
/// otherwise pick up small spurious slopes from basis misfit. Returns the
/// surrogate and the dropped parameters (0-based).
pub fn fit_parametric_screened(
    data: &ComputerDataset,
    output: usize,
    basis: ParametricBasis,
) -> Result<(LinearSurrogate, Vec<usize>)> {
    check_output(data, output)?;
    let m = data.m();
    let design = poly_design(data, basis)?;
    let y = data.y.column(output).into_owned();
    let n = data.n() as f64;
    let all = vec![true; m];
    let (full_coef, rss_full) = design.solve(&y, &all)?;
    let p_full = design.columns(&all).len() as f64;
    let ng = design.g_terms.len() as f64;
    let floor = 1e-300_f64.max(1e-28 * y.norm_squared());
    let bic = |rss: f64, p: f64| n * (rss.max(floor) / n).ln() + p * n.ln();
    let bic_full = bic(rss_full, p_full);
    let mut dropped = Vec::new();
    for l in 0..m {
        let mut active = all.clone();
        active[l] = false;
        let (_, rss) = design.solve(&y, &active)?;
        if bic(rss, p_full - ng) < bic_full {
            dropped.push(l);
        }
    }
    if dropped.is_empty() {
        return Ok((design.into_surrogate(&y, full_coef, m), dropped));
    }
    let active: Vec<bool> = (0..m).map(|l| !dropped.contains(&l)).collect();
    let (coef, _) = design.solve(&y, &active)?;
    Ok((design.into_surrogate(&y, coef, m), dropped))
}

/// Fit one surrogate per output column, concurrently.
pub fn fit_parametric_all(
    data: &ComputerDataset,
    basis: ParametricBasis,
) -> Result<Vec<LinearSurrogate>> {
    (0..data.q())
        .into_par_iter()
        .map(|j| fit_parametric(data, j, basis))
        .collect()
}

/// Least squares with column equilibration; rank deficiency is reported
/// with the names of the columns spanning the null space.
fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let p = a.ncols();
    let norms: Vec<f64> = (0..p).map(|j| a.column(j).norm()).collect();
    let zero_cols: Vec<String> = (0..p)
        .filter(|&j| norms[j] == 0.0)
        .map(|j| names[j].clone())
        .collect();
    if !zero_cols.is_empty() {
        return Err(Error::RankDeficient { columns: zero_cols });
    }
    let scaled = DMatrix::from_fn(a.nrows(), p, |i, j| a[(i, j)] / norms[j]);
    let svd = SVD::new(scaled, true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax;
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let mut dependent = Vec::new();
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            for j in 0..p {
                if v_t[(idx, j)].abs() > 0.1 && !dependent.contains(&j) {
                    dependent.push(j);
                }
            }
        }
    }
    if !dependent.is_empty() {
        dependent.sort_unstable();
        return Err(Error::RankDeficient {
            columns: dependent.into_iter().map(|j| names[j].clone()).collect(),
        });
    }
    let z = svd
        .solve(y, tol)
        .map_err(|e| Error::Argument(e.to_string()))?;
    Ok(DVector::from_iterator(p, (0..p).map(|j| z[j] / norms[j])))
}

/// Hyperparameters of the partially linear GP surrogate. The correlation
/// functions K, K_1..K_m share one Gaussian correlation with a scale per
/// input dimension, acting on standardized x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub kappa2: f64,
    pub kappa2_g: Vec<f64>,
    pub tau2: f64,
    pub scales: Vec<f64>,
}

impl GpHyperParams {
    fn validate(&self, d: usize, m: usize) -> Result<()> {
        if self.kappa2_g.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: self.kappa2_g.len(),
                context: "kappa2_g",
            });
        }
        if self.scales.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: self.scales.len(),
                context: "correlation scales",
            });
        }
        let all_pos = self.kappa2 > 0.0
            && self.tau2 > 0.0
            && self.kappa2_g.iter().chain(&self.scales).all(|v| *v > 0.0);
        if !all_pos {
            return Err(Error::Argument(
                "GP variances and scales must be positive".into(),
            ));
        }
        Ok(())
    }

    fn correlation(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .zip(&self.scales)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        (-s).exp()
    }
}

fn gp_covariance(params: &GpHyperParams, xs: &[Vec<f64>], t: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xs.len();
    let m = t.ncols();
    DMatrix::from_fn(n, n, |i, j| {
        let k = params.correlation(&xs[i], &xs[j]);
        let mut v = params.kappa2;
        for l in 0..m {
            v += t[(i, l)] * t[(j, l)] * params.kappa2_g[l];
        }
        let nug = if i == j { params.tau2 } else { 0.0 };
        k * v + nug
    })
}

fn gp_inputs(data: &ComputerDataset) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let xs: Vec<Vec<f64>> = (0..data.n())
        .map(|i| {
            data.bounds
                .standardize(&data.x.row(i).iter().copied().collect::<Vec<_>>())
        })
        .collect();
    let (center, half) = theta_scaling(&data.theta_bounds);
    let t = DMatrix::from_fn(data.n(), data.m(), |i, l| {
        (data.theta[(i, l)] - center[l]) / half[l]
    });
    (xs, t)
}

/// Conditional means of F and G given the runs of one output column.
pub fn fit_gp(
    data: &ComputerDataset,
    output: usize,
    params: &GpHyperParams,
) -> Result<LinearSurrogate> {
    check_output(data, output)?;
    params.validate(data.d(), data.m())?;
    let (xs, t) = gp_inputs(data);
    let c = gp_covariance(params, &xs, &t);
    let chol = Cholesky::new(c).ok_or(Error::IllConditioned {
        context: "GP surrogate covariance",
        hint: "tau2",
    })?;
    let y = data.y.column(output).into_owned();
    let alpha = chol.solve(&y);
    let (center, half) = theta_scaling(&data.theta_bounds);
    let mut s = LinearSurrogate {
        kind: SurrogateKind::GpConditionalMean,
        diagnostics: FitDiagnostics {
            residual_rms: 0.0,
            max_abs_residual: 0.0,
        },
        m: data.m(),
        theta_center: center,
        theta_half_range: half,
        model: Model::Gp {
            train_x: xs,
            train_theta: t,
            alpha,
            params: params.clone(),
            bounds: data.bounds.clone(),
        },
    };
    let mut ss = 0.0;
    let mut mx: f64 = 0.0;
    for i in 0..data.n() {
        let x: Vec<f64> = data.x.row(i).iter().copied().collect();
        let th: Vec<f64> = data.theta.row(i).iter().copied().collect();
        let r = y[i] - s.predict(&x, &th);
        ss += r * r;
        mx = mx.max(r.abs());
    }
    s.diagnostics = FitDiagnostics {
        residual_rms: (ss / data.n() as f64).sqrt(),
        max_abs_residual: mx,
    };
    Ok(s)
}

fn gp_log_likelihood(
    params: &GpHyperParams,
    xs: &[Vec<f64>],
    t: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let c = gp_covariance(params, xs, t);
    match Cholesky::new(c) {
        Some(chol) => {
            let alpha = chol.solve(y);
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            -0.5 * y.dot(&alpha) - 0.5 * logdet
        }
        None => f64::NEG_INFINITY,
    }
}

/// Maximum-likelihood GP surrogate hyperparameters by cyclic golden-section
/// search over each log-parameter.
pub fn estimate_gp_hyperparams(data: &ComputerDataset, output: usize) -> Result<GpHyperParams> {
    check_output(data, output)?;
    let (d, m) = (data.d(), data.m());
    let (xs, t) = gp_inputs(data);
    let y = data.y.column(output).into_owned();
    let n = y.len() as f64;
    let second_moment = (y.norm_squared() / n).max(1e-12);
    let mut p = GpHyperParams {
        kappa2: second_moment,
        kappa2_g: vec![0.1 * second_moment; m],
        tau2: 1e-4 * second_moment,
        scales: vec![1.0; d],
    };
    let lo_var = (1e-8 * second_moment).ln();
    let hi_var = (1e3 * second_moment).ln();
    let n_params = 2 + m + d;
    let get = |p: &GpHyperParams, k: usize| -> f64 {
        match k {
            0 => p.kappa2.ln(),
            1 => p.tau2.ln(),
            k if k < 2 + m => p.kappa2_g[k - 2].ln(),
            k => p.scales[k - 2 - m].ln(),
        }
    };
    let set = |p: &mut GpHyperParams, k: usize, v: f64| match k {
        0 => p.kappa2 = v.exp(),
        1 => p.tau2 = v.exp(),
        k if k < 2 + m => p.kappa2_g[k - 2] = v.exp(),
        k => p.scales[k - 2 - m] = v.exp(),
    };
    for _sweep in 0..3 {
        for k in 0..n_params {
            let (lo, hi) = if k < 2 + m {
                (lo_var, hi_var)
            } else {
                ((1e-3f64).ln(), (1e3f64).ln())
            };
            let current = get(&p, k);
            let mut trial = p.clone();
            let best = golden_max(
                |v| {
                    set(&mut trial, k, v);
                    gp_log_likelihood(&trial, &xs, &t, &y)
                },
                lo,
                hi,
                40,
            );
            set(&mut trial, k, best);
            let new_ll = gp_log_likelihood(&trial, &xs, &t, &y);
            set(&mut trial, k, current);
            let old_ll = gp_log_likelihood(&trial, &xs, &t, &y);
            if new_ll > old_ll {
                set(&mut p, k, best);
            }
        }
    }
    if !gp_log_likelihood(&p, &xs, &t, &y).is_finite() {
        return Err(Error::IllConditioned {
            context: "GP hyperparameter search",
            hint: "tau2",
        });
    }
    Ok(p)
}

/// Golden-section search for a maximum of `f` on `[lo, hi]`.
pub(crate) fn golden_max<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    iters: usize,
) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..iters {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    if fa >= fb {
        a
    } else {
        b
    }
}

/// Kernel scale and nugget estimated from physical data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperParams {
    pub phi: f64,
    /// nugget relative to unit process variance
    pub eta2: f64,
    pub log_likelihood: f64,
    /// the likelihood surface carried no information about phi
    pub flat_likelihood: bool,
}

pub const ETA2_FLOOR: f64 = 1e-8;
const PHI_RANGE: (f64, f64) = (1e-2, 1e3);
const ETA2_CEIL: f64 = 10.0;

/// Profiled log-likelihood of a constant-mean GP with correlation
/// exp(-phi |u - u'|^2) + eta2 * I, the variance profiled out.
fn profiled_loglik(us: &[Vec<f64>], yc: &DVector<f64>, phi: f64, eta2: f64) -> f64 {
    let n = us.len();
    let a = DMatrix::from_fn(n, n, |i, j| {
        let k = crate::kernels::kernel_unchecked(&us[i], &us[j], phi);
        if i == j {
            k + eta2
        } else {
            k
        }
    });
    match Cholesky::new(a) {
        Some(chol) => {
            let z = chol
                .l_dirty()
                .solve_lower_triangular(yc)
                .expect("triangular");
            let quad = z.norm_squared();
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            -0.5 * n as f64 * (quad / n as f64).ln() - 0.5 * logdet
        }
        None => f64::NEG_INFINITY,
    }
}

/// Maximum-likelihood (phi, eta2) for the projected-kernel loss, fitted to
/// one output of the physical observations.
pub fn estimate_hyperparams(
    physical: &PhysicalDataset,
    output: usize,
) -> Result<KernelHyperParams> {
    let n = physical.n();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    if output >= physical.q() {
        return Err(Error::Argument(format!(
            "output index {} out of range",
            output + 1
        )));
    }
    let us: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            physical
                .bounds
                .standardize(&physical.x.row(i).iter().copied().collect::<Vec<_>>())
        })
        .collect();
    let y = physical.y.column(output);
    let mean = y.mean();
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let scale2 = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if yc.norm_squared() <= 1e-24 * scale2.max(f64::MIN_POSITIVE) * n as f64 {
        return Ok(KernelHyperParams {
            phi: 1.0,
            eta2: ETA2_FLOOR,
            log_likelihood: f64::INFINITY,
            flat_likelihood: true,
        });
    }

    let grid = |lo: f64, hi: f64, k: usize| -> Vec<f64> {
        (0..k)
            .map(|i| lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64)
            .collect()
    };
    let lphis = grid(PHI_RANGE.0, PHI_RANGE.1, 26);
    let letas = grid(ETA2_FLOOR, ETA2_CEIL, 28);
    let cells: Vec<(usize, usize)> = (0..lphis.len())
        .flat_map(|i| (0..letas.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| profiled_loglik(&us, &yc, lphis[i].exp(), letas[j].exp()))
        .collect();
    let (best_idx, best_val) =
        values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
            );
    if !best_val.is_finite() {
        return Err(Error::IllConditioned {
            context: "physical GP likelihood",
            hint: "eta2",
        });
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let worst = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = (best_val - worst).abs() < 1e-6 * (1.0 + best_val.abs());

    let (bi, bj) = cells[best_idx];
    let step_phi = lphis[1] - lphis[0];
    let step_eta = letas[1] - letas[0];
    let mut lphi = lphis[bi];
    let mut leta = letas[bj];
    let (phi_lo, phi_hi) = (PHI_RANGE.0.ln(), PHI_RANGE.1.ln());
    let (eta_lo, eta_hi) = (ETA2_FLOOR.ln(), ETA2_CEIL.ln());
    for _ in 0..3 {
        let cand = golden_max(
            |v| profiled_loglik(&us, &yc, v.exp(), leta.exp()),
            (lphi - step_phi).max(phi_lo),
            (lphi + step_phi).min(phi_hi),
            40,
        );
        if profiled_loglik(&us, &yc, cand.exp(), leta.exp())
            >= profiled_loglik(&us, &yc, lphi.exp(), leta.exp())
        {
            lphi = cand;
        }
        let cand = golden_max(
            |v| profiled_loglik(&us, &yc, lphi.exp(), v.exp()),
            (leta - step_eta).max(eta_lo),
            (leta + step_eta).min(eta_hi),
            40,
        );
        if profiled_loglik(&us, &yc, lphi.exp(), cand.exp())
            >= profiled_loglik(&us, &yc, lphi.exp(), leta.exp())
        {
            leta = cand;
        }
    }
    Ok(KernelHyperParams {
        phi: lphi.exp(),
        eta2: leta.exp().max(ETA2_FLOOR),
        log_likelihood: profiled_loglik(&us, &yc, lphi.exp(), leta.exp()),
        flat_likelihood: flat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset_from<F: Fn(&[f64], &[f64]) -> f64>(
        n: usize,
        d: usize,
        m: usize,
        tb: ParamBounds,
        seed: u64,
        f: F,
    ) -> ComputerDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let theta = DMatrix::from_fn(n, m, |_, l| {
            tb.lower()[l] + tb.range(l) * rng.random::<f64>()
        });
        let y = DMatrix::from_fn(n, 1, |i, _| {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let ti: Vec<f64> = theta.row(i).iter().copied().collect();
            f(&xi, &ti)
        });
        ComputerDataset::new(x, theta, y, DomainBounds::unit(d), tb).unwrap()
    }

    #[test]
    fn exact_linear_model_is_recovered() {
        let tb = ParamBounds::new(vec![-1.0], vec![3.0]).unwrap();
        let data = dataset_from(30, 1, 1, tb, 1, |x, t| 2.0 + t[0] * x[0]);
        let s = fit_parametric(&data, 0, ParametricBasis::default()).unwrap();
        for &x in &[0.0, 0.3, 0.9] {
            assert_relative_eq!(s.f_hat(&[x]), 2.0, epsilon = 1e-10);
            assert_relative_eq!(s.g_hat(&[x])[0], x, epsilon = 1e-10);
        }
        assert!(s.diagnostics.residual_rms < 1e-10);
    }

    #[test]
    fn screening_drops_absent_parameters_only() {
        // theta_2 has no effect; the x^3 term is outside the basis
        let tb = ParamBounds::new(vec![-1.0, -1.0, 0.0], vec![1.0, 1.0, 2.0]).unwrap();
        let data = dataset_from(200, 1, 3, tb, 11, |x, t| {
            x[0].powi(3) + t[0] * (x[0] + 0.5) + t[2] * x[0] * x[0]
        });
        let full = fit_parametric(&data, 0, ParametricBasis::default()).unwrap();
        assert!(full.g_hat(&[0.5])[1] != 0.0);
        let (s, dropped) = fit_parametric_screened(&data, 0, ParametricBasis::default()).unwrap();
        assert_eq!(dropped, vec![1]);
        for &x in &[0.1, 0.5, 0.9] {
            assert_eq!(s.g_hat(&[x])[1], 0.0);
            assert_relative_eq!(s.g_hat(&[x])[0], x + 0.5, epsilon = 0.05);
        }
    }

    #[test]
    fn slope_model_passes_through_origin() {
        let tb = ParamBounds::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |_, _| 650.0 * rng.random::<f64>());
        let theta = DMatrix::from_fn(n, 2, |_, l| l as f64 + rng.random::<f64>());
        let y = DMatrix::from_fn(n, 1, |i, _| {
            x[(i, 0)] * (0.1 + 0.3 * theta[(i, 0)] - 0.2 * theta[(i, 1)])
                + 0.01 * rng.random::<f64>()
        });
        let data = ComputerDataset::new(
            x,
            theta,
            y,
            DomainBounds::new(vec![0.0], vec![650.0]).unwrap(),
            tb,
        )
        .unwrap();
        let s = fit_parametric(&data, 0, ParametricBasis::Slope).unwrap();
        assert_eq!(s.kind, SurrogateKind::SlopeModel);
        for t in [[0.1, 1.5], [0.9, 1.1], [0.0, 2.0]] {
            assert_eq!(s.predict(&[0.0], &t), 0.0);
        }
        assert_relative_eq!(s.g_hat(&[100.0])[0], 30.0, epsilon = 0.1);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        // theta_2 = theta_1 in every run
        let n = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let t1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let theta = DMatrix::from_fn(n, 2, |i, _| t1[i]);
        let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)] + t1[i]);
        let data = ComputerDataset::new(
            x,
            theta,
            y,
            DomainBounds::unit(1),
            ParamBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        match fit_parametric(
            &data,
            0,
            ParametricBasis::Polynomial {
                f_degree: 1,
                g_degree: 0,
            },
        ) {
            Err(Error::RankDeficient { columns }) => {
                assert_eq!(columns, vec!["g1:1".to_string(), "g2:1".to_string()])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_validation() {
        let tb = ParamBounds::new(vec![0.0], vec![1.0]).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.1, 0.1]);
        let th = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(
            ComputerDataset::new(x.clone(), th, y.clone(), DomainBounds::unit(1), tb.clone())
                .is_err()
        );
        let th = DMatrix::from_row_slice(2, 1, &[0.5, 1.5]);
        assert!(ComputerDataset::new(x, th, y, DomainBounds::unit(1), tb).is_err());
    }

    fn gp_params(m: usize, d: usize) -> GpHyperParams {
        GpHyperParams {
            kappa2: 1.0,
            kappa2_g: vec![0.5; m],
            tau2: 1e-6,
            scales: vec![2.0; d],
        }
    }

    #[test]
    fn gp_zero_data_gives_zero_functions() {
        let tb = ParamBounds::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let data = dataset_from(15, 2, 2, tb, 5, |_, _| 0.0);
        let s = fit_gp(&data, 0, &gp_params(2, 2)).unwrap();
        for x in [[0.2, 0.3], [0.9, 0.1]] {
            assert_eq!(s.f_hat(&x), 0.0);
            assert!(s.g_hat(&x).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn gp_interpolates_single_site_in_small_nugget_limit() {
        let data = ComputerDataset::new(
            DMatrix::from_row_slice(1, 1, &[0.4]),
            DMatrix::zeros(1, 0),
            DMatrix::from_row_slice(1, 1, &[3.25]),
            DomainBounds::unit(1),
            ParamBounds::empty(),
        )
        .unwrap();
        let mut p = gp_params(0, 1);
        p.tau2 = 1e-10;
        let s = fit_gp(&data, 0, &p).unwrap();
        assert_relative_eq!(s.f_hat(&[0.4]), 3.25, epsilon = 1e-6);
    }

    #[test]
    fn gp_surrogate_is_affine_in_theta() {
        let tb = ParamBounds::new(vec![-1.0, 2.0], vec![1.0, 5.0]).unwrap();
        let data = dataset_from(25, 2, 2, tb, 11, |x, t| {
            x[0].sin() + t[0] * x[1] + t[1] * t[1] * 0.1
        });
        let s = fit_gp(&data, 0, &gp_params(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let a = [rng.random::<f64>(), 2.0 + 3.0 * rng.random::<f64>()];
            let b = [rng.random::<f64>(), 2.0 + 3.0 * rng.random::<f64>()];
            let ab = [a[0] + b[0], a[1] + b[1]];
            let lhs = s.predict(&x, &a) + s.predict(&x, &b) - s.predict(&x, &ab);
            assert_relative_eq!(lhs, s.f_hat(&x), epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn hyperparams_need_three_points() {
        let p = PhysicalDataset::new(
            DMatrix::from_row_slice(2, 1, &[0.1, 0.2]),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DomainBounds::unit(1),
        )
        .unwrap();
        assert!(matches!(
            estimate_hyperparams(&p, 0),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn constant_observations_hit_floor_and_flag() {
        let p = PhysicalDataset::new(
            DMatrix::from_row_slice(5, 1, &[0.1, 0.3, 0.5, 0.7, 0.9]),
            DMatrix::from_element(5, 1, 4.2),
            DomainBounds::unit(1),
        )
        .unwrap();
        let h = estimate_hyperparams(&p, 0).unwrap();
        assert_eq!(h.eta2, ETA2_FLOOR);
        assert!(h.flat_likelihood);
    }

    #[test]
    fn output_scaling_leaves_phi_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y = DMatrix::from_fn(n, 1, |i, _| {
            (3.0 * x[(i, 0)]).sin() + x[(i, 1)] + 0.05 * rng.random::<f64>()
        });
        let a = PhysicalDataset::new(x.clone(), y.clone(), DomainBounds::unit(2)).unwrap();
        let b = PhysicalDataset::new(x, y * 2.0, DomainBounds::unit(2)).unwrap();
        let ha = estimate_hyperparams(&a, 0).unwrap();
        let hb = estimate_hyperparams(&b, 0).unwrap();
        assert_relative_eq!(ha.phi, hb.phi, max_relative = 1e-9);
        assert_relative_eq!(ha.eta2, hb.eta2, max_relative = 1e-9);
    }
}
