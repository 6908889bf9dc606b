//! Synthetic calibration benchmark: a four-input true process, a
//! ten-parameter computer model in which three parameters have no effect,
//! integrated-error and relative-error metrics, an optimal-theta oracle and
//! a replicated study comparing the design values with the OLS, PK and PO
//! estimators.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::estimators::{
    project_surrogate, solve_ols, solve_pk, CalibrationProblem, PhysicalDataset, ZERO_THRESHOLD,
};
use crate::kernels::{DomainBounds, KernelConfig};
use crate::pipeline::write_atomic;
use crate::qmc::{maximin_lhs, sobol_points, stream_rng};
use crate::selection::{
    classify_variables, compute_path, surrogate_sobol, VariableLabel, DEFAULT_SOBOL_FLOOR,
};
use crate::surrogate::{
    estimate_gp_hyperparams, estimate_hyperparams, fit_gp, fit_parametric, fit_parametric_screened,
    ComputerDataset, LinearSurrogate, ParamBounds, ParametricBasis,
};

pub const DIM_X: usize = 4;
pub const DIM_THETA: usize = 10;
/// Parameters that enter the computer model (0-based).
pub const ACTIVE: [usize; 7] = [0, 1, 2, 3, 4, 5, 9];
pub const DESIGN_THETA0: [f64; DIM_THETA] = [0.0, 0.0, 1.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0];

/// sqrt(x1^2 + c) with c = (x2 + x3^2) x4, the common radical of both models.
#[inline]
fn radical(x: &[f64]) -> (f64, f64) {
    let c = (x[1] + x[2] * x[2]) * x[3];
    ((x[0] * x[0] + c).sqrt(), c)
}

/// zeta(x) = x1/2 [sqrt(1 + c/x1^2) - 1] + (x1 + 3 x4) exp(1 + sin x3).
///
/// The first term is evaluated as c / (2 (sqrt(x1^2 + c) + x1)), which is
/// exact algebra, avoids cancellation for small x1 and gives the x1 -> 0
/// limit sqrt(c)/2.
pub fn true_process(x: &[f64]) -> f64 {
    let (r, c) = radical(x);
    let first = if r + x[0] > 0.0 {
        c / (2.0 * (r + x[0]))
    } else {
        0.0
    };
    first + (x[0] + 3.0 * x[3]) * (1.0 + x[2].sin()).exp()
}

/// y^s(x, theta); theta_7..theta_9 do not enter.
pub fn computer_model(x: &[f64], theta: &[f64]) -> f64 {
    let (r, _) = radical(x);
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    0.5 * (1.0 + theta[0] * x1.sin()) * r
        + (x1 + theta[1] * x2 * x2 + 3.0 * theta[2] * x4) * x3.sin().exp()
        + theta[3] * x1
        + theta[4] * x2 * x2
        + theta[5] * x3 * x3
        + theta[9]
}

/// Integrated squared error over [0,1]^4 by scrambled Sobol quadrature.
/// The model is affine in theta, so the quadrature keeps the moments
/// E[r0^2], E[r0 b] and E[b b^T] of r0 = zeta - y^s(., 0) and the basis
/// b_i = y^s(., e_i) - y^s(., 0), and IE is a quadratic in theta.
#[derive(Debug, Clone)]
pub struct IeQuadrature {
    pub nodes: usize,
    pub seed: u64,
    r2: f64,
    rb: DVector<f64>,
    bb: DMatrix<f64>,
}

impl IeQuadrature {
    pub fn new(nodes: usize, seed: u64) -> Result<Self> {
        if nodes < 1 << 14 {
            return Err(Error::Argument(format!(
                "integrated error needs at least 2^14 nodes, got {nodes}"
            )));
        }
        let pts = sobol_points(nodes, DIM_X, seed)?;
        let chunk = 4096;
        let parts: Vec<(f64, DVector<f64>, DMatrix<f64>)> = (0..nodes.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut r2 = 0.0;
                let mut rb = DVector::zeros(DIM_THETA);
                let mut bb = DMatrix::zeros(DIM_THETA, DIM_THETA);
                let mut e = [0.0; DIM_THETA];
                for k in (c * chunk)..((c + 1) * chunk).min(nodes) {
                    let x: Vec<f64> = pts.row(k).iter().copied().collect();
                    let base = computer_model(&x, &e);
                    let r0 = true_process(&x) - base;
                    let mut b = DVector::zeros(DIM_THETA);
                    for i in 0..DIM_THETA {
                        e[i] = 1.0;
                        b[i] = computer_model(&x, &e) - base;
                        e[i] = 0.0;
                    }
                    r2 += r0 * r0;
                    rb += &b * r0;
                    bb += &b * b.transpose();
                }
                (r2, rb, bb)
            })
            .collect();
        let mut r2 = 0.0;
        let mut rb = DVector::zeros(DIM_THETA);
        let mut bb = DMatrix::zeros(DIM_THETA, DIM_THETA);
        for (a, b, c) in &parts {
            r2 += a;
            rb += b;
            bb += c;
        }
        let w = 1.0 / nodes as f64;
        Ok(Self {
            nodes,
            seed,
            r2: r2 * w,
            rb: rb * w,
            bb: bb * w,
        })
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        (self.r2 - 2.0 * self.rb.dot(&t) + t.dot(&(&self.bb * &t))).max(0.0)
    }

    pub fn gradient(&self, theta: &[f64]) -> DVector<f64> {
        let t = DVector::from_column_slice(theta);
        (&self.bb * t - &self.rb) * 2.0
    }
}

pub fn integrated_error(theta: &[f64], nodes: usize, seed: u64) -> Result<f64> {
    if theta.len() != DIM_THETA {
        return Err(Error::Dimension {
            expected: DIM_THETA,
            got: theta.len(),
            context: "benchmark theta",
        });
    }
    Ok(IeQuadrature::new(nodes, seed)?.eval(theta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaOracle {
    pub theta: Vec<f64>,
    /// false for parameters the model ignores (their optimum is undefined;
    /// `theta` holds the design value there)
    pub defined: Vec<bool>,
    pub ie: f64,
    /// (start, minimizer, IE) for every start
    pub minima: Vec<(Vec<f64>, Vec<f64>, f64)>,
    pub warnings: Vec<String>,
}

/// Minimize IE over the active parameters with BFGS from the design values
/// and five random starts; the best minimum is returned.
pub fn optimal_theta_oracle(ie: &IeQuadrature, seed: u64) -> ThetaOracle {
    let mut rng = stream_rng(seed, 0x0AC1E);
    let mut starts = vec![DESIGN_THETA0.to_vec()];
    for _ in 0..5 {
        let mut t = DESIGN_THETA0.to_vec();
        for &i in &ACTIVE {
            t[i] = if i == 9 {
                rng.random_range(-3.0..9.0)
            } else {
                rng.random_range(-3.0..3.0)
            };
        }
        starts.push(t);
    }
    let minima: Vec<(Vec<f64>, Vec<f64>, f64)> = starts
        .into_iter()
        .map(|s| {
            let t = bfgs_active(ie, &s);
            let v = ie.eval(&t);
            (s, t, v)
        })
        .collect();
    let best = minima
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .expect("at least one start");
    let worst = minima.iter().map(|m| m.2).fold(f64::NEG_INFINITY, f64::max);
    let mut warnings = Vec::new();
    if worst - best.2 > 1e-3 {
        warnings.push(format!(
            "multistart minima disagree by {:.3e} in IE; objective may be non-convex: {:?}",
            worst - best.2,
            minima.iter().map(|m| m.2).collect::<Vec<_>>()
        ));
    }
    let defined = (0..DIM_THETA).map(|i| ACTIVE.contains(&i)).collect();
    ThetaOracle {
        theta: best.1.clone(),
        defined,
        ie: best.2,
        minima: minima.clone(),
        warnings,
    }
}

fn bfgs_active(ie: &IeQuadrature, start: &[f64]) -> Vec<f64> {
    let k = ACTIVE.len();
    let embed = |z: &DVector<f64>| -> Vec<f64> {
        let mut t = start.to_vec();
        for (a, &i) in ACTIVE.iter().enumerate() {
            t[i] = z[a];
        }
        t
    };
    let grad = |z: &DVector<f64>| -> DVector<f64> {
        let g = ie.gradient(&embed(z));
        DVector::from_iterator(k, ACTIVE.iter().map(|&i| g[i]))
    };
    let mut z = DVector::from_iterator(k, ACTIVE.iter().map(|&i| start[i]));
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut f = ie.eval(&embed(&z));
    let mut g = grad(&z);
    for _ in 0..1000 {
        if g.norm() < 1e-12 * (1.0 + f) {
            break;
        }
        let p = -(&hinv * &g);
        let slope = g.dot(&p);
        let p = if slope < 0.0 { p } else { -g.clone() };
        let slope = g.dot(&p);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &z + &p * step;
            let fc = ie.eval(&embed(&cand));
            if fc <= f + 1e-4 * step * slope {
                let gc = grad(&cand);
                let s = &cand - &z;
                let y = &gc - &g;
                let sy = s.dot(&y);
                if sy > 1e-300 {
                    let rho = 1.0 / sy;
                    let i = DMatrix::<f64>::identity(k, k);
                    let left = &i - &s * y.transpose() * rho;
                    let right = &i - &y * s.transpose() * rho;
                    hinv = &left * &hinv * &right + &s * s.transpose() * rho;
                }
                z = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    embed(&z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkSurrogate {
    Parametric,
    Gp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n: usize,
    pub noise_sd: f64,
    pub replicates: usize,
    pub theta0: Vec<f64>,
    pub seed: u64,
    pub ie_nodes: usize,
    pub design_runs: usize,
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
    pub surrogate: BenchmarkSurrogate,
    pub f_degree: usize,
    pub g_degree: usize,
    pub mc_samples: usize,
    /// penalties at which the mean |theta_hat - theta0| curves are reported
    pub report_grid: Vec<f64>,
    /// parameters expected to be adjusted (0-based)
    pub target_support: Vec<usize>,
    pub sobol_samples: usize,
    /// drop surrogate g-blocks that do not improve the fit's BIC
    pub screen_surrogate: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut report_grid = vec![0.0];
        report_grid.extend((-30..=30).map(|k| 10f64.powf(k as f64 / 10.0)));
        Self {
            n: 50,
            noise_sd: 0.1,
            replicates: 100,
            theta0: DESIGN_THETA0.to_vec(),
            seed: 0,
            ie_nodes: 1 << 16,
            design_runs: 400,
            theta_lower: vec![-3.0, -3.0, -3.0, -3.0, -3.0, -3.0, -3.0, -3.0, -3.0, -3.0],
            theta_upper: vec![3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 9.0],
            surrogate: BenchmarkSurrogate::Parametric,
            f_degree: 2,
            g_degree: 2,
            mc_samples: 4096,
            report_grid,
            target_support: vec![2, 3, 9],
            sobol_samples: 4096,
            screen_surrogate: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!(
                "n must be at least 10, got {}",
                self.n
            )));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.theta0.len() != DIM_THETA
            || self.theta_lower.len() != DIM_THETA
            || self.theta_upper.len() != DIM_THETA
        {
            return Err(Error::Config(format!(
                "theta0 and theta bounds need {DIM_THETA} entries"
            )));
        }
        let b = self.theta_box()?;
        if !b.contains(&self.theta0) {
            return Err(Error::Config("theta0 lies outside the theta box".into()));
        }
        if self.report_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config(
                "report grid values must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn theta_box(&self) -> Result<ParamBounds> {
        ParamBounds::new(self.theta_lower.clone(), self.theta_upper.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub phi: f64,
    pub eta2: f64,
    pub theta_ols: Vec<f64>,
    pub theta_pk: Vec<f64>,
    pub theta_po: Vec<f64>,
    pub selected_lambda: f64,
    pub support_po: Vec<usize>,
    pub ie_ols: f64,
    pub ie_pk: f64,
    pub ie_po: f64,
    /// |theta_hat - theta0| per report-grid penalty
    pub delta_curve: Vec<Vec<f64>>,
    pub labels: Vec<VariableLabel>,
    /// parameters whose surrogate gradient was screened to zero
    pub screened_out: Vec<usize>,
    /// gradient components left out of the projection
    pub unprojected: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub parameter: usize,
    pub ols: f64,
    pub pk: f64,
    pub po: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub oracle: ThetaOracle,
    pub ie_theta0: f64,
    pub ie_theta_star: f64,
    pub mean_ie_ols: f64,
    pub mean_ie_pk: f64,
    pub mean_ie_po: f64,
    pub mean_theta_ols: Vec<f64>,
    pub mean_theta_pk: Vec<f64>,
    pub mean_theta_po: Vec<f64>,
    /// parameters with |theta*_i| < 1e-6 have no relative error
    pub relative_errors: Vec<RelativeErrors>,
    pub selection_frequency: Vec<f64>,
    /// share of replicates whose selected support equals the target support
    pub exact_support_rate: f64,
    /// share of replicates in which every non-target parameter is unadjusted at lambda = 0.1
    pub vanish_rate_at_0_1: f64,
    pub mean_delta_curve: Vec<Vec<f64>>,
    /// total Sobol indices of the computer model over [0,1]^4 x theta box
    pub sobol_total: Vec<f64>,
    /// share of replicates labeling each parameter insensitive
    pub insensitive_rate: Vec<f64>,
    pub replicates: Vec<ReplicateOutcome>,
    pub failures: Vec<(usize, String)>,
}

fn basis(cfg: &BenchmarkConfig) -> ParametricBasis {
    ParametricBasis::Polynomial {
        f_degree: cfg.f_degree,
        g_degree: cfg.g_degree,
    }
}

fn run_replicate(
    cfg: &BenchmarkConfig,
    index: usize,
    ie: &IeQuadrature,
    sobol: &[f64],
) -> Result<ReplicateOutcome> {
    let mut rng = stream_rng(cfg.seed, index as u64 + 1);
    let theta_box = cfg.theta_box()?;
    let domain = DomainBounds::unit(DIM_X);

    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let x = DMatrix::from_fn(cfg.n, DIM_X, |_, _| rng.random::<f64>());
    let y = DMatrix::from_fn(cfg.n, 1, |i, _| {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        true_process(&xi) + noise.sample(&mut rng)
    });
    let physical = PhysicalDataset::new(x, y, domain.clone())?;

    let design = maximin_lhs(cfg.design_runs, DIM_X + DIM_THETA, 5, &mut rng);
    let cx = design.columns(0, DIM_X).into_owned();
    let ct = DMatrix::from_fn(cfg.design_runs, DIM_THETA, |i, k| {
        theta_box.lower()[k] + design[(i, DIM_X + k)] * theta_box.range(k)
    });
    let cy = DMatrix::from_fn(cfg.design_runs, 1, |i, _| {
        let xi: Vec<f64> = cx.row(i).iter().copied().collect();
        let ti: Vec<f64> = ct.row(i).iter().copied().collect();
        computer_model(&xi, &ti)
    });
    let computer = ComputerDataset::new(cx, ct, cy, domain, theta_box.clone())?;
    let (surrogate, screened_out) = fit_surrogate(cfg, &computer).stage("surrogate")?;

    let hyper = estimate_hyperparams(&physical, 0).stage("hyperparameters")?;
    let kcfg = KernelConfig::new(
        hyper.phi,
        hyper.eta2,
        cfg.mc_samples,
        cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )?;
    let projection = project_surrogate(&surrogate, &physical, &kcfg).stage("projected kernel")?;
    let unprojected = projection.unprojected;
    let problem = CalibrationProblem::single(
        physical,
        surrogate,
        projection.kernel,
        cfg.theta0.clone(),
        theta_box,
    )
    .stage("problem")?;

    let ols = solve_ols(&problem).stage("ols")?;
    let pk_est = solve_pk(&problem).stage("pk")?;
    let path = compute_path(&problem, None).stage("path")?;
    let curve = compute_path(&problem, Some(&cfg.report_grid)).stage("report path")?;
    let sel = path.selected();
    let classification = classify_variables(&path, sobol, DEFAULT_SOBOL_FLOOR)?;

    let mut warnings = path.warnings.clone();
    warnings.extend(ols.warnings.iter().cloned());
    warnings.extend(pk_est.warnings.iter().cloned());
    Ok(ReplicateOutcome {
        index,
        phi: hyper.phi,
        eta2: hyper.eta2,
        ie_ols: ie.eval(&ols.theta_hat),
        ie_pk: ie.eval(&pk_est.theta_hat),
        ie_po: ie.eval(&sel.theta_hat),
        theta_ols: ols.theta_hat,
        theta_pk: pk_est.theta_hat,
        theta_po: sel.theta_hat.clone(),
        selected_lambda: sel.lambda,
        support_po: sel.support.clone(),
        delta_curve: curve.entries.iter().map(|e| e.delta.clone()).collect(),
        labels: classification.labels,
        screened_out,
        unprojected,
        warnings,
    })
}

fn fit_surrogate(
    cfg: &BenchmarkConfig,
    computer: &ComputerDataset,
) -> Result<(LinearSurrogate, Vec<usize>)> {
    match cfg.surrogate {
        BenchmarkSurrogate::Parametric if cfg.screen_surrogate => {
            fit_parametric_screened(computer, 0, basis(cfg))
        }
        BenchmarkSurrogate::Parametric => {
            Ok((fit_parametric(computer, 0, basis(cfg))?, Vec::new()))
        }
        BenchmarkSurrogate::Gp => {
            let params = estimate_gp_hyperparams(computer, 0)?;
            Ok((fit_gp(computer, 0, &params)?, Vec::new()))
        }
    }
}

fn mean_vec(rows: &[&Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    (0..k)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n)
        .collect()
}

/// Run the replicated study. Replicates run in parallel on independent
/// random streams; results do not depend on the thread count.
pub fn run_study(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let ie = IeQuadrature::new(config.ie_nodes, config.seed)?;
    let oracle = optimal_theta_oracle(&ie, config.seed);
    let theta_box = config.theta_box()?;
    // the model is affine in theta, so its exact f and g give the indices
    let sobol = surrogate_sobol(
        &[LinearSurrogate::from_fns(
            DIM_THETA,
            |x| computer_model(x, &[0.0; DIM_THETA]),
            |x| {
                let base = computer_model(x, &[0.0; DIM_THETA]);
                let mut e = [0.0; DIM_THETA];
                DVector::from_iterator(
                    DIM_THETA,
                    (0..DIM_THETA).map(|i| {
                        e[i] = 1.0;
                        let v = computer_model(x, &e) - base;
                        e[i] = 0.0;
                        v
                    }),
                )
            },
        )],
        &[1.0],
        &DomainBounds::unit(DIM_X),
        &theta_box,
        config.sobol_samples,
        config.seed,
    )?;

    let outcomes: Vec<Result<ReplicateOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r, &ie, &sobol.total))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => replicates.push(o),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() * 20 > config.replicates || replicates.is_empty() {
        return Err(Error::Study {
            failed: failures.len(),
            total: config.replicates,
            first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    let count = replicates.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| replicates.iter().map(f).sum::<f64>() / count;

    let relative_errors = config
        .target_support
        .iter()
        .filter(|&&i| oracle.defined[i] && oracle.theta[i].abs() >= 1e-6)
        .map(|&i| {
            let star = oracle.theta[i];
            let re = |t: &Vec<f64>| (t[i] - star).abs() / star.abs();
            RelativeErrors {
                parameter: i,
                ols: mean(&|o| re(&o.theta_ols)),
                pk: mean(&|o| re(&o.theta_pk)),
                po: mean(&|o| re(&o.theta_po)),
            }
        })
        .collect();

    let selection_frequency = (0..DIM_THETA)
        .map(|i| {
            replicates
                .iter()
                .filter(|o| o.support_po.contains(&i))
                .count() as f64
                / count
        })
        .collect();
    let mut target = config.target_support.clone();
    target.sort_unstable();
    let exact_support_rate =
        replicates.iter().filter(|o| o.support_po == target).count() as f64 / count;

    let idx_01 = config
        .report_grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 0.1).abs().partial_cmp(&(b.1 - 0.1).abs()).unwrap())
        .map(|(i, _)| i);
    let mut grid_sorted = config.report_grid.clone();
    grid_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid_sorted.dedup();
    let pos_01 = idx_01.and_then(|i| grid_sorted.iter().position(|&l| l == config.report_grid[i]));
    let vanish_rate_at_0_1 = match pos_01 {
        Some(p) => {
            replicates
                .iter()
                .filter(|o| {
                    (0..DIM_THETA)
                        .filter(|i| !config.target_support.contains(i))
                        .all(|i| o.delta_curve[p][i] <= ZERO_THRESHOLD * theta_box.range(i))
                })
                .count() as f64
                / count
        }
        None => f64::NAN,
    };
    let mean_delta_curve = (0..grid_sorted.len())
        .map(|g| {
            mean_vec(
                &replicates
                    .iter()
                    .map(|o| &o.delta_curve[g])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();

    let insensitive_rate = (0..DIM_THETA)
        .map(|i| {
            replicates
                .iter()
                .filter(|o| o.labels[i] == VariableLabel::Insensitive)
                .count() as f64
                / count
        })
        .collect();

    Ok(BenchmarkReport {
        ie_theta0: ie.eval(&config.theta0),
        ie_theta_star: oracle.ie,
        mean_ie_ols: mean(&|o| o.ie_ols),
        mean_ie_pk: mean(&|o| o.ie_pk),
        mean_ie_po: mean(&|o| o.ie_po),
        mean_theta_ols: mean_vec(&replicates.iter().map(|o| &o.theta_ols).collect::<Vec<_>>()),
        mean_theta_pk: mean_vec(&replicates.iter().map(|o| &o.theta_pk).collect::<Vec<_>>()),
        mean_theta_po: mean_vec(&replicates.iter().map(|o| &o.theta_po).collect::<Vec<_>>()),
        relative_errors,
        selection_frequency,
        exact_support_rate,
        vanish_rate_at_0_1,
        mean_delta_curve,
        sobol_total: sobol.total,
        insensitive_rate,
        oracle,
        config: config.clone(),
        replicates,
        failures,
    })
}

fn fmt_theta(t: &[f64]) -> String {
    t.iter()
        .map(|v| format!("{v:8.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Human-readable summary of a study.
pub fn render_report(r: &BenchmarkReport) -> String {
    let mut s = String::new();
    let c = &r.config;
    let _ = writeln!(s, "benchmark study");
    let _ = writeln!(
        s,
        "replicates {} (failed {}), n {}, noise sd {}, seed {}, design runs {}, surrogate {:?}",
        c.replicates,
        r.failures.len(),
        c.n,
        c.noise_sd,
        c.seed,
        c.design_runs,
        c.surrogate
    );
    let _ = writeln!(s, "theta box lower {}", fmt_theta(&c.theta_lower));
    let _ = writeln!(s, "theta box upper {}", fmt_theta(&c.theta_upper));
    let _ = writeln!(s, "IE quadrature nodes {}", c.ie_nodes);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>10}  {:>10}  theta_1..theta_10", "estimator", "IE");
    let _ = writeln!(
        s,
        "{:>10}  {:>10.4}  {}",
        "theta0",
        r.ie_theta0,
        fmt_theta(&c.theta0)
    );
    let _ = writeln!(
        s,
        "{:>10}  {:>10.4}  {}",
        "OLS",
        r.mean_ie_ols,
        fmt_theta(&r.mean_theta_ols)
    );
    let _ = writeln!(
        s,
        "{:>10}  {:>10.4}  {}",
        "PK",
        r.mean_ie_pk,
        fmt_theta(&r.mean_theta_pk)
    );
    let _ = writeln!(
        s,
        "{:>10}  {:>10.4}  {}",
        "PO",
        r.mean_ie_po,
        fmt_theta(&r.mean_theta_po)
    );
    let _ = writeln!(
        s,
        "{:>10}  {:>10.4}  {}",
        "theta*",
        r.ie_theta_star,
        fmt_theta(&r.oracle.theta)
    );
    let _ = writeln!(
        s,
        "(theta* is undefined for parameters 7, 8, 9; design values shown)"
    );
    for w in &r.oracle.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "mean relative error     OLS        PK        PO");
    for e in &r.relative_errors {
        let _ = writeln!(
            s,
            "theta_{:<3}           {:8.4}  {:8.4}  {:8.4}",
            e.parameter + 1,
            e.ols,
            e.pk,
            e.po
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "selection frequency  {}",
        fmt_theta(&r.selection_frequency)
    );
    let _ = writeln!(s, "total Sobol indices  {}", fmt_theta(&r.sobol_total));
    let _ = writeln!(s, "labeled insensitive  {}", fmt_theta(&r.insensitive_rate));
    let _ = writeln!(
        s,
        "selected support equals {:?}: {:.3}",
        c.target_support.iter().map(|i| i + 1).collect::<Vec<_>>(),
        r.exact_support_rate
    );
    let _ = writeln!(
        s,
        "all other parameters unadjusted at lambda 0.1: {:.3}",
        r.vanish_rate_at_0_1
    );
    let _ = writeln!(s, "BIC uses the surrogate-based empirical loss");
    for (i, e) in &r.failures {
        let _ = writeln!(s, "replicate {i} failed: {e}");
    }
    s
}

/// report.txt, replicates.csv and lambda_curve.csv under `dir`.
pub fn write_report(r: &BenchmarkReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.txt"), render_report(r).as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replicate".to_string(), "estimator".into(), "ie".into()];
    header.extend((1..=DIM_THETA).map(|i| format!("theta_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for o in &r.replicates {
        for (name, ie, t) in [
            ("ols", o.ie_ols, &o.theta_ols),
            ("pk", o.ie_pk, &o.theta_pk),
            ("po", o.ie_po, &o.theta_po),
        ] {
            let mut rec = vec![o.index.to_string(), name.to_string(), ie.to_string()];
            rec.extend(t.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    write_atomic(
        &dir.join("replicates.csv"),
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;

    let mut grid = r.config.report_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lambda".to_string()];
    header.extend((1..=DIM_THETA).map(|i| format!("mean_delta_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (l, row) in grid.iter().zip(&r.mean_delta_curve) {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_atomic(
        &dir.join("lambda_curve.csv"),
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
