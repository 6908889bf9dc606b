//! Shared builders and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use senscal::estimators::{
    solve_po, solve_po_with, CalibrationProblem, PhysicalDataset, SolverOptions,
};
use senscal::kernels::{project_kernel, DomainBounds, KernelConfig, ProjectedKernelMatrix};
use senscal::pipeline::{write_computer, write_physical, RunConfig};
use senscal::selection::lambda_max;
use senscal::surrogate::{ComputerDataset, LinearSurrogate, ParamBounds};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One output of a linear calibration problem: y = G theta + noise with
/// an explicit kernel matrix K and nugget eta2.
#[derive(Clone)]
pub struct LinearOutput {
    pub g: DMatrix<f64>,
    pub y: DVector<f64>,
    pub k: DMatrix<f64>,
    pub eta2: f64,
}

#[derive(Clone)]
pub struct LinearCase {
    pub outputs: Vec<LinearOutput>,
    pub theta0: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn random_spd(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    (&a * a.transpose()) / n as f64
}

/// Random well-posed case with `q` outputs, n observations and m parameters.
pub fn random_case(seed: u64, n: usize, m: usize, q: usize, half_width: f64) -> LinearCase {
    let mut r = rng(seed);
    let theta_true: Vec<f64> = (0..m).map(|_| r.random_range(-0.8..0.8)).collect();
    let outputs = (0..q)
        .map(|_| {
            let g = DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0));
            let noise = DVector::from_fn(n, |_, _| 0.3 * r.random_range(-1.0..1.0));
            let y = &g * DVector::from_column_slice(&theta_true) + noise;
            LinearOutput {
                g,
                y,
                k: random_spd(n, &mut r),
                eta2: r.random_range(0.05..0.5),
            }
        })
        .collect();
    let theta0: Vec<f64> = (0..m).map(|_| r.random_range(-0.3..0.3)).collect();
    LinearCase {
        outputs,
        theta0,
        lower: vec![-half_width; m],
        upper: vec![half_width; m],
    }
}

impl LinearCase {
    pub fn m(&self) -> usize {
        self.theta0.len()
    }

    pub fn n(&self) -> usize {
        self.outputs[0].y.len()
    }

    /// The same case as a library problem: f = 0 and g looked up at the
    /// design points x_i = i / n.
    pub fn problem(&self) -> CalibrationProblem {
        let n = self.n();
        let m = self.m();
        let q = self.outputs.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let y = DMatrix::from_fn(n, q, |i, j| self.outputs[j].y[i]);
        let phys = PhysicalDataset::new(x, y, DomainBounds::unit(1)).unwrap();
        let mut surrogates = Vec::new();
        let mut kernels = Vec::new();
        for o in &self.outputs {
            let g = o.g.clone();
            let lookup = move |x: &[f64]| -> DVector<f64> {
                let i = (x[0] * n as f64).round() as usize;
                g.row(i.min(n - 1)).transpose()
            };
            surrogates.push(LinearSurrogate::from_fns(m, |_| 0.0, lookup));
            kernels.push(ProjectedKernelMatrix::from_matrix(o.k.clone(), o.eta2).unwrap());
        }
        CalibrationProblem::new(
            phys,
            surrogates,
            kernels,
            self.theta0.clone(),
            ParamBounds::new(self.lower.clone(), self.upper.clone()).unwrap(),
        )
        .unwrap()
    }

    /// Normal equations A, b, c of sum_j w_j |y_j - G_j theta|^2 under
    /// (K_j + eta2 I)^{-1}, computed through an explicit LU inverse.
    pub fn normal(&self, weights: &[f64]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let m = self.m();
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        let mut c = 0.0;
        for (o, &w) in self.outputs.iter().zip(weights) {
            let n = o.y.len();
            let inv = (&o.k + DMatrix::identity(n, n) * o.eta2)
                .lu()
                .try_inverse()
                .unwrap();
            a += o.g.transpose() * &inv * &o.g * w;
            b += o.g.transpose() * &inv * &o.y * w;
            c += w * (o.y.transpose() * &inv * &o.y)[(0, 0)];
        }
        (a, b, c)
    }

    pub fn unit_weights(&self) -> Vec<f64> {
        vec![1.0; self.outputs.len()]
    }

    /// Unconstrained generalized least squares solution.
    pub fn gls(&self) -> DVector<f64> {
        let (a, b, _) = self.normal(&self.unit_weights());
        a.lu().solve(&b).unwrap()
    }
}

/// Objective L(theta) + lambda sum w_i |theta_i - theta0_i| from explicit
/// normal equations.
pub struct Objective {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
    pub theta0: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

impl Objective {
    pub fn value(&self, t: &[f64]) -> f64 {
        let m = t.len();
        let mut quad = 0.0;
        for i in 0..m {
            for j in 0..m {
                quad += t[i] * self.a[(i, j)] * t[j];
            }
        }
        let lin: f64 = (0..m).map(|i| self.b[i] * t[i]).sum();
        let pen: f64 = (0..m)
            .map(|i| self.weights[i] * (t[i] - self.theta0[i]).abs())
            .sum();
        self.c - 2.0 * lin + quad + self.lambda * pen
    }

    pub fn loss_gradient(&self, t: &[f64]) -> DVector<f64> {
        (&self.a * DVector::from_column_slice(t) - &self.b) * 2.0
    }
}

/// Exhaustive search over a `points`^m lattice of the box; returns the
/// best lattice point and its objective.
pub fn lattice_minimum(
    obj: &Objective,
    lower: &[f64],
    upper: &[f64],
    points: usize,
) -> (Vec<f64>, f64) {
    let m = lower.len();
    let axis =
        |k: usize, i: usize| lower[k] + (upper[k] - lower[k]) * i as f64 / (points - 1) as f64;
    let mut idx = vec![0usize; m];
    let mut best = (vec![0.0; m], f64::INFINITY);
    let mut t = vec![0.0; m];
    loop {
        for k in 0..m {
            t[k] = axis(k, idx[k]);
        }
        let v = obj.value(&t);
        if v < best.1 {
            best = (t.clone(), v);
        }
        let mut k = 0;
        loop {
            if k == m {
                return best;
            }
            idx[k] += 1;
            if idx[k] < points {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Largest violation of the box-constrained weighted-lasso optimality
/// conditions, scaled by the largest |gradient| + penalty term.
pub fn kkt_residual(obj: &Objective, t: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let g = obj.loss_gradient(t);
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..t.len() {
        let pen = obj.lambda * obj.weights[i];
        scale = scale.max(g[i].abs()).max(pen);
        let u = t[i] - obj.theta0[i];
        let range = upper[i] - lower[i];
        let at_lo = t[i] <= lower[i] + 1e-12 * range;
        let at_hi = t[i] >= upper[i] - 1e-12 * range;
        let v = if u.abs() <= 1e-12 * range {
            // subgradient interval [-pen, pen] must contain -g, except on a bound
            let ex = (g[i].abs() - pen).max(0.0);
            if at_lo && g[i] > 0.0 || at_hi && g[i] < 0.0 {
                0.0
            } else {
                ex
            }
        } else {
            let r = g[i] + pen * u.signum();
            if at_lo {
                (-r).max(0.0)
            } else if at_hi {
                r.max(0.0)
            } else {
                r.abs()
            }
        };
        worst = worst.max(v);
    }
    worst / scale
}

/// Random smooth gradient of m components over d control variables.
pub fn random_gradient(
    seed: u64,
    d: usize,
    m: usize,
) -> impl Fn(&[f64]) -> DVector<f64> + Sync + Clone {
    let mut r = rng(seed);
    let coef: Vec<(Vec<f64>, f64, f64)> = (0..m)
        .map(|_| {
            (
                (0..d).map(|_| r.random_range(-3.0..3.0)).collect(),
                r.random_range(-1.0..1.0),
                r.random_range(0.5..2.0),
            )
        })
        .collect();
    move |x: &[f64]| {
        DVector::from_iterator(
            coef.len(),
            coef.iter().map(|(a, b, s)| {
                let arg: f64 = a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b;
                s * arg.sin() + 0.3 * arg
            }),
        )
    }
}

/// Relative orthogonality residual of the projected kernel:
/// max_x |int Phi_g(x, y) g(y) dy| / max_x |int Phi(x, y) g(y) dy| with the
/// integrals taken by an independent midpoint rule on the unit box.
pub fn annihilation_residual(seed: u64, d: usize, m: usize, phi: f64) -> f64 {
    let g = random_gradient(seed, d, m);
    let bounds = DomainBounds::unit(d);
    let cfg = KernelConfig::new(phi, 1e-6, 4096, seed).unwrap();
    let design = DMatrix::from_fn(3, d, |i, k| (i as f64 + 0.5 + 0.1 * k as f64) / 3.5);
    let pk = project_kernel(g.clone(), m, &design, &bounds, &cfg).unwrap();
    let kernel = pk.kernel().unwrap();
    let per_axis: usize = if d == 1 { 2000 } else { 64 };
    let total = per_axis.pow(d as u32);
    let grid: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    (i as f64 + 0.5) / per_axis as f64
                })
                .collect()
        })
        .collect();
    let g_grid: Vec<DVector<f64>> = grid.iter().map(|y| g(y)).collect();
    let mut r = rng(seed ^ 0xA5);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for _ in 0..4 {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(0.0..1.0)).collect();
        let mut proj = DVector::zeros(m);
        let mut base = DVector::zeros(m);
        for (y, gy) in grid.iter().zip(&g_grid) {
            proj += gy * kernel.eval(&x, y);
            base += gy * kernel.base(&x, y);
        }
        num = num.max(proj.norm() / total as f64);
        den = den.max(base.norm() / total as f64);
    }
    num / den
}

/// Projected kernel matrix on a random design; returns (min, max) eigenvalue.
pub fn projected_kernel_spectrum(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let d = r.random_range(1..=3);
    let m = r.random_range(1..=2);
    let n = r.random_range(5..=40);
    let phi = r.random_range(0.5..8.0);
    let lower: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..0.0)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + r.random_range(0.5..3.0)).collect();
    let design = DMatrix::from_fn(n, d, |_, k| r.random_range(lower[k]..upper[k]));
    let bounds = DomainBounds::new(lower, upper).unwrap();
    let cfg = KernelConfig::new(phi, 1e-8, 512, seed).unwrap();
    let pk = project_kernel(random_gradient(seed, d, m), m, &design, &bounds, &cfg).unwrap();
    pk.eigen_range()
}

/// Fuselage-style synthetic study: one control variable (actuator force) at
/// eight physical levels, five outputs, five parameters, a simulator that is
/// linear in force with a theta-dependent slope. The physical truth is the
/// simulator at `theta0` shifted in the `perturbed` coordinates.
pub struct Fuselage {
    pub theta0: Vec<f64>,
    pub truth: Vec<f64>,
    pub config: RunConfig,
}

pub const FUSELAGE_THETA0: [f64; 5] = [0.29, 2.5, 21.0, 45.0, 69.0];

fn fuselage_slope(j: usize, theta: &[f64]) -> f64 {
    // per-output sensitivities to the relative deviation from design,
    // chosen so that the five outputs span all five parameter directions
    let s = [
        [0.40, 0.30, 0.20, 0.10, 0.05],
        [0.20, 0.50, 0.10, 0.06, 0.30],
        [0.10, 0.20, 0.40, 0.25, 0.10],
        [0.30, 0.10, 0.05, 0.40, 0.20],
        [0.05, 0.40, 0.15, 0.20, 0.45],
    ];
    let rel = |i: usize| (theta[i] - FUSELAGE_THETA0[i]) / (0.2 * FUSELAGE_THETA0[i]);
    1e-3 * (1.0 + (0..5).map(|i| s[j][i] * rel(i)).sum::<f64>())
}

pub fn fuselage(dir: &Path, perturbed: &[(usize, f64)], seed: u64) -> Fuselage {
    let theta0 = FUSELAGE_THETA0.to_vec();
    let mut truth = theta0.clone();
    for &(i, delta) in perturbed {
        truth[i] += delta;
    }
    let lower: Vec<f64> = theta0.iter().map(|t| t * 0.8).collect();
    let upper: Vec<f64> = theta0.iter().map(|t| t * 1.2).collect();
    let mut r = rng(seed);

    let forces: Vec<f64> = (0..7).map(|k| 100.0 * k as f64).chain([650.0]).collect();
    let px = DMatrix::from_column_slice(forces.len(), 1, &forces);
    let py = DMatrix::from_fn(forces.len(), 5, |i, j| {
        forces[i] * fuselage_slope(j, &truth) * (1.0 + 1e-4 * r.random_range(-1.0..1.0))
    });
    let xb = DomainBounds::new(vec![0.0], vec![650.0]).unwrap();
    let physical = PhysicalDataset::new(px, py, xb.clone()).unwrap();

    let runs = 640;
    let cx = DMatrix::from_fn(runs, 1, |i, _| 650.0 * (i % 8) as f64 / 7.0);
    let ct = DMatrix::from_fn(runs, 5, |_, k| r.random_range(lower[k]..upper[k]));
    let cy = DMatrix::from_fn(runs, 5, |i, j| {
        let t: Vec<f64> = ct.row(i).iter().copied().collect();
        cx[(i, 0)] * fuselage_slope(j, &t)
    });
    let computer = ComputerDataset::new(
        cx,
        ct,
        cy,
        xb,
        ParamBounds::new(lower.clone(), upper.clone()).unwrap(),
    )
    .unwrap();

    let pp: PathBuf = dir.join("physical.csv");
    let cp: PathBuf = dir.join("computer.csv");
    write_physical(&pp, &physical).unwrap();
    write_computer(&cp, &computer).unwrap();
    let mut config = RunConfig::new(pp, cp, theta0.clone());
    config.theta_lower = Some(lower);
    config.theta_upper = Some(upper);
    config.phi = Some(1.0);
    config.eta2 = Some(1e-4);
    config.mc_samples = 1024;
    config.sobol_samples = 2048;
    config.seed = seed;
    config.out = dir.join("out");
    Fuselage {
        theta0,
        truth,
        config,
    }
}

pub fn objective(case: &LinearCase, weights: &[f64], lambda: f64) -> Objective {
    let (a, b, c) = case.normal(&case.unit_weights());
    Objective {
        a,
        b,
        c,
        theta0: case.theta0.clone(),
        weights: weights.to_vec(),
        lambda,
    }
}

/// Solve at `frac * lambda_max` and return the KKT residual of the result,
/// or an error if the solver did not converge.
pub fn kkt_case(seed: u64, m: usize, frac: f64) -> Result<f64, String> {
    let case = random_case(seed, 15, m, 1, 2.0);
    let p = case.problem();
    let lambda = frac * lambda_max(&p);
    let r = solve_po(&p, lambda).map_err(|e| e.to_string())?;
    if !r.converged {
        return Err("not converged".into());
    }
    let obj = objective(&case, &p.penalty_weights, lambda);
    Ok(kkt_residual(&obj, &r.theta_hat, &case.lower, &case.upper))
}

/// Largest |theta_hat - GLS| at lambda = 0, or None when the GLS solution
/// is near the box (the comparison is then not the unconstrained one).
pub fn gls_case(seed: u64, m: usize) -> Option<f64> {
    let case = random_case(seed, 20, m, 1, 50.0);
    let gls = case.gls();
    if gls.iter().any(|t| t.abs() >= 40.0) {
        return None;
    }
    let r = solve_po(&case.problem(), 0.0).unwrap();
    Some(
        (0..m)
            .map(|i| (r.theta_hat[i] - gls[i]).abs())
            .fold(0.0, f64::max),
    )
}

pub fn huge_penalty_case(seed: u64, m: usize) -> bool {
    let case = random_case(seed, 12, m, 1, 2.0);
    solve_po(&case.problem(), 1e12).unwrap().theta_hat == case.theta0
}

/// Compare the solver with an exhaustive 201^m lattice search: its
/// objective may not exceed the lattice minimum, and the lattice minimizer
/// must lie within the strong-convexity radius of the solver's answer.
pub fn lattice_case(seed: u64, m: usize, frac: f64) -> Result<(), String> {
    let case = random_case(seed, 12, m, 1, 1.0);
    let weights = vec![1.0; m];
    let p = case
        .problem()
        .with_penalty_weights(weights.clone())
        .unwrap();
    let lambda = frac * lambda_max(&p);
    let opts = SolverOptions {
        tolerance: 1e-12,
        ..SolverOptions::default()
    };
    let r = solve_po_with(&p, lambda, &opts).map_err(|e| e.to_string())?;
    let obj = objective(&case, &weights, lambda);
    let points = 201;
    let (best, best_val) = lattice_minimum(&obj, &case.lower, &case.upper, points);
    let found = obj.value(&r.theta_hat);
    if found > best_val + 1e-10 * obj.c.abs().max(1.0) {
        return Err(format!("solver objective {found} above lattice {best_val}"));
    }
    let mu = 2.0 * SymmetricEigen::new(obj.a.clone()).eigenvalues.min();
    if mu <= 1e-6 {
        return Ok(());
    }
    // mu |t - t*|^2 / 2 <= f(t) - f(t*), and f(lattice) - f(t*) is at most
    // the first-order change over half a cell plus its curvature term
    let h = 2.0 / (points - 1) as f64;
    let grad = obj.loss_gradient(&r.theta_hat).norm() + lambda * (m as f64).sqrt();
    let half = 0.5 * h * (m as f64).sqrt();
    let slack = grad * half + obj.a.norm() * half * half;
    let radius = (2.0 * slack / mu).sqrt() + h;
    for i in 0..m {
        if (best[i] - r.theta_hat[i]).abs() > radius {
            return Err(format!(
                "coordinate {i}: lattice {} vs solver {} (radius {radius})",
                best[i], r.theta_hat[i]
            ));
        }
    }
    Ok(())
}
