//! Penalty paths, BIC selection, Sobol screening and the
//! sensible / sensitive / insensitive classification of parameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{solve_po_with, CalibrationProblem, SolverOptions};
use crate::kernels::DomainBounds;
use crate::qmc::stream_rng;
use crate::surrogate::{LinearSurrogate, ParamBounds};

pub const DEFAULT_SOBOL_FLOOR: f64 = 0.01;
pub const DEFAULT_GRID_POINTS: usize = 60;
pub const DEFAULT_GRID_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    pub support: Vec<usize>,
    pub support_size: usize,
    pub empirical_loss: f64,
    /// NaN when the loss is zero
    pub bic: f64,
    /// |theta_hat_i - theta0_i|
    pub delta: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaPath {
    pub entries: Vec<PathPoint>,
    pub selected_index: usize,
    pub warnings: Vec<String>,
}

impl LambdaPath {
    pub fn selected(&self) -> &PathPoint {
        &self.entries[self.selected_index]
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda).collect()
    }
}

/// BIC = ln(L/n) + |S| ln(n) / n
pub fn bic(loss: f64, support_size: usize, n: usize) -> f64 {
    if !(loss > 0.0) || n == 0 {
        return f64::NAN;
    }
    let n = n as f64;
    (loss / n).ln() + support_size as f64 * n.ln() / n
}

/// Smallest penalty at which every free coordinate stays at theta0.
pub fn lambda_max(problem: &CalibrationProblem) -> f64 {
    let grad = problem.loss_gradient(&problem.theta0);
    problem
        .penalty_weights
        .iter()
        .zip(grad.iter())
        .filter(|(w, _)| w.is_finite() && **w > 0.0)
        .map(|(w, g)| g.abs() / w)
        .fold(0.0, f64::max)
}

/// `points` log-spaced values in [lambda_max * ratio, lambda_max], with 0 prepended.
pub fn default_grid(problem: &CalibrationProblem) -> Vec<f64> {
    log_grid(lambda_max(problem), DEFAULT_GRID_RATIO, DEFAULT_GRID_POINTS)
}

pub fn log_grid(top: f64, ratio: f64, points: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    if !(top > 0.0) || points == 0 {
        return grid;
    }
    let lo = (top * ratio).ln();
    let hi = top.ln();
    for k in 0..points {
        let t = if points == 1 {
            1.0
        } else {
            k as f64 / (points - 1) as f64
        };
        grid.push((lo + t * (hi - lo)).exp());
    }
    grid
}

/// Solve along `grid` (sorted ascending internally) with warm starts and pick
/// the BIC minimizer; ties go to the larger penalty.
pub fn compute_path(problem: &CalibrationProblem, grid: Option<&[f64]>) -> Result<LambdaPath> {
    compute_path_with(problem, grid, true)
}

pub fn compute_path_with(
    problem: &CalibrationProblem,
    grid: Option<&[f64]>,
    warm: bool,
) -> Result<LambdaPath> {
    let mut lambdas: Vec<f64> = match grid {
        Some(g) => g.to_vec(),
        None => default_grid(problem),
    };
    if lambdas.is_empty() {
        return Err(Error::Argument("lambda grid is empty".into()));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0) || l.is_infinite()) {
        return Err(Error::Argument(
            "lambda grid values must be finite and nonnegative".into(),
        ));
    }
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();

    let n = problem.n();
    let mut entries = Vec::with_capacity(lambdas.len());
    let mut warnings = Vec::new();
    let mut start: Option<Vec<f64>> = None;
    for &lambda in &lambdas {
        let opts = SolverOptions {
            warm_start: if warm { start.clone() } else { None },
            ..Default::default()
        };
        let r = solve_po_with(problem, lambda, &opts)?;
        let delta: Vec<f64> = r
            .theta_hat
            .iter()
            .zip(&problem.theta0)
            .map(|(a, b)| (a - b).abs())
            .collect();
        let b = bic(r.empirical_loss, r.support.len(), n);
        if b.is_nan() {
            warnings.push(format!("zero empirical loss at lambda {lambda:e}; BIC undefined, entry excluded from selection"));
        }
        start = Some(r.theta_hat.clone());
        entries.push(PathPoint {
            lambda,
            support_size: r.support.len(),
            support: r.support,
            theta_hat: r.theta_hat,
            empirical_loss: r.empirical_loss,
            bic: b,
            delta,
            iterations: r.solver_iterations,
        });
    }
    let mut selected: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        if e.bic.is_nan() {
            continue;
        }
        match selected {
            Some(s) if e.bic > entries[s].bic => {}
            _ => selected = Some(i),
        }
    }
    let selected_index = match selected {
        Some(s) => s,
        None => {
            warnings.push("BIC undefined on the whole grid; selecting the largest lambda".into());
            entries.len() - 1
        }
    };
    Ok(LambdaPath {
        entries,
        selected_index,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolIndices {
    pub total: Vec<f64>,
    pub std_error: Vec<f64>,
    /// (parameter index, raw negative estimate) for clipped entries
    pub clipped: Vec<(usize, f64)>,
    pub variance: f64,
    pub samples: usize,
}

const SOBOL_BLOCK: usize = 1024;

#[derive(Default, Clone)]
struct SobolAccum {
    count: usize,
    sum: f64,
    sum_sq: f64,
    t_sum: Vec<f64>,
    t_sq: Vec<f64>,
}

impl SobolAccum {
    fn merge(mut self, other: &SobolAccum) -> Self {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        for i in 0..self.t_sum.len() {
            self.t_sum[i] += other.t_sum[i];
            self.t_sq[i] += other.t_sq[i];
        }
        self
    }
}

/// Total-effect indices of the theta inputs of `model(x, theta)` with x and
/// theta independent uniform over their boxes (Jansen estimator, `samples`
/// base points, cost `samples * (m + 2)` evaluations).
pub fn sobol_total_indices<F>(
    model: F,
    x_bounds: &DomainBounds,
    theta_bounds: &ParamBounds,
    samples: usize,
    seed: u64,
) -> Result<SobolIndices>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if samples < 1024 {
        return Err(Error::Argument(format!(
            "Sobol estimation needs at least 1024 samples, got {samples}"
        )));
    }
    let d = x_bounds.dim();
    let m = theta_bounds.dim();
    let blocks = samples.div_ceil(SOBOL_BLOCK);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..d)
            .map(|k| x_bounds.lower()[k] + rng.random::<f64>() * x_bounds.range(k))
            .collect();
        let t: Vec<f64> = (0..m)
            .map(|k| theta_bounds.lower()[k] + rng.random::<f64>() * theta_bounds.range(k))
            .collect();
        (x, t)
    };
    let parts: Vec<SobolAccum> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let rows = SOBOL_BLOCK.min(samples - b * SOBOL_BLOCK);
            let mut acc = SobolAccum {
                t_sum: vec![0.0; m],
                t_sq: vec![0.0; m],
                ..Default::default()
            };
            for _ in 0..rows {
                let (xa, ta) = draw(&mut rng);
                let (xb, tb) = draw(&mut rng);
                let fa = model(&xa, &ta);
                let fb = model(&xb, &tb);
                acc.count += 2;
                acc.sum += fa + fb;
                acc.sum_sq += fa * fa + fb * fb;
                let mut tmix = ta.clone();
                for i in 0..m {
                    tmix[i] = tb[i];
                    let fab = model(&xa, &tmix);
                    tmix[i] = ta[i];
                    let t = 0.5 * (fa - fab).powi(2);
                    acc.t_sum[i] += t;
                    acc.t_sq[i] += t * t;
                }
            }
            acc
        })
        .collect();
    let total = parts
        .iter()
        .skip(1)
        .fold(parts[0].clone(), |a, p| a.merge(p));
    let cnt = total.count as f64;
    let mean = total.sum / cnt;
    let variance = (total.sum_sq / cnt - mean * mean) * cnt / (cnt - 1.0);
    let scale = mean.abs().max(1.0);
    if !(variance > 1e-24 * scale * scale) || !variance.is_finite() {
        return Err(Error::DegenerateModel);
    }
    let nb = samples as f64;
    let mut indices = Vec::with_capacity(m);
    let mut se = Vec::with_capacity(m);
    let mut clipped = Vec::new();
    for i in 0..m {
        let tm = total.t_sum[i] / nb;
        let tv = (total.t_sq[i] / nb - tm * tm).max(0.0);
        let raw = tm / variance;
        se.push((tv / nb).sqrt() / variance);
        if raw < 0.0 {
            clipped.push((i, raw));
            indices.push(0.0);
        } else {
            indices.push(raw);
        }
    }
    Ok(SobolIndices {
        total: indices,
        std_error: se,
        clipped,
        variance,
        samples,
    })
}

/// Sobol indices of fitted surrogates; with several outputs the indices are
/// averaged with the (normalized) output weights, skipping outputs whose
/// surrogate is constant.
pub fn surrogate_sobol(
    surrogates: &[LinearSurrogate],
    output_weights: &[f64],
    x_bounds: &DomainBounds,
    theta_bounds: &ParamBounds,
    samples: usize,
    seed: u64,
) -> Result<SobolIndices> {
    if surrogates.is_empty() || surrogates.len() != output_weights.len() {
        return Err(Error::Dimension {
            expected: surrogates.len().max(1),
            got: output_weights.len(),
            context: "surrogates vs output weights",
        });
    }
    let m = theta_bounds.dim();
    let mut acc = vec![0.0; m];
    let mut acc_se = vec![0.0; m];
    let mut clipped = Vec::new();
    let mut wsum = 0.0;
    let mut variance = 0.0;
    for (j, (s, &w)) in surrogates.iter().zip(output_weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let r = match sobol_total_indices(
            |x, t| s.predict(x, t),
            x_bounds,
            theta_bounds,
            samples,
            seed.wrapping_add(j as u64),
        ) {
            Ok(r) => r,
            Err(Error::DegenerateModel) => continue,
            Err(e) => return Err(e),
        };
        for i in 0..m {
            acc[i] += w * r.total[i];
            acc_se[i] += (w * r.std_error[i]).powi(2);
        }
        clipped.extend(r.clipped);
        variance += w * r.variance;
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::DegenerateModel);
    }
    Ok(SobolIndices {
        total: acc.iter().map(|a| a / wsum).collect(),
        std_error: acc_se.iter().map(|a| a.sqrt() / wsum).collect(),
        clipped,
        variance: variance / wsum,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableLabel {
    Insensitive,
    SensitiveInsensible,
    Sensible,
}

impl VariableLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariableLabel::Insensitive => "insensitive",
            VariableLabel::SensitiveInsensible => "sensitive-insensible",
            VariableLabel::Sensible => "sensible",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableClassification {
    pub labels: Vec<VariableLabel>,
    pub sobol_total: Vec<f64>,
    pub adjusted_at_selected_lambda: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Below the Sobol floor a parameter is insensitive; otherwise it is
/// sensible when the selected path entry moves it and sensitive-insensible
/// when it does not.
pub fn classify_variables(
    path: &LambdaPath,
    sobol: &[f64],
    sobol_floor: f64,
) -> Result<VariableClassification> {
    let sel = path.selected();
    let m = sel.theta_hat.len();
    if sobol.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: sobol.len(),
            context: "Sobol indices",
        });
    }
    let adjusted: Vec<bool> = (0..m).map(|i| sel.support.contains(&i)).collect();
    let mut warnings = Vec::new();
    let labels = (0..m)
        .map(|i| {
            if sobol[i] < sobol_floor {
                if adjusted[i] {
                    warnings.push(format!(
                        "theta_{} is adjusted at the selected lambda but its total Sobol index {:.3e} is below the floor",
                        i + 1,
                        sobol[i]
                    ));
                }
                VariableLabel::Insensitive
            } else if adjusted[i] {
                VariableLabel::Sensible
            } else {
                VariableLabel::SensitiveInsensible
            }
        })
        .collect();
    Ok(VariableClassification {
        labels,
        sobol_total: sobol.to_vec(),
        adjusted_at_selected_lambda: adjusted,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::testutil::linear_problem;
    use crate::estimators::{solve_pk, solve_po};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn problem() -> CalibrationProblem {
        let g = DMatrix::from_row_slice(
            6,
            3,
            &[
                1.0, 0.3, 0.0, 0.5, -1.0, 0.2, 2.0, 0.1, 1.0, -0.7, 0.9, 0.4, 0.1, 0.1, -1.2, 1.1,
                -0.4, 0.3,
            ],
        );
        let y = vec![1.0, -2.0, 0.5, 3.0, 0.2, -0.7];
        linear_problem(
            g,
            y,
            DMatrix::identity(6, 6) * 0.3,
            0.5,
            vec![0.1, -0.1, 0.2],
            ParamBounds::new(vec![-10.0; 3], vec![10.0; 3]).unwrap(),
        )
    }

    #[test]
    fn bic_formula() {
        assert_relative_eq!(
            bic(22.0, 3, 50),
            (0.44f64).ln() + 3.0 * 50f64.ln() / 50.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(bic(22.0, 3, 50), -0.5863, epsilon = 1e-4);
        assert!(bic(0.0, 1, 10).is_nan());
    }

    #[test]
    fn zero_grid_matches_pk() {
        let p = problem();
        let path = compute_path(&p, Some(&[0.0])).unwrap();
        assert_eq!(path.entries.len(), 1);
        assert_eq!(path.selected_index, 0);
        let pk = solve_pk(&p).unwrap();
        for i in 0..3 {
            assert_relative_eq!(
                path.entries[0].theta_hat[i],
                pk.theta_hat[i],
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn default_grid_shape_and_lambda_max_pins_everything() {
        let p = problem();
        let grid = default_grid(&p);
        assert_eq!(grid.len(), 61);
        assert_eq!(grid[0], 0.0);
        let top = *grid.last().unwrap();
        assert_relative_eq!(top, lambda_max(&p), max_relative = 1e-12);
        assert_relative_eq!(grid[1], top * 1e-4, max_relative = 1e-12);
        assert_eq!(solve_po(&p, top * 1.000001).unwrap().support.len(), 0);
        assert!(!solve_po(&p, top * 0.9).unwrap().support.is_empty());
    }

    #[test]
    fn path_is_sorted_with_exact_bic_and_warm_start_matches_cold() {
        let p = problem();
        let warm = compute_path(&p, None).unwrap();
        let cold = compute_path_with(&p, None, false).unwrap();
        assert!(warm.entries.windows(2).all(|w| w[0].lambda < w[1].lambda));
        for (a, b) in warm.entries.iter().zip(&cold.entries) {
            assert_eq!(a.bic, bic(a.empirical_loss, a.support_size, p.n()));
            for i in 0..3 {
                assert!((a.theta_hat[i] - b.theta_hat[i]).abs() < 1e-7);
            }
        }
        let s = warm.selected_index;
        assert!(warm
            .entries
            .iter()
            .all(|e| e.bic.is_nan() || e.bic >= warm.entries[s].bic));
    }

    #[test]
    fn sobol_additive_and_absent_variable() {
        let tb = ParamBounds::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let xb = DomainBounds::unit(1);
        let r = sobol_total_indices(|_, t| t[0] + t[1], &xb, &tb, 8192, 3).unwrap();
        assert!((r.total[0] - 0.5).abs() < 0.05, "{:?}", r.total);
        assert!((r.total[1] - 0.5).abs() < 0.05);
        assert!((r.total[0] + r.total[1] - 1.0).abs() < 0.05);
        assert!(r.total[2] <= 2.0 * r.std_error[2] + 1e-15);
        let again = sobol_total_indices(|_, t| t[0] + t[1], &xb, &tb, 8192, 3).unwrap();
        assert_eq!(r.total, again.total);
    }

    #[test]
    fn sobol_constant_is_degenerate_and_small_samples_rejected() {
        let tb = ParamBounds::new(vec![0.0], vec![1.0]).unwrap();
        let xb = DomainBounds::unit(1);
        assert!(matches!(
            sobol_total_indices(|_, _| 4.0, &xb, &tb, 2048, 0),
            Err(Error::DegenerateModel)
        ));
        assert!(sobol_total_indices(|_, t| t[0], &xb, &tb, 100, 0).is_err());
    }

    #[test]
    fn zero_sobol_means_insensitive() {
        let p = problem();
        let path = compute_path(&p, None).unwrap();
        let c = classify_variables(&path, &[0.0; 3], DEFAULT_SOBOL_FLOOR).unwrap();
        assert!(c.labels.iter().all(|l| *l == VariableLabel::Insensitive));
        let c = classify_variables(&path, &[0.5; 3], DEFAULT_SOBOL_FLOOR).unwrap();
        for i in 0..3 {
            assert_eq!(
                c.labels[i] == VariableLabel::Sensible,
                c.adjusted_at_selected_lambda[i]
            );
        }
    }
}
