//! File-based workflow: CSV ingestion, key=value run configuration, the
//! multi-output calibration run and its report files.
//!
//! Physical files have columns `x_1..x_d, y_1..y_q`; computer files have
//! `x_1..x_d, theta_1..theta_m, y_1..y_q`. Headers are mandatory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::benchmark::{BenchmarkConfig, BenchmarkSurrogate};
use crate::error::{Error, Result, StageExt};
use crate::estimators::{
    empirical_model_loss, exponential_output_weights, project_surrogate, CalibrationProblem,
    PhysicalDataset, SurrogateProjection, WeightSource,
};
use crate::kernels::{DomainBounds, KernelConfig};
use crate::selection::{
    classify_variables, compute_path, log_grid, surrogate_sobol, LambdaPath, SobolIndices,
    VariableClassification, DEFAULT_SOBOL_FLOOR,
};
use crate::surrogate::{
    estimate_gp_hyperparams, estimate_hyperparams, fit_gp, fit_parametric, ComputerDataset,
    LinearSurrogate, ParamBounds, ParametricBasis,
};

/// Column layout of a data file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub d: usize,
    pub m: usize,
    pub q: usize,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.d).map(|i| format!("x_{i}")).collect();
        h.extend((1..=self.m).map(|i| format!("theta_{i}")));
        h.extend((1..=self.q).map(|i| format!("y_{i}")));
        h
    }

    /// Infer d, m, q from a header, requiring the exact `x_i`, `theta_i`,
    /// `y_i` names in order.
    pub fn from_header(fields: &[String], path: &str) -> Result<Self> {
        let count = |prefix: &str, start: usize| -> usize {
            fields[start..]
                .iter()
                .enumerate()
                .take_while(|(k, f)| **f == format!("{prefix}_{}", k + 1))
                .count()
        };
        let d = count("x", 0);
        let m = count("theta", d);
        let q = count("y", d + m);
        if d + m + q != fields.len() {
            let bad = &fields[d + m + q];
            return Err(Error::Schema(format!(
                "{path}: unexpected header column `{bad}` (expected x_1..x_d, theta_1..theta_m, y_1..y_q)"
            )));
        }
        if d == 0 || q == 0 {
            return Err(Error::Schema(format!(
                "{path}: need at least one x_ column and one y_ column"
            )));
        }
        Ok(Self { d, m, q })
    }
}

/// Rows of a CSV file with a validated header.
fn read_table(path: &Path) -> Result<(CsvSchema, DMatrix<f64>)> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: name.clone(),
            line: 1,
            column: String::new(),
            message: e.to_string(),
        })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: name.clone(),
            line: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let schema = CsvSchema::from_header(&header, &name)?;
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: name.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            column: String::new(),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            let column = if rec.len() < width {
                header[rec.len()].clone()
            } else {
                format!("#{}", width + 1)
            };
            return Err(Error::Csv {
                path: name,
                line,
                column,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (k, cell) in rec.iter().enumerate() {
            let err = |message: String| Error::Csv {
                path: name.clone(),
                line,
                column: header[k].clone(),
                message,
            };
            if cell.is_empty() {
                return Err(err("missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| err(format!("not a number: `{cell}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Schema(format!("{name}: no data rows")));
    }
    Ok((schema, DMatrix::from_row_slice(rows, width, &values)))
}

fn extent(cols: &[DMatrix<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = cols[0].ncols();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for m in cols {
        for j in 0..k {
            for v in m.column(j).iter() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
    }
    // a constant column still needs a box of positive width
    for j in 0..k {
        if hi[j] <= lo[j] {
            let pad = 0.5 * lo[j].abs().max(1.0);
            lo[j] -= pad;
            hi[j] += pad;
        }
    }
    (lo, hi)
}

/// Read a physical file; `bounds` defaults to the data extent.
pub fn read_physical(path: &Path, bounds: Option<DomainBounds>) -> Result<PhysicalDataset> {
    let (schema, t) = read_table(path)?;
    if schema.m != 0 {
        return Err(Error::Schema(format!(
            "{}: physical data must not have theta columns",
            path.display()
        )));
    }
    let x = t.columns(0, schema.d).into_owned();
    let y = t.columns(schema.d, schema.q).into_owned();
    let bounds = match bounds {
        Some(b) => b,
        None => {
            let (lo, hi) = extent(&[x.clone()]);
            DomainBounds::new(lo, hi)?
        }
    };
    PhysicalDataset::new(x, y, bounds)
}

/// Read a computer-experiment file; bounds default to the data extent.
pub fn read_computer(
    path: &Path,
    bounds: Option<DomainBounds>,
    theta_bounds: Option<ParamBounds>,
) -> Result<ComputerDataset> {
    let (schema, t) = read_table(path)?;
    if schema.m == 0 {
        return Err(Error::Schema(format!(
            "{}: computer data needs theta_ columns",
            path.display()
        )));
    }
    let x = t.columns(0, schema.d).into_owned();
    let theta = t.columns(schema.d, schema.m).into_owned();
    let y = t.columns(schema.d + schema.m, schema.q).into_owned();
    let bounds = match bounds {
        Some(b) => b,
        None => {
            let (lo, hi) = extent(&[x.clone()]);
            DomainBounds::new(lo, hi)?
        }
    };
    let theta_bounds = match theta_bounds {
        Some(b) => b,
        None => {
            let (lo, hi) = extent(&[theta.clone()]);
            ParamBounds::new(lo, hi)?
        }
    };
    ComputerDataset::new(x, theta, y, bounds, theta_bounds)
}

fn write_rows(
    path: &Path,
    header: &[String],
    rows: usize,
    cell: impl Fn(usize, usize) -> f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_io)?;
    for i in 0..rows {
        w.write_record((0..header.len()).map(|k| cell(i, k).to_string()))
            .map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_physical(path: &Path, data: &PhysicalDataset) -> Result<()> {
    let schema = CsvSchema {
        d: data.d(),
        m: 0,
        q: data.q(),
    };
    let d = data.d();
    write_rows(path, &schema.header(), data.n(), |i, k| {
        if k < d {
            data.x[(i, k)]
        } else {
            data.y[(i, k - d)]
        }
    })
}

pub fn write_computer(path: &Path, data: &ComputerDataset) -> Result<()> {
    let schema = CsvSchema {
        d: data.d(),
        m: data.m(),
        q: data.q(),
    };
    let (d, m) = (data.d(), data.m());
    write_rows(path, &schema.header(), data.n(), |i, k| {
        if k < d {
            data.x[(i, k)]
        } else if k < d + m {
            data.theta[(i, k - d)]
        } else {
            data.y[(i, k - d - m)]
        }
    })
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Deformation profile measured at one force level.
#[derive(Debug, Clone)]
pub struct RawProfile {
    pub distance: Vec<f64>,
    pub value: Vec<f64>,
}

/// Piecewise-linear interpolation of each profile at `targets`; one row per
/// profile. Targets outside a profile's measured range are rejected.
pub fn interpolate_observations(profiles: &[RawProfile], targets: &[f64]) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(profiles.len(), targets.len());
    for (r, p) in profiles.iter().enumerate() {
        if p.distance.len() != p.value.len() {
            return Err(Error::Dimension {
                expected: p.distance.len(),
                got: p.value.len(),
                context: "profile values",
            });
        }
        if p.distance.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if p.distance.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument(format!(
                "profile {} distances are not strictly increasing",
                r + 1
            )));
        }
        let (lo, hi) = (p.distance[0], *p.distance.last().unwrap());
        for (c, &t) in targets.iter().enumerate() {
            if !(t >= lo && t <= hi) {
                return Err(Error::Extrapolation { target: t, lo, hi });
            }
            let k = p.distance.partition_point(|&d| d < t);
            out[(r, c)] = if p.distance[k] == t {
                p.value[k]
            } else {
                let (d0, d1) = (p.distance[k - 1], p.distance[k]);
                let (v0, v1) = (p.value[k - 1], p.value[k]);
                v0 + (v1 - v0) * (t - d0) / (d1 - d0)
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputWeights {
    Uniform,
    Explicit(Vec<f64>),
    /// exp(-a (q - j)^2)
    Exponential(f64),
}

impl OutputWeights {
    pub fn resolve(&self, q: usize) -> Result<Vec<f64>> {
        match self {
            OutputWeights::Uniform => Ok(vec![1.0; q]),
            OutputWeights::Exponential(a) => Ok(exponential_output_weights(*a, q)),
            OutputWeights::Explicit(w) if w.len() == q => Ok(w.clone()),
            OutputWeights::Explicit(w) => Err(Error::Config(format!(
                "{} output weights given for {q} outputs",
                w.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGridSpec {
    /// 0 plus 60 log-spaced points up to the smallest all-zero penalty
    Default,
    Log {
        points: usize,
        ratio: f64,
    },
    Explicit(Vec<f64>),
}

impl LambdaGridSpec {
    /// `default`, `log:<points>:<ratio>` or a comma-separated list.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "default" {
            return Ok(LambdaGridSpec::Default);
        }
        if let Some(rest) = s.strip_prefix("log:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "lambda grid `{s}`: expected log:<points>:<ratio>"
                )));
            }
            let points = parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("lambda grid `{s}`: bad point count")))?;
            let ratio: f64 = parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("lambda grid `{s}`: bad ratio")))?;
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Config(format!(
                    "lambda grid `{s}`: ratio must lie in (0, 1)"
                )));
            }
            return Ok(LambdaGridSpec::Log { points, ratio });
        }
        let v = parse_list(s)
            .map_err(|_| Error::Config(format!("lambda grid `{s}` is not a list of numbers")))?;
        if v.is_empty() || v.iter().any(|l| !(*l >= 0.0) || l.is_infinite()) {
            return Err(Error::Config(format!(
                "lambda grid `{s}` must hold finite nonnegative values"
            )));
        }
        Ok(LambdaGridSpec::Explicit(v))
    }

    pub fn resolve(&self, problem: &CalibrationProblem) -> Vec<f64> {
        match self {
            LambdaGridSpec::Default => crate::selection::default_grid(problem),
            LambdaGridSpec::Log { points, ratio } => {
                log_grid(crate::selection::lambda_max(problem), *ratio, *points)
            }
            LambdaGridSpec::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateChoice {
    /// least squares on a polynomial or slope basis
    LeastSquares(ParametricBasis),
    Gp,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub physical: PathBuf,
    pub computer: PathBuf,
    pub theta0: Vec<f64>,
    pub theta_lower: Option<Vec<f64>>,
    pub theta_upper: Option<Vec<f64>>,
    pub x_lower: Option<Vec<f64>>,
    pub x_upper: Option<Vec<f64>>,
    pub output_weights: OutputWeights,
    pub lambda_grid: LambdaGridSpec,
    pub phi: Option<f64>,
    pub eta2: Option<f64>,
    /// fixed penalty weights instead of adaptive ones
    pub penalty_weights: Option<Vec<f64>>,
    pub surrogate: SurrogateChoice,
    pub seed: u64,
    pub out: PathBuf,
    pub mc_samples: usize,
    pub sobol_samples: usize,
    pub sobol_floor: f64,
}

impl RunConfig {
    pub fn new(physical: PathBuf, computer: PathBuf, theta0: Vec<f64>) -> Self {
        Self {
            physical,
            computer,
            theta0,
            theta_lower: None,
            theta_upper: None,
            x_lower: None,
            x_upper: None,
            output_weights: OutputWeights::Uniform,
            lambda_grid: LambdaGridSpec::Default,
            phi: None,
            eta2: None,
            penalty_weights: None,
            surrogate: SurrogateChoice::LeastSquares(ParametricBasis::Slope),
            seed: 0,
            out: PathBuf::from("out"),
            mc_samples: 4096,
            sobol_samples: 8192,
            sobol_floor: DEFAULT_SOBOL_FLOOR,
        }
    }

    /// Parse `key = value` lines; `#` starts a comment. Relative paths are
    /// taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).map(|s| s.as_str());
        let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")));
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let list = |k: &str, v: &str| {
            parse_list(v)
                .map_err(|_| Error::Config(format!("`{k}`: expected comma-separated numbers")))
        };
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{k}`: not a number: `{v}`")))
        };
        let int = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{k}`: not an integer: `{v}`")))
        };

        let mut c = RunConfig::new(
            path(need("physical")?),
            path(need("computer")?),
            list("theta0", need("theta0")?)?,
        );
        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "physical" | "computer" | "theta0" => {}
                "theta_lower" => c.theta_lower = Some(list(k, v)?),
                "theta_upper" => c.theta_upper = Some(list(k, v)?),
                "x_lower" => c.x_lower = Some(list(k, v)?),
                "x_upper" => c.x_upper = Some(list(k, v)?),
                "output_weights" => c.output_weights = parse_output_weights(v)?,
                "lambda_grid" => c.lambda_grid = LambdaGridSpec::parse(v)?,
                "phi" => c.phi = Some(num(k, v)?),
                "eta2" => c.eta2 = Some(num(k, v)?),
                "penalty_weights" => c.penalty_weights = Some(list(k, v)?),
                "surrogate" => {
                    c.surrogate = match v {
                        "ls" => match c.surrogate {
                            SurrogateChoice::Gp => {
                                SurrogateChoice::LeastSquares(ParametricBasis::Slope)
                            }
                            s => s,
                        },
                        "gp" => SurrogateChoice::Gp,
                        _ => {
                            return Err(Error::Config(format!(
                                "`surrogate`: expected ls or gp, got `{v}`"
                            )))
                        }
                    }
                }
                "basis" => {
                    if c.surrogate != SurrogateChoice::Gp {
                        c.surrogate = SurrogateChoice::LeastSquares(parse_basis(v)?);
                    }
                }
                "seed" => {
                    c.seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("`seed`: not an integer: `{v}`")))?
                }
                "out" => c.out = path(v),
                "mc_samples" => c.mc_samples = int(k, v)?,
                "sobol_samples" => c.sobol_samples = int(k, v)?,
                "sobol_floor" => c.sobol_floor = num(k, v)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        // basis may come before surrogate in the file
        if let (Some(b), SurrogateChoice::LeastSquares(_)) = (get("basis"), c.surrogate) {
            c.surrogate = SurrogateChoice::LeastSquares(parse_basis(b)?);
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn theta_bounds(&self) -> Result<Option<ParamBounds>> {
        match (&self.theta_lower, &self.theta_upper) {
            (Some(l), Some(u)) => Ok(Some(ParamBounds::new(l.clone(), u.clone())?)),
            (None, None) => Ok(None),
            _ => Err(Error::Config(
                "theta_lower and theta_upper must be given together".into(),
            )),
        }
    }

    fn x_bounds(&self) -> Result<Option<DomainBounds>> {
        match (&self.x_lower, &self.x_upper) {
            (Some(l), Some(u)) => Ok(Some(DomainBounds::new(l.clone(), u.clone())?)),
            (None, None) => Ok(None),
            _ => Err(Error::Config(
                "x_lower and x_upper must be given together".into(),
            )),
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        if kv.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
    }
    Ok(kv)
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse())
        .collect()
}

/// `uniform`, `exp:<a>` or a comma-separated list.
pub fn parse_output_weights(s: &str) -> Result<OutputWeights> {
    let s = s.trim();
    if s == "uniform" {
        return Ok(OutputWeights::Uniform);
    }
    if let Some(a) = s.strip_prefix("exp:") {
        let a: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("output weights `{s}`: bad exponent")))?;
        return Ok(OutputWeights::Exponential(a));
    }
    let w =
        parse_list(s).map_err(|_| Error::Config(format!("output weights `{s}` not understood")))?;
    if w.iter().any(|v| !(*v >= 0.0) || v.is_infinite()) {
        return Err(Error::Config(
            "output weights must be finite and nonnegative".into(),
        ));
    }
    Ok(OutputWeights::Explicit(w))
}

/// `slope` or `poly:<f degree>,<g degree>`.
pub fn parse_basis(s: &str) -> Result<ParametricBasis> {
    let s = s.trim();
    if s == "slope" {
        return Ok(ParametricBasis::Slope);
    }
    if let Some(rest) = s.strip_prefix("poly:") {
        let parts: Vec<&str> = rest.split(',').map(|p| p.trim()).collect();
        let deg = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("basis `{s}`: bad degree")))
        };
        return match parts.as_slice() {
            [f] => Ok(ParametricBasis::Polynomial {
                f_degree: deg(f)?,
                g_degree: deg(f)?,
            }),
            [f, g] => Ok(ParametricBasis::Polynomial {
                f_degree: deg(f)?,
                g_degree: deg(g)?,
            }),
            _ => Err(Error::Config(format!("basis `{s}`: expected poly:<f>,<g>"))),
        };
    }
    Err(Error::Config(format!(
        "basis `{s}`: expected slope or poly:<f>,<g>"
    )))
}

/// Both datasets with shared x bounds and consistent widths.
pub fn ingest(config: &RunConfig) -> Result<(PhysicalDataset, ComputerDataset)> {
    let given = config.x_bounds()?;
    let phys = read_physical(&config.physical, given.clone())?;
    let comp = read_computer(&config.computer, given.clone(), config.theta_bounds()?)?;
    if phys.q() != comp.q() {
        return Err(Error::Schema(format!(
            "physical data has {} outputs, computer data has {}",
            phys.q(),
            comp.q()
        )));
    }
    if phys.d() != comp.d() {
        return Err(Error::Schema(format!(
            "physical data has {} inputs, computer data has {}",
            phys.d(),
            comp.d()
        )));
    }
    if config.theta0.len() != comp.m() {
        return Err(Error::Config(format!(
            "theta0 has {} entries, computer data has {} theta columns",
            config.theta0.len(),
            comp.m()
        )));
    }
    if given.is_some() {
        return Ok((phys, comp));
    }
    // common x box covering both designs
    let (lo, hi) = extent(&[phys.x.clone(), comp.x.clone()]);
    let bounds = DomainBounds::new(lo, hi)?;
    let phys = PhysicalDataset::new(phys.x, phys.y, bounds.clone())?;
    let comp = ComputerDataset::new(comp.x, comp.theta, comp.y, bounds, comp.theta_bounds)?;
    Ok((phys, comp))
}

/// Everything needed to solve along a path, built from the config.
pub struct PreparedProblem {
    pub problem: CalibrationProblem,
    pub computer: ComputerDataset,
    pub phi: Vec<f64>,
    pub eta2: Vec<f64>,
    pub unprojected: Vec<Vec<usize>>,
    /// dimension of each output's projected gradient span
    pub projection_rank: Vec<usize>,
}

pub fn prepare(config: &RunConfig) -> Result<PreparedProblem> {
    let (physical, computer) = ingest(config).stage("ingest")?;
    let q = physical.q();
    let mut theta_bounds = computer.theta_bounds.clone();
    if !theta_bounds.contains(&config.theta0) {
        if config.theta_lower.is_some() {
            return Err(Error::Config(
                "theta0 lies outside the configured theta bounds".into(),
            ));
        }
        let lo = theta_bounds
            .lower()
            .iter()
            .zip(&config.theta0)
            .map(|(a, b)| a.min(*b))
            .collect();
        let hi = theta_bounds
            .upper()
            .iter()
            .zip(&config.theta0)
            .map(|(a, b)| a.max(*b))
            .collect();
        theta_bounds = ParamBounds::new(lo, hi)?;
    }

    type Built = (LinearSurrogate, SurrogateProjection, f64, f64);
    let built: Vec<Result<Built>> = (0..q)
        .into_par_iter()
        .map(|j| {
            let surrogate = match config.surrogate {
                SurrogateChoice::LeastSquares(b) => fit_parametric(&computer, j, b),
                SurrogateChoice::Gp => {
                    estimate_gp_hyperparams(&computer, j).and_then(|p| fit_gp(&computer, j, &p))
                }
            }
            .stage("surrogate")?;
            let (phi, eta2) = match (config.phi, config.eta2) {
                (Some(p), Some(e)) => (p, e),
                (p, e) => {
                    let h = estimate_hyperparams(&physical, j).stage("hyperparameters")?;
                    (p.unwrap_or(h.phi), e.unwrap_or(h.eta2))
                }
            };
            let kcfg = KernelConfig::new(
                phi,
                eta2,
                config.mc_samples,
                config.seed.wrapping_add(j as u64),
            )?;
            let projection =
                project_surrogate(&surrogate, &physical, &kcfg).stage("projected kernel")?;
            Ok((surrogate, projection, phi, eta2))
        })
        .collect();
    let mut surrogates = Vec::with_capacity(q);
    let mut kernels = Vec::with_capacity(q);
    let (mut phi, mut eta2) = (Vec::new(), Vec::new());
    let (mut unprojected, mut projection_rank) = (Vec::new(), Vec::new());
    for b in built {
        let (s, proj, p, e) = b?;
        surrogates.push(s);
        kernels.push(proj.kernel);
        phi.push(p);
        eta2.push(e);
        unprojected.push(proj.unprojected);
        projection_rank.push(proj.rank);
    }
    let weights = config.output_weights.resolve(q)?;
    let mut problem = CalibrationProblem::new(
        physical,
        surrogates,
        kernels,
        config.theta0.clone(),
        theta_bounds,
    )
    .and_then(|p| p.with_output_weights(weights))
    .stage("problem")?;
    if let Some(w) = &config.penalty_weights {
        problem = problem.with_penalty_weights(w.clone())?;
    }
    Ok(PreparedProblem {
        problem,
        computer,
        phi,
        eta2,
        unprojected,
        projection_rank,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub q: usize,
    pub theta0: Vec<f64>,
    pub theta_hat: Vec<f64>,
    /// 1-based indices of adjusted parameters
    pub adjusted: Vec<usize>,
    pub selected_lambda: f64,
    pub selected_index: usize,
    pub bic: f64,
    /// surrogate-based empirical losses
    pub loss_theta0: f64,
    pub loss_theta_hat: f64,
    pub output_weights: Vec<f64>,
    /// null for pinned parameters
    pub penalty_weights: Vec<Option<f64>>,
    pub weight_source: WeightSource,
    pub phi: Vec<f64>,
    pub eta2: Vec<f64>,
    pub sobol_total: Vec<f64>,
    pub labels: Vec<String>,
    pub warnings: Vec<String>,
}

pub struct CalibrationRun {
    pub summary: CalibrationSummary,
    pub path: LambdaPath,
    pub classification: VariableClassification,
}

/// Full run: path, BIC selection, Sobol screening and classification; writes
/// result.json, path.csv and classification.csv into `config.out`.
pub fn run_calibration(config: &RunConfig) -> Result<CalibrationRun> {
    let prep = prepare(config)?;
    let p = &prep.problem;
    let grid = config.lambda_grid.resolve(p);
    let path = compute_path(p, Some(&grid)).stage("path")?;
    let sobol = sobol_for(&prep, config).stage("sobol")?;
    let classification = classify_variables(&path, &sobol.total, config.sobol_floor)?;

    let sel = path.selected();
    let mut warnings = path.warnings.clone();
    warnings.extend(classification.warnings.iter().cloned());
    for (j, d) in prep.unprojected.iter().enumerate() {
        if !d.is_empty() {
            warnings.push(format!(
                "output {}: surrogate ignores theta {:?}; left out of the projection",
                j + 1,
                d.iter().map(|i| i + 1).collect::<Vec<_>>()
            ));
        }
    }
    for (j, (&r, d)) in prep
        .projection_rank
        .iter()
        .zip(&prep.unprojected)
        .enumerate()
    {
        if r < p.m() - d.len() {
            warnings.push(format!(
                "output {}: surrogate gradient spans {r} of {} directions; its span was projected out",
                j + 1,
                p.m() - d.len()
            ));
        }
    }
    let summary = CalibrationSummary {
        n: p.n(),
        d: p.physical.d(),
        m: p.m(),
        q: p.physical.q(),
        theta0: p.theta0.clone(),
        theta_hat: sel.theta_hat.clone(),
        adjusted: sel.support.iter().map(|i| i + 1).collect(),
        selected_lambda: sel.lambda,
        selected_index: path.selected_index,
        bic: sel.bic,
        loss_theta0: empirical_model_loss(p, &p.theta0)?,
        loss_theta_hat: sel.empirical_loss,
        output_weights: p.output_weights.clone(),
        penalty_weights: p
            .penalty_weights
            .iter()
            .map(|w| w.is_finite().then_some(*w))
            .collect(),
        weight_source: p.weight_source,
        phi: prep.phi.clone(),
        eta2: prep.eta2.clone(),
        sobol_total: sobol.total.clone(),
        labels: classification
            .labels
            .iter()
            .map(|l| l.as_str().to_string())
            .collect(),
        warnings,
    };
    fs::create_dir_all(&config.out)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    write_atomic(&config.out.join("result.json"), json.as_bytes())?;
    write_path_csv(&config.out.join("path.csv"), &path)?;
    write_classification_csv(&config.out.join("classification.csv"), &classification)?;
    Ok(CalibrationRun {
        summary,
        path,
        classification,
    })
}

/// Only the penalty path; writes path.csv.
pub fn run_path(config: &RunConfig) -> Result<LambdaPath> {
    let prep = prepare(config)?;
    let grid = config.lambda_grid.resolve(&prep.problem);
    let path = compute_path(&prep.problem, Some(&grid)).stage("path")?;
    fs::create_dir_all(&config.out)?;
    write_path_csv(&config.out.join("path.csv"), &path)?;
    Ok(path)
}

/// Only the Sobol screening of the fitted surrogates; writes sobol.csv.
pub fn run_sobol(config: &RunConfig) -> Result<SobolIndices> {
    let prep = prepare(config)?;
    let s = sobol_for(&prep, config).stage("sobol")?;
    fs::create_dir_all(&config.out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "total_index", "std_error"])
        .map_err(csv_io)?;
    for i in 0..s.total.len() {
        w.write_record([
            format!("theta_{}", i + 1),
            s.total[i].to_string(),
            s.std_error[i].to_string(),
        ])
        .map_err(csv_io)?;
    }
    write_atomic(
        &config.out.join("sobol.csv"),
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;
    Ok(s)
}

fn sobol_for(prep: &PreparedProblem, config: &RunConfig) -> Result<SobolIndices> {
    let p = &prep.problem;
    surrogate_sobol(
        &p.surrogates,
        &p.output_weights,
        &p.physical.bounds,
        &prep.computer.theta_bounds,
        config.sobol_samples,
        config.seed,
    )
}

pub fn write_path_csv(path: &Path, lp: &LambdaPath) -> Result<()> {
    let m = lp.entries.first().map_or(0, |e| e.delta.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lambda".to_string()];
    header.extend((1..=m).map(|i| format!("delta_{i}")));
    header.push("loss".into());
    header.push("bic".into());
    w.write_record(&header).map_err(csv_io)?;
    for e in &lp.entries {
        let mut rec = vec![e.lambda.to_string()];
        rec.extend(e.delta.iter().map(|v| v.to_string()));
        rec.push(e.empirical_loss.to_string());
        rec.push(e.bic.to_string());
        w.write_record(&rec).map_err(csv_io)?;
    }
    write_atomic(
        path,
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )
}

pub fn write_classification_csv(path: &Path, c: &VariableClassification) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "label", "sobol_total", "adjusted"])
        .map_err(csv_io)?;
    for i in 0..c.labels.len() {
        w.write_record([
            format!("theta_{}", i + 1),
            c.labels[i].as_str().to_string(),
            c.sobol_total[i].to_string(),
            c.adjusted_at_selected_lambda[i].to_string(),
        ])
        .map_err(csv_io)?;
    }
    write_atomic(
        path,
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )
}

/// Benchmark settings from `key = value` text (unknown keys rejected).
pub fn parse_benchmark_config(text: &str) -> Result<BenchmarkConfig> {
    let kv = parse_kv(text)?;
    let mut c = BenchmarkConfig::default();
    let list = |k: &str, v: &str| {
        parse_list(v).map_err(|_| Error::Config(format!("`{k}`: expected comma-separated numbers")))
    };
    let int = |k: &str, v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Config(format!("`{k}`: not an integer: `{v}`")))
    };
    for (k, v) in &kv {
        let v = v.as_str();
        match k.as_str() {
            "n" => c.n = int(k, v)?,
            "noise_sd" => {
                c.noise_sd = v
                    .parse()
                    .map_err(|_| Error::Config(format!("`noise_sd`: not a number: `{v}`")))?
            }
            "replicates" => c.replicates = int(k, v)?,
            "theta0" => c.theta0 = list(k, v)?,
            "seed" => {
                c.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed`: not an integer: `{v}`")))?
            }
            "ie_nodes" => c.ie_nodes = int(k, v)?,
            "design_runs" => c.design_runs = int(k, v)?,
            "theta_lower" => c.theta_lower = list(k, v)?,
            "theta_upper" => c.theta_upper = list(k, v)?,
            "surrogate" => {
                c.surrogate = match v {
                    "ls" => BenchmarkSurrogate::Parametric,
                    "gp" => BenchmarkSurrogate::Gp,
                    _ => {
                        return Err(Error::Config(format!(
                            "`surrogate`: expected ls or gp, got `{v}`"
                        )))
                    }
                }
            }
            "basis" => match parse_basis(v)? {
                ParametricBasis::Polynomial { f_degree, g_degree } => {
                    c.f_degree = f_degree;
                    c.g_degree = g_degree;
                }
                ParametricBasis::Slope => {
                    return Err(Error::Config(
                        "the benchmark needs a polynomial basis".into(),
                    ))
                }
            },
            "mc_samples" => c.mc_samples = int(k, v)?,
            "report_grid" => c.report_grid = list(k, v)?,
            "sobol_samples" => c.sobol_samples = int(k, v)?,
            "screen_surrogate" => {
                c.screen_surrogate = v.parse().map_err(|_| {
                    Error::Config(format!(
                        "`screen_surrogate`: expected true or false, got `{v}`"
                    ))
                })?
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn header_inference() {
        let h: Vec<String> = ["x_1", "theta_1", "theta_2", "y_1", "y_2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            CsvSchema::from_header(&h, "f").unwrap(),
            CsvSchema { d: 1, m: 2, q: 2 }
        );
        let bad: Vec<String> = ["x_1", "y_2"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            CsvSchema::from_header(&bad, "f"),
            Err(Error::Schema(_))
        ));
        assert_eq!(
            CsvSchema { d: 2, m: 1, q: 1 }.header(),
            vec!["x_1", "x_2", "theta_1", "y_1"]
        );
    }

    #[test]
    fn interpolation_examples() {
        let p = RawProfile {
            distance: vec![0.0, 10.0],
            value: vec![0.0, 10.0],
        };
        let r = interpolate_observations(std::slice::from_ref(&p), &[4.0, 0.0, 10.0]).unwrap();
        assert_eq!(r[(0, 0)], 4.0);
        assert_eq!(r[(0, 1)], 0.0);
        assert_eq!(r[(0, 2)], 10.0);
        match interpolate_observations(&[p], &[11.0]) {
            Err(Error::Extrapolation { target, .. }) => assert_eq!(target, 11.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interpolation_rejects_unsorted() {
        let p = RawProfile {
            distance: vec![0.0, 2.0, 2.0],
            value: vec![0.0, 1.0, 2.0],
        };
        assert!(interpolate_observations(&[p], &[1.0]).is_err());
    }

    #[test]
    fn grid_and_weight_specs() {
        assert_eq!(
            LambdaGridSpec::parse("default").unwrap(),
            LambdaGridSpec::Default
        );
        assert_eq!(
            LambdaGridSpec::parse("0, 0.5,2").unwrap(),
            LambdaGridSpec::Explicit(vec![0.0, 0.5, 2.0])
        );
        assert_eq!(
            LambdaGridSpec::parse("log:20:0.001").unwrap(),
            LambdaGridSpec::Log {
                points: 20,
                ratio: 0.001
            }
        );
        assert!(LambdaGridSpec::parse("log:20").is_err());
        assert!(LambdaGridSpec::parse("-1").is_err());
        let w = parse_output_weights("exp:0.2").unwrap().resolve(5).unwrap();
        assert_relative_eq!(w[0], 0.040762, epsilon = 1e-6);
        assert!(parse_output_weights("1,2").unwrap().resolve(3).is_err());
        assert_eq!(
            parse_basis("poly:2,1").unwrap(),
            ParametricBasis::Polynomial {
                f_degree: 2,
                g_degree: 1
            }
        );
        assert_eq!(parse_basis("slope").unwrap(), ParametricBasis::Slope);
    }

    #[test]
    fn config_parsing() {
        let text = "# run\nphysical = p.csv\ncomputer = /abs/c.csv\ntheta0 = 0.29, 2.5\nbasis = poly:1,1\noutput_weights = exp:0.2\nseed = 7\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.physical, PathBuf::from("/base/p.csv"));
        assert_eq!(c.computer, PathBuf::from("/abs/c.csv"));
        assert_eq!(c.theta0, vec![0.29, 2.5]);
        assert_eq!(c.seed, 7);
        assert_eq!(
            c.surrogate,
            SurrogateChoice::LeastSquares(ParametricBasis::Polynomial {
                f_degree: 1,
                g_degree: 1
            })
        );
        assert!(RunConfig::parse(
            "physical = a\ncomputer = b\ntheta0 = 1\nbogus = 1",
            Path::new(".")
        )
        .is_err());
        assert!(RunConfig::parse("physical = a\ntheta0 = 1", Path::new(".")).is_err());
        assert!(RunConfig::parse("physical = a\nphysical = b", Path::new(".")).is_err());
    }

    #[test]
    fn benchmark_config_parsing() {
        let c = parse_benchmark_config("replicates = 3\nseed = 11\nsurrogate = ls\n").unwrap();
        assert_eq!(c.replicates, 3);
        assert_eq!(c.seed, 11);
        assert!(parse_benchmark_config("n = 3").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
