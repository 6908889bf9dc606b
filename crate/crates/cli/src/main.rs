use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use senscal::benchmark::{render_report, run_study, write_report, BenchmarkSurrogate};
use senscal::pipeline::{self, LambdaGridSpec, RunConfig, SurrogateChoice};
use senscal::surrogate::ParametricBasis;
use senscal::Error;

#[derive(Parser)]
#[command(
    name = "senscal",
    version,
    about = "Calibrate the sensible parameters of a computer model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full run: penalty path, BIC selection, Sobol screening, classification
    Calibrate(Common),
    /// Penalty path only
    Path(Common),
    /// Total Sobol indices of the fitted surrogates
    Sobol(Common),
    /// Replicated synthetic benchmark study
    Benchmark(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SurrogateArg {
    Ls,
    Gp,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `default`, `log:<points>:<ratio>` or a comma-separated list
    #[arg(long = "lambda-grid")]
    lambda_grid: Option<String>,
    #[arg(long, value_enum)]
    surrogate: Option<SurrogateArg>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_enum)]
    surrogate: Option<SurrogateArg>,
}

fn run_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(g) = &c.lambda_grid {
        cfg.lambda_grid = LambdaGridSpec::parse(g)?;
    }
    match (c.surrogate, cfg.surrogate) {
        (Some(SurrogateArg::Gp), _) => cfg.surrogate = SurrogateChoice::Gp,
        (Some(SurrogateArg::Ls), SurrogateChoice::Gp) => {
            cfg.surrogate = SurrogateChoice::LeastSquares(ParametricBasis::Slope)
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Calibrate(c) => {
            let cfg = run_config(&c)?;
            let r = pipeline::run_calibration(&cfg)?;
            let s = &r.summary;
            println!(
                "selected lambda {:e} (index {})",
                s.selected_lambda, s.selected_index
            );
            println!("adjusted parameters {:?}", s.adjusted);
            println!("theta_hat {:?}", s.theta_hat);
            println!(
                "loss at theta0 {:.6e}, at theta_hat {:.6e}",
                s.loss_theta0, s.loss_theta_hat
            );
            for (i, l) in s.labels.iter().enumerate() {
                println!("theta_{}: {l}", i + 1);
            }
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Path(c) => {
            let cfg = run_config(&c)?;
            let p = pipeline::run_path(&cfg)?;
            println!(
                "{} penalties, BIC selects lambda {:e}",
                p.entries.len(),
                p.selected().lambda
            );
            println!("wrote {}", cfg.out.join("path.csv").display());
        }
        Command::Sobol(c) => {
            let cfg = run_config(&c)?;
            let s = pipeline::run_sobol(&cfg)?;
            for (i, (t, e)) in s.total.iter().zip(&s.std_error).enumerate() {
                println!("theta_{}: {t:.4} (se {e:.4})", i + 1);
            }
            println!("wrote {}", cfg.out.join("sobol.csv").display());
        }
        Command::Benchmark(b) => {
            let mut cfg = match &b.config {
                Some(p) => pipeline::parse_benchmark_config(&std::fs::read_to_string(p)?)?,
                None => Default::default(),
            };
            if let Some(s) = b.seed {
                cfg.seed = s;
            }
            if let Some(r) = b.replicates {
                cfg.replicates = r;
            }
            match b.surrogate {
                Some(SurrogateArg::Gp) => cfg.surrogate = BenchmarkSurrogate::Gp,
                Some(SurrogateArg::Ls) => cfg.surrogate = BenchmarkSurrogate::Parametric,
                None => {}
            }
            let report = run_study(&cfg)?;
            print!("{}", render_report(&report));
            let out = b.out.unwrap_or_else(|| PathBuf::from("benchmark-out"));
            write_report(&report, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
