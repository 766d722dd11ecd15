use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use thinlab::experiment::{self, AggregateResult, ConfigFile, ExperimentConfig, OutputFormat};
use thinlab::oracle::{self, DEFAULT_NODE_BUDGET};
use thinlab::pool::trial_seed;
use thinlab::theory::TheoryParams;
use thinlab::{run_trial_traced, Error, Result, StrategySpec};

/// Balanced allocations under d-thinning. Bins are printed 0-based
/// (the usual mathematical convention numbers them 1..n).
#[derive(Parser)]
#[command(name = "thinlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run trials of one configuration and write the aggregate
    Run {
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
        /// Dump the per-ball trace of trial 0 as JSON lines
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run one configuration per value of n
    Sweep {
        /// Comma-separated bin counts, e.g. 10000,100000,1000000
        #[arg(long, value_delimiter = ',')]
        n_grid: Option<Vec<usize>>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the analytic predictions for (n, d, rho)
    Theory {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value = "1")]
        rho: String,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = TheoryFormat::Text)]
        format: TheoryFormat,
    },
    /// Exact max-load distribution of a tiny instance, as CSV
    Oracle {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: u64,
        #[arg(long, default_value = "threshold")]
        strategy: String,
        #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
        budget: u64,
    },
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    d: Option<usize>,
    /// Balls per bin; m = floor(rho * n)
    #[arg(long)]
    rho: Option<String>,
    /// threshold[:ell=X] | always-accept | beta-thinning:beta=B | threshold-scaled:c=C | greedy-d-choice
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Fill the runtime_ms column (makes output run-dependent)
    #[arg(long)]
    timing: bool,
    /// JSON file with the same keys as the flags; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TheoryFormat {
    Text,
    Csv,
}

struct Resolved {
    config: ExperimentConfig,
    out: Option<PathBuf>,
    format: OutputFormat,
    file: ConfigFile,
}

impl CommonArgs {
    fn resolve(self, n: Option<usize>) -> Result<Resolved> {
        let file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let n = n.or(file.n).unwrap_or(0);
        let rho = self.rho.or(file.rho.clone()).unwrap_or_else(|| "1".into());
        let strategy = self
            .strategy
            .or(file.strategy.clone())
            .unwrap_or_else(|| "threshold".into());
        let mut config = ExperimentConfig::new(
            n,
            self.d.or(file.d).unwrap_or(2),
            &rho,
            &strategy,
            self.trials.or(file.trials).unwrap_or(1),
            self.seed.or(file.seed).unwrap_or(0),
        )?;
        config.threads = self.threads.or(file.threads).unwrap_or(1);
        config.record_runtime = self.timing || file.timing.unwrap_or(false);
        Ok(Resolved {
            config,
            out: self.out.or(file.out.clone()),
            format: self.format.or(file.format).unwrap_or(OutputFormat::Csv),
            file,
        })
    }
}

fn write_results(results: &[AggregateResult], format: OutputFormat, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => experiment::emit(results, format, &path),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            match format {
                OutputFormat::Csv => experiment::write_csv(results, &mut lock),
                OutputFormat::Json => {
                    let text = serde_json::to_string_pretty(results).expect("serializable");
                    writeln!(lock, "{text}").map_err(|e| Error::io("<stdout>", e))
                }
                OutputFormat::Plotdata => {
                    experiment::write_plotdata(results, &mut lock).map_err(|e| Error::io("<stdout>", e))
                }
            }
        }
    }
}

fn theory_table(n: u64, d: usize, rho: &str, eps: f64, format: TheoryFormat) -> Result<()> {
    let rho_value = rho.parse::<experiment::Rho>()?.value();
    let params = TheoryParams::new(n as f64, d, rho_value)?;
    let bounds = params.bounds(eps)?;
    let mut rows: Vec<(String, String)> = vec![
        ("n".into(), n.to_string()),
        ("d".into(), d.to_string()),
        ("rho".into(), rho.to_string()),
        ("ell".into(), params.ell.to_string()),
        ("T".into(), params.cap.to_string()),
        ("d_ell".into(), params.predicted_max.to_string()),
    ];
    for (i, beta) in params.beta_seq.iter().enumerate() {
        rows.push((format!("beta_{}", i + 1), beta.to_string()));
    }
    for (i, tail) in params.beta_tails.iter().enumerate() {
        let flag = if tail.vacuous { " (vacuous)" } else { "" };
        rows.push((format!("p_r{}_gt_beta", i + 2), format!("{}{flag}", tail.value)));
    }
    rows.push(("eps".into(), eps.to_string()));
    rows.push(("upper".into(), bounds.upper.to_string()));
    rows.push(("lower".into(), bounds.lower.to_string()));
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let io_err = |e| Error::io("<stdout>", e);
    match format {
        TheoryFormat::Csv => {
            let header: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
            let values: Vec<&str> = rows.iter().map(|(_, v)| v.as_str()).collect();
            writeln!(out, "{}", header.join(",")).map_err(io_err)?;
            writeln!(out, "{}", values.join(",")).map_err(io_err)?;
        }
        TheoryFormat::Text => {
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in &rows {
                writeln!(out, "{k:<width$}  {v}").map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { n, common, trace } => {
            let resolved = common.resolve(n)?;
            let trace = trace.or(resolved.file.trace.clone());
            let config = &resolved.config;
            if config.n == 0 {
                return Err(Error::Config("--n is required".into()));
            }
            let result = experiment::run_experiment(config)?;
            if let Some(path) = trace {
                let strategy = config.strategy.build(config.n, config.d)?;
                let (_, trace) = run_trial_traced(
                    config.n,
                    config.d,
                    config.balls()?,
                    strategy.as_ref(),
                    trial_seed(config.seed, 0),
                )?;
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                trace
                    .write_jsonl(BufWriter::new(file))
                    .map_err(|e| Error::io(&path, e))?;
            }
            write_results(&[result], resolved.format, resolved.out)
        }
        Command::Sweep { n_grid, common } => {
            let resolved = common.resolve(None)?;
            let grid = n_grid.or(resolved.file.n_grid.clone()).unwrap_or_default();
            if let Some(&bad) = grid.iter().find(|&&n| n < 3) {
                return Err(Error::Config(format!("grid values must be at least 3, got {bad}")));
            }
            let results = experiment::sweep(&resolved.config, &grid)?;
            write_results(&results, resolved.format, resolved.out)
        }
        Command::Theory { n, d, rho, eps, format } => theory_table(n, d, &rho, eps, format),
        Command::Oracle { n, d, m, strategy, budget } => {
            let spec: StrategySpec = strategy.parse()?;
            let dist = oracle::exact_distribution(n, d, m, &spec, budget)?;
            print!("{}", dist.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("thinlab: {e}");
            ExitCode::FAILURE
        }
    }
}

