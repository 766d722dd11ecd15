//! Experiment configuration, parallel trial execution, aggregation and
//! output files.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{trial_seed, Pools};
use crate::state::{run_trial, TrialResult};
use crate::strategy::{Strategy, StrategySpec};
use crate::theory;

/// A non-negative decimal kept exactly, so that `⌊ρn⌋` is computed in
/// integer arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rho {
    digits: u128,
    scale: u32,
}

impl Rho {
    /// `⌊ρ·n⌋`.
    pub fn balls(&self, n: usize) -> Result<u64> {
        let scaled = self
            .digits
            .checked_mul(n as u128)
            .ok_or_else(|| Error::Config("rho * n overflows".into()))?;
        u64::try_from(scaled / 10u128.pow(self.scale))
            .map_err(|_| Error::Config("rho * n overflows".into()))
    }

    pub fn value(&self) -> f64 {
        self.digits as f64 / 10f64.powi(self.scale as i32)
    }
}

impl FromStr for Rho {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("rho must be a positive decimal, got '{s}'"));
        let (int, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
            return Err(bad());
        }
        let frac = frac.trim_end_matches('0');
        let digits: u128 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        if digits == 0 {
            return Err(bad());
        }
        Ok(Rho {
            digits,
            scale: frac.len() as u32,
        })
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = self.digits.to_string();
        let scale = self.scale as usize;
        if scale == 0 {
            return f.write_str(&text);
        }
        let padded = format!("{text:0>width$}", width = scale + 1);
        let (int, frac) = padded.split_at(padded.len() - scale);
        write!(f, "{int}.{frac}")
    }
}

impl TryFrom<String> for Rho {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Rho> for String {
    fn from(r: Rho) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub rho: Rho,
    pub strategy: StrategySpec,
    pub trials: u64,
    pub seed: u64,
    /// Worker threads; 1 runs serially.
    pub threads: usize,
    /// Fill the `runtime_ms` column. Off by default so output files are
    /// byte-identical across runs.
    pub record_runtime: bool,
}

impl ExperimentConfig {
    pub fn new(n: usize, d: usize, rho: &str, strategy: &str, trials: u64, seed: u64) -> Result<Self> {
        Ok(ExperimentConfig {
            n,
            d,
            rho: rho.parse()?,
            strategy: strategy.parse()?,
            trials,
            seed,
            threads: 1,
            record_runtime: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn balls(&self) -> Result<u64> {
        self.rho.balls(self.n)
    }
}

/// Greedy d-choice: each ball samples `d` bins (one from each round's pool)
/// and joins the least loaded, ties going to the lowest index.
pub fn run_greedy_d_choice(n: usize, d: usize, m: u64, seed: u64) -> Result<TrialResult> {
    if d == 0 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    let start = Instant::now();
    let mut pools = Pools::seeded(n, d, seed)?;
    let mut loads = vec![0u64; n];
    let mut psi_seen = vec![false; n];
    for _ in 0..m {
        let first = pools.draw(1)?;
        psi_seen[first] = true;
        let mut best = first;
        for round in 2..=d {
            let bin = pools.draw(round)?;
            if (loads[bin], bin) < (loads[best], best) {
                best = bin;
            }
        }
        loads[best] += 1;
    }
    let mut histogram = std::collections::BTreeMap::new();
    for &l in &loads {
        *histogram.entry(l).or_insert(0) += 1;
    }
    let max_load = loads.iter().copied().max().unwrap_or(0);
    Ok(TrialResult {
        n,
        d,
        balls: m,
        seed,
        max_load,
        histogram,
        rejection_counters: vec![m],
        phi: loads.iter().filter(|&&l| l > 0).count() as u64,
        psi: psi_seen.iter().filter(|&&s| s).count() as u64,
        chosen_counts: vec![m],
        round_max: vec![max_load],
        wall_time: start.elapsed(),
    })
}

enum Runner {
    Thinning(Box<dyn Strategy>),
    Greedy,
}

impl Runner {
    fn run(&self, config: &ExperimentConfig, m: u64, seed: u64) -> Result<TrialResult> {
        match self {
            Runner::Thinning(strategy) => run_trial(config.n, config.d, m, strategy.as_ref(), seed),
            Runner::Greedy => run_greedy_d_choice(config.n, config.d, m, seed),
        }
    }
}

/// All trials of `config`, in trial-index order.
pub fn run_trials(config: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    config.validate()?;
    let m = config.balls()?;
    let runner = match config.strategy {
        StrategySpec::GreedyChoice => Runner::Greedy,
        ref spec => Runner::Thinning(spec.build(config.n, config.d)?),
    };
    let one = |i: u64| runner.run(config, m, trial_seed(config.seed, i));
    if config.threads == 1 {
        return (0..config.trials).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..config.trials).into_par_iter().map(one).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub n: usize,
    pub d: usize,
    pub rho: Rho,
    pub m: u64,
    pub strategy: StrategySpec,
    pub trials: u64,
    pub seed: u64,
    pub maxload_mean: f64,
    pub maxload_min: u64,
    pub maxload_p50: u64,
    pub maxload_p95: u64,
    pub maxload_p99: u64,
    pub maxload_max: u64,
    /// `ℓ(n, d)`; absent for `n < 3`.
    pub ell: Option<f64>,
    /// Mean max load over `d·ℓ`.
    pub ratio_to_dell: Option<f64>,
    /// Mean of `r_2..r_d`.
    pub r_mean: Vec<f64>,
    pub phi: f64,
    pub psi: f64,
    /// Fraction of trials with `r_i ≤ β_i` for every `i = 2..=d`.
    pub frac_r_le_beta: Option<f64>,
    pub runtime_ms: u64,
}

/// Nearest-rank quantile of sorted data, `q` in `(0, 1]`.
pub fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn aggregate(config: &ExperimentConfig, trials: &[TrialResult], runtime_ms: u64) -> Result<AggregateResult> {
    if trials.is_empty() {
        return Err(Error::Usage("cannot aggregate zero trials".into()));
    }
    let count = trials.len() as f64;
    let mut loads: Vec<u64> = trials.iter().map(|t| t.max_load).collect();
    loads.sort_unstable();
    let maxload_mean = trials.iter().map(|t| t.max_load as f64).sum::<f64>() / count;

    let ell = theory::ell(config.n as f64, config.d).ok();
    let ratio_to_dell = ell.map(|ell| maxload_mean / (config.d as f64 * ell));
    let r_mean = (1..config.d)
        .map(|i| {
            trials
                .iter()
                .map(|t| t.rejection_counters.get(i).copied().unwrap_or(0) as f64)
                .sum::<f64>()
                / count
        })
        .collect();

    let thinning = !matches!(config.strategy, StrategySpec::GreedyChoice);
    let frac_r_le_beta = match theory::beta_sequence(config.n as f64, config.d, config.rho.value()) {
        Ok(seq) if thinning && config.d > 1 => {
            let within = trials
                .iter()
                .filter(|t| {
                    (1..config.d).all(|i| t.rejection_counters[i] as f64 <= seq.betas[i])
                })
                .count();
            Some(within as f64 / count)
        }
        _ => None,
    };

    Ok(AggregateResult {
        n: config.n,
        d: config.d,
        rho: config.rho.clone(),
        m: config.balls()?,
        strategy: config.strategy.clone(),
        trials: trials.len() as u64,
        seed: config.seed,
        maxload_mean,
        maxload_min: loads[0],
        maxload_p50: nearest_rank(&loads, 0.50),
        maxload_p95: nearest_rank(&loads, 0.95),
        maxload_p99: nearest_rank(&loads, 0.99),
        maxload_max: *loads.last().unwrap(),
        ell,
        ratio_to_dell,
        r_mean,
        phi: trials.iter().map(|t| t.phi as f64).sum::<f64>() / count,
        psi: trials.iter().map(|t| t.psi as f64).sum::<f64>() / count,
        frac_r_le_beta,
        runtime_ms: if config.record_runtime { runtime_ms } else { 0 },
    })
}

/// Runs and aggregates one configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<AggregateResult> {
    let start = Instant::now();
    let trials = run_trials(config)?;
    aggregate(config, &trials, start.elapsed().as_millis() as u64)
}

/// One aggregate per grid value of `n`; everything else comes from `base`.
pub fn sweep(base: &ExperimentConfig, grid: &[usize]) -> Result<Vec<AggregateResult>> {
    if grid.is_empty() {
        return Err(Error::Config("n-grid is empty".into()));
    }
    grid.iter()
        .map(|&n| {
            run_experiment(&ExperimentConfig {
                n,
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Plotdata,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes results as CSV (one row per aggregate, LF endings).
pub fn write_csv<W: Write>(results: &[AggregateResult], out: W) -> Result<()> {
    let max_d = results.iter().map(|r| r.d).max().unwrap_or(1);
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header: Vec<String> = [
        "n", "d", "rho", "m", "strategy", "trials", "seed", "maxload_mean", "maxload_min",
        "maxload_p50", "maxload_p95", "maxload_p99", "maxload_max", "ell", "ratio_to_dell",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((2..=max_d).map(|i| format!("r{i}_mean")));
    header.extend(["phi", "psi", "frac_r_le_beta", "runtime_ms"].map(String::from));
    writer.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.n.to_string(),
            r.d.to_string(),
            r.rho.to_string(),
            r.m.to_string(),
            r.strategy.to_string(),
            r.trials.to_string(),
            r.seed.to_string(),
            r.maxload_mean.to_string(),
            r.maxload_min.to_string(),
            r.maxload_p50.to_string(),
            r.maxload_p95.to_string(),
            r.maxload_p99.to_string(),
            r.maxload_max.to_string(),
            opt(r.ell),
            opt(r.ratio_to_dell),
        ];
        row.extend((0..max_d - 1).map(|i| opt(r.r_mean.get(i).copied())));
        row.extend([
            r.phi.to_string(),
            r.psi.to_string(),
            opt(r.frac_r_le_beta),
            r.runtime_ms.to_string(),
        ]);
        writer.write_record(&row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `n maxload_mean d_ell` triplets for plotting against the prediction.
pub fn write_plotdata<W: Write>(results: &[AggregateResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "# n maxload_mean d_ell")?;
    for r in results {
        let dell = r.ell.map(|ell| r.d as f64 * ell);
        writeln!(out, "{} {} {}", r.n, r.maxload_mean, opt(dell))?;
    }
    Ok(())
}

pub fn emit(results: &[AggregateResult], format: OutputFormat, path: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Usage("nothing to emit".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        OutputFormat::Csv => write_csv(results, &mut out)?,
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, results).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        OutputFormat::Plotdata => write_plotdata(results, &mut out).map_err(|e| Error::io(path, e))?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// JSON config file mirroring the command-line flags. Every field is
/// optional; flags given on the command line win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub n: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub d: Option<usize>,
    pub rho: Option<String>,
    pub strategy: Option<String>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub timing: Option<bool>,
    pub trace: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_is_exact() {
        let rho: Rho = "0.1".parse().unwrap();
        assert_eq!(rho.balls(30).unwrap(), 3);
        let rho: Rho = "1.25".parse().unwrap();
        assert_eq!(rho.balls(7).unwrap(), 8);
        assert_eq!(rho.to_string(), "1.25");
        assert_eq!("5".parse::<Rho>().unwrap().balls(1).unwrap(), 5);
        assert_eq!("0.050".parse::<Rho>().unwrap().to_string(), "0.05");
        assert_eq!(".5".parse::<Rho>().unwrap().to_string(), "0.5");
        for bad in ["0", "-1", "abc", "", ".", "1e3", "0.000"] {
            assert!(bad.parse::<Rho>().is_err(), "{bad}");
        }
    }

    #[test]
    fn nearest_rank_quantiles() {
        let data = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(nearest_rank(&data, 0.5), 5);
        assert_eq!(nearest_rank(&data, 0.95), 10);
        assert_eq!(nearest_rank(&[7], 0.99), 7);
    }

    #[test]
    fn single_bin_experiment() {
        let config = ExperimentConfig::new(1, 1, "5", "always-accept", 3, 0).unwrap();
        let agg = run_experiment(&config).unwrap();
        assert_eq!((agg.maxload_min, agg.maxload_max), (5, 5));
        assert_eq!(agg.ell, None);
        assert_eq!(agg.frac_r_le_beta, None);
    }

    #[test]
    fn invalid_configs() {
        let mut config = ExperimentConfig::new(10, 2, "1", "threshold", 0, 0).unwrap();
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
        config.trials = 1;
        config.threads = 0;
        assert!(run_experiment(&config).is_err());
        assert!(ExperimentConfig::new(10, 2, "1", "bogus", 1, 0).is_err());
        assert!(sweep(&ExperimentConfig::new(10, 2, "1", "threshold", 1, 0).unwrap(), &[]).is_err());
    }

    #[test]
    fn greedy_one_choice_reduces_to_pool_one() {
        let g = run_greedy_d_choice(50, 1, 300, 11).unwrap();
        let a = run_trial(50, 1, 300, &crate::strategy::AlwaysAccept, 11).unwrap();
        assert_eq!(g.histogram, a.histogram);
        assert_eq!(g.max_load, a.max_load);
    }

    /// Greedy two-choice, n = 2, m = 2, enumerated over the 16 outcomes.
    #[test]
    fn greedy_two_bins_enumeration() {
        let mut doubled = 0;
        for outcome in 0..16u32 {
            let c = [outcome & 1, (outcome >> 1) & 1, (outcome >> 2) & 1, (outcome >> 3) & 1];
            let mut loads = [0u32; 2];
            for ball in 0..2 {
                let (a, b) = (c[2 * ball] as usize, c[2 * ball + 1] as usize);
                let best = if (loads[b], b) < (loads[a], a) { b } else { a };
                loads[best] += 1;
            }
            doubled += u32::from(loads.contains(&2));
        }
        assert_eq!(doubled, 4);

        let trials = 40_000u64;
        let hits = (0..trials)
            .filter(|&i| run_greedy_d_choice(2, 2, 2, trial_seed(5, i)).unwrap().max_load == 2)
            .count() as f64;
        let p = hits / trials as f64;
        let se = (0.25f64 * 0.75 / trials as f64).sqrt();
        assert!((p - 0.25).abs() < 4.0 * se, "{p}");
    }

    #[test]
    fn csv_layout() {
        let config = ExperimentConfig::new(100, 2, "1", "threshold", 2, 3).unwrap();
        let agg = run_experiment(&config).unwrap();
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&agg), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        assert_eq!(lines.len(), 2);
        assert!(!text.contains('\r'));
        assert_eq!(
            lines[0],
            "n,d,rho,m,strategy,trials,seed,maxload_mean,maxload_min,maxload_p50,maxload_p95,\
             maxload_p99,maxload_max,ell,ratio_to_dell,r2_mean,phi,psi,frac_r_le_beta,runtime_ms"
        );
        assert!(lines[1].starts_with("100,2,1,100,threshold,2,3,"));
    }

    #[test]
    fn json_round_trip() {
        let config = ExperimentConfig::new(200, 3, "0.5", "threshold-scaled:c=2", 4, 3).unwrap();
        let agg = run_experiment(&config).unwrap();
        let text = serde_json::to_string(&agg).unwrap();
        let back: AggregateResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, agg);
    }

    #[test]
    fn plotdata_triplets() {
        let config = ExperimentConfig::new(1000, 2, "1", "threshold", 1, 3).unwrap();
        let agg = run_experiment(&config).unwrap();
        let mut buf = Vec::new();
        write_plotdata(&[agg.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let fields: Vec<f64> = line.split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(fields[0], 1000.0);
        assert_eq!(fields[1], agg.maxload_mean);
        assert!((fields[2] - 2.0 * agg.ell.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ConfigFile>(r#"{"n": 10, "bogus": 1}"#).is_err());
        let cfg: ConfigFile = serde_json::from_str(r#"{"n-grid": [10, 20], "format": "json"}"#).unwrap();
        assert_eq!(cfg.n_grid, Some(vec![10, 20]));
        assert_eq!(cfg.format, Some(OutputFormat::Json));
    }
}
