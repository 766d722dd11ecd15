//! Exact max-load distributions for tiny instances by walking the whole
//! decision tree, and a z-score comparison against the simulator.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pool::{stream_rng, trial_seed, StreamRng, AUX_STREAM};
use crate::state::{run_trial, AllocationState, BinSet};
use crate::strategy::{Decision, Strategy, StrategySpec};

pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

/// Exact rational masses `numerator / denominator` with `denominator = n^(m·d)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RationalMasses {
    pub denominator: u128,
    pub numerators: BTreeMap<u64, u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactDistribution {
    pub n: usize,
    pub d: usize,
    pub m: u64,
    pub strategy: StrategySpec,
    /// max load -> probability
    pub masses: BTreeMap<u64, f64>,
    /// Present when `n^(m·d)` fits in 128 bits.
    pub rational: Option<RationalMasses>,
}

impl ExactDistribution {
    pub fn probability(&self, max_load: u64) -> f64 {
        self.masses.get(&max_load).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.values().sum()
    }

    /// `maxload,probability` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("maxload,probability\n");
        for (load, p) in &self.masses {
            out.push_str(&format!("{load},{p}\n"));
        }
        out
    }
}

enum Weights {
    Exact {
        // powers[k] = n^k
        powers: Vec<u128>,
        depth: usize,
        acc: BTreeMap<u64, u128>,
    },
    // Neumaier-compensated sums of n^-k
    Float {
        inv_n: f64,
        acc: BTreeMap<u64, (f64, f64)>,
    },
}

impl Weights {
    fn new(n: usize, depth: usize) -> Self {
        let mut powers = vec![1u128];
        for _ in 0..depth {
            match powers.last().unwrap().checked_mul(n as u128) {
                Some(p) => powers.push(p),
                None => {
                    return Weights::Float {
                        inv_n: 1.0 / n as f64,
                        acc: BTreeMap::new(),
                    }
                }
            }
        }
        Weights::Exact {
            powers,
            depth,
            acc: BTreeMap::new(),
        }
    }

    fn add(&mut self, max_load: u64, suggestions_on_path: usize) {
        match self {
            Weights::Exact { powers, depth, acc } => {
                *acc.entry(max_load).or_insert(0) += powers[*depth - suggestions_on_path];
            }
            Weights::Float { inv_n, acc } => {
                let w = inv_n.powi(suggestions_on_path as i32);
                let (sum, comp) = acc.entry(max_load).or_insert((0.0, 0.0));
                let t = *sum + w;
                if sum.abs() >= w.abs() {
                    *comp += (*sum - t) + w;
                } else {
                    *comp += (w - t) + *sum;
                }
                *sum = t;
            }
        }
    }
}

struct Walker<'a> {
    n: usize,
    d: usize,
    strategy: &'a dyn Strategy,
    state: AllocationState,
    suggestions: Vec<usize>,
    aux: StreamRng,
    nodes: u64,
    budget: u64,
    weights: Weights,
}

impl Walker<'_> {
    fn place(&mut self, balls_left: u64, depth: usize) -> Result<()> {
        if balls_left == 0 {
            let max = self.state.max_load(BinSet::All)?;
            self.weights.add(max, depth);
            return Ok(());
        }
        self.suggest(1, balls_left, depth)
    }

    fn suggest(&mut self, round: usize, balls_left: u64, depth: usize) -> Result<()> {
        for bin in 0..self.n {
            self.nodes += 1;
            if self.nodes > self.budget {
                return Err(Error::NodeBudget {
                    budget: self.budget,
                });
            }
            self.suggestions.push(bin);
            let accept = round == self.d
                || self.strategy.decide(round, bin, &self.state, &mut self.aux) == Decision::Accept;
            if accept {
                let taken = self.suggestions.clone();
                let psi_before = self.state.commit(&taken);
                self.suggestions.clear();
                self.place(balls_left - 1, depth + 1)?;
                self.state.uncommit(&taken, psi_before);
                self.suggestions = taken;
            } else {
                self.suggest(round + 1, balls_left, depth + 1)?;
            }
            self.suggestions.pop();
        }
        Ok(())
    }
}

/// Exact max-load distribution of `m` balls, `n` bins, depth `d` under a
/// deterministic strategy.
pub fn exact_distribution(
    n: usize,
    d: usize,
    m: u64,
    spec: &StrategySpec,
    node_budget: u64,
) -> Result<ExactDistribution> {
    let state = AllocationState::new(n, d)?;
    let strategy = spec.build(n, d)?;
    if !strategy.is_deterministic() {
        return Err(Error::Config(format!(
            "{spec} makes random decisions; the exact oracle needs a deterministic strategy"
        )));
    }
    let depth = usize::try_from(m)
        .ok()
        .and_then(|m| m.checked_mul(d))
        .ok_or_else(|| Error::Config("instance far beyond any node budget".into()))?;
    let mut walker = Walker {
        n,
        d,
        strategy: strategy.as_ref(),
        state,
        suggestions: Vec::with_capacity(d),
        aux: stream_rng(0, AUX_STREAM),
        nodes: 0,
        budget: node_budget,
        weights: Weights::new(n, depth),
    };
    walker.place(m, 0)?;

    let (masses, rational) = match walker.weights {
        Weights::Exact { powers, depth, acc } => {
            let denominator = powers[depth];
            let masses = acc
                .iter()
                .map(|(&k, &num)| (k, num as f64 / denominator as f64))
                .collect();
            (
                masses,
                Some(RationalMasses {
                    denominator,
                    numerators: acc,
                }),
            )
        }
        Weights::Float { acc, .. } => (acc.into_iter().map(|(k, (s, c))| (k, s + c)).collect(), None),
    };
    Ok(ExactDistribution {
        n,
        d,
        m,
        strategy: spec.clone(),
        masses,
        rational,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomComparison {
    pub max_load: u64,
    pub exact: f64,
    pub empirical: f64,
    /// `(empirical − exact) / sqrt(exact(1 − exact)/trials)`; zero-variance
    /// atoms give 0 on an exact match and infinity otherwise.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalComparison {
    pub trials: u64,
    pub atoms: Vec<AtomComparison>,
    pub max_abs_z: f64,
    pub passed: bool,
}

pub const MAX_ABS_Z: f64 = 4.0;

/// Simulates `trials` runs of the oracle's instance and compares frequencies
/// atom by atom. Passes iff every `|z| ≤ 4`.
pub fn compare_empirical(dist: &ExactDistribution, trials: u64, seed: u64) -> Result<EmpiricalComparison> {
    if trials < 1000 {
        return Err(Error::Usage(format!("need at least 1000 trials, got {trials}")));
    }
    let strategy = dist.strategy.build(dist.n, dist.d)?;
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for i in 0..trials {
        let r = run_trial(dist.n, dist.d, dist.m, strategy.as_ref(), trial_seed(seed, i))?;
        *counts.entry(r.max_load).or_insert(0) += 1;
    }
    let support: std::collections::BTreeSet<u64> =
        dist.masses.keys().chain(counts.keys()).copied().collect();
    let atoms: Vec<AtomComparison> = support
        .into_iter()
        .map(|load| {
            let exact = dist.probability(load);
            let empirical = counts.get(&load).copied().unwrap_or(0) as f64 / trials as f64;
            let var = exact * (1.0 - exact) / trials as f64;
            let z = if var > 1e-15 {
                (empirical - exact) / var.sqrt()
            } else if (empirical - exact).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            AtomComparison {
                max_load: load,
                exact,
                empirical,
                z,
            }
        })
        .collect();
    let max_abs_z = atoms.iter().map(|a| a.z.abs()).fold(0.0, f64::max);
    Ok(EmpiricalComparison {
        trials,
        atoms,
        max_abs_z,
        passed: max_abs_z <= MAX_ABS_Z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> StrategySpec {
        s.parse().unwrap()
    }

    #[test]
    fn two_bins_cap_zero() {
        let dist = exact_distribution(2, 2, 2, &spec("threshold:ell=0.5"), DEFAULT_NODE_BUDGET).unwrap();
        let rational = dist.rational.as_ref().unwrap();
        assert_eq!(rational.denominator, 16);
        assert_eq!(rational.numerators, BTreeMap::from([(1, 12), (2, 4)]));
        assert_eq!(dist.masses, BTreeMap::from([(1, 0.75), (2, 0.25)]));
    }

    #[test]
    fn two_bins_one_choice() {
        let dist = exact_distribution(2, 1, 2, &spec("always-accept"), DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(dist.masses, BTreeMap::from([(1, 0.5), (2, 0.5)]));
    }

    #[test]
    fn single_bin_is_a_point_mass() {
        let dist = exact_distribution(1, 2, 3, &spec("threshold:ell=0.5"), DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(dist.masses, BTreeMap::from([(3, 1.0)]));
        let cmp = compare_empirical(&dist, 1000, 3).unwrap();
        assert!(cmp.passed);
        assert_eq!(cmp.atoms[0].empirical, 1.0);
    }

    #[test]
    fn budget_and_randomized_strategies_refused() {
        assert!(matches!(
            exact_distribution(4, 3, 5, &spec("always-accept"), 1000),
            Err(Error::NodeBudget { budget: 1000 })
        ));
        assert!(matches!(
            exact_distribution(2, 2, 2, &spec("beta-thinning:beta=0.5,ell=0.5"), DEFAULT_NODE_BUDGET),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compare_needs_trials() {
        let dist = exact_distribution(2, 1, 2, &spec("always-accept"), DEFAULT_NODE_BUDGET).unwrap();
        assert!(matches!(compare_empirical(&dist, 0, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn float_fallback_matches_exact() {
        // n^(m d) = 3^6 fits; force the float path through Weights directly
        let mut exact = Weights::new(3, 6);
        let mut float = Weights::Float { inv_n: 1.0 / 3.0, acc: BTreeMap::new() };
        for k in [1usize, 3, 6, 6, 2] {
            exact.add(1, k);
            float.add(1, k);
        }
        let (Weights::Exact { acc, powers, .. }, Weights::Float { acc: facc, .. }) = (exact, float) else {
            unreachable!()
        };
        let (s, c) = facc[&1];
        assert!(((acc[&1] as f64 / powers[6] as f64) - (s + c)).abs() < 1e-15);
    }

    #[test]
    fn support_and_normalization() {
        for (n, d, m, s) in [
            (3, 2, 3, "threshold:ell=0.5"),
            (3, 2, 3, "threshold:ell=1.5"),
            (4, 3, 3, "threshold:ell=0.5"),
            (3, 3, 4, "always-accept"),
        ] {
            let dist = exact_distribution(n, d, m, &spec(s), DEFAULT_NODE_BUDGET).unwrap();
            assert!((dist.total_mass() - 1.0).abs() < 1e-12);
            let lo = m.div_ceil(n as u64);
            assert!(dist.masses.keys().all(|&k| k >= lo && k <= m));
            let r = dist.rational.unwrap();
            assert_eq!(r.numerators.values().sum::<u128>(), r.denominator);
        }
    }
}
