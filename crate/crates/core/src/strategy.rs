//! Thinning strategies: the ℓ-threshold rule and the baselines it is
//! compared against.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::StreamRng;
use crate::state::AllocationState;
use crate::theory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

/// A d-thinning decision rule.
///
/// `decide` sees the 1-based round, the suggested bin, the state built from
/// past balls only, and a strategy-local random stream. The engine never
/// consults it at round `d`, which always accepts.
pub trait Strategy: Send + Sync {
    fn name(&self) -> String;

    fn decide(
        &self,
        round: usize,
        bin: usize,
        state: &AllocationState,
        aux: &mut StreamRng,
    ) -> Decision;

    /// Whether decisions depend only on the observable state.
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Parameters of the ℓ-threshold rule: accept iff the round count is at most ⌊ℓ⌋.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub ell: f64,
    pub cap: u64,
}

impl ThresholdParams {
    pub fn new(ell: f64) -> Result<Self> {
        if !(ell.is_finite() && ell > 0.0) {
            return Err(Error::Config(format!("threshold ell must be positive, got {ell}")));
        }
        Ok(ThresholdParams {
            ell,
            cap: ell.floor() as u64,
        })
    }
}

/// The ℓ-threshold rule for one suggestion.
#[inline]
pub fn threshold_decide(
    round: usize,
    bin: usize,
    state: &AllocationState,
    params: &ThresholdParams,
) -> Decision {
    if round >= state.d() || state.round_load(round, bin) <= params.cap {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    params: ThresholdParams,
}

impl Threshold {
    pub fn with_ell(ell: f64) -> Result<Self> {
        Ok(Threshold {
            params: ThresholdParams::new(ell)?,
        })
    }

    pub fn params(&self) -> &ThresholdParams {
        &self.params
    }
}

impl Strategy for Threshold {
    fn name(&self) -> String {
        format!("threshold:ell={}", self.params.ell)
    }

    #[inline]
    fn decide(&self, round: usize, bin: usize, state: &AllocationState, _: &mut StreamRng) -> Decision {
        threshold_decide(round, bin, state, &self.params)
    }
}

/// Never rejects; reduces the process to one-choice on the primary pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysAccept;

impl Strategy for AlwaysAccept {
    fn name(&self) -> String {
        "always-accept".into()
    }

    fn decide(&self, _: usize, _: usize, _: &AllocationState, _: &mut StreamRng) -> Decision {
        Decision::Accept
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaThinningParams {
    pub beta: f64,
}

/// (1+β)-thinning: with probability β a ball may discard its primary
/// suggestion, and then does so greedily by the threshold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaThinning {
    params: BetaThinningParams,
    threshold: ThresholdParams,
}

impl BetaThinning {
    pub fn new(beta: f64, ell: f64, d: usize) -> Result<Self> {
        if d != 2 {
            return Err(Error::Config(format!("beta-thinning needs d = 2, got d = {d}")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
        }
        Ok(BetaThinning {
            params: BetaThinningParams { beta },
            threshold: ThresholdParams::new(ell)?,
        })
    }
}

impl Strategy for BetaThinning {
    fn name(&self) -> String {
        format!(
            "beta-thinning:beta={},ell={}",
            self.params.beta, self.threshold.ell
        )
    }

    fn decide(&self, round: usize, bin: usize, state: &AllocationState, aux: &mut StreamRng) -> Decision {
        if round >= state.d() {
            return Decision::Accept;
        }
        // one permission draw per ball; round 1 is asked exactly once per ball
        if aux.random::<f64>() < self.params.beta {
            threshold_decide(round, bin, state, &self.threshold)
        } else {
            Decision::Accept
        }
    }

    fn is_deterministic(&self) -> bool {
        self.params.beta == 0.0
    }
}

/// Threshold rule with ℓ scaled by `c`.
pub fn aggressive_threshold(c: f64, ell: f64) -> Result<Threshold> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("scale c must be positive, got {c}")));
    }
    Threshold::with_ell(c * ell)
}

/// Strategy selection by name and parameter string, e.g.
/// `threshold`, `threshold:ell=0.5`, `always-accept`,
/// `beta-thinning:beta=0.5`, `threshold-scaled:c=1.5`, `greedy-d-choice`.
///
/// A missing `ell` defaults to `theory::ell(n, d)` when the strategy is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategySpec {
    Threshold { ell: Option<f64> },
    AlwaysAccept,
    BetaThinning { beta: f64, ell: Option<f64> },
    ThresholdScaled { c: f64, ell: Option<f64> },
    /// The d-choice greedy baseline. Not a thinning strategy: it sees all
    /// `d` suggestions at once, so it runs on its own allocator.
    GreedyChoice,
}

impl StrategySpec {
    /// Builds the thinning strategy for an `n`-bin, depth-`d` process.
    pub fn build(&self, n: usize, d: usize) -> Result<Box<dyn Strategy>> {
        let ell_or_default = |ell: Option<f64>| match ell {
            Some(ell) => Ok(ell),
            None => theory::ell(n as f64, d).map_err(|e| {
                Error::Config(format!("{self}: no default ell for n = {n} ({e}); pass ell=..."))
            }),
        };
        Ok(match *self {
            StrategySpec::Threshold { ell } => Box::new(Threshold::with_ell(ell_or_default(ell)?)?),
            StrategySpec::AlwaysAccept => Box::new(AlwaysAccept),
            StrategySpec::BetaThinning { beta, ell } => {
                Box::new(BetaThinning::new(beta, ell_or_default(ell)?, d)?)
            }
            StrategySpec::ThresholdScaled { c, ell } => {
                Box::new(aggressive_threshold(c, ell_or_default(ell)?)?)
            }
            StrategySpec::GreedyChoice => {
                return Err(Error::Config(
                    "greedy-d-choice is a separate allocator, not a thinning strategy".into(),
                ))
            }
        })
    }
}

fn parse_params(body: &str) -> Result<Vec<(&str, f64)>> {
    body.split(',')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
            let value = value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number in '{kv}'")))?;
            Ok((key.trim(), value))
        })
        .collect()
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, body) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let params = parse_params(body)?;
        let mut ell = None;
        let mut beta = None;
        let mut c = None;
        for (key, value) in params {
            let slot = match key {
                "ell" => &mut ell,
                "beta" => &mut beta,
                "c" => &mut c,
                _ => return Err(Error::Config(format!("unknown strategy parameter '{key}'"))),
            };
            *slot = Some(value);
        }
        let unexpected = |what: &str| Error::Config(format!("'{what}' does not apply to {name}"));
        let spec = match name {
            "threshold" => StrategySpec::Threshold { ell },
            "always-accept" => StrategySpec::AlwaysAccept,
            "beta-thinning" => StrategySpec::BetaThinning {
                beta: beta.ok_or_else(|| Error::Config("beta-thinning needs beta=...".into()))?,
                ell,
            },
            "threshold-scaled" => StrategySpec::ThresholdScaled {
                c: c.ok_or_else(|| Error::Config("threshold-scaled needs c=...".into()))?,
                ell,
            },
            "greedy-d-choice" => StrategySpec::GreedyChoice,
            _ => return Err(Error::Config(format!("unknown strategy '{name}'"))),
        };
        let (takes_beta, takes_c, takes_ell) = match spec {
            StrategySpec::Threshold { .. } => (false, false, true),
            StrategySpec::BetaThinning { .. } => (true, false, true),
            StrategySpec::ThresholdScaled { .. } => (false, true, true),
            StrategySpec::AlwaysAccept | StrategySpec::GreedyChoice => (false, false, false),
        };
        if beta.is_some() && !takes_beta {
            return Err(unexpected("beta"));
        }
        if c.is_some() && !takes_c {
            return Err(unexpected("c"));
        }
        if ell.is_some() && !takes_ell {
            return Err(unexpected("ell"));
        }
        Ok(spec)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ell_suffix = |ell: Option<f64>, first: bool| match ell {
            Some(ell) if first => format!(":ell={ell}"),
            Some(ell) => format!(",ell={ell}"),
            None => String::new(),
        };
        match *self {
            StrategySpec::Threshold { ell } => write!(f, "threshold{}", ell_suffix(ell, true)),
            StrategySpec::AlwaysAccept => f.write_str("always-accept"),
            StrategySpec::BetaThinning { beta, ell } => {
                write!(f, "beta-thinning:beta={beta}{}", ell_suffix(ell, false))
            }
            StrategySpec::ThresholdScaled { c, ell } => {
                write!(f, "threshold-scaled:c={c}{}", ell_suffix(ell, false))
            }
            StrategySpec::GreedyChoice => f.write_str("greedy-d-choice"),
        }
    }
}

impl TryFrom<String> for StrategySpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StrategySpec> for String {
    fn from(spec: StrategySpec) -> String {
        spec.to_string()
    }
}
