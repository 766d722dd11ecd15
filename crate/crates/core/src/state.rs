//! The d-thinning allocation process.
//!
//! Bins are 0-based (`0..n`); rounds are 1-based (`1..=d`) to line up with
//! the usual primary/secondary/... naming, and ball indices `t` count from 1.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{stream_rng, Pool, Pools, StreamRng, AUX_STREAM};
use crate::strategy::{Decision, Strategy};

/// A bin known to lie in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinIndex(usize);

impl BinIndex {
    pub fn new(value: usize, n: usize) -> Result<Self> {
        if value < n {
            Ok(BinIndex(value))
        } else {
            Err(Error::Usage(format!("bin {value} out of range for n = {n}")))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// A subset of bins: either all of `[0, n)` or a strictly increasing list.
#[derive(Debug, Clone, Copy)]
pub enum BinSet<'a> {
    All,
    Sorted(&'a [usize]),
}

impl<'a> BinSet<'a> {
    /// Validates that `bins` is strictly increasing and inside `[0, n)`.
    pub fn sorted(bins: &'a [usize], n: usize) -> Result<Self> {
        if bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage("bin subset must be strictly increasing".into()));
        }
        if let Some(&last) = bins.last() {
            BinIndex::new(last, n)?;
        }
        Ok(BinSet::Sorted(bins))
    }

    fn is_empty(&self, n: usize) -> bool {
        match self {
            BinSet::All => n == 0,
            BinSet::Sorted(bins) => bins.is_empty(),
        }
    }
}

/// Live state of one allocation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationState {
    n: usize,
    d: usize,
    t: u64,
    loads: Vec<u64>,
    // row-major d x n: round_loads[(i - 1) * n + m]
    round_loads: Vec<u64>,
    rejection_counters: Vec<u64>,
    chosen_counts: Vec<u64>,
    psi_seen: Vec<bool>,
    draws_used: Vec<u64>,
}

impl AllocationState {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("bin count n must be positive".into()));
        }
        if d == 0 {
            return Err(Error::Config("thinning depth d must be at least 1".into()));
        }
        Ok(AllocationState {
            n,
            d,
            t: 0,
            loads: vec![0; n],
            round_loads: vec![0; n * d],
            rejection_counters: vec![0; d],
            chosen_counts: vec![0; d],
            psi_seen: vec![false; n],
            draws_used: vec![0; d],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Balls allocated so far.
    pub fn balls(&self) -> u64 {
        self.t
    }

    pub fn loads(&self) -> &[u64] {
        &self.loads
    }

    pub fn load(&self, bin: BinIndex) -> u64 {
        self.loads[bin.get()]
    }

    /// Balls that accepted `bin` at `round` (1-based).
    #[inline]
    pub fn round_load(&self, round: usize, bin: usize) -> u64 {
        self.round_loads[(round - 1) * self.n + bin]
    }

    pub fn round_loads(&self, round: usize) -> &[u64] {
        let start = (round - 1) * self.n;
        &self.round_loads[start..start + self.n]
    }

    /// `r_i(t)` for `i = 1..=d`; `r_1 = t`.
    pub fn rejection_counters(&self) -> &[u64] {
        &self.rejection_counters
    }

    /// Number of balls with `Chosen = i`, indexed from round 1.
    pub fn chosen_counts(&self) -> &[u64] {
        &self.chosen_counts
    }

    pub fn psi_seen(&self) -> &[bool] {
        &self.psi_seen
    }

    pub fn draws_used(&self) -> &[u64] {
        &self.draws_used
    }

    fn check_subset(&self, subset: BinSet<'_>) -> Result<()> {
        if let BinSet::Sorted(bins) = subset {
            BinSet::sorted(bins, self.n)?;
        }
        Ok(())
    }

    fn fold_subset<T>(&self, subset: BinSet<'_>, init: T, f: impl Fn(T, usize) -> T) -> T {
        match subset {
            BinSet::All => (0..self.n).fold(init, f),
            BinSet::Sorted(bins) => bins.iter().copied().fold(init, f),
        }
    }

    /// Largest load over `subset`.
    pub fn max_load(&self, subset: BinSet<'_>) -> Result<u64> {
        if subset.is_empty(self.n) {
            return Err(Error::Usage("max_load over an empty subset".into()));
        }
        self.check_subset(subset)?;
        Ok(match subset {
            BinSet::All => self.loads.iter().copied().max().unwrap_or(0),
            BinSet::Sorted(_) => self.fold_subset(subset, 0, |acc, m| acc.max(self.loads[m])),
        })
    }

    /// Number of non-empty bins in `subset`.
    pub fn phi(&self, subset: BinSet<'_>) -> Result<u64> {
        self.check_subset(subset)?;
        Ok(self.fold_subset(subset, 0, |acc, m| acc + u64::from(self.loads[m] > 0)))
    }

    /// Number of bins in `subset` ever offered as a primary suggestion.
    pub fn psi(&self, subset: BinSet<'_>) -> Result<u64> {
        self.check_subset(subset)?;
        Ok(self.fold_subset(subset, 0, |acc, m| acc + u64::from(self.psi_seen[m])))
    }

    /// Record one ball whose suggestions were `suggestions`, the last of which
    /// it accepted. Returns the previous `psi_seen` flag of the primary bin so
    /// the move can be undone.
    pub(crate) fn commit(&mut self, suggestions: &[usize]) -> bool {
        let chosen = suggestions.len();
        let bin = suggestions[chosen - 1];
        self.t += 1;
        self.loads[bin] += 1;
        self.round_loads[(chosen - 1) * self.n + bin] += 1;
        self.chosen_counts[chosen - 1] += 1;
        for r in &mut self.rejection_counters[..chosen] {
            *r += 1;
        }
        std::mem::replace(&mut self.psi_seen[suggestions[0]], true)
    }

    pub(crate) fn uncommit(&mut self, suggestions: &[usize], psi_before: bool) {
        let chosen = suggestions.len();
        let bin = suggestions[chosen - 1];
        self.t -= 1;
        self.loads[bin] -= 1;
        self.round_loads[(chosen - 1) * self.n + bin] -= 1;
        self.chosen_counts[chosen - 1] -= 1;
        for r in &mut self.rejection_counters[..chosen] {
            *r -= 1;
        }
        self.psi_seen[suggestions[0]] = psi_before;
    }

    /// Allocates one ball, writing the suggestions it saw into `suggestions`.
    ///
    /// Round `i` draws from pool `i` only after rounds `1..i` were rejected;
    /// round `d` is never asked and always accepts.
    pub fn step_into<P: Pool>(
        &mut self,
        strategy: &dyn Strategy,
        pools: &mut Pools<P>,
        aux: &mut StreamRng,
        suggestions: &mut Vec<usize>,
    ) -> Result<()> {
        suggestions.clear();
        for round in 1..=self.d {
            let bin = pools.draw(round)?;
            self.draws_used[round - 1] += 1;
            suggestions.push(bin);
            if round == self.d || strategy.decide(round, bin, self, aux) == Decision::Accept {
                break;
            }
        }
        self.commit(suggestions);
        Ok(())
    }

    /// Allocates one ball and returns its decision record.
    pub fn step<P: Pool>(
        &mut self,
        strategy: &dyn Strategy,
        pools: &mut Pools<P>,
        aux: &mut StreamRng,
    ) -> Result<DecisionRecord> {
        let mut suggestions = Vec::with_capacity(self.d);
        self.step_into(strategy, pools, aux, &mut suggestions)?;
        Ok(DecisionRecord::new(self.t, suggestions))
    }
}

/// What happened to one ball.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// 1-based ball index.
    pub t: u64,
    /// 1-based round whose suggestion was accepted.
    pub chosen: usize,
    /// One suggestion per attempted round; the last is the final bin.
    pub suggestions: Vec<usize>,
    #[serde(rename = "final")]
    pub final_bin: usize,
}

impl DecisionRecord {
    fn new(t: u64, suggestions: Vec<usize>) -> Self {
        DecisionRecord {
            t,
            chosen: suggestions.len(),
            final_bin: *suggestions.last().expect("at least one round"),
            suggestions,
        }
    }
}

/// Per-ball history of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub d: usize,
    pub records: Vec<DecisionRecord>,
}

impl Trace {
    /// The `(d - j + 1)`-thinning trace induced on the balls whose first
    /// `j - 1` suggestions were rejected. Round `i` of the view is round
    /// `i + j - 1` of the original, and the `r`-th view ball is the original
    /// ball at which pool `j` was read for the `r`-th time.
    pub fn induced_view(&self, j: usize) -> Result<Trace> {
        if j == 0 || j > self.d {
            return Err(Error::Usage(format!(
                "induced view index {j} outside [1, {}]",
                self.d
            )));
        }
        let records = self
            .records
            .iter()
            .filter(|rec| rec.chosen >= j)
            .enumerate()
            .map(|(r, rec)| DecisionRecord {
                t: r as u64 + 1,
                chosen: rec.chosen - j + 1,
                suggestions: rec.suggestions[j - 1..].to_vec(),
                final_bin: rec.final_bin,
            })
            .collect();
        Ok(Trace {
            d: self.d - j + 1,
            records,
        })
    }

    /// JSON lines, one record per ball.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Summary of one completed trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub n: usize,
    pub d: usize,
    pub balls: u64,
    pub seed: u64,
    pub max_load: u64,
    /// load value -> number of bins with that load
    pub histogram: BTreeMap<u64, u64>,
    pub rejection_counters: Vec<u64>,
    pub phi: u64,
    pub psi: u64,
    pub chosen_counts: Vec<u64>,
    /// Largest per-round load, `max_m round_loads[i][m]`, for each round.
    pub round_max: Vec<u64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrialResult {
    pub fn from_state(state: &AllocationState, seed: u64, wall_time: Duration) -> Self {
        let mut histogram = BTreeMap::new();
        for &load in state.loads() {
            *histogram.entry(load).or_insert(0) += 1;
        }
        let round_max = (1..=state.d())
            .map(|i| state.round_loads(i).iter().copied().max().unwrap_or(0))
            .collect();
        TrialResult {
            n: state.n(),
            d: state.d(),
            balls: state.balls(),
            seed,
            max_load: state.max_load(BinSet::All).unwrap_or(0),
            histogram,
            rejection_counters: state.rejection_counters().to_vec(),
            phi: state.phi(BinSet::All).unwrap_or(0),
            psi: state.psi(BinSet::All).unwrap_or(0),
            chosen_counts: state.chosen_counts().to_vec(),
            round_max,
            wall_time,
        }
    }

    /// Equality of everything except wall time.
    pub fn outcome_eq(&self, other: &TrialResult) -> bool {
        serde_json::to_vec(self).ok() == serde_json::to_vec(other).ok()
    }
}

fn simulate(
    n: usize,
    d: usize,
    m: u64,
    strategy: &dyn Strategy,
    seed: u64,
    mut trace: Option<&mut Vec<DecisionRecord>>,
) -> Result<TrialResult> {
    let start = Instant::now();
    let mut state = AllocationState::new(n, d)?;
    let mut pools = Pools::seeded(n, d, seed)?;
    let mut aux = stream_rng(seed, AUX_STREAM);
    let mut suggestions = Vec::with_capacity(d);
    for _ in 0..m {
        state.step_into(strategy, &mut pools, &mut aux, &mut suggestions)?;
        if let Some(records) = trace.as_deref_mut() {
            records.push(DecisionRecord::new(state.balls(), suggestions.clone()));
        }
    }
    Ok(TrialResult::from_state(&state, seed, start.elapsed()))
}

/// Throws `m` balls into `n` bins under `strategy` with pools seeded from `seed`.
pub fn run_trial(
    n: usize,
    d: usize,
    m: u64,
    strategy: &dyn Strategy,
    seed: u64,
) -> Result<TrialResult> {
    simulate(n, d, m, strategy, seed, None)
}

/// [`run_trial`] that also keeps the per-ball trace.
pub fn run_trial_traced(
    n: usize,
    d: usize,
    m: u64,
    strategy: &dyn Strategy,
    seed: u64,
) -> Result<(TrialResult, Trace)> {
    let mut records = Vec::new();
    let result = simulate(n, d, m, strategy, seed, Some(&mut records))?;
    Ok((result, Trace { d, records }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{AlwaysAccept, Threshold};

    fn aux() -> StreamRng {
        stream_rng(0, AUX_STREAM)
    }

    /// n = 2, d = 2, cap 0; primaries (0, 0), secondary (0).
    fn two_ball_replay() -> (AllocationState, Vec<DecisionRecord>) {
        let strategy = Threshold::with_ell(0.5).unwrap();
        let mut state = AllocationState::new(2, 2).unwrap();
        let mut pools = Pools::replay(vec![vec![0, 0], vec![0]]);
        let mut rng = aux();
        let records = (0..2)
            .map(|_| state.step(&strategy, &mut pools, &mut rng).unwrap())
            .collect();
        (state, records)
    }

    #[test]
    fn new_state_is_empty() {
        let s = AllocationState::new(3, 2).unwrap();
        assert_eq!(s.loads(), &[0, 0, 0]);
        assert_eq!(s.balls(), 0);
        assert_eq!(s.rejection_counters(), &[0, 0]);
        assert!(s.psi_seen().iter().all(|&x| !x));
        assert!(AllocationState::new(1, 1).is_ok());
    }

    #[test]
    fn new_state_rejects_zero() {
        assert!(matches!(AllocationState::new(0, 2), Err(Error::Config(_))));
        assert!(matches!(AllocationState::new(2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hand_traced_threshold_replay() {
        let (state, records) = two_ball_replay();
        assert_eq!(records[0].chosen, 1);
        assert_eq!(records[0].final_bin, 0);
        assert_eq!(records[1].chosen, 2);
        assert_eq!(records[1].suggestions, vec![0, 0]);
        assert_eq!(state.loads(), &[2, 0]);
        assert_eq!(state.rejection_counters(), &[2, 1]);
        assert_eq!(state.draws_used(), &[2, 1]);
        assert_eq!(state.psi(BinSet::All).unwrap(), 1);
        assert_eq!(state.round_loads(1), &[1, 0]);
        assert_eq!(state.round_loads(2), &[1, 0]);
    }

    #[test]
    fn single_bin_always_lands_in_zero() {
        let mut state = AllocationState::new(1, 3).unwrap();
        let mut pools = Pools::seeded(1, 3, 9).unwrap();
        let strategy = Threshold::with_ell(0.5).unwrap();
        for _ in 0..5 {
            let rec = state.step(&strategy, &mut pools, &mut aux()).unwrap();
            assert!(rec.suggestions.iter().all(|&b| b == 0));
            assert_eq!(rec.final_bin, 0);
        }
        assert_eq!(state.loads(), &[5]);
    }

    #[test]
    fn depth_one_never_rejects() {
        let mut state = AllocationState::new(4, 1).unwrap();
        let mut pools = Pools::seeded(4, 1, 3).unwrap();
        let strategy = Threshold::with_ell(0.5).unwrap();
        for _ in 0..50 {
            assert_eq!(state.step(&strategy, &mut pools, &mut aux()).unwrap().chosen, 1);
        }
    }

    #[test]
    fn exhausted_pool_propagates() {
        let mut state = AllocationState::new(2, 2).unwrap();
        let mut pools = Pools::replay(vec![vec![0]]);
        state.step(&AlwaysAccept, &mut pools, &mut aux()).unwrap();
        assert!(matches!(
            state.step(&AlwaysAccept, &mut pools, &mut aux()),
            Err(Error::PoolExhausted { round: 1 })
        ));
        assert_eq!(state.balls(), 1);
    }

    #[test]
    fn subset_statistics() {
        let mut s = AllocationState::new(3, 1).unwrap();
        for bin in [0, 0, 0, 1, 2, 2] {
            s.commit(&[bin]);
        }
        assert_eq!(s.loads(), &[3, 1, 2]);
        assert_eq!(s.max_load(BinSet::sorted(&[1, 2], 3).unwrap()).unwrap(), 2);
        assert_eq!(s.max_load(BinSet::All).unwrap(), 3);
        assert!(matches!(s.max_load(BinSet::Sorted(&[])), Err(Error::Usage(_))));
        assert!(BinSet::sorted(&[2, 1], 3).is_err());
        assert!(BinSet::sorted(&[0, 3], 3).is_err());

        let mut s = AllocationState::new(3, 1).unwrap();
        assert_eq!(s.phi(BinSet::All).unwrap(), 0);
        assert_eq!(s.psi(BinSet::All).unwrap(), 0);
        assert_eq!(s.max_load(BinSet::sorted(&[1], 3).unwrap()).unwrap(), 0);
        for bin in [1, 1, 2] {
            s.commit(&[bin]);
        }
        assert_eq!(s.phi(BinSet::All).unwrap(), 2);
        assert_eq!(s.phi(BinSet::sorted(&[0], 3).unwrap()).unwrap(), 0);

        let mut s = AllocationState::new(2, 1).unwrap();
        s.commit(&[0]);
        s.commit(&[1]);
        assert_eq!(s.phi(BinSet::sorted(&[0], 2).unwrap()).unwrap(), 1);

        let mut s = AllocationState::new(1, 1).unwrap();
        s.commit(&[0]);
        assert_eq!(s.max_load(BinSet::sorted(&[0], 1).unwrap()).unwrap(), 1);
        assert_eq!(s.psi(BinSet::All).unwrap(), 1);
    }

    #[test]
    fn commit_uncommit_roundtrip() {
        let (state, _) = two_ball_replay();
        let mut s = state.clone();
        let before = s.commit(&[1, 0]);
        s.uncommit(&[1, 0], before);
        assert_eq!(s, state);
    }

    #[test]
    fn induced_views_of_replay() {
        let (_, records) = two_ball_replay();
        let trace = Trace { d: 2, records };
        assert_eq!(trace.induced_view(1).unwrap(), trace);
        let view = trace.induced_view(2).unwrap();
        assert_eq!(view.d, 1);
        assert_eq!(view.records.len(), 1);
        assert_eq!(
            view.records[0],
            DecisionRecord { t: 1, chosen: 1, suggestions: vec![0], final_bin: 0 }
        );
        assert!(trace.induced_view(0).is_err());
        assert!(trace.induced_view(3).is_err());
    }

    #[test]
    fn trace_jsonl_shape() {
        let (_, records) = two_ball_replay();
        let mut buf = Vec::new();
        Trace { d: 2, records }.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"t\":1,\"chosen\":1,\"suggestions\":[0],\"final\":0}\n\
             {\"t\":2,\"chosen\":2,\"suggestions\":[0,0],\"final\":0}\n"
        );
    }

    #[test]
    fn run_trial_trivial_cases() {
        let r = run_trial(4, 2, 0, &AlwaysAccept, 1).unwrap();
        assert_eq!(r.max_load, 0);
        assert_eq!(r.histogram, BTreeMap::from([(0, 4)]));
        let r = run_trial(1, 3, 7, &Threshold::with_ell(1.5).unwrap(), 1).unwrap();
        assert_eq!(r.max_load, 7);
        assert_eq!(r.histogram, BTreeMap::from([(7, 1)]));
    }
}
