//! Closed-form predictors and tail bounds for the threshold strategy.
//!
//! All logarithms are natural and `x!` for real `x` means `Γ(x + 1)`.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::E;

use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pool::{stream_rng, Pool, RandomPool};

fn ln_factorial(x: f64) -> f64 {
    libm::lgamma(x + 1.0)
}

/// The threshold `ℓ = (d ln n / ln ln n)^{1/d}`.
pub fn ell(n: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("d must be at least 1".into()));
    }
    let lnln = n.ln().ln();
    if !(n >= 3.0 && lnln > 0.0) {
        return Err(Error::Domain(format!("ell needs ln ln n > 0, got n = {n}")));
    }
    Ok((d as f64 * n.ln() / lnln).powf(1.0 / d as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictedBounds {
    pub upper: f64,
    pub lower: f64,
}

/// `((d + eps)·ℓ, (d − eps)·ℓ)`, the bracket around the predicted max load `d·ℓ`.
pub fn predicted_bounds(n: f64, d: usize, eps: f64) -> Result<PredictedBounds> {
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("eps must be non-negative, got {eps}")));
    }
    let ell = ell(n, d)?;
    Ok(PredictedBounds {
        upper: (d as f64 + eps) * ell,
        lower: (d as f64 - eps) * ell,
    })
}

/// The β-sequence bounding the rejection counters `r_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaSequence {
    pub ell: f64,
    /// `β_1..β_d` from the recursion `β_i/n = (2/ℓ!)(β_{i−1}/n)^ℓ`, `β_1 = ρn`.
    pub betas: Vec<f64>,
    /// The same values from the unrolled closed form, evaluated in log space.
    pub closed_form: Vec<f64>,
}

impl BetaSequence {
    /// `ρ_i = β_i / n`.
    pub fn rhos(&self, n: f64) -> Vec<f64> {
        self.betas.iter().map(|b| b / n).collect()
    }
}

pub fn beta_sequence(n: f64, d: usize, rho: f64) -> Result<BetaSequence> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    let ell = ell(n, d)?;
    let coef = 2.0 / libm::tgamma(ell + 1.0);
    let mut betas = Vec::with_capacity(d);
    betas.push(rho * n);
    for i in 1..d {
        let prev = betas[i - 1] / n;
        betas.push(n * coef * prev.powf(ell));
    }

    // β_i = n ρ^{ℓ^{i−1}} (2/ℓ!)^{Σ_{j<i−1} ℓ^j}
    let ln_coef = std::f64::consts::LN_2 - ln_factorial(ell);
    let closed_form = (1..=d)
        .map(|i| {
            let power = ell.powi(i as i32 - 1);
            let geometric = if (ell - 1.0).abs() < 1e-12 {
                (i - 1) as f64
            } else {
                (power - 1.0) / (ell - 1.0)
            };
            (n.ln() + power * rho.ln() + geometric * ln_coef).exp()
        })
        .collect();
    Ok(BetaSequence {
        ell,
        betas,
        closed_form,
    })
}

/// Both sides of `ℓ^d ln ℓ = (1 − (ln ln ln n − ln d)/ln ln n) ln n`.
pub fn ell_relation(n: f64, d: usize) -> Result<(f64, f64)> {
    if n < 16.0 {
        return Err(Error::Domain(format!("ell_relation needs n >= 16, got {n}")));
    }
    let ell = ell(n, d)?;
    let lhs = ell.powi(d as i32) * ell.ln();
    let lnln = n.ln().ln();
    let rhs = (1.0 - (lnln.ln() - (d as f64).ln()) / lnln) * n.ln();
    Ok((lhs, rhs))
}

/// A probability bound clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub value: f64,
    /// The raw expression was at least 1, so the bound says nothing.
    pub vacuous: bool,
}

impl Bound {
    fn clamped(raw: f64) -> Self {
        Bound {
            value: raw.clamp(0.0, 1.0),
            vacuous: raw >= 1.0,
        }
    }
}

/// `P(max_{m∈S} X_m < k) ≤ 2 exp(−θ^k |S| / (e·k!))` for `⌊θn⌋` balls.
pub fn lemma_max_bound(theta: f64, k: u64, s_size: u64) -> Result<Bound> {
    if !(theta > 0.0) || k == 0 || s_size == 0 {
        return Err(Error::Domain("need theta > 0, k >= 1, |S| >= 1".into()));
    }
    let k = k as f64;
    let exponent = (k * theta.ln() + (s_size as f64).ln() - 1.0 - ln_factorial(k)).exp();
    Ok(Bound::clamped(2.0 * (-exponent).exp()))
}

/// Lemma on non-empty bins: `P(φ_S ≤ θ|S|/(2e)) ≤ 2 exp(−θ²|S|/(2e²))`.
/// Returns the level `θ|S|/(2e)` and the bound.
pub fn lemma_nonempty_bound(theta: f64, s_size: u64) -> Result<(f64, Bound)> {
    if !(theta > 0.0) || s_size == 0 {
        return Err(Error::Domain("need theta > 0, |S| >= 1".into()));
    }
    let s = s_size as f64;
    let level = theta * s / (2.0 * E);
    let bound = Bound::clamped(2.0 * (-theta * theta * s / (2.0 * E * E)).exp());
    Ok((level, bound))
}

/// Tail bound `2 exp(−β/2)` on the event `r_i > β_i`.
pub fn beta_tail_bound(beta: f64) -> Bound {
    Bound::clamped(2.0 * (-beta / 2.0).exp())
}

/// Monte Carlo estimates of both sides of the Poissonization comparison
/// `P(X ∈ A) ≤ 2 P(Y ∈ A)` for a monotone event `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoissonizationCheck {
    /// Empirical `P(X ∈ A)` with `X` the loads of `⌊θn⌋` uniform balls.
    pub multinomial: f64,
    pub multinomial_se: f64,
    /// Empirical `P(Y ∈ A)` with `Y_m` i.i.d. Poisson(θ).
    pub poisson: f64,
    pub poisson_se: f64,
    /// `2 P(Y ∈ A)`.
    pub doubled_poisson: f64,
    /// `multinomial ≤ doubled_poisson` within three combined standard errors.
    pub holds: bool,
}

fn binomial_se(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

pub fn poissonization_bound_check(
    n: usize,
    theta: f64,
    event: &dyn Fn(&[u64]) -> bool,
    trials: u64,
    seed: u64,
) -> Result<PoissonizationCheck> {
    if n == 0 || trials == 0 || !(theta > 0.0) {
        return Err(Error::Usage("need n >= 1, trials >= 1, theta > 0".into()));
    }
    let balls = (theta * n as f64).floor() as u64;
    let mut bins = RandomPool::new(n, seed, 1)?;
    let mut loads = vec![0u64; n];
    let mut multinomial_hits = 0u64;
    for _ in 0..trials {
        loads.iter_mut().for_each(|l| *l = 0);
        for _ in 0..balls {
            loads[bins.draw().expect("unbounded pool")] += 1;
        }
        multinomial_hits += u64::from(event(&loads));
    }

    let poisson = Poisson::new(theta).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = stream_rng(seed, 2);
    let mut poisson_hits = 0u64;
    for _ in 0..trials {
        loads.iter_mut().for_each(|l| *l = poisson.sample(&mut rng) as u64);
        poisson_hits += u64::from(event(&loads));
    }

    let p_mult = multinomial_hits as f64 / trials as f64;
    let p_pois = poisson_hits as f64 / trials as f64;
    let se_mult = binomial_se(p_mult, trials);
    let se_pois = binomial_se(p_pois, trials);
    let combined = (se_mult * se_mult + 4.0 * se_pois * se_pois).sqrt();
    Ok(PoissonizationCheck {
        multinomial: p_mult,
        multinomial_se: se_mult,
        poisson: p_pois,
        poisson_se: se_pois,
        doubled_poisson: 2.0 * p_pois,
        holds: p_mult <= 2.0 * p_pois + 3.0 * combined,
    })
}

/// Parameter cascade of the lower-bound argument for a choice of `k_1..k_{d−1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundSequences {
    pub ell: f64,
    /// `s_0..s_d`, with `s_0 = (d − eps)ℓ`.
    pub s: Vec<f64>,
    /// `w_1..w_d`.
    pub w: Vec<f64>,
    /// `θ_1..θ_d`, `θ_i = w_i / n`.
    pub theta: Vec<f64>,
    /// `γ_{0,1}..γ_{d−1,k_{d−1}}`, `γ_{0,1} = ρn`.
    pub gamma: Vec<f64>,
    /// `γ_{i,k_i} = ρn Π_{j≤i} (θ_j/4e)^{k_j}`, evaluated independently.
    pub gamma_product: Vec<f64>,
    /// `θ_{i+1} = (ρ/s_{i+1}) Π_{j≤i} (θ_j/4e)^{k_j}`, evaluated independently.
    pub theta_product: Vec<f64>,
}

pub fn lower_bound_sequences(
    n: f64,
    d: usize,
    rho: f64,
    eps: f64,
    k: &[u64],
) -> Result<LowerBoundSequences> {
    if k.len() + 1 != d {
        return Err(Error::Usage(format!(
            "need d - 1 = {} values of k, got {}",
            d.saturating_sub(1),
            k.len()
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    let ell = ell(n, d)?;
    let four_e = 4.0 * E;

    // k_0 = 1, so s_1 = s_0
    let mut s = vec![(d as f64 - eps) * ell];
    let mut w = Vec::with_capacity(d);
    let mut theta = Vec::with_capacity(d);
    let mut gamma = vec![rho * n];
    for i in 1..=d {
        let k_prev = if i == 1 { 1 } else { k[i - 2] };
        let s_i = s[i - 1] - (k_prev as f64 - 1.0);
        if !(s_i > 0.0) {
            return Err(Error::Domain(format!(
                "s_{i} = {s_i} is not positive; the k-vector is inadmissible"
            )));
        }
        s.push(s_i);
        let w_i = gamma[i - 1] / s_i;
        w.push(w_i);
        theta.push(w_i / n);
        if i < d {
            let k_i = k[i - 1];
            if k_i == 0 || k_i as f64 > s_i.ceil() {
                return Err(Error::Domain(format!(
                    "k_{i} = {k_i} outside [1, ceil(s_{i})] = [1, {}]",
                    s_i.ceil()
                )));
            }
            gamma.push(gamma[i - 1] * (theta[i - 1] / four_e).powi(k_i as i32));
        }
    }

    // independent evaluation: log-space products, s from the summed form
    let mut log_prod = 0.0;
    let mut gamma_product = vec![(rho * n).ln().exp()];
    let mut theta_product = vec![rho / s[1]];
    for i in 1..d {
        log_prod += k[i - 1] as f64 * (theta[i - 1] / four_e).ln();
        gamma_product.push((log_prod + (rho * n).ln()).exp());
        let s_next = s[0] - k[..i].iter().map(|&kj| kj as f64 - 1.0).sum::<f64>();
        theta_product.push((log_prod + rho.ln() - s_next.ln()).exp());
    }

    Ok(LowerBoundSequences {
        ell,
        s,
        w,
        theta,
        gamma,
        gamma_product,
        theta_product,
    })
}

/// Everything the theory predicts for one `(n, d, ρ)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryParams {
    pub n: f64,
    pub d: usize,
    pub rho: f64,
    pub ell: f64,
    /// `⌊ℓ⌋`, the integer acceptance cap of the threshold strategy.
    pub cap: u64,
    pub predicted_max: f64,
    pub beta_seq: Vec<f64>,
    pub rho_seq: Vec<f64>,
    /// `min(1, 2 exp(−β_i/2))` for `i = 2..=d`.
    pub beta_tails: Vec<Bound>,
}

impl TheoryParams {
    pub fn new(n: f64, d: usize, rho: f64) -> Result<Self> {
        let seq = beta_sequence(n, d, rho)?;
        Ok(TheoryParams {
            n,
            d,
            rho,
            ell: seq.ell,
            cap: seq.ell.floor() as u64,
            predicted_max: d as f64 * seq.ell,
            rho_seq: seq.rhos(n),
            beta_tails: seq.betas.iter().skip(1).map(|&b| beta_tail_bound(b)).collect(),
            beta_seq: seq.betas,
        })
    }

    pub fn bounds(&self, eps: f64) -> Result<PredictedBounds> {
        predicted_bounds(self.n, self.d, eps)
    }
}
