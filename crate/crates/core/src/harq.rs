//! Finite-blocklength error probabilities for chase-combining (CC) and
//! incremental-redundancy (IR) HARQ.

use std::collections::HashMap;
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::numerics::gaussian_q;
use crate::{Error, Result};

/// Above this argument `erfc` starts to lose range, so the asymptotic
/// series takes over.
const LN_Q_SWITCH: f64 = 30.0;

/// `ln Q(x)`, accurate far beyond the point where `Q(x)` underflows.
pub fn ln_gaussian_q(x: f64) -> f64 {
    if x < LN_Q_SWITCH {
        return gaussian_q(x).ln();
    }
    let z = 1.0 / (x * x);
    let series = 1.0 - z * (1.0 - 3.0 * z * (1.0 - 5.0 * z * (1.0 - 7.0 * z)));
    -0.5 * x * x - (x * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarqScheme {
    Cc,
    Ir,
}

impl fmt::Display for HarqScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HarqScheme::Cc => "cc",
            HarqScheme::Ir => "ir",
        })
    }
}

impl std::str::FromStr for HarqScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cc" => Ok(HarqScheme::Cc),
            "ir" => Ok(HarqScheme::Ir),
            other => Err(Error::Config(format!("unknown HARQ scheme '{other}' (expected cc or ir)"))),
        }
    }
}

/// Link parameters plus a memo of block error probabilities.
pub struct HarqModel {
    pub scheme: HarqScheme,
    /// Linear SNR at unit channel gain.
    pub snr: f64,
    pub blocklength: u32,
    pub rate: f64,
    cache: RwLock<HashMap<Vec<u64>, f64>>,
}

impl Clone for HarqModel {
    fn clone(&self) -> Self {
        Self::new(self.scheme, self.snr, self.blocklength, self.rate)
            .expect("cloned model was already validated")
    }
}

impl fmt::Debug for HarqModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HarqModel")
            .field("scheme", &self.scheme)
            .field("snr", &self.snr)
            .field("blocklength", &self.blocklength)
            .field("rate", &self.rate)
            .finish()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl HarqModel {
    pub fn new(scheme: HarqScheme, snr: f64, blocklength: u32, rate: f64) -> Result<Self> {
        if !(snr.is_finite() && snr > 0.0) {
            return Err(Error::Model(format!("SNR must be positive, got {snr}")));
        }
        if blocklength == 0 {
            return Err(Error::Model("blocklength must be at least 1".into()));
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Model(format!("rate must be positive, got {rate}")));
        }
        Ok(Self { scheme, snr, blocklength, rate, cache: RwLock::new(HashMap::new()) })
    }

    pub fn from_db(scheme: HarqScheme, snr_db: f64, blocklength: u32, rate: f64) -> Result<Self> {
        Self::new(scheme, db_to_linear(snr_db), blocklength, rate)
    }

    /// Probability that decoding still fails after combining all `gains`
    /// (one entry per transmission attempt).
    pub fn block_error_prob(&self, gains: &[f64]) -> Result<f64> {
        Ok(self.ln_block_error_prob(gains)?.exp())
    }

    /// Natural log of [`Self::block_error_prob`]; finite even when the
    /// probability itself underflows.
    pub fn ln_block_error_prob(&self, gains: &[f64]) -> Result<f64> {
        if gains.is_empty() {
            return Err(Error::Usage("block error probability needs at least one attempt".into()));
        }
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Model("channel gains must be positive".into()));
        }
        let mut key: Vec<u64> = gains.iter().map(|g| g.to_bits()).collect();
        key.sort_unstable();
        if let Some(&p) = self.cache.read().expect("cache lock poisoned").get(&key) {
            return Ok(p);
        }
        let p = self.ln_evaluate(gains);
        self.cache.write().expect("cache lock poisoned").entry(key).or_insert(p);
        Ok(p)
    }

    fn ln_evaluate(&self, gains: &[f64]) -> f64 {
        let l = self.blocklength as f64;
        let log2e = std::f64::consts::LOG2_E;
        let (capacity, correction, dispersion) = match self.scheme {
            HarqScheme::Cc => {
                let s: f64 = gains.iter().map(|h| h * self.snr).sum();
                (
                    (1.0 + s).log2(),
                    l.log2() / l,
                    1.0 - (1.0 + s).powi(-2),
                )
            }
            HarqScheme::Ir => {
                let attempts = gains.len() as f64;
                (
                    gains.iter().map(|h| (1.0 + h * self.snr).log2()).sum(),
                    (attempts * l).log2() / l,
                    gains.iter().map(|h| 1.0 - (1.0 + h * self.snr).powi(-2)).sum(),
                )
            }
        };
        let arg = l.sqrt() * (capacity + correction - self.rate) / (dispersion.sqrt() * log2e);
        ln_gaussian_q(arg).min(0.0)
    }

    /// Error probability of the current slot given the failed attempts so far.
    ///
    /// An empty history is a new transmission. The ratio of the two joint
    /// failure probabilities is formed in the log domain, so it stays exact
    /// even when both are far below the smallest normal double.
    pub fn conditional_error_prob(&self, history: &[f64], current_gain: f64) -> Result<f64> {
        if history.is_empty() {
            return self.block_error_prob(&[current_gain]);
        }
        let ln_denom = self.ln_block_error_prob(history)?;
        let mut all = history.to_vec();
        all.push(current_gain);
        let ln_numer = self.ln_block_error_prob(&all)?;
        if ln_denom == f64::NEG_INFINITY {
            log::debug!("retransmission after a history that cannot fail; using 0");
            return Ok(0.0);
        }
        Ok((ln_numer - ln_denom).exp().clamp(0.0, 1.0))
    }

    /// `g̃(Ω, Ξ)` for a finite gain set, `xi` 0-based.
    pub fn conditional_error_indexed(&self, gains: &[f64], omega: &HistoryCounter, xi: usize) -> Result<f64> {
        if omega.counts.len() != gains.len() {
            return Err(Error::Dimension(format!(
                "history has {} entries but there are {} channel states",
                omega.counts.len(),
                gains.len()
            )));
        }
        let current = *gains
            .get(xi)
            .ok_or_else(|| Error::Usage(format!("channel index {} out of range", xi + 1)))?;
        self.conditional_error_prob(&omega.expand(gains), current)
    }

    /// Static-channel `g(r)`: error of the `r`-th consecutive attempt at gain `h`.
    pub fn static_error(&self, gain: f64, r: usize) -> Result<f64> {
        if r == 0 {
            return Err(Error::Usage("attempt index starts at 1".into()));
        }
        self.conditional_error_prob(&vec![gain; r - 1], gain)
    }

    /// `[g(1), g(2), ..., g(n)]` at a fixed gain.
    pub fn static_error_table(&self, gain: f64, n: usize) -> Result<Vec<f64>> {
        (1..=n).map(|r| self.static_error(gain, r)).collect()
    }
}

/// Occurrence counts of channel states over the current run of attempts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryCounter {
    pub counts: Vec<u32>,
}

impl HistoryCounter {
    pub fn zero(b: usize) -> Self {
        Self { counts: vec![0; b] }
    }

    pub fn unit(b: usize, index: usize) -> Self {
        let mut h = Self::zero(b);
        h.counts[index] = 1;
        h
    }

    /// Number of attempts represented, `‖Ω‖₁`.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn incremented(&self, index: usize) -> Self {
        let mut h = self.clone();
        h.counts[index] += 1;
        h
    }

    /// The gain multiset, in channel-index order.
    pub fn expand(&self, gains: &[f64]) -> Vec<f64> {
        self.counts
            .iter()
            .zip(gains)
            .flat_map(|(&c, &g)| std::iter::repeat_n(g, c as usize))
            .collect()
    }
}

/// Largest retransmission error over a scanned range.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstStatic {
    pub value: f64,
    /// Attempt index `r` attaining the maximum.
    pub argmax: usize,
    /// Whether `g(2) >= g(3) >= ... >= g(r_max)`.
    pub monotone: bool,
}

/// `Λ₀ = max_{2 <= r <= r_max} g(r)`.
pub fn worst_retransmission_error_static(model: &HarqModel, gain: f64, r_max: usize) -> Result<WorstStatic> {
    if r_max < 2 {
        return Err(Error::Usage("r_max must be at least 2".into()));
    }
    let values: Vec<f64> = (2..=r_max).map(|r| model.static_error(gain, r)).collect::<Result<_>>()?;
    let (idx, &value) = values
        .iter()
        .enumerate()
        .fold((0, &values[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    Ok(WorstStatic { value, argmax: idx + 2, monotone })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstMarkov {
    pub value: f64,
    pub argmax: HistoryCounter,
    /// The maximizer sits on the enumeration budget, so a larger budget might
    /// find a larger value.
    pub at_boundary: bool,
}

/// All nonzero histories of `b` states with at most `budget` attempts.
pub fn enumerate_histories(b: usize, budget: u32) -> Vec<HistoryCounter> {
    fn rec(prefix: &mut Vec<u32>, b: usize, left: u32, out: &mut Vec<HistoryCounter>) {
        if prefix.len() == b {
            if prefix.iter().any(|&c| c > 0) {
                out.push(HistoryCounter { counts: prefix.clone() });
            }
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            rec(prefix, b, left - c, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(b), b, budget, &mut out);
    out
}

/// `Λᵢ = max_Ω g̃(Ω, i)` over nonzero `Ω` with `‖Ω‖₁ <= budget`; `index` 0-based.
pub fn worst_retransmission_error_markov(
    model: &HarqModel,
    gains: &[f64],
    index: usize,
    budget: u32,
) -> Result<WorstMarkov> {
    if budget == 0 {
        return Err(Error::Usage("history budget must be at least 1".into()));
    }
    let mut best: Option<(f64, HistoryCounter)> = None;
    for omega in enumerate_histories(gains.len(), budget) {
        let g = model.conditional_error_indexed(gains, &omega, index)?;
        if best.as_ref().is_none_or(|(v, _)| g > *v) {
            best = Some((g, omega));
        }
    }
    let (value, argmax) = best.expect("budget >= 1 yields at least one history");
    let at_boundary = argmax.total() == budget;
    Ok(WorstMarkov { value, argmax, at_boundary })
}
