//! Static and finite-state Markov fading channels.
//!
//! Channel indices are 0-based in code and 1-based in every exported file.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::harq::HistoryCounter;
use crate::numerics::{check_column_stochastic, stationary_distribution, Matrix, ProbabilityVector};
use crate::{Error, Result};

/// Sensor decision for a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    New,
    Retransmit,
}

impl Action {
    pub fn as_u8(self) -> u8 {
        match self {
            Action::New => 0,
            Action::Retransmit => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Action::New),
            1 => Ok(Action::Retransmit),
            other => Err(Error::Usage(format!("action must be 0 or 1, got {other}"))),
        }
    }
}

/// Time-invariant power gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticChannel {
    pub gain: f64,
}

impl StaticChannel {
    pub fn new(gain: f64) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::Model(format!("channel gain must be positive, got {gain}")));
        }
        Ok(Self { gain })
    }

    /// The single-state Markov chain with the same gain.
    pub fn to_markov(self) -> MarkovChannel {
        MarkovChannel { gains: vec![self.gain], pi: Matrix::from_element(1, 1, 1.0) }
    }
}

/// Finite-state Markov channel. `pi[(j, i)]` is the probability of moving
/// from state `i` to state `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChannel {
    pub gains: Vec<f64>,
    pub pi: Matrix,
}

impl MarkovChannel {
    pub fn new(gains: Vec<f64>, pi: Matrix) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::Model("channel needs at least one state".into()));
        }
        if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Model("channel gains must be positive".into()));
        }
        if pi.shape() != (gains.len(), gains.len()) {
            return Err(Error::Dimension(format!(
                "transition matrix is {:?} but there are {} gains",
                pi.shape(),
                gains.len()
            )));
        }
        check_column_stochastic(&pi, 1e-12)?;
        if pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::Model("all channel transition probabilities must be positive".into()));
        }
        Ok(Self { gains, pi })
    }

    pub fn num_states(&self) -> usize {
        self.gains.len()
    }

    /// Probability of moving from `from` to `to`.
    pub fn p(&self, from: usize, to: usize) -> f64 {
        self.pi[(to, from)]
    }

    pub fn stationary(&self) -> Result<ProbabilityVector> {
        stationary_distribution(&self.pi)
    }

    /// Next state given a uniform draw `u` in [0, 1).
    pub fn step_with_uniform(&self, current: usize, u: f64) -> usize {
        let b = self.num_states();
        let mut cum = 0.0;
        for j in 0..b {
            cum += self.p(current, j);
            if u < cum {
                return j;
            }
        }
        b - 1
    }

    /// Samples the next state. Always consumes exactly one uniform draw, even
    /// for a single-state channel, so random streams stay aligned across
    /// channel models.
    pub fn step<R: Rng + ?Sized>(&self, current: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.step_with_uniform(current, u)
    }
}

/// History update after a slot: a new transmission restarts the count at the
/// slot's channel state; a retransmission adds to it.
pub fn update_history(omega: &HistoryCounter, last_action: Action, last_index: usize) -> HistoryCounter {
    match last_action {
        Action::New => HistoryCounter::unit(omega.counts.len(), last_index),
        Action::Retransmit => omega.incremented(last_index),
    }
}
