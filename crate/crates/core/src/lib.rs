//! Transmission control for HARQ-based real-time remote estimation.
//!
//! A smart sensor runs a steady-state Kalman filter on a linear process and
//! ships its estimate to a remote receiver over a lossy fading link. After a
//! failed packet it may either retransmit (and let the receiver combine the
//! copies with chase combining or incremental redundancy) or send a fresh
//! estimate. The crate computes optimal and suboptimal switching policies for
//! that decision, checks the sufficient stability conditions, evaluates the
//! high-SNR closed forms, and measures long-run average MSE by seeded Monte
//! Carlo simulation.
//!
//! Module map:
//!
//! * [`numerics`]: small dense linear algebra and the Gaussian Q-function.
//! * [`lti`]: process model, steady-state filter, and the MSE cost ladder.
//! * [`harq`]: finite-blocklength packet-error probabilities.
//! * [`channel`]: static and finite-state Markov channels.
//! * [`mdp`], [`mdp_static`], [`mdp_markov`]: truncated average-cost MDPs and
//!   relative value iteration.
//! * [`simulator`]: closed-loop Monte Carlo with common random numbers.
//! * [`cli`]: configuration files and the `harq-est` command set.

pub mod channel;
pub mod cli;
pub mod error;
pub mod harq;
pub mod lti;
pub mod mdp;
pub mod mdp_markov;
pub mod mdp_static;
pub mod numerics;
pub mod simulator;

pub use error::{Error, Result};
