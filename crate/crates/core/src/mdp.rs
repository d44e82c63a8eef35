//! Finite average-cost MDPs with two actions, relative value iteration, and
//! exact policy evaluation.
//!
//! Costs on the MSE ladder grow geometrically with the AoI and reach ~1e16 at
//! the default truncation, while the stopping rule needs absolute accuracy
//! around 1e-9. Value updates are therefore carried in double-double
//! arithmetic (an unevaluated sum of two `f64`s, ~32 significant digits).

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::channel::Action;
use crate::numerics::{stationary_distribution, Matrix};
use crate::{Error, Result};

/// Tolerance on each transition row summing to one.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Q-values closer than this count as a tie, broken toward a new transmission.
pub const TIE_TOL: f64 = 1e-12;

/// Per-slot cost: receiver MSE, or the AoI itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Mse,
    Delay,
}

impl std::str::FromStr for CostMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(CostMode::Mse),
            "delay" => Ok(CostMode::Delay),
            other => Err(Error::Config(format!("unknown cost mode '{other}' (expected mse or delay)"))),
        }
    }
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostMode::Mse => "mse",
            CostMode::Delay => "delay",
        })
    }
}

/// Sparse outgoing distribution: `(next state, probability)`.
pub type Transition = Vec<(usize, f64)>;

/// State costs plus, per state, the transition for each available action
/// (`None` marks an unavailable action).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    costs: Vec<f64>,
    transitions: Vec<[Option<Transition>; 2]>,
}

impl FiniteMdp {
    pub fn new(costs: Vec<f64>, transitions: Vec<[Option<Transition>; 2]>) -> Result<Self> {
        let n = costs.len();
        if n == 0 || transitions.len() != n {
            return Err(Error::Dimension(format!(
                "{} costs but {} transition rows",
                n,
                transitions.len()
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Model("state costs must be finite".into()));
        }
        for (s, row) in transitions.iter().enumerate() {
            if row.iter().all(Option::is_none) {
                return Err(Error::Model(format!("state {s} has no available action")));
            }
            for (a, tr) in row.iter().enumerate() {
                let Some(tr) = tr else { continue };
                let mut sum = 0.0;
                for &(t, p) in tr {
                    if t >= n || !(0.0..=1.0 + ROW_SUM_TOL).contains(&p) {
                        return Err(Error::Model(format!("state {s} action {a}: bad entry ({t}, {p})")));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Model(format!("state {s} action {a}: row sums to {sum}")));
                }
            }
        }
        Ok(Self { costs, transitions })
    }

    pub fn num_states(&self) -> usize {
        self.costs.len()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn transition(&self, state: usize, action: Action) -> Option<&Transition> {
        self.transitions[state][action.as_u8() as usize].as_ref()
    }

    pub fn allows(&self, state: usize, action: Action) -> bool {
        self.transition(state, action).is_some()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.transitions
            .iter()
            .flat_map(|row| row.iter().flatten())
            .map(|tr| (tr.iter().map(|&(_, p)| p).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Column-stochastic matrix of the chain induced by `actions`.
    pub fn policy_matrix(&self, actions: &[Action]) -> Result<Matrix> {
        let n = self.num_states();
        if actions.len() != n {
            return Err(Error::Dimension(format!("policy has {} actions for {n} states", actions.len())));
        }
        let mut m = Matrix::zeros(n, n);
        for (s, &a) in actions.iter().enumerate() {
            let tr = self
                .transition(s, a)
                .ok_or_else(|| Error::Usage(format!("action {} unavailable in state {s}", a.as_u8())))?;
            for &(t, p) in tr {
                m[(t, s)] += p;
            }
        }
        Ok(m)
    }

    /// Exact long-run average cost of a deterministic stationary policy.
    pub fn evaluate_policy(&self, actions: &[Action]) -> Result<f64> {
        let e = stationary_distribution(&self.policy_matrix(actions)?)?;
        Ok(e.as_slice().iter().zip(&self.costs).map(|(p, c)| p * c).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RviOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub reference: usize,
    /// Weight `τ` of the aperiodicity transform `P ← τP + (1-τ)I`; 1 leaves
    /// the kernel untouched. Average cost and optimal actions are unchanged
    /// for any `τ` in (0, 1].
    pub aperiodicity: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 100_000, reference: 0, aperiodicity: 1.0 }
    }
}

/// Iterations between checks that the span is still shrinking.
const STALL_WINDOW: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct RviSolution {
    pub actions: Vec<Action>,
    /// Average-cost estimate: midpoint of the final span bounds.
    pub zeta: f64,
    /// Final span of the value differences; bounds the error in `zeta`.
    pub span: f64,
    pub iterations: usize,
    /// Relative values, zero at the reference state.
    pub values: Vec<f64>,
}

/// Relative value iteration with the span stopping rule.
pub fn relative_value_iteration(mdp: &FiniteMdp, opts: &RviOptions) -> Result<RviSolution> {
    let n = mdp.num_states();
    if opts.reference >= n {
        return Err(Error::Usage(format!("reference state {} out of range", opts.reference)));
    }
    let tau = opts.aperiodicity;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Usage(format!("aperiodicity weight must lie in (0, 1], got {tau}")));
    }
    let mut h = vec![Dd::ZERO; n];
    let mut next = vec![Dd::ZERO; n];
    let mut span = f64::INFINITY;
    let mut checkpoint = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..n {
            let (_, best) = greedy(mdp, &h, s);
            let cont = if tau == 1.0 { best } else { best.mul_f64(tau) + h[s].mul_f64(1.0 - tau) };
            let th = cont + Dd::from(mdp.costs[s]);
            let d = (th - h[s]).to_f64();
            lo = lo.min(d);
            hi = hi.max(d);
            next[s] = th;
        }
        let shift = next[opts.reference];
        for s in 0..n {
            h[s] = next[s] - shift;
        }
        span = hi - lo;
        if !span.is_finite() {
            break;
        }
        if span < opts.tol {
            let actions = (0..n).map(|s| greedy(mdp, &h, s).0).collect();
            return Ok(RviSolution {
                actions,
                zeta: 0.5 * (hi + lo),
                span,
                iterations: it,
                values: h.iter().map(|v| v.to_f64()).collect(),
            });
        }
        // A periodic optimal chain makes the span oscillate without shrinking.
        if it % STALL_WINDOW == 0 {
            if span >= checkpoint * (1.0 - 1e-9) {
                return Err(Error::Convergence { iterations: it, span });
            }
            checkpoint = span;
        }
    }
    Err(Error::Convergence { iterations: opts.max_iters, span })
}

/// Relative value iteration that falls back to the aperiodicity transform
/// with `τ = 1/2` when plain iteration does not converge.
pub fn solve_average_cost(mdp: &FiniteMdp, opts: &RviOptions) -> Result<RviSolution> {
    match relative_value_iteration(mdp, opts) {
        Err(Error::Convergence { iterations, span }) if opts.aperiodicity == 1.0 => {
            log::warn!(
                "value iteration stalled after {iterations} iterations (span {span:e}); retrying with aperiodicity transform"
            );
            relative_value_iteration(mdp, &RviOptions { aperiodicity: 0.5, ..*opts })
        }
        other => other,
    }
}

/// Best action and its expected continuation value, ties to `Action::New`.
fn greedy(mdp: &FiniteMdp, h: &[Dd], s: usize) -> (Action, Dd) {
    let q = |a: Action| {
        mdp.transition(s, a)
            .map(|tr| tr.iter().fold(Dd::ZERO, |acc, &(t, p)| acc + h[t].mul_f64(p)))
    };
    match (q(Action::New), q(Action::Retransmit)) {
        (Some(q0), Some(q1)) => {
            if (q1 - q0).to_f64() < -TIE_TOL {
                (Action::Retransmit, q1)
            } else {
                (Action::New, q0)
            }
        }
        (Some(q0), None) => (Action::New, q0),
        (None, Some(q1)) => (Action::Retransmit, q1),
        (None, None) => unreachable!("validated at construction"),
    }
}

/// Double-double number `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        Dd { hi, lo }
    }
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

/// State types that have a stable textual key for policy files.
pub trait StateKey: Sized + Clone + Eq + Hash {
    fn key(&self) -> String;
    fn parse_key(key: &str) -> Result<Self>;
}

/// Solver bookkeeping attached to a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    /// Where the table came from: "optimal", "delay-optimal", "myopic", ...
    pub kind: String,
    pub cost_mode: CostMode,
    pub channel: String,
    pub scheme: Option<String>,
    pub truncation: BTreeMap<String, String>,
    pub zeta: Option<f64>,
    pub span: Option<f64>,
    pub iterations: Option<usize>,
}

/// A deterministic policy over an enumerated state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<S: StateKey> {
    pub states: Vec<S>,
    pub actions: Vec<Action>,
    pub meta: PolicyMeta,
    index: HashMap<S, usize>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    meta: PolicyMeta,
    actions: BTreeMap<String, u8>,
}

impl<S: StateKey> Policy<S> {
    pub fn new(states: Vec<S>, actions: Vec<Action>, meta: PolicyMeta) -> Result<Self> {
        if states.len() != actions.len() {
            return Err(Error::Dimension(format!(
                "{} states but {} actions",
                states.len(),
                actions.len()
            )));
        }
        let index: HashMap<S, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        if index.len() != states.len() {
            return Err(Error::Usage("duplicate state in policy".into()));
        }
        Ok(Self { states, actions, meta, index })
    }

    pub fn action(&self, s: &S) -> Option<Action> {
        self.index.get(s).map(|&i| self.actions[i])
    }

    pub fn index_of(&self, s: &S) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn count(&self, a: Action) -> usize {
        self.actions.iter().filter(|&&x| x == a).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PolicyFile {
            meta: self.meta.clone(),
            actions: self.states.iter().zip(&self.actions).map(|(s, a)| (s.key(), a.as_u8())).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Usage(format!("policy export failed: {e}")))
    }

    /// Parses an exported policy. States come back in key order.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("policy file: {e}")))?;
        let mut states = Vec::with_capacity(file.actions.len());
        let mut actions = Vec::with_capacity(file.actions.len());
        for (k, a) in file.actions {
            states.push(S::parse_key(&k)?);
            actions.push(Action::from_u8(a)?);
        }
        Self::new(states, actions, file.meta)
    }
}
