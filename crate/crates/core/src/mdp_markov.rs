//! Markov-channel MDP over `(Ω, q, Ξ)`: per-state history counts, AoI and
//! the current channel state.
//!
//! Truncation: each history count has its own cap; retransmitting is
//! unavailable when the current channel's count is at its cap, and on the
//! diagonal `‖Ω‖₁ = q`. AoI saturates at `q_max` on failure.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::channel::{Action, MarkovChannel};
use crate::harq::{HarqModel, HistoryCounter};
use crate::lti::CostLadder;
use crate::mdp::{
    solve_average_cost, CostMode, FiniteMdp, Policy, PolicyMeta, RviOptions, StateKey,
};
use crate::mdp_static::{merge, stage_cost, StabilityReport, SwitchingReport};
use crate::numerics::{kronecker, null_space_vector, spectral_radius, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MarkovState {
    pub omega: HistoryCounter,
    pub q: u32,
    /// 0-based channel index.
    pub xi: usize,
}

impl MarkovState {
    pub fn new(counts: Vec<u32>, q: u32, xi: usize) -> Self {
        Self { omega: HistoryCounter { counts }, q, xi }
    }
}

impl StateKey for MarkovState {
    fn key(&self) -> String {
        let counts: Vec<String> = self.omega.counts.iter().map(u32::to_string).collect();
        format!("{}|{}|{}", counts.join(","), self.q, self.xi + 1)
    }

    fn parse_key(key: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad Markov state key '{key}' (expected \"r1,...,rB|q|xi\")"));
        let mut parts = key.split('|');
        let (Some(counts), Some(q), Some(xi), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let counts: Vec<u32> =
            counts.split(',').map(|c| c.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let q: u32 = q.trim().parse().map_err(|_| bad())?;
        let xi: usize = xi.trim().parse().map_err(|_| bad())?;
        let total: u32 = counts.iter().sum();
        if xi == 0 || xi > counts.len() || total == 0 || total > q {
            return Err(bad());
        }
        Ok(Self::new(counts, q, xi - 1))
    }
}

#[derive(Debug, Clone)]
pub struct MarkovMdp {
    pub states: Vec<MarkovState>,
    index: HashMap<MarkovState, usize>,
    pub mdp: FiniteMdp,
    pub channel: MarkovChannel,
    pub caps: Vec<u32>,
    pub q_max: u32,
    pub mode: CostMode,
    pub ladder: CostLadder,
    pub label: String,
}

/// Histories with `1 <= ‖Ω‖₁ <= q_max` and `Ω[i] <= caps[i]`, lexicographic.
fn capped_histories(caps: &[u32], q_max: u32) -> Vec<HistoryCounter> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; caps.len()];
    loop {
        let total: u32 = cur.iter().sum();
        if total >= 1 && total <= q_max {
            out.push(HistoryCounter { counts: cur.clone() });
        }
        // Odometer increment, last digit fastest.
        let mut i = caps.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < caps[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = 0;
        }
    }
}

/// Builds the truncated kernel with HARQ-model error probabilities.
pub fn build_markov_mdp(
    ladder: &CostLadder,
    harq: &HarqModel,
    channel: &MarkovChannel,
    caps: &[u32],
    q_max: u32,
    mode: CostMode,
) -> Result<MarkovMdp> {
    let gains = channel.gains.clone();
    let mut mdp = MarkovMdp::from_error_fn(ladder, channel, caps, q_max, mode, |omega, xi| {
        harq.conditional_error_indexed(&gains, omega, xi)
    })?;
    mdp.label = format!("markov gains={:?} {}", channel.gains, harq.scheme);
    Ok(mdp)
}

impl MarkovMdp {
    /// Builds the kernel from an arbitrary error function `g̃(Ω, Ξ)`; the zero
    /// history stands for a new transmission.
    pub fn from_error_fn<F>(
        ladder: &CostLadder,
        channel: &MarkovChannel,
        caps: &[u32],
        q_max: u32,
        mode: CostMode,
        g: F,
    ) -> Result<Self>
    where
        F: Fn(&HistoryCounter, usize) -> Result<f64>,
    {
        let b = channel.num_states();
        if caps.len() != b || caps.contains(&0) {
            return Err(Error::Config(format!("need {b} history caps, each at least 1, got {caps:?}")));
        }
        if q_max < 2 {
            return Err(Error::Config("q_max must be at least 2".into()));
        }
        if ladder.depth() < q_max as usize + 1 {
            return Err(Error::Depth { safe_depth: ladder.depth() });
        }

        let histories = capped_histories(caps, q_max);
        let mut states = Vec::new();
        for xi in 0..b {
            for q in 1..=q_max {
                for omega in histories.iter().filter(|o| o.total() <= q) {
                    states.push(MarkovState { omega: omega.clone(), q, xi });
                }
            }
        }
        // (1_1, 1, 1) first.
        let first = MarkovState { omega: HistoryCounter::unit(b, 0), q: 1, xi: 0 };
        let pos = states.iter().position(|s| *s == first).expect("unit history is always enumerated");
        states[..=pos].rotate_right(1);
        let index: HashMap<MarkovState, usize> =
            states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let at = |omega: &HistoryCounter, q: u32, xi: usize| {
            index[&MarkovState { omega: omega.clone(), q: q.min(q_max), xi }]
        };

        let mut g_new = Vec::with_capacity(b);
        for xi in 0..b {
            g_new.push(check_prob(g(&HistoryCounter::zero(b), xi)?)?);
        }

        let mut costs = Vec::with_capacity(states.len());
        let mut transitions = Vec::with_capacity(states.len());
        for s in &states {
            costs.push(stage_cost(ladder, mode, s.q));
            let unit = HistoryCounter::unit(b, s.xi);
            let mut new = Vec::with_capacity(2 * b);
            for nxt in 0..b {
                let p = channel.p(s.xi, nxt);
                new.push((at(&unit, 1, nxt), p * (1.0 - g_new[s.xi])));
                new.push((at(&unit, s.q + 1, nxt), p * g_new[s.xi]));
            }
            let total = s.omega.total();
            let retx = if total < s.q && s.omega.counts[s.xi] < caps[s.xi] {
                let e = check_prob(g(&s.omega, s.xi)?)?;
                let grown = s.omega.incremented(s.xi);
                let mut tr = Vec::with_capacity(2 * b);
                for nxt in 0..b {
                    let p = channel.p(s.xi, nxt);
                    tr.push((at(&grown, total + 1, nxt), p * (1.0 - e)));
                    tr.push((at(&grown, s.q + 1, nxt), p * e));
                }
                Some(merge(tr))
            } else {
                None
            };
            transitions.push([Some(merge(new)), retx]);
        }
        let mdp = FiniteMdp::new(costs, transitions)?;
        Ok(Self {
            states,
            index,
            mdp,
            channel: channel.clone(),
            caps: caps.to_vec(),
            q_max,
            mode,
            ladder: ladder.clone(),
            label: "markov".into(),
        })
    }

    pub fn index_of(&self, s: &MarkovState) -> Option<usize> {
        self.index.get(s).copied()
    }

    fn meta(&self, kind: &str) -> PolicyMeta {
        let caps: Vec<String> = self.caps.iter().map(u32::to_string).collect();
        PolicyMeta {
            kind: kind.into(),
            cost_mode: self.mode,
            channel: self.label.clone(),
            scheme: None,
            truncation: BTreeMap::from([
                ("omega_caps".to_string(), caps.join(",")),
                ("q_max".to_string(), self.q_max.to_string()),
            ]),
            zeta: None,
            span: None,
            iterations: None,
        }
    }

    pub fn policy_from_actions(&self, actions: Vec<Action>, kind: &str) -> Result<Policy<MarkovState>> {
        Policy::new(self.states.clone(), actions, self.meta(kind))
    }

    pub fn actions_of(&self, policy: &Policy<MarkovState>) -> Result<Vec<Action>> {
        self.states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let a = policy
                    .action(s)
                    .ok_or_else(|| Error::Usage(format!("policy has no action for state {}", s.key())))?;
                if !self.mdp.allows(i, a) {
                    return Err(Error::Usage(format!("policy retransmits in state {} where it is unavailable", s.key())));
                }
                Ok(a)
            })
            .collect()
    }

    pub fn evaluate(&self, policy: &Policy<MarkovState>) -> Result<f64> {
        self.mdp.evaluate_policy(&self.actions_of(policy)?)
    }

    pub fn no_retransmission_policy(&self) -> Result<Policy<MarkovState>> {
        self.policy_from_actions(vec![Action::New; self.states.len()], "no-retransmission")
    }

    pub fn psi_policy(&self) -> Result<Policy<MarkovState>> {
        let actions = (0..self.states.len())
            .map(|i| if self.mdp.allows(i, Action::Retransmit) { Action::Retransmit } else { Action::New })
            .collect();
        self.policy_from_actions(actions, "always-retransmit")
    }
}

fn check_prob(p: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Model(format!("error probability {p} outside [0,1]")))
    }
}

/// Solves with relative value iteration, reference state `(1_1, 1, 1)`.
pub fn solve_rvi_markov(mdp: &MarkovMdp, tol: f64, max_iters: usize) -> Result<Policy<MarkovState>> {
    let sol = solve_average_cost(&mdp.mdp, &RviOptions { tol, max_iters, reference: 0, ..Default::default() })?;
    let kind = match mdp.mode {
        CostMode::Mse => "optimal",
        CostMode::Delay => "delay-optimal",
    };
    let mut policy = mdp.policy_from_actions(sol.actions, kind)?;
    policy.meta.zeta = Some(sol.zeta);
    policy.meta.span = Some(sol.span);
    policy.meta.iterations = Some(sol.iterations);
    Ok(policy)
}

/// Myopic rule applied to every state of the truncated Markov MDP.
pub fn myopic_policy_markov(mdp: &MarkovMdp, harq: &HarqModel) -> Result<Policy<MarkovState>> {
    let gains = &mdp.channel.gains;
    let b = gains.len();
    let cost = |q: u32| stage_cost(&mdp.ladder, mdp.mode, q);
    let mut actions = Vec::with_capacity(mdp.states.len());
    for (i, s) in mdp.states.iter().enumerate() {
        if !mdp.mdp.allows(i, Action::Retransmit) {
            actions.push(Action::New);
            continue;
        }
        let g_new = harq.conditional_error_indexed(gains, &HistoryCounter::zero(b), s.xi)?;
        let g_retx = harq.conditional_error_indexed(gains, &s.omega, s.xi)?;
        let r = s.omega.total();
        actions.push(crate::mdp_static::myopic_action(g_new, g_retx, cost(s.q + 1), cost(1), cost(r + 1)));
    }
    mdp.policy_from_actions(actions, "myopic")
}

/// Sufficient-condition check `ρ(Π·diag(Λ)) ρ²(A) < 1`.
pub fn check_stability_markov(pi: &Matrix, lambdas: &[f64], rho_sq_a: f64) -> Result<StabilityReport> {
    if pi.nrows() != lambdas.len() || pi.ncols() != lambdas.len() {
        return Err(Error::Dimension(format!(
            "transition matrix {:?} vs {} worst-case errors",
            pi.shape(),
            lambdas.len()
        )));
    }
    let weighted = pi * Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(lambdas));
    let product = spectral_radius(&weighted)? * rho_sq_a;
    Ok(StabilityReport { product, stable: product < 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCell {
    pub rho_sq: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub stable: bool,
}

/// Stability verdicts on a `(resolution+1)²` grid of `(Λ₁, Λ₂) ∈ [0,1]²` for
/// each `ρ²(A)` in `rho_sqs`. Two-state channels only.
pub fn stability_region_grid(pi: &Matrix, rho_sqs: &[f64], resolution: usize) -> Result<Vec<RegionCell>> {
    if pi.shape() != (2, 2) {
        return Err(Error::Dimension("stability region grid needs a two-state channel".into()));
    }
    if resolution == 0 {
        return Err(Error::Usage("grid resolution must be at least 1".into()));
    }
    let mut cells = Vec::with_capacity(rho_sqs.len() * (resolution + 1).pow(2));
    for &rho_sq in rho_sqs {
        for i in 0..=resolution {
            for j in 0..=resolution {
                let (l1, l2) = (i as f64 / resolution as f64, j as f64 / resolution as f64);
                let stable = check_stability_markov(pi, &[l1, l2], rho_sq)?.stable;
                cells.push(RegionCell { rho_sq, lambda1: l1, lambda2: l2, stable });
            }
        }
    }
    Ok(cells)
}

/// Checks `π(Ω,q,Ξ)=0 ⇒ π(Ω+z·1ᵢ,q,Ξ)=0` and `π(Ω,q,Ξ)=1 ⇒ π(Ω,q+z,Ξ)=1`.
pub fn verify_switching_markov(policy: &Policy<MarkovState>) -> SwitchingReport<MarkovState> {
    let mut violations = Vec::new();
    for (s, &a) in policy.states.iter().zip(&policy.actions) {
        for other in &policy.states {
            if other.xi != s.xi {
                continue;
            }
            let witness = match a {
                Action::New => {
                    other.q == s.q && other.omega != s.omega && dominated_along_one_axis(&s.omega, &other.omega)
                }
                Action::Retransmit => other.omega == s.omega && other.q > s.q,
            };
            if witness && policy.action(other) != Some(a) {
                violations.push((s.clone(), other.clone()));
            }
        }
    }
    violations.sort();
    SwitchingReport { violations }
}

/// `bigger = smaller + z·1ᵢ` for some index `i` and `z >= 1`.
fn dominated_along_one_axis(smaller: &HistoryCounter, bigger: &HistoryCounter) -> bool {
    let mut diffs = smaller.counts.iter().zip(&bigger.counts).filter(|(a, b)| a != b);
    matches!((diffs.next(), diffs.next()), (Some((a, b)), None) if b > a)
}

/// Reduced chain of the high-SNR threshold policy (retransmissions always
/// succeed). Each channel block lists `(2,2)` first, then `(1,q)` for
/// `q = 1..block-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighSnrChain {
    pub theta: Vec<u32>,
    /// Column-stochastic transition matrix.
    pub m: Matrix,
    pub costs: Vec<f64>,
    pub block: usize,
}

impl HighSnrChain {
    /// `lambda_primes[i]` is the new-transmission error in channel state `i`.
    pub fn new(ladder: &CostLadder, pi: &Matrix, lambda_primes: &[f64], theta: &[u32]) -> Result<Self> {
        let b = lambda_primes.len();
        if pi.shape() != (b, b) || theta.len() != b {
            return Err(Error::Dimension("channel size, errors and thresholds disagree".into()));
        }
        if theta.contains(&0) {
            return Err(Error::Usage("thresholds must be at least 1".into()));
        }
        let theta_max = *theta.iter().max().expect("b >= 1");
        // A failed new transmission out of (2,2) lands on (1,3), so every
        // block must reach q = 3 even when all thresholds are 1.
        let block = theta_max.max(2) as usize + 2;
        if ladder.depth() < block {
            return Err(Error::Depth { safe_depth: ladder.depth() });
        }
        let mut cols = Vec::with_capacity(b);
        for (i, (&l, &th)) in lambda_primes.iter().zip(theta).enumerate() {
            let mut mi = Matrix::zeros(block, block);
            for src in 0..block {
                let q = if src == 0 { 2 } else { src };
                if src != 0 && q > th as usize {
                    mi[(0, src)] = 1.0;
                } else {
                    mi[(1, src)] += 1.0 - l;
                    mi[((q + 1).min(block - 1), src)] += l;
                }
            }
            cols.push(kronecker(&Matrix::from_column_slice(b, 1, pi.column(i).as_slice()), &mi));
        }
        let mut m = Matrix::zeros(b * block, b * block);
        for (i, c) in cols.iter().enumerate() {
            m.view_mut((0, i * block), (b * block, block)).copy_from(c);
        }
        let per_block: Vec<f64> =
            (0..block).map(|pos| ladder.cost(if pos == 0 { 2 } else { pos })).collect();
        let costs = per_block.iter().copied().cycle().take(b * block).collect();
        Ok(Self { theta: theta.to_vec(), m, costs, block })
    }

    /// Long-run average cost `cᵀe / ‖e‖₁`.
    pub fn zeta(&self) -> Result<f64> {
        let n = self.m.nrows();
        let e = null_space_vector(&(&self.m - Matrix::identity(n, n)))?;
        let norm: f64 = e.iter().map(|x| x.abs()).sum();
        Ok(e.iter().zip(&self.costs).map(|(p, c)| p * c).sum::<f64>() / norm)
    }
}

/// Exhaustive search over thresholds in `{1..=theta_max}^B`.
pub fn high_snr_markov(
    ladder: &CostLadder,
    pi: &Matrix,
    lambda_primes: &[f64],
    theta_max: u32,
) -> Result<(Vec<u32>, f64)> {
    let b = lambda_primes.len();
    if theta_max == 0 || b == 0 {
        return Err(Error::Usage("need theta_max >= 1 and at least one channel state".into()));
    }
    let grid: Vec<Vec<u32>> = (0..(theta_max as usize).pow(b as u32))
        .map(|mut k| {
            let mut th = vec![0u32; b];
            for slot in th.iter_mut().rev() {
                *slot = (k % theta_max as usize) as u32 + 1;
                k /= theta_max as usize;
            }
            th
        })
        .collect();
    let results: Vec<Option<f64>> = grid
        .par_iter()
        .map(|th| match HighSnrChain::new(ladder, pi, lambda_primes, th).and_then(|c| c.zeta()) {
            Ok(z) => Some(z),
            Err(e) => {
                log::warn!("skipping thresholds {th:?}: {e}");
                None
            }
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (k, z) in results.iter().enumerate() {
        if let Some(z) = *z {
            if best.is_none_or(|(_, bz)| z < bz) {
                best = Some((k, z));
            }
        }
    }
    let (k, z) = best.ok_or_else(|| Error::DegenerateModel("no threshold vector gave a unique chain".into()))?;
    Ok((grid[k].clone(), z))
}
