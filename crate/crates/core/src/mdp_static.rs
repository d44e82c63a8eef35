//! Static-channel MDP over `(r, q)`: attempt count and AoI.
//!
//! Truncation rules: AoI saturates at `q_max` on failure, and retransmission
//! is unavailable both at `r = r_max` and on the diagonal `r = q` (the
//! previous packet was delivered, so there is nothing to retransmit).

use std::collections::{BTreeMap, HashMap};

use crate::channel::Action;
use crate::harq::HarqModel;
use crate::lti::CostLadder;
use crate::mdp::{
    solve_average_cost, CostMode, FiniteMdp, Policy, PolicyMeta, RviOptions, StateKey, Transition,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StaticState {
    pub r: u32,
    pub q: u32,
}

impl StaticState {
    pub fn new(r: u32, q: u32) -> Self {
        Self { r, q }
    }
}

impl StateKey for StaticState {
    fn key(&self) -> String {
        format!("{},{}", self.r, self.q)
    }

    fn parse_key(key: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad static state key '{key}' (expected \"r,q\")"));
        let (r, q) = key.split_once(',').ok_or_else(bad)?;
        let r: u32 = r.trim().parse().map_err(|_| bad())?;
        let q: u32 = q.trim().parse().map_err(|_| bad())?;
        if r == 0 || r > q {
            return Err(bad());
        }
        Ok(Self { r, q })
    }
}

/// Per-slot cost at AoI `q`.
pub fn stage_cost(ladder: &CostLadder, mode: CostMode, q: u32) -> f64 {
    match mode {
        CostMode::Mse => ladder.cost(q as usize),
        CostMode::Delay => q as f64,
    }
}

#[derive(Debug, Clone)]
pub struct StaticMdp {
    pub states: Vec<StaticState>,
    index: HashMap<StaticState, usize>,
    pub mdp: FiniteMdp,
    /// `g_table[r - 1] = g(r)` for `r = 1..=r_max`.
    pub g_table: Vec<f64>,
    pub r_max: u32,
    pub q_max: u32,
    pub mode: CostMode,
    pub ladder: CostLadder,
    pub label: String,
}

/// Builds the truncated kernel for a static channel with gain `gain`.
pub fn build_static_mdp(
    ladder: &CostLadder,
    harq: &HarqModel,
    gain: f64,
    r_max: u32,
    q_max: u32,
    mode: CostMode,
) -> Result<StaticMdp> {
    let g = harq.static_error_table(gain, r_max.max(1) as usize)?;
    let mut mdp = StaticMdp::from_error_table(ladder, g, r_max, q_max, mode)?;
    mdp.label = format!("static h={gain} {}", harq.scheme);
    Ok(mdp)
}

impl StaticMdp {
    /// Builds the kernel from explicit error probabilities `g(1..=r_max)`.
    pub fn from_error_table(
        ladder: &CostLadder,
        g_table: Vec<f64>,
        r_max: u32,
        q_max: u32,
        mode: CostMode,
    ) -> Result<Self> {
        if r_max < 2 || q_max < r_max {
            return Err(Error::Config(format!(
                "truncation needs 2 <= r_max <= q_max, got r_max={r_max}, q_max={q_max}"
            )));
        }
        if g_table.len() < r_max as usize || g_table.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Model(format!("need error probabilities g(1..={r_max}) in [0,1]")));
        }
        if ladder.depth() < q_max as usize + 1 {
            return Err(Error::Depth { safe_depth: ladder.depth() });
        }

        let mut states = Vec::new();
        for q in 1..=q_max {
            for r in 1..=q.min(r_max) {
                states.push(StaticState { r, q });
            }
        }
        let index: HashMap<StaticState, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let at = |r: u32, q: u32| index[&StaticState { r, q: q.min(q_max) }];
        let g = |r: u32| g_table[r as usize - 1];

        let mut costs = Vec::with_capacity(states.len());
        let mut transitions = Vec::with_capacity(states.len());
        for &StaticState { r, q } in &states {
            costs.push(stage_cost(ladder, mode, q));
            let new: Transition = merge(vec![(at(1, 1), 1.0 - g(1)), (at(1, q + 1), g(1))]);
            let retx = (r < q && r < r_max)
                .then(|| merge(vec![(at(r + 1, r + 1), 1.0 - g(r + 1)), (at(r + 1, q + 1), g(r + 1))]));
            transitions.push([Some(new), retx]);
        }
        let mdp = FiniteMdp::new(costs, transitions)?;
        Ok(Self {
            states,
            index,
            mdp,
            g_table,
            r_max,
            q_max,
            mode,
            ladder: ladder.clone(),
            label: "static".into(),
        })
    }

    pub fn index_of(&self, s: StaticState) -> Option<usize> {
        self.index.get(&s).copied()
    }

    pub fn g(&self, r: u32) -> f64 {
        self.g_table[r as usize - 1]
    }

    pub fn cost(&self, q: u32) -> f64 {
        stage_cost(&self.ladder, self.mode, q)
    }

    fn meta(&self, kind: &str) -> PolicyMeta {
        PolicyMeta {
            kind: kind.into(),
            cost_mode: self.mode,
            channel: self.label.clone(),
            scheme: None,
            truncation: BTreeMap::from([
                ("r_max".to_string(), self.r_max.to_string()),
                ("q_max".to_string(), self.q_max.to_string()),
            ]),
            zeta: None,
            span: None,
            iterations: None,
        }
    }

    /// Wraps a per-state action vector as a policy.
    pub fn policy_from_actions(&self, actions: Vec<Action>, kind: &str) -> Result<Policy<StaticState>> {
        Policy::new(self.states.clone(), actions, self.meta(kind))
    }

    /// Actions of `policy` in this MDP's state order.
    pub fn actions_of(&self, policy: &Policy<StaticState>) -> Result<Vec<Action>> {
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

    /// Exact average cost of `policy` on this truncated MDP.
    pub fn evaluate(&self, policy: &Policy<StaticState>) -> Result<f64> {
        self.mdp.evaluate_policy(&self.actions_of(policy)?)
    }

    /// Never retransmit.
    pub fn no_retransmission_policy(&self) -> Result<Policy<StaticState>> {
        self.policy_from_actions(vec![Action::New; self.states.len()], "no-retransmission")
    }

    /// Retransmit until success, wherever retransmission is available.
    pub fn psi_policy(&self) -> Result<Policy<StaticState>> {
        let actions = (0..self.states.len())
            .map(|i| if self.mdp.allows(i, Action::Retransmit) { Action::Retransmit } else { Action::New })
            .collect();
        self.policy_from_actions(actions, "always-retransmit")
    }
}

/// Combines duplicate targets (saturation can map two branches to one state).
pub(crate) fn merge(mut tr: Transition) -> Transition {
    tr.sort_by_key(|&(t, _)| t);
    let mut out: Transition = Vec::with_capacity(tr.len());
    for (t, p) in tr {
        match out.last_mut() {
            Some(last) if last.0 == t => last.1 += p,
            _ => out.push((t, p)),
        }
    }
    out
}

/// Sufficient-condition check `Λ₀ ρ²(A) < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub product: f64,
    pub stable: bool,
}

pub fn check_stability_static(lambda0: f64, rho_sq_a: f64) -> StabilityReport {
    let product = lambda0 * rho_sq_a;
    StabilityReport { product, stable: product < 1.0 }
}

/// Solves the truncated MDP with relative value iteration from `(1,1)`.
pub fn solve_rvi(mdp: &StaticMdp, tol: f64, max_iters: usize) -> Result<Policy<StaticState>> {
    let reference = mdp.index_of(StaticState::new(1, 1)).expect("(1,1) is always enumerated");
    let sol = solve_average_cost(&mdp.mdp, &RviOptions { tol, max_iters, reference, ..Default::default() })?;
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

/// Violations of the switching structure, as `(state, witness)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SwitchingReport<S> {
    pub violations: Vec<(S, S)>,
}

impl<S> SwitchingReport<S> {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `π(r,q)=0 ⇒ π(r+z,q)=0` and `π(r,q)=1 ⇒ π(r,q+z)=1` over the
/// states present in `policy`.
pub fn verify_switching(policy: &Policy<StaticState>) -> SwitchingReport<StaticState> {
    let mut violations = Vec::new();
    for (s, &a) in policy.states.iter().zip(&policy.actions) {
        for other in policy.states.iter() {
            let witness = match a {
                Action::New => other.q == s.q && other.r > s.r,
                Action::Retransmit => other.r == s.r && other.q > s.q,
            };
            if witness && policy.action(other) != Some(a) {
                violations.push((*s, *other));
            }
        }
    }
    violations.sort();
    SwitchingReport { violations }
}

/// Myopic decision: pick the action with the smaller expected next-slot cost.
///
/// `c_next_fail`, `c_new_ok`, `c_retx_ok` are the costs after a failure, a
/// successful new transmission and a successful retransmission. Equal error
/// probabilities (no reliability gain) select a new transmission.
pub fn myopic_action(g_new: f64, g_retx: f64, c_next_fail: f64, c_new_ok: f64, c_retx_ok: f64) -> Action {
    let gap = g_new - g_retx;
    if gap.abs() < 1e-15 {
        return Action::New;
    }
    let lhs = gap * c_next_fail;
    let rhs = (1.0 - g_retx) * c_retx_ok - (1.0 - g_new) * c_new_ok;
    if lhs <= rhs {
        Action::New
    } else {
        Action::Retransmit
    }
}

/// The one-step-lookahead policy, closed form per state.
pub fn myopic_policy(mdp: &StaticMdp) -> Result<Policy<StaticState>> {
    let actions = mdp
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if !mdp.mdp.allows(i, Action::Retransmit) {
                return Action::New;
            }
            myopic_action(mdp.g(1), mdp.g(s.r + 1), mdp.cost(s.q + 1), mdp.cost(1), mdp.cost(s.r + 1))
        })
        .collect();
    mdp.policy_from_actions(actions, "myopic")
}

/// High-SNR average cost for switching threshold `theta`, assuming every
/// retransmission succeeds and a new transmission fails w.p. `lambda`.
pub fn high_snr_zeta_static(ladder: &CostLadder, lambda: f64, theta: u32) -> Result<f64> {
    if theta == 0 {
        return Err(Error::Usage("threshold must be at least 1".into()));
    }
    if ladder.depth() < theta as usize + 2 {
        return Err(Error::Depth { safe_depth: ladder.depth() });
    }
    let c = |n: u32| ladder.cost(n as usize);
    let l = lambda;
    if theta == 1 {
        return Ok(((1.0 - l) * c(1) + (2.0 * l - l * l) * c(2) + l * l * c(3)) / (1.0 + l));
    }
    let t = theta as i32;
    let series: f64 = (1..=theta + 1).map(|i| c(i) * l.powi(i as i32 - 1)).sum();
    let numer = (1.0 - l) * (series - c(1) * l.powi(t - 1));
    let denom = 1.0 - l.powi(t - 1) + l.powi(t) - l.powi(t + 1);
    Ok(numer / denom)
}

/// Best threshold in `1..=theta_max` and its average cost.
pub fn high_snr_optimal_static(ladder: &CostLadder, lambda: f64, theta_max: u32) -> Result<(u32, f64)> {
    let mut best = (0, f64::INFINITY);
    for theta in 1..=theta_max {
        let z = high_snr_zeta_static(ladder, lambda, theta)?;
        if z < best.1 {
            best = (theta, z);
        }
    }
    if best.0 == 0 {
        return Err(Error::Usage("theta_max must be at least 1".into()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harq::{worst_retransmission_error_static, HarqScheme};
    use crate::lti::{solve_steady_state, LtiSystem};
    use crate::mdp::tests::brute_force;
    use crate::numerics::{stationary_distribution, Matrix};

    fn reference_ladder(depth: usize) -> CostLadder {
        let sys = LtiSystem::new(
            Matrix::from_row_slice(2, 2, &[2.4, 0.2, 0.2, 0.8]),
            Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
            Matrix::identity(2, 2),
            Matrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let kal = solve_steady_state(&sys).unwrap();
        CostLadder::build(&sys, &kal, depth).unwrap()
    }

    fn reference_mdp(scheme: HarqScheme, mode: CostMode) -> StaticMdp {
        let harq = HarqModel::from_db(scheme, 10.0, 100, 4.0).unwrap();
        build_static_mdp(&reference_ladder(22), &harq, 2.0, 20, 20, mode).unwrap()
    }

    #[test]
    fn state_space_size_and_order() {
        let m = reference_mdp(HarqScheme::Cc, CostMode::Mse);
        assert_eq!(m.states.len(), 210);
        assert_eq!(m.states[0], StaticState::new(1, 1));
        assert!(m.mdp.max_row_sum_error() <= 1e-12);
    }

    #[test]
    fn kernel_read_off() {
        let g = vec![0.3, 0.2, 0.1, 0.05, 0.04, 0.03];
        let m = StaticMdp::from_error_table(&reference_ladder(8), g, 6, 6, CostMode::Mse).unwrap();
        let idx = |r, q| m.index_of(StaticState::new(r, q)).unwrap();
        let new = m.mdp.transition(idx(1, 1), Action::New).unwrap();
        assert_eq!(new, &vec![(idx(1, 1), 0.7), (idx(1, 2), 0.3)]);
        let mut retx = m.mdp.transition(idx(2, 5), Action::Retransmit).unwrap().clone();
        retx.sort_by_key(|x| x.0);
        let mut expected = vec![(idx(3, 3), 0.9), (idx(3, 6), 0.1)];
        expected.sort_by_key(|x| x.0);
        assert_eq!(retx, expected);
        // Saturation at q_max and the forced boundaries.
        let top = m.mdp.transition(idx(1, 6), Action::New).unwrap();
        assert_eq!(top, &vec![(idx(1, 1), 0.7), (idx(1, 6), 0.3)]);
        assert!(!m.mdp.allows(idx(3, 3), Action::Retransmit));
        assert!(!m.mdp.allows(idx(6, 6), Action::Retransmit));
        assert!(m.mdp.max_row_sum_error() <= 1e-12);
    }

    #[test]
    fn rejects_small_truncation() {
        assert!(matches!(
            StaticMdp::from_error_table(&reference_ladder(8), vec![0.1], 1, 5, CostMode::Mse),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn error_free_link_pins_cost() {
        let ladder = reference_ladder(22);
        let m = StaticMdp::from_error_table(&ladder, vec![0.0; 20], 20, 20, CostMode::Mse).unwrap();
        let p = solve_rvi(&m, 1e-9, 100_000).unwrap();
        assert_eq!(p.count(Action::Retransmit), 0);
        assert!((p.meta.zeta.unwrap() - ladder.cost(1)).abs() < 1e-9);
    }

    #[test]
    fn tiny_mdp_matches_brute_force() {
        let ladder = CostLadder::from_traces(vec![1.0, 4.0, 9.0, 30.0, 90.0]).unwrap();
        for g in [vec![0.6, 0.2, 0.1], vec![0.4, 0.39, 0.3], vec![0.9, 0.05, 0.5]] {
            for q_max in [2, 3, 4] {
                let m = StaticMdp::from_error_table(&ladder, g.clone(), 2, q_max, CostMode::Mse).unwrap();
                let p = solve_rvi(&m, 1e-12, 100_000).unwrap();
                let (acts, z) = brute_force(&m.mdp);
                assert_eq!(p.actions, acts);
                assert!((p.meta.zeta.unwrap() - z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn default_setting_is_switching_and_optimal() {
        for scheme in [HarqScheme::Cc, HarqScheme::Ir] {
            let m = reference_mdp(scheme, CostMode::Mse);
            let p = solve_rvi(&m, 1e-9, 100_000).unwrap();
            assert!(verify_switching(&p).passed());
            // Near the diagonal the policy transmits fresh data.
            for q in 1..=20 {
                assert_eq!(p.action(&StaticState::new(q, q)), Some(Action::New));
            }
            let z = m.evaluate(&p).unwrap();
            assert!((z - p.meta.zeta.unwrap()).abs() <= 1e-6 * z);
            for other in [myopic_policy(&m).unwrap(), m.no_retransmission_policy().unwrap(), m.psi_policy().unwrap()] {
                assert!(z <= m.evaluate(&other).unwrap() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn delay_mode_transmits_fresh_more_often() {
        let mse = solve_rvi(&reference_mdp(HarqScheme::Cc, CostMode::Mse), 1e-9, 100_000).unwrap();
        let delay = solve_rvi(&reference_mdp(HarqScheme::Cc, CostMode::Delay), 1e-9, 100_000).unwrap();
        assert!(verify_switching(&delay).passed());
        assert!(delay.count(Action::New) >= mse.count(Action::New));
    }

    #[test]
    fn switching_checker() {
        let m = reference_mdp(HarqScheme::Cc, CostMode::Mse);
        let zeros = m.no_retransmission_policy().unwrap();
        assert!(verify_switching(&zeros).passed());
        let mut actions = zeros.actions.clone();
        actions[m.index_of(StaticState::new(3, 5)).unwrap()] = Action::Retransmit;
        let bad = m.policy_from_actions(actions, "test").unwrap();
        let report = verify_switching(&bad);
        assert!(report.violations.contains(&(StaticState::new(2, 5), StaticState::new(3, 5))));
        assert!(!report.passed());
    }

    #[test]
    fn stability_examples() {
        assert_eq!(check_stability_static(0.0, 1e6).product, 0.0);
        assert!(check_stability_static(0.0, 1e6).stable);
        let r = check_stability_static(0.5, 3.3801);
        assert!((r.product - 1.69005).abs() < 1e-12 && !r.stable);
        let harq = HarqModel::from_db(HarqScheme::Cc, 10.0, 100, 4.0).unwrap();
        let l0 = worst_retransmission_error_static(&harq, 2.0, 20).unwrap().value;
        assert!(check_stability_static(l0, 5.879).stable);
    }

    #[test]
    fn myopic_matches_direct_cost_comparison() {
        let m = reference_mdp(HarqScheme::Cc, CostMode::Mse);
        let p = myopic_policy(&m).unwrap();
        for (i, s) in m.states.iter().enumerate() {
            if !m.mdp.allows(i, Action::Retransmit) {
                continue;
            }
            let c0 = m.g(1) * m.cost(s.q + 1) + (1.0 - m.g(1)) * m.cost(1);
            let gr = m.g(s.r + 1);
            let c1 = gr * m.cost(s.q + 1) + (1.0 - gr) * m.cost(s.r + 1);
            let expected = if c1 - c0 >= 0.0 { Action::New } else { Action::Retransmit };
            assert_eq!(p.actions[i], expected, "state {}", s.key());
        }
        assert!(verify_switching(&p).passed());
    }

    #[test]
    fn myopic_degenerate_cases() {
        assert_eq!(myopic_action(0.3, 0.3, 1e9, 1.0, 5.0), Action::New);
        // Huge AoI cost with any reliability gain favours retransmission.
        assert_eq!(myopic_action(0.3, 0.01, 1e15, 15.8, 83.4), Action::Retransmit);
    }

    /// Stationary cost of the reduced high-SNR chain, built state by state.
    fn reduced_chain_zeta(ladder: &CostLadder, l: f64, theta: u32) -> f64 {
        // Index 0: (2,2); index q: (1,q) for q = 1..=theta+2.
        let n = theta as usize + 3;
        let mut p = Matrix::zeros(n, n);
        for s in 0..n {
            let q = if s == 0 { 2 } else { s as u32 };
            if s != 0 && q > theta {
                p[(0, s)] = 1.0;
            } else {
                p[(1, s)] += 1.0 - l;
                p[(((q + 1) as usize).min(n - 1), s)] += l;
            }
        }
        let e = stationary_distribution(&p).unwrap();
        (0..n).map(|s| e.as_slice()[s] * ladder.cost(if s == 0 { 2 } else { s })).sum()
    }

    #[test]
    fn high_snr_closed_form_matches_chain() {
        let ladder = reference_ladder(12);
        for l in [0.0, 0.1, 0.3, 0.5] {
            for theta in 1..=8 {
                let closed = high_snr_zeta_static(&ladder, l, theta).unwrap();
                let chain = reduced_chain_zeta(&ladder, l, theta);
                assert!((closed - chain).abs() <= 1e-9 * chain, "l={l} theta={theta}: {closed} vs {chain}");
            }
        }
        let (theta, z) = high_snr_optimal_static(&ladder, 0.0, 8).unwrap();
        assert_eq!(theta, 1);
        assert_eq!(z, ladder.cost(1));
    }

    #[test]
    fn key_round_trip() {
        let s = StaticState::new(3, 7);
        assert_eq!(StaticState::parse_key(&s.key()).unwrap(), s);
        assert!(StaticState::parse_key("4,2").is_err());
        assert!(StaticState::parse_key("x").is_err());
        let m = reference_mdp(HarqScheme::Cc, CostMode::Mse);
        let p = myopic_policy(&m).unwrap();
        let back = Policy::<StaticState>::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(m.actions_of(&back).unwrap(), p.actions);
    }
}
