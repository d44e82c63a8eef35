//! Seeded Monte Carlo of the closed loop.
//!
//! The receiver MSE is a deterministic function of the AoI, so the simulator
//! tracks `(r, q, Ω, Ξ)` and reads `Tr(P_k)` off the cost ladder instead of
//! simulating the process and the filter.
//!
//! Random numbers: replicate `i` uses `ChaCha8Rng::seed_from_u64(base_seed)`
//! switched to stream `i`. Every replicate first draws one uniform for the
//! initial channel state; every slot then draws exactly two uniforms, first
//! the packet outcome and then the channel transition. All policies therefore
//! see the same channel and outcome draws (common random numbers).

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{update_history, Action, MarkovChannel};
use crate::harq::{HarqModel, HistoryCounter};
use crate::lti::CostLadder;
use crate::mdp::Policy;
use crate::mdp_markov::MarkovState;
use crate::mdp_static::{myopic_action, StaticState};
use crate::{Error, Result};

/// Which decision rule drives the sensor.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    /// Solved table on the static `(r, q)` grid (optimal or delay-optimal).
    StaticTable(Arc<Policy<StaticState>>),
    /// Solved table on the Markov `(Ω, q, Ξ)` grid.
    MarkovTable(Arc<Policy<MarkovState>>),
    /// One-step lookahead, evaluated each slot.
    Myopic,
    NoRetransmission,
    /// Retransmit until delivered.
    AlwaysRetransmitPsi,
    /// Retransmit iff the AoI exceeds the current channel's threshold.
    Threshold(Vec<u32>),
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::StaticTable(p) => p.meta.kind.clone(),
            PolicySpec::MarkovTable(p) => p.meta.kind.clone(),
            PolicySpec::Myopic => "myopic".into(),
            PolicySpec::NoRetransmission => "no-retransmission".into(),
            PolicySpec::AlwaysRetransmitPsi => "always-retransmit".into(),
            PolicySpec::Threshold(t) => format!("threshold{t:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub slots: usize,
    pub replicates: usize,
    pub base_seed: u64,
    /// Fixed initial channel state (0-based); `None` draws it from the
    /// stationary distribution.
    pub initial_channel: Option<usize>,
    /// Make every retransmission succeed (high-SNR validation).
    pub force_success_retransmissions: bool,
    /// Keep per-slot records; off for long validation runs.
    pub record_slots: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            slots: 10_000,
            replicates: 1,
            base_seed: 0,
            initial_channel: None,
            force_success_retransmissions: false,
            record_slots: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotRecord {
    pub k: u64,
    pub a: Action,
    /// Packet delivered in this slot.
    pub gamma: bool,
    pub r: u32,
    pub q: u32,
    /// 0-based channel index.
    pub xi: usize,
    pub trace_mse: f64,
    pub running_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub replicate: u64,
    pub num_channels: usize,
    pub records: Vec<SlotRecord>,
    /// `Ω_k` for every recorded slot, `num_channels` entries each.
    pub omegas: Vec<u32>,
    /// Running average after each simulated slot.
    pub running_avg: Vec<f64>,
    /// Slot at which the AoI left the finite part of the cost ladder.
    pub diverged_at: Option<u64>,
}

pub const TRACE_HEADER: &str = "k,a,gamma,r,q,xi,trace_mse,running_avg";

impl SimulationTrace {
    pub fn final_average(&self) -> f64 {
        self.running_avg.last().copied().unwrap_or(f64::NAN)
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn omega(&self, slot_index: usize) -> &[u32] {
        &self.omegas[slot_index * self.num_channels..(slot_index + 1) * self.num_channels]
    }

    /// Delimited export with channel indices 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.k,
                r.a.as_u8(),
                u8::from(r.gamma),
                r.r,
                r.q,
                r.xi + 1,
                r.trace_mse,
                r.running_avg
            )?;
        }
        Ok(())
    }
}

/// Shared immutable inputs of a simulation.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub ladder: CostLadder,
    pub harq: Arc<HarqModel>,
    pub channel: MarkovChannel,
}

struct Walker {
    r: u32,
    q: u32,
    omega: HistoryCounter,
    xi: usize,
}

impl Simulator {
    pub fn new(ladder: CostLadder, harq: Arc<HarqModel>, channel: MarkovChannel) -> Self {
        Self { ladder, harq, channel }
    }

    fn g(&self, omega: &HistoryCounter, xi: usize) -> Result<f64> {
        self.harq.conditional_error_indexed(&self.channel.gains, omega, xi)
    }

    fn decide(&self, policy: &PolicySpec, w: &Walker) -> Result<Action> {
        // The previous packet was delivered: only fresh data makes sense.
        if w.omega.total() >= w.q {
            return Ok(Action::New);
        }
        Ok(match policy {
            PolicySpec::NoRetransmission => Action::New,
            PolicySpec::AlwaysRetransmitPsi => Action::Retransmit,
            PolicySpec::Threshold(theta) => {
                let th = *theta
                    .get(w.xi)
                    .ok_or_else(|| Error::Usage("threshold vector shorter than channel".into()))?;
                if w.q > th {
                    Action::Retransmit
                } else {
                    Action::New
                }
            }
            PolicySpec::Myopic => {
                let b = self.channel.num_states();
                let cost = |n: u32| self.ladder.get(n as usize).unwrap_or(f64::INFINITY);
                let g_new = self.g(&HistoryCounter::zero(b), w.xi)?;
                let g_retx = self.g(&w.omega, w.xi)?;
                myopic_action(g_new, g_retx, cost(w.q + 1), cost(1), cost(w.r + 1))
            }
            PolicySpec::StaticTable(p) => {
                let r_max = p.states.iter().map(|s| s.r).max().unwrap_or(1);
                let q_max = p.states.iter().map(|s| s.q).max().unwrap_or(1);
                let q = w.q.min(q_max);
                let key = StaticState { r: w.r.min(r_max).min(q), q };
                p.action(&key).unwrap_or(Action::New)
            }
            PolicySpec::MarkovTable(p) => {
                let b = w.omega.counts.len();
                let q_max = p.states.iter().map(|s| s.q).max().unwrap_or(1);
                let caps: Vec<u32> = (0..b)
                    .map(|i| p.states.iter().map(|s| s.omega.counts.get(i).copied().unwrap_or(0)).max().unwrap_or(0))
                    .collect();
                let counts = w.omega.counts.iter().zip(&caps).map(|(&c, &cap)| c.min(cap)).collect();
                let key = MarkovState { omega: HistoryCounter { counts }, q: w.q.min(q_max), xi: w.xi };
                p.action(&key).unwrap_or(Action::New)
            }
        })
    }

    /// One replicate.
    pub fn run(&self, policy: &PolicySpec, cfg: &SimConfig, replicate: u64) -> Result<SimulationTrace> {
        if cfg.slots == 0 {
            return Err(Error::Usage("simulation needs at least one slot".into()));
        }
        let b = self.channel.num_states();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
        rng.set_stream(replicate);

        let u0: f64 = rng.random();
        let xi0 = match cfg.initial_channel {
            Some(i) if i < b => i,
            Some(i) => return Err(Error::Usage(format!("initial channel {} out of range", i + 1))),
            None => {
                let e = self.channel.stationary()?;
                let mut acc = 0.0;
                e.as_slice().iter().position(|p| {
                    acc += p;
                    u0 < acc
                })
                .unwrap_or(b - 1)
            }
        };

        let mut w = Walker { r: 1, q: 1, omega: HistoryCounter::unit(b, xi0), xi: xi0 };
        let cap = if cfg.record_slots { cfg.slots } else { 0 };
        let mut records = Vec::with_capacity(cap);
        let mut omegas = Vec::with_capacity(cap * b);
        let mut running_avg = Vec::with_capacity(cfg.slots);
        let mut sum = 0.0;
        let mut diverged_at = None;

        for k in 1..=cfg.slots as u64 {
            let Some(mse) = self.ladder.get(w.q as usize) else {
                diverged_at = Some(k);
                break;
            };
            let a = self.decide(policy, &w)?;
            let p_fail = match a {
                Action::New => self.g(&HistoryCounter::zero(b), w.xi)?,
                Action::Retransmit if cfg.force_success_retransmissions => 0.0,
                Action::Retransmit => self.g(&w.omega, w.xi)?,
            };
            let u: f64 = rng.random();
            let gamma = u >= p_fail;

            sum += mse;
            if !sum.is_finite() {
                diverged_at = Some(k);
                break;
            }
            let avg = sum / k as f64;
            running_avg.push(avg);
            if cfg.record_slots {
                records.push(SlotRecord { k, a, gamma, r: w.r, q: w.q, xi: w.xi, trace_mse: mse, running_avg: avg });
                omegas.extend_from_slice(&w.omega.counts);
            }

            let next_r = if a == Action::New { 1 } else { w.r + 1 };
            w.q = if gamma { next_r } else { w.q + 1 };
            w.r = next_r;
            w.omega = update_history(&w.omega, a, w.xi);
            w.xi = self.channel.step(w.xi, &mut rng);
        }

        Ok(SimulationTrace {
            seed: cfg.base_seed,
            replicate,
            num_channels: b,
            records,
            omegas,
            running_avg,
            diverged_at,
        })
    }

    /// All replicates, in replicate order.
    pub fn run_replicates(&self, policy: &PolicySpec, cfg: &SimConfig) -> Result<Vec<SimulationTrace>> {
        (0..cfg.replicates as u64).into_par_iter().map(|i| self.run(policy, cfg, i)).collect()
    }

    /// Runs every policy on the same random streams and summarizes.
    pub fn evaluate_policies(&self, policies: &[PolicySpec], cfg: &SimConfig) -> Result<Vec<PolicySummary>> {
        let light = SimConfig { record_slots: false, ..cfg.clone() };
        policies
            .iter()
            .map(|p| Ok(PolicySummary::from_traces(p.name(), &self.run_replicates(p, &light)?)))
            .collect()
    }

    /// Threshold policy with always-successful retransmissions, compared
    /// against a closed-form average cost.
    pub fn empirical_vs_closed_form(&self, theta: &[u32], zeta: f64, cfg: &SimConfig) -> Result<ClosedFormComparison> {
        let forced = SimConfig { force_success_retransmissions: true, record_slots: false, ..cfg.clone() };
        let traces = self.run_replicates(&PolicySpec::Threshold(theta.to_vec()), &forced)?;
        let summary = PolicySummary::from_traces("threshold".into(), &traces);
        let diff = (summary.mean - zeta).abs();
        let bound = 3.0 * summary.std_err;
        Ok(ClosedFormComparison {
            empirical: summary.mean,
            closed_form: zeta,
            std_err: summary.std_err,
            diff,
            bound_3sigma: bound,
            within: diff <= bound,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormComparison {
    pub empirical: f64,
    pub closed_form: f64,
    pub std_err: f64,
    pub diff: f64,
    pub bound_3sigma: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: String,
    pub replicates: usize,
    /// Mean over replicates of the final running-average MSE.
    pub mean: f64,
    pub std_err: f64,
    pub diverged: usize,
    /// Relative gap between the last-quarter and last-half mean MSE, pooled
    /// over replicates.
    pub stabilization_gap: f64,
    /// Replicate mean of the running average after each slot (slots reached
    /// by every replicate only).
    #[serde(skip)]
    pub mean_trajectory: Vec<f64>,
}

impl PolicySummary {
    pub fn from_traces(policy: String, traces: &[SimulationTrace]) -> Self {
        let n = traces.len();
        let finals: Vec<f64> = traces.iter().map(SimulationTrace::final_average).collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let len = traces.iter().map(|t| t.running_avg.len()).min().unwrap_or(0);
        let mean_trajectory: Vec<f64> =
            (0..len).map(|k| traces.iter().map(|t| t.running_avg[k]).sum::<f64>() / n as f64).collect();

        // Window sums recovered from running averages: S(k) = k * avg_k.
        let window = |t: &SimulationTrace, from: usize| {
            let k = t.running_avg.len();
            let total = k as f64 * t.running_avg[k - 1];
            let head = if from == 0 { 0.0 } else { from as f64 * t.running_avg[from - 1] };
            (total - head, (k - from) as f64)
        };
        let pooled = |frac: f64| {
            let (s, c) = traces
                .iter()
                .filter(|t| !t.running_avg.is_empty())
                .map(|t| window(t, (t.running_avg.len() as f64 * frac) as usize))
                .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            s / c
        };
        let half = pooled(0.5);
        let quarter = pooled(0.75);
        Self {
            policy,
            replicates: n,
            mean,
            std_err,
            diverged: traces.iter().filter(|t| t.diverged()).count(),
            stabilization_gap: ((quarter - half) / half).abs(),
            mean_trajectory,
        }
    }
}

/// Replays the update rules from the recorded `(a, γ, Ξ)` history and
/// reports the first slot whose `(r, q, Ω)` disagrees with the trace.
pub fn replay_conformance(trace: &SimulationTrace, ladder: &CostLadder) -> std::result::Result<(), String> {
    let b = trace.num_channels;
    let Some(first) = trace.records.first() else { return Ok(()) };
    let (mut r, mut q) = (1u32, 1u32);
    let mut omega = HistoryCounter { counts: trace.omega(0).to_vec() };
    if first.r != 1 || first.q != 1 || omega.total() != 1 {
        return Err("trace does not start from a fresh delivery".into());
    }
    let mut sum = 0.0;
    for (i, rec) in trace.records.iter().enumerate() {
        if rec.r != r || rec.q != q || trace.omega(i) != omega.counts.as_slice() {
            return Err(format!("slot {}: trace has (r={}, q={}), replay gives (r={r}, q={q})", rec.k, rec.r, rec.q));
        }
        if omega.total() != r || r > q || rec.xi >= b {
            return Err(format!("slot {}: inconsistent counters", rec.k));
        }
        if ladder.get(q as usize) != Some(rec.trace_mse) {
            return Err(format!("slot {}: MSE does not match the ladder", rec.k));
        }
        sum += rec.trace_mse;
        if (sum / rec.k as f64 - rec.running_avg).abs() > 1e-9 * rec.running_avg.abs().max(1.0) {
            return Err(format!("slot {}: running average mismatch", rec.k));
        }
        let next_r = match rec.a {
            Action::New => 1,
            Action::Retransmit => r + 1,
        };
        q = match (rec.gamma, rec.a) {
            (true, Action::New) => 1,
            (true, Action::Retransmit) => r + 1,
            (false, _) => q + 1,
        };
        r = next_r;
        omega = update_history(&omega, rec.a, rec.xi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::StaticChannel;
    use crate::harq::HarqScheme;
    use crate::numerics::Matrix;

    fn ladder() -> CostLadder {
        CostLadder::from_traces((1..=60).map(|n| 10.0 * 1.5f64.powi(n - 1)).collect()).unwrap()
    }

    fn sim(snr_db: f64, channel: MarkovChannel) -> Simulator {
        Simulator::new(ladder(), Arc::new(HarqModel::from_db(HarqScheme::Cc, snr_db, 100, 4.0).unwrap()), channel)
    }

    fn two_state() -> MarkovChannel {
        MarkovChannel::new(vec![2.0, 1.0], Matrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8])).unwrap()
    }

    #[test]
    fn error_free_link_stays_fresh() {
        let s = sim(120.0, two_state());
        let cfg = SimConfig { slots: 500, ..Default::default() };
        for p in [PolicySpec::Myopic, PolicySpec::NoRetransmission, PolicySpec::AlwaysRetransmitPsi] {
            let t = s.run(&p, &cfg, 0).unwrap();
            assert!(t.records.iter().all(|r| r.q == 1 && r.a == Action::New));
            assert_eq!(t.final_average(), 10.0);
        }
    }

    #[test]
    fn deterministic_replay() {
        let s = sim(10.0, two_state());
        let cfg = SimConfig { slots: 2000, base_seed: 17, ..Default::default() };
        let a = s.run(&PolicySpec::Myopic, &cfg, 3).unwrap();
        let b = s.run(&PolicySpec::Myopic, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with(TRACE_HEADER));
        assert_ne!(a, s.run(&PolicySpec::Myopic, &cfg, 4).unwrap());
    }

    #[test]
    fn traces_conform_to_update_rules() {
        let s = sim(10.0, two_state());
        let cfg = SimConfig { slots: 3000, base_seed: 5, ..Default::default() };
        for p in [PolicySpec::Myopic, PolicySpec::AlwaysRetransmitPsi, PolicySpec::Threshold(vec![2, 3])] {
            let t = s.run(&p, &cfg, 0).unwrap();
            replay_conformance(&t, &s.ladder).unwrap();
        }
    }

    /// Hand replay of the random stream for a single-state channel.
    #[test]
    fn hand_trace() {
        let harq = Arc::new(HarqModel::from_db(HarqScheme::Cc, 3.0, 100, 4.0).unwrap());
        let s = Simulator::new(ladder(), harq.clone(), StaticChannel::new(1.5).unwrap().to_markov());
        let cfg = SimConfig { slots: 12, base_seed: 99, ..Default::default() };
        let t = s.run(&PolicySpec::Threshold(vec![2]), &cfg, 1).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(1);
        let _: f64 = rng.random();
        let (mut r, mut q) = (1u32, 1u32);
        for rec in &t.records {
            let retx = r < q && q > 2;
            let p = harq.static_error(1.5, if retx { r as usize + 1 } else { 1 }).unwrap();
            let ok = rng.random::<f64>() >= p;
            let _: f64 = rng.random();
            assert_eq!((rec.r, rec.q, rec.a == Action::Retransmit, rec.gamma), (r, q, retx, ok));
            let nr = if retx { r + 1 } else { 1 };
            q = if ok { nr } else { q + 1 };
            r = nr;
        }
    }

    #[test]
    fn common_random_numbers_align_channels() {
        let s = sim(10.0, two_state());
        let cfg = SimConfig { slots: 1000, base_seed: 8, ..Default::default() };
        let a = s.run(&PolicySpec::NoRetransmission, &cfg, 0).unwrap();
        let b = s.run(&PolicySpec::AlwaysRetransmitPsi, &cfg, 0).unwrap();
        let xa: Vec<usize> = a.records.iter().map(|r| r.xi).collect();
        let xb: Vec<usize> = b.records.iter().map(|r| r.xi).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn divergence_is_flagged() {
        let short = CostLadder::from_traces(vec![1.0, 2.0, 3.0]).unwrap();
        let harq = Arc::new(HarqModel::from_db(HarqScheme::Cc, -10.0, 100, 4.0).unwrap());
        let s = Simulator::new(short, harq, StaticChannel::new(1.0).unwrap().to_markov());
        let t = s.run(&PolicySpec::NoRetransmission, &SimConfig { slots: 100, ..Default::default() }, 0).unwrap();
        assert_eq!(t.diverged_at, Some(4));
        assert_eq!(t.records.len(), 3);
    }

    #[test]
    fn summary_statistics() {
        let s = sim(10.0, two_state());
        let cfg = SimConfig { slots: 2000, replicates: 6, base_seed: 1, ..Default::default() };
        let out = s.evaluate_policies(&[PolicySpec::Myopic, PolicySpec::Threshold(vec![1, 1])], &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for sm in &out {
            assert_eq!(sm.replicates, 6);
            assert_eq!(sm.mean_trajectory.len(), 2000);
            let traces = s.run_replicates(&PolicySpec::Myopic, &cfg).unwrap();
            if sm.policy == "myopic" {
                let m = traces.iter().map(|t| t.final_average()).sum::<f64>() / 6.0;
                assert!((sm.mean - m).abs() <= 1e-12 * m);
            }
        }
    }

    #[test]
    fn table_lookup_saturates() {
        let st = vec![StaticState { r: 1, q: 1 }, StaticState { r: 1, q: 2 }, StaticState { r: 2, q: 2 }];
        let meta = crate::mdp::PolicyMeta {
            kind: "t".into(),
            cost_mode: crate::mdp::CostMode::Mse,
            channel: "static".into(),
            scheme: None,
            truncation: Default::default(),
            zeta: None,
            span: None,
            iterations: None,
        };
        let p = Policy::new(st, vec![Action::New, Action::Retransmit, Action::New], meta).unwrap();
        let s = sim(10.0, StaticChannel::new(1.0).unwrap().to_markov());
        let spec = PolicySpec::StaticTable(Arc::new(p));
        let w = Walker { r: 1, q: 9, omega: HistoryCounter { counts: vec![1] }, xi: 0 };
        assert_eq!(s.decide(&spec, &w).unwrap(), Action::Retransmit);
        let w = Walker { r: 2, q: 2, omega: HistoryCounter { counts: vec![2] }, xi: 0 };
        assert_eq!(s.decide(&spec, &w).unwrap(), Action::New);
    }
}
