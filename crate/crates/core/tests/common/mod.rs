//! Reference implementations used as oracles by the integration tests. They
//! share no numerical code with the library.

#![allow(dead_code)]

use std::path::PathBuf;

use harq_est::channel::Action;
use harq_est::mdp::FiniteMdp;
use harq_est::simulator::SimulationTrace;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Prints one verdict line and hands the verdict back.
pub fn report(criterion: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("[{}] criterion {criterion}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

/// Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let pivot_row = a[col].clone();
                for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Stationary row vector of a row-stochastic matrix with one closed class.
pub fn stationary_rows(p: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = p.len();
    // Equations: sum_i pi_i (P_ij - delta_ij) = 0 for j < n-1, and sum pi = 1.
    let mut a = vec![vec![0.0; n]; n];
    for j in 0..n - 1 {
        for i in 0..n {
            a[j][i] = p[i][j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    a[n - 1] = vec![1.0; n];
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    solve_linear(a, b)
}

/// Long-run average cost of a fixed policy.
pub fn policy_cost(mdp: &FiniteMdp, actions: &[Action]) -> f64 {
    let n = mdp.num_states();
    let mut p = vec![vec![0.0; n]; n];
    for s in 0..n {
        for &(t, w) in mdp.transition(s, actions[s]).expect("allowed action") {
            p[s][t] += w;
        }
    }
    let pi = stationary_rows(&p).expect("unichain policy");
    pi.iter().zip(mdp.costs()).map(|(a, b)| a * b).sum()
}

/// Enumerates every deterministic policy; returns the best policy, its cost,
/// and the cost of the runner-up (infinite if there is none).
pub fn brute_force(mdp: &FiniteMdp) -> (Vec<Action>, f64, f64) {
    let n = mdp.num_states();
    let base: Vec<Action> =
        (0..n).map(|s| if mdp.allows(s, Action::New) { Action::New } else { Action::Retransmit }).collect();
    let free: Vec<usize> =
        (0..n).filter(|&s| mdp.allows(s, Action::New) && mdp.allows(s, Action::Retransmit)).collect();
    let mut best = (base.clone(), f64::INFINITY);
    let mut second = f64::INFINITY;
    for mask in 0u64..(1u64 << free.len()) {
        let mut acts = base.clone();
        for (bit, &s) in free.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                acts[s] = Action::Retransmit;
            }
        }
        let c = policy_cost(mdp, &acts);
        if c < best.1 {
            second = best.1;
            best = (acts, c);
        } else if c < second {
            second = c;
        }
    }
    (best.0, best.1, second)
}

/// High-SNR threshold chain for a static channel, built by exploring the
/// reachable `(r, q)` states. Returns the exact average cost `Σ π(q) c(q)`.
pub fn static_threshold_chain_cost(costs: &[f64], lambda: f64, theta: u32) -> f64 {
    let mut states: Vec<(u32, u32)> = vec![(1, 1)];
    let mut edges: Vec<Vec<((u32, u32), f64)>> = Vec::new();
    let mut i = 0;
    while i < states.len() {
        let (r, q) = states[i];
        let out = if r < q && q > theta {
            vec![((r + 1, r + 1), 1.0)]
        } else {
            vec![((1, 1), 1.0 - lambda), ((1, q + 1), lambda)]
        };
        for (s, _) in &out {
            if !states.contains(s) {
                states.push(*s);
            }
        }
        edges.push(out);
        i += 1;
    }
    let n = states.len();
    let mut p = vec![vec![0.0; n]; n];
    for (from, out) in edges.iter().enumerate() {
        for (s, w) in out {
            let to = states.iter().position(|x| x == s).unwrap();
            p[from][to] += w;
        }
    }
    let pi = stationary_rows(&p).unwrap();
    states.iter().zip(&pi).map(|(&(_, q), w)| w * costs[q as usize - 1]).sum()
}

/// Recomputes `(r, q, Ω)` slot by slot from the recorded actions, outcomes and
/// channel states and compares with the trace.
pub fn replay(trace: &SimulationTrace) -> Result<(), String> {
    let b = trace.num_channels;
    let (mut r, mut q) = (1u32, 1u32);
    let mut omega = trace.omega(0).to_vec();
    if omega.iter().sum::<u32>() != 1 {
        return Err("initial history must hold one attempt".into());
    }
    for (i, rec) in trace.records.iter().enumerate() {
        if (rec.r, rec.q) != (r, q) {
            return Err(format!("slot {}: recorded (r,q)=({},{}), replay ({r},{q})", rec.k, rec.r, rec.q));
        }
        if trace.omega(i) != omega.as_slice() {
            return Err(format!("slot {}: history {:?} vs replay {omega:?}", rec.k, trace.omega(i)));
        }
        if omega.iter().sum::<u32>() != r || q < r || r < 1 {
            return Err(format!("slot {}: counter invariant broken", rec.k));
        }
        let retx = rec.a == Action::Retransmit;
        let r_next = if retx { r + 1 } else { 1 };
        q = if rec.gamma { r_next } else { q + 1 };
        r = r_next;
        if retx {
            omega[rec.xi] += 1;
        } else {
            omega = vec![0; b];
            omega[rec.xi] = 1;
        }
    }
    Ok(())
}
