mod common;

use std::path::Path;
use std::process::{Command, Output};

use harq_est::cli::Model;
use harq_est::mdp::{CostMode, Policy};
use harq_est::mdp_markov::MarkovState;
use harq_est::mdp_static::StaticState;

use common::config_path;

fn small_config(dir: &Path, name: &str) -> std::path::PathBuf {
    let text = std::fs::read_to_string(config_path(name))
        .unwrap()
        .replace("slots = 10000", "slots = 500")
        .replace("replicates = 20", "replicates = 2");
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn harq_est(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harq-est"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_then_simulate_round_trips_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    for (name, kind) in [("static.toml", "static"), ("markov.toml", "markov")] {
        let cfg = small_config(dir.path(), name);
        let out = dir.path().join(kind);
        let o = harq_est(&cfg, &out, &["solve", "--channel", kind, "--cost", "mse"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("switching structure: pass"));

        let file = out.join(format!("policy_{kind}_cc_mse.json"));
        let text = std::fs::read_to_string(&file).unwrap();
        let model = Model::load(&cfg).unwrap();
        let solved = model.solve(CostMode::Mse).unwrap();
        assert_eq!(text, solved.policy.to_json().unwrap());
        if kind == "static" {
            let p = Policy::<StaticState>::from_json(&text).unwrap();
            assert_eq!(p.states.len(), 210);
            assert_eq!(Policy::<StaticState>::from_json(&p.to_json().unwrap()).unwrap(), p);
        } else {
            let p = Policy::<MarkovState>::from_json(&text).unwrap();
            assert_eq!(p.states.len(), 328);
            assert_eq!(Policy::<MarkovState>::from_json(&p.to_json().unwrap()).unwrap(), p);
        }

        // The table read back from disk drives the same trajectory as the solved one.
        let a = harq_est(&cfg, &out.join("from-file"), &["simulate", "--policy", file.to_str().unwrap()]);
        let b = harq_est(&cfg, &out.join("solved"), &["simulate", "--policy", "optimal"]);
        assert_eq!(a.status.code(), Some(0));
        assert_eq!(
            std::fs::read(out.join("from-file/trace.csv")).unwrap(),
            std::fs::read(out.join("solved/trace.csv")).unwrap()
        );
        assert_eq!(b.status.code(), Some(0));
    }
}

#[test]
fn emitted_files_have_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "markov.toml");
    let out = dir.path().join("o");
    assert_eq!(harq_est(&cfg, &out, &["stability", "--resolution", "10"]).status.code(), Some(0));
    assert_eq!(harq_est(&cfg, &out, &["simulate", "--policy", "myopic", "--compare", "psi,delay"]).status.code(), Some(0));
    assert_eq!(harq_est(&cfg, &out, &["highsnr", "--theta-max", "4"]).status.code(), Some(0));

    let region = std::fs::read_to_string(out.join("stability_region.csv")).unwrap();
    assert!(region.starts_with("rho_sq,lambda1,lambda2,stable\n"));
    assert_eq!(region.lines().count(), 1 + 4 * 11 * 11);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,a,gamma,r,q,xi,trace_mse,running_avg\n"));
    assert_eq!(trace.lines().count(), 501);
    for line in trace.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f.len(), 8);
        assert!(f[5] == 1.0 || f[5] == 2.0);
    }
    let cmp = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("policy,replicates,mean,std_err,diverged,stabilization_gap\n"));
    assert_eq!(cmp.lines().count(), 4);
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("k,myopic,psi,delay\n"));
    let hs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("highsnr.json")).unwrap()).unwrap();
    assert_eq!(hs["theta"].as_array().unwrap().len(), 2);
    assert!(out.join("stability.json").exists() && out.join("comparison.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[system]\na = [[1.0]]\n").unwrap();
    let o = harq_est(&bad, &out, &["stability"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing field"));

    let cfg = small_config(dir.path(), "static.toml");
    assert_eq!(harq_est(&cfg, &out, &["solve", "--channel", "markov"]).status.code(), Some(2));
    assert_eq!(harq_est(&cfg, &out, &["simulate", "--policy", "no-such-policy"]).status.code(), Some(2));

    let tight = dir.path().join("tight.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("max_iters = 100000", "max_iters = 2");
    std::fs::write(&tight, text).unwrap();
    assert_eq!(harq_est(&tight, &out, &["solve"]).status.code(), Some(3));

    // A link that almost never delivers: the AoI runs off the end of the cost ladder.
    let lossy = dir.path().join("lossy.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("snr_db = 10.0", "snr_db = -20.0");
    std::fs::write(&lossy, text).unwrap();
    let o = harq_est(&lossy, &out, &["simulate", "--policy", "no-retx"]);
    assert_eq!(o.status.code(), Some(4), "{}", stdout(&o));
}

#[test]
fn sweep_reports_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "static.toml");
    let out = dir.path().join("o");
    let o = harq_est(&cfg, &out, &["sweep", "--snr-db", "10,15"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}
