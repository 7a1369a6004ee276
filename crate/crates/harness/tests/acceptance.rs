//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::Rng;

use opolo_core::divergence::{
    check_forward_decomposition, check_gap_decomposition, check_joint_equals_sa, f_div, f_div_dual_estimate,
    DualConfig, FDivergenceSpec,
};
use opolo_core::envs::{gen_gridworld, gen_random_mdp, make_counterexample_mdp, random_policy, GridStart, GridworldSpec};
use opolo_core::inverse::check_inverse_model_policy_optimality;
use opolo_core::mdp::{seeded_rng, FiniteMdp, TabularPolicy};
use opolo_core::occupancy::{compute_occupancy, occupancy_power_iteration};
use opolo_core::opolo::Algorithm;
use opolo_harness::experiment::{run_experiment, ExperimentSpec, Summary};
use opolo_harness::verify::{run_verify, VerifyOptions, VerifyReportBundle};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn family_ok(bundle: &VerifyReportBundle, name: &str, min_checks: usize) -> Result<String, String> {
    match bundle.family(name) {
        Some(f) if f.failures == 0 && f.checks >= min_checks => Ok(format!("{name} {}/{} worst {:.2e}", f.checks, f.checks, f.worst)),
        Some(f) => Err(format!("{name}: {} of {} failed (need >= {min_checks} checks), worst {:.2e}", f.failures, f.checks, f.worst)),
        None => Err(format!("{name}: missing")),
    }
}

fn families(bundle: &VerifyReportBundle, names: &[(&str, usize)]) -> Outcome {
    let results: Vec<Result<String, String>> = names.iter().map(|&(n, c)| family_ok(bundle, n, c)).collect();
    let pass = results.iter().all(Result::is_ok);
    let detail = results.into_iter().map(|r| r.unwrap_or_else(|e| e)).collect::<Vec<_>>().join("; ");
    outcome(pass, detail)
}

/// Brute-force KL over matching entries with `0 ln 0 = 0`.
fn naive_kl(p: impl IntoIterator<Item = f64>, q: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().zip(q).filter(|(a, _)| *a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Occupancy divergences recomputed from a truncated power series and
/// plain marginalization loops.
struct OracleDivergences {
    sas: f64,
    sa: f64,
    ss: f64,
    inverse_action: f64,
    forward_policy: f64,
    forward_next: f64,
    forward_inverse: f64,
}

fn oracle_divergences(mdp: &FiniteMdp, pi: &TabularPolicy, pe: &TabularPolicy) -> OracleDivergences {
    let a: Array3<f64> = occupancy_power_iteration(mdp, pi).mu_sas;
    let e: Array3<f64> = occupancy_power_iteration(mdp, pe).mu_sas;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let sa = |m: &Array3<f64>, s: usize, x: usize| (0..ns).map(|t| m[[s, x, t]]).sum::<f64>();
    let ss = |m: &Array3<f64>, s: usize, t: usize| (0..na).map(|x| m[[s, x, t]]).sum::<f64>();
    let st = |m: &Array3<f64>, s: usize| (0..na).map(|x| sa(m, s, x)).sum::<f64>();
    let mut out = OracleDivergences { sas: 0.0, sa: 0.0, ss: 0.0, inverse_action: 0.0, forward_policy: 0.0, forward_next: 0.0, forward_inverse: 0.0 };
    out.sas = naive_kl(a.iter().copied(), e.iter().copied());
    for s in 0..ns {
        for x in 0..na {
            let (pa, pe_) = (sa(&a, s, x), sa(&e, s, x));
            if pa > 0.0 {
                out.sa += pa * (pa / pe_).ln();
            }
        }
        let es = st(&e, s);
        if es > 0.0 {
            out.forward_policy += es * naive_kl((0..na).map(|x| pe.prob(s, x)), (0..na).map(|x| pi.prob(s, x)));
            let next_e: Vec<f64> = (0..ns).map(|t| ss(&e, s, t) / es).collect();
            let next_a: Vec<f64> = (0..ns).map(|t| ss(&a, s, t) / st(&a, s)).collect();
            out.forward_next += es * naive_kl(next_e, next_a);
        }
        for t in 0..ns {
            let (wa, we) = (ss(&a, s, t), ss(&e, s, t));
            if wa > 0.0 {
                out.ss += wa * (wa / we).ln();
                let ca: Vec<f64> = (0..na).map(|x| a[[s, x, t]] / wa).collect();
                let ce: Vec<f64> = (0..na).map(|x| e[[s, x, t]] / we).collect();
                out.inverse_action += wa * naive_kl(ca, ce);
            }
            if we > 0.0 {
                let ca: Vec<f64> = (0..na).map(|x| a[[s, x, t]] / wa).collect();
                let ce: Vec<f64> = (0..na).map(|x| e[[s, x, t]] / we).collect();
                out.forward_inverse += we * naive_kl(ce, ca);
            }
        }
    }
    out
}

fn criterion_1(bundle: &VerifyReportBundle, runtime: f64) -> Outcome {
    let sized = bundle.instances_with_prefix("random-").all(|i| i.n_states <= 20 && i.n_actions <= 5);
    let n = bundle.instances_with_prefix("random-").count();
    let fam = families(bundle, &[("joint_equals_state_action", 100), ("gap_decomposition", 100), ("forward_decomposition", 100), ("telescoping", 100)]);
    // Library identities against brute-force recomputation on a separate corpus.
    let mut worst: f64 = 0.0;
    let mut held = true;
    for seed in 0..100u64 {
        let mut rng = seeded_rng(90_000 + seed);
        let (ns, na) = (rng.random_range(2..=20), rng.random_range(1..=5));
        let mdp = gen_random_mdp(ns, na, rng.random_range(0.5..0.95), rng.random(), seed % 4 == 3).unwrap();
        let pi = random_policy(ns, na, rng.random());
        let pe = random_policy(ns, na, rng.random());
        let o = oracle_divergences(&mdp, &pi, &pe);
        let joint = check_joint_equals_sa(&mdp, &pi, &pe).unwrap();
        let gap = check_gap_decomposition(&mdp, &pi, &pe).unwrap();
        let fwd = check_forward_decomposition(&mdp, &pi, &pe).unwrap();
        held &= joint.holds && gap.holds && fwd.holds;
        for (lib, oracle) in [
            (joint.lhs, o.sas),
            (joint.rhs, o.sa),
            (gap.lhs, o.inverse_action),
            (gap.rhs, o.sa - o.ss),
            (fwd.lhs, o.forward_policy),
            (fwd.rhs, o.forward_next + o.forward_inverse),
        ] {
            worst = worst.max((lib - oracle).abs());
        }
        worst = worst.max((o.inverse_action - (o.sa - o.ss)).abs());
        worst = worst.max((o.sas - o.sa).abs());
        worst = worst.max((o.forward_policy - o.forward_next - o.forward_inverse).abs());
    }
    let oracle_ok = held && worst <= 1e-10;
    outcome(
        sized && n >= 100 && fam.pass && oracle_ok && runtime <= 60.0,
        format!("{n} instances in {runtime:.1}s; {}; brute-force oracle worst {worst:.2e}", fam.detail),
    )
}

fn exponential_simplex<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let z = v.sum();
    v / z
}

fn criterion_2(bundle: &VerifyReportBundle) -> Outcome {
    let fam = families(bundle, &[("surrogate_upper_bound", 100), ("f_bound_chain", 100), ("f_div_dominates_kl", 1000)]);
    // Closed form of the half-squared divergence, ½ Σ p²/q, against the library.
    let mut rng = seeded_rng(7);
    let mut worst: f64 = 0.0;
    let mut dominated = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=20);
        let p = exponential_simplex(n, &mut rng);
        let q = exponential_simplex(n, &mut rng);
        let closed: f64 = p.iter().zip(q.iter()).map(|(a, b)| 0.5 * a * a / b).sum();
        worst = worst.max((f_div(&p, &q, &FDivergenceSpec::default()).unwrap() - closed).abs());
        dominated &= closed >= naive_kl(p.iter().copied(), q.iter().copied()) - 1e-10;
    }
    outcome(fam.pass && dominated && worst <= 1e-12, format!("{}; closed-form f_div worst {worst:.2e}", fam.detail))
}

fn criterion_3(bundle: &VerifyReportBundle) -> Outcome {
    let fam = families(
        bundle,
        &[("injective_inverse_action_kl", 20), ("counterexample_inverse_action_kl_exceeds", 1), ("counterexample_transition_kl", 1)],
    );
    let ce = make_counterexample_mdp();
    let o = oracle_divergences(&ce.mdp, &ce.learner, &ce.expert);
    let oracle_ok = o.inverse_action > 1.0 && o.ss <= 1e-6;
    outcome(
        fam.pass && oracle_ok,
        format!("{}; brute-force counter-example gap {:.4}, transition KL {:.2e}", fam.detail, o.inverse_action, o.ss),
    )
}

fn criterion_4(bundle: &VerifyReportBundle) -> Outcome {
    let fam = families(bundle, &[("inverse_model_policy_never_beaten", 10)]);
    let mut all = true;
    let mut worst = f64::INFINITY;
    for seed in 0..10u64 {
        let spec = GridworldSpec { start: GridStart::Uniform, ..GridworldSpec::new(3 + seed as usize % 3, 3, (2, 2), 0.0, 0.95, seed) };
        let mdp = gen_gridworld(&spec).unwrap();
        let expert = compute_occupancy(&mdp, &random_policy(mdp.n_states(), 4, 100 + seed)).unwrap();
        let buffer = compute_occupancy(&mdp, &random_policy(mdp.n_states(), 4, 200 + seed)).unwrap();
        let r = check_inverse_model_policy_optimality(&mdp, &expert, &buffer, 100, seed).unwrap();
        all &= r.holds;
        worst = worst.min(r.gap);
    }
    outcome(fam.pass && all, format!("{}; 10 extra gridworlds min margin {worst:.2e}", fam.detail))
}

fn criterion_5(bundle: &VerifyReportBundle) -> Outcome {
    let fam = families(bundle, &[("dual_value", 50), ("dual_witness", 50)]);
    let mut rng = seeded_rng(5);
    let (mut value_err, mut witness_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let mut draw = || {
            let v: Array1<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let z = v.sum();
            v / z
        };
        let p = draw();
        let q = draw();
        let est = f_div_dual_estimate(&p, &q, &FDivergenceSpec::default(), &DualConfig::default()).unwrap();
        let closed: f64 = p.iter().zip(q.iter()).map(|(a, b)| 0.5 * a * a / b).sum();
        value_err = value_err.max((est.value - closed).abs());
        for k in 0..n {
            witness_err = witness_err.max((est.witness[k] - p[k] / q[k]).abs());
        }
    }
    outcome(
        fam.pass && value_err <= 1e-4 && witness_err <= 1e-3,
        format!("{}; 50 extra pairs value err {value_err:.2e}, witness err {witness_err:.2e}", fam.detail),
    )
}

fn criterion_6(bundle: &VerifyReportBundle) -> Outcome {
    families(bundle, &[("q_loss_gradient", 20), ("pi_loss_gradient", 20), ("regularizer_gradient", 20)])
}

fn gridworld_spec(out: &Path, algorithms: Vec<Algorithm>) -> ExperimentSpec {
    ExperimentSpec { algorithms, seeds: (0..5).collect(), output_dir: out.to_path_buf(), ..ExperimentSpec::default() }
}

fn criterion_7(root: &Path) -> Outcome {
    let start = Instant::now();
    let spec = gridworld_spec(&root.join("c7"), vec![Algorithm::Opolo, Algorithm::Bco, Algorithm::Gaifo]);
    let summary = match run_experiment(&spec) {
        Ok((s, _)) => s,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let runtime = start.elapsed().as_secs_f64();
    let opolo = summary.row(Algorithm::Opolo).unwrap();
    let bco = summary.row(Algorithm::Bco).unwrap();
    let gaifo = summary.row(Algorithm::Gaifo).unwrap();
    let opolo_ok = opolo.runs.iter().all(|r| r.normalized_return >= 0.95 && r.transition_kl <= 0.05);
    let bco_ok = bco.runs.iter().all(|r| r.normalized_return >= 0.80);
    let steps = |row: &opolo_harness::experiment::SummaryRow| row.runs.iter().map(|r| r.steps_to_90).collect::<Vec<_>>();
    let speed_ok = match (opolo.median_steps_to_90, gaifo.median_steps_to_90) {
        (Some(o), Some(g)) => o <= g,
        (Some(_), None) => true,
        _ => false,
    };
    let detail = format!(
        "opolo min return {:.4} max KL {:.4} [{}]; bco min return {:.4} [{}]; median steps to 90%: opolo {:?} {:?} vs gaifo {:?} {:?} [{}]; {runtime:.0}s",
        opolo.runs.iter().map(|r| r.normalized_return).fold(f64::INFINITY, f64::min),
        opolo.runs.iter().map(|r| r.transition_kl).fold(0.0, f64::max),
        if opolo_ok { "ok" } else { "FAIL" },
        bco.runs.iter().map(|r| r.normalized_return).fold(f64::INFINITY, f64::min),
        if bco_ok { "ok" } else { "FAIL" },
        opolo.median_steps_to_90,
        steps(opolo),
        gaifo.median_steps_to_90,
        steps(gaifo),
        if speed_ok { "ok" } else { "FAIL" },
    );
    outcome(opolo_ok && bco_ok && speed_ok && runtime <= 600.0, detail)
}

fn run_cli(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_opolo"))
        .args(args)
        .env("OPOLO_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn criterion_8(root: &Path) -> Outcome {
    let spec_path = root.join("c8.json");
    let spec = ExperimentSpec { output_dir: PathBuf::from("c8"), ..gridworld_spec(Path::new(""), vec![Algorithm::Opolo, Algorithm::OpoloX]) };
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = run_cli(root, &["train", "--spec", spec_path.to_str().unwrap()]);
    if !out.status.success() {
        return outcome(false, format!("train exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(root.join("c8/summary.json")).unwrap()).unwrap();
    let (Some(o), Some(x)) = (summary.row(Algorithm::Opolo), summary.row(Algorithm::OpoloX)) else {
        return outcome(false, "summary lacks a row");
    };
    let seeds = |r: &opolo_harness::experiment::SummaryRow| r.runs.iter().map(|s| s.seed).collect::<Vec<_>>();
    let paired = seeds(o) == seeds(x) && o.n_runs == 5 && x.n_runs == 5;
    let finite = o.final_return.mean.is_finite() && x.final_return.mean.is_finite();
    let rel = (x.final_return.mean - o.final_return.mean).abs() / o.final_return.mean.abs();
    outcome(
        paired && finite && rel <= 0.10,
        format!("opolo {} / opolo-x {} over seeds {:?}; relative difference {rel:.4}", o.final_return, x.final_return, seeds(o)),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(root: &Path) -> Outcome {
    let spec_path = root.join("c9.json");
    std::fs::write(
        &spec_path,
        r#"{"algorithms": ["opolo", "opolo-x", "bco", "gaifo"], "seeds": [0, 1], "config": {"total_steps": 3000}, "output_dir": "c9"}"#,
    )
    .unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let r = root.join(run);
        let t = run_cli(&r, &["train", "--spec", spec_path.to_str().unwrap()]);
        let v = run_cli(&r, &["verify", "--count", "5", "--seed", "3"]);
        if !t.status.success() || !v.status.success() {
            return outcome(false, format!("run {run} failed: {}{}", String::from_utf8_lossy(&t.stderr), String::from_utf8_lossy(&v.stderr)));
        }
        trees.push(read_tree(&r));
    }
    let csv = trees[0].keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    let json = trees[0].keys().filter(|k| k.extension().is_some_and(|e| e == "json")).count();
    outcome(trees[0] == trees[1] && csv == 8, format!("{csv} CSV and {json} JSON files byte-identical across two runs: {}", trees[0] == trees[1]))
}

fn main() {
    // Skip when `cargo test` is given a name filter this target does not match.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let bundle = run_verify(&VerifyOptions::new(100, 2024)).expect("verify runs");
    let verify_time = start.elapsed().as_secs_f64();

    let results = [
        criterion_1(&bundle, verify_time),
        criterion_2(&bundle),
        criterion_3(&bundle),
        criterion_4(&bundle),
        criterion_5(&bundle),
        criterion_6(&bundle),
        criterion_7(root.path()),
        criterion_8(root.path()),
        criterion_9(root.path()),
    ];
    for (i, r) in results.iter().enumerate() {
        println!("acceptance criterion {}: {} | {}", i + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
