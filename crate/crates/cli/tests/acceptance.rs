//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;

use rand::Rng;
use stagepool_core::audit::replay_dispatch;
use stagepool_core::rng::substream;
use stagepool_core::scheduler::{AdmissionConfig, AutoscaleConfig, BorrowConfig};
use stagepool_core::workflow::{
    expected_fixer_invocations, expected_remaining_work, Position, RequestState, ServiceEstimates, Target,
};
use stagepool_core::workloads::{FIXER, GENERATOR};
use stagepool_core::{
    build_nl2sql, estimate_capacity, run, validate_workflow, ArrivalConfig, Dist, MetricsReport, Nl2SqlParams,
    PolicyConfig, PolicyKind, SimConfig, TopologyPreset, Traces, WorkflowSpec,
};

/// Every simulation the suite runs, for the conservation criterion.
static RUNS: Mutex<Vec<(String, bool, bool)>> = Mutex::new(Vec::new());

fn simulate(label: &str, cfg: &SimConfig) -> (MetricsReport, Traces) {
    let (report, traces) = run(cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
    let kv_ok = traces.kv_usage.iter().all(|s| s.kv_used_tokens <= s.kv_capacity_tokens);
    RUNS.lock().unwrap().push((format!("{label} seed {}", cfg.seed), report.conserved(), kv_ok));
    (report, traces)
}

fn config(workflow: WorkflowSpec, topology: TopologyPreset, policy: PolicyConfig, rate: f64, seed: u64) -> SimConfig {
    SimConfig {
        workflow,
        topology,
        policy,
        arrivals: ArrivalConfig { rate },
        duration: 300.0,
        warmup: 30.0,
        seed,
        sample_interval: 1.0,
    }
}

fn nl2sql(params: &Nl2SqlParams) -> WorkflowSpec {
    build_nl2sql(params).expect("valid params")
}

fn policy(kind: PolicyKind) -> PolicyConfig {
    PolicyConfig { kind, ..PolicyConfig::default() }
}

fn isolated(gen: usize, fix: usize) -> TopologyPreset {
    TopologyPreset::isolated([(GENERATOR, gen), (FIXER, fix)])
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// AC-1 ---------------------------------------------------------------------

/// Sum of resident prefix tokens per sample time, read back from the CSV.
fn resident_by_time(csv: &str, warmup: f64) -> BTreeMap<String, u64> {
    let mut by_time = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let t: f64 = cols[0].parse().unwrap();
        if t >= warmup {
            *by_time.entry(cols[0].to_string()).or_insert(0) += cols[4].parse::<u64>().unwrap();
        }
    }
    by_time
}

fn ac1() -> Outcome {
    const P: u64 = 1000;
    let wf = nl2sql(&Nl2SqlParams::default());
    let mut shared = TopologyPreset::shared(2);
    let mut iso = isolated(1, 1);
    for t in [&mut shared, &mut iso] {
        t.engine.max_batch = 2;
    }
    let mut details = Vec::new();
    let mut pass = true;
    for (name, topo, expect) in [("shared", shared, 4 * P), ("isolated", iso, 2 * P)] {
        let cfg = config(wf.clone(), topo, policy(PolicyKind::Fcfs), 1.0, 1);
        let (_, traces) = simulate("ac1", &cfg);
        let totals = resident_by_time(&traces.kv_usage_csv(), cfg.warmup);
        let lo = totals.values().min().copied().unwrap_or(0);
        let hi = totals.values().max().copied().unwrap_or(0);
        pass &= !totals.is_empty() && lo == expect && hi == expect;
        details.push(format!("{name} resident {lo}..{hi} (want {expect})"));
    }
    outcome(pass, details.join(", "))
}

// AC-2 ---------------------------------------------------------------------

pub fn ac2_pair(seed: u64, rate: f64) -> (SimConfig, SimConfig) {
    let wf = nl2sql(&Nl2SqlParams::default());
    let mut shared = TopologyPreset::shared(2);
    let mut iso = isolated(1, 1);
    for t in [&mut shared, &mut iso] {
        // two prefixes plus room for about four calls of ~300 tokens
        t.engine.kv_capacity_tokens = 3200;
    }
    (
        config(wf.clone(), iso, policy(PolicyKind::Fcfs), rate, seed),
        config(wf, shared, policy(PolicyKind::Fcfs), rate, seed),
    )
}

const AC2_RATE: f64 = 1.8;

fn ac2() -> Outcome {
    let mut tput = 0;
    let mut p99 = 0;
    for seed in 1..=10 {
        let (iso, shared) = ac2_pair(seed, AC2_RATE);
        let (ri, _) = simulate("ac2 isolated", &iso);
        let (rs, _) = simulate("ac2 shared", &shared);
        tput += (ri.throughput > rs.throughput) as u32;
        p99 += (ri.latency_p99 < rs.latency_p99) as u32;
    }
    outcome(tput >= 8 && p99 >= 8, format!("isolated wins throughput {tput}/10, p99 {p99}/10 at rate {AC2_RATE}"))
}

// AC-3 ---------------------------------------------------------------------

fn run_cli(out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_stagepool"))
        .args(["run", "preset:nl2sql-shared", "--seed", "1", "--out"])
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn ac3() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !(run_cli(&a) && run_cli(&b)) {
        return outcome(false, "cli run failed");
    }
    let files = ["summary.json", "kv_usage.csv", "dispatch.csv", "requests.csv", "queue.csv"];
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok()).collect();
    outcome(differing.is_empty(), format!("{} files compared, differing: {differing:?}", files.len()))
}

// AC-4 ---------------------------------------------------------------------

fn monte_carlo_fixer(p: f64, budget: u32, n: u32, seed: u64) -> f64 {
    let mut rng = substream(seed, "ac4", &[(p * 1000.0) as u64, budget as u64]);
    let mut total = 0u64;
    for _ in 0..n {
        let mut retries = 0;
        while rng.gen::<f64>() < p && retries < budget {
            retries += 1;
        }
        total += retries as u64;
    }
    total as f64 / n as f64
}

/// Expected remaining service by walking every outcome path of the raw spec.
fn enumerate(spec: &WorkflowSpec, est: &BTreeMap<&str, f64>, stage: &str, retries: u32) -> f64 {
    let s = spec.stages.iter().find(|s| s.id == stage).unwrap();
    let mut total = est[stage];
    for o in &s.outcomes {
        let Target::Stage(next) = &o.next else { continue };
        if o.retry && retries >= spec.retry_budget {
            continue;
        }
        let r = retries + o.retry as u32;
        total += o.probability * enumerate(spec, est, next, r);
    }
    total
}

/// Exact standard deviation of the fixer count: N = k with probability
/// p^k (1 - p) for k < B and N = B with probability p^B.
fn fixer_count_sd(p: f64, budget: u32) -> f64 {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for k in 0..=budget {
        let pk = if k < budget { p.powi(k as i32) * (1.0 - p) } else { p.powi(budget as i32) };
        m1 += pk * k as f64;
        m2 += pk * (k * k) as f64;
    }
    (m2 - m1 * m1).sqrt()
}

fn ac4() -> Outcome {
    const N: u32 = 100_000;
    // 16x the samples quarters the standard error
    const N_CHECK: u32 = 16 * N;
    let mut worst = 0.0f64;
    let mut worst_small = 0.0f64;
    let mut worst_se = 0.0f64;
    for p in [0.1, 0.5, 0.9] {
        for b in [1, 3, 5] {
            let exact = expected_fixer_invocations(p, b);
            let small = monte_carlo_fixer(p, b, N, 4);
            let big = monte_carlo_fixer(p, b, N_CHECK, 5);
            worst_small = worst_small.max((small - exact).abs() / exact);
            worst = worst.max((big - exact).abs() / exact);
            worst_se = worst_se.max(fixer_count_sd(p, b) / (N as f64).sqrt() / exact);
        }
    }
    let spec = nl2sql(&Nl2SqlParams::default());
    let wf = validate_workflow(spec.clone()).unwrap();
    let est_vec = vec![1.7, 0.25, 3.1];
    let est = ServiceEstimates::from_vec(est_vec.clone());
    let named: BTreeMap<&str, f64> = spec.stages.iter().map(|s| s.id.as_str()).zip(est_vec).collect();
    let mut path_err = 0.0f64;
    for sid in wf.stage_ids() {
        for r in 0..=wf.retry_budget() {
            let mut state = RequestState::new(0, 0.0, &wf);
            state.position = Position::At(sid);
            state.retries_used = r;
            let dp = expected_remaining_work(&state, &wf, &est).unwrap();
            let brute = enumerate(&spec, &named, &wf.stage(sid).id, r);
            path_err = path_err.max((dp - brute).abs());
        }
    }
    outcome(
        worst < 0.01 && path_err <= 1e-9,
        format!(
            "Monte Carlo max rel err {worst:.5} at n={N_CHECK} (tol 0.01); at n={N} it is {worst_small:.5}, \
             where the largest relative standard error is {worst_se:.5}; max path err {path_err:.2e} (tol 1e-9)"
        ),
    )
}

// AC-6 ---------------------------------------------------------------------

fn ac6() -> Outcome {
    let (_, shared) = ac2_pair(3, AC2_RATE);
    let mut parts = Vec::new();
    let mut pass = true;
    for (kind, sel) in [
        (PolicyKind::StageAware, false),
        (PolicyKind::StageAware, true),
        (PolicyKind::WorkflowAgnosticPriority, false),
        (PolicyKind::Fcfs, false),
    ] {
        let mut cfg = shared.clone();
        cfg.policy = PolicyConfig { kind, use_selectivity: sel, ..PolicyConfig::default() };
        let (_, traces) = simulate("ac6", &cfg);
        let audit = replay_dispatch(&traces.dispatch_csv()).expect("trace parses");
        pass &= audit.checked > 0 && audit.violations.is_empty();
        parts.push(format!(
            "{}{}: {} checked, {} violations",
            kind.as_str(),
            if sel { "+sel" } else { "" },
            audit.checked,
            audit.violations.len()
        ));
    }
    outcome(pass, parts.join("; "))
}

// AC-7 ---------------------------------------------------------------------

fn ac7() -> Outcome {
    let mut cfg = config(nl2sql(&Nl2SqlParams::default()), isolated(1, 1), PolicyConfig::default(), 1.0, 7);
    let cap = estimate_capacity(&cfg).expect("capacity");
    cfg.arrivals.rate = 2.0 * cap.rate;
    let max = 32;
    cfg.policy.admission = AdmissionConfig { enabled: true, max_queue_len: max, ..AdmissionConfig::default() };
    let (on, traces) = simulate("ac7 admission", &cfg);
    let worst_sample = traces.queues.iter().map(|q| q.queue_len).max().unwrap_or(0);
    cfg.policy.admission.enabled = false;
    let (off, _) = simulate("ac7 open", &cfg);
    let bottleneck = off.pool(&cap.bottleneck).map(|p| p.final_queue_len).unwrap_or(0);
    outcome(
        worst_sample <= max && bottleneck > 5 * max,
        format!(
            "rate {:.3} (2x {:.3}); with admission max sampled queue {worst_sample} (<= {max}), rejected {}; \
             without, {} final queue {bottleneck} (> {})",
            cfg.arrivals.rate,
            cap.rate,
            on.rejected,
            cap.bottleneck,
            5 * max
        ),
    )
}

// AC-8 ---------------------------------------------------------------------

pub fn ac8_config(borrow: bool, seed: u64) -> SimConfig {
    let params = Nl2SqlParams {
        p_fail: 0.9,
        p_syntax_err: 0.45,
        p_empty_result: 0.45,
        fixer_output_tokens: Dist::Uniform { lo: 400.0, hi: 600.0 },
        ..Nl2SqlParams::default()
    };
    let mut topo = isolated(3, 1);
    topo.engine.max_batch = 4;
    let mut pol = policy(PolicyKind::StageAware);
    pol.borrow = BorrowConfig { enabled: borrow, ..BorrowConfig::default() };
    config(nl2sql(&params), topo, pol, 0.3, seed)
}

fn ac8() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [8, 9, 10] {
        let (off, _) = simulate("ac8 no-borrow", &ac8_config(false, seed));
        let (on, _) = simulate("ac8 borrow", &ac8_config(true, seed));
        let lent = on.pool(GENERATOR).map(|p| p.engines_lent).unwrap_or(0);
        pass &= on.completed > off.completed && on.max_stages_per_batch <= 1 && lent > 0;
        parts.push(format!(
            "seed {seed}: completed {} -> {}, lent {lent}, max stages per batch {}",
            off.completed, on.completed, on.max_stages_per_batch
        ));
    }
    outcome(pass, parts.join("; "))
}

// AC-9 ---------------------------------------------------------------------

pub fn ac9_config(seed: u64) -> SimConfig {
    let base = Nl2SqlParams::default();
    let params = Nl2SqlParams { fixer_output_tokens: base.fixer_output_tokens.scaled(4.0), ..base };
    let mut pol = policy(PolicyKind::StageAware);
    pol.autoscale = AutoscaleConfig { enabled: true, ..AutoscaleConfig::default() };
    config(nl2sql(&params), isolated(1, 1), pol, 0.8, seed)
}

fn ac9() -> Outcome {
    let mut fixer_outs = 0;
    let mut elsewhere = 0;
    for seed in 1..=5 {
        let (r, _) = simulate("ac9", &ac9_config(seed));
        for p in &r.pools {
            if p.pool == FIXER {
                fixer_outs += p.scale_outs;
            } else {
                elsewhere += p.scale_outs;
            }
        }
    }
    outcome(
        fixer_outs > 0 && elsewhere == 0,
        format!("fixer scale-outs {fixer_outs}, elsewhere {elsewhere} over 5 seeds"),
    )
}

// AC-5 ---------------------------------------------------------------------

fn ac5() -> Outcome {
    let runs = RUNS.lock().unwrap();
    let bad: Vec<&str> = runs.iter().filter(|(_, c, k)| !(c & k)).map(|(l, _, _)| l.as_str()).collect();
    outcome(!runs.is_empty() && bad.is_empty(), format!("{} runs checked, failing: {bad:?}", runs.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC-1 shared vs isolated resident prefix KV", ac1),
        ("AC-2 isolated wins under prefix-bound KV", ac2),
        ("AC-3 byte-identical reruns", ac3),
        ("AC-4 retry expectation oracles", ac4),
        ("AC-6 dispatch order audit", ac6),
        ("AC-7 admission bounds the bottleneck queue", ac7),
        ("AC-8 borrowing idle engines", ac8),
        ("AC-9 autoscaler locality", ac9),
    ];
    let mut results: Vec<(&str, Outcome)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|(name, f)| (*name, s.spawn(f))).collect();
        handles.into_iter().map(|(name, h)| (name, h.join().unwrap_or_else(|_| outcome(false, "panicked")))).collect()
    });
    results.insert(4, ("AC-5 conservation and KV capacity", ac5()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as u32;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed as usize);
    if failed > 0 {
        std::process::exit(1);
    }
}
