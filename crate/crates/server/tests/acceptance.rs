//! Acceptance gate. Each criterion prints one PASS or FAIL line with its
//! measured result and wall time; the process exits non-zero if any fails.
//! Expected values come from oracles written here, not from the library.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{drive, fast_fixtures, replay_session, Script, TestServer};
use futures::StreamExt;
use loopstage_core::agents::{
    bt_gradient, bt_negative_log_likelihood, dominates, enumerate_pareto_front, fit_reward_model, select_by_utility,
    LinearRewardModel, PreferencePair, Preferred,
};
use loopstage_core::agents::train::QConfig;
use loopstage_core::bridge::sabotage::Sabotage;
use loopstage_core::bridge::{conformance_suite, BridgeHandle, BridgeOptions};
use loopstage_core::config::{fixtures, parse_experiment};
use loopstage_core::env::{make_env, Action, DstFixture, EnvSpec, Environment, DEFAULT_DST_FIXTURE};
use loopstage_core::hash::canonical_of;
use loopstage_core::orchestrator::{SessionDriver, SessionParams};
use loopstage_core::protocol::{
    decode_envelope, encode_envelope, ActSubmit, ControllerId, Envelope, Join, MessageKind, Payload, Phase, Sender,
};
use loopstage_core::rng::CounterRng;
use loopstage_core::store::{read_log, replay, EventKind};
use loopstage_core::sweep::{annotation_sweep, optimality_sweep, sign_test};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::json;

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("replay determinism", Duration::from_secs(300), replay_determinism),
        ("barrier soundness", Duration::from_secs(120), barrier_soundness),
        ("q-learning optimality", Duration::from_secs(60), q_learning_optimality),
        ("reward-annotation benefit", Duration::from_secs(120), annotation_benefit),
        ("pareto oracle", Duration::from_secs(30), pareto_oracle),
        ("preference learning", Duration::from_secs(30), preference_learning),
        ("bridge loopback", Duration::from_secs(60), bridge_loopback),
        ("protocol round-trip", Duration::from_secs(120), protocol_round_trip),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.1}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------

const STUDIES: [&str; 4] = [
    "coverage-teaming",
    "mountain-car-delegation",
    "maze-reward-annotation",
    "dst-utility-elicitation",
];

fn replay_determinism() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async {
        let server = TestServer::start(fast_fixtures(), None).await;
        let scripts: Vec<Script> = (0..50usize)
            .map(|i| Script {
                study: STUDIES[i % 4].into(),
                pid: format!("acceptance-{i}"),
                reconnect_after: (i % 5 == 4).then_some(6 + i % 7),
                seed: i as u64,
            })
            .collect();
        let outcomes: Vec<_> = futures::stream::iter(scripts.into_iter().map(|s| drive(&server, s)))
            .buffer_unordered(10)
            .collect()
            .await;
        let sessions: BTreeSet<&str> = outcomes.iter().map(|o| o.session_id.as_str()).collect();
        ensure(sessions.len() == 50, || format!("{} distinct sessions", sessions.len()))?;
        let mut per_study = BTreeMap::new();
        let mut hashes = 0;
        for o in &outcomes {
            ensure(o.end.reason == "completed", || format!("{} ended with `{}`", o.session_id, o.end.reason))?;
            hashes += replay_session(&server, &o.session_id).map_err(|e| format!("{}: {e}", o.session_id))?;
            *per_study.entry(o.session_id.rsplit_once('-').unwrap().0.to_string()).or_insert(0) += 1;
        }
        ensure(per_study.len() == 4, || format!("studies covered: {per_study:?}"))?;
        let resumed = outcomes.iter().filter(|o| o.resumed).count();
        Ok(format!(
            "50/50 sessions replay, {hashes} state hashes agree, {resumed} resumed mid-session"
        ))
    })
}

// ---------------------------------------------------------------------------

fn two_human_def() -> loopstage_core::config::ExperimentDef {
    let text = fixtures::TEAMING.replace(
        "[[roles]]\nname = \"partner\"\ncontroller_kind = \"agent\"",
        "[[roles]]\nname = \"partner\"\ncontroller_kind = \"human\"",
    );
    let text = text.replace("[agents.partner]\nalgorithm = \"greedy_cover\"\n", "");
    parse_experiment(&text)
        .unwrap()
        .with_overrides([
            ("episodes", json!(500)),
            ("inter_episode_pause_ms", json!(5)),
            ("env.params.k", json!(4)),
            ("roles.0.action_deadline_ms", json!(40)),
            ("roles.1.action_deadline_ms", json!(40)),
        ])
        .unwrap()
}

fn human(role: &str, tick: Option<u64>, payload: Payload, session: &str) -> Envelope {
    Envelope::new(session, Sender::Controller(ControllerId::human(role)), tick, payload, 0)
}

/// Runs one fuzzed session and returns its log path.
fn fuzz_session(dir: &std::path::Path, idx: u64, max_ticks: u64) -> Result<std::path::PathBuf, String> {
    let id = format!("fuzz-{idx}");
    let path = dir.join(format!("{id}.jsonl"));
    let file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
    let params = SessionParams {
        session_id: id.clone(),
        def: two_human_def(),
        condition: None,
        master_seed: idx,
        verify_tokens: false,
    };
    let mut now = 1_000;
    let (mut d, _) = SessionDriver::create(params, now, file).map_err(|e| e.to_string())?;
    let mut rng = CounterRng::new(idx ^ 0x5eed);
    let roles = ["navigator", "partner"];
    let tokens = ["tok-navigator", "tok-partner"];
    for t in tokens {
        d.handle_input(human("", None, Payload::Join(Join { token: t.into(), role: None }), &id), now);
    }
    let mut connected = [true, true];
    while !d.session().is_ended() && d.session().tick() < max_ticks {
        now += 1;
        if d.session().phase() != Phase::AwaitingActions {
            match d.session().next_deadline() {
                Some(deadline) => {
                    now = now.max(deadline);
                    d.on_timer(now);
                }
                None => break,
            }
            continue;
        }
        let tick = d.session().tick();
        let mut order = [0usize, 1];
        rng.shuffle(&mut order);
        for i in order {
            let act = |a: u64, t: u64| {
                human(
                    roles[i],
                    Some(t),
                    Payload::ActSubmit(ActSubmit {
                        action: Action::discrete(a as u32),
                        role: None,
                        intention: None,
                    }),
                    &id,
                )
            };
            match rng.below(12) {
                0..=5 if connected[i] => {
                    d.handle_input(act(rng.below(5), tick), now);
                }
                6 if connected[i] => {
                    d.handle_input(act(rng.below(5), tick), now);
                    d.handle_input(act(rng.below(5), tick), now + 1);
                }
                7 if connected[i] => {
                    let stale = if tick > 0 && rng.below(2) == 0 { tick - 1 } else { tick + 1 };
                    d.handle_input(act(rng.below(5), stale), now);
                }
                8 if connected[i] => {
                    d.disconnect(roles[i], now);
                    connected[i] = false;
                }
                9 | 10 if !connected[i] => {
                    let join = Join {
                        token: tokens[i].into(),
                        role: None,
                    };
                    d.handle_input(human(roles[i], None, Payload::Join(join), &id), now);
                    connected[i] = true;
                    if rng.below(2) == 0 && d.session().tick() == tick {
                        d.handle_input(act(rng.below(5), tick), now);
                    }
                }
                _ => {}
            }
            now += 1;
            if d.session().tick() != tick {
                break;
            }
        }
        if d.session().tick() == tick {
            if let Some(deadline) = d.session().next_deadline() {
                now = now.max(deadline);
                d.on_timer(now);
            }
        }
    }
    if !d.session().is_ended() {
        d.admin_end("fuzz budget", now + 1);
    }
    if d.is_halted() {
        return Err(format!("{id}: storage halted"));
    }
    Ok(path)
}

#[derive(Default)]
struct BarrierTally {
    ticks: usize,
    checks: usize,
    violations: Vec<String>,
    timeouts: usize,
    rejected: usize,
}

/// Reads the log alone: for every requested (tick, role) exactly one of an
/// accepted submission or a timeout substitution, and nothing unrequested.
fn audit_barrier(path: &std::path::Path, tally: &mut BarrierTally) -> Result<(), String> {
    let log = read_log(path).map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    let mut requested: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    let mut filled: BTreeMap<(u64, String), Vec<&str>> = BTreeMap::new();
    let mut sources: BTreeMap<(u64, String), String> = BTreeMap::new();
    for e in &log.events {
        match e.kind {
            EventKind::Message(MessageKind::ActRequest) => {
                let env = e.envelope().ok_or("undecodable ActRequest")?;
                let Payload::ActRequest(req) = env.payload else { unreachable!() };
                requested.entry(req.tick).or_default().extend(req.roles);
            }
            EventKind::Message(MessageKind::ActSubmit) => {
                let env = e.envelope().ok_or("undecodable ActSubmit")?;
                let role = env.acting_role().ok_or("submission without a role")?.to_string();
                let tick = env.tick.ok_or("submission without a tick")?;
                filled.entry((tick, role)).or_default().push("submitted");
            }
            EventKind::TimeoutSubstitution => {
                let role = e.payload["role"].as_str().ok_or("substitution without a role")?.to_string();
                let tick = e.tick.ok_or("substitution without a tick")?;
                filled.entry((tick, role)).or_default().push("timeout");
                tally.timeouts += 1;
            }
            EventKind::Message(MessageKind::StepBroadcast) => {
                let env = e.envelope().ok_or("undecodable StepBroadcast")?;
                let Payload::StepBroadcast(b) = env.payload else { unreachable!() };
                for a in b.actions {
                    let source = serde_json::to_value(a.source).unwrap().as_str().unwrap().to_string();
                    sources.insert((env.tick.ok_or("broadcast without a tick")?, a.role), source);
                }
            }
            EventKind::InputRejected => tally.rejected += 1,
            _ => {}
        }
    }
    let session = &log.header.session_id;
    let last = requested.keys().next_back().copied();
    for (tick, roles) in &requested {
        tally.ticks += 1;
        for role in roles {
            tally.checks += 1;
            let key = (*tick, role.clone());
            let fills = filled.remove(&key).unwrap_or_default();
            match sources.get(&key) {
                // Released tick: exactly one fill, and the broadcast names it.
                Some(source) => {
                    if fills.len() != 1 || fills[0] != source {
                        tally.violations.push(format!("{session} tick {tick} role {role}: fills {fills:?}, broadcast {source}"));
                    }
                }
                // Only the final tick may be cut short by the session ending.
                None => {
                    if Some(*tick) != last || fills.len() > 1 || fills.contains(&"timeout") {
                        tally.violations.push(format!("{session} tick {tick} role {role}: unreleased with fills {fills:?}"));
                    }
                }
            }
        }
    }
    for ((tick, role), fills) in filled {
        tally.violations.push(format!("{session} tick {tick} role {role}: unrequested fills {fills:?}"));
    }
    let report = replay(&log).map_err(|e| format!("{session}: {e}"))?;
    if report.hashes.is_empty() {
        return Err(format!("{session}: no state hashes"));
    }
    Ok(())
}

fn barrier_soundness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut tally = BarrierTally::default();
    let mut idx = 0;
    while tally.ticks < 1200 {
        let path = fuzz_session(dir.path(), idx, 400)?;
        audit_barrier(&path, &mut tally)?;
        idx += 1;
    }
    ensure(tally.violations.is_empty(), || {
        format!("{} violations, first: {}", tally.violations.len(), tally.violations[0])
    })?;
    ensure(tally.timeouts > 0 && tally.rejected > 0, || "fuzz never timed out or never rejected".into())?;
    Ok(format!(
        "{} ticks over {idx} sessions, {} (tick, role) slots, 0 violations ({} substitutions, {} rejected inputs)",
        tally.ticks, tally.checks, tally.timeouts, tally.rejected
    ))
}

// ---------------------------------------------------------------------------

fn maze_spec(size: u32, seed: u64) -> EnvSpec {
    EnvSpec::new("grid_maze")
        .with("width", size)
        .with("height", size)
        .with("layout_seed", seed)
}

/// Shortest path by breadth-first search over positions, discovering
/// transitions by replaying each prefix from reset. Returns the exact return
/// of that path, summed step by step.
fn bfs_optimal_return(size: u32, seed: u64) -> f64 {
    let spec = maze_spec(size, seed);
    let run = |path: &[u32]| {
        let mut env = make_env(&spec).unwrap();
        let mut obs = env.reset(0).unwrap();
        let mut ret = 0.0;
        let mut done = false;
        for &a in path {
            let out = env.step(&[Action::discrete(a)]).unwrap();
            ret += out.rewards[0][0];
            obs = out.observations;
            done = out.terminated;
        }
        (canonical_of(&obs), ret, done)
    };
    let (start, _, _) = run(&[]);
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([Vec::new()]);
    while let Some(path) = queue.pop_front() {
        for a in 0..4 {
            let mut next = path.clone();
            next.push(a);
            let (key, ret, done) = run(&next);
            if done {
                return ret;
            }
            if seen.insert(key) {
                queue.push_back(next);
            }
        }
    }
    panic!("maze {size}x{size} seed {seed} has no reachable goal");
}

fn q_learning_optimality() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let runs = optimality_sweep(&[3, 4, 5], &seeds, 200, QConfig::default()).map_err(|e| e.to_string())?;
    let mut per_size = BTreeMap::new();
    for r in &runs {
        let optimal = bfs_optimal_return(r.size, r.seed);
        let hit = r.greedy.terminated && r.greedy.total_return == optimal;
        *per_size.entry(r.size).or_insert(0) += u32::from(hit);
    }
    let summary: Vec<String> = per_size.iter().map(|(s, n)| format!("{s}x{s}: {n}/10")).collect();
    ensure(per_size.values().all(|&n| n >= 9), || format!("{}", summary.join(", ")))?;
    Ok(format!("exact optimal return {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------

/// P(X >= k), X ~ Binomial(n, 1/2), from exact integer counts.
fn sign_test_p(n: usize, k: usize) -> f64 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row[k..].iter().sum::<u128>() as f64 / (1u128 << n) as f64
}

fn median(v: &[u32]) -> f64 {
    let mut v = v.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        f64::from(v[n / 2])
    } else {
        (f64::from(v[n / 2 - 1]) + f64::from(v[n / 2])) / 2.0
    }
}

fn annotation_benefit() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let runs = annotation_sweep(5, &seeds, 0.5, 200, QConfig::default()).map_err(|e| e.to_string())?;
    let wins = runs.iter().filter(|r| r.shaped < r.unshaped).count();
    let losses = runs.iter().filter(|r| r.shaped > r.unshaped).count();
    let p = sign_test_p(wins + losses, wins);
    let lib = sign_test(&runs);
    ensure((lib.p_value - p).abs() < 1e-12 && lib.wins as usize == wins, || {
        format!("library sign test {lib:?} disagrees with p={p}")
    })?;
    let shaped = median(&runs.iter().map(|r| r.shaped).collect::<Vec<_>>());
    let unshaped = median(&runs.iter().map(|r| r.unshaped).collect::<Vec<_>>());
    let detail = format!(
        "median episodes-to-success {shaped} shaped vs {unshaped} unshaped, {wins} wins / {losses} losses, p={p:.2e}"
    );
    ensure(shaped < unshaped && p < 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

/// Front computed from the fixture alone: breadth-first distances to every
/// treasure cell (treasure cells end the episode, rock is impassable), one
/// candidate per treasure, dominated candidates removed.
fn oracle_front(fixture: &DstFixture, horizon: u32) -> Vec<(f64, f64)> {
    let (w, h) = (fixture.width() as i64, fixture.height() as i64);
    let mut dist = BTreeMap::from([((0i64, 0i64), 0u32)]);
    let mut queue = VecDeque::from([(0i64, 0i64)]);
    let mut candidates = Vec::new();
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[&(x, y)];
        if let Some(v) = fixture.treasure_at(x as u32, y as u32) {
            if d > 0 && d <= horizon {
                candidates.push((v, -f64::from(d)));
            }
            continue;
        }
        for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h || fixture.is_rock(nx as u32, ny as u32) {
                continue;
            }
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry((nx, ny)) {
                e.insert(d + 1);
                queue.push_back((nx, ny));
            }
        }
    }
    let front: Vec<(f64, f64)> = candidates
        .iter()
        .copied()
        .filter(|&(a, b)| !candidates.iter().any(|&(c, d)| c >= a && d >= b && (c > a || d > b)))
        .collect();
    let mut front = front;
    front.sort_by(|p, q| p.partial_cmp(q).unwrap());
    front.dedup();
    front
}

fn pareto_oracle() -> Outcome {
    let spec = EnvSpec::new("deep_sea_treasure").with("fixture", "default");
    let mut env = make_env(&spec).map_err(|e| e.to_string())?;
    env.reset(0).map_err(|e| e.to_string())?;
    let front = enumerate_pareto_front(env.as_ref(), 25).map_err(|e| e.to_string())?;
    let entries = &front.entries;
    for (i, a) in entries.iter().enumerate() {
        for (j, b) in entries.iter().enumerate() {
            ensure(i == j || !dominates(&a.returns, &b.returns), || format!("{:?} dominates {:?}", a.returns, b.returns))?;
        }
    }
    for e in entries {
        let mut fresh = make_env(&spec).map_err(|e| e.to_string())?;
        fresh.reset(0).map_err(|e| e.to_string())?;
        let mut ret = vec![0.0; e.returns.len()];
        let mut done = false;
        for &a in &e.witness {
            ensure(!done, || format!("witness for {:?} continues past the end", e.returns))?;
            let out = fresh.step(&[Action::discrete(a)]).map_err(|e| e.to_string())?;
            for (r, x) in ret.iter_mut().zip(&out.rewards[0]) {
                *r += x;
            }
            done = out.terminated || out.truncated;
        }
        ensure(ret == e.returns, || format!("witness replays to {ret:?}, claimed {:?}", e.returns))?;
    }
    let fixture = DstFixture::parse(DEFAULT_DST_FIXTURE).map_err(|e| e.to_string())?;
    let oracle = oracle_front(&fixture, 25);
    let mut got: Vec<(f64, f64)> = entries.iter().map(|e| (e.returns[0], e.returns[1])).collect();
    got.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ensure(got == oracle, || format!("front {got:?} differs from oracle {oracle:?}"))?;
    let max_treasure = oracle.iter().copied().fold(f64::MIN, |m, (t, _)| m.max(t));
    let min_time = oracle.iter().copied().fold(f64::MIN, |m, (_, s)| m.max(s));
    let treasure = select_by_utility(&front, &[1.0, 0.0]).map_err(|e| e.to_string())?;
    let time = select_by_utility(&front, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    ensure(treasure.returns[0] == max_treasure, || format!("(1,0) picked {:?}", treasure.returns))?;
    ensure(time.returns[1] == min_time, || format!("(0,1) picked {:?}", time.returns))?;
    Ok(format!(
        "{} entries match the oracle front, witnesses exact, (1,0) -> {:?}, (0,1) -> {:?}",
        entries.len(),
        treasure.returns,
        time.returns
    ))
}

// ---------------------------------------------------------------------------

fn uniform(rng: &mut CounterRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn preference_learning() -> Outcome {
    let mut rng = CounterRng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = 1 + rng.below(8) as usize;
        let mut draw = |n| (0..n).map(|_| uniform(&mut rng, -3.0, 3.0)).collect::<Vec<f64>>();
        let (a, b, w) = (draw(dim), draw(dim), draw(dim));
        let label = if rng.below(2) == 0 { Preferred::A } else { Preferred::B };
        let pair = PreferencePair { a, b, label };
        let model = LinearRewardModel {
            weights: w,
            feature_dim: dim,
        };
        // Loss from the defining formula, independent of the library.
        let (p, o) = match label {
            Preferred::A => (&pair.a, &pair.b),
            Preferred::B => (&pair.b, &pair.a),
        };
        let margin = |w: &[f64]| w.iter().zip(p).zip(o).map(|((w, p), o)| w * (p - o)).sum::<f64>();
        let loss = |w: &[f64]| softplus(-margin(w));
        let lib_loss = bt_negative_log_likelihood(&model, &pair);
        ensure((lib_loss - loss(&model.weights)).abs() < 1e-9, || format!("loss {lib_loss} vs {}", loss(&model.weights)))?;
        let grad = bt_gradient(&model, &pair);
        let h = 1e-5;
        for k in 0..dim {
            let mut up = model.weights.clone();
            let mut down = model.weights.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("gradient differs from finite differences by {worst:.2e}"))?;

    let dim = 6;
    let truth: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let mut make_pairs = |n: usize| {
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
                let b: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
                let score = |x: &[f64]| truth.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                let label = if score(&a) >= score(&b) { Preferred::A } else { Preferred::B };
                PreferencePair { a, b, label }
            })
            .collect::<Vec<_>>()
    };
    let train = make_pairs(400);
    let held_out = make_pairs(400);
    let fit = fit_reward_model(&train, dim, 500, 0.5).map_err(|e| e.to_string())?;
    let correct = held_out
        .iter()
        .filter(|p| {
            let prefers_a = fit.model.reward(&p.a) >= fit.model.reward(&p.b);
            prefers_a == (p.label == Preferred::A)
        })
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    ensure(acc >= 0.95, || format!("held-out accuracy {acc:.3}"))?;
    Ok(format!(
        "max |analytic - finite difference| {worst:.1e} over 100 instances, held-out accuracy {:.1}%",
        acc * 100.0
    ))
}

// ---------------------------------------------------------------------------

fn remote_cmd(extra: &str) -> String {
    format!("'{}' {extra}", env!("CARGO_BIN_EXE_loopstage-remote-env"))
}

fn bridge_loopback() -> Outcome {
    let mut remote = BridgeHandle::spawn(
        &remote_cmd("--env grid_maze --param width=5 --param height=5 --param layout_seed=3"),
        BridgeOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut local = make_env(&maze_spec(5, 3)).map_err(|e| e.to_string())?;
    let mut rng = CounterRng::new(77);
    let mut steps = 0;
    for seed in 0..10u64 {
        let same = |what: &str, a: String, b: String| ensure(a == b, || format!("seed {seed} {what}: {a} != {b}"));
        same("reset", canonical_of(&remote.reset(seed).unwrap()), canonical_of(&local.reset(seed).unwrap()))?;
        for i in 0..100u64 {
            let action = [Action::discrete(rng.below(4) as u32)];
            let (r, l) = (remote.step(&action).map_err(|e| e.to_string())?, local.step(&action).unwrap());
            let bits = |o: &loopstage_core::env::StepOutcome| {
                o.rewards.iter().flatten().map(|x| x.to_bits()).collect::<Vec<u64>>()
            };
            ensure(bits(&r) == bits(&l), || format!("seed {seed} step {i}: reward bits differ"))?;
            same("step", canonical_of(&r), canonical_of(&l))?;
            steps += 1;
            if r.terminated || r.truncated {
                let s = seed * 1000 + i;
                same("re-reset", canonical_of(&remote.reset(s).unwrap()), canonical_of(&local.reset(s).unwrap()))?;
            }
        }
        same("render", canonical_of(&remote.render().unwrap()), canonical_of(&local.render().unwrap()))?;
    }
    drop(remote);

    let mut reference = BridgeHandle::spawn(&remote_cmd(""), BridgeOptions::default()).map_err(|e| e.to_string())?;
    let report = conformance_suite(&mut reference);
    ensure(report.passed(), || format!("reference remote fails:\n{report}"))?;
    for s in Sabotage::ALL {
        let mut h = BridgeHandle::spawn(&remote_cmd(&format!("--sabotage {}", s.as_str())), BridgeOptions::default())
            .map_err(|e| e.to_string())?;
        let report = conformance_suite(&mut h);
        let failing: Vec<String> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect();
        ensure(failing == [s.breaks()], || format!("{} fails {failing:?}", s.as_str()))?;
    }
    Ok(format!(
        "{steps} bridged steps bit-identical over 10 seeds; reference remote conforms; 3/3 sabotaged remotes rejected"
    ))
}

// ---------------------------------------------------------------------------

fn golden_lines(tag: &str) -> Vec<String> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol.md")).unwrap();
    let mut out = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        if inside && line.trim_start().starts_with("```") {
            inside = false;
        } else if inside {
            out.push(line.to_string());
        } else if line.trim() == format!("```{tag}") {
            inside = true;
        }
    }
    out
}

fn protocol_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let cases = std::cell::Cell::new(0u32);
    runner
        .run(&loopstage_core::protocol::arbitrary::envelope(), |env| {
            cases.set(cases.get() + 1);
            let bytes = encode_envelope(&env).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = decode_envelope(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if back != env {
                return Err(TestCaseError::fail("decoded envelope differs"));
            }
            let again = encode_envelope(&back).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if again != bytes {
                return Err(TestCaseError::fail("re-encoding is not byte-identical"));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let golden = golden_lines("json golden");
    let mut kinds = BTreeSet::new();
    for line in &golden {
        let env = decode_envelope(line.as_bytes()).map_err(|e| format!("{e}: {line}"))?;
        let again = String::from_utf8(encode_envelope(&env).unwrap()).unwrap();
        ensure(&again == line, || format!("golden frame re-encodes differently: {line}"))?;
        kinds.insert(env.kind());
    }
    ensure(kinds.len() == MessageKind::ALL.len(), || format!("golden frames cover {} kinds", kinds.len()))?;
    Ok(format!(
        "{} generated envelopes round-trip byte-identically; {} golden frames decode exactly",
        cases.get(),
        golden.len()
    ))
}
