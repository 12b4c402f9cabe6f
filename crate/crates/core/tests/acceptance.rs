//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! The desk-scale learning run (criterion 8) needs hours on a single core
//! and only runs when `ABACUS_ACCEPT_FULL=1`; otherwise it reports SKIP
//! after checking the learning-rate schedule alone. `ABACUS_ACCEPT_STEPS`
//! shortens that run for smoke testing.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use mimalloc::MiMalloc;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use abacus_rl::abacus::{Action, ActionMask, NUM_ACTIONS};
use abacus_rl::env::{budget_cap, AbacusEnv, EpisodeConfig, RewardConfig, RewardPreset, Task};
use abacus_rl::eval::{error_report, evaluate_accuracy, inject_failure, ood_sweep, NetPolicy, OODConfig, OraclePolicy};
use abacus_rl::net::{load_checkpoint, ActorCritic, ArchConfig, ArchPreset, Inputs, MaskedCategorical, NetParams, Outputs};
use abacus_rl::oracle::{run_oracle_episode, ErrorClass, Phase};
use abacus_rl::ppo::{
    compute_gae, count_local_maxima, count_lr_maxima, lr_at, train, EpochMetrics, PPOConfig, TrainConfig, TrainIo, METRICS_FILE,
};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Verdict + 'a>);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn oracle_cfg(columns: usize, seed: u64) -> EpisodeConfig {
    EpisodeConfig {
        columns,
        task: Task::Both,
        seed,
        ..EpisodeConfig::default()
    }
}

const OPS_PER_EPISODE: u64 = 20;
const ORACLE_EPISODES: u64 = 10_000;

/// Criteria 1 and 3 share the oracle episodes.
struct OracleSweep {
    failures: u64,
    exhaustions: u64,
    mismatches: u64,
    operations: u64,
    max_gap: [(usize, u64); 2],
    elapsed: f64,
}

fn oracle_sweep() -> OracleSweep {
    let start = Instant::now();
    let mut s = OracleSweep {
        failures: 0,
        exhaustions: 0,
        mismatches: 0,
        operations: 0,
        max_gap: [(10, 0), (20, 0)],
        elapsed: 0.0,
    };
    for (slot, columns) in [10usize, 20].into_iter().enumerate() {
        for i in 0..ORACLE_EPISODES {
            match run_oracle_episode(&oracle_cfg(columns, 1_000_000 * columns as u64 + i), OPS_PER_EPISODE) {
                Ok(run) => {
                    s.operations += run.operations_completed;
                    if run.cause == Some(abacus_rl::env::TerminationCause::BudgetExhausted) {
                        s.exhaustions += 1;
                    }
                    s.max_gap[slot].1 = s.max_gap[slot].1.max(run.max_write_gap);
                    // Independent ground truth: replay the operations with
                    // big integers from the trace symbols.
                    let truth = replay_truth(&run.trace);
                    if truth.len() != run.checkpoints.len() {
                        s.mismatches += 1;
                    }
                    for ((board, _), t) in run.checkpoints.iter().zip(&truth) {
                        if board != t {
                            s.mismatches += 1;
                        }
                    }
                }
                Err(_) => s.failures += 1,
            }
        }
    }
    s.elapsed = start.elapsed().as_secs_f64();
    s
}

/// Rebuilds the running result after each completed operation from the
/// symbols the environment presented: an operation symbol precedes its
/// digits, which arrive least significant first.
fn replay_truth(trace: &[abacus_rl::env::TraceStep]) -> Vec<BigUint> {
    let mut out = Vec::new();
    let mut running = BigUint::from(0u32);
    let mut sign = '+';
    let mut operand = BigUint::from(0u32);
    let mut digits = 0;
    let mut place = BigUint::from(1u32);
    for step in trace {
        if step.breakdown.submit <= 0.0 {
            continue;
        }
        // A rewarded submit consumed `step.symbol`.
        match step.symbol.as_str() {
            "+" | "-" => {
                if digits > 0 {
                    running = apply(&running, sign, &operand);
                    out.push(running.clone());
                }
                sign = step.symbol.chars().next().unwrap();
                operand = BigUint::from(0u32);
                place = BigUint::from(1u32);
                digits = 0;
            }
            d => {
                let v: u32 = d.parse().expect("digit symbol");
                operand += &place * v;
                place *= 5u32;
                digits += 1;
            }
        }
    }
    if digits > 0 {
        out.push(apply(&running, sign, &operand));
    }
    out
}

fn apply(running: &BigUint, sign: char, operand: &BigUint) -> BigUint {
    if sign == '+' {
        running + operand
    } else {
        running - operand
    }
}

fn criterion_1(s: &OracleSweep) -> Verdict {
    let ok = s.failures == 0 && s.exhaustions == 0 && s.mismatches == 0 && s.elapsed < 60.0;
    verdict(
        ok,
        format!(
            "{} episodes, {} operations, failures {}, budget exhaustions {}, value mismatches {}, {:.1}s",
            2 * ORACLE_EPISODES,
            s.operations,
            s.failures,
            s.exhaustions,
            s.mismatches,
            s.elapsed
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut worst = 0f64;
    let mut episodes = 0;
    for preset in [RewardPreset::Dense, RewardPreset::NoOf, RewardPreset::NoOfSp] {
        for i in 0..100u64 {
            let cfg = EpisodeConfig {
                reward: RewardConfig::preset(preset),
                ..oracle_cfg(10, 7_000 + i)
            };
            let run = match run_oracle_episode(&cfg, OPS_PER_EPISODE) {
                Ok(r) => r,
                Err(e) => return Verdict::Fail(format!("oracle episode failed: {e}")),
            };
            let count = |names: &[&str]| run.trace.iter().filter(|t| names.contains(&t.action.as_str())).count() as f64;
            let writes = count(&["move_slide"]);
            let signposts = count(&["signpost_left", "signpost_right"]);
            let submits = count(&["submit"]);
            let fingers = count(&["finger_left", "finger_right", "finger_up", "finger_down"]);
            let steps = run.trace.len() as f64;
            let (sp, of) = match preset {
                RewardPreset::Dense => (signposts, fingers * 0.10),
                RewardPreset::NoOf => (signposts, 0.0),
                RewardPreset::NoOfSp => (0.0, 0.0),
            };
            let closed = (writes + sp + submits) + of - 0.05 * steps;
            let total: f64 = run.trace.iter().map(|t| t.reward).sum();
            worst = worst.max((closed - total).abs());
            episodes += 1;
        }
    }
    verdict(
        worst <= 1e-9,
        format!("{episodes} episodes over 3 presets, max |closed form - total| = {worst:.2e}"),
    )
}

fn criterion_3(s: &OracleSweep) -> Verdict {
    let cap10 = budget_cap(10);
    let ok = cap10 == 32 && s.max_gap.iter().all(|(c, g)| *g <= u64::from(budget_cap(*c)));
    verdict(
        ok,
        format!(
            "cap(10) = {cap10}, max write gap C=10: {} (cap {}), C=20: {} (cap {})",
            s.max_gap[0].1,
            budget_cap(10),
            s.max_gap[1].1,
            budget_cap(20)
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    let mut worst_sum = 0f64;
    for i in 0..1000 {
        let scale = [0.1, 1.0, 10.0, 50.0][i % 4];
        let logits: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.random_range(-scale..scale)).collect();
        let mut m = [false; NUM_ACTIONS];
        while !m.iter().any(|b| *b) {
            m = std::array::from_fn(|_| rng.random_bool(0.6));
        }
        let mask = ActionMask(m);
        let dist = match MaskedCategorical::new(&logits, &mask) {
            Ok(d) => d,
            Err(e) => return Verdict::Fail(format!("distribution rejected a valid input: {e}")),
        };
        // Independent softmax over the legal entries.
        let hi = (0..NUM_ACTIONS).filter(|k| m[*k]).map(|k| logits[k]).fold(f64::MIN, f64::max);
        let z: f64 = (0..NUM_ACTIONS).filter(|k| m[*k]).map(|k| (logits[k] - hi).exp()).sum();
        let p = dist.probs();
        let sum: f64 = p.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        for k in 0..NUM_ACTIONS {
            let want = if m[k] { (logits[k] - hi).exp() / z } else { 0.0 };
            if (!m[k] && p[k] != 0.0) || (p[k] - want).abs() > 1e-12 {
                bad.push(format!("input {i} action {k}: p {} vs {want}", p[k]));
            }
        }
        let a = Action::from_index((0..NUM_ACTIONS).find(|k| m[*k]).unwrap()).unwrap();
        let g_lp = dist.grad_log_prob(a).unwrap();
        let g_h = dist.grad_entropy();
        for k in (0..NUM_ACTIONS).filter(|k| !m[*k]) {
            if g_lp[k] != 0.0 || g_h[k] != 0.0 {
                bad.push(format!("input {i}: nonzero gradient on masked logit {k}"));
            }
        }
    }
    verdict(
        bad.is_empty() && worst_sum <= 1e-6,
        format!(
            "1000 inputs, max |sum - 1| = {worst_sum:.1e}, violations {}{}",
            bad.len(),
            bad.first().map(|b| format!(" ({b})")).unwrap_or_default()
        ),
    )
}

/// Observations from an oracle episode plus a few random legal steps.
fn sample_inputs(n: usize, seed: u64) -> Inputs<f32> {
    let cfg = EpisodeConfig {
        max_len: 2,
        ..oracle_cfg(3, seed)
    };
    let mut env = AbacusEnv::new(cfg).unwrap();
    env.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inp = Inputs::with_capacity(n);
    let mut prev = None;
    for i in 0..n {
        if env.is_done() {
            env.reset();
            prev = None;
        }
        inp.set_row(i, env.observation(), &env.symbol_input(), prev);
        let a = if rng.random_bool(0.8) {
            env.prescription().unwrap().action
        } else {
            let legal: Vec<Action> = env.mask().legal().collect();
            legal[rng.random_range(0..legal.len())]
        };
        env.step(a).unwrap();
        prev = Some(a);
    }
    inp
}

fn criterion_5() -> Verdict {
    let arch = ArchConfig::preset(ArchPreset::Desk);
    let mut net: ActorCritic<f64> = NetParams::init(&arch, 55).unwrap().cast();
    // Zero initial biases put many pre-activations exactly on the ReLU kink.
    net.jitter_biases(0.1, 56);
    let inp: Inputs<f64> = sample_inputs(6, 57).cast();
    let loss = |o: &Outputs<f64>| {
        let l = o.logits.mapv(|x| (x * 3.0).sin()).sum() + o.values.mapv(|v| v * v).sum();
        (
            l,
            Outputs {
                logits: o.logits.mapv(|x| 3.0 * (x * 3.0).cos()),
                values: o.values.mapv(|v| 2.0 * v),
            },
        )
    };
    let (_, g) = net.gradients(&inp, loss).unwrap();
    let grads: Vec<(String, Vec<f64>)> = g.named_params().iter().map(|p| (p.name.clone(), p.data.to_vec())).collect();
    let actor: Vec<usize> = (0..grads.len()).filter(|k| grads[*k].0.starts_with("actor")).collect();
    let critic: Vec<usize> = (0..grads.len()).filter(|k| grads[*k].0.starts_with("critic")).collect();

    // Central differences are only valid while no ReLU flips between the
    // two probes; such coordinates are redrawn and counted.
    let h = 1e-3;
    let base = net.relu_pattern(&inp);
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    let mut worst = (0f64, String::new());
    let (mut checked, mut redrawn) = (0, 0);
    while checked < 100 && redrawn < 1000 {
        let pool = if checked % 2 == 0 { &actor } else { &critic };
        let k = pool[rng.random_range(0..pool.len())];
        let idx = rng.random_range(0..grads[k].1.len());
        let probe = |delta: f64| {
            let mut m = net.clone();
            m.params_mut()[k][idx] += delta;
            let same = m.relu_pattern(&inp) == base;
            (loss(&m.forward(&inp)).0, same)
        };
        let ((fp, sp), (fm, sm)) = (probe(h), probe(-h));
        if !(sp && sm) {
            redrawn += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let an = grads[k].1[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, format!("{}[{idx}] fd {fd:.6e} vs {an:.6e}", grads[k].0));
        }
        checked += 1;
    }
    verdict(
        checked == 100 && worst.0 < 1e-3,
        format!(
            "{checked} coordinates (50 actor, 50 critic), {redrawn} redrawn for crossing a ReLU kink, worst relative error {:.2e} {}",
            worst.0, worst.1
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = 50;
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let (adv, ret) = compute_gae(&r, &v, &d, gamma, lambda).unwrap();
        for t in 0..n {
            let mut direct = 0.0;
            let mut w = 1.0;
            for l in t..n {
                let live = if d[l] { 0.0 } else { 1.0 };
                direct += w * (r[l] + gamma * v[l + 1] * live - v[l]);
                if d[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            worst = worst.max((direct - adv[t]).abs()).max((direct + v[t] - ret[t]).abs());
        }
    }
    verdict(
        worst <= 1e-10,
        format!("1000 batches of 50 steps, max |recursive - direct| = {worst:.2e}"),
    )
}

/// True when no epoch was applied after one whose KL exceeded the limit.
fn kl_invariant_holds(m: &EpochMetrics, limit: f64) -> bool {
    let u = &m.update;
    u.epoch_kls.len() == u.epochs_applied && u.epoch_kls.iter().take(u.epochs_applied.saturating_sub(1)).all(|kl| *kl <= limit)
}

fn desk_train_config(seed: u64, total_steps: u64) -> TrainConfig {
    TrainConfig {
        episode: EpisodeConfig {
            columns: 3,
            min_len: 1,
            max_len: 2,
            task: Task::AddOnly,
            seed,
            reward: RewardConfig::preset(RewardPreset::Dense),
            ..EpisodeConfig::default()
        },
        arch: ArchConfig::preset(ArchPreset::Desk),
        ppo: PPOConfig {
            total_steps,
            ..PPOConfig::default()
        },
        seed,
        checkpoint_every: 0,
    }
}

fn criterion_7() -> Verdict {
    let mut runs = Vec::new();
    // Default settings, then an aggressive step size that forces early stops.
    for lr0 in [3e-4, 0.05] {
        let mut cfg = desk_train_config(70, 3 * 512);
        cfg.ppo.n_envs = 1;
        cfg.ppo.rollout_len = 512;
        cfg.ppo.lr0 = lr0;
        let limit = cfg.ppo.kl_threshold;
        let mut ok = true;
        let mut stops = 0;
        let mut epochs = 0;
        let res = train(&cfg, &TrainIo::default(), None, |m| {
            ok &= kl_invariant_holds(m, limit);
            stops += m.update.early_stopped as usize;
            epochs += 1;
        });
        if let Err(e) = res {
            return Verdict::Fail(format!("training failed: {e}"));
        }
        runs.push((lr0, ok, stops, epochs));
    }
    let ok = runs.iter().all(|r| r.1) && runs[1].2 > 0;
    let detail = runs
        .iter()
        .map(|(lr, ok, s, e)| {
            format!(
                "lr0 {lr}: {e} updates, {s} early stops, invariant {}",
                if *ok { "held" } else { "VIOLATED" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

fn criterion_8() -> Verdict {
    // ABACUS_ACCEPT_STEPS shortens the run to exercise this path; the
    // verdict is still judged against the full target.
    let budget = std::env::var("ABACUS_ACCEPT_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2_000_000u64);
    let cfg = desk_train_config(0, budget);
    let schedule_maxima = count_lr_maxima(&cfg.ppo, cfg.ppo.steps_per_epoch());
    if std::env::var("ABACUS_ACCEPT_FULL").as_deref() != Ok("1") {
        return Verdict::Skip(format!(
            "full run not requested (ABACUS_ACCEPT_FULL=1); lr schedule has {schedule_maxima} maxima for {} cycles",
            cfg.ppo.cycles
        ));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let out = match train(&cfg, &TrainIo::default(), None, |m| rows.push(m.clone())) {
        Ok(o) => o,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let best = rows.iter().map(|m| m.accuracy).fold(0.0, f64::max);
    let first_hit = rows.iter().find(|m| m.accuracy >= 0.9).map(|m| m.env_steps);
    let lrs: Vec<f64> = rows.iter().map(|m| m.lr).collect();
    let curve_maxima = count_local_maxima(&lrs);
    let schedule_ok = rows
        .iter()
        .all(|m| m.lr == lr_at(m.env_steps - cfg.ppo.steps_per_epoch(), &cfg.ppo));
    let mut policy = NetPolicy::new(Arc::new(out.net), true, 1);
    let greedy = evaluate_accuracy(
        &mut policy,
        &EpisodeConfig {
            seed: 81,
            ..cfg.episode.clone()
        },
        2000,
    )
    .map(|r| r.accuracy)
    .unwrap_or(f64::NAN);
    let ok = first_hit.is_some() && curve_maxima == cfg.ppo.cycles as usize && schedule_ok;
    verdict(
        ok,
        format!(
            "{budget} steps, best epoch accuracy {best:.3} (first >= 0.9 at {}), greedy eval {greedy:.3}, lr maxima {curve_maxima}/{}, {:.0}s",
            first_hit.map_or("never".to_string(), |s| format!("{s} steps")),
            cfg.ppo.cycles,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut oracle = OraclePolicy;
    let mut accs = Vec::new();
    for (columns, task) in [(3, Task::AddOnly), (20, Task::Both)] {
        let cfg = EpisodeConfig {
            columns,
            task,
            seed: 90,
            max_len: if columns == 3 { 2 } else { 6 },
            ..EpisodeConfig::default()
        };
        match evaluate_accuracy(&mut oracle, &cfg, 1000) {
            Ok(r) => accs.push(r.accuracy),
            Err(e) => return Verdict::Fail(format!("evaluate_accuracy failed: {e}")),
        }
    }
    let ood = OODConfig {
        samples: 1000,
        columns: 20,
        seed: 91,
        ..OODConfig::default()
    };
    let res = match ood_sweep(&mut oracle, &ood) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("ood_sweep failed: {e}")),
    };
    let xs: Vec<u32> = res.rows.iter().map(|r| r.x).collect();
    let zero = res.rows.iter().all(|r| r.errors == 0 && r.error_rate == 0.0 && r.n == 1000);
    let ok = accs.iter().all(|a| *a == 1.0) && zero && xs == [1, 2, 4, 8, 16];
    verdict(
        ok,
        format!(
            "accuracy {:?}, sweep x {:?} error rates {:?}",
            accs,
            xs,
            res.rows.iter().map(|r| r.error_rate).collect::<Vec<_>>()
        ),
    )
}

/// Target column of the first step at which `class` can be injected,
/// found by re-driving the oracle independently of the library helper.
fn injection_column(cfg: &EpisodeConfig, class: ErrorClass) -> Option<usize> {
    let mut env = AbacusEnv::new(cfg.clone()).ok()?;
    env.reset();
    while !env.is_done() {
        let p = env.prescription().ok()?;
        let mask = env.mask();
        let hit = match class {
            ErrorClass::SimpleOperation => p.phase == Phase::WriteDigit,
            ErrorClass::Carry => p.phase == Phase::CarryWrite,
            ErrorClass::SignpostRight => p.action != Action::SignpostRight && mask.allows(Action::SignpostRight),
            ErrorClass::SignpostLeft => p.action != Action::SignpostLeft && mask.allows(Action::SignpostLeft),
        };
        if hit {
            return Some(p.target.column());
        }
        env.step(p.action).ok()?;
    }
    None
}

fn criterion_10() -> Verdict {
    let mut records = Vec::new();
    let mut expected_cols = std::collections::BTreeMap::<usize, u64>::new();
    let mut disagreements = 0;
    for class in ErrorClass::ALL {
        let mut seed = 0u64;
        let mut made = 0;
        while made < 100 {
            seed += 1;
            if seed > 100_000 {
                return Verdict::Fail(format!("could not inject 100 failures of class {}", class.name()));
            }
            let cfg = EpisodeConfig {
                columns: 6,
                max_len: 4,
                ..oracle_cfg(6, 10_000 * class as u64 + seed)
            };
            let rec = match inject_failure(&cfg, class) {
                Ok(Some(r)) => r,
                Ok(None) => continue,
                Err(e) => return Verdict::Fail(format!("injection failed: {e}")),
            };
            let col = injection_column(&cfg, class);
            if rec.class != class || col != Some(rec.column) {
                disagreements += 1;
            }
            if let Some(c) = col {
                *expected_cols.entry(c).or_default() += 1;
            }
            records.push(rec);
            made += 1;
        }
    }
    let report = error_report(&records, 0);
    let per_class_ok = ErrorClass::ALL.iter().all(|c| report.counts.get(c) == Some(&100));
    let hist_total: u64 = report.histogram.values().sum();
    let ok = disagreements == 0 && per_class_ok && hist_total == 400 && report.total == 400 && report.histogram == expected_cols;
    verdict(
        ok,
        format!(
            "{} injected, disagreements {disagreements}, per-class counts {:?}, histogram total {hist_total}",
            records.len(),
            report.counts.values().collect::<Vec<_>>()
        ),
    )
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_train_config(110, 2 * 256);
    cfg.ppo.n_envs = 1;
    cfg.ppo.rollout_len = 256;
    cfg.ppo.minibatch = 64;
    let mut csvs = Vec::new();
    let mut nets = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let io = TrainIo {
            out_dir: Some(out.clone()),
            resume: None,
        };
        match train(&cfg, &io, None, |_| {}) {
            Ok(o) => nets.push(o.net),
            Err(e) => return Verdict::Fail(format!("training failed: {e}")),
        }
        csvs.push(std::fs::read(out.join(METRICS_FILE)).unwrap_or_default());
    }
    let metrics_equal = !csvs[0].is_empty() && csvs[0] == csvs[1];

    let ckpt = dir.path().join("run0").join(abacus_rl::ppo::FINAL_CHECKPOINT);
    let loaded = match load_checkpoint(Path::new(&ckpt)) {
        Ok(c) => c.params,
        Err(e) => return Verdict::Fail(format!("checkpoint load failed: {e}")),
    };
    let inp = sample_inputs(64, 111);
    let a = nets[0].forward(&inp);
    let b = loaded.forward(&inp);
    let bits = |o: &Outputs<f32>| o.logits.iter().chain(o.values.iter()).map(|v| v.to_bits()).collect::<Vec<_>>();
    let forward_equal = bits(&a) == bits(&b) && nets[0] == loaded;
    verdict(
        metrics_equal && forward_equal,
        format!(
            "metrics.csv identical: {metrics_equal} ({} bytes), checkpoint forward bitwise equal: {forward_equal}",
            csvs[0].len()
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; only a name filter is honoured.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string() || f == &format!("criterion_{n}"));

    let sweep = (wanted(1) || wanted(3)).then(oracle_sweep);
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "oracle arithmetic equivalence",
            Box::new(|| criterion_1(sweep.as_ref().unwrap())),
        ),
        (2, "reward bookkeeping", Box::new(criterion_2)),
        (3, "budget constant", Box::new(|| criterion_3(sweep.as_ref().unwrap()))),
        (4, "masked softmax", Box::new(criterion_4)),
        (5, "gradient verification", Box::new(criterion_5)),
        (6, "GAE equivalence", Box::new(criterion_6)),
        (7, "KL early stop", Box::new(criterion_7)),
        (8, "desk-scale learning", Box::new(criterion_8)),
        (9, "evaluation harness", Box::new(criterion_9)),
        (10, "error classifier", Box::new(criterion_10)),
        (11, "reproducibility", Box::new(criterion_11)),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = match f() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
