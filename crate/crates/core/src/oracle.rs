//! Scripted reference solver.
//!
//! The solver processes one input symbol at a time. For a digit `d` at
//! position `p` it writes the new digit into column `p`, propagates the
//! carry (or borrow) rightwards one column at a time, advances the signpost
//! to `p + 1`, brings the finger back to column `p + 1` and submits. For an
//! operation symbol it walks the finger back to column 0, walks the
//! signpost back to column 0 and submits.
//!
//! The next prescribed action is a pure function of the board and the
//! [`EpisodeContext`]; the environment uses it to judge signpost, write and
//! submit actions and to shape finger movement.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::abacus::{value_to_digits, AbacusState, Action};
use crate::env::{step_traced, AbacusEnv, EpisodeConfig, Op, Symbol, TerminationCause, TraceStep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WriteDigit,
    CarryWrite,
    AdvanceSignpost,
    ReturnFinger,
    ResetFinger,
    ResetSignpost,
    SubmitPending,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::WriteDigit => "write_digit",
            Phase::CarryWrite => "carry_write",
            Phase::AdvanceSignpost => "advance_signpost",
            Phase::ReturnFinger => "return_finger",
            Phase::ResetFinger => "reset_finger",
            Phase::ResetSignpost => "reset_signpost",
            Phase::SubmitPending => "submit_pending",
        }
    }
}

/// Where the finger is supposed to be heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Cell { col: usize, row: u8 },
    Column(usize),
}

impl Target {
    pub fn column(&self) -> usize {
        match *self {
            Target::Cell { col, .. } => col,
            Target::Column(col) => col,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleStep {
    pub phase: Phase,
    pub action: Action,
    pub target: Target,
}

/// What the environment currently asks for, plus the value the board must
/// hold once the symbol is processed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeContext {
    pub symbol: Symbol,
    pub op: Op,
    /// Digit position; meaningful for digit symbols.
    pub position: usize,
    pub expected: BigUint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorClass {
    SimpleOperation,
    SignpostRight,
    Carry,
    SignpostLeft,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 4] = [
        ErrorClass::SimpleOperation,
        ErrorClass::SignpostRight,
        ErrorClass::Carry,
        ErrorClass::SignpostLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::SimpleOperation => "simple_operation",
            ErrorClass::SignpostRight => "signpost_right",
            ErrorClass::Carry => "carry",
            ErrorClass::SignpostLeft => "signpost_left",
        }
    }
}

/// Next prescribed action for `state` under `ctx`.
///
/// Fails with [`Error::Capacity`] when the next carry would have to be
/// written past the last column.
pub fn prescription(state: &AbacusState, ctx: &EpisodeContext) -> Result<OracleStep> {
    let (fcol, frow) = state.finger();
    match ctx.symbol {
        Symbol::Op(_) => Ok(if fcol > 0 {
            OracleStep {
                phase: Phase::ResetFinger,
                action: Action::FingerLeft,
                target: Target::Column(0),
            }
        } else if state.signpost_col() > 0 {
            OracleStep {
                phase: Phase::ResetSignpost,
                action: Action::SignpostLeft,
                target: Target::Column(0),
            }
        } else {
            OracleStep {
                phase: Phase::SubmitPending,
                action: Action::Submit,
                target: Target::Column(0),
            }
        }),
        Symbol::Digit(_) => {
            let c = state.num_columns();
            let p = ctx.position;
            let target_digits = value_to_digits(&ctx.expected);
            let want = |k: usize| target_digits.get(k).copied().unwrap_or(0);

            // Writes land left to right, so the first mismatch is the next one.
            if let Some(k) = (0..c).find(|&k| state.column(k) != want(k)) {
                let row = want(k);
                let phase = if k == p { Phase::WriteDigit } else { Phase::CarryWrite };
                let action = if fcol != k {
                    if fcol < k {
                        Action::FingerRight
                    } else {
                        Action::FingerLeft
                    }
                } else if frow != row {
                    if frow < row {
                        Action::FingerUp
                    } else {
                        Action::FingerDown
                    }
                } else {
                    Action::MoveSlide
                };
                return Ok(OracleStep {
                    phase,
                    action,
                    target: Target::Cell { col: k, row },
                });
            }
            if target_digits.len() > c {
                return Err(Error::Capacity(c));
            }

            let home = if p + 1 < c { p + 1 } else { p };
            let target = Target::Column(home);
            let sp = state.signpost_col();
            Ok(if sp < home {
                OracleStep {
                    phase: Phase::AdvanceSignpost,
                    action: Action::SignpostRight,
                    target,
                }
            } else if sp > home {
                // Only reachable when signpost moves are unsupervised.
                OracleStep {
                    phase: Phase::ResetSignpost,
                    action: Action::SignpostLeft,
                    target,
                }
            } else if fcol != home {
                OracleStep {
                    phase: Phase::ReturnFinger,
                    action: if fcol < home { Action::FingerRight } else { Action::FingerLeft },
                    target,
                }
            } else {
                OracleStep {
                    phase: Phase::SubmitPending,
                    action: Action::Submit,
                    target,
                }
            })
        }
    }
}

/// Manhattan distance to a cell target, column distance to a column target.
pub fn shaping_distance(state: &AbacusState, target: &Target) -> usize {
    let (fcol, frow) = state.finger();
    match *target {
        Target::Cell { col, row } => fcol.abs_diff(col) + (frow as usize).abs_diff(row as usize),
        Target::Column(col) => fcol.abs_diff(col),
    }
}

/// `magnitude` if the finger got closer to `step`'s target, `-magnitude` if
/// it moved away, 0 otherwise.
pub fn shaping_delta(before: &AbacusState, after: &AbacusState, step: &OracleStep, magnitude: f64) -> f64 {
    let d0 = shaping_distance(before, &step.target);
    let d1 = shaping_distance(after, &step.target);
    match d1.cmp(&d0) {
        std::cmp::Ordering::Less => magnitude,
        std::cmp::Ordering::Greater => -magnitude,
        std::cmp::Ordering::Equal => 0.0,
    }
}

/// The facts about a failing step needed to classify it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailureContext {
    pub taken: Action,
    pub phase: Phase,
    pub target: Target,
    pub cause: TerminationCause,
}

/// Error class plus the oracle's target column at the moment of failure.
pub fn classify_failure(f: &FailureContext) -> Result<(ErrorClass, usize)> {
    if !f.cause.is_failure() {
        return Err(Error::NotTerminal);
    }
    let class = match (f.cause, f.taken) {
        (TerminationCause::WrongSignpost, Action::SignpostRight) => ErrorClass::SignpostRight,
        (TerminationCause::WrongSignpost, _) => ErrorClass::SignpostLeft,
        _ if f.phase == Phase::CarryWrite => ErrorClass::Carry,
        _ => ErrorClass::SimpleOperation,
    };
    Ok((class, f.target.column()))
}

/// Counters collected while the oracle drives an episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleRun {
    pub trace: Vec<TraceStep>,
    pub total_reward: f64,
    pub steps: u64,
    pub finger_moves: u64,
    pub writes: u64,
    pub signpost_moves: u64,
    pub submits: u64,
    pub operations_completed: u64,
    /// Largest number of steps from one write (exclusive, or the episode
    /// start) to the next write (inclusive).
    pub max_write_gap: u64,
    pub cause: Option<TerminationCause>,
    /// Board value after each completed operation, paired with the
    /// independently accumulated running result.
    pub checkpoints: Vec<(BigUint, BigUint)>,
}

/// Drives a fresh episode with prescribed actions until `max_operations`
/// operations are done or the episode ends on its own.
pub fn run_oracle_episode(cfg: &EpisodeConfig, max_operations: u64) -> Result<OracleRun> {
    let mut cfg = cfg.clone();
    cfg.max_operations = Some(max_operations);
    let mut env = AbacusEnv::new(cfg)?;
    env.reset();
    drive(&mut env, true)
}

/// Runs the oracle on an environment that has already been reset.
pub fn drive(env: &mut AbacusEnv, keep_trace: bool) -> Result<OracleRun> {
    let mut run = OracleRun::default();
    let mut truth = env.running_value().clone();
    let mut pending = env.current_operation().cloned();
    let mut gap = 0u64;
    while !env.is_done() {
        let step = env.prescription()?;
        let (res, tr) = step_traced(env, step.action)?;
        run.steps += 1;
        gap += 1;
        match step.action {
            a if a.is_finger_move() => run.finger_moves += 1,
            a if a.is_signpost_move() => run.signpost_moves += 1,
            Action::MoveSlide => {
                run.writes += 1;
                run.max_write_gap = run.max_write_gap.max(gap);
                gap = 0;
            }
            _ => run.submits += 1,
        }
        run.total_reward += res.reward;
        if keep_trace {
            run.trace.push(tr);
        }
        if let Some(cause) = res.info.cause {
            if cause.is_failure() {
                return Err(Error::Config(format!("oracle failed at t={} with {cause:?}", run.steps)));
            }
        }
        if res.info.operations_completed > run.operations_completed {
            let op = pending.take().expect("completed an operation that never started");
            truth = op.apply(&truth)?;
            run.operations_completed = res.info.operations_completed;
            run.checkpoints.push((env.state().value(), truth.clone()));
        }
        pending = env.current_operation().cloned().or(pending);
    }
    run.max_write_gap = run.max_write_gap.max(gap);
    run.cause = env.cause();
    Ok(run)
}
