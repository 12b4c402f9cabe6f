//! Episode logic: operand sampling, the symbol stream, the modular reward
//! and the dynamic step budget.

use std::collections::VecDeque;
use std::fmt;

use num_bigint::BigUint;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abacus::{AbacusState, Action, ActionMask, ObservationStack, Snapshot, BASE};
use crate::error::{Error, Result};
use crate::oracle::{self, EpisodeContext, OracleStep, Phase};

pub const SYMBOL_LEN: usize = 9;
/// Tries per direction before the sampler falls back to the other operation.
const RESAMPLE_TRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Sub,
}

impl Op {
    pub fn sign(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Digit(u8),
    Op(Op),
}

impl Symbol {
    /// Index into the 7-way symbol one-hot: digits 0..=4, then `+`, `-`.
    pub fn index(self) -> usize {
        match self {
            Symbol::Digit(d) => d as usize,
            Symbol::Op(Op::Add) => 5,
            Symbol::Op(Op::Sub) => 6,
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Digit(d) => write!(f, "{d}"),
            Symbol::Op(op) => write!(f, "{}", op.sign()),
        }
    }
}

/// One operation: the operator and its operand, least significant digit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub op: Op,
    pub digits: Vec<u8>,
}

impl Operation {
    pub fn new(op: Op, digits: Vec<u8>) -> Self {
        Operation { op, digits }
    }

    pub fn from_value(op: Op, v: &BigUint) -> Self {
        let mut digits = crate::abacus::value_to_digits(v);
        if digits.is_empty() {
            digits.push(0);
        }
        Operation { op, digits }
    }

    pub fn operand(&self) -> BigUint {
        crate::abacus::digits_to_value(&self.digits)
    }

    pub fn apply(&self, running: &BigUint) -> Result<BigUint> {
        let b = self.operand();
        match self.op {
            Op::Add => Ok(running + b),
            Op::Sub if &b <= running => Ok(running - b),
            Op::Sub => Err(Error::NegativeResult),
        }
    }

    /// Parses `"+1234"` / `"-402"`: sign then base-5 digits, most significant first.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        let op = match chars.next() {
            Some('+') => Op::Add,
            Some('-') => Op::Sub,
            _ => return Err(Error::Config(format!("operation '{s}' must start with + or -"))),
        };
        let mut digits = Vec::new();
        for ch in chars {
            match ch.to_digit(10) {
                Some(d) if d < BASE as u32 => digits.push(d as u8),
                _ => return Err(Error::InvalidDigit(ch)),
            }
        }
        if digits.is_empty() {
            return Err(Error::Config(format!("operation '{s}' has no digits")));
        }
        digits.reverse();
        Ok(Operation { op, digits })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Operation::parse).collect()
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.op.sign())?;
        for d in self.digits.iter().rev() {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Symbol one-hot (7) followed by the active-operation flag (2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolInput(pub [f32; SYMBOL_LEN]);

impl SymbolInput {
    pub fn new(symbol: Symbol, op: Op) -> Self {
        let mut v = [0.0; SYMBOL_LEN];
        v[symbol.index()] = 1.0;
        v[7 + op as usize] = 1.0;
        SymbolInput(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub step_penalty: f64,
    pub shaping_reward: f64,
    pub enable_of: bool,
    pub signpost_reward: f64,
    pub enable_sp: bool,
    pub moveslide_reward: f64,
    pub submit_reward: f64,
    pub fail_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardPreset {
    Dense,
    NoOf,
    NoOfSp,
}

impl RewardPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RewardPreset::Dense),
            "no-of" => Ok(RewardPreset::NoOf),
            "no-of-sp" => Ok(RewardPreset::NoOfSp),
            _ => Err(Error::Config(format!("unknown reward preset '{s}' (dense, no-of, no-of-sp)"))),
        }
    }
}

impl RewardConfig {
    pub fn preset(p: RewardPreset) -> Self {
        let dense = RewardConfig {
            step_penalty: -0.05,
            shaping_reward: 0.10,
            enable_of: true,
            signpost_reward: 1.0,
            enable_sp: true,
            moveslide_reward: 1.0,
            submit_reward: 1.0,
            fail_penalty: -1.0,
        };
        match p {
            RewardPreset::Dense => dense,
            RewardPreset::NoOf => RewardConfig { enable_of: false, ..dense },
            RewardPreset::NoOfSp => RewardConfig {
                enable_of: false,
                enable_sp: false,
                ..dense
            },
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig::preset(RewardPreset::Dense)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "add")]
    AddOnly,
    #[serde(rename = "sub")]
    SubOnly,
    #[serde(rename = "both")]
    Both,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Task::AddOnly),
            "sub" => Ok(Task::SubOnly),
            "both" => Ok(Task::Both),
            _ => Err(Error::Config(format!("unknown task '{s}' (add, sub, both)"))),
        }
    }

    fn allows(self, op: Op) -> bool {
        match self {
            Task::AddOnly => op == Op::Add,
            Task::SubOnly => op == Op::Sub,
            Task::Both => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub columns: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_digit: u8,
    pub task: Task,
    pub seed: u64,
    pub reward: RewardConfig,
    /// Stop (without failure) after this many completed operations.
    #[serde(default)]
    pub max_operations: Option<u64>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            columns: 10,
            min_len: 1,
            max_len: 6,
            max_digit: BASE - 1,
            task: Task::Both,
            seed: 0,
            reward: RewardConfig::default(),
            max_operations: None,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.columns == 0 {
            return Err(Error::NoColumns);
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "operand length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > self.columns {
            return Err(Error::Config(format!(
                "operands of {} digits do not fit in {} columns",
                self.max_len, self.columns
            )));
        }
        if self.max_digit == 0 || self.max_digit >= BASE {
            return Err(Error::Config(format!("max digit {} outside 1..=4", self.max_digit)));
        }
        Ok(())
    }

    /// Budget cap: 3·C + 2 steps (32 for ten columns). The budget refills on
    /// every correct write and every correct submit; zero digits produce no
    /// write, so a run of them would otherwise starve the solver.
    pub fn budget_cap(&self) -> u32 {
        budget_cap(self.columns)
    }
}

pub fn budget_cap(columns: usize) -> u32 {
    3 * columns as u32 + 2
}

/// Operand digits, least significant first, with a nonzero leading digit.
pub fn sample_operand<R: Rng>(rng: &mut R, cfg: &EpisodeConfig) -> Vec<u8> {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut digits: Vec<u8> = (0..len).map(|_| rng.random_range(0..=cfg.max_digit)).collect();
    digits[len - 1] = rng.random_range(1..=cfg.max_digit);
    digits
}

/// Picks the next operation so that the running value stays in `[0, 5^C)`.
pub fn sample_operation<R: Rng>(rng: &mut R, current: &BigUint, cfg: &EpisodeConfig) -> Result<Operation> {
    sample_operation_for(rng, current, cfg, cfg.task)
}

fn sample_operation_for<R: Rng>(rng: &mut R, current: &BigUint, cfg: &EpisodeConfig, task: Task) -> Result<Operation> {
    let capacity = BigUint::from(BASE as u32).pow(cfg.columns as u32);
    let first = match task {
        Task::AddOnly => Op::Add,
        Task::SubOnly => Op::Sub,
        Task::Both => {
            if rng.random_bool(0.5) {
                Op::Add
            } else {
                Op::Sub
            }
        }
    };
    let fits = |op: Op, digits: &[u8]| {
        let b = crate::abacus::digits_to_value(digits);
        match op {
            Op::Add => current + b < capacity,
            Op::Sub => &b <= current,
        }
    };
    let other = match first {
        Op::Add => Op::Sub,
        Op::Sub => Op::Add,
    };
    for op in [first, other] {
        if !task.allows(op) {
            continue;
        }
        for _ in 0..RESAMPLE_TRIES {
            let digits = sample_operand(rng, cfg);
            if fits(op, &digits) {
                return Ok(Operation::new(op, digits));
            }
        }
    }
    Err(Error::Unsatisfiable)
}

/// `running ± digit·5^position`.
pub fn expected_partial(running: &BigUint, op: Op, digit: u8, position: usize) -> Result<BigUint> {
    let delta = BigUint::from(digit as u32) * BigUint::from(BASE as u32).pow(position as u32);
    match op {
        Op::Add => Ok(running + delta),
        Op::Sub if &delta <= running => Ok(running - delta),
        Op::Sub => Err(Error::NegativeResult),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    WrongSignpost,
    WrongMoveSlide,
    WrongSubmit,
    BudgetExhausted,
    /// The next result cannot be represented on the board.
    Capacity,
    /// Scripted operations or the operation limit ran out.
    Completed,
}

impl TerminationCause {
    pub fn is_failure(self) -> bool {
        matches!(
            self,
            TerminationCause::WrongSignpost
                | TerminationCause::WrongMoveSlide
                | TerminationCause::WrongSubmit
                | TerminationCause::BudgetExhausted
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminationCause::WrongSignpost => "wrong_signpost",
            TerminationCause::WrongMoveSlide => "wrong_move_slide",
            TerminationCause::WrongSubmit => "wrong_submit",
            TerminationCause::BudgetExhausted => "budget_exhausted",
            TerminationCause::Capacity => "capacity",
            TerminationCause::Completed => "completed",
        }
    }
}

/// Per-component reward for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step: f64,
    pub shaping: f64,
    pub signpost: f64,
    pub moveslide: f64,
    pub submit: f64,
    pub fail: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.step + self.shaping + self.signpost + self.moveslide + self.submit + self.fail
    }

    pub fn add(&mut self, o: &RewardBreakdown) {
        self.step += o.step;
        self.shaping += o.shaping;
        self.signpost += o.signpost;
        self.moveslide += o.moveslide;
        self.submit += o.submit;
        self.fail += o.fail;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub remaining: u32,
    pub cap: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub breakdown: RewardBreakdown,
    /// Oracle phase before the action was applied.
    pub phase: Option<Phase>,
    pub prescribed: Option<OracleStep>,
    pub symbol_index: usize,
    pub operations_completed: u64,
    pub budget_remaining: u32,
    pub cause: Option<TerminationCause>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: ObservationStack,
    pub symbol: SymbolInput,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One JSON-lines trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: u64,
    pub symbol: String,
    pub action: String,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub done: bool,
    pub cause: Option<TerminationCause>,
    pub state: Snapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

pub struct AbacusEnv {
    cfg: EpisodeConfig,
    rng: ChaCha8Rng,
    state: AbacusState,
    stack: ObservationStack,
    script: Option<VecDeque<Operation>>,
    operation: Option<Operation>,
    /// 0 is the operation symbol, `i + 1` is digit `i`.
    symbol_index: usize,
    /// Value before the current operation.
    running: BigUint,
    ctx: EpisodeContext,
    budget: Budget,
    done: bool,
    cause: Option<TerminationCause>,
    ops_completed: u64,
    t: u64,
}

impl AbacusEnv {
    pub fn new(cfg: EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        let state = AbacusState::new(cfg.columns)?;
        let cap = cfg.budget_cap();
        Ok(AbacusEnv {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stack: ObservationStack::new(state.observe()),
            state,
            script: None,
            operation: None,
            symbol_index: 0,
            running: BigUint::zero(),
            ctx: EpisodeContext {
                symbol: Symbol::Op(Op::Add),
                op: Op::Add,
                position: 0,
                expected: BigUint::zero(),
            },
            budget: Budget { remaining: cap, cap },
            done: true,
            cause: None,
            ops_completed: 0,
            t: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    /// Starts a fresh episode with sampled operations. The random stream
    /// continues across resets.
    pub fn reset(&mut self) -> StepResult {
        self.script = None;
        self.begin();
        let first = sample_operation_for(&mut self.rng, &BigUint::zero(), &self.cfg, Task::AddOnly)
            .expect("an operand always fits on an empty abacus");
        self.start_operation(first);
        self.initial_result()
    }

    /// Starts a fresh episode that plays exactly `ops` and then completes.
    pub fn reset_scripted(&mut self, ops: Vec<Operation>) -> Result<StepResult> {
        let mut v = BigUint::zero();
        for (i, op) in ops.iter().enumerate() {
            if op.digits.is_empty() || op.digits.iter().any(|d| *d >= BASE) {
                return Err(Error::Config(format!("operation {i} is malformed")));
            }
            if i == 0 && op.op != Op::Add {
                return Err(Error::Config("the first operation must be an addition".into()));
            }
            v = op.apply(&v)?;
        }
        let mut ops: VecDeque<Operation> = ops.into();
        let first = ops.pop_front().ok_or_else(|| Error::Config("empty operation script".into()))?;
        self.script = Some(ops);
        self.begin();
        self.start_operation(first);
        Ok(self.initial_result())
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn begin(&mut self) {
        self.state = AbacusState::new(self.cfg.columns).expect("validated");
        self.stack = ObservationStack::new(self.state.observe());
        self.running = BigUint::zero();
        self.budget.remaining = self.budget.cap;
        self.done = false;
        self.cause = None;
        self.ops_completed = 0;
        self.t = 0;
    }

    fn initial_result(&self) -> StepResult {
        StepResult {
            observation: self.stack.clone(),
            symbol: self.symbol_input(),
            reward: 0.0,
            done: false,
            info: StepInfo {
                breakdown: RewardBreakdown::default(),
                phase: None,
                prescribed: None,
                symbol_index: self.symbol_index,
                operations_completed: 0,
                budget_remaining: self.budget.remaining,
                cause: None,
            },
        }
    }

    fn start_operation(&mut self, op: Operation) {
        self.ctx = EpisodeContext {
            symbol: Symbol::Op(op.op),
            op: op.op,
            position: 0,
            expected: self.running.clone(),
        };
        self.operation = Some(op);
        self.symbol_index = 0;
    }

    /// Moves to the next symbol after a correct submit.
    fn advance_symbol(&mut self) {
        let op = self.operation.as_ref().expect("operation in progress");
        let next = self.symbol_index + 1;
        if next <= op.digits.len() {
            let p = next - 1;
            let digit = op.digits[p];
            let expected = expected_partial(&self.ctx.expected, op.op, digit, p).expect("sampler keeps partial results non-negative");
            self.ctx = EpisodeContext {
                symbol: Symbol::Digit(digit),
                op: op.op,
                position: p,
                expected,
            };
            self.symbol_index = next;
            return;
        }

        self.ops_completed += 1;
        self.running = self.ctx.expected.clone();
        self.operation = None;
        if self.cfg.max_operations.is_some_and(|m| self.ops_completed >= m) {
            self.finish(TerminationCause::Completed);
            return;
        }
        let next_op = match self.script.as_mut() {
            Some(script) => match script.pop_front() {
                Some(op) => Ok(op),
                None => {
                    self.finish(TerminationCause::Completed);
                    return;
                }
            },
            None => sample_operation(&mut self.rng, &self.running, &self.cfg),
        };
        match next_op {
            Ok(op) => self.start_operation(op),
            Err(_) => self.finish(TerminationCause::Capacity),
        }
    }

    fn finish(&mut self, cause: TerminationCause) {
        self.done = true;
        self.cause = Some(cause);
    }

    pub fn step(&mut self, a: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if !self.state.legal_mask().allows(a) {
            return Err(Error::IllegalAction(a));
        }
        let rc = self.cfg.reward;
        let presc = self.prescription()?;
        let before = self.state.clone();
        self.state.apply(a)?;
        self.t += 1;

        let mut br = RewardBreakdown {
            step: rc.step_penalty,
            ..Default::default()
        };
        let mut fail = None;
        let mut replenish = false;
        match a {
            Action::FingerLeft | Action::FingerRight | Action::FingerUp | Action::FingerDown => {
                if rc.enable_of {
                    br.shaping = oracle::shaping_delta(&before, &self.state, &presc, rc.shaping_reward);
                }
            }
            Action::SignpostLeft | Action::SignpostRight => {
                if rc.enable_sp {
                    if a == presc.action {
                        br.signpost = rc.signpost_reward;
                    } else {
                        fail = Some(TerminationCause::WrongSignpost);
                    }
                }
            }
            Action::MoveSlide => {
                if a == presc.action {
                    br.moveslide = rc.moveslide_reward;
                    replenish = true;
                } else {
                    fail = Some(TerminationCause::WrongMoveSlide);
                }
            }
            Action::Submit => {
                if presc.action == Action::Submit && self.state.value() == self.ctx.expected {
                    br.submit = rc.submit_reward;
                    replenish = true;
                    self.advance_symbol();
                } else {
                    fail = Some(TerminationCause::WrongSubmit);
                }
            }
        }

        if let Some(cause) = fail {
            br.fail = rc.fail_penalty;
            self.finish(cause);
        }
        self.budget.remaining -= 1;
        if replenish {
            self.budget.remaining = self.budget.cap;
        }
        if !self.done && self.budget.remaining == 0 {
            self.finish(TerminationCause::BudgetExhausted);
        }
        if !self.done {
            if let Err(Error::Capacity(_)) = self.prescription() {
                self.finish(TerminationCause::Capacity);
            }
        }

        self.stack.push(self.state.observe());
        let reward = br.total();
        Ok(StepResult {
            observation: self.stack.clone(),
            symbol: self.symbol_input(),
            reward,
            done: self.done,
            info: StepInfo {
                breakdown: br,
                phase: Some(presc.phase),
                prescribed: Some(presc),
                symbol_index: self.symbol_index,
                operations_completed: self.ops_completed,
                budget_remaining: self.budget.remaining,
                cause: self.cause,
            },
        })
    }

    pub fn prescription(&self) -> Result<OracleStep> {
        oracle::prescription(&self.state, &self.ctx)
    }

    pub fn mask(&self) -> ActionMask {
        self.state.legal_mask()
    }

    pub fn symbol_input(&self) -> SymbolInput {
        SymbolInput::new(self.ctx.symbol, self.ctx.op)
    }

    pub fn observation(&self) -> &ObservationStack {
        &self.stack
    }

    pub fn state(&self) -> &AbacusState {
        &self.state
    }

    pub fn context(&self) -> &EpisodeContext {
        &self.ctx
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn cause(&self) -> Option<TerminationCause> {
        self.cause
    }

    /// Value before the operation currently being processed.
    pub fn running_value(&self) -> &BigUint {
        &self.running
    }

    pub fn current_operation(&self) -> Option<&Operation> {
        self.operation.as_ref()
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn operations_completed(&self) -> u64 {
        self.ops_completed
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn current_symbol(&self) -> Symbol {
        self.ctx.symbol
    }

    /// Builds the trace record for a step that has just been taken. The
    /// symbol is the one the action responded to.
    pub fn trace_step(&self, res: &StepResult, action: Action) -> TraceStep {
        TraceStep {
            t: self.t,
            symbol: String::new(),
            action: action.name().to_string(),
            reward: res.reward,
            breakdown: res.info.breakdown,
            done: res.done,
            cause: res.info.cause,
            state: self.state.snapshot(),
            phase: res.info.phase,
        }
    }
}

/// Convenience wrapper that records the symbol shown before each step.
pub fn step_traced(env: &mut AbacusEnv, a: Action) -> Result<(StepResult, TraceStep)> {
    let symbol = env.current_symbol().to_string();
    let res = env.step(a)?;
    let mut tr = env.trace_step(&res, a);
    tr.symbol = symbol;
    Ok((res, tr))
}
