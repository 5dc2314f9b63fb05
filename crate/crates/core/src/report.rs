//! Machine-readable reports and the command runner behind the CLI and the
//! browser demo. Reports are schema-stable and, in deterministic mode,
//! byte-identical across runs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::RuleKind;
use crate::explore::{
    self, explore, ExploreError, ExploreOpts, Outcome, ScVerdict,
};
use crate::litmus::{Built, Expectation, LitmusFile, MachineSel};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes: 0 all expectations met, 1 an expectation failed,
/// 2 inconclusive (a bound was hit), 3 usage or parse error.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Outcomes,
    CheckSafety,
    CheckSc,
    CheckSim,
    CheckInv,
    All,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Outcomes => "outcomes",
            Command::CheckSafety => "check-safety",
            Command::CheckSc => "check-sc",
            Command::CheckSim => "check-sim",
            Command::CheckInv => "check-inv",
            Command::All => "all",
        }
    }

    pub fn from_str(s: &str) -> Option<Command> {
        match s {
            "outcomes" => Some(Command::Outcomes),
            "check-safety" => Some(Command::CheckSafety),
            "check-sc" => Some(Command::CheckSc),
            "check-sim" => Some(Command::CheckSim),
            "check-inv" => Some(Command::CheckInv),
            "all" => Some(Command::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOpts {
    pub machine: Option<MachineSel>,
    pub max_depth: u32,
    pub state_cap: usize,
    pub workers: usize,
    pub seed: Option<u64>,
    pub match_bound: Option<u32>,
    /// Include per-step state snapshots in witness traces.
    pub trace: bool,
    /// Record wall-clock timing; off by default so reports stay
    /// byte-identical across runs.
    pub timing: bool,
}

impl Default for RunOpts {
    fn default() -> RunOpts {
        RunOpts {
            machine: None,
            max_depth: 200,
            state_cap: 2_000_000,
            workers: 1,
            seed: None,
            match_bound: None,
            trace: false,
            timing: false,
        }
    }
}

impl RunOpts {
    fn explore_opts(&self) -> ExploreOpts {
        ExploreOpts {
            max_depth: self.max_depth,
            state_cap: self.state_cap,
            workers: self.workers,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Safe,
    Unsafe,
    Sc,
    NotSc,
    Hold,
    Fail,
    Ok,
    Failed,
    NotApplicable,
    Inconclusive,
    Error,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Verdicts {
    pub safety: Option<Verdict>,
    pub sc: Option<Verdict>,
    pub simulation: Option<Verdict>,
    pub invariants: Option<Verdict>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutcomeEntry {
    pub values: BTreeMap<String, i64>,
    pub terminal_states: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct OutcomeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sb: Option<Vec<OutcomeEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm: Option<Vec<OutcomeEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationStatus {
    Met,
    Failed,
    Inconclusive,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpectationResult {
    pub clause: String,
    pub status: ExpectationStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub thread: usize,
    pub rule: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub kind: String,
    pub detail: String,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Stats {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sb_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vm_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_match_len: Option<u32>,
    pub bound_exceeded: bool,
}

/// The versioned report emitted by every command.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub litmus: String,
    pub command: &'static str,
    pub params: RunOpts,
    pub verdicts: Verdicts,
    pub outcomes: OutcomeSection,
    pub expectations: Vec<ExpectationResult>,
    pub witnesses: Vec<Witness>,
    pub stats: Stats,
    /// Simulation checking examines pairs reachable from the initial
    /// coupled pair, an under-approximation of the full quantification.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_scope: Option<&'static str>,
    pub timing_ms: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub exit_code: i32,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

fn outcome_entries(
    built: &Built,
    hist: &BTreeMap<Outcome, usize>,
) -> Vec<OutcomeEntry> {
    hist.iter()
        .map(|(o, n)| OutcomeEntry {
            values: built.named_outcome(o),
            terminal_states: *n,
        })
        .collect()
}

fn clause_of(e: &Expectation) -> String {
    match e {
        Expectation::Allow { machine, pred } => {
            let m = machine.map(|m| format!("{} ", m.as_str())).unwrap_or_default();
            format!("allow {m}{}", pred_text(pred))
        }
        Expectation::Forbid { machine, pred } => {
            let m = machine.map(|m| format!("{} ", m.as_str())).unwrap_or_default();
            format!("forbid {m}{}", pred_text(pred))
        }
        Expectation::Safety(true) => "expect safe".into(),
        Expectation::Safety(false) => "expect unsafe".into(),
        Expectation::Sc(true) => "expect sc".into(),
        Expectation::Sc(false) => "expect not sc".into(),
        Expectation::Invariants(true) => "expect inv".into(),
        Expectation::Invariants(false) => "expect not inv".into(),
    }
}

fn pred_text(p: &crate::litmus::Pred) -> String {
    use crate::litmus::Pred;
    use crate::mem::{BinOp, UnOp};
    match p {
        Pred::Const(n) => n.to_string(),
        Pred::Var(v) => v.clone(),
        Pred::Unop(UnOp::Not, p) => format!("!{}", pred_text(p)),
        Pred::Binop(op, a, b) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Eq => "==",
                BinOp::Ne => "!=",
                BinOp::Lt => "<",
                BinOp::And => "&&",
                BinOp::Or => "||",
            };
            format!("({} {} {})", pred_text(a), sym, pred_text(b))
        }
    }
}

/// Outcome sets available to expectation evaluation, with closure flags.
struct OutcomeSets {
    sb: Option<(BTreeMap<Outcome, usize>, bool)>,
    vm: Option<(BTreeMap<Outcome, usize>, bool)>,
}

fn eval_pred_on(
    built: &Built,
    hist: &BTreeMap<Outcome, usize>,
    pred: &crate::litmus::Pred,
) -> bool {
    hist.keys().any(|o| pred.eval(&built.named_outcome(o)))
}

fn eval_expectations(
    file: &LitmusFile,
    built: &Built,
    sets: &OutcomeSets,
    verdicts: &Verdicts,
) -> Vec<ExpectationResult> {
    let mut out = Vec::new();
    for e in &file.expects {
        let status = match e {
            Expectation::Allow { machine, pred } | Expectation::Forbid { machine, pred } => {
                let want_found = matches!(e, Expectation::Allow { .. });
                let selected: Vec<&(BTreeMap<Outcome, usize>, bool)> = match machine {
                    Some(MachineSel::Sb) => sets.sb.iter().collect(),
                    Some(MachineSel::Vm) => sets.vm.iter().collect(),
                    None => sets.sb.iter().chain(sets.vm.iter()).collect(),
                };
                if selected.is_empty() {
                    ExpectationStatus::Skipped
                } else {
                    let mut status = ExpectationStatus::Met;
                    for (hist, complete) in selected {
                        let found = eval_pred_on(built, hist, pred);
                        let this = match (want_found, found, *complete) {
                            (true, true, _) => ExpectationStatus::Met,
                            (true, false, true) => ExpectationStatus::Failed,
                            (true, false, false) => ExpectationStatus::Inconclusive,
                            (false, true, _) => ExpectationStatus::Failed,
                            (false, false, true) => ExpectationStatus::Met,
                            (false, false, false) => ExpectationStatus::Inconclusive,
                        };
                        status = worst(status, this);
                    }
                    status
                }
            }
            Expectation::Safety(expected) => verdict_status(
                verdicts.safety,
                if *expected { Verdict::Safe } else { Verdict::Unsafe },
            ),
            Expectation::Sc(expected) => verdict_status(
                verdicts.sc,
                if *expected { Verdict::Sc } else { Verdict::NotSc },
            ),
            Expectation::Invariants(expected) => verdict_status(
                verdicts.invariants,
                if *expected { Verdict::Hold } else { Verdict::Fail },
            ),
        };
        out.push(ExpectationResult {
            clause: clause_of(e),
            status,
        });
    }
    out
}

fn worst(a: ExpectationStatus, b: ExpectationStatus) -> ExpectationStatus {
    use ExpectationStatus::*;
    match (a, b) {
        (Failed, _) | (_, Failed) => Failed,
        (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
        _ => Met,
    }
}

fn verdict_status(actual: Option<Verdict>, expected: Verdict) -> ExpectationStatus {
    match actual {
        None => ExpectationStatus::Skipped,
        Some(Verdict::Inconclusive) => ExpectationStatus::Inconclusive,
        Some(v) if v == expected => ExpectationStatus::Met,
        Some(_) => ExpectationStatus::Failed,
    }
}

fn trace_steps_sb(
    built: &Built,
    steps: &[(usize, RuleKind)],
    snapshots: bool,
) -> Vec<TraceStep> {
    let mut out = Vec::new();
    let mut cur = built.sb_init.clone();
    for (thread, rule) in steps {
        let state = if snapshots {
            let succ = crate::sb::step_global(&cur, *thread)
                .ok()
                .and_then(|ss| ss.into_iter().find(|(r, _)| r == rule).map(|(_, g)| g));
            if let Some(g) = succ {
                cur = g;
                serde_json::to_value(&cur).ok()
            } else {
                None
            }
        } else {
            None
        };
        out.push(TraceStep {
            thread: *thread,
            rule: rule.as_str(),
            state,
        });
    }
    out
}

fn trace_steps_vm(
    built: &Built,
    steps: &[(usize, RuleKind)],
    snapshots: bool,
) -> Vec<TraceStep> {
    let mut out = Vec::new();
    let mut cur = built.vm_init.clone();
    for (thread, rule) in steps {
        let state = if snapshots {
            let succ = crate::vm::step_global(&cur, *thread)
                .ok()
                .and_then(|ss| ss.into_iter().find(|(r, _)| r == rule).map(|(_, g)| g));
            if let Some(g) = succ {
                cur = g;
                serde_json::to_value(&cur).ok()
            } else {
                None
            }
        } else {
            None
        };
        out.push(TraceStep {
            thread: *thread,
            rule: rule.as_str(),
            state,
        });
    }
    out
}

/// Runs a command against a parsed litmus file.
pub fn run(file: &LitmusFile, command: Command, opts: &RunOpts) -> Report {
    let started = std::time::Instant::now();
    let built = file.build();
    let eopts = opts.explore_opts();

    let mut verdicts = Verdicts::default();
    let mut outcomes_section = OutcomeSection::default();
    let mut witnesses = Vec::new();
    let mut stats = Stats::default();
    let mut sets = OutcomeSets { sb: None, vm: None };
    let mut error: Option<String> = None;
    let mut sim_scope = None;

    let want = |c: Command| command == c || command == Command::All;

    let run_outcomes = want(Command::Outcomes) || want(Command::CheckSc);
    let machines: Vec<MachineSel> = if command == Command::Outcomes {
        match opts.machine {
            Some(m) => vec![m],
            None => vec![MachineSel::Sb],
        }
    } else if run_outcomes {
        vec![MachineSel::Sb, MachineSel::Vm]
    } else {
        Vec::new()
    };

    let fail_with = |error: &mut Option<String>, e: ExploreError| {
        *error = Some(e.to_string());
    };

    // outcome enumeration
    for m in machines {
        match m {
            MachineSel::Sb => match explore(built.sb_init.clone(), &eopts) {
                Ok(graph) => {
                    let hist = explore::outcomes(&graph, |g| Outcome::of(g, &built.observables));
                    stats.sb_states = Some(graph.store.len());
                    stats.bound_exceeded |= graph.bound_exceeded;
                    outcomes_section.sb = Some(outcome_entries(&built, &hist));
                    sets.sb = Some((hist, !graph.bound_exceeded));
                }
                Err(e) => fail_with(&mut error, e),
            },
            MachineSel::Vm => match explore(built.vm_init.clone(), &eopts) {
                Ok(graph) => {
                    let hist = explore::outcomes(&graph, |g| Outcome::of(g, &built.observables));
                    stats.vm_states = Some(graph.store.len());
                    stats.bound_exceeded |= graph.bound_exceeded;
                    outcomes_section.vm = Some(outcome_entries(&built, &hist));
                    sets.vm = Some((hist, !graph.bound_exceeded));
                }
                Err(e) => fail_with(&mut error, e),
            },
        }
    }

    // safety
    if want(Command::CheckSafety) || want(Command::CheckSim) {
        match explore::safe_reach(built.vm_init.clone(), &eopts) {
            Ok(res) => {
                stats.vm_states.get_or_insert(res.states_checked);
                verdicts.safety = Some(match (&res.violation, res.graph.bound_exceeded) {
                    (Some(_), _) => Verdict::Unsafe,
                    (None, true) => Verdict::Inconclusive,
                    (None, false) => Verdict::Safe,
                });
                stats.bound_exceeded |= res.graph.bound_exceeded;
                if let Some((id, v)) = &res.violation {
                    witnesses.push(Witness {
                        kind: "safety-violation".into(),
                        detail: format!("thread {}: {}", v.thread, v.violation),
                        trace: trace_steps_vm(&built, &res.graph.store.trace_to(*id), opts.trace),
                    });
                }
            }
            Err(e) => {
                verdicts.safety = Some(Verdict::Error);
                fail_with(&mut error, e);
            }
        }
    }

    // sequential consistency
    if want(Command::CheckSc) {
        match explore::check_sc(
            built.sb_init.clone(),
            built.vm_init.clone(),
            &built.observables,
            &eopts,
        ) {
            Ok(res) => {
                verdicts.sc = Some(match res.verdict {
                    ScVerdict::Sc => Verdict::Sc,
                    ScVerdict::NotSc => Verdict::NotSc,
                    ScVerdict::Inconclusive => Verdict::Inconclusive,
                });
                if let (Some(extra), Some(steps)) = (res.sb_only.first(), &res.witness) {
                    witnesses.push(Witness {
                        kind: "sb-only-outcome".into(),
                        detail: format!(
                            "outcome {:?} unreachable without store buffers",
                            built.named_outcome(extra)
                        ),
                        trace: trace_steps_sb(&built, steps, opts.trace),
                    });
                }
            }
            Err(e) => {
                verdicts.sc = Some(Verdict::Error);
                fail_with(&mut error, e);
            }
        }
    }

    // invariants over reachable store-buffer states
    if want(Command::CheckInv) {
        match explore::check_inv(built.sb_init.clone(), &eopts) {
            Ok(res) => {
                stats.sb_states.get_or_insert(res.states);
                verdicts.invariants = Some(if !res.failures.is_empty() {
                    Verdict::Fail
                } else if res.bound_exceeded {
                    Verdict::Inconclusive
                } else {
                    Verdict::Hold
                });
                stats.bound_exceeded |= res.bound_exceeded;
                if let (Some((_, f)), Some(steps)) =
                    (res.failures.first(), &res.first_failure_trace)
                {
                    witnesses.push(Witness {
                        kind: "invariant-failure".into(),
                        detail: f.to_string(),
                        trace: trace_steps_sb(&built, steps, opts.trace),
                    });
                }
            }
            Err(e) => {
                verdicts.invariants = Some(Verdict::Error);
                fail_with(&mut error, e);
            }
        }
    }

    // simulation
    if want(Command::CheckSim) {
        sim_scope = Some("reachable-pairs");
        match explore::check_sim(
            built.sb_init.clone(),
            built.vm_init.clone(),
            &eopts,
            opts.match_bound,
        ) {
            Ok(res) => {
                if res.unsafe_witness.is_some() {
                    verdicts.simulation = Some(Verdict::NotApplicable);
                } else {
                    stats.sim_pairs = Some(res.pairs_explored);
                    stats.sb_states = Some(res.sb_states);
                    stats.vm_states = Some(res.vm_states);
                    stats.max_match_len = Some(res.max_match_len);
                    stats.bound_exceeded |= res.bound_exceeded;
                    for (depth, f) in res.invariant_failures.iter().take(5) {
                        witnesses.push(Witness {
                            kind: "sim-invariant-failure".into(),
                            detail: format!("at depth {depth}: {f}"),
                            trace: Vec::new(),
                        });
                    }
                    for u in res.unmatched.iter().take(5) {
                        witnesses.push(Witness {
                            kind: if u.bound_hit {
                                "sim-match-bound-exceeded".into()
                            } else {
                                "sim-unmatched-step".into()
                            },
                            detail: format!(
                                "thread {} rule {} at depth {}",
                                u.thread,
                                u.rule.as_str(),
                                u.sb_depth
                            ),
                            trace: Vec::new(),
                        });
                    }
                    for u in res.nonzero_local_flush.iter().take(5) {
                        witnesses.push(Witness {
                            kind: "sim-local-flush-needed-steps".into(),
                            detail: format!(
                                "thread {} rule {} at depth {}",
                                u.thread,
                                u.rule.as_str(),
                                u.sb_depth
                            ),
                            trace: Vec::new(),
                        });
                    }
                    let genuine_failure = !res.invariant_failures.is_empty()
                        || !res.nonzero_local_flush.is_empty()
                        || res.unmatched.iter().any(|u| !u.bound_hit);
                    let bound_issue =
                        res.bound_exceeded || res.unmatched.iter().any(|u| u.bound_hit);
                    verdicts.simulation = Some(if genuine_failure {
                        Verdict::Failed
                    } else if bound_issue {
                        Verdict::Inconclusive
                    } else {
                        Verdict::Ok
                    });
                }
            }
            Err(e) => {
                verdicts.simulation = Some(Verdict::Error);
                fail_with(&mut error, e);
            }
        }
    }

    let mut expectations = eval_expectations(file, &built, &sets, &verdicts);

    // commands carry an implicit expectation when the file states none
    let implicit = |expectations: &mut Vec<ExpectationResult>,
                    present: bool,
                    actual: Option<Verdict>,
                    expected: Verdict,
                    clause: &str| {
        if !present && actual.is_some() {
            expectations.push(ExpectationResult {
                clause: format!("{clause} (implicit)"),
                status: verdict_status(actual, expected),
            });
        }
    };
    let has_safety = file.expects.iter().any(|e| matches!(e, Expectation::Safety(_)));
    let has_sc = file.expects.iter().any(|e| matches!(e, Expectation::Sc(_)));
    let has_inv = file
        .expects
        .iter()
        .any(|e| matches!(e, Expectation::Invariants(_)));
    implicit(&mut expectations, has_safety, verdicts.safety, Verdict::Safe, "expect safe");
    implicit(&mut expectations, has_sc, verdicts.sc, Verdict::Sc, "expect sc");
    implicit(&mut expectations, has_inv, verdicts.invariants, Verdict::Hold, "expect inv");
    if let Some(sim) = verdicts.simulation {
        let expected_unsafe = file
            .expects
            .iter()
            .any(|e| matches!(e, Expectation::Safety(false)));
        let status = match sim {
            Verdict::Ok => ExpectationStatus::Met,
            // an expectedly-unsafe program has no simulation obligation
            Verdict::NotApplicable if expected_unsafe => ExpectationStatus::Met,
            Verdict::NotApplicable => ExpectationStatus::Failed,
            Verdict::Inconclusive => ExpectationStatus::Inconclusive,
            _ => ExpectationStatus::Failed,
        };
        expectations.push(ExpectationResult {
            clause: "simulation holds (implicit)".into(),
            status,
        });
    }

    let exit_code = if error.is_some() {
        EXIT_INCONCLUSIVE
    } else if expectations
        .iter()
        .any(|e| e.status == ExpectationStatus::Failed)
    {
        EXIT_FAILED
    } else if expectations
        .iter()
        .any(|e| e.status == ExpectationStatus::Inconclusive)
    {
        EXIT_INCONCLUSIVE
    } else {
        EXIT_OK
    };

    Report {
        schema_version: SCHEMA_VERSION,
        litmus: file.name.clone(),
        command: command.as_str(),
        params: opts.clone(),
        verdicts,
        outcomes: outcomes_section,
        expectations,
        witnesses,
        stats,
        sim_scope,
        timing_ms: opts.timing.then(|| started.elapsed().as_millis()),
        error,
        exit_code,
    }
}
