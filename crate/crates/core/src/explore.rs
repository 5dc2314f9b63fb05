//! Bounded exhaustive exploration of either machine's global transition
//! relation, with canonical deduplication, plus the decision procedures
//! built on top: reachable safety, outcome-set comparison, and the
//! step-by-step simulation check between the two machines.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::hash::Hash;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{RuleKind, SbGlobal, VmGlobal};
use crate::coupling;
use crate::invariants::{self, InvariantFailure};
use crate::mem::{Address, EvalError, Value};
use crate::sb;
use crate::vm::{self, SafetyViolation};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExploreError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("state cap of {cap} states exceeded; program too large for exhaustive exploration")]
    StateExplosion { cap: usize },
}

/// Exploration parameters. Depth is counted in global steps.
#[derive(Debug, Clone, Serialize)]
pub struct ExploreOpts {
    pub max_depth: u32,
    pub state_cap: usize,
    pub workers: usize,
    /// Shuffles per-level expansion order for stress runs; `None` keeps the
    /// canonical deterministic order.
    pub seed: Option<u64>,
}

impl Default for ExploreOpts {
    fn default() -> ExploreOpts {
        ExploreOpts {
            max_depth: 200,
            state_cap: 2_000_000,
            workers: 1,
            seed: None,
        }
    }
}

/// A transition system explorable state by state.
pub trait Machine: Clone + Eq + Hash + Send + Sync {
    fn successors(&self) -> Result<Vec<(usize, RuleKind, Self)>, EvalError>;
    fn is_terminal(&self) -> bool;
}

impl Machine for VmGlobal {
    fn successors(&self) -> Result<Vec<(usize, RuleKind, Self)>, EvalError> {
        let mut out = Vec::new();
        for i in 0..self.threads.len() {
            out.extend(
                vm::step_global(self, i)?
                    .into_iter()
                    .map(|(rule, g)| (i, rule, g)),
            );
        }
        Ok(out)
    }

    fn is_terminal(&self) -> bool {
        VmGlobal::is_terminal(self)
    }
}

impl Machine for SbGlobal {
    fn successors(&self) -> Result<Vec<(usize, RuleKind, Self)>, EvalError> {
        let mut out = Vec::new();
        for i in 0..self.threads.len() {
            out.extend(
                sb::step_global(self, i)?
                    .into_iter()
                    .map(|(rule, g)| (i, rule, g)),
            );
        }
        Ok(out)
    }

    fn is_terminal(&self) -> bool {
        SbGlobal::is_terminal(self)
    }
}

/// One labeled transition in the deduplicated graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub from: usize,
    pub thread: usize,
    pub rule: RuleKind,
    pub to: usize,
}

/// Deduplicated state store with breadth-first discovery order.
#[derive(Debug)]
pub struct Store<G> {
    states: Vec<Arc<G>>,
    index: HashMap<Arc<G>, usize>,
    parent: Vec<Option<(usize, usize, RuleKind)>>,
    depth: Vec<u32>,
}

impl<G: Machine> Store<G> {
    fn new(init: G) -> Store<G> {
        let arc = Arc::new(init);
        Store {
            states: vec![arc.clone()],
            index: HashMap::from([(arc, 0)]),
            parent: vec![None],
            depth: vec![0],
        }
    }

    fn insert(&mut self, g: G, parent: (usize, usize, RuleKind), depth: u32) -> (usize, bool) {
        if let Some(&id) = self.index.get(&g) {
            return (id, false);
        }
        let arc = Arc::new(g);
        let id = self.states.len();
        self.states.push(arc.clone());
        self.index.insert(arc, id);
        self.parent.push(Some(parent));
        self.depth.push(depth);
        (id, true)
    }

    pub fn get(&self, id: usize) -> &G {
        &self.states[id]
    }

    pub fn id_of(&self, g: &G) -> Option<usize> {
        self.index.get(g).copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn depth_of(&self, id: usize) -> u32 {
        self.depth[id]
    }

    /// Path of `(thread, rule)` labels from the initial state to `id`.
    pub fn trace_to(&self, id: usize) -> Vec<(usize, RuleKind)> {
        let mut steps = Vec::new();
        let mut cur = id;
        while let Some((from, thread, rule)) = self.parent[cur] {
            steps.push((thread, rule));
            cur = from;
        }
        steps.reverse();
        steps
    }
}

/// Breadth-first closure of the transition relation up to a depth bound.
#[derive(Debug)]
pub struct StateGraph<G> {
    pub store: Store<G>,
    pub edges: Vec<Edge>,
    pub bound_exceeded: bool,
}

impl<G: Machine> StateGraph<G> {
    pub fn terminal_ids(&self) -> Vec<usize> {
        (0..self.store.len())
            .filter(|id| self.store.get(*id).is_terminal())
            .collect()
    }
}

fn expand_frontier<G: Machine>(
    store: &Store<G>,
    frontier: &[usize],
    workers: usize,
) -> Result<Vec<Vec<(usize, RuleKind, G)>>, EvalError> {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("rayon pool");
        return pool.install(|| {
            frontier
                .par_iter()
                .map(|id| store.get(*id).successors())
                .collect::<Result<Vec<_>, _>>()
        });
    }
    let _ = workers;
    frontier
        .iter()
        .map(|id| store.get(*id).successors())
        .collect()
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Explores from `init`. Successors of a level are merged in frontier order
/// then successor order, so the resulting graph is identical for any worker
/// count; a seed only permutes discovery order, never the reachable set.
pub fn explore<G: Machine>(init: G, opts: &ExploreOpts) -> Result<StateGraph<G>, ExploreError> {
    let mut rng = opts.seed.map(ChaCha8Rng::seed_from_u64);
    let mut store = Store::new(init);
    let mut edges = Vec::new();
    let mut frontier = vec![0usize];
    let mut depth = 0u32;
    let mut bound_exceeded = false;

    while !frontier.is_empty() {
        if depth >= opts.max_depth {
            // probe whether the cut actually hides unseen states
            for batch in expand_frontier(&store, &frontier, opts.workers)? {
                if batch.iter().any(|(_, _, g)| store.id_of(g).is_none()) {
                    bound_exceeded = true;
                    break;
                }
            }
            break;
        }
        if let Some(rng) = rng.as_mut() {
            shuffle(&mut frontier, rng);
        }
        let batches = expand_frontier(&store, &frontier, opts.workers)?;
        let mut next = Vec::new();
        for (slot, batch) in batches.into_iter().enumerate() {
            let from = frontier[slot];
            for (thread, rule, succ) in batch {
                let (to, fresh) = store.insert(succ, (from, thread, rule), depth + 1);
                edges.push(Edge {
                    from,
                    thread,
                    rule,
                    to,
                });
                if fresh {
                    next.push(to);
                }
            }
            if store.len() > opts.state_cap {
                return Err(ExploreError::StateExplosion {
                    cap: opts.state_cap,
                });
            }
        }
        frontier = next;
        depth += 1;
    }

    Ok(StateGraph {
        store,
        edges,
        bound_exceeded,
    })
}

/// Final memory restricted to the declared observable addresses.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Outcome(pub BTreeMap<Address, Value>);

impl Outcome {
    pub fn of<B>(g: &crate::config::Global<B>, observables: &BTreeSet<Address>) -> Outcome {
        Outcome(
            observables
                .iter()
                .map(|a| (*a, g.mem.get(*a)))
                .collect(),
        )
    }
}

/// Outcome histogram: each terminal state contributes one count.
pub fn outcomes<G: Machine>(
    graph: &StateGraph<G>,
    observe: impl Fn(&G) -> Outcome,
) -> BTreeMap<Outcome, usize> {
    let mut hist = BTreeMap::new();
    for id in graph.terminal_ids() {
        *hist.entry(observe(graph.store.get(id))).or_insert(0) += 1;
    }
    hist
}

/// Result of checking safety over all reachable virtual machine states.
pub struct SafeReach {
    pub graph: StateGraph<VmGlobal>,
    pub violation: Option<(usize, SafetyViolation)>,
    pub states_checked: usize,
}

impl SafeReach {
    pub fn is_safe(&self) -> bool {
        self.violation.is_none()
    }

    pub fn witness_trace(&self) -> Option<Vec<(usize, RuleKind)>> {
        self.violation
            .as_ref()
            .map(|(id, _)| self.graph.store.trace_to(*id))
    }
}

/// Explores the virtual machine and checks the safety judgment on every
/// reachable state. The first unsafe state (in breadth-first order) becomes
/// the witness; exploration still completes so state counts stay meaningful.
pub fn safe_reach(init: VmGlobal, opts: &ExploreOpts) -> Result<SafeReach, ExploreError> {
    let graph = explore(init, opts)?;
    let states_checked = graph.store.len();
    let mut violation = None;
    for id in 0..graph.store.len() {
        if let Err(v) = vm::safe_config(graph.store.get(id)) {
            violation = Some((id, v));
            break;
        }
    }
    Ok(SafeReach {
        graph,
        violation,
        states_checked,
    })
}

/// Sequential-consistency verdict by outcome-set comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "verdict")]
pub enum ScVerdict {
    /// Every store-buffer outcome is a virtual-machine outcome; both
    /// explorations closed.
    Sc,
    /// Some store-buffer outcome is impossible on the virtual machine.
    NotSc,
    /// A depth bound cut one of the explorations before the comparison
    /// could be decided.
    Inconclusive,
}

pub struct ScResult {
    pub verdict: ScVerdict,
    pub sb_outcomes: BTreeMap<Outcome, usize>,
    pub vm_outcomes: BTreeMap<Outcome, usize>,
    /// Outcomes reachable with store buffers but not without.
    pub sb_only: Vec<Outcome>,
    pub witness: Option<Vec<(usize, RuleKind)>>,
    pub sb_states: usize,
    pub vm_states: usize,
    pub sb_bound_exceeded: bool,
    pub vm_bound_exceeded: bool,
}

/// Compares outcome sets of the two machines from coupled initial states.
pub fn check_sc(
    sb_init: SbGlobal,
    vm_init: VmGlobal,
    observables: &BTreeSet<Address>,
    opts: &ExploreOpts,
) -> Result<ScResult, ExploreError> {
    let sb_graph = explore(sb_init, opts)?;
    let vm_graph = explore(vm_init, opts)?;
    let sb_outcomes = outcomes(&sb_graph, |g| Outcome::of(g, observables));
    let vm_outcomes = outcomes(&vm_graph, |g| Outcome::of(g, observables));

    let sb_only: Vec<Outcome> = sb_outcomes
        .keys()
        .filter(|o| !vm_outcomes.contains_key(*o))
        .cloned()
        .collect();

    let witness = sb_only.first().and_then(|extra| {
        sb_graph
            .terminal_ids()
            .into_iter()
            .find(|id| &Outcome::of(sb_graph.store.get(*id), observables) == extra)
            .map(|id| sb_graph.store.trace_to(id))
    });

    // An extra outcome is definitive only against a closed VM exploration;
    // emptiness is definitive only when the SB exploration closed too.
    let verdict = if !sb_only.is_empty() {
        if vm_graph.bound_exceeded {
            ScVerdict::Inconclusive
        } else {
            ScVerdict::NotSc
        }
    } else if sb_graph.bound_exceeded || vm_graph.bound_exceeded {
        ScVerdict::Inconclusive
    } else {
        ScVerdict::Sc
    };

    Ok(ScResult {
        verdict,
        sb_only,
        witness,
        sb_states: sb_graph.store.len(),
        vm_states: vm_graph.store.len(),
        sb_bound_exceeded: sb_graph.bound_exceeded,
        vm_bound_exceeded: vm_graph.bound_exceeded,
        sb_outcomes,
        vm_outcomes,
    })
}

/// An SB step that no bounded VM path could re-couple.
#[derive(Debug, Clone, Serialize)]
pub struct UnmatchedStep {
    pub sb_depth: u32,
    pub thread: usize,
    pub rule: RuleKind,
    /// Whether the thread-local search ran out of bound rather than states.
    pub bound_hit: bool,
}

/// Result of the step-by-step simulation check.
pub struct SimResult {
    /// Safety precondition failed; nothing else was checked.
    pub unsafe_witness: Option<(SafetyViolation, Vec<(usize, RuleKind)>)>,
    pub invariant_failures: Vec<(u32, InvariantFailure)>,
    pub unmatched: Vec<UnmatchedStep>,
    /// Local flushes (read/prog/ghost/non-volatile write exits) that needed
    /// a nonempty VM path; the simulation argument matches them with zero
    /// steps, so any entry here is a failure.
    pub nonzero_local_flush: Vec<UnmatchedStep>,
    pub pairs_explored: usize,
    pub sb_states: usize,
    pub vm_states: usize,
    pub max_match_len: u32,
    pub bound_exceeded: bool,
}

impl SimResult {
    pub fn holds(&self) -> bool {
        self.unsafe_witness.is_none()
            && self.invariant_failures.is_empty()
            && self.unmatched.is_empty()
            && self.nonzero_local_flush.is_empty()
    }
}

/// Per-state default match bound: the thread's whole buffer plus pending
/// instructions, with slack for the program step that may re-fire.
fn default_match_bound(g: &SbGlobal, thread: usize) -> u32 {
    let th = &g.threads[thread];
    (th.buffer.len() + th.instrs.len() + 2) as u32
}

/// Searches for VM states within `bound` steps of `from`, stepping only
/// `thread`, that couple with `target`. Returns matches at the minimal
/// distance, plus whether the bound cut the search.
fn match_search(
    vm_store: &mut Store<VmGlobal>,
    from: usize,
    thread: usize,
    target: &SbGlobal,
    bound: u32,
) -> Result<(Vec<usize>, u32, bool), EvalError> {
    let mut layer = vec![from];
    let mut seen: HashSet<usize> = layer.iter().copied().collect();
    for dist in 0..=bound {
        let hits: Vec<usize> = layer
            .iter()
            .copied()
            .filter(|id| coupling::couple(target, vm_store.get(*id)).is_ok())
            .collect();
        if !hits.is_empty() {
            return Ok((hits, dist, false));
        }
        if dist == bound {
            break;
        }
        let mut next = Vec::new();
        for id in layer {
            let succs = vm::step_global(vm_store.get(id), thread)?;
            for (rule, g) in succs {
                let (to, _) = vm_store.insert(g, (id, thread, rule), vm_store.depth_of(id) + 1);
                if seen.insert(to) {
                    next.push(to);
                }
            }
        }
        if next.is_empty() {
            return Ok((Vec::new(), 0, false));
        }
        layer = next;
    }
    Ok((Vec::new(), 0, true))
}

/// Checks the simulation pattern over every reachable store-buffer step:
/// from each discovered coupled pair, every SB successor must satisfy the
/// machine invariant and be re-coupled by a VM path of the stepping thread
/// within the match bound. Only pairs reachable from the initial coupled
/// pair are examined, an under-approximation of the full claim.
pub fn check_sim(
    sb_init: SbGlobal,
    vm_init: VmGlobal,
    opts: &ExploreOpts,
    match_bound: Option<u32>,
) -> Result<SimResult, ExploreError> {
    let safety = safe_reach(vm_init.clone(), opts)?;
    if let Some((id, v)) = &safety.violation {
        return Ok(SimResult {
            unsafe_witness: Some((v.clone(), safety.graph.store.trace_to(*id))),
            invariant_failures: Vec::new(),
            unmatched: Vec::new(),
            nonzero_local_flush: Vec::new(),
            pairs_explored: 0,
            sb_states: 0,
            vm_states: 0,
            max_match_len: 0,
            bound_exceeded: safety.graph.bound_exceeded,
        });
    }

    assert!(
        coupling::couple(&sb_init, &vm_init).is_ok(),
        "initial configurations must be coupled"
    );

    let mut sb_store = Store::new(sb_init);
    let mut vm_store = Store::new(vm_init);
    let mut invariant_checked: HashSet<usize> = HashSet::new();
    let mut invariant_failures = Vec::new();
    let mut unmatched = Vec::new();
    let mut nonzero_local_flush = Vec::new();
    let mut max_match_len = 0u32;
    let mut bound_exceeded = false;

    if let Err(f) = invariants::check(sb_store.get(0)) {
        invariant_failures.push((0, f));
    }
    invariant_checked.insert(0);

    let mut queue: VecDeque<(usize, usize)> = VecDeque::from([(0, 0)]);
    let mut visited: HashSet<(usize, usize)> = queue.iter().copied().collect();

    while let Some((sb_id, vm_id)) = queue.pop_front() {
        let sb_depth = sb_store.depth_of(sb_id);
        if sb_depth >= opts.max_depth {
            bound_exceeded = true;
            continue;
        }
        let succs = sb_store.get(sb_id).clone().successors()?;
        for (thread, rule, succ) in succs {
            let (succ_id, fresh) = sb_store.insert(succ, (sb_id, thread, rule), sb_depth + 1);
            if fresh && invariant_checked.insert(succ_id) {
                if let Err(f) = invariants::check(sb_store.get(succ_id)) {
                    invariant_failures.push((sb_depth + 1, f));
                }
            }

            let bound =
                match_bound.unwrap_or_else(|| default_match_bound(sb_store.get(succ_id), thread));
            let target = sb_store.get(succ_id).clone();
            let (matches, dist, cut) =
                match_search(&mut vm_store, vm_id, thread, &target, bound)?;

            if matches.is_empty() {
                unmatched.push(UnmatchedStep {
                    sb_depth,
                    thread,
                    rule,
                    bound_hit: cut,
                });
                continue;
            }
            max_match_len = max_match_len.max(dist);
            if rule.is_local_flush() && dist != 0 {
                nonzero_local_flush.push(UnmatchedStep {
                    sb_depth,
                    thread,
                    rule,
                    bound_hit: false,
                });
            }
            for w in matches {
                if visited.insert((succ_id, w)) {
                    queue.push_back((succ_id, w));
                }
            }
            if visited.len() > opts.state_cap {
                return Err(ExploreError::StateExplosion {
                    cap: opts.state_cap,
                });
            }
        }
    }

    Ok(SimResult {
        unsafe_witness: None,
        invariant_failures,
        unmatched,
        nonzero_local_flush,
        pairs_explored: visited.len(),
        sb_states: sb_store.len(),
        vm_states: vm_store.len(),
        max_match_len,
        bound_exceeded,
    })
}

/// Explores the store-buffer machine and checks the §4.5-style invariant on
/// every reachable state.
pub struct InvResult {
    pub failures: Vec<(u32, InvariantFailure)>,
    pub states: usize,
    pub bound_exceeded: bool,
    pub first_failure_trace: Option<Vec<(usize, RuleKind)>>,
}

pub fn check_inv(sb_init: SbGlobal, opts: &ExploreOpts) -> Result<InvResult, ExploreError> {
    let graph = explore(sb_init, opts)?;
    let mut failures = Vec::new();
    let mut first_failure_trace = None;
    for id in 0..graph.store.len() {
        if let Err(f) = invariants::check(graph.store.get(id)) {
            if first_failure_trace.is_none() {
                first_failure_trace = Some(graph.store.trace_to(id));
            }
            failures.push((graph.store.depth_of(id), f));
        }
    }
    Ok(InvResult {
        failures,
        states: graph.store.len(),
        bound_exceeded: graph.bound_exceeded,
        first_failure_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Global, Thread};
    use crate::mem::{GhostState, Memory, SharingMap, Temporaries};
    use crate::pimp::{AnnotationExprs, Expr, ProgramState, Stmt};

    fn single_assign_vm() -> VmGlobal {
        // [a0] := 1 with a0 owned and unshared
        let stmt = Stmt::Assign {
            volatile: false,
            target: Box::new(Expr::Const(Value(0))),
            value: Box::new(Expr::Const(Value(1))),
            ann: AnnotationExprs::empty(),
        };
        Global {
            threads: vec![Thread {
                prog: ProgramState::initial(stmt),
                instrs: Vec::new(),
                tmps: Temporaries::new(),
                buffer: (),
                ghost: GhostState::with_owned([Address(0)].into_iter().collect()),
            }],
            sharing: SharingMap::new(),
            mem: Memory::new(),
        }
    }

    #[test]
    fn single_owned_assign_explores_four_states() {
        // two program stages, one memory step, terminal
        let graph = explore(single_assign_vm(), &ExploreOpts::default()).unwrap();
        assert_eq!(graph.store.len(), 4);
        assert!(!graph.bound_exceeded);
        let terminals = graph.terminal_ids();
        assert_eq!(terminals.len(), 1);
        assert_eq!(
            graph.store.get(terminals[0]).mem.get(Address(0)),
            Value(1)
        );
    }

    #[test]
    fn explore_is_deterministic() {
        let a = explore(single_assign_vm(), &ExploreOpts::default()).unwrap();
        let b = explore(single_assign_vm(), &ExploreOpts::default()).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        assert_eq!(a.edges, b.edges);
        for id in 0..a.store.len() {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
    }

    #[test]
    fn depth_bound_marks_cut() {
        let opts = ExploreOpts {
            max_depth: 1,
            ..ExploreOpts::default()
        };
        let graph = explore(single_assign_vm(), &opts).unwrap();
        assert!(graph.bound_exceeded);
        assert!(graph.store.len() < 4);
    }

    #[test]
    fn state_cap_errors_out() {
        let opts = ExploreOpts {
            state_cap: 2,
            ..ExploreOpts::default()
        };
        let err = explore(single_assign_vm(), &opts).unwrap_err();
        assert_eq!(err, ExploreError::StateExplosion { cap: 2 });
    }

    #[test]
    fn safe_reach_accepts_owned_writes() {
        let res = safe_reach(single_assign_vm(), &ExploreOpts::default()).unwrap();
        assert!(res.is_safe());
    }

    #[test]
    fn fence_only_program_is_safe() {
        let g = Global {
            threads: vec![Thread {
                prog: ProgramState::initial(Stmt::seq(vec![Stmt::SFence, Stmt::SFence])),
                instrs: Vec::new(),
                tmps: Temporaries::new(),
                buffer: (),
                ghost: GhostState::default(),
            }],
            sharing: SharingMap::new(),
            mem: Memory::new(),
        };
        let res = safe_reach(g, &ExploreOpts::default()).unwrap();
        assert!(res.is_safe());
    }
}
