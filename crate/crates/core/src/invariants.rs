//! The reachable-state invariant of the store-buffer machine: a conjunction
//! of ownership, sharing, temporary, data-dependency, history, flush and
//! program-counter conditions. Used as a property suite over explored states
//! and as the side condition of the simulation check.
//!
//! Ownership and sharing conditions on buffered entries are judged at the
//! entry's position: the thread's ghost effects recorded earlier in the
//! buffer are replayed before the entry is inspected, since they have not
//! yet been applied to the live ghost state.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::{SbGlobal, SbThread};
use crate::coupling::{instrs, prog_instrs, read_tmps};
use crate::mem::{eval_storeop, Address, MemInstr, SharingMap, TmpId};
use crate::pimp;
use crate::sb::SbEntry;

/// The named sub-invariants of the conjunction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubInvariant {
    Ownership,
    Sharing,
    Temporaries,
    DataDependency,
    History,
    Flush,
    Valid,
}

pub const ALL_SUB_INVARIANTS: [SubInvariant; 7] = [
    SubInvariant::Ownership,
    SubInvariant::Sharing,
    SubInvariant::Temporaries,
    SubInvariant::DataDependency,
    SubInvariant::History,
    SubInvariant::Flush,
    SubInvariant::Valid,
];

/// First failed sub-invariant, the thread it failed on, and a description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantFailure {
    pub sub: SubInvariant,
    pub thread: Option<usize>,
    pub detail: String,
}

impl std::fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.thread {
            Some(i) => write!(f, "{:?} invariant failed on thread {}: {}", self.sub, i, self.detail),
            None => write!(f, "{:?} invariant failed: {}", self.sub, self.detail),
        }
    }
}

type Check = Result<(), InvariantFailure>;

fn fail(sub: SubInvariant, thread: Option<usize>, detail: impl Into<String>) -> Check {
    Err(InvariantFailure {
        sub,
        thread,
        detail: detail.into(),
    })
}

/// Ghost context replayed along a buffer: ownership and sharing as they
/// stand at a given entry position.
struct Replay {
    owned: BTreeSet<Address>,
    sharing: SharingMap,
}

impl Replay {
    fn start(th: &SbThread, sharing: &SharingMap) -> Replay {
        Replay {
            owned: th.ghost.owned.clone(),
            sharing: sharing.clone(),
        }
    }

    fn apply(&mut self, entry: &SbEntry) {
        match entry {
            SbEntry::Write {
                volatile: true,
                ann,
                ..
            } => {
                self.owned = self
                    .owned
                    .union(&ann.acquire)
                    .copied()
                    .filter(|a| !ann.release.contains(a))
                    .collect();
                self.sharing = self
                    .sharing
                    .augment(&ann.release, &ann.writable)
                    .subtract(&ann.acquire, &ann.local);
            }
            SbEntry::Ghost { acquire, local } => {
                self.owned = self.owned.union(acquire).copied().collect();
                self.sharing = self.sharing.subtract(acquire, local);
            }
            _ => {}
        }
    }
}

fn ownership_inv(g: &SbGlobal) -> Check {
    let sub = SubInvariant::Ownership;
    for (i, th) in g.threads.iter().enumerate() {
        let mut ctx = Replay::start(th, &g.sharing);
        for entry in &th.buffer {
            match entry {
                SbEntry::Read {
                    volatile: false,
                    addr,
                    ..
                } => {
                    if !ctx.owned.contains(addr) && !ctx.sharing.is_read_only(*addr) {
                        return fail(
                            sub,
                            Some(i),
                            format!("outstanding non-volatile read of {addr:?} neither owned nor read-only"),
                        );
                    }
                }
                SbEntry::Write {
                    volatile: false,
                    addr,
                    ..
                } => {
                    if !ctx.owned.contains(addr) && !ctx.sharing.is_read_only(*addr) {
                        return fail(
                            sub,
                            Some(i),
                            format!("outstanding non-volatile write to {addr:?} neither owned nor read-only"),
                        );
                    }
                }
                SbEntry::Write {
                    volatile: true,
                    addr,
                    ..
                } => {
                    for (j, other) in g.threads.iter().enumerate() {
                        if j != i && other.ghost.owned.contains(addr) {
                            return fail(
                                sub,
                                Some(i),
                                format!("outstanding volatile write to {addr:?} owned by thread {j}"),
                            );
                        }
                    }
                }
                _ => {}
            }
            // accesses to read-only memory must be unowned by everyone
            if let Some(a) = entry.addr() {
                if ctx.sharing.is_read_only(a)
                    && g.threads.iter().any(|t| t.ghost.owned.contains(&a))
                {
                    return fail(
                        sub,
                        Some(i),
                        format!("outstanding access to read-only {a:?} which is owned"),
                    );
                }
            }
            ctx.apply(entry);
        }
    }
    for i in 0..g.threads.len() {
        for j in (i + 1)..g.threads.len() {
            if let Some(a) = g.threads[i]
                .ghost
                .owned
                .intersection(&g.threads[j].ghost.owned)
                .next()
            {
                return fail(
                    sub,
                    Some(j),
                    format!("threads {i} and {j} both own {a:?}"),
                );
            }
        }
    }
    Ok(())
}

fn sharing_inv(g: &SbGlobal) -> Check {
    let sub = SubInvariant::Sharing;

    // every address in play is owned by someone or shared
    let mut universe: BTreeSet<Address> = g.sharing.domain().collect();
    universe.extend(g.mem.footprint().map(|(a, _)| a));
    for th in &g.threads {
        universe.extend(th.ghost.owned.iter().copied());
        universe.extend(th.buffer.iter().filter_map(SbEntry::addr));
        for instr in &th.instrs {
            if let MemInstr::Read { addr, .. }
            | MemInstr::Write { addr, .. }
            | MemInstr::Rmw { addr, .. } = instr
            {
                universe.insert(*addr);
            }
        }
    }
    for a in &universe {
        let owned = g.threads.iter().any(|t| t.ghost.owned.contains(a));
        if !owned && !g.sharing.contains(*a) {
            return fail(sub, None, format!("unowned address {a:?} is not shared"));
        }
    }

    for (i, th) in g.threads.iter().enumerate() {
        if let Some(a) = th.ghost.owned.intersection(&g.sharing.read_only()).next() {
            return fail(sub, Some(i), format!("thread {i} owns read-only {a:?}"));
        }

        let mut ctx = Replay::start(th, &g.sharing);
        for entry in &th.buffer {
            match entry {
                SbEntry::Write {
                    volatile: false,
                    addr,
                    ..
                } => {
                    if ctx.sharing.contains(*addr) {
                        return fail(
                            sub,
                            Some(i),
                            format!("outstanding non-volatile write to shared {addr:?}"),
                        );
                    }
                }
                SbEntry::Write {
                    volatile: true,
                    addr,
                    ann,
                    ..
                } => {
                    if ctx.sharing.is_read_only(*addr) {
                        return fail(
                            sub,
                            Some(i),
                            format!("outstanding write to read-only {addr:?}"),
                        );
                    }
                    // annotation consistency at the point of release
                    if !ann.release.is_subset(&ctx.owned) {
                        return fail(
                            sub,
                            Some(i),
                            "buffered write releases an address not owned at that point",
                        );
                    }
                    if ann.acquire.intersection(&ann.release).next().is_some() {
                        return fail(
                            sub,
                            Some(i),
                            "buffered write acquires and releases the same address",
                        );
                    }
                    if !ann.local.is_subset(&ann.acquire) {
                        return fail(sub, Some(i), "buffered write keeps local an unacquired address");
                    }
                }
                SbEntry::Ghost { acquire, local } => {
                    if !local.is_subset(acquire) {
                        return fail(sub, Some(i), "buffered ghost keeps local an unacquired address");
                    }
                }
                _ => {}
            }
            ctx.apply(entry);
        }
    }
    Ok(())
}

fn duplicate<T: Ord + Copy>(items: impl Iterator<Item = T>) -> Option<T> {
    let mut seen = BTreeSet::new();
    for t in items {
        if !seen.insert(t) {
            return Some(t);
        }
    }
    None
}

fn instr_read_targets(is: &[MemInstr]) -> Vec<TmpId> {
    is.iter().filter_map(MemInstr::target_tmp).collect()
}

fn temporaries_inv(g: &SbGlobal) -> Check {
    let sub = SubInvariant::Temporaries;
    for (i, th) in g.threads.iter().enumerate() {
        let pending = instr_read_targets(&th.instrs);
        if let Some(t) = duplicate(pending.iter().copied()) {
            return fail(sub, Some(i), format!("duplicate read temporary {t:?} in instructions"));
        }
        let recorded: Vec<TmpId> = th
            .buffer
            .iter()
            .filter_map(|e| match e {
                SbEntry::Read { tmp, .. } => Some(*tmp),
                _ => None,
            })
            .collect();
        if let Some(t) = duplicate(recorded.iter().copied()) {
            return fail(sub, Some(i), format!("duplicate read temporary {t:?} in buffer"));
        }
        let pending_set: BTreeSet<TmpId> = pending.iter().copied().collect();
        if let Some(t) = recorded.iter().find(|t| pending_set.contains(t)) {
            return fail(
                sub,
                Some(i),
                format!("temporary {t:?} is both pending and already recorded"),
            );
        }
        if let Some(t) = pending.iter().find(|t| th.tmps.contains(**t)) {
            return fail(sub, Some(i), format!("read temporary {t:?} is not fresh"));
        }
    }
    Ok(())
}

fn data_dependency_inv(g: &SbGlobal) -> Check {
    let sub = SubInvariant::DataDependency;
    for (i, th) in g.threads.iter().enumerate() {
        for instr in &th.instrs {
            let sops: &[&crate::mem::StoreOp] = match instr {
                MemInstr::Write { sop, .. } => &[sop],
                MemInstr::Rmw { sop, cond, .. } => &[sop, cond],
                _ => continue,
            };
            if sops.iter().any(|s| !s.is_valid()) {
                return fail(sub, Some(i), "instruction store operation escapes its domain");
            }
        }
        for e in &th.buffer {
            if let SbEntry::Write { sop, .. } = e {
                if !sop.is_valid() {
                    return fail(sub, Some(i), "buffered store operation escapes its domain");
                }
            }
        }

        // write domains may only mention previous reads
        for (k, instr) in th.instrs.iter().enumerate() {
            let domain: BTreeSet<TmpId> = match instr {
                MemInstr::Write { sop, .. } => sop.domain().clone(),
                MemInstr::Rmw { sop, cond, .. } => {
                    sop.domain().union(cond.domain()).copied().collect()
                }
                _ => continue,
            };
            let later: BTreeSet<TmpId> =
                instr_read_targets(&th.instrs[k + 1..]).into_iter().collect();
            if let Some(t) = domain.intersection(&later).next() {
                return fail(
                    sub,
                    Some(i),
                    format!("write depends on later read temporary {t:?}"),
                );
            }
        }

        let pending: BTreeSet<TmpId> = instr_read_targets(&th.instrs).into_iter().collect();
        for e in &th.buffer {
            if let SbEntry::Write { sop, .. } = e {
                if let Some(t) = sop.domain().intersection(&pending).next() {
                    return fail(
                        sub,
                        Some(i),
                        format!("buffered write depends on pending read temporary {t:?}"),
                    );
                }
            }
        }
    }
    Ok(())
}

fn history_inv(g: &SbGlobal) -> Check {
    let sub = SubInvariant::History;
    for (i, th) in g.threads.iter().enumerate() {
        let sb = &th.buffer;

        // value consistency of non-volatile reads; reads of freshly acquired
        // addresses may legitimately be stale and are skipped
        let mut acquired_before: BTreeSet<Address> = th.ghost.acquired.clone();
        for (k, entry) in sb.iter().enumerate() {
            if let SbEntry::Read {
                volatile: false,
                addr,
                val,
                ..
            } = entry
            {
                if !acquired_before.contains(addr) {
                    let expected = crate::sb::buffered_val(&sb[..k], *addr)
                        .unwrap_or_else(|| g.mem.get(*addr));
                    if expected != *val {
                        return fail(
                            sub,
                            Some(i),
                            format!(
                                "non-volatile read of {addr:?} recorded {val:?} but replays to {expected:?}"
                            ),
                        );
                    }
                }
            }
            match entry {
                SbEntry::Ghost { acquire, .. } => acquired_before.extend(acquire.iter().copied()),
                SbEntry::Write {
                    volatile: true,
                    ann,
                    ..
                } => acquired_before.extend(ann.acquire.iter().copied()),
                _ => {}
            }
        }

        // cleanliness: no volatile write in front of a volatile read, nor in
        // front of a non-volatile read of an address acquired earlier in the
        // buffer
        let mut vol_write_seen = false;
        let mut acq_in_buffer: BTreeSet<Address> = BTreeSet::new();
        for entry in sb {
            match entry {
                SbEntry::Read {
                    volatile, addr, ..
                } => {
                    let needs_clean = *volatile || acq_in_buffer.contains(addr);
                    if needs_clean && vol_write_seen {
                        return fail(
                            sub,
                            Some(i),
                            format!("read of {addr:?} recorded behind an outstanding volatile write"),
                        );
                    }
                }
                SbEntry::Write {
                    volatile: true,
                    ann,
                    ..
                } => {
                    vol_write_seen = true;
                    acq_in_buffer.extend(ann.acquire.iter().copied());
                }
                SbEntry::Ghost { acquire, .. } => {
                    acq_in_buffer.extend(acquire.iter().copied());
                }
                _ => {}
            }
        }

        // recorded reads match the temporaries
        for entry in sb {
            if let SbEntry::Read { tmp, val, .. } = entry {
                if th.tmps.get(*tmp) != Some(*val) {
                    return fail(
                        sub,
                        Some(i),
                        format!("recorded read {tmp:?}={val:?} disagrees with temporaries"),
                    );
                }
            }
        }

        // buffered writes re-evaluate to their recorded value
        for (k, entry) in sb.iter().enumerate() {
            if let SbEntry::Write { sop, val, .. } = entry {
                if !sop.domain().iter().all(|t| th.tmps.contains(*t)) {
                    return fail(sub, Some(i), "buffered write domain is unresolved");
                }
                match eval_storeop(sop, &th.tmps) {
                    Ok(v) if v == *val => {}
                    Ok(v) => {
                        return fail(
                            sub,
                            Some(i),
                            format!("buffered write recorded {val:?} but evaluates to {v:?}"),
                        )
                    }
                    Err(e) => return fail(sub, Some(i), format!("buffered write evaluation: {e}")),
                }
                let later: BTreeSet<TmpId> = read_tmps(&sb[k + 1..]);
                if let Some(t) = sop.domain().intersection(&later).next() {
                    return fail(
                        sub,
                        Some(i),
                        format!("buffered write depends on later read temporary {t:?}"),
                    );
                }
            }
        }

        // program history: chained states, replayable transitions, and the
        // thread resting at the last recorded state
        let mut last_to: Option<&crate::pimp::ProgramState> = None;
        for (k, entry) in sb.iter().enumerate() {
            if let SbEntry::Prog { from, to, issued } = entry {
                if let Some(prev) = last_to {
                    if prev != from {
                        return fail(sub, Some(i), "recorded program steps do not chain");
                    }
                }
                let theta = th.tmps.without(&read_tmps(&sb[k + 1..]));
                match pimp::step(&theta, from) {
                    Ok(succs) => {
                        if !succs.iter().any(|(p2, is2)| p2 == to && is2 == issued) {
                            return fail(
                                sub,
                                Some(i),
                                "recorded program step does not replay",
                            );
                        }
                    }
                    Err(e) => return fail(sub, Some(i), format!("program replay: {e}")),
                }
                last_to = Some(to);
            }
        }
        if let Some(prev) = last_to {
            if prev != &th.prog {
                return fail(
                    sub,
                    Some(i),
                    "thread program state differs from last recorded step",
                );
            }
        }

        // suffix equation: remaining instructions are a suffix of the
        // recorded issues
        for k in 0..=sb.len() {
            let tail = &sb[k..];
            let mut lhs = instrs(tail);
            lhs.extend(th.instrs.iter().cloned());
            let rhs_tail = prog_instrs(tail);
            if rhs_tail.len() > lhs.len() || lhs[lhs.len() - rhs_tail.len()..] != rhs_tail[..] {
                return fail(sub, Some(i), format!("suffix equation fails at position {k}"));
            }
        }
    }
    Ok(())
}

fn flush_inv(g: &SbGlobal) -> Check {
    for (i, th) in g.threads.iter().enumerate() {
        if !th.ghost.dirty && th.buffer.iter().any(SbEntry::is_volatile_write) {
            return fail(
                SubInvariant::Flush,
                Some(i),
                "dirty flag unset with an outstanding volatile write",
            );
        }
    }
    Ok(())
}

fn valid_inv(g: &SbGlobal) -> Check {
    for (i, th) in g.threads.iter().enumerate() {
        if !pimp::valid_thread(&th.prog, &th.instrs, &th.tmps, &th.buffer) {
            return fail(
                SubInvariant::Valid,
                Some(i),
                "temporary counter conditions fail",
            );
        }
    }
    Ok(())
}

/// Checks one sub-invariant in isolation.
pub fn check_sub(g: &SbGlobal, sub: SubInvariant) -> Check {
    match sub {
        SubInvariant::Ownership => ownership_inv(g),
        SubInvariant::Sharing => sharing_inv(g),
        SubInvariant::Temporaries => temporaries_inv(g),
        SubInvariant::DataDependency => data_dependency_inv(g),
        SubInvariant::History => history_inv(g),
        SubInvariant::Flush => flush_inv(g),
        SubInvariant::Valid => valid_inv(g),
    }
}

/// The full conjunction; reports the first failure.
pub fn check(g: &SbGlobal) -> Check {
    for sub in ALL_SUB_INVARIANTS {
        check_sub(g, sub)?;
    }
    Ok(())
}

/// Which sub-invariants fail on `g`, in canonical order. Mutation tests use
/// this to pin a mutation to exactly one sub-invariant.
pub fn failing_subs(g: &SbGlobal) -> Vec<SubInvariant> {
    ALL_SUB_INVARIANTS
        .into_iter()
        .filter(|sub| check_sub(g, *sub).is_err())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Global, Thread};
    use crate::mem::{GhostState, Memory, Temporaries, Value};
    use crate::pimp::{ProgramState, Stmt};

    fn addr(n: u32) -> Address {
        Address(n)
    }

    fn thread(owned: &[u32]) -> SbThread {
        Thread {
            prog: ProgramState::initial(Stmt::Skip),
            instrs: Vec::new(),
            tmps: Temporaries::new(),
            buffer: Vec::new(),
            ghost: GhostState::with_owned(owned.iter().map(|n| Address(*n)).collect()),
        }
    }

    #[test]
    fn initial_like_states_satisfy_everything() {
        let g: SbGlobal = Global {
            threads: vec![thread(&[0]), thread(&[1])],
            sharing: [(addr(2), true)].into_iter().collect(),
            mem: Memory::new(),
        };
        assert_eq!(check(&g), Ok(()));
    }

    #[test]
    fn shared_ownership_fails_ownership_only() {
        let g: SbGlobal = Global {
            threads: vec![thread(&[0]), thread(&[0])],
            sharing: SharingMap::new(),
            mem: Memory::new(),
        };
        assert_eq!(failing_subs(&g), vec![SubInvariant::Ownership]);
    }

    #[test]
    fn unshared_unowned_address_fails_sharing_only() {
        let g: SbGlobal = Global {
            threads: vec![thread(&[])],
            sharing: SharingMap::new(),
            mem: Memory::new().set(addr(3), Value(1)),
        };
        assert_eq!(failing_subs(&g), vec![SubInvariant::Sharing]);
    }

    #[test]
    fn dirty_flag_unset_with_volatile_write_fails_flush_only() {
        let mut th = thread(&[]);
        th.buffer.push(SbEntry::Write {
            volatile: true,
            addr: addr(0),
            sop: crate::mem::StoreOp::constant(Value(1)),
            val: Value(1),
            ann: Default::default(),
        });
        th.ghost.dirty = false;
        let g: SbGlobal = Global {
            threads: vec![th],
            sharing: [(addr(0), true)].into_iter().collect(),
            mem: Memory::new(),
        };
        let subs = failing_subs(&g);
        assert!(subs.contains(&SubInvariant::Flush), "{subs:?}");
    }
}
