//! The sequentially consistent virtual machine: memory steps act on memory
//! directly, and a separate safety judgment decides whether the head
//! instruction respects the ownership discipline in the current ownership
//! context. Transitions are always enabled regardless of safety; safety of
//! all reachable states is what the reduction result requires.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::config::{RuleKind, VmGlobal};
use crate::mem::{eval_storeop, Address, EvalError, MemInstr, SharingMap, Value};
use crate::pimp;

/// Memory step of thread `i` consuming its head instruction. At most one
/// successor: the rules are deterministic and RMW branches are mutually
/// exclusive on the condition.
pub fn memory_step(g: &VmGlobal, i: usize) -> Result<Vec<(RuleKind, VmGlobal)>, EvalError> {
    let th = &g.threads[i];
    let Some(head) = th.head_instr().cloned() else {
        return Ok(Vec::new());
    };
    let rest: Vec<MemInstr> = th.instrs[1..].to_vec();

    let out = match head {
        MemInstr::Read {
            addr, tmp, ..
        } => {
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.tmps = th.tmps.bind(tmp, g.mem.get(addr));
            vec![(RuleKind::MemRead, g.with_thread(i, t2))]
        }

        MemInstr::Write {
            volatile: false,
            addr,
            sop,
            ..
        } => {
            let v = eval_storeop(&sop, &th.tmps)?;
            let mut t2 = th.clone();
            t2.instrs = rest;
            let mut g2 = g.with_thread(i, t2);
            g2.mem = g2.mem.set(addr, v);
            vec![(RuleKind::MemWriteNv, g2)]
        }

        MemInstr::Write {
            volatile: true,
            addr,
            sop,
            ann,
        } => {
            let v = eval_storeop(&sop, &th.tmps)?;
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.ghost.dirty = true;
            t2.ghost.owned = union_minus(&th.ghost.owned, &ann.acquire, &ann.release);
            t2.ghost.acquired = union_minus(&th.ghost.acquired, &ann.acquire, &ann.release);
            let mut g2 = g.with_thread(i, t2);
            g2.mem = g2.mem.set(addr, v);
            g2.sharing = g2
                .sharing
                .augment(&ann.release, &ann.writable)
                .subtract(&ann.acquire, &ann.local);
            vec![(RuleKind::MemWriteVol, g2)]
        }

        MemInstr::Rmw {
            addr,
            tmp,
            sop,
            cond,
            ret,
            ann,
        } => {
            let old = g.mem.get(addr);
            let extended = th.tmps.bind(tmp, old);
            if eval_storeop(&cond, &extended)?.is_true() {
                let new = eval_storeop(&sop, &extended)?;
                let mut t2 = th.clone();
                t2.instrs = rest;
                t2.tmps = extended.bind(tmp, ret.apply(old, new));
                t2.ghost.dirty = false;
                t2.ghost.owned = union_minus(&th.ghost.owned, &ann.acquire, &ann.release);
                t2.ghost.acquired.clear();
                let mut g2 = g.with_thread(i, t2);
                g2.mem = g2.mem.set(addr, new);
                g2.sharing = g2
                    .sharing
                    .augment(&ann.release, &ann.writable)
                    .subtract(&ann.acquire, &ann.local);
                vec![(RuleKind::MemRmwOk, g2)]
            } else {
                let mut t2 = th.clone();
                t2.instrs = rest;
                t2.tmps = extended;
                t2.ghost.dirty = false;
                t2.ghost.acquired.clear();
                vec![(RuleKind::MemRmwFail, g.with_thread(i, t2))]
            }
        }

        MemInstr::Fence => {
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.ghost.dirty = false;
            t2.ghost.acquired.clear();
            vec![(RuleKind::MemFence, g.with_thread(i, t2))]
        }

        MemInstr::Ghost { acquire, local } => {
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.ghost.owned = t2.ghost.owned.union(&acquire).copied().collect();
            t2.ghost.acquired = t2.ghost.acquired.union(&acquire).copied().collect();
            let mut g2 = g.with_thread(i, t2);
            g2.sharing = g2.sharing.subtract(&acquire, &local);
            vec![(RuleKind::MemGhost, g2)]
        }
    };
    Ok(out)
}

fn union_minus(
    base: &BTreeSet<Address>,
    add: &BTreeSet<Address>,
    minus: &BTreeSet<Address>,
) -> BTreeSet<Address> {
    base.union(add)
        .copied()
        .filter(|a| !minus.contains(a))
        .collect()
}

/// Program step for thread `i`; the record slot degenerates to identity on
/// the unit buffer.
pub fn program_step(g: &VmGlobal, i: usize) -> Result<Vec<(RuleKind, VmGlobal)>, EvalError> {
    let th = &g.threads[i];
    let succs = pimp::step(&th.tmps, &th.prog)?;
    Ok(succs
        .into_iter()
        .map(|(p2, issued)| {
            let mut t2 = th.clone();
            t2.instrs.extend(issued);
            t2.prog = p2;
            (RuleKind::Program, g.with_thread(i, t2))
        })
        .collect())
}

/// All successors of thread `i`: program steps then memory steps.
pub fn step_global(g: &VmGlobal, i: usize) -> Result<Vec<(RuleKind, VmGlobal)>, EvalError> {
    let mut out = program_step(g, i)?;
    out.extend(memory_step(g, i)?);
    Ok(out)
}

/// Which conjunct of the safety judgment a configuration violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    #[error("address is neither owned, read-only, nor volatile-and-shared")]
    NotReadable,
    #[error("volatile read with a possibly outstanding volatile write")]
    DirtyVolatileRead,
    #[error("non-volatile read of a freshly acquired address without a flush")]
    DirtyFreshRead,
    #[error("non-volatile write to an address that is shared or not owned")]
    NonVolWriteSharedOrUnowned,
    #[error("volatile write to an address owned by another thread")]
    VolWriteOwnedByOther,
    #[error("volatile write to read-only memory")]
    VolWriteReadOnly,
    #[error("acquired address is owned by another thread")]
    AcquireOwnedByOther,
    #[error("acquired address is neither shared nor already owned")]
    AcquireNotShared,
    #[error("local set is not a subset of the acquired set")]
    LNotInA,
    #[error("released address is not owned")]
    RNotOwned,
    #[error("acquire and release sets overlap")]
    AIntersectsR,
    #[error("interlocked access to an address neither shared nor owned")]
    RmwAddrInvisible,
    #[error("ghost acquisition violates the ownership side conditions")]
    GhostAcquireViolation,
}

/// A failed safety check: which thread, which conjunct, on which instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SafetyViolation {
    pub thread: usize,
    pub violation: Violation,
    pub instr: MemInstr,
}

fn owned_by_other(owned_sets: &[BTreeSet<Address>], i: usize, a: Address) -> bool {
    owned_sets
        .iter()
        .enumerate()
        .any(|(j, os)| j != i && os.contains(&a))
}

fn acquire_side_conditions(
    owned_sets: &[BTreeSet<Address>],
    i: usize,
    owned: &BTreeSet<Address>,
    sharing: &SharingMap,
    acquire: &BTreeSet<Address>,
    local: &BTreeSet<Address>,
    release: &BTreeSet<Address>,
) -> Result<(), Violation> {
    if acquire
        .iter()
        .any(|a| owned_by_other(owned_sets, i, *a))
    {
        return Err(Violation::AcquireOwnedByOther);
    }
    if !acquire
        .iter()
        .all(|a| owned.contains(a) || sharing.contains(*a))
    {
        return Err(Violation::AcquireNotShared);
    }
    if !local.is_subset(acquire) {
        return Err(Violation::LNotInA);
    }
    if !release.is_subset(owned) {
        return Err(Violation::RNotOwned);
    }
    if acquire.intersection(release).next().is_some() {
        return Err(Violation::AIntersectsR);
    }
    Ok(())
}

/// The safety judgment for thread `i`'s head instruction, with `owned_sets`
/// the ownership sets of all threads (so `owned_sets[i]` must be the
/// thread's own set). Threads with no pending instruction are vacuously safe.
pub fn safe_thread(
    owned_sets: &[BTreeSet<Address>],
    i: usize,
    g: &VmGlobal,
) -> Result<(), SafetyViolation> {
    let th = &g.threads[i];
    let Some(head) = th.head_instr() else {
        return Ok(());
    };
    let ghost = &th.ghost;
    let fail = |violation| {
        Err(SafetyViolation {
            thread: i,
            violation,
            instr: head.clone(),
        })
    };

    match head {
        MemInstr::Read {
            volatile, addr, ..
        } => {
            let readable = ghost.owned.contains(addr)
                || g.sharing.is_read_only(*addr)
                || (*volatile && g.sharing.contains(*addr));
            if !readable {
                return fail(Violation::NotReadable);
            }
            if *volatile && ghost.dirty {
                return fail(Violation::DirtyVolatileRead);
            }
            if !*volatile && ghost.acquired.contains(addr) && ghost.dirty {
                return fail(Violation::DirtyFreshRead);
            }
            Ok(())
        }

        MemInstr::Write {
            volatile: false,
            addr,
            ..
        } => {
            if ghost.owned.contains(addr) && !g.sharing.contains(*addr) {
                Ok(())
            } else {
                fail(Violation::NonVolWriteSharedOrUnowned)
            }
        }

        MemInstr::Write {
            volatile: true,
            addr,
            ann,
            ..
        } => {
            if owned_by_other(owned_sets, i, *addr) {
                return fail(Violation::VolWriteOwnedByOther);
            }
            if g.sharing.is_read_only(*addr) {
                return fail(Violation::VolWriteReadOnly);
            }
            match acquire_side_conditions(
                owned_sets,
                i,
                &ghost.owned,
                &g.sharing,
                &ann.acquire,
                &ann.local,
                &ann.release,
            ) {
                Ok(()) => Ok(()),
                Err(v) => fail(v),
            }
        }

        MemInstr::Rmw {
            addr, tmp, cond, ann, ..
        } => {
            let extended = th.tmps.bind(*tmp, g.mem.get(*addr));
            let success = eval_storeop(cond, &extended)
                .map(Value::is_true)
                // An unresolved condition is a scheduling bug surfaced by the
                // step itself; treat the state as unsafe on the strict branch.
                .unwrap_or(true);
            if success {
                if owned_by_other(owned_sets, i, *addr) {
                    return fail(Violation::VolWriteOwnedByOther);
                }
                if g.sharing.is_read_only(*addr) {
                    return fail(Violation::VolWriteReadOnly);
                }
                match acquire_side_conditions(
                    owned_sets,
                    i,
                    &ghost.owned,
                    &g.sharing,
                    &ann.acquire,
                    &ann.local,
                    &ann.release,
                ) {
                    Ok(()) => Ok(()),
                    Err(v) => fail(v),
                }
            } else if g.sharing.contains(*addr) || ghost.owned.contains(addr) {
                Ok(())
            } else {
                fail(Violation::RmwAddrInvisible)
            }
        }

        MemInstr::Fence => Ok(()),

        MemInstr::Ghost { acquire, local } => {
            match acquire_side_conditions(
                owned_sets,
                i,
                &ghost.owned,
                &g.sharing,
                acquire,
                local,
                &BTreeSet::new(),
            ) {
                Ok(()) => Ok(()),
                Err(_) => fail(Violation::GhostAcquireViolation),
            }
        }
    }
}

/// Checks every thread's head instruction in `g`.
pub fn safe_config(g: &VmGlobal) -> Result<(), SafetyViolation> {
    let owned_sets: Vec<BTreeSet<Address>> =
        g.threads.iter().map(|t| t.ghost.owned.clone()).collect();
    for i in 0..g.threads.len() {
        safe_thread(&owned_sets, i, g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Global, Thread};
    use crate::mem::{
        GhostState, Memory, OwnershipAnnotation, RetSpec, StoreOp, Temporaries, TmpExpr, TmpId,
    };
    use crate::pimp::{ProgramState, Stmt};

    fn addr(n: u32) -> Address {
        Address(n)
    }

    fn aset(items: &[u32]) -> BTreeSet<Address> {
        items.iter().map(|n| Address(*n)).collect()
    }

    fn thread_with(instrs: Vec<MemInstr>, ghost: GhostState) -> Thread<()> {
        Thread {
            prog: ProgramState::initial(Stmt::Skip),
            instrs,
            tmps: Temporaries::new(),
            buffer: (),
            ghost,
        }
    }

    fn one_thread(instrs: Vec<MemInstr>, ghost: GhostState, sharing: SharingMap) -> VmGlobal {
        Global {
            threads: vec![thread_with(instrs, ghost)],
            sharing,
            mem: Memory::new(),
        }
    }

    #[test]
    fn read_binds_temporary_and_leaves_memory() {
        let mut g = one_thread(
            vec![MemInstr::Read {
                volatile: false,
                addr: addr(0),
                tmp: TmpId(0),
            }],
            GhostState::default(),
            SharingMap::new(),
        );
        g.mem = g.mem.set(addr(0), Value(3));
        let succs = memory_step(&g, 0).unwrap();
        assert_eq!(succs.len(), 1);
        let (_, g2) = &succs[0];
        assert_eq!(g2.threads[0].tmps.get(TmpId(0)), Some(Value(3)));
        assert_eq!(g2.mem, g.mem);
    }

    #[test]
    fn volatile_write_updates_memory_and_ghost() {
        let g = one_thread(
            vec![MemInstr::Write {
                volatile: true,
                addr: addr(0),
                sop: StoreOp::constant(Value(1)),
                ann: OwnershipAnnotation::empty(),
            }],
            GhostState::default(),
            SharingMap::new(),
        );
        let (kind, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(kind, RuleKind::MemWriteVol);
        assert_eq!(g2.mem.get(addr(0)), Value(1));
        assert!(g2.threads[0].ghost.dirty);
    }

    #[test]
    fn rmw_success_on_zero_writes_and_returns_old() {
        let g = one_thread(
            vec![MemInstr::Rmw {
                addr: addr(0),
                tmp: TmpId(0),
                sop: StoreOp::constant(Value(1)),
                cond: StoreOp::closed(TmpExpr::Binop(
                    crate::mem::BinOp::Eq,
                    Box::new(TmpExpr::Tmp(TmpId(0))),
                    Box::new(TmpExpr::Const(Value(0))),
                )),
                ret: RetSpec::Old,
                ann: OwnershipAnnotation::empty(),
            }],
            GhostState {
                dirty: true,
                owned: aset(&[]),
                acquired: aset(&[5]),
            },
            SharingMap::new(),
        );
        let (kind, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(kind, RuleKind::MemRmwOk);
        assert_eq!(g2.mem.get(addr(0)), Value(1));
        assert_eq!(g2.threads[0].tmps.get(TmpId(0)), Some(Value(0)));
        assert!(!g2.threads[0].ghost.dirty);
        assert!(g2.threads[0].ghost.acquired.is_empty());
    }

    #[test]
    fn rmw_failure_only_loads() {
        let mut g = one_thread(
            vec![MemInstr::Rmw {
                addr: addr(0),
                tmp: TmpId(0),
                sop: StoreOp::constant(Value(1)),
                cond: StoreOp::closed(TmpExpr::Binop(
                    crate::mem::BinOp::Eq,
                    Box::new(TmpExpr::Tmp(TmpId(0))),
                    Box::new(TmpExpr::Const(Value(0))),
                )),
                ret: RetSpec::Old,
                ann: OwnershipAnnotation::empty(),
            }],
            GhostState::default(),
            SharingMap::new(),
        );
        g.mem = g.mem.set(addr(0), Value(9));
        let (kind, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(kind, RuleKind::MemRmwFail);
        assert_eq!(g2.mem.get(addr(0)), Value(9));
        assert_eq!(g2.threads[0].tmps.get(TmpId(0)), Some(Value(9)));
    }

    #[test]
    fn ghost_is_monotone_on_owned_and_acquired() {
        let g = one_thread(
            vec![MemInstr::Ghost {
                acquire: aset(&[1]),
                local: aset(&[1]),
            }],
            GhostState {
                dirty: false,
                owned: aset(&[0]),
                acquired: aset(&[0]),
            },
            [(addr(1), true)].into_iter().collect(),
        );
        let (_, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(g2.threads[0].ghost.owned, aset(&[0, 1]));
        assert_eq!(g2.threads[0].ghost.acquired, aset(&[0, 1]));
        assert!(!g2.sharing.contains(addr(1)));
    }

    #[test]
    fn unsafe_read_of_unowned_shared_rw() {
        let g = one_thread(
            vec![MemInstr::Read {
                volatile: false,
                addr: addr(0),
                tmp: TmpId(0),
            }],
            GhostState::default(),
            [(addr(0), true)].into_iter().collect(),
        );
        let err = safe_config(&g).unwrap_err();
        assert_eq!(err.violation, Violation::NotReadable);
    }

    #[test]
    fn fence_is_always_safe() {
        let g = one_thread(vec![MemInstr::Fence], GhostState::default(), SharingMap::new());
        assert!(safe_config(&g).is_ok());
    }

    #[test]
    fn dirty_volatile_read_is_unsafe() {
        let g = one_thread(
            vec![MemInstr::Read {
                volatile: true,
                addr: addr(0),
                tmp: TmpId(0),
            }],
            GhostState {
                dirty: true,
                owned: aset(&[]),
                acquired: aset(&[]),
            },
            [(addr(0), true)].into_iter().collect(),
        );
        let err = safe_config(&g).unwrap_err();
        assert_eq!(err.violation, Violation::DirtyVolatileRead);
    }

    #[test]
    fn empty_instruction_thread_is_vacuously_safe() {
        let g = one_thread(vec![], GhostState::default(), SharingMap::new());
        assert!(safe_config(&g).is_ok());
    }

    #[test]
    fn nonvolatile_write_changes_only_its_address() {
        let mut g = one_thread(
            vec![MemInstr::Write {
                volatile: false,
                addr: addr(0),
                sop: StoreOp::constant(Value(7)),
                ann: OwnershipAnnotation::empty(),
            }],
            GhostState::with_owned(aset(&[0])),
            SharingMap::new(),
        );
        g.mem = g.mem.set(addr(1), Value(2));
        let (_, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(g2.mem.get(addr(0)), Value(7));
        assert_eq!(g2.mem.get(addr(1)), Value(2));
        assert_eq!(g2.sharing, g.sharing);
    }
}
