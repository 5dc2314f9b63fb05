//! The TSO store-buffer machine: memory steps append history-carrying
//! entries to a FIFO buffer, flush steps drain them to memory from the
//! front. Loads forward from the youngest buffered store to the same
//! address. Interlocked operations and fences require an empty buffer.
//!
//! This machine performs no safety checks; the access discipline is judged
//! entirely on the virtual machine.

use serde::Serialize;

use crate::config::{RuleKind, SbGlobal, SbThread};
use crate::mem::{
    eval_storeop, Address, EvalError, MemInstr, OwnershipAnnotation, StoreOp, TmpId, Value,
};
use crate::pimp::{self, ProgramState};

/// Store buffer entries. Reads, program steps and ghost operations are
/// recorded purely as history; only writes touch memory on exit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum SbEntry {
    Read {
        volatile: bool,
        addr: Address,
        tmp: TmpId,
        /// Value the read returned at enqueue time.
        val: Value,
    },
    Write {
        volatile: bool,
        addr: Address,
        sop: StoreOp,
        /// `sop` evaluated at enqueue time; what exits to memory.
        val: Value,
        ann: OwnershipAnnotation,
    },
    Prog {
        from: ProgramState,
        to: ProgramState,
        issued: Vec<MemInstr>,
    },
    Ghost {
        acquire: std::collections::BTreeSet<Address>,
        local: std::collections::BTreeSet<Address>,
    },
}

impl SbEntry {
    pub fn is_volatile_write(&self) -> bool {
        matches!(self, SbEntry::Write { volatile: true, .. })
    }

    pub fn addr(&self) -> Option<Address> {
        match self {
            SbEntry::Read { addr, .. } | SbEntry::Write { addr, .. } => Some(*addr),
            _ => None,
        }
    }
}

/// Value of the last buffered write to `a`, if any.
pub fn buffered_val(sb: &[SbEntry], a: Address) -> Option<Value> {
    sb.iter().rev().find_map(|e| match e {
        SbEntry::Write { addr, val, .. } if *addr == a => Some(*val),
        _ => None,
    })
}

/// Buffer-filling memory step for the head instruction of thread `i`.
/// Returns no successor when the thread has no instruction or when an
/// interlocked/fence head faces a nonempty buffer.
pub fn memory_step(g: &SbGlobal, i: usize) -> Result<Vec<(RuleKind, SbGlobal)>, EvalError> {
    let th = &g.threads[i];
    let Some(head) = th.head_instr().cloned() else {
        return Ok(Vec::new());
    };
    let rest: Vec<MemInstr> = th.instrs[1..].to_vec();

    let out = match head {
        MemInstr::Read {
            volatile,
            addr,
            tmp,
        } => {
            let v = buffered_val(&th.buffer, addr).unwrap_or_else(|| g.mem.get(addr));
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.tmps = th.tmps.bind(tmp, v);
            t2.buffer.push(SbEntry::Read {
                volatile,
                addr,
                tmp,
                val: v,
            });
            vec![(RuleKind::MemRead, g.with_thread(i, t2))]
        }

        MemInstr::Write {
            volatile,
            addr,
            sop,
            ann,
        } => {
            let v = eval_storeop(&sop, &th.tmps)?;
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.buffer.push(SbEntry::Write {
                volatile,
                addr,
                sop,
                val: v,
                ann,
            });
            let kind = if volatile {
                t2.ghost.dirty = true;
                RuleKind::MemWriteVol
            } else {
                RuleKind::MemWriteNv
            };
            vec![(kind, g.with_thread(i, t2))]
        }

        MemInstr::Rmw {
            addr,
            tmp,
            sop,
            cond,
            ret,
            ann,
        } => {
            if !th.buffer.is_empty() {
                return Ok(Vec::new());
            }
            let old = g.mem.get(addr);
            let extended = th.tmps.bind(tmp, old);
            if eval_storeop(&cond, &extended)?.is_true() {
                let new = eval_storeop(&sop, &extended)?;
                let mut t2 = th.clone();
                t2.instrs = rest;
                t2.tmps = extended.bind(tmp, ret.apply(old, new));
                t2.ghost.dirty = false;
                t2.ghost.owned = ownership_union_minus(&th.ghost.owned, &ann);
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
            if !th.buffer.is_empty() {
                return Ok(Vec::new());
            }
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.ghost.dirty = false;
            t2.ghost.acquired.clear();
            vec![(RuleKind::MemFence, g.with_thread(i, t2))]
        }

        MemInstr::Ghost { acquire, local } => {
            let mut t2 = th.clone();
            t2.instrs = rest;
            t2.buffer.push(SbEntry::Ghost { acquire, local });
            vec![(RuleKind::MemGhost, g.with_thread(i, t2))]
        }
    };
    Ok(out)
}

fn ownership_union_minus(
    owned: &std::collections::BTreeSet<Address>,
    ann: &OwnershipAnnotation,
) -> std::collections::BTreeSet<Address> {
    owned
        .union(&ann.acquire)
        .copied()
        .filter(|a| !ann.release.contains(a))
        .collect()
}

/// Drains the front entry of thread `i`'s buffer. Empty buffer: no successor.
pub fn flush_step(g: &SbGlobal, i: usize) -> Vec<(RuleKind, SbGlobal)> {
    let th = &g.threads[i];
    let Some(front) = th.buffer.first().cloned() else {
        return Vec::new();
    };
    let mut t2 = th.clone();
    t2.buffer.remove(0);

    match front {
        SbEntry::Write {
            volatile: false,
            addr,
            val,
            ..
        } => {
            let mut g2 = g.with_thread(i, t2);
            g2.mem = g2.mem.set(addr, val);
            vec![(RuleKind::FlushWriteNvSb, g2)]
        }
        SbEntry::Write {
            volatile: true,
            addr,
            val,
            ann,
            ..
        } => {
            t2.ghost.owned = ownership_union_minus(&th.ghost.owned, &ann);
            t2.ghost.acquired = t2
                .ghost
                .acquired
                .union(&ann.acquire)
                .copied()
                .filter(|a| !ann.release.contains(a))
                .collect();
            let mut g2 = g.with_thread(i, t2);
            g2.mem = g2.mem.set(addr, val);
            g2.sharing = g2
                .sharing
                .augment(&ann.release, &ann.writable)
                .subtract(&ann.acquire, &ann.local);
            vec![(RuleKind::FlushWriteVolSb, g2)]
        }
        SbEntry::Read { .. } => vec![(RuleKind::FlushReadSb, g.with_thread(i, t2))],
        SbEntry::Prog { .. } => vec![(RuleKind::FlushProgSb, g.with_thread(i, t2))],
        SbEntry::Ghost { acquire, local } => {
            t2.ghost.owned = t2.ghost.owned.union(&acquire).copied().collect();
            t2.ghost.acquired = t2.ghost.acquired.union(&acquire).copied().collect();
            let mut g2 = g.with_thread(i, t2);
            g2.sharing = g2.sharing.subtract(&acquire, &local);
            vec![(RuleKind::FlushGhostSb, g2)]
        }
    }
}

/// Program step for thread `i`: issued instructions are appended to the
/// instruction list and the step is recorded at the back of the buffer.
pub fn program_step(g: &SbGlobal, i: usize) -> Result<Vec<(RuleKind, SbGlobal)>, EvalError> {
    let th = &g.threads[i];
    let succs = pimp::step(&th.tmps, &th.prog)?;
    Ok(succs
        .into_iter()
        .map(|(p2, issued)| {
            let mut t2 = th.clone();
            t2.buffer.push(SbEntry::Prog {
                from: th.prog.clone(),
                to: p2.clone(),
                issued: issued.clone(),
            });
            t2.instrs.extend(issued);
            t2.prog = p2;
            (RuleKind::Program, g.with_thread(i, t2))
        })
        .collect())
}

/// All successors of thread `i`: program, memory, then flush steps.
pub fn step_global(g: &SbGlobal, i: usize) -> Result<Vec<(RuleKind, SbGlobal)>, EvalError> {
    let mut out = program_step(g, i)?;
    out.extend(memory_step(g, i)?);
    out.extend(flush_step(g, i));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Global, Thread};
    use crate::mem::{GhostState, Memory, SharingMap, Temporaries};
    use crate::pimp::Stmt;
    use std::collections::BTreeSet;

    fn addr(n: u32) -> Address {
        Address(n)
    }

    fn aset(items: &[u32]) -> BTreeSet<Address> {
        items.iter().map(|n| Address(*n)).collect()
    }

    fn write_entry(volatile: bool, a: u32, v: i64) -> SbEntry {
        SbEntry::Write {
            volatile,
            addr: addr(a),
            sop: StoreOp::constant(Value(v)),
            val: Value(v),
            ann: OwnershipAnnotation::empty(),
        }
    }

    fn bare_thread(instrs: Vec<MemInstr>, buffer: Vec<SbEntry>) -> SbThread {
        Thread {
            prog: ProgramState::initial(Stmt::Skip),
            instrs,
            tmps: Temporaries::new(),
            buffer,
            ghost: GhostState::default(),
        }
    }

    fn global(th: SbThread) -> SbGlobal {
        Global {
            threads: vec![th],
            sharing: SharingMap::new(),
            mem: Memory::new(),
        }
    }

    #[test]
    fn buffered_val_takes_last_write() {
        let sb = vec![write_entry(false, 0, 5), write_entry(false, 0, 7)];
        assert_eq!(buffered_val(&sb, addr(0)), Some(Value(7)));
        let sb2 = vec![write_entry(false, 1, 1)];
        assert_eq!(buffered_val(&sb2, addr(0)), None);
        assert_eq!(buffered_val(&[], addr(0)), None);
    }

    #[test]
    fn read_forwards_from_buffer() {
        let th = bare_thread(
            vec![MemInstr::Read {
                volatile: false,
                addr: addr(0),
                tmp: TmpId(0),
            }],
            vec![write_entry(false, 0, 1)],
        );
        let g = global(th);
        let succs = memory_step(&g, 0).unwrap();
        assert_eq!(succs.len(), 1);
        let (kind, g2) = &succs[0];
        assert_eq!(*kind, RuleKind::MemRead);
        assert_eq!(g2.threads[0].tmps.get(TmpId(0)), Some(Value(1)));
        assert_eq!(
            g2.threads[0].buffer.last(),
            Some(&SbEntry::Read {
                volatile: false,
                addr: addr(0),
                tmp: TmpId(0),
                val: Value(1)
            })
        );
        assert_eq!(g2.mem, g.mem);
    }

    #[test]
    fn volatile_write_buffers_and_sets_dirty_only() {
        let th = bare_thread(
            vec![MemInstr::Write {
                volatile: true,
                addr: addr(0),
                sop: StoreOp::constant(Value(1)),
                ann: OwnershipAnnotation::empty(),
            }],
            vec![],
        );
        let g = global(th);
        let (kind, g2) = memory_step(&g, 0).unwrap().remove(0);
        assert_eq!(kind, RuleKind::MemWriteVol);
        assert_eq!(g2.mem.get(addr(0)), Value(0));
        assert!(g2.threads[0].ghost.dirty);
        assert_eq!(g2.threads[0].buffer, vec![write_entry(true, 0, 1)]);
    }

    #[test]
    fn fence_and_rmw_require_empty_buffer() {
        let fence = bare_thread(vec![MemInstr::Fence], vec![write_entry(false, 0, 5)]);
        assert!(memory_step(&global(fence), 0).unwrap().is_empty());

        let rmw = bare_thread(
            vec![MemInstr::Rmw {
                addr: addr(0),
                tmp: TmpId(0),
                sop: StoreOp::constant(Value(1)),
                cond: StoreOp::constant(Value(1)),
                ret: crate::mem::RetSpec::Old,
                ann: OwnershipAnnotation::empty(),
            }],
            vec![write_entry(false, 0, 5)],
        );
        assert!(memory_step(&global(rmw), 0).unwrap().is_empty());
    }

    #[test]
    fn flush_nonvolatile_write_updates_memory() {
        let th = bare_thread(vec![], vec![write_entry(false, 0, 5)]);
        let g = global(th);
        let (kind, g2) = flush_step(&g, 0).remove(0);
        assert_eq!(kind, RuleKind::FlushWriteNvSb);
        assert_eq!(g2.mem.get(addr(0)), Value(5));
        assert!(g2.threads[0].buffer.is_empty());
    }

    #[test]
    fn flush_ghost_applies_ownership() {
        let mut th = bare_thread(
            vec![],
            vec![SbEntry::Ghost {
                acquire: aset(&[0]),
                local: aset(&[0]),
            }],
        );
        th.ghost = GhostState::default();
        let mut g = global(th);
        g.sharing = [(addr(0), true)].into_iter().collect();
        let (kind, g2) = flush_step(&g, 0).remove(0);
        assert_eq!(kind, RuleKind::FlushGhostSb);
        assert_eq!(g2.threads[0].ghost.owned, aset(&[0]));
        assert_eq!(g2.threads[0].ghost.acquired, aset(&[0]));
        assert!(!g2.sharing.contains(addr(0)));
    }

    #[test]
    fn flush_is_fifo() {
        let th = bare_thread(
            vec![],
            vec![
                SbEntry::Read {
                    volatile: false,
                    addr: addr(1),
                    tmp: TmpId(0),
                    val: Value(0),
                },
                write_entry(false, 0, 5),
            ],
        );
        let g = global(th);
        let (kind, g2) = flush_step(&g, 0).remove(0);
        assert_eq!(kind, RuleKind::FlushReadSb);
        assert_eq!(g2.mem.get(addr(0)), Value(0));
        let (kind2, g3) = flush_step(&g2, 0).remove(0);
        assert_eq!(kind2, RuleKind::FlushWriteNvSb);
        assert_eq!(g3.mem.get(addr(0)), Value(5));
    }

    #[test]
    fn draining_equals_left_fold_of_writes() {
        let buffer = vec![
            write_entry(false, 0, 1),
            write_entry(false, 1, 2),
            write_entry(false, 0, 3),
        ];
        let th = bare_thread(vec![], buffer.clone());
        let mut g = global(th);
        while !g.threads[0].buffer.is_empty() {
            g = flush_step(&g, 0).remove(0).1;
        }
        let mut folded = Memory::new();
        for e in &buffer {
            if let SbEntry::Write { addr, val, .. } = e {
                folded = folded.set(*addr, *val);
            }
        }
        assert_eq!(g.mem, folded);
        assert_eq!(g.mem.get(addr(0)), Value(3));
    }

    #[test]
    fn terminated_thread_has_no_successors() {
        let th = bare_thread(vec![], vec![]);
        let g = global(th);
        assert!(step_global(&g, 0).unwrap().is_empty());
    }

    #[test]
    fn nonempty_buffer_with_skip_program_only_flushes() {
        let th = bare_thread(vec![], vec![write_entry(false, 0, 5)]);
        let g = global(th);
        let succs = step_global(&g, 0).unwrap();
        assert_eq!(succs.len(), 1);
        assert_eq!(succs[0].0, RuleKind::FlushWriteNvSb);
    }
}
