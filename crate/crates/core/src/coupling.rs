//! The coupling relation between store-buffer and virtual machine
//! configurations. The prefix of each buffer up to the first volatile write
//! counts as already simulated on the virtual machine; everything from that
//! write on is suspended as pending instructions there.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::{SbGlobal, SbThread, VmGlobal};
use crate::mem::{Address, MemInstr, Memory, SharingMap, TmpId};
use crate::pimp::ProgramState;
use crate::sb::SbEntry;

/// A buffer split at the first volatile write: `flushs` holds none,
/// `suspends` is empty or starts with one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBuffer<'a> {
    pub flushs: &'a [SbEntry],
    pub suspends: &'a [SbEntry],
}

pub fn split_buffer(sb: &[SbEntry]) -> SplitBuffer<'_> {
    let cut = sb
        .iter()
        .position(SbEntry::is_volatile_write)
        .unwrap_or(sb.len());
    SplitBuffer {
        flushs: &sb[..cut],
        suspends: &sb[cut..],
    }
}

/// Applies every buffered write before the first volatile write of every
/// thread to `m`, threads in index order. For states satisfying the
/// ownership invariant the order is immaterial.
pub fn flush_all_until_volatile_write(threads: &[SbThread], m: &Memory) -> Memory {
    let mut m = m.clone();
    for th in threads {
        for entry in split_buffer(&th.buffer).flushs {
            if let SbEntry::Write { addr, val, .. } = entry {
                m = m.set(*addr, *val);
            }
        }
    }
    m
}

/// Applies every buffered ghost acquisition before the first volatile write
/// of every thread to the sharing map, threads in index order.
pub fn share_all_until_volatile_write(threads: &[SbThread], s: &SharingMap) -> SharingMap {
    let mut s = s.clone();
    for th in threads {
        for entry in split_buffer(&th.buffer).flushs {
            if let SbEntry::Ghost { acquire, local } = entry {
                s = s.subtract(acquire, local);
            }
        }
    }
    s
}

/// Converts buffer entries back to the instructions they recorded; program
/// entries contribute nothing.
pub fn instrs(entries: &[SbEntry]) -> Vec<MemInstr> {
    entries
        .iter()
        .filter_map(|e| match e {
            SbEntry::Read {
                volatile,
                addr,
                tmp,
                ..
            } => Some(MemInstr::Read {
                volatile: *volatile,
                addr: *addr,
                tmp: *tmp,
            }),
            SbEntry::Write {
                volatile,
                addr,
                sop,
                ann,
                ..
            } => Some(MemInstr::Write {
                volatile: *volatile,
                addr: *addr,
                sop: sop.clone(),
                ann: ann.clone(),
            }),
            SbEntry::Ghost { acquire, local } => Some(MemInstr::Ghost {
                acquire: acquire.clone(),
                local: local.clone(),
            }),
            SbEntry::Prog { .. } => None,
        })
        .collect()
}

/// Instructions issued by the program steps recorded in `entries`.
pub fn prog_instrs(entries: &[SbEntry]) -> Vec<MemInstr> {
    entries
        .iter()
        .flat_map(|e| match e {
            SbEntry::Prog { issued, .. } => issued.clone(),
            _ => Vec::new(),
        })
        .collect()
}

/// Temporaries recorded by buffered reads.
pub fn read_tmps(entries: &[SbEntry]) -> BTreeSet<TmpId> {
    entries
        .iter()
        .filter_map(|e| match e {
            SbEntry::Read { tmp, .. } => Some(*tmp),
            _ => None,
        })
        .collect()
}

/// Program state of the first recorded program step in `entries`, else the
/// fallback `p`.
pub fn hd_prog(p: &ProgramState, entries: &[SbEntry]) -> ProgramState {
    entries
        .iter()
        .find_map(|e| match e {
            SbEntry::Prog { from, .. } => Some(from.clone()),
            _ => None,
        })
        .unwrap_or_else(|| p.clone())
}

/// Outstanding acquisitions of the already-simulated prefix: folds the ghost
/// entries of `flushs` into `base`. Only acquisitions can occur before the
/// first volatile write, so nothing is ever removed.
pub fn acquire(flushs: &[SbEntry], base: &BTreeSet<Address>) -> BTreeSet<Address> {
    let mut out = base.clone();
    for entry in flushs {
        if let SbEntry::Ghost { acquire, .. } = entry {
            out.extend(acquire.iter().copied());
        }
    }
    out
}

/// Which conjunct of the coupling relation failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "conjunct", content = "thread")]
pub enum Mismatch {
    ThreadCount,
    Memory,
    Sharing,
    Instrs(usize),
    Temporaries(usize),
    Program(usize),
    Owned(usize),
    Acquired(usize),
    Dirty(usize),
}

/// Decides the coupling relation between a store-buffer configuration and a
/// virtual machine configuration, reporting the first failed conjunct.
pub fn couple(sbg: &SbGlobal, vg: &VmGlobal) -> Result<(), Mismatch> {
    if sbg.threads.len() != vg.threads.len() {
        return Err(Mismatch::ThreadCount);
    }
    if vg.mem != flush_all_until_volatile_write(&sbg.threads, &sbg.mem) {
        return Err(Mismatch::Memory);
    }
    if vg.sharing != share_all_until_volatile_write(&sbg.threads, &sbg.sharing) {
        return Err(Mismatch::Sharing);
    }

    for (i, (tsb, tvm)) in sbg.threads.iter().zip(vg.threads.iter()).enumerate() {
        let split = split_buffer(&tsb.buffer);
        let suspends = split.suspends;

        // instrs suspends @ is_sb = is_vm @ prog_instrs suspends
        let mut lhs = instrs(suspends);
        lhs.extend(tsb.instrs.iter().cloned());
        let mut rhs = tvm.instrs.clone();
        rhs.extend(prog_instrs(suspends));
        if lhs != rhs {
            return Err(Mismatch::Instrs(i));
        }

        if tvm.tmps != tsb.tmps.without(&read_tmps(suspends)) {
            return Err(Mismatch::Temporaries(i));
        }
        if tvm.prog != hd_prog(&tsb.prog, suspends) {
            return Err(Mismatch::Program(i));
        }
        if tvm.ghost.owned != acquire(split.flushs, &tsb.ghost.owned) {
            return Err(Mismatch::Owned(i));
        }
        if tvm.ghost.acquired != acquire(split.flushs, &tsb.ghost.acquired) {
            return Err(Mismatch::Acquired(i));
        }
        let has_vol_write = tsb.buffer.iter().any(SbEntry::is_volatile_write);
        if tsb.ghost.dirty != (tvm.ghost.dirty || has_vol_write) {
            return Err(Mismatch::Dirty(i));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Global, Thread};
    use crate::mem::{
        GhostState, OwnershipAnnotation, StoreOp, Temporaries, Value,
    };
    use crate::pimp::Stmt;

    fn addr(n: u32) -> Address {
        Address(n)
    }

    fn nv_write(a: u32, v: i64) -> SbEntry {
        SbEntry::Write {
            volatile: false,
            addr: addr(a),
            sop: StoreOp::constant(Value(v)),
            val: Value(v),
            ann: OwnershipAnnotation::empty(),
        }
    }

    fn vol_write(a: u32, v: i64) -> SbEntry {
        SbEntry::Write {
            volatile: true,
            addr: addr(a),
            sop: StoreOp::constant(Value(v)),
            val: Value(v),
            ann: OwnershipAnnotation::empty(),
        }
    }

    fn read_entry(a: u32, t: u32, v: i64) -> SbEntry {
        SbEntry::Read {
            volatile: false,
            addr: addr(a),
            tmp: TmpId(t),
            val: Value(v),
        }
    }

    fn sb_thread(buffer: Vec<SbEntry>) -> SbThread {
        Thread {
            prog: ProgramState::initial(Stmt::Skip),
            instrs: Vec::new(),
            tmps: Temporaries::new(),
            buffer,
            ghost: GhostState::default(),
        }
    }

    #[test]
    fn split_without_volatile_write_keeps_everything_flushable() {
        let sb = vec![read_entry(0, 0, 1), nv_write(1, 2)];
        let split = split_buffer(&sb);
        assert_eq!(split.flushs.len(), 2);
        assert!(split.suspends.is_empty());
    }

    #[test]
    fn split_cuts_at_first_volatile_write() {
        let sb = vec![nv_write(0, 1), vol_write(1, 1), read_entry(2, 0, 0)];
        let split = split_buffer(&sb);
        assert_eq!(split.flushs, &sb[..1]);
        assert_eq!(split.suspends, &sb[1..]);
        let mut joined = split.flushs.to_vec();
        joined.extend_from_slice(split.suspends);
        assert_eq!(joined, sb);
    }

    #[test]
    fn split_empty() {
        let split = split_buffer(&[]);
        assert!(split.flushs.is_empty() && split.suspends.is_empty());
    }

    #[test]
    fn flush_all_applies_prefix_writes_only() {
        let th = sb_thread(vec![nv_write(0, 5), vol_write(1, 1), nv_write(2, 2)]);
        let m = flush_all_until_volatile_write(&[th], &Memory::new());
        assert_eq!(m.get(addr(0)), Value(5));
        assert_eq!(m.get(addr(1)), Value(0));
        assert_eq!(m.get(addr(2)), Value(0));
    }

    #[test]
    fn flush_all_thread_order_immaterial_for_disjoint_writes() {
        let t0 = sb_thread(vec![nv_write(0, 1)]);
        let t1 = sb_thread(vec![nv_write(1, 2)]);
        let fwd = flush_all_until_volatile_write(&[t0.clone(), t1.clone()], &Memory::new());
        let rev = flush_all_until_volatile_write(&[t1, t0], &Memory::new());
        assert_eq!(fwd, rev);
    }

    #[test]
    fn share_all_applies_prefix_ghosts() {
        let s: SharingMap = [(addr(0), true)].into_iter().collect();
        let th = sb_thread(vec![SbEntry::Ghost {
            acquire: [addr(0)].into_iter().collect(),
            local: [addr(0)].into_iter().collect(),
        }]);
        let out = share_all_until_volatile_write(&[th], &s);
        assert!(!out.contains(addr(0)));
        let out2 = share_all_until_volatile_write(&[sb_thread(vec![])], &s);
        assert_eq!(out2, s);
    }

    #[test]
    fn instrs_coerces_entries_and_drops_prog() {
        let suspends = vec![
            vol_write(1, 1),
            read_entry(2, 3, 2),
            SbEntry::Prog {
                from: ProgramState::initial(Stmt::Skip),
                to: ProgramState::initial(Stmt::Skip),
                issued: vec![MemInstr::Fence],
            },
        ];
        let is = instrs(&suspends);
        assert_eq!(is.len(), 2);
        assert!(matches!(is[0], MemInstr::Write { volatile: true, .. }));
        assert!(matches!(
            is[1],
            MemInstr::Read {
                volatile: false,
                tmp: TmpId(3),
                ..
            }
        ));
        assert_eq!(prog_instrs(&suspends), vec![MemInstr::Fence]);
        // nothing lost: instruction entries + prog-only entries cover it
        assert_eq!(is.len() + 1, suspends.len());
    }

    #[test]
    fn hd_prog_falls_back() {
        let p = ProgramState::initial(Stmt::SFence);
        assert_eq!(hd_prog(&p, &[read_entry(0, 0, 0)]), p);
    }

    #[test]
    fn acquire_folds_ghost_entries() {
        let flushs = vec![SbEntry::Ghost {
            acquire: [addr(7)].into_iter().collect(),
            local: BTreeSet::new(),
        }];
        assert_eq!(
            acquire(&flushs, &BTreeSet::new()),
            [addr(7)].into_iter().collect()
        );
    }

    #[test]
    fn couple_holds_at_matching_initial_states() {
        let sbg: SbGlobal = Global {
            threads: vec![sb_thread(vec![])],
            sharing: SharingMap::new(),
            mem: Memory::new().set(addr(0), Value(1)),
        };
        let vg = sbg.to_vm_shape();
        assert_eq!(couple(&sbg, &vg), Ok(()));
    }

    #[test]
    fn unflushed_prefix_write_mismatches_memory() {
        let sbg: SbGlobal = Global {
            threads: vec![sb_thread(vec![nv_write(0, 5)])],
            sharing: SharingMap::new(),
            mem: Memory::new(),
        };
        // VM memory must already contain the prefix write; plain copy fails.
        let mut vg = sbg.to_vm_shape();
        vg.threads[0].buffer = ();
        assert_eq!(couple(&sbg, &vg), Err(Mismatch::Memory));
        let fixed = {
            let mut v = vg.clone();
            v.mem = v.mem.set(addr(0), Value(5));
            v
        };
        assert_eq!(couple(&sbg, &fixed), Ok(()));
    }
}
