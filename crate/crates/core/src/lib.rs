//! A laboratory for running concurrent PIMP programs on two memory models:
//! a sequentially consistent machine with an ownership-based access
//! discipline, and a TSO machine with FIFO store buffers and forwarding.
//! Exhaustive interleaving exploration compares their outcome sets, checks
//! the discipline on every reachable state, and couples the two machines
//! step by step.

pub mod config;
pub mod coupling;
pub mod explore;
pub mod invariants;
pub mod litmus;
pub mod mem;
pub mod pimp;
pub mod report;
pub mod sb;
pub mod vm;

pub use config::{Global, RuleKind, SbGlobal, SbThread, Thread, VmGlobal, VmThread};
pub use mem::{Address, MemInstr, Memory, SharingMap, StoreOp, Temporaries, TmpId, Value};
