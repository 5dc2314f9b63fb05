//! Machine configurations, generic over the store-buffer slot: the virtual
//! machine carries a unit placeholder where the store-buffer machine carries
//! an entry list, so both share one configuration shape.

use serde::Serialize;

use crate::mem::{GhostState, MemInstr, Memory, SharingMap, Temporaries};
use crate::pimp::ProgramState;
use crate::sb::SbEntry;

/// Per-thread configuration `(p, is, θ, sb, 𝒟, 𝒪, 𝒜)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Thread<B> {
    pub prog: ProgramState,
    pub instrs: Vec<MemInstr>,
    pub tmps: Temporaries,
    pub buffer: B,
    pub ghost: GhostState,
}

/// Global configuration `(ts, 𝒮, m)`. Thread indices are stable across steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Global<B> {
    pub threads: Vec<Thread<B>>,
    pub sharing: SharingMap,
    pub mem: Memory,
}

pub type VmThread = Thread<()>;
pub type VmGlobal = Global<()>;
pub type SbThread = Thread<Vec<SbEntry>>;
pub type SbGlobal = Global<Vec<SbEntry>>;

impl<B> Thread<B> {
    pub fn head_instr(&self) -> Option<&MemInstr> {
        self.instrs.first()
    }
}

impl<B> Global<B> {
    pub fn with_thread(&self, i: usize, th: Thread<B>) -> Global<B>
    where
        B: Clone,
    {
        let mut g = self.clone();
        g.threads[i] = th;
        g
    }
}

impl VmThread {
    /// A VM thread is done when its program is `Skip` and no instructions
    /// are pending.
    pub fn is_terminated(&self) -> bool {
        self.prog.is_terminated() && self.instrs.is_empty()
    }
}

impl SbThread {
    /// An SB thread additionally needs a drained buffer.
    pub fn is_terminated(&self) -> bool {
        self.prog.is_terminated() && self.instrs.is_empty() && self.buffer.is_empty()
    }
}

impl VmGlobal {
    pub fn is_terminal(&self) -> bool {
        self.threads.iter().all(|t| t.is_terminated())
    }
}

impl SbGlobal {
    pub fn is_terminal(&self) -> bool {
        self.threads.iter().all(|t| t.is_terminated())
    }

    /// Forgets the buffers, yielding the VM configuration with the same
    /// components. Meaningful for initial states where all buffers are empty.
    pub fn to_vm_shape(&self) -> VmGlobal {
        Global {
            threads: self
                .threads
                .iter()
                .map(|t| Thread {
                    prog: t.prog.clone(),
                    instrs: t.instrs.clone(),
                    tmps: t.tmps.clone(),
                    buffer: (),
                    ghost: t.ghost.clone(),
                })
                .collect(),
            sharing: self.sharing.clone(),
            mem: self.mem.clone(),
        }
    }
}

/// Transition labels: which rule produced an edge. Exploration orders
/// successors by thread index, then by this enum's declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    Program,
    MemRead,
    MemWriteNv,
    MemWriteVol,
    MemRmwFail,
    MemRmwOk,
    MemFence,
    MemGhost,
    FlushReadSb,
    FlushWriteNvSb,
    FlushWriteVolSb,
    FlushProgSb,
    FlushGhostSb,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::Program => "program",
            RuleKind::MemRead => "mem-read",
            RuleKind::MemWriteNv => "mem-write-nv",
            RuleKind::MemWriteVol => "mem-write-vol",
            RuleKind::MemRmwFail => "mem-rmw-fail",
            RuleKind::MemRmwOk => "mem-rmw-ok",
            RuleKind::MemFence => "mem-fence",
            RuleKind::MemGhost => "mem-ghost",
            RuleKind::FlushReadSb => "flush-read",
            RuleKind::FlushWriteNvSb => "flush-write-nv",
            RuleKind::FlushWriteVolSb => "flush-write-vol",
            RuleKind::FlushProgSb => "flush-prog",
            RuleKind::FlushGhostSb => "flush-ghost",
        }
    }

    /// Store-buffer exits that the simulation matches with an empty VM path.
    pub fn is_local_flush(self) -> bool {
        matches!(
            self,
            RuleKind::FlushReadSb
                | RuleKind::FlushWriteNvSb
                | RuleKind::FlushProgSb
                | RuleKind::FlushGhostSb
        )
    }
}
