//! Shared domain types for both machines: addresses, values, temporaries,
//! memory instructions, ghost ownership state, and the sharing-map algebra.
//!
//! Everything here is an immutable value with structural equality and
//! hashing, so machine configurations can be deduplicated and serialized
//! canonically. Store operations are syntactic expression trees rather than
//! closures: they compare, hash and serialize, and their declared domain is
//! checked against the temporaries they actually mention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Memory address. Litmus files bind symbolic names to small addresses.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Address(pub u32);

/// Temporary register identifier (the paper's `t`).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TmpId(pub u32);

/// Machine value: a 64-bit signed integer with checked arithmetic.
/// Overflow is an error, never a wrap. Truth is "nonzero".
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Value(pub i64);

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

impl fmt::Debug for TmpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TmpId {
    pub fn offset(self, n: u32) -> TmpId {
        TmpId(self.0 + n)
    }
}

impl Value {
    pub const ZERO: Value = Value(0);

    pub fn is_true(self) -> bool {
        self.0 != 0
    }

    pub fn from_bool(b: bool) -> Value {
        Value(if b { 1 } else { 0 })
    }

    /// Converts a computed value to an address; negative or oversized
    /// values have no address interpretation.
    pub fn to_address(self) -> Result<Address, EvalError> {
        u32::try_from(self.0)
            .map(Address)
            .map_err(|_| EvalError::AddressRange(self.0))
    }
}

/// Evaluation failures. `UndefinedTemporary` signals a scheduling bug:
/// a memory step was taken before the reads it depends on resolved.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("undefined temporary t{}", (.0).0)]
    UndefinedTemporary(TmpId),
    #[error("arithmetic overflow")]
    Overflow,
    #[error("value {0} is not a valid address")]
    AddressRange(i64),
}

/// Partial map from temporaries to values (the paper's θ).
/// Lookup of an absent temporary is a detectable outcome, never a default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct Temporaries(BTreeMap<TmpId, Value>);

impl Temporaries {
    pub fn new() -> Temporaries {
        Temporaries(BTreeMap::new())
    }

    pub fn get(&self, t: TmpId) -> Option<Value> {
        self.0.get(&t).copied()
    }

    pub fn contains(&self, t: TmpId) -> bool {
        self.0.contains_key(&t)
    }

    pub fn bind(&self, t: TmpId, v: Value) -> Temporaries {
        let mut m = self.0.clone();
        m.insert(t, v);
        Temporaries(m)
    }

    pub fn domain(&self) -> impl Iterator<Item = TmpId> + '_ {
        self.0.keys().copied()
    }

    /// θ restricted to the complement of `removed` (θ↾(−removed)).
    pub fn without(&self, removed: &BTreeSet<TmpId>) -> Temporaries {
        Temporaries(
            self.0
                .iter()
                .filter(|(t, _)| !removed.contains(t))
                .map(|(t, v)| (*t, *v))
                .collect(),
        )
    }

    /// θ restricted to `kept` (θ↾kept).
    pub fn restrict(&self, kept: &BTreeSet<TmpId>) -> Temporaries {
        Temporaries(
            self.0
                .iter()
                .filter(|(t, _)| kept.contains(t))
                .map(|(t, v)| (*t, *v))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(TmpId, Value)> for Temporaries {
    fn from_iter<I: IntoIterator<Item = (TmpId, Value)>>(iter: I) -> Self {
        Temporaries(iter.into_iter().collect())
    }
}

/// Binary operators usable in store operations and litmus expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Eq,
    Ne,
    Lt,
    And,
    Or,
}

/// Unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum UnOp {
    Not,
}

impl BinOp {
    pub fn apply(self, a: Value, b: Value) -> Result<Value, EvalError> {
        Ok(match self {
            BinOp::Add => Value(a.0.checked_add(b.0).ok_or(EvalError::Overflow)?),
            BinOp::Sub => Value(a.0.checked_sub(b.0).ok_or(EvalError::Overflow)?),
            BinOp::Eq => Value::from_bool(a == b),
            BinOp::Ne => Value::from_bool(a != b),
            BinOp::Lt => Value::from_bool(a.0 < b.0),
            BinOp::And => Value::from_bool(a.is_true() && b.is_true()),
            BinOp::Or => Value::from_bool(a.is_true() || b.is_true()),
        })
    }
}

impl UnOp {
    pub fn apply(self, a: Value) -> Value {
        match self {
            UnOp::Not => Value::from_bool(!a.is_true()),
        }
    }
}

/// Closed arithmetic expression over temporary reads; the syntactic `f`
/// of a store operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum TmpExpr {
    Const(Value),
    Tmp(TmpId),
    Unop(UnOp, Box<TmpExpr>),
    Binop(BinOp, Box<TmpExpr>, Box<TmpExpr>),
}

impl TmpExpr {
    pub fn tmps(&self) -> BTreeSet<TmpId> {
        let mut acc = BTreeSet::new();
        self.collect_tmps(&mut acc);
        acc
    }

    fn collect_tmps(&self, acc: &mut BTreeSet<TmpId>) {
        match self {
            TmpExpr::Const(_) => {}
            TmpExpr::Tmp(t) => {
                acc.insert(*t);
            }
            TmpExpr::Unop(_, e) => e.collect_tmps(acc),
            TmpExpr::Binop(_, a, b) => {
                a.collect_tmps(acc);
                b.collect_tmps(acc);
            }
        }
    }

    pub fn eval(&self, theta: &Temporaries) -> Result<Value, EvalError> {
        match self {
            TmpExpr::Const(v) => Ok(*v),
            TmpExpr::Tmp(t) => theta.get(*t).ok_or(EvalError::UndefinedTemporary(*t)),
            TmpExpr::Unop(op, e) => Ok(op.apply(e.eval(theta)?)),
            TmpExpr::Binop(op, a, b) => op.apply(a.eval(theta)?, b.eval(theta)?),
        }
    }
}

/// A store operation `(D, f)`: a declared domain and an expression over it.
/// Construction checks that `f` mentions only temporaries in `D`, so the
/// valid-operation law holds by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct StoreOp {
    domain: BTreeSet<TmpId>,
    expr: TmpExpr,
}

/// Raised when a store operation mentions a temporary outside its domain.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("store operation mentions t{} outside its declared domain", (.0).0)]
pub struct DomainError(pub TmpId);

impl StoreOp {
    pub fn new(domain: BTreeSet<TmpId>, expr: TmpExpr) -> Result<StoreOp, DomainError> {
        if let Some(stray) = expr.tmps().difference(&domain).next() {
            return Err(DomainError(*stray));
        }
        Ok(StoreOp { domain, expr })
    }

    /// Store operation whose domain is exactly the temporaries mentioned.
    pub fn closed(expr: TmpExpr) -> StoreOp {
        StoreOp {
            domain: expr.tmps(),
            expr,
        }
    }

    pub fn constant(v: Value) -> StoreOp {
        StoreOp::closed(TmpExpr::Const(v))
    }

    pub fn domain(&self) -> &BTreeSet<TmpId> {
        &self.domain
    }

    pub fn expr(&self) -> &TmpExpr {
        &self.expr
    }

    /// Rechecks the construction invariant; used by the invariant suite on
    /// arbitrary (possibly hand-mutated) states.
    pub fn is_valid(&self) -> bool {
        self.expr.tmps().is_subset(&self.domain)
    }

    pub fn max_tmp(&self) -> Option<TmpId> {
        self.domain
            .iter()
            .chain(self.expr.tmps().iter())
            .max()
            .copied()
    }
}

/// Evaluates a store operation. The whole declared domain must be resolved,
/// not just the temporaries the expression happens to mention.
pub fn eval_storeop(sop: &StoreOp, theta: &Temporaries) -> Result<Value, EvalError> {
    for t in sop.domain() {
        if !theta.contains(*t) {
            return Err(EvalError::UndefinedTemporary(*t));
        }
    }
    sop.expr().eval(theta)
}

/// Ownership transfer annotation on writes and interlocked operations:
/// acquire `A`, keep local `L ⊆ A`, release `R`, release-as-writable `W ⊆ R`.
/// Well-formedness is checked by the safety judgment, not the type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct OwnershipAnnotation {
    pub acquire: BTreeSet<Address>,
    pub local: BTreeSet<Address>,
    pub release: BTreeSet<Address>,
    pub writable: BTreeSet<Address>,
}

impl OwnershipAnnotation {
    pub fn empty() -> OwnershipAnnotation {
        OwnershipAnnotation::default()
    }

    pub fn is_empty(&self) -> bool {
        self.acquire.is_empty()
            && self.local.is_empty()
            && self.release.is_empty()
            && self.writable.is_empty()
    }
}

/// Result selector for read-modify-write: which of (old, new) lands in the
/// target temporary after a successful swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RetSpec {
    Old,
    New,
}

impl RetSpec {
    pub fn apply(self, old: Value, new: Value) -> Value {
        match self {
            RetSpec::Old => old,
            RetSpec::New => new,
        }
    }
}

/// The five memory instructions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum MemInstr {
    Read {
        volatile: bool,
        addr: Address,
        tmp: TmpId,
    },
    Write {
        volatile: bool,
        addr: Address,
        sop: StoreOp,
        ann: OwnershipAnnotation,
    },
    /// Interlocked read-modify-write. Loads `addr` into `tmp`, then decides
    /// via `cond` (a predicate over the extended temporaries, true = nonzero)
    /// whether to store `sop` and select the final temporary via `ret`.
    Rmw {
        addr: Address,
        tmp: TmpId,
        sop: StoreOp,
        cond: StoreOp,
        ret: RetSpec,
        ann: OwnershipAnnotation,
    },
    Fence,
    Ghost {
        acquire: BTreeSet<Address>,
        local: BTreeSet<Address>,
    },
}

impl MemInstr {
    /// Temporary written by this instruction, if any.
    pub fn target_tmp(&self) -> Option<TmpId> {
        match self {
            MemInstr::Read { tmp, .. } | MemInstr::Rmw { tmp, .. } => Some(*tmp),
            _ => None,
        }
    }
}

/// Global sharing map 𝒮: present = shared, mapped flag = writable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct SharingMap(BTreeMap<Address, bool>);

impl SharingMap {
    pub fn new() -> SharingMap {
        SharingMap(BTreeMap::new())
    }

    pub fn get(&self, a: Address) -> Option<bool> {
        self.0.get(&a).copied()
    }

    pub fn contains(&self, a: Address) -> bool {
        self.0.contains_key(&a)
    }

    pub fn domain(&self) -> impl Iterator<Item = Address> + '_ {
        self.0.keys().copied()
    }

    /// The read-only addresses: exactly those mapped to `false`.
    pub fn read_only(&self) -> BTreeSet<Address> {
        self.0
            .iter()
            .filter(|(_, w)| !**w)
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn is_read_only(&self, a: Address) -> bool {
        self.get(a) == Some(false)
    }

    /// 𝒮 ⊕_W R: every released address becomes shared, writable iff in `W`.
    pub fn augment(&self, release: &BTreeSet<Address>, writable: &BTreeSet<Address>) -> SharingMap {
        let mut m = self.0.clone();
        for a in release {
            m.insert(*a, writable.contains(a));
        }
        SharingMap(m)
    }

    /// 𝒮 ⊖_A L: locally-acquired addresses leave the map; other shared
    /// addresses acquired in `A` become writable.
    pub fn subtract(&self, acquire: &BTreeSet<Address>, local: &BTreeSet<Address>) -> SharingMap {
        let mut m = BTreeMap::new();
        for (a, w) in &self.0 {
            if local.contains(a) {
                continue;
            }
            m.insert(*a, acquire.contains(a) || *w);
        }
        SharingMap(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(Address, bool)> for SharingMap {
    fn from_iter<I: IntoIterator<Item = (Address, bool)>>(iter: I) -> Self {
        SharingMap(iter.into_iter().collect())
    }
}

/// Per-thread ghost state: dirty flag 𝒟, owned addresses 𝒪, and addresses
/// 𝒜 acquired since the last store buffer flush.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct GhostState {
    pub dirty: bool,
    pub owned: BTreeSet<Address>,
    pub acquired: BTreeSet<Address>,
}

impl GhostState {
    pub fn with_owned(owned: BTreeSet<Address>) -> GhostState {
        GhostState {
            dirty: false,
            owned,
            acquired: BTreeSet::new(),
        }
    }
}

/// Total memory: a finite footprint over a default of 0. Entries equal to
/// the default are never stored, so structural equality and hashing are
/// footprint-normal by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct Memory(BTreeMap<Address, Value>);

impl Memory {
    pub fn new() -> Memory {
        Memory(BTreeMap::new())
    }

    pub fn get(&self, a: Address) -> Value {
        self.0.get(&a).copied().unwrap_or(Value::ZERO)
    }

    pub fn set(&self, a: Address, v: Value) -> Memory {
        let mut m = self.0.clone();
        if v == Value::ZERO {
            m.remove(&a);
        } else {
            m.insert(a, v);
        }
        Memory(m)
    }

    pub fn footprint(&self) -> impl Iterator<Item = (Address, Value)> + '_ {
        self.0.iter().map(|(a, v)| (*a, *v))
    }
}

impl FromIterator<(Address, Value)> for Memory {
    fn from_iter<I: IntoIterator<Item = (Address, Value)>>(iter: I) -> Self {
        let mut m = Memory::new();
        for (a, v) in iter {
            m = m.set(a, v);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(n: u32) -> Address {
        Address(n)
    }

    fn set(items: &[u32]) -> BTreeSet<Address> {
        items.iter().map(|n| Address(*n)).collect()
    }

    #[test]
    fn augment_inserts_release_with_writable_flag() {
        // {x↦false} ⊕_{y} {y} = {x↦false, y↦true}
        let s: SharingMap = [(addr(0), false)].into_iter().collect();
        let out = s.augment(&set(&[1]), &set(&[1]));
        assert_eq!(out.get(addr(0)), Some(false));
        assert_eq!(out.get(addr(1)), Some(true));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn augment_empty_release_is_identity() {
        let s: SharingMap = [(addr(0), false)].into_iter().collect();
        assert_eq!(s.augment(&set(&[]), &set(&[])), s);
    }

    #[test]
    fn augment_can_downgrade_to_read_only() {
        // {x↦false} ⊕_∅ {x} = {x↦false}
        let s: SharingMap = [(addr(0), false)].into_iter().collect();
        let out = s.augment(&set(&[0]), &set(&[]));
        assert_eq!(out.get(addr(0)), Some(false));
    }

    #[test]
    fn subtract_marks_acquired_writable() {
        // {x↦false, y↦true} ⊖_{x} ∅ = {x↦true, y↦true}
        let s: SharingMap = [(addr(0), false), (addr(1), true)].into_iter().collect();
        let out = s.subtract(&set(&[0]), &set(&[]));
        assert_eq!(out.get(addr(0)), Some(true));
        assert_eq!(out.get(addr(1)), Some(true));
    }

    #[test]
    fn subtract_removes_local() {
        let s: SharingMap = [(addr(0), false)].into_iter().collect();
        let out = s.subtract(&set(&[0]), &set(&[0]));
        assert_eq!(out.get(addr(0)), None);
        assert!(out.is_empty());
    }

    #[test]
    fn subtract_empty_is_identity() {
        let s: SharingMap = [(addr(1), true)].into_iter().collect();
        assert_eq!(s.subtract(&set(&[]), &set(&[])), s);
    }

    #[test]
    fn read_only_is_false_mapped() {
        let s: SharingMap = [(addr(0), false), (addr(1), true)].into_iter().collect();
        assert_eq!(s.read_only(), set(&[0]));
        assert_eq!(SharingMap::new().read_only(), set(&[]));
        let rw: SharingMap = [(addr(0), true)].into_iter().collect();
        assert_eq!(rw.read_only(), set(&[]));
    }

    #[test]
    fn storeop_eval_examples() {
        let theta: Temporaries = [(TmpId(0), Value(7))].into_iter().collect();
        assert_eq!(
            eval_storeop(&StoreOp::constant(Value(5)), &Temporaries::new()),
            Ok(Value(5))
        );
        assert_eq!(
            eval_storeop(&StoreOp::closed(TmpExpr::Tmp(TmpId(0))), &theta),
            Ok(Value(7))
        );
        let sum = StoreOp::closed(TmpExpr::Binop(
            BinOp::Add,
            Box::new(TmpExpr::Tmp(TmpId(0))),
            Box::new(TmpExpr::Tmp(TmpId(1))),
        ));
        let theta2: Temporaries = [(TmpId(0), Value(1)), (TmpId(1), Value(2))]
            .into_iter()
            .collect();
        assert_eq!(eval_storeop(&sum, &theta2), Ok(Value(3)));
    }

    #[test]
    fn storeop_undefined_domain_is_an_error() {
        let sop = StoreOp::closed(TmpExpr::Tmp(TmpId(3)));
        assert_eq!(
            eval_storeop(&sop, &Temporaries::new()),
            Err(EvalError::UndefinedTemporary(TmpId(3)))
        );
        // The whole declared domain must be resolved even if unused.
        let wide = StoreOp::new(
            [TmpId(0), TmpId(1)].into_iter().collect(),
            TmpExpr::Tmp(TmpId(0)),
        )
        .unwrap();
        let theta: Temporaries = [(TmpId(0), Value(1))].into_iter().collect();
        assert_eq!(
            eval_storeop(&wide, &theta),
            Err(EvalError::UndefinedTemporary(TmpId(1)))
        );
    }

    #[test]
    fn storeop_rejects_stray_temporaries() {
        let err = StoreOp::new(BTreeSet::new(), TmpExpr::Tmp(TmpId(2)));
        assert_eq!(err, Err(DomainError(TmpId(2))));
    }

    #[test]
    fn memory_normalizes_default_entries() {
        let m = Memory::new().set(addr(0), Value(5)).set(addr(1), Value(0));
        let n = Memory::new().set(addr(0), Value(5));
        assert_eq!(m, n);
        assert_eq!(m.get(addr(1)), Value(0));
        let back = m.set(addr(0), Value(0));
        assert_eq!(back, Memory::new());
    }

    #[test]
    fn checked_arithmetic_overflows_are_errors() {
        let e = TmpExpr::Binop(
            BinOp::Add,
            Box::new(TmpExpr::Const(Value(i64::MAX))),
            Box::new(TmpExpr::Const(Value(1))),
        );
        assert_eq!(e.eval(&Temporaries::new()), Err(EvalError::Overflow));
    }
}
