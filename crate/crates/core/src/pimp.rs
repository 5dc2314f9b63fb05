//! PIMP, a concurrent WHILE language that talks to the memory system by
//! issuing instructions and reading results back from temporaries.
//!
//! Programs make small steps: expression evaluation first issues the reads
//! it needs (numbered left to right from the thread's temporary counter),
//! then the statement rule fires once those temporaries are resolved.
//! Statements that must wait simply have no enabled step.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::mem::{
    eval_storeop, Address, BinOp, EvalError, MemInstr, OwnershipAnnotation, RetSpec, StoreOp,
    Temporaries, TmpExpr, TmpId, UnOp, Value,
};
use crate::sb::SbEntry;

/// PIMP expressions. `Tmp` is an intermediate form produced by transitions;
/// source programs never contain it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Expr {
    Const(Value),
    /// Memory lookup at a literal address.
    Mem(bool, Address),
    Tmp(StoreOp),
    Unop(UnOp, Box<Expr>),
    Binop(BinOp, Box<Expr>, Box<Expr>),
}

/// One element of an annotation set expression: a literal address or the
/// `addr` token standing for the evaluated target address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AddrSetItem {
    Lit(Address),
    Target,
}

/// Address-set expression used inside ownership annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct AddrSetExpr(pub Vec<AddrSetItem>);

impl AddrSetExpr {
    pub fn empty() -> AddrSetExpr {
        AddrSetExpr(Vec::new())
    }

    pub fn mentions_target(&self) -> bool {
        self.0.contains(&AddrSetItem::Target)
    }

    /// Evaluates against the target address of the enclosing operation.
    /// `Target` without a target is a front-end bug; parsers reject it.
    pub fn eval(&self, target: Option<Address>) -> BTreeSet<Address> {
        self.0
            .iter()
            .filter_map(|item| match item {
                AddrSetItem::Lit(a) => Some(*a),
                AddrSetItem::Target => target,
            })
            .collect()
    }
}

/// The four annotation set expressions of a write or CAS.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct AnnotationExprs {
    pub acquire: AddrSetExpr,
    pub local: AddrSetExpr,
    pub release: AddrSetExpr,
    pub writable: AddrSetExpr,
}

impl AnnotationExprs {
    pub fn empty() -> AnnotationExprs {
        AnnotationExprs::default()
    }

    pub fn eval(&self, target: Option<Address>) -> OwnershipAnnotation {
        OwnershipAnnotation {
            acquire: self.acquire.eval(target),
            local: self.local.eval(target),
            release: self.release.eval(target),
            writable: self.writable.eval(target),
        }
    }
}

/// PIMP statements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Stmt {
    Skip,
    Assign {
        volatile: bool,
        target: Box<Expr>,
        value: Box<Expr>,
        ann: AnnotationExprs,
    },
    Cas {
        addr: Box<Expr>,
        compare: Box<Expr>,
        swap: Box<Expr>,
        ann: AnnotationExprs,
    },
    Seq(Box<Stmt>, Box<Stmt>),
    Cond(Box<Expr>, Box<Stmt>, Box<Stmt>),
    While(Box<Expr>, Box<Stmt>),
    SGhost(AddrSetExpr, AddrSetExpr),
    SFence,
}

impl Stmt {
    pub fn seq(stmts: Vec<Stmt>) -> Stmt {
        let mut it = stmts.into_iter().rev();
        let Some(last) = it.next() else {
            return Stmt::Skip;
        };
        it.fold(last, |acc, s| Stmt::Seq(Box::new(s), Box::new(acc)))
    }
}

/// Program state: the statement plus the temporary counter. The counter
/// never decreases across steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ProgramState {
    pub stmt: Stmt,
    pub next_tmp: TmpId,
}

impl ProgramState {
    pub fn initial(stmt: Stmt) -> ProgramState {
        ProgramState {
            stmt,
            next_tmp: TmpId(0),
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.stmt == Stmt::Skip
    }
}

/// Number of temporaries needed to evaluate `e`: one per `Mem` leaf.
pub fn used_tmps(e: &Expr) -> u32 {
    match e {
        Expr::Const(_) | Expr::Tmp(_) => 0,
        Expr::Mem(_, _) => 1,
        Expr::Unop(_, e) => used_tmps(e),
        Expr::Binop(_, a, b) => used_tmps(a) + used_tmps(b),
    }
}

/// Read instructions for `e`, numbering temporaries left to right from `t`.
pub fn issue_expr(t: TmpId, e: &Expr) -> Vec<MemInstr> {
    match e {
        Expr::Const(_) | Expr::Tmp(_) => Vec::new(),
        Expr::Mem(volatile, a) => vec![MemInstr::Read {
            volatile: *volatile,
            addr: *a,
            tmp: t,
        }],
        Expr::Unop(_, e) => issue_expr(t, e),
        Expr::Binop(_, a, b) => {
            let mut is = issue_expr(t, a);
            is.extend(issue_expr(t.offset(used_tmps(a)), b));
            is
        }
    }
}

/// Store operation computing `e` from the temporaries issued by
/// [`issue_expr`] with the same starting counter.
pub fn eval_expr(t: TmpId, e: &Expr) -> StoreOp {
    match e {
        Expr::Const(v) => StoreOp::constant(*v),
        Expr::Mem(_, _) => StoreOp::closed(TmpExpr::Tmp(t)),
        Expr::Tmp(sop) => sop.clone(),
        Expr::Unop(op, e) => {
            let inner = eval_expr(t, e);
            StoreOp::new(
                inner.domain().clone(),
                TmpExpr::Unop(*op, Box::new(inner.expr().clone())),
            )
            .expect("unop preserves domain")
        }
        Expr::Binop(op, a, b) => {
            let fa = eval_expr(t, a);
            let fb = eval_expr(t.offset(used_tmps(a)), b);
            let domain: BTreeSet<TmpId> = fa.domain().union(fb.domain()).copied().collect();
            StoreOp::new(
                domain,
                TmpExpr::Binop(
                    *op,
                    Box::new(fa.expr().clone()),
                    Box::new(fb.expr().clone()),
                ),
            )
            .expect("binop domain is the union")
        }
    }
}

fn resolved(sop: &StoreOp, theta: &Temporaries) -> bool {
    sop.domain().iter().all(|t| theta.contains(*t))
}

/// One program step: all `(p', issued instructions)` successors enabled at
/// `(θ, p)`. Empty when the program is `Skip` or has to wait for pending
/// reads to resolve.
pub fn step(
    theta: &Temporaries,
    p: &ProgramState,
) -> Result<Vec<(ProgramState, Vec<MemInstr>)>, EvalError> {
    let t = p.next_tmp;
    let out = match &p.stmt {
        Stmt::Skip => Vec::new(),

        Stmt::Assign {
            volatile,
            target,
            value,
            ann,
        } => match target.as_ref() {
            Expr::Tmp(addr_sop) => {
                if !resolved(addr_sop, theta) {
                    return Ok(Vec::new());
                }
                let a = eval_storeop(addr_sop, theta)?.to_address()?;
                let is = {
                    let mut is = issue_expr(t, value);
                    is.push(MemInstr::Write {
                        volatile: *volatile,
                        addr: a,
                        sop: eval_expr(t, value),
                        ann: ann.eval(Some(a)),
                    });
                    is
                };
                vec![(
                    ProgramState {
                        stmt: Stmt::Skip,
                        next_tmp: t.offset(used_tmps(value)),
                    },
                    is,
                )]
            }
            _ => vec![(
                ProgramState {
                    stmt: Stmt::Assign {
                        volatile: *volatile,
                        target: Box::new(Expr::Tmp(eval_expr(t, target))),
                        value: value.clone(),
                        ann: ann.clone(),
                    },
                    next_tmp: t.offset(used_tmps(target)),
                },
                issue_expr(t, target),
            )],
        },

        Stmt::Cas {
            addr,
            compare,
            swap,
            ann,
        } => match (addr.as_ref(), compare.as_ref()) {
            (Expr::Tmp(addr_sop), Expr::Tmp(cmp_sop)) => {
                if !resolved(addr_sop, theta) || !resolved(cmp_sop, theta) {
                    return Ok(Vec::new());
                }
                let a = eval_storeop(addr_sop, theta)?.to_address()?;
                let cmp = eval_storeop(cmp_sop, theta)?;
                let swap_sop = eval_expr(t, swap);
                let loaded = t.offset(used_tmps(swap));
                let cond = StoreOp::closed(TmpExpr::Binop(
                    BinOp::Eq,
                    Box::new(TmpExpr::Tmp(loaded)),
                    Box::new(TmpExpr::Const(cmp)),
                ));
                let is = {
                    let mut is = issue_expr(t, swap);
                    is.push(MemInstr::Rmw {
                        addr: a,
                        tmp: loaded,
                        sop: swap_sop,
                        cond,
                        ret: RetSpec::Old,
                        ann: ann.eval(Some(a)),
                    });
                    is
                };
                vec![(
                    ProgramState {
                        stmt: Stmt::Skip,
                        next_tmp: loaded.offset(1),
                    },
                    is,
                )]
            }
            (Expr::Tmp(_), _) => vec![(
                ProgramState {
                    stmt: Stmt::Cas {
                        addr: addr.clone(),
                        compare: Box::new(Expr::Tmp(eval_expr(t, compare))),
                        swap: swap.clone(),
                        ann: ann.clone(),
                    },
                    next_tmp: t.offset(used_tmps(compare)),
                },
                issue_expr(t, compare),
            )],
            _ => vec![(
                ProgramState {
                    stmt: Stmt::Cas {
                        addr: Box::new(Expr::Tmp(eval_expr(t, addr))),
                        compare: compare.clone(),
                        swap: swap.clone(),
                        ann: ann.clone(),
                    },
                    next_tmp: t.offset(used_tmps(addr)),
                },
                issue_expr(t, addr),
            )],
        },

        Stmt::Seq(s1, s2) => {
            if **s1 == Stmt::Skip {
                vec![(
                    ProgramState {
                        stmt: (**s2).clone(),
                        next_tmp: t,
                    },
                    Vec::new(),
                )]
            } else {
                let sub = ProgramState {
                    stmt: (**s1).clone(),
                    next_tmp: t,
                };
                step(theta, &sub)?
                    .into_iter()
                    .map(|(p1, is)| {
                        (
                            ProgramState {
                                stmt: Stmt::Seq(Box::new(p1.stmt), s2.clone()),
                                next_tmp: p1.next_tmp,
                            },
                            is,
                        )
                    })
                    .collect()
            }
        }

        Stmt::Cond(e, s1, s2) => match e.as_ref() {
            Expr::Tmp(sop) => {
                if !resolved(sop, theta) {
                    return Ok(Vec::new());
                }
                let branch = if eval_storeop(sop, theta)?.is_true() {
                    s1
                } else {
                    s2
                };
                vec![(
                    ProgramState {
                        stmt: (**branch).clone(),
                        next_tmp: t,
                    },
                    Vec::new(),
                )]
            }
            _ => vec![(
                ProgramState {
                    stmt: Stmt::Cond(
                        Box::new(Expr::Tmp(eval_expr(t, e))),
                        s1.clone(),
                        s2.clone(),
                    ),
                    next_tmp: t.offset(used_tmps(e)),
                },
                issue_expr(t, e),
            )],
        },

        Stmt::While(e, s) => vec![(
            ProgramState {
                stmt: Stmt::Cond(
                    e.clone(),
                    Box::new(Stmt::Seq(s.clone(), Box::new(Stmt::While(e.clone(), s.clone())))),
                    Box::new(Stmt::Skip),
                ),
                next_tmp: t,
            },
            Vec::new(),
        )],

        Stmt::SGhost(acquire, local) => vec![(
            ProgramState {
                stmt: Stmt::Skip,
                next_tmp: t,
            },
            vec![MemInstr::Ghost {
                acquire: acquire.eval(None),
                local: local.eval(None),
            }],
        )],

        Stmt::SFence => vec![(
            ProgramState {
                stmt: Stmt::Skip,
                next_tmp: t,
            },
            vec![MemInstr::Fence],
        )],
    };
    Ok(out)
}

fn stmt_tmp_domains(stmt: &Stmt, out: &mut Vec<TmpId>) {
    let mut expr = |e: &Expr| collect_expr_tmps(e, out);
    match stmt {
        Stmt::Skip | Stmt::SFence | Stmt::SGhost(_, _) => {}
        Stmt::Assign { target, value, .. } => {
            expr(target);
            expr(value);
        }
        Stmt::Cas {
            addr,
            compare,
            swap,
            ..
        } => {
            expr(addr);
            expr(compare);
            expr(swap);
        }
        Stmt::Seq(a, b) => {
            stmt_tmp_domains(a, out);
            stmt_tmp_domains(b, out);
        }
        Stmt::Cond(e, a, b) => {
            expr(e);
            stmt_tmp_domains(a, out);
            stmt_tmp_domains(b, out);
        }
        Stmt::While(e, s) => {
            expr(e);
            stmt_tmp_domains(s, out);
        }
    }
}

fn collect_expr_tmps(e: &Expr, out: &mut Vec<TmpId>) {
    match e {
        Expr::Const(_) | Expr::Mem(_, _) => {}
        Expr::Tmp(sop) => {
            out.extend(sop.domain().iter().copied());
            out.extend(sop.expr().tmps());
        }
        Expr::Unop(_, e) => collect_expr_tmps(e, out),
        Expr::Binop(_, a, b) => {
            collect_expr_tmps(a, out);
            collect_expr_tmps(b, out);
        }
    }
}

fn instr_tmps(i: &MemInstr, out: &mut Vec<TmpId>) {
    match i {
        MemInstr::Read { tmp, .. } => out.push(*tmp),
        MemInstr::Write { sop, .. } => {
            out.extend(sop.domain().iter().copied());
        }
        MemInstr::Rmw { tmp, sop, cond, .. } => {
            out.push(*tmp);
            out.extend(sop.domain().iter().copied());
            out.extend(cond.domain().iter().copied());
        }
        MemInstr::Fence | MemInstr::Ghost { .. } => {}
    }
}

/// The per-thread counter conditions PIMP adds to the machine invariant:
/// every temporary mentioned anywhere sits below the counter, and every
/// temporary below the counter is defined or still outstanding as a read.
pub fn valid_thread(
    p: &ProgramState,
    instrs: &[MemInstr],
    theta: &Temporaries,
    sb: &[SbEntry],
) -> bool {
    let bound = p.next_tmp;

    let mut mentioned = Vec::new();
    stmt_tmp_domains(&p.stmt, &mut mentioned);
    if mentioned.iter().any(|t| *t >= bound) {
        return false;
    }

    let mut sys = Vec::new();
    for i in instrs {
        instr_tmps(i, &mut sys);
    }
    for entry in sb {
        match entry {
            SbEntry::Read { tmp, .. } => sys.push(*tmp),
            SbEntry::Write { sop, .. } => sys.extend(sop.domain().iter().copied()),
            SbEntry::Prog { issued, .. } => {
                for i in issued {
                    instr_tmps(i, &mut sys);
                }
            }
            SbEntry::Ghost { .. } => {}
        }
    }
    if sys.iter().any(|t| *t >= bound) {
        return false;
    }

    let outstanding: BTreeSet<TmpId> = instrs.iter().filter_map(|i| i.target_tmp()).collect();
    (0..bound.0).all(|n| {
        let t = TmpId(n);
        theta.contains(t) || outstanding.contains(&t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(a: u32) -> Expr {
        Expr::Mem(false, Address(a))
    }

    fn plus(a: Expr, b: Expr) -> Expr {
        Expr::Binop(BinOp::Add, Box::new(a), Box::new(b))
    }

    #[test]
    fn used_tmps_counts_mem_leaves() {
        assert_eq!(used_tmps(&Expr::Const(Value(1))), 0);
        assert_eq!(used_tmps(&mem(0)), 1);
        assert_eq!(used_tmps(&plus(mem(0), mem(1))), 2);
    }

    #[test]
    fn issue_expr_numbers_reads_left_to_right() {
        assert_eq!(issue_expr(TmpId(0), &Expr::Const(Value(5))), vec![]);
        assert_eq!(
            issue_expr(TmpId(0), &Expr::Mem(true, Address(0))),
            vec![MemInstr::Read {
                volatile: true,
                addr: Address(0),
                tmp: TmpId(0)
            }]
        );
        assert_eq!(
            issue_expr(TmpId(0), &plus(mem(0), mem(1))),
            vec![
                MemInstr::Read {
                    volatile: false,
                    addr: Address(0),
                    tmp: TmpId(0)
                },
                MemInstr::Read {
                    volatile: false,
                    addr: Address(1),
                    tmp: TmpId(1)
                },
            ]
        );
    }

    #[test]
    fn eval_expr_builds_matching_storeops() {
        assert_eq!(
            eval_expr(TmpId(0), &Expr::Const(Value(5))),
            StoreOp::constant(Value(5))
        );
        assert_eq!(
            eval_expr(TmpId(0), &mem(3)),
            StoreOp::closed(TmpExpr::Tmp(TmpId(0)))
        );
        let sop = eval_expr(TmpId(0), &plus(mem(0), mem(1)));
        assert_eq!(
            sop.domain().iter().copied().collect::<Vec<_>>(),
            vec![TmpId(0), TmpId(1)]
        );
        let theta: Temporaries = [(TmpId(0), Value(1)), (TmpId(1), Value(2))]
            .into_iter()
            .collect();
        assert_eq!(eval_storeop(&sop, &theta), Ok(Value(3)));
    }

    #[test]
    fn while_unfolds_to_cond() {
        let loop_stmt = Stmt::While(Box::new(Expr::Const(Value(0))), Box::new(Stmt::SFence));
        let p = ProgramState::initial(loop_stmt.clone());
        let succs = step(&Temporaries::new(), &p).unwrap();
        assert_eq!(succs.len(), 1);
        let (p1, is) = &succs[0];
        assert!(is.is_empty());
        match &p1.stmt {
            Stmt::Cond(_, body, alt) => {
                assert!(matches!(**body, Stmt::Seq(_, _)));
                assert_eq!(**alt, Stmt::Skip);
            }
            other => panic!("expected Cond, got {other:?}"),
        }
        assert_eq!(p1.next_tmp, TmpId(0));
    }

    #[test]
    fn assign_with_staged_address_writes_in_one_step() {
        // target already staged to Tmp(∅, const 4): one step to Skip + Write
        let p = ProgramState::initial(Stmt::Assign {
            volatile: false,
            target: Box::new(Expr::Tmp(StoreOp::constant(Value(4)))),
            value: Box::new(Expr::Const(Value(1))),
            ann: AnnotationExprs::empty(),
        });
        let succs = step(&Temporaries::new(), &p).unwrap();
        assert_eq!(succs.len(), 1);
        let (p1, is) = &succs[0];
        assert_eq!(p1.stmt, Stmt::Skip);
        assert_eq!(p1.next_tmp, TmpId(0));
        assert_eq!(
            is,
            &vec![MemInstr::Write {
                volatile: false,
                addr: Address(4),
                sop: StoreOp::constant(Value(1)),
                ann: OwnershipAnnotation::empty(),
            }]
        );
    }

    #[test]
    fn cond_on_false_temporary_takes_else_branch() {
        let theta: Temporaries = [(TmpId(0), Value(0))].into_iter().collect();
        let p = ProgramState {
            stmt: Stmt::Cond(
                Box::new(Expr::Tmp(StoreOp::closed(TmpExpr::Tmp(TmpId(0))))),
                Box::new(Stmt::SFence),
                Box::new(Stmt::Skip),
            ),
            next_tmp: TmpId(1),
        };
        let succs = step(&theta, &p).unwrap();
        assert_eq!(succs.len(), 1);
        assert_eq!(succs[0].0.stmt, Stmt::Skip);
        assert!(succs[0].1.is_empty());
    }

    #[test]
    fn cond_with_unresolved_domain_waits() {
        let p = ProgramState {
            stmt: Stmt::Cond(
                Box::new(Expr::Tmp(StoreOp::closed(TmpExpr::Tmp(TmpId(0))))),
                Box::new(Stmt::Skip),
                Box::new(Stmt::Skip),
            ),
            next_tmp: TmpId(1),
        };
        assert!(step(&Temporaries::new(), &p).unwrap().is_empty());
    }

    #[test]
    fn skip_has_no_step() {
        let p = ProgramState::initial(Stmt::Skip);
        assert!(step(&Temporaries::new(), &p).unwrap().is_empty());
    }

    #[test]
    fn cas_stages_then_issues_rmw() {
        // cas [a5] (0 -> 1): address stage, compare stage, then RMW issue.
        let p0 = ProgramState::initial(Stmt::Cas {
            addr: Box::new(Expr::Const(Value(5))),
            compare: Box::new(Expr::Const(Value(0))),
            swap: Box::new(Expr::Const(Value(1))),
            ann: AnnotationExprs::empty(),
        });
        let theta = Temporaries::new();
        let (p1, is1) = step(&theta, &p0).unwrap().remove(0);
        assert!(is1.is_empty());
        let (p2, is2) = step(&theta, &p1).unwrap().remove(0);
        assert!(is2.is_empty());
        let (p3, is3) = step(&theta, &p2).unwrap().remove(0);
        assert_eq!(p3.stmt, Stmt::Skip);
        assert_eq!(p3.next_tmp, TmpId(1));
        assert_eq!(is3.len(), 1);
        match &is3[0] {
            MemInstr::Rmw {
                addr,
                tmp,
                sop,
                cond,
                ret,
                ..
            } => {
                assert_eq!(*addr, Address(5));
                assert_eq!(*tmp, TmpId(0));
                assert_eq!(*sop, StoreOp::constant(Value(1)));
                let with_zero: Temporaries = [(TmpId(0), Value(0))].into_iter().collect();
                let with_one: Temporaries = [(TmpId(0), Value(7))].into_iter().collect();
                assert!(eval_storeop(cond, &with_zero).unwrap().is_true());
                assert!(!eval_storeop(cond, &with_one).unwrap().is_true());
                assert_eq!(*ret, RetSpec::Old);
            }
            other => panic!("expected Rmw, got {other:?}"),
        }
    }

    #[test]
    fn counter_freshness_across_steps() {
        // [a0] := [a1] + [a2]: staged address, then two reads numbered t0,t1.
        let p0 = ProgramState::initial(Stmt::Assign {
            volatile: false,
            target: Box::new(Expr::Const(Value(0))),
            value: Box::new(plus(mem(1), mem(2))),
            ann: AnnotationExprs::empty(),
        });
        let theta = Temporaries::new();
        let (p1, is1) = step(&theta, &p0).unwrap().remove(0);
        assert!(is1.is_empty());
        assert_eq!(p1.next_tmp, TmpId(0));
        let (p2, is2) = step(&theta, &p1).unwrap().remove(0);
        assert_eq!(p2.next_tmp, TmpId(2));
        let targets: Vec<TmpId> = is2.iter().filter_map(|i| i.target_tmp()).collect();
        assert_eq!(targets, vec![TmpId(0), TmpId(1)]);
    }
}
