//! The litmus file format: memory, sharing and ownership declarations,
//! thread bodies in concrete PIMP syntax, observables, and expectation
//! clauses. Parsing yields an AST plus the initial configurations of both
//! machines; printing round-trips parsed files.
//!
//! Accesses are bracketed: `[x]` non-volatile, `[x]v` volatile. Assignment
//! targets may be loads (`[[p]] := 1` stores through the pointer at `p`).
//! Annotation blocks `{A{..} L{..} R{..} W{..}}` default to all-empty and
//! may use `addr` for the evaluated target address.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Global, SbGlobal, Thread, VmGlobal};
use crate::mem::{Address, BinOp, GhostState, Memory, SharingMap, Temporaries, UnOp, Value};
use crate::pimp::{AddrSetExpr, AddrSetItem, AnnotationExprs, Expr, ProgramState, Stmt};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at {line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("declaration error: {0}")]
pub struct DeclError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LitmusError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Decl(#[from] DeclError),
}

/// Machine selector in expectation clauses and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MachineSel {
    Sb,
    Vm,
}

impl MachineSel {
    pub fn as_str(self) -> &'static str {
        match self {
            MachineSel::Sb => "sb",
            MachineSel::Vm => "vm",
        }
    }
}

/// Predicate over final observable values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Pred {
    Const(i64),
    Var(String),
    Unop(UnOp, Box<Pred>),
    Binop(BinOp, Box<Pred>, Box<Pred>),
}

impl Pred {
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Pred::Const(_) => {}
            Pred::Var(v) => {
                out.insert(v.clone());
            }
            Pred::Unop(_, p) => p.collect_vars(out),
            Pred::Binop(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn eval(&self, env: &BTreeMap<String, i64>) -> bool {
        self.eval_value(env) != 0
    }

    fn eval_value(&self, env: &BTreeMap<String, i64>) -> i64 {
        match self {
            Pred::Const(n) => *n,
            Pred::Var(v) => env.get(v).copied().unwrap_or(0),
            Pred::Unop(op, p) => op.apply(Value(p.eval_value(env))).0,
            Pred::Binop(op, a, b) => op
                .apply(Value(a.eval_value(env)), Value(b.eval_value(env)))
                .map(|v| v.0)
                .unwrap_or(0),
        }
    }
}

/// One expectation clause from the file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Expectation {
    Allow {
        machine: Option<MachineSel>,
        pred: Pred,
    },
    Forbid {
        machine: Option<MachineSel>,
        pred: Pred,
    },
    /// `expect safe` / `expect unsafe`
    Safety(bool),
    /// `expect sc` / `expect not sc`
    Sc(bool),
    /// `expect inv` / `expect not inv`
    Invariants(bool),
}

/// A parsed litmus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LitmusFile {
    pub name: String,
    pub mem_decls: Vec<(String, i64)>,
    pub shared_rw: Vec<String>,
    pub shared_ro: Vec<String>,
    pub owns: Vec<(String, Vec<String>)>,
    pub observe: Vec<String>,
    pub threads: Vec<(String, Stmt)>,
    pub expects: Vec<Expectation>,
}

/// Initial configurations and the symbol table derived from a litmus file.
#[derive(Debug, Clone)]
pub struct Built {
    pub sb_init: SbGlobal,
    pub vm_init: VmGlobal,
    pub observables: BTreeSet<Address>,
    pub names: Vec<String>,
}

impl Built {
    pub fn name_of(&self, a: Address) -> String {
        self.names
            .get(a.0 as usize)
            .cloned()
            .unwrap_or_else(|| format!("a{}", a.0))
    }

    /// Outcome translated to symbolic names for display.
    pub fn named_outcome(&self, outcome: &crate::explore::Outcome) -> BTreeMap<String, i64> {
        outcome
            .0
            .iter()
            .map(|(a, v)| (self.name_of(*a), v.0))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Lexed {
    tok: Tok,
    line: u32,
    col: u32,
}

fn lex(src: &str) -> Result<Vec<Lexed>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1u32;
    let mut col = 1u32;
    let mut chars = src.chars().peekable();

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '/' => {
                bump!();
                if chars.peek() == Some(&'/') {
                    while let Some(&c) = chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        bump!();
                    }
                } else {
                    return Err(ParseError {
                        line: tline,
                        col: tcol,
                        msg: "stray '/' (use // or # for comments)".into(),
                    });
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        s.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                out.push(Lexed {
                    tok: Tok::Ident(s),
                    line: tline,
                    col: tcol,
                });
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() {
                        s.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                let n: i64 = s.parse().map_err(|_| ParseError {
                    line: tline,
                    col: tcol,
                    msg: format!("integer literal '{s}' out of range"),
                })?;
                out.push(Lexed {
                    tok: Tok::Int(n),
                    line: tline,
                    col: tcol,
                });
            }
            _ => {
                bump!();
                let two = |chars: &mut std::iter::Peekable<std::str::Chars>, want: char| {
                    chars.peek() == Some(&want)
                };
                let sym: &'static str = match c {
                    '{' => "{",
                    '}' => "}",
                    '(' => "(",
                    ')' => ")",
                    '[' => "[",
                    ']' => "]",
                    ';' => ";",
                    ',' => ",",
                    '+' => "+",
                    '<' => "<",
                    '-' => {
                        if two(&mut chars, '>') {
                            bump!();
                            "->"
                        } else {
                            "-"
                        }
                    }
                    ':' => {
                        if two(&mut chars, '=') {
                            bump!();
                            ":="
                        } else {
                            return Err(ParseError {
                                line: tline,
                                col: tcol,
                                msg: "expected ':='".into(),
                            });
                        }
                    }
                    '=' => {
                        if two(&mut chars, '=') {
                            bump!();
                            "=="
                        } else {
                            "="
                        }
                    }
                    '!' => {
                        if two(&mut chars, '=') {
                            bump!();
                            "!="
                        } else {
                            "!"
                        }
                    }
                    '&' => {
                        if two(&mut chars, '&') {
                            bump!();
                            "&&"
                        } else {
                            return Err(ParseError {
                                line: tline,
                                col: tcol,
                                msg: "expected '&&'".into(),
                            });
                        }
                    }
                    '|' => {
                        if two(&mut chars, '|') {
                            bump!();
                            "||"
                        } else {
                            return Err(ParseError {
                                line: tline,
                                col: tcol,
                                msg: "expected '||'".into(),
                            });
                        }
                    }
                    other => {
                        return Err(ParseError {
                            line: tline,
                            col: tcol,
                            msg: format!("unexpected character '{other}'"),
                        })
                    }
                };
                out.push(Lexed {
                    tok: Tok::Sym(sym),
                    line: tline,
                    col: tcol,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser {
    toks: Vec<Lexed>,
    pos: usize,
    addrs: BTreeMap<String, Address>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|l| &l.tok)
    }

    fn here(&self) -> (u32, u32) {
        self.toks
            .get(self.pos)
            .map(|l| (l.line, l.col))
            .unwrap_or_else(|| {
                self.toks
                    .last()
                    .map(|l| (l.line, l.col + 1))
                    .unwrap_or((1, 1))
            })
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn eat_sym(&mut self, s: &'static str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Sym(t)) if *t == s => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected '{s}'"))),
        }
    }

    fn try_sym(&mut self, s: &'static str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(t)) if *t == s) && {
            self.pos += 1;
            true
        }
    }

    fn try_kw(&mut self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) && {
            self.pos += 1;
            true
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err("expected identifier")),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match self.peek() {
            Some(Tok::Int(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => Err(self.err("expected integer")),
        }
    }

    fn lookup_addr(&self, name: &str) -> Result<Address, ParseError> {
        self.addrs
            .get(name)
            .copied()
            .ok_or_else(|| self.err(format!("undeclared address '{name}'")))
    }

    fn name_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.eat_sym("{")?;
        let mut out = Vec::new();
        while !self.try_sym("}") {
            out.push(self.ident()?);
            self.eat_sym(";")?;
        }
        Ok(out)
    }

    // address-set expression: { item (, item)* } with items name | addr
    fn addr_set(&mut self, allow_target: bool) -> Result<AddrSetExpr, ParseError> {
        self.eat_sym("{")?;
        let mut items = Vec::new();
        loop {
            if self.try_sym("}") {
                break;
            }
            if !items.is_empty() {
                self.eat_sym(",")?;
            }
            let name = self.ident()?;
            if name == "addr" {
                if !allow_target {
                    return Err(self.err("'addr' has no target here"));
                }
                items.push(AddrSetItem::Target);
            } else {
                items.push(AddrSetItem::Lit(self.lookup_addr(&name)?));
            }
        }
        Ok(AddrSetExpr(items))
    }

    fn annotation(&mut self) -> Result<AnnotationExprs, ParseError> {
        if !matches!(self.peek(), Some(Tok::Sym("{"))) {
            return Ok(AnnotationExprs::empty());
        }
        self.eat_sym("{")?;
        let mut ann = AnnotationExprs::empty();
        for (kw, slot) in [("A", 0), ("L", 1), ("R", 2), ("W", 3)] {
            if !self.try_kw(kw) {
                return Err(self.err(format!("expected annotation set '{kw}'")));
            }
            let set = self.addr_set(true)?;
            match slot {
                0 => ann.acquire = set,
                1 => ann.local = set,
                2 => ann.release = set,
                _ => ann.writable = set,
            }
        }
        self.eat_sym("}")?;
        Ok(ann)
    }

    // address expression inside brackets: a name (literal address) or a
    // nested load of a name
    fn addr_expr(&mut self) -> Result<Expr, ParseError> {
        if self.try_sym("[") {
            let name = self.ident()?;
            let a = self.lookup_addr(&name)?;
            self.eat_sym("]")?;
            let volatile = self.try_kw("v");
            Ok(Expr::Mem(volatile, a))
        } else {
            let name = self.ident()?;
            let a = self.lookup_addr(&name)?;
            Ok(Expr::Const(Value(a.0 as i64)))
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Int(_)) => Ok(Expr::Const(Value(self.int()?))),
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.eat_sym(")")?;
                Ok(e)
            }
            Some(Tok::Sym("[")) => {
                self.pos += 1;
                let inner = self.addr_expr()?;
                self.eat_sym("]")?;
                let volatile = self.try_kw("v");
                match inner {
                    Expr::Const(v) => Ok(Expr::Mem(volatile, Value(v.0).to_address().unwrap())),
                    _ => Err(self.err("loads take a plain address name")),
                }
            }
            Some(Tok::Sym("!")) => {
                self.pos += 1;
                Ok(Expr::Unop(UnOp::Not, Box::new(self.primary()?)))
            }
            _ => Err(self.err("expected expression")),
        }
    }

    fn binary(&mut self, min_level: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.primary()?;
        loop {
            let (op, level) = match self.peek() {
                Some(Tok::Sym("||")) => (BinOp::Or, 1),
                Some(Tok::Sym("&&")) => (BinOp::And, 2),
                Some(Tok::Sym("==")) => (BinOp::Eq, 3),
                Some(Tok::Sym("!=")) => (BinOp::Ne, 3),
                Some(Tok::Sym("<")) => (BinOp::Lt, 3),
                Some(Tok::Sym("+")) => (BinOp::Add, 4),
                Some(Tok::Sym("-")) => (BinOp::Sub, 4),
                _ => break,
            };
            if level < min_level {
                break;
            }
            self.pos += 1;
            let rhs = self.binary(level + 1)?;
            lhs = Expr::Binop(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(1)
    }

    fn block(&mut self) -> Result<Stmt, ParseError> {
        self.eat_sym("{")?;
        let mut stmts = Vec::new();
        while !self.try_sym("}") {
            stmts.push(self.stmt()?);
        }
        Ok(Stmt::seq(stmts))
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        if self.try_kw("fence") {
            self.eat_sym(";")?;
            return Ok(Stmt::SFence);
        }
        if self.try_kw("ghost") {
            if !self.try_kw("A") {
                return Err(self.err("expected 'A' set"));
            }
            let acquire = self.addr_set(false)?;
            if !self.try_kw("L") {
                return Err(self.err("expected 'L' set"));
            }
            let local = self.addr_set(false)?;
            self.eat_sym(";")?;
            return Ok(Stmt::SGhost(acquire, local));
        }
        if self.try_kw("cas") {
            self.eat_sym("[")?;
            let target = self.addr_expr()?;
            self.eat_sym("]")?;
            let _ = self.try_kw("v"); // interlocked accesses are volatile by nature
            self.eat_sym("(")?;
            let compare = self.expr()?;
            self.eat_sym("->")?;
            let swap = self.expr()?;
            self.eat_sym(")")?;
            let ann = self.annotation()?;
            self.eat_sym(";")?;
            return Ok(Stmt::Cas {
                addr: Box::new(target),
                compare: Box::new(compare),
                swap: Box::new(swap),
                ann,
            });
        }
        if self.try_kw("if") {
            self.eat_sym("(")?;
            let cond = self.expr()?;
            self.eat_sym(")")?;
            let then = self.block()?;
            let alt = if self.try_kw("else") {
                self.block()?
            } else {
                Stmt::Skip
            };
            let _ = self.try_sym(";");
            return Ok(Stmt::Cond(Box::new(cond), Box::new(then), Box::new(alt)));
        }
        if self.try_kw("while") {
            self.eat_sym("(")?;
            let cond = self.expr()?;
            self.eat_sym(")")?;
            let body = self.block()?;
            let _ = self.try_sym(";");
            return Ok(Stmt::While(Box::new(cond), Box::new(body)));
        }
        if self.try_sym("[") {
            let target = self.addr_expr()?;
            self.eat_sym("]")?;
            let volatile = self.try_kw("v");
            self.eat_sym(":=")?;
            let value = self.expr()?;
            let ann = self.annotation()?;
            self.eat_sym(";")?;
            return Ok(Stmt::Assign {
                volatile,
                target: Box::new(target),
                value: Box::new(value),
                ann,
            });
        }
        Err(self.err("expected statement"))
    }

    fn pred_primary(&mut self) -> Result<Pred, ParseError> {
        match self.peek() {
            Some(Tok::Int(_)) => Ok(Pred::Const(self.int()?)),
            Some(Tok::Ident(_)) => Ok(Pred::Var(self.ident()?)),
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let p = self.pred()?;
                self.eat_sym(")")?;
                Ok(p)
            }
            Some(Tok::Sym("!")) => {
                self.pos += 1;
                Ok(Pred::Unop(UnOp::Not, Box::new(self.pred_primary()?)))
            }
            _ => Err(self.err("expected predicate")),
        }
    }

    fn pred_binary(&mut self, min_level: u8) -> Result<Pred, ParseError> {
        let mut lhs = self.pred_primary()?;
        loop {
            let (op, level) = match self.peek() {
                Some(Tok::Sym("||")) => (BinOp::Or, 1),
                Some(Tok::Sym("&&")) => (BinOp::And, 2),
                Some(Tok::Sym("==")) => (BinOp::Eq, 3),
                Some(Tok::Sym("!=")) => (BinOp::Ne, 3),
                Some(Tok::Sym("<")) => (BinOp::Lt, 3),
                Some(Tok::Sym("+")) => (BinOp::Add, 4),
                Some(Tok::Sym("-")) => (BinOp::Sub, 4),
                _ => break,
            };
            if level < min_level {
                break;
            }
            self.pos += 1;
            let rhs = self.pred_binary(level + 1)?;
            lhs = Pred::Binop(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn pred(&mut self) -> Result<Pred, ParseError> {
        self.pred_binary(1)
    }

    fn machine_sel(&mut self) -> Option<MachineSel> {
        if self.try_kw("sb") {
            Some(MachineSel::Sb)
        } else if self.try_kw("vm") {
            Some(MachineSel::Vm)
        } else {
            None
        }
    }
}

/// Parses litmus source. `fallback_name` names the file when it carries no
/// `name` declaration.
pub fn parse(src: &str, fallback_name: &str) -> Result<LitmusFile, LitmusError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        addrs: BTreeMap::new(),
    };

    let mut file = LitmusFile {
        name: fallback_name.to_string(),
        mem_decls: Vec::new(),
        shared_rw: Vec::new(),
        shared_ro: Vec::new(),
        owns: Vec::new(),
        observe: Vec::new(),
        threads: Vec::new(),
        expects: Vec::new(),
    };

    while p.peek().is_some() {
        if p.try_kw("name") {
            file.name = p.ident()?;
            p.eat_sym(";")?;
        } else if p.try_kw("mem") {
            p.eat_sym("{")?;
            while !p.try_sym("}") {
                let name = p.ident()?;
                p.eat_sym("=")?;
                let init = p.int()?;
                p.eat_sym(";")?;
                if p.addrs.contains_key(&name) {
                    return Err(DeclError(format!("address '{name}' declared twice")).into());
                }
                let a = Address(file.mem_decls.len() as u32);
                p.addrs.insert(name.clone(), a);
                file.mem_decls.push((name, init));
            }
        } else if p.try_kw("shared") {
            let rw = if p.try_kw("rw") {
                true
            } else if p.try_kw("ro") {
                false
            } else {
                return Err(p.err("expected 'rw' or 'ro'").into());
            };
            let names = p.name_list()?;
            for n in &names {
                p.lookup_addr(n)?;
            }
            if rw {
                file.shared_rw.extend(names);
            } else {
                file.shared_ro.extend(names);
            }
        } else if p.try_kw("owns") {
            let thread = p.ident()?;
            let names = p.name_list()?;
            for n in &names {
                p.lookup_addr(n)?;
            }
            file.owns.push((thread, names));
        } else if p.try_kw("observe") {
            let names = p.name_list()?;
            for n in &names {
                p.lookup_addr(n)?;
            }
            file.observe.extend(names);
        } else if p.try_kw("thread") {
            let name = p.ident()?;
            let body = p.block()?;
            file.threads.push((name, body));
        } else if p.try_kw("allow") {
            let machine = p.machine_sel();
            p.eat_sym("(")?;
            let pred = p.pred()?;
            p.eat_sym(")")?;
            p.eat_sym(";")?;
            file.expects.push(Expectation::Allow { machine, pred });
        } else if p.try_kw("forbid") {
            let machine = p.machine_sel();
            p.eat_sym("(")?;
            let pred = p.pred()?;
            p.eat_sym(")")?;
            p.eat_sym(";")?;
            file.expects.push(Expectation::Forbid { machine, pred });
        } else if p.try_kw("expect") {
            let e = if p.try_kw("safe") {
                Expectation::Safety(true)
            } else if p.try_kw("unsafe") {
                Expectation::Safety(false)
            } else if p.try_kw("not") {
                if p.try_kw("sc") {
                    Expectation::Sc(false)
                } else if p.try_kw("inv") {
                    Expectation::Invariants(false)
                } else {
                    return Err(p.err("expected 'sc' or 'inv' after 'not'").into());
                }
            } else if p.try_kw("sc") {
                Expectation::Sc(true)
            } else if p.try_kw("inv") {
                Expectation::Invariants(true)
            } else {
                return Err(p
                    .err("expected 'safe', 'unsafe', 'sc', 'inv', or 'not ...'")
                    .into());
            };
            p.eat_sym(";")?;
            file.expects.push(e);
        } else {
            return Err(p.err("expected a declaration or thread").into());
        }
    }

    validate(&file)?;
    Ok(file)
}

fn validate(file: &LitmusFile) -> Result<(), DeclError> {
    let declared: BTreeSet<&str> = file.mem_decls.iter().map(|(n, _)| n.as_str()).collect();

    let mut shared: BTreeSet<&str> = BTreeSet::new();
    for n in file.shared_rw.iter().chain(file.shared_ro.iter()) {
        if !shared.insert(n) {
            return Err(DeclError(format!("address '{n}' declared shared twice")));
        }
    }

    let thread_names: BTreeSet<&str> = file.threads.iter().map(|(n, _)| n.as_str()).collect();
    let mut owned: BTreeMap<&str, &str> = BTreeMap::new();
    for (thread, addrs) in &file.owns {
        if !thread_names.contains(thread.as_str()) {
            return Err(DeclError(format!("'owns {thread}' names an unknown thread")));
        }
        for a in addrs {
            if let Some(prev) = owned.insert(a, thread) {
                return Err(DeclError(format!(
                    "address '{a}' owned by both '{prev}' and '{thread}'"
                )));
            }
        }
    }

    for n in file.shared_ro.iter() {
        if owned.contains_key(n.as_str()) {
            return Err(DeclError(format!("read-only address '{n}' must be unowned")));
        }
    }

    // every unowned address must be shared
    for n in &declared {
        if !owned.contains_key(*n) && !shared.contains(*n) {
            return Err(DeclError(format!(
                "address '{n}' is neither owned nor shared"
            )));
        }
    }

    if file.threads.is_empty() {
        return Err(DeclError("no threads declared".into()));
    }

    let observable: BTreeSet<&str> = if file.observe.is_empty() {
        declared
    } else {
        file.observe.iter().map(|s| s.as_str()).collect()
    };
    for e in &file.expects {
        if let Expectation::Allow { pred, .. } | Expectation::Forbid { pred, .. } = e {
            for v in pred.vars() {
                if !observable.contains(v.as_str()) {
                    return Err(DeclError(format!(
                        "expectation mentions '{v}' which is not observable"
                    )));
                }
            }
        }
    }
    Ok(())
}

impl LitmusFile {
    pub fn addr_of(&self, name: &str) -> Option<Address> {
        self.mem_decls
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| Address(i as u32))
    }

    /// Builds the initial configurations: empty buffers, clean ghosts,
    /// ownership and sharing per the declarations, counters at zero.
    pub fn build(&self) -> Built {
        let names: Vec<String> = self.mem_decls.iter().map(|(n, _)| n.clone()).collect();
        let mem: Memory = self
            .mem_decls
            .iter()
            .enumerate()
            .map(|(i, (_, v))| (Address(i as u32), Value(*v)))
            .collect();

        let mut sharing = SharingMap::new();
        for n in &self.shared_rw {
            sharing = sharing.augment(
                &[self.addr_of(n).unwrap()].into_iter().collect(),
                &[self.addr_of(n).unwrap()].into_iter().collect(),
            );
        }
        for n in &self.shared_ro {
            sharing = sharing.augment(
                &[self.addr_of(n).unwrap()].into_iter().collect(),
                &BTreeSet::new(),
            );
        }

        let owned_of = |thread: &str| -> BTreeSet<Address> {
            self.owns
                .iter()
                .filter(|(t, _)| t == thread)
                .flat_map(|(_, addrs)| addrs.iter())
                .map(|n| self.addr_of(n).unwrap())
                .collect()
        };

        let threads: Vec<Thread<Vec<crate::sb::SbEntry>>> = self
            .threads
            .iter()
            .map(|(name, stmt)| Thread {
                prog: ProgramState::initial(stmt.clone()),
                instrs: Vec::new(),
                tmps: Temporaries::new(),
                buffer: Vec::new(),
                ghost: GhostState::with_owned(owned_of(name)),
            })
            .collect();

        let sb_init: SbGlobal = Global {
            threads,
            sharing,
            mem,
        };
        let vm_init = sb_init.to_vm_shape();

        let observables: BTreeSet<Address> = if self.observe.is_empty() {
            (0..self.mem_decls.len()).map(|i| Address(i as u32)).collect()
        } else {
            self.observe
                .iter()
                .map(|n| self.addr_of(n).unwrap())
                .collect()
        };

        Built {
            sb_init,
            vm_init,
            observables,
            names,
        }
    }
}

// ---------------------------------------------------------------------------
// printer

fn print_addr_set(set: &AddrSetExpr, names: &[String], out: &mut String) {
    out.push('{');
    for (i, item) in set.0.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        match item {
            AddrSetItem::Lit(a) => out.push_str(&names[a.0 as usize]),
            AddrSetItem::Target => out.push_str("addr"),
        }
    }
    out.push('}');
}

fn print_annotation(ann: &AnnotationExprs, names: &[String], out: &mut String) {
    if ann.acquire.0.is_empty()
        && ann.local.0.is_empty()
        && ann.release.0.is_empty()
        && ann.writable.0.is_empty()
    {
        return;
    }
    out.push_str(" {A");
    print_addr_set(&ann.acquire, names, out);
    out.push_str(" L");
    print_addr_set(&ann.local, names, out);
    out.push_str(" R");
    print_addr_set(&ann.release, names, out);
    out.push_str(" W");
    print_addr_set(&ann.writable, names, out);
    out.push('}');
}

fn print_target(e: &Expr, names: &[String], out: &mut String) {
    match e {
        Expr::Const(v) => out.push_str(&names[v.0 as usize]),
        Expr::Mem(volatile, a) => {
            out.push('[');
            out.push_str(&names[a.0 as usize]);
            out.push(']');
            if *volatile {
                out.push('v');
            }
        }
        other => panic!("unprintable address expression {other:?}"),
    }
}

fn print_expr(e: &Expr, names: &[String], top: bool, out: &mut String) {
    match e {
        Expr::Const(v) => {
            let _ = write!(out, "{}", v.0);
        }
        Expr::Mem(volatile, a) => {
            out.push('[');
            out.push_str(&names[a.0 as usize]);
            out.push(']');
            if *volatile {
                out.push('v');
            }
        }
        Expr::Unop(UnOp::Not, e) => {
            out.push('!');
            print_expr(e, names, false, out);
        }
        Expr::Binop(op, a, b) => {
            if !top {
                out.push('(');
            }
            print_expr(a, names, false, out);
            let sym = match op {
                BinOp::Add => " + ",
                BinOp::Sub => " - ",
                BinOp::Eq => " == ",
                BinOp::Ne => " != ",
                BinOp::Lt => " < ",
                BinOp::And => " && ",
                BinOp::Or => " || ",
            };
            out.push_str(sym);
            print_expr(b, names, false, out);
            if !top {
                out.push(')');
            }
        }
        Expr::Tmp(_) => panic!("intermediate Tmp expression in source program"),
    }
}

fn print_stmt(s: &Stmt, names: &[String], indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match s {
        Stmt::Skip => {}
        Stmt::Seq(a, b) => {
            print_stmt(a, names, indent, out);
            print_stmt(b, names, indent, out);
        }
        Stmt::Assign {
            volatile,
            target,
            value,
            ann,
        } => {
            out.push_str(&pad);
            out.push('[');
            print_target(target, names, out);
            out.push(']');
            if *volatile {
                out.push('v');
            }
            out.push_str(" := ");
            print_expr(value, names, true, out);
            print_annotation(ann, names, out);
            out.push_str(";\n");
        }
        Stmt::Cas {
            addr,
            compare,
            swap,
            ann,
        } => {
            out.push_str(&pad);
            out.push_str("cas [");
            print_target(addr, names, out);
            out.push_str("] (");
            print_expr(compare, names, true, out);
            out.push_str(" -> ");
            print_expr(swap, names, true, out);
            out.push(')');
            print_annotation(ann, names, out);
            out.push_str(";\n");
        }
        Stmt::Cond(e, a, b) => {
            out.push_str(&pad);
            out.push_str("if (");
            print_expr(e, names, true, out);
            out.push_str(") {\n");
            print_stmt(a, names, indent + 1, out);
            out.push_str(&pad);
            out.push('}');
            if **b != Stmt::Skip {
                out.push_str(" else {\n");
                print_stmt(b, names, indent + 1, out);
                out.push_str(&pad);
                out.push('}');
            }
            out.push('\n');
        }
        Stmt::While(e, body) => {
            out.push_str(&pad);
            out.push_str("while (");
            print_expr(e, names, true, out);
            out.push_str(") {\n");
            print_stmt(body, names, indent + 1, out);
            out.push_str(&pad);
            out.push_str("}\n");
        }
        Stmt::SGhost(a, l) => {
            out.push_str(&pad);
            out.push_str("ghost A");
            print_addr_set(a, names, out);
            out.push_str(" L");
            print_addr_set(l, names, out);
            out.push_str(";\n");
        }
        Stmt::SFence => {
            out.push_str(&pad);
            out.push_str("fence;\n");
        }
    }
}

fn print_pred(p: &Pred, top: bool, out: &mut String) {
    match p {
        Pred::Const(n) => {
            let _ = write!(out, "{n}");
        }
        Pred::Var(v) => out.push_str(v),
        Pred::Unop(UnOp::Not, p) => {
            out.push('!');
            print_pred(p, false, out);
        }
        Pred::Binop(op, a, b) => {
            if !top {
                out.push('(');
            }
            print_pred(a, false, out);
            out.push_str(match op {
                BinOp::Add => " + ",
                BinOp::Sub => " - ",
                BinOp::Eq => " == ",
                BinOp::Ne => " != ",
                BinOp::Lt => " < ",
                BinOp::And => " && ",
                BinOp::Or => " || ",
            });
            print_pred(b, false, out);
            if !top {
                out.push(')');
            }
        }
    }
}

/// Prints a litmus file in the concrete syntax; `parse ∘ print` is the
/// identity on parsed files.
pub fn print(file: &LitmusFile) -> String {
    let names: Vec<String> = file.mem_decls.iter().map(|(n, _)| n.clone()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "name {};", file.name);
    out.push_str("\nmem {\n");
    for (n, v) in &file.mem_decls {
        let _ = writeln!(out, "  {n} = {v};");
    }
    out.push_str("}\n");
    if !file.shared_rw.is_empty() {
        out.push_str("shared rw { ");
        for n in &file.shared_rw {
            let _ = write!(out, "{n}; ");
        }
        out.push_str("}\n");
    }
    if !file.shared_ro.is_empty() {
        out.push_str("shared ro { ");
        for n in &file.shared_ro {
            let _ = write!(out, "{n}; ");
        }
        out.push_str("}\n");
    }
    for (t, addrs) in &file.owns {
        let _ = write!(out, "owns {t} {{ ");
        for n in addrs {
            let _ = write!(out, "{n}; ");
        }
        out.push_str("}\n");
    }
    if !file.observe.is_empty() {
        out.push_str("observe { ");
        for n in &file.observe {
            let _ = write!(out, "{n}; ");
        }
        out.push_str("}\n");
    }
    for (name, stmt) in &file.threads {
        let _ = write!(out, "\nthread {name} {{\n");
        print_stmt(stmt, &names, 1, &mut out);
        out.push_str("}\n");
    }
    if !file.expects.is_empty() {
        out.push('\n');
    }
    for e in &file.expects {
        match e {
            Expectation::Allow { machine, pred } => {
                out.push_str("allow ");
                if let Some(m) = machine {
                    out.push_str(m.as_str());
                    out.push(' ');
                }
                out.push('(');
                print_pred(pred, true, &mut out);
                out.push_str(");\n");
            }
            Expectation::Forbid { machine, pred } => {
                out.push_str("forbid ");
                if let Some(m) = machine {
                    out.push_str(m.as_str());
                    out.push(' ');
                }
                out.push('(');
                print_pred(pred, true, &mut out);
                out.push_str(");\n");
            }
            Expectation::Safety(true) => out.push_str("expect safe;\n"),
            Expectation::Safety(false) => out.push_str("expect unsafe;\n"),
            Expectation::Sc(true) => out.push_str("expect sc;\n"),
            Expectation::Sc(false) => out.push_str("expect not sc;\n"),
            Expectation::Invariants(true) => out.push_str("expect inv;\n"),
            Expectation::Invariants(false) => out.push_str("expect not inv;\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SB_LIKE: &str = r#"
        name demo;
        mem { x = 0; y = 0; r0 = 0; r1 = 0; }
        shared rw { x; y; }
        owns P0 { r0; }
        owns P1 { r1; }
        observe { r0; r1; }

        thread P0 {
            [x]v := 1;
            fence;
            [r0] := [y]v;
        }
        thread P1 {
            [y]v := 1;
            fence;
            [r1] := [x]v;
        }

        forbid (r0 == 0 && r1 == 0);
        expect safe;
    "#;

    #[test]
    fn parses_the_basic_shape() {
        let f = parse(SB_LIKE, "fallback").unwrap();
        assert_eq!(f.name, "demo");
        assert_eq!(f.mem_decls.len(), 4);
        assert_eq!(f.threads.len(), 2);
        assert_eq!(f.expects.len(), 2);
        let built = f.build();
        assert_eq!(built.sb_init.threads.len(), 2);
        assert_eq!(
            built.sb_init.sharing.get(f.addr_of("x").unwrap()),
            Some(true)
        );
        assert_eq!(
            built.sb_init.threads[0].ghost.owned,
            [f.addr_of("r0").unwrap()].into_iter().collect()
        );
        assert_eq!(built.observables.len(), 2);
    }

    #[test]
    fn empty_thread_body_is_skip() {
        let src = "mem { x = 0; } shared rw { x; } thread P0 { }";
        let f = parse(src, "t").unwrap();
        assert_eq!(f.threads[0].1, Stmt::Skip);
    }

    #[test]
    fn overlapping_ownership_is_a_decl_error() {
        let src = "mem { x = 0; } thread P0 { } thread P1 { } owns P0 { x; } owns P1 { x; }";
        match parse(src, "t") {
            Err(LitmusError::Decl(_)) => {}
            other => panic!("expected DeclError, got {other:?}"),
        }
    }

    #[test]
    fn unowned_unshared_is_a_decl_error() {
        let src = "mem { x = 0; } thread P0 { }";
        assert!(matches!(parse(src, "t"), Err(LitmusError::Decl(_))));
    }

    #[test]
    fn parse_error_carries_position() {
        let err = parse("mem { x 0; }", "t").unwrap_err();
        match err {
            LitmusError::Parse(e) => {
                assert_eq!(e.line, 1);
                assert!(e.msg.contains("'='"), "{e}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let f = parse(SB_LIKE, "t").unwrap();
        let printed = print(&f);
        let f2 = parse(&printed, "t").unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn cas_and_annotations_round_trip() {
        let src = r#"
            name locks;
            mem { l = 0; c = 0; t0 = 0; }
            shared rw { l; c; }
            owns P0 { t0; }
            thread P0 {
                cas [l] (0 -> 1) {A{c} L{c} R{} W{}};
                [c] := [c] + 1;
                [l]v := 0 {A{} L{} R{c} W{c}};
                ghost A{} L{};
                if ([t0] == 0) {
                    [t0] := 1;
                } else {
                    while ([t0] < 3) {
                        [t0] := [t0] + 1;
                    }
                }
            }
            expect safe;
        "#;
        let f = parse(src, "t").unwrap();
        let f2 = parse(&print(&f), "t").unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn addr_token_in_assignment_annotation() {
        let src = r#"
            mem { x = 0; }
            shared rw { x; }
            thread P0 { [x]v := 1 {A{addr} L{} R{} W{}}; }
        "#;
        let f = parse(src, "t").unwrap();
        let f2 = parse(&print(&f), "t").unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn addr_token_rejected_in_ghost() {
        let src = r#"
            mem { x = 0; }
            shared rw { x; }
            thread P0 { ghost A{addr} L{}; }
        "#;
        assert!(matches!(parse(src, "t"), Err(LitmusError::Parse(_))));
    }
}
