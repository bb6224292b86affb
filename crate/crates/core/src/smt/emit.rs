//! SMT-LIB2 rendering of terms and formulas.

use std::fmt::Write;

use super::term::{BvOp, CmpOp, Sort, TermId, TermKind, TermStore};
use super::Formula;

pub fn render_sort(sort: Sort) -> String {
    match sort {
        Sort::Bv(w) => format!("(_ BitVec {w})"),
        Sort::Mem => "(Array (_ BitVec 32) (_ BitVec 8))".to_string(),
    }
}

/// `#x…` when the width is a multiple of four, `#b…` otherwise.
pub fn render_literal(width: u8, value: u32) -> String {
    if width % 4 == 0 {
        format!("#x{:0w$x}", value, w = usize::from(width / 4))
    } else {
        format!("#b{:0w$b}", value, w = usize::from(width))
    }
}

struct Printer<'a> {
    store: &'a TermStore,
    out: String,
}

impl Printer<'_> {
    fn bv(&mut self, t: TermId) {
        let s = self.store;
        match *s.kind(t) {
            TermKind::Const { width, value } => self.out.push_str(&render_literal(width, value)),
            TermKind::Var { ref name, .. } => self.out.push_str(name),
            TermKind::Bin { op, a, b } => self.app(op.smt_name(), &[a, b]),
            TermKind::Not(a) => self.app("bvnot", &[a]),
            TermKind::Cmp { .. } => {
                self.out.push_str("(ite ");
                self.boolean(t);
                self.out.push_str(" #b1 #b0)");
            }
            TermKind::Ite { cond, then, other } => {
                self.out.push_str("(ite ");
                self.boolean(cond);
                self.out.push(' ');
                self.bv(then);
                self.out.push(' ');
                self.bv(other);
                self.out.push(')');
            }
            TermKind::Select { array, index } => self.app("select", &[array, index]),
            TermKind::Store {
                array,
                index,
                value,
            } => self.app("store", &[array, index, value]),
            TermKind::Extract { hi, lo, arg } => {
                let head = format!("(_ extract {hi} {lo})");
                self.app(&head, &[arg]);
            }
            TermKind::Concat { hi, lo } => self.app("concat", &[hi, lo]),
        }
    }

    /// Renders a 1-bit term as an SMT Bool.
    fn boolean(&mut self, t: TermId) {
        let s = self.store;
        match *s.kind(t) {
            TermKind::Const { value, .. } => {
                self.out.push_str(if value != 0 { "true" } else { "false" })
            }
            TermKind::Cmp { op, a, b } => {
                let name = match op {
                    CmpOp::Eq => "=",
                    CmpOp::Ult => "bvult",
                    CmpOp::Slt => "bvslt",
                };
                self.app(name, &[a, b]);
            }
            TermKind::Not(a) => {
                self.out.push_str("(not ");
                self.boolean(a);
                self.out.push(')');
            }
            TermKind::Bin {
                op: op @ (BvOp::And | BvOp::Or | BvOp::Xor),
                a,
                b,
            } if s.width(t) == 1 => {
                let name = match op {
                    BvOp::And => "and",
                    BvOp::Or => "or",
                    _ => "xor",
                };
                self.out.push('(');
                self.out.push_str(name);
                for x in [a, b] {
                    self.out.push(' ');
                    self.boolean(x);
                }
                self.out.push(')');
            }
            _ => {
                self.out.push_str("(= ");
                self.bv(t);
                self.out.push_str(" #b1)");
            }
        }
    }

    fn app(&mut self, head: &str, args: &[TermId]) {
        self.out.push('(');
        self.out.push_str(head);
        for &a in args {
            self.out.push(' ');
            self.bv(a);
        }
        self.out.push(')');
    }
}

/// Bit-vector rendering of a single term.
pub fn render_term(store: &TermStore, t: TermId) -> String {
    let mut p = Printer {
        store,
        out: String::new(),
    };
    p.bv(t);
    p.out
}

/// Bool rendering of a 1-bit term.
pub fn render_bool(store: &TermStore, t: TermId) -> String {
    let mut p = Printer {
        store,
        out: String::new(),
    };
    p.boolean(t);
    p.out
}

pub fn emit_smtlib(store: &TermStore, formula: &Formula) -> String {
    let mut out = String::new();
    writeln!(out, "(set-logic {})", formula.logic).unwrap();
    for (name, sort) in &formula.declarations {
        writeln!(out, "(declare-fun {name} () {})", render_sort(*sort)).unwrap();
    }
    for &a in formula.assertions.iter().chain(std::iter::once(&formula.goal)) {
        writeln!(out, "(assert {})", render_bool(store, a)).unwrap();
    }
    out.push_str("(check-sat)\n(get-model)\n");
    out
}
