//! Hash-consed bit-vector/array terms.
//!
//! Booleans are 1-bit vectors throughout; comparisons yield 1-bit terms. The
//! smart constructors fold constants and apply a handful of local identities
//! so that concrete stack arithmetic never reaches the solver.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::emu::mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermId(u32);

impl TermId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sort {
    Bv(u8),
    /// 32-bit addresses to bytes.
    Mem,
}

impl Sort {
    pub fn width(self) -> u8 {
        match self {
            Sort::Bv(w) => w,
            Sort::Mem => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BvOp {
    Add,
    Sub,
    Mul,
    Udiv,
    Urem,
    Shl,
    Lshr,
    And,
    Or,
    Xor,
}

impl BvOp {
    pub fn smt_name(self) -> &'static str {
        match self {
            BvOp::Add => "bvadd",
            BvOp::Sub => "bvsub",
            BvOp::Mul => "bvmul",
            BvOp::Udiv => "bvudiv",
            BvOp::Urem => "bvurem",
            BvOp::Shl => "bvshl",
            BvOp::Lshr => "bvlshr",
            BvOp::And => "bvand",
            BvOp::Or => "bvor",
            BvOp::Xor => "bvxor",
        }
    }

    fn commutative(self) -> bool {
        matches!(self, BvOp::Add | BvOp::Mul | BvOp::And | BvOp::Or | BvOp::Xor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ult,
    Slt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TermKind {
    Const { width: u8, value: u32 },
    Var { name: Arc<str>, sort: Sort },
    Bin { op: BvOp, a: TermId, b: TermId },
    Not(TermId),
    Cmp { op: CmpOp, a: TermId, b: TermId },
    Ite { cond: TermId, then: TermId, other: TermId },
    Select { array: TermId, index: TermId },
    Store { array: TermId, index: TermId, value: TermId },
    Extract { hi: u8, lo: u8, arg: TermId },
    Concat { hi: TermId, lo: TermId },
}

#[derive(Debug, Clone)]
struct Node {
    kind: TermKind,
    sort: Sort,
}

/// Owner of all terms; structurally equal terms share one id.
#[derive(Debug, Default, Clone)]
pub struct TermStore {
    nodes: Vec<Node>,
    index: HashMap<TermKind, TermId>,
}

/// Value of a term under an assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Bv(u32),
    Array(ArrayValue),
}

/// An array with a default byte and explicit entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArrayValue {
    pub default: u8,
    pub entries: HashMap<u32, u8>,
}

impl ArrayValue {
    pub fn get(&self, addr: u32) -> u8 {
        self.entries.get(&addr).copied().unwrap_or(self.default)
    }
}

impl Value {
    pub fn bv(&self) -> u32 {
        match self {
            Value::Bv(v) => *v,
            Value::Array(_) => panic!("array used as bit-vector"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no value for `{0}`")]
    Unbound(String),
    #[error("division by zero")]
    DivideByZero,
}

fn sext(v: u32, w: u8) -> i64 {
    let v = i64::from(v);
    if w == 0 {
        return 0;
    }
    let sign = 1i64 << (w - 1);
    (v ^ sign) - sign
}

pub(crate) fn fold_bin(op: BvOp, w: u8, a: u32, b: u32) -> Option<u32> {
    let (a, b) = (u64::from(a), u64::from(b));
    let r = match op {
        BvOp::Add => a.wrapping_add(b),
        BvOp::Sub => a.wrapping_sub(b),
        BvOp::Mul => a.wrapping_mul(b),
        BvOp::Udiv | BvOp::Urem if b == 0 => return None,
        BvOp::Udiv => a / b,
        BvOp::Urem => a % b,
        BvOp::Shl if b >= u64::from(w) => 0,
        BvOp::Shl => a << b,
        BvOp::Lshr if b >= u64::from(w) => 0,
        BvOp::Lshr => a >> b,
        BvOp::And => a & b,
        BvOp::Or => a | b,
        BvOp::Xor => a ^ b,
    };
    Some((r & mask(w)) as u32)
}

impl TermStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, t: TermId) -> &TermKind {
        &self.nodes[t.index()].kind
    }

    pub fn sort(&self, t: TermId) -> Sort {
        self.nodes[t.index()].sort
    }

    pub fn width(&self, t: TermId) -> u8 {
        self.sort(t).width()
    }

    fn intern(&mut self, kind: TermKind, sort: Sort) -> TermId {
        if let Some(&id) = self.index.get(&kind) {
            return id;
        }
        let id = TermId(self.nodes.len() as u32);
        self.nodes.push(Node {
            kind: kind.clone(),
            sort,
        });
        self.index.insert(kind, id);
        id
    }

    pub fn constant(&mut self, width: u8, value: u32) -> TermId {
        let value = (u64::from(value) & mask(width)) as u32;
        self.intern(TermKind::Const { width, value }, Sort::Bv(width))
    }

    pub fn tt(&mut self) -> TermId {
        self.constant(1, 1)
    }

    pub fn ff(&mut self) -> TermId {
        self.constant(1, 0)
    }

    pub fn var(&mut self, name: &str, sort: Sort) -> TermId {
        self.intern(
            TermKind::Var {
                name: Arc::from(name),
                sort,
            },
            sort,
        )
    }

    pub fn as_const(&self, t: TermId) -> Option<u32> {
        match self.kind(t) {
            TermKind::Const { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn var_name(&self, t: TermId) -> Option<&str> {
        match self.kind(t) {
            TermKind::Var { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn bin(&mut self, op: BvOp, a: TermId, b: TermId) -> TermId {
        let w = self.width(a);
        debug_assert_eq!(w, self.width(b), "{op:?} width mismatch");
        let (mut a, mut b) = (a, b);
        if op.commutative() && (self.as_const(a).is_some() || (self.as_const(b).is_none() && b < a))
        {
            std::mem::swap(&mut a, &mut b);
        }
        let ones = mask(w) as u32;
        match (self.as_const(a), self.as_const(b)) {
            (Some(x), Some(y)) => {
                if let Some(r) = fold_bin(op, w, x, y) {
                    return self.constant(w, r);
                }
            }
            (None, Some(y)) => match (op, y) {
                (BvOp::Add | BvOp::Sub | BvOp::Or | BvOp::Xor | BvOp::Shl | BvOp::Lshr, 0) => {
                    return a
                }
                (BvOp::And | BvOp::Mul, 0) => return self.constant(w, 0),
                (BvOp::Mul | BvOp::Udiv, 1) => return a,
                (BvOp::And, y) if y == ones => return a,
                (BvOp::Or, y) if y == ones => return b,
                (BvOp::Shl | BvOp::Lshr, y) if y >= u32::from(w) => return self.constant(w, 0),
                (BvOp::Add | BvOp::Sub, _) => {
                    // (x ± c1) ± c2 with matching ops
                    if let TermKind::Bin { op: inner, a: x, b: c1 } = *self.kind(a) {
                        if inner == op {
                            if let Some(c1) = self.as_const(c1) {
                                let c = self.constant(w, fold_bin(BvOp::Add, w, c1, y).unwrap());
                                return self.bin(op, x, c);
                            }
                        }
                    }
                }
                _ => {}
            },
            (Some(0), None) if matches!(op, BvOp::Shl | BvOp::Lshr) => return a,
            _ => {}
        }
        if a == b {
            match op {
                BvOp::And | BvOp::Or => return a,
                BvOp::Xor | BvOp::Sub => return self.constant(w, 0),
                _ => {}
            }
        }
        self.intern(TermKind::Bin { op, a, b }, Sort::Bv(w))
    }

    pub fn not(&mut self, a: TermId) -> TermId {
        let w = self.width(a);
        if let Some(x) = self.as_const(a) {
            return self.constant(w, !x);
        }
        if let TermKind::Not(inner) = *self.kind(a) {
            return inner;
        }
        self.intern(TermKind::Not(a), Sort::Bv(w))
    }

    pub fn cmp(&mut self, op: CmpOp, a: TermId, b: TermId) -> TermId {
        let w = self.width(a);
        debug_assert_eq!(w, self.width(b), "{op:?} width mismatch");
        let (mut a, mut b) = (a, b);
        if let (Some(x), Some(y)) = (self.as_const(a), self.as_const(b)) {
            let r = match op {
                CmpOp::Eq => x == y,
                CmpOp::Ult => x < y,
                CmpOp::Slt => sext(x, w) < sext(y, w),
            };
            return self.constant(1, u32::from(r));
        }
        if a == b {
            return self.constant(1, u32::from(op == CmpOp::Eq));
        }
        if op == CmpOp::Ult && self.as_const(b) == Some(0) {
            return self.ff();
        }
        if op == CmpOp::Eq {
            if self.as_const(a).is_some() {
                std::mem::swap(&mut a, &mut b);
            }
            // a 1-bit x == 1 is x itself, x == 0 is its negation
            if w == 1 {
                match self.as_const(b) {
                    Some(1) => return a,
                    Some(0) => return self.not(a),
                    _ => {}
                }
            }
        }
        self.intern(TermKind::Cmp { op, a, b }, Sort::Bv(1))
    }

    pub fn eq(&mut self, a: TermId, b: TermId) -> TermId {
        self.cmp(CmpOp::Eq, a, b)
    }

    pub fn ite(&mut self, cond: TermId, then: TermId, other: TermId) -> TermId {
        match self.as_const(cond) {
            Some(0) => return other,
            Some(_) => return then,
            None => {}
        }
        if then == other {
            return then;
        }
        if self.width(then) == 1 && self.as_const(then) == Some(1) && self.as_const(other) == Some(0)
        {
            return cond;
        }
        let sort = self.sort(then);
        self.intern(TermKind::Ite { cond, then, other }, sort)
    }

    /// Byte read. Sees through stores at the same or at provably different
    /// constant addresses.
    pub fn select(&mut self, array: TermId, index: TermId) -> TermId {
        let mut arr = array;
        for _ in 0..64 {
            match *self.kind(arr) {
                TermKind::Store {
                    array: inner,
                    index: i,
                    value,
                } => {
                    if i == index {
                        return value;
                    }
                    match (self.as_const(i), self.as_const(index)) {
                        (Some(x), Some(y)) if x != y => arr = inner,
                        _ => break,
                    }
                }
                _ => break,
            }
        }
        self.intern(TermKind::Select { array: arr, index }, Sort::Bv(8))
    }

    pub fn store(&mut self, array: TermId, index: TermId, value: TermId) -> TermId {
        debug_assert_eq!(self.width(value), 8);
        self.intern(
            TermKind::Store {
                array,
                index,
                value,
            },
            Sort::Mem,
        )
    }

    pub fn extract(&mut self, hi: u8, lo: u8, arg: TermId) -> TermId {
        let w = self.width(arg);
        debug_assert!(hi < w && lo <= hi);
        if lo == 0 && hi + 1 == w {
            return arg;
        }
        if let Some(v) = self.as_const(arg) {
            return self.constant(hi - lo + 1, v >> lo);
        }
        match *self.kind(arg) {
            TermKind::Extract {
                lo: inner_lo,
                arg: inner,
                ..
            } => return self.extract(hi + inner_lo, lo + inner_lo, inner),
            TermKind::Concat { hi: h, lo: l } => {
                let lw = self.width(l);
                if hi < lw {
                    return self.extract(hi, lo, l);
                }
                if lo >= lw {
                    return self.extract(hi - lw, lo - lw, h);
                }
            }
            _ => {}
        }
        self.intern(TermKind::Extract { hi, lo, arg }, Sort::Bv(hi - lo + 1))
    }

    pub fn concat(&mut self, hi: TermId, lo: TermId) -> TermId {
        let (hw, lw) = (self.width(hi), self.width(lo));
        let w = hw + lw;
        if let (Some(h), Some(l)) = (self.as_const(hi), self.as_const(lo)) {
            return self.constant(w, ((u64::from(h) << lw) | u64::from(l)) as u32);
        }
        if let (
            TermKind::Extract {
                hi: h1,
                lo: l1,
                arg: x,
            },
            TermKind::Extract {
                hi: h2,
                lo: l2,
                arg: y,
            },
        ) = (self.kind(hi).clone(), self.kind(lo).clone())
        {
            if x == y && l1 == h2 + 1 {
                return self.extract(h1, l2, x);
            }
        }
        self.intern(TermKind::Concat { hi, lo }, Sort::Bv(w))
    }

    /// Zero-extends or truncates to `width`.
    pub fn resize(&mut self, t: TermId, width: u8) -> TermId {
        let w = self.width(t);
        if w == width {
            t
        } else if width < w {
            self.extract(width - 1, 0, t)
        } else {
            let zeros = self.constant(width - w, 0);
            self.concat(zeros, t)
        }
    }

    /// Direct children, in order.
    pub fn children(&self, t: TermId) -> Vec<TermId> {
        match *self.kind(t) {
            TermKind::Const { .. } | TermKind::Var { .. } => vec![],
            TermKind::Not(a) | TermKind::Extract { arg: a, .. } => vec![a],
            TermKind::Bin { a, b, .. }
            | TermKind::Cmp { a, b, .. }
            | TermKind::Select {
                array: a, index: b, ..
            }
            | TermKind::Concat { hi: a, lo: b } => vec![a, b],
            TermKind::Ite { cond, then, other } => vec![cond, then, other],
            TermKind::Store {
                array,
                index,
                value,
            } => vec![array, index, value],
        }
    }

    /// Variables reachable from `roots`, in first-appearance order
    /// (depth-first, children left to right).
    pub fn free_vars(&self, roots: &[TermId]) -> Vec<TermId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        let mut stack: Vec<TermId> = roots.iter().rev().copied().collect();
        while let Some(t) = stack.pop() {
            if std::mem::replace(&mut seen[t.index()], true) {
                continue;
            }
            if let TermKind::Var { .. } = self.kind(t) {
                out.push(t);
            }
            stack.extend(self.children(t).into_iter().rev());
        }
        out
    }

    /// Evaluates `t` with variables looked up in `env`.
    pub fn eval(&self, t: TermId, env: &dyn Fn(&str) -> Option<Value>) -> Result<Value, EvalError> {
        let mut memo: HashMap<TermId, Value> = HashMap::new();
        self.eval_memo(t, env, &mut memo)
    }

    fn eval_memo(
        &self,
        root: TermId,
        env: &dyn Fn(&str) -> Option<Value>,
        memo: &mut HashMap<TermId, Value>,
    ) -> Result<Value, EvalError> {
        // explicit post-order walk; store chains can be deep
        let mut stack = vec![(root, false)];
        while let Some((t, expanded)) = stack.pop() {
            if memo.contains_key(&t) {
                continue;
            }
            if !expanded {
                stack.push((t, true));
                for c in self.children(t) {
                    if !memo.contains_key(&c) {
                        stack.push((c, false));
                    }
                }
                continue;
            }
            let bv = |id: TermId| memo[&id].bv();
            let w = self.width(t);
            let v = match self.kind(t) {
                TermKind::Const { value, .. } => Value::Bv(*value),
                TermKind::Var { name, sort } => match env(name) {
                    Some(v) => v,
                    None if *sort == Sort::Mem => Value::Array(ArrayValue::default()),
                    None => return Err(EvalError::Unbound(name.to_string())),
                },
                TermKind::Bin { op, a, b } => Value::Bv(
                    fold_bin(*op, w, bv(*a), bv(*b)).ok_or(EvalError::DivideByZero)?,
                ),
                TermKind::Not(a) => Value::Bv((!u64::from(bv(*a)) & mask(w)) as u32),
                TermKind::Cmp { op, a, b } => {
                    let aw = self.width(*a);
                    let (x, y) = (bv(*a), bv(*b));
                    Value::Bv(u32::from(match op {
                        CmpOp::Eq => x == y,
                        CmpOp::Ult => x < y,
                        CmpOp::Slt => sext(x, aw) < sext(y, aw),
                    }))
                }
                TermKind::Ite { cond, then, other } => {
                    if bv(*cond) != 0 {
                        memo[then].clone()
                    } else {
                        memo[other].clone()
                    }
                }
                TermKind::Select { array, index } => match &memo[array] {
                    Value::Array(arr) => Value::Bv(u32::from(arr.get(bv(*index)))),
                    Value::Bv(_) => unreachable!("select on bit-vector"),
                },
                TermKind::Store {
                    array,
                    index,
                    value,
                } => {
                    let mut arr = match &memo[array] {
                        Value::Array(arr) => arr.clone(),
                        Value::Bv(_) => unreachable!("store into bit-vector"),
                    };
                    arr.entries.insert(bv(*index), bv(*value) as u8);
                    Value::Array(arr)
                }
                TermKind::Extract { lo, arg, .. } => {
                    Value::Bv(((u64::from(bv(*arg)) >> lo) & mask(w)) as u32)
                }
                TermKind::Concat { hi, lo } => {
                    let lw = self.width(*lo);
                    Value::Bv((((u64::from(bv(*hi)) << lw) | u64::from(bv(*lo))) & mask(w)) as u32)
                }
            };
            memo.insert(t, v);
        }
        Ok(memo.remove(&root).expect("root evaluated"))
    }
}
