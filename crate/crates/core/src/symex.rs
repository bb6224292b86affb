//! Symbolic execution of lifted IL.
//!
//! Registers are kept in SSA form: every write to an architectural register
//! declares a fresh `<reg>_step<k>` variable and asserts it equal to the
//! written term, every store declares a fresh `mem_<k>`. Reads see constants
//! and plain variables directly so that concrete values (the stack pointer,
//! the return address) keep folding. Temporaries are inlined as terms.
//!
//! Paths are explored depth first, taken branch first.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use log::{debug, trace};
use thiserror::Error;

use crate::emu::op_width;
use crate::il::{IlInstruction, IlOp, IlOperand, IlReg};
use crate::lifter::{lift, LiftedBlock, UnliftableInstruction};
use crate::loader::FunctionImage;
use crate::machine::{Abi, AbiError, ExecLimits, RETURN_SENTINEL, STACK_BASE};
use crate::query::{goal_term, ReQuery};
use crate::smt::{
    bind_outputs, emit_smtlib, solve, BvOp, CmpOp, Formula, Sort, SolverConfig, TermId, TermKind,
    TermStore, Verdict,
};
use crate::x86::{decode_one, DecodeError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymexError {
    #[error("entry {0:#010x} is outside the image")]
    EntryOutOfRange(u32),
    #[error(transparent)]
    Abi(#[from] AbiError),
    #[error("input name `{0}` clashes with an internal variable name")]
    ReservedInputName(String),
    #[error("execution limits must be at least 1")]
    BadLimits,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathStatus {
    Returned,
    StepLimit,
    PathLimitDropped,
    DecodeFailure(DecodeError),
    UnliftableFailure(UnliftableInstruction),
    /// A taken JCC whose target is not a constant, at this native address.
    SymbolicJumpTarget(u32),
}

impl PathStatus {
    pub fn name(&self) -> &'static str {
        match self {
            PathStatus::Returned => "returned",
            PathStatus::StepLimit => "step_limit",
            PathStatus::PathLimitDropped => "path_limit_dropped",
            PathStatus::DecodeFailure(_) => "decode_failure",
            PathStatus::UnliftableFailure(_) => "unliftable_failure",
            PathStatus::SymbolicJumpTarget(_) => "symbolic_jump_target",
        }
    }
}

/// Symbolic machine snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    /// What a read of each register yields: a constant, a variable, or the
    /// register's current step variable.
    regs: [TermId; 15],
    /// Last value written to each register, before step-variable naming.
    defs: [TermId; 15],
    writes: [u32; 15],
    mem: TermId,
    mem_version: u32,
    /// Bytes at concrete addresses, valid until a store to a symbolic address.
    known_bytes: HashMap<u32, TermId>,
    path_condition: Vec<TermId>,
    facts: HashMap<TermId, bool>,
    /// Variable definitions and initial-state constraints.
    assertions: Vec<TermId>,
    pub steps: u64,
    pub eip: u32,
}

impl MachineState {
    pub fn reg(&self, r: IlReg) -> TermId {
        self.regs[r.index()]
    }

    /// The term last written to `r` (or its initial value).
    pub fn reg_def(&self, r: IlReg) -> TermId {
        self.defs[r.index()]
    }

    pub fn mem(&self) -> TermId {
        self.mem
    }

    pub fn path_condition(&self) -> &[TermId] {
        &self.path_condition
    }

    pub fn assertions(&self) -> &[TermId] {
        &self.assertions
    }

    fn same_machine(&self, other: &Self) -> bool {
        self.regs == other.regs && self.mem == other.mem
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub id: usize,
    pub status: PathStatus,
    pub state: MachineState,
    /// Definition of EAX at the return, when the path returned.
    pub return_value: Option<TermId>,
}

impl Path {
    pub fn il_executed(&self) -> u64 {
        self.state.steps
    }

    pub fn final_regs(&self) -> Vec<(IlReg, TermId)> {
        IlReg::GPRS.iter().map(|&r| (r, self.state.reg(r))).collect()
    }
}

type CachedBlock = Rc<Result<(LiftedBlock, u32), PathStatus>>;

enum BlockEnd {
    Goto(u32),
    Fork {
        cond: TermId,
        target: TermId,
        fallthrough: u32,
    },
    Stop(PathStatus),
}

/// Lazily enumerates the paths of one function.
pub struct Explorer<'a> {
    image: &'a FunctionImage,
    store: TermStore,
    query: ReQuery,
    inputs: Vec<TermId>,
    limits: ExecLimits,
    solver: Option<SolverConfig>,
    pending: Vec<MachineState>,
    blocks: HashMap<u32, CachedBlock>,
    produced: usize,
    undef_count: u32,
}

const MERGE_LOOKAHEAD: usize = 32;

fn is_reserved(name: &str) -> bool {
    let upper = name.to_ascii_uppercase();
    if upper == "MEM" || name.ends_with("_output") || name.starts_with("undef_") {
        return true;
    }
    let numbered = |prefix: &str| {
        name.strip_prefix(prefix)
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
    };
    numbered("mem_")
        || IlReg::ALL
            .iter()
            .any(|r| numbered(&format!("{}_step", r.short_name().to_lowercase())))
}

impl<'a> Explorer<'a> {
    pub fn new(
        image: &'a FunctionImage,
        entry: u32,
        query: &ReQuery,
        abi: &Abi,
        limits: ExecLimits,
    ) -> Result<Self, SymexError> {
        if !image.contains(entry) {
            return Err(SymexError::EntryOutOfRange(entry));
        }
        if limits.max_steps == 0 || limits.max_paths == 0 {
            return Err(SymexError::BadLimits);
        }
        if let Some(bad) = query.input.iter().find(|n| is_reserved(n)) {
            return Err(SymexError::ReservedInputName(bad.clone()));
        }
        abi.check_arity(query.input.len())?;
        let mut ex = Self {
            image,
            store: TermStore::new(),
            query: query.clone(),
            inputs: Vec::new(),
            limits,
            solver: None,
            pending: Vec::new(),
            blocks: HashMap::new(),
            produced: 0,
            undef_count: 0,
        };
        let init = ex.init_state(entry, abi);
        ex.pending.push(init);
        Ok(ex)
    }

    /// Enables solver checks of both sides of every symbolic branch.
    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = Some(solver);
        self
    }

    pub fn store(&self) -> &TermStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TermStore {
        &mut self.store
    }

    /// Input variables, in query order.
    pub fn inputs(&self) -> &[TermId] {
        &self.inputs
    }

    pub fn query(&self) -> &ReQuery {
        &self.query
    }

    fn init_state(&mut self, entry: u32, abi: &Abi) -> MachineState {
        let s = &mut self.store;
        let inputs: Vec<TermId> = self
            .query
            .input
            .iter()
            .map(|n| s.var(n, Sort::Bv(32)))
            .collect();
        let mut assertions = Vec::new();
        let names = &self.query.input;
        let mut regs: [TermId; 15] = std::array::from_fn(|i| {
            let r = IlReg::ALL[i];
            let bound = match abi {
                Abi::Registers(list) => list.iter().position(|x| *x == r).and_then(|i| inputs.get(i)),
                Abi::Stack => None,
            };
            match bound {
                Some(&input) => input,
                None if r == IlReg::Eip => s.constant(32, entry),
                None => {
                    let mut name = r.short_name().to_string();
                    if names.iter().any(|n| n.eq_ignore_ascii_case(&name)) {
                        name.push_str("_init");
                    }
                    s.var(&name, Sort::Bv(r.size_bits()))
                }
            }
        });
        let esp_var = regs[IlReg::Esp.index()];
        let base = s.constant(32, STACK_BASE);
        assertions.push(s.eq(esp_var, base));
        regs[IlReg::Esp.index()] = base;

        let mut known_bytes = HashMap::new();
        let mut chain = s.var("MEM", Sort::Mem);
        let mut cells: Vec<(u32, TermId)> = vec![(STACK_BASE, s.constant(32, RETURN_SENTINEL))];
        if *abi == Abi::Stack {
            for (i, &input) in inputs.iter().enumerate() {
                cells.push((STACK_BASE + 4 + 4 * i as u32, input));
            }
        }
        for (addr, value) in cells {
            for i in 0..4u32 {
                let byte = s.extract(8 * i as u8 + 7, 8 * i as u8, value);
                let a = s.constant(32, addr + i);
                chain = s.store(chain, a, byte);
                known_bytes.insert(addr + i, byte);
            }
        }
        let mem0 = s.var("mem_0", Sort::Mem);
        assertions.push(s.eq(mem0, chain));
        self.inputs = inputs;
        MachineState {
            regs,
            defs: regs,
            writes: [0; 15],
            mem: mem0,
            mem_version: 0,
            known_bytes,
            path_condition: Vec::new(),
            facts: HashMap::new(),
            assertions,
            steps: 0,
            eip: entry,
        }
    }

    fn block(&mut self, addr: u32) -> CachedBlock {
        let image = self.image;
        self.blocks
            .entry(addr)
            .or_insert_with(|| {
                Rc::new(match decode_one(image, addr) {
                    Err(e) => Err(PathStatus::DecodeFailure(e)),
                    Ok(instr) => match lift(&instr) {
                        Err(e) => Err(PathStatus::UnliftableFailure(e)),
                        Ok(block) => Ok((block, instr.next_addr())),
                    },
                })
            })
            .clone()
    }

    /// Strips negations: `cond` holds iff `base` is `polarity`.
    fn normalise(&self, cond: TermId) -> (TermId, bool) {
        let mut t = cond;
        let mut polarity = true;
        while let TermKind::Not(inner) = *self.store.kind(t) {
            t = inner;
            polarity = !polarity;
        }
        (t, polarity)
    }

    /// Value of a 1-bit condition if it is constant or already decided on
    /// this path.
    fn decide(&self, st: &MachineState, cond: TermId) -> Option<bool> {
        if let Some(v) = self.store.as_const(cond) {
            return Some(v != 0);
        }
        let (base, polarity) = self.normalise(cond);
        st.facts.get(&base).map(|v| *v == polarity)
    }

    fn assume(&mut self, st: &mut MachineState, cond: TermId, value: bool) {
        let (base, polarity) = self.normalise(cond);
        st.facts.insert(base, value == polarity);
        let fact = if value { cond } else { self.store.not(cond) };
        st.path_condition.push(fact);
    }

    fn write_reg(&mut self, st: &mut MachineState, r: IlReg, value: TermId) {
        let s = &mut self.store;
        let value = s.resize(value, r.size_bits());
        let i = r.index();
        st.writes[i] += 1;
        let name = format!("{}_step{}", r.short_name().to_lowercase(), st.writes[i]);
        let var = s.var(&name, Sort::Bv(r.size_bits()));
        st.assertions.push(s.eq(var, value));
        st.defs[i] = value;
        st.regs[i] = match s.kind(value) {
            TermKind::Const { .. } | TermKind::Var { .. } => value,
            _ => var,
        };
    }

    fn load(&mut self, st: &MachineState, addr: TermId, bits: u8) -> TermId {
        let s = &mut self.store;
        let base = s.as_const(addr);
        let mut bytes = Vec::with_capacity(usize::from(bits / 8));
        for i in 0..u32::from(bits / 8) {
            let byte = match base.map(|b| b.wrapping_add(i)) {
                Some(a) => match st.known_bytes.get(&a) {
                    Some(&b) => b,
                    None => {
                        let at = s.constant(32, a);
                        s.select(st.mem, at)
                    }
                },
                None => {
                    let off = s.constant(32, i);
                    let at = s.bin(BvOp::Add, addr, off);
                    s.select(st.mem, at)
                }
            };
            bytes.push(byte);
        }
        let mut value = bytes[0];
        for &b in &bytes[1..] {
            value = s.concat(b, value);
        }
        value
    }

    fn store_mem(&mut self, st: &mut MachineState, addr: TermId, value: TermId) {
        let s = &mut self.store;
        let bits = s.width(value);
        let base = s.as_const(addr);
        let mut chain = st.mem;
        if base.is_none() {
            st.known_bytes.clear();
        }
        for i in 0..u32::from(bits / 8) {
            let byte = s.extract(8 * i as u8 + 7, 8 * i as u8, value);
            let at = match base {
                Some(b) => s.constant(32, b.wrapping_add(i)),
                None => {
                    let off = s.constant(32, i);
                    s.bin(BvOp::Add, addr, off)
                }
            };
            chain = s.store(chain, at, byte);
            if let Some(b) = base {
                st.known_bytes.insert(b.wrapping_add(i), byte);
            }
        }
        st.mem_version += 1;
        let var = s.var(&format!("mem_{}", st.mem_version), Sort::Mem);
        st.assertions.push(s.eq(var, chain));
        st.mem = var;
    }

    fn operand(&mut self, st: &MachineState, temps: &[Option<TermId>], op: &IlOperand, width: u8) -> TermId {
        let t = match *op {
            IlOperand::Reg(r) => st.reg(r),
            IlOperand::Temp { index, size } => match temps.get(usize::from(index)).copied().flatten() {
                Some(t) => t,
                // reads of never-written temporaries cannot come out of the lifter
                None => self.store.constant(size, 0),
            },
            IlOperand::Const { value, .. } => return self.store.constant(width, value),
            IlOperand::None => return self.store.constant(width, 0),
        };
        self.store.resize(t, width)
    }

    /// Executes one IL block on `st`.
    fn exec_block(&mut self, st: &mut MachineState, il: &[IlInstruction], next: u32) -> BlockEnd {
        let mut temps: Vec<Option<TermId>> = Vec::new();
        for ins in il {
            if st.steps >= self.limits.max_steps {
                return BlockEnd::Stop(PathStatus::StepLimit);
            }
            st.steps += 1;
            trace!("{:#010x}.{:02} {ins}", ins.addr.native, ins.addr.sub);
            let a_w = ins.a.size_bits().unwrap_or(32);
            let c_w = ins.c.size_bits().unwrap_or(32);
            let value = match ins.op {
                IlOp::Nop | IlOp::Unkn => continue,
                IlOp::Jcc => {
                    let cond = self.operand(st, &temps, &ins.a, a_w);
                    let target = self.operand(st, &temps, &ins.c, 32);
                    match self.decide(st, cond) {
                        Some(false) => continue,
                        Some(true) => {
                            return match self.store.as_const(target) {
                                Some(t) => BlockEnd::Goto(t),
                                None => BlockEnd::Stop(PathStatus::SymbolicJumpTarget(ins.addr.native)),
                            }
                        }
                        None => {
                            return BlockEnd::Fork {
                                cond,
                                target,
                                fallthrough: next,
                            }
                        }
                    }
                }
                IlOp::Stm => {
                    let v = self.operand(st, &temps, &ins.a, a_w);
                    let addr = self.operand(st, &temps, &ins.c, 32);
                    self.store_mem(st, addr, v);
                    continue;
                }
                IlOp::Ldm => {
                    let addr = self.operand(st, &temps, &ins.a, 32);
                    self.load(st, addr, c_w)
                }
                IlOp::Str => self.operand(st, &temps, &ins.a, a_w),
                IlOp::Not => {
                    let a = self.operand(st, &temps, &ins.a, a_w);
                    self.store.not(a)
                }
                IlOp::Undef => {
                    self.undef_count += 1;
                    let name = format!("undef_{}", self.undef_count);
                    self.store.var(&name, Sort::Bv(c_w))
                }
                op => {
                    let w = op_width(&ins.a, &ins.b);
                    let a = self.operand(st, &temps, &ins.a, w);
                    let b = self.operand(st, &temps, &ins.b, w);
                    let s = &mut self.store;
                    match op {
                        IlOp::Eq => s.cmp(CmpOp::Eq, a, b),
                        IlOp::Lt => s.cmp(CmpOp::Ult, a, b),
                        _ => {
                            let bv = match op {
                                IlOp::Add => BvOp::Add,
                                IlOp::Sub => BvOp::Sub,
                                IlOp::Mul => BvOp::Mul,
                                IlOp::Div => BvOp::Udiv,
                                IlOp::Mod => BvOp::Urem,
                                IlOp::Shl => BvOp::Shl,
                                IlOp::Shr => BvOp::Lshr,
                                IlOp::And => BvOp::And,
                                IlOp::Or => BvOp::Or,
                                _ => BvOp::Xor,
                            };
                            s.bin(bv, a, b)
                        }
                    }
                }
            };
            let value = self.store.resize(value, c_w);
            match ins.c {
                IlOperand::Reg(r) => self.write_reg(st, r, value),
                IlOperand::Temp { index, .. } => {
                    let i = usize::from(index);
                    if temps.len() <= i {
                        temps.resize(i + 1, None);
                    }
                    temps[i] = Some(value);
                }
                _ => unreachable!("validated destinations are writable"),
            }
        }
        BlockEnd::Goto(next)
    }

    /// Runs one native instruction. `None` means the path continues.
    fn step_native(&mut self, st: &mut MachineState) -> Result<Option<BlockEnd>, PathStatus> {
        let block = self.block(st.eip);
        let (lifted, next) = match &*block {
            Ok(b) => b,
            Err(status) => return Err(status.clone()),
        };
        match self.exec_block(st, &lifted.il, *next) {
            BlockEnd::Goto(t) => {
                st.eip = t;
                Ok(None)
            }
            other => Ok(Some(other)),
        }
    }

    /// Follows the fallthrough side of a symbolic branch for a few
    /// instructions; if it reaches the branch target with the machine
    /// unchanged, the branch does not matter and the state continues at the
    /// target without forking.
    fn try_merge(&mut self, st: &MachineState, cond: TermId, target: u32, fallthrough: u32) -> Option<MachineState> {
        let mut budget = MERGE_LOOKAHEAD;
        self.merge_within(st, cond, target, fallthrough, &mut budget)
    }

    /// `try_merge` sharing one instruction budget with the branches nested
    /// inside the probed arc.
    fn merge_within(
        &mut self,
        st: &MachineState,
        cond: TermId,
        target: u32,
        fallthrough: u32,
        budget: &mut usize,
    ) -> Option<MachineState> {
        let mut probe = st.clone();
        probe.eip = fallthrough;
        let (base, polarity) = self.normalise(cond);
        probe.facts.insert(base, !polarity);
        while probe.eip != target {
            if *budget == 0 || probe.eip == RETURN_SENTINEL {
                return None;
            }
            *budget -= 1;
            match self.step_native(&mut probe) {
                Ok(None) => {}
                Ok(Some(BlockEnd::Fork {
                    cond,
                    target: inner,
                    fallthrough,
                })) => {
                    let inner = self.store.as_const(inner)?;
                    probe = self.merge_within(&probe, cond, inner, fallthrough, budget)?;
                }
                _ => return None,
            }
        }
        if !probe.same_machine(st) {
            self.join(st, &mut probe, cond);
        }
        probe.facts = st.facts.clone();
        probe.path_condition = st.path_condition.clone();
        Some(probe)
    }

    /// Folds the taken state `taken` into `fall`, both at the same address,
    /// selecting on `cond` wherever they differ.
    fn join(&mut self, taken: &MachineState, fall: &mut MachineState, cond: TermId) {
        for (i, r) in IlReg::ALL.iter().enumerate() {
            if taken.regs[i] != fall.regs[i] {
                let s = &mut self.store;
                let value = s.ite(cond, taken.regs[i], fall.regs[i]);
                let def = s.ite(cond, taken.defs[i], fall.defs[i]);
                self.write_reg(fall, *r, value);
                fall.defs[i] = def;
            }
        }
        if taken.mem != fall.mem {
            let s = &mut self.store;
            let chain = s.ite(cond, taken.mem, fall.mem);
            fall.mem_version += 1;
            let var = s.var(&format!("mem_{}", fall.mem_version), Sort::Mem);
            fall.assertions.push(s.eq(var, chain));
            fall.mem = var;
            let mut known = HashMap::new();
            for (addr, &b) in &fall.known_bytes {
                if let Some(&a) = taken.known_bytes.get(addr) {
                    known.insert(*addr, s.ite(cond, a, b));
                }
            }
            fall.known_bytes = known;
        }
    }

    fn feasible(&mut self, st: &MachineState) -> bool {
        let Some(cfg) = self.solver.clone() else {
            return true;
        };
        let mut assertions = st.assertions.clone();
        assertions.extend(&st.path_condition);
        let t = self.store.tt();
        let f = Formula::new(&self.store, assertions, t, &[]);
        match solve(&emit_smtlib(&self.store, &f), &cfg) {
            Ok(r) => r.verdict != Verdict::Unsat,
            Err(e) => {
                debug!("feasibility check failed: {e}");
                true
            }
        }
    }

    /// Runs `st` until it terminates, pushing forked siblings.
    fn run_state(&mut self, mut st: MachineState) -> (PathStatus, MachineState) {
        loop {
            if st.eip == RETURN_SENTINEL {
                return (PathStatus::Returned, st);
            }
            match self.step_native(&mut st) {
                Ok(None) => {}
                Err(status) => return (status, st),
                Ok(Some(BlockEnd::Stop(status))) => return (status, st),
                Ok(Some(BlockEnd::Goto(_))) => unreachable!("handled in step_native"),
                Ok(Some(BlockEnd::Fork {
                    cond,
                    target,
                    fallthrough,
                })) => {
                    let Some(target) = self.store.as_const(target) else {
                        // the fallthrough side is still explorable
                        let mut fall = st.clone();
                        self.assume(&mut fall, cond, false);
                        fall.eip = fallthrough;
                        self.pending.push(fall);
                        let at = st.eip;
                        self.assume(&mut st, cond, true);
                        return (PathStatus::SymbolicJumpTarget(at), st);
                    };
                    if let Some(merged) = self.try_merge(&st, cond, target, fallthrough) {
                        trace!("branch at {:#010x} converges on {target:#010x}", st.eip);
                        st = merged;
                        continue;
                    }
                    debug!("fork at {:#010x}", st.eip);
                    let mut fall = st.clone();
                    self.assume(&mut fall, cond, false);
                    fall.eip = fallthrough;
                    self.assume(&mut st, cond, true);
                    st.eip = target;
                    let fall_ok = self.feasible(&fall);
                    let taken_ok = self.feasible(&st);
                    match (taken_ok, fall_ok) {
                        (true, true) => self.pending.push(fall),
                        (false, true) => st = fall,
                        (true, false) => {}
                        // both sides infeasible: the path itself was infeasible
                        (false, false) => {}
                    }
                }
            }
        }
    }

    /// The next path in depth-first order, or `None` when exhausted.
    pub fn next_path(&mut self) -> Option<Path> {
        let st = self.pending.pop()?;
        let id = self.produced;
        self.produced += 1;
        if id >= self.limits.max_paths {
            return Some(Path {
                id,
                status: PathStatus::PathLimitDropped,
                state: st,
                return_value: None,
            });
        }
        let (status, state) = self.run_state(st);
        let return_value = (status == PathStatus::Returned).then(|| state.reg_def(IlReg::Eax));
        debug!("path {id}: {} after {} IL steps", status.name(), state.steps);
        Some(Path {
            id,
            status,
            state,
            return_value,
        })
    }

    /// Explores everything.
    pub fn run_all(&mut self) -> Vec<Path> {
        std::iter::from_fn(|| self.next_path()).collect()
    }

    /// Output bindings, path condition and goal for `path`.
    pub fn formula(&mut self, path: &Path) -> Formula {
        let (eqs, outputs) = bind_outputs(&mut self.store, &path.final_regs());
        let mut assertions = path.state.assertions.clone();
        assertions.extend(&path.state.path_condition);
        assertions.extend(eqs);
        let goal = goal_term(&mut self.store, &self.query, &outputs);
        Formula::new(&self.store, assertions, goal, &self.inputs)
    }

    /// Output variable terms of `path`, by register.
    pub fn outputs(&mut self, path: &Path) -> BTreeMap<IlReg, TermId> {
        bind_outputs(&mut self.store, &path.final_regs()).1
    }
}

/// Explores all paths from `entry`.
pub fn run<'a>(
    image: &'a FunctionImage,
    entry: u32,
    query: &ReQuery,
    abi: &Abi,
    limits: ExecLimits,
) -> Result<(Explorer<'a>, Vec<Path>), SymexError> {
    let mut ex = Explorer::new(image, entry, query, abi, limits)?;
    let paths = ex.run_all();
    Ok((ex, paths))
}
