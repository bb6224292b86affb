//! Concrete interpreter over the decode → lift pipeline.
//!
//! Runs the same IL the symbolic executor sees, with machine-integer
//! semantics, so it can serve as ground truth for differential tests and as
//! the brute-force baseline.

use std::collections::HashMap;

use log::{debug, warn};
use thiserror::Error;

use crate::il::{IlAddr, IlInstruction, IlOp, IlOperand, IlReg};
use crate::lifter::{lift, LiftedBlock, UnliftableInstruction};
use crate::loader::FunctionImage;
use crate::machine::{Abi, AbiError, ExecLimits, RETURN_SENTINEL, STACK_BASE};
use crate::query::ReQuery;
use crate::x86::{decode_one, DecodeError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmuError {
    #[error(transparent)]
    Abi(#[from] AbiError),
    #[error("entry {0:#010x} is outside the image")]
    EntryOutOfRange(u32),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Unliftable(#[from] UnliftableInstruction),
    #[error("division by zero at {:#010x}.{}", .0.native, .0.sub)]
    DivideByZero(IlAddr),
    #[error("step limit of {0} IL instructions reached")]
    StepLimit(u64),
}

pub(crate) fn mask(bits: u8) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Width at which a binary op is evaluated: a constant adopts its partner's
/// width.
pub(crate) fn op_width(a: &IlOperand, b: &IlOperand) -> u8 {
    let (wa, wb) = (a.size_bits().unwrap_or(32), b.size_bits().unwrap_or(32));
    match (a.is_const(), b.is_const()) {
        (true, false) => wb,
        (false, _) => wa,
        (true, true) => wa.max(wb),
    }
}

/// Register file plus sparse byte memory. Flags hold 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteState {
    regs: [u32; 15],
    mem: HashMap<u32, u8>,
    pub steps: u64,
}

impl ConcreteState {
    /// Entry state: ESP at the stack base, the return sentinel at `[ESP]`,
    /// arguments placed per `abi`, every other register zero.
    pub fn initial(entry: u32, args: &[u32], abi: &Abi) -> Result<Self, AbiError> {
        abi.check_arity(args.len())?;
        let mut s = Self {
            regs: [0; 15],
            mem: HashMap::new(),
            steps: 0,
        };
        s.set_reg(IlReg::Esp, STACK_BASE);
        s.set_reg(IlReg::Eip, entry);
        s.write(STACK_BASE, RETURN_SENTINEL, 32);
        match abi {
            Abi::Stack => {
                for (i, &v) in args.iter().enumerate() {
                    s.write(STACK_BASE + 4 + 4 * i as u32, v, 32);
                }
            }
            Abi::Registers(regs) => {
                for (&r, &v) in regs.iter().zip(args) {
                    s.set_reg(r, v);
                }
            }
        }
        Ok(s)
    }

    pub fn reg(&self, r: IlReg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: IlReg, v: u32) {
        self.regs[r.index()] = if r.is_flag() { v & 1 } else { v };
    }

    pub fn read_byte(&self, addr: u32) -> u8 {
        match self.mem.get(&addr) {
            Some(b) => *b,
            None => {
                warn!("read of uninitialised memory at {addr:#010x}, using 0");
                0
            }
        }
    }

    /// Little-endian load of `bits` (8, 16 or 32).
    pub fn read(&self, addr: u32, bits: u8) -> u32 {
        (0..u32::from(bits / 8)).rev().fold(0u32, |acc, i| {
            (acc << 8) | u32::from(self.read_byte(addr.wrapping_add(i)))
        })
    }

    pub fn write(&mut self, addr: u32, value: u32, bits: u8) {
        for i in 0..u32::from(bits / 8) {
            self.mem.insert(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }

    /// Executes one lifted block. Returns the jump target when a JCC is
    /// taken; `None` means fall through to the next instruction.
    pub fn exec_block(
        &mut self,
        il: &[IlInstruction],
        max_steps: u64,
    ) -> Result<Option<u32>, EmuError> {
        let mut temps: Vec<u64> = Vec::new();
        for ins in il {
            if self.steps >= max_steps {
                return Err(EmuError::StepLimit(self.steps));
            }
            self.steps += 1;
            let get = |s: &Self, temps: &Vec<u64>, op: &IlOperand| -> u64 {
                match *op {
                    IlOperand::Reg(r) => u64::from(s.reg(r)),
                    IlOperand::Temp { index, size } => {
                        temps.get(usize::from(index)).copied().unwrap_or(0) & mask(size)
                    }
                    IlOperand::Const { value, .. } => u64::from(value),
                    IlOperand::None => 0,
                }
            };
            let a = get(self, &temps, &ins.a);
            let b = get(self, &temps, &ins.b);
            let result = match ins.op {
                IlOp::Nop | IlOp::Unkn => continue,
                IlOp::Stm => {
                    let addr = get(self, &temps, &ins.c) as u32;
                    self.write(addr, a as u32, ins.a.size_bits().unwrap_or(32));
                    continue;
                }
                IlOp::Jcc => {
                    if a != 0 {
                        return Ok(Some(get(self, &temps, &ins.c) as u32));
                    }
                    continue;
                }
                IlOp::Ldm => u64::from(self.read(a as u32, ins.c.size_bits().unwrap_or(32))),
                IlOp::Str => a,
                IlOp::Not => !a & mask(ins.a.size_bits().unwrap_or(32)),
                IlOp::Undef => 0,
                op => {
                    let w = op_width(&ins.a, &ins.b);
                    let m = mask(w);
                    let (a, b) = (a & m, b & m);
                    let r = match op {
                        IlOp::Add => a.wrapping_add(b),
                        IlOp::Sub => a.wrapping_sub(b),
                        IlOp::Mul => a.wrapping_mul(b),
                        IlOp::Div | IlOp::Mod if b == 0 => {
                            return Err(EmuError::DivideByZero(ins.addr))
                        }
                        IlOp::Div => a / b,
                        IlOp::Mod => a % b,
                        IlOp::Shl if b >= u64::from(w) => 0,
                        IlOp::Shl => a << b,
                        IlOp::Shr if b >= u64::from(w) => 0,
                        IlOp::Shr => a >> b,
                        IlOp::And => a & b,
                        IlOp::Or => a | b,
                        IlOp::Xor => a ^ b,
                        IlOp::Eq => u64::from(a == b),
                        IlOp::Lt => u64::from(a < b),
                        _ => unreachable!("non-binary op handled above"),
                    };
                    r & m
                }
            };
            let c_bits = ins.c.size_bits().unwrap_or(32);
            let value = result & mask(c_bits);
            match ins.c {
                IlOperand::Reg(r) => self.set_reg(r, value as u32),
                IlOperand::Temp { index, .. } => {
                    let i = usize::from(index);
                    if temps.len() <= i {
                        temps.resize(i + 1, 0);
                    }
                    temps[i] = value;
                }
                _ => unreachable!("validated destinations are writable"),
            }
        }
        Ok(None)
    }
}

/// Outcome of a concrete run that reached the return sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteRun {
    pub eax: u32,
    pub steps: u64,
    pub state: ConcreteState,
}

/// Decode/lift cache over one image, reusable across many runs.
pub struct Emulator<'a> {
    image: &'a FunctionImage,
    blocks: HashMap<u32, Result<(LiftedBlock, u32), EmuError>>,
}

impl<'a> Emulator<'a> {
    pub fn new(image: &'a FunctionImage) -> Self {
        Self {
            image,
            blocks: HashMap::new(),
        }
    }

    fn block(&mut self, addr: u32) -> Result<&(LiftedBlock, u32), EmuError> {
        let image = self.image;
        self.blocks
            .entry(addr)
            .or_insert_with(|| {
                let instr = decode_one(image, addr)?;
                let next = instr.next_addr();
                Ok((lift(&instr)?, next))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn run(
        &mut self,
        entry: u32,
        args: &[u32],
        abi: &Abi,
        limits: &ExecLimits,
    ) -> Result<ConcreteRun, EmuError> {
        if !self.image.contains(entry) {
            return Err(EmuError::EntryOutOfRange(entry));
        }
        let state = ConcreteState::initial(entry, args, abi)?;
        self.run_state(state, limits)
    }

    /// Runs from an arbitrary prepared state until the return sentinel.
    pub fn run_state(
        &mut self,
        mut state: ConcreteState,
        limits: &ExecLimits,
    ) -> Result<ConcreteRun, EmuError> {
        loop {
            let eip = state.reg(IlReg::Eip);
            if eip == RETURN_SENTINEL {
                return Ok(ConcreteRun {
                    eax: state.reg(IlReg::Eax),
                    steps: state.steps,
                    state,
                });
            }
            let (block, next) = self.block(eip)?;
            let next = *next;
            let target = state.exec_block(&block.il, limits.max_steps)?;
            state.set_reg(IlReg::Eip, target.unwrap_or(next));
        }
    }
}

pub fn run_concrete(
    image: &FunctionImage,
    entry: u32,
    args: &[u32],
    abi: &Abi,
    limits: &ExecLimits,
) -> Result<ConcreteRun, EmuError> {
    Emulator::new(image).run(entry, args, abi, limits)
}

/// Smallest key in `0..2^key_bits` whose run satisfies `goal`. The key is
/// passed as the first argument, any further arguments are zero. Runs that
/// fail count as not satisfying.
pub fn brute_force(
    image: &FunctionImage,
    entry: u32,
    abi: &Abi,
    goal: &ReQuery,
    key_bits: u32,
    limits: &ExecLimits,
) -> Option<u32> {
    let mut emu = Emulator::new(image);
    let mut args = vec![0u32; goal.input.len().max(1)];
    let last = if key_bits >= 32 {
        u32::MAX
    } else {
        (1u32 << key_bits) - 1
    };
    for key in 0..=last {
        args[0] = key;
        match emu.run(entry, &args, abi, limits) {
            Ok(run) => {
                let observed = run.state.reg(goal.register);
                if goal.holds(observed) {
                    return Some(key);
                }
            }
            Err(e) => debug!("key {key:#x}: {e}"),
        }
    }
    None
}
