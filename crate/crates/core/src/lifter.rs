//! x86 → IL translation.
//!
//! Each native instruction expands into a self-contained IL block whose
//! temporaries are numbered from `V_00`. Flag updates follow the
//! architectural definitions; the templates for `push`, `pop`, `mov`, `ret`
//! and `sub` keep the instruction order and temporary numbering of the
//! classic REIL listings so that lifted code can be compared line by line.

use thiserror::Error;

use crate::il::{IlAddr, IlInstruction, IlOp, IlOperand, IlReg};
use crate::x86::{Cond, Gpr, MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no IL template for `{text}` at {addr:#010x}")]
pub struct UnliftableInstruction {
    pub mnemonic: Mnemonic,
    pub addr: u32,
    pub text: String,
}

/// A native instruction together with its IL expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiftedBlock {
    pub source: X86Instruction,
    pub il: Vec<IlInstruction>,
}

struct Builder {
    native: u32,
    il: Vec<IlInstruction>,
    next_temp: u16,
}

/// Where an x86 operand lives once its address (if any) has been computed.
#[derive(Clone, Copy)]
enum Loc {
    Reg(Register),
    Mem { addr: IlOperand, size: u8 },
    Imm { value: u32, size: u8 },
}

fn reg(r: IlReg) -> IlOperand {
    IlOperand::Reg(r)
}

fn k(value: u32, size: u8) -> IlOperand {
    let mask = if size >= 32 { u32::MAX } else { (1u32 << size) - 1 };
    IlOperand::konst(value & mask, size)
}

const NONE: IlOperand = IlOperand::None;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Arith {
    Add,
    Sub,
    Inc,
    Dec,
}

impl Builder {
    fn new(native: u32) -> Self {
        Self {
            native,
            il: Vec::new(),
            next_temp: 0,
        }
    }

    fn temp(&mut self, size: u8) -> IlOperand {
        let t = IlOperand::temp(self.next_temp, size);
        self.next_temp += 1;
        t
    }

    fn emit(&mut self, op: IlOp, a: IlOperand, b: IlOperand, c: IlOperand) {
        let addr = IlAddr {
            native: self.native,
            sub: self.il.len() as u16,
        };
        self.il.push(IlInstruction::new(op, a, b, c, addr));
    }

    /// `op a, b → fresh temp`
    fn op(&mut self, op: IlOp, a: IlOperand, b: IlOperand, size: u8) -> IlOperand {
        let t = self.temp(size);
        self.emit(op, a, b, t);
        t
    }

    fn str_to_temp(&mut self, v: IlOperand, size: u8) -> IlOperand {
        let t = self.temp(size);
        self.emit(IlOp::Str, v, NONE, t);
        t
    }

    /// Effective address of `m` as a 32-bit operand.
    fn address(&mut self, m: &MemOperand) -> IlOperand {
        let disp = m.disp as u32;
        let mut acc = match m.base {
            Some(b) => Some(self.str_to_temp(reg(IlReg::from_gpr(b)), 32)),
            None => None,
        };
        if let Some(i) = m.index {
            let mut idx = self.str_to_temp(reg(IlReg::from_gpr(i)), 32);
            if m.scale > 1 {
                idx = self.op(IlOp::Shl, idx, k(m.scale.trailing_zeros(), 32), 32);
            }
            acc = Some(match acc {
                Some(base) => self.op(IlOp::Add, base, idx, 32),
                None => idx,
            });
        }
        match acc {
            None => k(disp, 32),
            Some(a) if disp == 0 => a,
            Some(a) => self.op(IlOp::Add, a, k(disp, 32), 32),
        }
    }

    fn resolve(&mut self, op: &Operand) -> Loc {
        match op {
            Operand::Reg(r) => Loc::Reg(*r),
            Operand::Mem(m) => Loc::Mem {
                addr: self.address(m),
                size: m.size.bits(),
            },
            Operand::Imm { value, size } => Loc::Imm {
                value: *value,
                size: size.bits(),
            },
        }
    }

    /// Value of `loc` as an operand; full registers and constants are used
    /// in place, everything else goes through a temporary.
    fn read(&mut self, loc: Loc) -> IlOperand {
        match loc {
            Loc::Reg(Register::R32(g)) => reg(IlReg::from_gpr(g)),
            Loc::Reg(Register::Low8(g)) => self.str_to_temp(reg(IlReg::from_gpr(g)), 8),
            Loc::Reg(Register::High8(g)) => {
                let shifted = self.op(IlOp::Shr, reg(IlReg::from_gpr(g)), k(8, 32), 32);
                self.str_to_temp(shifted, 8)
            }
            Loc::Mem { addr, size } => {
                let t = self.temp(size);
                self.emit(IlOp::Ldm, addr, NONE, t);
                t
            }
            Loc::Imm { value, size } => k(value, size),
        }
    }

    /// Like [`Builder::read`] but always yields a temporary (or constant).
    fn read_temp(&mut self, loc: Loc) -> IlOperand {
        match loc {
            Loc::Reg(Register::R32(g)) => self.str_to_temp(reg(IlReg::from_gpr(g)), 32),
            _ => self.read(loc),
        }
    }

    fn write(&mut self, loc: Loc, v: IlOperand) {
        match loc {
            Loc::Reg(Register::R32(g)) => self.emit(IlOp::Str, v, NONE, reg(IlReg::from_gpr(g))),
            Loc::Reg(Register::Low8(g)) => self.write_byte(g, v, 0),
            Loc::Reg(Register::High8(g)) => self.write_byte(g, v, 8),
            Loc::Mem { addr, .. } => self.emit(IlOp::Stm, v, NONE, addr),
            Loc::Imm { .. } => unreachable!("immediate destinations are rejected before lifting"),
        }
    }

    fn write_byte(&mut self, g: Gpr, v: IlOperand, shift: u32) {
        let full = reg(IlReg::from_gpr(g));
        let kept = self.op(IlOp::And, full, k(!(0xFF << shift), 32), 32);
        let mut wide = self.str_to_temp(v, 32);
        if shift > 0 {
            wide = self.op(IlOp::Shl, wide, k(shift, 32), 32);
        }
        self.emit(IlOp::Or, kept, wide, full);
    }

    /// PF: even parity of the low byte of `r`, via the usual xor tree.
    fn parity(&mut self, r: IlOperand, size: u8) {
        let byte = self.temp(8);
        let masked = self.temp(size);
        self.emit(IlOp::And, r, k(0xFF, size), masked);
        self.emit(IlOp::Or, masked, k(0, size), byte);
        let s7 = self.op(IlOp::Shr, byte, k(7, 8), 8);
        let s6 = self.op(IlOp::Shr, byte, k(6, 8), 8);
        let x76 = self.op(IlOp::Xor, s7, s6, 8);
        let s5 = self.op(IlOp::Shr, byte, k(5, 8), 8);
        let s4 = self.op(IlOp::Shr, byte, k(4, 8), 8);
        let x54 = self.op(IlOp::Xor, s5, s4, 8);
        let hi = self.op(IlOp::Xor, x76, x54, 8);
        let s3 = self.op(IlOp::Shr, byte, k(3, 8), 8);
        let s2 = self.op(IlOp::Shr, byte, k(2, 8), 8);
        let x32 = self.op(IlOp::Xor, s3, s2, 8);
        let s1 = self.op(IlOp::Shr, byte, k(1, 8), 8);
        let x10 = self.op(IlOp::Xor, s1, byte, 8);
        let lo = self.op(IlOp::Xor, x32, x10, 8);
        let all = self.op(IlOp::Xor, hi, lo, 8);
        let bit = self.temp(1);
        let masked_bit = self.temp(8);
        self.emit(IlOp::And, all, k(1, 8), masked_bit);
        self.emit(IlOp::Or, masked_bit, k(0, 8), bit);
        self.emit(IlOp::Not, bit, NONE, reg(IlReg::Pf));
    }

    fn zero_flag(&mut self, r: IlOperand, size: u8) {
        self.emit(IlOp::Eq, r, k(0, size), reg(IlReg::Zf));
    }

    fn sign_flag(&mut self, r: IlOperand, size: u8) {
        let shifted = self.op(IlOp::Shr, r, k(u32::from(size) - 1, size), size);
        let bit = self.op(IlOp::And, k(1, size), shifted, size);
        self.emit(IlOp::Eq, k(1, size), bit, reg(IlReg::Sf));
    }

    /// add/sub/inc/dec (and cmp/neg through sub). Returns the result temp.
    fn arith(&mut self, kind: Arith, a: IlOperand, b: IlOperand, size: u8) -> IlOperand {
        let op = match kind {
            Arith::Add | Arith::Inc => IlOp::Add,
            Arith::Sub | Arith::Dec => IlOp::Sub,
        };
        let result = self.op(op, a, b, size);
        let r = self.op(op, a, b, size);
        match kind {
            Arith::Sub => self.emit(IlOp::Lt, a, b, reg(IlReg::Cf)),
            Arith::Add => self.emit(IlOp::Lt, r, a, reg(IlReg::Cf)),
            Arith::Inc | Arith::Dec => {}
        }
        self.parity(r, size);
        let ab = self.op(IlOp::Xor, a, b, size);
        let abr = self.op(IlOp::Xor, r, ab, size);
        let nibble_carry = self.op(IlOp::And, k(0x10, size), abr, size);
        self.emit(IlOp::Eq, k(0x10, size), nibble_carry, reg(IlReg::Af));
        self.zero_flag(r, size);
        self.sign_flag(r, size);
        // OF: sub → (a^b)&(a^r), add → (b^r)&(a^r)
        let x1 = match kind {
            Arith::Sub | Arith::Dec => self.op(IlOp::Xor, a, b, size),
            Arith::Add | Arith::Inc => self.op(IlOp::Xor, b, r, size),
        };
        let x2 = self.op(IlOp::Xor, a, r, size);
        let both = self.op(IlOp::And, x1, x2, size);
        let top = self.op(IlOp::Shr, both, k(u32::from(size) - 1, size), size);
        self.emit(IlOp::Eq, k(1, size), top, reg(IlReg::Of));
        result
    }

    fn logic(&mut self, op: IlOp, a: IlOperand, b: IlOperand, size: u8) -> IlOperand {
        let r = self.op(op, a, b, size);
        self.emit(IlOp::Str, k(0, 1), NONE, reg(IlReg::Cf));
        self.parity(r, size);
        self.emit(IlOp::Undef, NONE, NONE, reg(IlReg::Af));
        self.zero_flag(r, size);
        self.sign_flag(r, size);
        self.emit(IlOp::Str, k(0, 1), NONE, reg(IlReg::Of));
        r
    }

    /// `flag = keep ? flag : new`, with `keep`/`not_keep` 1-bit operands.
    fn select_flag(&mut self, flag: IlReg, keep: IlOperand, not_keep: IlOperand, new: IlOperand) {
        let old = self.op(IlOp::And, reg(flag), keep, 1);
        let fresh = self.op(IlOp::And, new, not_keep, 1);
        self.emit(IlOp::Or, old, fresh, reg(flag));
    }

    fn shift(&mut self, mnemonic: Mnemonic, dst: Loc, count: Loc) {
        if let Loc::Imm { value, .. } = count {
            if value & 31 == 0 {
                self.emit(IlOp::Nop, NONE, NONE, NONE);
                return;
            }
        }
        let a = self.read_temp(dst);
        let n = match count {
            Loc::Imm { value, .. } => k(value & 31, 32),
            other => {
                let c8 = self.read(other);
                let c32 = self.str_to_temp(c8, 32);
                self.op(IlOp::And, c32, k(31, 32), 32)
            }
        };
        let r = match mnemonic {
            Mnemonic::Shl => self.op(IlOp::Shl, a, n, 32),
            Mnemonic::Shr => self.op(IlOp::Shr, a, n, 32),
            _ => {
                let lo = self.op(IlOp::Shr, a, n, 32);
                let sign = self.op(IlOp::Shr, a, k(31, 32), 32);
                let fill = self.op(IlOp::Sub, k(0, 32), sign, 32);
                let kept = self.op(IlOp::Shr, k(u32::MAX, 32), n, 32);
                let high_mask = self.temp(32);
                self.emit(IlOp::Not, kept, NONE, high_mask);
                let hi = self.op(IlOp::And, fill, high_mask, 32);
                self.op(IlOp::Or, lo, hi, 32)
            }
        };
        // new CF: last bit shifted out
        let cf_shift = match mnemonic {
            Mnemonic::Shl => self.op(IlOp::Sub, k(32, 32), n, 32),
            _ => self.op(IlOp::Sub, n, k(1, 32), 32),
        };
        let out = self.op(IlOp::Shr, a, cf_shift, 32);
        let cf = self.str_to_temp(out, 1);
        let of = match mnemonic {
            Mnemonic::Shl => {
                let msb = self.op(IlOp::Shr, r, k(31, 32), 32);
                let msb1 = self.str_to_temp(msb, 1);
                self.op(IlOp::Xor, msb1, cf, 1)
            }
            Mnemonic::Shr => {
                let msb = self.op(IlOp::Shr, a, k(31, 32), 32);
                self.str_to_temp(msb, 1)
            }
            _ => k(0, 1),
        };
        if n.is_const() {
            self.emit(IlOp::Str, cf, NONE, reg(IlReg::Cf));
            self.emit(IlOp::Str, of, NONE, reg(IlReg::Of));
            self.parity(r, 32);
            self.emit(IlOp::Undef, NONE, NONE, reg(IlReg::Af));
            self.zero_flag(r, 32);
            self.sign_flag(r, 32);
        } else {
            // a zero count leaves every flag untouched
            let keep = self.op(IlOp::Eq, n, k(0, 32), 1);
            let not_keep = self.temp(1);
            self.emit(IlOp::Not, keep, NONE, not_keep);
            self.select_flag(IlReg::Cf, keep, not_keep, cf);
            self.select_flag(IlReg::Of, keep, not_keep, of);
            let pf = self.temp(1);
            let zf = self.temp(1);
            let sf = self.temp(1);
            let af = self.temp(1);
            self.flags_into(r, pf, zf, sf);
            self.emit(IlOp::Undef, NONE, NONE, af);
            self.select_flag(IlReg::Pf, keep, not_keep, pf);
            self.select_flag(IlReg::Zf, keep, not_keep, zf);
            self.select_flag(IlReg::Sf, keep, not_keep, sf);
            self.select_flag(IlReg::Af, keep, not_keep, af);
        }
        self.write(dst, r);
    }

    /// PF/ZF/SF of a 32-bit result into temporaries instead of registers.
    fn flags_into(&mut self, r: IlOperand, pf: IlOperand, zf: IlOperand, sf: IlOperand) {
        let start = self.il.len();
        self.parity(r, 32);
        self.zero_flag(r, 32);
        self.sign_flag(r, 32);
        for ins in &mut self.il[start..] {
            ins.c = match ins.c {
                IlOperand::Reg(IlReg::Pf) => pf,
                IlOperand::Reg(IlReg::Zf) => zf,
                IlOperand::Reg(IlReg::Sf) => sf,
                c => c,
            };
        }
    }

    fn push_value(&mut self, v: IlOperand) {
        let value = if v.is_const() {
            self.str_to_temp(v, 32)
        } else {
            v
        };
        let sp = self.str_to_temp(reg(IlReg::Esp), 32);
        let new_sp = self.op(IlOp::Sub, sp, k(4, 32), 32);
        self.emit(IlOp::Str, new_sp, NONE, reg(IlReg::Esp));
        self.emit(IlOp::Stm, value, NONE, new_sp);
    }

    fn pop_into(&mut self, dst: &Operand) {
        let sp = self.str_to_temp(reg(IlReg::Esp), 32);
        let value = self.temp(32);
        self.emit(IlOp::Ldm, sp, NONE, value);
        let new_sp = self.op(IlOp::Add, sp, k(4, 32), 32);
        self.emit(IlOp::Str, new_sp, NONE, reg(IlReg::Esp));
        let loc = self.resolve(dst);
        self.write(loc, value);
    }

    /// 1-bit operand that is nonzero when `cond` holds.
    fn condition(&mut self, cond: Cond) -> IlOperand {
        let base = match cond {
            Cond::O | Cond::No => reg(IlReg::Of),
            Cond::B | Cond::Ae => reg(IlReg::Cf),
            Cond::E | Cond::Ne => reg(IlReg::Zf),
            Cond::S | Cond::Ns => reg(IlReg::Sf),
            Cond::P | Cond::Np => reg(IlReg::Pf),
            Cond::Be | Cond::A => self.op(IlOp::Or, reg(IlReg::Cf), reg(IlReg::Zf), 1),
            Cond::L | Cond::Ge => self.op(IlOp::Xor, reg(IlReg::Sf), reg(IlReg::Of), 1),
            Cond::Le | Cond::G => {
                let lt = self.op(IlOp::Xor, reg(IlReg::Sf), reg(IlReg::Of), 1);
                self.op(IlOp::Or, reg(IlReg::Zf), lt, 1)
            }
        };
        // odd condition codes are the negations
        if cond.code() & 1 == 1 {
            let t = self.temp(1);
            self.emit(IlOp::Not, base, NONE, t);
            t
        } else {
            base
        }
    }
}

/// Translates one instruction into its IL block.
pub fn lift(instr: &X86Instruction) -> Result<LiftedBlock, UnliftableInstruction> {
    let unliftable = || UnliftableInstruction {
        mnemonic: instr.mnemonic,
        addr: instr.addr,
        text: instr.to_string(),
    };
    let ops = instr.operands.as_slice();
    if ops.iter().any(|o| o.size() == OpSize::Word) && instr.mnemonic != Mnemonic::Ret {
        return Err(unliftable());
    }
    if matches!(ops.first(), Some(Operand::Imm { .. }))
        && !matches!(
            instr.mnemonic,
            Mnemonic::Push | Mnemonic::Ret | Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call
        )
    {
        return Err(unliftable());
    }
    let mut b = Builder::new(instr.addr);
    match (instr.mnemonic, ops) {
        (Mnemonic::Nop, []) => b.emit(IlOp::Nop, NONE, NONE, NONE),
        (Mnemonic::Mov, [dst, src]) => {
            if dst.size() != src.size() {
                return Err(unliftable());
            }
            match (dst, src) {
                (Operand::Reg(Register::R32(_)), Operand::Reg(Register::R32(Gpr::Esp))) => {
                    let d = b.resolve(dst);
                    let t = b.str_to_temp(reg(IlReg::Esp), 32);
                    b.write(d, t);
                }
                (Operand::Mem(_), _) => {
                    let d = b.resolve(dst);
                    let s = b.resolve(src);
                    let v = b.read(s);
                    b.write(d, v);
                }
                _ => {
                    let s = b.resolve(src);
                    let v = b.read(s);
                    let d = b.resolve(dst);
                    b.write(d, v);
                }
            }
        }
        (Mnemonic::Add | Mnemonic::Sub | Mnemonic::Cmp, [dst, src]) => {
            let size = dst.size().bits();
            let d = b.resolve(dst);
            let a = b.read_temp(d);
            let s = b.resolve(src);
            let v = b.read(s);
            let kind = if instr.mnemonic == Mnemonic::Add {
                Arith::Add
            } else {
                Arith::Sub
            };
            let r = b.arith(kind, a, v, size);
            if instr.mnemonic != Mnemonic::Cmp {
                b.write(d, r);
            }
        }
        (Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Test, [dst, src]) => {
            let size = dst.size().bits();
            let d = b.resolve(dst);
            let a = b.read_temp(d);
            let s = b.resolve(src);
            let v = b.read(s);
            let op = match instr.mnemonic {
                Mnemonic::Or => IlOp::Or,
                Mnemonic::Xor => IlOp::Xor,
                _ => IlOp::And,
            };
            let r = b.logic(op, a, v, size);
            if instr.mnemonic != Mnemonic::Test {
                b.write(d, r);
            }
        }
        (Mnemonic::Inc | Mnemonic::Dec, [dst]) => {
            let size = dst.size().bits();
            let d = b.resolve(dst);
            let a = b.read_temp(d);
            let kind = if instr.mnemonic == Mnemonic::Inc {
                Arith::Inc
            } else {
                Arith::Dec
            };
            let r = b.arith(kind, a, k(1, size), size);
            b.write(d, r);
        }
        (Mnemonic::Neg, [dst]) => {
            let size = dst.size().bits();
            let d = b.resolve(dst);
            let v = b.read_temp(d);
            let r = b.arith(Arith::Sub, k(0, size), v, size);
            b.write(d, r);
        }
        (Mnemonic::Not, [dst]) => {
            let size = dst.size().bits();
            let d = b.resolve(dst);
            let v = b.read_temp(d);
            let r = b.temp(size);
            b.emit(IlOp::Not, v, NONE, r);
            b.write(d, r);
        }
        (Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar, [dst, count]) => {
            if dst.size() != OpSize::Dword {
                return Err(unliftable());
            }
            let d = b.resolve(dst);
            let c = b.resolve(count);
            b.shift(instr.mnemonic, d, c);
        }
        (Mnemonic::Lea, [Operand::Reg(Register::R32(g)), Operand::Mem(m)]) => {
            let addr = b.address(m);
            b.emit(IlOp::Str, addr, NONE, reg(IlReg::from_gpr(*g)));
        }
        (Mnemonic::Xchg, [x, y]) => {
            if x.size() != y.size() {
                return Err(unliftable());
            }
            let lx = b.resolve(x);
            let ly = b.resolve(y);
            let vx = b.read_temp(lx);
            let vy = b.read_temp(ly);
            b.write(lx, vy);
            b.write(ly, vx);
        }
        (Mnemonic::Push, [src]) => {
            if src.size() != OpSize::Dword {
                return Err(unliftable());
            }
            let s = b.resolve(src);
            let v = b.read_temp(s);
            b.push_value(v);
        }
        (Mnemonic::Pop, [dst]) => {
            if dst.size() != OpSize::Dword {
                return Err(unliftable());
            }
            b.pop_into(dst);
        }
        (Mnemonic::Leave, []) => {
            b.emit(IlOp::Str, reg(IlReg::Ebp), NONE, reg(IlReg::Esp));
            b.pop_into(&Operand::reg32(Gpr::Ebp));
        }
        (Mnemonic::Ret, _) => {
            let extra = match ops {
                [] => 0,
                [Operand::Imm { value, .. }] => *value,
                _ => return Err(unliftable()),
            };
            // the return-address temporary is V_01 in the reference listing
            b.next_temp = 1;
            let target = b.temp(32);
            b.emit(IlOp::Ldm, reg(IlReg::Esp), NONE, target);
            b.emit(IlOp::Add, reg(IlReg::Esp), k(4 + extra, 32), reg(IlReg::Esp));
            b.emit(IlOp::Jcc, k(1, 1), NONE, target);
        }
        (Mnemonic::Jmp, [Operand::Imm { value, .. }]) => {
            b.emit(IlOp::Jcc, k(1, 1), NONE, k(*value, 32));
        }
        (Mnemonic::Jcc(cond), [Operand::Imm { value, .. }]) => {
            let c = b.condition(cond);
            b.emit(IlOp::Jcc, c, NONE, k(*value, 32));
        }
        (Mnemonic::Call, [Operand::Imm { value, .. }]) => {
            let ret = b.str_to_temp(k(instr.next_addr(), 32), 32);
            b.push_value(ret);
            b.emit(IlOp::Jcc, k(1, 1), NONE, k(*value, 32));
        }
        _ => return Err(unliftable()),
    }
    debug_assert!(b.il.iter().all(|i| crate::il::validate(i).is_ok()));
    Ok(LiftedBlock {
        source: instr.clone(),
        il: b.il,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::il::{format_il, validate};
    use crate::loader::{parse_hex, FunctionImage};
    use crate::x86::decode_one;

    fn lift_hex(hex: &str) -> LiftedBlock {
        let img = FunctionImage::new(parse_hex(hex).unwrap(), 0).unwrap();
        lift(&decode_one(&img, 0).unwrap()).unwrap()
    }

    fn listing(hex: &str) -> String {
        format_il(&lift_hex(hex).il)
    }

    #[test]
    fn mov_reg_reg_is_single_str() {
        assert_eq!(listing("89 C8"), "STR R_ECX:32, , R_EAX:32\n");
    }

    #[test]
    fn nop() {
        assert_eq!(listing("90"), "NOP , , \n");
    }

    #[test]
    fn blocks_are_valid_and_addressed() {
        for hex in [
            "55", "89 E5", "8B 45 08", "83 E8 03", "5D", "C3", "01 D0", "31 C0", "85 C9", "F7 D8",
            "D3 E0", "C1 F8 05", "D3 F8", "86 E0", "88 64 24 01", "E8 00 00 00 00", "0F 8E 10 00 00 00",
            "C9", "8D 4C 98 F8", "FF 74 24 04", "8F 44 24 04", "FE C4", "80 E4 0F",
        ] {
            let block = lift_hex(hex);
            assert!(!block.il.is_empty(), "{hex}");
            for (n, i) in block.il.iter().enumerate() {
                validate(i).unwrap_or_else(|e| panic!("{hex}: {i}: {e}"));
                assert_eq!(i.addr.native, 0);
                assert_eq!(i.addr.sub as usize, n);
            }
            // temporaries are written at most once
            let mut written = std::collections::HashSet::new();
            for i in &block.il {
                if let IlOperand::Temp { index, .. } = i.c {
                    if i.op != IlOp::Stm && i.op != IlOp::Jcc {
                        assert!(written.insert(index), "{hex}: V_{index:02} written twice");
                    }
                }
            }
        }
    }

    #[test]
    fn shift_by_zero_is_nop() {
        assert_eq!(listing("C1 E0 00"), "NOP , , \n");
    }

    #[test]
    fn jle_condition_shape() {
        let text = listing("7E 00");
        assert_eq!(
            text,
            "XOR R_SF:1, R_OF:1, V_00:1\nOR R_ZF:1, V_00:1, V_01:1\nJCC V_01:1, , 2:32\n"
        );
    }

    #[test]
    fn unliftable_forms() {
        let i = X86Instruction::new(0, Mnemonic::Shl, vec![
            Operand::Reg(Register::Low8(Gpr::Eax)),
            Operand::Imm { value: 1, size: OpSize::Byte },
        ]);
        assert!(lift(&i).is_err());
    }
}
