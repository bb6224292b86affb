//! A small x86-32 instruction model with a decoder and a canonical encoder.
//!
//! Only the subset needed for plain compiled functions and for the
//! obfuscator's output is covered. Anything else, including every prefix
//! byte, is reported as [`DecodeError::UnsupportedOpcode`].

mod decode;
mod encode;

use std::fmt;

pub use decode::{decode_one, decode_bytes, DecodeError};
pub use encode::{encode, encode_branch, BranchForm, EncodeError};

/// 32-bit general purpose registers, in ModRM encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gpr {
    Eax = 0,
    Ecx = 1,
    Edx = 2,
    Ebx = 3,
    Esp = 4,
    Ebp = 5,
    Esi = 6,
    Edi = 7,
}

impl Gpr {
    pub const ALL: [Gpr; 8] = [
        Gpr::Eax,
        Gpr::Ecx,
        Gpr::Edx,
        Gpr::Ebx,
        Gpr::Esp,
        Gpr::Ebp,
        Gpr::Esi,
        Gpr::Edi,
    ];

    pub fn from_index(i: u8) -> Gpr {
        Self::ALL[(i & 7) as usize]
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Gpr::Eax => "eax",
            Gpr::Ecx => "ecx",
            Gpr::Edx => "edx",
            Gpr::Ebx => "ebx",
            Gpr::Esp => "esp",
            Gpr::Ebp => "ebp",
            Gpr::Esi => "esi",
            Gpr::Edi => "edi",
        }
    }
}

/// A register operand: a full 32-bit register or one of the eight byte
/// registers (`al`..`bh`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Register {
    R32(Gpr),
    /// Low byte of `eax`, `ecx`, `edx` or `ebx`.
    Low8(Gpr),
    /// Bits 8..16 of `eax`, `ecx`, `edx` or `ebx`.
    High8(Gpr),
}

impl Register {
    /// Decodes a byte-register number (0..8) using the `al cl dl bl ah ch dh bh`
    /// numbering.
    pub fn byte_from_index(i: u8) -> Register {
        let i = i & 7;
        if i < 4 {
            Register::Low8(Gpr::from_index(i))
        } else {
            Register::High8(Gpr::from_index(i - 4))
        }
    }

    /// ModRM register number.
    pub fn index(self) -> u8 {
        match self {
            Register::R32(g) | Register::Low8(g) => g.index(),
            Register::High8(g) => g.index() + 4,
        }
    }

    pub fn size(self) -> OpSize {
        match self {
            Register::R32(_) => OpSize::Dword,
            _ => OpSize::Byte,
        }
    }

    /// The architectural register this operand lives in.
    pub fn gpr(self) -> Gpr {
        match self {
            Register::R32(g) | Register::Low8(g) | Register::High8(g) => g,
        }
    }

    fn is_valid(self) -> bool {
        match self {
            Register::R32(_) => true,
            Register::Low8(g) | Register::High8(g) => g.index() < 4,
        }
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Register::R32(g) => f.write_str(g.name()),
            Register::Low8(g) => write!(f, "{}l", &g.name()[1..2]),
            Register::High8(g) => write!(f, "{}h", &g.name()[1..2]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpSize {
    Byte,
    Word,
    Dword,
}

impl OpSize {
    pub fn bits(self) -> u8 {
        match self {
            OpSize::Byte => 8,
            OpSize::Word => 16,
            OpSize::Dword => 32,
        }
    }

    pub fn mask(self) -> u32 {
        match self {
            OpSize::Byte => 0xFF,
            OpSize::Word => 0xFFFF,
            OpSize::Dword => u32::MAX,
        }
    }
}

/// `[base + index*scale + disp]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub base: Option<Gpr>,
    pub index: Option<Gpr>,
    /// 1, 2, 4 or 8; meaningless without an index.
    pub scale: u8,
    pub disp: i32,
    pub size: OpSize,
}

impl MemOperand {
    pub fn base_disp(base: Gpr, disp: i32, size: OpSize) -> Self {
        Self {
            base: Some(base),
            index: None,
            scale: 1,
            disp,
            size,
        }
    }

    pub fn absolute(addr: u32, size: OpSize) -> Self {
        Self {
            base: None,
            index: None,
            scale: 1,
            disp: addr as i32,
            size,
        }
    }

    /// Registers read to form the address.
    pub fn address_regs(&self) -> impl Iterator<Item = Gpr> {
        self.base.into_iter().chain(self.index)
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.size {
            OpSize::Byte => f.write_str("byte ptr [")?,
            OpSize::Word => f.write_str("word ptr [")?,
            OpSize::Dword => f.write_str("dword ptr [")?,
        }
        let mut first = true;
        if let Some(b) = self.base {
            f.write_str(b.name())?;
            first = false;
        }
        if let Some(i) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{}*{}", i.name(), self.scale)?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp as u32)?;
        } else if self.disp < 0 {
            write!(f, "-{:#x}", self.disp.unsigned_abs())?;
        } else if self.disp > 0 {
            write!(f, "+{:#x}", self.disp)?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    /// Immediates are stored zero-extended from `size`; sign-extended imm8
    /// forms are stored already extended with `size == Dword`. Relative
    /// branch operands hold the absolute target address.
    Imm { value: u32, size: OpSize },
    Mem(MemOperand),
}

impl Operand {
    pub fn reg32(g: Gpr) -> Self {
        Operand::Reg(Register::R32(g))
    }

    pub fn imm32(value: u32) -> Self {
        Operand::Imm {
            value,
            size: OpSize::Dword,
        }
    }

    pub fn size(&self) -> OpSize {
        match self {
            Operand::Reg(r) => r.size(),
            Operand::Imm { size, .. } => *size,
            Operand::Mem(m) => m.size,
        }
    }

    pub fn size_bits(&self) -> u8 {
        self.size().bits()
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm { value, .. } => write!(f, "{value:#x}"),
            Operand::Mem(m) => write!(f, "{m}"),
        }
    }
}

/// Condition codes in their encoding order (the low nibble of `0x70+cc`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    O = 0,
    No = 1,
    B = 2,
    Ae = 3,
    E = 4,
    Ne = 5,
    Be = 6,
    A = 7,
    S = 8,
    Ns = 9,
    P = 10,
    Np = 11,
    L = 12,
    Ge = 13,
    Le = 14,
    G = 15,
}

impl Cond {
    pub const ALL: [Cond; 16] = [
        Cond::O,
        Cond::No,
        Cond::B,
        Cond::Ae,
        Cond::E,
        Cond::Ne,
        Cond::Be,
        Cond::A,
        Cond::S,
        Cond::Ns,
        Cond::P,
        Cond::Np,
        Cond::L,
        Cond::Ge,
        Cond::Le,
        Cond::G,
    ];

    pub fn from_code(code: u8) -> Cond {
        Self::ALL[(code & 0xF) as usize]
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// The opposite condition (flips the low bit of the encoding).
    pub fn negate(self) -> Cond {
        Cond::from_code(self.code() ^ 1)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::O => "o",
            Cond::No => "no",
            Cond::B => "b",
            Cond::Ae => "ae",
            Cond::E => "e",
            Cond::Ne => "ne",
            Cond::Be => "be",
            Cond::A => "a",
            Cond::S => "s",
            Cond::Ns => "ns",
            Cond::P => "p",
            Cond::Np => "np",
            Cond::L => "l",
            Cond::Ge => "ge",
            Cond::Le => "le",
            Cond::G => "g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Mov,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Cmp,
    Test,
    Lea,
    Push,
    Pop,
    Inc,
    Dec,
    Neg,
    Not,
    Shl,
    Shr,
    Sar,
    Xchg,
    Nop,
    Jmp,
    Jcc(Cond),
    Call,
    Ret,
    Leave,
}

impl Mnemonic {
    /// True for instructions whose operand is a relative branch target.
    pub fn is_relative_branch(self) -> bool {
        matches!(self, Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call)
    }

    /// True when execution never continues at the next instruction.
    pub fn is_unconditional_transfer(self) -> bool {
        matches!(self, Mnemonic::Jmp | Mnemonic::Ret)
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::And => "and",
            Mnemonic::Or => "or",
            Mnemonic::Xor => "xor",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Test => "test",
            Mnemonic::Lea => "lea",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Inc => "inc",
            Mnemonic::Dec => "dec",
            Mnemonic::Neg => "neg",
            Mnemonic::Not => "not",
            Mnemonic::Shl => "shl",
            Mnemonic::Shr => "shr",
            Mnemonic::Sar => "sar",
            Mnemonic::Xchg => "xchg",
            Mnemonic::Nop => "nop",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Jcc(c) => return write!(f, "j{}", c.suffix()),
            Mnemonic::Call => "call",
            Mnemonic::Ret => "ret",
            Mnemonic::Leave => "leave",
        };
        f.write_str(s)
    }
}

/// One decoded instruction together with the bytes it was decoded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct X86Instruction {
    pub addr: u32,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    pub raw: Vec<u8>,
}

impl X86Instruction {
    /// Builds an instruction that has not been placed in a byte stream yet;
    /// `raw` is empty until it is encoded.
    pub fn new(addr: u32, mnemonic: Mnemonic, operands: Vec<Operand>) -> Self {
        Self {
            addr,
            mnemonic,
            operands,
            raw: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Address of the following instruction.
    pub fn next_addr(&self) -> u32 {
        self.addr.wrapping_add(self.raw.len() as u32)
    }

    /// Absolute target of a relative branch.
    pub fn branch_target(&self) -> Option<u32> {
        match (self.mnemonic.is_relative_branch(), self.operands.first()) {
            (true, Some(Operand::Imm { value, .. })) => Some(*value),
            _ => None,
        }
    }
}

impl fmt::Display for X86Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}
