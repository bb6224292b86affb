//! REIL-style intermediate language.
//!
//! Every instruction is a triple `OP a, b, c` over registers, per-instruction
//! temporaries and constants. `c` is the destination of every value-producing
//! op. Results are computed at the width of the source operands and then
//! truncated or zero-extended to `c`'s width.

use std::fmt;

use thiserror::Error;

/// Architectural registers visible to the IL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IlReg {
    Eax,
    Ebx,
    Ecx,
    Edx,
    Esi,
    Edi,
    Ebp,
    Esp,
    Eip,
    Cf,
    Pf,
    Af,
    Zf,
    Sf,
    Of,
}

impl IlReg {
    pub const ALL: [IlReg; 15] = [
        IlReg::Eax,
        IlReg::Ebx,
        IlReg::Ecx,
        IlReg::Edx,
        IlReg::Esi,
        IlReg::Edi,
        IlReg::Ebp,
        IlReg::Esp,
        IlReg::Eip,
        IlReg::Cf,
        IlReg::Pf,
        IlReg::Af,
        IlReg::Zf,
        IlReg::Sf,
        IlReg::Of,
    ];

    /// The eight general purpose registers, in the order outputs are bound.
    pub const GPRS: [IlReg; 8] = [
        IlReg::Eax,
        IlReg::Ebx,
        IlReg::Ecx,
        IlReg::Edx,
        IlReg::Esi,
        IlReg::Edi,
        IlReg::Ebp,
        IlReg::Esp,
    ];

    pub const FLAGS: [IlReg; 6] = [
        IlReg::Cf,
        IlReg::Pf,
        IlReg::Af,
        IlReg::Zf,
        IlReg::Sf,
        IlReg::Of,
    ];

    pub fn size_bits(self) -> u8 {
        if self.is_flag() {
            1
        } else {
            32
        }
    }

    pub fn is_flag(self) -> bool {
        matches!(
            self,
            IlReg::Cf | IlReg::Pf | IlReg::Af | IlReg::Zf | IlReg::Sf | IlReg::Of
        )
    }

    /// Upper-case short name (`EAX`, `ZF`).
    pub fn short_name(self) -> &'static str {
        match self {
            IlReg::Eax => "EAX",
            IlReg::Ebx => "EBX",
            IlReg::Ecx => "ECX",
            IlReg::Edx => "EDX",
            IlReg::Esi => "ESI",
            IlReg::Edi => "EDI",
            IlReg::Ebp => "EBP",
            IlReg::Esp => "ESP",
            IlReg::Eip => "EIP",
            IlReg::Cf => "CF",
            IlReg::Pf => "PF",
            IlReg::Af => "AF",
            IlReg::Zf => "ZF",
            IlReg::Sf => "SF",
            IlReg::Of => "OF",
        }
    }

    pub fn from_short_name(name: &str) -> Option<IlReg> {
        Self::ALL
            .into_iter()
            .find(|r| r.short_name().eq_ignore_ascii_case(name))
    }

    /// Index into [`IlReg::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_gpr(g: crate::x86::Gpr) -> IlReg {
        use crate::x86::Gpr;
        match g {
            Gpr::Eax => IlReg::Eax,
            Gpr::Ecx => IlReg::Ecx,
            Gpr::Edx => IlReg::Edx,
            Gpr::Ebx => IlReg::Ebx,
            Gpr::Esp => IlReg::Esp,
            Gpr::Ebp => IlReg::Ebp,
            Gpr::Esi => IlReg::Esi,
            Gpr::Edi => IlReg::Edi,
        }
    }
}

impl fmt::Display for IlReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R_{}", self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IlOperand {
    Reg(IlReg),
    Temp { index: u16, size: u8 },
    Const { value: u32, size: u8 },
    None,
}

impl IlOperand {
    pub fn konst(value: u32, size: u8) -> Self {
        IlOperand::Const { value, size }
    }

    pub fn temp(index: u16, size: u8) -> Self {
        IlOperand::Temp { index, size }
    }

    pub fn size_bits(&self) -> Option<u8> {
        match self {
            IlOperand::Reg(r) => Some(r.size_bits()),
            IlOperand::Temp { size, .. } | IlOperand::Const { size, .. } => Some(*size),
            IlOperand::None => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, IlOperand::None)
    }

    pub fn is_const(&self) -> bool {
        matches!(self, IlOperand::Const { .. })
    }

    pub fn is_writable(&self) -> bool {
        matches!(self, IlOperand::Reg(_) | IlOperand::Temp { .. })
    }
}

impl fmt::Display for IlOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IlOperand::Reg(r) => write!(f, "{r}:{}", r.size_bits()),
            IlOperand::Temp { index, size } => write!(f, "V_{index:02}:{size}"),
            IlOperand::Const { value, size } => write!(f, "{value:X}:{size}"),
            IlOperand::None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IlOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Shl,
    Shr,
    And,
    Or,
    Xor,
    Not,
    Ldm,
    Stm,
    Str,
    Eq,
    Lt,
    Jcc,
    Undef,
    Unkn,
    Nop,
}

impl IlOp {
    pub const ALL: [IlOp; 20] = [
        IlOp::Add,
        IlOp::Sub,
        IlOp::Mul,
        IlOp::Div,
        IlOp::Mod,
        IlOp::Shl,
        IlOp::Shr,
        IlOp::And,
        IlOp::Or,
        IlOp::Xor,
        IlOp::Not,
        IlOp::Ldm,
        IlOp::Stm,
        IlOp::Str,
        IlOp::Eq,
        IlOp::Lt,
        IlOp::Jcc,
        IlOp::Undef,
        IlOp::Unkn,
        IlOp::Nop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IlOp::Add => "ADD",
            IlOp::Sub => "SUB",
            IlOp::Mul => "MUL",
            IlOp::Div => "DIV",
            IlOp::Mod => "MOD",
            IlOp::Shl => "SHL",
            IlOp::Shr => "SHR",
            IlOp::And => "AND",
            IlOp::Or => "OR",
            IlOp::Xor => "XOR",
            IlOp::Not => "NOT",
            IlOp::Ldm => "LDM",
            IlOp::Stm => "STM",
            IlOp::Str => "STR",
            IlOp::Eq => "EQ",
            IlOp::Lt => "LT",
            IlOp::Jcc => "JCC",
            IlOp::Undef => "UNDEF",
            IlOp::Unkn => "UNKN",
            IlOp::Nop => "NOP",
        }
    }

    /// Ops that read `a` and `b` and write `c`.
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            IlOp::Add
                | IlOp::Sub
                | IlOp::Mul
                | IlOp::Div
                | IlOp::Mod
                | IlOp::Shl
                | IlOp::Shr
                | IlOp::And
                | IlOp::Or
                | IlOp::Xor
                | IlOp::Eq
                | IlOp::Lt
        )
    }
}

impl fmt::Display for IlOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Position of an IL instruction: the native instruction it came from and
/// its index within that instruction's expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IlAddr {
    pub native: u32,
    pub sub: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IlInstruction {
    pub op: IlOp,
    pub a: IlOperand,
    pub b: IlOperand,
    pub c: IlOperand,
    pub addr: IlAddr,
}

impl IlInstruction {
    pub fn new(op: IlOp, a: IlOperand, b: IlOperand, c: IlOperand, addr: IlAddr) -> Self {
        Self { op, a, b, c, addr }
    }
}

impl fmt::Display for IlInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}, {}, {}", self.op, self.a, self.b, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandPos {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid IL instruction: {rule} (operand {position:?})")]
pub struct ValidationError {
    pub rule: &'static str,
    pub position: Option<OperandPos>,
}

fn fail(rule: &'static str, position: Option<OperandPos>) -> Result<(), ValidationError> {
    Err(ValidationError { rule, position })
}

fn check_operand(op: &IlOperand, pos: OperandPos) -> Result<(), ValidationError> {
    match *op {
        IlOperand::None => Ok(()),
        IlOperand::Reg(_) => Ok(()),
        IlOperand::Temp { size, .. } => {
            if matches!(size, 1 | 8 | 16 | 32) {
                Ok(())
            } else {
                fail("operand size must be 1, 8, 16 or 32", Some(pos))
            }
        }
        IlOperand::Const { value, size } => {
            if !matches!(size, 1 | 8 | 16 | 32) {
                return fail("operand size must be 1, 8, 16 or 32", Some(pos));
            }
            if size < 32 && u64::from(value) >= 1u64 << size {
                return fail("constant does not fit its size", Some(pos));
            }
            Ok(())
        }
    }
}

/// Checks operand arity, widths and destination kinds.
pub fn validate(instr: &IlInstruction) -> Result<(), ValidationError> {
    use OperandPos::{A, B, C};

    check_operand(&instr.a, A)?;
    check_operand(&instr.b, B)?;
    check_operand(&instr.c, C)?;

    let (a, b, c) = (&instr.a, &instr.b, &instr.c);
    let need = |o: &IlOperand, pos| {
        if o.is_none() {
            fail("missing operand", Some(pos))
        } else {
            Ok(())
        }
    };
    let empty = |o: &IlOperand, pos| {
        if o.is_none() {
            Ok(())
        } else {
            fail("operand must be empty", Some(pos))
        }
    };
    let writable = |o: &IlOperand| {
        if o.is_writable() {
            Ok(())
        } else {
            fail("destination must be a register or temporary", Some(C))
        }
    };

    match instr.op {
        op if op.is_binary() => {
            need(a, A)?;
            need(b, B)?;
            need(c, C)?;
            writable(c)?;
            if !a.is_const() && !b.is_const() && a.size_bits() != b.size_bits() {
                return fail("source operands must have equal sizes", Some(B));
            }
            if matches!(op, IlOp::Eq | IlOp::Lt) && c.size_bits() != Some(1) {
                return fail("comparison result must be 1 bit", Some(C));
            }
        }
        IlOp::Str | IlOp::Not => {
            need(a, A)?;
            empty(b, B)?;
            need(c, C)?;
            writable(c)?;
        }
        IlOp::Ldm => {
            need(a, A)?;
            empty(b, B)?;
            need(c, C)?;
            writable(c)?;
            if a.size_bits() != Some(32) {
                return fail("load address must be 32 bits", Some(A));
            }
            if !matches!(c.size_bits(), Some(8 | 16 | 32)) {
                return fail("load width must be 8, 16 or 32 bits", Some(C));
            }
        }
        IlOp::Stm => {
            need(a, A)?;
            empty(b, B)?;
            need(c, C)?;
            if c.size_bits() != Some(32) {
                return fail("store address must be 32 bits", Some(C));
            }
            if !matches!(a.size_bits(), Some(8 | 16 | 32)) {
                return fail("store width must be 8, 16 or 32 bits", Some(A));
            }
        }
        IlOp::Jcc => {
            need(a, A)?;
            empty(b, B)?;
            need(c, C)?;
            if c.size_bits() != Some(32) {
                return fail("jump target must be 32 bits", Some(C));
            }
        }
        IlOp::Undef => {
            empty(a, A)?;
            empty(b, B)?;
            need(c, C)?;
            writable(c)?;
        }
        IlOp::Unkn | IlOp::Nop => {
            empty(a, A)?;
            empty(b, B)?;
            empty(c, C)?;
        }
        _ => unreachable!("binary ops handled above"),
    }
    Ok(())
}

/// One instruction per line in `OP a, b, c` form.
pub fn format_il(instrs: &[IlInstruction]) -> String {
    let mut out = String::new();
    for i in instrs {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    out
}
