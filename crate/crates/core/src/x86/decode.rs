use thiserror::Error;

use super::{Cond, Gpr, MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction};
use crate::loader::FunctionImage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unsupported opcode {byte:#04x} at {addr:#010x}")]
    UnsupportedOpcode { byte: u8, addr: u32 },
    #[error("truncated instruction at {addr:#010x}")]
    TruncatedInstruction { addr: u32 },
    #[error("address {addr:#010x} is outside the image")]
    AddressOutOfImage { addr: u32 },
}

/// Decodes the instruction that starts at `addr`.
pub fn decode_one(image: &FunctionImage, addr: u32) -> Result<X86Instruction, DecodeError> {
    let bytes = image
        .slice_from(addr)
        .ok_or(DecodeError::AddressOutOfImage { addr })?;
    decode_bytes(bytes, addr)
}

/// Decodes the first instruction of `bytes`, which are assumed to live at
/// `addr`.
pub fn decode_bytes(bytes: &[u8], addr: u32) -> Result<X86Instruction, DecodeError> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        addr,
    };
    let (mnemonic, operands) = decode_inner(&mut cur)?;
    Ok(X86Instruction {
        addr,
        mnemonic,
        operands,
        raw: bytes[..cur.pos].to_vec(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    addr: u32,
}

impl Cursor<'_> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(DecodeError::TruncatedInstruction { addr: self.addr })?;
        self.pos += 1;
        Ok(b)
    }

    fn i8(&mut self) -> Result<i8, DecodeError> {
        Ok(self.u8()? as i8)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes([
            self.u8()?,
            self.u8()?,
            self.u8()?,
            self.u8()?,
        ]))
    }

    fn unsupported(&self, byte: u8) -> DecodeError {
        DecodeError::UnsupportedOpcode {
            byte,
            addr: self.addr,
        }
    }

    /// Relative target computed from the current position (the end of the
    /// instruction, since displacements are always last).
    fn rel_target(&self, rel: i32) -> u32 {
        self.addr
            .wrapping_add(self.pos as u32)
            .wrapping_add(rel as u32)
    }
}

struct ModRm {
    reg: u8,
    rm: Operand,
}

fn reg_of(index: u8, size: OpSize) -> Register {
    match size {
        OpSize::Byte => Register::byte_from_index(index),
        _ => Register::R32(Gpr::from_index(index)),
    }
}

fn modrm(cur: &mut Cursor<'_>, size: OpSize) -> Result<ModRm, DecodeError> {
    let b = cur.u8()?;
    let md = b >> 6;
    let reg = (b >> 3) & 7;
    let rm = b & 7;
    if md == 3 {
        return Ok(ModRm {
            reg,
            rm: Operand::Reg(reg_of(rm, size)),
        });
    }
    let mut mem = MemOperand {
        base: None,
        index: None,
        scale: 1,
        disp: 0,
        size,
    };
    let mut disp32_no_base = false;
    if rm == 4 {
        let sib = cur.u8()?;
        let scale = 1u8 << (sib >> 6);
        let index = (sib >> 3) & 7;
        let base = sib & 7;
        if index != 4 {
            mem.index = Some(Gpr::from_index(index));
            mem.scale = scale;
        }
        if base == 5 && md == 0 {
            disp32_no_base = true;
        } else {
            mem.base = Some(Gpr::from_index(base));
        }
    } else if rm == 5 && md == 0 {
        disp32_no_base = true;
    } else {
        mem.base = Some(Gpr::from_index(rm));
    }
    mem.disp = match md {
        0 if disp32_no_base => cur.u32()? as i32,
        0 => 0,
        1 => i32::from(cur.i8()?),
        _ => cur.u32()? as i32,
    };
    Ok(ModRm {
        reg,
        rm: Operand::Mem(mem),
    })
}

fn imm(value: u32, size: OpSize) -> Operand {
    Operand::Imm { value, size }
}

fn alu_from_ext(ext: u8) -> Option<Mnemonic> {
    match ext {
        0 => Some(Mnemonic::Add),
        1 => Some(Mnemonic::Or),
        4 => Some(Mnemonic::And),
        5 => Some(Mnemonic::Sub),
        6 => Some(Mnemonic::Xor),
        7 => Some(Mnemonic::Cmp),
        // adc, sbb
        _ => None,
    }
}

fn shift_from_ext(ext: u8) -> Option<Mnemonic> {
    match ext {
        4 => Some(Mnemonic::Shl),
        5 => Some(Mnemonic::Shr),
        7 => Some(Mnemonic::Sar),
        _ => None,
    }
}

fn decode_inner(cur: &mut Cursor<'_>) -> Result<(Mnemonic, Vec<Operand>), DecodeError> {
    use OpSize::{Byte, Dword};

    let op = cur.u8()?;
    let unsupported = cur.unsupported(op);
    let sized = |low: u8| if low & 1 == 0 { Byte } else { Dword };

    let decoded = match op {
        // two-operand ALU block: add/or/and/sub/xor/cmp
        0x00..=0x3F if op & 7 < 6 => {
            let mnem = alu_from_ext(op >> 3).ok_or(unsupported)?;
            let size = sized(op);
            match op & 7 {
                0 | 1 => {
                    let m = modrm(cur, size)?;
                    (mnem, vec![m.rm, Operand::Reg(reg_of(m.reg, size))])
                }
                2 | 3 => {
                    let m = modrm(cur, size)?;
                    (mnem, vec![Operand::Reg(reg_of(m.reg, size)), m.rm])
                }
                4 => (
                    mnem,
                    vec![
                        Operand::Reg(Register::Low8(Gpr::Eax)),
                        imm(u32::from(cur.u8()?), Byte),
                    ],
                ),
                _ => (mnem, vec![Operand::reg32(Gpr::Eax), imm(cur.u32()?, Dword)]),
            }
        }
        0x0F => {
            let op2 = cur.u8()?;
            if !(0x80..=0x8F).contains(&op2) {
                return Err(cur.unsupported(op));
            }
            let rel = cur.u32()? as i32;
            (
                Mnemonic::Jcc(Cond::from_code(op2)),
                vec![imm(cur.rel_target(rel), Dword)],
            )
        }
        0x40..=0x47 => (Mnemonic::Inc, vec![Operand::reg32(Gpr::from_index(op))]),
        0x48..=0x4F => (Mnemonic::Dec, vec![Operand::reg32(Gpr::from_index(op))]),
        0x50..=0x57 => (Mnemonic::Push, vec![Operand::reg32(Gpr::from_index(op))]),
        0x58..=0x5F => (Mnemonic::Pop, vec![Operand::reg32(Gpr::from_index(op))]),
        0x68 => (Mnemonic::Push, vec![imm(cur.u32()?, Dword)]),
        0x6A => (Mnemonic::Push, vec![imm(i32::from(cur.i8()?) as u32, Dword)]),
        0x70..=0x7F => {
            let rel = i32::from(cur.i8()?);
            (
                Mnemonic::Jcc(Cond::from_code(op)),
                vec![imm(cur.rel_target(rel), Dword)],
            )
        }
        0x80 | 0x81 | 0x83 => {
            let size = if op == 0x80 { Byte } else { Dword };
            let m = modrm(cur, size)?;
            let mnem = alu_from_ext(m.reg).ok_or(unsupported)?;
            let value = match op {
                0x80 => imm(u32::from(cur.u8()?), Byte),
                0x81 => imm(cur.u32()?, Dword),
                _ => imm(i32::from(cur.i8()?) as u32, Dword),
            };
            (mnem, vec![m.rm, value])
        }
        0x84 | 0x85 | 0x86 | 0x87 | 0x88 | 0x89 => {
            let size = sized(op);
            let m = modrm(cur, size)?;
            let mnem = match op {
                0x84 | 0x85 => Mnemonic::Test,
                0x86 | 0x87 => Mnemonic::Xchg,
                _ => Mnemonic::Mov,
            };
            (mnem, vec![m.rm, Operand::Reg(reg_of(m.reg, size))])
        }
        0x8A | 0x8B => {
            let size = sized(op);
            let m = modrm(cur, size)?;
            (Mnemonic::Mov, vec![Operand::Reg(reg_of(m.reg, size)), m.rm])
        }
        0x8D => {
            let m = modrm(cur, Dword)?;
            if !matches!(m.rm, Operand::Mem(_)) {
                return Err(unsupported);
            }
            (Mnemonic::Lea, vec![Operand::reg32(Gpr::from_index(m.reg)), m.rm])
        }
        0x8F => {
            let m = modrm(cur, Dword)?;
            if m.reg != 0 {
                return Err(unsupported);
            }
            (Mnemonic::Pop, vec![m.rm])
        }
        0x90 => (Mnemonic::Nop, vec![]),
        0x91..=0x97 => (
            Mnemonic::Xchg,
            vec![Operand::reg32(Gpr::Eax), Operand::reg32(Gpr::from_index(op))],
        ),
        0xA0..=0xA3 => {
            let size = sized(op);
            let acc = Operand::Reg(reg_of(0, size));
            let mem = Operand::Mem(MemOperand::absolute(cur.u32()?, size));
            if op < 0xA2 {
                (Mnemonic::Mov, vec![acc, mem])
            } else {
                (Mnemonic::Mov, vec![mem, acc])
            }
        }
        0xA8 => (
            Mnemonic::Test,
            vec![
                Operand::Reg(Register::Low8(Gpr::Eax)),
                imm(u32::from(cur.u8()?), Byte),
            ],
        ),
        0xA9 => (
            Mnemonic::Test,
            vec![Operand::reg32(Gpr::Eax), imm(cur.u32()?, Dword)],
        ),
        0xB0..=0xB7 => (
            Mnemonic::Mov,
            vec![
                Operand::Reg(Register::byte_from_index(op)),
                imm(u32::from(cur.u8()?), Byte),
            ],
        ),
        0xB8..=0xBF => (
            Mnemonic::Mov,
            vec![Operand::reg32(Gpr::from_index(op)), imm(cur.u32()?, Dword)],
        ),
        0xC1 | 0xD1 | 0xD3 => {
            let m = modrm(cur, Dword)?;
            let mnem = shift_from_ext(m.reg).ok_or(unsupported)?;
            let count = match op {
                0xC1 => imm(u32::from(cur.u8()?), Byte),
                0xD1 => imm(1, Byte),
                _ => Operand::Reg(Register::Low8(Gpr::Ecx)),
            };
            (mnem, vec![m.rm, count])
        }
        0xC2 => (Mnemonic::Ret, vec![imm(u32::from(cur.u16()?), OpSize::Word)]),
        0xC3 => (Mnemonic::Ret, vec![]),
        0xC6 | 0xC7 => {
            let size = sized(op);
            let m = modrm(cur, size)?;
            if m.reg != 0 {
                return Err(unsupported);
            }
            let value = if size == Byte {
                imm(u32::from(cur.u8()?), Byte)
            } else {
                imm(cur.u32()?, Dword)
            };
            (Mnemonic::Mov, vec![m.rm, value])
        }
        0xC9 => (Mnemonic::Leave, vec![]),
        0xE8 | 0xE9 => {
            let rel = cur.u32()? as i32;
            let mnem = if op == 0xE8 {
                Mnemonic::Call
            } else {
                Mnemonic::Jmp
            };
            (mnem, vec![imm(cur.rel_target(rel), Dword)])
        }
        0xEB => {
            let rel = i32::from(cur.i8()?);
            (Mnemonic::Jmp, vec![imm(cur.rel_target(rel), Dword)])
        }
        0xF6 | 0xF7 => {
            let size = sized(op);
            let m = modrm(cur, size)?;
            match m.reg {
                0 => {
                    let value = if size == Byte {
                        imm(u32::from(cur.u8()?), Byte)
                    } else {
                        imm(cur.u32()?, Dword)
                    };
                    (Mnemonic::Test, vec![m.rm, value])
                }
                2 => (Mnemonic::Not, vec![m.rm]),
                3 => (Mnemonic::Neg, vec![m.rm]),
                _ => return Err(unsupported),
            }
        }
        0xFE | 0xFF => {
            let size = sized(op);
            let m = modrm(cur, size)?;
            match (m.reg, size) {
                (0, _) => (Mnemonic::Inc, vec![m.rm]),
                (1, _) => (Mnemonic::Dec, vec![m.rm]),
                (6, Dword) => (Mnemonic::Push, vec![m.rm]),
                _ => return Err(unsupported),
            }
        }
        _ => return Err(unsupported),
    };
    Ok(decoded)
}
