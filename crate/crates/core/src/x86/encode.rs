//! Canonical encoder for the decodable subset.
//!
//! Where x86 has more than one encoding the choice is fixed:
//! - register-to-register `mov`/ALU/`test`/`xchg` use the `r/m, r` opcode
//!   (`89 C8` for `mov eax, ecx`, `01 D0` for `add eax, edx`);
//! - `reg, [mem]` forms use the `r, r/m` opcode (`8B`, `03`, ...);
//! - ALU with a 32-bit immediate uses `83` when the value fits a signed byte
//!   and `81` otherwise, never the short accumulator forms;
//! - `mov r32, imm` uses `B8+r`, `mov r8, imm` uses `B0+r`;
//! - `push`/`pop`/`inc`/`dec` of a 32-bit register use the one-byte forms;
//! - `push imm` uses `6A` when the value fits a signed byte;
//! - shifts by the constant 1 use `D1`, other constants `C1`, `cl` uses `D3`;
//! - `jmp`/`jcc` pick the short form whenever the displacement fits.

use thiserror::Error;

use super::{Gpr, MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot encode `{instr}`: {reason}")]
pub struct EncodeError {
    pub instr: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchForm {
    /// rel8
    Short,
    /// rel32
    Near,
}

/// Encodes `instr` at `instr.addr`.
pub fn encode(instr: &X86Instruction) -> Result<Vec<u8>, EncodeError> {
    let err = |reason| EncodeError {
        instr: instr.to_string(),
        reason,
    };
    if instr.mnemonic.is_relative_branch() {
        let target = instr.branch_target().ok_or_else(|| err("missing target"))?;
        if instr.operands.len() != 1 {
            return Err(err("branch takes one operand"));
        }
        if instr.mnemonic != Mnemonic::Call {
            if let Some(bytes) = encode_branch(instr.mnemonic, instr.addr, target, BranchForm::Short)
            {
                return Ok(bytes);
            }
        }
        return encode_branch(instr.mnemonic, instr.addr, target, BranchForm::Near)
            .ok_or_else(|| err("unencodable branch"));
    }
    let mut out = Vec::with_capacity(8);
    encode_plain(instr, &mut out).map_err(err)?;
    Ok(out)
}

/// Encodes a relative branch in the requested form; `None` when the
/// displacement does not fit or the form does not exist (`call` is near only).
pub fn encode_branch(mnemonic: Mnemonic, addr: u32, target: u32, form: BranchForm) -> Option<Vec<u8>> {
    let (opcode, len): (&[u8], u32) = match (mnemonic, form) {
        (Mnemonic::Jmp, BranchForm::Short) => (&[0xEB], 2),
        (Mnemonic::Jmp, BranchForm::Near) => (&[0xE9], 5),
        (Mnemonic::Call, BranchForm::Near) => (&[0xE8], 5),
        (Mnemonic::Jcc(_), BranchForm::Short) => (&[0x70], 2),
        (Mnemonic::Jcc(_), BranchForm::Near) => (&[0x0F, 0x80], 6),
        _ => return None,
    };
    let rel = target.wrapping_sub(addr.wrapping_add(len)) as i32;
    let mut out = opcode.to_vec();
    if let Mnemonic::Jcc(c) = mnemonic {
        *out.last_mut().unwrap() += c.code();
    }
    match form {
        BranchForm::Short => {
            let rel8 = i8::try_from(rel).ok()?;
            out.push(rel8 as u8);
        }
        BranchForm::Near => out.extend_from_slice(&rel.to_le_bytes()),
    }
    Some(out)
}

fn fits_i8(v: u32) -> bool {
    let v = v as i32;
    (-128..=127).contains(&v)
}

fn alu_ext(m: Mnemonic) -> Option<u8> {
    match m {
        Mnemonic::Add => Some(0),
        Mnemonic::Or => Some(1),
        Mnemonic::And => Some(4),
        Mnemonic::Sub => Some(5),
        Mnemonic::Xor => Some(6),
        Mnemonic::Cmp => Some(7),
        _ => None,
    }
}

fn shift_ext(m: Mnemonic) -> Option<u8> {
    match m {
        Mnemonic::Shl => Some(4),
        Mnemonic::Shr => Some(5),
        Mnemonic::Sar => Some(7),
        _ => None,
    }
}

fn size_bit(size: OpSize) -> Result<u8, &'static str> {
    match size {
        OpSize::Byte => Ok(0),
        OpSize::Dword => Ok(1),
        OpSize::Word => Err("16-bit operands are not supported"),
    }
}

fn check_reg(r: Register) -> Result<Register, &'static str> {
    if r.is_valid() {
        Ok(r)
    } else {
        Err("invalid byte register")
    }
}

/// ModRM (+SIB +disp) for `rm` with the given reg field.
fn emit_modrm(out: &mut Vec<u8>, reg: u8, rm: &Operand) -> Result<(), &'static str> {
    match rm {
        Operand::Reg(r) => {
            out.push(0xC0 | (reg << 3) | check_reg(*r)?.index());
            Ok(())
        }
        Operand::Mem(m) => emit_mem(out, reg, m),
        Operand::Imm { .. } => Err("immediate where r/m expected"),
    }
}

fn emit_mem(out: &mut Vec<u8>, reg: u8, m: &MemOperand) -> Result<(), &'static str> {
    if m.index == Some(Gpr::Esp) {
        return Err("esp cannot be an index register");
    }
    let scale_bits = match m.scale {
        _ if m.index.is_none() => 0,
        1 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        _ => return Err("scale must be 1, 2, 4 or 8"),
    };
    let disp_mode = |base: Gpr| -> u8 {
        if m.disp == 0 && base != Gpr::Ebp {
            0
        } else if fits_i8(m.disp as u32) {
            1
        } else {
            2
        }
    };
    let push_disp = |out: &mut Vec<u8>, md: u8| match md {
        1 => out.push(m.disp as i8 as u8),
        2 => out.extend_from_slice(&m.disp.to_le_bytes()),
        _ => {}
    };
    match (m.base, m.index) {
        (None, None) => {
            out.push((reg << 3) | 5);
            out.extend_from_slice(&m.disp.to_le_bytes());
        }
        (Some(base), None) if base != Gpr::Esp => {
            let md = disp_mode(base);
            out.push((md << 6) | (reg << 3) | base.index());
            push_disp(out, md);
        }
        (Some(base), index) => {
            let md = disp_mode(base);
            let idx = index.map_or(4, Gpr::index);
            out.push((md << 6) | (reg << 3) | 4);
            out.push((scale_bits << 6) | (idx << 3) | base.index());
            push_disp(out, md);
        }
        (None, Some(index)) => {
            out.push((reg << 3) | 4);
            out.push((scale_bits << 6) | (index.index() << 3) | 5);
            out.extend_from_slice(&m.disp.to_le_bytes());
        }
    }
    Ok(())
}

fn encode_plain(instr: &X86Instruction, out: &mut Vec<u8>) -> Result<(), &'static str> {
    use Mnemonic as M;
    use Operand::{Imm, Mem, Reg};

    let ops = instr.operands.as_slice();
    match (instr.mnemonic, ops) {
        (M::Nop, []) => out.push(0x90),
        (M::Ret, []) => out.push(0xC3),
        (M::Ret, [Imm { value, .. }]) => {
            let n = u16::try_from(*value).map_err(|_| "ret immediate exceeds 16 bits")?;
            out.push(0xC2);
            out.extend_from_slice(&n.to_le_bytes());
        }
        (M::Leave, []) => out.push(0xC9),

        (M::Mov, [Reg(dst), Imm { value, .. }]) => {
            let dst = check_reg(*dst)?;
            match dst.size() {
                OpSize::Byte => {
                    out.push(0xB0 + dst.index());
                    out.push(u8::try_from(*value).map_err(|_| "byte immediate too large")?);
                }
                _ => {
                    out.push(0xB8 + dst.index());
                    out.extend_from_slice(&value.to_le_bytes());
                }
            }
        }
        (M::Mov, [dst @ Mem(m), Imm { value, .. }]) => {
            let w = size_bit(m.size)?;
            out.push(0xC6 | w);
            emit_modrm(out, 0, dst)?;
            emit_imm(out, *value, m.size)?;
        }
        (M::Mov | M::Xchg | M::Test, [dst, Reg(src)]) => {
            if dst.size() != src.size() {
                return Err("operand size mismatch");
            }
            let w = size_bit(src.size())?;
            let base = match instr.mnemonic {
                M::Mov => 0x88,
                M::Xchg => 0x86,
                _ => 0x84,
            };
            out.push(base | w);
            emit_modrm(out, check_reg(*src)?.index(), dst)?;
        }
        (M::Mov, [Reg(dst), src @ Mem(m)]) => {
            if dst.size() != m.size {
                return Err("operand size mismatch");
            }
            out.push(0x8A | size_bit(m.size)?);
            emit_modrm(out, check_reg(*dst)?.index(), src)?;
        }
        (M::Xchg, [Reg(dst), src @ Mem(m)]) => {
            if dst.size() != m.size {
                return Err("operand size mismatch");
            }
            out.push(0x86 | size_bit(m.size)?);
            emit_modrm(out, check_reg(*dst)?.index(), src)?;
        }
        (M::Test, [dst, Imm { value, .. }]) => {
            let size = dst.size();
            out.push(0xF6 | size_bit(size)?);
            emit_modrm(out, 0, dst)?;
            emit_imm(out, *value, size)?;
        }

        (M::Add | M::Or | M::And | M::Sub | M::Xor | M::Cmp, [dst, src]) => {
            let ext = alu_ext(instr.mnemonic).unwrap();
            match (dst, src) {
                (_, Reg(r)) => {
                    if dst.size() != r.size() {
                        return Err("operand size mismatch");
                    }
                    out.push((ext << 3) | size_bit(r.size())?);
                    emit_modrm(out, check_reg(*r)?.index(), dst)?;
                }
                (Reg(r), Mem(m)) => {
                    if r.size() != m.size {
                        return Err("operand size mismatch");
                    }
                    out.push((ext << 3) | 2 | size_bit(m.size)?);
                    emit_modrm(out, check_reg(*r)?.index(), src)?;
                }
                (_, Imm { value, .. }) => match dst.size() {
                    OpSize::Byte => {
                        out.push(0x80);
                        emit_modrm(out, ext, dst)?;
                        emit_imm(out, *value, OpSize::Byte)?;
                    }
                    OpSize::Dword if fits_i8(*value) => {
                        out.push(0x83);
                        emit_modrm(out, ext, dst)?;
                        out.push(*value as u8);
                    }
                    OpSize::Dword => {
                        out.push(0x81);
                        emit_modrm(out, ext, dst)?;
                        out.extend_from_slice(&value.to_le_bytes());
                    }
                    OpSize::Word => return Err("16-bit operands are not supported"),
                },
                _ => return Err("memory-to-memory form"),
            }
        }

        (M::Lea, [Reg(Register::R32(dst)), src @ Mem(_)]) => {
            out.push(0x8D);
            emit_modrm(out, dst.index(), src)?;
        }

        (M::Push, [Reg(Register::R32(r))]) => out.push(0x50 + r.index()),
        (M::Pop, [Reg(Register::R32(r))]) => out.push(0x58 + r.index()),
        (M::Inc, [Reg(Register::R32(r))]) => out.push(0x40 + r.index()),
        (M::Dec, [Reg(Register::R32(r))]) => out.push(0x48 + r.index()),
        (M::Push, [Imm { value, .. }]) => {
            if fits_i8(*value) {
                out.push(0x6A);
                out.push(*value as u8);
            } else {
                out.push(0x68);
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
        (M::Push, [m @ Mem(MemOperand { size: OpSize::Dword, .. })]) => {
            out.push(0xFF);
            emit_modrm(out, 6, m)?;
        }
        (M::Pop, [m @ Mem(MemOperand { size: OpSize::Dword, .. })]) => {
            out.push(0x8F);
            emit_modrm(out, 0, m)?;
        }
        (M::Inc | M::Dec, [dst]) => {
            out.push(0xFE | size_bit(dst.size())?);
            emit_modrm(out, u8::from(instr.mnemonic == M::Dec), dst)?;
        }
        (M::Not | M::Neg, [dst]) => {
            out.push(0xF6 | size_bit(dst.size())?);
            emit_modrm(out, if instr.mnemonic == M::Not { 2 } else { 3 }, dst)?;
        }

        (M::Shl | M::Shr | M::Sar, [dst, count]) => {
            if dst.size() != OpSize::Dword {
                return Err("only 32-bit shifts are supported");
            }
            let ext = shift_ext(instr.mnemonic).unwrap();
            match count {
                Imm { value: 1, .. } => {
                    out.push(0xD1);
                    emit_modrm(out, ext, dst)?;
                }
                Imm { value, .. } => {
                    out.push(0xC1);
                    emit_modrm(out, ext, dst)?;
                    out.push(u8::try_from(*value).map_err(|_| "shift count exceeds a byte")?);
                }
                Reg(Register::Low8(Gpr::Ecx)) => {
                    out.push(0xD3);
                    emit_modrm(out, ext, dst)?;
                }
                _ => return Err("shift count must be an immediate or cl"),
            }
        }
        _ => return Err("unsupported operand shape"),
    }
    Ok(())
}

fn emit_imm(out: &mut Vec<u8>, value: u32, size: OpSize) -> Result<(), &'static str> {
    match size {
        OpSize::Byte => out.push(u8::try_from(value).map_err(|_| "byte immediate too large")?),
        OpSize::Dword => out.extend_from_slice(&value.to_le_bytes()),
        OpSize::Word => return Err("16-bit operands are not supported"),
    }
    Ok(())
}
