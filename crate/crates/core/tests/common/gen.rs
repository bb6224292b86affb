//! Seeded random straight-line programs over the supported subset.
//!
//! Programs take two stack arguments, keep the stack balanced, only load
//! memory they wrote themselves (or the argument slots) and end in `ret`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use resmt::loader::FunctionImage;
use resmt::x86::{encode, Gpr, MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction};

pub const ARGS: usize = 2;

const REGS: [Gpr; 7] = [Gpr::Eax, Gpr::Ecx, Gpr::Edx, Gpr::Ebx, Gpr::Ebp, Gpr::Esi, Gpr::Edi];
const BYTE_BASES: [Gpr; 4] = [Gpr::Eax, Gpr::Ecx, Gpr::Edx, Gpr::Ebx];
const EDGE: [u32; 8] = [0, 1, 2, 0x7F, 0x80, 0x7FFF_FFFF, 0x8000_0000, 0xFFFF_FFFF];

/// A value biased towards the edges of the 32-bit range.
pub fn value(rng: &mut ChaCha8Rng) -> u32 {
    if rng.gen_bool(0.3) {
        *EDGE.choose(rng).unwrap()
    } else {
        rng.gen()
    }
}

fn r32(rng: &mut ChaCha8Rng) -> Operand {
    Operand::reg32(*REGS.choose(rng).unwrap())
}

fn r8(rng: &mut ChaCha8Rng) -> Operand {
    let g = *BYTE_BASES.choose(rng).unwrap();
    Operand::Reg(if rng.gen() { Register::Low8(g) } else { Register::High8(g) })
}

fn imm8(rng: &mut ChaCha8Rng) -> Operand {
    Operand::Imm {
        value: u32::from(rng.gen::<u8>()),
        size: OpSize::Byte,
    }
}

fn esp_mem(disp: i32, size: OpSize) -> Operand {
    Operand::Mem(MemOperand::base_disp(Gpr::Esp, disp, size))
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    /// ESP relative to its entry value.
    depth: i32,
    /// Entry-relative offsets of bytes that hold defined values.
    written: HashSet<i32>,
    out: Vec<X86Instruction>,
}

impl Gen<'_> {
    fn emit(&mut self, m: Mnemonic, ops: Vec<Operand>) {
        self.out.push(X86Instruction::new(0, m, ops));
    }

    fn defined(&self, disp: i32, bytes: i32) -> bool {
        (0..bytes).all(|i| self.written.contains(&(self.depth + disp + i)))
    }

    fn mark(&mut self, disp: i32, bytes: i32) {
        for i in 0..bytes {
            self.written.insert(self.depth + disp + i);
        }
    }

    fn one(&mut self) {
        use Mnemonic::*;
        let rng = &mut *self.rng;
        let alu = [Add, Sub, And, Or, Xor];
        match rng.gen_range(0..20) {
            0 => {
                let d = r32(rng);
                let v = value(rng);
                self.emit(Mov, vec![d, Operand::imm32(v)]);
            }
            1 => {
                let (d, s) = (r32(rng), r32(rng));
                self.emit(Mov, vec![d, s]);
            }
            2 | 3 => {
                let m = *alu.choose(rng).unwrap();
                let (d, s) = (r32(rng), r32(rng));
                self.emit(m, vec![d, s]);
            }
            4 | 5 => {
                let m = *alu.choose(rng).unwrap();
                let d = r32(rng);
                let v = if rng.gen() { rng.gen_range(-128i32..128) as u32 } else { value(rng) };
                self.emit(m, vec![d, Operand::imm32(v)]);
            }
            6 => {
                let m = *[Cmp, Test].choose(rng).unwrap();
                let (d, s) = (r32(rng), r32(rng));
                self.emit(m, vec![d, s]);
            }
            7 => {
                let m = *[Inc, Dec, Neg, Not].choose(rng).unwrap();
                let d = r32(rng);
                self.emit(m, vec![d]);
            }
            8 => {
                let m = *[Shl, Shr, Sar].choose(rng).unwrap();
                let d = r32(rng);
                let count = *[0u32, 1, 2, 7, 31].choose(rng).unwrap();
                let count = if rng.gen() { count } else { rng.gen_range(0..32) };
                self.emit(m, vec![d, Operand::imm32(count)]);
            }
            9 => {
                let m = *[Shl, Shr, Sar].choose(rng).unwrap();
                let d = r32(rng);
                self.emit(m, vec![d, Operand::Reg(Register::Low8(Gpr::Ecx))]);
            }
            10 => {
                let d = r32(rng);
                let base = *REGS.choose(rng).unwrap();
                let index = if rng.gen() { Some(*REGS.choose(rng).unwrap()) } else { None };
                let mem = MemOperand {
                    base: Some(base),
                    index,
                    scale: *[1u8, 2, 4, 8].choose(rng).unwrap(),
                    disp: rng.gen_range(-300..300),
                    size: OpSize::Dword,
                };
                self.emit(Lea, vec![d, Operand::Mem(mem)]);
            }
            11 => {
                let (a, b) = (r32(rng), r32(rng));
                self.emit(Xchg, vec![a, b]);
            }
            12 => {
                let op = if rng.gen_bool(0.7) { r32(rng) } else { Operand::imm32(value(rng)) };
                self.emit(Push, vec![op]);
                self.depth -= 4;
                self.mark(0, 4);
            }
            13 if self.depth < 0 => {
                let d = r32(rng);
                self.emit(Pop, vec![d]);
                self.depth += 4;
            }
            14 => {
                // argument slot, above the return address
                let slot = rng.gen_range(0..ARGS as i32);
                let d = r32(rng);
                self.emit(Mov, vec![d, esp_mem(4 + 4 * slot - self.depth, OpSize::Dword)]);
            }
            15 => {
                let disp = -4 * rng.gen_range(2..10);
                let s = r32(rng);
                self.emit(Mov, vec![esp_mem(disp, OpSize::Dword), s]);
                self.mark(disp, 4);
            }
            16 => {
                let disp = -rng.gen_range(5..40);
                let (d32, d8) = (r32(rng), r8(rng));
                if self.defined(disp, 4) {
                    self.emit(Mov, vec![d32, esp_mem(disp, OpSize::Dword)]);
                } else if self.defined(disp, 1) {
                    self.emit(Mov, vec![d8, esp_mem(disp, OpSize::Byte)]);
                } else {
                    self.emit(Mov, vec![esp_mem(disp, OpSize::Byte), d8]);
                    self.mark(disp, 1);
                }
            }
            17 => {
                let (d, s) = (r8(rng), r8(rng));
                self.emit(Mov, vec![d, s]);
            }
            18 => {
                let m = *[Add, Sub, Xor, And, Or, Cmp].choose(rng).unwrap();
                let d = r8(rng);
                let s = if rng.gen() { r8(rng) } else { imm8(rng) };
                self.emit(m, vec![d, s]);
            }
            _ => {
                let m = *[Inc, Dec, Neg, Not].choose(rng).unwrap();
                let d = r8(rng);
                self.emit(m, vec![d]);
            }
        }
    }
}

/// A program of roughly `len` instructions followed by stack cleanup and
/// `ret`.
pub fn program(rng: &mut ChaCha8Rng, len: usize) -> Vec<X86Instruction> {
    let mut g = Gen {
        rng,
        depth: 0,
        written: (0..4 + 4 * ARGS as i32).collect(),
        out: Vec::new(),
    };
    while g.out.len() < len {
        g.one();
    }
    while g.depth < 0 {
        let d = r32(g.rng);
        g.emit(Mnemonic::Pop, vec![d]);
        g.depth += 4;
    }
    g.emit(Mnemonic::Ret, vec![]);
    g.out
}

/// Encodes `code` back to back from address 0.
pub fn assemble(code: &[X86Instruction]) -> FunctionImage {
    let mut bytes = Vec::new();
    for ins in code {
        let mut placed = ins.clone();
        placed.addr = bytes.len() as u32;
        bytes.extend(encode(&placed).unwrap_or_else(|e| panic!("{e}")));
    }
    FunctionImage::new(bytes, 0).unwrap()
}
