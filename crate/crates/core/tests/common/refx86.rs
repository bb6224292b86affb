//! Reference x86 semantics written directly against decoded instructions,
//! independent of the lifter. Flags the architecture leaves undefined are
//! tracked as `None` and excluded from comparisons.

use std::collections::HashMap;

use resmt::loader::FunctionImage;
use resmt::machine::{RETURN_SENTINEL, STACK_BASE};
use resmt::x86::{decode_one, Cond, Gpr, MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub cf: Option<bool>,
    pub pf: Option<bool>,
    pub af: Option<bool>,
    pub zf: Option<bool>,
    pub sf: Option<bool>,
    pub of: Option<bool>,
}

impl Flags {
    pub fn all(v: bool) -> Self {
        Self {
            cf: Some(v),
            pf: Some(v),
            af: Some(v),
            zf: Some(v),
            sf: Some(v),
            of: Some(v),
        }
    }

    /// `(name, value)` for each flag, in CF PF AF ZF SF OF order.
    pub fn named(&self) -> [(&'static str, Option<bool>); 6] {
        [
            ("CF", self.cf),
            ("PF", self.pf),
            ("AF", self.af),
            ("ZF", self.zf),
            ("SF", self.sf),
            ("OF", self.of),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RefMachine {
    /// Indexed by ModRM register number.
    pub regs: [u32; 8],
    pub flags: Flags,
    pub mem: HashMap<u32, u8>,
    pub steps: usize,
}

pub enum Flow {
    Next,
    Jump(u32),
    Return,
}

fn mask(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

fn parity(r: u64) -> bool {
    (r as u8).count_ones() % 2 == 0
}

impl RefMachine {
    /// Same entry state as the emulator's stack convention: zeroed
    /// registers and flags, sentinel at `[ESP]`, arguments above it.
    pub fn new(args: &[u32]) -> Self {
        let mut m = Self {
            regs: [0; 8],
            flags: Flags::all(false),
            mem: HashMap::new(),
            steps: 0,
        };
        m.regs[Gpr::Esp.index() as usize] = STACK_BASE;
        m.store(STACK_BASE, RETURN_SENTINEL as u64, 32);
        for (i, &a) in args.iter().enumerate() {
            m.store(STACK_BASE + 4 + 4 * i as u32, a as u64, 32);
        }
        m
    }

    pub fn gpr(&self, g: Gpr) -> u32 {
        self.regs[g.index() as usize]
    }

    pub fn set_gpr(&mut self, g: Gpr, v: u32) {
        self.regs[g.index() as usize] = v;
    }

    fn load(&self, addr: u32, bits: u32) -> u64 {
        (0..bits / 8).rev().fold(0u64, |acc, i| {
            (acc << 8) | u64::from(*self.mem.get(&addr.wrapping_add(i)).unwrap_or(&0))
        })
    }

    fn store(&mut self, addr: u32, v: u64, bits: u32) {
        for i in 0..bits / 8 {
            self.mem.insert(addr.wrapping_add(i), (v >> (8 * i)) as u8);
        }
    }

    fn address(&self, m: &MemOperand) -> u32 {
        let mut a = m.disp as u32;
        if let Some(b) = m.base {
            a = a.wrapping_add(self.gpr(b));
        }
        if let Some(i) = m.index {
            a = a.wrapping_add(self.gpr(i).wrapping_mul(u32::from(m.scale)));
        }
        a
    }

    fn read(&self, op: &Operand) -> u64 {
        match op {
            Operand::Reg(Register::R32(g)) => u64::from(self.gpr(*g)),
            Operand::Reg(Register::Low8(g)) => u64::from(self.gpr(*g) & 0xFF),
            Operand::Reg(Register::High8(g)) => u64::from((self.gpr(*g) >> 8) & 0xFF),
            Operand::Imm { value, size } => u64::from(*value) & mask(u32::from(size.bits())),
            Operand::Mem(m) => self.load(self.address(m), u32::from(m.size.bits())),
        }
    }

    fn write(&mut self, op: &Operand, v: u64) {
        match op {
            Operand::Reg(Register::R32(g)) => self.set_gpr(*g, v as u32),
            Operand::Reg(Register::Low8(g)) => {
                let old = self.gpr(*g);
                self.set_gpr(*g, (old & !0xFF) | (v as u32 & 0xFF));
            }
            Operand::Reg(Register::High8(g)) => {
                let old = self.gpr(*g);
                self.set_gpr(*g, (old & !0xFF00) | ((v as u32 & 0xFF) << 8));
            }
            Operand::Mem(m) => {
                let a = self.address(m);
                self.store(a, v, u32::from(m.size.bits()));
            }
            Operand::Imm { .. } => panic!("write to an immediate"),
        }
    }

    fn result_flags(&mut self, r: u64, bits: u32) {
        self.flags.zf = Some(r & mask(bits) == 0);
        self.flags.sf = Some((r >> (bits - 1)) & 1 == 1);
        self.flags.pf = Some(parity(r));
    }

    fn push(&mut self, v: u32) {
        let sp = self.gpr(Gpr::Esp).wrapping_sub(4);
        self.set_gpr(Gpr::Esp, sp);
        self.store(sp, u64::from(v), 32);
    }

    fn pop(&mut self) -> u32 {
        let sp = self.gpr(Gpr::Esp);
        let v = self.load(sp, 32) as u32;
        self.set_gpr(Gpr::Esp, sp.wrapping_add(4));
        v
    }

    fn cond(&self, c: Cond) -> Result<bool, String> {
        let f = |v: Option<bool>| v.ok_or_else(|| format!("j{} reads an undefined flag", c.suffix()));
        let base = match c {
            Cond::O | Cond::No => f(self.flags.of)?,
            Cond::B | Cond::Ae => f(self.flags.cf)?,
            Cond::E | Cond::Ne => f(self.flags.zf)?,
            Cond::Be | Cond::A => f(self.flags.cf)? || f(self.flags.zf)?,
            Cond::S | Cond::Ns => f(self.flags.sf)?,
            Cond::P | Cond::Np => f(self.flags.pf)?,
            Cond::L | Cond::Ge => f(self.flags.sf)? != f(self.flags.of)?,
            Cond::Le | Cond::G => f(self.flags.zf)? || (f(self.flags.sf)? != f(self.flags.of)?),
        };
        Ok(base != (c.code() & 1 == 1))
    }

    /// Executes one instruction.
    pub fn step(&mut self, ins: &X86Instruction) -> Result<Flow, String> {
        use Mnemonic::*;
        self.steps += 1;
        let ops = &ins.operands;
        let bits = ops.first().map_or(32, |o| u32::from(o.size_bits()));
        let m = mask(bits);
        let msb = |v: u64| (v >> (bits - 1)) & 1 == 1;
        match ins.mnemonic {
            Mov => {
                let v = self.read(&ops[1]);
                self.write(&ops[0], v);
            }
            Add | Sub | Cmp => {
                let (a, b) = (self.read(&ops[0]), self.read(&ops[1]) & m);
                let (r, cf, of) = if ins.mnemonic == Add {
                    let r = (a + b) & m;
                    (r, a + b > m, msb((a ^ r) & (b ^ r)))
                } else {
                    let r = a.wrapping_sub(b) & m;
                    (r, a < b, msb((a ^ b) & (a ^ r)))
                };
                self.flags.cf = Some(cf);
                self.flags.of = Some(of);
                self.flags.af = Some((a ^ b ^ r) & 0x10 != 0);
                self.result_flags(r, bits);
                if ins.mnemonic != Cmp {
                    self.write(&ops[0], r);
                }
            }
            And | Or | Xor | Test => {
                let (a, b) = (self.read(&ops[0]), self.read(&ops[1]) & m);
                let r = match ins.mnemonic {
                    And | Test => a & b,
                    Or => a | b,
                    _ => a ^ b,
                };
                self.flags.cf = Some(false);
                self.flags.of = Some(false);
                self.flags.af = None;
                self.result_flags(r, bits);
                if ins.mnemonic != Test {
                    self.write(&ops[0], r);
                }
            }
            Inc | Dec => {
                let a = self.read(&ops[0]);
                let r = if ins.mnemonic == Inc { (a + 1) & m } else { a.wrapping_sub(1) & m };
                let b = 1;
                self.flags.of = Some(if ins.mnemonic == Inc {
                    msb((a ^ r) & (b ^ r))
                } else {
                    msb((a ^ b) & (a ^ r))
                });
                self.flags.af = Some((a ^ b ^ r) & 0x10 != 0);
                self.result_flags(r, bits);
                self.write(&ops[0], r);
            }
            Neg => {
                let a = self.read(&ops[0]);
                let r = 0u64.wrapping_sub(a) & m;
                self.flags.cf = Some(a != 0);
                self.flags.of = Some(msb(a & r));
                self.flags.af = Some((a ^ r) & 0x10 != 0);
                self.result_flags(r, bits);
                self.write(&ops[0], r);
            }
            Not => {
                let a = self.read(&ops[0]);
                self.write(&ops[0], !a & m);
            }
            Shl | Shr | Sar => {
                let a = self.read(&ops[0]);
                let count = (self.read(&ops[1]) & 31) as u32;
                if count == 0 {
                    return Ok(Flow::Next);
                }
                let (r, cf) = match ins.mnemonic {
                    Shl => ((a << count) & m, (a >> (bits - count)) & 1 == 1),
                    Shr => (a >> count, (a >> (count - 1)) & 1 == 1),
                    _ => {
                        let signed = ((a << (64 - bits)) as i64) >> (64 - bits);
                        ((signed >> count) as u64 & m, (signed >> (count - 1)) & 1 == 1)
                    }
                };
                self.flags.cf = Some(cf);
                self.flags.of = if count == 1 {
                    Some(match ins.mnemonic {
                        Shl => msb(r) != cf,
                        Shr => msb(a),
                        _ => false,
                    })
                } else {
                    None
                };
                self.flags.af = None;
                self.result_flags(r, bits);
                self.write(&ops[0], r);
            }
            Lea => {
                let Operand::Mem(mem) = &ops[1] else {
                    return Err("lea without a memory operand".into());
                };
                let a = self.address(mem);
                self.write(&ops[0], u64::from(a));
            }
            Push => {
                let v = self.read(&ops[0]) as u32;
                self.push(v);
            }
            Pop => {
                let v = self.pop();
                self.write(&ops[0], u64::from(v));
            }
            Xchg => {
                let (a, b) = (self.read(&ops[0]), self.read(&ops[1]));
                self.write(&ops[0], b);
                self.write(&ops[1], a);
            }
            Nop => {}
            Leave => {
                let bp = self.gpr(Gpr::Ebp);
                self.set_gpr(Gpr::Esp, bp);
                let v = self.pop();
                self.set_gpr(Gpr::Ebp, v);
            }
            Ret => {
                let target = self.pop();
                if let Some(op) = ops.first() {
                    let extra = self.read(op) as u32;
                    let sp = self.gpr(Gpr::Esp).wrapping_add(extra);
                    self.set_gpr(Gpr::Esp, sp);
                }
                return Ok(if target == RETURN_SENTINEL {
                    Flow::Return
                } else {
                    Flow::Jump(target)
                });
            }
            Jmp => return Ok(Flow::Jump(ins.branch_target().unwrap())),
            Jcc(c) => {
                return Ok(if self.cond(c)? {
                    Flow::Jump(ins.branch_target().unwrap())
                } else {
                    Flow::Next
                })
            }
            Call => {
                self.push(ins.next_addr());
                return Ok(Flow::Jump(ins.branch_target().unwrap()));
            }
        }
        if ops.iter().any(|o| o.size() == OpSize::Word) {
            return Err(format!("16-bit operand in `{ins}`"));
        }
        Ok(Flow::Next)
    }

    /// Runs from `entry` until the function returns to the sentinel.
    pub fn run(image: &FunctionImage, entry: u32, args: &[u32], max_steps: usize) -> Result<Self, String> {
        let mut m = Self::new(args);
        let mut pc = entry;
        loop {
            if m.steps >= max_steps {
                return Err("step limit".into());
            }
            let ins = decode_one(image, pc).map_err(|e| e.to_string())?;
            match m.step(&ins)? {
                Flow::Next => pc = ins.next_addr(),
                Flow::Jump(t) => pc = t,
                Flow::Return => return Ok(m),
            }
        }
    }
}
