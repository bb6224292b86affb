//! Semantics-preserving obfuscation of a function image.
//!
//! The function is recovered by recursive traversal into a list of labels and
//! instructions whose branch operands name labels instead of addresses. Each
//! round rewrites that list with the selected techniques, and the result is
//! assembled with short branches promoted to near ones where needed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loader::{FunctionImage, LoadError};
use crate::x86::{
    decode_one, encode, encode_branch, BranchForm, Cond, DecodeError, EncodeError, Gpr,
    MemOperand, Mnemonic, OpSize, Operand, Register, X86Instruction,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Technique {
    /// Split the code at random points, shuffle the pieces and chain them
    /// with `jmp`.
    JumpInsertion,
    /// Rewrite single instructions into equivalent sequences.
    OpcodeMutation,
    /// Place never-reached blocks after unconditional transfers.
    DeadCode,
    /// `jcc L; jncc L` in front of an instruction labelled `L`.
    OppositeJumpPair,
    /// Sequences with no effect on registers, memory above the stack
    /// pointer, or live flags.
    JunkInsertion,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::JumpInsertion,
        Technique::OpcodeMutation,
        Technique::DeadCode,
        Technique::OppositeJumpPair,
        Technique::JunkInsertion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::JumpInsertion => "jump-insertion",
            Technique::OpcodeMutation => "opcode-mutation",
            Technique::DeadCode => "dead-code",
            Technique::OppositeJumpPair => "opposite-jump-pair",
            Technique::JunkInsertion => "junk-insertion",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = ObfuscationError;

    /// Accepts `jump-insertion`, `jump_insertion` or `JumpInsertion`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = |t: &str| -> String {
            t.chars()
                .filter(|c| *c != '-' && *c != '_')
                .map(|c| c.to_ascii_lowercase())
                .collect()
        };
        let wanted = norm(s);
        Technique::ALL
            .into_iter()
            .find(|t| norm(t.name()) == wanted)
            .ok_or_else(|| ObfuscationError::UnknownTechnique(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ObfuscationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("unknown technique `{0}`")]
    UnknownTechnique(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("branch at {addr:#010x} targets {target:#010x} outside the image")]
    BranchOutsideImage { addr: u32, target: u32 },
    #[error("instruction at {0:#010x} starts inside another instruction")]
    OverlappingInstructions(u32),
    #[error("relocated code does not fit the 32-bit address space")]
    RelocationOverflow,
    #[error(transparent)]
    Image(#[from] LoadError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObfConfig {
    iterations: u32,
    techniques: BTreeSet<Technique>,
    seed: u64,
}

impl ObfConfig {
    pub fn new(
        iterations: u32,
        techniques: impl IntoIterator<Item = Technique>,
        seed: u64,
    ) -> Result<Self, ObfuscationError> {
        let techniques: BTreeSet<_> = techniques.into_iter().collect();
        if iterations == 0 {
            return Err(ObfuscationError::InvalidConfig("iterations must be at least 1"));
        }
        if techniques.is_empty() {
            return Err(ObfuscationError::InvalidConfig("no techniques selected"));
        }
        Ok(Self {
            iterations,
            techniques,
            seed,
        })
    }

    /// Every technique.
    pub fn all(iterations: u32, seed: u64) -> Result<Self, ObfuscationError> {
        Self::new(iterations, Technique::ALL, seed)
    }

    pub fn iterations(&self) -> u32 {
        self.iterations
    }

    pub fn techniques(&self) -> impl Iterator<Item = Technique> + '_ {
        self.techniques.iter().copied()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Obfuscated {
    pub image: FunctionImage,
    pub entry: u32,
    /// Instructions in the output, reachable or not.
    pub instruction_count: usize,
}

type Label = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Ins {
    mnemonic: Mnemonic,
    /// Empty for relative branches, which use `target` instead.
    operands: Vec<Operand>,
    target: Option<Label>,
    /// Inserted as never-executed filler; later rounds leave it alone.
    dead: bool,
    /// Second jump of an opposite pair; nothing goes between it and the first.
    glued: bool,
}

impl Ins {
    fn plain(mnemonic: Mnemonic, operands: Vec<Operand>) -> Self {
        Self {
            mnemonic,
            operands,
            target: None,
            dead: false,
            glued: false,
        }
    }

    fn branch(mnemonic: Mnemonic, target: Label) -> Self {
        Self {
            mnemonic,
            operands: Vec::new(),
            target: Some(target),
            dead: false,
            glued: false,
        }
    }

    fn dead(self) -> Self {
        Self { dead: true, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Item {
    Label(Label),
    Ins(Ins),
}

#[derive(Debug, Clone)]
struct Program {
    items: Vec<Item>,
    labels: usize,
    entry: Label,
}

impl Program {
    fn fresh_label(&mut self) -> Label {
        self.labels += 1;
        self.labels - 1
    }

    fn instruction_count(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, Item::Ins(_))).count()
    }

    fn existing_labels(&self) -> Vec<Label> {
        self.items
            .iter()
            .filter_map(|i| match i {
                Item::Label(l) => Some(*l),
                Item::Ins(_) => None,
            })
            .collect()
    }
}

/// Instructions reachable from `entry` by recursive traversal, in address
/// order.
pub fn disassemble(image: &FunctionImage, entry: u32) -> Result<Vec<X86Instruction>, ObfuscationError> {
    let mut found: BTreeMap<u32, X86Instruction> = BTreeMap::new();
    let mut work = vec![entry];
    while let Some(addr) = work.pop() {
        if found.contains_key(&addr) {
            continue;
        }
        let ins = decode_one(image, addr)?;
        if let Some(target) = ins.branch_target() {
            if !image.contains(target) {
                return Err(ObfuscationError::BranchOutsideImage { addr, target });
            }
            work.push(target);
        }
        if !ins.mnemonic.is_unconditional_transfer() {
            work.push(ins.next_addr());
        }
        found.insert(addr, ins);
    }
    let mut prev_end = 0u64;
    for ins in found.values() {
        if u64::from(ins.addr) < prev_end {
            return Err(ObfuscationError::OverlappingInstructions(ins.addr));
        }
        prev_end = u64::from(ins.addr) + ins.len() as u64;
    }
    Ok(found.into_values().collect())
}

fn recover(image: &FunctionImage, entry: u32) -> Result<Program, ObfuscationError> {
    let code = disassemble(image, entry)?;
    let mut label_of: BTreeMap<u32, Label> = BTreeMap::new();
    label_of.insert(entry, 0);
    for ins in &code {
        if let Some(t) = ins.branch_target() {
            let next = label_of.len();
            label_of.entry(t).or_insert(next);
        }
    }
    let mut items = Vec::with_capacity(code.len() + label_of.len());
    for ins in code {
        if let Some(&l) = label_of.get(&ins.addr) {
            items.push(Item::Label(l));
        }
        items.push(Item::Ins(match ins.branch_target() {
            Some(t) => Ins::branch(ins.mnemonic, label_of[&t]),
            None => Ins::plain(ins.mnemonic, ins.operands),
        }));
    }
    Ok(Program {
        items,
        labels: label_of.len(),
        entry: 0,
    })
}

/// Applies `config.iterations` rounds of the selected techniques.
pub fn obfuscate(
    image: &FunctionImage,
    entry: u32,
    config: &ObfConfig,
) -> Result<Obfuscated, ObfuscationError> {
    let mut prog = recover(image, entry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for round in 0..config.iterations {
        for t in config.techniques() {
            match t {
                Technique::JumpInsertion => jump_insertion(&mut prog, &mut rng),
                Technique::OpcodeMutation => opcode_mutation(&mut prog, &mut rng),
                Technique::DeadCode => dead_code(&mut prog, &mut rng),
                Technique::OppositeJumpPair => opposite_jump_pair(&mut prog, &mut rng),
                Technique::JunkInsertion => junk_insertion(&mut prog, &mut rng),
            }
        }
        debug!("round {}: {} instructions", round + 1, prog.instruction_count());
    }
    let (bytes, entry) = assemble(&prog, image.base_addr())?;
    Ok(Obfuscated {
        image: FunctionImage::new(bytes, image.base_addr())?,
        entry,
        instruction_count: prog.instruction_count(),
    })
}

const CF: u8 = 1;
const PF: u8 = 2;
const AF: u8 = 4;
const ZF: u8 = 8;
const SF: u8 = 16;
const OF: u8 = 32;
const ALL_FLAGS: u8 = 63;

fn cond_flags(c: Cond) -> u8 {
    match c {
        Cond::O | Cond::No => OF,
        Cond::B | Cond::Ae => CF,
        Cond::E | Cond::Ne => ZF,
        Cond::Be | Cond::A => CF | ZF,
        Cond::S | Cond::Ns => SF,
        Cond::P | Cond::Np => PF,
        Cond::L | Cond::Ge => SF | OF,
        Cond::Le | Cond::G => ZF | SF | OF,
    }
}

fn flag_uses(ins: &Ins) -> u8 {
    match ins.mnemonic {
        Mnemonic::Jcc(c) => cond_flags(c),
        Mnemonic::Call => ALL_FLAGS,
        _ => 0,
    }
}

fn flag_defs(ins: &Ins) -> u8 {
    use Mnemonic::*;
    match ins.mnemonic {
        Add | Sub | And | Or | Xor | Cmp | Test | Neg => ALL_FLAGS,
        Inc | Dec => ALL_FLAGS & !CF,
        Shl | Shr | Sar => match ins.operands.get(1) {
            Some(Operand::Imm { value, .. }) if value & 31 != 0 => ALL_FLAGS,
            _ => 0,
        },
        _ => 0,
    }
}

/// Flags live on entry to each item. Flags are dead at `ret`: only the
/// registers and memory are observable after the function returns.
fn live_flags(prog: &Program) -> Vec<u8> {
    let n = prog.items.len();
    let mut at_label = vec![usize::MAX; prog.labels];
    for (i, item) in prog.items.iter().enumerate() {
        if let Item::Label(l) = item {
            at_label[*l] = i;
        }
    }
    let mut live = vec![0u8; n + 1];
    loop {
        let mut changed = false;
        for i in (0..n).rev() {
            let value = match &prog.items[i] {
                Item::Label(_) => live[i + 1],
                Item::Ins(ins) => {
                    let target = ins.target.map_or(0, |l| live[at_label[l]]);
                    let out = match ins.mnemonic {
                        Mnemonic::Ret => 0,
                        Mnemonic::Jmp => target,
                        _ => target | live[i + 1],
                    };
                    flag_uses(ins) | (out & !flag_defs(ins))
                }
            };
            if value != live[i] {
                live[i] = value;
                changed = true;
            }
        }
        if !changed {
            return live;
        }
    }
}

fn junk_reg(rng: &mut ChaCha8Rng) -> Gpr {
    const REGS: [Gpr; 7] = [Gpr::Eax, Gpr::Ecx, Gpr::Edx, Gpr::Ebx, Gpr::Ebp, Gpr::Esi, Gpr::Edi];
    *REGS.choose(rng).unwrap()
}

/// An arbitrary encodable instruction for code that never runs.
fn random_instruction(rng: &mut ChaCha8Rng, labels: &[Label]) -> Ins {
    use Mnemonic::*;
    let r = Operand::reg32(junk_reg(rng));
    let s = Operand::reg32(junk_reg(rng));
    let imm = Operand::imm32(rng.gen());
    match rng.gen_range(0..9) {
        0 => Ins::plain(Mov, vec![r, imm]),
        1 => Ins::plain(*[Add, Sub, Xor, And, Or].choose(rng).unwrap(), vec![r, s]),
        2 => Ins::plain(*[Add, Sub, Cmp].choose(rng).unwrap(), vec![r, imm]),
        3 => Ins::plain(Push, vec![r]),
        4 => Ins::plain(Pop, vec![r]),
        5 => Ins::plain(*[Inc, Dec, Not, Neg].choose(rng).unwrap(), vec![r]),
        6 => {
            let m = MemOperand::base_disp(junk_reg(rng), rng.gen_range(-64..64), OpSize::Dword);
            Ins::plain(Mov, vec![r, Operand::Mem(m)])
        }
        7 => Ins::plain(Shl, vec![r, Operand::imm32(rng.gen_range(1..32))]),
        _ => match labels.choose(rng) {
            Some(&l) => Ins::branch(Jcc(Cond::from_code(rng.gen_range(0..16))), l),
            None => Ins::plain(Nop, vec![]),
        },
    }
}

/// Start index of the run of labels that precedes item `i`.
fn label_run_start(items: &[Item], mut i: usize) -> usize {
    while i > 0 && matches!(items[i - 1], Item::Label(_)) {
        i -= 1;
    }
    i
}

fn is_live(item: &Item) -> bool {
    matches!(item, Item::Ins(ins) if !ins.dead)
}

/// Live and open to insertions in front of it.
fn is_open(item: &Item) -> bool {
    matches!(item, Item::Ins(ins) if !ins.dead && !ins.glued)
}

fn live_positions(items: &[Item]) -> Vec<usize> {
    items
        .iter()
        .enumerate()
        .filter(|(_, it)| is_live(it))
        .map(|(i, _)| i)
        .collect()
}

fn jump_insertion(prog: &mut Program, rng: &mut ChaCha8Rng) {
    let pos = live_positions(&prog.items);
    let n = pos.len();
    let open: Vec<usize> = (1..n).filter(|&j| is_open(&prog.items[pos[j]])).collect();
    if n < 2 {
        return;
    }
    // dense on small functions, sparse on large ones
    let k = (2 * n).div_ceil(3).min(4 + n / 10).min(open.len());
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, open.len(), k)
        .into_iter()
        .map(|j| label_run_start(&prog.items, pos[open[j]]))
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut chunks: Vec<Vec<Item>> = Vec::with_capacity(cuts.len() + 1);
    let mut rest = std::mem::take(&mut prog.items);
    for &c in cuts.iter().rev() {
        chunks.push(rest.split_off(c));
    }
    chunks.push(rest);
    chunks.reverse();
    let heads: Vec<Label> = (0..chunks.len()).map(|_| prog.fresh_label()).collect();
    for (i, chunk) in chunks.iter_mut().enumerate() {
        chunk.insert(0, Item::Label(heads[i]));
        let last = chunk.iter().rev().find_map(|it| match it {
            Item::Ins(ins) => Some(ins),
            Item::Label(_) => None,
        });
        let falls_through = last.is_none_or(|ins| !ins.mnemonic.is_unconditional_transfer());
        let dead = last.is_some_and(|ins| ins.dead);
        if falls_through && i + 1 < heads.len() {
            let jmp = Ins::branch(Mnemonic::Jmp, heads[i + 1]);
            chunk.push(Item::Ins(if dead { jmp.dead() } else { jmp }));
        }
    }
    // the last chunk ends in an unconditional transfer, so any order works
    chunks.shuffle(rng);
    prog.items = chunks.into_iter().flatten().collect();
}

/// Replacement for `ins` and the flags whose final values may differ.
fn mutation(ins: &Ins) -> Option<(Vec<Ins>, u8)> {
    use Mnemonic::*;
    let reg32 = |op: &Operand| match op {
        Operand::Reg(Register::R32(g)) => Some(*g),
        _ => None,
    };
    let ops = &ins.operands;
    let rule = match (ins.mnemonic, ops.as_slice()) {
        (Mov, [d, s]) if reg32(d).is_some_and(|g| g != Gpr::Esp) => match s {
            Operand::Reg(Register::R32(_)) | Operand::Imm { .. } => {
                (vec![Ins::plain(Push, vec![*s]), Ins::plain(Pop, vec![*d])], 0)
            }
            Operand::Mem(m) if m.size == OpSize::Dword && m.address_regs().all(|g| g != Gpr::Esp) => {
                (vec![Ins::plain(Push, vec![*s]), Ins::plain(Pop, vec![*d])], 0)
            }
            _ => return None,
        },
        (Add | Sub, [d, Operand::Imm { value, .. }]) if reg32(d).is_some() => {
            let flipped = if ins.mnemonic == Add { Sub } else { Add };
            let neg = Operand::imm32(value.wrapping_neg());
            (vec![Ins::plain(flipped, vec![*d, neg])], CF | AF | OF)
        }
        (Inc | Dec, [d]) if reg32(d).is_some() => {
            let m = if ins.mnemonic == Inc { Add } else { Sub };
            (vec![Ins::plain(m, vec![*d, Operand::imm32(1)])], CF)
        }
        (Not, [d]) if reg32(d).is_some() => {
            (vec![Ins::plain(Xor, vec![*d, Operand::imm32(u32::MAX)])], ALL_FLAGS)
        }
        (Neg, [d]) if reg32(d).is_some() => (
            vec![Ins::plain(Not, vec![*d]), Ins::plain(Inc, vec![*d])],
            CF | AF,
        ),
        (Xor, [d, s]) if reg32(d).is_some() && d == s => {
            (vec![Ins::plain(Mov, vec![*d, Operand::imm32(0)])], ALL_FLAGS)
        }
        _ => return None,
    };
    Some(rule)
}

fn opcode_mutation(prog: &mut Program, rng: &mut ChaCha8Rng) {
    let live = live_flags(prog);
    let old = std::mem::take(&mut prog.items);
    let mut out = Vec::with_capacity(old.len() * 3 / 2);
    for (i, item) in old.into_iter().enumerate() {
        if let Item::Ins(ins) = &item {
            if !ins.dead && rng.gen_bool(0.25) {
                if let Some((seq, differs)) = mutation(ins) {
                    if live[i + 1] & differs == 0 {
                        out.extend(seq.into_iter().map(Item::Ins));
                        continue;
                    }
                }
            }
        }
        out.push(item);
    }
    prog.items = out;
}

fn dead_code(prog: &mut Program, rng: &mut ChaCha8Rng) {
    let labels = prog.existing_labels();
    let old = std::mem::take(&mut prog.items);
    let mut out = Vec::with_capacity(old.len() * 3 / 2);
    for item in old {
        let after_transfer =
            matches!(&item, Item::Ins(ins) if !ins.dead && ins.mnemonic.is_unconditional_transfer());
        out.push(item);
        if after_transfer && rng.gen_bool(0.25) {
            for _ in 0..rng.gen_range(1..=3) {
                out.push(Item::Ins(random_instruction(rng, &labels).dead()));
            }
            let close = match labels.choose(rng) {
                Some(&l) if rng.gen_bool(0.7) => Ins::branch(Mnemonic::Jmp, l),
                _ => Ins::plain(Mnemonic::Ret, vec![]),
            };
            out.push(Item::Ins(close.dead()));
        }
    }
    prog.items = out;
}

fn opposite_jump_pair(prog: &mut Program, rng: &mut ChaCha8Rng) {
    let old = std::mem::take(&mut prog.items);
    let labels: Vec<Label> = old
        .iter()
        .filter_map(|i| match i {
            Item::Label(l) => Some(*l),
            Item::Ins(_) => None,
        })
        .collect();
    let mut out = Vec::with_capacity(old.len() * 3 / 2);
    for item in old {
        if is_open(&item) && rng.gen_bool(0.08) {
            let l = prog.fresh_label();
            let c = Cond::from_code(rng.gen_range(0..16));
            out.push(Item::Ins(Ins::branch(Mnemonic::Jcc(c), l)));
            let second = Ins::branch(Mnemonic::Jcc(c.negate()), l);
            out.push(Item::Ins(Ins { glued: true, ..second }));
            for _ in 0..rng.gen_range(0..=2) {
                out.push(Item::Ins(random_instruction(rng, &labels).dead()));
            }
            out.push(Item::Label(l));
        }
        out.push(item);
    }
    prog.items = out;
}

fn junk_sequence(rng: &mut ChaCha8Rng, flags_dead: bool) -> Vec<Ins> {
    use Mnemonic::*;
    let g = Operand::reg32(junk_reg(rng));
    let h = Operand::reg32(junk_reg(rng));
    let choices = if flags_dead { 7 } else { 3 };
    match rng.gen_range(0..choices) {
        0 => vec![Ins::plain(Push, vec![g]), Ins::plain(Pop, vec![g])],
        1 => vec![Ins::plain(Mov, vec![g, g])],
        2 => vec![Ins::plain(Nop, vec![])],
        3 => vec![Ins::plain(Test, vec![g, h])],
        4 => vec![Ins::plain(Cmp, vec![g, Operand::imm32(rng.gen())])],
        5 => {
            let k = Operand::imm32(rng.gen());
            vec![Ins::plain(Add, vec![g, k]), Ins::plain(Sub, vec![g, k])]
        }
        _ => vec![Ins::plain(*[Or, And].choose(rng).unwrap(), vec![g, g])],
    }
}

fn junk_insertion(prog: &mut Program, rng: &mut ChaCha8Rng) {
    let live = live_flags(prog);
    let old = std::mem::take(&mut prog.items);
    let mut out = Vec::with_capacity(old.len() * 3 / 2);
    for (i, item) in old.into_iter().enumerate() {
        if is_open(&item) && rng.gen_bool(0.15) {
            out.extend(junk_sequence(rng, live[i] == 0).into_iter().map(Item::Ins));
        }
        out.push(item);
    }
    prog.items = out;
}

fn assemble(prog: &Program, base: u32) -> Result<(Vec<u8>, u32), ObfuscationError> {
    let mut encoded: Vec<Option<Vec<u8>>> = Vec::with_capacity(prog.items.len());
    let mut near: Vec<bool> = Vec::with_capacity(prog.items.len());
    for item in &prog.items {
        match item {
            Item::Ins(ins) if ins.target.is_none() => {
                let x = X86Instruction::new(0, ins.mnemonic, ins.operands.clone());
                encoded.push(Some(encode(&x)?));
                near.push(false);
            }
            Item::Ins(ins) => {
                encoded.push(None);
                near.push(ins.mnemonic == Mnemonic::Call);
            }
            Item::Label(_) => {
                encoded.push(None);
                near.push(false);
            }
        }
    }
    let branch_len = |m: Mnemonic, near: bool| match (m, near) {
        (Mnemonic::Jcc(_), true) => 6,
        (_, true) => 5,
        (_, false) => 2,
    };
    let mut addrs = vec![0u32; prog.items.len()];
    let mut label_addr = vec![0u32; prog.labels];
    loop {
        let mut addr = u64::from(base);
        for (i, item) in prog.items.iter().enumerate() {
            addrs[i] = u32::try_from(addr).map_err(|_| ObfuscationError::RelocationOverflow)?;
            addr += match item {
                Item::Label(l) => {
                    label_addr[*l] = addrs[i];
                    0
                }
                Item::Ins(ins) => match &encoded[i] {
                    Some(bytes) => bytes.len() as u64,
                    None => branch_len(ins.mnemonic, near[i]),
                },
            };
        }
        if addr > u64::from(u32::MAX) + 1 {
            return Err(ObfuscationError::RelocationOverflow);
        }
        let mut grew = false;
        for (i, item) in prog.items.iter().enumerate() {
            if let Item::Ins(Ins {
                mnemonic,
                target: Some(l),
                ..
            }) = item
            {
                if !near[i]
                    && encode_branch(*mnemonic, addrs[i], label_addr[*l], BranchForm::Short).is_none()
                {
                    near[i] = true;
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    let mut bytes = Vec::new();
    for (i, item) in prog.items.iter().enumerate() {
        if let Item::Ins(ins) = item {
            match (&encoded[i], ins.target) {
                (Some(b), _) => bytes.extend_from_slice(b),
                (None, Some(l)) => {
                    let form = if near[i] { BranchForm::Near } else { BranchForm::Short };
                    let b = encode_branch(ins.mnemonic, addrs[i], label_addr[l], form)
                        .ok_or(ObfuscationError::RelocationOverflow)?;
                    bytes.extend_from_slice(&b);
                }
                (None, None) => unreachable!("branch without a target"),
            }
        }
    }
    Ok((bytes, label_addr[prog.entry]))
}
