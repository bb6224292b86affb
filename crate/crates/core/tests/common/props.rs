//! Property checks shared by the integration tests and the acceptance
//! harness. Each returns the number of cases checked or a description of
//! the first failure.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resmt::emu::{run_concrete, ConcreteState};
use resmt::il::IlReg;
use resmt::lifter::lift;
use resmt::loader::{parse_hex, FunctionImage};
use resmt::machine::{Abi, ExecLimits};
use resmt::obfuscator::{disassemble, obfuscate, ObfConfig, Obfuscated};
use resmt::query::{Operation, ReQuery};
use resmt::smt::{
    emit_smtlib, solve, CmpOp, Formula, Sort, SolverConfig, TermId, TermKind, TermStore, Value, Verdict,
};
use resmt::symex::{Explorer, PathStatus};
use resmt::x86::{decode_bytes, encode, Gpr, Mnemonic, OpSize, Operand, Register, X86Instruction};

use super::gen;
use super::refx86::{Flags, RefMachine};

pub const CHECK_KEY: &str = "55 89 E5 8B 45 08 83 E8 03 5D C3";

pub fn image(hex: &str) -> FunctionImage {
    FunctionImage::new(parse_hex(hex).unwrap(), 0).unwrap()
}

const FLAG_REGS: [IlReg; 6] = [IlReg::Cf, IlReg::Pf, IlReg::Af, IlReg::Zf, IlReg::Sf, IlReg::Of];

fn il_reg(g: Gpr) -> IlReg {
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

/// Differences between the emulator state and the reference machine on
/// registers and on the flags the reference defines.
fn state_diff(emu: &ConcreteState, reference: &RefMachine) -> Option<String> {
    for g in Gpr::ALL {
        let (a, b) = (emu.reg(il_reg(g)), reference.gpr(g));
        if a != b {
            return Some(format!("{}: lifted {a:#x}, reference {b:#x}", g.name()));
        }
    }
    for (r, (name, want)) in FLAG_REGS.iter().zip(reference.flags.named()) {
        if let Some(want) = want {
            if (emu.reg(*r) == 1) != want {
                return Some(format!("{name}: lifted {}, reference {want}", emu.reg(*r)));
            }
        }
    }
    None
}

/// Flag and result correctness of the lifted arithmetic, logic and shift
/// instructions on `pairs` random operand pairs each, at 32 and 8 bits.
pub fn flag_property(pairs: usize, seed: u64) -> Result<usize, String> {
    use Mnemonic::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let binary = [Add, Sub, And, Or, Xor, Cmp, Test];
    let unary = [Inc, Dec, Neg, Not];
    let shifts = [Shl, Shr, Sar];
    let mut checked = 0;
    let ops: Vec<Mnemonic> = binary.iter().chain(&unary).chain(&shifts).copied().collect();
    for &m in &ops {
        for i in 0..pairs {
            let (a, b) = (gen::value(&mut rng), gen::value(&mut rng));
            let byte = i % 2 == 1 && !shifts.contains(&m);
            let (dst, src) = if byte {
                (
                    Operand::Reg(Register::Low8(Gpr::Eax)),
                    Operand::Reg(Register::High8(Gpr::Ecx)),
                )
            } else {
                (Operand::reg32(Gpr::Eax), Operand::reg32(Gpr::Ecx))
            };
            let operands = if unary.contains(&m) {
                vec![dst]
            } else if shifts.contains(&m) {
                if i % 2 == 0 {
                    vec![dst, Operand::Reg(Register::Low8(Gpr::Ecx))]
                } else {
                    vec![dst, Operand::imm32(b & 31)]
                }
            } else {
                vec![dst, src]
            };
            let mut ins = X86Instruction::new(0, m, operands);
            ins.raw = encode(&ins).map_err(|e| e.to_string())?;
            let block = lift(&ins).map_err(|e| e.to_string())?;
            let init_flags: u8 = rng.gen::<u8>() & 63;
            let mut emu = ConcreteState::initial(0, &[], &Abi::Stack).unwrap();
            let mut reference = RefMachine::new(&[]);
            emu.set_reg(IlReg::Eax, a);
            emu.set_reg(IlReg::Ecx, b);
            reference.set_gpr(Gpr::Eax, a);
            reference.set_gpr(Gpr::Ecx, b);
            let bit = |k: u8| init_flags >> k & 1 == 1;
            reference.flags = Flags {
                cf: Some(bit(0)),
                pf: Some(bit(1)),
                af: Some(bit(2)),
                zf: Some(bit(3)),
                sf: Some(bit(4)),
                of: Some(bit(5)),
            };
            for (k, r) in FLAG_REGS.iter().enumerate() {
                emu.set_reg(*r, u32::from(bit(k as u8)));
            }
            emu.exec_block(&block.il, 1_000).map_err(|e| e.to_string())?;
            reference.step(&ins)?;
            if let Some(d) = state_diff(&emu, &reference) {
                return Err(format!("`{ins}` with eax={a:#x} ecx={b:#x}: {d}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Encode → decode → encode over random programs, and decode → encode →
/// decode over random byte strings.
pub fn decoder_round_trip(programs: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for _ in 0..programs {
        for ins in gen::program(&mut rng, 30) {
            let bytes = encode(&ins).map_err(|e| e.to_string())?;
            let back = decode_bytes(&bytes, 0).map_err(|e| format!("{ins}: {e}"))?;
            let again = encode(&back).map_err(|e| e.to_string())?;
            if back.to_string() != ins.to_string() || back.raw != bytes || again != bytes {
                return Err(format!("`{ins}` came back as `{back}`"));
            }
            checked += 1;
        }
    }
    for _ in 0..programs * 30 {
        let bytes: [u8; 12] = rng.gen();
        let Ok(first) = decode_bytes(&bytes, 0x1000) else {
            continue;
        };
        if first.operands.iter().any(|o| o.size() == OpSize::Word) {
            continue;
        }
        let again = encode(&first).map_err(|e| format!("{first}: {e}"))?;
        let second = decode_bytes(&again, 0x1000).map_err(|e| e.to_string())?;
        if second.mnemonic != first.mnemonic || second.operands != first.operands {
            return Err(format!("{bytes:02x?}: `{first}` re-decoded as `{second}`"));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Symbolic outputs for concrete inputs: the single returned path's formula
/// with inputs and initial registers pinned, solved; returns the model.
fn pinned_model(
    img: &FunctionImage,
    args: &[u32],
    solver: &SolverConfig,
) -> Result<BTreeMap<String, u32>, String> {
    let names = ["A", "B"];
    let q = ReQuery::new(&names[..args.len()], IlReg::Eax, Operation::Eq, 0);
    let limits = ExecLimits::default();
    let mut ex = Explorer::new(img, 0, &q, &Abi::Stack, limits).map_err(|e| e.to_string())?;
    let paths = ex.run_all();
    let [path] = paths.as_slice() else {
        return Err(format!("{} paths for straight-line code", paths.len()));
    };
    if path.status != PathStatus::Returned {
        return Err(format!("path ended with {}", path.status.name()));
    }
    let base = ex.formula(path);
    let mut assertions = base.assertions.clone();
    let s = ex.store_mut();
    let mut pin = |name: &str, bits: u8, v: u32| {
        let var = s.var(name, Sort::Bv(bits));
        let k = s.constant(bits, v);
        let eq = s.eq(var, k);
        assertions.push(eq);
    };
    for (n, &v) in names.iter().zip(args) {
        pin(n, 32, v);
    }
    for r in IlReg::GPRS.iter().filter(|r| **r != IlReg::Esp) {
        pin(r.short_name(), 32, 0);
    }
    for r in FLAG_REGS {
        pin(r.short_name(), 1, 0);
    }
    let tt = ex.store_mut().tt();
    let inputs = ex.inputs().to_vec();
    let formula = Formula::new(ex.store(), assertions, tt, &inputs);
    let result = solve(&emit_smtlib(ex.store(), &formula), solver).map_err(|e| e.to_string())?;
    if result.verdict != Verdict::Sat {
        return Err(format!("pinned formula is {}", result.verdict));
    }
    let model = result.model.unwrap_or_default();
    match formula.holds_under(ex.store(), &model) {
        Ok(true) => Ok(model),
        Ok(false) => Err("model does not satisfy its formula".into()),
        Err(e) => Err(format!("model evaluation failed: {e}")),
    }
}

/// One random program: reference vs lifted concrete run on every register
/// and defined flag, then (with `solver`) the pinned symbolic outputs vs
/// the concrete run on every general purpose register.
pub fn differential_case(seed: u64, len: usize, solver: Option<&SolverConfig>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = gen::program(&mut rng, len);
    let img = gen::assemble(&code);
    let args = [gen::value(&mut rng), gen::value(&mut rng)];
    let ctx = |msg: String| format!("program {seed}: {msg}");
    let reference = RefMachine::run(&img, 0, &args, 10_000).map_err(ctx)?;
    let run = run_concrete(&img, 0, &args, &Abi::Stack, &ExecLimits::default())
        .map_err(|e| ctx(e.to_string()))?;
    if let Some(d) = state_diff(&run.state, &reference) {
        return Err(ctx(d));
    }
    if let Some(cfg) = solver {
        let model = pinned_model(&img, &args, cfg).map_err(ctx)?;
        for r in IlReg::GPRS {
            let name = format!("{}_output", r.short_name());
            let got = model.get(&name).copied();
            if got != Some(run.state.reg(r)) {
                return Err(ctx(format!("{name}: symbolic {got:?}, concrete {:#x}", run.state.reg(r))));
            }
        }
    }
    Ok(())
}

/// `count` programs starting at `first_seed`, spread over worker threads.
pub fn differential(count: u64, first_seed: u64, len: usize, solver: Option<&SolverConfig>) -> Result<usize, String> {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8) as u64;
    let failures: Vec<String> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (first_seed..first_seed + count)
                        .filter(|s| s % workers == w)
                        .filter_map(|s| differential_case(s, len, solver).err())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    match failures.first() {
        None => Ok(count as usize),
        Some(f) => Err(format!("{} of {count} failed; first: {f}", failures.len())),
    }
}

/// Extends `env` with the value of every `(= var definition)` assertion,
/// in order. Initial registers, undefined values and memory read as zero.
fn bind_definitions(
    store: &TermStore,
    assertions: &[TermId],
    env: &mut BTreeMap<String, Value>,
) -> Result<(), String> {
    for &a in assertions {
        if let TermKind::Cmp { op: CmpOp::Eq, a: lhs, b: rhs } = *store.kind(a) {
            let Some(name) = store.var_name(lhs) else { continue };
            let lookup = |n: &str| {
                env.get(n).cloned().or_else(|| match IlReg::from_short_name(n) {
                    Some(_) => Some(Value::Bv(0)),
                    None if n == "MEM" => Some(Value::Array(Default::default())),
                    None if n.starts_with("undef_") => Some(Value::Bv(0)),
                    None => None,
                })
            };
            let v = store.eval(rhs, &lookup).map_err(|e| format!("{name}: {e}"))?;
            env.insert(name.to_string(), v);
        }
    }
    Ok(())
}

/// Little-endian round trips through symbolic memory: dword store then byte
/// and dword loads, and byte stores then a dword load, checked by
/// evaluating the final register terms against the arithmetic definition.
pub fn memory_round_trip(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let abi = Abi::Registers(vec![IlReg::Ecx, IlReg::Edx]);
    let q = ReQuery::new(&["X", "Y"], IlReg::Eax, Operation::Eq, 0);
    let limits = ExecLimits::default();
    let mut programs = Vec::new();
    for k in 0..4u8 {
        // mov [esp-8], ecx; xor eax, eax; mov al, [esp-8+k]; mov ebx, [esp-8]; ret
        let hex = format!("89 4C 24 F8 31 C0 8A 44 24 {:02X} 8B 5C 24 F8 C3", 0xF8 + k);
        programs.push((image(&hex), Some(k)));
    }
    // mov [esp-8], cl; mov [esp-7], ch; mov [esp-6], dl; mov [esp-5], dh;
    // mov eax, [esp-8]; mov ebx, eax; ret
    programs.push((
        image("88 4C 24 F8 88 6C 24 F9 88 54 24 FA 88 74 24 FB 8B 44 24 F8 89 C3 C3"),
        None,
    ));
    let mut checked = 0;
    for (img, byte) in &programs {
        let mut ex = Explorer::new(img, 0, &q, &abi, limits).map_err(|e| e.to_string())?;
        let paths = ex.run_all();
        let st = &paths[0].state;
        let (eax, ebx) = (st.reg_def(IlReg::Eax), st.reg_def(IlReg::Ebx));
        for _ in 0..cases {
            let (x, y) = (gen::value(&mut rng), gen::value(&mut rng));
            let mut env: BTreeMap<String, Value> = BTreeMap::new();
            env.insert("X".into(), Value::Bv(x));
            env.insert("Y".into(), Value::Bv(y));
            bind_definitions(ex.store(), st.assertions(), &mut env)?;
            let eval = |t| match ex.store().eval(t, &|n: &str| env.get(n).cloned()) {
                Ok(Value::Bv(v)) => Ok(v),
                other => Err(format!("evaluation gave {other:?}")),
            };
            let (want_eax, want_ebx) = match byte {
                Some(k) => ((x >> (8 * u32::from(*k))) & 0xFF, x),
                None => {
                    let v = (x & 0xFFFF) | ((y & 0xFFFF) << 16);
                    (v, v)
                }
            };
            let (got_eax, got_ebx) = (eval(eax)?, eval(ebx)?);
            if (got_eax, got_ebx) != (want_eax, want_ebx) {
                return Err(format!(
                    "x={x:#x} y={y:#x} byte={byte:?}: eax {got_eax:#x}/{want_eax:#x}, ebx {got_ebx:#x}/{want_ebx:#x}"
                ));
            }
            let concrete = run_concrete(img, 0, &[x, y], &abi, &limits).map_err(|e| e.to_string())?;
            if concrete.eax != want_eax {
                return Err(format!("concrete run disagrees: {:#x}", concrete.eax));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Obfuscated variants whose instruction counts first reach each target.
pub fn tiers(img: &FunctionImage, entry: u32, seed: u64, targets: &[usize]) -> Vec<Obfuscated> {
    let mut out = Vec::new();
    let mut iterations = 1;
    for &target in targets {
        loop {
            let v = obfuscate(img, entry, &ObfConfig::all(iterations, seed).unwrap()).unwrap();
            if v.instruction_count >= target {
                out.push(v);
                break;
            }
            iterations += 1;
        }
    }
    out
}

/// Equal EAX on `inputs` random first arguments (plus the edge values),
/// and every reachable branch lands on a decodable instruction inside the
/// image.
pub fn obfuscation_preserves(
    original: &FunctionImage,
    entry: u32,
    variants: &[Obfuscated],
    inputs: usize,
    seed: u64,
) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = ExecLimits {
        max_steps: 10_000_000,
        ..ExecLimits::default()
    };
    let mut keys: Vec<u32> = vec![0, 3, 0x66, 0xFF, 0xFFFF_FFFF];
    while keys.len() < inputs {
        keys.push(gen::value(&mut rng));
    }
    let mut checked = 0;
    for v in variants {
        disassemble(&v.image, v.entry).map_err(|e| format!("variant does not disassemble: {e}"))?;
        for &k in &keys {
            let want = run_concrete(original, entry, &[k], &Abi::Stack, &limits).map(|r| r.eax);
            let got = run_concrete(&v.image, v.entry, &[k], &Abi::Stack, &limits).map(|r| r.eax);
            match (want, got) {
                (Ok(a), Ok(b)) if a == b => checked += 1,
                (a, b) => {
                    return Err(format!(
                        "{} instructions, key {k:#x}: original {a:?}, variant {b:?}",
                        v.instruction_count
                    ))
                }
            }
        }
    }
    Ok(checked)
}
