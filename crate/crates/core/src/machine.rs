//! Conventions shared by the symbolic and the concrete executor: calling
//! convention, initial stack layout and exploration limits.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::il::IlReg;

/// Initial value of ESP. Far away from any realistic function image.
pub const STACK_BASE: u32 = 0x7FFF_0000;

/// Return address planted at `[ESP]`; reaching it ends a path.
pub const RETURN_SENTINEL: u32 = 0xDEAD_BEE0;

/// How query inputs reach the function.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Abi {
    /// The i-th input lives at `[ESP + 4 + 4*i]` on entry (cdecl/stdcall).
    #[default]
    Stack,
    /// The i-th input is the initial value of the i-th listed register.
    Registers(Vec<IlReg>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbiError {
    #[error("{inputs} inputs but only {registers} argument registers")]
    TooManyArgs { inputs: usize, registers: usize },
    #[error("bad ABI `{0}`: expected `stack` or `regs:<r1,r2,...>`")]
    Malformed(String),
}

impl Abi {
    /// Checks that `inputs` argument values can be passed.
    pub fn check_arity(&self, inputs: usize) -> Result<(), AbiError> {
        match self {
            Abi::Registers(regs) if regs.len() < inputs => Err(AbiError::TooManyArgs {
                inputs,
                registers: regs.len(),
            }),
            _ => Ok(()),
        }
    }

    /// Memory cells written before execution starts: the return sentinel and,
    /// for the stack convention, one 32-bit slot per argument.
    pub fn stack_slots(&self, inputs: usize) -> Vec<u32> {
        let mut slots = vec![STACK_BASE];
        if *self == Abi::Stack {
            slots.extend((0..inputs as u32).map(|i| STACK_BASE + 4 + 4 * i));
        }
        slots
    }
}

impl FromStr for Abi {
    type Err = AbiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("stack") {
            return Ok(Abi::Stack);
        }
        let list = s
            .strip_prefix("regs:")
            .ok_or_else(|| AbiError::Malformed(s.to_string()))?;
        let mut regs = Vec::new();
        for name in list.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match IlReg::from_short_name(name) {
                Some(r) if !r.is_flag() && r != IlReg::Eip && r != IlReg::Esp => regs.push(r),
                _ => return Err(AbiError::Malformed(s.to_string())),
            }
        }
        if regs.is_empty() {
            return Err(AbiError::Malformed(s.to_string()));
        }
        Ok(Abi::Registers(regs))
    }
}

impl fmt::Display for Abi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Abi::Stack => f.write_str("stack"),
            Abi::Registers(regs) => {
                let names: Vec<_> = regs.iter().map(|r| r.short_name().to_lowercase()).collect();
                write!(f, "regs:{}", names.join(","))
            }
        }
    }
}

/// Bounds on exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecLimits {
    /// IL instructions per path.
    pub max_steps: u64,
    pub max_paths: usize,
    /// Ask the solver whether each side of a symbolic branch is feasible.
    pub fork_feasibility_check: bool,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            max_steps: 100_000,
            max_paths: 64,
            fork_feasibility_check: false,
        }
    }
}
