//! Solver-side representation: terms, formulas, SMT-LIB2 text and the
//! external solver process.

mod emit;
mod model;
mod solver;
mod term;

pub use emit::{emit_smtlib, render_bool, render_literal, render_sort, render_term};
pub use model::{parse_model, ModelParseError};
pub use solver::{
    solve, SolveResult, SolverConfig, SolverError, Verdict, DEFAULT_SOLVER, SOLVER_ENV,
};
pub use term::{ArrayValue, BvOp, CmpOp, EvalError, Sort, TermId, TermKind, TermStore, Value};

use std::collections::{BTreeMap, HashSet};

use crate::il::IlReg;

pub const LOGIC: &str = "QF_ABV";

/// Declarations plus assertions for one path, with the goal kept apart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub declarations: Vec<(String, Sort)>,
    /// 1-bit terms, each asserted to hold.
    pub assertions: Vec<TermId>,
    pub goal: TermId,
    pub logic: &'static str,
}

impl Formula {
    /// Declares every variable reachable from the assertions and goal, in
    /// order of first appearance, preceded by `extra` (e.g. inputs that
    /// should appear in the model even when unused).
    pub fn new(store: &TermStore, assertions: Vec<TermId>, goal: TermId, extra: &[TermId]) -> Self {
        let mut roots: Vec<TermId> = extra.to_vec();
        roots.extend(assertions.iter().copied());
        roots.push(goal);
        let mut seen = HashSet::new();
        let declarations = store
            .free_vars(&roots)
            .into_iter()
            .filter_map(|v| {
                let name = store.var_name(v)?.to_string();
                seen.insert(name.clone()).then(|| (name, store.sort(v)))
            })
            .collect();
        Self {
            declarations,
            assertions,
            goal,
            logic: LOGIC,
        }
    }

    pub fn assertion_count(&self) -> usize {
        self.assertions.len() + 1
    }

    /// Checks every assertion and the goal under `model`. Array variables
    /// missing from the model are reconstructed from their defining
    /// equations; unconstrained arrays default to all-zero bytes.
    pub fn holds_under(
        &self,
        store: &TermStore,
        model: &BTreeMap<String, u32>,
    ) -> Result<bool, EvalError> {
        let mut arrays: BTreeMap<String, ArrayValue> = BTreeMap::new();
        for &a in self.assertions.iter().chain(std::iter::once(&self.goal)) {
            if let TermKind::Cmp {
                op: CmpOp::Eq,
                a: lhs,
                b: rhs,
            } = *store.kind(a)
            {
                if store.sort(lhs) == Sort::Mem {
                    let (var, def) = match (store.var_name(lhs), store.var_name(rhs)) {
                        (Some(n), _) if !arrays.contains_key(n) => (n, rhs),
                        (_, Some(n)) if !arrays.contains_key(n) => (n, lhs),
                        _ => continue,
                    };
                    let value = store.eval(def, &env_for(model, &arrays))?;
                    if let Value::Array(v) = value {
                        arrays.insert(var.to_string(), v);
                    }
                    continue;
                }
            }
            let env = env_for(model, &arrays);
            if store.eval(a, &env)? != Value::Bv(1) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn env_for<'a>(
    model: &'a BTreeMap<String, u32>,
    arrays: &'a BTreeMap<String, ArrayValue>,
) -> impl Fn(&str) -> Option<Value> + 'a {
    move |name| {
        model
            .get(name)
            .map(|v| Value::Bv(*v))
            .or_else(|| arrays.get(name).map(|a| Value::Array(a.clone())))
    }
}

/// Output variable name for a register, e.g. `EAX_output`.
pub fn output_name(reg: IlReg) -> String {
    format!("{}_output", reg.short_name())
}

/// Declares `<REG>_output` for each general purpose register and equates it
/// with the register's final term. Returns the equations and the output
/// variables.
pub fn bind_outputs(
    store: &mut TermStore,
    final_regs: &[(IlReg, TermId)],
) -> (Vec<TermId>, BTreeMap<IlReg, TermId>) {
    let mut eqs = Vec::new();
    let mut outputs = BTreeMap::new();
    for &(reg, value) in final_regs {
        if !IlReg::GPRS.contains(&reg) {
            continue;
        }
        let out = store.var(&output_name(reg), Sort::Bv(32));
        eqs.push(store.eq(out, value));
        outputs.insert(reg, out);
    }
    (eqs, outputs)
}
