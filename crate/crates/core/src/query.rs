//! Reverse-engineering goals: "find inputs such that REG op VALUE after the
//! function returns".
//!
//! The JSON form is
//! `{"input": ["KEY"], "register": "EAX", "operation": "==", "value": "0"}`.
//! `value` may be decimal or `0x` hex, as a string or a number. An optional
//! `"signed": true` makes `<` and `>` signed comparisons.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::il::IlReg;
use crate::smt::{output_name, CmpOp, Sort, TermId, TermStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    Eq,
    Ne,
    Lt,
    Gt,
}

impl Operation {
    pub const ALL: [Operation; 4] = [Operation::Eq, Operation::Ne, Operation::Lt, Operation::Gt];

    pub fn token(self) -> &'static str {
        match self {
            Operation::Eq => "==",
            Operation::Ne => "!=",
            Operation::Lt => "<",
            Operation::Gt => ">",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.token() == s)
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReQuery {
    pub input: Vec<String>,
    pub register: IlReg,
    pub operation: Operation,
    pub value: u32,
    pub signed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryParseError {
    #[error("query is not valid JSON: {0}")]
    Json(String),
    #[error("query must be a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has the wrong type, expected {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("unknown operation `{0}` (expected ==, !=, < or >)")]
    UnknownOperation(String),
    #[error("value `{0}` is not a 32-bit unsigned integer")]
    BadValue(String),
    #[error("invalid input name `{0}`")]
    BadInputName(String),
    #[error("input name `{0}` listed twice")]
    DuplicateInput(String),
}

/// Input names become solver symbols, so they must be plain identifiers.
pub fn is_valid_input_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_value(text: &str) -> Result<u32, QueryParseError> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => t.parse::<u32>(),
    };
    parsed.map_err(|_| QueryParseError::BadValue(text.to_string()))
}

pub fn parse_query(json_text: &str) -> Result<ReQuery, QueryParseError> {
    let root: Value =
        serde_json::from_str(json_text).map_err(|e| QueryParseError::Json(e.to_string()))?;
    let obj = root.as_object().ok_or(QueryParseError::NotAnObject)?;
    let field = |name: &'static str| obj.get(name).ok_or(QueryParseError::MissingField(name));

    let inputs = field("input")?
        .as_array()
        .ok_or(QueryParseError::WrongType {
            field: "input",
            expected: "array of strings",
        })?;
    let mut input = Vec::with_capacity(inputs.len());
    for v in inputs {
        let name = v.as_str().ok_or(QueryParseError::WrongType {
            field: "input",
            expected: "array of strings",
        })?;
        if !is_valid_input_name(name) {
            return Err(QueryParseError::BadInputName(name.to_string()));
        }
        if input.iter().any(|n| n == name) {
            return Err(QueryParseError::DuplicateInput(name.to_string()));
        }
        input.push(name.to_string());
    }

    let reg_name = field("register")?.as_str().ok_or(QueryParseError::WrongType {
        field: "register",
        expected: "string",
    })?;
    let register = IlReg::from_short_name(reg_name)
        .filter(|r| IlReg::GPRS.contains(r))
        .ok_or_else(|| QueryParseError::UnknownRegister(reg_name.to_string()))?;

    let op_token = field("operation")?.as_str().ok_or(QueryParseError::WrongType {
        field: "operation",
        expected: "string",
    })?;
    let operation = Operation::from_token(op_token.trim())
        .ok_or_else(|| QueryParseError::UnknownOperation(op_token.to_string()))?;

    let value = match field("value")? {
        Value::String(s) => parse_value(s)?,
        Value::Number(n) => n
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| QueryParseError::BadValue(n.to_string()))?,
        _ => {
            return Err(QueryParseError::WrongType {
                field: "value",
                expected: "string or number",
            })
        }
    };

    let signed = match obj.get("signed") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            return Err(QueryParseError::WrongType {
                field: "signed",
                expected: "boolean",
            })
        }
    };

    Ok(ReQuery {
        input,
        register,
        operation,
        value,
        signed,
    })
}

/// Inverse of [`parse_query`].
pub fn render_query(q: &ReQuery) -> String {
    let mut obj = Map::new();
    obj.insert("input".into(), json!(q.input));
    obj.insert("register".into(), json!(q.register.short_name()));
    obj.insert("operation".into(), json!(q.operation.token()));
    obj.insert("value".into(), json!(q.value.to_string()));
    if q.signed {
        obj.insert("signed".into(), json!(true));
    }
    serde_json::to_string_pretty(&Value::Object(obj)).expect("query serialises")
}

impl ReQuery {
    pub fn new(input: &[&str], register: IlReg, operation: Operation, value: u32) -> Self {
        Self {
            input: input.iter().map(|s| s.to_string()).collect(),
            register,
            operation,
            value,
            signed: false,
        }
    }

    /// Evaluates the goal against a concrete register value.
    pub fn holds(&self, observed: u32) -> bool {
        match self.operation {
            Operation::Eq => observed == self.value,
            Operation::Ne => observed != self.value,
            Operation::Lt if self.signed => (observed as i32) < (self.value as i32),
            Operation::Gt if self.signed => (observed as i32) > (self.value as i32),
            Operation::Lt => observed < self.value,
            Operation::Gt => observed > self.value,
        }
    }
}

/// The goal as a 1-bit term over the output variables. A register missing
/// from `outputs` gets its `<REG>_output` variable created here.
pub fn goal_term(store: &mut TermStore, query: &ReQuery, outputs: &BTreeMap<IlReg, TermId>) -> TermId {
    let out = match outputs.get(&query.register) {
        Some(&t) => t,
        None => store.var(&output_name(query.register), Sort::Bv(32)),
    };
    let value = store.constant(32, query.value);
    let lt = if query.signed { CmpOp::Slt } else { CmpOp::Ult };
    match query.operation {
        Operation::Eq => store.eq(out, value),
        Operation::Ne => {
            let eq = store.eq(out, value);
            store.not(eq)
        }
        Operation::Lt => store.cmp(lt, out, value),
        Operation::Gt => store.cmp(lt, value, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smt::{render_bool, Value};
    use proptest::prelude::*;

    #[test]
    fn appendix_example() {
        let q = parse_query(
            r#"{"input": ["KEY"], "register"  : "EAX", "operation": "==", "value": "0"}"#,
        )
        .unwrap();
        assert_eq!(q, ReQuery::new(&["KEY"], IlReg::Eax, Operation::Eq, 0));
    }

    #[test]
    fn empty_inputs_and_hex_values() {
        let q = parse_query(r#"{"input": [], "register": "ebx", "operation": "<", "value": "0x10"}"#)
            .unwrap();
        assert!(q.input.is_empty());
        assert_eq!(q.register, IlReg::Ebx);
        assert_eq!(q.value, 16);
        let q = parse_query(r#"{"input": [], "register": "EAX", "operation": "!=", "value": 7}"#)
            .unwrap();
        assert_eq!(q.value, 7);
    }

    #[test]
    fn rejects() {
        let base = |op: &str, reg: &str, val: &str, input: &str| {
            parse_query(&format!(
                r#"{{"input": {input}, "register": "{reg}", "operation": "{op}", "value": "{val}"}}"#
            ))
        };
        assert_eq!(
            base(">=", "EAX", "0", "[]"),
            Err(QueryParseError::UnknownOperation(">=".into()))
        );
        assert_eq!(
            base("==", "EIP", "0", "[]"),
            Err(QueryParseError::UnknownRegister("EIP".into()))
        );
        assert_eq!(
            base("==", "EAX", "4294967296", "[]"),
            Err(QueryParseError::BadValue("4294967296".into()))
        );
        assert_eq!(
            base("==", "EAX", "0", r#"["a", "a"]"#),
            Err(QueryParseError::DuplicateInput("a".into()))
        );
        assert_eq!(
            base("==", "EAX", "0", r#"["1x"]"#),
            Err(QueryParseError::BadInputName("1x".into()))
        );
        assert_eq!(
            parse_query(r#"{"input": [], "register": "EAX", "operation": "=="}"#),
            Err(QueryParseError::MissingField("value"))
        );
        assert_eq!(parse_query("[]"), Err(QueryParseError::NotAnObject));
        assert!(matches!(parse_query("{"), Err(QueryParseError::Json(_))));
    }

    #[test]
    fn concrete_goal() {
        let mut q = ReQuery::new(&[], IlReg::Eax, Operation::Lt, 5);
        assert!(q.holds(4));
        assert!(!q.holds(0xFFFF_FFFF));
        q.signed = true;
        assert!(q.holds(0xFFFF_FFFF));
        q.operation = Operation::Gt;
        assert!(!q.holds(0xFFFF_FFFF));
    }

    #[test]
    fn goal_terms() {
        let mut s = TermStore::new();
        let outputs = BTreeMap::new();
        let q = ReQuery::new(&["KEY"], IlReg::Eax, Operation::Eq, 0);
        let g = goal_term(&mut s, &q, &outputs);
        assert_eq!(render_bool(&s, g), "(= EAX_output #x00000000)");
        let q = ReQuery::new(&[], IlReg::Eax, Operation::Ne, 0);
        let g = goal_term(&mut s, &q, &outputs);
        assert_eq!(render_bool(&s, g), "(not (= EAX_output #x00000000))");
        let mut q = ReQuery::new(&[], IlReg::Ecx, Operation::Gt, 7);
        let g = goal_term(&mut s, &q, &outputs);
        assert_eq!(render_bool(&s, g), "(bvult #x00000007 ECX_output)");
        q.signed = true;
        let g = goal_term(&mut s, &q, &outputs);
        assert_eq!(render_bool(&s, g), "(bvslt #x00000007 ECX_output)");
    }

    proptest! {
        /// The symbolic goal and the concrete predicate agree.
        #[test]
        fn goal_term_matches_holds(r in 0usize..8, o in 0usize..4, value: u32, observed: u32, signed: bool) {
            let mut q = ReQuery::new(&[], IlReg::GPRS[r], Operation::ALL[o], value);
            q.signed = signed;
            let mut s = TermStore::new();
            let g = goal_term(&mut s, &q, &BTreeMap::new());
            prop_assert_eq!(s.width(g), 1);
            let name = output_name(q.register);
            let env = |n: &str| (n == name).then_some(Value::Bv(observed));
            prop_assert_eq!(s.eval(g, &env).unwrap(), Value::Bv(u32::from(q.holds(observed))));
        }
    }

    fn arb_query() -> impl Strategy<Value = ReQuery> {
        (
            proptest::collection::hash_set("[A-Za-z_][A-Za-z0-9_]{0,8}", 0..4),
            0usize..8,
            0usize..4,
            any::<u32>(),
            any::<bool>(),
        )
            .prop_map(|(names, r, o, value, signed)| ReQuery {
                input: names.into_iter().collect(),
                register: IlReg::GPRS[r],
                operation: Operation::ALL[o],
                value,
                signed,
            })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(q in arb_query()) {
            prop_assert_eq!(parse_query(&render_query(&q)).unwrap(), q);
        }
    }
}
