//! Reading `(get-model)` output.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelParseError {
    #[error("unbalanced parentheses in solver output")]
    Unbalanced,
    #[error("unterminated string literal in solver output")]
    UnterminatedString,
    #[error("bad bit-vector literal `{0}`")]
    BadLiteral(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

impl Sexp {
    fn atom(&self) -> Option<&str> {
        match self {
            Sexp::Atom(a) => Some(a),
            Sexp::List(_) => None,
        }
    }
}

/// Parses every top-level s-expression in `text`.
pub(crate) fn parse_sexps(text: &str) -> Result<Vec<Sexp>, ModelParseError> {
    let mut stack: Vec<Vec<Sexp>> = vec![Vec::new()];
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '(' => stack.push(Vec::new()),
            ')' => {
                let done = stack.pop().ok_or(ModelParseError::Unbalanced)?;
                stack
                    .last_mut()
                    .ok_or(ModelParseError::Unbalanced)?
                    .push(Sexp::List(done));
            }
            ';' => {
                for c in chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            }
            '"' => {
                let mut s = String::from('"');
                loop {
                    match chars.next() {
                        Some('"') if chars.peek() == Some(&'"') => {
                            chars.next();
                            s.push_str("\"\"");
                        }
                        Some('"') => break,
                        Some(c) => s.push(c),
                        None => return Err(ModelParseError::UnterminatedString),
                    }
                }
                s.push('"');
                stack.last_mut().unwrap().push(Sexp::Atom(s));
            }
            c if c.is_whitespace() => {}
            c => {
                let mut s = String::from(c);
                while let Some(&n) = chars.peek() {
                    if n.is_whitespace() || n == '(' || n == ')' || n == ';' || n == '"' {
                        break;
                    }
                    s.push(n);
                    chars.next();
                }
                if s.starts_with('|') && s.ends_with('|') && s.len() >= 2 {
                    s = s[1..s.len() - 1].to_string();
                }
                stack.last_mut().unwrap().push(Sexp::Atom(s));
            }
        }
    }
    if stack.len() != 1 {
        return Err(ModelParseError::Unbalanced);
    }
    Ok(stack.pop().unwrap())
}

fn literal(value: &Sexp) -> Result<Option<u32>, ModelParseError> {
    let bad = |s: &str| ModelParseError::BadLiteral(s.to_string());
    match value {
        Sexp::Atom(a) => {
            let parsed = if let Some(hex) = a.strip_prefix("#x") {
                u64::from_str_radix(hex, 16)
            } else if let Some(bin) = a.strip_prefix("#b") {
                u64::from_str_radix(bin, 2)
            } else {
                return Ok(None);
            };
            let v = parsed.map_err(|_| bad(a))?;
            u32::try_from(v).map(Some).map_err(|_| bad(a))
        }
        Sexp::List(items) => match items.as_slice() {
            [Sexp::Atom(u), Sexp::Atom(bv), Sexp::Atom(_)] if u == "_" && bv.starts_with("bv") => {
                let v: u64 = bv[2..].parse().map_err(|_| bad(bv))?;
                u32::try_from(v).map(Some).map_err(|_| bad(bv))
            }
            _ => Ok(None),
        },
    }
}

fn collect(sexp: &Sexp, out: &mut BTreeMap<String, u32>) -> Result<(), ModelParseError> {
    let Sexp::List(items) = sexp else {
        return Ok(());
    };
    if let [head, name, Sexp::List(params), sort, value] = items.as_slice() {
        if head.atom() == Some("define-fun") && params.is_empty() {
            let is_bv = matches!(sort, Sexp::List(s) if s.len() == 3
                && s[0].atom() == Some("_") && s[1].atom() == Some("BitVec"));
            if let (true, Some(name)) = (is_bv, name.atom()) {
                if let Some(v) = literal(value)? {
                    out.insert(name.to_string(), v);
                }
            }
            return Ok(());
        }
    }
    for item in items {
        collect(item, out)?;
    }
    Ok(())
}

/// Every bit-vector constant defined in a model; other entries are skipped.
pub fn parse_model(solver_output: &str) -> Result<BTreeMap<String, u32>, ModelParseError> {
    let mut out = BTreeMap::new();
    for sexp in parse_sexps(solver_output)? {
        collect(&sexp, &mut out)?;
    }
    Ok(out)
}
