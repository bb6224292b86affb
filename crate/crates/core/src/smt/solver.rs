//! External solver process in batch mode: script file in, verdict and
//! model out.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use log::debug;
use thiserror::Error;

use super::model::{parse_model, ModelParseError};

pub const SOLVER_ENV: &str = "RESMT_SOLVER_CMD";
pub const DEFAULT_SOLVER: &str = "z3 {file}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Sat,
    Unsat,
    Unknown,
    Timeout,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Sat => "SAT",
            Verdict::Unsat => "UNSAT",
            Verdict::Unknown => "UNKNOWN",
            Verdict::Timeout => "TIMEOUT",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub verdict: Verdict,
    /// Present iff the verdict is SAT.
    pub model: Option<BTreeMap<String, u32>>,
    pub solver_time: f64,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver command `{0}` could not be started")]
    SolverNotFound(String),
    #[error("solver protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelParseError),
    #[error("I/O error talking to the solver: {0}")]
    Io(#[from] std::io::Error),
}

/// Command template plus time budget. `{file}` in the template is replaced
/// by the script path; without it the path is appended.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub command: String,
    pub timeout: Duration,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            command: std::env::var(SOLVER_ENV).unwrap_or_else(|_| DEFAULT_SOLVER.to_string()),
            timeout: Duration::from_secs(60),
        }
    }
}

impl SolverConfig {
    fn argv(&self, file: &Path) -> Vec<String> {
        let path = file.to_string_lossy();
        let mut argv: Vec<String> = self
            .command
            .split_whitespace()
            .map(|tok| tok.replace("{file}", &path))
            .collect();
        if !self.command.contains("{file}") {
            argv.push(path.into_owned());
        }
        argv
    }
}

/// Runs the solver on `script`.
pub fn solve(script: &str, config: &SolverConfig) -> Result<SolveResult, SolverError> {
    let dir = tempfile::tempdir()?;
    let script_path = dir.path().join("query.smt2");
    File::create(&script_path)?.write_all(script.as_bytes())?;
    let out_path = dir.path().join("stdout");
    let argv = config.argv(&script_path);
    let Some((program, args)) = argv.split_first() else {
        return Err(SolverError::SolverNotFound(config.command.clone()));
    };
    debug!("running solver: {}", argv.join(" "));
    let start = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(File::create(&out_path)?)
        .stderr(Stdio::null())
        .spawn()
        .map_err(|_| SolverError::SolverNotFound(config.command.clone()))?;
    let deadline = start + config.timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(SolveResult {
                verdict: Verdict::Timeout,
                model: None,
                solver_time: start.elapsed().as_secs_f64(),
            });
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let solver_time = start.elapsed().as_secs_f64();
    let mut output = String::new();
    File::open(&out_path)?.read_to_string(&mut output)?;
    let first = output.split_whitespace().next().unwrap_or("");
    let verdict = match first {
        "sat" => Verdict::Sat,
        "unsat" => Verdict::Unsat,
        "unknown" => Verdict::Unknown,
        // some solvers print `timeout` when their own limit fires
        "timeout" => Verdict::Timeout,
        _ => {
            let snippet: String = output.chars().take(200).collect();
            return Err(SolverError::Protocol(format!(
                "no verdict (exit status {status}): {snippet}"
            )));
        }
    };
    let model = if verdict == Verdict::Sat {
        let rest = output.trim_start().strip_prefix("sat").unwrap_or("");
        Some(parse_model(rest)?)
    } else {
        None
    };
    Ok(SolveResult {
        verdict,
        model,
        solver_time,
    })
}
