//! Command-line front end: load → explore → solve, plus the `oracle` and
//! `obfuscate` subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::{debug, warn};
use serde::Serialize;
use thiserror::Error;

use crate::emu::{brute_force, run_concrete, EmuError};
use crate::il::format_il;
use crate::lifter::lift;
use crate::loader::{load, FunctionImage, LoadError};
use crate::machine::{Abi, ExecLimits};
use crate::obfuscator::{disassemble, obfuscate, ObfConfig, ObfuscationError, Technique};
use crate::query::{parse_query, QueryParseError, ReQuery};
use crate::smt::{emit_smtlib, solve, SolverConfig, SolverError, Verdict};
use crate::symex::{Explorer, PathStatus, SymexError};

pub const EXIT_SAT: i32 = 0;
pub const EXIT_UNSAT: i32 = 1;
pub const EXIT_UNDECIDED: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{path}: {source}")]
    Query {
        path: PathBuf,
        #[source]
        source: QueryParseError,
    },
    #[error(transparent)]
    Symex(#[from] SymexError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Emu(#[from] EmuError),
    #[error(transparent)]
    Obfuscation(#[from] ObfuscationError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Seconds spent in each phase of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub extraction: f64,
    pub translation_emulation: f64,
    pub solving: f64,
    pub total: f64,
}

/// One explored path as seen by the driver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub id: usize,
    pub status: String,
    pub il_steps: u64,
    /// Assertions in the emitted formula, goal included; 0 if not solved.
    pub assertions: usize,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub verdict: Verdict,
    /// Input name to `0x`-prefixed hex value; present iff SAT.
    pub recovered_inputs: Option<BTreeMap<String, String>>,
    pub paths_explored: usize,
    pub paths_returned: usize,
    pub timings: Timings,
    pub paths: Vec<PathSummary>,
}

impl RunReport {
    /// Recovered value of input `name`.
    pub fn input_value(&self, name: &str) -> Option<u32> {
        let hex = self.recovered_inputs.as_ref()?.get(name)?;
        u32::from_str_radix(hex.trim_start_matches("0x"), 16).ok()
    }

    /// Recovered inputs in query order.
    pub fn input_values(&self, query: &ReQuery) -> Option<Vec<u32>> {
        query.input.iter().map(|n| self.input_value(n)).collect()
    }

    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Verdict::Sat => EXIT_SAT,
            Verdict::Unsat => EXIT_UNSAT,
            Verdict::Unknown | Verdict::Timeout => EXIT_UNDECIDED,
        }
    }

    fn render_text(&self) -> String {
        let mut out = format!("verdict: {}\n", self.verdict);
        for (name, value) in self.recovered_inputs.iter().flatten() {
            let _ = writeln!(out, "{name} = {value}");
        }
        let _ = writeln!(
            out,
            "paths: {} explored, {} returned",
            self.paths_explored, self.paths_returned
        );
        let t = &self.timings;
        let _ = writeln!(
            out,
            "timings (s): extraction {:.6}, translation+emulation {:.6}, solving {:.6}, total {:.6}",
            t.extraction, t.translation_emulation, t.solving, t.total
        );
        out
    }
}

/// Everything [`analyze`] needs besides the function and the goal.
#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub abi: Abi,
    pub limits: ExecLimits,
    pub solver: SolverConfig,
    /// Directory for `path_<id>.smt2` files.
    pub emit_smt: Option<PathBuf>,
    /// Directory for the lifted listing `function.il`.
    pub emit_il: Option<PathBuf>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            abi: Abi::Stack,
            limits: ExecLimits::default(),
            solver: SolverConfig::default(),
            emit_smt: None,
            emit_il: None,
        }
    }
}

/// Statically reachable instructions with their lifted IL.
fn il_listing(image: &FunctionImage, entry: u32) -> String {
    let mut text = String::new();
    match disassemble(image, entry) {
        Ok(code) => {
            for ins in code {
                let _ = writeln!(text, "; {:08x}: {ins}", ins.addr);
                match lift(&ins) {
                    Ok(block) => text.push_str(&format_il(&block.il)),
                    Err(e) => {
                        let _ = writeln!(text, "; {e}");
                    }
                }
            }
        }
        Err(e) => {
            let _ = writeln!(text, "; static disassembly stopped: {e}");
        }
    }
    text
}

/// Explores `image` from `entry` and solves each returned path in order
/// until one is SAT. UNSAT means every path returned and none is SAT.
pub fn analyze(
    image: &FunctionImage,
    entry: u32,
    query: &ReQuery,
    opts: &AnalysisOptions,
) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let listing = il_listing(image, entry);
    if let Some(dir) = &opts.emit_il {
        std::fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
        let path = dir.join("function.il");
        std::fs::write(&path, listing).map_err(io_err(path.display().to_string()))?;
    }
    let extraction = start.elapsed().as_secs_f64();
    let mut explorer = Explorer::new(image, entry, query, &opts.abi, opts.limits)?;
    if opts.limits.fork_feasibility_check {
        explorer = explorer.with_solver(opts.solver.clone());
    }
    if let Some(dir) = &opts.emit_smt {
        std::fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    }
    let mut translation = Duration::ZERO;
    let mut solving = Duration::ZERO;
    let mut summaries = Vec::new();
    let mut all_decided = true;
    let mut saw_timeout = false;
    let mut recovered = None;
    loop {
        let t0 = Instant::now();
        let Some(path) = explorer.next_path() else {
            translation += t0.elapsed();
            break;
        };
        let mut summary = PathSummary {
            id: path.id,
            status: path.status.name().to_string(),
            il_steps: path.il_executed(),
            assertions: 0,
            verdict: None,
        };
        if path.status != PathStatus::Returned {
            translation += t0.elapsed();
            debug!("path {} ended with {}", path.id, path.status.name());
            all_decided = false;
            summaries.push(summary);
            continue;
        }
        let formula = explorer.formula(&path);
        let script = emit_smtlib(explorer.store(), &formula);
        summary.assertions = formula.assertion_count();
        if let Some(dir) = &opts.emit_smt {
            let file = dir.join(format!("path_{}.smt2", path.id));
            std::fs::write(&file, &script).map_err(io_err(file.display().to_string()))?;
        }
        translation += t0.elapsed();
        let t1 = Instant::now();
        let result = solve(&script, &opts.solver)?;
        solving += t1.elapsed();
        summary.verdict = Some(result.verdict);
        summaries.push(summary);
        match result.verdict {
            Verdict::Sat => {
                let model = result.model.unwrap_or_default();
                if !formula.holds_under(explorer.store(), &model).unwrap_or(false) {
                    warn!("model for path {} does not satisfy its own formula", path.id);
                }
                let mut inputs = BTreeMap::new();
                for (name, &var) in query.input.iter().zip(explorer.inputs()) {
                    let var_name = explorer.store().var_name(var).unwrap_or(name.as_str());
                    let value = model.get(var_name).copied().unwrap_or(0);
                    inputs.insert(name.clone(), format!("{value:#010x}"));
                }
                recovered = Some(inputs);
                break;
            }
            Verdict::Unsat => {}
            Verdict::Timeout => {
                saw_timeout = true;
                all_decided = false;
            }
            Verdict::Unknown => all_decided = false,
        }
    }
    let verdict = match (&recovered, all_decided, saw_timeout) {
        (Some(_), _, _) => Verdict::Sat,
        (None, true, _) if summaries.iter().any(|s| s.verdict.is_some()) => Verdict::Unsat,
        (None, _, true) => Verdict::Timeout,
        _ => Verdict::Unknown,
    };
    let paths_returned = summaries
        .iter()
        .filter(|s| s.status == PathStatus::Returned.name())
        .count();
    Ok(RunReport {
        verdict,
        recovered_inputs: recovered,
        paths_explored: summaries.len(),
        paths_returned,
        timings: Timings {
            extraction,
            translation_emulation: translation.as_secs_f64(),
            solving: solving.as_secs_f64(),
            total: start.elapsed().as_secs_f64(),
        },
        paths: summaries,
    })
}

fn parse_number(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| format!("`{s}` is not a decimal or 0x-prefixed number"))
}

fn parse_u32(s: &str) -> Result<u32, String> {
    let v = parse_number(s)?;
    u32::try_from(v).map_err(|_| format!("`{s}` does not fit in 32 bits"))
}

fn parse_timeout(s: &str) -> Result<Duration, String> {
    let secs: f64 = s.parse().map_err(|_| format!("`{s}` is not a number of seconds"))?;
    Duration::try_from_secs_f64(secs).map_err(|_| format!("`{s}` is not a valid timeout"))
}

#[derive(Debug, Parser)]
#[command(
    name = "resmt",
    version,
    about = "Answer reverse-engineering queries about an x86-32 function with an SMT solver",
    args_conflicts_with_subcommands = true,
    subcommand_negates_reqs = true
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    function: FunctionArgs,
    /// JSON file with the goal.
    #[arg(required = true)]
    query: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
    /// Solver command template; `{file}` is replaced by the script path.
    /// Defaults to `$RESMT_SOLVER_CMD`, then `z3 {file}`.
    #[arg(long)]
    solver_cmd: Option<String>,
    /// Seconds per solver invocation.
    #[arg(long, default_value = "60", value_parser = parse_timeout)]
    timeout: Duration,
    /// Ask the solver whether both sides of each symbolic branch are feasible.
    #[arg(long)]
    check_forks: bool,
    /// Write one `path_<id>.smt2` per solved path into this directory.
    #[arg(long, value_name = "DIR")]
    emit_smt: Option<PathBuf>,
    /// Write the lifted IL of the function into this directory.
    #[arg(long, value_name = "DIR")]
    emit_il: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct FunctionArgs {
    /// Flat file holding the function.
    #[arg(required = true)]
    binary: Option<PathBuf>,
    /// File offset of the function (decimal or 0x hex).
    #[arg(required = true, value_parser = parse_number)]
    offset: Option<u64>,
    /// Size of the function in bytes.
    #[arg(required = true, value_parser = parse_number)]
    size: Option<u64>,
    /// Virtual address of the first byte; defaults to the file offset.
    #[arg(long, value_parser = parse_u32)]
    base_addr: Option<u32>,
    /// Entry address; defaults to the first byte.
    #[arg(long, value_parser = parse_u32)]
    entry: Option<u32>,
    /// `stack` or `regs:<reg>,<reg>,...`
    #[arg(long, default_value = "stack")]
    abi: Abi,
}

impl FunctionArgs {
    fn load(&self) -> Result<(FunctionImage, u32), CliError> {
        let (Some(binary), Some(offset), Some(size)) = (&self.binary, self.offset, self.size) else {
            return Err(CliError::Usage("expected <BINARY> <OFFSET> <SIZE>".into()));
        };
        let image = load(binary, offset, size, self.base_addr)?;
        let entry = self.entry.unwrap_or(image.base_addr());
        Ok((image, entry))
    }
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// IL instructions per path.
    #[arg(long, default_value_t = ExecLimits::default().max_steps)]
    max_steps: u64,
    #[arg(long, default_value_t = ExecLimits::default().max_paths)]
    max_paths: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the function concretely, or brute-force a one-input goal.
    Oracle {
        #[command(flatten)]
        function: FunctionArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Comma-separated argument values.
        #[arg(long, value_delimiter = ',', value_parser = parse_u32)]
        args: Vec<u32>,
        /// Goal to brute-force instead of a single run.
        #[arg(long, requires = "key_bits")]
        query: Option<PathBuf>,
        /// Width of the brute-forced key.
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=32))]
        key_bits: Option<u32>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Write an obfuscated copy of the function as a flat binary plus a
    /// `<OUT>.json` sidecar with its entry and size.
    Obfuscate {
        #[command(flatten)]
        function: FunctionArgs,
        /// Output file.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        iterations: u32,
        /// Comma-separated technique names, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        techniques: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        verbose: bool,
    },
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn read_query(path: &FsPath) -> Result<ReQuery, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path.display().to_string()))?;
    parse_query(&text).map_err(|source| CliError::Query {
        path: path.to_path_buf(),
        source,
    })
}

fn limits(exec: &ExecArgs, check_forks: bool) -> ExecLimits {
    ExecLimits {
        max_steps: exec.max_steps,
        max_paths: exec.max_paths,
        fork_feasibility_check: check_forks,
    }
}

/// Parses `args` (program name first), runs the command, prints to
/// `stdout`/`stderr` and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_ERROR
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_SAT
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<i32, CliError> {
    let out_err = io_err("stdout");
    match cli.command {
        Some(Command::Oracle {
            function,
            exec,
            args,
            query,
            key_bits,
            verbose,
        }) => {
            init_logging(verbose);
            let (image, entry) = function.load()?;
            let limits = limits(&exec, false);
            if let (Some(q), Some(bits)) = (query, key_bits) {
                let goal = read_query(&q)?;
                return Ok(match brute_force(&image, entry, &function.abi, &goal, bits, &limits) {
                    Some(key) => {
                        writeln!(stdout, "key = {key:#010x}").map_err(out_err)?;
                        EXIT_SAT
                    }
                    None => {
                        writeln!(stdout, "no key below 2^{bits} satisfies the goal").map_err(out_err)?;
                        EXIT_UNSAT
                    }
                });
            }
            let run = run_concrete(&image, entry, &args, &function.abi, &limits)?;
            writeln!(stdout, "eax = {:#010x} ({} IL steps)", run.eax, run.steps).map_err(out_err)?;
            Ok(EXIT_SAT)
        }
        Some(Command::Obfuscate {
            function,
            out,
            iterations,
            techniques,
            seed,
            verbose,
        }) => {
            init_logging(verbose);
            let (image, entry) = function.load()?;
            let techniques: Vec<Technique> = if techniques.iter().any(|t| t == "all") {
                Technique::ALL.to_vec()
            } else {
                techniques
                    .iter()
                    .map(|t| t.parse())
                    .collect::<Result<_, _>>()?
            };
            let config = ObfConfig::new(iterations, techniques, seed)?;
            let result = obfuscate(&image, entry, &config)?;
            std::fs::write(&out, result.image.bytes()).map_err(io_err(out.display().to_string()))?;
            let sidecar = sidecar_path(&out);
            let meta = serde_json::json!({
                "entry": result.entry,
                "size": result.image.len(),
                "base_addr": result.image.base_addr(),
                "instructions": result.instruction_count,
            });
            std::fs::write(&sidecar, format!("{meta:#}\n"))
                .map_err(io_err(sidecar.display().to_string()))?;
            writeln!(
                stdout,
                "wrote {} bytes ({} instructions), entry {:#010x}",
                result.image.len(),
                result.instruction_count,
                result.entry
            )
            .map_err(out_err)?;
            Ok(EXIT_SAT)
        }
        None => {
            init_logging(cli.verbose);
            let (image, entry) = cli.function.load()?;
            let query_path = cli
                .query
                .ok_or_else(|| CliError::Usage("expected <QUERY>".into()))?;
            let query = read_query(&query_path)?;
            let opts = AnalysisOptions {
                abi: cli.function.abi.clone(),
                limits: limits(&cli.exec, cli.check_forks),
                solver: SolverConfig {
                    command: cli
                        .solver_cmd
                        .unwrap_or_else(|| SolverConfig::default().command),
                    timeout: cli.timeout,
                },
                emit_smt: cli.emit_smt,
                emit_il: cli.emit_il,
            };
            let report = analyze(&image, entry, &query, &opts)?;
            if cli.json {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                writeln!(stdout, "{text}").map_err(out_err)?;
            } else {
                write!(stdout, "{}", report.render_text()).map_err(out_err)?;
            }
            Ok(report.exit_code())
        }
    }
}

/// `<out>.json` next to the output binary.
pub fn sidecar_path(out: &FsPath) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}
