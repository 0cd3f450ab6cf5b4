//! Configuration-driven experiment runner behind the `varhom` binary.
//!
//! `varhom [COMMAND] --config PATH [--jobs N] [--out DIR] [--seed-offset K]`
//! runs one study and writes its CSVs, model files and `summary.txt` to the
//! output directory. Exit code 0 means every check passed, 2 means some
//! property check failed and 1 is an operational error (bad config, I/O,
//! solver breakdown).

pub mod config;
mod commands;

use crate::fields::{EnsembleKind, EnsembleSpec, MixingClass, Phase};
use crate::homogenize::Ensemble;
use crate::solver::NewtonParams;
use crate::subadd::SolverParams;
use crate::varrep::TableSpec;
use anyhow::{bail, Context as _};
use clap::Parser;
pub use config::{Config, ConfigError};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const COMMANDS: [&str; 6] = ["represent", "homogenize", "dirichlet-error", "lipschitz", "mixing-probe", "check"];

#[derive(Parser, Debug)]
#[command(name = "varhom", version, about = "Variational homogenization experiments")]
struct Args {
    /// Study to run; overrides `command` in the config.
    command: Option<String>,
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Added to every sample seed.
    #[arg(long, value_name = "K")]
    seed_offset: Option<u64>,
}

/// The config section owned by a command.
fn section_of(command: &str) -> &'static str {
    match command {
        "represent" => "represent",
        "homogenize" => "homogenize",
        "dirichlet-error" => "dirichlet",
        "lipschitz" => "lipschitz",
        "mixing-probe" => "mixing",
        _ => "check",
    }
}

/// Settings shared by all commands.
#[derive(Clone, Debug)]
pub struct Context {
    pub out: PathBuf,
    pub seed_offset: u64,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(args) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(args: Args) -> anyhow::Result<bool> {
    let cfg = Config::read(&args.config)?;
    let from_cfg = cfg.get::<String>("command")?;
    let command = args.command.or(from_cfg).ok_or(ConfigError::Missing("command".into()))?;
    if !COMMANDS.contains(&command.as_str()) {
        bail!("unknown command `{command}` (expected one of {})", COMMANDS.join(", "));
    }
    let out_cfg = cfg.get::<PathBuf>("out")?;
    let offset_cfg = cfg.get::<u64>("seed_offset")?;
    let jobs_cfg = cfg.get::<usize>("jobs")?;
    let ctx = Context {
        out: args.out.or(out_cfg).unwrap_or_else(|| PathBuf::from("out")),
        seed_offset: args.seed_offset.or(offset_cfg).unwrap_or(0),
    };
    let jobs = args.jobs.or(jobs_cfg).unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if jobs == 0 {
        bail!("--jobs must be positive");
    }
    let study = commands::prepare(&command, &cfg)?;
    // shared sections are validated whatever the command
    ensemble_name(&cfg)?;
    ensemble_spec(&cfg)?;
    table_spec(&cfg)?;
    solver_params(&cfg)?;
    let own = section_of(&command);
    let skip: Vec<&str> = COMMANDS.iter().map(|c| section_of(c)).filter(|s| *s != own).collect();
    cfg.finish_except(&skip)?;
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("cannot create {}", ctx.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let summary = pool.install(|| study.run(&ctx))?;
    summary.write(&ctx.out)?;
    print!("{}", summary.text());
    Ok(summary.passed())
}

/// The pass/fail record of one run; every threshold is printed next to the value.
#[derive(Debug, Default)]
pub struct Summary {
    command: String,
    lines: Vec<String>,
    failures: usize,
}

impl Summary {
    pub fn new(command: &str) -> Self {
        Summary { command: command.to_string(), ..Default::default() }
    }

    /// `value <= threshold`.
    pub fn at_most(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.check(name, value, "<=", threshold, value <= threshold)
    }

    /// `value >= threshold`.
    pub fn at_least(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.check(name, value, ">=", threshold, value >= threshold)
    }

    /// `value < threshold`.
    pub fn below(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.check(name, value, "<", threshold, value < threshold)
    }

    pub fn above(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.check(name, value, ">", threshold, value > threshold)
    }

    fn check(&mut self, name: &str, value: f64, op: &str, threshold: f64, ok: bool) -> bool {
        self.lines.push(format!("{} {name}: {} {op} {}", if ok { "PASS" } else { "FAIL" }, num(value), num(threshold)));
        if !ok {
            self.failures += 1;
        }
        ok
    }

    /// A boolean property without a numeric threshold.
    pub fn holds(&mut self, name: &str, ok: bool) -> bool {
        self.lines.push(format!("{} {name}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failures += 1;
        }
        ok
    }

    pub fn note(&mut self, name: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("info {name}: {value}"));
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn text(&self) -> String {
        let mut s = format!("command: {}\n", self.command);
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        let _ = writeln!(s, "result: {} ({} failed)", if self.passed() { "PASS" } else { "FAIL" }, self.failures);
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("summary.txt"), self.text())
    }
}

fn num(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e9 {
        format!("{x}")
    } else {
        format!("{x:.6e}")
    }
}

/// `c` or `c:b` for the law `a(p) = (c + b / (1 + |p|)) p`.
fn parse_phase(s: &str) -> Option<Phase> {
    match s.split_once(':') {
        Some((c, b)) => Some(Phase { c: c.trim().parse().ok()?, b: b.trim().parse().ok()? }),
        None => Some(Phase::linear(s.trim().parse().ok()?)),
    }
}

/// The `[ensemble]` section.
pub fn ensemble_spec(cfg: &Config) -> Result<EnsembleSpec, ConfigError> {
    let kind = cfg.str_or("ensemble.kind", "checkerboard");
    let lambda = cfg.positive("ensemble.lambda", 4.0)?;
    let k0: f64 = cfg.or("ensemble.k0", 0.0)?;
    let seed: u64 = cfg.or("ensemble.seed", 0)?;
    let invalid = |key: &str, msg: String| cfg.reject(key, msg);
    let spec = match kind.as_str() {
        "checkerboard" => {
            let raw = cfg.list_or::<String>("ensemble.phases", vec!["1".into(), "4".into()])?;
            let phases = raw
                .iter()
                .map(|s| parse_phase(s).ok_or_else(|| invalid("ensemble.phases", format!("bad phase `{s}`, expected c or c:b"))))
                .collect::<Result<Vec<_>, _>>()?;
            let n = phases.len();
            let weights = cfg.list_or("ensemble.weights", vec![1.0 / n.max(1) as f64; n])?;
            EnsembleSpec { kind: EnsembleKind::Checkerboard { phases, weights }, range: 1, lambda, k0, seed, mixing: MixingClass::FiniteRange }
        }
        "moving-average" => {
            let kernel_exponent = cfg.positive("ensemble.kernel_exponent", 2.0)?;
            let range = cfg.positive_count("ensemble.range", 5)?;
            let c_min = cfg.positive("ensemble.c_min", 1.0)?;
            let c_max = cfg.positive("ensemble.c_max", 4.0)?;
            let b: f64 = cfg.or("ensemble.b", 0.0)?;
            let levels = cfg.positive_count("ensemble.levels", 16)?;
            EnsembleSpec {
                kind: EnsembleKind::MovingAverage { kernel_exponent, c_min, c_max, b, levels },
                range,
                lambda,
                k0,
                seed,
                mixing: MixingClass::Algebraic { beta: kernel_exponent },
            }
        }
        other => return Err(invalid("ensemble.kind", format!("unknown kind `{other}` (checkerboard or moving-average)"))),
    };
    spec.validate().map_err(|e| invalid("ensemble", e.to_string()))?;
    Ok(spec)
}

pub fn ensemble_name(cfg: &Config) -> Result<String, ConfigError> {
    let name = cfg.str_or("ensemble.name", "ensemble");
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(cfg.reject("ensemble.name", "use letters, digits, `_` and `-` only"));
    }
    Ok(name)
}

/// The `[table]` section: grid of the tabulated nonlinear phase integrands.
pub fn table_spec(cfg: &Config) -> Result<TableSpec, ConfigError> {
    let bound = cfg.positive("table.bound", 2.0)?;
    let points = cfg.positive_count("table.points", 5)?;
    if points < 3 {
        return Err(cfg.reject("table.points", "need at least 3 points"));
    }
    Ok(TableSpec { bound, points })
}

/// The `[solver]` section.
pub fn solver_params(cfg: &Config) -> Result<SolverParams, ConfigError> {
    let d = SolverParams::default();
    Ok(SolverParams {
        r_cell: cfg.positive_count("solver.r_cell", d.r_cell)?,
        newton: NewtonParams {
            gap_tol: cfg.positive("solver.gap_tol", d.newton.gap_tol)?,
            max_newton: cfg.positive_count("solver.max_newton", d.newton.max_newton)?,
            max_cg: cfg.positive_count("solver.max_cg", d.newton.max_cg)?,
        },
    })
}

pub fn build_ensemble(name: &str, spec: EnsembleSpec, table: TableSpec) -> anyhow::Result<Ensemble> {
    Ensemble::new(name, spec, table).context("building the phase integrands")
}
