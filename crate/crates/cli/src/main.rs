//! Batch harness for the diracbc library.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage error, 3 any other error.
//! Errors are printed to stderr as a single line `E_CODE: message`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use diracbc::clifford::build_rep;
use diracbc::cylinder_solver::{compute_table, fit_expansion, fmt17, ray_modes, CylinderConfig, CylinderFile, FittedSource, MultiplierTable, SCHEMA_VERSION};
use diracbc::geometry::{BoundaryJet, BoundaryJetFile};
use diracbc::greens::chiral_kernel;
use diracbc::recovery::{recover, recover_n2, scrub_normal_line, NormalData, RecoveredFile, RecoveryOptions, SeriesSource, SeriesSourceFile};
use diracbc::symbol_engine::{series_to_file, SeriesFile};
use diracbc::verify::{run_suite, Check};
use diracbc::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Parser)]
#[command(name = "diracbc", version, about = "Chiral boundary problems for twisted Dirac operators")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an invariant suite and write a JSON report.
    Verify {
        #[arg(long, value_parser = ["clifford", "geometry", "symbols", "solver", "recovery", "greens", "all"])]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward θ-series of the configured boundary jet.
    Symbols {
        #[command(flatten)]
        io: ConfigOut,
        #[arg(long)]
        order: usize,
    },
    /// Numerical multipliers Θ̂(ξ) (and optionally Λ̂(ξ)) along lattice rays, as CSV.
    Solve {
        #[command(flatten)]
        io: ConfigOut,
        /// Multiples t of each ray, e.g. 8..128.
        #[arg(long)]
        modes: String,
        /// Integer ray direction, e.g. 1,2 (repeatable).
        #[arg(long, required = true, allow_hyphen_values = true)]
        ray: Vec<String>,
        #[arg(long)]
        lambda: bool,
    },
    /// Recover normal jets at x₀ from a symbol file or a multiplier table.
    Recover {
        #[command(flatten)]
        io: ConfigOut,
        #[arg(long)]
        order: usize,
        #[arg(long, conflicts_with = "multipliers", required_unless_present = "multipliers")]
        symbols: Option<PathBuf>,
        #[arg(long)]
        multipliers: Option<PathBuf>,
    },
    /// Chiral Green's kernel G(x, y) on a target grid, as CSV.
    Green {
        #[command(flatten)]
        io: ConfigOut,
        /// Source point coordinates x¹,..,xⁿ.
        #[arg(long, allow_hyphen_values = true)]
        source: String,
        /// Grid points per tangential direction, then normal grid intervals.
        #[arg(long, default_value = "8,8")]
        grid: String,
    },
}

#[derive(Args)]
struct ConfigOut {
    /// Run configuration (JSON, or TOML by extension).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// One schema for all commands.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    jet: Option<BoundaryJetFile>,
    #[serde(default)]
    random_jet: Option<RandomJet>,
    #[serde(default)]
    cylinder: Option<CylinderFile>,
    #[serde(default)]
    recovery: RecoverySettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomJet {
    n: usize,
    e_rank: usize,
    order: usize,
    m: f64,
    #[serde(default = "default_scale")]
    scale: f64,
}

fn default_scale() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RecoverySettings {
    samples: usize,
    fit_order: usize,
    prescribed_h: Option<Vec<f64>>,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        RecoverySettings { samples: 16, fit_order: 8, prescribed_h: None }
    }
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            let de = toml::Deserializer::new(&text);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Parse(format!("{}: field '{}': {}", path.display(), e.path(), e.inner().message().trim())))?
        } else {
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse(format!("{}: field '{}': {}", path.display(), e.path(), e.inner())))?
        };
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", cfg.schema_version)));
        }
        Ok(cfg)
    }

    /// Boundary jet of order ≥ `order`: explicit jet, else seeded random jet, else the cylinder's jet.
    fn boundary_jet(&self, order: usize) -> Result<BoundaryJet> {
        if let Some(j) = &self.jet {
            return BoundaryJet::from_file(j);
        }
        if let Some(r) = &self.random_jet {
            return Ok(BoundaryJet::random(r.n, r.e_rank, r.order, r.m, self.seed, r.scale));
        }
        if let Some(c) = &self.cylinder {
            return CylinderConfig::from_file(c)?.to_boundary_jet(order);
        }
        Err(Error::InvalidInput("config needs one of 'jet', 'random_jet' or 'cylinder'".into()))
    }

    fn cylinder(&self) -> Result<CylinderConfig> {
        let c = self.cylinder.as_ref().ok_or_else(|| Error::InvalidInput("config needs a 'cylinder' section".into()))?;
        CylinderConfig::from_file(c)
    }
}

fn check_order(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::InvalidInput(format!("order {order} exceeds the supported maximum {MAX_ORDER}")));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| Error::Parse(format!("{what}: '{x}' is not a number")))).collect()
}

fn parse_ints(s: &str, what: &str) -> Result<Vec<i64>> {
    s.split(',').map(|x| x.trim().parse::<i64>().map_err(|_| Error::Parse(format!("{what}: '{x}' is not an integer")))).collect()
}

#[derive(Serialize)]
struct SymbolsOutput {
    schema_version: u32,
    n: usize,
    e_rank: usize,
    m: f64,
    order: usize,
    /// θ components at x₀ in the default frame.
    theta: SeriesFile,
    /// θ components at x₀ in the parallel-at-x₀ frame.
    theta_parallel: SeriesFile,
    /// Full series with tangential jets, consumed by `recover --symbols`.
    source_default: SeriesSourceFile,
    source_parallel: SeriesSourceFile,
}

#[derive(Deserialize)]
struct SymbolsInput {
    schema_version: u32,
    m: f64,
    order: usize,
    source_default: SeriesSourceFile,
    source_parallel: SeriesSourceFile,
}

#[derive(Serialize)]
struct RecoverOutput {
    schema_version: u32,
    input: String,
    order: usize,
    recovered: RecoveredFile,
    /// Max relative error against the configured jet, when the config has one.
    truth_relative_error: Option<f64>,
}

#[derive(Serialize)]
struct VerifyReport {
    schema_version: u32,
    suite: String,
    seed: u64,
    passed: bool,
    checks: Vec<Check>,
}

fn cmd_verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<bool> {
    let checks = run_suite(suite, seed)?;
    let passed = checks.iter().all(|c| c.passed());
    for c in &checks {
        info!("{:?} {} measured {:e} tolerance {:e}", c.status, c.check, c.measured, c.tolerance);
    }
    let text = to_json(&VerifyReport { schema_version: SCHEMA_VERSION, suite: suite.into(), seed, passed, checks })?;
    match out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(passed)
}

fn cmd_symbols(io: &ConfigOut, order: usize) -> Result<()> {
    check_order(order)?;
    let cfg = RunConfig::load(&io.config)?;
    let jet = cfg.boundary_jet(order.max(2))?;
    let rep = build_rep(jet.n, jet.e_rank)?;
    let default = SeriesSource::forward(&jet, &rep, order.max(1), false)?;
    let parallel = SeriesSource::forward(&jet, &rep, order, true)?;
    let (dd, _, _) = diracbc::symbol_engine::forward(&jet, &rep, 0, false)?;
    let out = SymbolsOutput {
        schema_version: SCHEMA_VERSION,
        n: jet.n,
        e_rank: jet.e_rank,
        m: jet.m,
        order,
        theta: series_to_file("theta", &dd, &default.series),
        theta_parallel: series_to_file("theta_parallel", &dd, &parallel.series),
        source_default: default.to_file(),
        source_parallel: parallel.to_file(),
    };
    info!("θ series down to degree {} written", -(order as i32));
    write(&io.out, &to_json(&out)?)
}

fn cmd_solve(io: &ConfigOut, modes: &str, rays: &[String], with_lambda: bool) -> Result<()> {
    let cfg = RunConfig::load(&io.config)?.cylinder()?;
    let (a, b) = modes.split_once("..").ok_or_else(|| Error::Parse(format!("--modes '{modes}' must look like A..B")))?;
    let a: i64 = a.trim().parse().map_err(|_| Error::Parse(format!("--modes start '{a}'")))?;
    let b: i64 = b.trim().trim_start_matches('=').parse().map_err(|_| Error::Parse(format!("--modes end '{b}'")))?;
    if a > b {
        return Err(Error::InvalidInput("--modes range is empty".into()));
    }
    let rep = build_rep(cfg.n, cfg.e_rank)?;
    let mut all = Vec::new();
    for r in rays {
        let ray = parse_ints(r, "--ray")?;
        if ray.len() != cfg.n - 1 || ray.iter().all(|&x| x == 0) {
            return Err(Error::InvalidInput(format!("--ray needs {} integers, not all zero", cfg.n - 1)));
        }
        all.extend(ray_modes(&ray, a..=b).into_iter().filter(|k| k.iter().any(|&x| x != 0)));
    }
    let table = compute_table(&cfg, &rep, &all, with_lambda)?;
    info!("{} modes, max residual {:e}", table.entries.len(), table.max_residual());
    write(&io.out, &table.to_csv())
}

fn cmd_recover(io: &ConfigOut, order: usize, symbols: Option<&Path>, multipliers: Option<&Path>) -> Result<()> {
    check_order(order)?;
    if order < 1 {
        return Err(Error::InvalidInput("order must be >= 1".into()));
    }
    let cfg = RunConfig::load(&io.config)?;
    let opts = RecoveryOptions { samples: cfg.recovery.samples, prescribed_metric: None, prescribed_h: cfg.recovery.prescribed_h.clone() };
    let (rec, input, truth) = if let Some(path) = symbols {
        let file: SymbolsInput = serde_json::from_str(&read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!("{}: schema_version {} is not supported", path.display(), file.schema_version)));
        }
        if file.order < order {
            return Err(Error::InsufficientOrder { what: "symbol file".into(), needed: order, available: file.order });
        }
        let jet = cfg.boundary_jet(order + 1)?;
        let rep = build_rep(jet.n, jet.e_rank)?;
        let default = SeriesSource::from_file(&file.source_default)?;
        let parallel = SeriesSource::from_file(&file.source_parallel)?;
        if default.ctx.size != rep.size() || default.ctx.n != jet.n {
            return Err(Error::InvalidInput("symbol file does not match the configured dimensions".into()));
        }
        let prior = scrub_normal_line(&jet);
        let rec = if jet.n == 2 { recover_n2(&parallel, &prior, &rep, file.m, order)? } else { recover(&default, &parallel, &prior, &rep, file.m, order, &opts)? };
        (rec, path.display().to_string(), NormalData::from_jet(&jet).ok())
    } else {
        let path = multipliers.ok_or_else(|| Error::InvalidInput("need --symbols or --multipliers".into()))?;
        let cyl = cfg.cylinder()?;
        let rep = build_rep(cyl.n, cyl.e_rank)?;
        let table = MultiplierTable::from_csv(&read(path)?, cyl.n, rep.size(), &cyl.periods)?;
        let mut rays: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
        for k in table.entries.keys() {
            let g = k.iter().fold(0i64, |acc, &x| gcd(acc, x.abs()));
            *rays.entry(k.iter().map(|x| x / g).collect()).or_default() += 1;
        }
        let fit_order = cfg.recovery.fit_order;
        let fits = rays
            .into_iter()
            .filter(|(_, count)| *count >= fit_order + 3)
            .map(|(ray, _)| fit_expansion(&table, &ray.iter().map(|&x| x as f64).collect::<Vec<_>>(), fit_order))
            .collect::<Result<Vec<_>>>()?;
        if fits.is_empty() {
            return Err(Error::IllConditionedFit(format!("no ray has the {} modes needed for a fit of order {fit_order}", fit_order + 3)));
        }
        info!("fitted {} rays", fits.len());
        let src = FittedSource { n: cyl.n, size: rep.size(), fits }.to_parallel_frame(&cyl)?;
        let jet = cyl.to_boundary_jet(order + 1)?;
        let prior = scrub_normal_line(&jet);
        let rec = if cyl.n == 2 { recover_n2(&src, &prior, &rep, cyl.m, order)? } else { recover(&src, &src, &prior, &rep, cyl.m, order, &opts)? };
        (rec, path.display().to_string(), NormalData::from_jet(&jet).ok())
    };
    let out = RecoverOutput {
        schema_version: SCHEMA_VERSION,
        input,
        order,
        truth_relative_error: truth.map(|t| rec.max_relative_error(&t)),
        recovered: rec.to_file(),
    };
    write(&io.out, &to_json(&out)?)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn cmd_green(io: &ConfigOut, source: &str, grid: &str) -> Result<()> {
    let cfg = RunConfig::load(&io.config)?.cylinder()?;
    let n = cfg.n;
    let y = parse_floats(source, "--source")?;
    if y.len() != n {
        return Err(Error::InvalidInput(format!("--source needs {n} coordinates")));
    }
    let counts = parse_ints(grid, "--grid")?;
    if counts.len() != 2 || counts.iter().any(|&c| c < 1) {
        return Err(Error::InvalidInput("--grid needs two positive integers".into()));
    }
    let (nt, nn) = (counts[0] as usize, counts[1] as usize);
    let mut targets: Vec<Vec<f64>> = vec![vec![]];
    for l in &cfg.periods {
        targets = targets.into_iter().flat_map(|p| (0..nt).map(move |j| [p.clone(), vec![l * j as f64 / nt as f64]].concat())).collect();
    }
    targets = targets.into_iter().flat_map(|p| (0..=nn).map(move |i| [p.clone(), vec![cfg.length * i as f64 / nn as f64]].concat())).collect();
    targets.retain(|t| t != &y);
    let rep = build_rep(n, cfg.e_rank)?;
    let ks = chiral_kernel(&cfg, &rep, &y, &targets)?;
    info!("{} modes, tail bound {:e}", ks.modes, ks.tail_bound);
    let s = rep.size();
    let mut head: Vec<String> = (1..=n).map(|i| format!("x_{i}")).chain((1..=n).map(|i| format!("y_{i}"))).collect();
    for r in 0..s {
        for q in 0..s {
            head.push(format!("g_{r}_{q}_re"));
            head.push(format!("g_{r}_{q}_im"));
        }
    }
    let mut text = head.join(",") + "\n";
    for (t, g) in ks.targets.iter().zip(&ks.values) {
        let mut row: Vec<String> = t.iter().chain(&y).map(|v| fmt17(*v)).collect();
        for r in 0..s {
            for q in 0..s {
                row.push(fmt17(g[(r, q)].re));
                row.push(fmt17(g[(r, q)].im));
            }
        }
        text += &(row.join(",") + "\n");
    }
    write(&io.out, &text)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    match &cli.command {
        Command::Verify { suite, seed, out } => {
            let ok = cmd_verify(suite, *seed, out.as_deref())?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Symbols { io, order } => cmd_symbols(io, *order)?,
        Command::Solve { io, modes, ray, lambda } => cmd_solve(io, modes, ray, *lambda)?,
        Command::Recover { io, order, symbols, multipliers } => cmd_recover(io, *order, symbols.as_deref(), multipliers.as_deref())?,
        Command::Green { io, source, grid } => cmd_green(io, source, grid)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIRACBC_LOG", "warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(3)
        }
    }
}
