use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ltbridge::bridge::{
    sample_bridge, sample_randomized_bridge, write_json_lines, BridgeConfig, BridgeOutcome, Target,
};
use ltbridge::engine::{simulate, Record, StopRule};
use ltbridge::io::{write_path_files, BatchSummary};
use ltbridge::rng::par_map;
use ltbridge::scale::{
    classify_boundary, hitting_prob, potential_density, rho, speed_density, terminal_lt_rate, End,
    DEFAULT_TOL,
};
use ltbridge::stats::mean_se;
use ltbridge::transforms::{launch_entrance, EntranceLauncher, TransformedSpec};
use ltbridge::validate::{run_suite, Desk, Suite};
use ltbridge::{
    build_scale, DiffusionSpec, Error, Path, ScaleTable, SimOptions, SpecFile, TransformKind,
};

#[derive(Parser)]
#[command(
    name = "ltbridge",
    version,
    about = "Local-time bridges and path decompositions for transient diffusions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print scale, speed, potential and boundary data on a grid.
    Inspect {
        #[arg(long)]
        spec: PathBuf,
        /// Reference level (defaults to the spec anchor).
        #[arg(long)]
        y: Option<f64>,
        #[arg(long, default_value_t = 11)]
        points: usize,
    },
    /// Simulate the diffusion, or its transform when the spec declares one.
    Simulate(RunArgs),
    /// Sample local-time bridges; fixed level with --a, randomized otherwise.
    Bridge(RunArgs),
    /// Sample the path decomposition up to the horizon.
    Decompose(RunArgs),
    /// Run a validation suite and report pass/fail per check.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LauncherArg {
    Offset,
    Exact,
}

impl From<LauncherArg> for EntranceLauncher {
    fn from(l: LauncherArg) -> Self {
        match l {
            LauncherArg::Offset => EntranceLauncher::offset(),
            LauncherArg::Exact => EntranceLauncher::exact(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Level (bridge, decompose) or start point (simulate); defaults to the anchor.
    #[arg(long)]
    y: Option<f64>,
    /// Fixed local-time level for bridges.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    /// Band half-width; defaults to 5 σ(y) √dt.
    #[arg(long)]
    eps: Option<f64>,
    /// Defaults per model; see the README.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "offset")]
    launcher: LauncherArg,
    /// Also write one CSV per path.
    #[arg(long)]
    paths: bool,
    /// Kill with the Brownian-bridge crossing probability between grid points (simulate).
    #[arg(long)]
    bridge_correction: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "offset")]
    launcher: LauncherArg,
    /// Band half-width in units of σ(y) √dt.
    #[arg(long, default_value_t = 2.0)]
    band: f64,
    /// Directory for report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(Error),
    Statistical,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Inspect { spec, y, points } => inspect(&spec, y, points),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Bridge(args) => cmd_bridge(&args),
        Command::Decompose(args) => cmd_decompose(&args),
        Command::Validate(args) => cmd_validate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Statistical) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &FsPath) -> ltbridge::Result<(SpecFile, DiffusionSpec, ScaleTable)> {
    let file = SpecFile::load(path)?;
    let spec = file.to_spec()?;
    let scale = build_scale(&spec, DEFAULT_TOL)?;
    Ok((file, spec, scale))
}

fn default_horizon(model: &str) -> f64 {
    match model {
        "killed_bm" => 4.0,
        _ => 1.0,
    }
}

fn inspect(path: &FsPath, y: Option<f64>, points: usize) -> CmdResult {
    let (_, spec, scale) = load(path)?;
    let y = y.unwrap_or(spec.anchor);
    scale.check(y)?;
    let mut grid = spec.probe_grid(points.max(2));
    if !grid.contains(&y) {
        grid.push(y);
        grid.sort_by(f64::total_cmp);
    }
    println!(
        "model {}  domain ({}, {})  level y = {y}",
        spec.name, spec.left, spec.right
    );
    println!(
        "{:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "x", "s", "s'", "m", "psi(x,y)", "u(x,y)"
    );
    for x in grid {
        println!(
            "{:>14.6} {:>14.6} {:>14.6e} {:>14.6e} {:>14.6} {:>14.6e}",
            x,
            scale.s(x),
            scale.ds(x),
            speed_density(&spec, &scale, x)?,
            hitting_prob(&scale, x, y)?,
            potential_density(&scale, x, y)?
        );
    }
    println!("rho(y) = {:.6}", rho(&scale, y)?);
    println!("lambda(y) = {:.6}", terminal_lt_rate(&scale, y)?);
    println!(
        "left boundary: {}",
        classify_boundary(&spec, &scale, End::Left, DEFAULT_TOL)?
    );
    println!(
        "right boundary: {}",
        classify_boundary(&spec, &scale, End::Right, DEFAULT_TOL)?
    );
    Ok(())
}

fn check_run(args: &RunArgs) -> ltbridge::Result<()> {
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    for (name, v) in [
        ("--dt", Some(args.dt)),
        ("--eps", args.eps),
        ("--horizon", args.horizon),
    ] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
    }
    if let Some(a) = args.a {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("--a must be non-negative, got {a}")));
        }
    }
    Ok(())
}

fn record(args: &RunArgs) -> Record {
    if args.paths {
        Record::Full
    } else {
        Record::Endpoints
    }
}

fn write_json(path: &FsPath, value: &impl serde::Serialize) -> ltbridge::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn cmd_simulate(args: &RunArgs) -> CmdResult {
    check_run(args)?;
    let (file, spec, scale) = load(&args.spec)?;
    let horizon = args.horizon.unwrap_or(default_horizon(&file.model));
    let stops = [StopRule::Horizon { t: horizon }, StopRule::BoundaryExit];
    let opts = SimOptions::new(args.dt)
        .record(record(args))
        .bridge_correction(args.bridge_correction);
    let paths: Vec<Path> = match file.transform {
        None => {
            let x0 = args.y.unwrap_or(spec.anchor);
            par_map(args.seed, args.n, |src| {
                simulate(&spec, &|x| spec.b(x), x0, &stops, opts, src)
            })?
        }
        Some(kind @ (TransformKind::BesselLow { .. } | TransformKind::BesselHigh { .. })) => {
            let ts = TransformedSpec::new(spec.clone(), scale, kind)?;
            par_map(args.seed, args.n, |src| {
                launch_entrance(&ts, args.launcher.into(), &stops, opts, src)
            })?
        }
        Some(kind) => {
            let ts = TransformedSpec::new(spec.clone(), scale, kind)?;
            let tspec = ts.as_spec();
            let x0 = args.y.unwrap_or(tspec.anchor);
            let drift = |x: f64| ts.drift(x);
            let opts = opts.reflect_ends(matches!(kind, TransformKind::Recurrent { .. }));
            par_map(args.seed, args.n, |src| {
                simulate(&tspec, &drift, x0, &stops, opts, src)
            })?
        }
    };
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let summary = BatchSummary::from_paths(&paths, args.dt);
    write_json(&args.out.join("summary.json"), &summary)?;
    if args.paths {
        write_path_files(&args.out.join("paths"), &paths)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(Error::from)?
    );
    Ok(())
}

fn bridge_config(
    args: &RunArgs,
    spec: &DiffusionSpec,
    target: Target,
    horizon: f64,
) -> BridgeConfig {
    let y = args.y.unwrap_or(spec.anchor);
    let mut cfg = BridgeConfig::new(y, target, args.dt)
        .horizon(horizon)
        .launcher(args.launcher.into())
        .record(record(args));
    cfg.eps = args.eps;
    cfg.n = args.n;
    cfg
}

/// Writes summaries (and paths) and prints batch statistics; incomplete
/// bridges are counted, not fatal.
fn emit(args: &RunArgs, results: Vec<ltbridge::Result<BridgeOutcome>>) -> CmdResult {
    let mut outcomes = Vec::with_capacity(results.len());
    let mut incomplete = 0;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(Error::IncompleteBridge { .. }) => incomplete += 1,
            Err(e) => return Err(e.into()),
        }
    }
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let mut f =
        BufWriter::new(File::create(args.out.join("summaries.jsonl")).map_err(Error::from)?);
    write_json_lines(&mut f, &outcomes)?;
    f.flush().map_err(Error::from)?;
    if args.paths {
        let paths: Vec<Path> = outcomes.iter().map(|o| o.path.clone()).collect();
        write_path_files(&args.out.join("paths"), &paths)?;
    }
    let n = outcomes.len();
    let ones = outcomes.iter().filter(|o| o.theta == 1).count();
    let lt: Vec<f64> = outcomes.iter().map(|o| o.lt_terminal).collect();
    let (lt_mean, lt_se) = mean_se(&lt);
    let switched = outcomes.iter().filter(|o| o.completed()).count();
    let killed = outcomes.iter().filter(|o| o.path.killed).count();
    println!("paths {n}  incomplete {incomplete}  switched {switched}  killed {killed}");
    if n > 0 {
        println!("theta = 1 frequency {:.4}", ones as f64 / n as f64);
        println!("terminal local time {lt_mean:.5} +/- {lt_se:.5}");
    }
    Ok(())
}

fn cmd_bridge(args: &RunArgs) -> CmdResult {
    check_run(args)?;
    let (file, spec, scale) = load(&args.spec)?;
    let horizon = args.horizon.unwrap_or(f64::INFINITY);
    let target = match args.a {
        Some(a) => Target::Fixed { a },
        None => Target::Randomized { law: None },
    };
    let mut cfg = bridge_config(args, &spec, target, horizon);
    if !horizon.is_finite() && !has_killing_end(&spec, &scale) {
        // Phase 2 never ends on its own; stop it at the model horizon.
        cfg.horizon = cfg.dt;
        cfg.min_post_switch = default_horizon(&file.model);
    }
    cfg.validate(&spec, &scale)?;
    let results = ltbridge::rng::par_map(args.seed, args.n, |src| {
        Ok(match cfg.target {
            Target::Fixed { .. } => sample_bridge(&spec, &scale, &cfg, src),
            Target::Randomized { .. } => sample_randomized_bridge(&spec, &scale, &cfg, src),
        })
    })?;
    emit(args, results)
}

fn has_killing_end(spec: &DiffusionSpec, scale: &ScaleTable) -> bool {
    scale.s_left.is_finite() && spec.left.is_finite()
        || scale.s_right.is_finite() && spec.right.is_finite()
}

fn cmd_decompose(args: &RunArgs) -> CmdResult {
    check_run(args)?;
    if args.a.is_some() {
        return Err(Error::Config("decompose draws its own level; drop --a".into()).into());
    }
    let (file, spec, scale) = load(&args.spec)?;
    let horizon = args.horizon.unwrap_or(default_horizon(&file.model));
    let cfg = bridge_config(args, &spec, Target::Randomized { law: None }, horizon).truncate(true);
    cfg.validate(&spec, &scale)?;
    let results = par_map(args.seed, args.n, |src| {
        Ok(sample_randomized_bridge(&spec, &scale, &cfg, src))
    })?;
    emit(args, results)
}

fn cmd_validate(args: &ValidateArgs) -> CmdResult {
    let suite: Suite = args.suite.parse()?;
    let desk = Desk {
        n: args.n,
        dt: args.dt,
        alpha: args.alpha,
        seed: args.seed,
        launcher: args.launcher.into(),
        band: args.band,
    };
    let report = run_suite(suite, &desk)?;
    print!("{report}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Statistical)
    }
}
