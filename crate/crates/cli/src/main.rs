mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linatt::bench::{self, AtomicFile, BenchReport};
use linatt::verify::{self, InstanceShape, SuiteOutcome};
use linatt::{BenchConfig, Direction, Variant};

use crate::config::{parse_config, parse_list, BenchSettings};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "linatt",
    version,
    about = "Softmax vs. linear self-attention: verification and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence, oracle, softmax, channel-scaling and homogeneity suites.
    Verify(VerifyArgs),
    /// Time and account allocations across an N sweep; writes CSV and JSON.
    Bench(BenchArgs),
    /// Check every backward pass against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a JSON bench report as text.
    Report {
        /// Path to a JSON report written by `bench`.
        path: PathBuf,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, env = "LINATT_SEED", default_value_t = 42)]
    seed: u64,
    /// Comma-separated NxC instance shapes.
    #[arg(long, default_value = verify::DEFAULT_VERIFY_SIZES, value_parser = parse_shapes)]
    sizes: ::std::vec::Vec<InstanceShape>,
    /// Channel reduction, used in addition to r = 1 wherever it divides C.
    #[arg(long, default_value_t = linatt::projections::DEFAULT_REDUCTION)]
    r: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, env = "LINATT_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = verify::DEFAULT_GRADCHECK_SIZES, value_parser = parse_shapes)]
    sizes: ::std::vec::Vec<InstanceShape>,
    /// Central-difference step.
    #[arg(long, default_value_t = verify::DEFAULT_FD_STEP)]
    h: f64,
    #[arg(long, default_value_t = linatt::projections::DEFAULT_REDUCTION)]
    r: usize,
    /// Seeded instances per shape and reduction.
    #[arg(long, default_value_t = 3)]
    instances: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Flat key = value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated ascending N values.
    #[arg(long, value_parser = parse_usize_list)]
    n: Option<::std::vec::Vec<usize>>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, env = "LINATT_SEED")]
    seed: Option<u64>,
    /// Comma-separated subset of vanilla, linear_quadratic, linear.
    #[arg(long, value_parser = parse_variants)]
    variants: Option<::std::vec::Vec<Variant>>,
    /// Comma-separated subset of forward, backward.
    #[arg(long, value_parser = parse_directions)]
    directions: Option<::std::vec::Vec<Direction>>,
    /// Record configurations predicted to exceed this many floats as infeasible.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

// fully qualified `Vec` above keeps clap from treating these as repeated flags
fn parse_shapes(s: &str) -> Result<Vec<InstanceShape>, String> {
    verify::parse_shapes(s).map_err(|e| e.to_string())
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    parse_list(s)
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, String> {
    parse_list(s)
}

fn parse_directions(s: &str) -> Result<Vec<Direction>, String> {
    parse_list(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Report { path } => cmd_report(&path),
    }
}

fn summarize(title: &str, outcomes: &[SuiteOutcome]) -> ExitCode {
    println!("{title}");
    for o in outcomes {
        println!("  {o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed == 0 {
        println!("all {} suites passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} suites failed", outcomes.len());
        ExitCode::from(EXIT_FAILURE)
    }
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    let sizes = args.sizes;
    if args.r == 0 {
        eprintln!("error: --r must be positive");
        return ExitCode::from(EXIT_USAGE);
    }
    let shapes: Vec<String> = sizes.iter().map(ToString::to_string).collect();
    let outcomes = verify::run_verify(args.seed, &sizes, args.r);
    summarize(
        &format!(
            "verify: seed {} sizes {} r {}",
            args.seed,
            shapes.join(","),
            args.r
        ),
        &outcomes,
    )
}

fn cmd_gradcheck(args: GradcheckArgs) -> ExitCode {
    let sizes = args.sizes;
    if args.r == 0 || args.instances == 0 {
        eprintln!("error: --r and --instances must be positive");
        return ExitCode::from(EXIT_USAGE);
    }
    if !(1e-7..=1e-3).contains(&args.h) {
        eprintln!("error: --h must lie in [1e-7, 1e-3]");
        return ExitCode::from(EXIT_USAGE);
    }
    let shapes: Vec<String> = sizes.iter().map(ToString::to_string).collect();
    let outcomes = verify::run_gradcheck(args.seed, &sizes, args.r, args.h, args.instances);
    summarize(
        &format!(
            "gradcheck: seed {} sizes {} h {:e} r {}",
            args.seed,
            shapes.join(","),
            args.h,
            args.r
        ),
        &outcomes,
    )
}

fn bench_settings(args: BenchArgs) -> Result<BenchSettings, String> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => BenchSettings::default(),
    };
    Ok(file.overlay(BenchSettings {
        n: args.n,
        c: args.c,
        r: args.r,
        reps: args.reps,
        warmup: args.warmup,
        seed: args.seed,
        variants: args.variants,
        directions: args.directions,
        budget: args.budget,
        csv: args.csv,
        json: args.json,
    }))
}

fn cmd_bench(args: BenchArgs) -> ExitCode {
    let settings = match bench_settings(args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let defaults = BenchConfig::default();
    let config = BenchConfig {
        n_values: settings.n.unwrap_or(defaults.n_values),
        c: settings.c.unwrap_or(defaults.c),
        r: settings.r.unwrap_or(defaults.r),
        reps: settings.reps.unwrap_or(defaults.reps),
        warmup: settings.warmup.unwrap_or(defaults.warmup),
        seed: settings.seed.unwrap_or(defaults.seed),
        variants: settings.variants.unwrap_or(defaults.variants),
        directions: settings.directions.unwrap_or(defaults.directions),
        float_budget: settings.budget,
    };
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let csv_path = settings.csv.unwrap_or_else(|| PathBuf::from("bench.csv"));
    let json_path = settings.json.unwrap_or_else(|| PathBuf::from("bench.json"));
    let open = |p: &PathBuf| {
        AtomicFile::create(p).map_err(|e| eprintln!("error: cannot write {}: {e}", p.display()))
    };
    let (Ok(csv_file), Ok(json_file)) = (open(&csv_path), open(&json_path)) else {
        return ExitCode::from(EXIT_IO);
    };

    let records = match bench::run_sweep_with(&config, |r| {
        let t = r
            .wall_seconds
            .map_or_else(|| "infeasible".to_string(), |t| format!("{t:.6}s"));
        eprintln!(
            "  {:<17} {:<9} N={:<7} {:>14} peak {} floats",
            r.variant.name(),
            r.direction.name(),
            r.n_positions,
            t,
            r.peak_floats
        );
    }) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    let report = BenchReport::build(&config, records);
    let written = bench::records_to_csv(&report.records)
        .and_then(|bytes| csv_file.commit(&bytes))
        .and_then(|()| bench::report_to_json(&report))
        .and_then(|bytes| json_file.commit(&bytes));
    if let Err(e) = written {
        eprintln!("error: writing reports: {e}");
        return ExitCode::from(EXIT_IO);
    }
    print!("{}", report.render());
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    ExitCode::SUCCESS
}

fn cmd_report(path: &PathBuf) -> ExitCode {
    match bench::read_report(path) {
        Ok(report) => {
            print!("{}", report.render());
            ExitCode::SUCCESS
        }
        Err(linatt::Error::Io(e)) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            ExitCode::from(EXIT_IO)
        }
        Err(e) => {
            eprintln!("error: {} is not a bench report: {e}", path.display());
            ExitCode::from(EXIT_USAGE)
        }
    }
}
