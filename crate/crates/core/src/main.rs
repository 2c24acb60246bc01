use berwald::config::{parse_config, Task};
use berwald::pipeline;
use berwald::report::{write_run_meta, RunMeta};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "berwald",
    about = "Monochromacy checks and associated affine connections for Finsler metrics on periodic charts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports and grids (overrides config `output`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap (results are independent of this)
    #[arg(long)]
    threads: Option<usize>,
    /// Base RNG seed (overrides config `quadrature.seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the Minkowski norm conditions across the grid
    Validate(CommonArgs),
    /// Compute the Binet-Legendre metric and frame field
    Bl(CommonArgs),
    /// Report isotropy dimension and anchor count at the basepoint
    IsoDim(CommonArgs),
    /// Decide whether all tangent norms are linearly isometric
    Monochromacy(CommonArgs),
    /// Construct the associated connection (Christoffel grid)
    Synthesize(CommonArgs),
    /// Parallel-transport a vector along the configured curve
    Transport(CommonArgs),
    /// Verify that parallel transport preserves the Finsler function
    Verify(CommonArgs),
    /// Compute the curvature of the synthesized connection
    Curvature(CommonArgs),
}

impl Command {
    fn split(self) -> (Task, CommonArgs) {
        match self {
            Command::Validate(a) => (Task::Validate, a),
            Command::Bl(a) => (Task::Bl, a),
            Command::IsoDim(a) => (Task::IsoDim, a),
            Command::Monochromacy(a) => (Task::Monochromacy, a),
            Command::Synthesize(a) => (Task::Synthesize, a),
            Command::Transport(a) => (Task::Transport, a),
            Command::Verify(a) => (Task::Verify, a),
            Command::Curvature(a) => (Task::Curvature, a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = cli.command.split();
    match execute(task, args) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn execute(task: Task, args: CommonArgs) -> Result<u8, String> {
    let threads = args.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))?;
    }
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("reading {}: {e}", args.config.display()))?;
    let mut config = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        config.quad.seed = seed;
    }
    let out_dir = args
        .out
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    let start = Instant::now();
    let outcome = pipeline::run(&config, task, &out_dir).map_err(|e| e.to_string())?;
    let meta = RunMeta {
        task: task.name().to_string(),
        duration_seconds: start.elapsed().as_secs_f64(),
        unix_timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        threads: rayon::current_num_threads(),
    };
    write_run_meta(&out_dir, &meta).map_err(|e| e.to_string())?;
    println!(
        "{}: {} ({}); report at {}",
        task.name(),
        if outcome.exit_code == 0 { "pass" } else { "fail" },
        format_args!("{:.2}s", meta.duration_seconds),
        outcome.report_path.display()
    );
    Ok(outcome.exit_code as u8)
}
