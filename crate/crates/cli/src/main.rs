use clap::{Parser, Subcommand};
use dadr_cli::{
    cmd_compare, cmd_feasible_set, cmd_identify_support, cmd_simulate, cmd_solve,
    cmd_terminal_set, load_config, resolve_out_dir, Overrides,
};
use dadr_mpc::ambiguity::SampleLayout;
use dadr_mpc::controller::ControllerMode;

/// Distributionally robust MPC toolkit: solve, simulate and benchmark the
/// disturbance-affine controller against its tube-based restriction.
#[derive(Parser)]
#[command(name = "dadr", version, about)]
struct Cli {
    /// configuration file (TOML)
    #[arg(long, global = true)]
    config: Option<String>,
    /// override the simulation seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (falls back to $DADR_OUT, then ./out)
    #[arg(long, global = true)]
    out: Option<String>,
    /// override the number of Monte-Carlo runs
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// controller mode: dadr | tube
    #[arg(long, global = true)]
    mode: Option<String>,
    /// initial state in physical units, comma separated
    #[arg(long, global = true)]
    x0: Option<String>,
    /// sample file layout: trajectory | per-step
    #[arg(long, global = true)]
    samples_layout: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Identify the disturbance support polytope and write it out
    IdentifySupport,
    /// Compute and export the terminal gain, cost matrix and terminal set
    TerminalSet,
    /// One-shot solve at the initial state; prints policy and objective
    Solve,
    /// Closed-loop Monte-Carlo batch in the configured mode
    Simulate,
    /// Run both controllers on matched seeds and export the comparison
    Compare,
    /// Grid scan of initial-state feasibility for both controllers
    FeasibleSet,
}

fn parse_mode(s: &str) -> Result<ControllerMode, String> {
    match s {
        "dadr" => Ok(ControllerMode::DaDr),
        "tube" => Ok(ControllerMode::Tube),
        other => Err(format!("unknown mode '{}', expected dadr or tube", other)),
    }
}

fn parse_x0(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad --x0 entry '{}': {}", t, e)))
        .collect()
}

fn run() -> Result<i32, String> {
    let cli = Cli::parse();
    let config_path = cli.config.ok_or("--config <path> is required")?;
    let mut ov = Overrides {
        seed: cli.seed,
        runs: cli.runs,
        out_dir: cli.out.clone(),
        ..Overrides::default()
    };
    if let Some(m) = &cli.mode {
        ov.mode = Some(parse_mode(m)?);
    }
    if let Some(x0) = &cli.x0 {
        ov.x0_phys = Some(parse_x0(x0)?);
    }
    if let Some(layout) = &cli.samples_layout {
        ov.samples_layout = Some(match layout.as_str() {
            "trajectory" => SampleLayout::Trajectory,
            "per-step" => SampleLayout::PerStep,
            other => return Err(format!("unknown samples layout '{}'", other)),
        });
    }
    let cfg = load_config(&config_path, &ov).map_err(|e| e.to_string())?;
    let out_dir = resolve_out_dir(cli.out.as_deref());
    let code = match cli.cmd {
        Cmd::IdentifySupport => cmd_identify_support(&cfg, &out_dir),
        Cmd::TerminalSet => cmd_terminal_set(&cfg, &out_dir),
        Cmd::Solve => cmd_solve(&cfg, &out_dir),
        Cmd::Simulate => cmd_simulate(&cfg, &out_dir),
        Cmd::Compare => cmd_compare(&cfg, &out_dir),
        Cmd::FeasibleSet => cmd_feasible_set(&cfg, &out_dir),
    }
    .map_err(|e| e.to_string())?;
    Ok(code)
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(msg) => {
            eprintln!("error: {}", msg);
            std::process::exit(1);
        }
    }
}
