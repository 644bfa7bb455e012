//! Command-line front end: experiment runs, the rho sweep, and small
//! CSV dump utilities for prototypes and datasets.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fednh_sim::config::{self, ExperimentConfig};
use fednh_sim::datagen::{dirichlet_partition, gen_spiral, SpiralMode};
use fednh_sim::hypersphere::{
    max_offdiag_inner, min_pairwise_distance, solve_uniform_prototypes, DEFAULT_SOLVER_MAX_ITERS,
    DEFAULT_SOLVER_TOL,
};
use fednh_sim::run::{rho_sweep, run_experiment};
use fednh_sim::{Result, SimError};

#[derive(Parser)]
#[command(
    name = "fednh-sim",
    version,
    about = "Deterministic simulator of prototype-based federated learning on spiral data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its artifacts to the output directory.
    Run(ConfigArgs),
    /// Run the same-seeded experiment once per rho and write a summary.
    SweepRho(SweepArgs),
    /// Print the uniform prototype matrix for (classes, dim) as CSV.
    DumpPrototypes(DumpProtoArgs),
    /// Print a spiral dataset (optionally with client assignments) as CSV.
    DumpDataset(DumpDataArgs),
}

/// Config assembly, precedence preset < file < --set < dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// Named preset to start from (spiral-centralized-balanced,
    /// spiral-centralized-imbalanced, spiral-federated,
    /// spiral-federated-paper).
    #[arg(long)]
    preset: Option<String>,

    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override: key=value, repeatable (same keys as the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Method: fednh | fedavg | fedavg_uh | local.
    #[arg(long)]
    method: Option<String>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = library default). Falls back to the
    /// FEDNH_SIM_THREADS environment variable when absent.
    #[arg(long)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Comma-separated rho values, e.g. 0.1,0.3,0.5,0.7,0.9.
    #[arg(long, value_delimiter = ',', required = true)]
    rhos: Vec<f64>,
}

#[derive(Args)]
struct DumpProtoArgs {
    /// Number of classes C (>= 2).
    #[arg(long)]
    classes: usize,

    /// Latent dimension d (>= 2).
    #[arg(long)]
    dim: usize,

    /// Seed for the rotation / solver restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Convergence tolerance of the iterative solver.
    #[arg(long, default_value_t = DEFAULT_SOLVER_TOL)]
    tol: f64,

    /// Iteration budget of the iterative solver.
    #[arg(long, default_value_t = DEFAULT_SOLVER_MAX_ITERS)]
    max_iters: usize,
}

#[derive(Args)]
struct DumpDataArgs {
    /// Comma-separated per-class sample counts.
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,

    /// Angular noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,

    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Allow any class count (default: the six-arm layout).
    #[arg(long)]
    general_c: bool,

    /// Also partition across this many clients (adds a client column).
    #[arg(long)]
    clients: Option<usize>,

    /// Dirichlet concentration for the partition.
    #[arg(long, default_value_t = 0.3)]
    beta: f64,

    /// Partition seed.
    #[arg(long, default_value_t = 0)]
    partition_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::SweepRho(args) => cmd_sweep(args),
        Cmd::DumpPrototypes(args) => cmd_dump_prototypes(args),
        Cmd::DumpDataset(args) => cmd_dump_dataset(args),
    }
}

fn assemble_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &args.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            SimError::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        overrides.push((key.trim().to_string(), value.trim().to_string()));
    }
    if let Some(m) = &args.method {
        overrides.push(("method".into(), m.clone()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let threads = match args.threads {
        Some(t) => Some(t),
        None => match std::env::var("FEDNH_SIM_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                SimError::Config(format!(
                    "FEDNH_SIM_THREADS expects a non-negative integer, got '{v}'"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &args.out {
        overrides.push(("out_dir".into(), o.to_string_lossy().into_owned()));
    }
    config::resolve(args.preset.as_deref(), args.config.as_deref(), &overrides)
}

fn cmd_run(args: ConfigArgs) -> Result<()> {
    let cfg = assemble_config(&args)?;
    let out = run_experiment(&cfg)?;
    let total: f64 = out.round_seconds.iter().sum();
    println!(
        "{}: {} rounds in {total:.1}s, artifacts in {}",
        cfg.method.as_str(),
        cfg.rounds,
        cfg.out_dir
    );
    if let Some(last) = out.log.last() {
        println!(
            "final round {}: gm={:.4} pm_v={:.4} pm_l={:.4} fairness={:.4}",
            last.round, last.gm, last.pm_v, last.pm_l, last.fairness
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = assemble_config(&args.config)?;
    let rows = rho_sweep(&cfg, &args.rhos)?;
    println!("rho sweep ({} runs), artifacts in {}", rows.len(), cfg.out_dir);
    println!("rho,final_pm_v,final_pm_l,final_gm,rel_gain_pm_v");
    for r in &rows {
        println!(
            "{},{:.4},{:.4},{:.4},{:+.4}",
            r.rho, r.final_pm_v, r.final_pm_l, r.final_gm, r.rel_gain_pm_v
        );
    }
    Ok(())
}

fn cmd_dump_prototypes(args: DumpProtoArgs) -> Result<()> {
    let outcome =
        solve_uniform_prototypes(args.classes, args.dim, args.seed, args.tol, args.max_iters)?;
    if !outcome.converged() {
        eprintln!("warning: solver hit its iteration cap; printing the best matrix found");
    }
    let w = outcome.into_matrix();
    eprintln!(
        "min pairwise distance {:.6}, max off-diagonal inner product {:.6}",
        min_pairwise_distance(&w),
        max_offdiag_inner(&w)
    );
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    write!(out, "class")?;
    for j in 0..w.dim() {
        write!(out, ",coord{j}")?;
    }
    writeln!(out)?;
    for (c, row) in w.as_array().outer_iter().enumerate() {
        write!(out, "{c}")?;
        for v in row.iter() {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn cmd_dump_dataset(args: DumpDataArgs) -> Result<()> {
    let mode = if args.general_c {
        SpiralMode::GeneralC
    } else {
        SpiralMode::StrictSixArm
    };
    let ds = gen_spiral(&args.counts, args.noise, args.seed, mode)?;
    let client_of: Option<Vec<usize>> = match args.clients {
        Some(k) => {
            let partition = dirichlet_partition(&ds, k, args.beta, args.partition_seed)?;
            let mut map = vec![0usize; ds.len()];
            for (client, idx) in partition.assignments.iter().enumerate() {
                for &i in idx {
                    map[i] = client;
                }
            }
            Some(map)
        }
        None => None,
    };

    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    write!(out, "x,y,label")?;
    if client_of.is_some() {
        write!(out, ",client")?;
    }
    writeln!(out)?;
    for i in 0..ds.len() {
        let p = &ds.points[i];
        write!(out, "{},{},{}", p[0], p[1], ds.labels[i])?;
        if let Some(map) = &client_of {
            write!(out, ",{}", map[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
