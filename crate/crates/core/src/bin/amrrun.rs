use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use forest_fe::assembly::Problem;
use forest_fe::driver::{run_amr, AmrConfig};

/// Adaptive Poisson solves on a forest of quadtrees/octrees over simulated ranks.
#[derive(Parser, Debug)]
#[command(name = "amrrun", version)]
struct Cli {
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    degree: usize,
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long = "k-balance", default_value_t = 1)]
    k_balance: usize,
    #[arg(long = "s-ghost", default_value_t = 0)]
    s_ghost: usize,
    #[arg(long, default_value_t = 6)]
    steps: usize,
    #[arg(long = "refine-frac", default_value_t = 0.15)]
    refine_frac: f64,
    #[arg(long = "coarsen-frac", default_value_t = 0.03)]
    coarsen_frac: f64,
    #[arg(long, value_enum, default_value_t = Problem::Sinusoid)]
    problem: Problem,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform level of the initial mesh.
    #[arg(long = "initial-level", default_value_t = 4)]
    initial_level: u8,
    /// Relative residual for CG.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Per-step statistics (JSON array).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Prefix for one legacy VTK file per step.
    #[arg(long)]
    vtk: Option<String>,
    /// Accept k > max(1, D) and s > D.
    #[arg(long = "allow-unsafe-k")]
    allow_unsafe_k: bool,
    /// Fabric round log (JSON lines).
    #[arg(long = "comm-log")]
    comm_log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = AmrConfig {
        dim: cli.dim,
        degree: cli.degree,
        ranks: cli.ranks,
        k_balance: cli.k_balance,
        s_ghost: cli.s_ghost,
        steps: cli.steps,
        refine_frac: cli.refine_frac,
        coarsen_frac: cli.coarsen_frac,
        problem: cli.problem,
        seed: cli.seed,
        initial_level: cli.initial_level,
        allow_unsafe_k: cli.allow_unsafe_k,
        tol: cli.tol,
        stats: cli.stats,
        vtk: cli.vtk,
        comm_log: cli.comm_log,
    };
    match run_amr(&cfg) {
        Ok(out) => {
            for s in &out.stats {
                let err = s.l2_error.map(|e| format!(" l2_error={e:.3e}")).unwrap_or_default();
                println!(
                    "step {}: cells={} (min {} max {}) dofs={} hanging={} cg={} refine={} coarsen={} total_sub={:.3}s{}",
                    s.step, s.cells.total, s.cells.min, s.cells.max, s.dofs.total, s.dofs.hanging, s.cg_iterations, s.refined, s.coarsened, s.total_sub.time, err
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("amrrun: {e}");
            ExitCode::FAILURE
        }
    }
}
