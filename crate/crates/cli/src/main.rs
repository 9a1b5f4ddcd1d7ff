use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use penalty_spde::config::RunConfig;
use penalty_spde::ensemble::{check_eps_list, epsilon_sweep, stability_audit};
use penalty_spde::mesh::{generate_l_shape, generate_rect_mesh, l_shape_resolution, Rect};
use penalty_spde::output::{audit_csv, json_string, ledger_csv, sweep_csv, write_text, write_vtk, SweepSummary};
use penalty_spde::scheme::{run_path, PathOptions};
use penalty_spde::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser)]
#[command(name = "penalty-spde", version, about = "Pressure-penalty schemes for stochastic Navier-Stokes")]
struct Cli {
    /// Worker threads for ensembles (defaults to all cores).
    #[arg(long, global = true, env = "PENALTY_SPDE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Overrides `seeds.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sample path and write its energy ledger.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sample index of the noise path.
        #[arg(long, default_value_t = 0)]
        sample: u64,
    },
    /// Paired ensembles against the reference scheme for a list of ε.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated, strictly decreasing.
        #[arg(long, value_delimiter = ',', conflicts_with = "paper_fig3")]
        eps_list: Option<Vec<f64>>,
        /// ε/5^j for j = 0..4, starting from the configured ε.
        #[arg(long)]
        paper_fig3: bool,
    },
    /// Energy bracket on successively halved mesh sizes.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        /// Number of levels, halving h from the first configured level.
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Write a generated mesh in the native text format.
    Meshgen {
        #[command(subcommand)]
        shape: Shape,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Shape {
    Rect {
        #[arg(long)]
        nx: usize,
        #[arg(long)]
        ny: usize,
        /// x0,x1,y0,y1
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [0.0, 1.0, 0.0, 1.0])]
        bounds: Vec<f64>,
    },
    LShape {
        #[arg(long, default_value_t = 5.0)]
        side: f64,
        #[arg(long, conflicts_with = "target_h")]
        n: Option<usize>,
        #[arg(long)]
        target_h: Option<f64>,
    },
}

enum Failure {
    Config(String),
    Numeric(String),
    Audit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() || matches!(e, Error::Io { .. }) {
            Failure::Config(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, u64, PathBuf), Failure> {
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seeds.base_seed);
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, seed, out))
}

fn cmd_run(common: &Common, sample: u64) -> Result<(), Failure> {
    let (cfg, seed, out) = load(common)?;
    let setup = cfg.setup()?;
    let opts = PathOptions {
        snapshot_stride: cfg.output.snapshot_stride,
        ledger: true,
    };
    let traj = run_path(&setup.problem, &setup.config, seed, sample, opts)?;
    write_text(&out.join("ledger.csv"), &ledger_csv(&traj.energy)?)?;
    if cfg.output.snapshot_stride.is_some() {
        for s in &traj.states {
            let title = format!("{} m={} t={}", setup.config.kind, s.m, s.t);
            write_vtk(&out.join(format!("snapshot_{:05}.vtk", s.m)), &s.velocity, &s.pressure, &title)?;
        }
    }
    let c = &setup.config;
    let worst = traj.energy.iter().fold(0.0f64, |m, e| m.max(e.residual));
    println!(
        "{}: {} steps, k = {:e}, eps = {:e}, k/eps = {:.4}, h = {:.4}",
        c.kind,
        c.steps,
        c.k,
        c.eps,
        c.k_over_eps(),
        setup.problem.h_max()
    );
    println!(
        "final |V|^2 = {:e}, max ledger residual = {:e}",
        traj.energy.last().map_or(0.0, |e| e.velocity_sq),
        worst
    );
    println!("wrote {}", out.join("ledger.csv").display());
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    samples: Option<usize>,
    eps_list: Option<Vec<f64>>,
    paper_fig3: bool,
) -> Result<(), Failure> {
    let (cfg, seed, out) = load(common)?;
    let n = samples.unwrap_or(cfg.ensemble.samples);
    let setup = cfg.setup()?;
    let eps0 = setup.config.eps;
    let list = if paper_fig3 {
        (0..5).map(|j| eps0 / 5f64.powi(j)).collect()
    } else {
        eps_list
            .or_else(|| cfg.ensemble.eps_list.clone())
            .unwrap_or_else(|| vec![eps0])
    };
    check_eps_list(&list)?;
    let reference = setup.config.with_kind(cfg.reference_kind())?;
    let mode = cfg.step_mode(&setup.config);
    let sweep = epsilon_sweep(&setup.problem, &reference, &setup.config, &list, mode, n, seed)?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&sweep)?)?;
    write_text(&out.join("sweep.json"), &json_string(&SweepSummary::new(&sweep, n, seed))?)?;
    for w in &sweep.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} vs {}, {} samples, h = {:.4}", sweep.reference, sweep.candidate, n, sweep.h);
    println!("{:>12} {:>14} {:>14} {:>12}", "eps", "mean_sq_error", "variance", "k/eps");
    for r in &sweep.rows {
        println!(
            "{:>12.4e} {:>14.4e} {:>14.4e} {:>12.4}",
            r.eps, r.stats.mean_sq_error, r.stats.error_variance, r.k_over_eps
        );
    }
    match sweep.slope {
        Some(s) => println!("slope: {s:.3}"),
        None => println!("slope: not applicable"),
    }
    if sweep.rows.len() > 1 {
        let yes = |b: bool| if b { "yes" } else { "no" };
        println!(
            "monotone: error {}, variance {}",
            yes(sweep.mean_sq_decreasing()),
            yes(sweep.variance_decreasing())
        );
    }
    Ok(())
}

fn cmd_audit(common: &Common, samples: Option<usize>, levels: Option<usize>) -> Result<(), Failure> {
    let (cfg, seed, out) = load(common)?;
    let n = samples.unwrap_or(cfg.ensemble.samples);
    let hs: Vec<f64> = match levels {
        Some(0) => return Err(Failure::Config("--levels must be at least 1".into())),
        Some(l) => {
            let h0 = cfg.ensemble.levels.first().copied().unwrap_or(0.5);
            (0..l).map(|j| h0 / 2f64.powi(j as i32)).collect()
        }
        None => cfg.ensemble.levels.clone(),
    };
    let report = stability_audit(|h| cfg.with_mesh_size(h)?.setup(), &hs, n, seed)?;
    write_text(&out.join("audit.csv"), &audit_csv(&report)?)?;
    write_text(&out.join("audit.json"), &json_string(&report)?)?;
    for l in &report.levels {
        println!("h = {:.4}: bracket = {:e} ± {:e}", l.h, l.bracket, l.ci_halfwidth);
    }
    if report.flagged {
        return Err(Failure::Audit(format!(
            "bracket grew by more than ×2 between levels (ratios {:?})",
            report.growth
        )));
    }
    println!("audit passed");
    Ok(())
}

fn cmd_meshgen(shape: &Shape, out: &Path) -> Result<(), Failure> {
    let mesh = match shape {
        Shape::Rect { nx, ny, bounds } => generate_rect_mesh(*nx, *ny, Rect::new(bounds[0], bounds[1], bounds[2], bounds[3]))?,
        Shape::LShape { side, n, target_h } => {
            let n = match (n, target_h) {
                (Some(n), _) => *n,
                (None, Some(h)) => l_shape_resolution(*side, *h)?,
                (None, None) => return Err(Failure::Config("l-shape needs --n or --target-h".into())),
            };
            generate_l_shape(*side, n)?
        }
    };
    mesh.write_native(out)?;
    let st = mesh.stats();
    println!(
        "{} vertices, {} triangles, h_max = {:.4}, ratio = {:.3}",
        mesh.n_vertices(),
        mesh.n_triangles(),
        st.h_max,
        st.quasi_uniformity_ratio
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match &cli.command {
        Command::Run { common, sample } => cmd_run(common, *sample),
        Command::Sweep {
            common,
            samples,
            eps_list,
            paper_fig3,
        } => cmd_sweep(common, *samples, eps_list.clone(), *paper_fig3),
        Command::Audit {
            common,
            samples,
            levels,
        } => cmd_audit(common, *samples, *levels),
        Command::Meshgen { shape, out } => cmd_meshgen(shape, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Audit(m)) => {
            eprintln!("audit flagged: {m}");
            ExitCode::from(EXIT_AUDIT)
        }
    }
}
