use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;
use twoscale::cell::{
    check_tensors, compute_perforated_tensor, homogenize, strain_probes, CellProblem, EffectiveTensor,
};
use twoscale::checks;
use twoscale::config::{parse_config, RunConfig, DEFAULTS};
use twoscale::fine::{sweep_epsilon, two_scale_distance, Contrast, FineProblem, SweepSpec};
use twoscale::limit::{limit_spectrum_with, macro_eigenpairs, LimitSolver};
use twoscale::mesh::{build_cell_mesh, build_macro_mesh, Phase, PeriodicMesh};
use twoscale::report::{Artifact, Cell, ReportWriter, Table};
use twoscale::solvers::{CgOptions, EigOptions};
use twoscale::stokes::StokesProblem;
use twoscale::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "twoscale",
    version,
    about = "Two-scale homogenization lab for composites with soft, weakly compressible inclusions",
    after_help = DEFAULTS
)]
struct Cli {
    /// INI run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Byte-identical artifacts across reruns (timings are zeroed).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Concurrent fine-scale runs in a sweep.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Build the periodic cell mesh.
    CellMesh,
    /// Effective tensor with its structure checks.
    Chom,
    /// Lowest `k` Stokes eigenvalues on the inclusion.
    StokesEigs,
    /// Macro and micro spectrum of the limit operator on the window.
    LimitSpectrum,
    /// Lowest `k` eigenvalues of the homogenized macro operator.
    MacroEigs,
    /// One fine-scale resolvent solve, compared with the limit field.
    EpsSolve {
        /// 1/eps; defaults to the first entry of the config list.
        #[arg(long)]
        inverse_eps: Option<usize>,
    },
    /// Lowest `k` fine-scale eigenvalues.
    EpsEigs {
        #[arg(long)]
        inverse_eps: Option<usize>,
    },
    /// Resolvent and spectrum over every eps of the config.
    Sweep,
    /// Runs the full invariant suite.
    Check,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    deterministic: bool,
    workers: usize,
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Parse { .. } | Error::UnknownKey(_) | Error::InvalidValue { .. })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.log_level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let cfg = match &cli.config {
        Some(p) => parse_config(p),
        None => RunConfig::parse_str(""),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let ctx = Ctx {
        deterministic: cli.deterministic || cfg.solver.deterministic,
        workers: cli.workers.unwrap_or(cfg.solver.workers).max(1),
        out: cli.out.clone(),
        cfg,
    };
    let result = match cli.command {
        Command::CellMesh => cell_mesh(&ctx),
        Command::Chom => chom(&ctx),
        Command::StokesEigs => stokes_eigs(&ctx),
        Command::LimitSpectrum => limit_spectrum(&ctx),
        Command::MacroEigs => macro_eigs(&ctx),
        Command::EpsSolve { inverse_eps } => eps_solve(&ctx, inverse_eps),
        Command::EpsEigs { inverse_eps } => eps_eigs(&ctx, inverse_eps),
        Command::Sweep => sweep(&ctx),
        Command::Check => return check(&ctx),
    };
    match result {
        Ok(manifest) => {
            println!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) if is_config_error(&e) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("solver failure: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

type Res = twoscale::Result<PathBuf>;

fn writer(ctx: &Ctx) -> twoscale::Result<ReportWriter> {
    let mut w = ReportWriter::new(&ctx.out, ctx.deterministic)?;
    w.write_bytes("config.ini", ctx.cfg.to_ini().as_bytes())?;
    Ok(w)
}

fn cell_mesh_of(ctx: &Ctx) -> twoscale::Result<PeriodicMesh> {
    build_cell_mesh(&ctx.cfg.cell_geometry())
}

fn cg_options(ctx: &Ctx) -> CgOptions {
    CgOptions { tol: ctx.cfg.solver.cg_tol, max_iter: ctx.cfg.solver.cg_max_iter, jacobi: true, record_history: false }
}

fn eig_options(ctx: &Ctx) -> EigOptions {
    EigOptions { tol: ctx.cfg.solver.eig_tol, ..Default::default() }
}

fn effective_tensor(ctx: &Ctx, mesh: &PeriodicMesh) -> twoscale::Result<EffectiveTensor> {
    let cell = CellProblem::new(mesh, &ctx.cfg.material_spec()?)?;
    Ok(homogenize(&cell, &cg_options(ctx), ctx.cfg.solver.seed)?.chom)
}

fn stokes_problem(ctx: &Ctx, mesh: &PeriodicMesh) -> twoscale::Result<StokesProblem> {
    let mut p = StokesProblem::from_cell_mesh(mesh, &ctx.cfg.material_spec()?)?;
    p.minres.tol = ctx.cfg.solver.minres_tol;
    Ok(p)
}

/// Configured window, or 10% above the second Stokes eigenvalue.
fn window(ctx: &Ctx, stokes: &StokesProblem) -> twoscale::Result<f64> {
    match ctx.cfg.experiment.window {
        Some(w) => Ok(w),
        None => {
            let s = stokes.eigenpairs(2, &eig_options(ctx))?;
            Ok(1.1 * s.values[1])
        }
    }
}

fn values_table(name: &str, values: &[f64]) -> Table {
    let mut t = Table::new(&["index", name]);
    for (i, &v) in values.iter().enumerate() {
        t.push(vec![(i + 1).into(), v.into()]);
    }
    t
}

fn cell_mesh(ctx: &Ctx) -> Res {
    let mesh = cell_mesh_of(ctx)?;
    let mut w = writer(ctx)?;
    w.write_bytes("cell_mesh.txt", mesh.to_text().as_bytes())?;
    w.write(&Artifact::json(
        "cell_mesh.json",
        &json!({
            "nodes": mesh.nodes.len(),
            "triangles": mesh.triangles.len(),
            "periodic_pairs": mesh.periodic_pairs.len(),
            "inclusion_area": mesh.phase_area(Phase::Inclusion),
            "matrix_area": mesh.phase_area(Phase::Matrix),
        }),
    )?)?;
    println!("{} nodes, {} triangles", mesh.nodes.len(), mesh.triangles.len());
    w.finish()
}

fn chom(ctx: &Ctx) -> Res {
    let mesh = cell_mesh_of(ctx)?;
    let mat = ctx.cfg.material_spec()?;
    let cell = CellProblem::new(&mesh, &mat)?;
    let h = homogenize(&cell, &cg_options(ctx), ctx.cfg.solver.seed)?;
    let chat = compute_perforated_tensor(&mesh, &mat)?;
    let checks = check_tensors(&h.chom, &chat, &cell.mean_tensor(), &strain_probes(20, ctx.cfg.solver.seed));
    let mut w = writer(ctx)?;
    w.write(&Artifact::json(
        "chom.json",
        &json!({
            "voigt": h.chom.rows(),
            "perforated": chat.rows(),
            "checks": checks,
            "kernel_annihilation": h.kernel_annihilation,
            "consistency": h.solutions.iter().map(|s| s.consistency).collect::<Vec<_>>(),
            "cg_iterations": h.solutions.iter().map(|s| s.report.iterations).collect::<Vec<_>>(),
        }),
    )?)?;
    for row in h.chom.rows() {
        println!("{:>14.8} {:>14.8} {:>14.8}", row[0], row[1], row[2]);
    }
    w.finish()
}

fn stokes_eigs(ctx: &Ctx) -> Res {
    let p = stokes_problem(ctx, &cell_mesh_of(ctx)?)?;
    let s = p.eigenpairs(ctx.cfg.experiment.k, &eig_options(ctx))?;
    let mut t = Table::new(&["index", "value", "residual", "div_residual", "mean_norm"]);
    for (i, v) in s.values.iter().enumerate() {
        t.push(vec![(i + 1).into(), (*v).into(), s.residuals[i].into(), s.div_residuals[i].into(), s.mean_norms()[i].into()]);
        println!("{:>3} {v:.8}", i + 1);
    }
    let mut w = writer(ctx)?;
    w.write(&Artifact::Csv { name: "stokes_eigs.csv".into(), table: t })?;
    w.finish()
}

fn limit_spectrum(ctx: &Ctx) -> Res {
    let mesh = cell_mesh_of(ctx)?;
    let chom = effective_tensor(ctx, &mesh)?;
    let stokes = stokes_problem(ctx, &mesh)?;
    let window = window(ctx, &stokes)?;
    let macro_mesh = build_macro_mesh(&ctx.cfg.geometry.domain, ctx.cfg.geometry.macro_n)?;
    let ls = limit_spectrum_with(&macro_mesh, &chom, &stokes, window)?;
    let mut w = writer(ctx)?;
    w.write_bytes("limit_spectrum.csv", ls.set.to_csv().as_bytes())?;
    w.write(&Artifact::json(
        "limit_spectrum.json",
        &json!({
            "window": window,
            "macro": ls.macro_values,
            "micro": ls.micro_values,
            "micro_mean_norms": ls.micro_mean_norms,
            "chom": chom.rows(),
        }),
    )?)?;
    println!("{} macro and {} micro values below {window:.4}", ls.macro_values.len(), ls.micro_values.len());
    w.finish()
}

fn macro_eigs(ctx: &Ctx) -> Res {
    let chom = effective_tensor(ctx, &cell_mesh_of(ctx)?)?;
    let macro_mesh = build_macro_mesh(&ctx.cfg.geometry.domain, ctx.cfg.geometry.macro_n)?;
    let (set, _) = macro_eigenpairs(&macro_mesh, &chom, ctx.cfg.experiment.k)?;
    let values = set.values();
    for (i, v) in values.iter().enumerate() {
        println!("{:>3} {v:.8}", i + 1);
    }
    let mut w = writer(ctx)?;
    w.write(&Artifact::Csv { name: "macro_eigs.csv".into(), table: values_table("value", &values) })?;
    w.finish()
}

fn pick_eps(ctx: &Ctx, inverse_eps: Option<usize>) -> twoscale::Result<usize> {
    match inverse_eps.or(ctx.cfg.experiment.inverse_epsilon.first().copied()) {
        Some(m) if m >= 1 => Ok(m),
        _ => Err(Error::InvalidValue { key: "experiment.epsilon".into(), msg: "no eps given".into() }),
    }
}

fn fine_problem(ctx: &Ctx, m: usize) -> twoscale::Result<FineProblem> {
    let g = &ctx.cfg.geometry;
    FineProblem::new(&g.domain, 1.0 / m as f64, g.cells_res, &ctx.cfg.inclusion(), &ctx.cfg.material_spec()?, Contrast::Scaled)
}

fn eps_solve(ctx: &Ctx, inverse_eps: Option<usize>) -> Res {
    let m = pick_eps(ctx, inverse_eps)?;
    let problem = fine_problem(ctx, m)?;
    let f = ctx.cfg.forcing();
    let run = problem.solve_resolvent(&f, ctx.cfg.experiment.alpha)?;
    // the limit on the same cell discretization the fine mesh is tiled from
    let mut geom = ctx.cfg.cell_geometry();
    geom.resolution = ctx.cfg.geometry.cells_res;
    let cell = build_cell_mesh(&geom)?;
    let chom = effective_tensor(ctx, &cell)?;
    let stokes = stokes_problem(ctx, &cell)?;
    let macro_mesh = build_macro_mesh(&ctx.cfg.geometry.domain, ctx.cfg.geometry.macro_n)?;
    let dist = if ctx.cfg.experiment.alpha > 0.0 {
        let field = LimitSolver::new(&macro_mesh, &chom, &stokes, ctx.cfg.experiment.alpha)?.solve(&f)?;
        Some(two_scale_distance(&problem, &run, &field)?)
    } else {
        None
    };
    let mut w = writer(ctx)?;
    w.write(&Artifact::json(
        &format!("run_1_{m}.json"),
        &json!({
            "epsilon": run.epsilon,
            "dofs": run.n_dofs,
            "energy": run.energy,
            "norms": run.norms,
            "solver_residual": run.report.final_residual,
            "distance": dist,
        }),
    )?)?;
    println!("eps = 1/{m}: {} dofs, energy defect {:.2e}", run.n_dofs, run.energy.defect);
    if let Some(d) = dist {
        println!("l2 macro error {:.6e}, norm defect {:.6e}", d.l2_macro_error, d.norm_defect);
    }
    w.finish()
}

fn eps_eigs(ctx: &Ctx, inverse_eps: Option<usize>) -> Res {
    let m = pick_eps(ctx, inverse_eps)?;
    let values = fine_problem(ctx, m)?.eigenvalues(ctx.cfg.experiment.k)?.values();
    for (i, v) in values.iter().enumerate() {
        println!("{:>3} {v:.8}", i + 1);
    }
    let mut w = writer(ctx)?;
    w.write(&Artifact::Csv { name: format!("eps_eigs_1_{m}.csv"), table: values_table("value", &values) })?;
    w.finish()
}

fn sweep(ctx: &Ctx) -> Res {
    let cfg = &ctx.cfg;
    let mut geom = cfg.cell_geometry();
    geom.resolution = cfg.geometry.cells_res;
    let cell = build_cell_mesh(&geom)?;
    let chom = effective_tensor(ctx, &cell)?;
    let stokes = stokes_problem(ctx, &cell)?;
    let window = window(ctx, &stokes)?;
    let macro_mesh = build_macro_mesh(&cfg.geometry.domain, cfg.geometry.macro_n)?;
    let limit = limit_spectrum_with(&macro_mesh, &chom, &stokes, window)?;
    let forcing = cfg.forcing();
    let field = if cfg.experiment.alpha > 0.0 {
        Some(LimitSolver::new(&macro_mesh, &chom, &stokes, cfg.experiment.alpha)?.solve(&forcing)?)
    } else {
        None
    };
    let spec = SweepSpec {
        domain: cfg.geometry.domain,
        inverse_epsilon: cfg.experiment.inverse_epsilon.clone(),
        cells_res: cfg.geometry.cells_res,
        inclusion: cfg.inclusion(),
        material: cfg.material_spec()?,
        forcing,
        alpha: cfg.experiment.alpha,
        limit_field: field.as_ref(),
        limit_spectrum: Some(&limit.set),
        window,
        micro_target: limit.micro_values.first().copied(),
        workers: ctx.workers,
        deterministic: ctx.deterministic,
    };
    let report = sweep_epsilon(&spec)?;
    let mut w = writer(ctx)?;
    for a in report.artifacts(&limit.set.values())? {
        w.write(&a)?;
    }
    w.write_bytes("limit_spectrum.csv", limit.set.to_csv().as_bytes())?;
    let table = report.table();
    for row in &table.rows {
        println!("{}", row.iter().map(Cell::render).collect::<Vec<_>>().join("  "));
    }
    w.finish()
}

fn check(ctx: &Ctx) -> ExitCode {
    let outcomes = checks::run_all(ctx.workers);
    for o in &outcomes {
        println!("{o}");
    }
    let mut outcomes_out = outcomes.clone();
    if ctx.deterministic {
        outcomes_out.iter_mut().for_each(|o| o.seconds = 0.0);
    }
    let written = writer(ctx).and_then(|mut w| {
        w.write(&Artifact::json("check.json", &outcomes_out)?)?;
        w.finish()
    });
    if let Err(e) = written {
        eprintln!("could not write report: {e}");
        return ExitCode::from(EXIT_SOLVER);
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}
