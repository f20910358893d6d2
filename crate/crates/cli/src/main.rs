//! Command-line front end: wires the built-in models, instanton solver,
//! prefactor assembly, and Monte Carlo validation into file-based workflows.
//!
//! Exit codes: 1 configuration, 2 solver, 3 validity (nondegeneracy /
//! operator defects), 4 sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use rare_sorm::{
    builtin_model, compare_sweep, compute_mgf_prefactor_detailed, compute_prefactor,
    dense_spectrum, estimate_tail, find_instanton, find_instanton_mgf, gradient,
    prefactor::log_tail_probability_parts, AsymptoticPoint, DivergencePolicy, Error as CoreError,
    InstantonMode, InstantonSolution, McConfig, ModelInstance, NoiseVector, OptimizerConfig,
    PrefactorBreakdown, SpectrumSettings, TimeGrid, DEFAULT_DENSE_CAP,
};

mod emit;
use emit::{fmt_float, write_file};

#[derive(Parser)]
#[command(
    name = "rare-sorm",
    version,
    about = "Sharp small-noise tail probability estimates for SDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Base seed for all stochastic components
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Monte Carlo worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the time resolution from the config
    #[arg(long, value_name = "N")]
    nt: Option<usize>,
    /// Override the number of leading eigenvalues
    #[arg(long = "M", value_name = "N")]
    m: Option<usize>,
    /// Also write eigenvalue spectra as CSV
    #[arg(long)]
    emit_spectrum: bool,
    /// Force the dense eigendecomposition oracle instead of the iterative solver
    #[arg(long)]
    dense: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the design point and write its trajectories
    Instanton(CommonArgs),
    /// Compute the sharp prefactor breakdown
    Prefactor(CommonArgs),
    /// Evaluate tail probabilities from a breakdown over a list of epsilons
    Estimate(CommonArgs),
    /// Monte Carlo tail estimation
    Sample(CommonArgs),
    /// Asymptotics-versus-Monte-Carlo comparison table
    Compare(CommonArgs),
}

fn default_mode() -> String {
    "tail".into()
}
fn default_m() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-8
}
fn default_policy() -> String {
    "reject".into()
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct OptimizerSection {
    mu_schedule: Option<Vec<f64>>,
    lbfgs_memory: Option<usize>,
    lbfgs_max_iter: Option<usize>,
    grad_tol: Option<f64>,
    residual_tol: Option<f64>,
    constraint_tol: Option<f64>,
    initial_lambda: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    model: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    nt: usize,
    #[serde(default = "default_mode")]
    mode: String,
    z: Option<f64>,
    lambda: Option<f64>,
    #[serde(default = "default_m")]
    num_eigenvalues: usize,
    #[serde(default = "default_tol")]
    solver_tol: f64,
    epsilon: Option<f64>,
    epsilons: Option<Vec<f64>>,
    z_values: Option<Vec<f64>>,
    n_samples: Option<u64>,
    #[serde(default = "default_policy")]
    divergence_policy: String,
    optimizer: Option<OptimizerSection>,
    /// Directory with a previously written instanton (eta.csv + summary.json)
    load_instanton: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Solver(String),
    Validity(String),
    Sampling(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Validity(_) => 3,
            CliError::Sampling(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Solver(m)
            | CliError::Validity(m)
            | CliError::Sampling(m)
            | CliError::Io(m) => m,
        }
    }
}

fn classify(err: CoreError) -> CliError {
    let msg = err.to_string();
    match err {
        CoreError::NondegeneracyViolation { .. }
        | CoreError::SingularEigenvalue
        | CoreError::AsymmetricOperator { .. }
        | CoreError::DenseCapExceeded { .. }
        | CoreError::PseudoSingularity => CliError::Validity(msg),
        CoreError::AllSamplesDiverged { .. } | CoreError::SampleDiverged { .. } => {
            CliError::Sampling(msg)
        }
        CoreError::UnknownModel(_)
        | CoreError::InvalidParameter(_)
        | CoreError::DimensionMismatch { .. }
        | CoreError::GridMismatch { .. } => CliError::Config(msg),
        _ => CliError::Solver(msg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, fn(&Context) -> Result<(), CliError>) = match &cli.command {
        Command::Instanton(a) => (a, cmd_instanton),
        Command::Prefactor(a) => (a, cmd_prefactor),
        Command::Estimate(a) => (a, cmd_estimate),
        Command::Sample(a) => (a, cmd_sample),
        Command::Compare(a) => (a, cmd_compare),
    };
    match Context::new(args).and_then(|ctx| run(&ctx)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Everything a subcommand needs: parsed config, resolved model, grid.
struct Context {
    args: CommonArgs,
    config: Config,
    model: ModelInstance,
    grid: TimeGrid,
}

impl Context {
    fn new(args: &CommonArgs) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(&args.config)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", args.config.display())))?;
        let config: Config = serde_json::from_str(&raw)
            .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
        let model = builtin_model(&config.model, &config.params).map_err(classify)?;
        let nt = args.nt.unwrap_or(config.nt);
        let grid = TimeGrid::new(nt, model.system.horizon()).map_err(classify)?;
        if config.mode != "tail" && config.mode != "mgf" {
            return Err(CliError::Config(format!(
                "mode must be \"tail\" or \"mgf\", got \"{}\"",
                config.mode
            )));
        }
        std::fs::create_dir_all(&args.out)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;
        Ok(Self {
            args: args.clone(),
            config,
            model,
            grid,
        })
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::default();
        if let Some(section) = &self.config.optimizer {
            if let Some(v) = &section.mu_schedule {
                cfg.mu_schedule = v.clone();
            }
            if let Some(v) = section.lbfgs_memory {
                cfg.lbfgs_memory = v;
            }
            if let Some(v) = section.lbfgs_max_iter {
                cfg.lbfgs_max_iter = v;
            }
            if let Some(v) = section.grad_tol {
                cfg.grad_tol = v;
            }
            if let Some(v) = section.residual_tol {
                cfg.residual_tol = v;
            }
            if let Some(v) = section.constraint_tol {
                cfg.constraint_tol = v;
            }
            if let Some(v) = section.initial_lambda {
                cfg.initial_lambda = v;
            }
        }
        cfg
    }

    fn spectrum_settings(&self) -> SpectrumSettings {
        SpectrumSettings {
            requested: self.args.m.unwrap_or(self.config.num_eigenvalues),
            tol: self.config.solver_tol,
            max_restarts: 400,
            seed: self.args.seed,
        }
    }

    fn divergence_policy(&self) -> Result<DivergencePolicy, CliError> {
        match self.config.divergence_policy.as_str() {
            "reject" => Ok(DivergencePolicy::Reject),
            "abort" => Ok(DivergencePolicy::Abort),
            other => Err(CliError::Config(format!(
                "divergence_policy must be \"reject\" or \"abort\", got \"{other}\""
            ))),
        }
    }

    fn require_z(&self) -> Result<f64, CliError> {
        self.config
            .z
            .ok_or_else(|| CliError::Config("missing field `z` (required in tail mode)".into()))
    }

    fn solve_instanton(&self) -> Result<InstantonSolution, CliError> {
        if let Some(dir) = &self.config.load_instanton {
            return load_instanton(self, dir);
        }
        let system = self.model.system.as_ref();
        let obs = self.model.observable.as_ref();
        let cfg = self.optimizer_config();
        match self.config.mode.as_str() {
            "mgf" => {
                let lambda = self.config.lambda.ok_or_else(|| {
                    CliError::Config("missing field `lambda` (required in mgf mode)".into())
                })?;
                find_instanton_mgf(system, obs, self.grid, lambda, &cfg).map_err(classify)
            }
            _ => {
                let z = self.require_z()?;
                find_instanton(system, obs, self.grid, z, &cfg).map_err(classify)
            }
        }
    }
}

fn write_state_csv(
    path: &Path,
    header: &str,
    rows: usize,
    dim: usize,
    grid: TimeGrid,
    data: &[f64],
) -> Result<(), CliError> {
    let mut out = String::from(header);
    out.push('\n');
    for k in 0..rows {
        out.push_str(&format!("{k},{}", fmt_float(grid.time(k))));
        for i in 0..dim {
            out.push(',');
            out.push_str(&fmt_float(data[k * dim + i]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

fn summary_json(ctx: &Context, sol: &InstantonSolution) -> String {
    let mode = match sol.mode {
        InstantonMode::Tail => "tail",
        InstantonMode::Mgf => "mgf",
    };
    format!(
        "{{\n  \"model\": \"{}\",\n  \"mode\": \"{}\",\n  \"nt\": {},\n  \"z\": {},\n  \"achieved_z\": {},\n  \"lambda_z\": {},\n  \"rate\": {},\n  \"iterations\": {},\n  \"converged\": {},\n  \"optimality_residual\": {},\n  \"constraint_violation\": {}\n}}\n",
        ctx.config.model,
        mode,
        ctx.grid.n_t(),
        fmt_float(sol.target_z),
        fmt_float(sol.achieved_z),
        fmt_float(sol.lambda_z),
        fmt_float(sol.rate),
        sol.iterations,
        sol.converged,
        fmt_float(sol.optimality_residual),
        fmt_float(sol.constraint_violation),
    )
}

fn write_instanton_files(ctx: &Context, sol: &InstantonSolution) -> Result<(), CliError> {
    let n = sol.eta_z.dim();
    let grid = ctx.grid;
    let comp_header = |prefix: &str| {
        let mut h = String::from("step,time");
        for i in 0..n {
            h.push_str(&format!(",{prefix}_{i}"));
        }
        h
    };
    write_state_csv(
        &ctx.args.out.join("eta.csv"),
        &comp_header("eta"),
        grid.n_t(),
        n,
        grid,
        sol.eta_z.as_slice(),
    )?;
    write_state_csv(
        &ctx.args.out.join("phi.csv"),
        &comp_header("phi"),
        grid.n_t() + 1,
        n,
        grid,
        sol.phi_z.as_slice(),
    )?;
    write_state_csv(
        &ctx.args.out.join("theta.csv"),
        &comp_header("theta"),
        grid.n_t() + 1,
        n,
        grid,
        sol.theta_z.as_slice(),
    )?;
    write_file(&ctx.args.out.join("summary.json"), &summary_json(ctx, sol))
}

/// Rebuild a solution from eta.csv + summary.json; the adjoint pair is
/// recomputed from the loaded control and multiplier, so downstream results
/// match the in-process pipeline exactly.
fn load_instanton(ctx: &Context, dir: &Path) -> Result<InstantonSolution, CliError> {
    let summary_raw = std::fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| CliError::Io(format!("cannot read summary.json: {e}")))?;
    let summary: serde_json::Value = serde_json::from_str(&summary_raw)
        .map_err(|e| CliError::Config(format!("summary.json: {e}")))?;
    let field = |name: &str| -> Result<f64, CliError> {
        summary
            .get(name)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| CliError::Config(format!("summary.json missing field `{name}`")))
    };
    let lambda = field("lambda_z")?;
    let target = field("z")?;
    let mode = match summary.get("mode").and_then(|v| v.as_str()) {
        Some("mgf") => InstantonMode::Mgf,
        _ => InstantonMode::Tail,
    };

    let eta_raw = std::fs::read_to_string(dir.join("eta.csv"))
        .map_err(|e| CliError::Io(format!("cannot read eta.csv: {e}")))?;
    let n = ctx.model.system.dim();
    let mut data = Vec::with_capacity(n * ctx.grid.n_t());
    for (idx, line) in eta_raw.lines().enumerate() {
        if idx == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 2 {
            return Err(CliError::Config(format!(
                "eta.csv row {idx}: expected {} fields, got {}",
                n + 2,
                fields.len()
            )));
        }
        for f in &fields[2..] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| CliError::Config(format!("eta.csv row {idx}: {e}")))?,
            );
        }
    }
    let eta = NoiseVector::from_data(ctx.grid, n, data).map_err(classify)?;

    let (grad_lf, ctx_adj) = gradient(
        ctx.model.system.as_ref(),
        ctx.model.observable.as_ref(),
        ctx.grid,
        &eta,
        lambda,
    )
    .map_err(classify)?;
    let mut residual = eta.clone();
    residual.add_scaled(-1.0, &grad_lf);
    let optimality_residual = residual.norm() / eta.norm().max(1e-12);
    let achieved = ctx_adj.observable_value;
    let rate = 0.5 * eta.norm_sq();
    Ok(InstantonSolution {
        eta_z: eta,
        phi_z: ctx_adj.phi,
        theta_z: ctx_adj.theta,
        lambda_z: lambda,
        rate,
        achieved_z: achieved,
        target_z: target,
        iterations: 0,
        converged: true,
        mode,
        optimality_residual,
        constraint_violation: (achieved - target).abs() / target.abs().max(1e-8),
    })
}

fn cmd_instanton(ctx: &Context) -> Result<(), CliError> {
    let sol = ctx.solve_instanton()?;
    write_instanton_files(ctx, &sol)?;
    println!(
        "instanton: z = {} lambda_z = {:.6} I = {:.6} iterations = {} converged = {}",
        sol.target_z, sol.lambda_z, sol.rate, sol.iterations, sol.converged
    );
    Ok(())
}

fn compute_breakdown(
    ctx: &Context,
    sol: &InstantonSolution,
) -> Result<PrefactorBreakdown, CliError> {
    let settings = ctx.spectrum_settings();
    compute_prefactor(
        ctx.model.system.as_ref(),
        ctx.model.observable.as_ref(),
        ctx.grid,
        sol,
        &settings,
    )
    .map_err(classify)
}

fn emit_spectra(ctx: &Context, breakdown: &PrefactorBreakdown) -> Result<(), CliError> {
    let rows = |eigs: &[f64], residuals: &[f64]| {
        let mut out = String::from("index,eigenvalue,residual\n");
        for (i, (ev, res)) in eigs.iter().zip(residuals).enumerate() {
            out.push_str(&format!("{i},{},{}\n", fmt_float(*ev), fmt_float(*res)));
        }
        out
    };
    write_file(
        &ctx.args.out.join("spectrum.csv"),
        &rows(&breakdown.hessian_eigenvalues, &breakdown.hessian_residuals),
    )?;
    write_file(
        &ctx.args.out.join("spectrum_regularized.csv"),
        &rows(
            &breakdown.regularized_eigenvalues,
            &breakdown.regularized_residuals,
        ),
    )
}

fn cmd_prefactor(ctx: &Context) -> Result<(), CliError> {
    let sol = ctx.solve_instanton()?;
    write_instanton_files(ctx, &sol)?;

    if sol.mode == InstantonMode::Mgf {
        let settings = ctx.spectrum_settings();
        let detail = compute_mgf_prefactor_detailed(
            ctx.model.system.as_ref(),
            ctx.model.observable.as_ref(),
            ctx.grid,
            &sol,
            &settings,
        )
        .map_err(classify)?;
        let json = format!(
            "{{\n  \"lambda\": {},\n  \"R_lambda\": {},\n  \"log_R\": {},\n  \"det2\": {},\n  \"trace_reg\": {},\n  \"M\": {}\n}}\n",
            fmt_float(sol.lambda_z),
            fmt_float(detail.r_lambda),
            fmt_float(detail.log_r),
            fmt_float(detail.det2),
            fmt_float(detail.trace_reg),
            detail.m_used
        );
        write_file(&ctx.args.out.join("mgf_prefactor.json"), &json)?;
        println!("mgf prefactor: R_lambda = {:.6}", detail.r_lambda);
        return Ok(());
    }

    if ctx.args.dense {
        // dense oracle route: assemble and factor the projected operator
        // explicitly to validate the iterative path on small problems
        let ws = std::sync::Arc::new(
            rare_sorm::OperatorWorkspace::new(
                ctx.model.system.as_ref(),
                ctx.model.observable.as_ref(),
                ctx.grid,
                &sol.context(),
            )
            .map_err(classify)?,
        );
        let projected = rare_sorm::compose_projected(&rare_sorm::second_variation(&ws), &sol.eta_z)
            .map_err(classify)?;
        let spectrum = dense_spectrum(&projected, DEFAULT_DENSE_CAP).map_err(classify)?;
        write_file(&ctx.args.out.join("spectrum_dense.csv"), &spectrum.to_csv())?;
    }

    let breakdown = compute_breakdown(ctx, &sol)?;
    write_file(&ctx.args.out.join("breakdown.csv"), &breakdown.to_csv())?;
    write_file(&ctx.args.out.join("breakdown.json"), &breakdown.to_json())?;
    if ctx.args.emit_spectrum {
        emit_spectra(ctx, &breakdown)?;
    }
    println!(
        "prefactor: C = {:.6} det2 = {:.6} trace = {:.6} quad = {:.6}",
        breakdown.c, breakdown.det2_projected, breakdown.trace_reg_projected, breakdown.quad_atilde
    );
    Ok(())
}

fn epsilon_list(ctx: &Context) -> Result<Vec<f64>, CliError> {
    let list = if let Some(list) = &ctx.config.epsilons {
        if list.is_empty() {
            return Err(CliError::Config("`epsilons` must be non-empty".into()));
        }
        list.clone()
    } else if let Some(e) = ctx.config.epsilon {
        vec![e]
    } else {
        return Err(CliError::Config(
            "missing field `epsilon` (or `epsilons`)".into(),
        ));
    };
    if let Some(bad) = list.iter().find(|&&e| !(e > 0.0)) {
        return Err(CliError::Config(format!(
            "noise strengths must be positive, got {bad}"
        )));
    }
    Ok(list)
}

fn cmd_estimate(ctx: &Context) -> Result<(), CliError> {
    let sol = ctx.solve_instanton()?;
    let breakdown = compute_breakdown(ctx, &sol)?;
    let epsilons = epsilon_list(ctx)?;
    let mut out = String::from("epsilon,log_probability,probability\n");
    for &eps in &epsilons {
        let log_p = log_tail_probability_parts(eps, sol.rate, breakdown.log_c);
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_float(eps),
            fmt_float(log_p),
            fmt_float(log_p.exp())
        ));
        println!("epsilon = {eps}: P = {:.4e}", log_p.exp());
    }
    write_file(&ctx.args.out.join("estimates.csv"), &out)
}

fn cmd_sample(ctx: &Context) -> Result<(), CliError> {
    let z = ctx.require_z()?;
    let epsilon = ctx
        .config
        .epsilon
        .ok_or_else(|| CliError::Config("missing field `epsilon`".into()))?;
    let n_samples = ctx
        .config
        .n_samples
        .ok_or_else(|| CliError::Config("missing field `n_samples`".into()))?;
    let est = estimate_tail(
        ctx.model.system.as_ref(),
        ctx.model.observable.as_ref(),
        ctx.grid,
        epsilon,
        z,
        n_samples,
        ctx.args.seed,
        ctx.args.workers,
        ctx.divergence_policy()?,
    )
    .map_err(classify)?;
    let mut out = String::from(
        "epsilon,z,p_hat,wilson95_lo,wilson95_hi,wilson99_lo,wilson99_hi,sorm_estimate,n_samples,n_diverged\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{},{},,{},{}\n",
        fmt_float(epsilon),
        fmt_float(z),
        fmt_float(est.p_hat),
        fmt_float(est.wilson_95.0),
        fmt_float(est.wilson_95.1),
        fmt_float(est.wilson_99.0),
        fmt_float(est.wilson_99.1),
        est.n_requested,
        est.n_diverged
    ));
    write_file(&ctx.args.out.join("mc.csv"), &out)?;
    println!(
        "mc: p_hat = {:.4e}  95% [{:.4e}, {:.4e}]  99% [{:.4e}, {:.4e}]  diverged = {}",
        est.p_hat,
        est.wilson_95.0,
        est.wilson_95.1,
        est.wilson_99.0,
        est.wilson_99.1,
        est.n_diverged
    );
    Ok(())
}

fn cmd_compare(ctx: &Context) -> Result<(), CliError> {
    let z_values = ctx
        .config
        .z_values
        .clone()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| CliError::Config("missing field `z_values`".into()))?;
    let epsilons = epsilon_list(ctx)?;
    let n_samples = ctx
        .config
        .n_samples
        .ok_or_else(|| CliError::Config("missing field `n_samples`".into()))?;

    let system = ctx.model.system.as_ref();
    let obs = ctx.model.observable.as_ref();
    let optimizer = ctx.optimizer_config();

    let mut points = Vec::with_capacity(z_values.len());
    let mut warm: Option<(NoiseVector, f64)> = None;
    for &z in &z_values {
        let mut local = optimizer.clone();
        if let Some((eta, lambda)) = &warm {
            local.initial_eta = Some(eta.clone());
            local.initial_lambda = *lambda;
        }
        let sol = find_instanton(system, obs, ctx.grid, z, &local).map_err(classify)?;
        warm = Some((sol.eta_z.clone(), sol.lambda_z));
        let breakdown = compute_breakdown(ctx, &sol)?;
        points.push(AsymptoticPoint {
            z,
            rate: sol.rate,
            log_prefactor: breakdown.log_c,
        });
    }

    let mc = McConfig {
        n_samples,
        seed: ctx.args.seed,
        workers: ctx.args.workers,
        policy: ctx.divergence_policy()?,
    };
    let table = compare_sweep(system, obs, ctx.grid, &epsilons, &points, &mc).map_err(classify)?;
    write_file(&ctx.args.out.join("compare.csv"), &table.to_csv())?;
    write_file(&ctx.args.out.join("compare_fit.csv"), &table.fit_to_csv())?;
    for cell in &table.cells {
        if let Some(mc_est) = &cell.mc {
            println!(
                "eps = {} z = {}: mc = {:.4e} [{:.4e}, {:.4e}]99  sorm = {:.4e}",
                cell.epsilon,
                cell.z,
                mc_est.p_hat,
                mc_est.wilson_99.0,
                mc_est.wilson_99.1,
                cell.sorm_estimate
            );
        } else {
            println!(
                "eps = {} z = {}: mc failed ({})  sorm = {:.4e}",
                cell.epsilon,
                cell.z,
                cell.mc_error.as_deref().unwrap_or("unknown"),
                cell.sorm_estimate
            );
        }
    }
    Ok(())
}
