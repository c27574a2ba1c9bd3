//! `rdode`: config-driven pipeline over the reaction-diffusion-ODE library.
//!
//! Subcommands walk the pipeline equilibria -> branch -> spectrum ->
//! simulate, and `verify` runs it end to end, cross-checking the simulated
//! growth rate against the spectral bound.  Every output file embeds the
//! SHA-256 of the config that produced it; reruns with the same config and
//! seed are byte-identical.
//!
//! Exit codes: 0 success, 1 bad arguments / config / input files, 2 no
//! equilibria found, 3 branch not found, 4 simulation failure.

mod config;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use rdode_core::grid::{Grid, NeumannLaplacian};
use rdode_core::model::{self, Equilibrium, SystemModel, BIFURCATION_MATCH_TOL};
use rdode_core::sim::{self, EscapeReport};
use rdode_core::spectral::{classify, ClassifySettings, SpectrumReport};
use rdode_core::stationary::{self, BranchPoint, ContinuationSettings, StationaryState};
use rdode_core::CoreError;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "rdode",
    version,
    about = "Stationary solutions, spectra, and instability experiments for reaction-diffusion-ODE systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Find constant equilibria and their bifurcation indices.
    Equilibria(CommonArgs),
    /// Continue the non-constant stationary branch and write state files.
    Branch(CommonArgs),
    /// Classify the spectrum of the linearization at a stored state.
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
        /// Stationary-state table produced by `branch`.
        #[arg(long)]
        state: PathBuf,
    },
    /// Run the escape experiment from a stored state and fit growth rates.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Stationary-state table produced by `branch`.
        #[arg(long)]
        state: PathBuf,
    },
    /// Full pipeline with a consolidated spectral-vs-simulated verdict.
    Verify(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and the RDODE_OUT variable.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

type CmdResult<T = ()> = Result<T, (i32, String)>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Equilibria(c) => cmd_equilibria(c),
        Cmd::Branch(c) => cmd_branch(c),
        Cmd::Spectrum { common, state } => cmd_spectrum(common, state),
        Cmd::Simulate { common, state } => cmd_simulate(common, state),
        Cmd::Verify(c) => cmd_verify(c),
    };
    match result {
        Ok(()) => {}
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(code);
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

#[derive(Serialize, Clone, Copy)]
struct Versions {
    cli: &'static str,
    core: &'static str,
}

fn versions() -> Versions {
    Versions {
        cli: env!("CARGO_PKG_VERSION"),
        core: rdode_core::VERSION,
    }
}

/// Single version string for CSV headers.
fn version_line() -> String {
    format!(
        "rdode-cli {} rdode-core {}",
        env!("CARGO_PKG_VERSION"),
        rdode_core::VERSION
    )
}

#[derive(Serialize, Clone)]
struct Meta<'a> {
    config_sha256: &'a str,
    versions: Versions,
    model: &'a str,
}

struct Env {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    model: SystemModel,
    grid: Grid,
    lap: NeumannLaplacian,
}

fn setup(common: &CommonArgs) -> CmdResult<Env> {
    let (mut cfg, hash) = config::load(&common.config).map_err(|m| (1, m))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("RDODE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&out).map_err(|e| {
        (
            1,
            format!("cannot create output directory {}: {e}", out.display()),
        )
    })?;
    let model = SystemModel::from_spec(&cfg.model).map_err(|e| (1, e.to_string()))?;
    let grid = Grid::new(cfg.grid.length, cfg.grid.nodes).map_err(|e| (1, e.to_string()))?;
    let lap = NeumannLaplacian::new(&grid);
    Ok(Env {
        cfg,
        hash,
        out,
        model,
        grid,
        lap,
    })
}

fn write_out(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| (1, format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| (1, format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_out(path, &text)
}

// ---------------------------------------------------------------------------
// equilibria

#[derive(Serialize)]
struct IdentityOut {
    lhs: f64,
    rhs: f64,
    diff: f64,
}

#[derive(Serialize)]
struct EqRow {
    u: Vec<f64>,
    v: f64,
    a0: Vec<Vec<f64>>,
    b0: Vec<f64>,
    c0: Vec<f64>,
    d0: f64,
    det_identity: Option<IdentityOut>,
    bifurcation_k: Option<usize>,
    note: Option<String>,
}

#[derive(Serialize)]
struct EquilibriaFile<'a> {
    #[serde(flatten)]
    meta: Meta<'a>,
    grid: &'a config::GridConfig,
    equilibria: &'a [EqRow],
    diagnostics: &'a [String],
}

fn find_sorted_equilibria(model: &SystemModel) -> (Vec<Equilibrium>, Vec<String>) {
    let (mut eqs, diags) = model.find_equilibria(&model.default_guesses());
    eqs.sort_by(|a, b| {
        a.v.total_cmp(&b.v).then_with(|| {
            for (x, y) in a.u.iter().zip(b.u.iter()) {
                let c = x.total_cmp(y);
                if c != std::cmp::Ordering::Equal {
                    return c;
                }
            }
            std::cmp::Ordering::Equal
        })
    });
    (eqs, diags)
}

fn equilibrium_rows(env: &Env, eqs: &[Equilibrium]) -> CmdResult<Vec<EqRow>> {
    let mode_count = env.cfg.continuation.mode_k + 10;
    let mu = env
        .grid
        .analytic_neumann_eigenvalues(mode_count.min(env.grid.m()));
    let mut rows = Vec::new();
    for eq in eqs {
        let mats = env
            .model
            .equilibrium_matrices(eq)
            .map_err(|e| (1, e.to_string()))?;
        let (identity, k, note) = match model::det_identity(&mats) {
            Ok(id) => {
                let k = model::bifurcation_condition(&mats, &mu, BIFURCATION_MATCH_TOL)
                    .map_err(|e| (1, e.to_string()))?;
                (
                    Some(IdentityOut {
                        lhs: id.lhs,
                        rhs: id.rhs,
                        diff: id.diff,
                    }),
                    k,
                    None,
                )
            }
            Err(e) => (None, None, Some(e.to_string())),
        };
        rows.push(EqRow {
            u: eq.u.iter().copied().collect(),
            v: eq.v,
            a0: (0..mats.a0.nrows())
                .map(|r| mats.a0.row(r).iter().copied().collect())
                .collect(),
            b0: mats.b0.iter().copied().collect(),
            c0: mats.c0.iter().copied().collect(),
            d0: mats.d0,
            det_identity: identity,
            bifurcation_k: k,
            note,
        });
    }
    Ok(rows)
}

fn write_equilibria_files(env: &Env, rows: &[EqRow], diags: &[String]) -> CmdResult {
    let file = EquilibriaFile {
        meta: Meta {
            config_sha256: &env.hash,
            versions: versions(),
            model: env.model.name(),
        },
        grid: &env.cfg.grid,
        equilibria: rows,
        diagnostics: diags,
    };
    write_json(&env.out.join("equilibria.json"), &file)?;
    let n = env.model.n_ode();
    let mut csv = format!(
        "# equilibria v1\n# config_sha256: {}\n# version: {}\n",
        env.hash,
        version_line()
    );
    csv.push('v');
    for r in 1..=n {
        csv.push_str(&format!(",u_{r}"));
    }
    csv.push_str(",identity_lhs,identity_rhs,identity_diff,bifurcation_k\n");
    for row in rows {
        csv.push_str(&format!("{:.17e}", row.v));
        for x in &row.u {
            csv.push_str(&format!(",{x:.17e}"));
        }
        match &row.det_identity {
            Some(id) => csv.push_str(&format!(
                ",{:.17e},{:.17e},{:.17e}",
                id.lhs, id.rhs, id.diff
            )),
            None => csv.push_str(",,,"),
        }
        match row.bifurcation_k {
            Some(k) => csv.push_str(&format!(",{k}\n")),
            None => csv.push_str(",\n"),
        }
    }
    write_out(&env.out.join("equilibria.csv"), &csv)
}

fn cmd_equilibria(common: &CommonArgs) -> CmdResult {
    let env = setup(common)?;
    let (eqs, diags) = find_sorted_equilibria(&env.model);
    let rows = equilibrium_rows(&env, &eqs)?;
    write_equilibria_files(&env, &rows, &diags)?;
    if eqs.is_empty() {
        return Err((
            2,
            format!("no equilibria found for model {}", env.model.name()),
        ));
    }
    let matched: Vec<String> = rows
        .iter()
        .filter_map(|r| r.bifurcation_k.map(|k| format!("k={k} at v={:.6}", r.v)))
        .collect();
    println!(
        "equilibria: {} found for {}; bifurcation indices: {}",
        eqs.len(),
        env.model.name(),
        if matched.is_empty() {
            "none".into()
        } else {
            matched.join(", ")
        }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// branch

enum EqSelection<'a> {
    /// Equilibrium whose reduced-reaction slope matches mode `k`.
    Matched(&'a Equilibrium),
    /// No match, but the ODE block is singular everywhere a match was
    /// sought; an explicit mode state is the only option.
    SingularOde(&'a Equilibrium),
    NoMatch,
}

fn select_equilibrium<'a>(env: &Env, eqs: &'a [Equilibrium]) -> CmdResult<EqSelection<'a>> {
    let k = env.cfg.continuation.mode_k;
    let mode_count = (k + 10).min(env.grid.m());
    let mu = env.grid.analytic_neumann_eigenvalues(mode_count);
    let mut singular = None;
    for eq in eqs {
        let mats = env
            .model
            .equilibrium_matrices(eq)
            .map_err(|e| (1, e.to_string()))?;
        match model::det_identity(&mats) {
            Ok(_) => {
                let found = model::bifurcation_condition(&mats, &mu, BIFURCATION_MATCH_TOL)
                    .map_err(|e| (1, e.to_string()))?;
                if found == Some(k) {
                    return Ok(EqSelection::Matched(eq));
                }
            }
            Err(_) => {
                if singular.is_none() {
                    singular = Some(eq);
                }
            }
        }
    }
    Ok(match singular {
        Some(eq) => EqSelection::SingularOde(eq),
        None => EqSelection::NoMatch,
    })
}

fn run_continuation(env: &Env, eq: &Equilibrium) -> CmdResult<Vec<BranchPoint>> {
    let c = &env.cfg.continuation;
    let settings = ContinuationSettings {
        epsilon: c.epsilon,
        arc_ds: c.arc_ds,
    };
    stationary::continue_branch(
        &env.model,
        &env.grid,
        &env.lap,
        eq,
        c.mode_k,
        (c.d_range[0], c.d_range[1]),
        c.steps,
        &settings,
    )
    .map_err(|e| match e {
        CoreError::BranchNotFound { .. } | CoreError::DegenerateBranch(_) => (3, e.to_string()),
        other => (1, other.to_string()),
    })
}

#[derive(Serialize)]
struct EqPoint {
    u: Vec<f64>,
    v: f64,
}

#[derive(Serialize)]
struct BranchRow {
    index: usize,
    d_ell: f64,
    amplitude: f64,
    oscillation: f64,
    residual_f: f64,
    residual_pde: f64,
    file: String,
}

#[derive(Serialize)]
struct BranchFile<'a> {
    #[serde(flatten)]
    meta: Meta<'a>,
    equilibrium: EqPoint,
    mode_k: usize,
    d_range: [f64; 2],
    points: &'a [BranchRow],
}

fn write_branch_files(
    env: &Env,
    eq: &Equilibrium,
    pts: &[BranchPoint],
) -> CmdResult<Vec<BranchRow>> {
    let ver = version_line();
    let mut rows = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let fname = format!("state_{i:03}.csv");
        let table = stationary::to_table(&p.state, env.model.name(), &env.grid, &env.hash, &ver);
        write_out(&env.out.join(&fname), &table)?;
        rows.push(BranchRow {
            index: i,
            d_ell: p.d_ell,
            amplitude: p.amplitude,
            oscillation: p.state.oscillation(),
            residual_f: p.state.residual_f,
            residual_pde: p.state.residual_pde,
            file: fname,
        });
    }
    let file = BranchFile {
        meta: Meta {
            config_sha256: &env.hash,
            versions: versions(),
            model: env.model.name(),
        },
        equilibrium: EqPoint {
            u: eq.u.iter().copied().collect(),
            v: eq.v,
        },
        mode_k: env.cfg.continuation.mode_k,
        d_range: env.cfg.continuation.d_range,
        points: &rows,
    };
    write_json(&env.out.join("branch.json"), &file)?;
    let mut csv = format!(
        "# branch v1\n# config_sha256: {}\n# version: {}\n",
        env.hash,
        version_line()
    );
    csv.push_str("index,d_ell,amplitude,oscillation,residual_f,residual_pde,file\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.index, r.d_ell, r.amplitude, r.oscillation, r.residual_f, r.residual_pde, r.file
        ));
    }
    write_out(&env.out.join("branch.csv"), &csv)?;
    Ok(rows)
}

fn cmd_branch(common: &CommonArgs) -> CmdResult {
    let env = setup(common)?;
    let (eqs, _) = find_sorted_equilibria(&env.model);
    if eqs.is_empty() {
        return Err((
            2,
            format!("no equilibria found for model {}", env.model.name()),
        ));
    }
    let eq = match select_equilibrium(&env, &eqs)? {
        EqSelection::Matched(eq) => eq,
        EqSelection::SingularOde(_) => {
            return Err((3, format!(
                "the ODE block is singular at every equilibrium of {}; no regular branch exists (verify builds an explicit mode state instead)",
                env.model.name()
            )));
        }
        EqSelection::NoMatch => {
            return Err((
                3,
                format!(
                    "no equilibrium of {} carries bifurcation index k={}",
                    env.model.name(),
                    env.cfg.continuation.mode_k
                ),
            ));
        }
    };
    let pts = run_continuation(&env, eq)?;
    let rows = write_branch_files(&env, eq, &pts)?;
    println!(
        "branch: {} points in d_ell range [{:.6}, {:.6}], amplitudes up to {:.6}",
        rows.len(),
        env.cfg.continuation.d_range[0],
        env.cfg.continuation.d_range[1],
        rows.iter().map(|r| r.amplitude).fold(0.0, f64::max)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrum

fn load_state(env: &Env, path: &Path) -> CmdResult<(Grid, NeumannLaplacian, StationaryState)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (1, format!("cannot read state file {}: {e}", path.display())))?;
    let table = stationary::from_table(&text).map_err(|e| (1, e.to_string()))?;
    if table.model != env.model.name() {
        return Err((
            1,
            format!(
                "state file {} was produced for model '{}' but the config names '{}'",
                path.display(),
                table.model,
                env.model.name()
            ),
        ));
    }
    let grid = Grid::new(table.length, table.state.m()).map_err(|e| (1, e.to_string()))?;
    let lap = NeumannLaplacian::new(&grid);
    let mut state = table.state;
    state
        .recompute_residuals(&env.model, &lap)
        .map_err(|e| (1, e.to_string()))?;
    Ok((grid, lap, state))
}

#[derive(Serialize)]
struct SpectrumFile<'a> {
    #[serde(flatten)]
    meta: Meta<'a>,
    state_file: String,
    report: &'a SpectrumReport,
}

fn run_spectrum(env: &Env, grid: &Grid, state: &StationaryState) -> CmdResult<SpectrumReport> {
    let settings = ClassifySettings {
        dense_cap: env.cfg.spectral.dense_cap,
        lambda_max: env.cfg.spectral.lambda_max,
    };
    classify(&env.model, grid, state, &settings).map_err(|e| (1, e.to_string()))
}

fn write_spectrum_files(env: &Env, state_file: &str, report: &SpectrumReport) -> CmdResult {
    let file = SpectrumFile {
        meta: Meta {
            config_sha256: &env.hash,
            versions: versions(),
            model: env.model.name(),
        },
        state_file: state_file.to_string(),
        report,
    };
    write_json(&env.out.join("spectrum.json"), &file)?;
    let mut text = format!(
        "# spectrum v1\n# config_sha256: {}\n# version: {}\n",
        env.hash,
        version_line()
    );
    text.push_str(&report.to_text());
    write_out(&env.out.join("spectrum.txt"), &text)
}

fn cmd_spectrum(common: &CommonArgs, state_path: &Path) -> CmdResult {
    let env = setup(common)?;
    let (grid, _lap, state) = load_state(&env, state_path)?;
    let report = run_spectrum(&env, &grid, &state)?;
    write_spectrum_files(&env, &state_path.display().to_string(), &report)?;
    println!(
        "spectrum: verdict {} with bound {:.6e}",
        report.verdict, report.spectral_bound
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct EscapeFile<'a> {
    #[serde(flatten)]
    meta: Meta<'a>,
    state_file: String,
    report: &'a EscapeReport,
    traces: &'a [String],
}

fn sim_error(e: CoreError) -> (i32, String) {
    match e {
        CoreError::InvalidArgument(_) => (1, e.to_string()),
        other => (4, other.to_string()),
    }
}

fn run_escape(
    env: &Env,
    grid: &Grid,
    lap: &NeumannLaplacian,
    state: &StationaryState,
) -> CmdResult<(EscapeReport, Vec<sim::SimulationTrace>)> {
    let s = &env.cfg.simulation;
    sim::escape_test_with_traces(
        &env.model,
        grid,
        lap,
        state,
        &s.eps_list,
        s.delta,
        s.t_end,
        s.dt,
    )
    .map_err(sim_error)
}

fn write_escape_files(
    env: &Env,
    state_file: &str,
    report: &EscapeReport,
    traces: &[sim::SimulationTrace],
) -> CmdResult<Vec<String>> {
    let ver = version_line();
    let mut names = Vec::new();
    for (i, tr) in traces.iter().enumerate() {
        let fname = format!("trace_{i:02}.csv");
        write_out(
            &env.out.join(&fname),
            &sim::trace_to_table(tr, &env.hash, &ver),
        )?;
        names.push(fname);
    }
    let file = EscapeFile {
        meta: Meta {
            config_sha256: &env.hash,
            versions: versions(),
            model: env.model.name(),
        },
        state_file: state_file.to_string(),
        report,
        traces: &names,
    };
    write_json(&env.out.join("escape.json"), &file)?;
    let mut text = format!(
        "# escape v1\n# config_sha256: {}\n# version: {}\n",
        env.hash, ver
    );
    text.push_str(&report.to_text());
    write_out(&env.out.join("escape.txt"), &text)?;
    Ok(names)
}

fn cmd_simulate(common: &CommonArgs, state_path: &Path) -> CmdResult {
    let env = setup(common)?;
    let (grid, lap, state) = load_state(&env, state_path)?;
    let (report, traces) = run_escape(&env, &grid, &lap, &state)?;
    write_escape_files(&env, &state_path.display().to_string(), &report, &traces)?;
    println!(
        "simulate: escape test {} over {} amplitudes (delta {:.3e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.runs.len(),
        report.delta
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

#[derive(Serialize)]
struct VerifyFile<'a> {
    #[serde(flatten)]
    meta: Meta<'a>,
    equilibrium_count: usize,
    state_source: &'static str,
    d_ell: f64,
    amplitude: f64,
    verdict: String,
    spectral_bound: f64,
    lambda_bar: Option<f64>,
    escape_passed: bool,
    expected_stable: bool,
    growth_rate: Option<f64>,
    rate_relative_error: Option<f64>,
    status: String,
}

fn cmd_verify(common: &CommonArgs) -> CmdResult {
    let env = setup(common)?;
    let (eqs, diags) = find_sorted_equilibria(&env.model);
    let rows = equilibrium_rows(&env, &eqs)?;
    write_equilibria_files(&env, &rows, &diags)?;
    if eqs.is_empty() {
        return Err((
            2,
            format!("no equilibria found for model {}", env.model.name()),
        ));
    }

    // Build the stationary state under scrutiny: a continuation point when a
    // regular branch bifurcates, otherwise an explicit mode state for models
    // whose ODE block is singular.
    let (state, source) = match select_equilibrium(&env, &eqs)? {
        EqSelection::Matched(eq) => {
            let pts = run_continuation(&env, eq)?;
            let rows = write_branch_files(&env, eq, &pts)?;
            let best = rows
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.amplitude.total_cmp(&b.amplitude))
                .map(|(i, _)| i)
                .expect("continuation returned at least one point");
            (pts[best].state.clone(), "continuation")
        }
        EqSelection::SingularOde(eq) => {
            let state = stationary::copy_mode_state(
                &env.model,
                &env.grid,
                &env.lap,
                eq,
                env.cfg.continuation.mode_k,
                env.cfg.continuation.fallback_amplitude,
            )
            .map_err(|e| (3, e.to_string()))?;
            (state, "copy-mode")
        }
        EqSelection::NoMatch => {
            return Err((
                3,
                format!(
                    "no equilibrium of {} carries bifurcation index k={}",
                    env.model.name(),
                    env.cfg.continuation.mode_k
                ),
            ));
        }
    };

    let report = run_spectrum(&env, &env.grid, &state)?;
    write_spectrum_files(&env, source, &report)?;

    let (escape, traces) = run_escape(&env, &env.grid, &env.lap, &state)?;
    write_escape_files(&env, source, &escape, &traces)?;

    // Consolidate: a strictly positive spectral bound must be corroborated
    // by escape and by a matching fitted rate; a nonpositive bound must not
    // produce escape.
    let expect_unstable = report.spectral_bound > 1e-6;
    let mut growth = None;
    let mut rel_err = None;
    let mut status = "ok".to_string();
    let mut exit: CmdResult = Ok(());
    if expect_unstable {
        let smallest = escape
            .runs
            .iter()
            .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
            .expect("escape report has at least one run");
        growth = smallest.fitted_rate;
        match (escape.passed, growth) {
            (false, _) => {
                status = "spectral bound positive but escape test failed".into();
                exit = Err((4, status.clone()));
            }
            (true, None) => {
                status = "no in-band growth window to fit a rate".into();
                exit = Err((4, status.clone()));
            }
            (true, Some(rate)) => {
                let rel = (rate - report.spectral_bound).abs() / report.spectral_bound;
                rel_err = Some(rel);
                if rel > 0.05 {
                    status = format!(
                        "fitted rate {rate:.6e} deviates from spectral bound {:.6e} by {:.1}%",
                        report.spectral_bound,
                        rel * 100.0
                    );
                    exit = Err((4, status.clone()));
                }
            }
        }
    } else if escape.passed {
        status = "spectral bound nonpositive but the escape test passed".into();
        exit = Err((4, status.clone()));
    }
    let expected_stable = !expect_unstable;

    let file = VerifyFile {
        meta: Meta {
            config_sha256: &env.hash,
            versions: versions(),
            model: env.model.name(),
        },
        equilibrium_count: eqs.len(),
        state_source: source,
        d_ell: state.d_ell,
        amplitude: state.amplitude(),
        verdict: report.verdict.to_string(),
        spectral_bound: report.spectral_bound,
        lambda_bar: report.lambda_bar,
        escape_passed: escape.passed,
        expected_stable,
        growth_rate: growth,
        rate_relative_error: rel_err,
        status: status.clone(),
    };
    write_json(&env.out.join("verify.json"), &file)?;

    if exit.is_ok() {
        if expected_stable {
            println!(
                "verify: ok (verdict {}, bound {:.6e}, no escape as expected)",
                report.verdict, report.spectral_bound
            );
        } else {
            println!(
                "verify: ok (verdict {}, bound {:.6e}, fitted rate {:.6e})",
                report.verdict,
                report.spectral_bound,
                growth.unwrap()
            );
        }
    }
    exit
}
