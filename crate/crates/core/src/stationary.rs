//! Stationary solutions of the coupled system.
//!
//! Because the ODE components do not diffuse, a regular stationary solution
//! is slaved to the diffusing profile: U(x) = k(V(x)) with f(k(v), v) = 0,
//! and V solves the reduced scalar problem Laplacian V + h(V) = 0 with
//! h(v) = g(k(v), v).  Non-constant profiles are constructed by continuation
//! in an auxiliary diffusion parameter d: the perturbed problem
//!
//! ```text
//! d * Laplacian V + (1 - d) * (V - Vbar) + h(V) = 0
//! ```
//!
//! bifurcates from the constant branch where (1 - d) + h'(Vbar) = d * mu_k,
//! and at d = 1 it coincides with the original equation.  A state therefore
//! carries its (d_ell, v_bar) pair; every residual in this crate is measured
//! against the operator the state actually solves.

use crate::error::{CoreError, Result};
use crate::grid::{laplacian_eigenpairs, Grid, NeumannLaplacian};
use crate::linalg::solve_tridiag_pivoting;
use crate::model::{Equilibrium, SystemModel};
use nalgebra::{DMatrix, DVector};

/// How a stationary state was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Constant,
    LinearExplicit,
    Continuation,
    UserSupplied,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Constant => "constant",
            Provenance::LinearExplicit => "linear-explicit",
            Provenance::Continuation => "continuation",
            Provenance::UserSupplied => "user-supplied",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Provenance::Constant),
            "linear-explicit" => Ok(Provenance::LinearExplicit),
            "continuation" => Ok(Provenance::Continuation),
            "user-supplied" => Ok(Provenance::UserSupplied),
            other => Err(CoreError::StateFile(format!(
                "unknown provenance '{other}'"
            ))),
        }
    }
}

/// A discrete stationary state (U, V) of the (possibly d-perturbed) system.
#[derive(Debug, Clone)]
pub struct StationaryState {
    /// ODE components, one row per component, one column per node.
    pub u: DMatrix<f64>,
    /// Diffusing component at the nodes.
    pub v: DVector<f64>,
    /// Auxiliary diffusion parameter; 1 means the unmodified system.
    pub d_ell: f64,
    /// Pinning center of the (1 - d_ell) term (the constant branch value).
    pub v_bar: f64,
    pub provenance: Provenance,
    /// sup-norm of f(U, V) over the nodes.
    pub residual_f: f64,
    /// sup-norm of d * Lap V + (1 - d)(V - v_bar) + g(U, V) over the nodes.
    pub residual_pde: f64,
    /// Convergence thresholds this state is held to; Newton-produced states
    /// use the stationary tolerance, analytically assembled states are
    /// discretization-limited and use the coarser O(h^2) budget.
    pub tol_f: f64,
    pub tol_pde: f64,
}

impl StationaryState {
    pub fn n_ode(&self) -> usize {
        self.u.nrows()
    }

    pub fn m(&self) -> usize {
        self.v.len()
    }

    /// sup V - inf V; a constant state has zero oscillation.
    pub fn oscillation(&self) -> f64 {
        let max = self.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.v.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// sup-norm distance of V from the constant branch value.
    pub fn amplitude(&self) -> f64 {
        self.v
            .iter()
            .map(|x| (x - self.v_bar).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_converged(&self) -> bool {
        self.residual_f <= self.tol_f && self.residual_pde <= self.tol_pde
    }

    /// Recompute both residuals against the model (used after file loads).
    pub fn recompute_residuals(
        &mut self,
        model: &SystemModel,
        lap: &NeumannLaplacian,
    ) -> Result<()> {
        let (rf, rp) = residuals(model, lap, &self.u, &self.v, self.d_ell, self.v_bar)?;
        self.residual_f = rf;
        self.residual_pde = rp;
        Ok(())
    }
}

/// Convergence thresholds by provenance.  Newton-produced states answer for
/// the stationary solver tolerance; analytically assembled profiles are
/// discretization-limited, so their PDE budget scales with h^2 on coarse
/// grids.
fn provenance_tolerances(provenance: Provenance, h: f64) -> (f64, f64) {
    match provenance {
        Provenance::Constant | Provenance::Continuation => (1e-8, 1e-8),
        Provenance::LinearExplicit => (1e-10, 1e-4_f64.max(h * h)),
        Provenance::UserSupplied => (1e-4, 1e-4_f64.max(h * h)),
    }
}

fn residuals(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    u: &DMatrix<f64>,
    v: &DVector<f64>,
    d_ell: f64,
    v_bar: f64,
) -> Result<(f64, f64)> {
    let m = v.len();
    let lap_v = lap.apply(v);
    let mut rf: f64 = 0.0;
    let mut rp: f64 = 0.0;
    for i in 0..m {
        let ui = u.column(i).into_owned();
        let (fv, gv) = model.eval_rhs(&ui, v[i])?;
        rf = rf.max(fv.amax());
        rp = rp.max((d_ell * lap_v[i] + (1.0 - d_ell) * (v[i] - v_bar) + gv).abs());
    }
    Ok((rf, rp))
}

/// Newton tolerance for stationary solves.
pub const STATIONARY_TOL: f64 = 1e-10;
/// Tolerance of the inner ODE-branch solve.
pub const BRANCH_TOL: f64 = 1e-12;

/// Solve f(u, v) = 0 for the ODE components at a fixed v.
///
/// Models with f identically zero accept any u (the guess is returned);
/// degeneracy is the caller's concern via [`branch_is_degenerate`].
pub fn solve_branch_k(model: &SystemModel, v: f64, guess: &DVector<f64>) -> Result<DVector<f64>> {
    let mut u = guess.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let f = model.f(&u, v);
        if f.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("ODE branch solve for model '{}'", model.name()),
                point: format!("v = {v}, u sup {:.3e}", u.amax()),
            });
        }
        residual = f.amax();
        if residual < BRANCH_TOL {
            return Ok(u);
        }
        let j = model.f_u(&u, v);
        let step = match j.clone().lu().solve(&f) {
            Some(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => {
                return Err(CoreError::Singular(format!(
                    "f_u singular during ODE branch solve at v = {v}"
                )))
            }
        };
        u -= step;
        if u.amax() > 1e8 {
            break;
        }
    }
    Err(CoreError::NoConvergence {
        context: format!(
            "ODE branch solve at v = {v} (last iterate sup {:.3e})",
            u.amax()
        ),
        residual,
        iterations: 50,
    })
}

/// True when f_u at (u, v) is singular, i.e. the branch u = k(v) is not
/// locally unique there.
pub fn branch_is_degenerate(model: &SystemModel, u: &DVector<f64>, v: f64) -> bool {
    model.f_u(u, v).determinant().abs() < 1e-10
}

/// Reduced scalar reaction h(v) = g(k(v), v); also returns the branch point
/// so sweeps can warm-start the next node.
pub fn reduced_h(model: &SystemModel, v: f64, guess: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let u = solve_branch_k(model, v, guess)?;
    Ok((model.g(&u, v), u))
}

/// Chain-rule derivative of the reduced reaction:
/// h'(v) = -g_u f_u^{-1} f_v + g_v at (k(v), v).
pub fn reduced_h_prime(model: &SystemModel, v: f64, guess: &DVector<f64>) -> Result<f64> {
    let u = solve_branch_k(model, v, guess)?;
    h_prime_at(model, &u, v)
}

fn h_prime_at(model: &SystemModel, u: &DVector<f64>, v: f64) -> Result<f64> {
    let a = model.f_u(u, v);
    if a.determinant().abs() < 1e-12 {
        return Err(CoreError::DegenerateBranch(format!(
            "f_u singular at v = {v}; the reduced reaction has no derivative there"
        )));
    }
    let ainv_b = a
        .lu()
        .solve(&model.f_v(u, v))
        .ok_or_else(|| CoreError::Singular("f_u solve failed in reduced derivative".into()))?;
    Ok(model.g_v(u, v) - model.g_u(u, v).dot(&ainv_b))
}

/// V together with the slaved ODE components produced by an elliptic solve.
#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub v: DVector<f64>,
    pub u: DMatrix<f64>,
}

/// Newton solve of d * Lap V + (1 - d)(V - eq.v) + h(V) = 0.
///
/// The iteration stops when the sup-norm residual drops below 1e-10; the
/// Jacobian is tridiagonal (diffusion plus the diagonal h' samples).
pub fn solve_reduced_elliptic(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    d: f64,
    eq: &Equilibrium,
    v_init: &DVector<f64>,
) -> Result<EllipticSolution> {
    newton_reduced(model, grid, lap, d, eq, v_init, None)
}

/// Same equation, with the constant branch deflated so Newton cannot fall
/// back onto V = eq.v.  Scalar deflation only rescales the Newton step, so
/// the extra cost per iteration is one inner product.
fn newton_reduced(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    d: f64,
    eq: &Equilibrium,
    v_init: &DVector<f64>,
    deflate_constant: Option<()>,
) -> Result<EllipticSolution> {
    let m = grid.m();
    if v_init.len() != m {
        return Err(CoreError::InvalidArgument(format!(
            "initial profile has {} nodes, grid has {m}",
            v_init.len()
        )));
    }
    if !(d.is_finite() && d > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "diffusion parameter must be positive, got {d}"
        )));
    }
    let n = model.n_ode();
    let mut v = v_init.clone();
    let mut warm = DMatrix::from_fn(n, m, |r, _| eq.u[r]);
    let (lsub, ldiag, lsup) = lap.bands();
    let w = lap.weights();
    let mut residual = f64::INFINITY;
    let max_iter = if deflate_constant.is_some() { 80 } else { 40 };

    for iter in 0..max_iter {
        let lap_v = lap.apply(&v);
        let mut f = DVector::zeros(m);
        let mut hp = DVector::zeros(m);
        for i in 0..m {
            let ui = solve_branch_k(model, v[i], &warm.column(i).into_owned())?;
            let gi = model.g(&ui, v[i]);
            hp[i] = h_prime_at(model, &ui, v[i])?;
            warm.set_column(i, &ui);
            f[i] = d * lap_v[i] + (1.0 - d) * (v[i] - eq.v) + gi;
        }
        if !f.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "reduced elliptic residual".into(),
                point: format!("iteration {iter}"),
            });
        }
        residual = f.amax();
        if residual < STATIONARY_TOL {
            return Ok(EllipticSolution { v, u: warm });
        }
        let sub: Vec<f64> = lsub.iter().map(|x| d * x).collect();
        let diag: Vec<f64> = (0..m).map(|i| d * ldiag[i] + (1.0 - d) + hp[i]).collect();
        let sup: Vec<f64> = lsup.iter().map(|x| d * x).collect();
        let p = solve_tridiag_pivoting(&sub, &diag, &sup, f.as_slice()).ok_or_else(|| {
            CoreError::Singular(format!(
                "reduced elliptic Jacobian singular at iteration {iter} (d = {d})"
            ))
        })?;
        let p = DVector::from_vec(p);
        let mut step = -&p;
        if deflate_constant.is_some() {
            // G = m(V) F with m = 1 + 1/<z,z>, z = V - eq.v; the
            // Sherman-Morrison solve collapses to scaling the plain step by
            // 1/(1 + alpha) with alpha = <grad m, p> / m.
            let mut z_norm2 = 0.0;
            let mut zp = 0.0;
            for i in 0..m {
                let z = v[i] - eq.v;
                z_norm2 += w[i] * z * z;
                zp += w[i] * z * p[i];
            }
            let z_norm2 = z_norm2.max(1e-300);
            let mfac = 1.0 + 1.0 / z_norm2;
            let alpha = (-2.0 * zp / (z_norm2 * z_norm2)) / mfac;
            let mut denom = 1.0 + alpha;
            if denom.abs() < 1e-2 {
                denom = 1e-2_f64.copysign(denom);
            }
            step = -&p / denom;
        }
        // Keep the iteration inside the trusted region.
        let cap = 1.0;
        let sup_step = step.amax();
        if sup_step > cap {
            step *= cap / sup_step;
        }
        v += step;
        if v.amax() > 1e8 {
            break;
        }
    }
    Err(CoreError::NoConvergence {
        context: format!("reduced elliptic solve at d = {d}"),
        residual,
        iterations: max_iter,
    })
}

/// Solve the ODE branch at every node of V and package the state.
///
/// Errors with a degenerate-branch diagnostic when f_u is singular along the
/// profile (the ODE components are then not determined by V and must be
/// supplied externally).
pub fn assemble_stationary(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    v: &DVector<f64>,
    u_seed: &DVector<f64>,
    d_ell: f64,
    v_bar: f64,
    provenance: Provenance,
) -> Result<StationaryState> {
    let m = v.len();
    let n = model.n_ode();
    let mut u = DMatrix::zeros(n, m);
    let mut warm = u_seed.clone();
    for i in 0..m {
        let ui = solve_branch_k(model, v[i], &warm)?;
        if branch_is_degenerate(model, &ui, v[i]) {
            return Err(CoreError::DegenerateBranch(format!(
                "f_u singular at node {i} (v = {:.6}); supply the ODE components explicitly",
                v[i]
            )));
        }
        u.set_column(i, &ui);
        warm = ui;
    }
    from_parts(model, lap, u, v.clone(), d_ell, v_bar, provenance)
}

/// Package externally supplied components (no branch solve, no degeneracy
/// requirement) and measure the residuals.
pub fn from_parts(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    u: DMatrix<f64>,
    v: DVector<f64>,
    d_ell: f64,
    v_bar: f64,
    provenance: Provenance,
) -> Result<StationaryState> {
    if u.ncols() != v.len() || u.nrows() != model.n_ode() {
        return Err(CoreError::InvalidArgument(format!(
            "component shapes inconsistent: U is {}x{}, V has {} nodes, model has {} components",
            u.nrows(),
            u.ncols(),
            v.len(),
            model.n_ode()
        )));
    }
    let (rf, rp) = residuals(model, lap, &u, &v, d_ell, v_bar)?;
    let (tol_f, tol_pde) = provenance_tolerances(provenance, lap.spacing());
    Ok(StationaryState {
        u,
        v,
        d_ell,
        v_bar,
        provenance,
        residual_f: rf,
        residual_pde: rp,
        tol_f,
        tol_pde,
    })
}

/// Explicit mode-profile state for linear models: V = Vbar + a cos(k pi x/L),
/// U = Ubar - A0^{-1} B0 (V - Vbar) per node.  Exact in f for linear f; the
/// PDE residual is discretization-limited.
pub fn linear_mode_state(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    eq: &Equilibrium,
    k: usize,
    amplitude: f64,
) -> Result<StationaryState> {
    let mats = model.equilibrium_matrices(eq)?;
    if mats.a0.determinant().abs() < 1e-12 {
        return Err(CoreError::DegenerateBranch(
            "A0 singular: the mode profile has no slaved ODE components".into(),
        ));
    }
    let dir = mats
        .a0
        .clone()
        .lu()
        .solve(&mats.b0)
        .ok_or_else(|| CoreError::Singular("A0 solve failed".into()))?;
    let profile = grid.cosine_profile(k, amplitude);
    let m = grid.m();
    let n = model.n_ode();
    let mut u = DMatrix::zeros(n, m);
    let mut v = DVector::zeros(m);
    for i in 0..m {
        v[i] = eq.v + profile[i];
        for r in 0..n {
            u[(r, i)] = eq.u[r] - dir[r] * profile[i];
        }
    }
    from_parts(model, lap, u, v, 1.0, eq.v, Provenance::LinearExplicit)
}

/// Mode-profile state in which every ODE component copies the V profile:
/// U_r = Ubar_r + (V - Vbar).  Stationary for the degenerate pair whose f
/// vanishes identically and whose g is linear with coefficient sum zero at
/// the equilibrium.
pub fn copy_mode_state(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    eq: &Equilibrium,
    k: usize,
    amplitude: f64,
) -> Result<StationaryState> {
    let profile = grid.cosine_profile(k, amplitude);
    let m = grid.m();
    let n = model.n_ode();
    let mut u = DMatrix::zeros(n, m);
    let mut v = DVector::zeros(m);
    for i in 0..m {
        v[i] = eq.v + profile[i];
        for r in 0..n {
            u[(r, i)] = eq.u[r] + profile[i];
        }
    }
    from_parts(model, lap, u, v, 1.0, eq.v, Provenance::UserSupplied)
}

/// One accepted point on a non-constant branch.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub d_ell: f64,
    /// sup-norm of V - Vbar.
    pub amplitude: f64,
    pub state: StationaryState,
}

/// Tuning knobs for [`continue_branch`].
#[derive(Debug, Clone)]
pub struct ContinuationSettings {
    /// Predictor amplitude for the first point off the constant branch.
    pub epsilon: f64,
    /// Initial pseudo-arclength step for the fallback phase.
    pub arc_ds: f64,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            arc_ds: 0.05,
        }
    }
}

/// Oscillation below which a profile counts as the constant branch.
pub const CONSTANT_FILTER: f64 = 1e-6;

/// Trace non-constant solutions of the d-perturbed reduced problem near the
/// mode-k bifurcation of the constant branch.
///
/// Natural continuation in d (with the constant branch deflated) is tried
/// first from both sides of the critical d; if it produces nothing — e.g.
/// when the branch is vertical in d, as for linear models — a
/// pseudo-arclength sweep through the bifurcation point takes over.
#[allow(clippy::too_many_arguments)]
pub fn continue_branch(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    eq: &Equilibrium,
    k: usize,
    d_range: (f64, f64),
    steps: usize,
    settings: &ContinuationSettings,
) -> Result<Vec<BranchPoint>> {
    let (lo, hi) = d_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi && lo > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "d-range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    if steps == 0 || k == 0 {
        return Err(CoreError::InvalidArgument(
            "need steps >= 1 and mode index k >= 1".into(),
        ));
    }
    let hp = reduced_h_prime(model, eq.v, &eq.u)?;
    let mu_k = grid.analytic_neumann_eigenvalues(k + 1)[k];
    let d_star = (1.0 + hp) / (1.0 + mu_k);
    let pairs = laplacian_eigenpairs(lap, k + 1)?;
    let phi = pairs[k].phi.clone();
    let phi_sup = &phi / phi.amax();

    let mut points: Vec<BranchPoint> = Vec::new();

    // Natural continuation, marching away from the critical d on each side.
    for dir in [-1.0f64, 1.0] {
        let start = d_star.clamp(lo, hi);
        let end = if dir < 0.0 { lo } else { hi };
        if (end - start) * dir <= 0.0 {
            continue;
        }
        let dstep = (end - start).abs() / steps as f64;
        if dstep == 0.0 {
            continue;
        }
        let mut predictor: Option<DVector<f64>> = None;
        for j in 1..=steps {
            let d = start + dir * dstep * j as f64;
            let sol = match &predictor {
                Some(vprev) => newton_reduced(model, grid, lap, d, eq, vprev, Some(())),
                None => first_point(model, grid, lap, d, eq, &phi_sup, settings.epsilon),
            };
            match sol {
                Ok(s) => {
                    let osc = oscillation_of(&s.v);
                    if osc > CONSTANT_FILTER {
                        predictor = Some(s.v.clone());
                        points.push(make_point(model, lap, s, d, eq)?);
                    } else if predictor.is_some() {
                        // Collapsed back onto the constant branch: stop here.
                        break;
                    }
                }
                Err(_) => {
                    if predictor.is_some() {
                        break;
                    }
                    // Keep trying fresh predictors closer to the range edge.
                }
            }
        }
    }

    if points.is_empty() {
        points = arclength_sweep(
            model,
            grid,
            lap,
            eq,
            d_star,
            (lo, hi),
            steps,
            &phi,
            settings,
        )?;
    }

    if points.is_empty() {
        // Diagnostic: eigenvalues of the linearized constant branch across
        // the range, so the caller can see which mode (if any) goes critical.
        let mut history = String::new();
        for j in 0..=8 {
            let d = lo + (hi - lo) * j as f64 / 8.0;
            let crit: f64 = (0..=6)
                .map(|kk| {
                    let mu = grid.analytic_neumann_eigenvalues(kk + 1)[kk];
                    -d * mu + (1.0 - d) + hp
                })
                .fold(
                    f64::INFINITY,
                    |acc, e| if e.abs() < acc.abs() { e } else { acc },
                );
            history.push_str(&format!("d={d:.4}: {crit:+.4e}; "));
        }
        return Err(CoreError::BranchNotFound { lo, hi, history });
    }
    Ok(points)
}

fn oscillation_of(v: &DVector<f64>) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn make_point(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    sol: EllipticSolution,
    d: f64,
    eq: &Equilibrium,
) -> Result<BranchPoint> {
    let state = from_parts(model, lap, sol.u, sol.v, d, eq.v, Provenance::Continuation)?;
    Ok(BranchPoint {
        d_ell: d,
        amplitude: state.amplitude(),
        state,
    })
}

/// First departure from the constant branch: deflated Newton from
/// Vbar + eps * phi_k, walking a geometric ladder of predictor amplitudes.
fn first_point(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    d: f64,
    eq: &Equilibrium,
    phi_sup: &DVector<f64>,
    eps0: f64,
) -> Result<EllipticSolution> {
    let ladder = [1.0, 0.5, 2.0, 0.25, 4.0, 0.125, 8.0];
    let mut last_err = None;
    for factor in ladder {
        let eps = eps0 * factor;
        let v0 = DVector::from_fn(grid.m(), |i, _| eq.v + eps * phi_sup[i]);
        match newton_reduced(model, grid, lap, d, eq, &v0, Some(())) {
            Ok(sol) => {
                if oscillation_of(&sol.v) > CONSTANT_FILTER {
                    return Ok(sol);
                }
                last_err = Some(CoreError::NoConvergence {
                    context: format!("deflated solve collapsed to the constant branch at d = {d}"),
                    residual: 0.0,
                    iterations: 0,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| CoreError::NoConvergence {
        context: format!("no predictor amplitude converged at d = {d}"),
        residual: f64::NAN,
        iterations: 0,
    }))
}

/// Pseudo-arclength continuation of the extended system F(V, d) = 0 from the
/// bifurcation point, with the weighted tangent constraint closing the
/// bordered Jacobian.  Handles branches that are vertical in d.
#[allow(clippy::too_many_arguments)]
fn arclength_sweep(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    eq: &Equilibrium,
    d_star: f64,
    (lo, hi): (f64, f64),
    steps: usize,
    phi: &DVector<f64>,
    settings: &ContinuationSettings,
) -> Result<Vec<BranchPoint>> {
    let m = grid.m();
    let n = model.n_ode();
    let w = lap.weights();
    let mut points = Vec::new();

    let mut v = DVector::from_element(m, eq.v);
    let mut d = d_star.clamp(lo, hi);
    // Tangent: the critical mode, no d component (correct for a vertical
    // branch; re-estimated from secants as soon as two points exist).
    let mut tau_v = phi.clone();
    let mut tau_d = 0.0;
    let mut ds = settings.arc_ds;
    let ds_min = settings.arc_ds / 64.0;
    let mut warm = DMatrix::from_fn(n, m, |r, _| eq.u[r]);
    let mut consecutive_failures = 0;

    'outer: while points.len() < steps && ds >= ds_min {
        let mut vp = &v + &tau_v * ds;
        let mut dp = d + tau_d * ds;
        // Corrector: Newton on [F; tangent constraint].
        let mut ok = false;
        for _ in 0..12 {
            let lap_v = lap.apply(&vp);
            let mut f = DVector::zeros(m + 1);
            let mut hp = DVector::zeros(m);
            let mut failed = false;
            for i in 0..m {
                let ui = match solve_branch_k(model, vp[i], &warm.column(i).into_owned()) {
                    Ok(u) => u,
                    Err(_) => {
                        failed = true;
                        break;
                    }
                };
                let gi = model.g(&ui, vp[i]);
                hp[i] = match h_prime_at(model, &ui, vp[i]) {
                    Ok(h) => h,
                    Err(_) => {
                        failed = true;
                        break;
                    }
                };
                warm.set_column(i, &ui);
                f[i] = dp * lap_v[i] + (1.0 - dp) * (vp[i] - eq.v) + gi;
            }
            if failed || !f.iter().all(|x| x.is_finite()) {
                break;
            }
            let mut constraint = tau_d * (dp - (d + tau_d * ds));
            for i in 0..m {
                constraint += w[i] * tau_v[i] * (vp[i] - (v[i] + tau_v[i] * ds));
            }
            f[m] = constraint;
            let resid = f.rows(0, m).amax();
            if resid < STATIONARY_TOL && constraint.abs() < 1e-12 {
                ok = true;
                break;
            }
            // Bordered Jacobian: [ d*Lap + diag((1-d) + h') , F_d ; w.tau , tau_d ].
            let (lsub, ldiag, lsup) = lap.bands();
            let mut jac = DMatrix::zeros(m + 1, m + 1);
            for i in 0..m {
                jac[(i, i)] = dp * ldiag[i] + (1.0 - dp) + hp[i];
                if i > 0 {
                    jac[(i, i - 1)] = dp * lsub[i];
                }
                if i + 1 < m {
                    jac[(i, i + 1)] = dp * lsup[i];
                }
                jac[(i, m)] = lap_v[i] - (vp[i] - eq.v);
                jac[(m, i)] = w[i] * tau_v[i];
            }
            jac[(m, m)] = tau_d;
            let rhs = -f;
            match jac.lu().solve(&rhs) {
                Some(step) if step.iter().all(|x| x.is_finite()) => {
                    let sup = step.amax();
                    let capped = if sup > 1.0 { step * (1.0 / sup) } else { step };
                    for i in 0..m {
                        vp[i] += capped[i];
                    }
                    dp += capped[m];
                }
                _ => break,
            }
        }
        if !ok {
            ds *= 0.5;
            consecutive_failures += 1;
            if consecutive_failures > 20 {
                break 'outer;
            }
            continue;
        }
        consecutive_failures = 0;
        // Secant tangent for the next step.
        let mut sec_v = &vp - &v;
        let sec_d = dp - d;
        let mut nrm2 = sec_d * sec_d;
        for i in 0..m {
            nrm2 += w[i] * sec_v[i] * sec_v[i];
        }
        let nrm = nrm2.sqrt();
        if nrm > 0.0 {
            sec_v /= nrm;
            tau_v = sec_v;
            tau_d = sec_d / nrm;
        }
        v = vp;
        d = dp;
        ds = (ds * 1.3).min(settings.arc_ds * 4.0);
        if d < lo - 1e-9 || d > hi + 1e-9 {
            break;
        }
        if oscillation_of(&v) > CONSTANT_FILTER {
            let sol = EllipticSolution {
                v: v.clone(),
                u: warm.clone(),
            };
            points.push(make_point(model, lap, sol, d, eq)?);
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// State-table serialization: a plain-text CSV with '#' header lines.
// ---------------------------------------------------------------------------

/// A stationary state with enough context to reload it.
#[derive(Debug, Clone)]
pub struct StateTable {
    pub model: String,
    pub length: f64,
    pub state: StationaryState,
}

/// Serialize a state as a column table `x,V,U_1..U_n` with a commented header
/// naming the model, grid, continuation parameter, residuals, provenance, and
/// the producing configuration.
pub fn to_table(
    state: &StationaryState,
    model_name: &str,
    grid: &Grid,
    config_sha256: &str,
    version: &str,
) -> String {
    let n = state.n_ode();
    let mut out = String::new();
    out.push_str("# stationary-state v1\n");
    out.push_str(&format!("# model: {model_name}\n"));
    out.push_str(&format!("# length: {:.17e}\n", grid.len_interval()));
    out.push_str(&format!("# nodes: {}\n", state.m()));
    out.push_str(&format!("# n_ode: {n}\n"));
    out.push_str(&format!("# d_ell: {:.17e}\n", state.d_ell));
    out.push_str(&format!("# v_bar: {:.17e}\n", state.v_bar));
    out.push_str(&format!("# provenance: {}\n", state.provenance.as_str()));
    out.push_str(&format!("# residual_f: {:.17e}\n", state.residual_f));
    out.push_str(&format!("# residual_pde: {:.17e}\n", state.residual_pde));
    out.push_str(&format!("# config_sha256: {config_sha256}\n"));
    out.push_str(&format!("# version: {version}\n"));
    out.push('x');
    out.push_str(",V");
    for r in 1..=n {
        out.push_str(&format!(",U_{r}"));
    }
    out.push('\n');
    for i in 0..state.m() {
        out.push_str(&format!("{:.17e},{:.17e}", grid.nodes()[i], state.v[i]));
        for r in 0..n {
            out.push_str(&format!(",{:.17e}", state.u[(r, i)]));
        }
        out.push('\n');
    }
    out
}

/// Parse a table produced by [`to_table`].  Residuals are taken from the
/// header; call [`StationaryState::recompute_residuals`] to re-verify them
/// against a model.
pub fn from_table(text: &str) -> Result<StateTable> {
    let mut header = std::collections::HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut saw_columns = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, val)) = rest.split_once(':') {
                header.insert(k.trim().to_string(), val.trim().to_string());
            }
            continue;
        }
        if !saw_columns {
            if !line.starts_with('x') {
                return Err(CoreError::StateFile(format!(
                    "expected column header, found '{line}'"
                )));
            }
            saw_columns = true;
            continue;
        }
        let vals: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| CoreError::StateFile(format!("bad number '{tok}'")))
            })
            .collect();
        rows.push(vals?);
    }
    let get = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| CoreError::StateFile(format!("missing header field '{key}'")))
    };
    let parse_f = |key: &str| -> Result<f64> {
        get(key)?
            .parse::<f64>()
            .map_err(|_| CoreError::StateFile(format!("bad numeric header '{key}'")))
    };
    let model = get("model")?.clone();
    let length = parse_f("length")?;
    let nodes: usize = get("nodes")?
        .parse()
        .map_err(|_| CoreError::StateFile("bad 'nodes' header".into()))?;
    let n: usize = get("n_ode")?
        .parse()
        .map_err(|_| CoreError::StateFile("bad 'n_ode' header".into()))?;
    let d_ell = parse_f("d_ell")?;
    let v_bar = parse_f("v_bar")?;
    let provenance = Provenance::parse(get("provenance")?)?;
    let residual_f = parse_f("residual_f")?;
    let residual_pde = parse_f("residual_pde")?;
    if rows.len() != nodes {
        return Err(CoreError::StateFile(format!(
            "header claims {nodes} nodes, table has {}",
            rows.len()
        )));
    }
    let mut v = DVector::zeros(nodes);
    let mut u = DMatrix::zeros(n, nodes);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n + 2 {
            return Err(CoreError::StateFile(format!(
                "row {i} has {} columns, expected {}",
                row.len(),
                n + 2
            )));
        }
        v[i] = row[1];
        for r in 0..n {
            u[(r, i)] = row[2 + r];
        }
    }
    let h = if nodes > 1 {
        length / (nodes - 1) as f64
    } else {
        length
    };
    let (tol_f, tol_pde) = provenance_tolerances(provenance, h);
    Ok(StateTable {
        model,
        length,
        state: StationaryState {
            u,
            v,
            d_ell,
            v_bar,
            provenance,
            residual_f,
            residual_pde,
            tol_f,
            tol_pde,
        },
    })
}
