//! Time integration and instability experiments.
//!
//! The evolution system is stepped with an IMEX scheme: the stiff diffusion
//! term is treated with the trapezoidal rule, the pointwise reactions (and
//! the (1 - d_ell)(v - v_bar) pinning term of modified stationary states)
//! explicitly.  The ODE components advance pointwise with no spatial
//! coupling.  On top of the stepper sit the perturbation experiments: escape
//! tests in the sup norm over all components, growth-rate fits inside a
//! fixed linear-regime band, and the Taylor-remainder growth check that the
//! nonlinear instability argument requires.

use crate::error::{CoreError, Result};
use crate::grid::{Grid, NeumannLaplacian};
use crate::model::SystemModel;
use crate::spectral;
use crate::stationary::StationaryState;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Sup-norm threshold past which a trajectory counts as blown up.
pub const BLOWUP_CAP: f64 = 1e6;
/// Deviation band inside which growth rates are fitted.
pub const FIT_BAND: (f64, f64) = (1e-8, 1e-2);
/// Minimum contiguous in-band samples for a rate fit.
pub const MIN_FIT_SAMPLES: usize = 10;

/// Instantaneous fields of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// ODE components, one row per component.
    pub u: DMatrix<f64>,
    pub v: DVector<f64>,
    pub t: f64,
}

impl SimState {
    pub fn sup_norm(&self) -> f64 {
        let su = if self.u.is_empty() {
            0.0
        } else {
            self.u.amax()
        };
        su.max(self.v.amax())
    }
}

/// Which stationary problem the flow belongs to: d_ell = 1 is the plain
/// system, otherwise the diffusion-perturbed one whose states the
/// continuation produces.
#[derive(Debug, Clone, Copy)]
pub struct SimContext {
    pub d_ell: f64,
    pub v_bar: f64,
}

impl SimContext {
    pub fn unmodified() -> Self {
        Self {
            d_ell: 1.0,
            v_bar: 0.0,
        }
    }

    pub fn of(state: &StationaryState) -> Self {
        Self {
            d_ell: state.d_ell,
            v_bar: state.v_bar,
        }
    }
}

/// IMEX stepper with the implicit tridiagonal factorization cached.
pub struct Stepper<'a> {
    model: &'a SystemModel,
    lap: &'a NeumannLaplacian,
    ctx: SimContext,
    dt: f64,
    // Thomas factorization of I - (dt/2) kappa Lap (diagonally dominant, no
    // pivoting needed).
    mult: Vec<f64>,
    diag_f: Vec<f64>,
    sup: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        model: &'a SystemModel,
        lap: &'a NeumannLaplacian,
        ctx: SimContext,
        dt: f64,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "time step must be positive, got {dt}"
            )));
        }
        if !(ctx.d_ell.is_finite() && ctx.d_ell > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "diffusion parameter must be positive, got {}",
                ctx.d_ell
            )));
        }
        let m = lap.m();
        let (lsub, ldiag, lsup) = lap.bands();
        let a = 0.5 * dt * ctx.d_ell;
        let mut mult = vec![0.0; m];
        let mut diag_f = vec![0.0; m];
        let mut sup = vec![0.0; m];
        diag_f[0] = 1.0 - a * ldiag[0];
        for i in 0..m {
            if i + 1 < m {
                sup[i] = -a * lsup[i];
            }
            if i > 0 {
                let s = -a * lsub[i];
                mult[i] = s / diag_f[i - 1];
                diag_f[i] = (1.0 - a * ldiag[i]) - mult[i] * sup[i - 1];
            }
        }
        Ok(Self {
            model,
            lap,
            ctx,
            dt,
            mult,
            diag_f,
            sup,
        })
    }

    fn solve_implicit(&self, mut b: DVector<f64>) -> DVector<f64> {
        let m = b.len();
        for i in 1..m {
            b[i] -= self.mult[i] * b[i - 1];
        }
        b[m - 1] /= self.diag_f[m - 1];
        for i in (0..m - 1).rev() {
            b[i] = (b[i] - self.sup[i] * b[i + 1]) / self.diag_f[i];
        }
        b
    }

    /// One IMEX step.  Errors with a blow-up diagnostic when the sup norm
    /// leaves [0, BLOWUP_CAP] or turns non-finite.
    pub fn step(&self, s: &mut SimState) -> Result<()> {
        let m = s.v.len();
        let n = s.u.nrows();
        let dt = self.dt;
        let kappa = self.ctx.d_ell;
        let shift = 1.0 - self.ctx.d_ell;
        let lap_v = self.lap.apply(&s.v);
        let mut rhs = DVector::zeros(m);
        let mut new_u = DMatrix::zeros(n, m);
        for i in 0..m {
            let ui = s.u.column(i).into_owned();
            let f = self.model.f(&ui, s.v[i]);
            let g = self.model.g(&ui, s.v[i]);
            for r in 0..n {
                new_u[(r, i)] = ui[r] + dt * f[r];
            }
            rhs[i] =
                s.v[i] + 0.5 * dt * kappa * lap_v[i] + dt * (g + shift * (s.v[i] - self.ctx.v_bar));
        }
        let new_v = self.solve_implicit(rhs);
        s.u = new_u;
        s.v = new_v;
        s.t += dt;
        let norm = s.sup_norm();
        if !norm.is_finite() || norm > BLOWUP_CAP {
            return Err(CoreError::BlowUp {
                t: s.t,
                norm,
                cap: BLOWUP_CAP,
            });
        }
        Ok(())
    }
}

/// One-off step (builds the implicit factorization each call; loops should
/// use [`Stepper`] directly).
pub fn step(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    ctx: SimContext,
    s: &SimState,
    dt: f64,
) -> Result<SimState> {
    let stepper = Stepper::new(model, lap, ctx, dt)?;
    let mut out = s.clone();
    stepper.step(&mut out)?;
    Ok(out)
}

/// Recorded deviation history of one trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    /// sup over all n+1 components of the distance to the reference state.
    pub deviation_norms: Vec<f64>,
    pub dev_v: Vec<f64>,
    pub dev_u: Vec<f64>,
    pub fitted_rate: Option<f64>,
    pub fit_window: Option<(f64, f64)>,
    /// True when the trajectory hit the blow-up cap and was truncated.
    pub blew_up: bool,
    /// Largest per-step violation of the discrete flux balance
    /// d/dt mean(v) = mean(g + pinning); zero up to roundoff by construction.
    pub max_flux_imbalance: f64,
}

fn deviation(s: &SimState, reference: &StationaryState) -> (f64, f64, f64) {
    let dv = (&s.v - &reference.v).amax();
    let du = if s.u.is_empty() {
        0.0
    } else {
        (&s.u - &reference.u).amax()
    };
    (dv.max(du), dv, du)
}

/// Integrate from `init` to t = t_end, recording the deviation from
/// `reference` on a stride that keeps at most ~4000 samples.  A blow-up
/// truncates the trace and sets the flag instead of erroring.
pub fn simulate(
    model: &SystemModel,
    lap: &NeumannLaplacian,
    init: SimState,
    t_end: f64,
    dt: f64,
    reference: &StationaryState,
) -> Result<SimulationTrace> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "final time must be positive, got {t_end}"
        )));
    }
    if !(dt.is_finite() && dt > 0.0 && dt <= t_end) {
        return Err(CoreError::InvalidArgument(format!(
            "need 0 < dt <= t_end, got dt = {dt}, t_end = {t_end}"
        )));
    }
    if init.v.len() != reference.m() || init.u.nrows() != reference.n_ode() {
        return Err(CoreError::InvalidArgument(
            "initial state and reference state have different shapes".into(),
        ));
    }
    let ctx = SimContext::of(reference);
    let stepper = Stepper::new(model, lap, ctx, dt)?;
    let nsteps = (t_end / dt).ceil() as usize;
    let stride = nsteps.div_ceil(4000).max(1);
    let mut s = init;
    let mut trace = SimulationTrace {
        times: Vec::new(),
        deviation_norms: Vec::new(),
        dev_v: Vec::new(),
        dev_u: Vec::new(),
        fitted_rate: None,
        fit_window: None,
        blew_up: false,
        max_flux_imbalance: 0.0,
    };
    let record = |trace: &mut SimulationTrace, s: &SimState| {
        let (d, dv, du) = deviation(s, reference);
        trace.times.push(s.t);
        trace.deviation_norms.push(d);
        trace.dev_v.push(dv);
        trace.dev_u.push(du);
    };
    record(&mut trace, &s);
    let shift = 1.0 - ctx.d_ell;
    for k in 0..nsteps {
        // Flux-balance diagnostic: the trapezoidal diffusion update conserves
        // the weighted mean exactly, so the mean moves by dt * mean(g + pin).
        let mean_before = lap.mean(&s.v);
        let mut mean_reaction = 0.0;
        {
            let w = lap.weights();
            let total: f64 = w.iter().sum();
            for (i, (&wi, &vi)) in w.iter().zip(s.v.iter()).enumerate() {
                let ui = s.u.column(i).into_owned();
                mean_reaction += wi * (model.g(&ui, vi) + shift * (vi - ctx.v_bar));
            }
            mean_reaction /= total;
        }
        match stepper.step(&mut s) {
            Ok(()) => {}
            Err(CoreError::BlowUp { .. }) => {
                trace.blew_up = true;
                record(&mut trace, &s);
                return Ok(trace);
            }
            Err(e) => return Err(e),
        }
        let imbalance = (lap.mean(&s.v) - mean_before - dt * mean_reaction).abs();
        trace.max_flux_imbalance = trace.max_flux_imbalance.max(imbalance);
        if (k + 1) % stride == 0 || k + 1 == nsteps {
            record(&mut trace, &s);
        }
    }
    Ok(trace)
}

/// What to add to a stationary state before simulating.
#[derive(Debug, Clone)]
pub enum PerturbSpec<'a> {
    /// Cosine mode k of the grid, applied to V only.
    Mode { k: usize },
    /// Explicit profile, e.g. the dominant spectral mode; U part optional.
    Profile {
        u: Option<&'a DMatrix<f64>>,
        v: &'a DVector<f64>,
    },
    /// Seeded uniform noise; `on_u` extends it to the ODE components.
    Noise { seed: u64, on_u: bool },
}

/// Normalized perturbation: the sup norm over all perturbed components is
/// exactly eps.
pub fn perturb(
    state: &StationaryState,
    grid: &Grid,
    spec: &PerturbSpec,
    eps: f64,
) -> Result<SimState> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "perturbation amplitude must be positive, got {eps}"
        )));
    }
    let m = state.m();
    let n = state.n_ode();
    if grid.m() != m {
        return Err(CoreError::InvalidArgument(
            "state and grid node counts differ".into(),
        ));
    }
    let (du, dv) = match spec {
        PerturbSpec::Mode { k } => (DMatrix::zeros(n, m), grid.cosine_profile(*k, 1.0)),
        PerturbSpec::Profile { u, v } => {
            if v.len() != m {
                return Err(CoreError::InvalidArgument(
                    "perturbation profile has the wrong node count".into(),
                ));
            }
            let du = match u {
                Some(mat) => {
                    if mat.nrows() != n || mat.ncols() != m {
                        return Err(CoreError::InvalidArgument(
                            "perturbation U block has the wrong shape".into(),
                        ));
                    }
                    (*mat).clone()
                }
                None => DMatrix::zeros(n, m),
            };
            (du, (*v).clone())
        }
        PerturbSpec::Noise { seed, on_u } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let dv = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let du = if *on_u {
                DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
            } else {
                DMatrix::zeros(n, m)
            };
            (du, dv)
        }
    };
    let sup = dv.amax().max(if du.is_empty() { 0.0 } else { du.amax() });
    if sup == 0.0 {
        return Err(CoreError::InvalidArgument(
            "perturbation profile is identically zero".into(),
        ));
    }
    let scale = eps / sup;
    Ok(SimState {
        u: &state.u + du * scale,
        v: &state.v + dv * scale,
        t: 0.0,
    })
}

/// Least-squares exponential fit of a trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub rate: f64,
    pub window: (f64, f64),
    pub samples: usize,
    /// log deviation at the window start predicted by the fit.
    pub intercept: f64,
}

/// Slope of log(deviation) over the longest contiguous run of samples inside
/// the fit band.
pub fn growth_rate(trace: &SimulationTrace) -> Result<RateFit> {
    let (lo, hi) = FIT_BAND;
    let in_band: Vec<bool> = trace
        .deviation_norms
        .iter()
        .map(|&d| d >= lo && d <= hi)
        .collect();
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, &ok) in in_band.iter().enumerate() {
        match (ok, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.map(|(bs, be)| i - s > be - bs).unwrap_or(true) {
                    best = Some((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        let i = in_band.len();
        if best.map(|(bs, be)| i - s > be - bs).unwrap_or(true) {
            best = Some((s, i));
        }
    }
    let (s, e) =
        best.ok_or_else(|| CoreError::Fit("no samples inside the deviation fit band".into()))?;
    let count = e - s;
    if count < MIN_FIT_SAMPLES {
        return Err(CoreError::Fit(format!(
            "only {count} contiguous in-band samples, need {MIN_FIT_SAMPLES}"
        )));
    }
    let ts = &trace.times[s..e];
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, d) in ts.iter().zip(&trace.deviation_norms[s..e]) {
        let y = d.ln();
        sx += t;
        sy += y;
        sxx += t * t;
        sxy += t * y;
    }
    let nf = count as f64;
    let denom = nf * sxx - sx * sx;
    if denom <= 0.0 {
        return Err(CoreError::Fit(
            "degenerate time window for the rate fit".into(),
        ));
    }
    let rate = (nf * sxy - sx * sy) / denom;
    let intercept = (sy - rate * sx) / nf;
    Ok(RateFit {
        rate,
        window: (ts[0], ts[count - 1]),
        samples: count,
        intercept,
    })
}

/// The perturbation direction an escape experiment uses: the dominant
/// spectral mode when one is available, otherwise the top mode of the
/// reduced operator at lambda = 0.
#[derive(Debug, Clone)]
pub struct PerturbationChoice {
    pub u: Option<DMatrix<f64>>,
    pub v: DVector<f64>,
    /// Expected linear growth rate, when the spectral side produced one.
    pub rate_hint: Option<f64>,
}

pub fn choose_perturbation_mode(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    state: &StationaryState,
) -> Result<PerturbationChoice> {
    let field = spectral::linearize(model, grid, state)?;
    let fp = spectral::default_lambda_max(lap, &field)
        .and_then(|lm| spectral::find_fixed_point(lap, &field, lm))
        .ok()
        .flatten();
    let lambda = fp.map(|f| f.lambda).unwrap_or(0.0);
    match spectral::dominant_mode(lap, &field, lambda) {
        Ok((u, psi)) => Ok(PerturbationChoice {
            u: Some(u),
            v: psi,
            rate_hint: fp.map(|f| f.lambda),
        }),
        Err(_) => Ok(PerturbationChoice {
            u: None,
            v: grid.cosine_profile(1, 1.0),
            rate_hint: fp.map(|f| f.lambda),
        }),
    }
}

/// One amplitude of the escape experiment.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeRun {
    pub epsilon: f64,
    pub escaped: bool,
    pub t_escape: Option<f64>,
    pub max_deviation: f64,
    pub fitted_rate: Option<f64>,
    pub blew_up: bool,
}

/// Escape-threshold experiment over a ladder of perturbation sizes.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeReport {
    /// True when every amplitude crossed the threshold before t_end.
    pub passed: bool,
    pub delta: f64,
    pub t_end: f64,
    pub runs: Vec<EscapeRun>,
}

impl EscapeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "escape_test: {}\n",
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out.push_str(&format!("delta: {:.6e}\n", self.delta));
        out.push_str(&format!("t_end: {:.6e}\n", self.t_end));
        for r in &self.runs {
            out.push_str(&format!(
                "run: eps={:.3e} escaped={} t_escape={} max_dev={:.6e} rate={}{}\n",
                r.epsilon,
                r.escaped,
                r.t_escape
                    .map(|t| format!("{t:.4}"))
                    .unwrap_or_else(|| "-".into()),
                r.max_deviation,
                r.fitted_rate
                    .map(|x| format!("{x:.6}"))
                    .unwrap_or_else(|| "-".into()),
                if r.blew_up { " (blow-up)" } else { "" },
            ));
        }
        out
    }
}

/// For each eps, perturb the state along the dominant mode and watch whether
/// the deviation crosses the eps-independent threshold delta before t_end.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_escape_test(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    state: &StationaryState,
    eps_list: &[f64],
    delta: f64,
    t_end: f64,
    dt: f64,
) -> Result<EscapeReport> {
    escape_test_with_traces(model, grid, lap, state, eps_list, delta, t_end, dt)
        .map(|(report, _)| report)
}

/// [`lyapunov_escape_test`] that also hands back the trace of every run,
/// with the fit annotations filled in.
#[allow(clippy::too_many_arguments)]
pub fn escape_test_with_traces(
    model: &SystemModel,
    grid: &Grid,
    lap: &NeumannLaplacian,
    state: &StationaryState,
    eps_list: &[f64],
    delta: f64,
    t_end: f64,
    dt: f64,
) -> Result<(EscapeReport, Vec<SimulationTrace>)> {
    if eps_list.is_empty() {
        return Err(CoreError::InvalidArgument(
            "need at least one perturbation amplitude".into(),
        ));
    }
    if !(delta.is_finite() && delta > 0.0 && delta < BLOWUP_CAP) {
        return Err(CoreError::InvalidArgument(format!(
            "escape threshold must lie in (0, {BLOWUP_CAP:.0e}), got {delta}"
        )));
    }
    let choice = choose_perturbation_mode(model, grid, lap, state)?;
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for &eps in eps_list {
        let init = perturb(
            state,
            grid,
            &PerturbSpec::Profile {
                u: choice.u.as_ref(),
                v: &choice.v,
            },
            eps,
        )?;
        let mut trace = simulate(model, lap, init, t_end, dt, state)?;
        let mut t_escape = None;
        let mut max_dev: f64 = 0.0;
        for (t, d) in trace.times.iter().zip(&trace.deviation_norms) {
            max_dev = max_dev.max(*d);
            if t_escape.is_none() && *d > delta {
                t_escape = Some(*t);
            }
        }
        if trace.blew_up && t_escape.is_none() {
            // The cap exceeds delta by construction, so a blow-up escaped.
            t_escape = trace.times.last().copied();
        }
        let fit = growth_rate(&trace).ok();
        trace.fitted_rate = fit.map(|f| f.rate);
        trace.fit_window = fit.map(|f| f.window);
        runs.push(EscapeRun {
            epsilon: eps,
            escaped: t_escape.is_some(),
            t_escape,
            max_deviation: max_dev,
            fitted_rate: fit.map(|f| f.rate),
            blew_up: trace.blew_up,
        });
        traces.push(trace);
    }
    let report = EscapeReport {
        passed: runs.iter().all(|r| r.escaped),
        delta,
        t_end,
        runs,
    };
    Ok((report, traces))
}

/// Fit of the nonlinear remainder growth ||N(w)|| ~ C ||w||^(1+eta).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RemainderFit {
    pub c_fit: f64,
    pub eta_fit: f64,
    /// The remainder vanished at every probed amplitude (linear model).
    pub zero_remainder: bool,
}

/// Evaluate N(w) = (full reaction) - (linearized reaction) at w = a * dir
/// for a fixed random direction and fit the growth exponent in a.
/// Diffusion and the pinning term are linear and drop out of N identically.
pub fn remainder_growth_check(
    model: &SystemModel,
    state: &StationaryState,
    amplitudes: &[f64],
    seed: u64,
) -> Result<RemainderFit> {
    if amplitudes.len() < 5 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 5 amplitudes, got {}",
            amplitudes.len()
        )));
    }
    for &a in amplitudes {
        if !(a > 0.0 && a <= 0.1) {
            return Err(CoreError::InvalidArgument(format!(
                "amplitudes must lie in (0, 0.1], got {a}"
            )));
        }
    }
    let m = state.m();
    let n = state.n_ode();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut du = DMatrix::<f64>::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let mut dv = DVector::<f64>::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let sup = du.amax().max(dv.amax());
    du /= sup;
    dv /= sup;
    let mut lnw = Vec::new();
    let mut lnn = Vec::new();
    let mut max_norm: f64 = 0.0;
    for &a in amplitudes {
        let mut norm: f64 = 0.0;
        for i in 0..m {
            let ui = state.u.column(i).into_owned();
            let vi = state.v[i];
            let wu = du.column(i) * a;
            let wv = a * dv[i];
            let fu = model.f_u(&ui, vi);
            let fv = model.f_v(&ui, vi);
            let gu = model.g_u(&ui, vi);
            let gv = model.g_v(&ui, vi);
            let up = &ui + &wu;
            let nf = model.f(&up, vi + wv) - model.f(&ui, vi) - &fu * &wu - fv * wv;
            let ng = model.g(&up, vi + wv) - model.g(&ui, vi) - gu.dot(&wu) - gv * wv;
            norm = norm.max(nf.amax()).max(ng.abs());
        }
        max_norm = max_norm.max(norm);
        if norm > 1e-300 {
            lnw.push(a.ln());
            lnn.push(norm.ln());
        }
    }
    if max_norm < 1e-14 {
        return Ok(RemainderFit {
            c_fit: 0.0,
            eta_fit: 0.0,
            zero_remainder: true,
        });
    }
    if lnw.len() < 2 {
        return Err(CoreError::Fit(
            "remainder vanished at all but one amplitude; cannot fit an exponent".into(),
        ));
    }
    let nf = lnw.len() as f64;
    let sx: f64 = lnw.iter().sum();
    let sy: f64 = lnn.iter().sum();
    let sxx: f64 = lnw.iter().map(|x| x * x).sum();
    let sxy: f64 = lnw.iter().zip(&lnn).map(|(x, y)| x * y).sum();
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    let intercept = (sy - slope * sx) / nf;
    Ok(RemainderFit {
        c_fit: intercept.exp(),
        eta_fit: slope - 1.0,
        zero_remainder: false,
    })
}

/// CSV rendering of a trace with a commented header.
pub fn trace_to_table(trace: &SimulationTrace, config_sha256: &str, version: &str) -> String {
    let mut out = String::new();
    out.push_str("# simulation-trace v1\n");
    out.push_str(&format!("# config_sha256: {config_sha256}\n"));
    out.push_str(&format!("# version: {version}\n"));
    out.push_str(&format!("# blew_up: {}\n", trace.blew_up));
    if let Some(r) = trace.fitted_rate {
        out.push_str(&format!("# fitted_rate: {r:.12e}\n"));
    }
    if let Some((a, b)) = trace.fit_window {
        out.push_str(&format!("# fit_window: {a:.6e},{b:.6e}\n"));
    }
    out.push_str(&format!(
        "# max_flux_imbalance: {:.6e}\n",
        trace.max_flux_imbalance
    ));
    out.push_str("t,deviation,dev_v,dev_u\n");
    for i in 0..trace.times.len() {
        out.push_str(&format!(
            "{:.10e},{:.10e},{:.10e},{:.10e}\n",
            trace.times[i], trace.deviation_norms[i], trace.dev_v[i], trace.dev_u[i]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Equilibrium;
    use crate::stationary::{
        self, continue_branch, copy_mode_state, linear_mode_state, ContinuationSettings, Provenance,
    };
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn uvec(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn setup(m: usize) -> (Grid, NeumannLaplacian) {
        let g = Grid::new(PI, m).unwrap();
        let lap = NeumannLaplacian::new(&g);
        (g, lap)
    }

    fn zero_model() -> SystemModel {
        SystemModel::new(
            "frozen-test",
            1,
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| 0.0),
            Box::new(|_, _| DMatrix::from_vec(1, 1, vec![0.0])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| 0.0),
        )
    }

    fn constant_state(
        model: &SystemModel,
        g: &Grid,
        lap: &NeumannLaplacian,
        eq: &Equilibrium,
    ) -> StationaryState {
        let v = DVector::from_element(g.m(), eq.v);
        let u = DMatrix::from_fn(model.n_ode(), g.m(), |r, _| eq.u[r]);
        stationary::from_parts(model, lap, u, v, 1.0, eq.v, Provenance::Constant).unwrap()
    }

    #[test]
    fn pure_diffusion_conserves_mean_and_decays_modes() {
        let model = zero_model();
        let (g, lap) = setup(201);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let reference = constant_state(&model, &g, &lap, &eq);
        let v0 = g.cosine_profile(1, 1.0);
        let init = SimState {
            u: DMatrix::zeros(1, 201),
            v: v0,
            t: 0.0,
        };
        let mean0 = lap.mean(&init.v);
        let trace = simulate(&model, &lap, init.clone(), 1.0, 1e-3, &reference).unwrap();
        assert!(trace.max_flux_imbalance < 1e-12);
        // Mode-1 deviation decays like e^{-mu_1 t}.
        let final_dev = *trace.deviation_norms.last().unwrap();
        let expected = (-1.0_f64).exp();
        assert!(
            (final_dev / expected - 1.0).abs() < 0.02,
            "decay {final_dev} vs {expected}"
        );
        // Replay the endpoint to check the mean directly.
        let ctx = SimContext::of(&reference);
        let stepper = Stepper::new(&model, &lap, ctx, 1e-3).unwrap();
        let mut s = init;
        for _ in 0..1000 {
            stepper.step(&mut s).unwrap();
        }
        assert!((lap.mean(&s.v) - mean0).abs() < 1e-12);
    }

    #[test]
    fn stationarity_drift_is_bounded_by_residual() {
        // Unperturbed simulation from a converged state drifts by at most
        // 10x the stationary residual for t <= 1.
        let model = SystemModel::from_spec("linear(-1,1,2,-1)").unwrap();
        let (g, lap) = setup(401);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = linear_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let init = SimState {
            u: state.u.clone(),
            v: state.v.clone(),
            t: 0.0,
        };
        let trace = simulate(&model, &lap, init, 1.0, 1e-3, &state).unwrap();
        let max_dev = trace.deviation_norms.iter().copied().fold(0.0, f64::max);
        let budget = 10.0 * state.residual_pde.max(state.residual_f);
        assert!(max_dev < budget, "drift {max_dev} vs budget {budget}");
    }

    #[test]
    fn stationarity_holds_for_modified_flow_of_continuation_states() {
        // Branch states solve the d_ell-perturbed problem; the stepper must
        // integrate that same flow for them to be equilibria.
        let model = SystemModel::from_spec("sqcoupled").unwrap();
        let (g, lap) = setup(201);
        let eq = Equilibrium {
            u: uvec(1.0),
            v: 1.0,
        };
        let pts = continue_branch(
            &model,
            &g,
            &lap,
            &eq,
            1,
            (0.95, 1.01),
            6,
            &ContinuationSettings::default(),
        )
        .unwrap();
        let state = &pts[pts.len() - 1].state;
        let init = SimState {
            u: state.u.clone(),
            v: state.v.clone(),
            t: 0.0,
        };
        let trace = simulate(&model, &lap, init, 1.0, 1e-3, state).unwrap();
        let max_dev = trace.deviation_norms.iter().copied().fold(0.0, f64::max);
        let budget = 10.0 * state.residual_pde.max(state.residual_f).max(1e-11);
        assert!(max_dev < budget, "drift {max_dev} vs budget {budget}");
    }

    #[test]
    fn simulate_validates_arguments() {
        let model = zero_model();
        let (g, lap) = setup(51);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let reference = constant_state(&model, &g, &lap, &eq);
        let init = SimState {
            u: DMatrix::zeros(1, 51),
            v: DVector::zeros(51),
            t: 0.0,
        };
        assert!(simulate(&model, &lap, init.clone(), 1.0, 0.0, &reference).is_err());
        assert!(simulate(&model, &lap, init.clone(), -1.0, 1e-3, &reference).is_err());
        assert!(simulate(&model, &lap, init, 0.5, 1.0, &reference).is_err());
    }

    #[test]
    fn blow_up_truncates_with_flag() {
        // u' = u^2 from u = 10 blows up in finite time.
        let model = SystemModel::new(
            "blowup-test",
            1,
            Box::new(|u, _| DVector::from_vec(vec![u[0] * u[0]])),
            Box::new(|_, _| 0.0),
            Box::new(|u, _| DMatrix::from_vec(1, 1, vec![2.0 * u[0]])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| 0.0),
        );
        let (g, lap) = setup(51);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let reference = constant_state(&model, &g, &lap, &eq);
        let init = SimState {
            u: DMatrix::from_element(1, 51, 10.0),
            v: DVector::zeros(51),
            t: 0.0,
        };
        let trace = simulate(&model, &lap, init, 5.0, 1e-3, &reference).unwrap();
        assert!(trace.blew_up);
        assert!(*trace.times.last().unwrap() < 1.0);
        // The direct stepper reports the blow-up as an error.
        let init2 = SimState {
            u: DMatrix::from_element(1, 51, 1e7),
            v: DVector::zeros(51),
            t: 0.0,
        };
        match step(&model, &lap, SimContext::unmodified(), &init2, 1e-3) {
            Err(CoreError::BlowUp { cap, .. }) => assert_eq!(cap, BLOWUP_CAP),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn perturb_sets_exact_sup_amplitude() {
        let model = SystemModel::from_spec("linear(-1,1,2,-1)").unwrap();
        let (g, lap) = setup(101);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = linear_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        // Constant mode: V moves by exactly eps everywhere.
        let s = perturb(&state, &g, &PerturbSpec::Mode { k: 0 }, 1e-3).unwrap();
        let dv = (&s.v - &state.v).amax();
        // The perturbation vector itself has sup norm exactly eps; measuring
        // it after adding to O(1) state values costs at most one ulp.
        assert_abs_diff_eq!(dv, 1e-3, epsilon = 1e-15);
        assert_eq!((&s.u - &state.u).amax(), 0.0);
        // eps must be positive.
        assert!(perturb(&state, &g, &PerturbSpec::Mode { k: 0 }, 0.0).is_err());
        assert!(perturb(&state, &g, &PerturbSpec::Mode { k: 0 }, -1.0).is_err());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let model = SystemModel::from_spec("linear(-1,1,2,-1)").unwrap();
        let (g, lap) = setup(101);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = linear_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let spec = PerturbSpec::Noise {
            seed: 42,
            on_u: true,
        };
        let a = perturb(&state, &g, &spec, 1e-4).unwrap();
        let b = perturb(&state, &g, &spec, 1e-4).unwrap();
        assert_eq!(a, b);
        let ta = simulate(&model, &lap, a.clone(), 2.0, 1e-3, &state).unwrap();
        let tb = simulate(&model, &lap, b.clone(), 2.0, 1e-3, &state).unwrap();
        assert_eq!(ta.deviation_norms, tb.deviation_norms);
        // Different seed, different profile.
        let c = perturb(
            &state,
            &g,
            &PerturbSpec::Noise {
                seed: 43,
                on_u: true,
            },
            1e-4,
        )
        .unwrap();
        assert_ne!(b_key(&b), b_key(&c));
    }

    fn b_key(s: &SimState) -> Vec<u64> {
        s.v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn growth_rate_recovers_synthetic_exponent() {
        let rate = 0.4142;
        let times: Vec<f64> = (0..2000).map(|k| k as f64 * 0.01).collect();
        let devs: Vec<f64> = times.iter().map(|t| 1e-6 * (rate * t).exp()).collect();
        let trace = SimulationTrace {
            times: times.clone(),
            deviation_norms: devs.clone(),
            dev_v: devs.clone(),
            dev_u: vec![0.0; times.len()],
            fitted_rate: None,
            fit_window: None,
            blew_up: false,
            max_flux_imbalance: 0.0,
        };
        let fit = growth_rate(&trace).unwrap();
        assert_abs_diff_eq!(fit.rate, rate, epsilon = 1e-3);
        assert!(fit.samples >= MIN_FIT_SAMPLES);
        // Window lies inside the band.
        assert!(fit.window.0 >= 0.0 && fit.window.1 <= times[times.len() - 1]);
    }

    #[test]
    fn growth_rate_requires_enough_in_band_samples() {
        let trace = SimulationTrace {
            times: vec![0.0, 1.0, 2.0],
            deviation_norms: vec![1e-9, 1.0, 2.0],
            dev_v: vec![0.0; 3],
            dev_u: vec![0.0; 3],
            fitted_rate: None,
            fit_window: None,
            blew_up: false,
            max_flux_imbalance: 0.0,
        };
        assert!(matches!(growth_rate(&trace), Err(CoreError::Fit(_))));
    }

    #[test]
    fn linear_experiment_reproduces_spectral_rate() {
        let model = SystemModel::from_spec("linear(-1,1,2,-1)").unwrap();
        let (g, lap) = setup(401);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = linear_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let choice = choose_perturbation_mode(&model, &g, &lap, &state).unwrap();
        let target = 2.0_f64.sqrt() - 1.0;
        assert_abs_diff_eq!(choice.rate_hint.unwrap(), target, epsilon = 1e-6);
        let init = perturb(
            &state,
            &g,
            &PerturbSpec::Profile {
                u: choice.u.as_ref(),
                v: &choice.v,
            },
            1e-4,
        )
        .unwrap();
        let trace = simulate(&model, &lap, init, 15.0, 1e-3, &state).unwrap();
        let fit = growth_rate(&trace).unwrap();
        assert!(
            (fit.rate - target).abs() < 0.05 * target,
            "rate {} vs {target}",
            fit.rate
        );
    }

    #[test]
    fn degenerate_unstable_pair_grows_at_unit_rate() {
        let model = SystemModel::from_spec("remark26-unstable").unwrap();
        let (g, lap) = setup(401);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = copy_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let choice = choose_perturbation_mode(&model, &g, &lap, &state).unwrap();
        // Dominant mode: the constant profile with no ODE component.
        let osc = choice.v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - choice.v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(osc < 1e-8);
        let init = perturb(
            &state,
            &g,
            &PerturbSpec::Profile {
                u: choice.u.as_ref(),
                v: &choice.v,
            },
            1e-4,
        )
        .unwrap();
        let trace = simulate(&model, &lap, init, 8.0, 1e-3, &state).unwrap();
        let fit = growth_rate(&trace).unwrap();
        assert!((fit.rate - 1.0).abs() < 0.05, "rate {}", fit.rate);
        // Halving dt moves the fitted rate by well under 1%.
        let init2 = perturb(
            &state,
            &g,
            &PerturbSpec::Profile {
                u: choice.u.as_ref(),
                v: &choice.v,
            },
            1e-4,
        )
        .unwrap();
        let trace2 = simulate(&model, &lap, init2, 8.0, 5e-4, &state).unwrap();
        let fit2 = growth_rate(&trace2).unwrap();
        assert!(
            ((fit.rate - fit2.rate) / fit.rate).abs() < 0.01,
            "rates {} vs {}",
            fit.rate,
            fit2.rate
        );
    }

    #[test]
    fn escape_test_separates_the_degenerate_pair() {
        let (g, lap) = setup(201);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let eps = [1e-3, 1e-4];
        let unstable = SystemModel::from_spec("remark26-unstable").unwrap();
        let st = copy_mode_state(&unstable, &g, &lap, &eq, 1, 1.0).unwrap();
        let rep = lyapunov_escape_test(&unstable, &g, &lap, &st, &eps, 0.05, 20.0, 1e-3).unwrap();
        assert!(rep.passed, "{}", rep.to_text());
        for r in &rep.runs {
            assert!(r.escaped && r.t_escape.unwrap() < 15.0);
        }

        let stable = SystemModel::from_spec("remark26-stable").unwrap();
        let st = copy_mode_state(&stable, &g, &lap, &eq, 1, 1.0).unwrap();
        let rep = lyapunov_escape_test(&stable, &g, &lap, &st, &eps, 0.05, 20.0, 1e-3).unwrap();
        assert!(!rep.passed, "{}", rep.to_text());
        for r in &rep.runs {
            assert!(!r.escaped);
            assert!(r.max_deviation < 2.0 * r.epsilon);
        }
        let text = rep.to_text();
        assert!(text.contains("escape_test: FAIL"));
    }

    #[test]
    fn escape_test_validates_threshold() {
        let model = SystemModel::from_spec("remark26-unstable").unwrap();
        let (g, lap) = setup(51);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let st = copy_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        assert!(lyapunov_escape_test(&model, &g, &lap, &st, &[1e-3], 2e6, 1.0, 1e-3).is_err());
        assert!(lyapunov_escape_test(&model, &g, &lap, &st, &[], 0.05, 1.0, 1e-3).is_err());
    }

    #[test]
    fn remainder_is_quadratic_for_square_coupling() {
        let model = SystemModel::from_spec("sqcoupled").unwrap();
        let (g, lap) = setup(101);
        let eq = Equilibrium {
            u: uvec(1.0),
            v: 1.0,
        };
        let state = constant_state(&model, &g, &lap, &eq);
        let amps = [0.002, 0.005, 0.01, 0.02, 0.05, 0.1];
        let fit = remainder_growth_check(&model, &state, &amps, 7).unwrap();
        assert!(!fit.zero_remainder);
        assert!((fit.eta_fit - 1.0).abs() < 0.1, "eta {}", fit.eta_fit);
        assert!(fit.c_fit > 0.0);
    }

    #[test]
    fn remainder_vanishes_for_linear_models() {
        let model = SystemModel::from_spec("linear(-1,1,2,-1)").unwrap();
        let (g, lap) = setup(101);
        let eq = Equilibrium {
            u: uvec(0.0),
            v: 0.0,
        };
        let state = linear_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let amps = [0.002, 0.005, 0.01, 0.02, 0.05];
        let fit = remainder_growth_check(&model, &state, &amps, 7).unwrap();
        assert!(fit.zero_remainder);
    }

    #[test]
    fn remainder_check_validates_amplitudes() {
        let model = SystemModel::from_spec("sqcoupled").unwrap();
        let (g, lap) = setup(51);
        let eq = Equilibrium {
            u: uvec(1.0),
            v: 1.0,
        };
        let state = constant_state(&model, &g, &lap, &eq);
        assert!(remainder_growth_check(&model, &state, &[0.01], 7).is_err());
        assert!(remainder_growth_check(&model, &state, &[0.2, 0.01, 0.02, 0.03, 0.04], 7).is_err());
    }

    #[test]
    fn trace_serializes_with_header() {
        let trace = SimulationTrace {
            times: vec![0.0, 0.5],
            deviation_norms: vec![1e-4, 2e-4],
            dev_v: vec![1e-4, 2e-4],
            dev_u: vec![0.0, 0.0],
            fitted_rate: Some(0.4),
            fit_window: Some((0.0, 0.5)),
            blew_up: false,
            max_flux_imbalance: 1e-16,
        };
        let text = trace_to_table(&trace, "cafebabe", "0.1.0");
        assert!(text.contains("# config_sha256: cafebabe"));
        assert!(text.contains("# fitted_rate: 4.0"));
        assert!(text.contains("t,deviation,dev_v,dev_u"));
        assert_eq!(text.lines().count(), 8 + 2);
    }
}
