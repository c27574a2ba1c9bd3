//! Acceptance gate: nine end-to-end checks against analytically derived
//! values, each printing a single pass/fail line.  Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdode_core::grid::{Grid, NeumannLaplacian};
use rdode_core::model::{det_identity, Equilibrium, EquilibriumMatrices, SystemModel};
use rdode_core::sim;
use rdode_core::spectral::{self, classify, ClassifySettings, Verdict};
use rdode_core::stationary::{self, continue_branch, ContinuationSettings, StationaryState};
use std::f64::consts::PI;
use std::time::Instant;

const SQRT2M1: f64 = std::f64::consts::SQRT_2 - 1.0;

/// Collects failed subchecks; `finish` prints the one-line verdict and
/// panics if anything failed.
struct Criterion {
    n: usize,
    name: &'static str,
    start: Instant,
    fails: Vec<String>,
}

impl Criterion {
    fn new(n: usize, name: &'static str) -> Self {
        Self {
            n,
            name,
            start: Instant::now(),
            fails: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, msg: String) {
        if !ok {
            self.fails.push(msg);
        }
    }

    fn finish(mut self, limit_s: Option<f64>, summary: String) {
        let elapsed = self.start.elapsed().as_secs_f64();
        if let Some(l) = limit_s {
            if elapsed >= l {
                self.fails
                    .push(format!("runtime {elapsed:.2}s exceeds the {l}s budget"));
            }
        }
        let ok = self.fails.is_empty();
        println!(
            "criterion {} [{}]: {} in {elapsed:.2}s — {summary}",
            self.n,
            self.name,
            if ok { "PASS" } else { "FAIL" }
        );
        assert!(
            ok,
            "criterion {} [{}] failed: {}",
            self.n,
            self.name,
            self.fails.join("; ")
        );
    }
}

fn grid_pair(m: usize) -> (Grid, NeumannLaplacian) {
    let g = Grid::new(PI, m).unwrap();
    let lap = NeumannLaplacian::new(&g);
    (g, lap)
}

fn linear_model() -> SystemModel {
    SystemModel::from_spec("linear(-1,1,2,-1)").unwrap()
}

fn origin_eq() -> Equilibrium {
    Equilibrium {
        u: DVector::from_vec(vec![0.0]),
        v: 0.0,
    }
}

fn linear_state(m: usize) -> (Grid, NeumannLaplacian, StationaryState) {
    let model = linear_model();
    let (g, lap) = grid_pair(m);
    let st = stationary::linear_mode_state(&model, &g, &lap, &origin_eq(), 1, 1.0).unwrap();
    (g, lap, st)
}

/// Continuation state shared by criteria 5 and 7.
fn sqcoupled_branch_state(m: usize) -> (Grid, NeumannLaplacian, StationaryState) {
    let model = SystemModel::from_spec("sqcoupled").unwrap();
    let (g, lap) = grid_pair(m);
    let eq = Equilibrium {
        u: DVector::from_vec(vec![1.0]),
        v: 1.0,
    };
    let pts = continue_branch(
        &model,
        &g,
        &lap,
        &eq,
        1,
        (0.95, 1.0),
        8,
        &ContinuationSettings::default(),
    )
    .unwrap();
    let best = pts
        .into_iter()
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
        .unwrap();
    (g, lap, best.state)
}

#[test]
fn criterion_1_determinant_identity() {
    let mut c = Criterion::new(1, "determinant-identity");
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut max_diff: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + trial % 3;
        let a0 = loop {
            let cand = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
            if cand.determinant().abs() > 1e-3 {
                break cand;
            }
        };
        let mats = EquilibriumMatrices {
            a0,
            b0: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            c0: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            d0: rng.random_range(-2.0..2.0),
        };
        let id = det_identity(&mats).unwrap();
        max_diff = max_diff.max((id.lhs - id.rhs).abs());
    }
    c.expect(
        max_diff < 1e-10,
        format!("max |lhs - rhs| = {max_diff:.3e} >= 1e-10"),
    );
    c.finish(
        Some(1.0),
        format!("100 instances, max |lhs - rhs| = {max_diff:.3e}"),
    );
}

#[test]
fn criterion_2_explicit_linear_state() {
    let mut c = Criterion::new(2, "explicit-linear-state");
    let (_, _, st) = linear_state(401);
    c.expect(
        st.residual_pde < 1e-4,
        format!("residual_pde = {:.3e} >= 1e-4", st.residual_pde),
    );
    c.expect(
        st.residual_f < 1e-12,
        format!("residual_f = {:.3e} >= 1e-12", st.residual_f),
    );
    c.finish(
        Some(1.0),
        format!(
            "residual_pde = {:.3e}, residual_f = {:.3e}",
            st.residual_pde, st.residual_f
        ),
    );
}

#[test]
fn criterion_3_linear_spectral_bound() {
    let mut c = Criterion::new(3, "linear-spectral-bound");
    let model = linear_model();
    let (g, lap, st) = linear_state(401);
    let report = classify(&model, &g, &st, &ClassifySettings::default()).unwrap();
    c.expect(
        (report.spectral_bound - SQRT2M1).abs() < 1e-3,
        format!(
            "spectral_bound = {:.6e}, off target by {:.2e}",
            report.spectral_bound,
            (report.spectral_bound - SQRT2M1).abs()
        ),
    );
    c.expect(
        report.verdict == Verdict::UnstableFixedPoint,
        format!("verdict = {}", report.verdict),
    );
    let field = spectral::linearize(&model, &g, &st).unwrap();
    let lm = spectral::default_lambda_max(&lap, &field).unwrap();
    let fp = spectral::find_fixed_point(&lap, &field, lm).unwrap();
    match fp {
        Some(f) => c.expect(
            (f.lambda - SQRT2M1).abs() < 1e-6,
            format!(
                "lambda_bar = {:.9e}, off by {:.2e}",
                f.lambda,
                (f.lambda - SQRT2M1).abs()
            ),
        ),
        None => c.expect(false, "no fixed point found".into()),
    }
    c.finish(
        Some(10.0),
        format!(
            "bound = {:.6e}, lambda_bar within 1e-6 of sqrt(2)-1, verdict {}",
            report.spectral_bound, report.verdict
        ),
    );
}

#[test]
fn criterion_4_degenerate_pair() {
    let mut c = Criterion::new(4, "degenerate-pair");
    let (g, lap) = grid_pair(401);
    let eq = origin_eq();
    let eps = [1e-3, 1e-4];

    let stable = SystemModel::from_spec("remark26-stable").unwrap();
    let st = stationary::copy_mode_state(&stable, &g, &lap, &eq, 1, 1.0).unwrap();
    let rep = classify(&stable, &g, &st, &ClassifySettings::default()).unwrap();
    c.expect(
        rep.spectral_bound.abs() <= 1e-6,
        format!(
            "stable bound = {:.3e}, expected 0 within 1e-6",
            rep.spectral_bound
        ),
    );
    let esc = sim::lyapunov_escape_test(&stable, &g, &lap, &st, &eps, 0.05, 20.0, 1e-3).unwrap();
    c.expect(!esc.passed, "stable variant escaped the threshold".into());
    let stable_bound = rep.spectral_bound;

    let unstable = SystemModel::from_spec("remark26-unstable").unwrap();
    let st = stationary::copy_mode_state(&unstable, &g, &lap, &eq, 1, 1.0).unwrap();
    let rep = classify(&unstable, &g, &st, &ClassifySettings::default()).unwrap();
    c.expect(
        (rep.spectral_bound - 1.0).abs() < 1e-3,
        format!(
            "unstable bound = {:.6e}, expected 1 within 1e-3",
            rep.spectral_bound
        ),
    );
    let esc = sim::lyapunov_escape_test(&unstable, &g, &lap, &st, &eps, 0.05, 20.0, 1e-3).unwrap();
    c.expect(esc.passed, "unstable variant did not escape".into());
    let rate = esc
        .runs
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .and_then(|r| r.fitted_rate);
    match rate {
        Some(r) => c.expect(
            (r - 1.0).abs() < 0.05,
            format!("unstable growth rate = {r:.4}, expected 1 within 5%"),
        ),
        None => c.expect(
            false,
            "no fitted growth rate for the unstable variant".into(),
        ),
    }
    c.finish(
        Some(60.0),
        format!(
            "stable bound {stable_bound:.1e} (no escape), unstable bound {:.6e}, rate {:.4}",
            rep.spectral_bound,
            rate.unwrap_or(f64::NAN)
        ),
    );
}

#[test]
fn criterion_5_nonlinear_pipeline() {
    let mut c = Criterion::new(5, "nonlinear-pipeline");
    let model = SystemModel::from_spec("sqcoupled").unwrap();
    let (eqs, _) = model.find_equilibria(&model.default_guesses());
    let found = eqs
        .iter()
        .any(|e| (e.v - 1.0).abs() < 1e-8 && (e.u[0] - 1.0).abs() < 1e-8);
    c.expect(found, "equilibrium (1,1) not found".into());

    // Reduced-reaction slope at the equilibrium equals the first interval
    // eigenvalue mu_1 = 1 to machine precision.
    let eq = Equilibrium {
        u: DVector::from_vec(vec![1.0]),
        v: 1.0,
    };
    let mats = model.equilibrium_matrices(&eq).unwrap();
    let lhs = det_identity(&mats).unwrap().lhs;
    c.expect(
        (lhs - 1.0).abs() < 1e-10,
        format!("h'(1) = {lhs:.12e}, expected mu_1 = 1 within 1e-10"),
    );

    let (g, lap, state) = sqcoupled_branch_state(401);
    c.expect(
        state.residual_f < 1e-8 && state.residual_pde < 1e-8,
        format!(
            "residuals ({:.2e}, {:.2e}) not below 1e-8",
            state.residual_f, state.residual_pde
        ),
    );
    let amp = state.amplitude();
    c.expect(
        amp > 0.01 && amp < 0.5,
        format!("amplitude {amp:.4} outside (0.01, 0.5)"),
    );

    let rep = classify(&model, &g, &state, &ClassifySettings::default()).unwrap();
    c.expect(
        rep.verdict == Verdict::UnstableFixedPoint,
        format!("verdict = {}", rep.verdict),
    );
    let lb = rep.lambda_bar.unwrap_or(f64::NAN);
    c.expect(lb > 0.0, format!("lambda_bar = {lb:.3e} not positive"));

    let esc = sim::lyapunov_escape_test(&model, &g, &lap, &state, &[1e-3, 1e-4], 0.05, 40.0, 1e-3)
        .unwrap();
    c.expect(
        esc.passed,
        format!("escape test failed:\n{}", esc.to_text()),
    );
    c.finish(
        Some(300.0),
        format!(
            "amplitude {amp:.3} at d_ell {:.4}, lambda_bar {lb:.4e}, escape PASS",
            state.d_ell
        ),
    );
}

#[test]
fn criterion_6_decomposition_cross_check() {
    let mut c = Criterion::new(6, "decomposition-cross-check");
    let model = linear_model();
    let (g, lap, st) = linear_state(201);
    let field = spectral::linearize(&model, &g, &st).unwrap();
    let spec = spectral::full_spectrum_discrete(&lap, &field, 4000).unwrap();

    // Oracle: per-mode dispersion roots of lambda^2 + (2+mu)lambda + (mu-1)
    // over the discrete Neumann eigenvalues mu.
    let tri = lap.symmetrized();
    let mut oracle = Vec::new();
    for k in 0..lap.m() {
        let mu = -tri.eigenvalue(k).unwrap();
        let disc = (mu * mu + 8.0).sqrt();
        oracle.push(Complex64::new((-(2.0 + mu) + disc) / 2.0, 0.0));
        oracle.push(Complex64::new((-(2.0 + mu) - disc) / 2.0, 0.0));
    }
    let window = |zs: &[Complex64]| -> Vec<Complex64> {
        zs.iter().copied().filter(|z| z.norm() <= 10.0).collect()
    };
    let dense_w = window(&spec.eigenvalues);
    let oracle_w = window(&oracle);
    c.expect(
        !dense_w.is_empty() && !oracle_w.is_empty(),
        "empty spectra in |lambda| <= 10".into(),
    );
    let directed = |a: &[Complex64], b: &[Complex64]| -> f64 {
        a.iter()
            .map(|x| {
                b.iter()
                    .map(|y| (x - y).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    let hausdorff = directed(&dense_w, &oracle_w).max(directed(&oracle_w, &dense_w));
    c.expect(
        hausdorff < 1e-2,
        format!("Hausdorff distance {hausdorff:.3e} >= 1e-2"),
    );

    // Every discrete eigenvalue clearly right of the multiplication bound
    // must be a root of the scalar reduction.
    let s_ess = -1.0;
    let mut matched = 0usize;
    let mut worst: f64 = 0.0;
    for z in &spec.eigenvalues {
        if z.re <= s_ess + 0.05 {
            continue;
        }
        c.expect(
            z.im.abs() < 1e-6,
            format!("eigenvalue {z} right of the bound is not real"),
        );
        let root = spectral::nearest_reduced_root(&lap, &field, z.re).unwrap();
        worst = worst.max((root - z.re).abs());
        matched += 1;
    }
    c.expect(
        worst < 1e-6,
        format!("worst reduced-root mismatch {worst:.3e} >= 1e-6"),
    );
    c.expect(
        matched >= 5,
        format!("only {matched} eigenvalues right of the bound"),
    );
    c.finish(
        Some(30.0),
        format!("Hausdorff {hausdorff:.2e}, {matched} point eigenvalues matched to {worst:.1e}"),
    );
}

#[test]
fn criterion_7_derivative_witness() {
    // State construction is criterion 5's concern; only the witness
    // evaluation is timed here.
    let model = SystemModel::from_spec("sqcoupled").unwrap();
    let (g, lap, state) = sqcoupled_branch_state(401);
    let mut c = Criterion::new(7, "derivative-witness");
    let field = spectral::linearize(&model, &g, &state).unwrap();
    let q = spectral::derivative_witness_quotient(&lap, &field, &state.v).unwrap();
    c.expect(
        q >= -1e-6,
        format!("Rayleigh quotient at V_x is {q:.3e} < -1e-6"),
    );
    c.finish(
        Some(1.0),
        format!("quotient at the gradient mode = {q:.3e}"),
    );
}

#[test]
fn criterion_8_jacobian_and_remainder() {
    let mut c = Criterion::new(8, "jacobian-and-remainder");
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut worst: f64 = 0.0;
    for spec in [
        "linear(-1,1,2,-1)",
        "sqcoupled",
        "remark26-stable",
        "remark26-unstable",
    ] {
        let model = SystemModel::from_spec(spec).unwrap();
        let (lo, hi) = model.working_box();
        for _ in 0..50 {
            let u = DVector::from_fn(model.n_ode(), |_, _| rng.random_range(lo..hi));
            let v = rng.random_range(lo..hi);
            let err = model.jacobian_check(&u, v, 1e-5).unwrap();
            worst = worst.max(err);
        }
    }
    c.expect(
        worst < 1e-5,
        format!("worst Jacobian mismatch {worst:.3e} >= 1e-5"),
    );

    let model = SystemModel::from_spec("sqcoupled").unwrap();
    let (g, lap) = grid_pair(101);
    let eq = Equilibrium {
        u: DVector::from_vec(vec![1.0]),
        v: 1.0,
    };
    let v = DVector::from_element(g.m(), eq.v);
    let u = DMatrix::from_element(1, g.m(), eq.u[0]);
    let state = stationary::from_parts(
        &model,
        &lap,
        u,
        v,
        1.0,
        eq.v,
        stationary::Provenance::Constant,
    )
    .unwrap();
    let amps = [0.002, 0.005, 0.01, 0.02, 0.05, 0.1];
    let fit = sim::remainder_growth_check(&model, &state, &amps, 800).unwrap();
    c.expect(
        (fit.eta_fit - 1.0).abs() < 0.1,
        format!(
            "remainder exponent eta = {:.4}, expected 1 within 0.1",
            fit.eta_fit
        ),
    );
    c.finish(
        Some(10.0),
        format!(
            "worst Jacobian mismatch {worst:.1e}, remainder eta {:.3}",
            fit.eta_fit
        ),
    );
}

#[test]
fn criterion_9_grid_convergence() {
    let mut c = Criterion::new(9, "grid-convergence");
    // Reduced-path settings make the 401- and 801-node quantities directly
    // comparable (the dense solver is size-capped either way).
    let reduced = ClassifySettings {
        dense_cap: 1000,
        lambda_max: None,
    };
    let floor = 1e-9;

    // Linear explicit state: residual checks repeat at 801 nodes.
    let (_, _, st8) = linear_state(801);
    c.expect(
        st8.residual_pde < 1e-4 && st8.residual_f < 1e-12,
        format!(
            "801-node residuals ({:.2e}, {:.2e}) regressed",
            st8.residual_f, st8.residual_pde
        ),
    );

    // Linear spectral quantities at both resolutions vs the analytic value.
    let model = linear_model();
    let mut bounds = Vec::new();
    let mut lambdas = Vec::new();
    for m in [401usize, 801] {
        let (g, lap, st) = linear_state(m);
        let rep = classify(&model, &g, &st, &reduced).unwrap();
        bounds.push(rep.spectral_bound);
        let field = spectral::linearize(&model, &g, &st).unwrap();
        let lm = spectral::default_lambda_max(&lap, &field).unwrap();
        lambdas.push(
            spectral::find_fixed_point(&lap, &field, lm)
                .unwrap()
                .unwrap()
                .lambda,
        );
    }
    let err401_bound = (bounds[0] - SQRT2M1).abs().max(floor);
    let err401_lambda = (lambdas[0] - SQRT2M1).abs().max(floor);
    c.expect(
        (bounds[1] - bounds[0]).abs() < 4.0 * err401_bound,
        format!(
            "linear bound moved {:.2e}, budget {:.2e}",
            (bounds[1] - bounds[0]).abs(),
            4.0 * err401_bound
        ),
    );
    c.expect(
        (lambdas[1] - lambdas[0]).abs() < 4.0 * err401_lambda,
        format!(
            "linear lambda_bar moved {:.2e}, budget {:.2e}",
            (lambdas[1] - lambdas[0]).abs(),
            4.0 * err401_lambda
        ),
    );

    // Degenerate pair bounds at both resolutions vs their exact values.
    let eq = origin_eq();
    let mut pair_moves = Vec::new();
    for (spec, target) in [("remark26-stable", 0.0), ("remark26-unstable", 1.0)] {
        let model = SystemModel::from_spec(spec).unwrap();
        let mut bs = Vec::new();
        for m in [401usize, 801] {
            let (g, lap) = grid_pair(m);
            let st = stationary::copy_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
            let rep = classify(&model, &g, &st, &reduced).unwrap();
            bs.push(rep.spectral_bound);
        }
        let budget = 4.0 * (bs[0] - target).abs().max(floor);
        let moved = (bs[1] - bs[0]).abs();
        c.expect(
            moved < budget,
            format!("{spec} bound moved {moved:.2e}, budget {budget:.2e}"),
        );
        pair_moves.push(moved);
    }

    // Fitted growth rate of the unstable variant: halving h changes the
    // rate by well under 1%.
    let model = SystemModel::from_spec("remark26-unstable").unwrap();
    let mut rates = Vec::new();
    for m in [401usize, 801] {
        let (g, lap) = grid_pair(m);
        let st = stationary::copy_mode_state(&model, &g, &lap, &eq, 1, 1.0).unwrap();
        let choice = sim::choose_perturbation_mode(&model, &g, &lap, &st).unwrap();
        let init = sim::perturb(
            &st,
            &g,
            &sim::PerturbSpec::Profile {
                u: choice.u.as_ref(),
                v: &choice.v,
            },
            1e-4,
        )
        .unwrap();
        let trace = sim::simulate(&model, &lap, init, 8.0, 1e-3, &st).unwrap();
        rates.push(sim::growth_rate(&trace).unwrap().rate);
    }
    let rate_change = ((rates[1] - rates[0]) / rates[0]).abs();
    c.expect(
        rate_change < 0.01,
        format!(
            "fitted rate changed by {:.3}% across grids",
            rate_change * 100.0
        ),
    );
    c.finish(
        None,
        format!(
            "lambda_bar moved {:.1e} (budget {:.1e}), rate change {:.2e}",
            (lambdas[1] - lambdas[0]).abs(),
            4.0 * err401_lambda,
            rate_change
        ),
    );
}
