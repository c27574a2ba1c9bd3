//! Spectrum of the linearization about a stationary state.
//!
//! The linearized operator has block form [[A(x), B(x)], [C(x), kappa*Lap + d(x)]]
//! with A = f_u, B = f_v, C = g_u sampled along the state, d = g_v + (1 - d_ell)
//! and kappa = d_ell (so the operator matches the equation the state solves).
//! Its spectrum splits into the multiplication part — approximated by the
//! pointwise eigenvalues of A(x_i) — and point eigenvalues, which for
//! lambda outside the multiplication spectrum are characterized by the
//! reduced scalar family
//!
//! ```text
//! G(lambda) psi = kappa * Lap psi + p(x, lambda) psi,
//! p(x, lambda) = -C(x) (A(x) - lambda I)^{-1} B(x) + d(x).
//! ```
//!
//! G(lambda) is self-adjoint in the weighted inner product; its largest
//! eigenvalue eta0(lambda) is a maximized Rayleigh quotient, and a positive
//! solution of eta0(lambda) = lambda is an eigenvalue of the full operator —
//! the instability certificate for non-constant states.

use crate::error::{CoreError, Result};
use crate::grid::{Grid, NeumannLaplacian};
use crate::linalg::SymTridiag;
use crate::model::SystemModel;
use crate::stationary::StationaryState;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

/// Default guard distance from sampled multiplication-spectrum points when
/// the pointwise resolvent is formed.
pub const EXCLUSION_RADIUS: f64 = 1e-6;
/// Eigenvalues within this distance of a multiplication-spectrum sample are
/// filtered out of the point-eigenvalue list.
pub const ESSENTIAL_MATCH_TOL: f64 = 1e-8;
/// Dense eigensolver size limit (unknowns), overridable per call.
pub const DENSE_CAP_DEFAULT: usize = 4000;

/// Jacobian samples of the linearization along a stationary state.
#[derive(Debug, Clone)]
pub struct LinearizationField {
    /// f_u at each node, n x n.
    pub a: Vec<DMatrix<f64>>,
    /// f_v at each node.
    pub b: Vec<DVector<f64>>,
    /// g_u at each node.
    pub c: Vec<DVector<f64>>,
    /// Effective diagonal g_v + (1 - d_ell) at each node.
    pub d: Vec<f64>,
    /// Diffusion coefficient of the PDE row (d_ell of the source state).
    pub diffusion: f64,
    n: usize,
    /// Cached pointwise eigenvalues of the A samples.
    a_eigs: Vec<Vec<Complex64>>,
    b_zero: Vec<bool>,
    c_zero: Vec<bool>,
}

impl LinearizationField {
    /// Build a field from raw samples (used by [`linearize`] and by tests
    /// that probe hand-made coefficient fields).
    pub fn from_samples(
        a: Vec<DMatrix<f64>>,
        b: Vec<DVector<f64>>,
        c: Vec<DVector<f64>>,
        d: Vec<f64>,
        diffusion: f64,
    ) -> Result<Self> {
        let m = a.len();
        if m == 0 || b.len() != m || c.len() != m || d.len() != m {
            return Err(CoreError::InvalidArgument(
                "coefficient sample lists must be non-empty and equally long".into(),
            ));
        }
        let n = a[0].nrows();
        for (i, ai) in a.iter().enumerate() {
            if ai.nrows() != n || ai.ncols() != n || b[i].len() != n || c[i].len() != n {
                return Err(CoreError::InvalidArgument(format!(
                    "sample {i} has inconsistent dimensions"
                )));
            }
        }
        if !(diffusion.is_finite() && diffusion > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "diffusion coefficient must be positive, got {diffusion}"
            )));
        }
        let a_eigs: Vec<Vec<Complex64>> = a
            .iter()
            .map(|ai| {
                if n == 1 {
                    vec![Complex64::new(ai[(0, 0)], 0.0)]
                } else {
                    ai.complex_eigenvalues().iter().copied().collect()
                }
            })
            .collect();
        let b_zero = b.iter().map(|bi| bi.amax() == 0.0).collect();
        let c_zero = c.iter().map(|ci| ci.amax() == 0.0).collect();
        Ok(Self {
            a,
            b,
            c,
            d,
            diffusion,
            n,
            a_eigs,
            b_zero,
            c_zero,
        })
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn n_ode(&self) -> usize {
        self.n
    }

    /// True when the coupling vanishes identically on one side (B == 0 at
    /// every node or C == 0 at every node): the block operator is then
    /// triangular and its spectrum is the plain union of block spectra.
    pub fn decoupled(&self) -> bool {
        self.b_zero.iter().all(|&z| z) || self.c_zero.iter().all(|&z| z)
    }

    /// min over nodes of |det A(x_i)|, the regularity margin of the
    /// fixed-point certificate.
    pub fn min_abs_det(&self) -> f64 {
        self.a
            .iter()
            .map(|ai| ai.determinant().abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sample the Jacobian blocks of (f, g) along a converged state.
pub fn linearize(
    model: &SystemModel,
    grid: &Grid,
    state: &StationaryState,
) -> Result<LinearizationField> {
    if state.m() != grid.m() {
        return Err(CoreError::InvalidArgument(format!(
            "state has {} nodes, grid has {}",
            state.m(),
            grid.m()
        )));
    }
    if !state.is_converged() {
        return Err(CoreError::InvalidArgument(format!(
            "state not converged: residual_f = {:.3e} (tol {:.1e}), residual_pde = {:.3e} (tol {:.1e})",
            state.residual_f, state.tol_f, state.residual_pde, state.tol_pde
        )));
    }
    let m = state.m();
    let shift = 1.0 - state.d_ell;
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut c = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(m);
    for i in 0..m {
        let ui = state.u.column(i).into_owned();
        let vi = state.v[i];
        a.push(model.f_u(&ui, vi));
        b.push(model.f_v(&ui, vi));
        c.push(model.g_u(&ui, vi));
        d.push(model.g_v(&ui, vi) + shift);
    }
    LinearizationField::from_samples(a, b, c, d, state.d_ell)
}

/// The multiplication-operator part of the spectrum, approximated by the
/// pointwise eigenvalues of the A samples.
#[derive(Debug, Clone)]
pub struct EssentialSpectrum {
    pub samples: Vec<Complex64>,
    /// max real part over the samples.
    pub bound: f64,
}

pub fn essential_spectrum(field: &LinearizationField) -> EssentialSpectrum {
    let mut samples = Vec::with_capacity(field.m() * field.n);
    let mut bound = f64::NEG_INFINITY;
    for eigs in &field.a_eigs {
        for &e in eigs {
            bound = bound.max(e.re);
            samples.push(e);
        }
    }
    EssentialSpectrum { samples, bound }
}

/// Per-node reduced potential p(x_i, lambda) for real lambda.
///
/// The resolvent is only formed at nodes where both couplings are present;
/// there lambda must keep [`EXCLUSION_RADIUS`] away from the pointwise
/// eigenvalues of A.
pub fn reduced_potential(field: &LinearizationField, lambda: f64) -> Result<Vec<f64>> {
    let m = field.m();
    let n = field.n;
    let mut p = Vec::with_capacity(m);
    for i in 0..m {
        if field.b_zero[i] || field.c_zero[i] {
            p.push(field.d[i]);
            continue;
        }
        let dist = field.a_eigs[i]
            .iter()
            .map(|e| (e - Complex64::new(lambda, 0.0)).norm())
            .fold(f64::INFINITY, f64::min);
        if dist <= EXCLUSION_RADIUS {
            let nearest = field.a_eigs[i]
                .iter()
                .min_by(|x, y| (*x - lambda).norm().total_cmp(&(*y - lambda).norm()))
                .copied()
                .unwrap_or_default();
            return Err(CoreError::NearEssentialSpectrum {
                lambda,
                nearest: format!("{:.6e}{:+.6e}i", nearest.re, nearest.im),
                radius: EXCLUSION_RADIUS,
                node: i,
            });
        }
        let mut shifted = field.a[i].clone();
        for r in 0..n {
            shifted[(r, r)] -= lambda;
        }
        let x = shifted.lu().solve(&field.b[i]).ok_or_else(|| {
            CoreError::Singular(format!(
                "pointwise resolvent solve failed at node {i}, lambda = {lambda}"
            ))
        })?;
        p.push(field.d[i] - field.c[i].dot(&x));
    }
    Ok(p)
}

/// Symmetrized discrete G(lambda) = kappa * Lap + diag p(., lambda).
fn reduced_operator(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda: f64,
) -> Result<SymTridiag> {
    let p = reduced_potential(field, lambda)?;
    let s = lap.symmetrized();
    let kappa = field.diffusion;
    let diag: Vec<f64> = s
        .diag
        .iter()
        .zip(&p)
        .map(|(sd, pi)| kappa * sd + pi)
        .collect();
    let off: Vec<f64> = s.off.iter().map(|so| kappa * so).collect();
    Ok(SymTridiag { diag, off })
}

/// Largest eigenvalue of G(lambda); equals the maximized weighted Rayleigh
/// quotient over profiles.
pub fn eta0(lap: &NeumannLaplacian, field: &LinearizationField, lambda: f64) -> Result<f64> {
    reduced_operator(lap, field, lambda)?.largest()
}

/// Largest eigenvalue together with its profile (weighted-normalized, in the
/// original node coordinates).
pub fn eta0_with_mode(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda: f64,
) -> Result<(f64, DVector<f64>)> {
    let t = reduced_operator(lap, field, lambda)?;
    let eta = t.largest()?;
    let vhat = t.eigenvector(eta)?;
    let mut psi = lap.from_symmetrized_coords(&vhat);
    let nrm = lap.norm(&psi);
    if nrm > 0.0 {
        psi /= nrm;
    }
    // Deterministic sign: largest-magnitude entry positive.
    let mut idx = 0;
    for i in 0..psi.len() {
        if psi[i].abs() > psi[idx].abs() {
            idx = i;
        }
    }
    if psi[idx] < 0.0 {
        psi = -psi;
    }
    Ok((eta, psi))
}

/// eta0(lambda) with small dodges around excluded lambda values; the dodge
/// stays inside [lo, hi].
fn eta0_dodging(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda: f64,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    let offsets = [0.0, 2.5, -2.5, 10.0, -10.0];
    let mut last = None;
    for k in offsets {
        let l = (lambda + k * EXCLUSION_RADIUS).clamp(lo, hi);
        match eta0(lap, field, l) {
            Ok(e) => return Ok((l, e)),
            Err(e @ CoreError::NearEssentialSpectrum { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// A certified solution of eta0(lambda) = lambda with lambda > 0.
#[derive(Debug, Clone, Copy)]
pub struct FixedPoint {
    pub lambda: f64,
    /// Residual eta0(lambda) - lambda at the returned point.
    pub gap: f64,
    /// eta0 at lambda = 0, the quantity the derivative witness bounds below.
    pub eta_at_zero: f64,
}

/// Bisection solve of eta0(lambda) = lambda on (0, lambda_max].
///
/// Returns Ok(None) when eta0(0) <= 0 (no certificate, not an error).  When
/// eta0(lambda_max) - lambda_max is still positive, errors with the measured
/// sup of eta0 so the caller can enlarge the bracket.
pub fn find_fixed_point(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda_max: f64,
) -> Result<Option<FixedPoint>> {
    if !(lambda_max.is_finite() && lambda_max > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    let (_, eta_at_zero) = eta0_dodging(lap, field, 0.0, 0.0, lambda_max)?;
    if eta_at_zero <= 0.0 {
        return Ok(None);
    }
    let (hi0, eta_hi) = eta0_dodging(lap, field, lambda_max, 0.0, lambda_max)?;
    if eta_hi - hi0 > 0.0 {
        let mut sup = f64::NEG_INFINITY;
        for j in 0..=16 {
            let l = lambda_max * j as f64 / 16.0;
            if let Ok((_, e)) = eta0_dodging(lap, field, l, 0.0, lambda_max) {
                sup = sup.max(e);
            }
        }
        return Err(CoreError::FixedPointRange {
            lambda_max,
            eta_at_max: eta_hi,
            sup_eta: sup,
        });
    }
    let mut lo = 0.0;
    let mut hi = hi0;
    let mut best = (f64::NAN, f64::INFINITY);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (l, e) = eta0_dodging(lap, field, mid, lo, hi)?;
        let phi = e - l;
        if phi.abs() < best.1.abs() {
            best = (l, phi);
        }
        if phi.abs() < 1e-10 {
            break;
        }
        if phi > 0.0 {
            lo = l;
        } else {
            hi = l;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let (lambda, gap) = best;
    Ok(Some(FixedPoint {
        lambda,
        gap,
        eta_at_zero,
    }))
}

/// Bracket size for the fixed-point search: twice the sup of eta0 over a
/// coarse lambda grid, plus one — enough to force a sign change.
pub fn default_lambda_max(lap: &NeumannLaplacian, field: &LinearizationField) -> Result<f64> {
    let mut probes = vec![0.0];
    for j in 0..31 {
        // logspace(1e-2, 1e2, 31)
        probes.push(10f64.powf(-2.0 + 4.0 * j as f64 / 30.0));
    }
    let mut sup = f64::NEG_INFINITY;
    let mut evaluated = 0;
    for l in probes {
        match eta0(lap, field, l) {
            Ok(e) => {
                sup = sup.max(e);
                evaluated += 1;
            }
            Err(CoreError::NearEssentialSpectrum { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if evaluated == 0 {
        return Err(CoreError::InvalidArgument(
            "every probe lambda fell inside the excluded multiplication spectrum".into(),
        ));
    }
    Ok(2.0 * sup.max(0.0) + 1.0)
}

/// All eigenvalues of the discrete block operator.
#[derive(Debug, Clone)]
pub struct DiscreteSpectrum {
    pub eigenvalues: Vec<Complex64>,
    /// False when the triangular fast path (decoupled field) was taken.
    pub used_dense: bool,
}

/// Spectrum of [[A, B], [C, kappa*Lap + d]] on the grid.
///
/// Decoupled fields take the exact triangular route (union of pointwise A
/// eigenvalues and the symmetric PDE block); otherwise a dense Schur solve
/// runs, capped at `cap` unknowns.
pub fn full_spectrum_discrete(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    cap: usize,
) -> Result<DiscreteSpectrum> {
    let m = field.m();
    let n = field.n;
    if m != lap.m() {
        return Err(CoreError::InvalidArgument(format!(
            "field sampled on {m} nodes, Laplacian has {}",
            lap.m()
        )));
    }
    if field.decoupled() {
        let mut eigenvalues: Vec<Complex64> = essential_spectrum(field).samples;
        let s = lap.symmetrized();
        let kappa = field.diffusion;
        let t = SymTridiag {
            diag: s
                .diag
                .iter()
                .zip(&field.d)
                .map(|(sd, di)| kappa * sd + di)
                .collect(),
            off: s.off.iter().map(|so| kappa * so).collect(),
        };
        for k in 0..m {
            eigenvalues.push(Complex64::new(t.eigenvalue(k)?, 0.0));
        }
        return Ok(DiscreteSpectrum {
            eigenvalues,
            used_dense: false,
        });
    }
    let size = (n + 1) * m;
    if size > cap {
        return Err(CoreError::CapacityExceeded { size, cap });
    }
    // Unknown ordering: all ODE components node-major, then the PDE values.
    let mut mat = DMatrix::zeros(size, size);
    for i in 0..m {
        for r in 0..n {
            for s in 0..n {
                mat[(i * n + r, i * n + s)] = field.a[i][(r, s)];
            }
            mat[(i * n + r, n * m + i)] = field.b[i][r];
            mat[(n * m + i, i * n + r)] = field.c[i][r];
        }
    }
    let (lsub, ldiag, lsup) = lap.bands();
    let kappa = field.diffusion;
    for i in 0..m {
        mat[(n * m + i, n * m + i)] = kappa * ldiag[i] + field.d[i];
        if i > 0 {
            mat[(n * m + i, n * m + i - 1)] = kappa * lsub[i];
        }
        if i + 1 < m {
            mat[(n * m + i, n * m + i + 1)] = kappa * lsup[i];
        }
    }
    let schur = nalgebra::linalg::Schur::try_new(mat, f64::EPSILON, 200 * size.max(10))
        .ok_or_else(|| CoreError::NoConvergence {
            context: format!("dense Schur eigensolve of the {size}x{size} block operator"),
            residual: f64::NAN,
            iterations: 200 * size.max(10),
        })?;
    let eigenvalues = schur.complex_eigenvalues().iter().copied().collect();
    Ok(DiscreteSpectrum {
        eigenvalues,
        used_dense: true,
    })
}

/// Eigenvalues farther than `tol` from every multiplication-spectrum sample.
pub fn split_point_spectrum(
    spectrum: &[Complex64],
    essential: &[Complex64],
    tol: f64,
) -> Vec<Complex64> {
    spectrum
        .iter()
        .filter(|z| essential.iter().all(|s| (*z - s).norm() > tol))
        .copied()
        .collect()
}

/// Refine the reduced-problem root nearest lambda0: a lambda where some
/// eigenvalue of G(lambda) equals lambda.  Used to cross-check dense point
/// eigenvalues against the scalar reduction.
pub fn nearest_reduced_root(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda0: f64,
) -> Result<f64> {
    let gap = |l: f64| -> Result<f64> {
        let t = reduced_operator(lap, field, l)?;
        let m = t.diag.len();
        let k = t.count_below(l);
        let mut best = f64::INFINITY;
        if k > 0 {
            let below = t.eigenvalue(k - 1)?;
            if (below - l).abs() < best.abs() {
                best = below - l;
            }
        }
        if k < m {
            let above = t.eigenvalue(k)?;
            if (above - l).abs() < best.abs() {
                best = above - l;
            }
        }
        Ok(best)
    };
    let mut r = 1e-4;
    for _ in 0..5 {
        let (mut lo, mut hi) = (lambda0 - r, lambda0 + r);
        let (glo, ghi) = (gap(lo)?, gap(hi)?);
        if glo == 0.0 {
            return Ok(lo);
        }
        if ghi == 0.0 {
            return Ok(hi);
        }
        if glo.signum() != ghi.signum() {
            let mut flo = glo;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let gm = gap(mid)?;
                if gm.abs() < 1e-13 || hi - lo < 1e-14 * (1.0 + mid.abs()) {
                    return Ok(mid);
                }
                if gm.signum() == flo.signum() {
                    lo = mid;
                    flo = gm;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        r *= 4.0;
    }
    // No sign change nearby: scan for the minimizing lambda and report it.
    let mut best = (lambda0, f64::INFINITY);
    for j in 0..=40 {
        let l = lambda0 - r + 2.0 * r * j as f64 / 40.0;
        if let Ok(g) = gap(l) {
            if g.abs() < best.1 {
                best = (l, g.abs());
            }
        }
    }
    Ok(best.0)
}

/// Mode of the full linearization at a real eigenvalue lambda: the profile
/// psi of G(lambda) paired with the slaved ODE components
/// u = -(A - lambda)^{-1} B psi per node.
pub fn dominant_mode(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    lambda: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (_, psi) = eta0_with_mode(lap, field, lambda)?;
    let m = field.m();
    let n = field.n;
    let mut u = DMatrix::zeros(n, m);
    for i in 0..m {
        if field.b_zero[i] {
            continue;
        }
        let mut shifted = field.a[i].clone();
        for r in 0..n {
            shifted[(r, r)] -= lambda;
        }
        let rhs = &field.b[i] * (-psi[i]);
        let ui = shifted.lu().solve(&rhs).ok_or_else(|| {
            CoreError::Singular(format!(
                "mode reconstruction: (A - lambda) singular at node {i}"
            ))
        })?;
        u.set_column(i, &ui);
    }
    Ok((u, psi))
}

/// Weighted Rayleigh quotient of G(0) at the discrete gradient of V — the
/// derivative-mode witness bounding eta0(0) from below.  The gradient of a
/// zero-flux profile vanishes at both ends, so the endpoints are pinned to 0.
pub fn derivative_witness_quotient(
    lap: &NeumannLaplacian,
    field: &LinearizationField,
    v: &DVector<f64>,
) -> Result<f64> {
    let m = v.len();
    if m != field.m() {
        return Err(CoreError::InvalidArgument(
            "profile and field sampled on different grids".into(),
        ));
    }
    let h = lap.spacing();
    let mut psi = DVector::zeros(m);
    for i in 1..m - 1 {
        psi[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
    }
    let nrm = lap.norm(&psi);
    if nrm < 1e-14 {
        return Err(CoreError::InvalidArgument(
            "constant profile: the derivative witness vanishes".into(),
        ));
    }
    psi /= nrm;
    let p = reduced_potential(field, 0.0)?;
    let mut g_psi = lap.apply(&psi) * field.diffusion;
    for i in 0..m {
        g_psi[i] += p[i] * psi[i];
    }
    Ok(lap.inner(&psi, &g_psi) / lap.inner(&psi, &psi))
}

/// Instability classification of a stationary state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    /// Positive multiplication-spectrum bound: the ODE block alone forces
    /// growth.
    #[serde(rename = "UnstableByThm2_5")]
    UnstableEssential,
    /// Rayleigh fixed point of the reduced family certifies a positive
    /// eigenvalue (non-constant state, non-degenerate ODE block).
    #[serde(rename = "UnstableByThm2_7")]
    UnstableFixedPoint,
    /// det f_u vanishes somewhere along the state: the resolvent reduction
    /// does not apply.
    DegenerateDetZero,
    NoCertificate,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::UnstableEssential => "UnstableByThm2_5",
            Verdict::UnstableFixedPoint => "UnstableByThm2_7",
            Verdict::DegenerateDetZero => "DegenerateDetZero",
            Verdict::NoCertificate => "NoCertificate",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Knobs for [`classify`].
#[derive(Debug, Clone)]
pub struct ClassifySettings {
    /// Dense eigensolver cap; above it only the reduced path runs.
    pub dense_cap: usize,
    /// Fixed-point bracket; None computes [`default_lambda_max`].
    pub lambda_max: Option<f64>,
}

impl Default for ClassifySettings {
    fn default() -> Self {
        Self {
            dense_cap: DENSE_CAP_DEFAULT,
            lambda_max: None,
        }
    }
}

/// Everything the classification produced, serializable as JSON or text.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// Pointwise A eigenvalues as (re, im) pairs.
    pub essential_samples: Vec<(f64, f64)>,
    pub s_ess: f64,
    pub min_abs_det: f64,
    /// Discrete eigenvalues away from the multiplication samples, (re, im).
    pub point_eigs: Vec<(f64, f64)>,
    pub s_point: Option<f64>,
    pub spectral_bound: f64,
    pub lambda_bar: Option<f64>,
    pub eta0_at_zero: Option<f64>,
    pub amplitude: f64,
    pub verdict: Verdict,
    pub dense_used: bool,
    pub notes: Vec<String>,
}

impl SpectrumReport {
    /// Key-value text rendering with the leading point eigenvalues.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("verdict: {}\n", self.verdict));
        out.push_str(&format!("spectral_bound: {:.12e}\n", self.spectral_bound));
        match self.lambda_bar {
            Some(l) => out.push_str(&format!("lambda_bar: {l:.12e}\n")),
            None => out.push_str("lambda_bar: none\n"),
        }
        out.push_str(&format!("s_ess: {:.12e}\n", self.s_ess));
        match self.s_point {
            Some(s) => out.push_str(&format!("s_point: {s:.12e}\n")),
            None => out.push_str("s_point: none\n"),
        }
        if let Some(e) = self.eta0_at_zero {
            out.push_str(&format!("eta0_at_zero: {e:.12e}\n"));
        }
        out.push_str(&format!("min_abs_det: {:.6e}\n", self.min_abs_det));
        out.push_str(&format!("amplitude: {:.6e}\n", self.amplitude));
        out.push_str(&format!("dense_used: {}\n", self.dense_used));
        out.push_str(&format!(
            "essential_sample_count: {}\n",
            self.essential_samples.len()
        ));
        out.push_str(&format!(
            "point_eigs ({} total, leading 50):\n",
            self.point_eigs.len()
        ));
        for (re, im) in self.point_eigs.iter().take(50) {
            out.push_str(&format!("  {re:+.12e} {im:+.12e}i\n"));
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

/// Full classification pipeline: linearize, sample the multiplication
/// spectrum, solve the discrete spectrum (capped), search for the Rayleigh
/// fixed point, and apply the verdict logic.
pub fn classify(
    model: &SystemModel,
    grid: &Grid,
    state: &StationaryState,
    settings: &ClassifySettings,
) -> Result<SpectrumReport> {
    let lap = NeumannLaplacian::new(grid);
    let field = linearize(model, grid, state)?;
    let ess = essential_spectrum(&field);
    let min_abs_det = field.min_abs_det();
    let amplitude = state.amplitude();
    let mut notes = Vec::new();

    let (point_eigs, s_point, dense_used) =
        match full_spectrum_discrete(&lap, &field, settings.dense_cap) {
            Ok(spec) => {
                let mut pts =
                    split_point_spectrum(&spec.eigenvalues, &ess.samples, ESSENTIAL_MATCH_TOL);
                pts.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
                let s = pts.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
                let s = if pts.is_empty() { None } else { Some(s) };
                (pts, s, spec.used_dense)
            }
            Err(CoreError::CapacityExceeded { size, cap }) => {
                notes.push(format!(
                    "discrete eigensolve skipped: {size} unknowns over the {cap} cap"
                ));
                (Vec::new(), None, false)
            }
            Err(e) => {
                notes.push(format!("discrete eigensolve failed: {e}"));
                (Vec::new(), None, false)
            }
        };

    // Fixed-point search runs whenever the multiplication part does not
    // already decide: it feeds both the certificate and the reported bound.
    let mut lambda_bar = None;
    let mut eta0_at_zero = None;
    let mut gap = None;
    if ess.bound <= 0.0 {
        let lm = match settings.lambda_max {
            Some(l) => Ok(l),
            None => default_lambda_max(&lap, &field),
        };
        match lm.and_then(|l| find_fixed_point(&lap, &field, l)) {
            Ok(Some(fp)) => {
                lambda_bar = Some(fp.lambda);
                eta0_at_zero = Some(fp.eta_at_zero);
                gap = Some(fp.gap);
            }
            Ok(None) => notes.push("eta0(0) <= 0: no fixed-point certificate".into()),
            Err(e) => notes.push(format!("fixed-point search failed: {e}")),
        }
    }
    if let Some(g) = gap {
        if g.abs() > 1e-8 {
            notes.push(format!("fixed-point residual {g:.3e} above tolerance"));
        }
    }

    let verdict = if ess.bound > 0.0 {
        Verdict::UnstableEssential
    } else if min_abs_det > 1e-10
        && amplitude > 1e-6
        && lambda_bar.map(|l| l > 0.0).unwrap_or(false)
    {
        Verdict::UnstableFixedPoint
    } else if min_abs_det <= 1e-10 {
        Verdict::DegenerateDetZero
    } else {
        Verdict::NoCertificate
    };

    let mut spectral_bound = ess.bound;
    if let Some(s) = s_point {
        spectral_bound = spectral_bound.max(s);
    }
    if let Some(l) = lambda_bar {
        spectral_bound = spectral_bound.max(l);
    }

    Ok(SpectrumReport {
        essential_samples: ess.samples.iter().map(|z| (z.re, z.im)).collect(),
        s_ess: ess.bound,
        min_abs_det,
        point_eigs: point_eigs.iter().map(|z| (z.re, z.im)).collect(),
        s_point,
        spectral_bound,
        lambda_bar,
        eta0_at_zero,
        amplitude,
        verdict,
        dense_used,
        notes,
    })
}
