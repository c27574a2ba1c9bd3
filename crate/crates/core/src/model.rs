//! Reaction models: n pointwise ODE components u coupled to one diffusing
//! component v through smooth nonlinearities f(u, v) in R^n and g(u, v) in R.
//!
//! A [`SystemModel`] carries the nonlinearities together with their exact
//! Jacobian blocks; [`SystemModel::jacobian_check`] verifies the blocks
//! against finite differences.  A small registry of named models used
//! throughout the test-suite and CLI is provided by [`SystemModel::from_spec`].

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};

type VecField = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
type ScalarField = Box<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
type MatField = Box<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// A reaction-diffusion-ODE system: u_t = f(u, v), v_t = Laplacian(v) + g(u, v).
pub struct SystemModel {
    name: String,
    n: usize,
    f: VecField,
    g: ScalarField,
    f_u: MatField,
    f_v: VecField,
    g_u: VecField,
    g_v: ScalarField,
    /// Componentwise box in which random sampling (Jacobian checks, default
    /// equilibrium guesses) is performed.
    working_box: (f64, f64),
}

/// A spatially constant equilibrium (Ubar, Vbar) with f = 0 and g = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub u: DVector<f64>,
    pub v: f64,
}

/// Jacobian blocks of (f, g) at an equilibrium.
#[derive(Debug, Clone)]
pub struct EquilibriumMatrices {
    /// f_u, n x n.
    pub a0: DMatrix<f64>,
    /// f_v, n x 1.
    pub b0: DVector<f64>,
    /// g_u, 1 x n (stored as a length-n vector).
    pub c0: DVector<f64>,
    /// g_v.
    pub d0: f64,
}

/// Both routes through the bordered-determinant identity
/// d0 - C0 A0^{-1} B0 = det [[A0, B0], [C0, d0]] / det A0.
#[derive(Debug, Clone, Copy)]
pub struct DetIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
}

impl SystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        f: VecField,
        g: ScalarField,
        f_u: MatField,
        f_v: VecField,
        g_u: VecField,
        g_v: ScalarField,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            f,
            g,
            f_u,
            f_v,
            g_u,
            g_v,
            working_box: (-2.0, 2.0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of ODE components.
    pub fn n_ode(&self) -> usize {
        self.n
    }

    pub fn working_box(&self) -> (f64, f64) {
        self.working_box
    }

    /// Evaluate (f, g), rejecting non-finite inputs and outputs.
    pub fn eval_rhs(&self, u: &DVector<f64>, v: f64) -> Result<(DVector<f64>, f64)> {
        self.check_point(u, v)?;
        let fv = (self.f)(u, v);
        let gv = (self.g)(u, v);
        if fv.iter().any(|x| !x.is_finite()) || !gv.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("model '{}'", self.name),
                point: format_point(u, v),
            });
        }
        Ok((fv, gv))
    }

    fn check_point(&self, u: &DVector<f64>, v: f64) -> Result<()> {
        if u.len() != self.n {
            return Err(CoreError::InvalidArgument(format!(
                "model '{}' expects {} ODE components, got {}",
                self.name,
                self.n,
                u.len()
            )));
        }
        if u.iter().any(|x| !x.is_finite()) || !v.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "non-finite evaluation point {}",
                format_point(u, v)
            )));
        }
        Ok(())
    }

    pub fn f(&self, u: &DVector<f64>, v: f64) -> DVector<f64> {
        (self.f)(u, v)
    }

    pub fn g(&self, u: &DVector<f64>, v: f64) -> f64 {
        (self.g)(u, v)
    }

    pub fn f_u(&self, u: &DVector<f64>, v: f64) -> DMatrix<f64> {
        (self.f_u)(u, v)
    }

    pub fn f_v(&self, u: &DVector<f64>, v: f64) -> DVector<f64> {
        (self.f_v)(u, v)
    }

    pub fn g_u(&self, u: &DVector<f64>, v: f64) -> DVector<f64> {
        (self.g_u)(u, v)
    }

    pub fn g_v(&self, u: &DVector<f64>, v: f64) -> f64 {
        (self.g_v)(u, v)
    }

    /// Maximum relative discrepancy between the supplied Jacobian blocks and
    /// central finite differences with the given step.
    pub fn jacobian_check(&self, u: &DVector<f64>, v: f64, step: f64) -> Result<f64> {
        self.check_point(u, v)?;
        if !(step.is_finite() && step > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "finite-difference step must be positive, got {step}"
            )));
        }
        let n = self.n;
        let mut worst: f64 = 0.0;
        let mut upd = |exact: f64, fd: f64| {
            let rel = (exact - fd).abs() / exact.abs().max(1.0);
            worst = worst.max(rel);
        };

        let a = self.f_u(u, v);
        let b = self.f_v(u, v);
        let c = self.g_u(u, v);
        let d = self.g_v(u, v);

        for j in 0..n {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += step;
            um[j] -= step;
            let (fp, gp) = self.eval_rhs(&up, v)?;
            let (fm, gm) = self.eval_rhs(&um, v)?;
            for i in 0..n {
                upd(a[(i, j)], (fp[i] - fm[i]) / (2.0 * step));
            }
            upd(c[j], (gp - gm) / (2.0 * step));
        }
        let (fp, gp) = self.eval_rhs(u, v + step)?;
        let (fm, gm) = self.eval_rhs(u, v - step)?;
        for i in 0..n {
            upd(b[i], (fp[i] - fm[i]) / (2.0 * step));
        }
        upd(d, (gp - gm) / (2.0 * step));
        Ok(worst)
    }

    /// Newton search for constant equilibria from the given guesses.
    ///
    /// Converged roots closer than 1e-8 in the sup norm are merged.  Guesses
    /// that fail to converge are reported in the diagnostic list instead of
    /// aborting the search.  When the joint Jacobian is singular (models with
    /// non-isolated equilibria) a minimum-norm least-squares step is used, so
    /// a representative point of the solution set is still found.
    pub fn find_equilibria(
        &self,
        guesses: &[(DVector<f64>, f64)],
    ) -> (Vec<Equilibrium>, Vec<String>) {
        let n = self.n;
        let mut found: Vec<Equilibrium> = Vec::new();
        let mut diags: Vec<String> = Vec::new();
        'guess: for (gu, gv) in guesses {
            if gu.len() != n {
                diags.push(format!("guess has {} components, expected {n}", gu.len()));
                continue;
            }
            let mut z = DVector::from_fn(n + 1, |i, _| if i < n { gu[i] } else { *gv });
            let mut residual = f64::INFINITY;
            for _ in 0..50 {
                let u = z.rows(0, n).into_owned();
                let v = z[n];
                let (fv, gvv) = match self.eval_rhs(&u, v) {
                    Ok(r) => r,
                    Err(_) => {
                        diags.push(format!(
                            "guess {} diverged to a non-finite point",
                            format_point(gu, *gv)
                        ));
                        continue 'guess;
                    }
                };
                let mut rhs = DVector::zeros(n + 1);
                rhs.rows_mut(0, n).copy_from(&fv);
                rhs[n] = gvv;
                residual = rhs.amax();
                if residual < 1e-12 {
                    let eq = Equilibrium { u, v };
                    let dup = found
                        .iter()
                        .any(|e| (e.v - eq.v).abs() < 1e-8 && (&e.u - &eq.u).amax() < 1e-8);
                    if !dup {
                        found.push(eq);
                    }
                    continue 'guess;
                }
                let mut jac = DMatrix::zeros(n + 1, n + 1);
                jac.view_mut((0, 0), (n, n)).copy_from(&self.f_u(&u, v));
                jac.view_mut((0, n), (n, 1)).copy_from(&self.f_v(&u, v));
                jac.view_mut((n, 0), (1, n))
                    .copy_from(&self.g_u(&u, v).transpose());
                jac[(n, n)] = self.g_v(&u, v);
                let step = match jac.clone().lu().solve(&rhs) {
                    Some(s) if s.iter().all(|x| x.is_finite()) => s,
                    _ => {
                        // Singular Jacobian: minimum-norm least-squares step.
                        match jac.svd(true, true).solve(&rhs, 1e-12) {
                            Ok(s) => s,
                            Err(_) => {
                                diags.push(format!(
                                    "guess {}: singular Jacobian with no least-squares step",
                                    format_point(gu, *gv)
                                ));
                                continue 'guess;
                            }
                        }
                    }
                };
                z -= step;
                if z.amax() > 1e6 {
                    diags.push(format!("guess {} diverged", format_point(gu, *gv)));
                    continue 'guess;
                }
            }
            diags.push(format!(
                "guess {} did not converge within 50 iterations (residual {residual:.3e})",
                format_point(gu, *gv)
            ));
        }
        found.sort_by(|a, b| {
            a.v.total_cmp(&b.v).then_with(|| {
                a.u.iter()
                    .zip(b.u.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .fold(std::cmp::Ordering::Equal, std::cmp::Ordering::then)
            })
        });
        (found, diags)
    }

    /// A deterministic lattice of Newton guesses covering the working box.
    pub fn default_guesses(&self) -> Vec<(DVector<f64>, f64)> {
        let (lo, hi) = self.working_box;
        let per_dim = 5usize;
        let coords: Vec<f64> = (0..per_dim)
            .map(|i| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64)
            .collect();
        let dims = self.n + 1;
        let total = per_dim.pow(dims as u32);
        let mut out = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut pt = Vec::with_capacity(dims);
            for _ in 0..dims {
                pt.push(coords[rem % per_dim]);
                rem /= per_dim;
            }
            let v = pt.pop().unwrap();
            out.push((DVector::from_vec(pt), v));
        }
        out
    }

    /// Verify `eq` and sample the Jacobian blocks there.
    pub fn equilibrium_matrices(&self, eq: &Equilibrium) -> Result<EquilibriumMatrices> {
        let (fv, gv) = self.eval_rhs(&eq.u, eq.v)?;
        let resid = fv.amax().max(gv.abs());
        if resid >= 1e-10 {
            return Err(CoreError::InvalidArgument(format!(
                "point {} is not an equilibrium (residual {resid:.3e})",
                format_point(&eq.u, eq.v)
            )));
        }
        Ok(EquilibriumMatrices {
            a0: self.f_u(&eq.u, eq.v),
            b0: self.f_v(&eq.u, eq.v),
            c0: self.g_u(&eq.u, eq.v),
            d0: self.g_v(&eq.u, eq.v),
        })
    }
}

fn format_point(u: &DVector<f64>, v: f64) -> String {
    let us: Vec<String> = u.iter().map(|x| format!("{x:.6}")).collect();
    format!("(u = [{}], v = {v:.6})", us.join(", "))
}

/// Evaluate both sides of the bordered-determinant identity at an equilibrium.
///
/// Errors when A0 is singular (|det| below 1e-12): the Schur-complement route
/// is undefined there.
pub fn det_identity(m: &EquilibriumMatrices) -> Result<DetIdentity> {
    let n = m.a0.nrows();
    let det_a = m.a0.determinant();
    if det_a.abs() < 1e-12 {
        return Err(CoreError::Singular(format!(
            "det A0 = {det_a:.3e} in bordered-determinant identity"
        )));
    }
    let lu = m.a0.clone().lu();
    let ainv_b = lu
        .solve(&m.b0)
        .ok_or_else(|| CoreError::Singular("A0 solve failed".into()))?;
    let lhs = m.d0 - m.c0.dot(&ainv_b);

    let mut block = DMatrix::zeros(n + 1, n + 1);
    block.view_mut((0, 0), (n, n)).copy_from(&m.a0);
    block.view_mut((0, n), (n, 1)).copy_from(&m.b0);
    block.view_mut((n, 0), (1, n)).copy_from(&m.c0.transpose());
    block[(n, n)] = m.d0;
    let rhs = block.determinant() / det_a;
    Ok(DetIdentity {
        lhs,
        rhs,
        diff: (lhs - rhs).abs(),
    })
}

/// Smallest index k > 0 whose Laplacian eigenvalue matches the identity value
/// d0 - C0 A0^{-1} B0 within `tol`, or None when no mode matches.
///
/// `laplacian_eigs` must be ascending and start at the zero mode.
pub fn bifurcation_condition(
    m: &EquilibriumMatrices,
    laplacian_eigs: &[f64],
    tol: f64,
) -> Result<Option<usize>> {
    if laplacian_eigs.is_empty() || laplacian_eigs[0].abs() > 1e-9 {
        return Err(CoreError::InvalidArgument(
            "eigenvalue list must start at the zero mode".into(),
        ));
    }
    if laplacian_eigs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::InvalidArgument(
            "eigenvalue list must be strictly ascending".into(),
        ));
    }
    let lhs = det_identity(m)?.lhs;
    for (k, mu) in laplacian_eigs.iter().enumerate().skip(1) {
        if (lhs - mu).abs() < tol {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Default matching tolerance for [`bifurcation_condition`].
pub const BIFURCATION_MATCH_TOL: f64 = 1e-8;

impl SystemModel {
    /// Parse a registry spec such as `linear(-1,1,2,-1)` or `sqcoupled`.
    ///
    /// Registered names:
    /// - `linear(a,b,c,d)`: f = a u + b v, g = c u + d v
    /// - `sqcoupled`: f = v^2 - u, g = u - v
    /// - `remark26-stable(mu1?)`: f = 0, g = (mu1+1) u - v (mu1 defaults to 1)
    /// - `remark26-unstable(mu1?)`: f = 0, g = (mu1-1) u + v
    pub fn from_spec(spec: &str) -> Result<SystemModel> {
        let spec = spec.trim();
        let (name, params) = parse_spec(spec)?;
        match name.as_str() {
            "linear" => {
                if params.len() != 4 {
                    return Err(CoreError::ModelSpec(format!(
                        "linear expects 4 parameters (a,b,c,d), got {}",
                        params.len()
                    )));
                }
                let (a, b, c, d) = (params[0], params[1], params[2], params[3]);
                Ok(SystemModel::new(
                    spec,
                    1,
                    Box::new(move |u, v| DVector::from_vec(vec![a * u[0] + b * v])),
                    Box::new(move |u, v| c * u[0] + d * v),
                    Box::new(move |_, _| DMatrix::from_vec(1, 1, vec![a])),
                    Box::new(move |_, _| DVector::from_vec(vec![b])),
                    Box::new(move |_, _| DVector::from_vec(vec![c])),
                    Box::new(move |_, _| d),
                ))
            }
            "sqcoupled" => {
                if !params.is_empty() {
                    return Err(CoreError::ModelSpec("sqcoupled takes no parameters".into()));
                }
                Ok(SystemModel::new(
                    spec,
                    1,
                    Box::new(|u, v| DVector::from_vec(vec![v * v - u[0]])),
                    Box::new(|u, v| u[0] - v),
                    Box::new(|_, _| DMatrix::from_vec(1, 1, vec![-1.0])),
                    Box::new(|_, v| DVector::from_vec(vec![2.0 * v])),
                    Box::new(|_, _| DVector::from_vec(vec![1.0])),
                    Box::new(|_, _| -1.0),
                ))
            }
            "remark26-stable" | "remark26-unstable" => {
                let mu1 = match params.len() {
                    0 => 1.0,
                    1 => params[0],
                    k => {
                        return Err(CoreError::ModelSpec(format!(
                            "{name} expects at most 1 parameter (mu1), got {k}"
                        )))
                    }
                };
                // g = (mu1 - s) u + s v with s = -1 (stable) or +1 (unstable);
                // the coefficients sum to mu1 so that states with all
                // components equal to a mode-1 profile are stationary.
                let s = if name == "remark26-stable" { -1.0 } else { 1.0 };
                let cu = mu1 - s;
                Ok(SystemModel::new(
                    spec,
                    1,
                    Box::new(|_, _| DVector::from_vec(vec![0.0])),
                    Box::new(move |u, v| cu * u[0] + s * v),
                    Box::new(|_, _| DMatrix::from_vec(1, 1, vec![0.0])),
                    Box::new(|_, _| DVector::from_vec(vec![0.0])),
                    Box::new(move |_, _| DVector::from_vec(vec![cu])),
                    Box::new(move |_, _| s),
                ))
            }
            other => Err(CoreError::ModelSpec(format!("unknown model '{other}'"))),
        }
    }
}

fn parse_spec(spec: &str) -> Result<(String, Vec<f64>)> {
    if spec.is_empty() {
        return Err(CoreError::ModelSpec("empty spec".into()));
    }
    match spec.find('(') {
        None => Ok((spec.to_string(), Vec::new())),
        Some(open) => {
            if !spec.ends_with(')') {
                return Err(CoreError::ModelSpec(format!(
                    "missing closing parenthesis in '{spec}'"
                )));
            }
            let name = spec[..open].trim().to_string();
            let inner = &spec[open + 1..spec.len() - 1];
            let params: Result<Vec<f64>> = inner
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| {
                        CoreError::ModelSpec(format!(
                            "bad numeric parameter '{}' in '{spec}'",
                            tok.trim()
                        ))
                    })
                })
                .collect();
            let params = params?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(CoreError::ModelSpec(format!(
                    "non-finite parameter in '{spec}'"
                )));
            }
            Ok((name, params))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uvec(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn registry_linear_evaluates_closed_form() {
        let m = SystemModel::from_spec("linear(-1, 1, 2, -1)").unwrap();
        let (f, g) = m.eval_rhs(&uvec(0.3), -0.7).unwrap();
        assert_abs_diff_eq!(f[0], -0.3 + -0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(g, 2.0 * 0.3 - -0.7 * 1.0, epsilon = 1e-15);
    }

    #[test]
    fn registry_rejects_malformed_specs() {
        for bad in [
            "linear(1,2)",
            "linear(1,2,3,x)",
            "nosuchmodel",
            "linear(1,2,3,4",
            "sqcoupled(1)",
            "remark26-stable(1,2)",
            "",
        ] {
            assert!(SystemModel::from_spec(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn sqcoupled_equilibria_are_origin_and_one_one() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let (eqs, _) = m.find_equilibria(&m.default_guesses());
        assert_eq!(eqs.len(), 2, "expected exactly two equilibria, got {eqs:?}");
        assert_abs_diff_eq!(eqs[0].v, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eqs[0].u[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eqs[1].v, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eqs[1].u[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nearby_roots_are_merged() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let guesses = vec![(uvec(0.9), 0.9), (uvec(1.1), 1.05), (uvec(0.95), 1.0)];
        let (eqs, _) = m.find_equilibria(&guesses);
        assert_eq!(eqs.len(), 1);
    }

    #[test]
    fn degenerate_model_still_yields_a_representative_equilibrium() {
        // f = 0 pointwise, so equilibria form a line; the least-squares step
        // must land on it rather than reporting nothing.
        let m = SystemModel::from_spec("remark26-stable").unwrap();
        let (eqs, _) = m.find_equilibria(&[(uvec(0.3), 0.9)]);
        assert_eq!(eqs.len(), 1);
        let (f, g) = m.eval_rhs(&eqs[0].u, eqs[0].v).unwrap();
        assert!(f.amax() < 1e-12 && g.abs() < 1e-12);
    }

    #[test]
    fn equilibrium_matrices_at_one_one() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let mats = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(1.0),
                v: 1.0,
            })
            .unwrap();
        assert_abs_diff_eq!(mats.a0[(0, 0)], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mats.b0[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mats.c0[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mats.d0, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_matrices_rejects_non_equilibrium() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        assert!(m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(0.5),
                v: 0.9
            })
            .is_err());
    }

    #[test]
    fn det_identity_both_routes_agree() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let mats = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(1.0),
                v: 1.0,
            })
            .unwrap();
        let id = det_identity(&mats).unwrap();
        assert_abs_diff_eq!(id.lhs, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(id.rhs, 1.0, epsilon = 1e-14);
        assert!(id.diff < 1e-10);
    }

    #[test]
    fn det_identity_rejects_singular_a0() {
        let m = SystemModel::from_spec("remark26-stable").unwrap();
        let mats = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(0.0),
                v: 0.0,
            })
            .unwrap();
        assert!(matches!(det_identity(&mats), Err(CoreError::Singular(_))));
    }

    #[test]
    fn bifurcation_condition_matches_first_mode() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let mats = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(1.0),
                v: 1.0,
            })
            .unwrap();
        let mus: Vec<f64> = (0..10).map(|k| (k * k) as f64).collect();
        assert_eq!(
            bifurcation_condition(&mats, &mus, BIFURCATION_MATCH_TOL).unwrap(),
            Some(1)
        );
        // At the origin the identity value is -1: no positive mode matches.
        let mats0 = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(0.0),
                v: 0.0,
            })
            .unwrap();
        assert_eq!(
            bifurcation_condition(&mats0, &mus, BIFURCATION_MATCH_TOL).unwrap(),
            None
        );
    }

    #[test]
    fn bifurcation_condition_validates_eigenvalue_list() {
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let mats = m
            .equilibrium_matrices(&Equilibrium {
                u: uvec(1.0),
                v: 1.0,
            })
            .unwrap();
        assert!(bifurcation_condition(&mats, &[1.0, 4.0], 1e-8).is_err());
        assert!(bifurcation_condition(&mats, &[0.0, 4.0, 1.0], 1e-8).is_err());
    }

    #[test]
    fn jacobian_check_is_tight_for_registry_models() {
        for spec in [
            "linear(-1,1,2,-1)",
            "sqcoupled",
            "remark26-stable",
            "remark26-unstable",
        ] {
            let m = SystemModel::from_spec(spec).unwrap();
            // Deterministic points spread over the working box.
            for i in 0..10 {
                let t = i as f64 / 9.0;
                let u = uvec(-2.0 + 4.0 * t);
                let v = 2.0 - 4.0 * t * t;
                let err = m.jacobian_check(&u, v, 1e-6).unwrap();
                assert!(err < 1e-9, "{spec} jacobian err {err} at sample {i}");
            }
        }
    }

    #[test]
    fn jacobian_check_flags_wrong_block() {
        let m = SystemModel::new(
            "broken",
            1,
            Box::new(|u, v| DVector::from_vec(vec![v * v - u[0]])),
            Box::new(|u, v| u[0] - v),
            Box::new(|_, _| DMatrix::from_vec(1, 1, vec![-1.0])),
            // Wrong: claims f_v = v instead of 2v.
            Box::new(|_, v| DVector::from_vec(vec![v])),
            Box::new(|_, _| DVector::from_vec(vec![1.0])),
            Box::new(|_, _| -1.0),
        );
        let err = m.jacobian_check(&uvec(1.0), 1.0, 1e-6).unwrap();
        assert!(err > 0.1, "expected a large discrepancy, got {err}");
    }

    #[test]
    fn eval_rhs_reports_offending_point() {
        let m = SystemModel::new(
            "inverse",
            1,
            Box::new(|u, _| DVector::from_vec(vec![1.0 / u[0]])),
            Box::new(|_, v| v),
            Box::new(|u, _| DMatrix::from_vec(1, 1, vec![-1.0 / (u[0] * u[0])])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| DVector::from_vec(vec![0.0])),
            Box::new(|_, _| 1.0),
        );
        let err = m.eval_rhs(&uvec(0.0), 1.0).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
        assert!(err.to_string().contains("0.000000"));
        assert!(m.eval_rhs(&uvec(f64::NAN), 1.0).is_err());
    }

    #[test]
    fn failed_guesses_produce_diagnostics_not_errors() {
        // Roots of f require v^2 = u; a guess pushed far outside diverges.
        let m = SystemModel::from_spec("sqcoupled").unwrap();
        let (eqs, diags) = m.find_equilibria(&[(uvec(1e5), -1e5)]);
        assert!(eqs.len() <= 1);
        if eqs.is_empty() {
            assert!(!diags.is_empty());
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn det_identity_holds_for_random_linear_models(
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
                c in -3.0f64..3.0,
                d in -3.0f64..3.0,
            ) {
                prop_assume!(a.abs() > 0.2);
                let m = SystemModel::from_spec(&format!("linear({a},{b},{c},{d})")).unwrap();
                let mats = m
                    .equilibrium_matrices(&Equilibrium { u: uvec(0.0), v: 0.0 })
                    .unwrap();
                let id = det_identity(&mats).unwrap();
                prop_assert!(id.diff < 1e-10);
                prop_assert!((id.lhs - (d - c * b / a)).abs() < 1e-10);
            }

            #[test]
            fn jacobian_check_passes_in_working_box(
                u0 in -2.0f64..2.0,
                v0 in -2.0f64..2.0,
            ) {
                let m = SystemModel::from_spec("sqcoupled").unwrap();
                let err = m.jacobian_check(&uvec(u0), v0, 1e-6).unwrap();
                prop_assert!(err < 1e-5);
            }
        }
    }
}
