//! Uniform interval grids and the ghost-point Neumann Laplacian.
//!
//! The domain is the interval (0, L) sampled at M equispaced nodes including
//! both endpoints.  Zero-flux boundary conditions enter through ghost-node
//! reflection, which doubles the first off-diagonal entry of the boundary
//! rows.  The resulting matrix is not symmetric as stored, but it is
//! self-adjoint in the trapezoid-weighted inner product (half weights at the
//! endpoints), and conjugating by the square root of the weights produces a
//! symmetric tridiagonal matrix that all eigenvalue computations use.

use crate::error::{CoreError, Result};
use crate::linalg::SymTridiag;
use nalgebra::{DMatrix, DVector};

/// Uniform grid on the closed interval [0, L].
#[derive(Debug, Clone)]
pub struct Grid {
    length: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn new(length: f64, m: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "interval length must be positive, got {length}"
            )));
        }
        if m < 3 {
            return Err(CoreError::InvalidArgument(format!(
                "need at least 3 nodes for the second-order stencil, got {m}"
            )));
        }
        let h = length / (m - 1) as f64;
        let nodes = (0..m).map(|i| i as f64 * h).collect();
        Ok(Self { length, nodes })
    }

    pub fn len_interval(&self) -> f64 {
        self.length
    }

    pub fn m(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        self.length / (self.m() - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Analytic Neumann eigenvalues of -d^2/dx^2 on (0, L): (k pi / L)^2.
    ///
    /// Mode matching against algebraic quantities (bifurcation indices) uses
    /// these; the discrete operator's eigenvalues carry an O(h^2) defect that
    /// would never satisfy an 1e-8 matching tolerance.
    pub fn analytic_neumann_eigenvalues(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|k| {
                let kf = k as f64 * std::f64::consts::PI / self.length;
                kf * kf
            })
            .collect()
    }

    /// Samples of a * cos(k pi x / L) on the grid.
    pub fn cosine_profile(&self, k: usize, amplitude: f64) -> DVector<f64> {
        let freq = k as f64 * std::f64::consts::PI / self.length;
        DVector::from_iterator(
            self.m(),
            self.nodes.iter().map(|x| amplitude * (freq * x).cos()),
        )
    }
}

/// Second-order Neumann Laplacian with ghost-point closure.
#[derive(Debug, Clone)]
pub struct NeumannLaplacian {
    m: usize,
    h: f64,
    /// Row bands: sub[i] = (i, i-1), diag[i] = (i, i), sup[i] = (i, i+1).
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    /// Relative node weights (1/2 at endpoints, 1 inside).
    w_rel: Vec<f64>,
    /// Integration weights h * w_rel (trapezoid rule).
    w_int: Vec<f64>,
}

/// Discrete Neumann eigenpair: -Laplacian phi = mu phi.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub mu: f64,
    /// Eigenvector, unit norm in the weighted (trapezoid) inner product,
    /// signed so the left-endpoint value is positive.
    pub phi: DVector<f64>,
}

impl NeumannLaplacian {
    pub fn new(grid: &Grid) -> Self {
        let m = grid.m();
        let h = grid.spacing();
        let s = 1.0 / (h * h);
        let mut sub = vec![s; m];
        let diag = vec![-2.0 * s; m];
        let mut sup = vec![s; m];
        sub[0] = 0.0;
        sup[m - 1] = 0.0;
        // Ghost reflection v[-1] = v[1] and v[M] = v[M-2].
        sup[0] = 2.0 * s;
        sub[m - 1] = 2.0 * s;
        let mut w_rel = vec![1.0; m];
        w_rel[0] = 0.5;
        w_rel[m - 1] = 0.5;
        let w_int = w_rel.iter().map(|w| w * h).collect();
        Self {
            m,
            h,
            sub,
            diag,
            sup,
            w_rel,
            w_int,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn bands(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.sub, &self.diag, &self.sup)
    }

    /// y = Laplacian v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let mut y = DVector::zeros(m);
        for i in 0..m {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.sub[i] * v[i - 1];
            }
            if i + 1 < m {
                s += self.sup[i] * v[i + 1];
            }
            y[i] = s;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                self.diag[i]
            } else if j + 1 == i {
                self.sub[i]
            } else if j == i + 1 {
                self.sup[i]
            } else {
                0.0
            }
        })
    }

    /// Trapezoid-weighted inner product (approximates the L^2 pairing).
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.m {
            s += self.w_int[i] * u[i] * v[i];
        }
        s
    }

    pub fn norm(&self, u: &DVector<f64>) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// Weighted mean over the interval.
    pub fn mean(&self, u: &DVector<f64>) -> f64 {
        let total: f64 = self.w_int.iter().sum();
        let mut s = 0.0;
        for i in 0..self.m {
            s += self.w_int[i] * u[i];
        }
        s / total
    }

    pub fn weights(&self) -> &[f64] {
        &self.w_int
    }

    pub fn w_rel(&self) -> &[f64] {
        &self.w_rel
    }

    /// The half-weight similarity transform of the Laplacian: symmetric
    /// tridiagonal with identical spectrum.
    pub fn symmetrized(&self) -> SymTridiag {
        let m = self.m;
        let off: Vec<f64> = (0..m - 1)
            .map(|i| {
                let p = self.sup[i] * self.sub[i + 1];
                // Both factors are negative-definite-side products of the same
                // sign, so the geometric mean is well defined.
                p.abs().sqrt() * p.signum()
            })
            .collect();
        SymTridiag {
            diag: self.diag.clone(),
            off,
        }
    }

    /// v -> W^{1/2} v (coordinates in which the operator is symmetric).
    pub fn to_symmetrized_coords(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| v[i] * self.w_rel[i].sqrt())
    }

    /// W^{-1/2} v, inverse of [`Self::to_symmetrized_coords`].
    pub fn from_symmetrized_coords(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| v[i] / self.w_rel[i].sqrt())
    }
}

/// First `count` discrete Neumann eigenpairs, ascending.
pub fn laplacian_eigenpairs(lap: &NeumannLaplacian, count: usize) -> Result<Vec<EigenPair>> {
    if count == 0 || count > lap.m() {
        return Err(CoreError::InvalidArgument(format!(
            "requested {count} eigenpairs from an operator of dimension {}",
            lap.m()
        )));
    }
    let neg = lap.symmetrized();
    let t = SymTridiag {
        diag: neg.diag.iter().map(|d| -d).collect(),
        off: neg.off.iter().map(|e| -e).collect(),
    };
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut mu = t.eigenvalue(k)?;
        if k == 0 {
            // The kernel is exact in exact arithmetic; forming the
            // symmetrized entries perturbs it by O(ulp * ||S||), a few e-12
            // at desk scale.  Snap it back so downstream mode matching sees
            // the analytic zero.
            debug_assert!(mu.abs() < 1e-9, "zero mode drifted: {mu}");
            if mu.abs() < 1e-9 {
                mu = 0.0;
            }
        }
        let vhat = t.eigenvector(mu)?;
        let mut phi = lap.from_symmetrized_coords(&vhat);
        let nrm = lap.norm(&phi);
        phi /= nrm;
        if phi[0] < 0.0 {
            phi = -phi;
        }
        out.push(EigenPair { mu, phi });
    }
    Ok(out)
}
