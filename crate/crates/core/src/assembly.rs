//! Assembly of mass, stiffness, divergence and convection matrices, load
//! vectors and direct evaluation of the skew-symmetrized trilinear form
//!
//! `b(u, v, w) = ((u . grad) v, w) + 1/2 ((div u) v, w)`.
//!
//! Element contributions are computed in parallel and summed in triangle
//! order, so results do not depend on the number of worker threads.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::quadrature::{quadrature_rule, QuadRule, DEFAULT_DEGREE};
use crate::space::{shape_gradients, shape_values, FEFunction, FunctionSpace, VectorField, MAX_LOCAL};
use crate::sparse::{SparseMatrix, Vector};

pub type TimeField = dyn Fn(f64, Point) -> [f64; 2] + Send + Sync;

type LocalMatrix = [[f64; MAX_LOCAL]; MAX_LOCAL];

fn default_rule() -> QuadRule {
    quadrature_rule(DEFAULT_DEGREE).expect("default rule exists")
}

/// Scalar sparsity pattern of a space together with, for every triangle, the
/// value index of each local pair `(a, b)`.
#[derive(Debug, Clone)]
pub struct ScalarPattern {
    pattern: SparseMatrix,
    positions: Vec<usize>,
    n_local: usize,
}

impl ScalarPattern {
    pub fn new(space: &FunctionSpace) -> Self {
        let nl = space.n_local();
        let nt = space.mesh().n_triangles();
        let mut triplets = Vec::with_capacity(nt * nl * nl);
        for t in 0..nt {
            let d = space.cell_dofs(t);
            for &a in d {
                for &b in d {
                    triplets.push((a, b, 0.0));
                }
            }
        }
        let n = space.n_scalar();
        let pattern = SparseMatrix::from_triplets(n, n, &triplets);
        let positions = triplets
            .iter()
            .map(|&(a, b, _)| pattern.position(a, b).expect("entry in pattern"))
            .collect();
        ScalarPattern {
            pattern,
            positions,
            n_local: nl,
        }
    }

    pub fn pattern(&self) -> &SparseMatrix {
        &self.pattern
    }

    fn scatter(&self, locals: &[LocalMatrix]) -> SparseMatrix {
        let nl = self.n_local;
        let mut out = self.pattern.clone();
        let values = out.values_mut();
        let mut k = 0;
        for local in locals {
            for row in local.iter().take(nl) {
                for v in row.iter().take(nl) {
                    values[self.positions[k]] += v;
                    k += 1;
                }
            }
        }
        out
    }
}

fn element_loop<F>(space: &FunctionSpace, f: F) -> Vec<LocalMatrix>
where
    F: Fn(usize) -> LocalMatrix + Sync + Send,
{
    (0..space.mesh().n_triangles()).into_par_iter().map(f).collect()
}

/// Mass matrix of one component.
pub fn scalar_mass_matrix(space: &FunctionSpace) -> SparseMatrix {
    let rule = default_rule();
    let nl = space.n_local();
    let deg = space.degree();
    let locals = element_loop(space, |t| {
        let geo = space.geometry(t);
        let mut m = [[0.0; MAX_LOCAL]; MAX_LOCAL];
        for (l, w) in rule.points.iter().zip(&rule.weights) {
            let phi = shape_values(deg, *l);
            let wa = w * geo.area;
            for a in 0..nl {
                for b in 0..nl {
                    m[a][b] += wa * (phi[a] * phi[b]);
                }
            }
        }
        m
    });
    ScalarPattern::new(space).scatter(&locals)
}

/// Stiffness (Dirichlet Laplacian) matrix of one component.
pub fn scalar_stiffness_matrix(space: &FunctionSpace) -> SparseMatrix {
    let rule = default_rule();
    let nl = space.n_local();
    let deg = space.degree();
    let locals = element_loop(space, |t| {
        let geo = space.geometry(t);
        let mut m = [[0.0; MAX_LOCAL]; MAX_LOCAL];
        for (l, w) in rule.points.iter().zip(&rule.weights) {
            let g = shape_gradients(deg, *l, &geo.grad_lambda);
            let wa = w * geo.area;
            for a in 0..nl {
                for b in 0..nl {
                    m[a][b] += wa * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
        }
        m
    });
    ScalarPattern::new(space).scatter(&locals)
}

pub fn mass_matrix(space: &FunctionSpace) -> SparseMatrix {
    scalar_mass_matrix(space).block_diagonal(space.components())
}

pub fn stiffness_matrix(space: &FunctionSpace) -> SparseMatrix {
    scalar_stiffness_matrix(space).block_diagonal(space.components())
}

/// `B[q, phi] = (div phi, q)` with shape `n_pressure x n_velocity`.
pub fn divergence_matrix(vel: &FunctionSpace, pres: &FunctionSpace) -> Result<SparseMatrix> {
    if !vel.same_mesh(pres) {
        return Err(Error::config("velocity and pressure spaces live on different meshes"));
    }
    if vel.components() != 2 || pres.components() != 1 {
        return Err(Error::config(
            "divergence needs a 2-component velocity space and a scalar pressure space",
        ));
    }
    let rule = default_rule();
    let (nlv, nlp) = (vel.n_local(), pres.n_local());
    let ns = vel.n_scalar();
    let locals: Vec<Vec<f64>> = (0..vel.mesh().n_triangles())
        .into_par_iter()
        .map(|t| {
            let geo = vel.geometry(t);
            let mut m = vec![0.0; nlp * 2 * nlv];
            for (l, w) in rule.points.iter().zip(&rule.weights) {
                let g = shape_gradients(vel.degree(), *l, &geo.grad_lambda);
                let chi = shape_values(pres.degree(), *l);
                let wa = w * geo.area;
                for q in 0..nlp {
                    for c in 0..2 {
                        for a in 0..nlv {
                            m[(q * 2 + c) * nlv + a] += wa * chi[q] * g[a][c];
                        }
                    }
                }
            }
            m
        })
        .collect();
    let mut triplets = Vec::with_capacity(locals.len() * nlp * 2 * nlv);
    for (t, m) in locals.iter().enumerate() {
        let pd = pres.cell_dofs(t);
        let vd = vel.cell_dofs(t);
        for q in 0..nlp {
            for c in 0..2 {
                for a in 0..nlv {
                    triplets.push((pd[q], c * ns + vd[a], m[(q * 2 + c) * nlv + a]));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(pres.n_dofs(), vel.n_dofs(), &triplets))
}

/// Reassembles `N(w)[i, j] = b(w, phi_j, phi_i)` for changing winds on a
/// fixed pattern. The matrix is block diagonal with identical blocks per
/// component, so only the scalar block is computed.
#[derive(Debug, Clone)]
pub struct ConvectionAssembler {
    space: Arc<FunctionSpace>,
    pattern: ScalarPattern,
    rule: QuadRule,
}

impl ConvectionAssembler {
    pub fn new(space: Arc<FunctionSpace>) -> Self {
        ConvectionAssembler {
            pattern: ScalarPattern::new(&space),
            space,
            rule: default_rule(),
        }
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    /// Scalar pattern shared by every assembled block.
    pub fn pattern(&self) -> &SparseMatrix {
        self.pattern.pattern()
    }

    pub fn scalar_matrix(&self, wind: &[f64]) -> SparseMatrix {
        let sp = &*self.space;
        assert_eq!(wind.len(), sp.n_dofs());
        let nl = sp.n_local();
        let ns = sp.n_scalar();
        let deg = sp.degree();
        let locals = element_loop(sp, |t| {
            let geo = sp.geometry(t);
            let dofs = sp.cell_dofs(t);
            let mut m = [[0.0; MAX_LOCAL]; MAX_LOCAL];
            for (l, w) in self.rule.points.iter().zip(&self.rule.weights) {
                let phi = shape_values(deg, *l);
                let g = shape_gradients(deg, *l, &geo.grad_lambda);
                let mut u = [0.0; 2];
                let mut div = 0.0;
                for (a, &s) in dofs.iter().enumerate() {
                    let (u0, u1) = (wind[s], wind[ns + s]);
                    u[0] += u0 * phi[a];
                    u[1] += u1 * phi[a];
                    div += u0 * g[a][0] + u1 * g[a][1];
                }
                let wa = w * geo.area;
                for b in 0..nl {
                    let adv = u[0] * g[b][0] + u[1] * g[b][1] + 0.5 * div * phi[b];
                    for a in 0..nl {
                        m[a][b] += wa * adv * phi[a];
                    }
                }
            }
            m
        });
        self.pattern.scatter(&locals)
    }

    pub fn matrix(&self, wind: &FEFunction) -> SparseMatrix {
        self.scalar_matrix(wind.coeffs()).block_diagonal(2)
    }
}

pub fn convection_matrix(space: &Arc<FunctionSpace>, wind: &FEFunction) -> SparseMatrix {
    ConvectionAssembler::new(space.clone()).matrix(wind)
}

/// `b(u, v, w)` by direct quadrature of the pointwise integrand.
pub fn trilinear_eval(u: &FEFunction, v: &FEFunction, w: &FEFunction) -> f64 {
    let rule = default_rule();
    let nt = u.space().mesh().n_triangles();
    let parts: Vec<f64> = (0..nt)
        .into_par_iter()
        .map(|t| {
            let area = u.space().mesh().area(t);
            let mut s = 0.0;
            for (l, wq) in rule.points.iter().zip(&rule.weights) {
                let uu = u.eval_in(t, *l);
                let du = u.grad_in(t, *l);
                let vv = v.eval_in(t, *l);
                let dv = v.grad_in(t, *l);
                let ww = w.eval_in(t, *l);
                let div = du[0][0] + du[1][1];
                let mut val = 0.0;
                for c in 0..2 {
                    let adv = uu[0] * dv[c][0] + uu[1] * dv[c][1];
                    val += (adv + 0.5 * div * vv[c]) * ww[c];
                }
                s += wq * val;
            }
            area * s
        })
        .collect();
    parts.iter().sum()
}

fn assemble_vector<F>(space: &FunctionSpace, rule: &QuadRule, f: F) -> Vector
where
    F: Fn(usize, [f64; 3], Point) -> [f64; 2] + Sync + Send,
{
    let nl = space.n_local();
    let deg = space.degree();
    let nc = space.components();
    let locals: Vec<[[f64; MAX_LOCAL]; 2]> = (0..space.mesh().n_triangles())
        .into_par_iter()
        .map(|t| {
            let geo = space.geometry(t);
            let mut out = [[0.0; MAX_LOCAL]; 2];
            for (l, w) in rule.points.iter().zip(&rule.weights) {
                let phi = shape_values(deg, *l);
                let v = f(t, *l, geo.point(*l));
                let wa = w * geo.area;
                for c in 0..nc {
                    for a in 0..nl {
                        out[c][a] += wa * v[c] * phi[a];
                    }
                }
            }
            out
        })
        .collect();
    let ns = space.n_scalar();
    let mut b = vec![0.0; space.n_dofs()];
    for (t, local) in locals.iter().enumerate() {
        for (c, lc) in local.iter().enumerate().take(nc) {
            for (a, &s) in space.cell_dofs(t).iter().enumerate() {
                b[c * ns + s] += lc[a];
            }
        }
    }
    b
}

/// `b_i = (f, phi_i)` for a time-independent field.
pub fn load_vector_static(space: &FunctionSpace, f: &VectorField) -> Vector {
    assemble_vector(space, &default_rule(), |_, _, p| f(p))
}

/// `b_i = (f^m, phi_i)` where `f^m` is the time average of `f` over
/// `[t_start, t_end]`, computed with 2-point Gauss quadrature in time.
pub fn load_vector(space: &FunctionSpace, f: &TimeField, t_start: f64, t_end: f64) -> Vector {
    let mid = 0.5 * (t_start + t_end);
    let half = 0.5 * (t_end - t_start) / 3f64.sqrt();
    let (ta, tb) = (mid - half, mid + half);
    assemble_vector(space, &default_rule(), |_, _, p| {
        let a = f(ta, p);
        let b = f(tb, p);
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    })
}

/// Vector assembled from a field that may depend on the triangle index
/// (used for integrands that involve finite-element functions).
pub(crate) fn load_vector_cellwise<F>(space: &FunctionSpace, f: F) -> Vector
where
    F: Fn(usize, [f64; 3], Point) -> [f64; 2] + Sync + Send,
{
    assemble_vector(space, &default_rule(), f)
}
