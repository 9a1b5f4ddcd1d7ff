//! Linear solvers: sparse direct LU (faer) and Jacobi-preconditioned
//! BiCGSTAB.

use std::sync::Once;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::Mat;

use crate::error::{Error, Result};
use crate::sparse::{dot, norm2, SparseMatrix, Vector};

fn sequential() {
    static INIT: Once = Once::new();
    INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Symbolic LU analysis, reusable for every matrix with the same pattern.
///
/// The CSR arrays of `A` are handed to faer as the CSC arrays of `A^T`, so
/// the factorization is of `A^T` and solves go through the transposed
/// solve.
#[derive(Clone)]
pub struct SymbolicFactor {
    symbolic: SymbolicLu<usize>,
    nrows: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SymbolicFactor {
    pub fn new(pattern: &SparseMatrix) -> Result<Self> {
        sequential();
        if pattern.nrows() != pattern.ncols() {
            return Err(Error::Solver("LU requires a square matrix".into()));
        }
        let sym = SymbolicSparseColMatRef::new_checked(
            pattern.nrows(),
            pattern.ncols(),
            pattern.row_ptr(),
            None,
            pattern.col_idx(),
        );
        let symbolic = SymbolicLu::try_new(sym)
            .map_err(|e| Error::Solver(format!("symbolic LU failed: {e:?}")))?;
        Ok(SymbolicFactor {
            symbolic,
            nrows: pattern.nrows(),
            row_ptr: pattern.row_ptr().to_vec(),
            col_idx: pattern.col_idx().to_vec(),
        })
    }

    pub fn factor(&self, matrix: &SparseMatrix) -> Result<LuFactor> {
        if matrix.row_ptr() != self.row_ptr.as_slice() || matrix.col_idx() != self.col_idx.as_slice()
        {
            return Err(Error::Solver("matrix pattern differs from the analysed one".into()));
        }
        let sym = SymbolicSparseColMatRef::new_checked(
            self.nrows,
            self.nrows,
            &self.row_ptr,
            None,
            &self.col_idx,
        );
        let mat = SparseColMatRef::new(sym, matrix.values());
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone(), mat)
            .map_err(|e| Error::Solver(format!("numeric LU failed: {e:?}")))?;
        Ok(LuFactor {
            lu,
            n: self.nrows,
        })
    }
}

#[derive(Clone)]
pub struct LuFactor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn new(matrix: &SparseMatrix) -> Result<Self> {
        SymbolicFactor::new(matrix)?.factor(matrix)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vector> {
        assert_eq!(rhs.len(), self.n);
        let mut x = Mat::<f64>::zeros(self.n, 1);
        for (i, v) in rhs.iter().enumerate() {
            x[(i, 0)] = *v;
        }
        self.lu.solve_transpose_in_place(x.as_mut());
        let out: Vector = (0..self.n).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("LU solve produced non-finite values (singular system?)".into()));
        }
        Ok(out)
    }
}

pub fn solve_direct(matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vector> {
    LuFactor::new(matrix)?.solve(rhs)
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeSolution {
    pub x: Vector,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// BiCGSTAB with Jacobi preconditioning. Zero diagonal entries are treated
/// as one, so saddle-point blocks are admissible but converge poorly.
pub fn bicgstab(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<IterativeSolution> {
    let n = b.len();
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d != 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let precond = |v: &[f64]| -> Vector { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(IterativeSolution {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = x0.to_vec();
    let ax = a.mul_vec(&x);
    let mut r: Vector = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut rel = norm2(&r) / b_norm;
    for it in 1..=max_iters {
        if rel <= tol {
            return Ok(IterativeSolution {
                x,
                iterations: it - 1,
                relative_residual: rel,
            });
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = a.mul_vec(&p_hat);
        alpha = rho / dot(&r_hat, &v);
        let s: Vector = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        let s_hat = precond(&s);
        let t = a.mul_vec(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm2(&r) / b_norm;
        if !rel.is_finite() {
            break;
        }
    }
    if rel <= tol {
        return Ok(IterativeSolution {
            x,
            iterations: max_iters,
            relative_residual: rel,
        });
    }
    Err(Error::Solver(format!(
        "BiCGSTAB stalled at relative residual {rel:.3e} (tolerance {tol:.1e}, {max_iters} iterations)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseMatrix {
        SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 1, 3.0), (1, 2, 1.0), (2, 0, 1.0), (2, 2, 4.0)],
        )
    }

    #[test]
    fn lu_solves_unsymmetric() {
        let a = sample();
        let x = solve_direct(&a, &[3.0, 4.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn symbolic_reuse() {
        let a = sample();
        let sym = SymbolicFactor::new(&a).unwrap();
        let b = a.scaled(2.0);
        let x = sym.factor(&b).unwrap().solve(&[6.0, 8.0, 10.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let other = SparseMatrix::identity(3);
        assert!(sym.factor(&other).is_err());
    }

    #[test]
    fn bicgstab_matches_lu() {
        let a = sample();
        let sol = bicgstab(&a, &[3.0, 4.0, 5.0], &[0.0; 3], 1e-12, 100).unwrap();
        for v in sol.x {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }
}
