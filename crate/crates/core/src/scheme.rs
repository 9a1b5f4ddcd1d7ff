//! Euler time stepping for the penalized and saddle-point formulations.
//!
//! Every scheme solves one monolithic system per linear solve. With
//! `S = M + k nu A + k N(w)` the penalty system is
//!
//! ```text
//! [ S    -k B^T ] [V]   [M V_prev + k F + G]
//! [ k B  eps Mp ] [P] = [eps Mp P_prev     ]
//! ```
//!
//! and the saddle-point system replaces the pressure block by
//! `[B 0 c; 0 c^T 0]` with `c = Mp 1`, which pins the pressure mean to zero.
//! The extra unknown also absorbs the net boundary flux of incompatible
//! inflow data. Stokes variants are the same code with `N = 0`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    divergence_matrix, load_vector, scalar_mass_matrix, scalar_stiffness_matrix, trilinear_eval,
    ConvectionAssembler, TimeField,
};
use crate::error::{Error, Result};
use crate::linalg::{bicgstab, LuFactor, SymbolicFactor};
use crate::mesh::{Mesh, Point};
use crate::noise::{increment_for, noise_load_vector, AdditiveNoiseLoader, NoiseModel, StreamId, WienerIncrement};
use crate::quadrature::quadrature_rule;
use crate::space::{
    build_space, constrained_projection, dirichlet_constraints, l2_project, BoundaryValues, ConstraintSet,
    FEFunction, FunctionSpace, VectorField,
};
use crate::sparse::{dot, norm_inf, SparseMatrix, Vector};

pub type ScalarField = dyn Fn(Point) -> f64 + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// Implicit convection `b(V^m, V^m, .)`, solved by Picard iteration.
    PenaltyNonlinear,
    /// Linearized convection `b(V^{m-1}, V^m, .)`.
    PenaltyLinear,
    /// Exactly divergence-free reference with linearized convection.
    Saddle,
    StokesPenalty,
    StokesSaddle,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::PenaltyNonlinear,
        SchemeKind::PenaltyLinear,
        SchemeKind::Saddle,
        SchemeKind::StokesPenalty,
        SchemeKind::StokesSaddle,
    ];

    pub fn is_saddle(self) -> bool {
        matches!(self, SchemeKind::Saddle | SchemeKind::StokesSaddle)
    }

    pub fn is_penalty(self) -> bool {
        !self.is_saddle()
    }

    pub fn is_stokes(self) -> bool {
        matches!(self, SchemeKind::StokesPenalty | SchemeKind::StokesSaddle)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::PenaltyNonlinear => "penalty-nonlinear",
            SchemeKind::PenaltyLinear => "penalty-linear",
            SchemeKind::Saddle => "saddle",
            SchemeKind::StokesPenalty => "stokes-penalty",
            SchemeKind::StokesSaddle => "stokes-saddle",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iters: 50,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMethod {
    DirectLu,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSolverConfig {
    pub method: LinearMethod,
    /// Relative residual bound `|S x - r|_inf <= tol |r|_inf`.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        LinearSolverConfig {
            method: LinearMethod::DirectLu,
            tolerance: 1e-10,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub nu: f64,
    pub eps: f64,
    pub k: f64,
    pub t_final: f64,
    pub steps: usize,
    /// Switches the convection term off in the Navier-Stokes kinds.
    pub convection: bool,
    pub picard: PicardConfig,
    pub linear: LinearSolverConfig,
}

impl SchemeConfig {
    /// Uses `M = round(T / k)` steps and then `k = T / M`, so `T = M k`.
    pub fn new(kind: SchemeKind, nu: f64, eps: f64, t_final: f64, k: f64) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::config(format!("final time must be positive, got {t_final}")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::config(format!("time step must be positive, got {k}")));
        }
        let steps = ((t_final / k).round() as usize).max(1);
        let cfg = SchemeConfig {
            kind,
            nu,
            eps,
            k: t_final / steps as f64,
            t_final,
            steps,
            convection: true,
            picard: PicardConfig::default(),
            linear: LinearSolverConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::config(format!("viscosity must be positive, got {}", self.nu)));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::config(format!(
                "penalty parameter must satisfy 0 < ε ≤ 1, got {}",
                self.eps
            )));
        }
        if !(self.k > 0.0) || self.steps == 0 {
            return Err(Error::config("time step must be positive"));
        }
        let drift = (self.k * self.steps as f64 - self.t_final).abs();
        if drift > 1e-12 * self.t_final.max(1.0) {
            return Err(Error::config("final time must equal steps × k"));
        }
        if self.picard.max_iters == 0 || !(self.picard.tolerance > 0.0) {
            return Err(Error::config("Picard iteration needs max_iters ≥ 1 and a positive tolerance"));
        }
        if !(self.linear.tolerance > 0.0) {
            return Err(Error::config("linear solver tolerance must be positive"));
        }
        if self.kind.is_saddle() && self.linear.method == LinearMethod::Iterative {
            return Err(Error::config(
                "the iterative solver is only available for penalty schemes",
            ));
        }
        Ok(())
    }

    pub fn with_kind(&self, kind: SchemeKind) -> Result<Self> {
        let mut c = self.clone();
        c.kind = kind;
        c.validate()?;
        Ok(c)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        let mut c = self.clone();
        c.eps = eps;
        c.validate()?;
        Ok(c)
    }

    /// Re-derives the step count for a new target step.
    pub fn with_k(&self, k: f64) -> Result<Self> {
        let mut c = SchemeConfig::new(self.kind, self.nu, self.eps, self.t_final, k)?;
        c.convection = self.convection;
        c.picard = self.picard;
        c.linear = self.linear;
        c.validate()?;
        Ok(c)
    }

    pub fn k_over_eps(&self) -> f64 {
        self.k / self.eps
    }

    /// Whether the assembled system contains the convection matrix.
    pub fn convection_active(&self) -> bool {
        self.convection && !self.kind.is_stokes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub m: usize,
    pub t: f64,
    pub velocity: FEFunction,
    pub pressure: FEFunction,
}

/// Mesh, spaces, assembled operators and data of one problem. Shared by
/// every scheme and sample that runs on it.
pub struct Problem {
    mesh: Arc<Mesh>,
    velocity: Arc<FunctionSpace>,
    pressure: Arc<FunctionSpace>,
    scalar_mass: SparseMatrix,
    scalar_stiffness: SparseMatrix,
    mass_v: SparseMatrix,
    stiffness_v: SparseMatrix,
    mass_p: SparseMatrix,
    div: SparseMatrix,
    pressure_ones: Vector,
    boundary: BoundaryValues,
    constraints: ConstraintSet,
    forcing: Option<Arc<TimeField>>,
    noise: Option<NoiseModel>,
    noise_loader: Option<AdditiveNoiseLoader>,
    convection: ConvectionAssembler,
    initial: State,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("triangles", &self.mesh.n_triangles())
            .field("velocity_dofs", &self.velocity.n_dofs())
            .field("pressure_dofs", &self.pressure.n_dofs())
            .field("constrained", &self.constraints.len())
            .field("forcing", &self.forcing.is_some())
            .field("noise", &self.noise)
            .finish()
    }
}

pub struct ProblemBuilder {
    mesh: Arc<Mesh>,
    velocity_degree: usize,
    pressure_degree: usize,
    boundary: BoundaryValues,
    forcing: Option<Arc<TimeField>>,
    initial_velocity: Option<Arc<VectorField>>,
    initial_pressure: Option<Arc<ScalarField>>,
    noise: Option<NoiseModel>,
}

impl ProblemBuilder {
    pub fn velocity_degree(mut self, d: usize) -> Self {
        self.velocity_degree = d;
        self
    }

    pub fn pressure_degree(mut self, d: usize) -> Self {
        self.pressure_degree = d;
        self
    }

    pub fn boundary(mut self, bv: BoundaryValues) -> Self {
        self.boundary = bv;
        self
    }

    pub fn forcing(mut self, f: impl Fn(f64, Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        self.forcing = Some(Arc::new(f));
        self
    }

    pub fn initial_velocity(mut self, f: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        self.initial_velocity = Some(Arc::new(f));
        self
    }

    pub fn initial_pressure(mut self, f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        self.initial_pressure = Some(Arc::new(f));
        self
    }

    pub fn noise(mut self, model: NoiseModel) -> Self {
        self.noise = Some(model);
        self
    }

    pub fn maybe_noise(mut self, model: Option<NoiseModel>) -> Self {
        self.noise = model;
        self
    }

    pub fn build(self) -> Result<Arc<Problem>> {
        let velocity = build_space(self.mesh.clone(), self.velocity_degree, 2)?;
        let pressure = build_space(self.mesh.clone(), self.pressure_degree, 1)?;
        let scalar_mass = scalar_mass_matrix(&velocity);
        let scalar_stiffness = scalar_stiffness_matrix(&velocity);
        let mass_v = scalar_mass.block_diagonal(2);
        let stiffness_v = scalar_stiffness.block_diagonal(2);
        let mass_p = scalar_mass_matrix(&pressure);
        let div = divergence_matrix(&velocity, &pressure)?;
        let pressure_ones = mass_p.mul_vec(&vec![1.0; pressure.n_dofs()]);
        let constraints = dirichlet_constraints(&velocity, &self.boundary)?;

        let v0 = match &self.initial_velocity {
            Some(f) => constrained_projection(&velocity, f.as_ref(), &constraints)?,
            None => constrained_projection(&velocity, &|_| [0.0, 0.0], &constraints)?,
        };
        let mut p0 = match &self.initial_pressure {
            Some(f) => {
                let f = f.clone();
                l2_project(&pressure, &move |x| [f(x), 0.0])?
            }
            None => pressure.zero_function(),
        };
        let area: f64 = pressure_ones.iter().sum();
        let mean = dot(&pressure_ones, p0.coeffs()) / area;
        if mean != 0.0 {
            p0.coeffs_mut().iter_mut().for_each(|c| *c -= mean);
        }
        let noise_loader = self
            .noise
            .as_ref()
            .and_then(|m| AdditiveNoiseLoader::new(m, &velocity));
        Ok(Arc::new(Problem {
            convection: ConvectionAssembler::new(velocity.clone()),
            mesh: self.mesh,
            initial: State {
                m: 0,
                t: 0.0,
                velocity: v0,
                pressure: p0,
            },
            velocity,
            pressure,
            scalar_mass,
            scalar_stiffness,
            mass_v,
            stiffness_v,
            mass_p,
            div,
            pressure_ones,
            boundary: self.boundary,
            constraints,
            forcing: self.forcing,
            noise: self.noise,
            noise_loader,
        }))
    }
}

impl Problem {
    /// Defaults: Taylor-Hood P2/P1, homogeneous Dirichlet data on the whole
    /// boundary, zero forcing, zero initial data, no noise.
    pub fn builder(mesh: Arc<Mesh>) -> ProblemBuilder {
        ProblemBuilder {
            mesh,
            velocity_degree: 2,
            pressure_degree: 1,
            boundary: BoundaryValues::everywhere([0.0, 0.0]),
            forcing: None,
            initial_velocity: None,
            initial_pressure: None,
            noise: None,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn velocity_space(&self) -> &Arc<FunctionSpace> {
        &self.velocity
    }

    pub fn pressure_space(&self) -> &Arc<FunctionSpace> {
        &self.pressure
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass_v
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness_v
    }

    pub fn pressure_mass(&self) -> &SparseMatrix {
        &self.mass_p
    }

    pub fn divergence(&self) -> &SparseMatrix {
        &self.div
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn boundary(&self) -> &BoundaryValues {
        &self.boundary
    }

    pub fn noise(&self) -> Option<&NoiseModel> {
        self.noise.as_ref()
    }

    pub fn has_forcing(&self) -> bool {
        self.forcing.is_some()
    }

    pub fn convection_assembler(&self) -> &ConvectionAssembler {
        &self.convection
    }

    pub fn initial_state(&self) -> State {
        self.initial.clone()
    }

    pub fn h_max(&self) -> f64 {
        self.mesh.h_max()
    }

    /// `|v|^2_{L2}` through the mass matrix.
    pub fn velocity_norm_sq(&self, v: &[f64]) -> f64 {
        self.mass_v.bilinear(v, v)
    }

    pub fn grad_norm_sq(&self, v: &[f64]) -> f64 {
        self.stiffness_v.bilinear(v, v)
    }

    pub fn pressure_norm_sq(&self, p: &[f64]) -> f64 {
        self.mass_p.bilinear(p, p)
    }

    /// `(p, 1)`
    pub fn pressure_integral(&self, p: &[f64]) -> f64 {
        dot(&self.pressure_ones, p)
    }

    /// `(f^m, phi_i)` over `[t0, t1]`, or zeros without forcing.
    pub fn forcing_vector(&self, t0: f64, t1: f64) -> Vector {
        match &self.forcing {
            Some(f) => load_vector(&self.velocity, f.as_ref(), t0, t1),
            None => vec![0.0; self.velocity.n_dofs()],
        }
    }

    /// `(g(V_prev) dW, phi_i)`.
    pub fn noise_vector(&self, increment: &WienerIncrement, prev: &FEFunction) -> Vector {
        let Some(model) = &self.noise else {
            return vec![0.0; self.velocity.n_dofs()];
        };
        match &self.noise_loader {
            Some(loader) => loader.load(increment),
            None => noise_load_vector(model, increment, prev, &self.velocity),
        }
    }

    /// Increment of step `m` (1-based) of `sample`, if the problem is noisy.
    pub fn increment(&self, base_seed: u64, sample: u64, m: usize, k: f64) -> Result<Option<WienerIncrement>> {
        match &self.noise {
            Some(model) => Ok(Some(increment_for(model, StreamId::new(base_seed, sample, m as u64), k)?)),
            None => Ok(None),
        }
    }

    /// Whether two problems describe the same discrete setting.
    pub fn compatible_with(&self, other: &Problem) -> bool {
        *self.mesh == *other.mesh
            && self.velocity.degree() == other.velocity.degree()
            && self.pressure.degree() == other.pressure.degree()
            && self.constraints == other.constraints
            && self.noise == other.noise
            && self.forcing.is_some() == other.forcing.is_some()
            && self.initial == other.initial
    }
}

/// Right-hand-side pieces of one step, as needed by the energy ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// `(f^m, phi_i)`, not multiplied by `k`.
    pub forcing: Vector,
    /// `(g(V^{m-1}) dW, phi_i)`.
    pub noise: Vector,
    /// Wind of the final linear solve, when convection is active.
    pub wind: Option<Vector>,
    /// Saddle-point multiplier of the mean constraint.
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub inputs: StepInputs,
    pub picard_iterations: usize,
    pub linear_residual: f64,
}

/// Advances states of one scheme on one problem. The symbolic factorization
/// is shared by all steps; when the system matrix does not change (Stokes
/// kinds) the numeric factorization is computed once as well.
#[derive(Clone)]
pub struct Stepper {
    problem: Arc<Problem>,
    config: SchemeConfig,
    nv: usize,
    np: usize,
    n: usize,
    base: SparseMatrix,
    conv_pos: Vec<[usize; 2]>,
    fixed: Vec<bool>,
    fixed_rows: Vec<usize>,
    elim: Vec<(usize, usize, usize)>,
    lifted: Vector,
    symbolic: SymbolicFactor,
    frozen: Option<(LuFactor, SparseMatrix)>,
}

impl fmt::Debug for Stepper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stepper")
            .field("config", &self.config)
            .field("unknowns", &self.n)
            .finish()
    }
}

impl Stepper {
    pub fn new(problem: Arc<Problem>, config: SchemeConfig) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        if kind.is_saddle() && (problem.velocity.degree() != 2 || problem.pressure.degree() != 1) {
            return Err(Error::config(format!(
                "the {kind} scheme needs the inf-sup stable P2/P1 pair, got P{}/P{}",
                problem.velocity.degree(),
                problem.pressure.degree()
            )));
        }
        let nv = problem.velocity.n_dofs();
        let np = problem.pressure.n_dofs();
        let ns = problem.velocity.n_scalar();
        let n = nv + np + usize::from(kind.is_saddle());
        let (k, nu, eps) = (config.k, config.nu, config.eps);

        let sm = &problem.scalar_mass;
        let sa = &problem.scalar_stiffness;
        assert_eq!(sm.col_idx(), sa.col_idx());
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * sm.nnz() + 4 * problem.div.nnz() + 3 * np);
        for c in 0..2 {
            for r in 0..ns {
                for ((col, m), (_, a)) in sm.row(r).zip(sa.row(r)) {
                    trip.push((c * ns + r, c * ns + col, m + k * nu * a));
                }
            }
        }
        let bt = problem.div.transpose();
        for r in 0..nv {
            for (q, v) in bt.row(r) {
                trip.push((r, nv + q, -k * v));
            }
        }
        if kind.is_saddle() {
            for q in 0..np {
                for (c, v) in problem.div.row(q) {
                    trip.push((nv + q, c, v));
                }
                let cq = problem.pressure_ones[q];
                trip.push((nv + q, n - 1, cq));
                trip.push((n - 1, nv + q, cq));
            }
        } else {
            for q in 0..np {
                for (c, v) in problem.div.row(q) {
                    trip.push((nv + q, c, k * v));
                }
                for (c, v) in problem.mass_p.row(q) {
                    trip.push((nv + q, nv + c, eps * v));
                }
            }
        }
        let base = SparseMatrix::from_triplets(n, n, &trip);

        let pattern = problem.convection.pattern();
        let mut conv_pos = Vec::with_capacity(pattern.nnz());
        for r in 0..ns {
            for (col, _) in pattern.row(r) {
                conv_pos.push([
                    base.position(r, col).expect("convection entry in pattern"),
                    base.position(ns + r, ns + col).expect("convection entry in pattern"),
                ]);
            }
        }

        let mut fixed = vec![false; n];
        let mut lifted = vec![0.0; n];
        for (&d, &v) in problem.constraints.dofs.iter().zip(&problem.constraints.values) {
            fixed[d] = true;
            lifted[d] = v;
        }
        let mut elim = Vec::new();
        for r in 0..n {
            if fixed[r] {
                continue;
            }
            for (off, (c, _)) in base.row(r).enumerate() {
                if fixed[c] {
                    elim.push((base.row_ptr()[r] + off, r, c));
                }
            }
        }
        let fixed_rows = problem.constraints.dofs.clone();
        let symbolic = SymbolicFactor::new(&base)?;
        Ok(Stepper {
            problem,
            config,
            nv,
            np,
            n,
            base,
            conv_pos,
            fixed,
            fixed_rows,
            elim,
            lifted,
            symbolic,
            frozen: None,
        })
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    /// Factors a step-independent system ahead of time, so that clones share
    /// the factorization.
    pub fn prepare(&mut self) -> Result<()> {
        if self.config.convection_active()
            || self.config.linear.method != LinearMethod::DirectLu
            || self.frozen.is_some()
        {
            return Ok(());
        }
        let mut a = self.system_matrix(None);
        let mut rhs = vec![0.0; self.n];
        self.constrain(&mut a, &mut rhs);
        let lu = self.symbolic.factor(&a)?;
        self.frozen = Some((lu, a));
        Ok(())
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    /// Number of unknowns of the coupled system.
    pub fn system_size(&self) -> usize {
        self.n
    }

    /// Unconstrained system matrix for a given wind (or without convection).
    pub fn system_matrix(&self, wind: Option<&[f64]>) -> SparseMatrix {
        let mut a = self.base.clone();
        if let Some(w) = wind {
            let nvals = self.problem.convection.scalar_matrix(w);
            let k = self.config.k;
            let vals = a.values_mut();
            for (pos, v) in self.conv_pos.iter().zip(nvals.values()) {
                vals[pos[0]] += k * v;
                vals[pos[1]] += k * v;
            }
        }
        a
    }

    /// Applies Dirichlet rows and moves known columns to the right-hand side.
    fn constrain(&self, a: &mut SparseMatrix, rhs: &mut [f64]) {
        {
            let vals = a.values_mut();
            for &(pos, r, c) in &self.elim {
                rhs[r] -= vals[pos] * self.lifted[c];
                vals[pos] = 0.0;
            }
        }
        for &r in &self.fixed_rows {
            let start = a.row_ptr()[r];
            let cols: Vec<usize> = a.row(r).map(|(c, _)| c).collect();
            let vals = a.values_mut();
            for (off, c) in cols.into_iter().enumerate() {
                vals[start + off] = if c == r { 1.0 } else { 0.0 };
            }
            rhs[r] = self.lifted[r];
        }
    }

    fn rhs(&self, prev: &State, inputs: &StepInputs) -> Vector {
        let p = &*self.problem;
        let k = self.config.k;
        let mut rhs = vec![0.0; self.n];
        let mv = p.mass_v.mul_vec(prev.velocity.coeffs());
        for i in 0..self.nv {
            rhs[i] = mv[i] + k * inputs.forcing[i] + inputs.noise[i];
        }
        if self.config.kind.is_penalty() {
            let mp = p.mass_p.mul_vec(prev.pressure.coeffs());
            for q in 0..self.np {
                rhs[self.nv + q] = self.config.eps * mp[q];
            }
        }
        rhs
    }

    fn solve_system(&mut self, wind: Option<&[f64]>, rhs0: &[f64], guess: &[f64]) -> Result<(Vector, f64)> {
        let mut rhs = rhs0.to_vec();
        let frozen = wind.is_none();
        let (lu, a) = match (&self.frozen, frozen) {
            (Some((lu, a)), true) => {
                // constrained matrix is fixed; only the right-hand side moves
                let mut scratch = self.system_matrix(None);
                self.constrain(&mut scratch, &mut rhs);
                (Some(lu.clone()), a.clone())
            }
            _ => {
                let mut a = self.system_matrix(wind);
                self.constrain(&mut a, &mut rhs);
                (None, a)
            }
        };
        let tol = self.config.linear.tolerance;
        let scale = norm_inf(&rhs).max(f64::MIN_POSITIVE);
        let mut x = match self.config.linear.method {
            LinearMethod::Iterative => {
                let sol = bicgstab(&a, &rhs, guess, tol * 1e-2, self.config.linear.max_iters)?;
                sol.x
            }
            LinearMethod::DirectLu => {
                let lu = match lu {
                    Some(lu) => lu,
                    None => {
                        let lu = self.symbolic.factor(&a)?;
                        if frozen {
                            self.frozen = Some((lu.clone(), a.clone()));
                        }
                        lu
                    }
                };
                let mut x = lu.solve(&rhs)?;
                for _ in 0..3 {
                    let r: Vector = a.mul_vec(&x).iter().zip(&rhs).map(|(ax, b)| b - ax).collect();
                    if norm_inf(&r) <= tol * scale {
                        break;
                    }
                    let dx = lu.solve(&r)?;
                    x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
                }
                x
            }
        };
        let r: Vector = a.mul_vec(&x).iter().zip(&rhs).map(|(ax, b)| b - ax).collect();
        let rel = norm_inf(&r) / scale;
        if !(rel <= tol) {
            return Err(Error::Solver(format!(
                "linear residual {rel:.3e} exceeds tolerance {tol:.1e} ({} unknowns)",
                self.n
            )));
        }
        for (i, f) in self.fixed.iter().enumerate() {
            if *f {
                x[i] = self.lifted[i];
            }
        }
        Ok((x, rel))
    }

    /// Inputs of step `prev.m + 1` for a given increment.
    pub fn inputs(&self, prev: &State, increment: Option<&WienerIncrement>) -> StepInputs {
        let k = self.config.k;
        let t0 = prev.m as f64 * k;
        StepInputs {
            forcing: self.problem.forcing_vector(t0, t0 + k),
            noise: match increment {
                Some(inc) => self.problem.noise_vector(inc, &prev.velocity),
                None => vec![0.0; self.nv],
            },
            wind: None,
            multiplier: 0.0,
        }
    }

    pub fn step(&mut self, prev: &State, increment: Option<&WienerIncrement>) -> Result<StepOutcome> {
        let inputs = self.inputs(prev, increment);
        self.step_with_inputs(prev, inputs)
    }

    pub fn step_with_inputs(&mut self, prev: &State, mut inputs: StepInputs) -> Result<StepOutcome> {
        let rhs = self.rhs(prev, &inputs);
        let mut guess = Vec::with_capacity(self.n);
        guess.extend_from_slice(prev.velocity.coeffs());
        guess.extend_from_slice(prev.pressure.coeffs());
        guess.resize(self.n, 0.0);

        let convection = self.config.convection_active();
        let picard = self.config.kind == SchemeKind::PenaltyNonlinear && convection;
        let mut wind: Vector = prev.velocity.coeffs().to_vec();
        let mut iterations = 0;
        let (x, residual) = loop {
            iterations += 1;
            let w = convection.then_some(wind.as_slice());
            let (x, res) = self.solve_system(w, &rhs, &guess)?;
            if !picard || self.config.picard.max_iters == 1 {
                break (x, res);
            }
            let diff: Vector = x[..self.nv].iter().zip(&wind).map(|(a, b)| a - b).collect();
            let d = self.problem.velocity_norm_sq(&diff).sqrt();
            let norm = self.problem.velocity_norm_sq(&x[..self.nv]).sqrt();
            if d <= self.config.picard.tolerance * (1.0 + norm) {
                break (x, res);
            }
            if iterations >= self.config.picard.max_iters {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: d / (1.0 + norm),
                });
            }
            guess.copy_from_slice(&x);
            wind.copy_from_slice(&x[..self.nv]);
        };
        if convection {
            inputs.wind = Some(wind);
        }
        if self.config.kind.is_saddle() {
            inputs.multiplier = x[self.n - 1];
        }
        let p = &self.problem;
        let state = State {
            m: prev.m + 1,
            t: (prev.m + 1) as f64 * self.config.k,
            velocity: FEFunction::new(p.velocity.clone(), x[..self.nv].to_vec())?,
            pressure: FEFunction::new(p.pressure.clone(), x[self.nv..self.nv + self.np].to_vec())?,
        };
        Ok(StepOutcome {
            state,
            inputs,
            picard_iterations: iterations,
            linear_residual: residual,
        })
    }
}

/// Per-step terms of the discrete energy balance
///
/// ```text
/// 1/2 (|V^m|^2 - |V^{m-1}|^2 + |V^m - V^{m-1}|^2) + k nu |grad V^m|^2
///   + eps/2 (|P^m|^2 - |P^{m-1}|^2 + |P^m - P^{m-1}|^2) + k b(w, V^m, V^m)
///   = k (f^m, V^m) + (g dW, V^m)
/// ```
///
/// which holds exactly for homogeneous Dirichlet data. Saddle-point schemes
/// use `eps = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub m: usize,
    pub t: f64,
    pub velocity_sq: f64,
    pub velocity_prev_sq: f64,
    pub velocity_jump_sq: f64,
    pub grad_sq: f64,
    pub eps_pressure_sq: f64,
    pub eps_pressure_prev_sq: f64,
    pub eps_pressure_jump_sq: f64,
    pub convection_work: f64,
    pub forcing_work: f64,
    pub noise_work: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs - rhs|` relative to the largest single term.
    pub residual: f64,
    /// `|eps Mp (P^m - P^{m-1}) + k B V^m|_inf`
    pub pressure_residual: f64,
    /// `(P^m, 1)`
    pub pressure_mean: f64,
    /// `|B V^m|_inf`
    pub divergence: f64,
    pub k_over_eps: f64,
}

pub fn energy_ledger(
    problem: &Problem,
    config: &SchemeConfig,
    prev: &State,
    next: &State,
    inputs: &StepInputs,
) -> EnergyReport {
    let (k, nu) = (config.k, config.nu);
    let eps = if config.kind.is_saddle() { 0.0 } else { config.eps };
    let v = next.velocity.coeffs();
    let v0 = prev.velocity.coeffs();
    let dv: Vector = v.iter().zip(v0).map(|(a, b)| a - b).collect();
    let p = next.pressure.coeffs();
    let p0 = prev.pressure.coeffs();
    let dp: Vector = p.iter().zip(p0).map(|(a, b)| a - b).collect();

    let velocity_sq = problem.velocity_norm_sq(v);
    let velocity_prev_sq = problem.velocity_norm_sq(v0);
    let velocity_jump_sq = problem.velocity_norm_sq(&dv);
    let grad_sq = problem.grad_norm_sq(v);
    let eps_pressure_sq = eps * problem.pressure_norm_sq(p);
    let eps_pressure_prev_sq = eps * problem.pressure_norm_sq(p0);
    let eps_pressure_jump_sq = eps * problem.pressure_norm_sq(&dp);
    let convection_work = match &inputs.wind {
        Some(w) => k * problem.convection.scalar_matrix(w).block_diagonal(2).bilinear(v, v),
        None => 0.0,
    };
    let forcing_work = k * dot(&inputs.forcing, v);
    let noise_work = dot(&inputs.noise, v);

    let terms = [
        0.5 * velocity_sq,
        0.5 * velocity_prev_sq,
        0.5 * velocity_jump_sq,
        k * nu * grad_sq,
        0.5 * eps_pressure_sq,
        0.5 * eps_pressure_prev_sq,
        0.5 * eps_pressure_jump_sq,
        convection_work,
        forcing_work,
        noise_work,
    ];
    let lhs = terms[0] - terms[1] + terms[2] + terms[3] + terms[4] - terms[5] + terms[6] + terms[7];
    let rhs = forcing_work + noise_work;
    let biggest = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let residual = if biggest > 0.0 { (lhs - rhs).abs() / biggest } else { 0.0 };

    let bv = problem.div.mul_vec(v);
    let mdp = problem.mass_p.mul_vec(&dp);
    let pres: Vector = mdp.iter().zip(&bv).map(|(a, b)| eps * a + k * b).collect();
    EnergyReport {
        m: next.m,
        t: next.t,
        velocity_sq,
        velocity_prev_sq,
        velocity_jump_sq,
        grad_sq,
        eps_pressure_sq,
        eps_pressure_prev_sq,
        eps_pressure_jump_sq,
        convection_work,
        forcing_work,
        noise_work,
        lhs,
        rhs,
        residual,
        pressure_residual: norm_inf(&pres),
        pressure_mean: problem.pressure_integral(p),
        divergence: norm_inf(&bv),
        k_over_eps: config.k_over_eps(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOptions {
    /// Keep every `stride`-th state (plus the first and last); `None` keeps
    /// only the first and last.
    pub snapshot_stride: Option<usize>,
    pub ledger: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            snapshot_stride: None,
            ledger: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: SchemeConfig,
    pub base_seed: u64,
    pub sample: u64,
    pub states: Vec<State>,
    pub energy: Vec<EnergyReport>,
    /// Replay hash of the increment consumed at each step.
    pub noise_hashes: Vec<u64>,
    pub picard_iterations: Vec<usize>,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Runs all `M` steps of one sample path from the problem's initial state.
pub fn run_path(
    problem: &Arc<Problem>,
    config: &SchemeConfig,
    base_seed: u64,
    sample: u64,
    options: PathOptions,
) -> Result<Trajectory> {
    let mut stepper = Stepper::new(problem.clone(), config.clone())?;
    run_path_with(&mut stepper, base_seed, sample, options)
}

pub fn run_path_with(stepper: &mut Stepper, base_seed: u64, sample: u64, options: PathOptions) -> Result<Trajectory> {
    let problem = stepper.problem().clone();
    let config = stepper.config().clone();
    let mut state = problem.initial_state();
    let mut states = vec![state.clone()];
    let mut energy = Vec::new();
    let mut hashes = Vec::new();
    let mut iters = Vec::new();
    for m in 1..=config.steps {
        let inc = problem.increment(base_seed, sample, m, config.k)?;
        let out = stepper
            .step(&state, inc.as_ref())
            .map_err(|e| Error::Step { step: m, source: Box::new(e) })?;
        if options.ledger {
            energy.push(energy_ledger(&problem, &config, &state, &out.state, &out.inputs));
        }
        hashes.push(inc.as_ref().map_or(0, |i| i.replay_hash()));
        iters.push(out.picard_iterations);
        state = out.state;
        let keep = m == config.steps || options.snapshot_stride.is_some_and(|s| s > 0 && m % s == 0);
        if keep {
            states.push(state.clone());
        }
    }
    Ok(Trajectory {
        config,
        base_seed,
        sample,
        states,
        energy,
        noise_hashes: hashes,
        picard_iterations: iters,
    })
}

/// Value of the monotonicity functional for `z = u - w`:
///
/// `nu |grad z|^2 + b(u, u, z) - b(w, w, z) + 27/(2 nu^3) |w|^4_{L4} |z|^2 - L_g^2 |z|^2`
///
/// together with the sum of the absolute values of its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monotonicity {
    pub value: f64,
    pub scale: f64,
}

pub fn monotonicity_check(u: &FEFunction, w: &FEFunction, nu: f64, noise: Option<&NoiseModel>) -> Monotonicity {
    let space = u.space().clone();
    let z_coeffs: Vector = u.coeffs().iter().zip(w.coeffs()).map(|(a, b)| a - b).collect();
    let z = FEFunction::new(space.clone(), z_coeffs).expect("same space");
    let rule = quadrature_rule(6).expect("degree-6 rule");
    let (mut grad_sq, mut z_sq, mut w4) = (0.0, 0.0, 0.0);
    for t in 0..space.mesh().n_triangles() {
        let area = space.mesh().area(t);
        for (l, q) in rule.points.iter().zip(&rule.weights) {
            let g = z.grad_in(t, *l);
            let zv = z.eval_in(t, *l);
            let wv = w.eval_in(t, *l);
            grad_sq += area * q * (g[0][0].powi(2) + g[0][1].powi(2) + g[1][0].powi(2) + g[1][1].powi(2));
            z_sq += area * q * (zv[0] * zv[0] + zv[1] * zv[1]);
            w4 += area * q * (wv[0] * wv[0] + wv[1] * wv[1]).powi(2);
        }
    }
    let buu = trilinear_eval(u, u, &z);
    let bww = trilinear_eval(w, w, &z);
    let lg = noise.map_or(0.0, |m| m.lipschitz());
    let terms = [
        nu * grad_sq,
        buu,
        -bww,
        27.0 / (2.0 * nu.powi(3)) * w4 * z_sq,
        -lg * lg * z_sq,
    ];
    Monotonicity {
        value: terms.iter().sum(),
        scale: terms.iter().map(|t| t.abs()).sum(),
    }
}

/// Poincare constant `1 / sqrt(lambda_min)` of the discrete Dirichlet
/// Laplacian on the velocity space, by inverse power iteration.
pub fn poincare_constant(problem: &Problem) -> Result<f64> {
    let ns = problem.velocity.n_scalar();
    let mut fixed = vec![false; ns];
    for &d in &problem.constraints.dofs {
        fixed[d % ns] = true;
    }
    let free: Vec<usize> = (0..ns).filter(|&i| !fixed[i]).collect();
    if free.is_empty() {
        return Err(Error::config("no free velocity dofs"));
    }
    let mut index = vec![usize::MAX; ns];
    for (k, &i) in free.iter().enumerate() {
        index[i] = k;
    }
    let restrict = |m: &SparseMatrix| {
        let mut t = Vec::new();
        for (r, &i) in free.iter().enumerate() {
            for (c, v) in m.row(i) {
                if index[c] != usize::MAX {
                    t.push((r, index[c], v));
                }
            }
        }
        SparseMatrix::from_triplets(free.len(), free.len(), &t)
    };
    let a = restrict(&problem.scalar_stiffness);
    let m = restrict(&problem.scalar_mass);
    let lu = LuFactor::new(&a)?;
    let mut x = vec![1.0; free.len()];
    let mut lambda = f64::INFINITY;
    for _ in 0..500 {
        let y = lu.solve(&m.mul_vec(&x))?;
        let norm = m.bilinear(&y, &y).sqrt();
        x = y.iter().map(|v| v / norm).collect();
        let next = a.bilinear(&x, &x);
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(1.0 / lambda.sqrt())
}

/// Whether the declared Lipschitz constant satisfies
/// `L_g <= sqrt(nu / (2 C_P^2))`; also returns the bound.
pub fn lipschitz_admissible(problem: &Problem, nu: f64) -> Result<(bool, f64)> {
    let cp = poincare_constant(problem)?;
    let bound = (nu / (2.0 * cp * cp)).sqrt();
    let lg = problem.noise().map_or(0.0, |m| m.lipschitz());
    Ok((lg <= bound, bound))
}
