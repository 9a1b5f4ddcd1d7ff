//! Continuous Lagrange finite-element spaces of degree 1 and 2.
//!
//! Scalar dofs are numbered vertices first, then (for P2) edges in the
//! mesh's edge order, so the P2 dof of edge `e` is `n_vertices + e`. Vector
//! spaces stack the scalar numbering per component: dof `(c, s)` is
//! `c * n_scalar + s`.
//!
//! On each triangle the local scalar basis is ordered as the three vertex
//! functions followed (for P2) by the three edge functions, where local
//! edge `e` joins local vertices `e` and `(e + 1) % 3`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::assembly::{load_vector_static, mass_matrix};
use crate::error::{Error, Result};
use crate::linalg::{solve_direct, LuFactor};
use crate::mesh::{Mesh, Point, Tag};
use crate::sparse::{norm2, SparseMatrix, Vector};

/// Most local scalar basis functions of any supported element (P2).
pub const MAX_LOCAL: usize = 6;

pub type VectorField = dyn Fn(Point) -> [f64; 2] + Send + Sync;

/// Affine data of one triangle: area and barycentric gradients.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    pub grad_lambda: [[f64; 2]; 3],
    pub vertices: [Point; 3],
}

impl ElementGeometry {
    pub fn new(p: [Point; 3]) -> Self {
        let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let g = |i: usize, j: usize| [(p[i][1] - p[j][1]) / two_a, (p[j][0] - p[i][0]) / two_a];
        ElementGeometry {
            area: 0.5 * two_a,
            grad_lambda: [g(1, 2), g(2, 0), g(0, 1)],
            vertices: p,
        }
    }

    pub fn point(&self, l: [f64; 3]) -> Point {
        let v = &self.vertices;
        [
            l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0],
            l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1],
        ]
    }
}

/// Values of the local scalar basis at barycentric point `l`.
pub fn shape_values(degree: usize, l: [f64; 3]) -> [f64; MAX_LOCAL] {
    let mut out = [0.0; MAX_LOCAL];
    match degree {
        1 => out[..3].copy_from_slice(&l),
        _ => {
            for a in 0..3 {
                out[a] = l[a] * (2.0 * l[a] - 1.0);
                out[3 + a] = 4.0 * l[a] * l[(a + 1) % 3];
            }
        }
    }
    out
}

/// Physical gradients of the local scalar basis at barycentric point `l`.
pub fn shape_gradients(degree: usize, l: [f64; 3], gl: &[[f64; 2]; 3]) -> [[f64; 2]; MAX_LOCAL] {
    let mut out = [[0.0; 2]; MAX_LOCAL];
    match degree {
        1 => out[..3].copy_from_slice(gl),
        _ => {
            for a in 0..3 {
                let b = (a + 1) % 3;
                let s = 4.0 * l[a] - 1.0;
                out[a] = [s * gl[a][0], s * gl[a][1]];
                out[3 + a] = [
                    4.0 * (l[b] * gl[a][0] + l[a] * gl[b][0]),
                    4.0 * (l[b] * gl[a][1] + l[a] * gl[b][1]),
                ];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpace {
    mesh: Arc<Mesh>,
    degree: usize,
    components: usize,
    n_scalar: usize,
    n_local: usize,
    cell_dofs: Vec<usize>,
    dof_coords: Vec<Point>,
}

impl FunctionSpace {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Dofs per component.
    pub fn n_scalar(&self) -> usize {
        self.n_scalar
    }

    pub fn n_dofs(&self) -> usize {
        self.n_scalar * self.components
    }

    /// Local scalar basis size: 3 for P1, 6 for P2.
    pub fn n_local(&self) -> usize {
        self.n_local
    }

    /// Scalar dof indices of triangle `t`.
    pub fn cell_dofs(&self, t: usize) -> &[usize] {
        &self.cell_dofs[t * self.n_local..(t + 1) * self.n_local]
    }

    /// All dof indices of triangle `t`, component-major.
    pub fn cell_dofs_vector(&self, t: usize) -> Vec<usize> {
        (0..self.components)
            .flat_map(|c| self.cell_dofs(t).iter().map(move |&s| c * self.n_scalar + s))
            .collect()
    }

    /// Coordinates of scalar dof `s`.
    pub fn dof_coords(&self) -> &[Point] {
        &self.dof_coords
    }

    /// Coordinate of (possibly vector) dof `i`.
    pub fn dof_point(&self, i: usize) -> Point {
        self.dof_coords[i % self.n_scalar]
    }

    pub fn geometry(&self, t: usize) -> ElementGeometry {
        ElementGeometry::new(self.mesh.triangle_points(t))
    }

    pub fn zero_function(self: &Arc<Self>) -> FEFunction {
        FEFunction::zero(self.clone())
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(self: &Arc<Self>, f: impl Fn(Point) -> [f64; 2]) -> FEFunction {
        let mut coeffs = vec![0.0; self.n_dofs()];
        for (s, &p) in self.dof_coords.iter().enumerate() {
            let v = f(p);
            for c in 0..self.components {
                coeffs[c * self.n_scalar + s] = v[c];
            }
        }
        FEFunction::new(self.clone(), coeffs).expect("length matches by construction")
    }

    pub fn same_mesh(&self, other: &FunctionSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh) || *self.mesh == *other.mesh
    }
}

pub fn build_space(mesh: Arc<Mesh>, degree: usize, components: usize) -> Result<Arc<FunctionSpace>> {
    if !(1..=2).contains(&degree) {
        return Err(Error::config(format!(
            "unsupported polynomial degree {degree} (expected 1 or 2)"
        )));
    }
    if !(1..=2).contains(&components) {
        return Err(Error::config(format!(
            "unsupported component count {components} (expected 1 or 2)"
        )));
    }
    let nv = mesh.n_vertices();
    let n_local = if degree == 1 { 3 } else { 6 };
    let mut cell_dofs = Vec::with_capacity(n_local * mesh.n_triangles());
    for (tri, edges) in mesh.triangles().iter().zip(mesh.triangle_edges()) {
        cell_dofs.extend_from_slice(tri);
        if degree == 2 {
            cell_dofs.extend(edges.iter().map(|e| nv + e));
        }
    }
    let mut dof_coords: Vec<Point> = mesh.vertices().to_vec();
    if degree == 2 {
        let v = mesh.vertices();
        dof_coords.extend(mesh.edges().iter().map(|&[a, b]| {
            [0.5 * (v[a][0] + v[b][0]), 0.5 * (v[a][1] + v[b][1])]
        }));
    }
    Ok(Arc::new(FunctionSpace {
        n_scalar: dof_coords.len(),
        mesh,
        degree,
        components,
        n_local,
        cell_dofs,
        dof_coords,
    }))
}

/// A finite-element field: space plus coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FEFunction {
    space: Arc<FunctionSpace>,
    coeffs: Vector,
}

impl FEFunction {
    pub fn new(space: Arc<FunctionSpace>, coeffs: Vector) -> Result<Self> {
        if coeffs.len() != space.n_dofs() {
            return Err(Error::config(format!(
                "coefficient vector has length {} but the space has {} dofs",
                coeffs.len(),
                space.n_dofs()
            )));
        }
        Ok(FEFunction { space, coeffs })
    }

    pub fn zero(space: Arc<FunctionSpace>) -> Self {
        let n = space.n_dofs();
        FEFunction {
            space,
            coeffs: vec![0.0; n],
        }
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vector {
        self.coeffs
    }

    /// Value in triangle `t` at barycentric point `l`; unused components are 0.
    pub fn eval_in(&self, t: usize, l: [f64; 3]) -> [f64; 2] {
        let sp = &self.space;
        let phi = shape_values(sp.degree, l);
        let dofs = sp.cell_dofs(t);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate().take(sp.components) {
            *o = dofs
                .iter()
                .zip(&phi)
                .map(|(&s, p)| p * self.coeffs[c * sp.n_scalar + s])
                .sum();
        }
        out
    }

    /// Gradient `g[c][j] = d u_c / d x_j` in triangle `t` at `l`.
    pub fn grad_in(&self, t: usize, l: [f64; 3]) -> [[f64; 2]; 2] {
        let sp = &self.space;
        let geo = sp.geometry(t);
        let dphi = shape_gradients(sp.degree, l, &geo.grad_lambda);
        let dofs = sp.cell_dofs(t);
        let mut out = [[0.0; 2]; 2];
        for (c, o) in out.iter_mut().enumerate().take(sp.components) {
            for (a, &s) in dofs.iter().enumerate() {
                let u = self.coeffs[c * sp.n_scalar + s];
                o[0] += u * dphi[a][0];
                o[1] += u * dphi[a][1];
            }
        }
        out
    }

    /// Value at a physical point, or `None` outside the mesh.
    pub fn eval(&self, p: Point) -> Option<[f64; 2]> {
        self.space.mesh.locate(p).map(|(t, l)| self.eval_in(t, l))
    }

    /// ASCII dump: a header line `fefunction <degree> <components> <n_dofs>`
    /// followed by one coefficient per line.
    pub fn to_ascii(&self) -> String {
        let mut out = format!(
            "fefunction {} {} {}\n",
            self.space.degree,
            self.space.components,
            self.space.n_dofs()
        );
        for v in &self.coeffs {
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn from_ascii(space: Arc<FunctionSpace>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!(
            "fefunction {} {} {}",
            space.degree,
            space.components,
            space.n_dofs()
        );
        if header.trim() != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("header {header:?} does not match space ({expected:?})"),
            });
        }
        let coeffs = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 2,
                    message: format!("bad coefficient {l:?}"),
                })
            })
            .collect::<Result<Vector>>()?;
        FEFunction::new(space, coeffs)
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_all(self.to_ascii().as_bytes())
            .map_err(|e| Error::io(path, e))?;
        crate::output::write_atomic(path, &buf)
    }
}

/// Dirichlet dofs and their prescribed values, sorted by dof index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Mask of constrained dofs over `n` dofs.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &d in &self.dofs {
            m[d] = true;
        }
        m
    }

    /// Overwrites the constrained entries of `x` with their values.
    pub fn apply(&self, x: &mut [f64]) {
        for (&d, &v) in self.dofs.iter().zip(&self.values) {
            x[d] = v;
        }
    }

    /// Same dofs, all values zero.
    pub fn homogeneous(&self) -> ConstraintSet {
        ConstraintSet {
            dofs: self.dofs.clone(),
            values: vec![0.0; self.dofs.len()],
        }
    }
}

/// Dirichlet data per boundary tag, with an optional fallback for tags not
/// listed. When a dof lies on edges of several listed tags, the largest tag
/// wins; the fallback has the lowest priority.
#[derive(Clone, Default)]
pub struct BoundaryValues {
    by_tag: BTreeMap<Tag, Arc<VectorField>>,
    default: Option<Arc<VectorField>>,
}

impl fmt::Debug for BoundaryValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundaryValues")
            .field("tags", &self.by_tag.keys().collect::<Vec<_>>())
            .field("default", &self.default.is_some())
            .finish()
    }
}

impl BoundaryValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every boundary edge gets `value`.
    pub fn everywhere(value: [f64; 2]) -> Self {
        Self::new().with_default(move |_| value)
    }

    pub fn with_tag(mut self, tag: Tag, f: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        self.by_tag.insert(tag, Arc::new(f));
        self
    }

    pub fn with_default(mut self, f: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        self.default = Some(Arc::new(f));
        self
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.by_tag.keys().copied()
    }
}

pub fn dirichlet_constraints(space: &FunctionSpace, bv: &BoundaryValues) -> Result<ConstraintSet> {
    let mesh = space.mesh();
    let present = mesh.tags();
    for tag in bv.tags() {
        if !present.contains(&tag) {
            return Err(Error::config(format!(
                "boundary tag {tag} does not exist in the mesh (tags: {present:?})"
            )));
        }
    }
    let edge_id: HashMap<(usize, usize), usize> = mesh
        .edges()
        .iter()
        .enumerate()
        .map(|(i, &[a, b])| ((a, b), i))
        .collect();
    // scalar dof -> (priority, field)
    let mut chosen: BTreeMap<usize, (i64, &Arc<VectorField>)> = BTreeMap::new();
    for e in mesh.boundary_edges() {
        let (prio, field) = match (bv.by_tag.get(&e.tag), &bv.default) {
            (Some(f), _) => (e.tag as i64, f),
            (None, Some(f)) => (-1, f),
            (None, None) => continue,
        };
        let [a, b] = e.vertices;
        let mut dofs = vec![a, b];
        if space.degree() == 2 {
            let key = (a.min(b), a.max(b));
            dofs.push(mesh.n_vertices() + edge_id[&key]);
        }
        for s in dofs {
            let entry = chosen.entry(s).or_insert((prio, field));
            if prio > entry.0 {
                *entry = (prio, field);
            }
        }
    }
    let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(chosen.len() * space.components());
    for (&s, (_, field)) in &chosen {
        let v = field(space.dof_coords()[s]);
        for (c, value) in v.iter().enumerate().take(space.components()) {
            pairs.push((c * space.n_scalar() + s, *value));
        }
    }
    pairs.sort_by_key(|p| p.0);
    let (dofs, values) = pairs.into_iter().unzip();
    Ok(ConstraintSet { dofs, values })
}

/// L2 projection onto the full (unconstrained) space.
pub fn l2_project(space: &Arc<FunctionSpace>, target: &VectorField) -> Result<FEFunction> {
    let mass = mass_matrix(space);
    let b = load_vector_static(space, target);
    let c = solve_direct(&mass, &b)?;
    let r: Vector = mass.mul_vec(&c).iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm2(&b).max(f64::MIN_POSITIVE);
    if norm2(&r) > 1e-12 * scale.max(1.0) {
        return Err(Error::Solver(format!(
            "L2 projection residual {:.3e} exceeds tolerance",
            norm2(&r)
        )));
    }
    FEFunction::new(space.clone(), c)
}

/// L2 projection onto the affine subspace of fields matching `constraints`:
/// the free coefficients solve `M_ff c_f = b_f - M_fd g`.
pub fn constrained_projection(
    space: &Arc<FunctionSpace>,
    target: &VectorField,
    constraints: &ConstraintSet,
) -> Result<FEFunction> {
    let mass = mass_matrix(space);
    let b = load_vector_static(space, target);
    let c = solve_constrained(&mass, &b, constraints)?;
    FEFunction::new(space.clone(), c)
}

/// Solves `A x = b` on the free dofs with constrained dofs fixed, using row
/// replacement and column elimination.
pub(crate) fn solve_constrained(a: &SparseMatrix, b: &[f64], cs: &ConstraintSet) -> Result<Vector> {
    let n = a.nrows();
    let fixed = cs.mask(n);
    let mut g = vec![0.0; n];
    cs.apply(&mut g);
    let mut rhs = b.to_vec();
    let mut triplets = Vec::with_capacity(a.nnz());
    for r in 0..n {
        if fixed[r] {
            triplets.push((r, r, 1.0));
            rhs[r] = g[r];
            continue;
        }
        for (c, v) in a.row(r) {
            if fixed[c] {
                rhs[r] -= v * g[c];
            } else {
                triplets.push((r, c, v));
            }
        }
    }
    let reduced = SparseMatrix::from_triplets(n, n, &triplets);
    LuFactor::new(&reduced)?.solve(&rhs)
}
