//! Truncated Karhunen-Loeve sampling of a two-component Q-Wiener process
//! and the stochastic load vector `(g(V) dW, phi_i)`.
//!
//! Modes are `e_ij(x, y) = (2/L) sin(i pi x / L) sin(j pi y / L)` for
//! `1 <= i, j <= J`, restricted to the computational domain. Each step of
//! each sample draws from its own counter-based stream, so increments are a
//! pure function of `(base_seed, sample, step)`.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assembly::load_vector_cellwise;
use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::quadrature::{quadrature_rule, DEFAULT_DEGREE};
use crate::space::{shape_values, FEFunction, FunctionSpace};
use crate::sparse::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum LambdaKind {
    /// `lambda(i, j) = 1 / (i + j)^2`
    InverseSquareSum,
    /// Row-major `J x J` table, `values[(i-1) * J + (j-1)]`.
    Table(Vec<f64>),
}

/// Pointwise diffusion coefficient acting diagonally on each component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Gamma {
    /// `gamma(v) = scale`
    Additive { scale: f64 },
    /// `gamma(v) = c v`, componentwise
    Linear { c: f64 },
}

impl Gamma {
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        match *self {
            Gamma::Additive { scale } => [scale, scale],
            Gamma::Linear { c } => [c * v[0], c * v[1]],
        }
    }

    /// Declared Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Gamma::Additive { .. } => 0.0,
            Gamma::Linear { c } => c.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Gamma::Additive { scale } => scale == 0.0,
            Gamma::Linear { c } => c == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    j: usize,
    lambda: Vec<f64>,
    domain_scale: f64,
    gamma: Gamma,
}

pub fn make_noise_model(j: usize, lambda_kind: LambdaKind, domain_scale: f64, gamma: Gamma) -> Result<NoiseModel> {
    if j == 0 {
        return Err(Error::config("noise truncation J must be at least 1"));
    }
    if !(domain_scale > 0.0 && domain_scale.is_finite()) {
        return Err(Error::config("noise domain scale must be positive"));
    }
    let lambda = match lambda_kind {
        LambdaKind::InverseSquareSum => (1..=j)
            .flat_map(|i| (1..=j).map(move |jj| 1.0 / ((i + jj) as f64).powi(2)))
            .collect(),
        LambdaKind::Table(t) => {
            if t.len() != j * j {
                return Err(Error::config(format!(
                    "eigenvalue table has {} entries, expected J^2 = {}",
                    t.len(),
                    j * j
                )));
            }
            t
        }
    };
    if let Some(bad) = lambda.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::config(format!("noise eigenvalues must be positive, got {bad}")));
    }
    Ok(NoiseModel {
        j,
        lambda,
        domain_scale,
        gamma,
    })
}

impl NoiseModel {
    /// The experiment's model: `J = 5`, `lambda = 1/(i+j)^2`, `L = 5`.
    pub fn standard(gamma: Gamma) -> NoiseModel {
        make_noise_model(5, LambdaKind::InverseSquareSum, 5.0, gamma).expect("valid defaults")
    }

    pub fn truncation(&self) -> usize {
        self.j
    }

    pub fn domain_scale(&self) -> f64 {
        self.domain_scale
    }

    pub fn gamma(&self) -> Gamma {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: Gamma) -> Self {
        self.gamma = gamma;
        self
    }

    /// `lambda(i, j)` with 1-based indices.
    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        self.lambda[(i - 1) * self.j + (j - 1)]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    /// Trace of the truncated covariance over both components.
    pub fn trace(&self) -> f64 {
        2.0 * self.lambda.iter().sum::<f64>()
    }

    pub fn lipschitz(&self) -> f64 {
        self.gamma.lipschitz()
    }

    /// `e_ij(p)` with 1-based indices.
    pub fn eigenfunction(&self, i: usize, j: usize, p: Point) -> f64 {
        let l = self.domain_scale;
        (2.0 / l) * (i as f64 * PI * p[0] / l).sin() * (j as f64 * PI * p[1] / l).sin()
    }

    fn sines(&self, p: Point) -> (Vec<f64>, Vec<f64>) {
        let l = self.domain_scale;
        let sx = (1..=self.j).map(|i| (i as f64 * PI * p[0] / l).sin()).collect();
        let sy = (1..=self.j).map(|i| (i as f64 * PI * p[1] / l).sin()).collect();
        (sx, sy)
    }

    /// Largest observed `|gamma(a) - gamma(b)| / |a - b|` over random pairs.
    pub fn sample_lipschitz_ratio(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let a: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let b: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let (ga, gb) = (self.gamma.apply(a), self.gamma.apply(b));
            let num = ((ga[0] - gb[0]).powi(2) + (ga[1] - gb[1]).powi(2)).sqrt();
            let den = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
        worst
    }

    /// Checks the declared Lipschitz constant on `pairs` random pairs.
    pub fn check_lipschitz(&self, pairs: usize, seed: u64) -> Result<()> {
        let r = self.sample_lipschitz_ratio(pairs, seed);
        if r > self.lipschitz() * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::config(format!(
                "diffusion coefficient exceeds its declared Lipschitz constant ({r} > {})",
                self.lipschitz()
            )));
        }
        Ok(())
    }
}

/// Identifies the random stream of one increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub base_seed: u64,
    pub sample: u64,
    pub step: u64,
}

impl StreamId {
    pub fn new(base_seed: u64, sample: u64, step: u64) -> Self {
        StreamId {
            base_seed,
            sample,
            step,
        }
    }

    /// ChaCha8 keyed by the seed, with the sample as stream number and the
    /// step selecting a disjoint block of 2^40 words.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.sample);
        rng.set_word_pos((self.step as u128) << 40);
        rng
    }
}

/// One sampled increment `W(t_m) - W(t_{m-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrement {
    k: f64,
    j: usize,
    /// Standard normal draws, layout `[component][i][j]`.
    xi: Vec<f64>,
    /// `sqrt(k) sqrt(lambda(i, j)) xi`, same layout.
    coeffs: Vec<f64>,
}

impl WienerIncrement {
    pub fn from_xi(model: &NoiseModel, k: f64, xi: Vec<f64>) -> Result<Self> {
        let jj = model.j * model.j;
        if xi.len() != 2 * jj {
            return Err(Error::config(format!(
                "expected {} normal draws, got {}",
                2 * jj,
                xi.len()
            )));
        }
        if !(k > 0.0) {
            return Err(Error::config("time step must be positive"));
        }
        let sk = k.sqrt();
        let coeffs = xi
            .iter()
            .enumerate()
            .map(|(n, x)| sk * model.lambda[n % jj].sqrt() * x)
            .collect();
        Ok(WienerIncrement {
            k,
            j: model.j,
            xi,
            coeffs,
        })
    }

    pub fn zero(model: &NoiseModel, k: f64) -> Self {
        Self::from_xi(model, k, vec![0.0; 2 * model.j * model.j]).expect("sizes match")
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Scaled coefficient of component `c`, mode `(i, j)` (1-based).
    pub fn coeff(&self, c: usize, i: usize, j: usize) -> f64 {
        self.coeffs[c * self.j * self.j + (i - 1) * self.j + (j - 1)]
    }

    /// `dW(p)`, evaluated from the expansion.
    pub fn eval(&self, model: &NoiseModel, p: Point) -> [f64; 2] {
        let (sx, sy) = model.sines(p);
        let scale = 2.0 / model.domain_scale;
        let jj = self.j * self.j;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..self.j {
                for j in 0..self.j {
                    s += self.coeffs[c * jj + i * self.j + j] * sx[i] * sy[j];
                }
            }
            *o = scale * s;
        }
        out
    }

    /// Hash of the bit patterns of the normal draws.
    pub fn replay_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.j.hash(&mut h);
        for x in &self.xi {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Draws all `2 J^2` standard normals of one increment from `rng`.
pub fn sample_increment(model: &NoiseModel, rng: &mut impl Rng, k: f64) -> Result<WienerIncrement> {
    let xi = (0..2 * model.j * model.j)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    WienerIncrement::from_xi(model, k, xi)
}

/// The increment for `stream`.
pub fn increment_for(model: &NoiseModel, stream: StreamId, k: f64) -> Result<WienerIncrement> {
    sample_increment(model, &mut stream.rng(), k)
}

/// `G_i = (gamma(V_prev) dW, phi_i)` by quadrature, with `dW` evaluated
/// from the expansion at every quadrature point.
pub fn noise_load_vector(
    model: &NoiseModel,
    increment: &WienerIncrement,
    prev_velocity: &FEFunction,
    vel_space: &FunctionSpace,
) -> Vector {
    if model.gamma.is_zero() {
        return vec![0.0; vel_space.n_dofs()];
    }
    load_vector_cellwise(vel_space, |t, l, p| {
        let dw = increment.eval(model, p);
        let g = match model.gamma {
            Gamma::Additive { scale } => [scale, scale],
            Gamma::Linear { c } => {
                let v = prev_velocity.eval_in(t, l);
                [c * v[0], c * v[1]]
            }
        };
        [g[0] * dw[0], g[1] * dw[1]]
    })
}

/// Precomputed `P[s][(i, j)] = (e_ij, psi_s)` so that additive-noise load
/// vectors cost one small dense product per step.
#[derive(Debug, Clone)]
pub struct AdditiveNoiseLoader {
    n_scalar: usize,
    modes: usize,
    scale: f64,
    table: Vec<f64>,
}

impl AdditiveNoiseLoader {
    pub fn new(model: &NoiseModel, space: &FunctionSpace) -> Option<Self> {
        let Gamma::Additive { scale } = model.gamma else {
            return None;
        };
        let jj = model.j * model.j;
        let rule = quadrature_rule(DEFAULT_DEGREE).expect("default rule");
        let ns = space.n_scalar();
        let mut table = vec![0.0; ns * jj];
        let e_scale = 2.0 / model.domain_scale;
        for t in 0..space.mesh().n_triangles() {
            let geo = space.geometry(t);
            let dofs = space.cell_dofs(t);
            for (l, w) in rule.points.iter().zip(&rule.weights) {
                let phi = shape_values(space.degree(), *l);
                let (sx, sy) = model.sines(geo.point(*l));
                let wa = w * geo.area * e_scale;
                for (a, &s) in dofs.iter().enumerate() {
                    let row = &mut table[s * jj..(s + 1) * jj];
                    for i in 0..model.j {
                        for j in 0..model.j {
                            row[i * model.j + j] += wa * phi[a] * sx[i] * sy[j];
                        }
                    }
                }
            }
        }
        Some(AdditiveNoiseLoader {
            n_scalar: ns,
            modes: jj,
            scale,
            table,
        })
    }

    pub fn load(&self, increment: &WienerIncrement) -> Vector {
        let mut g = vec![0.0; 2 * self.n_scalar];
        if self.scale == 0.0 {
            return g;
        }
        let c = increment.coeffs();
        for comp in 0..2 {
            let cc = &c[comp * self.modes..(comp + 1) * self.modes];
            for s in 0..self.n_scalar {
                let row = &self.table[s * self.modes..(s + 1) * self.modes];
                let v: f64 = row.iter().zip(cc).map(|(a, b)| a * b).sum();
                g[comp * self.n_scalar + s] = self.scale * v;
            }
        }
        g
    }
}

const XI_MAGIC: &[u8; 8] = b"PSXI0001";

/// Binary dump of normal draws: magic, `J`, increment count (u64 LE), then
/// every increment's `2 J^2` draws as f64 LE.
pub fn write_xi(path: &Path, increments: &[WienerIncrement]) -> Result<()> {
    let j = increments.first().map_or(0, |i| i.j);
    let mut buf = Vec::with_capacity(24 + increments.len() * 16 * j * j);
    buf.extend_from_slice(XI_MAGIC);
    buf.extend_from_slice(&(j as u64).to_le_bytes());
    buf.extend_from_slice(&(increments.len() as u64).to_le_bytes());
    for inc in increments {
        if inc.j != j {
            return Err(Error::config("increments with different truncation levels"));
        }
        for x in &inc.xi {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    crate::output::write_atomic(path, &buf)
}

/// Reads a dump written by [`write_xi`], rescaling with `model` and `k`.
pub fn read_xi(path: &Path, model: &NoiseModel, k: f64) -> Result<Vec<WienerIncrement>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        line: 0,
        message: format!("{}: {m}", path.display()),
    };
    if bytes.len() < 24 || &bytes[..8] != XI_MAGIC {
        return Err(bad("not a noise dump"));
    }
    let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let (j, n) = (word(8) as usize, word(16) as usize);
    if j != model.j {
        return Err(bad("truncation level differs from the model"));
    }
    let per = 2 * j * j;
    if bytes.len() != 24 + 8 * per * n {
        return Err(bad("truncated dump"));
    }
    (0..n)
        .map(|m| {
            let xi = (0..per)
                .map(|q| f64::from_bits(word(24 + 8 * (m * per + q))))
                .collect();
            WienerIncrement::from_xi(model, k, xi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::mass_matrix;
    use crate::mesh::{generate_rect_mesh, Rect};
    use crate::space::build_space;
    use std::sync::Arc;

    #[test]
    fn lambda_and_eigenfunction() {
        let m = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
        assert_eq!(m.lambda(1, 1), 0.25);
        assert!((m.eigenfunction(1, 1, [2.5, 2.5]) - 0.4).abs() < 1e-15);
        let mut want = 0.0;
        for s in 2..=10usize {
            let mult = if s <= 6 { s - 1 } else { 11 - s };
            want += mult as f64 / (s * s) as f64;
        }
        assert!((m.trace() - 2.0 * want).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let r = make_noise_model(1, LambdaKind::Table(vec![0.0]), 5.0, Gamma::Additive { scale: 1.0 });
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(make_noise_model(0, LambdaKind::InverseSquareSum, 5.0, Gamma::Linear { c: 1.0 }).is_err());
    }

    #[test]
    fn partial_traces_increase() {
        let traces: Vec<f64> = (1..=8)
            .map(|j| {
                make_noise_model(j, LambdaKind::InverseSquareSum, 5.0, Gamma::Additive { scale: 1.0 })
                    .unwrap()
                    .trace()
            })
            .collect();
        assert!(traces.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let m = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
        let a = increment_for(&m, StreamId::new(7, 3, 11), 0.01).unwrap();
        let b = increment_for(&m, StreamId::new(7, 3, 11), 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replay_hash(), b.replay_hash());
        let c = increment_for(&m, StreamId::new(7, 3, 12), 0.01).unwrap();
        let d = increment_for(&m, StreamId::new(7, 4, 11), 0.01).unwrap();
        assert_ne!(a.xi(), c.xi());
        assert_ne!(a.xi(), d.xi());
    }

    #[test]
    fn doubling_k_scales_by_sqrt2() {
        let m = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
        let s = StreamId::new(1, 0, 1);
        let a = increment_for(&m, s, 0.01).unwrap();
        let b = increment_for(&m, s, 0.02).unwrap();
        for p in [[0.3, 0.7], [2.0, 4.1]] {
            let (fa, fb) = (a.eval(&m, p), b.eval(&m, p));
            for c in 0..2 {
                assert!((fb[c] - 2f64.sqrt() * fa[c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn loader_matches_direct_assembly() {
        let mesh = Arc::new(generate_rect_mesh(4, 4, Rect::new(0.0, 2.0, 0.0, 1.5)).unwrap());
        let sp = build_space(mesh, 2, 2).unwrap();
        let m = NoiseModel::standard(Gamma::Additive { scale: 0.7 });
        let inc = increment_for(&m, StreamId::new(5, 0, 1), 0.1).unwrap();
        let direct = noise_load_vector(&m, &inc, &sp.zero_function(), &sp);
        let cached = AdditiveNoiseLoader::new(&m, &sp).unwrap().load(&inc);
        for (a, b) in direct.iter().zip(&cached) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_gamma_zero_gives_zero() {
        let mesh = Arc::new(generate_rect_mesh(2, 2, Rect::UNIT).unwrap());
        let sp = build_space(mesh, 2, 2).unwrap();
        let m = NoiseModel::standard(Gamma::Linear { c: 0.0 });
        let inc = increment_for(&m, StreamId::new(5, 0, 1), 0.1).unwrap();
        let u = sp.interpolate(|p| [p[0], 1.0]);
        assert!(noise_load_vector(&m, &inc, &u, &sp).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_mode_matches_mass_weighted_projection() {
        let mesh = Arc::new(generate_rect_mesh(8, 8, Rect::UNIT).unwrap());
        let sp = build_space(mesh, 2, 2).unwrap();
        let m = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
        let mut xi = vec![0.0; 50];
        xi[0] = 1.0;
        let inc = WienerIncrement::from_xi(&m, 0.04, xi).unwrap();
        let g = noise_load_vector(&m, &inc, &sp.zero_function(), &sp);
        let mm = m.clone();
        let inc2 = inc.clone();
        let proj = crate::space::l2_project(&sp, &move |p| inc2.eval(&mm, p)).unwrap();
        let mp = mass_matrix(&sp).mul_vec(proj.coeffs());
        for (a, b) in g.iter().zip(&mp) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn lipschitz_sampling() {
        let m = NoiseModel::standard(Gamma::Linear { c: -0.3 });
        assert!(m.check_lipschitz(10_000, 1).is_ok());
        assert!((m.sample_lipschitz_ratio(100, 2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn xi_dump_round_trip() {
        let m = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
        let incs: Vec<_> = (1..4)
            .map(|s| increment_for(&m, StreamId::new(9, 2, s), 0.5).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("xi.bin");
        write_xi(&path, &incs).unwrap();
        assert_eq!(read_xi(&path, &m, 0.5).unwrap(), incs);
    }
}
