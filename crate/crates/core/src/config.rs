//! JSON run configuration.
//!
//! A [`RunConfig`] names a mesh, the finite-element pair, the physical data,
//! the scheme, the noise and the solver settings. Unknown keys are rejected
//! and the `schema_version` field must match [`SCHEMA_VERSION`].
//!
//! ```
//! use penalty_spde::config::RunConfig;
//!
//! let text = r#"{
//!   "schema_version": 1,
//!   "mesh": { "kind": "rect", "nx": 4, "ny": 4 },
//!   "physics": { "nu": 1.0, "t_final": 0.1 },
//!   "scheme": { "kind": "penalty-linear", "eps": { "value": 0.01 }, "k": { "value": 0.01 } }
//! }"#;
//! let cfg = RunConfig::from_json(text).unwrap();
//! let setup = cfg.setup().unwrap();
//! assert_eq!(setup.config.steps, 10);
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::{recipe, RunSetup, StepMode};
use crate::error::{Error, Result};
use crate::mesh::{generate_l_shape, generate_rect_mesh, l_shape_resolution, load_msh, Mesh, Point, Rect, Tag};
use crate::noise::{make_noise_model, Gamma, LambdaKind, NoiseModel};
use crate::scheme::{LinearSolverConfig, PicardConfig, Problem, SchemeConfig, SchemeKind};
use crate::space::BoundaryValues;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mesh: MeshSpec,
    #[serde(default)]
    pub fe: FeSpec,
    pub physics: PhysicsSpec,
    pub scheme: SchemeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MeshSpec {
    Rect {
        nx: usize,
        ny: usize,
        /// `[x0, x1, y0, y1]`
        #[serde(default = "unit_bounds")]
        bounds: [f64; 4],
    },
    LShape {
        #[serde(default = "default_side")]
        side: f64,
        /// Cells per side; wins over `target_h`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_h: Option<f64>,
    },
    Msh {
        path: PathBuf,
    },
}

fn unit_bounds() -> [f64; 4] {
    [0.0, 1.0, 0.0, 1.0]
}

fn default_side() -> f64 {
    5.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeSpec {
    pub velocity_degree: usize,
    pub pressure_degree: usize,
}

impl Default for FeSpec {
    fn default() -> Self {
        FeSpec {
            velocity_degree: 2,
            pressure_degree: 1,
        }
    }
}

/// Closed-form data fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant { value: [f64; 2] },
    /// `t * value`
    Ramp { value: [f64; 2] },
    /// Gaussian vortex `a (-(y - cy), x - cx) exp(-|x - c|^2 / r^2)`.
    Vortex {
        amplitude: f64,
        center: [f64; 2],
        radius: f64,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Zero
    }
}

impl FieldSpec {
    pub fn is_zero(&self) -> bool {
        match self {
            FieldSpec::Zero => true,
            FieldSpec::Constant { value } | FieldSpec::Ramp { value } => *value == [0.0, 0.0],
            FieldSpec::Vortex { amplitude, .. } => *amplitude == 0.0,
        }
    }

    pub fn eval(&self, t: f64, p: Point) -> [f64; 2] {
        match *self {
            FieldSpec::Zero => [0.0, 0.0],
            FieldSpec::Constant { value } => value,
            FieldSpec::Ramp { value } => [t * value[0], t * value[1]],
            FieldSpec::Vortex {
                amplitude,
                center,
                radius,
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let g = amplitude * (-(dx * dx + dy * dy) / (radius * radius)).exp();
                [-dy * g, dx * g]
            }
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if let FieldSpec::Vortex { radius, .. } = self {
            if !(*radius > 0.0) {
                return Err(Error::config(format!("{what}: vortex radius must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    /// Value on every tag not listed in `tags`; `null` leaves those dofs free.
    #[serde(default = "zero_default")]
    pub default: Option<[f64; 2]>,
    /// Constant value per boundary tag.
    #[serde(default)]
    pub tags: BTreeMap<Tag, [f64; 2]>,
}

fn zero_default() -> Option<[f64; 2]> {
    Some([0.0, 0.0])
}

impl Default for BoundarySpec {
    fn default() -> Self {
        BoundarySpec {
            default: zero_default(),
            tags: BTreeMap::new(),
        }
    }
}

impl BoundarySpec {
    pub fn values(&self) -> BoundaryValues {
        let mut bv = match self.default {
            Some(v) => BoundaryValues::everywhere(v),
            None => BoundaryValues::new(),
        };
        for (&tag, &v) in &self.tags {
            bv = bv.with_tag(tag, move |_| v);
        }
        bv
    }

    pub fn is_homogeneous(&self) -> bool {
        self.default.map_or(true, |v| v == [0.0, 0.0]) && self.tags.values().all(|v| *v == [0.0, 0.0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSpec {
    pub nu: f64,
    pub t_final: f64,
    #[serde(default)]
    pub forcing: FieldSpec,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub initial_velocity: FieldSpec,
    /// First component is used as the initial pressure.
    #[serde(default)]
    pub initial_pressure: FieldSpec,
}

/// A parameter given directly or by the recipe `eps = h^(2+delta)`,
/// `k = eps^(1+delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamSpec {
    Value(f64),
    Recipe(RecipeSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub delta: f64,
    /// Mesh size fed to the recipe; the mesh's `h_max` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub eps: ParamSpec,
    pub k: ParamSpec,
    #[serde(default = "yes")]
    pub convection: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaKind,
    #[serde(default = "default_side")]
    pub domain_scale: f64,
    #[serde(default = "default_gamma")]
    pub gamma: Gamma,
}

fn default_j() -> usize {
    5
}

fn default_lambda() -> LambdaKind {
    LambdaKind::InverseSquareSum
}

fn default_gamma() -> Gamma {
    Gamma::Additive { scale: 1.0 }
}

impl NoiseSpec {
    pub fn model(&self) -> Result<NoiseModel> {
        make_noise_model(self.j, self.lambda.clone(), self.domain_scale, self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub picard: PicardConfig,
    pub linear: LinearSolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Keep every `n`-th state and write it as VTK.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            snapshot_stride: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSpec {
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepModeSpec {
    Fixed,
    Recipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub samples: usize,
    /// Reference scheme of a sweep; the saddle scheme matching the
    /// candidate when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<SchemeKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    pub step_mode: StepModeSpec,
    /// Mesh sizes of the stability audit.
    pub levels: Vec<f64>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            samples: 100,
            reference: None,
            eps_list: None,
            step_mode: StepModeSpec::Fixed,
            levels: vec![0.5, 0.25, 0.125],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text)?;
        // mesh files are resolved relative to the config
        if let MeshSpec::Msh { path: p } = &mut cfg.mesh {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not need the mesh.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        match &self.mesh {
            MeshSpec::Rect { nx, ny, .. } if *nx == 0 || *ny == 0 => {
                return Err(Error::config("mesh: nx and ny must be at least 1"))
            }
            MeshSpec::LShape { n: None, target_h: None, .. } => {
                return Err(Error::config("mesh: l_shape needs n or target_h"))
            }
            _ => {}
        }
        if !(self.physics.nu > 0.0) {
            return Err(Error::config(format!("physics.nu: viscosity must be positive, got {}", self.physics.nu)));
        }
        if !(self.physics.t_final > 0.0) {
            return Err(Error::config(format!(
                "physics.t_final: final time must be positive, got {}",
                self.physics.t_final
            )));
        }
        self.physics.forcing.validate("physics.forcing")?;
        self.physics.initial_velocity.validate("physics.initial_velocity")?;
        self.physics.initial_pressure.validate("physics.initial_pressure")?;
        for (name, p) in [("scheme.eps", self.scheme.eps), ("scheme.k", self.scheme.k)] {
            match p {
                ParamSpec::Value(v) if !(v > 0.0) => {
                    return Err(Error::config(format!("{name}: must be positive, got {v}")))
                }
                ParamSpec::Recipe(r) if !(r.delta >= 0.0) || r.h.is_some_and(|h| !(h > 0.0)) => {
                    return Err(Error::config(format!("{name}: recipe needs delta ≥ 0 and h > 0")))
                }
                _ => {}
            }
        }
        if let ParamSpec::Value(eps) = self.scheme.eps {
            if eps > 1.0 {
                return Err(Error::config(format!(
                    "scheme.eps: penalty parameter must satisfy 0 < ε ≤ 1, got {eps}"
                )));
            }
        }
        if let Some(n) = &self.noise {
            n.model().map_err(|e| Error::config(format!("noise: {e}")))?;
        }
        if self.ensemble.samples == 0 {
            return Err(Error::config("ensemble.samples must be at least 1"));
        }
        if self.output.snapshot_stride == Some(0) {
            return Err(Error::config("output.snapshot_stride must be at least 1"));
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        match &self.mesh {
            MeshSpec::Rect { nx, ny, bounds } => {
                generate_rect_mesh(*nx, *ny, Rect::new(bounds[0], bounds[1], bounds[2], bounds[3]))
            }
            MeshSpec::LShape { side, n, target_h } => {
                let n = match (n, target_h) {
                    (Some(n), _) => *n,
                    (None, Some(h)) => l_shape_resolution(*side, *h)?,
                    (None, None) => return Err(Error::config("mesh: l_shape needs n or target_h")),
                };
                generate_l_shape(*side, n)
            }
            MeshSpec::Msh { path } => load_msh(path),
        }
    }

    /// Same configuration on a mesh of size at most `h`. Only generated
    /// meshes can be refined.
    pub fn with_mesh_size(&self, h: f64) -> Result<RunConfig> {
        if !(h > 0.0) {
            return Err(Error::config(format!("mesh size must be positive, got {h}")));
        }
        let mut c = self.clone();
        c.mesh = match &self.mesh {
            MeshSpec::Rect { bounds, .. } => {
                // cells of side at most h / sqrt(2) have diagonal at most h
                let s = h / std::f64::consts::SQRT_2;
                MeshSpec::Rect {
                    nx: ((bounds[1] - bounds[0]) / s).ceil().max(1.0) as usize,
                    ny: ((bounds[3] - bounds[2]) / s).ceil().max(1.0) as usize,
                    bounds: *bounds,
                }
            }
            MeshSpec::LShape { side, .. } => MeshSpec::LShape {
                side: *side,
                n: None,
                target_h: Some(h),
            },
            MeshSpec::Msh { .. } => {
                return Err(Error::config("mesh refinement needs a generated mesh, not a file"))
            }
        };
        for p in [&mut c.scheme.eps, &mut c.scheme.k] {
            if let ParamSpec::Recipe(r) = p {
                r.h = None;
            }
        }
        Ok(c)
    }

    pub fn noise_model(&self) -> Result<Option<NoiseModel>> {
        self.noise.as_ref().map(|n| n.model()).transpose()
    }

    pub fn build_problem(&self, mesh: Arc<Mesh>) -> Result<Arc<Problem>> {
        let ph = &self.physics;
        let mut b = Problem::builder(mesh)
            .velocity_degree(self.fe.velocity_degree)
            .pressure_degree(self.fe.pressure_degree)
            .boundary(ph.boundary.values())
            .maybe_noise(self.noise_model()?);
        if !ph.forcing.is_zero() {
            let f = ph.forcing.clone();
            b = b.forcing(move |t, p| f.eval(t, p));
        }
        if !ph.initial_velocity.is_zero() {
            let f = ph.initial_velocity.clone();
            b = b.initial_velocity(move |p| f.eval(0.0, p));
        }
        if !ph.initial_pressure.is_zero() {
            let f = ph.initial_pressure.clone();
            b = b.initial_pressure(move |p| f.eval(0.0, p)[0]);
        }
        b.build()
    }

    /// `(eps, k)` for a mesh of size `h_max`.
    pub fn resolve_params(&self, h_max: f64) -> Result<(f64, f64)> {
        let eps = match self.scheme.eps {
            ParamSpec::Value(v) => v,
            ParamSpec::Recipe(r) => recipe(r.h.unwrap_or(h_max), r.delta).0,
        };
        let k = match self.scheme.k {
            ParamSpec::Value(v) => v,
            ParamSpec::Recipe(r) => eps.powf(1.0 + r.delta),
        };
        Ok((eps, k))
    }

    pub fn scheme_config(&self, h_max: f64) -> Result<SchemeConfig> {
        let (eps, k) = self.resolve_params(h_max)?;
        let mut c = SchemeConfig::new(self.scheme.kind, self.physics.nu, eps, self.physics.t_final, k)?;
        c.convection = self.scheme.convection;
        c.picard = self.solver.picard;
        c.linear = self.solver.linear;
        c.validate()?;
        Ok(c)
    }

    pub fn setup(&self) -> Result<RunSetup> {
        let mesh = Arc::new(self.build_mesh()?);
        let h = mesh.h_max();
        let problem = self.build_problem(mesh)?;
        Ok(RunSetup::new(problem, self.scheme_config(h)?))
    }

    /// Reference scheme for sweeps.
    pub fn reference_kind(&self) -> SchemeKind {
        self.ensemble.reference.unwrap_or(if self.scheme.kind.is_stokes() {
            SchemeKind::StokesSaddle
        } else {
            SchemeKind::Saddle
        })
    }

    pub fn step_mode(&self, config: &SchemeConfig) -> StepMode {
        match self.ensemble.step_mode {
            StepModeSpec::Fixed => StepMode::Fixed { k: config.k },
            StepModeSpec::Recipe => StepMode::Recipe {
                delta: match (self.scheme.k, self.scheme.eps) {
                    (ParamSpec::Recipe(r), _) | (_, ParamSpec::Recipe(r)) => r.delta,
                    _ => 0.1,
                },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{
      "schema_version": 1,
      "mesh": { "kind": "l_shape", "side": 5.0, "target_h": 0.5 },
      "fe": { "velocity_degree": 2, "pressure_degree": 1 },
      "physics": {
        "nu": 1.0, "t_final": 1.0,
        "forcing": { "kind": "ramp", "value": [1.0, 0.0] },
        "boundary": { "default": [0.0, 0.0], "tags": { "10": [1.0, 0.0] } },
        "initial_velocity": { "kind": "vortex", "amplitude": 1.0, "center": [1.0, 1.0], "radius": 0.5 }
      },
      "scheme": { "kind": "penalty-linear", "eps": { "recipe": { "delta": 0.1, "h": 0.16 } }, "k": { "recipe": { "delta": 0.1 } } },
      "noise": { "j": 5, "lambda": { "kind": "inverse_square_sum" }, "domain_scale": 5.0, "gamma": { "kind": "additive", "scale": 1.0 } },
      "solver": { "picard": { "max_iters": 20, "tolerance": 1e-9 }, "linear": { "method": "direct-lu", "tolerance": 1e-10, "max_iters": 100 } },
      "output": { "dir": "results", "snapshot_stride": 5 },
      "seeds": { "base_seed": 42 },
      "ensemble": { "samples": 10, "eps_list": [0.1, 0.01], "step_mode": "recipe", "levels": [0.5] }
    }"#;

    #[test]
    fn round_trip_is_identity() {
        let a = RunConfig::from_json(FULL).unwrap();
        let b = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.physics.boundary.tags[&10], [1.0, 0.0]);
    }

    #[test]
    fn recipe_uses_given_h() {
        let a = RunConfig::from_json(FULL).unwrap();
        let (eps, k) = a.resolve_params(0.3).unwrap();
        assert!((eps - 0.16f64.powf(2.1)).abs() < 1e-15);
        assert!((k - 0.16f64.powf(2.1).powf(1.1)).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = FULL.replace("\"nu\": 1.0", "\"nu\": 1.0, \"viscosity\": 2.0");
        let e = RunConfig::from_json(&bad).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("viscosity"), "{e}");
    }

    #[test]
    fn eps_above_one_is_rejected() {
        let text = r#"{ "schema_version": 1, "mesh": { "kind": "rect", "nx": 2, "ny": 2 },
          "physics": { "nu": 1.0, "t_final": 1.0 },
          "scheme": { "kind": "saddle", "eps": { "value": 2.0 }, "k": { "value": 0.1 } } }"#;
        let e = RunConfig::from_json(text).unwrap_err();
        assert!(e.to_string().contains("ε ≤ 1"), "{e}");
    }

    #[test]
    fn wrong_schema_version() {
        let bad = FULL.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(RunConfig::from_json(&bad).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn refinement_keeps_mesh_kind() {
        let a = RunConfig::from_json(FULL).unwrap();
        let b = a.with_mesh_size(0.25).unwrap();
        let m = b.build_mesh().unwrap();
        assert!(m.h_max() <= 0.25 + 1e-12);
        let unit = r#"{ "schema_version": 1, "mesh": { "kind": "rect", "nx": 2, "ny": 2 },
          "physics": { "nu": 1.0, "t_final": 1.0 },
          "scheme": { "kind": "saddle", "eps": { "value": 0.5 }, "k": { "value": 0.1 } } }"#;
        let c = RunConfig::from_json(unit).unwrap();
        for h in [0.5, 0.25, 0.125, 0.3] {
            let m = c.with_mesh_size(h).unwrap().build_mesh().unwrap();
            assert!(m.h_max() <= h + 1e-12, "{h} -> {}", m.h_max());
        }
        let m = c.with_mesh_size(0.25).unwrap().build_mesh().unwrap();
        assert_eq!(m.n_triangles(), 2 * 6 * 6);
    }

    #[test]
    fn vortex_is_divergence_free() {
        let f = FieldSpec::Vortex {
            amplitude: 2.0,
            center: [0.3, 0.4],
            radius: 0.7,
        };
        let (p, d) = ([0.9, 0.1], 1e-6);
        let div = (f.eval(0.0, [p[0] + d, p[1]])[0] - f.eval(0.0, [p[0] - d, p[1]])[0]
            + f.eval(0.0, [p[0], p[1] + d])[1]
            - f.eval(0.0, [p[0], p[1] - d])[1])
            / (2.0 * d);
        assert!(div.abs() < 1e-8);
    }
}
