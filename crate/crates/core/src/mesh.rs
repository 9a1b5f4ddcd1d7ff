//! Conforming triangle meshes of polygonal 2D domains.
//!
//! Meshes are built by the structured generators in this module, by reading
//! an ASCII Gmsh 2.2 file, or by reading the native dump written by
//! [`Mesh::write_native`]. Every construction path goes through
//! [`Mesh::new`], which normalizes triangle orientation, derives the edge
//! table, and checks conformity.
//!
//! Boundary tags follow a small registry: the structured generators tag each
//! boundary edge by the direction of its outward normal ([`TAG_LEFT`],
//! [`TAG_RIGHT`], [`TAG_BOTTOM`], [`TAG_TOP`]), and the L-shape generator
//! additionally marks the inflow segment `{0} x [0, 1]` with [`TAG_INFLOW`].
//! Edges read from a file without a physical group get [`TAG_UNTAGGED`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];
pub type Tag = u32;

pub const TAG_UNTAGGED: Tag = 0;
pub const TAG_LEFT: Tag = 1;
pub const TAG_RIGHT: Tag = 2;
pub const TAG_BOTTOM: Tag = 3;
pub const TAG_TOP: Tag = 4;
pub const TAG_INFLOW: Tag = 10;

/// Boundary edge, stored in the counterclockwise order of its triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: Tag,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshStats {
    pub h_max: f64,
    pub h_min: f64,
    pub quasi_uniformity_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    // unique edges as (lo, hi) vertex pairs, numbered in first-visit order
    edges: Vec<[usize; 2]>,
    // local edge e of triangle t joins local vertices (e, (e + 1) % 3)
    triangle_edges: Vec<[usize; 3]>,
    h_max: f64,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Builds a mesh, flipping clockwise triangles and deriving the edge
    /// table. Boundary edges of the triangulation that are missing from
    /// `tagged` are added with [`TAG_UNTAGGED`]; a tagged edge that is not on
    /// the boundary is rejected.
    pub fn new(
        vertices: Vec<Point>,
        mut triangles: Vec<[usize; 3]>,
        tagged: &[BoundaryEdge],
    ) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::geometry("mesh has no triangles"));
        }
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::geometry(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area == 0.0 || !area.is_finite() {
                return Err(Error::geometry(format!("triangle {t} is degenerate")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }

        let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_count = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for tri in &triangles {
            let mut local = [0usize; 3];
            for e in 0..3 {
                let key = edge_key(tri[e], tri[(e + 1) % 3]);
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_count.push(0usize);
                    edges.len() - 1
                });
                edge_count[id] += 1;
                local[e] = id;
            }
            triangle_edges.push(local);
        }
        if let Some(id) = edge_count.iter().position(|&c| c > 2) {
            return Err(Error::geometry(format!(
                "edge {:?} is shared by more than two triangles",
                edges[id]
            )));
        }

        let mut tags: HashMap<usize, Tag> = HashMap::new();
        for be in tagged {
            let key = edge_key(be.vertices[0], be.vertices[1]);
            match edge_ids.get(&key) {
                Some(&id) if edge_count[id] == 1 => {
                    tags.insert(id, be.tag);
                }
                _ => {
                    return Err(Error::geometry(format!(
                        "tagged edge {:?} is not a boundary edge",
                        be.vertices
                    )))
                }
            }
        }

        // canonical order: triangle traversal, then local edge
        let mut boundary_edges = Vec::new();
        for (tri, local) in triangles.iter().zip(&triangle_edges) {
            for e in 0..3 {
                let id = local[e];
                if edge_count[id] == 1 {
                    boundary_edges.push(BoundaryEdge {
                        vertices: [tri[e], tri[(e + 1) % 3]],
                        tag: tags.get(&id).copied().unwrap_or(TAG_UNTAGGED),
                    });
                }
            }
        }

        let mut mesh = Mesh {
            vertices,
            triangles,
            boundary_edges,
            edges,
            triangle_edges,
            h_max: 0.0,
        };
        mesh.h_max = (0..mesh.triangles.len())
            .map(|t| mesh.diameter(t))
            .fold(0.0, f64::max);
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(a, b, c)
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        self.area(t)
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        dist(a, b).max(dist(b, c)).max(dist(c, a))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.area(t)).sum()
    }

    /// Distinct boundary tags in increasing order.
    pub fn tags(&self) -> Vec<Tag> {
        let mut tags: Vec<Tag> = self.boundary_edges.iter().map(|e| e.tag).collect();
        tags.sort_unstable();
        tags.dedup();
        tags
    }

    /// Finds a triangle containing `p` and the barycentric coordinates of `p`
    /// in it. Linear scan; intended for evaluation at scattered points.
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        const TOL: f64 = 1e-12;
        for t in 0..self.n_triangles() {
            let [a, b, c] = self.triangle_points(t);
            let area = signed_area(a, b, c);
            let l1 = signed_area(a, p, c) / area;
            let l2 = signed_area(a, b, p) / area;
            let l0 = 1.0 - l1 - l2;
            if l0 >= -TOL && l1 >= -TOL && l2 >= -TOL {
                return Some((t, [l0, l1, l2]));
            }
        }
        None
    }

    pub fn stats(&self) -> MeshStats {
        mesh_stats(self)
    }

    /// Writes the line-oriented native dump.
    pub fn to_native_string(&self) -> String {
        let mut out = String::new();
        out.push_str("penalty-spde-mesh 1\n");
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {}", v[0], v[1]);
        }
        let _ = writeln!(out, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(out, "boundary_edges {}", self.boundary_edges.len());
        for e in &self.boundary_edges {
            let _ = writeln!(out, "{} {} {}", e.vertices[0], e.vertices[1], e.tag);
        }
        out
    }

    pub fn write_native(&self, path: &Path) -> Result<()> {
        crate::output::write_atomic(path, self.to_native_string().as_bytes())
    }

    pub fn read_native(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_native_str(&text)
    }

    pub fn from_native_str(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (line, header) = next("header")?;
        if header != "penalty-spde-mesh 1" {
            return Err(Error::Parse {
                line,
                message: format!("unknown header {header:?}"),
            });
        }
        fn count(line: usize, s: &str, key: &str) -> Result<usize> {
            s.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected `{key} <count>`"),
                })
        }
        fn fields<T: std::str::FromStr>(line: usize, s: &str, n: usize) -> Result<Vec<T>> {
            let v: Vec<T> = s
                .split_whitespace()
                .map(|f| f.parse::<T>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line,
                    message: format!("malformed record {s:?}"),
                })?;
            if v.len() != n {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {n} fields, got {}", v.len()),
                });
            }
            Ok(v)
        }

        let (line, s) = next("vertex count")?;
        let nv = count(line, s, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (line, s) = next("vertex")?;
            let f = fields::<f64>(line, s, 2)?;
            vertices.push([f[0], f[1]]);
        }
        let (line, s) = next("triangle count")?;
        let nt = count(line, s, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (line, s) = next("triangle")?;
            let f = fields::<usize>(line, s, 3)?;
            triangles.push([f[0], f[1], f[2]]);
        }
        let (line, s) = next("boundary edge count")?;
        let nb = count(line, s, "boundary_edges")?;
        let mut edges = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (line, s) = next("boundary edge")?;
            let f = fields::<usize>(line, s, 3)?;
            edges.push(BoundaryEdge {
                vertices: [f[0], f[1]],
                tag: f[2] as Tag,
            });
        }
        Mesh::new(vertices, triangles, &edges)
    }
}

/// Tags every boundary edge by the direction of its outward normal.
fn tag_by_normal(vertices: &[Point], triangles: &[[usize; 3]]) -> Result<Mesh> {
    let untagged = Mesh::new(vertices.to_vec(), triangles.to_vec(), &[])?;
    let tagged: Vec<BoundaryEdge> = untagged
        .boundary_edges()
        .iter()
        .map(|e| {
            let a = vertices[e.vertices[0]];
            let b = vertices[e.vertices[1]];
            // outward normal of a counterclockwise edge a -> b is (dy, -dx)
            let (nx, ny) = (b[1] - a[1], a[0] - b[0]);
            let tag = if nx.abs() >= ny.abs() {
                if nx < 0.0 {
                    TAG_LEFT
                } else {
                    TAG_RIGHT
                }
            } else if ny < 0.0 {
                TAG_BOTTOM
            } else {
                TAG_TOP
            };
            BoundaryEdge { tag, ..*e }
        })
        .collect();
    Mesh::new(vertices.to_vec(), triangles.to_vec(), &tagged)
}

/// Structured mesh of a rectangle: `nx * ny` cells, each split along its
/// bottom-left to top-right diagonal. Vertex `(i, j)` has index
/// `j * (nx + 1) + i`.
pub fn generate_rect_mesh(nx: usize, ny: usize, bounds: Rect) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::config("nx and ny must be at least 1"));
    }
    let (w, h) = (bounds.x1 - bounds.x0, bounds.y1 - bounds.y0);
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(Error::geometry(format!(
            "degenerate rectangle {w} x {h}"
        )));
    }
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([
                bounds.x0 + w * i as f64 / nx as f64,
                bounds.y0 + h * j as f64 / ny as f64,
            ]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    tag_by_normal(&vertices, &triangles)
}

/// Structured mesh of `[0, side]^2` minus the open upper-right quadrant,
/// with `n` cells per full side. Left-boundary edges inside `{0} x [0, 1]`
/// carry [`TAG_INFLOW`] when `side >= 1`.
pub fn generate_l_shape(side: f64, n: usize) -> Result<Mesh> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::config(format!(
            "L-shape resolution must be a positive even number, got {n}"
        )));
    }
    if !(side > 0.0) || !side.is_finite() {
        return Err(Error::geometry(format!("nonpositive L-shape side {side}")));
    }
    let half = n / 2;
    let removed = |i: usize, j: usize| i > half && j > half;
    let mut index = vec![usize::MAX; (n + 1) * (n + 1)];
    let mut vertices = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            if !removed(i, j) {
                index[j * (n + 1) + i] = vertices.len();
                vertices.push([side * i as f64 / n as f64, side * j as f64 / n as f64]);
            }
        }
    }
    let id = |i: usize, j: usize| index[j * (n + 1) + i];
    let mut triangles = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if i >= half && j >= half {
                continue;
            }
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mesh = tag_by_normal(&vertices, &triangles)?;
    if side < 1.0 {
        return Ok(mesh);
    }
    let tol = 1e-12 * side;
    let edges: Vec<BoundaryEdge> = mesh
        .boundary_edges()
        .iter()
        .map(|e| {
            let a = vertices[e.vertices[0]];
            let b = vertices[e.vertices[1]];
            let on_inflow = e.tag == TAG_LEFT && a[1].max(b[1]) <= 1.0 + tol;
            BoundaryEdge {
                tag: if on_inflow { TAG_INFLOW } else { e.tag },
                ..*e
            }
        })
        .collect();
    Mesh::new(vertices, triangles, &edges)
}

/// Smallest even `n` for which `generate_l_shape(side, n)` has
/// `h_max <= target_h`.
pub fn l_shape_resolution(side: f64, target_h: f64) -> Result<usize> {
    if !(target_h > 0.0) {
        return Err(Error::config("target mesh size must be positive"));
    }
    let mut n = (side * std::f64::consts::SQRT_2 / target_h).ceil() as usize;
    n = n.max(2);
    if n % 2 == 1 {
        n += 1;
    }
    // guard against the ceiling landing one ulp short
    while side * std::f64::consts::SQRT_2 / n as f64 > target_h {
        n += 2;
    }
    Ok(n)
}

pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    let (mut h_max, mut h_min) = (0.0f64, f64::INFINITY);
    for t in 0..mesh.n_triangles() {
        let d = mesh.diameter(t);
        h_max = h_max.max(d);
        h_min = h_min.min(d);
    }
    MeshStats {
        h_max,
        h_min,
        quasi_uniformity_ratio: h_max / h_min,
    }
}

/// Reads an ASCII Gmsh 2.2 file. Only 2-node lines (type 1) and 3-node
/// triangles (type 2) are accepted; point elements (type 15) are skipped.
/// The first element tag is the physical group and becomes the boundary tag
/// of line elements.
pub fn load_msh(path: &Path) -> Result<Mesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_msh(&text)
}

pub fn parse_msh(text: &str) -> Result<Mesh> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let perr = |line: usize, message: String| Error::Parse { line, message };
    let section = |name: &str| -> Result<usize> {
        lines
            .iter()
            .position(|(_, l)| *l == name)
            .ok_or_else(|| perr(0, format!("missing section {name}")))
    };

    let fmt = section("$MeshFormat")?;
    let (line, version) = lines
        .get(fmt + 1)
        .copied()
        .ok_or_else(|| perr(0, "truncated $MeshFormat".into()))?;
    let mut vf = version.split_whitespace();
    if vf.next() != Some("2.2") || vf.next() != Some("0") {
        return Err(perr(line, format!("unsupported mesh format {version:?}")));
    }

    let parse_count = |at: usize| -> Result<usize> {
        let (line, s) = lines
            .get(at)
            .copied()
            .ok_or_else(|| perr(0, "unexpected end of file".into()))?;
        s.parse()
            .map_err(|_| perr(line, format!("expected a count, got {s:?}")))
    };

    let nodes_at = section("$Nodes")?;
    let n_nodes = parse_count(nodes_at + 1)?;
    let mut node_index: HashMap<usize, usize> = HashMap::new();
    let mut nodes: Vec<Point> = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let (line, s) = lines
            .get(nodes_at + 2 + k)
            .copied()
            .ok_or_else(|| perr(0, "truncated $Nodes".into()))?;
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 4 {
            return Err(perr(line, format!("malformed node record {s:?}")));
        }
        let tag: usize = f[0]
            .parse()
            .map_err(|_| perr(line, format!("bad node tag {:?}", f[0])))?;
        let xyz: Vec<f64> = f[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(line, format!("bad coordinates {s:?}")))?;
        if xyz[2].abs() > 1e-12 {
            return Err(Error::geometry(format!(
                "node {tag} has z = {} (only planar meshes are supported)",
                xyz[2]
            )));
        }
        node_index.insert(tag, nodes.len());
        nodes.push([xyz[0], xyz[1]]);
    }

    let elems_at = section("$Elements")?;
    let n_elems = parse_count(elems_at + 1)?;
    let mut raw_triangles = Vec::new();
    let mut raw_lines = Vec::new();
    for k in 0..n_elems {
        let (line, s) = lines
            .get(elems_at + 2 + k)
            .copied()
            .ok_or_else(|| perr(0, "truncated $Elements".into()))?;
        let f: Vec<usize> = s
            .split_whitespace()
            .map(|v| v.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(line, format!("malformed element record {s:?}")))?;
        if f.len() < 3 {
            return Err(perr(line, format!("malformed element record {s:?}")));
        }
        let (ty, ntags) = (f[1], f[2]);
        let physical = if ntags > 0 { f[3] as Tag } else { TAG_UNTAGGED };
        let conn = &f[3 + ntags..];
        let resolve = |tag: &usize| {
            node_index
                .get(tag)
                .copied()
                .ok_or_else(|| perr(line, format!("element references unknown node {tag}")))
        };
        match ty {
            1 if conn.len() == 2 => {
                raw_lines.push(([resolve(&conn[0])?, resolve(&conn[1])?], physical));
            }
            2 if conn.len() == 3 => {
                raw_triangles.push([
                    resolve(&conn[0])?,
                    resolve(&conn[1])?,
                    resolve(&conn[2])?,
                ]);
            }
            15 => {}
            1 | 2 => return Err(perr(line, format!("wrong node count for element type {ty}"))),
            other => return Err(perr(line, format!("unsupported element type {other}"))),
        }
    }

    // keep only nodes referenced by triangles, in file order
    let mut used = vec![false; nodes.len()];
    for t in &raw_triangles {
        for &v in t {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; nodes.len()];
    let mut vertices = Vec::new();
    for (i, p) in nodes.iter().enumerate() {
        if used[i] {
            remap[i] = vertices.len();
            vertices.push(*p);
        }
    }
    let triangles: Vec<[usize; 3]> = raw_triangles
        .iter()
        .map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]])
        .collect();

    let untagged = Mesh::new(vertices.clone(), triangles.clone(), &[])?;
    let on_boundary: std::collections::HashSet<(usize, usize)> = untagged
        .boundary_edges()
        .iter()
        .map(|e| edge_key(e.vertices[0], e.vertices[1]))
        .collect();
    let tagged: Vec<BoundaryEdge> = raw_lines
        .iter()
        .filter_map(|(v, tag)| {
            let (a, b) = (remap[v[0]], remap[v[1]]);
            (a != usize::MAX && b != usize::MAX && on_boundary.contains(&edge_key(a, b)))
                .then_some(BoundaryEdge {
                    vertices: [a, b],
                    tag: *tag,
                })
        })
        .collect();
    Mesh::new(vertices, triangles, &tagged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_rect() {
        let m = generate_rect_mesh(1, 1, Rect::UNIT).unwrap();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.h_max(), 2f64.sqrt());
        assert_eq!(m.n_edges(), 5);
    }

    #[test]
    fn rect_counts_and_tags() {
        let m = generate_rect_mesh(4, 4, Rect::UNIT).unwrap();
        assert_eq!(m.n_vertices(), 25);
        assert_eq!(m.n_triangles(), 32);
        assert_eq!(m.boundary_edges().len(), 16);
        assert_eq!(m.tags(), vec![TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP]);
        for e in m.boundary_edges() {
            let [a, b] = e.vertices.map(|v| m.vertices()[v]);
            match e.tag {
                TAG_LEFT => assert!(a[0] == 0.0 && b[0] == 0.0),
                TAG_RIGHT => assert!(a[0] == 1.0 && b[0] == 1.0),
                TAG_BOTTOM => assert!(a[1] == 0.0 && b[1] == 0.0),
                TAG_TOP => assert!(a[1] == 1.0 && b[1] == 1.0),
                t => panic!("unexpected tag {t}"),
            }
        }
    }

    #[test]
    fn congruent_cells_are_uniform() {
        let m = generate_rect_mesh(8, 8, Rect::UNIT).unwrap();
        let s = mesh_stats(&m);
        assert!((s.quasi_uniformity_ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rect_rejected() {
        let err = generate_rect_mesh(2, 2, Rect::new(0.0, 0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));
    }

    #[test]
    fn small_l_shape() {
        let m = generate_l_shape(2.0, 2).unwrap();
        assert_eq!(m.n_vertices(), 8);
        assert_eq!(m.n_triangles(), 6);
        assert!((m.total_area() - 0.75 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn odd_l_shape_rejected() {
        assert!(matches!(generate_l_shape(5.0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn l_shape_mesh_size() {
        let m = generate_l_shape(5.0, 32).unwrap();
        assert!((m.h_max() - 5.0 * 2f64.sqrt() / 32.0).abs() < 1e-12);
        assert_eq!(l_shape_resolution(5.0, 0.16).unwrap(), 46);
        let m = generate_l_shape(5.0, 46).unwrap();
        assert!(mesh_stats(&m).h_max <= 0.16);
        assert!((m.total_area() - 0.75 * 25.0).abs() < 1e-12 * 25.0);
    }

    #[test]
    fn l_shape_inflow_segment() {
        let m = generate_l_shape(5.0, 10).unwrap();
        let inflow: Vec<_> = m
            .boundary_edges()
            .iter()
            .filter(|e| e.tag == TAG_INFLOW)
            .collect();
        // {0} x [0, 1] with spacing 0.5
        assert_eq!(inflow.len(), 2);
        for e in inflow {
            for v in e.vertices {
                let p = m.vertices()[v];
                assert_eq!(p[0], 0.0);
                assert!(p[1] <= 1.0);
            }
        }
    }

    #[test]
    fn native_round_trip() {
        let m = generate_l_shape(5.0, 6).unwrap();
        let back = Mesh::from_native_str(&m.to_native_string()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn locate_finds_centroid() {
        let m = generate_rect_mesh(3, 3, Rect::UNIT).unwrap();
        let [a, b, c] = m.triangle_points(7);
        let g = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
        let (t, l) = m.locate(g).unwrap();
        assert_eq!(t, 7);
        for v in l {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
