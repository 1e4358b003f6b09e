//! Iso-surface extraction, normalization, front-view capture and OBJ I/O.
//!
//! The Marching Cubes case table is generated at first use rather than
//! pasted in. On every cube face the crossing points are paired so that
//! each run of inside corners is cut off by its own segment; on the
//! ambiguous faces (two diagonal inside corners) this separates the inside
//! corners. Both cubes sharing a face apply the same rule to the same four
//! corner values, so polygons from neighbouring cubes meet edge to edge and
//! the output is closed wherever the surface does not leave the lattice.
//!
//! OBJ output is ASCII, one record per line, `\n` terminated:
//!
//! ```text
//! v x y z            (no colors)
//! v x y z r g b      (with colors)
//! f i j k            (1-based indices)
//! ```
//!
//! Numbers use Rust's shortest round-trip `f64` formatting, so a written
//! mesh parses back to bitwise identical values.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::camera::{fov_from_ndc_focal, CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::field::VolumeSource;
use crate::image::Image;
use crate::render::{render, QuadratureConfig, Sampling, WHITE};

pub const DEFAULT_THRESHOLD: f64 = 2.5;
pub const DEFAULT_RESOLUTION: usize = 128;
/// Meshes above this many faces are not written.
pub const FACE_CAP: usize = 40_000;
pub const FRONT_DISTANCE: f64 = 2.2;
pub const FRONT_FOCAL: f64 = 3.0;
/// Direction used when sampling vertex colors: looking from the front.
pub const COLOR_DIRECTION: [f64; 3] = [0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    actual: c.len(),
                });
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= n) {
                return Err(Error::Numerical(format!("triangle {i} indexes past {n} vertices")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Numerical(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    /// Undirected edges used by a number of triangles other than two.
    pub fn boundary_edge_count(&self) -> usize {
        let mut uses: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        uses.values().filter(|&&c| c != 2).count()
    }

    /// Whether every directed edge appears exactly once and its reverse
    /// exactly once, i.e. closed and consistently oriented.
    pub fn is_oriented_closed(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Axis-aligned bounds, `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }
}

struct CaseTable {
    edges: [(usize, usize); 12],
    triangles: Vec<Vec<[u8; 3]>>,
}

fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

fn build_table() -> CaseTable {
    let mut edges = Vec::new();
    for a in 0..8usize {
        for bit in [1, 2, 4] {
            if a & bit == 0 {
                edges.push((a, a | bit));
            }
        }
    }
    let edges: [(usize, usize); 12] = edges.try_into().expect("a cube has 12 edges");
    let edge_of = |a: usize, b: usize| {
        edges
            .iter()
            .position(|&(x, y)| (x, y) == (a.min(b), a.max(b)))
            .expect("corners share an edge")
    };
    let pos = |c: usize| corner_offset(c).map(|v| v as f64 - 0.5);

    // Face corner cycles, counter-clockwise seen from outside the cube.
    let mut faces = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let mut corners: Vec<usize> = (0..8).filter(|&c| corner_offset(c)[axis] == side).collect();
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            corners.sort_by(|&a, &b| {
                let ang = |c: usize| pos(c)[v].atan2(pos(c)[u]);
                ang(a).total_cmp(&ang(b))
            });
            let p: Vec<Vec3> = corners.iter().map(|&c| Vec3::from(pos(c))).collect();
            let normal = (p[1] - p[0]).cross(&(p[2] - p[1]));
            let outward = if side == 1 { 1.0 } else { -1.0 };
            if normal[axis] * outward < 0.0 {
                corners.reverse();
            }
            faces.push(corners);
        }
    }

    let mut triangles = Vec::with_capacity(256);
    for case in 0..256usize {
        let inside = |c: usize| case >> c & 1 == 1;
        // next[e] = the edge the directed loop moves to after edge e.
        let mut next = [usize::MAX; 12];
        for f in &faces {
            for k in 0..4 {
                // An inside run ends at edge (c_k, c_k+1); connect it back
                // to the edge where that run began.
                let (a, b) = (f[k], f[(k + 1) % 4]);
                if !(inside(a) && !inside(b)) {
                    continue;
                }
                let mut s = k;
                while inside(f[(s + 3) % 4]) {
                    s = (s + 3) % 4;
                }
                let exit = edge_of(a, b);
                let enter = edge_of(f[(s + 3) % 4], f[s]);
                next[exit] = enter;
            }
        }
        let mut used = [false; 12];
        let mut tris = Vec::new();
        for start in 0..12 {
            if next[start] == usize::MAX || used[start] {
                continue;
            }
            let mut cycle = vec![start];
            used[start] = true;
            let mut e = next[start];
            while e != start {
                used[e] = true;
                cycle.push(e);
                e = next[e];
            }
            for k in 1..cycle.len() - 1 {
                tris.push([cycle[0] as u8, cycle[k] as u8, cycle[k + 1] as u8]);
            }
        }
        triangles.push(tris);
    }

    // Orient so normals point from inside to outside: with only corner 0
    // inside, the normal must point away from it.
    let t = triangles[1][0];
    let mid = |e: u8| {
        let (a, b) = edges[e as usize];
        (Vec3::from(pos(a)) + Vec3::from(pos(b))) / 2.0
    };
    let n = (mid(t[1]) - mid(t[0])).cross(&(mid(t[2]) - mid(t[0])));
    if n.dot(&Vec3::new(1.0, 1.0, 1.0)) < 0.0 {
        for case in &mut triangles {
            for t in case.iter_mut() {
                t.swap(1, 2);
            }
        }
    }
    CaseTable { edges, triangles }
}

fn table() -> &'static CaseTable {
    static TABLE: OnceLock<CaseTable> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Triangles of the generated table for one corner configuration, as
/// edge-index triples. Corner `c` sits at `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
pub fn case_triangles(case: u8) -> &'static [[u8; 3]] {
    &table().triangles[case as usize]
}

/// Lattice coordinate of point `i` of `n` over `[-1, 1]`.
fn lattice_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

/// Extracts the `{density > threshold}` boundary on a lattice of
/// `resolution` points per axis spanning `[-1, 1]^3`. An empty surface
/// gives an empty mesh and a warning.
pub fn extract_mesh<S: VolumeSource + ?Sized>(
    source: &S,
    resolution: usize,
    threshold: f64,
) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::Config(format!(
            "mesh resolution {resolution} is below the minimum of 8"
        )));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Config(format!("mesh threshold {threshold} must be positive")));
    }
    let n = resolution;
    let density: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut slice = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let p = Vec3::new(lattice_coord(x, n), lattice_coord(y, n), lattice_coord(z, n));
                    slice.push(source.density(&p));
                }
            }
            slice
        })
        .collect();
    if let Some(i) = density.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("density at lattice point {i}")));
    }
    let index = |x: usize, y: usize, z: usize| (z * n + y) * n + x;
    let tab = table();

    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner_index = |c: usize| {
                    let o = corner_offset(c);
                    index(x + o[0], y + o[1], z + o[2])
                };
                let mut case = 0usize;
                for c in 0..8 {
                    if density[corner_index(c)] > threshold {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &tab.triangles[case] {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let (a, b) = tab.edges[e as usize];
                        let (ia, ib) = (corner_index(a), corner_index(b));
                        let axis = (a ^ b).trailing_zeros() as usize;
                        *slot = *vertex_of.entry((ia, axis)).or_insert_with(|| {
                            let (da, db) = (density[ia], density[ib]);
                            let s = (threshold - da) / (db - da);
                            let pa = Vec3::new(
                                lattice_coord(x + corner_offset(a)[0], n),
                                lattice_coord(y + corner_offset(a)[1], n),
                                lattice_coord(z + corner_offset(a)[2], n),
                            );
                            let mut p = pa;
                            p[axis] += s * 2.0 / (n - 1) as f64;
                            mesh.vertices.push(p);
                            mesh.vertices.len() - 1
                        });
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        log::warn!("no density crossing at threshold {threshold}; mesh is empty");
        return Ok(mesh);
    }
    let d = Vec3::from(COLOR_DIRECTION);
    mesh.colors = Some(mesh.vertices.par_iter().map(|p| source.query(p, &d).1).collect());
    Ok(mesh)
}

/// Uniformly scales and translates so the bounding box is centered at the
/// origin and its longest side spans exactly `[-1, 1]`.
pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| Error::EmptyMesh("cannot normalize a mesh without vertices".into()))?;
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(Error::EmptyMesh("mesh has zero extent".into()));
    }
    let center = (lo + hi) / 2.0;
    let scale = 2.0 / extent;
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = (*v - center) * scale;
    }
    Ok(out)
}

/// Camera on the front axis (`-Y`) at distance 2.2 with NDC focal 3.0,
/// looking at the origin.
pub fn front_view_pose(width: usize, height: usize) -> Result<CameraPose> {
    CameraPose::look_at(
        Vec3::new(0.0, -FRONT_DISTANCE, 0.0),
        Vec3::zeros(),
        fov_from_ndc_focal(FRONT_FOCAL),
        width,
        height,
    )
}

/// Front view of a volume source, rendered with 256 midpoint samples and a
/// bounding sphere enclosing the whole `[-1, 1]^3` cube.
pub fn capture_front_view_field<S: VolumeSource + ?Sized>(
    source: &S,
    width: usize,
    height: usize,
) -> Result<Image> {
    let quad = QuadratureConfig {
        samples: 256,
        background: WHITE,
        bounding_radius: 3f64.sqrt(),
    };
    Ok(render(source, &front_view_pose(width, height)?, &quad, Sampling::Midpoint, false)?.rgb)
}

/// Front view of a mesh: flat-shaded, z-buffered, white background.
/// Faces are lit by `0.3 + 0.7 |cos|` of the angle to the view ray and
/// colored by the mean of their vertex colors (mid gray without colors).
pub fn capture_front_view_mesh(mesh: &TriangleMesh, width: usize, height: usize) -> Result<Image> {
    mesh.validate()?;
    let pose = front_view_pose(width, height)?;
    let mut image = Image::filled(width, height, WHITE);
    let mut depth = vec![f64::INFINITY; width * height];
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| pose.world_to_camera(v)).collect();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|k| cam[k]);
        let (Some(pa), Some(pb), Some(pc)) = (
            pose.project_camera_point(&a),
            pose.project_camera_point(&b),
            pose.project_camera_point(&c),
        ) else {
            continue;
        };
        let area = (pb.0 - pa.0) * (pc.1 - pa.1) - (pb.1 - pa.1) * (pc.0 - pa.0);
        if area.abs() < 1e-12 {
            continue;
        }
        let normal = (b - a).cross(&(c - a));
        let centroid = (a + b + c) / 3.0;
        let lit = 0.3 + 0.7 * (normal.dot(&centroid) / (normal.norm() * centroid.norm())).abs();
        let base = match &mesh.colors {
            Some(colors) => {
                let mut m = [0.0; 3];
                for k in t {
                    for ch in 0..3 {
                        m[ch] += colors[*k][ch] / 3.0;
                    }
                }
                m
            }
            None => [0.6; 3],
        };
        let shade = base.map(|v| (v * lit).clamp(0.0, 1.0));

        let x0 = pa.0.min(pb.0).min(pc.0).floor().max(0.0) as usize;
        let y0 = pa.1.min(pb.1).min(pc.1).floor().max(0.0) as usize;
        let x1 = (pa.0.max(pb.0).max(pc.0).ceil().max(0.0) as usize).min(width);
        let y1 = (pa.1.max(pb.1).max(pc.1).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let w0 = ((pb.0 - px) * (pc.1 - py) - (pb.1 - py) * (pc.0 - px)) / area;
                let w1 = ((pc.0 - px) * (pa.1 - py) - (pc.1 - py) * (pa.0 - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a.z + w1 * b.z + w2 * c.z;
                let slot = y * width + x;
                if z < depth[slot] {
                    depth[slot] = z;
                    image.set_pixel(x, y, shade);
                }
            }
        }
    }
    Ok(image)
}

/// OBJ text for `mesh`. Refuses meshes above [`FACE_CAP`] faces.
pub fn to_obj(mesh: &TriangleMesh) -> Result<String> {
    mesh.validate()?;
    if mesh.triangles.len() > FACE_CAP {
        log::warn!(
            "mesh has {} faces, above the cap of {FACE_CAP}; not written",
            mesh.triangles.len()
        );
        return Err(Error::FaceCap {
            faces: mesh.triangles.len(),
            cap: FACE_CAP,
        });
    }
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                writeln!(out, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2])
            }
            None => writeln!(out, "v {} {} {}", v.x, v.y, v.z),
        }
        .expect("writing to a String");
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let text = to_obj(mesh)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses the subset of OBJ written by [`to_obj`]. Comments and blank lines
/// are skipped; other record types are errors.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut mesh = TriangleMesh::default();
    let mut colors = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        let fields: Vec<&str> = parts.collect();
        match tag {
            "v" => {
                let vals = fields
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(ln, format!("bad vertex: {e}")))?;
                match vals.len() {
                    3 => {}
                    6 => colors.push([vals[3], vals[4], vals[5]]),
                    k => return Err(err(ln, format!("vertex has {k} values, expected 3 or 6"))),
                }
                mesh.vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
            "f" => {
                if fields.len() != 3 {
                    return Err(err(ln, format!("face has {} indices, expected 3", fields.len())));
                }
                let mut t = [0usize; 3];
                for (slot, s) in t.iter_mut().zip(&fields) {
                    let i: usize = s.parse().map_err(|e| err(ln, format!("bad index {s:?}: {e}")))?;
                    if i == 0 {
                        return Err(err(ln, "face indices are 1-based".into()));
                    }
                    *slot = i - 1;
                }
                mesh.triangles.push(t);
            }
            other => return Err(err(ln, format!("unsupported record {other:?}"))),
        }
    }
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(err(0, "either all or no vertices carry colors".into()));
        }
        mesh.colors = Some(colors);
    }
    mesh.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}
