//! Input geometry: UV-unwrapped triangle meshes, street centerlines, and the
//! texel map that ties every atlas texel to a point on the surface.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Uv = [f64; 2];

/// Marker stored in [`TexelMap`] index slots that have no surface point.
const UNMAPPED: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: mesh not unwrapped (face has no vt indices)")]
    NotUnwrapped { line: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid street data: {0}")]
    Streets(String),
}

/// Triangle soup with per-corner UVs.
///
/// Coordinates are meters with +z as the world up axis. A mesh built through
/// [`Mesh::new`] may be empty (a scene with nothing in it); [`load_mesh`]
/// rejects files without faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    uv_corners: Vec<[Uv; 3]>,
    normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        uv_corners: Vec<[Uv; 3]>,
        normals: Option<Vec<Vec3>>,
    ) -> Result<Self, SceneError> {
        if faces.len() != uv_corners.len() {
            return Err(SceneError::InvalidMesh(format!(
                "{} faces but {} uv triples",
                faces.len(),
                uv_corners.len()
            )));
        }
        if let Some((i, _)) = vertices
            .iter()
            .enumerate()
            .find(|(_, v)| !v.iter().all(|c| c.is_finite()))
        {
            return Err(SceneError::InvalidMesh(format!("vertex {i} is not finite")));
        }
        for (f, tri) in faces.iter().enumerate() {
            if tri.iter().any(|&i| i as usize >= vertices.len()) {
                return Err(SceneError::InvalidMesh(format!(
                    "face {f} references a missing vertex"
                )));
            }
        }
        for (f, uvs) in uv_corners.iter().enumerate() {
            if uvs
                .iter()
                .flatten()
                .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
            {
                return Err(SceneError::InvalidMesh(format!(
                    "face {f} has uv outside [0,1]"
                )));
            }
        }
        if let Some(n) = &normals {
            if n.len() != vertices.len() {
                return Err(SceneError::InvalidMesh(
                    "normal count differs from vertex count".into(),
                ));
            }
            if n.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(SceneError::InvalidMesh("non-finite normal".into()));
            }
        }
        Ok(Self {
            vertices,
            faces,
            uv_corners,
            normals: normals.map(|n| n.into_iter().map(|v| v.normalize()).collect()),
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            uv_corners: Vec::new(),
            normals: None,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn uv_corners(&self) -> &[[Uv; 3]] {
        &self.uv_corners
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unit geometric normal, or +z for triangles with no area.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::z()
        }
    }

    /// Shading normal at barycentric coordinates `bary` of `face`.
    pub fn normal_at(&self, face: usize, bary: [f64; 3]) -> Vec3 {
        match &self.normals {
            Some(normals) => {
                let [a, b, c] = self.faces[face];
                let n = normals[a as usize] * bary[0]
                    + normals[b as usize] * bary[1]
                    + normals[c as usize] * bary[2];
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    self.face_normal(face)
                }
            }
            None => self.face_normal(face),
        }
    }

    pub fn uv_at(&self, face: usize, bary: [f64; 3]) -> Uv {
        let [a, b, c] = self.uv_corners[face];
        [
            a[0] * bary[0] + b[0] * bary[1] + c[0] * bary[2],
            a[1] * bary[0] + b[1] * bary[1] + c[1] * bary[2],
        ]
    }

    /// Connected UV charts: faces are joined when they share an edge whose
    /// two endpoints carry identical UVs on both sides.
    pub fn uv_islands(&self) -> Vec<u32> {
        let n = self.faces.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut seen: HashMap<(u32, u32, [u64; 4]), usize> = HashMap::new();
        for f in 0..n {
            let tri = self.faces[f];
            let uvs = self.uv_corners[f];
            for k in 0..3 {
                let (mut va, mut vb) = (tri[k], tri[(k + 1) % 3]);
                let (mut ua, mut ub) = (uvs[k], uvs[(k + 1) % 3]);
                if va > vb {
                    std::mem::swap(&mut va, &mut vb);
                    std::mem::swap(&mut ua, &mut ub);
                }
                let key = (
                    va,
                    vb,
                    [ua[0].to_bits(), ua[1].to_bits(), ub[0].to_bits(), ub[1].to_bits()],
                );
                match seen.get(&key) {
                    Some(&other) => {
                        let (ra, rb) = (find(&mut parent, f), find(&mut parent, other));
                        if ra != rb {
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                    None => {
                        seen.insert(key, f);
                    }
                }
            }
        }
        let mut ids = vec![u32::MAX; n];
        let mut next = 0u32;
        let mut out = Vec::with_capacity(n);
        for f in 0..n {
            let root = find(&mut parent, f);
            if ids[root] == u32::MAX {
                ids[root] = next;
                next += 1;
            }
            out.push(ids[root]);
        }
        out
    }

    /// Wavefront OBJ text with one `vt` per face corner.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for uvs in &self.uv_corners {
            for uv in uvs {
                let _ = writeln!(out, "vt {} {}", uv[0], uv[1]);
            }
        }
        for (f, tri) in self.faces.iter().enumerate() {
            let t = 3 * f + 1;
            let _ = writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                tri[0] + 1,
                t,
                tri[1] + 1,
                t + 1,
                tri[2] + 1,
                t + 2
            );
        }
        out
    }
}

fn wrap_uv(c: f64) -> f64 {
    if (0.0..=1.0).contains(&c) {
        c
    } else {
        c - c.floor()
    }
}

fn parse_floats(tokens: &[&str], line: usize, want: usize) -> Result<Vec<f64>, SceneError> {
    if tokens.len() < want {
        return Err(SceneError::Parse {
            line,
            msg: format!("expected {want} coordinates, found {}", tokens.len()),
        });
    }
    tokens[..want]
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SceneError::Parse {
                    line,
                    msg: format!("invalid number `{t}`"),
                })
        })
        .collect()
}

fn resolve_index(raw: &str, count: usize, line: usize, what: &str) -> Result<usize, SceneError> {
    let idx: i64 = raw.parse().map_err(|_| SceneError::Parse {
        line,
        msg: format!("invalid {what} index `{raw}`"),
    })?;
    let resolved = if idx > 0 {
        idx - 1
    } else if idx < 0 {
        count as i64 + idx
    } else {
        -1
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(SceneError::Parse {
            line,
            msg: format!("{what} index {idx} out of range"),
        });
    }
    Ok(resolved as usize)
}

/// Parse Wavefront OBJ text (`v`, `vt`, `f`). Polygons are fan-triangulated
/// and UVs outside `[0,1]` wrapped by their fractional part.
pub fn load_mesh(bytes: &[u8]) -> Result<Mesh, SceneError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SceneError::Parse {
        line: 0,
        msg: format!("not utf-8: {e}"),
    })?;
    let mut vertices = Vec::new();
    let mut tex = Vec::new();
    let mut faces = Vec::new();
    let mut uv_corners = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match tag {
            "v" => {
                let c = parse_floats(&rest, line, 3)?;
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            "vt" => {
                let c = parse_floats(&rest, line, 2)?;
                tex.push([wrap_uv(c[0]), wrap_uv(c[1])]);
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(SceneError::Parse {
                        line,
                        msg: "face needs at least 3 vertices".into(),
                    });
                }
                let mut corners = Vec::with_capacity(rest.len());
                for tok in &rest {
                    let mut parts = tok.split('/');
                    let v = parts.next().unwrap_or("");
                    let vt = parts.next().unwrap_or("");
                    if vt.is_empty() {
                        return Err(SceneError::NotUnwrapped { line });
                    }
                    let vi = resolve_index(v, vertices.len(), line, "vertex")?;
                    let ti = resolve_index(vt, tex.len(), line, "texture")?;
                    corners.push((vi as u32, tex[ti]));
                }
                for k in 1..corners.len() - 1 {
                    let (a, b, c) = (corners[0], corners[k], corners[k + 1]);
                    faces.push([a.0, b.0, c.0]);
                    uv_corners.push([a.1, b.1, c.1]);
                }
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(SceneError::InvalidMesh("no faces".into()));
    }
    Mesh::new(vertices, faces, uv_corners, None)
}

/// One mapped texel: its surface point, normal, and source face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelEntry {
    /// Linear atlas index, `row * width + col`.
    pub texel: u32,
    pub point: Vec3,
    pub normal: Vec3,
    pub face: u32,
    pub island: u32,
}

/// Partial map from atlas texels to surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct TexelMap {
    width: u32,
    height: u32,
    entries: Vec<TexelEntry>,
    index: Vec<u32>,
}

impl TexelMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Entries sorted by texel index.
    pub fn entries(&self) -> &[TexelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position of `texel` in [`Self::entries`], if mapped.
    pub fn slot(&self, texel: u32) -> Option<usize> {
        match self.index.get(texel as usize) {
            Some(&s) if s != UNMAPPED => Some(s as usize),
            _ => None,
        }
    }

    pub fn get(&self, col: u32, row: u32) -> Option<&TexelEntry> {
        if col >= self.width || row >= self.height {
            return None;
        }
        self.slot(row * self.width + col).map(|s| &self.entries[s])
    }

    /// UV of the texel center. Row 0 is the top of the atlas image (v = 1).
    pub fn texel_center_uv(&self, col: u32, row: u32) -> Uv {
        texel_center_uv(self.width, self.height, col, row)
    }

    /// Texel containing `uv`, clamped to the atlas.
    pub fn texel_at_uv(&self, uv: Uv) -> u32 {
        let col = ((uv[0] * self.width as f64).floor() as i64).clamp(0, self.width as i64 - 1);
        let row =
            (((1.0 - uv[1]) * self.height as f64).floor() as i64).clamp(0, self.height as i64 - 1);
        row as u32 * self.width + col as u32
    }
}

pub fn texel_center_uv(width: u32, height: u32, col: u32, row: u32) -> Uv {
    [
        (col as f64 + 0.5) / width as f64,
        1.0 - (row as f64 + 0.5) / height as f64,
    ]
}

/// Barycentric coordinates of `p` in the 2-D triangle `tri`, or `None` if the
/// triangle has (numerically) zero area.
pub fn barycentric_2d(tri: &[Uv; 3], p: Uv) -> Option<[f64; 3]> {
    let [a, b, c] = *tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if det.abs() < 1e-14 {
        return None;
    }
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    Some([1.0 - l1 - l2, l1, l2])
}

/// Tolerance for texel centers lying exactly on a shared UV edge.
const INSIDE_EPS: f64 = 1e-12;

fn rasterize_face(mesh: &Mesh, face: usize, island: u32, width: u32, height: u32) -> Vec<TexelEntry> {
    let uvs = mesh.uv_corners[face];
    let w = width as f64;
    let h = height as f64;
    let umin = uvs.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let umax = uvs.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let vmin = uvs.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let vmax = uvs.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);

    let col0 = ((umin * w - 0.5).ceil().max(0.0)) as i64;
    let col1 = ((umax * w - 0.5).floor()).min(w - 1.0) as i64;
    let row0 = (((1.0 - vmax) * h - 0.5).ceil().max(0.0)) as i64;
    let row1 = (((1.0 - vmin) * h - 0.5).floor()).min(h - 1.0) as i64;

    let tri3 = mesh.triangle(face);
    let mut out = Vec::new();
    for row in row0..=row1 {
        for col in col0..=col1 {
            let center = texel_center_uv(width, height, col as u32, row as u32);
            let Some(bary) = barycentric_2d(&uvs, center) else {
                return out;
            };
            if bary.iter().any(|&l| l < -INSIDE_EPS) {
                continue;
            }
            let point = tri3[0] * bary[0] + tri3[1] * bary[1] + tri3[2] * bary[2];
            out.push(TexelEntry {
                texel: row as u32 * width + col as u32,
                point,
                normal: mesh.normal_at(face, bary),
                face: face as u32,
                island,
            });
        }
    }
    out
}

/// Map every texel whose center falls inside a UV triangle to the matching
/// surface point. Overlapping UV triangles resolve to the lowest face id.
pub fn build_texel_map(mesh: &Mesh, width: u32, height: u32) -> TexelMap {
    assert!(width >= 1 && height >= 1, "atlas dimensions must be positive");
    let islands = mesh.uv_islands();
    let per_face: Vec<Vec<TexelEntry>> = (0..mesh.face_count())
        .into_par_iter()
        .map(|f| rasterize_face(mesh, f, islands[f], width, height))
        .collect();

    let mut index = vec![UNMAPPED; width as usize * height as usize];
    let mut entries = Vec::new();
    for face_entries in per_face {
        for e in face_entries {
            let slot = &mut index[e.texel as usize];
            if *slot == UNMAPPED {
                *slot = 0;
                entries.push(e);
            }
        }
    }
    entries.sort_unstable_by_key(|e| e.texel);
    for (s, e) in entries.iter().enumerate() {
        index[e.texel as usize] = s as u32;
    }
    TexelMap {
        width,
        height,
        entries,
        index,
    }
}

/// Street centerlines as ground-level polylines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreetGraph {
    pub polylines: Vec<Vec<Vec3>>,
}

/// Parse a JSON array of polylines, each an array of `[x, y, z]` points.
/// Consecutive duplicate points are collapsed.
pub fn load_streets(bytes: &[u8]) -> Result<StreetGraph, SceneError> {
    let raw: Vec<Vec<[f64; 3]>> =
        serde_json::from_slice(bytes).map_err(|e| SceneError::Streets(e.to_string()))?;
    let mut polylines = Vec::with_capacity(raw.len());
    for (i, line) in raw.into_iter().enumerate() {
        if line.is_empty() {
            return Err(SceneError::Streets(format!("polyline {i} has no points")));
        }
        let mut pts: Vec<Vec3> = Vec::with_capacity(line.len());
        for p in line {
            let v = Vec3::new(p[0], p[1], p[2]);
            if pts.last() != Some(&v) {
                pts.push(v);
            }
        }
        polylines.push(pts);
    }
    Ok(StreetGraph { polylines })
}

impl StreetGraph {
    pub fn to_json(&self) -> String {
        let raw: Vec<Vec<[f64; 3]>> = self
            .polylines
            .iter()
            .map(|l| l.iter().map(|p| [p.x, p.y, p.z]).collect())
            .collect();
        serde_json::to_string(&raw).expect("street json")
    }
}
