//! Bounding volume hierarchy over a triangle mesh for nearest-hit ray queries.

use crate::scene::{Mesh, Vec3};

const LEAF_SIZE: usize = 4;
const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub face: u32,
    /// Barycentric weights of the triangle's three corners.
    pub bary: [f64; 3],
}

impl Hit {
    /// Nearer hit wins; equal distances go to the lower face id.
    fn beats(&self, other: &Hit) -> bool {
        self.t < other.t || (self.t == other.t && self.face < other.face)
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    /// Entry distance of the ray into the box, if it enters before `t_max`.
    fn enter(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0 * inf means the ray lies in the slab plane; keep the bounds.
            if near.is_nan() {
                near = f64::NEG_INFINITY;
            }
            if far.is_nan() {
                far = f64::INFINITY;
            }
            t0 = t0.max(near);
            t1 = t1.min(far * (1.0 + 4.0 * f64::EPSILON));
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    bounds: Aabb,
    /// Leaf: first index into `order`; inner: index of the left child.
    start: u32,
    /// Leaf: primitive count; inner: 0.
    count: u32,
    right: u32,
}

/// Median-split BVH. Construction is sequential and fully deterministic.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.face_count()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Self { nodes, order, tris }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nearest intersection along `origin + t * dir`, `t > 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            if node.bounds.enter(origin, &inv, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                let range = node.start as usize..(node.start + node.count) as usize;
                for &face in &self.order[range] {
                    if let Some((t, bary)) = intersect_triangle(&self.tris[face as usize], origin, dir) {
                        let hit = Hit { t, face, bary };
                        if best.is_none_or(|b| hit.beats(&b)) {
                            best = Some(hit);
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.start);
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    lo: usize,
    hi: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &f in &order[lo..hi] {
        for p in &tris[f as usize] {
            bounds.grow(p);
        }
        cbounds.grow(&centroids[f as usize]);
    }
    let index = nodes.len() as u32;
    nodes.push(Node {
        bounds,
        start: lo as u32,
        count: (hi - lo) as u32,
        right: 0,
    });
    let extent = cbounds.max - cbounds.min;
    if hi - lo <= LEAF_SIZE || extent.max() <= 0.0 {
        return index;
    }
    let axis = extent.imax();
    order[lo..hi].sort_by(|a, b| {
        centroids[*a as usize][axis]
            .total_cmp(&centroids[*b as usize][axis])
            .then(a.cmp(b))
    });
    let mid = (lo + hi) / 2;
    let left = build_node(tris, centroids, order, lo, mid, nodes);
    let right = build_node(tris, centroids, order, mid, hi, nodes);
    let mut merged = nodes[left as usize].bounds;
    merged.merge(&nodes[right as usize].bounds);
    nodes[index as usize] = Node {
        bounds: merged,
        start: left,
        count: 0,
        right,
    };
    index
}

/// Two-sided Möller–Trumbore test. Hits on shared edges count for both
/// triangles; the caller's tie-break decides between them.
pub fn intersect_triangle(tri: &[Vec3; 3], origin: &Vec3, dir: &Vec3) -> Option<(f64, [f64; 3])> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > T_MIN).then_some((t, [1.0 - u - v, u, v]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(mesh: &Mesh, origin: &Vec3, dir: &Vec3) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for f in 0..mesh.face_count() {
            if let Some((t, _)) = intersect_triangle(&mesh.triangle(f), origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, f as u32));
                }
            }
        }
        best
    }

    fn random_soup(rng: &mut ChaCha8Rng, n: usize) -> Mesh {
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        let mut uvs = Vec::new();
        for f in 0..n {
            let c = Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0));
            for _ in 0..3 {
                verts.push(c + Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            }
            let b = 3 * f as u32;
            faces.push([b, b + 1, b + 2]);
            uvs.push([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        }
        Mesh::new(verts, faces, uvs, None).unwrap()
    }

    #[test]
    fn matches_brute_force_on_random_soup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mesh = random_soup(&mut rng, 300);
        let bvh = Bvh::build(&mesh);
        let mut hits = 0;
        for _ in 0..2000 {
            let o = Vec3::new(rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), rng.random_range(-8.0..8.0));
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let got = bvh.intersect(&o, &d).map(|h| (h.t, h.face));
            let want = brute_force(&mesh, &o, &d);
            match (got, want) {
                (Some(g), Some(w)) => {
                    hits += 1;
                    assert!((g.0 - w.0).abs() < 1e-9, "{g:?} vs {w:?}");
                }
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn axis_aligned_rays_hit() {
        let mesh = Mesh::new(
            vec![Vec3::new(-1.0, 5.0, -1.0), Vec3::new(1.0, 5.0, -1.0), Vec3::new(0.0, 5.0, 1.0)],
            vec![[0, 1, 2]],
            vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]],
            None,
        )
        .unwrap();
        let bvh = Bvh::build(&mesh);
        let h = bvh.intersect(&Vec3::zeros(), &Vec3::y()).unwrap();
        assert!((h.t - 5.0).abs() < 1e-12);
        assert!(bvh.intersect(&Vec3::zeros(), &-Vec3::y()).is_none());
        assert!(Bvh::build(&Mesh::empty()).intersect(&Vec3::zeros(), &Vec3::y()).is_none());
    }

    #[test]
    fn coincident_triangles_resolve_to_lowest_face() {
        let v = vec![Vec3::new(-1.0, 3.0, -1.0), Vec3::new(1.0, 3.0, -1.0), Vec3::new(0.0, 3.0, 1.0)];
        let mesh = Mesh::new(
            v,
            vec![[0, 1, 2], [0, 1, 2], [0, 1, 2]],
            vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]; 3],
            None,
        )
        .unwrap();
        let h = Bvh::build(&mesh).intersect(&Vec3::zeros(), &Vec3::y()).unwrap();
        assert_eq!(h.face, 0);
    }
}
