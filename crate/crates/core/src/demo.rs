//! Synthetic test scenes built from boxes and ground tiles along streets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{Mesh, StreetGraph, Uv, Vec3};

/// Planar rectangle `origin + a * along + b * up` for `a ∈ [0, width]`,
/// `b ∈ [0, height]`; `along` and `up` are unit vectors.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub origin: Vec3,
    pub along: Vec3,
    pub up: Vec3,
    pub width: f64,
    pub height: f64,
}

impl Quad {
    fn corners(&self) -> [Vec3; 4] {
        let a = self.along * self.width;
        let b = self.up * self.height;
        [self.origin, self.origin + a, self.origin + a + b, self.origin + b]
    }
}

/// Gap between charts, in texels.
const GUTTER: u32 = 1;

fn try_pack(quads: &[Quad], atlas: u32, density: f64) -> Option<Vec<(u32, u32, u32, u32)>> {
    let sizes: Vec<(u32, u32)> = quads
        .iter()
        .map(|q| {
            (
                ((q.width * density).ceil() as u32).max(1),
                ((q.height * density).ceil() as u32).max(1),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..quads.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.cmp(&sizes[a].1).then(a.cmp(&b)));
    let mut placed = vec![(0, 0, 0, 0); quads.len()];
    let (mut x, mut y, mut shelf) = (0u32, 0u32, 0u32);
    for i in order {
        let (w, h) = sizes[i];
        if w > atlas || h > atlas {
            return None;
        }
        if x + w > atlas {
            x = 0;
            y += shelf + GUTTER;
            shelf = 0;
        }
        if y + h > atlas {
            return None;
        }
        placed[i] = (x, y, w, h);
        x += w + GUTTER;
        shelf = shelf.max(h);
    }
    Some(placed)
}

/// Give every quad its own rectangular UV chart in a square atlas of
/// `atlas_size` texels, at `texels_per_m` if everything fits and at a
/// uniformly reduced density otherwise. Returns the mesh and the density used.
pub fn pack_quads(quads: &[Quad], atlas_size: u32, texels_per_m: f64) -> (Mesh, f64) {
    assert!(atlas_size >= 1 && texels_per_m > 0.0);
    let mut density = texels_per_m;
    let placed = loop {
        if let Some(p) = try_pack(quads, atlas_size, density) {
            break p;
        }
        density *= 0.9;
    };
    let s = atlas_size as f64;
    let mut vertices = Vec::with_capacity(quads.len() * 4);
    let mut faces = Vec::with_capacity(quads.len() * 2);
    let mut uv_corners = Vec::with_capacity(quads.len() * 2);
    for (q, &(cx, ry, cw, ch)) in quads.iter().zip(&placed) {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(&q.corners());
        let (u0, u1) = (cx as f64 / s, (cx + cw) as f64 / s);
        let (v0, v1) = (1.0 - (ry + ch) as f64 / s, 1.0 - ry as f64 / s);
        let uv: [Uv; 4] = [[u0, v0], [u1, v0], [u1, v1], [u0, v1]];
        faces.push([base, base + 1, base + 2]);
        uv_corners.push([uv[0], uv[1], uv[2]]);
        faces.push([base, base + 2, base + 3]);
        uv_corners.push([uv[0], uv[2], uv[3]]);
    }
    let mesh = Mesh::new(vertices, faces, uv_corners, None).expect("packed quads form a valid mesh");
    (mesh, density)
}

/// Axis-aligned footprint `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Footprint {
    fn overlaps(&self, o: &Footprint, margin: f64) -> bool {
        self.x0 < o.x1 + margin && o.x0 < self.x1 + margin && self.y0 < o.y1 + margin && o.y0 < self.y1 + margin
    }
}

fn box_quads(f: &Footprint, height: f64) -> [Quad; 5] {
    let (w, d) = (f.x1 - f.x0, f.y1 - f.y0);
    [
        Quad { origin: Vec3::new(f.x0, f.y0, 0.0), along: Vec3::x(), up: Vec3::z(), width: w, height },
        Quad { origin: Vec3::new(f.x1, f.y0, 0.0), along: Vec3::y(), up: Vec3::z(), width: d, height },
        Quad { origin: Vec3::new(f.x1, f.y1, 0.0), along: -Vec3::x(), up: Vec3::z(), width: w, height },
        Quad { origin: Vec3::new(f.x0, f.y1, 0.0), along: -Vec3::y(), up: Vec3::z(), width: d, height },
        Quad { origin: Vec3::new(f.x0, f.y0, height), along: Vec3::x(), up: Vec3::y(), width: w, height: d },
    ]
}

fn ground_tiles(f: &Footprint, tile: f64, out: &mut Vec<Quad>) {
    let mut y = f.y0;
    while y < f.y1 - 1e-9 {
        let th = tile.min(f.y1 - y);
        let mut x = f.x0;
        while x < f.x1 - 1e-9 {
            let tw = tile.min(f.x1 - x);
            out.push(Quad { origin: Vec3::new(x, y, 0.0), along: Vec3::x(), up: Vec3::y(), width: tw, height: th });
            x += tw;
        }
        y += th;
    }
}

#[derive(Debug, Clone)]
pub struct DemoScene {
    pub mesh: Mesh,
    pub streets: StreetGraph,
    /// Texel density actually used for the UV charts.
    pub texels_per_m: f64,
}

/// Half-width of the street corridor kept free of buildings.
const CORRIDOR: f64 = 6.0;

/// Two streets lined with seeded random boxes: a straight 20 m street and an
/// L-shaped one (10 m east, then 10 m north). At 5 m spacing they yield
/// 10 viewpoints.
pub fn demo_scene(seed: u64, atlas_size: u32, texels_per_m: f64) -> DemoScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streets = StreetGraph {
        polylines: vec![
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(20.0, 0.0, 0.0)],
            vec![Vec3::new(40.0, 0.0, 0.0), Vec3::new(50.0, 0.0, 0.0), Vec3::new(50.0, 10.0, 0.0)],
        ],
    };
    // Street corridors: buildings stay out, ground tiles go in.
    let corridors = [
        Footprint { x0: -6.0, x1: 26.0, y0: -CORRIDOR, y1: CORRIDOR },
        Footprint { x0: 34.0, x1: 56.0, y0: -CORRIDOR, y1: CORRIDOR },
        Footprint { x0: 44.0, x1: 56.0, y0: CORRIDOR, y1: 16.0 },
    ];

    let mut lots: Vec<Footprint> = Vec::new();
    let try_lot = |f: Footprint, lots: &mut Vec<Footprint>| {
        let clear = corridors.iter().all(|c| !c.overlaps(&f, -1e-9)) && lots.iter().all(|l| !l.overlaps(&f, 0.5));
        if clear {
            lots.push(f);
        }
        clear
    };
    // Rows of lots along the x-running streets, both sides.
    for (x_start, x_end) in [(-6.0, 26.0), (34.0, 56.0)] {
        for side in [1.0, -1.0] {
            let mut x = x_start;
            while x < x_end {
                let w = rng.random_range(5.0..8.0f64).min(x_end - x);
                let d = rng.random_range(5.0..7.0);
                let (y0, y1) = if side > 0.0 { (CORRIDOR, CORRIDOR + d) } else { (-CORRIDOR - d, -CORRIDOR) };
                if w > 2.0 {
                    try_lot(Footprint { x0: x, x1: x + w, y0, y1 }, &mut lots);
                }
                x += w + 1.0;
            }
        }
    }
    // Lots along the north-running leg.
    for side in [1.0, -1.0] {
        let mut y = CORRIDOR;
        while y < 16.0 {
            let w = rng.random_range(5.0..8.0f64).min(16.0 - y);
            let d = rng.random_range(5.0..7.0);
            let (x0, x1) = if side > 0.0 { (56.0, 56.0 + d) } else { (44.0 - d, 44.0) };
            if w > 2.0 {
                try_lot(Footprint { x0, x1, y0: y, y1: y + w }, &mut lots);
            }
            y += w + 1.0;
        }
    }

    let mut quads = Vec::new();
    for lot in &lots {
        let height = rng.random_range(6.0..15.0);
        quads.extend_from_slice(&box_quads(lot, height));
    }
    for c in &corridors {
        ground_tiles(c, 8.0, &mut quads);
    }
    let (mesh, density) = pack_quads(&quads, atlas_size, texels_per_m);
    DemoScene { mesh, streets, texels_per_m: density }
}

/// Two cameras 4 m apart facing a wall 8 m away. A fin in the plane of each
/// camera hides part of the wall from the other camera, so the wall splits
/// into a region only the first camera sees (x < 0), a shared region
/// (0 < x < 4), and a region only the second camera sees (x > 4).
/// Use with a viewpoint spacing of 4 m.
pub fn two_view_scene(atlas_size: u32, texels_per_m: f64) -> DemoScene {
    let wall = Quad {
        origin: Vec3::new(-2.0, 8.0, 0.5),
        along: Vec3::x(),
        up: Vec3::z(),
        width: 8.0,
        height: 4.0,
    };
    let fin = |x: f64| Quad {
        origin: Vec3::new(x, 0.5, 0.5),
        along: Vec3::y(),
        up: Vec3::z(),
        width: 7.5,
        height: 4.0,
    };
    let (mesh, density) = pack_quads(&[wall, fin(0.0), fin(4.0)], atlas_size, texels_per_m);
    DemoScene {
        mesh,
        streets: StreetGraph {
            polylines: vec![vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0)]],
        },
        texels_per_m: density,
    }
}
