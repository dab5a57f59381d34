#![allow(dead_code)]

use put_core::scene::{Mesh, Vec3};

/// Ray/plane intersection followed by an inside test, written independently
/// of the engine's ray caster.
pub fn ray_hits_triangle(tri: &[Vec3; 3], origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(tri[0] - origin)) / denom;
    if t <= 0.0 {
        return None;
    }
    let p = origin + dir * t;
    let inside = (0..3).all(|i| {
        let (a, b) = (tri[i], tri[(i + 1) % 3]);
        (b - a).cross(&(p - a)).dot(&n) >= 0.0
    });
    inside.then_some(t)
}

/// Whether the segment from `camera` to `point` is free of every triangle.
pub fn unobstructed(mesh: &Mesh, camera: &Vec3, point: &Vec3) -> bool {
    let to = point - camera;
    let dist = to.norm();
    let dir = to / dist;
    !(0..mesh.face_count()).any(|f| ray_hits_triangle(&mesh.triangle(f), camera, &dir).is_some_and(|t| t < dist - 1e-6))
}

/// Visibility of a surface point with normal `normal`: unobstructed and not
/// seen exactly edge-on.
pub fn sees(mesh: &Mesh, camera: &Vec3, point: &Vec3, normal: &Vec3) -> bool {
    let to = (point - camera).normalize();
    to.dot(normal).abs() > 1e-6 && unobstructed(mesh, camera, point)
}
