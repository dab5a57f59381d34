//! Equirectangular panoramas: the projection convention and the renderer
//! that produces partially textured frames.
//!
//! Pixel `(x, y)` of a `W x H` panorama looks along longitude
//! `λ = ((x + 0.5) / W) · 2π − π` and latitude `φ = π/2 − ((y + 0.5) / H) · π`.
//! In the camera frame (right = +x, up = +y, forward = +z) that is the
//! direction `(cos φ sin λ, sin φ, cos φ cos λ)`. The image center looks
//! forward and the left/right edges meet directly behind the camera.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::TextureAtlas;
use crate::bvh::Bvh;
use crate::scene::{Mesh, TexelMap, Vec3};
use crate::viewpath::Viewpoint;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("point coincides with the camera center")]
    AtCameraCenter,
}

/// A projected point in pixel coordinates, with its distance to the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Camera-frame direction through continuous pixel coordinates `(x, y)`.
pub fn unproject_dir(width: u32, height: u32, x: f64, y: f64) -> Vec3 {
    let lon = (x + 0.5) / width as f64 * TAU - PI;
    let lat = FRAC_PI_2 - (y + 0.5) / height as f64 * PI;
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    Vec3::new(clat * slon, slat, clat * clon)
}

/// Rotate a camera-frame direction into world space.
pub fn camera_to_world(vp: &Viewpoint, d: &Vec3) -> Vec3 {
    vp.right() * d.x + vp.up * d.y + vp.forward * d.z
}

/// Inverse of [`unproject_dir`] for a world point. Longitude is wrapped to
/// `[-π, π)`, so points straight behind the camera land on `x = -0.5`.
pub fn project(vp: &Viewpoint, width: u32, height: u32, p: &Vec3) -> Result<Projected, ProjectionError> {
    let offset = p - vp.position;
    let depth = offset.norm();
    if depth == 0.0 {
        return Err(ProjectionError::AtCameraCenter);
    }
    let w = offset / depth;
    let v = Vec3::new(vp.right().dot(&w), vp.up.dot(&w), vp.forward.dot(&w));
    let lat = v.y.clamp(-1.0, 1.0).asin();
    let mut lon = v.x.atan2(v.z);
    if lon >= PI {
        lon -= TAU;
    }
    Ok(Projected {
        x: (lon + PI) / TAU * width as f64 - 0.5,
        y: (FRAC_PI_2 - lat) / PI * height as f64 - 0.5,
        depth,
    })
}

/// Fixed directional light with an ambient floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shading {
    pub sun_dir: [f64; 3],
    pub ambient: f64,
}

impl Default for Shading {
    fn default() -> Self {
        let s = Vec3::new(1.0, 2.0, 1.0).normalize();
        Self {
            sun_dir: [s.x, s.y, s.z],
            ambient: 0.3,
        }
    }
}

impl Shading {
    /// Gray level of a white surface with unit normal `n`.
    pub fn shade(&self, n: &Vec3) -> f64 {
        let sun = Vec3::from(self.sun_dir).normalize();
        self.ambient + (1.0 - self.ambient) * n.dot(&sun).max(0.0)
    }
}

/// Geometry prepared for ray casting.
#[derive(Debug, Clone)]
pub struct RenderScene<'a> {
    pub mesh: &'a Mesh,
    bvh: Bvh,
}

impl<'a> RenderScene<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        Self {
            mesh,
            bvh: Bvh::build(mesh),
        }
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }
}

/// One rendered panorama with its mask and depth buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoFrame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f32; 3]>,
    /// 1 where the surface already carries texture.
    pub mask: Vec<u8>,
    /// Hit distance in meters; `+inf` for background.
    pub depth: Vec<f64>,
    /// White-material shading of every surface pixel, textured or not.
    pub gray: Vec<f32>,
    pub viewpoint: Viewpoint,
}

impl PanoFrame {
    fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn depth_at(&self, x: u32, y: u32) -> f64 {
        self.depth[self.idx(x, y)]
    }

    pub fn mask_at(&self, x: u32, y: u32) -> bool {
        self.mask[self.idx(x, y)] != 0
    }

    /// The partially textured image as 8-bit RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .rgb
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("frame dimensions")
    }

    pub fn gray8(&self) -> Vec<u8> {
        self.gray
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mask_image(&self) -> GrayImage {
        let raw = self.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width, self.height, raw).expect("frame dimensions")
    }

    /// Depth in centimeters; `u16::MAX` marks background or out-of-range depth.
    pub fn depth_image(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let raw = self
            .depth
            .iter()
            .map(|&d| {
                let cm = (d * 100.0).round();
                if d.is_finite() && cm < u16::MAX as f64 {
                    cm as u16
                } else {
                    u16::MAX
                }
            })
            .collect();
        ImageBuffer::from_raw(self.width, self.height, raw).expect("frame dimensions")
    }

    /// Write `frame_{i:05}.png`, `mask_{i:05}.png` and `depth_{i:05}.png`.
    pub fn save(&self, dir: &Path) -> image::ImageResult<()> {
        let i = self.viewpoint.iteration;
        self.to_rgb8().save(dir.join(format!("frame_{i:05}.png")))?;
        self.mask_image().save(dir.join(format!("mask_{i:05}.png")))?;
        self.depth_image().save(dir.join(format!("depth_{i:05}.png")))?;
        Ok(())
    }
}

/// Ray-cast a partially textured panorama.
///
/// Surfaces whose texel already has a blended color show that color and get
/// mask 1. All other surfaces use a white material under `shading`, which
/// makes them exactly gray. Background is black with infinite depth.
pub fn render_partial(
    scene: &RenderScene<'_>,
    texel_map: &TexelMap,
    atlas: &TextureAtlas,
    viewpoint: &Viewpoint,
    width: u32,
    height: u32,
    shading: &Shading,
) -> PanoFrame {
    assert_eq!(
        (texel_map.width(), texel_map.height()),
        (atlas.width(), atlas.height()),
        "atlas and texel map disagree on size"
    );
    let mesh = scene.mesh;
    let pixels: Vec<([f32; 3], u8, f64, f32)> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % width, i / width);
            let d = camera_to_world(viewpoint, &unproject_dir(width, height, x as f64, y as f64));
            let Some(hit) = scene.bvh.intersect(&viewpoint.position, &d) else {
                return ([0.0; 3], 0, f64::INFINITY, 0.0);
            };
            let face = hit.face as usize;
            let mut n = mesh.normal_at(face, hit.bary);
            if n.dot(&d) > 0.0 {
                n = -n;
            }
            let gray = shading.shade(&n) as f32;
            let texel = texel_map.texel_at_uv(mesh.uv_at(face, hit.bary));
            match atlas.color(texel) {
                Some(c) => (c.map(|v| v.clamp(0.0, 1.0) as f32), 1, hit.t, gray),
                None => ([gray; 3], 0, hit.t, gray),
            }
        })
        .collect();

    let n = pixels.len();
    let mut frame = PanoFrame {
        width,
        height,
        rgb: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        gray: Vec::with_capacity(n),
        viewpoint: *viewpoint,
    };
    for (rgb, m, d, g) in pixels {
        frame.rgb.push(rgb);
        frame.mask.push(m);
        frame.depth.push(d);
        frame.gray.push(g);
    }
    frame
}
