//! Texture atlas with a per-texel contribution ledger.
//!
//! Every iteration back-projects the translated panorama onto the texels its
//! camera can see. Each texel keeps the full list of `(iteration, color,
//! distance)` samples it received, because distance weights depend on the
//! whole set of views and change as new views arrive. The displayed color is
//! recomputed from that list under the active [`BlendMode`].

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use image::{RgbImage, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pano::{self, PanoFrame};
use crate::scene::TexelMap;

pub type Rgb = [f64; 3];

const NO_SLOT: u32 = u32::MAX;
const STATE_MAGIC: &[u8; 8] = b"PUTATLS1";

/// Smallest camera distance recorded for a texel. A surface point exactly on
/// the camera's vertical axis would otherwise have zero distance.
pub const MIN_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("distance {0} is not positive")]
    NonPositiveDistance(f64),
    #[error("cannot compute weights for an empty view set")]
    NoViews,
    #[error("texel {texel} already has iteration {last}; got {iteration}")]
    OutOfOrder {
        texel: u32,
        iteration: usize,
        last: usize,
    },
    #[error("texel {0} is not mapped to the surface")]
    Unmapped(u32),
    #[error("texel {0} appears twice in one update")]
    Duplicate(u32),
    #[error("non-finite color for texel {0}")]
    NonFinite(u32),
    #[error("invalid clamp range [{lo}, {hi}]")]
    ClampRange { lo: f64, hi: f64 },
    #[error("atlas state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Last write wins.
    NoBlend,
    /// Uniform mean over all views.
    Average,
    /// Distance-weighted mean with clamped, renormalized weights.
    #[default]
    Weighted,
}

impl BlendMode {
    pub const ALL: [BlendMode; 3] = [BlendMode::NoBlend, BlendMode::Average, BlendMode::Weighted];

    pub fn as_str(&self) -> &'static str {
        match self {
            BlendMode::NoBlend => "no_blend",
            BlendMode::Average => "average",
            BlendMode::Weighted => "weighted",
        }
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_blend" | "no-blend" => Ok(BlendMode::NoBlend),
            "average" => Ok(BlendMode::Average),
            "weighted" => Ok(BlendMode::Weighted),
            other => Err(format!("unknown blend mode `{other}`")),
        }
    }
}

/// Bounds applied to raw distance weights before renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightClamp {
    pub lo: f64,
    pub hi: f64,
}

impl Default for WeightClamp {
    fn default() -> Self {
        Self { lo: 0.3, hi: 0.7 }
    }
}

impl WeightClamp {
    pub fn new(lo: f64, hi: f64) -> Result<Self, AtlasError> {
        if !(0.0..hi).contains(&lo) || hi > 1.0 {
            return Err(AtlasError::ClampRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }
}

/// `1 - d_i / sum(d)` for each view. These sum to `n - 1`.
pub fn raw_weights(distances: &[f64]) -> Vec<f64> {
    let total: f64 = distances.iter().sum();
    distances.iter().map(|d| 1.0 - d / total).collect()
}

/// Blend weights for a texel seen from cameras at `distances`.
///
/// A single view gets weight 1. Otherwise raw weights are clamped to
/// `[clamp.lo, clamp.hi]` and divided by their sum.
pub fn compute_weights(distances: &[f64], clamp: WeightClamp) -> Result<Vec<f64>, AtlasError> {
    if distances.is_empty() {
        return Err(AtlasError::NoViews);
    }
    if let Some(&d) = distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(AtlasError::NonPositiveDistance(d));
    }
    if distances.len() == 1 {
        return Ok(vec![1.0]);
    }
    let clamped: Vec<f64> = raw_weights(distances)
        .into_iter()
        .map(|w| w.clamp(clamp.lo, clamp.hi))
        .collect();
    let sum: f64 = clamped.iter().sum();
    Ok(clamped.into_iter().map(|w| w / sum).collect())
}

/// One view's sample of a texel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub iteration: usize,
    pub color: Rgb,
    pub distance: f64,
}

/// A texel color gathered from a generated panorama.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelSample {
    pub texel: u32,
    pub color: Rgb,
    pub distance: f64,
}

/// Blend a texel's contributions. Returns `None` for an empty list.
pub fn blend(
    contributions: &[Contribution],
    mode: BlendMode,
    clamp: WeightClamp,
) -> Result<Option<Rgb>, AtlasError> {
    let Some(latest) = contributions.iter().max_by_key(|c| c.iteration) else {
        return Ok(None);
    };
    let mixed = match mode {
        BlendMode::NoBlend => return Ok(Some(latest.color)),
        BlendMode::Average => {
            let w = 1.0 / contributions.len() as f64;
            weighted_sum(contributions.iter().map(|c| (w, &c.color)))
        }
        BlendMode::Weighted => {
            let distances: Vec<f64> = contributions.iter().map(|c| c.distance).collect();
            let weights = compute_weights(&distances, clamp)?;
            weighted_sum(weights.iter().copied().zip(contributions.iter().map(|c| &c.color)))
        }
    };
    // Rounding can push a convex combination a few ulps outside its inputs.
    let mut out = mixed;
    for (ch, v) in out.iter_mut().enumerate() {
        let lo = contributions.iter().map(|c| c.color[ch]).fold(f64::INFINITY, f64::min);
        let hi = contributions.iter().map(|c| c.color[ch]).fold(f64::NEG_INFINITY, f64::max);
        *v = v.clamp(lo, hi);
    }
    Ok(Some(out))
}

fn weighted_sum<'a>(items: impl Iterator<Item = (f64, &'a Rgb)>) -> Rgb {
    let mut acc = [0.0; 3];
    for (w, c) in items {
        for ch in 0..3 {
            acc[ch] += w * c[ch];
        }
    }
    acc
}

/// Atlas over the mapped texels of a [`TexelMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextureAtlas {
    width: u32,
    height: u32,
    mode: BlendMode,
    clamp: WeightClamp,
    slot_of: Vec<u32>,
    texels: Vec<u32>,
    islands: Vec<u32>,
    contributions: Vec<Vec<Contribution>>,
    blended: Vec<Option<Rgb>>,
    updates: usize,
}

impl TextureAtlas {
    pub fn new(texel_map: &TexelMap, mode: BlendMode, clamp: WeightClamp) -> Self {
        let (width, height) = (texel_map.width(), texel_map.height());
        let mut slot_of = vec![NO_SLOT; width as usize * height as usize];
        for (s, e) in texel_map.entries().iter().enumerate() {
            slot_of[e.texel as usize] = s as u32;
        }
        let n = texel_map.len();
        Self {
            width,
            height,
            mode,
            clamp,
            slot_of,
            texels: texel_map.entries().iter().map(|e| e.texel).collect(),
            islands: texel_map.entries().iter().map(|e| e.island).collect(),
            contributions: vec![Vec::new(); n],
            blended: vec![None; n],
            updates: 0,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn mode(&self) -> BlendMode {
        self.mode
    }

    pub fn clamp(&self) -> WeightClamp {
        self.clamp
    }

    /// Number of `update` calls applied so far.
    pub fn update_count(&self) -> usize {
        self.updates
    }

    fn slot(&self, texel: u32) -> Option<usize> {
        match self.slot_of.get(texel as usize) {
            Some(&s) if s != NO_SLOT => Some(s as usize),
            _ => None,
        }
    }

    pub fn is_mapped(&self, texel: u32) -> bool {
        self.slot(texel).is_some()
    }

    /// Blended color, if the texel has at least one contribution.
    pub fn color(&self, texel: u32) -> Option<Rgb> {
        self.slot(texel).and_then(|s| self.blended[s])
    }

    pub fn contributions(&self, texel: u32) -> &[Contribution] {
        match self.slot(texel) {
            Some(s) => &self.contributions[s],
            None => &[],
        }
    }

    pub fn island(&self, texel: u32) -> Option<u32> {
        self.slot(texel).map(|s| self.islands[s])
    }

    /// `(texel, color)` for every texel that has been textured.
    pub fn textured(&self) -> impl Iterator<Item = (u32, Rgb)> + '_ {
        self.texels
            .iter()
            .zip(&self.blended)
            .filter_map(|(&t, c)| c.map(|c| (t, c)))
    }

    pub fn textured_count(&self) -> usize {
        self.blended.iter().filter(|c| c.is_some()).count()
    }

    /// Append one iteration's samples and re-blend the touched texels.
    ///
    /// The update is all-or-nothing: any invalid sample leaves the atlas as
    /// it was.
    pub fn update(&mut self, samples: &[TexelSample], iteration: usize) -> Result<(), AtlasError> {
        let mut slots = Vec::with_capacity(samples.len());
        for s in samples {
            let slot = self.slot(s.texel).ok_or(AtlasError::Unmapped(s.texel))?;
            if !(s.distance > 0.0) || !s.distance.is_finite() {
                return Err(AtlasError::NonPositiveDistance(s.distance));
            }
            if s.color.iter().any(|c| !c.is_finite()) {
                return Err(AtlasError::NonFinite(s.texel));
            }
            if let Some(last) = self.contributions[slot].last() {
                if last.iteration >= iteration {
                    return Err(AtlasError::OutOfOrder {
                        texel: s.texel,
                        iteration,
                        last: last.iteration,
                    });
                }
            }
            slots.push(slot);
        }
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(AtlasError::Duplicate(self.texels[w[0]]));
        }

        for (s, &slot) in samples.iter().zip(&slots) {
            self.contributions[slot].push(Contribution {
                iteration,
                color: s.color,
                distance: s.distance,
            });
        }
        let (mode, clamp) = (self.mode, self.clamp);
        let contributions = &self.contributions;
        let fresh: Vec<Option<Rgb>> = slots
            .par_iter()
            .map(|&slot| blend(&contributions[slot], mode, clamp).expect("validated contributions"))
            .collect();
        for (&slot, c) in slots.iter().zip(fresh) {
            self.blended[slot] = c;
        }
        self.updates += 1;
        Ok(())
    }

    /// RGBA image; texels without any contribution are fully transparent.
    pub fn to_rgba_image(&self) -> RgbaImage {
        let mut img = RgbaImage::new(self.width, self.height);
        for (texel, c) in self.textured() {
            let (x, y) = (texel % self.width, texel / self.width);
            let q = quantize(&c);
            img.put_pixel(x, y, image::Rgba([q[0], q[1], q[2], 255]));
        }
        img
    }

    pub fn sidecar(&self) -> AtlasSidecar {
        AtlasSidecar {
            mode: self.mode,
            clamp: [self.clamp.lo, self.clamp.hi],
            iterations: self.updates,
            width: self.width,
            height: self.height,
            textured_texels: self.textured_count(),
        }
    }

    /// Binary dump of the contribution ledger, enough to resume a bake.
    pub fn write_state<W: Write>(&self, mut out: W) -> Result<(), AtlasError> {
        out.write_all(STATE_MAGIC)?;
        out.write_all(&self.width.to_le_bytes())?;
        out.write_all(&self.height.to_le_bytes())?;
        out.write_all(&(self.updates as u64).to_le_bytes())?;
        let count: usize = self.contributions.iter().map(Vec::len).sum();
        out.write_all(&(count as u64).to_le_bytes())?;
        for (slot, list) in self.contributions.iter().enumerate() {
            for c in list {
                out.write_all(&self.texels[slot].to_le_bytes())?;
                out.write_all(&(c.iteration as u64).to_le_bytes())?;
                for v in c.color.iter().chain(std::iter::once(&c.distance)) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Replay a ledger written by [`Self::write_state`] into an empty atlas
    /// built from the same texel map.
    pub fn read_state<R: Read>(&mut self, mut input: R) -> Result<(), AtlasError> {
        if self.contributions.iter().any(|c| !c.is_empty()) {
            return Err(AtlasError::State("atlas is not empty".into()));
        }
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(AtlasError::State("bad magic".into()));
        }
        let width = read_u32(&mut input)?;
        let height = read_u32(&mut input)?;
        if (width, height) != (self.width, self.height) {
            return Err(AtlasError::State(format!(
                "state is {width}x{height}, atlas is {}x{}",
                self.width, self.height
            )));
        }
        let updates = read_u64(&mut input)? as usize;
        let count = read_u64(&mut input)?;
        let mut touched = Vec::new();
        for _ in 0..count {
            let texel = read_u32(&mut input)?;
            let iteration = read_u64(&mut input)? as usize;
            let mut v = [0.0; 4];
            for x in &mut v {
                *x = f64::from_le_bytes(read_arr(&mut input)?);
            }
            let slot = self.slot(texel).ok_or(AtlasError::Unmapped(texel))?;
            let list = &mut self.contributions[slot];
            if list.last().is_some_and(|l| l.iteration >= iteration) {
                return Err(AtlasError::State(format!("texel {texel} out of order")));
            }
            list.push(Contribution {
                iteration,
                color: [v[0], v[1], v[2]],
                distance: v[3],
            });
            touched.push(slot);
        }
        touched.dedup();
        for slot in touched {
            self.blended[slot] = blend(&self.contributions[slot], self.mode, self.clamp)?;
        }
        self.updates = updates;
        Ok(())
    }
}

fn read_arr<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    read_arr(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_arr(r).map(u64::from_le_bytes)
}

pub fn quantize(c: &Rgb) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// JSON written next to the atlas PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasSidecar {
    pub mode: BlendMode,
    pub clamp: [f64; 2],
    pub iterations: usize,
    pub width: u32,
    pub height: u32,
    pub textured_texels: usize,
}

/// Bilinear sample of an 8-bit image at continuous pixel coordinates, pixel
/// centers at integers. Columns wrap around the panorama seam; rows clamp.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |xi: i64, yi: i64| -> Rgb {
        let px = img.get_pixel(xi.rem_euclid(w) as u32, yi.clamp(0, h - 1) as u32);
        px.0.map(|v| v as f64 / 255.0)
    };
    let (a, b) = (fetch(x0, y0), fetch(x0 + 1, y0));
    let (c, d) = (fetch(x0, y0 + 1), fetch(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] + (b[ch] - a[ch]) * fx;
        let bottom = c[ch] + (d[ch] - c[ch]) * fx;
        out[ch] = top + (bottom - top) * fy;
    }
    out
}

/// Texels whose surface point the frame's camera sees, with their colors in
/// the generated image and their horizontal distance to the camera.
///
/// A texel is visible when its projected depth matches the depth buffer at
/// the nearest pixel within `eps_vis` meters.
pub fn gather_contributions(
    generated: &RgbImage,
    frame: &PanoFrame,
    texel_map: &TexelMap,
    eps_vis: f64,
) -> Vec<TexelSample> {
    assert_eq!(
        (generated.width(), generated.height()),
        (frame.width, frame.height),
        "generated image must match the frame"
    );
    let vp = &frame.viewpoint;
    let (w, h) = (frame.width, frame.height);
    texel_map
        .entries()
        .par_iter()
        .filter_map(|e| {
            let proj = pano::project(vp, w, h, &e.point).ok()?;
            let px = (proj.x.round() as i64).rem_euclid(w as i64) as u32;
            let py = proj.y.round();
            if py < 0.0 || py >= h as f64 {
                return None;
            }
            let buffered = frame.depth_at(px, py as u32);
            if !((proj.depth - buffered).abs() < eps_vis) {
                return None;
            }
            let offset = e.point - vp.position;
            let distance = offset.x.hypot(offset.y).max(MIN_DISTANCE);
            Some(TexelSample {
                texel: e.texel,
                color: sample_bilinear(generated, proj.x, proj.y),
                distance,
            })
        })
        .collect()
}
