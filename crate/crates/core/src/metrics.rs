//! Evaluation: inter-frame consistency, Fréchet distance over pluggable
//! image features, facade crops, and the atlas seam diagnostic.

use std::path::{Path, PathBuf};

use image::{Rgb32FImage, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::atlas::TextureAtlas;

/// Slack for slightly negative eigenvalues of the covariance product, relative
/// to its largest eigenvalue (and absolute below 1).
pub const EIGEN_NEG_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("covariance product has eigenvalue {0}, not positive semidefinite")]
    Indefinite(f64),
    #[error("invalid crop band [{top}, {bottom})")]
    CropSpec { top: f64, bottom: f64 },
    #[error("crop is empty")]
    EmptyCrop,
    #[error("feature file {path}: {msg}")]
    FeatureFile { path: PathBuf, msg: String },
}

/// 8-bit image as floats in `[0, 1]`.
pub fn to_unit_float(img: &RgbImage) -> Rgb32FImage {
    Rgb32FImage::from_fn(img.width(), img.height(), |x, y| {
        image::Rgb(img.get_pixel(x, y).0.map(|v| v as f32 / 255.0))
    })
}

/// Mean absolute difference between `generated` and `partial` over masked
/// pixels and all channels. An empty mask gives 0.
pub fn interframe_consistency(
    generated: &Rgb32FImage,
    partial: &Rgb32FImage,
    mask: &[u8],
) -> Result<f64, MetricsError> {
    let dims = generated.dimensions();
    if partial.dimensions() != dims || mask.len() != (dims.0 * dims.1) as usize {
        return Err(MetricsError::Dimension(format!(
            "generated {:?}, partial {:?}, mask {}",
            dims,
            partial.dimensions(),
            mask.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((g, p), &m) in generated.pixels().zip(partial.pixels()).zip(mask) {
        if m != 0 {
            for ch in 0..3 {
                total += (g.0[ch] as f64 - p.0[ch] as f64).abs();
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `n x dim` feature matrix, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    vectors: DMatrix<f64>,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(MetricsError::Dimension(format!("row of length {} in {dim}-d set", r.len())));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self {
            vectors: DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]),
        })
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().copied().collect()
    }

    /// Sample mean and unbiased covariance, summed in row order.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.n(), self.dim());
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mean[j] += self.vectors[(i, j)];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                let da = self.vectors[(i, a)] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (self.vectors[(i, b)] - mean[b]);
                }
            }
        }
        let denom = (n - 1).max(1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        (mean, cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The trace of the cross term is taken from the eigenvalues of the
/// symmetric matrix `Σa^½ Σb Σa^½`, which has the same spectrum as `Σa Σb`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    for s in [a, b] {
        if s.n() < 2 {
            return Err(MetricsError::TooFewSamples(s.n()));
        }
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = psd_sqrt(&cov_a);
    let product = &root_a * &cov_b * &root_a;
    let product = (&product + product.transpose()) * 0.5;
    let eig = SymmetricEigen::new(product).eigenvalues;
    let largest = eig.iter().copied().fold(0.0f64, f64::max);
    let mut trace_root = 0.0;
    for &l in eig.iter() {
        if l < -EIGEN_NEG_TOL * largest.max(1.0) {
            return Err(MetricsError::Indefinite(l));
        }
        trace_root += l.max(0.0).sqrt();
    }
    let diff = mu_a - mu_b;
    let fid = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_root;
    Ok(fid.max(0.0))
}

/// Source of per-image feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    /// Average-pool to an 8x4 grayscale grid and flatten (32 values).
    Builtin,
    /// Precomputed features, one whitespace-separated row per image.
    File(PathBuf),
}

pub const BUILTIN_GRID: (u32, u32) = (8, 4);

/// Builtin 32-d descriptor: mean gray level `(r+g+b)/3` of each cell of an
/// 8-column by 4-row grid, row-major, in `[0, 1]`.
pub fn builtin_features(img: &RgbImage) -> Result<Vec<f64>, MetricsError> {
    let (w, h) = img.dimensions();
    let (gx, gy) = BUILTIN_GRID;
    if w < gx || h < gy {
        return Err(MetricsError::Dimension(format!("{w}x{h} image is smaller than the {gx}x{gy} grid")));
    }
    let mut out = Vec::with_capacity((gx * gy) as usize);
    for by in 0..gy {
        let (y0, y1) = (by * h / gy, (by + 1) * h / gy);
        for bx in 0..gx {
            let (x0, x1) = (bx * w / gx, (bx + 1) * w / gx);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x, y).0;
                    sum += p[0] as u64 + p[1] as u64 + p[2] as u64;
                }
            }
            let cells = ((x1 - x0) * (y1 - y0)) as f64;
            out.push(sum as f64 / (3.0 * 255.0 * cells));
        }
    }
    Ok(out)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>, MetricsError> {
    let err = |msg: String| MetricsError::FeatureFile { path: path.to_path_buf(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("line {}: bad number `{t}`", i + 1))))
                .collect()
        })
        .collect()
}

pub fn write_feature_file(path: &Path, features: &FeatureSet) -> std::io::Result<()> {
    let mut text = String::new();
    for i in 0..features.n() {
        let row: Vec<String> = features.row(i).iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn extract_features(images: &[RgbImage], extractor: &FeatureExtractor) -> Result<FeatureSet, MetricsError> {
    match extractor {
        FeatureExtractor::Builtin => {
            let rows: Vec<Vec<f64>> = images.par_iter().map(builtin_features).collect::<Result<_, _>>()?;
            FeatureSet::from_rows(&rows)
        }
        FeatureExtractor::File(path) => {
            let rows = read_feature_file(path)?;
            if rows.len() != images.len() {
                return Err(MetricsError::FeatureFile {
                    path: path.clone(),
                    msg: format!("{} rows for {} images", rows.len(), images.len()),
                });
            }
            FeatureSet::from_rows(&rows)
        }
    }
}

/// Latitude band kept by [`crop_facades`], as fractions of image height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub top: f64,
    pub bottom: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { top: 0.25, bottom: 0.625 }
    }
}

impl CropSpec {
    pub fn new(top: f64, bottom: f64) -> Result<Self, MetricsError> {
        if !(0.0..1.0).contains(&top) || !(top < bottom && bottom <= 1.0) {
            return Err(MetricsError::CropSpec { top, bottom });
        }
        Ok(Self { top, bottom })
    }
}

/// Rows `[⌊H·top⌋, ⌊H·bottom⌋)` of the panorama, all columns.
pub fn crop_facades(pano: &RgbImage, spec: CropSpec) -> Result<RgbImage, MetricsError> {
    let spec = CropSpec::new(spec.top, spec.bottom)?;
    let (w, h) = pano.dimensions();
    let r0 = (h as f64 * spec.top).floor() as u32;
    let r1 = ((h as f64 * spec.bottom).floor() as u32).min(h);
    if r1 <= r0 || w == 0 {
        return Err(MetricsError::EmptyCrop);
    }
    Ok(image::imageops::crop_imm(pano, 0, r0, w, r1 - r0).to_image())
}

/// Largest L∞ color jump between 4-adjacent textured texels of the same UV
/// island. Zero when no such pair exists.
pub fn seam_metric(atlas: &TextureAtlas) -> f64 {
    let w = atlas.width();
    let h = atlas.height();
    let mut worst = 0.0f64;
    for (texel, c) in atlas.textured() {
        let (x, y) = (texel % w, texel / w);
        let island = atlas.island(texel);
        let neighbors = [(x + 1 < w).then(|| texel + 1), (y + 1 < h).then(|| texel + w)];
        for n in neighbors.into_iter().flatten() {
            if atlas.island(n) != island {
                continue;
            }
            if let Some(o) = atlas.color(n) {
                let jump = (0..3).map(|k| (c[k] - o[k]).abs()).fold(0.0, f64::max);
                worst = worst.max(jump);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{BlendMode, TexelSample, WeightClamp};
    use crate::scene::{build_texel_map, load_mesh};
    use proptest::prelude::*;

    fn float_img(w: u32, h: u32, data: &[f32]) -> Rgb32FImage {
        Rgb32FImage::from_raw(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn consistency_of_identical_images_is_zero() {
        let img = to_unit_float(&RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9])));
        assert_eq!(interframe_consistency(&img, &img, &[1; 12]).unwrap(), 0.0);
        assert_eq!(interframe_consistency(&img, &img, &[0; 12]).unwrap(), 0.0);
    }

    #[test]
    fn consistency_with_empty_mask_is_zero() {
        let a = float_img(2, 2, &[0.0; 12]);
        let b = float_img(2, 2, &[1.0; 12]);
        assert_eq!(interframe_consistency(&a, &b, &[0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn consistency_hand_case() {
        // Masked pixel differs by 0.3 in every channel; the unmasked one is ignored.
        let a = float_img(2, 1, &[0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
        let b = float_img(2, 1, &[0.2, 0.8, 0.2, 1.0, 1.0, 1.0]);
        let got = interframe_consistency(&a, &b, &[1, 0]).unwrap();
        assert!((got - 0.3).abs() < 1e-6, "{got}");
        assert!(interframe_consistency(&a, &b, &[1]).is_err());
        assert!(interframe_consistency(&a, &float_img(1, 1, &[0.0; 3]), &[1, 0]).is_err());
    }

    fn rows(data: &[&[f64]]) -> FeatureSet {
        FeatureSet::from_rows(&data.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let s = rows(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 2.0], &[3.0, 0.5, 0.5], &[1.0, 1.0, 1.0]]);
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fid_mean_shift_only() {
        let a = rows(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.0]]);
        let b = rows(&[&[3.0, 4.0], &[4.0, 5.0], &[5.0, 4.0]]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn fid_errors() {
        let a = rows(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let b = rows(&[&[0.0], &[1.0]]);
        assert!(matches!(frechet_distance(&a, &b), Err(MetricsError::Dimension(_))));
        let one = rows(&[&[0.0, 0.0]]);
        assert!(matches!(frechet_distance(&a, &one), Err(MetricsError::TooFewSamples(1))));
        assert!(FeatureSet::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(FeatureSet::from_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn builtin_constant_gray() {
        let img = RgbImage::from_pixel(64, 32, image::Rgb([128, 128, 128]));
        let f = builtin_features(&img).unwrap();
        assert_eq!(f.len(), 32);
        assert!(f.iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn builtin_checkerboard_block_mean() {
        // 512x256 checkerboard of 48-pixel squares; cells are 64x64.
        let img = RgbImage::from_fn(512, 256, |x, y| {
            if (x / 48 + y / 48) % 2 == 0 { image::Rgb([255, 255, 255]) } else { image::Rgb([0, 0, 0]) }
        });
        let f = builtin_features(&img).unwrap();
        // Cell (0,0): x,y in [0,64). White where (x/48 + y/48) even:
        // [0,48)^2 -> 2304 white, [48,64)^2 -> 256 white; total 2560 of 4096.
        assert!((f[0] - 2560.0 / 4096.0).abs() < 1e-12, "{}", f[0]);
        let twins = extract_features(&[img.clone(), img], &FeatureExtractor::Builtin).unwrap();
        assert_eq!(twins.row(0), twins.row(1));
    }

    #[test]
    fn feature_file_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        std::fs::write(&path, "1 2 3\n4 5 6\n").unwrap();
        let imgs = vec![RgbImage::new(8, 4); 3];
        assert!(matches!(
            extract_features(&imgs, &FeatureExtractor::File(path.clone())),
            Err(MetricsError::FeatureFile { .. })
        ));
        let set = extract_features(&imgs[..2], &FeatureExtractor::File(path.clone())).unwrap();
        assert_eq!((set.n(), set.dim()), (2, 3));
        write_feature_file(&path, &set).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    }

    #[test]
    fn crop_default_band() {
        let img = RgbImage::from_fn(512, 256, |_, y| image::Rgb([y as u8, 0, 0]));
        let c = crop_facades(&img, CropSpec::default()).unwrap();
        assert_eq!(c.dimensions(), (512, 96));
        assert_eq!(c.get_pixel(0, 0).0[0], 64);
        assert_eq!(c.get_pixel(0, 95).0[0], 159);
        assert_eq!(crop_facades(&img, CropSpec { top: 0.0, bottom: 1.0 }).unwrap(), img);
        assert!(crop_facades(&img, CropSpec { top: 0.5, bottom: 0.5 }).is_err());
        assert!(matches!(
            crop_facades(&img, CropSpec { top: 0.5, bottom: 0.501 }),
            Err(MetricsError::EmptyCrop)
        ));
    }

    fn strip(colors: &[[f64; 3]]) -> TextureAtlas {
        let mesh = load_mesh(
            b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n",
        )
        .unwrap();
        let map = build_texel_map(&mesh, colors.len() as u32, 1);
        let mut atlas = TextureAtlas::new(&map, BlendMode::Weighted, WeightClamp::default());
        let samples: Vec<TexelSample> = colors
            .iter()
            .enumerate()
            .map(|(i, c)| TexelSample { texel: i as u32, color: *c, distance: 1.0 })
            .collect();
        atlas.update(&samples, 0).unwrap();
        atlas
    }

    #[test]
    fn seam_uniform_is_zero() {
        assert_eq!(seam_metric(&strip(&[[0.4, 0.5, 0.6]; 5])), 0.0);
    }

    #[test]
    fn seam_black_white_pair_is_one() {
        assert_eq!(seam_metric(&strip(&[[0.0; 3], [1.0; 3]])), 1.0);
    }

    fn gaussian_set(rng: &mut impl rand::Rng, n: usize, dim: usize) -> FeatureSet {
        use rand_distr::{Distribution, StandardNormal};
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        FeatureSet::from_rows(&rows).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fid_is_symmetric(seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_set(&mut rng, 20, 3);
            let b = gaussian_set(&mut rng, 15, 3);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        }

        #[test]
        fn consistency_is_a_pseudometric(
            a in prop::collection::vec(any::<u8>(), 18),
            b in prop::collection::vec(any::<u8>(), 18),
            c in prop::collection::vec(any::<u8>(), 18),
            mask in prop::collection::vec(0u8..2, 6),
        ) {
            let img = |v: &Vec<u8>| to_unit_float(&RgbImage::from_raw(3, 2, v.clone()).unwrap());
            let (a, b, c) = (img(&a), img(&b), img(&c));
            let ab = interframe_consistency(&a, &b, &mask).unwrap();
            let ba = interframe_consistency(&b, &a, &mask).unwrap();
            let ac = interframe_consistency(&a, &c, &mask).unwrap();
            let cb = interframe_consistency(&c, &b, &mask).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
