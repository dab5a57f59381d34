//! The render → translate → propagate loop, its configuration, exports and
//! the blend-mode ablation harness.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{self, AtlasError, BlendMode, TextureAtlas, WeightClamp};
use crate::metrics::{self, CropSpec, FeatureExtractor, FeatureSet, MetricsError};
use crate::pano::{self, RenderScene, Shading};
use crate::scene::{build_texel_map, Mesh, StreetGraph, TexelMap};
use crate::translator::{self, InputMode, TranslateError, TranslationFailure, Translator, TranslatorSpec};
use crate::viewpath::{sample_viewpoints, Viewpoint};

pub const ATLAS_PNG: &str = "atlas.png";
pub const ATLAS_JSON: &str = "atlas.json";
pub const ATLAS_STATE: &str = "atlas_state.bin";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Translation(#[from] TranslationFailure),
    #[error(transparent)]
    Translator(#[from] TranslateError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> PipelineError + '_ {
    move |source| PipelineError::Image { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pano_width: u32,
    pub pano_height: u32,
    pub spacing_m: f64,
    pub height_m: f64,
    pub atlas_size: u32,
    pub texels_per_m: f64,
    pub blend_mode: BlendMode,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub eps_vis_m: f64,
    pub translator: TranslatorSpec,
    pub sun_dir: [f64; 3],
    pub ambient: f64,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    /// Packing of the translator input.
    pub input_mode: InputMode,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let shading = Shading::default();
        Self {
            pano_width: 512,
            pano_height: 256,
            spacing_m: 5.0,
            height_m: 2.5,
            atlas_size: 2048,
            texels_per_m: 32.0,
            blend_mode: BlendMode::Weighted,
            clamp_lo: 0.3,
            clamp_hi: 0.7,
            eps_vis_m: 0.05,
            translator: TranslatorSpec::Identity,
            sun_dir: shading.sun_dir,
            ambient: shading.ambient,
            output_dir: None,
            seed: 0,
            input_mode: InputMode::Merged,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.pano_width == 0 || self.pano_height == 0 {
            return bad(format!("panorama size {}x{}", self.pano_width, self.pano_height));
        }
        if self.atlas_size == 0 {
            return bad("atlas_size must be positive".into());
        }
        for (name, v) in [
            ("spacing_m", self.spacing_m),
            ("height_m", self.height_m),
            ("texels_per_m", self.texels_per_m),
            ("eps_vis_m", self.eps_vis_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        WeightClamp::new(self.clamp_lo, self.clamp_hi).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.ambient) {
            return bad(format!("ambient must be in [0, 1], got {}", self.ambient));
        }
        let sun = self.sun_dir;
        if sun.iter().any(|v| !v.is_finite()) || sun.iter().all(|&v| v == 0.0) {
            return bad(format!("sun_dir {sun:?} is not a direction"));
        }
        Ok(())
    }

    pub fn clamp(&self) -> WeightClamp {
        WeightClamp { lo: self.clamp_lo, hi: self.clamp_hi }
    }

    pub fn shading(&self) -> Shading {
        Shading { sun_dir: self.sun_dir, ambient: self.ambient }
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean absolute difference between translator output and input over
    /// already-textured pixels, one entry per iteration.
    pub consistency_per_iteration: Vec<f64>,
    pub fid: Option<f64>,
    pub crop_fid: Option<f64>,
    pub seam: f64,
    /// Fraction of the texels seen by each view that earlier views had
    /// already textured.
    #[serde(default)]
    pub overlap_per_iteration: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_iteration: Option<usize>,
}

/// Real-image features for FID. Generated panoramas are described with the
/// builtin extractor, so these must come from it as well.
#[derive(Debug, Clone)]
pub struct Reference {
    pub full: FeatureSet,
    pub crop: Option<FeatureSet>,
    pub crop_spec: CropSpec,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip viewpoints before this iteration and restore the atlas saved in
    /// the output directory by an earlier run.
    pub start_iteration: usize,
    pub reference: Option<Reference>,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub atlas: TextureAtlas,
    pub report: MetricsReport,
    /// Translator outputs, in iteration order.
    pub generated: Vec<RgbImage>,
}

/// Run the full loop with the translator named in the config.
pub fn run_pipeline(
    mesh: &Mesh,
    streets: &StreetGraph,
    config: &PipelineConfig,
) -> Result<(TextureAtlas, MetricsReport), PipelineError> {
    config.validate()?;
    let mut translator = config.translator.build()?;
    let out = run_pipeline_with(mesh, streets, config, &mut translator, &RunOptions::default())?;
    Ok((out.atlas, out.report))
}

pub fn run_pipeline_with(
    mesh: &Mesh,
    streets: &StreetGraph,
    config: &PipelineConfig,
    translator: &mut dyn Translator,
    options: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let pool = config.thread_pool()?;
    pool.install(|| {
        let texel_map = build_texel_map(mesh, config.atlas_size, config.atlas_size);
        let viewpoints = sample_viewpoints(streets, config.spacing_m, config.height_m);
        bake(mesh, &texel_map, &viewpoints, config, translator, options)
    })
}

fn bake(
    mesh: &Mesh,
    texel_map: &TexelMap,
    viewpoints: &[Viewpoint],
    config: &PipelineConfig,
    translator: &mut dyn Translator,
    options: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut atlas = TextureAtlas::new(texel_map, config.blend_mode, config.clamp());
    let mut report = MetricsReport::default();
    if options.start_iteration > 0 {
        resume(out_dir, options.start_iteration, &mut atlas, &mut report)?;
    }
    info!(
        "{} viewpoints, {} mapped texels, starting at iteration {}",
        viewpoints.len(),
        texel_map.len(),
        options.start_iteration
    );

    let scene = RenderScene::new(mesh);
    let shading = config.shading();
    let mut generated = Vec::new();
    for vp in viewpoints.iter().filter(|v| v.iteration >= options.start_iteration) {
        let started = Instant::now();
        let frame = pano::render_partial(&scene, texel_map, &atlas, vp, config.pano_width, config.pano_height, &shading);
        if let Some(dir) = out_dir {
            frame.save(dir).map_err(image_err(dir))?;
        }
        let out = match translator::translate(translator, &frame, config.input_mode) {
            Ok(img) => img,
            Err(failure) => {
                warn!("{failure}; saving partial atlas");
                report.failed_iteration = Some(vp.iteration);
                report.seam = metrics::seam_metric(&atlas);
                if let Some(dir) = out_dir {
                    export(dir, &atlas, &report)?;
                }
                return Err(failure.into());
            }
        };
        if let Some(dir) = out_dir {
            let path = dir.join(format!("gen_{:05}.png", vp.iteration));
            out.save(&path).map_err(image_err(&path))?;
        }
        let input = frame.to_rgb8();
        let consistency = metrics::interframe_consistency(
            &metrics::to_unit_float(&out),
            &metrics::to_unit_float(&input),
            &frame.mask,
        )?;
        let samples = atlas::gather_contributions(&out, &frame, texel_map, config.eps_vis_m);
        let seen_before = samples.iter().filter(|s| atlas.color(s.texel).is_some()).count();
        let overlap = if samples.is_empty() { 0.0 } else { seen_before as f64 / samples.len() as f64 };
        atlas.update(&samples, vp.iteration)?;
        report.consistency_per_iteration.push(consistency);
        report.overlap_per_iteration.push(overlap);
        generated.push(out);
        info!(
            "iteration {}: {} texels ({:.1}% seen before), consistency {:.3e}, {:.2}s",
            vp.iteration,
            samples.len(),
            100.0 * overlap,
            consistency,
            started.elapsed().as_secs_f64()
        );
    }

    report.seam = metrics::seam_metric(&atlas);
    if let Some(reference) = &options.reference {
        let (fid, crop_fid) = score(&generated, reference)?;
        report.fid = fid;
        report.crop_fid = crop_fid;
    }
    if let Some(dir) = out_dir {
        export(dir, &atlas, &report)?;
    }
    Ok(PipelineOutput { atlas, report, generated })
}

fn resume(
    out_dir: Option<&Path>,
    start: usize,
    atlas: &mut TextureAtlas,
    report: &mut MetricsReport,
) -> Result<(), PipelineError> {
    let dir = out_dir.ok_or_else(|| PipelineError::Resume("resuming needs an output directory".into()))?;
    let path = dir.join(ATLAS_STATE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    atlas.read_state(BufReader::new(file))?;
    if atlas.update_count() != start {
        return Err(PipelineError::Resume(format!(
            "saved atlas holds {} iterations, cannot start at {start}",
            atlas.update_count()
        )));
    }
    // Keep the per-iteration curves of the earlier run.
    let report_path = dir.join(REPORT_JSON);
    if let Ok(text) = fs::read_to_string(&report_path) {
        if let Ok(prev) = serde_json::from_str::<MetricsReport>(&text) {
            report.consistency_per_iteration = prev.consistency_per_iteration.into_iter().take(start).collect();
            report.overlap_per_iteration = prev.overlap_per_iteration.into_iter().take(start).collect();
        }
    }
    Ok(())
}

fn score(generated: &[RgbImage], reference: &Reference) -> Result<(Option<f64>, Option<f64>), PipelineError> {
    if generated.len() < 2 {
        warn!("FID needs at least 2 generated panoramas, got {}", generated.len());
        return Ok((None, None));
    }
    let full = metrics::extract_features(generated, &FeatureExtractor::Builtin)?;
    let fid = metrics::frechet_distance(&reference.full, &full)?;
    let crop_fid = match &reference.crop {
        Some(real) => {
            let crops: Vec<RgbImage> = generated
                .iter()
                .map(|g| metrics::crop_facades(g, reference.crop_spec))
                .collect::<Result<_, _>>()?;
            let feats = metrics::extract_features(&crops, &FeatureExtractor::Builtin)?;
            Some(metrics::frechet_distance(real, &feats)?)
        }
        None => None,
    };
    Ok((Some(fid), crop_fid))
}

/// Write atlas PNG, sidecar JSON, resumable state and report into `dir`.
pub fn export(dir: &Path, atlas: &TextureAtlas, report: &MetricsReport) -> Result<(), PipelineError> {
    let png = dir.join(ATLAS_PNG);
    atlas.to_rgba_image().save(&png).map_err(image_err(&png))?;
    write_json(&dir.join(ATLAS_JSON), &atlas.sidecar())?;
    let state = dir.join(ATLAS_STATE);
    let file = fs::File::create(&state).map_err(io_err(&state))?;
    atlas.write_state(BufWriter::new(file))?;
    write_json(&dir.join(REPORT_JSON), report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: BlendMode,
    pub seam: f64,
    pub fid: Option<f64>,
    pub crop_fid: Option<f64>,
    pub consistency_per_iteration: Vec<f64>,
    pub textured_texels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub viewpoints: usize,
    pub input_mode: InputMode,
    pub modes: Vec<ModeReport>,
}

impl AblationReport {
    pub fn mode(&self, mode: BlendMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Bake the scene once per blend mode, each with a fresh translator from
/// `make_translator`. With an output directory, each mode writes into a
/// subdirectory named after it and the comparison goes to `ablation.json`.
pub fn run_ablation(
    mesh: &Mesh,
    streets: &StreetGraph,
    base: &PipelineConfig,
    reference: Option<&Reference>,
    mut make_translator: impl FnMut() -> Result<Box<dyn Translator>, TranslateError> + Send,
) -> Result<(AblationReport, Vec<TextureAtlas>), PipelineError> {
    base.validate()?;
    let pool = base.thread_pool()?;
    pool.install(|| {
        let texel_map = build_texel_map(mesh, base.atlas_size, base.atlas_size);
        let viewpoints = sample_viewpoints(streets, base.spacing_m, base.height_m);
        let options = RunOptions { start_iteration: 0, reference: reference.cloned() };
        let mut modes = Vec::new();
        let mut atlases = Vec::new();
        for mode in BlendMode::ALL {
            let mut cfg = base.clone();
            cfg.blend_mode = mode;
            cfg.output_dir = base.output_dir.as_ref().map(|d| d.join(mode.as_str()));
            let mut translator = make_translator()?;
            let out = bake(mesh, &texel_map, &viewpoints, &cfg, &mut translator, &options)?;
            info!("{mode}: seam {:.4}", out.report.seam);
            modes.push(ModeReport {
                mode,
                seam: out.report.seam,
                fid: out.report.fid,
                crop_fid: out.report.crop_fid,
                consistency_per_iteration: out.report.consistency_per_iteration,
                textured_texels: out.atlas.textured_count(),
            });
            atlases.push(out.atlas);
        }
        let report = AblationReport { viewpoints: viewpoints.len(), input_mode: base.input_mode, modes };
        if let Some(dir) = &base.output_dir {
            write_json(&dir.join("ablation.json"), &report)?;
        }
        Ok((report, atlases))
    })
}
