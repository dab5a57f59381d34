use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use put_core::atlas::BlendMode;
use put_core::metrics::{self, CropSpec, FeatureExtractor, FeatureSet};
use put_core::pipeline::{self, PipelineConfig, Reference, RunOptions};
use put_core::scene::{load_mesh, load_streets, Mesh, StreetGraph};
use put_core::translator::{self, InputMode, TintStub, Translator, TranslatorRequest, TranslatorSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "put", version, about = "Panoramic projective texturing of untextured urban meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Texture a mesh along its streets.
    Bake(BakeArgs),
    /// Bake once per blend mode and compare.
    Ablate(BakeArgs),
    /// Fréchet distance between two feature files.
    Eval(EvalArgs),
    /// Write builtin features of every PNG in a directory.
    Features(FeaturesArgs),
    /// Write the synthetic two-street scene.
    BakeDemo(DemoArgs),
    /// Answer translator requests on stdin/stdout.
    Serve(ServeArgs),
}

#[derive(Args)]
struct BakeArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    streets: PathBuf,
    /// JSON config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// identity, stub, or exec:<command>
    #[arg(long)]
    translator: Option<TranslatorSpec>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    blend_mode: Option<BlendMode>,
    #[arg(long)]
    atlas_size: Option<u32>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    eps_vis: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Pack gray rendering and texture as separate planes.
    #[arg(long)]
    four_channel: bool,
    /// Resume a bake whose atlas state is in the output directory.
    #[arg(long, default_value_t = 0)]
    start_iteration: usize,
    /// Builtin features of real panoramas, for FID.
    #[arg(long)]
    real_feats: Option<PathBuf>,
    /// Builtin features of cropped real panoramas, for crop FID.
    #[arg(long)]
    real_crop_feats: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    real_feats: PathBuf,
    #[arg(long)]
    gen_feats: PathBuf,
    #[arg(long, requires = "gen_crop_feats")]
    real_crop_feats: Option<PathBuf>,
    #[arg(long, requires = "real_crop_feats")]
    gen_crop_feats: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Describe only the facade band of each panorama.
    #[arg(long)]
    crop: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    atlas_size: u32,
    #[arg(long, default_value_t = 32.0)]
    texels_per_m: f64,
}

#[derive(Args)]
struct ServeArgs {
    /// identity or stub
    #[arg(long, default_value = "identity")]
    translator: TranslatorSpec,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bake(args) => bake(&args),
        Command::Ablate(args) => ablate(&args),
        Command::Eval(args) => eval(&args),
        Command::Features(args) => features(&args),
        Command::BakeDemo(args) => bake_demo(&args),
        Command::Serve(args) => serve(&args),
    }
}

fn load_inputs(args: &BakeArgs) -> Result<(Mesh, StreetGraph, PipelineConfig)> {
    let mesh_bytes = fs::read(&args.mesh).with_context(|| format!("reading {}", args.mesh.display()))?;
    let mesh = load_mesh(&mesh_bytes).with_context(|| format!("loading {}", args.mesh.display()))?;
    let street_bytes = fs::read(&args.streets).with_context(|| format!("reading {}", args.streets.display()))?;
    let streets = load_streets(&street_bytes).with_context(|| format!("loading {}", args.streets.display()))?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(t) = &args.translator {
        cfg.translator = t.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(m) = args.blend_mode {
        cfg.blend_mode = m;
    }
    if let Some(s) = args.atlas_size {
        cfg.atlas_size = s;
    }
    if let Some(s) = args.spacing {
        cfg.spacing_m = s;
    }
    if let Some(e) = args.eps_vis {
        cfg.eps_vis_m = e;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if args.four_channel {
        cfg.input_mode = InputMode::FourChannel;
    }
    cfg.validate()?;
    Ok((mesh, streets, cfg))
}

fn read_features(path: &Path) -> Result<FeatureSet> {
    let rows = metrics::read_feature_file(path)?;
    FeatureSet::from_rows(&rows).with_context(|| path.display().to_string())
}

fn reference(args: &BakeArgs) -> Result<Option<Reference>> {
    let Some(full) = &args.real_feats else {
        if args.real_crop_feats.is_some() {
            bail!("--real-crop-feats needs --real-feats");
        }
        return Ok(None);
    };
    Ok(Some(Reference {
        full: read_features(full)?,
        crop: args.real_crop_feats.as_deref().map(read_features).transpose()?,
        crop_spec: CropSpec::default(),
    }))
}

fn bake(args: &BakeArgs) -> Result<()> {
    let (mesh, streets, cfg) = load_inputs(args)?;
    let mut translator: Box<dyn Translator> = match cfg.translator {
        TranslatorSpec::Stub => Box::new(TintStub::after(args.start_iteration)),
        ref spec => spec.build()?,
    };
    let options = RunOptions { start_iteration: args.start_iteration, reference: reference(args)? };
    let out = pipeline::run_pipeline_with(&mesh, &streets, &cfg, &mut translator, &options)?;
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    Ok(())
}

fn ablate(args: &BakeArgs) -> Result<()> {
    let (mesh, streets, cfg) = load_inputs(args)?;
    let reference = reference(args)?;
    let spec = cfg.translator.clone();
    let (report, _) = pipeline::run_ablation(&mesh, &streets, &cfg, reference.as_ref(), || spec.build())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let fid = metrics::frechet_distance(&read_features(&args.real_feats)?, &read_features(&args.gen_feats)?)?;
    let crop_fid = match (&args.real_crop_feats, &args.gen_crop_feats) {
        (Some(r), Some(g)) => Some(metrics::frechet_distance(&read_features(r)?, &read_features(g)?)?),
        _ => None,
    };
    println!("{}", json!({ "fid": fid, "crop_fid": crop_fid }));
    Ok(())
}

fn features(args: &FeaturesArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.images)
        .with_context(|| format!("listing {}", args.images.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG images in {}", args.images.display());
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p).with_context(|| p.display().to_string())?.to_rgb8();
        images.push(if args.crop { metrics::crop_facades(&img, CropSpec::default())? } else { img });
    }
    let set = metrics::extract_features(&images, &FeatureExtractor::Builtin)?;
    metrics::write_feature_file(&args.out, &set).with_context(|| args.out.display().to_string())?;
    Ok(())
}

fn bake_demo(args: &DemoArgs) -> Result<()> {
    if args.atlas_size == 0 || !(args.texels_per_m > 0.0) {
        bail!("atlas size and texel density must be positive");
    }
    let scene = put_core::demo::demo_scene(args.seed, args.atlas_size, args.texels_per_m);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("mesh.obj"), scene.mesh.to_obj())?;
    fs::write(args.out.join("streets.json"), scene.streets.to_json())?;
    let cfg = PipelineConfig {
        atlas_size: args.atlas_size,
        texels_per_m: scene.texels_per_m,
        seed: args.seed,
        output_dir: Some(args.out.join("bake")),
        ..Default::default()
    };
    pipeline::write_json(&args.out.join("config.json"), &cfg)?;
    log::info!(
        "{} faces at {:.2} texels/m written to {}",
        scene.mesh.face_count(),
        scene.texels_per_m,
        args.out.display()
    );
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let mut translator = match &args.translator {
        TranslatorSpec::Exec(_) => bail!("serve only runs built-in translators"),
        spec => spec.build()?,
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    let served = translator::serve_protocol(stdin, stdout, |req: &TranslatorRequest| {
        translator.translate_request(req)
    })?;
    log::info!("served {served} requests");
    Ok(())
}
