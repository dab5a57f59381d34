//! Iterative projective texturing of untextured urban meshes.
//!
//! Cameras walk along street centerlines. At each stop the engine renders an
//! equirectangular panorama of the partially textured mesh, hands it to an
//! image translator, and back-projects the translated colors into a texture
//! atlas, blending views by their distance to each surface point.

pub mod atlas;
pub mod bvh;
pub mod demo;
pub mod metrics;
pub mod pano;
pub mod pipeline;
pub mod scene;
pub mod translator;
pub mod viewpath;

pub use atlas::{BlendMode, TextureAtlas, WeightClamp};
pub use pipeline::{run_ablation, run_pipeline, MetricsReport, PipelineConfig};
pub use scene::{load_mesh, load_streets, Mesh, StreetGraph, TexelMap};
pub use translator::{Translator, TranslatorSpec};
pub use viewpath::{sample_viewpoints, Viewpoint};
