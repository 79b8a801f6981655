//! Frame manifests, images, splits and the synthetic scene generator.

use std::path::{Path, PathBuf};

use crate::bbox::BBox;

pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use image::{crop_local, thumbnail, RgbImage, LOCAL_CROP, THUMBNAIL};
pub use manifest::{
    image_path, load_manifest, parse_manifest, save_manifest, DatasetManifest, FrameRecord, ManifestStats, StpAnnotation,
    Uncertainty, MANIFEST_VERSION,
};
pub use split::{split, Split, SplitConfig};
pub use synth::{generate_synthetic, load_synth_meta, render_frame, Cue, SynthConfig, SynthCorpus, SynthFrameInfo, SynthStyle};

/// A frame record together with its decoded image.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    pub image: RgbImage,
}

/// Decodes the images of `frames`, resolving paths against `manifest_dir`.
pub fn load_frames(manifest_dir: &Path, frames: &[FrameRecord]) -> Result<Vec<LoadedFrame>, DatasetError> {
    frames
        .iter()
        .map(|f| {
            let image = RgbImage::load_png(image_path(manifest_dir, f))?;
            if image.width() != f.width as usize || image.height() != f.height as usize {
                return Err(DatasetError::Image(format!(
                    "{}: image is {}x{}, manifest says {}x{}",
                    f.frame_id,
                    image.width(),
                    image.height(),
                    f.width,
                    f.height
                )));
            }
            Ok(LoadedFrame { record: f.clone(), image })
        })
        .collect()
}

impl SynthCorpus {
    /// The corpus frames paired with their in-memory images.
    pub fn loaded(&self) -> Vec<LoadedFrame> {
        self.manifest.frames.iter().zip(&self.images).map(|(r, i)| LoadedFrame { record: r.clone(), image: i.clone() }).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("malformed manifest: {0}")]
    Parse(#[source] serde_json::Error),
    #[error("manifest violates {} invariant(s):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("image error: {0}")]
    Image(String),
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("box {0:?} lies outside the image")]
    OutOfBounds(BBox),
    #[error("split config has no train fraction for game(s): {0}")]
    MissingGame(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place doorways without overlap in frame {frame_index}")]
    PlacementFailed { frame_index: usize },
}
