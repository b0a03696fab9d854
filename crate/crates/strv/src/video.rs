//! Video decoding abstraction.
//!
//! A "video" is anything that can report an fps and yield RGB frames by
//! index. The shipped reader decodes frame-sequence directories (a
//! `meta.json` plus numbered PNG files), which is what the synthetic
//! corpus generator writes; codec-backed readers can implement the same
//! trait without touching the pipeline.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub trait VideoSource {
    /// Source frame rate in frames per second.
    fn fps(&self) -> f64;
    /// Number of decodable frames.
    fn frame_count(&self) -> usize;
    /// Decode one frame.
    fn frame(&self, index: usize) -> Result<RgbImage>;

    /// Duration in seconds.
    fn duration_s(&self) -> f64 {
        self.frame_count() as f64 / self.fps()
    }
}

/// `meta.json` sidecar of a frame-sequence directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDirMeta {
    pub fps: f64,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
}

/// A directory of numbered PNG frames (`f0000.png`, `f0001.png`, ...)
/// described by a `meta.json`.
#[derive(Debug)]
pub struct FrameDirVideo {
    dir: PathBuf,
    meta: FrameDirMeta,
}

impl FrameDirVideo {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(Error::Input(format!(
                "not a decodable video: {} (no meta.json)",
                dir.display()
            )));
        }
        let meta: FrameDirMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::Input(format!("bad meta.json in {}: {e}", dir.display())))?;
        if meta.fps <= 0.0 {
            return Err(Error::Input(format!(
                "bad meta.json in {}: fps must be positive",
                dir.display()
            )));
        }
        if meta.frames == 0 {
            return Err(Error::EmptyVideo(dir.display().to_string()));
        }
        Ok(FrameDirVideo {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("f{index:04}.png"))
    }
}

impl VideoSource for FrameDirVideo {
    fn fps(&self) -> f64 {
        self.meta.fps
    }

    fn frame_count(&self) -> usize {
        self.meta.frames
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        let path = self.frame_path(index);
        let img = image::open(&path)
            .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?;
        Ok(img.to_rgb8())
    }
}

/// Open a video at `path`. Currently dispatches on frame-sequence
/// directories only; anything else is undecodable input.
pub fn open_video(path: &Path) -> Result<Box<dyn VideoSource + Send + Sync>> {
    if path.is_dir() {
        Ok(Box::new(FrameDirVideo::open(path)?))
    } else {
        Err(Error::Input(format!(
            "not a decodable video: {} (expected a frame-sequence directory)",
            path.display()
        )))
    }
}
