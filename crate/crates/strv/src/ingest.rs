//! Frame sampling, backbone feature maps and multi-scale region features.
//!
//! A video becomes, per sampled frame, a spatial feature grid (default
//! 7x7x512) from which sliding windows of several scales are max-pooled
//! into regional feature vectors. With the default scales (3x3 stride 2,
//! 4x4 stride 3, 7x7 stride 1) each frame yields 9 + 4 + 1 = 14 regions.

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::bytes;
use crate::config::{BackboneConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::video::VideoSource;

/// Side of the model input after preprocessing.
pub const INPUT_SIZE: u32 = 224;
/// Smaller edge target before the center crop.
pub const RESIZE_SMALLER: u32 = 256;
/// Pixel patch size consumed per feature-grid cell by the mock backbones.
pub const PATCH: u32 = 32;
/// Feature grid side produced by the mock backbones.
pub const MOCK_GRID: usize = (INPUT_SIZE / PATCH) as usize;

const FEATURE_MAGIC: &[u8; 4] = b"STRF";
const FEATURE_VERSION: u16 = 1;

/// One preprocessed frame: 224x224 RGB plus its position in the sampled
/// sequence.
#[derive(Debug, Clone)]
pub struct FrameTensor {
    pub pixels: RgbImage,
    pub frame_index: u32,
    pub timestamp_s: f64,
}

/// Backbone activation grid for one frame, row-major `[y][x][channel]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_index: u32,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, frame_index: u32) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            frame_index,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(
        height: usize,
        width: usize,
        channels: usize,
        frame_index: u32,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), height * width * channels);
        FeatureMap {
            height,
            width,
            channels,
            frame_index,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One multi-scale frame region: its (frame, scale, position) coordinates
/// and the max-pooled feature vector. `scale_index` is 1-based.
#[derive(Debug, Clone)]
pub struct RegionNode {
    pub frame_index: u32,
    pub scale_index: u16,
    pub position_index: u16,
    pub feature: Vec<f64>,
}

/// Frame preprocessing parameters a backbone expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocessing {
    /// Smaller-edge resize target.
    pub resize_smaller: u32,
    /// Center-crop side length.
    pub crop: u32,
    /// Pixel scale convention: channel values divided by this.
    pub pixel_scale: u32,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing {
            resize_smaller: RESIZE_SMALLER,
            crop: INPUT_SIZE,
            pixel_scale: 255,
        }
    }
}

/// Static description of a backbone: what it expects and what it emits.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub name: String,
    pub output_channels: usize,
    pub output_grid: (usize, usize),
    pub preprocessing: Preprocessing,
}

/// A ready-to-run backbone. The mocks are deterministic functions of the
/// input bytes so the whole pipeline is testable without pretrained
/// weights.
#[derive(Debug)]
pub enum Backbone {
    /// Fixed seeded linear projection of each 32x32 patch, then ReLU.
    MockProj { channels: usize, projection: Vec<f64> },
    /// Per-channel mean of each 32x32 patch (identity over patch means).
    PatchMean,
}

impl Backbone {
    pub fn from_config(cfg: &BackboneConfig) -> Result<Self> {
        match cfg {
            BackboneConfig::MockProj { channels, seed } => {
                let c = *channels;
                if c == 0 {
                    return Err(Error::Config("backbone channels must be positive".into()));
                }
                let patch_dim = (PATCH * PATCH * 3) as usize;
                let bound = (6.0 / (patch_dim + c) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let projection: Vec<f64> = (0..patch_dim * c)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Ok(Backbone::MockProj {
                    channels: c,
                    projection,
                })
            }
            BackboneConfig::PatchMean => Ok(Backbone::PatchMean),
            BackboneConfig::Pretrained { name } => Err(Error::Config(format!(
                "backbone '{name}' has no weights available; use a mock backbone or supply weights"
            ))),
        }
    }

    pub fn spec(&self) -> BackboneSpec {
        match self {
            Backbone::MockProj { channels, .. } => BackboneSpec {
                name: format!("mockproj{channels}"),
                output_channels: *channels,
                output_grid: (MOCK_GRID, MOCK_GRID),
                preprocessing: Preprocessing::default(),
            },
            Backbone::PatchMean => BackboneSpec {
                name: "patchmean".into(),
                output_channels: 3,
                output_grid: (MOCK_GRID, MOCK_GRID),
                preprocessing: Preprocessing::default(),
            },
        }
    }
}

/// Resize so the smaller edge is [`RESIZE_SMALLER`], then center-crop to
/// [`INPUT_SIZE`] square.
pub fn preprocess_frame(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let resized = if w.min(h) == RESIZE_SMALLER {
        img.clone()
    } else {
        let scale = RESIZE_SMALLER as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(RESIZE_SMALLER);
        let nh = ((h as f64 * scale).round() as u32).max(RESIZE_SMALLER);
        imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
    };
    let (rw, rh) = resized.dimensions();
    let x = (rw - INPUT_SIZE) / 2;
    let y = (rh - INPUT_SIZE) / 2;
    imageops::crop_imm(&resized, x, y, INPUT_SIZE, INPUT_SIZE).to_image()
}

/// Sample frames at fixed `1/rate_hz` intervals, capping at `max_frames`
/// uniformly spaced picks. A video shorter than one interval still yields
/// one frame.
pub fn sample_frames(
    video: &dyn VideoSource,
    rate_hz: f64,
    max_frames: usize,
) -> Result<Vec<FrameTensor>> {
    if rate_hz <= 0.0 {
        return Err(Error::Config("rate_hz must be positive".into()));
    }
    if max_frames == 0 {
        return Err(Error::Config("max_frames must be at least 1".into()));
    }
    if video.frame_count() == 0 {
        return Err(Error::EmptyVideo("source reports zero frames".into()));
    }
    let duration = video.duration_s();
    let mut ticks: Vec<f64> = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 / rate_hz;
        if t >= duration {
            break;
        }
        ticks.push(t);
        k += 1;
        if ticks.len() > 4_000_000 {
            return Err(Error::Config("rate_hz yields an absurd frame count".into()));
        }
    }
    if ticks.is_empty() {
        ticks.push(0.0); // degenerate clip: always at least one frame
    }
    let selected: Vec<f64> = if ticks.len() > max_frames {
        if max_frames == 1 {
            vec![ticks[0]]
        } else {
            (0..max_frames)
                .map(|i| {
                    let pos =
                        (i as f64 * (ticks.len() - 1) as f64 / (max_frames - 1) as f64).round();
                    ticks[pos as usize]
                })
                .collect()
        }
    } else {
        ticks
    };

    let mut frames = Vec::with_capacity(selected.len());
    for (ordinal, &t) in selected.iter().enumerate() {
        let src = ((t * video.fps()).round() as usize).min(video.frame_count() - 1);
        let img = video.frame(src)?;
        frames.push(FrameTensor {
            pixels: preprocess_frame(&img),
            frame_index: ordinal as u32,
            timestamp_s: t,
        });
    }
    Ok(frames)
}

/// Run the backbone on one preprocessed frame.
pub fn extract_feature_map(frame: &FrameTensor, backbone: &Backbone) -> Result<FeatureMap> {
    let (w, h) = frame.pixels.dimensions();
    if w != INPUT_SIZE || h != INPUT_SIZE {
        return Err(Error::Contract(format!(
            "frame must be {INPUT_SIZE}x{INPUT_SIZE}, got {w}x{h}"
        )));
    }
    let grid = MOCK_GRID;
    match backbone {
        Backbone::MockProj {
            channels,
            projection,
        } => {
            let c = *channels;
            let patch_dim = (PATCH * PATCH * 3) as usize;
            let mut map = FeatureMap::new(grid, grid, c, frame.frame_index);
            let mut patch = vec![0.0f64; patch_dim];
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut i = 0;
                    for py in 0..PATCH {
                        for px in 0..PATCH {
                            let p = frame
                                .pixels
                                .get_pixel(gx as u32 * PATCH + px, gy as u32 * PATCH + py);
                            patch[i] = p.0[0] as f64 / 255.0;
                            patch[i + 1] = p.0[1] as f64 / 255.0;
                            patch[i + 2] = p.0[2] as f64 / 255.0;
                            i += 3;
                        }
                    }
                    let mut acc = vec![0.0f64; c];
                    for (d, &v) in patch.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &projection[d * c..(d + 1) * c];
                        for (a, &p) in acc.iter_mut().zip(row) {
                            *a += v * p;
                        }
                    }
                    for (ch, &a) in acc.iter().enumerate() {
                        *map.at_mut(gy, gx, ch) = a.max(0.0);
                    }
                }
            }
            Ok(map)
        }
        Backbone::PatchMean => {
            let mut map = FeatureMap::new(grid, grid, 3, frame.frame_index);
            let area = (PATCH * PATCH) as f64;
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut sums = [0.0f64; 3];
                    for py in 0..PATCH {
                        for px in 0..PATCH {
                            let p = frame
                                .pixels
                                .get_pixel(gx as u32 * PATCH + px, gy as u32 * PATCH + py);
                            for (s, &v) in sums.iter_mut().zip(&p.0) {
                                *s += v as f64 / 255.0;
                            }
                        }
                    }
                    for (ch, &s) in sums.iter().enumerate() {
                        *map.at_mut(gy, gx, ch) = s / area;
                    }
                }
            }
            Ok(map)
        }
    }
}

/// Number of window positions per axis for a (window, stride) scale.
pub fn positions_per_axis(extent: usize, window: usize, stride: usize) -> usize {
    (extent - window) / stride + 1
}

/// Slide each configured window over the grid and max-pool per channel.
///
/// Scale indices are 1-based in the order the scales are configured;
/// position indices are row-major over the window placements.
pub fn extract_regions(map: &FeatureMap, scales: &[(usize, usize)]) -> Result<Vec<RegionNode>> {
    for &(win, stride) in scales {
        if win > map.height || win > map.width {
            return Err(Error::Config(format!(
                "window {win} exceeds feature grid {}x{}",
                map.height, map.width
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
    }
    let mut regions = Vec::new();
    for (k0, &(win, stride)) in scales.iter().enumerate() {
        let npy = positions_per_axis(map.height, win, stride);
        let npx = positions_per_axis(map.width, win, stride);
        for py in 0..npy {
            for px in 0..npx {
                let y0 = py * stride;
                let x0 = px * stride;
                let mut feature = vec![f64::NEG_INFINITY; map.channels];
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        for (c, f) in feature.iter_mut().enumerate() {
                            let v = map.at(y, x, c);
                            if v > *f {
                                *f = v;
                            }
                        }
                    }
                }
                regions.push(RegionNode {
                    frame_index: map.frame_index,
                    scale_index: (k0 + 1) as u16,
                    position_index: (py * npx + px) as u16,
                    feature,
                });
            }
        }
    }
    Ok(regions)
}

/// Regions per frame for a grid and scale set.
pub fn regions_per_frame(grid: (usize, usize), scales: &[(usize, usize)]) -> usize {
    scales
        .iter()
        .map(|&(w, s)| positions_per_axis(grid.0, w, s) * positions_per_axis(grid.1, w, s))
        .sum()
}

/// Sample, preprocess and featurize a whole video.
pub fn extract_video(
    video: &dyn VideoSource,
    backbone: &Backbone,
    rate_hz: f64,
    max_frames: usize,
) -> Result<Vec<FeatureMap>> {
    let frames = sample_frames(video, rate_hz, max_frames)?;
    let maps = crate::map_ordered(&frames, |f| extract_feature_map(f, backbone));
    maps.into_iter().collect()
}

/// All region nodes of a video, frame-major then scale then position.
pub fn regions_from_maps(
    maps: &[FeatureMap],
    scales: &[(usize, usize)],
) -> Result<Vec<RegionNode>> {
    let mut all = Vec::new();
    for map in maps {
        all.extend(extract_regions(map, scales)?);
    }
    Ok(all)
}

// --- feature cache ---------------------------------------------------------

/// Directory holding feature files for one (backbone, preprocessing) key.
pub fn feature_cache_dir(cache_root: &Path, cfg: &PipelineConfig) -> PathBuf {
    let spec_name = match &cfg.backbone {
        BackboneConfig::MockProj { channels, .. } => format!("mockproj{channels}"),
        BackboneConfig::PatchMean => "patchmean".into(),
        BackboneConfig::Pretrained { name } => name.clone(),
    };
    cache_root
        .join("features")
        .join(format!("{spec_name}-{:016x}", cfg.preprocess_hash()))
}

pub fn feature_file_path(cache_root: &Path, cfg: &PipelineConfig, video_id: &str) -> PathBuf {
    feature_cache_dir(cache_root, cfg).join(format!("{}.strf", sanitize_id(video_id)))
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write the per-frame feature maps of one video as an STRF file.
pub fn write_features(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    assert!(!maps.is_empty(), "no feature maps to write");
    let (h, w, c) = (maps[0].height, maps[0].width, maps[0].channels);
    let mut buf = Vec::with_capacity(16 + maps.len() * h * w * c * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    bytes::w_u16(&mut buf, FEATURE_VERSION)?;
    bytes::w_u32(&mut buf, maps.len() as u32)?;
    bytes::w_u16(&mut buf, h as u16)?;
    bytes::w_u16(&mut buf, w as u16)?;
    bytes::w_u16(&mut buf, c as u16)?;
    for m in maps {
        assert_eq!((m.height, m.width, m.channels), (h, w, c), "ragged maps");
        for &v in m.data() {
            bytes::w_f32(&mut buf, v as f32)?;
        }
    }
    bytes::atomic_write(path, &buf)
}

/// Read an STRF file back into per-frame feature maps.
pub fn read_features(path: &Path) -> Result<Vec<FeatureMap>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::PipelineOrder(format!(
            "feature file {} missing ({e}); run extraction first",
            path.display()
        ))
    })?;
    let mut r = BufReader::new(file);
    bytes::expect_magic(&mut r, FEATURE_MAGIC, path)?;
    let version = bytes::r_u16(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let frames = bytes::r_u32(&mut r)? as usize;
    let h = bytes::r_u16(&mut r)? as usize;
    let w = bytes::r_u16(&mut r)? as usize;
    let c = bytes::r_u16(&mut r)? as usize;
    let mut maps = Vec::with_capacity(frames);
    let mut raw = vec![0u8; h * w * c * 4];
    for fi in 0..frames {
        r.read_exact(&mut raw).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "truncated feature data".into(),
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        maps.push(FeatureMap::from_data(h, w, c, fi as u32, data));
    }
    Ok(maps)
}
