//! Synthetic near-duplicate corpus.
//!
//! Procedurally drawn clips (textured background plus moving shapes) and
//! a set of bootleg-style transforms (crop-zoom, banner overlay, logo
//! insertion, frame shuffle) turn a handful of seeds into a labeled
//! retrieval dataset: clips derived from the same base are positives for
//! each other, everything else is a negative or distractor. The whole
//! corpus is a pure function of its spec, so fixtures are reproducible
//! byte for byte.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::config::derive_seed;
use crate::error::Result;
use crate::manifest::{ManifestEntry, Split};
use crate::retrieval::QueryRelevance;
use crate::video::VideoSource;

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Circle,
    Rect,
    Diamond,
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    color: [f64; 3],
    // positions and sizes in unit coordinates, velocity in units/frame
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    size: f64,
}

/// A procedurally drawn clip. Content is a pure function of
/// `(seed, content time, width, height)`.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub seed: u64,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Optional remap of frame index to content time; lets a clip repeat
    /// identical frames exactly.
    pub content_times: Option<Vec<usize>>,
    shapes: Vec<Shape>,
    bg_freq: [f64; 6],
    bg_colors: [[f64; 3]; 2],
}

impl SyntheticClip {
    pub fn new(seed: u64, frames: usize, width: u32, height: u32, fps: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "clip", 0));
        let n_shapes = rng.random_range(2..=4);
        let shapes = (0..n_shapes)
            .map(|_| {
                let kind = match rng.random_range(0..3) {
                    0 => ShapeKind::Circle,
                    1 => ShapeKind::Rect,
                    _ => ShapeKind::Diamond,
                };
                Shape {
                    kind,
                    color: [
                        rng.random_range(0.15..1.0),
                        rng.random_range(0.15..1.0),
                        rng.random_range(0.15..1.0),
                    ],
                    cx: rng.random_range(0.0..1.0),
                    cy: rng.random_range(0.0..1.0),
                    vx: rng.random_range(-0.09..0.09),
                    vy: rng.random_range(-0.09..0.09),
                    size: rng.random_range(0.10..0.22),
                }
            })
            .collect();
        let bg_freq = [
            rng.random_range(2.0..7.0),
            rng.random_range(2.0..7.0),
            rng.random_range(1.0..4.0),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let bg_colors = [
            [
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            ],
            [
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.9),
            ],
        ];
        SyntheticClip {
            seed,
            frames,
            width,
            height,
            fps,
            content_times: None,
            shapes,
            bg_freq,
            bg_colors,
        }
    }

    /// Same clip but frame `i` shows content time `times[i]`; repeated
    /// entries produce bitwise-identical frames.
    pub fn with_content_times(mut self, times: Vec<usize>) -> Self {
        self.frames = times.len();
        self.content_times = Some(times);
        self
    }

    /// Render content time `t` at an arbitrary resolution.
    pub fn render(&self, t: usize, width: u32, height: u32) -> RgbImage {
        let tf = t as f64;
        RgbImage::from_fn(width, height, |px, py| {
            let x = px as f64 / width as f64;
            let y = py as f64 / height as f64;
            // layered sine background
            let s = ((x * self.bg_freq[0] + self.bg_freq[3]).sin()
                + (y * self.bg_freq[1] + self.bg_freq[4]).sin()
                + ((x + y) * self.bg_freq[2] + self.bg_freq[5]).sin())
                / 3.0;
            let m = 0.5 + 0.5 * s;
            let mut rgb = [
                self.bg_colors[0][0] * (1.0 - m) + self.bg_colors[1][0] * m,
                self.bg_colors[0][1] * (1.0 - m) + self.bg_colors[1][1] * m,
                self.bg_colors[0][2] * (1.0 - m) + self.bg_colors[1][2] * m,
            ];
            for sh in &self.shapes {
                // wrap motion inside a margin so shapes re-enter
                let cx = (sh.cx + sh.vx * tf).rem_euclid(1.2) - 0.1;
                let cy = (sh.cy + sh.vy * tf).rem_euclid(1.2) - 0.1;
                let (dx, dy) = (x - cx, y - cy);
                let inside = match sh.kind {
                    ShapeKind::Circle => dx * dx + dy * dy < sh.size * sh.size,
                    ShapeKind::Rect => dx.abs() < sh.size && dy.abs() < sh.size * 0.7,
                    ShapeKind::Diamond => dx.abs() + dy.abs() < sh.size,
                };
                if inside {
                    rgb = sh.color;
                }
            }
            Rgb([
                (rgb[0] * 255.0).clamp(0.0, 255.0) as u8,
                (rgb[1] * 255.0).clamp(0.0, 255.0) as u8,
                (rgb[2] * 255.0).clamp(0.0, 255.0) as u8,
            ])
        })
    }

    fn content_time(&self, index: usize) -> usize {
        match &self.content_times {
            Some(times) => times[index],
            None => index,
        }
    }
}

impl VideoSource for SyntheticClip {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        Ok(self.render(self.content_time(index), self.width, self.height))
    }
}

/// Bootleg-style near-duplicate edits.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// Keep the central `keep` fraction and zoom it back to full size.
    Crop { keep: f64 },
    /// Opaque striped banner over the bottom `height_frac` of each frame.
    Overlay { height_frac: f64, seed: u64 },
    /// Bright logo box in the top-right corner, `size_frac` of the min edge.
    Logo { size_frac: f64, seed: u64 },
    /// Seeded permutation of the frame order.
    Shuffle { seed: u64 },
    /// Multiply all channels by `factor`.
    Brightness { factor: f64 },
}

impl Transform {
    pub fn tag(&self) -> &'static str {
        match self {
            Transform::Crop { .. } => "crop",
            Transform::Overlay { .. } => "overlay",
            Transform::Logo { .. } => "logo",
            Transform::Shuffle { .. } => "shuffle",
            Transform::Brightness { .. } => "bright",
        }
    }
}

/// A base clip viewed through one transform.
#[derive(Debug, Clone)]
pub struct TransformedClip {
    pub base: SyntheticClip,
    pub transform: Transform,
    permutation: Option<Vec<usize>>,
}

impl TransformedClip {
    pub fn new(base: SyntheticClip, transform: Transform) -> Self {
        let permutation = match &transform {
            Transform::Shuffle { seed } => {
                let mut order: Vec<usize> = (0..base.frame_count()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                order.shuffle(&mut rng);
                Some(order)
            }
            _ => None,
        };
        TransformedClip {
            base,
            transform,
            permutation,
        }
    }
}

impl VideoSource for TransformedClip {
    fn fps(&self) -> f64 {
        self.base.fps()
    }

    fn frame_count(&self) -> usize {
        self.base.frame_count()
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        match &self.transform {
            Transform::Crop { keep } => {
                let img = self.base.frame(index)?;
                let (w, h) = img.dimensions();
                let kw = ((w as f64 * keep).round() as u32).max(8);
                let kh = ((h as f64 * keep).round() as u32).max(8);
                let x = (w - kw) / 2;
                let y = (h - kh) / 2;
                let crop = image::imageops::crop_imm(&img, x, y, kw, kh).to_image();
                Ok(image::imageops::resize(
                    &crop,
                    w,
                    h,
                    image::imageops::FilterType::Triangle,
                ))
            }
            Transform::Overlay { height_frac, seed } => {
                let mut img = self.base.frame(index)?;
                let (w, h) = img.dimensions();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let color = [
                    rng.random_range(60..255u16) as u8,
                    rng.random_range(60..255u16) as u8,
                    rng.random_range(60..255u16) as u8,
                ];
                let y0 = (h as f64 * (1.0 - height_frac)) as u32;
                for y in y0..h {
                    for x in 0..w {
                        let stripe = (x / 16 + y / 16) % 2 == 0;
                        let px = img.get_pixel_mut(x, y);
                        *px = if stripe {
                            Rgb(color)
                        } else {
                            Rgb([255 - color[0], 255 - color[1], 255 - color[2]])
                        };
                    }
                }
                Ok(img)
            }
            Transform::Logo { size_frac, seed } => {
                let mut img = self.base.frame(index)?;
                let (w, h) = img.dimensions();
                let side = (w.min(h) as f64 * size_frac) as u32;
                let margin = w / 25;
                let x0 = w - side - margin;
                let y0 = margin;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let color = [
                    rng.random_range(150..255u16) as u8,
                    rng.random_range(0..120u16) as u8,
                    rng.random_range(150..255u16) as u8,
                ];
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        let inner = x > x0 + side / 4
                            && x < x0 + 3 * side / 4
                            && y > y0 + side / 4
                            && y < y0 + 3 * side / 4;
                        img.put_pixel(
                            x,
                            y,
                            if inner {
                                Rgb([255, 255, 255])
                            } else {
                                Rgb(color)
                            },
                        );
                    }
                }
                Ok(img)
            }
            Transform::Shuffle { .. } => {
                let perm = self.permutation.as_ref().expect("shuffle permutation");
                self.base.frame(perm[index])
            }
            Transform::Brightness { factor } => {
                let mut img = self.base.frame(index)?;
                for px in img.pixels_mut() {
                    for ch in 0..3 {
                        px.0[ch] = ((px.0[ch] as f64) * factor).clamp(0.0, 255.0) as u8;
                    }
                }
                Ok(img)
            }
        }
    }
}

/// Either kind of corpus clip, as one `VideoSource`.
#[derive(Debug, Clone)]
pub enum ClipSource {
    Base(SyntheticClip),
    Edited(TransformedClip),
}

impl ClipSource {
    pub fn as_video(&self) -> &dyn VideoSource {
        match self {
            ClipSource::Base(c) => c,
            ClipSource::Edited(c) => c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusClip {
    pub id: String,
    pub group: Option<usize>,
    pub split: Split,
    pub source: ClipSource,
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_groups: usize,
    pub n_distractors: usize,
    pub frames_per_clip: usize,
    pub distractor_frames: usize,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Fraction of groups assigned to the training split.
    pub train_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 42,
            n_groups: 50,
            n_distractors: 0,
            frames_per_clip: 6,
            distractor_frames: 4,
            width: 320,
            height: 256,
            fps: 1.0,
            train_fraction: 0.7,
        }
    }
}

/// The generated dataset: labeled near-duplicate groups plus distractors.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<CorpusClip>,
}

impl Corpus {
    /// Default transform set applied to every base clip.
    pub fn default_transforms(spec_seed: u64, group: usize) -> Vec<Transform> {
        let g = group as u64;
        vec![
            Transform::Crop { keep: 0.65 },
            Transform::Overlay {
                height_frac: 0.35,
                seed: derive_seed(spec_seed, "overlay", g),
            },
            Transform::Logo {
                size_frac: 0.30,
                seed: derive_seed(spec_seed, "logo", g),
            },
            Transform::Shuffle {
                seed: derive_seed(spec_seed, "shuffle", g),
            },
        ]
    }

    pub fn generate(spec: &CorpusSpec) -> Corpus {
        let mut clips = Vec::new();
        // seeded group order decides the train/test split
        let mut order: Vec<usize> = (0..spec.n_groups).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split", 0));
        order.shuffle(&mut rng);
        let n_train = ((spec.n_groups as f64) * spec.train_fraction).round() as usize;

        for (rank, &g) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else {
                Split::Test
            };
            let base = SyntheticClip::new(
                derive_seed(spec.seed, "base", g as u64),
                spec.frames_per_clip,
                spec.width,
                spec.height,
                spec.fps,
            );
            clips.push(CorpusClip {
                id: format!("g{g:03}_base"),
                group: Some(g),
                split,
                source: ClipSource::Base(base.clone()),
            });
            for tr in Self::default_transforms(spec.seed, g) {
                clips.push(CorpusClip {
                    id: format!("g{g:03}_{}", tr.tag()),
                    group: Some(g),
                    split,
                    source: ClipSource::Edited(TransformedClip::new(base.clone(), tr)),
                });
            }
        }
        for d in 0..spec.n_distractors {
            let clip = SyntheticClip::new(
                derive_seed(spec.seed, "distractor", d as u64),
                spec.distractor_frames,
                spec.width,
                spec.height,
                spec.fps,
            );
            clips.push(CorpusClip {
                id: format!("d{d:04}"),
                group: None,
                split: Split::Distractor,
                source: ClipSource::Base(clip),
            });
        }
        Corpus { clips }
    }

    pub fn ids_in_split(&self, split: Split) -> Vec<String> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id.clone())
            .collect()
    }

    fn group_members(&self, split: Split) -> Vec<(usize, Vec<String>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
        for c in &self.clips {
            if c.split == split {
                if let Some(g) = c.group {
                    groups.entry(g).or_default().push(c.id.clone());
                }
            }
        }
        groups.into_iter().collect()
    }

    /// One relevance record per clip of the split: positives are its
    /// group mates, negatives all other clips of the split.
    pub fn relevance(&self, split: Split) -> Vec<QueryRelevance> {
        let groups = self.group_members(split);
        let all: Vec<String> = groups.iter().flat_map(|(_, m)| m.clone()).collect();
        let mut out = Vec::new();
        for (_, members) in &groups {
            for q in members {
                let positives: Vec<String> =
                    members.iter().filter(|m| *m != q).cloned().collect();
                let negatives: Vec<String> = all
                    .iter()
                    .filter(|m| *m != q && !members.contains(m))
                    .cloned()
                    .collect();
                out.push(QueryRelevance {
                    query: q.clone(),
                    positives,
                    negatives,
                });
            }
        }
        out
    }

    /// Write every clip as a frame-sequence directory plus manifest and
    /// relevance files.
    pub fn materialize(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let clips_dir = dir.join("clips");
        let entries: Vec<ManifestEntry> = self
            .clips
            .iter()
            .map(|c| ManifestEntry {
                id: c.id.clone(),
                path: format!("clips/{}", c.id),
                split: c.split,
            })
            .collect();
        let results = crate::map_ordered(&self.clips, |clip| -> Result<()> {
            let cdir = clips_dir.join(&clip.id);
            std::fs::create_dir_all(&cdir)?;
            let video = clip.source.as_video();
            let meta = crate::video::FrameDirMeta {
                fps: video.fps(),
                frames: video.frame_count(),
                width: match &clip.source {
                    ClipSource::Base(c) => c.width,
                    ClipSource::Edited(c) => c.base.width,
                },
                height: match &clip.source {
                    ClipSource::Base(c) => c.height,
                    ClipSource::Edited(c) => c.base.height,
                },
            };
            std::fs::write(cdir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
            for f in 0..video.frame_count() {
                let img = video.frame(f)?;
                img.save(cdir.join(format!("f{f:04}.png")))?;
            }
            Ok(())
        });
        for r in results {
            r?;
        }
        crate::manifest::write_manifest(&dir.join("manifest.jsonl"), &entries)?;
        crate::retrieval::write_relevance(
            &dir.join("train.relevance.jsonl"),
            &self.relevance(Split::Train),
        )?;
        crate::retrieval::write_relevance(
            &dir.join("test.relevance.jsonl"),
            &self.relevance(Split::Test),
        )?;
        Ok(())
    }
}
