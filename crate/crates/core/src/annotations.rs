//! Dataset files: one annotation JSON plus per-frame tensor files.
//!
//! ```text
//! {"categories": [{"id", "name"}],
//!  "videos": [{"id", "name", "T", "height", "width", "frame_files"}],
//!  "annotations": [{"video_id", "instance_id", "category_id",
//!                   "boxes": [[cx, cy, w, h], ...],
//!                   "rle_masks": [[counts...], ...],
//!                   "presence": [bool, ...]}]}
//! ```
//!
//! Frame files use the checkpoint container with a single `[3, H, W]`
//! tensor named `frame`, and paths are relative to the JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vistr_tensor::{checkpoint, Tensor};

use crate::error::{format_err, Result, VisError};
use crate::mask::{rle_decode, rle_encode, BoxCxCyWH};
use crate::synth::{InstanceSequenceTruth, VideoClip, CATEGORY_NAMES};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: u64,
    #[serde(default)]
    pub name: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub frame_files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub video_id: u64,
    pub instance_id: u64,
    pub category_id: usize,
    pub boxes: Vec<BoxCxCyWH>,
    pub rle_masks: Vec<Vec<u32>>,
    pub presence: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub categories: Vec<Category>,
    pub videos: Vec<VideoEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

/// One video with its decoded frames and instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video_id: u64,
    pub clip: VideoClip,
    pub truths: Vec<InstanceSequenceTruth>,
}

pub fn default_categories() -> Vec<Category> {
    CATEGORY_NAMES.iter().enumerate().map(|(id, n)| Category { id, name: n.to_string() }).collect()
}

impl AnnotationFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let file: AnnotationFile = serde_path_to_error::deserialize(de)
            .map_err(|e| VisError::Format(format!("annotations at `{}`: {}", e.path(), e.inner())))?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self).map_err(|e| VisError::Format(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn video(&self, id: u64) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.videos.iter().enumerate() {
            if v.frame_files.len() != v.t {
                return format_err(format!("videos[{i}].frame_files: {} files for T={}", v.frame_files.len(), v.t));
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let Some(v) = self.video(a.video_id) else {
                return format_err(format!("annotations[{i}].video_id: unknown video {}", a.video_id));
            };
            if !self.categories.iter().any(|c| c.id == a.category_id) {
                return format_err(format!("annotations[{i}].category_id: unknown category {}", a.category_id));
            }
            for (field, len) in
                [("boxes", a.boxes.len()), ("rle_masks", a.rle_masks.len()), ("presence", a.presence.len())]
            {
                if len != v.t {
                    return format_err(format!("annotations[{i}].{field}: {len} entries for T={}", v.t));
                }
            }
            for (t, counts) in a.rle_masks.iter().enumerate() {
                let total: u64 = counts.iter().map(|&c| c as u64).sum();
                if total != (v.height * v.width) as u64 {
                    return format_err(format!(
                        "annotations[{i}].rle_masks[{t}]: runs sum to {total}, expected {}",
                        v.height * v.width
                    ));
                }
            }
        }
        Ok(())
    }

    /// Decoded instances of one video in file order.
    pub fn truths(&self, video_id: u64) -> Result<Vec<InstanceSequenceTruth>> {
        let Some(v) = self.video(video_id) else {
            return format_err(format!("unknown video {video_id}"));
        };
        self.annotations
            .iter()
            .filter(|a| a.video_id == video_id)
            .map(|a| {
                Ok(InstanceSequenceTruth {
                    class_id: a.category_id,
                    boxes: a.boxes.clone(),
                    masks: a
                        .rle_masks
                        .iter()
                        .map(|c| rle_decode(c, v.height, v.width))
                        .collect::<Result<_>>()?,
                    presence: a.presence.clone(),
                })
            })
            .collect()
    }
}

fn frame_file(name: &str, t: usize) -> String {
    format!("frames/{name}/{t:03}.bin")
}

/// Writes `annotations.json` and the frame files under `dir`; video ids are
/// assigned from 1 in sample order. Returns the JSON path.
pub fn save_annotations(samples: &[(VideoClip, Vec<InstanceSequenceTruth>)], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut file = AnnotationFile { categories: default_categories(), videos: vec![], annotations: vec![] };
    for (k, (clip, truths)) in samples.iter().enumerate() {
        let id = k as u64 + 1;
        let (t, h, w) = (clip.len(), clip.height(), clip.width());
        let mut frame_files = Vec::with_capacity(t);
        for f in 0..t {
            let rel = frame_file(&clip.clip_id, f);
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("frame path has a parent"))?;
            let plane = 3 * h * w;
            let frame = Tensor::new(vec![3, h, w], clip.frames.data()[f * plane..(f + 1) * plane].to_vec())?;
            checkpoint::save(&path, &[("frame", &frame)])?;
            frame_files.push(rel);
        }
        file.videos.push(VideoEntry { id, name: clip.clip_id.clone(), t, height: h, width: w, frame_files });
        for (i, truth) in truths.iter().enumerate() {
            file.annotations.push(AnnotationEntry {
                video_id: id,
                instance_id: i as u64 + 1,
                category_id: truth.class_id,
                boxes: truth.boxes.clone(),
                rle_masks: truth.masks.iter().map(rle_encode).collect(),
                presence: truth.presence.clone(),
            });
        }
    }
    let path = dir.join(ANNOTATION_FILE);
    fs::write(&path, file.to_json()?)?;
    Ok(path)
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    AnnotationFile::parse(&fs::read(path)?)
}

/// Annotations plus every video's frames, in file order.
pub fn load_dataset(path: &Path) -> Result<(AnnotationFile, Vec<Sample>)> {
    let file = load_annotations(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(file.videos.len());
    for v in &file.videos {
        let mut data = Vec::with_capacity(v.t * 3 * v.height * v.width);
        for rel in &v.frame_files {
            let loaded = checkpoint::load::<f32>(&root.join(rel))?;
            let Some((_, frame)) = loaded.into_iter().find(|(n, _)| n == "frame") else {
                return format_err(format!("{rel}: no `frame` tensor"));
            };
            if frame.shape() != [3, v.height, v.width] {
                return format_err(format!("{rel}: frame shape {:?}", frame.shape()));
            }
            data.extend_from_slice(frame.data());
        }
        let clip = VideoClip { clip_id: v.name.clone(), frames: Tensor::new(vec![v.t, 3, v.height, v.width], data)? };
        samples.push(Sample { video_id: v.id, clip, truths: file.truths(v.id)? });
    }
    Ok((file, samples))
}
