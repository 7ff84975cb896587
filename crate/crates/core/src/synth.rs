//! Moving-shapes clips with exact instance annotations.
//!
//! Each instance is a filled circle, square or triangle moving at constant
//! velocity and bouncing off the canvas edges. Shapes are painted back to
//! front, so an instance's mask is what remains visible after occlusion, and
//! its box is the tight box of that visible mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vistr_tensor::Tensor;

use crate::error::{config_err, Result};
use crate::mask::{derive_box, BoxCxCyWH, Mask};

pub const CATEGORY_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn category(self) -> usize {
        self as usize
    }

    /// Whether the pixel centre offset `(dx, dy)` from the shape centre lies
    /// inside a shape of extent `size`.
    pub fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            Shape::Circle => dx * dx + dy * dy < r * r,
            Shape::Square => dx.abs() < r && dy.abs() < r,
            // Apex up, base along the bottom edge of the bounding square.
            Shape::Triangle => dy > -r && dy < r && dx.abs() < (dy + r) / 2.0,
        }
    }
}

/// Which shape is painted on top where two overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZOrder {
    /// Larger shapes first, so smaller ones stay visible.
    SizeDescending,
    /// Later instances on top.
    InstanceIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub clips: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance slots of the model the data is meant for.
    pub capacity: usize,
    /// Shape extent range as a fraction of the canvas height.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum speed per axis, pixels per frame.
    pub max_speed: f64,
    pub z_order: ZOrder,
    /// Instances appear for a random sub-range of frames instead of all.
    pub leave_enter: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            clips: 8,
            t: 6,
            height: 96,
            width: 160,
            min_instances: 1,
            max_instances: 3,
            capacity: 5,
            min_size: 0.2,
            max_size: 0.4,
            max_speed: 3.0,
            z_order: ZOrder::SizeDescending,
            leave_enter: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.height == 0 || self.width == 0 {
            return config_err("clip extents must be positive");
        }
        if self.min_instances > self.max_instances {
            return config_err("min_instances exceeds max_instances");
        }
        if self.max_instances > self.capacity {
            return config_err(format!(
                "up to {} instances requested but the model has {} slots",
                self.max_instances, self.capacity
            ));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return config_err("shape sizes must satisfy 0 < min_size <= max_size <= 1");
        }
        if self.max_speed < 0.0 {
            return config_err("max_speed must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// `[T, 3, H0, W0]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSequenceTruth {
    pub class_id: usize,
    /// Per frame; all zeros on absent frames.
    pub boxes: Vec<BoxCxCyWH>,
    pub masks: Vec<Mask>,
    pub presence: Vec<bool>,
}

/// Motion and appearance of one generated instance, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub shape: Shape,
    pub size: f64,
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f32; 3],
    /// Present on frames `start..end`.
    pub frames: (usize, usize),
}

impl InstanceSpec {
    /// Centre at frame `t` after bouncing inside a `height x width` canvas.
    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (f64, f64) {
        let r = self.size / 2.0;
        (
            bounce(self.center.0 + self.velocity.0 * t as f64, r, width as f64 - r),
            bounce(self.center.1 + self.velocity.1 * t as f64, r, height as f64 - r),
        )
    }
}

/// Reflects `p` into `[lo, hi]` as a ball bouncing between two walls.
fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.1];

/// Per-clip generator seed; depends only on the dataset seed and the clip
/// index, so clips can be produced in any order.
fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_instances(cfg: &SynthConfig, index: usize) -> Result<Vec<InstanceSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, index));
    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let size = (rng.gen_range(cfg.min_size..=cfg.max_size) * h).round().max(2.0);
        let r = size / 2.0;
        let center = (rng.gen_range(r..=(w - r).max(r)), rng.gen_range(r..=(h - r).max(r)));
        let velocity = (
            rng.gen_range(-cfg.max_speed..=cfg.max_speed),
            rng.gen_range(-cfg.max_speed..=cfg.max_speed),
        );
        let color = [rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0)];
        let frames = if cfg.leave_enter && cfg.t > 1 {
            let start = rng.gen_range(0..=cfg.t / 2);
            (start, rng.gen_range(start + 1..=cfg.t))
        } else {
            (0, cfg.t)
        };
        out.push(InstanceSpec { shape, size, center, velocity, color, frames });
    }
    Ok(out)
}

/// Paints `specs` and derives their annotations.
pub fn render_clip(
    clip_id: impl Into<String>,
    specs: &[InstanceSpec],
    t: usize,
    height: usize,
    width: usize,
    z_order: ZOrder,
) -> Result<(VideoClip, Vec<InstanceSequenceTruth>)> {
    let mut order: Vec<usize> = (0..specs.len()).collect();
    if z_order == ZOrder::SizeDescending {
        // Stable, so equal sizes fall back to instance order.
        order.sort_by(|&a, &b| specs[b].size.total_cmp(&specs[a].size));
    }
    let plane = height * width;
    let mut frames = vec![0f32; t * 3 * plane];
    let mut truths: Vec<InstanceSequenceTruth> = specs
        .iter()
        .map(|s| InstanceSequenceTruth {
            class_id: s.shape.category(),
            boxes: Vec::with_capacity(t),
            masks: Vec::with_capacity(t),
            presence: Vec::with_capacity(t),
        })
        .collect();
    for f in 0..t {
        // Topmost painted instance per pixel.
        let mut owner: Vec<Option<usize>> = vec![None; plane];
        for &i in &order {
            let s = &specs[i];
            if f < s.frames.0 || f >= s.frames.1 {
                continue;
            }
            let (cx, cy) = s.center_at(f, height, width);
            for y in 0..height {
                for x in 0..width {
                    if s.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s.size) {
                        owner[y * width + x] = Some(i);
                    }
                }
            }
        }
        let base = f * 3 * plane;
        for (p, o) in owner.iter().enumerate() {
            let color = o.map_or(BACKGROUND, |i| specs[i].color);
            for c in 0..3 {
                frames[base + c * plane + p] = color[c];
            }
        }
        for (i, truth) in truths.iter_mut().enumerate() {
            let mask = Mask::from_fn(height, width, |y, x| owner[y * width + x] == Some(i));
            match derive_box(&mask) {
                Some(b) => {
                    truth.boxes.push(b);
                    truth.presence.push(true);
                }
                None => {
                    truth.boxes.push([0.0; 4]);
                    truth.presence.push(false);
                }
            }
            truth.masks.push(mask);
        }
    }
    let clip = VideoClip { clip_id: clip_id.into(), frames: Tensor::new(vec![t, 3, height, width], frames)? };
    Ok((clip, truths))
}

pub fn clip_name(index: usize) -> String {
    format!("clip{index:04}")
}

/// Clip number `index` of the dataset described by `cfg`.
pub fn generate_clip(cfg: &SynthConfig, index: usize) -> Result<(VideoClip, Vec<InstanceSequenceTruth>)> {
    let specs = sample_instances(cfg, index)?;
    render_clip(clip_name(index), &specs, cfg.t, cfg.height, cfg.width, cfg.z_order)
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<(VideoClip, Vec<InstanceSequenceTruth>)>> {
    (0..cfg.clips).map(|i| generate_clip(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(5.0, 0.0, 10.0), 5.0);
        assert_eq!(bounce(12.0, 0.0, 10.0), 8.0);
        assert_eq!(bounce(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(bounce(23.0, 0.0, 10.0), 3.0);
    }

    #[test]
    fn capacity_enforced() {
        let cfg = SynthConfig { max_instances: 6, capacity: 5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
