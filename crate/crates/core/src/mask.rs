//! Binary masks, column-major run-length encoding and tight boxes.

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};

/// Normalized `(cx, cy, w, h)`.
pub type BoxCxCyWH = [f64; 4];

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Mask { height, width, bits }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return format_err(format!("{} bits for a {height}x{width} mask", bits.len()));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn union(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count()
    }

    /// Values as `0.0`/`1.0`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Column-major run lengths, starting with a (possibly zero) run of zeros.
pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], height: usize, width: usize) -> Result<Mask> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (height * width) as u64 {
        return format_err(format!("run lengths sum to {total}, expected {}", height * width));
    }
    let mut mask = Mask::empty(height, width);
    let mut pos = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        let on = i % 2 == 1;
        for p in pos..pos + c as usize {
            if on {
                mask.set(p % height, p / height, true);
            }
        }
        pos += c as usize;
    }
    Ok(mask)
}

/// Tightest pixel-aligned box around the set pixels, or `None` for an empty
/// mask. Pixel `(y, x)` covers `[x, x+1) x [y, y+1)`.
pub fn derive_box(mask: &Mask) -> Option<BoxCxCyWH> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    if x1 == usize::MAX {
        return None;
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    Some([
        (x1 + x2) as f64 / 2.0 / w,
        (y1 + y2) as f64 / 2.0 / h,
        (x2 - x1) as f64 / w,
        (y2 - y1) as f64 / h,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_order() {
        // 2x2 with only the top-right pixel set: column 0 is (0,0),(1,0).
        let mut m = Mask::empty(2, 2);
        m.set(0, 1, true);
        assert_eq!(rle_encode(&m), vec![2, 1, 1]);
    }

    #[test]
    fn box_of_single_pixel() {
        let mut m = Mask::empty(4, 8);
        m.set(1, 2, true);
        assert_eq!(derive_box(&m), Some([2.5 / 8.0, 1.5 / 4.0, 1.0 / 8.0, 1.0 / 4.0]));
        assert_eq!(derive_box(&Mask::empty(3, 3)), None);
    }
}
