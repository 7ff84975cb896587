//! Fixed sinusoidal encoding of (temporal, horizontal, vertical) position.
//!
//! Channels are split into three equal blocks in that order. Inside a block
//! of width `d/3`, channel `2k` holds `sin(pos * w_k)` and `2k + 1` holds
//! `cos(pos * w_k)` with `w_k = base^(-2k / (d/3))`. The horizontal block
//! uses the column index, the vertical block the row index.

use serde::{Deserialize, Serialize};
use vistr_tensor::{Float, Tensor};

use crate::error::{arg_err, config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncodingConfig {
    pub d: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub base: f64,
    /// When false the encoding is all zeros and [`add_positional`] is the
    /// identity.
    pub enabled: bool,
}

impl PositionalEncodingConfig {
    pub fn new(d: usize, t: usize, h: usize, w: usize) -> Self {
        PositionalEncodingConfig { d, t, h, w, base: 10_000.0, enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(3) {
            return config_err(format!("encoding width {} is not divisible by 3", self.d));
        }
        if !(self.d / 3).is_multiple_of(2) {
            return config_err(format!("encoding block width {} is odd", self.d / 3));
        }
        if self.base <= 0.0 {
            return config_err("encoding base must be positive");
        }
        Ok(())
    }

    pub fn raster(&self) -> Raster {
        Raster { t: self.t, h: self.h, w: self.w }
    }

    /// `w_k` for `k < d/6`.
    pub fn frequency(&self, k: usize) -> f64 {
        let block = (self.d / 3) as f64;
        1.0 / self.base.powf(2.0 * k as f64 / block)
    }

    /// Channel `c` at frame `t`, row `y`, column `x`.
    pub fn value(&self, c: usize, t: usize, y: usize, x: usize) -> f64 {
        let block = self.d / 3;
        let pos = match c / block {
            0 => t,
            1 => x,
            _ => y,
        } as f64;
        let i = c % block;
        let arg = pos * self.frequency(i / 2);
        if i.is_multiple_of(2) {
            arg.sin()
        } else {
            arg.cos()
        }
    }
}

/// The token order shared by the encoder input and the encoding: index
/// `(t * H + y) * W + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Raster {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Raster {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.h * self.w), (i / self.w) % self.h, i % self.w)
    }
}

/// Encoding laid out as `[d, T, H, W]`.
pub fn positional_encoding_3d<E: Float>(cfg: &PositionalEncodingConfig) -> Result<Tensor<E>> {
    cfg.validate()?;
    let r = cfg.raster();
    let mut out = vec![E::zero(); cfg.d * r.len()];
    if cfg.enabled {
        for c in 0..cfg.d {
            for i in 0..r.len() {
                let (t, y, x) = r.coords(i);
                out[c * r.len() + i] = E::of(cfg.value(c, t, y, x));
            }
        }
    }
    Ok(Tensor::new(vec![cfg.d, cfg.t, cfg.h, cfg.w], out)?)
}

/// Encoding as one row per token, `[T*H*W, d]`, the layout the transformer
/// consumes.
pub fn positional_tokens<E: Float>(cfg: &PositionalEncodingConfig) -> Result<Tensor<E>> {
    let enc = positional_encoding_3d::<E>(cfg)?;
    let l = cfg.raster().len();
    Ok(enc.reshape(&[cfg.d, l])?.permute(&[1, 0])?)
}

/// `features + flatten(encoding)` for features laid out `[d, T*H*W]`.
pub fn add_positional<E: Float>(features: &Tensor<E>, cfg: &PositionalEncodingConfig) -> Result<Tensor<E>> {
    let l = cfg.raster().len();
    if features.shape() != [cfg.d, l] {
        return arg_err(format!("features {:?} do not match encoding [{}, {}]", features.shape(), cfg.d, l));
    }
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(features.clone());
    }
    let enc = positional_encoding_3d::<E>(cfg)?;
    let data = features.data().iter().zip(enc.data()).map(|(&a, &b)| a + b).collect();
    Ok(Tensor::new(features.shape().to_vec(), data)?)
}
