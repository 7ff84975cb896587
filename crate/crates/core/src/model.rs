//! The clip-level segmentation network.
//!
//! Layout conventions:
//! - frames enter as `[T, 3, H0, W0]` and the backbone treats `T` as batch;
//! - the backbone has stride 8 and keeps its stride-4 stage for mask fusion;
//! - tokens are rows of `[T*h*w, d]` in [`Raster`] order, i.e. the
//!   transpose of the `[d, T*h*w]` feature map;
//! - prediction `j` belongs to instance slot `j % n` at frame `j / n`;
//! - mask logits come out as `[n, T, H0/4, W0/4]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use vistr_tensor::nn::{normal, split_heads, Conv, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
use vistr_tensor::{Bound, Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{arg_err, config_err, Result};
use crate::losses::PredictionVars;
use crate::posenc::{positional_tokens, PositionalEncodingConfig, Raster};

/// Backbone channel schedule; stages 1-3 halve the resolution.
pub const BACKBONE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const BACKBONE_STRIDE: usize = 8;
/// Backbone stage whose output feeds the mask head (stride 4).
const FUSION_STAGE: usize = 1;
/// Width of the mask-fusion convolutions.
pub const FUSION_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// One learned query shared by every prediction.
    Video,
    /// One query per frame, shared by its `n` slots.
    Frame,
    /// One query per slot, shared across frames.
    Instance,
    /// A distinct query for every prediction.
    Prediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFeatureSource {
    Encoder,
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Foreground categories; the class head has `k + 1` outputs.
    pub k: usize,
    pub query_mode: QueryMode,
    pub use_positional: bool,
    /// Add the encoding to the keys of decoder cross-attention too.
    pub positional_cross_keys: bool,
    pub mask_feature_source: MaskFeatureSource,
    pub use_3d_head: bool,
    pub mask_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 96,
            n: 5,
            t: 6,
            height: 96,
            width: 160,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            ffn_dim: 192,
            k: 3,
            query_mode: QueryMode::Prediction,
            use_positional: true,
            positional_cross_keys: true,
            mask_feature_source: MaskFeatureSource::Encoder,
            use_3d_head: true,
            mask_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Total predictions `N = n * T`.
    pub fn num_predictions(&self) -> usize {
        self.n * self.t
    }

    /// Feature-map extents after the backbone.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / BACKBONE_STRIDE, self.width / BACKBONE_STRIDE)
    }

    /// Mask-logit extents.
    pub fn mask_hw(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn posenc(&self) -> PositionalEncodingConfig {
        let (h, w) = self.feature_hw();
        PositionalEncodingConfig { enabled: self.use_positional, ..PositionalEncodingConfig::new(self.d, self.t, h, w) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.k == 0 {
            return config_err("n, T and k must be positive");
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return config_err(format!("width {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.use_positional {
            self.posenc().validate()?;
        }
        if !self.height.is_multiple_of(BACKBONE_STRIDE) || !self.width.is_multiple_of(BACKBONE_STRIDE) || self.height == 0 || self.width == 0
        {
            return config_err(format!("canvas {}x{} is not a multiple of {BACKBONE_STRIDE}", self.height, self.width));
        }
        if self.mask_channels == 0 || self.ffn_dim == 0 {
            return config_err("mask_channels and ffn_dim must be positive");
        }
        Ok(())
    }
}

/// Number of learned query vectors for a mode.
pub fn query_count(mode: QueryMode, n: usize, t: usize) -> usize {
    match mode {
        QueryMode::Video => 1,
        QueryMode::Frame => t,
        QueryMode::Instance => n,
        QueryMode::Prediction => n * t,
    }
}

/// Which learned vector feeds prediction `j`.
pub fn query_index(mode: QueryMode, n: usize, t: usize) -> Vec<usize> {
    (0..n * t)
        .map(|j| match mode {
            QueryMode::Video => 0,
            QueryMode::Frame => j / n,
            QueryMode::Instance => j % n,
            QueryMode::Prediction => j,
        })
        .collect()
}

/// Group count for normalizing `c` channels: the largest of 8, 4, 2 that
/// leaves at least four channels per group.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2].into_iter().find(|&g| c.is_multiple_of(g) && c / g >= 4).unwrap_or(1)
}

/// conv, group norm, ReLU.
#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<E: Float>(
        s: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        three_d: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = if three_d {
            Conv::new3d(s, &format!("{name}.conv"), cin, cout, k, stride, k / 2, rng)?
        } else {
            Conv::new2d(s, &format!("{name}.conv"), cin, cout, k, stride, k / 2, rng)?
        };
        Ok(ConvBlock { conv, norm: GroupNorm::new(s, &format!("{name}.norm"), cout, norm_groups(cout))? })
    }

    fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new<E: Float>(s: &mut ParamStore<E>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            lin1: Linear::new(s, &format!("{name}.linear1"), d, hidden, rng)?,
            lin2: Linear::new(s, &format!("{name}.linear2"), hidden, d, rng)?,
        })
    }

    fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.lin1.forward(tape, p, x)?;
        let h = tape.relu(h);
        Ok(self.lin2.forward(tape, p, h)?)
    }
}

fn add_opt<E: Float>(tape: &mut Tape<E>, x: Var, pos: Option<Var>) -> Result<Var> {
    Ok(match pos {
        Some(pv) => tape.add(x, pv)?,
        None => x,
    })
}

/// Post-norm self-attention plus feed-forward block.
#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new<E: Float>(s: &mut ParamStore<E>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(s, &format!("{name}.self_attn"), cfg.d, cfg.heads, rng)?,
            ffn: FeedForward::new(s, name, cfg.d, cfg.ffn_dim, rng)?,
            norm1: LayerNorm::new(s, &format!("{name}.norm1"), cfg.d)?,
            norm2: LayerNorm::new(s, &format!("{name}.norm2"), cfg.d)?,
        })
    }

    fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, src: Var, pos: Option<Var>) -> Result<(Var, Var)> {
        let q = add_opt(tape, src, pos)?;
        let a = self.attn.forward(tape, p, q, q, src)?;
        let x = tape.add(src, a.out)?;
        let x = self.norm1.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        Ok((self.norm2.forward(tape, p, x)?, a.probs))
    }
}

/// Post-norm query self-attention, cross-attention to the memory, and
/// feed-forward block.
#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new<E: Float>(s: &mut ParamStore<E>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(s, &format!("{name}.self_attn"), cfg.d, cfg.heads, rng)?,
            cross_attn: MultiHeadAttention::new(s, &format!("{name}.cross_attn"), cfg.d, cfg.heads, rng)?,
            ffn: FeedForward::new(s, name, cfg.d, cfg.ffn_dim, rng)?,
            norm1: LayerNorm::new(s, &format!("{name}.norm1"), cfg.d)?,
            norm2: LayerNorm::new(s, &format!("{name}.norm2"), cfg.d)?,
            norm3: LayerNorm::new(s, &format!("{name}.norm3"), cfg.d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<E: Float>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_key: Var,
    ) -> Result<(Var, Var)> {
        let q = tape.add(tgt, query_pos)?;
        let a = self.self_attn.forward(tape, p, q, q, tgt)?;
        let x = tape.add(tgt, a.out)?;
        let x = self.norm1.forward(tape, p, x)?;
        let q = tape.add(x, query_pos)?;
        let c = self.cross_attn.forward(tape, p, q, memory_key, memory)?;
        let x = tape.add(x, c.out)?;
        let x = self.norm2.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        Ok((self.norm3.forward(tape, p, x)?, c.probs))
    }
}

/// Per-frame similarity maps between instance features and encoded
/// features, fused with backbone features at stride 4.
#[derive(Clone, Copy, Debug)]
struct MaskHead {
    attn_q: Linear,
    attn_k: Linear,
    proj: Conv,
    lay1: ConvBlock,
    adapter: Conv,
    lay2: ConvBlock,
    out: Conv,
}

/// Instance-sequence segmentation over the stacked per-frame features.
#[derive(Clone, Debug)]
struct SegHead {
    blocks: Vec<ConvBlock>,
    out: Conv,
    three_d: bool,
}

/// Tape handles of one forward pass.
pub struct ModelOutput {
    pub preds: PredictionVars,
    /// Backbone output `[T, C, h, w]`.
    pub f0: Var,
    /// Stride-4 backbone features `[T, 32, H0/4, W0/4]`.
    pub fusion_features: Var,
    /// Projected backbone output `[T, d, h, w]`.
    pub f1: Var,
    /// Encoder output as tokens `[T*h*w, d]`.
    pub memory: Var,
    /// Decoder output `[N, d]`.
    pub instance_features: Var,
    /// `[N, d]` queries after mode expansion.
    pub queries: Var,
    /// Per-instance stacks `[n, a, T, H0/4, W0/4]`.
    pub mask_features: Var,
    /// Attention probabilities per encoder layer, per decoder layer
    /// (cross-attention) and of the mask head (`[T*n, heads, h, w]`).
    pub encoder_attention: Vec<Var>,
    pub decoder_attention: Vec<Var>,
    pub mask_attention: Var,
}

#[derive(Clone, Debug)]
pub struct VisTr {
    pub cfg: ModelConfig,
    backbone: Vec<ConvBlock>,
    input_proj: Conv,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<LayerNorm>,
    query_embed: ParamId,
    class_embed: Linear,
    bbox_embed: [Linear; 3],
    mask_head: MaskHead,
    seg_head: SegHead,
    pos: Tensor<f64>,
}

impl VisTr {
    /// Registers all parameters in `store`; backbone parameters are named
    /// with the `backbone.` prefix.
    pub fn new<E: Float>(cfg: ModelConfig, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &c) in BACKBONE_CHANNELS.iter().enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            backbone.push(ConvBlock::new(store, &format!("backbone.stage{i}"), cin, c, 3, stride, false, rng)?);
            cin = c;
        }
        let input_proj = Conv::new2d(store, "input_proj", cin, d, 1, 1, 0, rng)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.layers.{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layers.{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let decoder_norm =
            if cfg.decoder_layers > 0 { Some(LayerNorm::new(store, "decoder.norm", d)?) } else { None };
        let count = query_count(cfg.query_mode, cfg.n, cfg.t);
        let query_embed = store.add("query_embed", normal(&[count, d], 1.0, rng))?;
        let class_embed = Linear::new(store, "class_embed", d, cfg.k + 1, rng)?;
        let bbox_embed = [
            Linear::new(store, "bbox_embed.layers.0", d, d, rng)?,
            Linear::new(store, "bbox_embed.layers.1", d, d, rng)?,
            Linear::new(store, "bbox_embed.layers.2", d, 4, rng)?,
        ];
        let fc = FUSION_CHANNELS;
        let mask_head = MaskHead {
            attn_q: Linear::new(store, "mask_head.attention.q", d, d, rng)?,
            attn_k: Linear::new(store, "mask_head.attention.k", d, d, rng)?,
            proj: Conv::new2d(store, "mask_head.proj", d, fc, 1, 1, 0, rng)?,
            lay1: ConvBlock::new(store, "mask_head.lay1", cfg.heads + fc, fc, 3, 1, false, rng)?,
            adapter: Conv::new2d(store, "mask_head.adapter", BACKBONE_CHANNELS[FUSION_STAGE], fc, 1, 1, 0, rng)?,
            lay2: ConvBlock::new(store, "mask_head.lay2", fc, fc, 3, 1, false, rng)?,
            out: Conv::new2d(store, "mask_head.out", fc, cfg.mask_channels, 3, 1, 1, rng)?,
        };
        let a = cfg.mask_channels;
        let three_d = cfg.use_3d_head;
        let blocks = (0..3)
            .map(|i| ConvBlock::new(store, &format!("seg_head.block{i}"), a, a, 3, 1, three_d, rng))
            .collect::<Result<_>>()?;
        let out = if three_d {
            Conv::new3d(store, "seg_head.out", a, 1, 1, 1, 0, rng)?
        } else {
            Conv::new2d(store, "seg_head.out", a, 1, 1, 1, 0, rng)?
        };
        let pos = positional_tokens::<f64>(&cfg.posenc())?;
        Ok(VisTr {
            cfg,
            backbone,
            input_proj,
            encoder,
            decoder,
            decoder_norm,
            query_embed,
            class_embed,
            bbox_embed,
            mask_head,
            seg_head: SegHead { blocks, out, three_d },
            pos,
        })
    }

    pub fn raster(&self) -> Raster {
        let (h, w) = self.cfg.feature_hw();
        Raster { t: self.cfg.t, h, w }
    }

    /// Backbone over `[T, 3, H0, W0]`: returns the stride-8 output and the
    /// stride-4 fusion features.
    pub fn backbone_forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, frames: Var) -> Result<(Var, Var)> {
        let mut x = frames;
        let mut fusion = frames;
        for (i, block) in self.backbone.iter().enumerate() {
            x = block.forward(tape, p, x)?;
            if i == FUSION_STAGE {
                fusion = x;
            }
        }
        Ok((x, fusion))
    }

    /// `[T, C, h, w]` map to `[T*h*w, C]` tokens.
    pub fn flatten<E: Float>(tape: &mut Tape<E>, map: Var) -> Result<Var> {
        let s = tape.shape(map).to_vec();
        let x = tape.permute(map, &[0, 2, 3, 1])?;
        Ok(tape.reshape(x, &[s[0] * s[2] * s[3], s[1]])?)
    }

    /// Inverse of [`VisTr::flatten`].
    pub fn unflatten<E: Float>(tape: &mut Tape<E>, tokens: Var, r: Raster) -> Result<Var> {
        let c = tape.shape(tokens)[1];
        let x = tape.reshape(tokens, &[r.t, r.h, r.w, c])?;
        Ok(tape.permute(x, &[0, 3, 1, 2])?)
    }

    /// Encoder stack over `[L, d]` tokens; returns the memory and each
    /// layer's attention probabilities.
    pub fn encoder_forward<E: Float>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        tokens: Var,
        pos: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = tokens;
        let mut maps = Vec::new();
        for layer in &self.encoder {
            let (y, a) = layer.forward(tape, p, x, pos)?;
            x = y;
            maps.push(a);
        }
        Ok((x, maps))
    }

    /// `[N, d]` query vectors expanded from the learned table.
    pub fn build_queries<E: Float>(&self, tape: &mut Tape<E>, p: &Bound) -> Result<Var> {
        let idx = query_index(self.cfg.query_mode, self.cfg.n, self.cfg.t);
        Ok(tape.index_select(p.var(self.query_embed), 0, &idx)?)
    }

    pub fn decoder_forward<E: Float>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        memory: Var,
        pos: Option<Var>,
        queries: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let key = if self.cfg.positional_cross_keys { add_opt(tape, memory, pos)? } else { memory };
        let mut x = queries;
        let mut maps = Vec::new();
        for layer in &self.decoder {
            let (y, a) = layer.forward(tape, p, x, queries, memory, key)?;
            x = y;
            maps.push(a);
        }
        if let Some(norm) = &self.decoder_norm {
            x = norm.forward(tape, p, x)?;
        }
        Ok((x, maps))
    }

    /// Class logits `[N, K+1]` and sigmoid boxes `[N, 4]`.
    pub fn predict_heads<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, o: Var) -> Result<(Var, Var)> {
        let logits = self.class_embed.forward(tape, p, o)?;
        let mut h = o;
        for (i, lin) in self.bbox_embed.iter().enumerate() {
            h = lin.forward(tape, p, h)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        Ok((logits, tape.sigmoid(h)))
    }

    /// Builds `[n, a, T, H0/4, W0/4]` per-instance feature stacks from the
    /// instance features `o` (`[N, d]`), the source tokens (`[L, d]`) and the
    /// stride-4 backbone features. The positional encoding, when given, is
    /// added to the attention keys so instances can be located by position
    /// as well as appearance. Returns the stacks and the attention maps
    /// `[T*n, heads, h, w]`.
    pub fn mask_head_forward<E: Float>(
        &self,
        tape: &mut Tape<E>,
        p: &Bound,
        o: Var,
        source: Var,
        pos: Option<Var>,
        fusion: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let (n, t, d, heads) = (cfg.n, cfg.t, cfg.d, cfg.heads);
        let r = self.raster();
        let hw = r.h * r.w;
        let mh = &self.mask_head;

        // Each prediction only attends to its own frame: batch over frames.
        let o3 = tape.reshape(o, &[t, n, d])?;
        let keyed = add_opt(tape, source, pos)?;
        let s3 = tape.reshape(keyed, &[t, hw, d])?;
        let q = mh.attn_q.forward(tape, p, o3)?;
        let k = mh.attn_k.forward(tape, p, s3)?;
        let qh = split_heads(tape, q, heads)?;
        let qh = tape.scale(qh, 1.0 / ((d / heads) as f64).sqrt());
        let kh = split_heads(tape, k, heads)?;
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let probs = tape.softmax(scores, 2)?;
        let maps = tape.reshape(probs, &[t, heads, n, r.h, r.w])?;
        let maps = tape.permute(maps, &[0, 2, 1, 3, 4])?;
        let maps = tape.reshape(maps, &[t * n, heads, r.h, r.w])?;

        let per_instance: Vec<usize> = (0..t).flat_map(|f| std::iter::repeat_n(f, n)).collect();
        let src_map = Self::unflatten(tape, source, r)?;
        let proj = mh.proj.forward(tape, p, src_map)?;
        let proj = tape.index_select(proj, 0, &per_instance)?;
        // Rescaled to mean 1 so the instance signal is not swamped by the
        // projected features it is concatenated with.
        let scaled = tape.scale(maps, hw as f64);
        let x = tape.concat(&[scaled, proj], 1)?;
        let x = mh.lay1.forward(tape, p, x)?;
        let (mh4, mw4) = cfg.mask_hw();
        let x = tape.upsample_bilinear(x, mh4, mw4)?;
        let skip = mh.adapter.forward(tape, p, fusion)?;
        let skip = tape.index_select(skip, 0, &per_instance)?;
        let x = tape.add(x, skip)?;
        let x = mh.lay2.forward(tape, p, x)?;
        let g = mh.out.forward(tape, p, x)?;
        // [T*n, a, h4, w4] -> [n, a, T, h4, w4]
        let a = cfg.mask_channels;
        let g = tape.reshape(g, &[t, n, a, mh4, mw4])?;
        let g = tape.permute(g, &[1, 2, 0, 3, 4])?;
        Ok((g, maps))
    }

    /// Mask logits `[n, T, H0/4, W0/4]` from the stacked features.
    pub fn segment_sequence<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, stacks: Var) -> Result<Var> {
        let s = tape.shape(stacks).to_vec();
        let (n, a, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let sh = &self.seg_head;
        if sh.three_d {
            let mut x = stacks;
            for b in &sh.blocks {
                x = b.forward(tape, p, x)?;
            }
            let x = sh.out.forward(tape, p, x)?;
            Ok(tape.reshape(x, &[n, t, h, w])?)
        } else {
            let x = tape.permute(stacks, &[0, 2, 1, 3, 4])?;
            let mut x = tape.reshape(x, &[n * t, a, h, w])?;
            for b in &sh.blocks {
                x = b.forward(tape, p, x)?;
            }
            let x = sh.out.forward(tape, p, x)?;
            Ok(tape.reshape(x, &[n, t, h, w])?)
        }
    }

    /// Full forward pass over one clip `[T, 3, H0, W0]`.
    pub fn forward<E: Float>(&self, tape: &mut Tape<E>, p: &Bound, frames: &Tensor<E>) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        if frames.shape() != [cfg.t, 3, cfg.height, cfg.width] {
            return arg_err(format!(
                "clip {:?} does not match the model's [{}, 3, {}, {}]",
                frames.shape(),
                cfg.t,
                cfg.height,
                cfg.width
            ));
        }
        let x = tape.constant(frames.clone());
        let (f0, fusion) = self.backbone_forward(tape, p, x)?;
        let f1 = self.input_proj.forward(tape, p, f0)?;
        let tokens = Self::flatten(tape, f1)?;
        let pos = if cfg.use_positional { Some(tape.constant(self.pos.cast())) } else { None };
        let (memory, encoder_attention) = self.encoder_forward(tape, p, tokens, pos)?;
        let queries = self.build_queries(tape, p)?;
        let (o, decoder_attention) = self.decoder_forward(tape, p, memory, pos, queries)?;
        let (class_logits, boxes) = self.predict_heads(tape, p, o)?;
        let source = match cfg.mask_feature_source {
            MaskFeatureSource::Encoder => memory,
            MaskFeatureSource::Backbone => tokens,
        };
        let (mask_features, mask_attention) = self.mask_head_forward(tape, p, o, source, pos, fusion)?;
        let mask_logits = self.segment_sequence(tape, p, mask_features)?;
        Ok(ModelOutput {
            preds: PredictionVars { n: cfg.n, t: cfg.t, class_logits, boxes, mask_logits },
            f0,
            fusion_features: fusion,
            f1,
            memory,
            instance_features: o,
            queries,
            mask_features,
            encoder_attention,
            decoder_attention,
            mask_attention,
        })
    }
}
