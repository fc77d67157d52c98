//! Promptable segmentation network: windowed ViT image encoder with a
//! convolutional neck, point prompt encoder, and two-way transformer mask
//! decoder. Parameter names follow the public checkpoint layout so converted
//! safetensors weights load directly.

use std::collections::BTreeMap;

use candle_core::{Module, Result, Tensor, Var, D};
use candle_nn::{Conv2dConfig, ConvTranspose2dConfig, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::nn::{softmax, LayerNorm, LayerNorm2d, Mlp};

/// Architecture constants for one backbone variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub encoder_embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_num_heads: usize,
    pub encoder_global_attn_indexes: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub out_chans: usize,
    pub decoder_depth: usize,
    pub decoder_num_heads: usize,
    pub decoder_mlp_dim: usize,
    pub iou_head_hidden: usize,
    pub num_multimask_outputs: usize,
}

impl SamConfig {
    fn base(embed: usize, depth: usize, heads: usize, global: Vec<usize>) -> Self {
        SamConfig {
            img_size: 1024,
            patch_size: 16,
            encoder_embed_dim: embed,
            encoder_depth: depth,
            encoder_num_heads: heads,
            encoder_global_attn_indexes: global,
            window_size: 14,
            mlp_ratio: 4,
            out_chans: 256,
            decoder_depth: 2,
            decoder_num_heads: 8,
            decoder_mlp_dim: 2048,
            iou_head_hidden: 256,
            num_multimask_outputs: 3,
        }
    }

    pub fn vit_b() -> Self {
        Self::base(768, 12, 12, vec![2, 5, 8, 11])
    }

    pub fn vit_l() -> Self {
        Self::base(1024, 24, 16, vec![5, 11, 17, 23])
    }

    pub fn vit_h() -> Self {
        Self::base(1280, 32, 16, vec![7, 15, 23, 31])
    }

    /// Same topology at toy size, for tests and CPU smoke runs.
    pub fn tiny() -> Self {
        SamConfig {
            img_size: 64,
            patch_size: 8,
            encoder_embed_dim: 32,
            encoder_depth: 2,
            encoder_num_heads: 2,
            encoder_global_attn_indexes: vec![1],
            window_size: 4,
            mlp_ratio: 2,
            out_chans: 32,
            decoder_depth: 2,
            decoder_num_heads: 2,
            decoder_mlp_dim: 64,
            iou_head_hidden: 32,
            num_multimask_outputs: 3,
        }
    }

    /// Side of the embedding grid.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    /// Shape of one image embedding, `[C, H, W]`.
    pub fn embedding_shape(&self) -> [usize; 3] {
        [self.out_chans, self.grid(), self.grid()]
    }

    /// Side of the low-resolution mask logits.
    pub fn low_res_side(&self) -> usize {
        4 * self.grid()
    }
}

/// Which projections of the fused qkv layer carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    fn slot(self) -> usize {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

/// Trainable low-rank factors for one projection.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub target_id: String,
    pub a: Var,
    pub b: Var,
}

impl AdapterVars {
    fn delta(&self, x: &Tensor) -> Result<Tensor> {
        x.broadcast_matmul(&self.a.as_tensor().t()?)?
            .broadcast_matmul(&self.b.as_tensor().t()?)
    }
}

pub fn adapter_target_id(block: usize, projection: Projection) -> String {
    format!("image_encoder.blocks.{block}.attn.{}", projection.as_str())
}

fn rel_pos_table(q_size: usize, k_size: usize, rel_pos: &Tensor) -> Result<Tensor> {
    let max_rel_dist = 2 * q_size.max(k_size) - 1;
    if rel_pos.dim(0)? != max_rel_dist {
        candle_core::bail!(
            "relative position table has {} rows, expected {max_rel_dist}",
            rel_pos.dim(0)?
        );
    }
    let q_scale = (k_size as f64 / q_size as f64).max(1.0);
    let k_scale = (q_size as f64 / k_size as f64).max(1.0);
    let mut idx = Vec::with_capacity(q_size * k_size);
    for i in 0..q_size {
        for j in 0..k_size {
            let v = i as f64 * q_scale - j as f64 * k_scale + (k_size as f64 - 1.0) * k_scale;
            idx.push(v as u32);
        }
    }
    let idx = Tensor::from_vec(idx, q_size * k_size, rel_pos.device())?;
    rel_pos.index_select(&idx, 0)?.reshape((q_size, k_size, ()))
}

#[derive(Debug)]
struct EncoderAttention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
    scale: f64,
    rel_pos: Option<(Tensor, Tensor)>,
    adapters: Vec<(Projection, AdapterVars)>,
}

impl EncoderAttention {
    fn new(
        dim: usize,
        num_heads: usize,
        input_size: usize,
        adapters: Vec<(Projection, AdapterVars)>,
        vb: VarBuilder,
    ) -> Result<Self> {
        let head_dim = dim / num_heads;
        let rel_h = vb.get((2 * input_size - 1, head_dim), "rel_pos_h")?;
        let rel_w = vb.get((2 * input_size - 1, head_dim), "rel_pos_w")?;
        Ok(EncoderAttention {
            qkv: candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            num_heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
            rel_pos: Some((rel_h, rel_w)),
            adapters,
        })
    }

    fn qkv_with_adapters(&self, x: &Tensor) -> Result<Tensor> {
        let qkv = self.qkv.forward(x)?;
        if self.adapters.is_empty() {
            return Ok(qkv);
        }
        let dim = x.dim(D::Minus1)?;
        let mut parts = vec![
            qkv.narrow(D::Minus1, 0, dim)?,
            qkv.narrow(D::Minus1, dim, dim)?,
            qkv.narrow(D::Minus1, 2 * dim, dim)?,
        ];
        for (projection, adapter) in &self.adapters {
            let slot = projection.slot();
            parts[slot] = (&parts[slot] + adapter.delta(x)?)?;
        }
        Tensor::cat(&parts, D::Minus1)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let heads = self.num_heads;
        let hd = c / heads;
        let tokens = x.reshape((b, h * w, c))?;
        let qkv = self
            .qkv_with_adapters(&tokens)?
            .reshape((b, h * w, 3, heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .reshape((3, b * heads, h * w, hd))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.affine(self.scale, 0.0)?.matmul(&k.t()?)?;
        if let Some((rel_h, rel_w)) = &self.rel_pos {
            attn = add_decomposed_rel_pos(&attn, &q, rel_h, rel_w, (h, w))?;
        }
        let attn = softmax(&attn)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, heads, h, w, hd))?
            .permute((0, 2, 3, 1, 4))?
            .reshape((b, h * w, c))?;
        self.proj.forward(&out)?.reshape((b, h, w, c))
    }
}

fn add_decomposed_rel_pos(
    attn: &Tensor,
    q: &Tensor,
    rel_pos_h: &Tensor,
    rel_pos_w: &Tensor,
    (qh, qw): (usize, usize),
) -> Result<Tensor> {
    let (kh, kw) = (qh, qw);
    let table_h = rel_pos_table(qh, kh, rel_pos_h)?;
    let table_w = rel_pos_table(qw, kw, rel_pos_w)?;
    let (bh, _, dim) = q.dims3()?;
    let r_q = q.reshape((bh, qh, qw, dim))?;
    let rel_h = r_q
        .permute((1, 0, 2, 3))?
        .contiguous()?
        .reshape((qh, bh * qw, dim))?
        .matmul(&table_h.t()?.contiguous()?)?
        .reshape((qh, bh, qw, kh))?
        .permute((1, 0, 2, 3))?;
    let rel_w = r_q
        .permute((2, 0, 1, 3))?
        .contiguous()?
        .reshape((qw, bh * qh, dim))?
        .matmul(&table_w.t()?.contiguous()?)?
        .reshape((qw, bh, qh, kw))?
        .permute((1, 2, 0, 3))?;
    attn.reshape((bh, qh, qw, kh, kw))?
        .broadcast_add(&rel_h.unsqueeze(4)?)?
        .broadcast_add(&rel_w.unsqueeze(3)?)?
        .reshape((bh, qh * qw, kh * kw))
}

#[derive(Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: EncoderAttention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    window_size: usize,
}

fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, h, w, c) = x.dims4()?;
    let pad_h = (ws - h % ws) % ws;
    let pad_w = (ws - w % ws) % ws;
    let x = if pad_h > 0 { x.pad_with_zeros(1, 0, pad_h)? } else { x.clone() };
    let x = if pad_w > 0 { x.pad_with_zeros(2, 0, pad_w)? } else { x };
    let (hp, wp) = (h + pad_h, w + pad_w);
    let windows = x
        .reshape((b, hp / ws, ws, wp / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((windows, (hp, wp)))
}

fn window_unpartition(windows: &Tensor, ws: usize, (hp, wp): (usize, usize), (h, w): (usize, usize)) -> Result<Tensor> {
    let c = windows.dim(3)?;
    let b = windows.dim(0)? / (hp * wp / ws / ws);
    let x = windows
        .reshape((b, hp / ws, wp / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, hp, wp, c))?;
    let x = if hp > h { x.narrow(1, 0, h)? } else { x };
    let x = if wp > w { x.narrow(2, 0, w)? } else { x };
    x.contiguous()
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shortcut = x;
        let x = self.norm1.forward(x)?;
        let (h, w) = (x.dim(1)?, x.dim(2)?);
        let x = if self.window_size > 0 {
            let (windows, padded) = window_partition(&x, self.window_size)?;
            let out = self.attn.forward(&windows)?;
            window_unpartition(&out, self.window_size, padded, (h, w))?
        } else {
            self.attn.forward(&x)?
        };
        let x = (shortcut + x)?;
        let y = self.lin2.forward(&self.lin1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        x + y
    }
}

#[derive(Debug)]
pub struct ImageEncoder {
    patch_embed: candle_nn::Conv2d,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    neck_conv1: candle_nn::Conv2d,
    neck_ln1: LayerNorm2d,
    neck_conv2: candle_nn::Conv2d,
    neck_ln2: LayerNorm2d,
}

impl ImageEncoder {
    /// `adapters` maps block index to that block's adapters.
    pub fn new(
        cfg: &SamConfig,
        mut adapters: BTreeMap<usize, Vec<(Projection, AdapterVars)>>,
        vb: VarBuilder,
    ) -> Result<Self> {
        let dim = cfg.encoder_embed_dim;
        let grid = cfg.grid();
        let patch_embed = candle_nn::conv2d(
            3,
            dim,
            cfg.patch_size,
            Conv2dConfig {
                stride: cfg.patch_size,
                ..Default::default()
            },
            vb.pp("patch_embed.proj"),
        )?;
        let pos_embed = vb.get_with_hints((1, grid, grid, dim), "pos_embed", candle_nn::init::ZERO)?;
        let mut blocks = Vec::with_capacity(cfg.encoder_depth);
        for i in 0..cfg.encoder_depth {
            let global = cfg.encoder_global_attn_indexes.contains(&i);
            let window_size = if global { 0 } else { cfg.window_size };
            let input_size = if global { grid } else { cfg.window_size };
            let bvb = vb.pp(format!("blocks.{i}"));
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(dim, 1e-6, bvb.pp("norm1"))?,
                attn: EncoderAttention::new(
                    dim,
                    cfg.encoder_num_heads,
                    input_size,
                    adapters.remove(&i).unwrap_or_default(),
                    bvb.pp("attn"),
                )?,
                norm2: LayerNorm::new(dim, 1e-6, bvb.pp("norm2"))?,
                lin1: candle_nn::linear(dim, dim * cfg.mlp_ratio, bvb.pp("mlp.lin1"))?,
                lin2: candle_nn::linear(dim * cfg.mlp_ratio, dim, bvb.pp("mlp.lin2"))?,
                window_size,
            });
        }
        if let Some(i) = adapters.keys().next() {
            candle_core::bail!("adapter refers to block {i}, encoder has {} blocks", cfg.encoder_depth);
        }
        let out = cfg.out_chans;
        let neck_conv1 = candle_nn::conv2d_no_bias(dim, out, 1, Default::default(), vb.pp("neck.0"))?;
        let neck_ln1 = LayerNorm2d::new(out, 1e-6, vb.pp("neck.1"))?;
        let neck_conv2 = candle_nn::conv2d_no_bias(
            out,
            out,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("neck.2"),
        )?;
        let neck_ln2 = LayerNorm2d::new(out, 1e-6, vb.pp("neck.3"))?;
        Ok(ImageEncoder {
            patch_embed,
            pos_embed,
            blocks,
            neck_conv1,
            neck_ln1,
            neck_conv2,
            neck_ln2,
        })
    }
}

impl Module for ImageEncoder {
    /// `(B, 3, S, S)` normalized pixels to `(B, out_chans, S/p, S/p)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = self
            .patch_embed
            .forward(x)?
            .permute((0, 2, 3, 1))?
            .broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = x.permute((0, 3, 1, 2))?.contiguous()?;
        let x = self.neck_ln1.forward(&self.neck_conv1.forward(&x)?)?;
        self.neck_ln2.forward(&self.neck_conv2.forward(&x)?)
    }
}

/// Random Fourier positional encoding of normalized coordinates.
#[derive(Debug)]
pub struct PositionEncoding {
    gaussian: Tensor,
}

impl PositionEncoding {
    pub fn new(num_pos_feats: usize, vb: VarBuilder) -> Result<Self> {
        let gaussian = vb.get_with_hints(
            (2, num_pos_feats),
            "positional_encoding_gaussian_matrix",
            candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        Ok(PositionEncoding { gaussian })
    }

    /// Coordinates in `[0, 1]`, shape `(..., 2)`, to features `(..., 2·num_pos_feats)`.
    fn encode(&self, coords: &Tensor) -> Result<Tensor> {
        let coords = coords.affine(2.0, -1.0)?;
        let proj = coords.broadcast_matmul(&self.gaussian)?.affine(2.0 * std::f64::consts::PI, 0.0)?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)
    }

    /// Dense encoding of an `h × w` grid, `(C, h, w)`.
    pub fn grid(&self, h: usize, w: usize) -> Result<Tensor> {
        let dev = self.gaussian.device();
        let mut coords = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                coords.push((j as f32 + 0.5) / w as f32);
                coords.push((i as f32 + 0.5) / h as f32);
            }
        }
        let coords = Tensor::from_vec(coords, (h, w, 2), dev)?.to_dtype(self.gaussian.dtype())?;
        self.encode(&coords)?.permute((2, 0, 1))
    }
}

/// Foreground (1), background (0) or padding (-1) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
    pub label: i32,
}

#[derive(Debug)]
pub struct PromptEncoder {
    pub pe: PositionEncoding,
    point_embeddings: Vec<Tensor>,
    not_a_point: Tensor,
    no_mask: Tensor,
    img_size: usize,
    embed_dim: usize,
}

impl PromptEncoder {
    /// `frozen` holds the positional encoding buffer, `vb` the learned embeddings.
    pub fn new(embed_dim: usize, img_size: usize, frozen: VarBuilder, vb: VarBuilder) -> Result<Self> {
        let init = candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 };
        let point_embeddings = (0..4)
            .map(|i| vb.get_with_hints((1, embed_dim), &format!("point_embeddings.{i}.weight"), init))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptEncoder {
            pe: PositionEncoding::new(embed_dim / 2, frozen.pp("pe_layer"))?,
            point_embeddings,
            not_a_point: vb.get_with_hints((1, embed_dim), "not_a_point_embed.weight", init)?,
            no_mask: vb.get_with_hints((1, embed_dim), "no_mask_embed.weight", init)?,
            img_size,
            embed_dim,
        })
    }

    /// Sparse tokens `(B, N + 1, C)` for the same point set on every image,
    /// or `None` without points. Coordinates are in model input pixels.
    pub fn embed_points(&self, points: &[PointPrompt], batch: usize) -> Result<Option<Tensor>> {
        if points.is_empty() {
            return Ok(None);
        }
        let dev = self.no_mask.device();
        let dtype = self.no_mask.dtype();
        let mut padded = points.to_vec();
        padded.push(PointPrompt { x: 0.0, y: 0.0, label: -1 });
        let mut rows = Vec::with_capacity(padded.len());
        for p in &padded {
            let row = if p.label == -1 {
                self.not_a_point.clone()
            } else {
                let s = self.img_size as f32;
                let coords = Tensor::new(&[[(p.x + 0.5) / s, (p.y + 0.5) / s]], dev)?.to_dtype(dtype)?;
                let slot = if p.label == 1 { 1 } else { 0 };
                (self.pe.encode(&coords)? + &self.point_embeddings[slot])?
            };
            rows.push(row);
        }
        let tokens = Tensor::cat(&rows, 0)?.unsqueeze(0)?;
        Ok(Some(tokens.broadcast_as((batch, padded.len(), self.embed_dim))?.contiguous()?))
    }

    /// Dense prompt `(B, C, h, w)` for the no-mask case.
    pub fn dense(&self, batch: usize, h: usize, w: usize) -> Result<Tensor> {
        self.no_mask
            .reshape((1, self.embed_dim, 1, 1))?
            .broadcast_as((batch, self.embed_dim, h, w))
    }
}

#[derive(Debug)]
struct DecoderAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    num_heads: usize,
}

impl DecoderAttention {
    fn new(dim: usize, num_heads: usize, downsample: usize, vb: VarBuilder) -> Result<Self> {
        let internal = dim / downsample;
        Ok(DecoderAttention {
            q_proj: candle_nn::linear(dim, internal, vb.pp("q_proj"))?,
            k_proj: candle_nn::linear(dim, internal, vb.pp("k_proj"))?,
            v_proj: candle_nn::linear(dim, internal, vb.pp("v_proj"))?,
            out_proj: candle_nn::linear(internal, dim, vb.pp("out_proj"))?,
            num_heads,
        })
    }

    fn separate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.num_heads, c / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.separate(&self.q_proj.forward(q)?)?;
        let k = self.separate(&self.k_proj.forward(k)?)?;
        let v = self.separate(&self.v_proj.forward(v)?)?;
        let (b, heads, n, hd) = q.dims4()?;
        let attn = softmax(&q.matmul(&k.t()?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, heads * hd))?;
        self.out_proj.forward(&out)
    }
}

#[derive(Debug)]
struct TwoWayBlock {
    self_attn: DecoderAttention,
    norm1: LayerNorm,
    cross_token_to_image: DecoderAttention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_image_to_token: DecoderAttention,
    skip_first_layer_pe: bool,
}

impl TwoWayBlock {
    fn new(dim: usize, heads: usize, mlp_dim: usize, skip_first_layer_pe: bool, vb: VarBuilder) -> Result<Self> {
        Ok(TwoWayBlock {
            self_attn: DecoderAttention::new(dim, heads, 1, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            cross_token_to_image: DecoderAttention::new(dim, heads, 2, vb.pp("cross_attn_token_to_image"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            lin1: candle_nn::linear(dim, mlp_dim, vb.pp("mlp.lin1"))?,
            lin2: candle_nn::linear(mlp_dim, dim, vb.pp("mlp.lin2"))?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            norm4: LayerNorm::new(dim, 1e-5, vb.pp("norm4"))?,
            cross_image_to_token: DecoderAttention::new(dim, heads, 2, vb.pp("cross_attn_image_to_token"))?,
            skip_first_layer_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.cross_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let mlp = self.lin2.forward(&self.lin1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(queries + mlp)?)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let keys = (keys + self.cross_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

#[derive(Debug)]
struct TwoWayTransformer {
    layers: Vec<TwoWayBlock>,
    final_attn: DecoderAttention,
    norm_final: LayerNorm,
}

impl TwoWayTransformer {
    fn new(cfg: &SamConfig, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.out_chans;
        let layers = (0..cfg.decoder_depth)
            .map(|i| {
                TwoWayBlock::new(
                    dim,
                    cfg.decoder_num_heads,
                    cfg.decoder_mlp_dim,
                    i == 0,
                    vb.pp(format!("layers.{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TwoWayTransformer {
            layers,
            final_attn: DecoderAttention::new(dim, cfg.decoder_num_heads, 2, vb.pp("final_attn_token_to_image"))?,
            norm_final: LayerNorm::new(dim, 1e-5, vb.pp("norm_final_attn"))?,
        })
    }

    fn forward(&self, image: &Tensor, image_pe: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let image = image.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let image_pe = image_pe.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let mut queries = tokens.clone();
        let mut keys = image;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, &image_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = (&keys + &image_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        Ok((self.norm_final.forward(&queries)?, keys))
    }
}

#[derive(Debug)]
pub struct MaskDecoder {
    iou_token: Tensor,
    mask_tokens: Tensor,
    transformer: TwoWayTransformer,
    upscale1: candle_nn::ConvTranspose2d,
    upscale_ln: LayerNorm2d,
    upscale2: candle_nn::ConvTranspose2d,
    hypernetworks: Vec<Mlp>,
    iou_head: Mlp,
    dim: usize,
}

impl MaskDecoder {
    pub fn new(cfg: &SamConfig, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.out_chans;
        let n_masks = cfg.num_multimask_outputs + 1;
        let init = candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 };
        let up_cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let hypernetworks = (0..n_masks)
            .map(|i| Mlp::new(dim, dim, dim / 8, 3, vb.pp(format!("output_hypernetworks_mlps.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskDecoder {
            iou_token: vb.get_with_hints((1, dim), "iou_token.weight", init)?,
            mask_tokens: vb.get_with_hints((n_masks, dim), "mask_tokens.weight", init)?,
            transformer: TwoWayTransformer::new(cfg, vb.pp("transformer"))?,
            upscale1: candle_nn::conv_transpose2d(dim, dim / 4, 2, up_cfg, vb.pp("output_upscaling.0"))?,
            upscale_ln: LayerNorm2d::new(dim / 4, 1e-6, vb.pp("output_upscaling.1"))?,
            upscale2: candle_nn::conv_transpose2d(dim / 4, dim / 8, 2, up_cfg, vb.pp("output_upscaling.3"))?,
            hypernetworks,
            iou_head: Mlp::new(dim, cfg.iou_head_hidden, n_masks, 3, vb.pp("iou_prediction_head"))?,
            dim,
        })
    }

    /// Single-mask logits `(B, 1, 4h, 4w)` and the predicted IoU of that mask `(B, 1)`.
    pub fn forward(
        &self,
        image_embeddings: &Tensor,
        image_pe: &Tensor,
        sparse: Option<&Tensor>,
        dense: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = image_embeddings.dims4()?;
        let n_masks = self.hypernetworks.len();
        let output_tokens = Tensor::cat(&[&self.iou_token, &self.mask_tokens], 0)?
            .unsqueeze(0)?
            .broadcast_as((b, 1 + n_masks, self.dim))?
            .contiguous()?;
        let tokens = match sparse {
            Some(s) => Tensor::cat(&[&output_tokens, s], 1)?,
            None => output_tokens,
        };
        let src = (image_embeddings + dense)?;
        let pos = image_pe.unsqueeze(0)?.broadcast_as((b, c, h, w))?;
        let (hs, src) = self.transformer.forward(&src, &pos, &tokens)?;
        let iou_out = hs.narrow(1, 0, 1)?.squeeze(1)?;
        let src = src.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        let up = self.upscale_ln.forward(&self.upscale1.forward(&src)?)?.gelu_erf()?;
        let up = self.upscale2.forward(&up)?.gelu_erf()?;
        let (_, cu, hu, wu) = up.dims4()?;
        let token = hs.narrow(1, 1, 1)?.squeeze(1)?;
        let hyper = self.hypernetworks[0].forward(&token)?.unsqueeze(1)?;
        let masks = hyper.matmul(&up.reshape((b, cu, hu * wu))?)?.reshape((b, 1, hu, wu))?;
        let iou = self.iou_head.forward(&iou_out)?.narrow(1, 0, 1)?;
        Ok((masks, iou))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_pos_index_matches_offsets() {
        let table = Tensor::arange(0f32, 7.0, &candle_core::Device::Cpu)
            .unwrap()
            .reshape((7, 1))
            .unwrap();
        let t = rel_pos_table(4, 4, &table).unwrap().squeeze(2).unwrap();
        let v = t.to_vec2::<f32>().unwrap();
        assert_eq!(v[0], vec![3.0, 2.0, 1.0, 0.0]);
        assert_eq!(v[3], vec![6.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn window_round_trip_with_padding() {
        let x = Tensor::randn(0f32, 1.0, (2, 5, 7, 3), &candle_core::Device::Cpu).unwrap();
        let (w, padded) = window_partition(&x, 4).unwrap();
        assert_eq!(w.dims(), &[2 * 2 * 2, 4, 4, 3]);
        let back = window_unpartition(&w, 4, padded, (5, 7)).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn vit_b_embedding_shape() {
        assert_eq!(SamConfig::vit_b().embedding_shape(), [256, 64, 64]);
        assert_eq!(SamConfig::vit_b().low_res_side(), 256);
    }
}
