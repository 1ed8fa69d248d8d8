//! Spherical vision transformer: equirectangular image to one scene vector.
//!
//! Patches are flattened RGB tiles, projected to the embedding width and
//! scaled by a latitude-dependent area weight; real spherical harmonics of
//! each patch position are projected to the same width and added. A stack of
//! pre-norm transformer blocks follows and the tokens are mean-pooled.

use alloc::vec::Vec;

use crate::data::SceneImage;
use crate::error::{Error, Result};
use crate::init::{linear, xavier_uniform};
use crate::math::sqrt;
use crate::model::Mode;
use crate::params::{param_tree, Linear};
use crate::rng::SplitMix64;
use crate::sphere::{area_weight, patch_center_to_sphere, real_sh_basis, sh_count, PatchGrid};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VitConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_px: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub sh_lmax: usize,
    /// Spread patch azimuths over the full turn instead of half of it.
    #[serde(default)]
    pub azimuth_full: bool,
}

impl VitConfig {
    /// 256×512 input, 16 px patches, width 384, 6 layers of 8 heads.
    pub fn full() -> Self {
        Self {
            image_h: 256,
            image_w: 512,
            patch_px: 16,
            embed_dim: 384,
            layers: 6,
            heads: 8,
            ffn_dim: 1536,
            dropout_p: 0.1,
            sh_lmax: 4,
            azimuth_full: false,
        }
    }

    /// 64×128 input, width 32, 2 layers of 4 heads.
    pub fn desk() -> Self {
        Self {
            image_h: 64,
            image_w: 128,
            patch_px: 16,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout_p: 0.1,
            sh_lmax: 4,
            azimuth_full: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim,
                self.heads
            )));
        }
        if self.embed_dim < 2 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be >= 2 and ffn_dim > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(alloc::format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_image(self.image_h, self.image_w, self.patch_px)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_px * self.patch_px
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub ffn_w1: T,
    pub ffn_w2: T,
}
param_tree!(BlockParams {
    leaves: [ln1_gamma, ln1_beta, w_q, w_k, w_v, w_o, ln2_gamma, ln2_beta, ffn_w1, ffn_w2]
});

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<T = Tensor> {
    pub patch_proj: Linear<T>,
    pub pe_proj: Linear<T>,
    pub layers: Vec<BlockParams<T>>,
}
param_tree!(VitParams {
    leaves: [],
    nodes: [patch_proj, pe_proj, layers]
});

impl VitParams {
    pub fn init(cfg: &VitConfig, rng: &mut SplitMix64) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                w_q: xavier_uniform(d, d, rng),
                w_k: xavier_uniform(d, d, rng),
                w_v: xavier_uniform(d, d, rng),
                w_o: xavier_uniform(d, d, rng),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                ffn_w1: xavier_uniform(d, cfg.ffn_dim, rng),
                ffn_w2: xavier_uniform(cfg.ffn_dim, d, rng),
            })
            .collect();
        Self {
            patch_proj: linear(cfg.patch_len(), d, rng),
            pe_proj: linear(sh_count(cfg.sh_lmax), d, rng),
            layers,
        }
    }
}

/// Flatten the image into one row per patch, patches in row-major grid order
/// and pixels within a patch in `(row, col, channel)` order.
pub fn extract_patches(image: &SceneImage, cfg: &VitConfig) -> Result<Tensor> {
    if image.width() != cfg.image_w || image.height() != cfg.image_h {
        return Err(Error::ImageDims {
            width: image.width(),
            height: image.height(),
            reason: "does not match the configured input size",
        });
    }
    let grid = cfg.grid()?;
    let p = cfg.patch_px;
    let mut data = Vec::with_capacity(grid.tokens() * cfg.patch_len());
    for gi in 0..grid.rows {
        for gj in 0..grid.cols {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gi * p + py, gj * p + px);
                    for c in 0..3 {
                        data.push(image.value(x, y, c));
                    }
                }
            }
        }
    }
    Tensor::new(&[grid.tokens(), cfg.patch_len()], data)
}

/// Per-token area weights `cos φ` at each patch band's middle latitude,
/// rescaled to mean 1 over the grid.
pub fn token_area_weights(grid: &PatchGrid) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.rows)
        .map(|i| area_weight(grid.band_center_latitude(i)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let mut out = Vec::with_capacity(grid.tokens());
    for w in &raw {
        for _ in 0..grid.cols {
            out.push(w / mean);
        }
    }
    out
}

pub fn embed_patches(tape: &mut Tape, patches: Var, proj: &Linear<Var>, grid: &PatchGrid) -> Result<Var> {
    let tokens = proj.forward(tape, patches)?;
    tape.scale_rows(tokens, &token_area_weights(grid))
}

/// `[tokens × (l_max+1)²]` spherical-harmonic basis at each patch position.
pub fn sh_position_basis(grid: &PatchGrid, l_max: usize, azimuth_full: bool) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grid.tokens() * sh_count(l_max));
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            data.extend(real_sh_basis(patch_center_to_sphere(i, j, grid, azimuth_full)?, l_max));
        }
    }
    Tensor::new(&[grid.tokens(), sh_count(l_max)], data)
}

pub fn positional_encoding(tape: &mut Tape, grid: &PatchGrid, proj: &Linear<Var>, cfg: &VitConfig) -> Result<Var> {
    let basis = tape.constant(sh_position_basis(grid, cfg.sh_lmax, cfg.azimuth_full)?)?;
    proj.forward(tape, basis)
}

/// Output of one transformer block plus its per-head attention matrices.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Multi-head self-attention with scaled dot-product weights per head.
pub fn multi_head_attention(tape: &mut Tape, x: Var, block: &BlockParams<Var>, cfg: &VitConfig) -> Result<(Var, Vec<Var>)> {
    let dk = cfg.head_dim();
    let q = tape.matmul(x, block.w_q)?;
    let k = tape.matmul(x, block.w_k)?;
    let v = tape.matmul(x, block.w_v)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.affine(logits, 1.0 / sqrt(dk as f64), 0.0)?;
        let alpha = tape.softmax(logits)?;
        attention.push(alpha);
        heads.push(tape.matmul(alpha, vh)?);
    }
    let joined = tape.concat_cols(&heads)?;
    Ok((tape.matmul(joined, block.w_o)?, attention))
}

/// Pre-norm block: `x + Drop(MHA(LN x))`, then `x + Drop(FFN(LN x))`.
pub fn attention_layer(
    tape: &mut Tape,
    x: Var,
    block: &BlockParams<Var>,
    cfg: &VitConfig,
    mode: &mut Mode<'_>,
) -> Result<BlockOutput> {
    let normed = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
    let (attn, attention) = multi_head_attention(tape, normed, block, cfg)?;
    let attn = mode.dropout(tape, attn, cfg.dropout_p)?;
    let x = tape.add(x, attn)?;

    let normed = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(normed, block.ffn_w1)?;
    let hidden = tape.gelu(hidden)?;
    let ffn = tape.matmul(hidden, block.ffn_w2)?;
    let ffn = mode.dropout(tape, ffn, cfg.dropout_p)?;
    Ok(BlockOutput {
        tokens: tape.add(x, ffn)?,
        attention,
    })
}

#[derive(Debug, Clone)]
pub struct SceneEncoding {
    /// `[1 × embed_dim]`
    pub features: Var,
    /// Attention matrices, layer-major then head.
    pub attention: Vec<Var>,
}

/// Encode pre-extracted patches (see [`extract_patches`]).
pub fn encode_patches(
    tape: &mut Tape,
    patches: &Tensor,
    params: &VitParams<Var>,
    cfg: &VitConfig,
    mode: &mut Mode<'_>,
) -> Result<SceneEncoding> {
    let grid = cfg.grid()?;
    let patches = tape.constant(patches.clone())?;
    let tokens = embed_patches(tape, patches, &params.patch_proj, &grid)?;
    let pe = positional_encoding(tape, &grid, &params.pe_proj, cfg)?;
    let mut x = tape.add(tokens, pe)?;
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    for block in &params.layers {
        let out = attention_layer(tape, x, block, cfg, mode)?;
        x = out.tokens;
        attention.extend(out.attention);
    }
    Ok(SceneEncoding {
        features: tape.mean_rows(x)?,
        attention,
    })
}

pub fn encode_scene(
    tape: &mut Tape,
    image: &SceneImage,
    params: &VitParams<Var>,
    cfg: &VitConfig,
    mode: &mut Mode<'_>,
) -> Result<SceneEncoding> {
    let patches = extract_patches(image, cfg)?;
    encode_patches(tape, &patches, params, cfg, mode)
}
