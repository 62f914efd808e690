//! ViT encoder: patch embedding, fixed sin-cos positions, a learnable class
//! token and a stack of pre-norm blocks whose intermediate outputs are exposed.

use qface_numerics::{ParamId, ParamStore, Real, RngStream, Session, Tensor, Var};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Block, Linear};

/// Pixel normalisation applied before patch embedding: `(v - 0.5) / 0.25`.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) / 0.25
}

/// Splits an `H × W × C` row-major image into raster-ordered patches, each
/// flattened in (row, column, channel) order.
pub fn patchify(image: &[f32], size: usize, channels: usize, patch: usize) -> Result<Vec<Vec<f32>>> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!("image size {size} is not divisible by patch size {patch}")));
    }
    if image.len() != size * size * channels {
        return Err(Error::Config(format!("expected {} values for a {size}x{size}x{channels} image, got {}", size * size * channels, image.len())));
    }
    let grid = size / patch;
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut p = Vec::with_capacity(patch * patch * channels);
            for y in gy * patch..(gy + 1) * patch {
                let row = (y * size + gx * patch) * channels;
                p.extend_from_slice(&image[row..row + patch * channels]);
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Replicates a greyscale image across `channels`, normalises it and patchifies.
pub fn image_patches(gray: &[f32], cfg: &EncoderConfig) -> Result<Vec<Vec<f32>>> {
    let hwc: Vec<f32> = gray.iter().flat_map(|&v| std::iter::repeat_n(normalize_pixel(v), cfg.channels)).collect();
    patchify(&hwc, cfg.image_size, cfg.channels, cfg.patch_size)
}

/// Stacks the patches of several images into a `[B, N, P]` tensor.
pub fn batch_patches<T: Real>(images: &[&[f32]], cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        for p in image_patches(img, cfg)? {
            data.extend(p.iter().map(|&v| T::lit(v as f64)));
        }
    }
    Ok(Tensor::new([images.len(), cfg.num_patches(), cfg.patch_dim()], data)?)
}

/// Fixed `[n_tokens, d]` table. Row 0 (class token) is zero; row `p + 1` holds
/// `sin(p·ω_i)` at column `2i` and `cos(p·ω_i)` at `2i + 1`, `ω_i = 10000^(-2i/d)`.
pub fn sincos_position_embedding(n_tokens: usize, d: usize) -> Result<Tensor<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("position embedding width {d} must be even")));
    }
    Ok(Tensor::from_fn([n_tokens, d], |i| {
        let (row, col) = (i / d, i % d);
        if row == 0 {
            return 0.0;
        }
        let omega = 10000f64.powf(-((col / 2 * 2) as f64) / d as f64);
        let a = (row - 1) as f64 * omega;
        if col % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    }))
}

/// One tapped encoder output: `[B, T, d]` tokens, class token first.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// 1-based block index.
    pub layer_index: usize,
    pub tokens: Var,
}

/// Per-block, per-sample residual factors for stochastic depth.
pub type DropPlan<T> = Vec<Vec<T>>;

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pos: Tensor<f64>,
}

impl Encoder {
    /// Registers parameters under `encoder.*`. The patch embedding and class
    /// token form learning-rate group 0; block `i` (1-based) forms group `i`.
    pub fn new<T: Real>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let patch_embed = Linear::new(store, rng, "encoder.patch_embed", cfg.patch_dim(), d, 0);
        let cls = store.add("encoder.cls", Tensor::zeros([d]), 0, false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, rng, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, i + 1))
            .collect::<Result<_>>()?;
        Ok(Encoder { cfg: cfg.clone(), patch_embed, cls, blocks, pos: sincos_position_embedding(cfg.num_tokens(), d)? })
    }

    /// The `[N + 1, d]` position table, class row first.
    pub fn positions(&self) -> &Tensor<f64> {
        &self.pos
    }

    /// Positions of the given patch indices for each sample: `[B, n, d]`.
    pub fn patch_positions<T: Real>(&self, rows: &[Vec<usize>]) -> Tensor<T> {
        let d = self.cfg.hidden_dim;
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n * d);
        for r in rows {
            for &p in r {
                data.extend(self.pos.row(p + 1).iter().map(|&v| T::lit(v)));
            }
        }
        Tensor::new([rows.len(), n, d], data).expect("position rows")
    }

    /// Embeds `[B, n, P]` patches, adds `pos` (`[B, n, d]`), prepends the class
    /// token and runs every block. Returns all block outputs in order.
    pub fn forward_tokens<T: Real>(
        &self,
        s: &mut Session<T>,
        patches: Var,
        pos: Tensor<T>,
        drop: Option<&DropPlan<T>>,
    ) -> Result<Vec<Var>> {
        let b = s.g.shape(patches)[0];
        let x = self.patch_embed.forward(s, patches)?;
        let pv = s.g.constant(pos);
        let x = s.g.add(x, pv)?;
        let cls = s.param(self.cls);
        let cls = s.g.repeat(cls, b);
        let cls = s.g.reshape(cls, vec![b, 1, self.cfg.hidden_dim])?;
        let mut x = s.g.concat(&[cls, x], 1)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(s, x, drop.map(|p| p[i].as_slice()))?.0;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Full-image encoding; returns the configured fusion taps, in order.
    pub fn encode<T: Real>(&self, s: &mut Session<T>, patches: Var, drop: Option<&DropPlan<T>>) -> Result<Vec<FeatureMap>> {
        let sh = s.g.shape(patches).to_vec();
        if sh.len() != 3 || sh[1] != self.cfg.num_patches() || sh[2] != self.cfg.patch_dim() {
            return Err(Error::Config(format!(
                "encoder expects [B, {}, {}] patches, got {sh:?}",
                self.cfg.num_patches(),
                self.cfg.patch_dim()
            )));
        }
        let all: Vec<usize> = (0..self.cfg.num_patches()).collect();
        let pos = self.patch_positions(&vec![all; sh[0]]);
        let outs = self.forward_tokens(s, patches, pos, drop)?;
        Ok(self.cfg.fusion_layers.iter().map(|&l| FeatureMap { layer_index: l, tokens: outs[l - 1] }).collect())
    }

    /// Output of the last block.
    pub fn encode_last<T: Real>(&self, s: &mut Session<T>, patches: Var, drop: Option<&DropPlan<T>>) -> Result<Var> {
        let b = s.g.shape(patches)[0];
        let all: Vec<usize> = (0..self.cfg.num_patches()).collect();
        let pos = self.patch_positions(&vec![all; b]);
        Ok(*self.forward_tokens(s, patches, pos, drop)?.last().expect("depth >= 1"))
    }
}
