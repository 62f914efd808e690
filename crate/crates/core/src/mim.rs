//! Masked image modelling: hide most patches, encode the visible ones and
//! reconstruct the hidden pixels with a small transformer decoder.

use qface_numerics::{AnyTensor, Checkpoint, Grads, ParamId, ParamStore, Purpose, Real, RngStream, Session, Tensor, Var};

use crate::config::{EncoderConfig, MimConfig, OptimizerConfig};
use crate::encoder::{image_patches, Encoder};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Block, LayerNorm, Linear};
use crate::optim::{lr_at, AdamW};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    /// Hidden patch indices, ascending.
    pub masked: Vec<usize>,
    /// Visible patch indices, ascending.
    pub visible: Vec<usize>,
}

/// Masks `round(ratio · n)` patches uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_m = (ratio * n as f64).round() as usize;
    let mut masked = rng.sample_indices(n, n_m);
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { n, masked, visible })
}

/// Reconstruction decoder, registered under `mim.*` in learning-rate group `group`.
#[derive(Clone, Debug)]
pub struct MimDecoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
}

impl MimDecoder {
    pub fn new<T: Real>(
        cfg: &EncoderConfig,
        depth: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        group: usize,
    ) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(MimDecoder {
            embed: Linear::new(store, rng, "mim.embed", d, d, group),
            mask_token: store.add("mim.mask_token", gaussian(rng, &[d], 0.02), group, false),
            blocks: (0..depth)
                .map(|i| Block::new(store, rng, &format!("mim.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, group))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "mim.norm", d, group),
            pred: Linear::new(store, rng, "mim.pred", d, cfg.patch_dim(), group),
        })
    }
}

/// Encoder plus reconstruction decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct MimModel {
    pub encoder: Encoder,
    pub decoder: MimDecoder,
}

impl MimModel {
    pub fn new<T: Real>(cfg: &EncoderConfig, decoder_depth: usize, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        let encoder = Encoder::new(cfg, store, rng)?;
        let decoder = MimDecoder::new(cfg, decoder_depth, store, rng, cfg.depth + 1)?;
        Ok(MimModel { encoder, decoder })
    }
}

fn gather_patches<T: Real>(patches: &[Vec<Vec<f32>>], idx: &[&[usize]]) -> Tensor<T> {
    let p = patches[0][0].len();
    let n = idx.first().map_or(0, |v| v.len());
    let mut data = Vec::with_capacity(patches.len() * n * p);
    for (img, rows) in patches.iter().zip(idx) {
        for &r in rows.iter() {
            data.extend(img[r].iter().map(|&v| T::lit(v as f64)));
        }
    }
    Tensor::new([patches.len(), n, p], data).expect("patch gather")
}

/// Reconstructs the masked patches of each image: returns `[B, N_m, P]`.
///
/// `patches[b]` are the normalised patches of image `b`; all plans must mask
/// the same number of patches. The encoder only sees visible patches.
pub fn mim_forward<T: Real>(
    s: &mut Session<T>,
    model: &MimModel,
    patches: &[Vec<Vec<f32>>],
    plans: &[MaskPlan],
) -> Result<Var> {
    let enc = &model.encoder;
    let dec = &model.decoder;
    let b = plans.len();
    let n = enc.cfg.num_patches();
    let d = enc.cfg.hidden_dim;
    let p = enc.cfg.patch_dim();
    if patches.len() != b || b == 0 {
        return Err(Error::Config(format!("{} images for {b} mask plans", patches.len())));
    }
    let (n_m, n_v) = (plans[0].masked.len(), plans[0].visible.len());
    if plans.iter().any(|pl| pl.n != n || pl.masked.len() != n_m) {
        return Err(Error::Config("mask plans must share patch count and mask size".into()));
    }
    if n_m == 0 {
        return Ok(s.g.constant(Tensor::zeros([b, 0, p])));
    }
    let vis: Vec<&[usize]> = plans.iter().map(|pl| pl.visible.as_slice()).collect();
    let visible = s.g.constant(gather_patches::<T>(patches, &vis));
    let pos = enc.patch_positions::<T>(&plans.iter().map(|pl| pl.visible.clone()).collect::<Vec<_>>());
    let latent = *enc.forward_tokens(s, visible, pos, None)?.last().expect("depth >= 1");
    let x = dec.embed.forward(s, latent)?;

    // Scatter back to full length: table rows are the B·(N_v+1) embedded
    // tokens followed by the shared mask token.
    let flat = s.g.reshape(x, vec![b * (n_v + 1), d])?;
    let mt = s.param(dec.mask_token);
    let mt = s.g.reshape(mt, vec![1, d])?;
    let table = s.g.concat(&[flat, mt], 0)?;
    let mask_row = b * (n_v + 1);
    let mut idx = Vec::with_capacity(b * (n + 1));
    for (bi, pl) in plans.iter().enumerate() {
        let base = bi * (n_v + 1);
        idx.push(base);
        let mut rank = vec![usize::MAX; n];
        pl.visible.iter().enumerate().for_each(|(r, &v)| rank[v] = r);
        for &r in rank.iter() {
            idx.push(if r == usize::MAX { mask_row } else { base + 1 + r });
        }
    }
    let full = s.g.gather_rows(table, idx)?;
    let full = s.g.reshape(full, vec![b, n + 1, d])?;
    let pe = s.g.constant(enc.positions().cast::<T>());
    let mut h = s.g.add_bcast(full, pe)?;
    for blk in &dec.blocks {
        h = blk.forward(s, h, None)?.0;
    }
    let h = dec.norm.forward(s, h)?;
    let out = dec.pred.forward(s, h)?;
    let out = s.g.reshape(out, vec![b * (n + 1), p])?;
    let rows: Vec<usize> =
        plans.iter().enumerate().flat_map(|(bi, pl)| pl.masked.iter().map(move |&m| bi * (n + 1) + 1 + m)).collect();
    let rec = s.g.gather_rows(out, rows)?;
    Ok(s.g.reshape(rec, vec![b, n_m, p])?)
}

/// Masked-patch targets matching [`mim_forward`]'s output layout.
pub fn mim_targets<T: Real>(patches: &[Vec<Vec<f32>>], plans: &[MaskPlan]) -> Tensor<T> {
    let idx: Vec<&[usize]> = plans.iter().map(|pl| pl.masked.as_slice()).collect();
    gather_patches(patches, &idx)
}

/// Per image, the sum over masked patches of the mean absolute pixel error;
/// averaged over images. `rec` and `target` are `[B, N_m, P]`.
pub fn mim_loss<T: Real>(s: &mut Session<T>, rec: Var, target: Var) -> Result<Var> {
    let (rs, ts) = (s.g.shape(rec).to_vec(), s.g.shape(target).to_vec());
    if rs != ts || rs.len() != 3 {
        return Err(Error::Config(format!("reconstruction {rs:?} vs target {ts:?}")));
    }
    if rs[1] == 0 || rs[2] == 0 {
        let z = s.g.scale(rec, T::zero());
        return Ok(s.g.sum_all(z));
    }
    let l = s.g.l1(rec, target)?;
    Ok(s.g.scale(l, T::lit(rs[1] as f64)))
}

/// One row of `pretrain_log.csv`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub model: MimModel,
    pub log: Vec<PretrainLogRow>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Loss on fixed held-out images with masks drawn from `seed`.
pub fn eval_loss(store: &ParamStore<f32>, model: &MimModel, images: &[Vec<f32>], ratio: f64, seed: u64) -> Result<f64> {
    let cfg = &model.encoder.cfg;
    let mut rng = RngStream::new(seed, Purpose::Masking);
    let plans: Vec<MaskPlan> =
        images.iter().map(|_| sample_mask(cfg.num_patches(), ratio, &mut rng)).collect::<Result<_>>()?;
    let chunks: Vec<(usize, usize)> = (0..images.len()).step_by(64).map(|i| (i, (i + 64).min(images.len()))).collect();
    let parts = crate::parallel::map(&chunks, |&(a, b)| -> Result<f64> {
        let patches: Vec<Vec<Vec<f32>>> = images[a..b].iter().map(|im| image_patches(im, cfg)).collect::<Result<_>>()?;
        let mut s = Session::frozen(store);
        let rec = mim_forward(&mut s, model, &patches, &plans[a..b])?;
        let t = s.g.constant(mim_targets::<f32>(&patches, &plans[a..b]));
        let l = mim_loss(&mut s, rec, t)?;
        Ok(s.g.value(l).item() as f64 * (b - a) as f64)
    });
    let total: f64 = parts.into_iter().sum::<Result<f64>>()?;
    Ok(total / images.len() as f64)
}

/// Seed offset separating the held-out mask draw from training masks.
pub const EVAL_MASK_SEED: u64 = 0x4d49_4d45;

/// Pretrains encoder and decoder on `train` for `cfg.schedule.total_steps`
/// steps; reconstruction loss on `held_out` is measured before and after.
pub fn pretrain(
    enc_cfg: &EncoderConfig,
    cfg: &MimConfig,
    optim: &OptimizerConfig,
    train: &Dataset,
    held_out: &[Vec<f32>],
    seed: u64,
    mut on_step: impl FnMut(&PretrainLogRow),
) -> Result<PretrainOutcome> {
    let mut store = ParamStore::<f32>::new();
    let model = MimModel::new(enc_cfg, cfg.decoder_depth, &mut store, &mut RngStream::new(seed, Purpose::Init))?;
    let mut data_rng = RngStream::new(seed, Purpose::Data);
    let mut mask_rng = RngStream::new(seed, Purpose::Masking);
    let ocfg = OptimizerConfig { weight_decay: cfg.weight_decay, ..optim.clone() };
    let mut opt = AdamW::new(&ocfg, &store);
    let initial_eval = eval_loss(&store, &model, held_out, cfg.mask_ratio, seed ^ EVAL_MASK_SEED)?;
    let mut log = Vec::new();
    let bsz = cfg.batch_size.min(train.len());
    for step in 0..cfg.schedule.total_steps {
        let idx = data_rng.sample_indices(train.len(), bsz);
        let patches: Vec<Vec<Vec<f32>>> =
            idx.iter().map(|&i| image_patches(&train.images[i], enc_cfg)).collect::<Result<_>>()?;
        let plans: Vec<MaskPlan> = idx
            .iter()
            .map(|_| sample_mask(enc_cfg.num_patches(), cfg.mask_ratio, &mut mask_rng))
            .collect::<Result<_>>()?;
        let mut s = Session::new(&store);
        let rec = mim_forward(&mut s, &model, &patches, &plans)?;
        let t = s.g.constant(mim_targets::<f32>(&patches, &plans));
        let loss = mim_loss(&mut s, rec, t)?;
        s.g.backward(loss)?;
        let mut grads = Grads::zeros_like(&store);
        s.accumulate_grads(&mut grads);
        let value = s.g.value(loss).item() as f64;
        drop(s);
        let lr = lr_at(step + 1, &cfg.schedule);
        opt.update(&mut store, &grads, lr, |_| 1.0)?;
        let row = PretrainLogRow { step, loss: value, lr };
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            on_step(&row);
        }
        log.push(row);
    }
    let final_eval = eval_loss(&store, &model, held_out, cfg.mask_ratio, seed ^ EVAL_MASK_SEED)?;
    Ok(PretrainOutcome { store, model, log, initial_eval, final_eval })
}

/// Saves the encoder weights with the encoder config in the metadata.
pub fn save_pretrained(store: &ParamStore<f32>, cfg: &EncoderConfig) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
        ckpt.push(p.name.clone(), AnyTensor::from_real(p.value.clone()));
    }
    ckpt.meta = serde_json::json!({ "kind": "mim", "encoder": cfg });
    ckpt
}
