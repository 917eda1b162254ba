//! Convolutional autoencoder standing in for a frozen VAE, with circular
//! pre-padding in pixel space and post-padding in latent space.

use par_tensor::optim::clip_grad_norm;
use par_tensor::{AdamW, Boundary, OptimizerState, ParamStore, Purpose, RngStream, Scalar, Tape, Tensor, Var};

use crate::erp::pad_width;
use crate::error::{ParError, Result};
use crate::image::PanoImage;
use crate::nn::Conv;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub image_channels: usize,
    /// Channel width after each stride-2 stage.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub boundary: Boundary,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_channels: 3,
            widths: vec![16, 32, 64],
            latent_channels: 8,
            boundary: Boundary::Zero,
        }
    }
}

impl CodecConfig {
    /// Total downsampling factor.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.latent_channels == 0 || self.image_channels == 0 {
            return Err(ParError::contract(format!("degenerate codec config {self:?}")));
        }
        Ok(())
    }
}

/// Normalized latent `[C, h, w]` with `w = 2h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T: Scalar = f32> {
    data: Tensor<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.ndim() != 3 || data.dim(2) != 2 * data.dim(1) {
            return Err(ParError::contract(format!("latent must be [C, h, 2h], got {:?}", data.shape())));
        }
        Ok(LatentGrid { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

/// Per-channel affine normalization applied between codec and PAR model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        LatentStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of raw latents `[B, C, h, w]`.
    pub fn measure<T: Scalar>(raw: &Tensor<T>) -> Self {
        let (b, c, hw) = (raw.dim(0), raw.dim(1), raw.dim(2) * raw.dim(3));
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                for &x in &raw.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    mean[ci] += x.as_f64();
                    sq[ci] += x.as_f64() * x.as_f64();
                }
            }
        }
        let n = (b * hw) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| ((q / n - (s / n).powi(2)).max(0.0)).sqrt().max(1e-6))
            .collect();
        LatentStats {
            mean: mean.into_iter().map(|s| s / n).collect(),
            std,
        }
    }

    fn apply<T: Scalar>(&self, x: &Tensor<T>, forward: bool) -> Tensor<T> {
        let c = self.mean.len();
        let per = x.numel() / (x.dim(0) * c).max(1);
        let mut out = x.clone();
        let planes = x.numel() / per;
        for (pl, chunk) in out.data_mut().chunks_mut(per).enumerate().take(planes) {
            let ch = pl % c;
            let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            for v in chunk {
                *v = if forward { (*v - m) / s } else { *v * s + m };
            }
        }
        out
    }

    /// Raw `[B, C, h, w]` to normalized.
    pub fn normalize<T: Scalar>(&self, raw: &Tensor<T>) -> Tensor<T> {
        self.apply(raw, true)
    }

    pub fn denormalize<T: Scalar>(&self, norm: &Tensor<T>) -> Tensor<T> {
        self.apply(norm, false)
    }
}

#[derive(Debug, Clone)]
pub struct Codec<T: Scalar = f32> {
    pub config: CodecConfig,
    pub params: ParamStore<T>,
    pub stats: LatentStats,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
}

/// Circular padding of the trailing axis on the tape.
pub fn pad_var<'t, T: Scalar>(x: Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    if pad == 0 {
        return Ok(x);
    }
    let axis = x.shape().len() - 1;
    let w = x.shape()[axis];
    if pad > w {
        return Err(ParError::contract(format!("pad {pad} exceeds width {w}")));
    }
    let left = x.slice(axis, w - pad, pad)?;
    let right = x.slice(axis, 0, pad)?;
    Ok(x.tape().concat(&[left, x, right], axis)?)
}

pub fn crop_var<'t, T: Scalar>(x: Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    if pad == 0 {
        return Ok(x);
    }
    let axis = x.shape().len() - 1;
    let w = x.shape()[axis];
    Ok(x.slice(axis, pad, w - 2 * pad)?)
}

impl<T: Scalar> Codec<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, Purpose::Init).substream(1);
        let mut ps = ParamStore::new();
        let mut enc = Vec::new();
        let mut c_in = config.image_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            enc.push(Conv::new(&mut ps, &format!("codec.enc.{i}"), c_in, w, 3, 2, 1, false, &mut rng));
            c_in = w;
        }
        enc.push(Conv::new(&mut ps, "codec.enc.out", c_in, config.latent_channels, 3, 1, 1, false, &mut rng));
        let mut dec = Vec::new();
        let top = *config.widths.last().unwrap();
        dec.push(Conv::new(&mut ps, "codec.dec.in", config.latent_channels, top, 3, 1, 1, false, &mut rng));
        let mut c_in = top;
        for i in (0..config.widths.len()).rev() {
            let c_out = config.widths[i.saturating_sub(1)];
            dec.push(Conv::new(&mut ps, &format!("codec.dec.{i}"), c_in, c_out, 4, 2, 1, true, &mut rng));
            c_in = c_out;
        }
        dec.push(Conv::new(&mut ps, "codec.dec.out", c_in, config.image_channels, 3, 1, 1, false, &mut rng));
        Ok(Codec {
            stats: LatentStats::identity(config.latent_channels),
            config,
            params: ps,
            enc,
            dec,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    /// Pixel pad width for `r_pre` on width `w`; must be a stride multiple.
    pub fn pixel_pad(&self, r: f64, w: usize) -> Result<usize> {
        let p = pad_width(r, w)?;
        if p % self.stride() != 0 {
            return Err(ParError::contract(format!(
                "pre-padding r={r} on W={w} gives {p} columns, not a multiple of the stride {}",
                self.stride()
            )));
        }
        Ok(p)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.stride();
        if shape.len() != 4 || shape[1] != self.config.image_channels || shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(ParError::contract(format!(
                "codec input {shape:?} must be [B, {}, H, W] with H, W divisible by {s}",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    /// Raw latent of `x` (`[B, C, H, W]`, values in `[0, 1]`).
    pub fn encode_var<'t>(&self, p: &par_tensor::Bound<'t, T>, x: Var<'t, T>, r_pre: f64) -> Result<Var<'t, T>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let pad = self.pixel_pad(r_pre, shape[3])?;
        let mut h = pad_var(x.add_scalar(-0.5)?, pad)?;
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.apply(p, h, self.config.boundary)?;
            if i < last {
                h = h.silu()?;
            }
        }
        crop_var(h, pad / self.stride())
    }

    /// Image from raw latent `[B, C, h, w]`.
    pub fn decode_var<'t>(&self, p: &par_tensor::Bound<'t, T>, z: Var<'t, T>, r_post: f64) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.config.latent_channels {
            return Err(ParError::contract(format!(
                "latent {shape:?} must be [B, {}, h, w]",
                self.config.latent_channels
            )));
        }
        let pad = pad_width(r_post, shape[3])?;
        let mut h = pad_var(z, pad)?;
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.apply(p, h, self.config.boundary)?;
            if i < last {
                h = h.silu()?;
            }
        }
        crop_var(h.add_scalar(0.5)?, pad * self.stride())
    }

    fn batch(imgs: &[PanoImage<T>]) -> Result<Tensor<T>> {
        let first = imgs.first().ok_or_else(|| ParError::contract("empty image batch"))?;
        let mut data = Vec::with_capacity(imgs.len() * first.tensor().numel());
        for im in imgs {
            if im.tensor().shape() != first.tensor().shape() {
                return Err(ParError::contract("images in a batch must share a shape"));
            }
            data.extend(im.to_chw().into_data());
        }
        let (h, w, c) = (first.height(), first.width(), first.channels());
        Ok(Tensor::new(&[imgs.len(), c, h, w], data)?)
    }

    pub fn encode_raw(&self, imgs: &[PanoImage<T>], r_pre: f64) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(Self::batch(imgs)?);
        Ok(self.encode_var(&p, x, r_pre)?.value())
    }

    /// Normalized latent grid of one image.
    pub fn encode(&self, img: &PanoImage<T>, r_pre: f64) -> Result<LatentGrid<T>> {
        let raw = self.encode_raw(std::slice::from_ref(img), r_pre)?;
        let norm = self.stats.normalize(&raw);
        let s = norm.shape().to_vec();
        LatentGrid::new(norm.reshape(&s[1..])?)
    }

    pub fn decode(&self, lat: &LatentGrid<T>, r_post: f64) -> Result<PanoImage<T>> {
        let t = lat.tensor();
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        let raw = self.stats.denormalize(&t.clone().reshape(&shape)?);
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.decode_var(&p, tape.constant(raw), r_post)?.value();
        let s = out.shape().to_vec();
        PanoImage::from_chw(&out.reshape(&s[1..])?)
    }

    /// Encode then decode, the codec's reconstruction of `img`.
    pub fn reconstruct(&self, img: &PanoImage<T>, r_pre: f64, r_post: f64) -> Result<PanoImage<T>> {
        self.decode(&self.encode(img, r_pre)?, r_post)
    }

    /// Recomputes the latent normalization from `imgs`.
    pub fn fit_stats(&mut self, imgs: &[PanoImage<T>], r_pre: f64) -> Result<()> {
        let mut raws = Vec::new();
        for chunk in imgs.chunks(8) {
            raws.extend(self.encode_raw(chunk, r_pre)?.into_data());
        }
        let lat_h = imgs[0].height() / self.stride();
        let shape = [imgs.len(), self.config.latent_channels, lat_h, 2 * lat_h];
        self.stats = LatentStats::measure(&Tensor::new(&shape, raws)?);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub optimizer: AdamW,
    pub r_pre: f64,
    pub r_post: f64,
    pub clip: f64,
    pub seed: u64,
    /// Random cyclic shifts of training images (multiples of the stride).
    pub shift_augment: bool,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 1500,
            batch: 4,
            optimizer: AdamW {
                lr: 2e-3,
                decay_horizon: 1500,
                ..AdamW::default()
            },
            r_pre: 0.125,
            r_post: 0.125,
            clip: 1.0,
            seed: 0,
            shift_augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub steps: u64,
}

impl<T: Scalar> Codec<T> {
    /// Reconstruction MSE over `imgs` with the given padding ratios.
    pub fn mse(&self, imgs: &[PanoImage<T>], r_pre: f64, r_post: f64) -> Result<f64> {
        let mut total = 0.0;
        for im in imgs {
            total += self.reconstruct(im, r_pre, r_post)?.mse(im)?;
        }
        Ok(total / imgs.len() as f64)
    }

    /// One optimizer step on `batch`; returns the batch MSE before the step.
    pub fn train_step(&mut self, batch: &Tensor<T>, cfg: &CodecTrainConfig, opt: &mut OptimizerState<T>) -> Result<f64> {
        let (loss, mut grads) = {
            let tape = Tape::new();
            let p = self.params.bind(&tape, true);
            let x = tape.constant(batch.clone());
            let z = self.encode_var(&p, x, cfg.r_pre)?;
            let y = self.decode_var(&p, z, cfg.r_post)?;
            let loss = y.sub(x)?.square()?.mean()?;
            let g = tape.backward(loss)?;
            (loss.item().as_f64(), p.grads(&g))
        };
        if !loss.is_finite() {
            return Err(ParError::Numeric(format!("codec loss {loss} at step {}", opt.step)));
        }
        clip_grad_norm(&mut grads, cfg.clip);
        cfg.optimizer.step(&mut self.params, &grads, opt)?;
        Ok(loss)
    }
}

/// Trains the codec on `imgs`, then fits the latent statistics.
pub fn train_codec<T: Scalar>(
    codec: &mut Codec<T>,
    imgs: &[PanoImage<T>],
    cfg: &CodecTrainConfig,
    mut log: impl FnMut(u64, f64),
) -> Result<CodecReport> {
    if imgs.is_empty() {
        return Err(ParError::contract("codec training needs at least one image"));
    }
    let initial_mse = codec.mse(imgs, cfg.r_pre, cfg.r_post)?;
    let mut opt = OptimizerState::new(&codec.params);
    let data = RngStream::new(cfg.seed, Purpose::Data).substream(0xC0DEC);
    let s = codec.stride();
    for step in 0..cfg.steps {
        let mut rng = data.substream(step);
        let batch: Vec<PanoImage<T>> = (0..cfg.batch)
            .map(|_| {
                let im = &imgs[rng.below(imgs.len())];
                if cfg.shift_augment {
                    im.shift((rng.below(im.width() / s) * s) as isize)
                } else {
                    Ok(im.clone())
                }
            })
            .collect::<Result<_>>()?;
        let loss = codec.train_step(&Codec::batch(&batch)?, cfg, &mut opt)?;
        log(step, loss);
    }
    codec.fit_stats(imgs, cfg.r_pre)?;
    Ok(CodecReport {
        initial_mse,
        final_mse: codec.mse(imgs, cfg.r_pre, cfg.r_post)?,
        steps: cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(boundary: Boundary) -> Codec<f64> {
        Codec::new(
            CodecConfig {
                widths: vec![4, 6],
                latent_channels: 3,
                boundary,
                ..CodecConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn shapes() {
        let c = Codec::<f32>::new(CodecConfig::default(), 0).unwrap();
        let img = PanoImage::<f32>::from_fn(64, 3, |v, u, ch| ((v + u + ch) % 7) as f32 / 7.0).unwrap();
        let lat = c.encode(&img, 0.0).unwrap();
        assert_eq!(lat.tensor().shape(), &[8, 8, 16]);
        assert_eq!(c.decode(&lat, 0.0).unwrap().tensor().shape(), img.tensor().shape());
    }

    #[test]
    fn misaligned_prepad_rejected() {
        let c = small(Boundary::Zero);
        let img = PanoImage::<f64>::from_fn(16, 3, |_, _, _| 0.5).unwrap();
        // r·W/2 = 0.125·32/2 = 2, not a multiple of the stride 4.
        let e = c.encode(&img, 0.125).unwrap_err().to_string();
        assert!(e.contains("stride"), "{e}");
    }

    #[test]
    fn stats_normalize_round_trip() {
        let raw = Tensor::<f64>::from_fn(&[2, 3, 2, 4], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0);
        let st = LatentStats::measure(&raw);
        let n = st.normalize(&raw);
        let back = st.denormalize(&n);
        assert!(back.max_abs_diff(&raw) < 1e-12);
        let again = LatentStats::measure(&n);
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-12 && (again.std[c] - 1.0).abs() < 1e-9);
        }
    }
}
