//! Iterative masked generation over a token grid with a known set, guided
//! per-token denoising, and the text-to-panorama, outpainting and editing
//! entry points built on it.

use std::f64::consts::FRAC_PI_2;

use par_tensor::{Purpose, RngStream, Scalar, Tape, Tensor};

use crate::codec::{Codec, LatentGrid};
use crate::error::{ParError, Result};
use crate::image::PanoImage;
use crate::io::GrayImage;
use crate::model::{patchify, unpatchify, BackboneInput, ParModel};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupSchedule {
    #[default]
    Uniform,
    Cosine,
}

impl std::str::FromStr for GroupSchedule {
    type Err = ParError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GroupSchedule::Uniform),
            "cosine" => Ok(GroupSchedule::Cosine),
            _ => Err(ParError::contract(format!("unknown group schedule {s:?}"))),
        }
    }
}

/// Group sizes for `n` positions over `steps` steps, each at least one and
/// non-decreasing.
pub fn group_sizes(n: usize, steps: usize, schedule: GroupSchedule) -> Vec<usize> {
    let steps = steps.min(n).max(1);
    let mut sizes = match schedule {
        GroupSchedule::Uniform => (0..steps).map(|s| n / steps + usize::from(s >= steps - n % steps)).collect(),
        GroupSchedule::Cosine => {
            // Each group gets one slot; the rest follow the cosine decay of
            // the remaining-masked count, allocated by cumulative rounding.
            let extra = (n - steps) as f64;
            let done = |s: usize| (extra * (1.0 - (FRAC_PI_2 * s as f64 / steps as f64).cos())).round() as usize;
            let mut v: Vec<usize> = (0..steps).map(|s| 1 + done(s + 1) - done(s)).collect();
            v.sort_unstable();
            v
        }
    };
    if n == 0 {
        sizes.clear();
    }
    sizes
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    /// Disjoint position groups covering the unknown set, in decoding order.
    pub groups: Vec<Vec<usize>>,
    pub schedule: GroupSchedule,
    pub seed: u64,
}

impl GenerationPlan {
    pub fn positions(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Random order over `unknown`, split into `steps` groups (clipped to the
/// number of positions).
pub fn make_plan(unknown: &[usize], steps: usize, schedule: GroupSchedule, seed: u64) -> Result<GenerationPlan> {
    if unknown.is_empty() {
        return Err(ParError::contract("nothing to generate: the unknown set is empty"));
    }
    if steps == 0 {
        return Err(ParError::contract("generation needs at least one step"));
    }
    let mut rng = RngStream::new(seed, Purpose::MaskOrder);
    let order = rng.permutation(unknown.len());
    let mut groups = Vec::new();
    let mut at = 0;
    for size in group_sizes(unknown.len(), steps, schedule) {
        groups.push(order[at..at + size].iter().map(|&i| unknown[i]).collect());
        at += size;
    }
    Ok(GenerationPlan { groups, schedule, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub ar_steps: usize,
    pub denoise_steps: usize,
    pub cfg: f64,
    pub order: GroupSchedule,
    pub seed: u64,
    /// Bound on the predicted clean token at each denoising step.
    pub x0_clip: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            ar_steps: 64,
            denoise_steps: 25,
            cfg: 5.0,
            order: GroupSchedule::Uniform,
            seed: 0,
            x0_clip: 5.0,
        }
    }
}

/// `ε_u + w·(ε_c − ε_u)`, or `ε_c` itself when `w = 1`.
pub fn guide<T: Scalar>(eps_c: &Tensor<T>, eps_u: Option<&Tensor<T>>, w: f64) -> Result<Tensor<T>> {
    match eps_u {
        _ if w == 1.0 => Ok(eps_c.clone()),
        None => Err(ParError::contract("guidance weight != 1 needs an unconditional prediction")),
        Some(u) => {
            let w = T::lit(w);
            let data = eps_c.data().iter().zip(u.data()).map(|(&c, &u)| u + w * (c - u)).collect();
            Ok(Tensor::new(eps_c.shape(), data)?)
        }
    }
}

/// Ancestral sampling of one token per row of `z_cond` over
/// `cfg.denoise_steps` respaced timesteps with guidance weight `cfg.cfg`.
/// Row `i` draws its noise from `rngs[i]`.
pub fn denoise_tokens<T: Scalar>(
    model: &ParModel<T>,
    schedule: &NoiseSchedule,
    z_cond: &Tensor<T>,
    z_uncond: Option<&Tensor<T>>,
    cfg: &SampleConfig,
    rngs: &mut [RngStream],
) -> Result<Tensor<T>> {
    let (steps, w, clip) = (cfg.denoise_steps, cfg.cfg, cfg.x0_clip);
    if !(clip > 0.0) {
        return Err(ParError::contract(format!("x0 clip {clip} must be positive")));
    }
    let g = z_cond.dim(0);
    let d = model.config.token_dim();
    if rngs.len() != g {
        return Err(ParError::contract("one noise stream per denoised token"));
    }
    let guided = w != 1.0;
    if guided && z_uncond.map(|u| u.shape() != z_cond.shape()).unwrap_or(true) {
        return Err(ParError::contract("guidance needs an unconditional z of the same shape"));
    }
    let z = if guided {
        let mut both = z_cond.data().to_vec();
        both.extend_from_slice(z_uncond.unwrap().data());
        Tensor::new(&[2 * g, z_cond.dim(1)], both)?
    } else {
        z_cond.clone()
    };
    let ts = schedule.respaced(steps)?;
    let mut x: Vec<T> = Vec::with_capacity(g * d);
    for r in rngs.iter_mut() {
        x.extend((0..d).map(|_| T::lit(r.normal())));
    }
    let tape_free = |x_in: &[T], t: usize| -> Result<Tensor<T>> {
        let rows = if guided { 2 * g } else { g };
        let mut data = x_in.to_vec();
        if guided {
            data.extend_from_slice(x_in);
        }
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let out = model.head(&p, tape.constant(Tensor::new(&[rows, d], data)?), &vec![t; rows], tape.constant(z.clone()))?;
        Ok(out.value())
    };
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let eps_all = tape_free(&x, t)?;
        let eps = if guided {
            let (c, u) = eps_all.data().split_at(g * d);
            guide(&Tensor::new(&[g, d], c.to_vec())?, Some(&Tensor::new(&[g, d], u.to_vec())?), w)?
        } else {
            eps_all
        };
        let ab = schedule.alpha_bar(t);
        let ab_prev = if i > 0 { schedule.alpha_bar(ts[i - 1]) } else { 1.0 };
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for (k, (xv, &e)) in x.iter_mut().zip(eps.data()).enumerate() {
            let xf = xv.as_f64();
            let x0 = ((xf - (1.0 - ab).sqrt() * e.as_f64()) / ab.sqrt()).clamp(-clip, clip);
            let mut next = c0 * x0 + ct * xf;
            if i > 0 {
                next += sigma * rngs[k / d].normal();
            }
            *xv = T::lit(next);
        }
        if x.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(ParError::Numeric(format!("non-finite token at denoising timestep {t}")));
        }
    }
    Ok(Tensor::new(&[g, d], x)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T: Scalar> {
    /// Completed tokens `[N, D]`.
    pub tokens: Tensor<T>,
    /// `None` when every position was known.
    pub plan: Option<GenerationPlan>,
    pub backbone_calls: usize,
}

/// Fills every position not flagged in `known`, one plan group per step.
/// Known rows of `init` are copied through untouched.
pub fn generate<T: Scalar>(
    model: &ParModel<T>,
    schedule: &NoiseSchedule,
    prompt: &[usize],
    init: &Tensor<T>,
    known: &[bool],
    cfg: &SampleConfig,
) -> Result<Generation<T>> {
    let (n, d) = (model.config.num_tokens(), model.config.token_dim());
    if init.shape() != [n, d] || known.len() != n {
        return Err(ParError::contract(format!(
            "grid mismatch: tokens {:?} and mask of {} for a [{n}, {d}] model",
            init.shape(),
            known.len()
        )));
    }
    let mut tokens = init.clone();
    let unknown: Vec<usize> = (0..n).filter(|&i| !known[i]).collect();
    if unknown.is_empty() {
        return Ok(Generation { tokens, plan: None, backbone_calls: 0 });
    }
    let plan = make_plan(&unknown, cfg.ar_steps, cfg.order, cfg.seed)?;
    let mut visible: Vec<usize> = (0..n).filter(|&i| known[i]).collect();
    let guided = cfg.cfg != 1.0;
    let noise = RngStream::new(cfg.seed, Purpose::DiffusionNoise);
    let mut calls = 0;
    for group in &plan.groups {
        let z = {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let mut inputs = vec![BackboneInput { tokens: &tokens, known: &visible, prompt }];
            if guided {
                inputs.push(BackboneInput { tokens: &tokens, known: &visible, prompt: &[] });
            }
            model.backbone(&p, &inputs)?.value()
        };
        calls += 1;
        let dz = z.dim(1);
        let pick = |off: usize| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(group.len() * dz);
            for &pos in group {
                data.extend_from_slice(&z.data()[(off + pos) * dz..(off + pos + 1) * dz]);
            }
            Ok(Tensor::new(&[group.len(), dz], data)?)
        };
        let z_c = pick(0)?;
        let z_u = if guided { Some(pick(n)?) } else { None };
        let mut rngs: Vec<RngStream> = group.iter().map(|&pos| noise.substream(pos as u64)).collect();
        let out = denoise_tokens(model, schedule, &z_c, z_u.as_ref(), cfg, &mut rngs)?;
        let dst = tokens.data_mut();
        for (k, &pos) in group.iter().enumerate() {
            dst[pos * d..(pos + 1) * d].copy_from_slice(&out.data()[k * d..(k + 1) * d]);
        }
        visible.extend_from_slice(group);
        visible.sort_unstable();
    }
    Ok(Generation { tokens, plan: Some(plan), backbone_calls: calls })
}

/// Padding ratios applied before encoding and before decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Padding {
    pub r_pre: f64,
    pub r_post: f64,
}

impl Default for Padding {
    fn default() -> Self {
        Padding { r_pre: 0.125, r_post: 0.125 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama<T: Scalar> {
    pub latent: LatentGrid<T>,
    pub image: PanoImage<T>,
    pub generation: Generation<T>,
}

fn check_pair<T: Scalar>(model: &ParModel<T>, codec: &Codec<T>) -> Result<()> {
    let mc = &model.config;
    if codec.config.latent_channels != mc.latent_channels {
        return Err(ParError::contract("codec latent channels differ from the model's"));
    }
    Ok(())
}

fn finish<T: Scalar>(model: &ParModel<T>, codec: &Codec<T>, generation: Generation<T>, r_post: f64) -> Result<Panorama<T>> {
    let mc = &model.config;
    let lat = unpatchify(&generation.tokens, mc.latent_channels, mc.grid_h, mc.grid_w, mc.patch)?;
    let latent = LatentGrid::new(lat)?;
    let image = codec.decode(&latent, r_post)?;
    Ok(Panorama { latent, image, generation })
}

pub fn text_to_panorama<T: Scalar>(
    model: &ParModel<T>,
    codec: &Codec<T>,
    schedule: &NoiseSchedule,
    prompt: &[usize],
    cfg: &SampleConfig,
    pad: Padding,
) -> Result<Panorama<T>> {
    check_pair(model, codec)?;
    let (n, d) = (model.config.num_tokens(), model.config.token_dim());
    let g = generate(model, schedule, prompt, &Tensor::zeros(&[n, d]), &vec![false; n], cfg)?;
    finish(model, codec, g, pad.r_post)
}

/// Regenerates every token outside `keep` under `prompt`. Outpainting and
/// editing are both this call; an empty `keep` is text-to-panorama.
pub fn complete<T: Scalar>(
    model: &ParModel<T>,
    codec: &Codec<T>,
    schedule: &NoiseSchedule,
    image: &PanoImage<T>,
    keep: &[bool],
    prompt: &[usize],
    cfg: &SampleConfig,
    pad: Padding,
) -> Result<Panorama<T>> {
    check_pair(model, codec)?;
    let lat = codec.encode(image, pad.r_pre)?;
    let mc = &model.config;
    if lat.height() != mc.grid_h * mc.patch || lat.width() != mc.grid_w * mc.patch {
        return Err(ParError::contract(format!(
            "image {}x{} encodes to a {}x{} latent, model expects {}x{}",
            image.height(),
            image.width(),
            lat.height(),
            lat.width(),
            mc.grid_h * mc.patch,
            mc.grid_w * mc.patch
        )));
    }
    let tokens = patchify(lat.tensor(), mc.patch)?;
    let g = generate(model, schedule, prompt, &tokens, keep, cfg)?;
    finish(model, codec, g, pad.r_post)
}

/// Token-level keep flags from a pixel mask (255 = keep, 0 = regenerate).
/// Every token's pixel block must be uniformly one or the other.
pub fn token_mask(mask: &GrayImage, token_px: usize, grid_h: usize, grid_w: usize) -> Result<Vec<bool>> {
    if mask.width != grid_w * token_px || mask.height != grid_h * token_px {
        return Err(ParError::contract(format!(
            "mask is {}x{}, image grid needs {}x{}",
            mask.width,
            mask.height,
            grid_w * token_px,
            grid_h * token_px
        )));
    }
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for ty in 0..grid_h {
        for tx in 0..grid_w {
            let first = mask.pixels[ty * token_px * mask.width + tx * token_px];
            for y in 0..token_px {
                for x in 0..token_px {
                    let v = mask.pixels[(ty * token_px + y) * mask.width + tx * token_px + x];
                    if v != first || (v != 0 && v != 255) {
                        return Err(ParError::contract(format!(
                            "keep-mask is not aligned to the {token_px}px token grid at token ({ty}, {tx})"
                        )));
                    }
                }
            }
            out.push(first == 255);
        }
    }
    Ok(out)
}
