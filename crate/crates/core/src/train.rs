//! Masked diffusion loss, cyclic translation consistency loss and the
//! training loop.

use std::fmt;

use par_tensor::optim::clip_grad_norm;
use par_tensor::{AdamW, Bound, OptimizerState, Purpose, RngStream, Scalar, Tape, Tensor, Var};

use crate::erp::cyclic_shift_axis;
use crate::error::{ParError, Result};
use crate::model::{BackboneInput, ParModel};
use crate::schedule::NoiseSchedule;

/// One training example: latent tokens `[N, D]` and its prompt ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<T: Scalar> {
    pub tokens: Tensor<T>,
    pub prompt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub optimizer: AdamW,
    /// Weight of the consistency loss.
    pub lambda: f64,
    pub mask_ratio: (f64, f64),
    pub p_uncond: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 8,
            optimizer: AdamW {
                lr: 1e-3,
                decay_horizon: 1000,
                ..AdamW::default()
            },
            lambda: 0.1,
            mask_ratio: (0.7, 1.0),
            p_uncond: 0.1,
            clip: 1.0,
            seed: 0,
        }
    }
}

/// Draws a mask over `h·w` positions (`true` = to generate). The ratio is
/// uniform in `range`; a draw that rounds to zero positions is redrawn.
pub fn sample_mask(rng: &mut RngStream, h: usize, w: usize, range: (f64, f64)) -> Result<Vec<bool>> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(ParError::contract(format!("mask ratio range [{lo}, {hi}] not within (0, 1]")));
    }
    let n = h * w;
    if n == 0 {
        return Err(ParError::contract("mask over an empty grid"));
    }
    loop {
        let ratio = rng.uniform_range(lo, hi);
        let count = (ratio * n as f64).round() as usize;
        if count == 0 {
            continue;
        }
        let order = rng.permutation(n);
        let mut m = vec![false; n];
        for &i in &order[..count] {
            m[i] = true;
        }
        return Ok(m);
    }
}

/// Inputs of one loss evaluation, all per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<T: Scalar> {
    pub tokens: Vec<Tensor<T>>,
    pub masks: Vec<Vec<bool>>,
    pub noise: Vec<Tensor<T>>,
    pub timesteps: Vec<Vec<usize>>,
    pub prompts: Vec<Vec<usize>>,
    /// Consistency shift per sample, in latent columns.
    pub shifts: Vec<usize>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn shift_grid<T: Scalar>(x: &Tensor<T>, ht: usize, wt: usize, v: usize) -> Result<Tensor<T>> {
    let d = x.numel() / (ht * wt);
    let s = cyclic_shift_axis(&x.clone().reshape(&[ht, wt, d])?, 1, v as isize)?;
    Ok(s.reshape(x.shape())?)
}

fn shift_flags<X: Copy>(x: &[X], ht: usize, wt: usize, v: usize) -> Vec<X> {
    (0..ht * wt).map(|q| x[(q / wt) * wt + (q % wt + wt - v % wt) % wt]).collect()
}

/// Row map realizing `T_v` on a token grid: `out[q] = in[map[q]]`.
pub fn shift_index(ht: usize, wt: usize, v: usize) -> Vec<usize> {
    let idx: Vec<usize> = (0..ht * wt).collect();
    shift_flags(&idx, ht, wt, v)
}

/// Losses of one batch, still on the tape.
pub struct Losses<'t, T: Scalar> {
    pub va: Var<'t, T>,
    pub cons: Var<'t, T>,
    /// Head output of the original branch, `[B·N, D]`.
    pub eps_pred: Var<'t, T>,
}

/// `Σ M∘(ε − ε̂)²` over masked entries, divided by their count.
pub fn masked_mse<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>, mask: &[bool], dim: usize) -> Result<Var<'t, T>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ParError::contract("loss over an all-zero mask"));
    }
    let w = T::lit(1.0 / (count * dim) as f64);
    let weights = Tensor::from_fn(&[mask.len(), dim], |i| if mask[i / dim] { w } else { T::zero() });
    let d = pred.sub(target)?.square()?;
    Ok(d.mul(pred.tape().constant(weights))?.sum()?)
}

fn noised<T: Scalar>(schedule: &NoiseSchedule, x: &Tensor<T>, eps: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
    let d = x.numel() / t.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ab = schedule.alpha_bar(t[i / d]);
        *v = T::lit(ab.sqrt()) * *v + T::lit((1.0 - ab).sqrt()) * eps.data()[i];
    }
    Ok(out)
}

fn stack<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let d = xs[0].dim(1);
    Ok(Tensor::new(&[data.len() / d, d], data)?)
}

/// Head predictions for a batch (one branch): `[B·N, D]`.
fn branch<'t, T: Scalar>(
    model: &ParModel<T>,
    p: &Bound<'t, T>,
    schedule: &NoiseSchedule,
    tokens: &[Tensor<T>],
    masks: &[Vec<bool>],
    noise: &[Tensor<T>],
    timesteps: &[Vec<usize>],
    prompts: &[Vec<usize>],
) -> Result<Var<'t, T>> {
    let known: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| (0..m.len()).filter(|&i| !m[i]).collect())
        .collect();
    let inputs: Vec<BackboneInput<T>> = (0..tokens.len())
        .map(|b| BackboneInput {
            tokens: &tokens[b],
            known: &known[b],
            prompt: &prompts[b],
        })
        .collect();
    let z = model.backbone(p, &inputs)?;
    let xt: Vec<Tensor<T>> = (0..tokens.len())
        .map(|b| noised(schedule, &tokens[b], &noise[b], &timesteps[b]))
        .collect::<Result<_>>()?;
    let t: Vec<usize> = timesteps.concat();
    let tape = z.tape();
    model.head(p, tape.constant(stack(&xt)?), &t, z)
}

fn validate<T: Scalar>(model: &ParModel<T>, schedule: &NoiseSchedule, b: &TrainBatch<T>) -> Result<()> {
    let (n, d) = (model.config.num_tokens(), model.config.token_dim());
    let nb = b.len();
    if nb == 0
        || [b.masks.len(), b.noise.len(), b.timesteps.len(), b.prompts.len(), b.shifts.len()]
            .iter()
            .any(|&l| l != nb)
    {
        return Err(ParError::contract("train batch fields disagree in length"));
    }
    for i in 0..nb {
        if b.tokens[i].shape() != [n, d] || b.noise[i].shape() != [n, d] || b.masks[i].len() != n || b.timesteps[i].len() != n {
            return Err(ParError::contract(format!("sample {i} does not match the [{n}, {d}] token grid")));
        }
        if b.timesteps[i].iter().any(|&t| t >= schedule.len()) {
            return Err(ParError::contract(format!("sample {i} has a timestep outside the schedule")));
        }
        if b.shifts[i] % model.config.patch != 0 {
            return Err(ParError::contract(format!(
                "shift {} is not a multiple of the token width {}",
                b.shifts[i], model.config.patch
            )));
        }
    }
    Ok(())
}

/// Builds both branches and returns `L_va` (original branch) and `L_cons`.
pub fn losses<'t, T: Scalar>(
    model: &ParModel<T>,
    p: &Bound<'t, T>,
    schedule: &NoiseSchedule,
    batch: &TrainBatch<T>,
) -> Result<Losses<'t, T>> {
    validate(model, schedule, batch)?;
    let cfg = &model.config;
    let (ht, wt, d) = (cfg.grid_h, cfg.grid_w, cfg.token_dim());
    let eps_pred = branch(model, p, schedule, &batch.tokens, &batch.masks, &batch.noise, &batch.timesteps, &batch.prompts)?;
    let tape = eps_pred.tape();
    let mask_all: Vec<bool> = batch.masks.concat();
    let va = masked_mse(eps_pred, tape.constant(stack(&batch.noise)?), &mask_all, d)?;

    let vt: Vec<usize> = batch.shifts.iter().map(|&v| (v / cfg.patch) % wt).collect();
    let mut s_tokens = Vec::with_capacity(batch.len());
    let mut s_noise = Vec::with_capacity(batch.len());
    let mut s_masks = Vec::with_capacity(batch.len());
    let mut s_t = Vec::with_capacity(batch.len());
    let mut gather = Vec::with_capacity(batch.len() * ht * wt);
    for b in 0..batch.len() {
        s_tokens.push(shift_grid(&batch.tokens[b], ht, wt, vt[b])?);
        s_noise.push(shift_grid(&batch.noise[b], ht, wt, vt[b])?);
        s_masks.push(shift_flags(&batch.masks[b], ht, wt, vt[b]));
        s_t.push(shift_flags(&batch.timesteps[b], ht, wt, vt[b]));
        gather.extend(shift_index(ht, wt, vt[b]).into_iter().map(|i| b * ht * wt + i));
    }
    let eps_shifted = branch(model, p, schedule, &s_tokens, &s_masks, &s_noise, &s_t, &batch.prompts)?;
    let aligned = eps_pred.gather_rows(&gather)?;
    let cons = masked_mse(aligned, eps_shifted, &s_masks.concat(), d)?;
    Ok(Losses { va, cons, eps_pred })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_va: f64,
    pub loss_cons: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}, {:.6e}, {:.6e}, {:.6e}, {:.6e}",
            self.step, self.loss_va, self.loss_cons, self.lr, self.grad_norm
        )
    }
}

impl StepMetrics {
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return None;
        }
        Some(StepMetrics {
            step: f[0].parse().ok()?,
            loss_va: f[1].parse().ok()?,
            loss_cons: f[2].parse().ok()?,
            lr: f[3].parse().ok()?,
            grad_norm: f[4].parse().ok()?,
        })
    }
}

/// Model, optimizer moments and step counter. Every random draw of a step
/// is derived from `(seed, step)`, so restoring these three fields resumes
/// a run exactly.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: ParModel<T>,
    pub opt: OptimizerState<T>,
    pub step: u64,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ParModel<T>, config: TrainConfig, schedule: NoiseSchedule) -> Self {
        Trainer {
            opt: OptimizerState::new(&model.params),
            model,
            step: 0,
            config,
            schedule,
        }
    }

    /// The batch consumed by update number `step`.
    pub fn make_batch(&self, data: &[TrainItem<T>], step: u64) -> Result<TrainBatch<T>> {
        if data.is_empty() {
            return Err(ParError::contract("training set is empty"));
        }
        let cfg = &self.model.config;
        let (ht, wt, n, d) = (cfg.grid_h, cfg.grid_w, cfg.num_tokens(), cfg.token_dim());
        let seed = self.config.seed;
        let mut pick = RngStream::new(seed, Purpose::Data).substream(step);
        let mut drop = RngStream::new(seed, Purpose::Dropout).substream(step);
        let masks_rng = RngStream::new(seed, Purpose::MaskOrder).substream(step);
        let mut noise_rng = RngStream::new(seed, Purpose::DiffusionNoise).substream(step);
        let mut batch = TrainBatch {
            tokens: Vec::new(),
            masks: Vec::new(),
            noise: Vec::new(),
            timesteps: Vec::new(),
            prompts: Vec::new(),
            shifts: Vec::new(),
        };
        for b in 0..self.config.batch {
            let item = &data[pick.below(data.len())];
            batch.tokens.push(item.tokens.clone());
            batch.shifts.push((1 + pick.below(wt - 1)) * cfg.patch);
            let keep = drop.uniform() >= self.config.p_uncond;
            batch.prompts.push(if keep { item.prompt.clone() } else { Vec::new() });
            batch.masks.push(sample_mask(&mut masks_rng.substream(b as u64), ht, wt, self.config.mask_ratio)?);
            batch.timesteps.push((0..n).map(|_| noise_rng.below(self.schedule.len())).collect());
            batch.noise.push(noise_rng.normal_tensor(&[n, d], 1.0));
        }
        Ok(batch)
    }

    /// Loss value and gradients of `L_va + λ·L_cons` without updating.
    pub fn evaluate(&self, batch: &TrainBatch<T>) -> Result<(f64, f64, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let l = losses(&self.model, &p, &self.schedule, batch)?;
        let total = l.va.add(l.cons.scale(self.config.lambda)?)?;
        let (va, cons) = (l.va.item().as_f64(), l.cons.item().as_f64());
        if !va.is_finite() || !cons.is_finite() {
            return Err(ParError::Numeric(format!("loss is not finite at step {}", self.step)));
        }
        let g = tape.backward(total)?;
        Ok((va, cons, p.grads(&g)))
    }

    pub fn train_step(&mut self, data: &[TrainItem<T>]) -> Result<StepMetrics> {
        let batch = self.make_batch(data, self.step)?;
        let (loss_va, loss_cons, mut grads) = self.evaluate(&batch)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip);
        let lr = self.config.optimizer.lr_at(self.opt.step);
        self.config
            .optimizer
            .step(&mut self.model.params, &grads, &mut self.opt)
            .map_err(|e| ParError::Numeric(format!("step {}: {e}", self.step)))?;
        let m = StepMetrics {
            step: self.step,
            loss_va,
            loss_cons,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(m)
    }

    /// Runs until `config.steps` updates have been made, reporting each.
    pub fn run(&mut self, data: &[TrainItem<T>], mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let m = self.train_step(data)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Mean consistency residual of a frozen model over `data` and `shifts`
/// (latent columns). Mask, timesteps and noise depend only on `(seed,
/// item)`, so the result does not depend on the order of `shifts`.
pub fn equivariance_gap<T: Scalar>(
    model: &ParModel<T>,
    schedule: &NoiseSchedule,
    data: &[TrainItem<T>],
    shifts: &[usize],
    mask_ratio: (f64, f64),
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || shifts.is_empty() {
        return Err(ParError::contract("equivariance gap needs data and shifts"));
    }
    let cfg = &model.config;
    let (ht, wt, n, d) = (cfg.grid_h, cfg.grid_w, cfg.num_tokens(), cfg.token_dim());
    let mut sorted = shifts.to_vec();
    sorted.sort_unstable();
    let mut total = 0.0;
    for (i, item) in data.iter().enumerate() {
        let mut rng = RngStream::new(seed, Purpose::MaskOrder).substream(i as u64);
        let mask = sample_mask(&mut rng, ht, wt, mask_ratio)?;
        let mut nr = RngStream::new(seed, Purpose::DiffusionNoise).substream(i as u64);
        let t: Vec<usize> = (0..n).map(|_| nr.below(schedule.len())).collect();
        let eps = nr.normal_tensor(&[n, d], 1.0);
        for &v in &sorted {
            let batch = TrainBatch {
                tokens: vec![item.tokens.clone()],
                masks: vec![mask.clone()],
                noise: vec![eps.clone()],
                timesteps: vec![t.clone()],
                prompts: vec![item.prompt.clone()],
                shifts: vec![v],
            };
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            total += losses(model, &p, schedule, &batch)?.cons.item().as_f64();
        }
    }
    Ok(total / (data.len() * sorted.len()) as f64)
}
