//! Masked autoregressive backbone with a per-token diffusion head.
//!
//! The encoder sees the condition token and the visible tokens; the decoder
//! sees the full grid with a learned mask embedding at hidden slots; both
//! share one fixed positional encoding. The decoder output `z` conditions an
//! AdaLN-Zero MLP that predicts the noise of each token.

mod patch;
mod posenc;

pub use patch::{grid_dims, patchify, unpatchify};
pub use posenc::sincos_2d;

use par_tensor::{Bound, ParamId, ParamStore, Purpose, RngStream, Scalar, Tape, Tensor, Var};

use crate::error::{ParError, Result};
use crate::nn::{Init, LayerNorm, Linear, LN_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ParConfig {
    pub latent_channels: usize,
    pub patch: usize,
    /// Token grid rows and columns.
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_model: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_width: usize,
    pub head_blocks: usize,
    pub vocab: usize,
}

impl Default for ParConfig {
    fn default() -> Self {
        ParConfig {
            latent_channels: 8,
            patch: 1,
            grid_h: 8,
            grid_w: 16,
            d_model: 128,
            enc_blocks: 4,
            dec_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            head_width: 128,
            head_blocks: 3,
            vocab: crate::synth::VOCAB_SIZE,
        }
    }
}

impl ParConfig {
    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ParError::contract(m));
        if self.grid_w != 2 * self.grid_h || self.grid_h == 0 {
            return bad(format!("token grid {}x{} must be h x 2h", self.grid_h, self.grid_w));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be divisible by 4 and by heads {}", self.d_model, self.heads));
        }
        if self.head_width % 2 != 0 || self.head_blocks == 0 || self.mlp_ratio == 0 || self.vocab == 0 {
            return bad("head width must be even; head blocks, mlp ratio and vocab positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct HeadBlock {
    ada: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_in: Linear,
    text_table: ParamId,
    text_proj: Linear,
    null: ParamId,
    enc: Vec<Block>,
    enc_norm: LayerNorm,
    dec_in: Linear,
    mask_token: ParamId,
    dec: Vec<Block>,
    dec_norm: LayerNorm,
    head_in: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    z_proj: Linear,
    head: Vec<HeadBlock>,
    final_ada: Linear,
    final_out: Linear,
}

/// One sample's backbone input: tokens `[N, D]`, the visible positions and
/// the prompt ids (empty for the null condition).
#[derive(Debug, Clone, Copy)]
pub struct BackboneInput<'a, T: Scalar> {
    pub tokens: &'a Tensor<T>,
    pub known: &'a [usize],
    pub prompt: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ParModel<T: Scalar = f32> {
    pub config: ParConfig,
    pub params: ParamStore<T>,
    ids: Ids,
    pos: Tensor<T>,
}

fn block<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize, ratio: usize, rng: &mut RngStream) -> Block {
    Block {
        ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
        qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d, Init::Xavier, rng),
        proj: Linear::new(ps, &format!("{name}.proj"), d, d, Init::Xavier, rng),
        ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
        fc1: Linear::new(ps, &format!("{name}.fc1"), d, ratio * d, Init::Xavier, rng),
        fc2: Linear::new(ps, &format!("{name}.fc2"), ratio * d, d, Init::Xavier, rng),
    }
}

/// Sinusoidal features of integer timesteps, `[n, dim]`.
pub fn timestep_features<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (row, j) = (i / dim, i % dim);
        let f = (-(10000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let a = t[row] as f64 * f;
        T::lit(if j < half { a.cos() } else { a.sin() })
    })
}

impl<T: Scalar> ParModel<T> {
    pub fn new(config: ParConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, Purpose::Init).substream(2);
        let mut ps = ParamStore::new();
        let (d, dt, hw, r) = (config.d_model, config.token_dim(), config.head_width, config.mlp_ratio);
        let tok_in = Linear::new(&mut ps, "par.tok_in", dt, d, Init::Xavier, &mut rng);
        let text_table = ps.add("par.text.table", rng.normal_tensor(&[config.vocab, d], 0.02));
        let text_proj = Linear::new(&mut ps, "par.text.proj", d, d, Init::Xavier, &mut rng);
        let null = ps.add("par.text.null", rng.normal_tensor(&[d], 0.02));
        let enc = (0..config.enc_blocks)
            .map(|i| block(&mut ps, &format!("par.enc.{i}"), d, r, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut ps, "par.enc.norm", d);
        let dec_in = Linear::new(&mut ps, "par.dec.in", d, d, Init::Xavier, &mut rng);
        let mask_token = ps.add("par.dec.mask", rng.normal_tensor(&[d], 0.02));
        let dec = (0..config.dec_blocks)
            .map(|i| block(&mut ps, &format!("par.dec.{i}"), d, r, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "par.dec.norm", d);
        let head_in = Linear::new(&mut ps, "par.head.in", dt, hw, Init::Xavier, &mut rng);
        let t_fc1 = Linear::new(&mut ps, "par.head.t1", hw, hw, Init::Xavier, &mut rng);
        let t_fc2 = Linear::new(&mut ps, "par.head.t2", hw, hw, Init::Xavier, &mut rng);
        let z_proj = Linear::new(&mut ps, "par.head.z", d, hw, Init::Xavier, &mut rng);
        let head = (0..config.head_blocks)
            .map(|i| HeadBlock {
                ada: Linear::new(&mut ps, &format!("par.head.{i}.ada"), hw, 3 * hw, Init::Zero, &mut rng),
                fc1: Linear::new(&mut ps, &format!("par.head.{i}.fc1"), hw, hw, Init::Xavier, &mut rng),
                fc2: Linear::new(&mut ps, &format!("par.head.{i}.fc2"), hw, hw, Init::Xavier, &mut rng),
            })
            .collect();
        let final_ada = Linear::new(&mut ps, "par.head.final.ada", hw, 2 * hw, Init::Zero, &mut rng);
        let final_out = Linear::new(&mut ps, "par.head.final.out", hw, dt, Init::Zero, &mut rng);
        let pos = sincos_2d(config.grid_h, config.grid_w, d)?;
        Ok(ParModel {
            ids: Ids {
                tok_in,
                text_table,
                text_proj,
                null,
                enc,
                enc_norm,
                dec_in,
                mask_token,
                dec,
                dec_norm,
                head_in,
                t_fc1,
                t_fc2,
                z_proj,
                head,
                final_ada,
                final_out,
            },
            config,
            params: ps,
            pos,
        })
    }

    /// The single positional encoding shared by every forward pass.
    pub fn pos_encoding(&self) -> &Tensor<T> {
        &self.pos
    }

    /// Condition vector `[1, d]`: projected mean of the prompt id embeddings,
    /// or the learned null vector for an empty prompt.
    pub fn embed_text<'t>(&self, p: &Bound<'t, T>, prompt: &[usize]) -> Result<Var<'t, T>> {
        let d = self.config.d_model;
        if prompt.is_empty() {
            return Ok(p[self.ids.null].reshape(&[1, d])?);
        }
        if let Some(&bad) = prompt.iter().find(|&&i| i >= self.config.vocab) {
            return Err(ParError::contract(format!("prompt id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        // Sorting makes the pooled sum order, and so the result, independent
        // of the prompt order.
        let mut ids = prompt.to_vec();
        ids.sort_unstable();
        let tape = p[self.ids.null].tape();
        let n = ids.len();
        let avg = tape.constant(Tensor::full(&[1, n], T::lit(1.0 / n as f64)));
        let rows = p[self.ids.text_table].gather_rows(&ids)?;
        self.ids.text_proj.apply(p, avg.matmul(rows)?)
    }

    fn attention<'t>(&self, p: &Bound<'t, T>, blk: &Block, x: Var<'t, T>, batch: usize, len: usize) -> Result<Var<'t, T>> {
        let (d, nh) = (self.config.d_model, self.config.heads);
        let dh = d / nh;
        let qkv = blk.qkv.apply(p, x)?;
        let qkv = qkv.reshape(&[batch, len, 3, nh, dh])?.permute(&[2, 0, 3, 1, 4])?;
        let qkv = qkv.reshape(&[3 * batch * nh, len, dh])?;
        let bh = batch * nh;
        let q = qkv.slice(0, 0, bh)?;
        let k = qkv.slice(0, bh, bh)?;
        let v = qkv.slice(0, 2 * bh, bh)?;
        let att = q.matmul_t(k, false, true)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
        let out = att.matmul(v)?;
        let out = out.reshape(&[batch, nh, len, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[batch * len, d])?;
        blk.proj.apply(p, out)
    }

    /// Pre-norm transformer block over `segments` (row counts) of `x`.
    fn run_block<'t>(&self, p: &Bound<'t, T>, blk: &Block, x: Var<'t, T>, segments: &[usize]) -> Result<Var<'t, T>> {
        let h = blk.ln1.apply(p, x)?;
        let a = if segments.iter().all(|&s| s == segments[0]) {
            self.attention(p, blk, h, segments.len(), segments[0])?
        } else {
            let mut parts = Vec::with_capacity(segments.len());
            let mut start = 0;
            for &s in segments {
                parts.push(self.attention(p, blk, h.slice(0, start, s)?, 1, s)?);
                start += s;
            }
            x.tape().concat(&parts, 0)?
        };
        let x = x.add(a)?;
        let h = blk.fc1.apply(p, blk.ln2.apply(p, x)?)?.gelu()?;
        Ok(x.add(blk.fc2.apply(p, h)?)?)
    }

    /// Conditioning vectors `z`, `[B·N, d]`, for every grid position of
    /// every sample.
    pub fn backbone<'t>(&self, p: &Bound<'t, T>, inputs: &[BackboneInput<'_, T>]) -> Result<Var<'t, T>> {
        let (n, d, dt) = (self.config.num_tokens(), self.config.d_model, self.config.token_dim());
        if inputs.is_empty() {
            return Err(ParError::contract("backbone called with no samples"));
        }
        let tape = p[self.ids.null].tape();
        let mut rows = Vec::with_capacity(inputs.len());
        let mut segments = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.tokens.shape() != [n, dt] {
                return Err(ParError::contract(format!(
                    "tokens {:?} do not match the [{n}, {dt}] grid",
                    inp.tokens.shape()
                )));
            }
            let mut seen = vec![false; n];
            if inp.known.iter().any(|&k| k >= n || std::mem::replace(&mut seen[k], true)) {
                return Err(ParError::contract("known positions must be distinct grid indices"));
            }
            let mut parts = vec![self.embed_text(p, inp.prompt)?];
            if !inp.known.is_empty() {
                let mut vis = Vec::with_capacity(inp.known.len() * dt);
                let mut pe = Vec::with_capacity(inp.known.len() * d);
                for &k in inp.known {
                    vis.extend_from_slice(&inp.tokens.data()[k * dt..(k + 1) * dt]);
                    pe.extend_from_slice(&self.pos.data()[k * d..(k + 1) * d]);
                }
                let vis = tape.constant(Tensor::new(&[inp.known.len(), dt], vis)?);
                let pe = tape.constant(Tensor::new(&[inp.known.len(), d], pe)?);
                parts.push(self.ids.tok_in.apply(p, vis)?.add(pe)?);
            }
            segments.push(1 + inp.known.len());
            rows.push(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? });
        }
        let mut x = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        for blk in &self.ids.enc {
            x = self.run_block(p, blk, x, &segments)?;
        }
        let x = self.ids.dec_in.apply(p, self.ids.enc_norm.apply(p, x)?)?;

        let pos = tape.constant(self.pos.clone());
        let mask_rows = tape.constant(Tensor::zeros(&[n, d])).add_row(p[self.ids.mask_token])?;
        let mut seqs = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (inp, &len) in inputs.iter().zip(&segments) {
            let cond = x.slice(0, start, 1)?;
            let mut grid = mask_rows;
            if len > 1 {
                grid = grid.scatter_rows(x.slice(0, start + 1, len - 1)?, inp.known)?;
            }
            seqs.push(tape.concat(&[cond, grid.add(pos)?], 0)?);
            start += len;
        }
        let mut y = if seqs.len() == 1 { seqs[0] } else { tape.concat(&seqs, 0)? };
        let dec_segments = vec![n + 1; inputs.len()];
        for blk in &self.ids.dec {
            y = self.run_block(p, blk, y, &dec_segments)?;
        }
        let y = self.ids.dec_norm.apply(p, y)?;
        let b = inputs.len();
        Ok(y.reshape(&[b, n + 1, d])?.slice(1, 1, n)?.reshape(&[b * n, d])?)
    }

    /// Noise prediction `ε_θ(x_t | t, z)` for rows of `x_t` `[R, D]`.
    pub fn head<'t>(&self, p: &Bound<'t, T>, x_t: Var<'t, T>, t: &[usize], z: Var<'t, T>) -> Result<Var<'t, T>> {
        let hw = self.config.head_width;
        let (y, _, h) = self.head_trunk(p, x_t, t, z)?;
        let m = self.ids.final_ada.apply(p, y)?;
        let (shift, scale) = (m.slice(1, 0, hw)?, m.slice(1, hw, hw)?);
        let a = h.layer_norm(LN_EPS)?.mul(scale.add_scalar(1.0)?)?.add(shift)?;
        self.ids.final_out.apply(p, a)
    }

    /// Head residual stream on entry to and exit from its blocks; with
    /// zero-initialized gates the two coincide.
    pub fn head_stream<'t>(&self, p: &Bound<'t, T>, x_t: Var<'t, T>, t: &[usize], z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (_, h0, h) = self.head_trunk(p, x_t, t, z)?;
        Ok((h0, h))
    }

    /// Returns the modulation input `silu(t_emb + W z)`, the projected input
    /// and the residual stream after all blocks.
    fn head_trunk<'t>(&self, p: &Bound<'t, T>, x_t: Var<'t, T>, t: &[usize], z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let hw = self.config.head_width;
        let r = x_t.shape()[0];
        if t.len() != r || z.shape() != [r, self.config.d_model] || x_t.shape() != [r, self.config.token_dim()] {
            return Err(ParError::contract(format!(
                "head got x_t {:?}, {} timesteps and z {:?}",
                x_t.shape(),
                t.len(),
                z.shape()
            )));
        }
        let tf = x_t.tape().constant(timestep_features(t, hw));
        let temb = self.ids.t_fc2.apply(p, self.ids.t_fc1.apply(p, tf)?.silu()?)?;
        let y = temb.add(self.ids.z_proj.apply(p, z)?)?.silu()?;
        let h0 = self.ids.head_in.apply(p, x_t)?;
        let mut h = h0;
        for blk in &self.ids.head {
            let m = blk.ada.apply(p, y)?;
            let (shift, scale, gate) = (m.slice(1, 0, hw)?, m.slice(1, hw, hw)?, m.slice(1, 2 * hw, hw)?);
            let a = h.layer_norm(LN_EPS)?.mul(scale.add_scalar(1.0)?)?.add(shift)?;
            let a = blk.fc2.apply(p, blk.fc1.apply(p, a)?.silu()?)?.layer_norm(LN_EPS)?;
            h = h.add(gate.mul(a)?)?;
        }
        Ok((y, h0, h))
    }

    /// Gradient-free conditioning vectors for a single sample, `[N, d]`.
    pub fn infer_z(&self, tokens: &Tensor<T>, known: &[usize], prompt: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.backbone(&p, &[BackboneInput { tokens, known, prompt }])?.value())
    }

    /// Gradient-free noise prediction.
    pub fn infer_eps(&self, x_t: &Tensor<T>, t: &[usize], z: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.head(&p, tape.constant(x_t.clone()), t, tape.constant(z.clone()))?.value())
    }

    /// Gradient-free condition embedding, `[1, d]`.
    pub fn infer_text(&self, prompt: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.embed_text(&p, prompt)?.value())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}
