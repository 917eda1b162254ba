//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use par_tensor::{AdamW, Boundary};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::error::{ParError, Result};
use crate::model::ParConfig;
use crate::sampler::{GroupSchedule, Padding, SampleConfig};
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

/// Comma-separated channel widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Widths)
    }
}

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&s.join(","))
    }
}

impl fmt::Display for GroupSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupSchedule::Uniform => "uniform",
            GroupSchedule::Cosine => "cosine",
        })
    }
}

trait ConfigText {
    fn text(&self) -> String;
}

macro_rules! display_text {
    ($($t:ty),*) => {
        $(impl ConfigText for $t {
            fn text(&self) -> String {
                self.to_string()
            }
        })*
    };
}

display_text!(usize, u64, f64, bool, Widths, GroupSchedule);

impl ConfigText for PathBuf {
    fn text(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key),)*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| ParError::config(key, format!("cannot parse {value:?}: {e}")))?;
                    })*
                    _ => return Err(ParError::config(key, "unknown key")),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($key), self.$key.text()));)*
                s
            }
        }
    };
}

run_config! {
    data_dir: PathBuf = PathBuf::from("corpus"),
    codec_checkpoint: PathBuf = PathBuf::from("codec.ckpt"),
    checkpoint: PathBuf = PathBuf::from("par.ckpt"),
    metrics_log: PathBuf = PathBuf::from("metrics.log"),
    image_height: usize = 32,
    codec_widths: Widths = Widths(vec![16, 32]),
    latent_channels: usize = 8,
    codec_steps: u64 = 1500,
    codec_batch: usize = 4,
    codec_lr: f64 = 2e-3,
    patch: usize = 1,
    d_model: usize = 64,
    enc_blocks: usize = 2,
    dec_blocks: usize = 2,
    heads: usize = 4,
    mlp_ratio: usize = 4,
    head_width: usize = 64,
    head_blocks: usize = 2,
    timesteps: usize = 1000,
    schedule_offset: f64 = 0.008,
    steps: u64 = 2000,
    batch: usize = 8,
    lr: f64 = 1e-3,
    weight_decay: f64 = 0.0,
    clip: f64 = 1.0,
    lambda: f64 = 0.1,
    mask_min: f64 = 0.7,
    mask_max: f64 = 1.0,
    p_uncond: f64 = 0.1,
    checkpoint_every: u64 = 500,
    ar_steps: usize = 64,
    denoise_steps: usize = 25,
    cfg: f64 = 5.0,
    order: GroupSchedule = GroupSchedule::Uniform,
    x0_clip: f64 = 5.0,
    r_pre: f64 = 0.125,
    r_post: f64 = 0.125,
    seed: u64 = 0,
    deterministic: bool = true,
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ParError::config(line, format!("line {} is not `key = value`", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ParError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(ParError::config(key, msg)) };
        need(self.image_height >= 8 && self.image_height % 2 == 0, "image_height", "must be even and >= 8")?;
        need(!self.codec_widths.0.is_empty() && !self.codec_widths.0.contains(&0), "codec_widths", "must be positive")?;
        let stride = 1usize << self.codec_widths.0.len();
        need(self.image_height % (stride * self.patch.max(1)) == 0, "codec_widths", "image height not divisible by the codec stride times patch")?;
        need(self.latent_channels > 0, "latent_channels", "must be positive")?;
        need(self.patch > 0, "patch", "must be positive")?;
        need(self.codec_batch > 0, "codec_batch", "must be positive")?;
        need(self.codec_lr > 0.0, "codec_lr", "must be positive")?;
        need(self.d_model > 0 && self.d_model % 4 == 0, "d_model", "must be a positive multiple of 4")?;
        need(self.heads > 0 && self.d_model % self.heads == 0, "heads", "must divide d_model")?;
        need(self.enc_blocks > 0, "enc_blocks", "must be positive")?;
        need(self.dec_blocks > 0, "dec_blocks", "must be positive")?;
        need(self.mlp_ratio > 0, "mlp_ratio", "must be positive")?;
        need(self.head_width > 0 && self.head_width % 2 == 0, "head_width", "must be positive and even")?;
        need(self.head_blocks > 0, "head_blocks", "must be positive")?;
        need(self.timesteps >= 2, "timesteps", "must be >= 2")?;
        need(self.schedule_offset > 0.0, "schedule_offset", "must be positive")?;
        need(self.batch > 0, "batch", "must be positive")?;
        need(self.lr > 0.0, "lr", "must be positive")?;
        need(self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        need(self.clip > 0.0, "clip", "must be positive")?;
        need(self.lambda >= 0.0, "lambda", "must be non-negative")?;
        need(self.mask_min > 0.0 && self.mask_min <= self.mask_max, "mask_min", "must lie in (0, mask_max]")?;
        need(self.mask_max <= 1.0, "mask_max", "must be <= 1")?;
        need((0.0..=1.0).contains(&self.p_uncond), "p_uncond", "must lie in [0, 1]")?;
        need(self.checkpoint_every > 0, "checkpoint_every", "must be positive")?;
        need(self.ar_steps > 0, "ar_steps", "must be positive")?;
        need(self.denoise_steps > 0 && self.denoise_steps <= self.timesteps, "denoise_steps", "must lie in 1..=timesteps")?;
        need(self.cfg.is_finite(), "cfg", "must be finite")?;
        need(self.x0_clip > 0.0, "x0_clip", "must be positive")?;
        for (k, r) in [("r_pre", self.r_pre), ("r_post", self.r_post)] {
            need((0.0..=0.5).contains(&r), k, "must lie in [0, 0.5]")?;
        }
        Ok(())
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            image_channels: 3,
            widths: self.codec_widths.0.clone(),
            latent_channels: self.latent_channels,
            boundary: Boundary::Zero,
        }
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.codec_steps,
            batch: self.codec_batch,
            optimizer: AdamW {
                lr: self.codec_lr,
                decay_horizon: self.codec_steps,
                ..AdamW::default()
            },
            r_pre: self.r_pre,
            r_post: self.r_post,
            seed: self.seed,
            ..CodecTrainConfig::default()
        }
    }

    pub fn model_config(&self) -> ParConfig {
        let lat_h = self.image_height >> self.codec_widths.0.len();
        ParConfig {
            latent_channels: self.latent_channels,
            patch: self.patch,
            grid_h: lat_h / self.patch,
            grid_w: 2 * lat_h / self.patch,
            d_model: self.d_model,
            enc_blocks: self.enc_blocks,
            dec_blocks: self.dec_blocks,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            head_width: self.head_width,
            head_blocks: self.head_blocks,
            vocab: crate::synth::VOCAB_SIZE,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            optimizer: AdamW {
                lr: self.lr,
                weight_decay: self.weight_decay,
                decay_horizon: self.steps,
                ..AdamW::default()
            },
            lambda: self.lambda,
            mask_ratio: (self.mask_min, self.mask_max),
            p_uncond: self.p_uncond,
            clip: self.clip,
            seed: self.seed,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps, self.schedule_offset)
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            ar_steps: self.ar_steps,
            denoise_steps: self.denoise_steps,
            cfg: self.cfg,
            order: self.order,
            seed: self.seed,
            x0_clip: self.x0_clip,
        }
    }

    pub fn padding(&self) -> Padding {
        Padding {
            r_pre: self.r_pre,
            r_post: self.r_post,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.lambda = 0.0;
        c.codec_widths = Widths(vec![8, 16, 32]);
        c.order = GroupSchedule::Cosine;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("steps = 10\nbogus = 3\n").unwrap_err();
        assert!(matches!(&e, ParError::Config { key, .. } if key == "bogus"), "{e}");
        let e = RunConfig::parse("lambda = -1").unwrap_err();
        assert!(matches!(&e, ParError::Config { key, .. } if key == "lambda"), "{e}");
        let e = RunConfig::parse("cfg = five").unwrap_err();
        assert!(e.to_string().contains("`cfg`"), "{e}");
    }

    #[test]
    fn comments_and_derived_grid() {
        let c = RunConfig::parse("# run\nimage_height = 64 # larger\n").unwrap();
        let m = c.model_config();
        assert_eq!((m.grid_h, m.grid_w), (16, 32));
    }
}
