//! Stages shared by the commands: corpus loading, codec and PAR training,
//! checkpoint persistence.

use std::io::Write as _;
use std::path::Path;

use par_core::codec::{train_codec, Codec, CodecReport};
use par_core::config::RunConfig;
use par_core::io::checkpoint::Checkpoint;
use par_core::model::{patchify, ParModel};
use par_core::synth::{caption, Corpus, CorpusItem};
use par_core::train::{StepMetrics, TrainItem, Trainer};
use par_core::{ParError, Result};

pub const CODEC_PREFIX: &str = "codec.";
pub const MODEL_PREFIX: &str = "par.";

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::load(&cfg.data_dir)?;
    if corpus.height != cfg.image_height {
        return Err(ParError::config(
            "image_height",
            format!("{} but the corpus at {} has height {}", cfg.image_height, cfg.data_dir.display(), corpus.height),
        ));
    }
    Ok(corpus)
}

pub fn fit_codec(cfg: &RunConfig, images: &[par_core::PanoImage<f32>], log: impl FnMut(u64, f64)) -> Result<(Codec<f32>, CodecReport)> {
    let mut codec = Codec::new(cfg.codec_config(), cfg.seed)?;
    let report = train_codec(&mut codec, images, &cfg.codec_train_config(), log)?;
    Ok((codec, report))
}

pub fn save_codec(path: &Path, cfg: &RunConfig, codec: &Codec<f32>) -> Result<()> {
    let mut ck = Checkpoint {
        config: cfg.to_text(),
        stats: Some(codec.stats.clone()),
        ..Checkpoint::default()
    };
    ck.push_params(&codec.params);
    ck.save(path)
}

fn restore_codec(ck: &Checkpoint, cfg: &RunConfig, path: &Path) -> Result<Codec<f32>> {
    let mut codec = Codec::new(cfg.codec_config(), cfg.seed)?;
    ck.restore_params(&mut codec.params, CODEC_PREFIX)?;
    codec.stats = ck
        .stats
        .clone()
        .ok_or_else(|| ParError::format(path, "checkpoint has no latent statistics"))?;
    Ok(codec)
}

/// Codec checkpoint and the configuration it was trained with.
pub fn load_codec(path: &Path) -> Result<(RunConfig, Codec<f32>)> {
    if !path.exists() {
        return Err(ParError::config(
            "codec_checkpoint",
            format!("no codec checkpoint at {}; run train-codec first", path.display()),
        ));
    }
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let codec = restore_codec(&ck, &cfg, path)?;
    Ok((cfg, codec))
}

/// Latent tokens of corpus items under the frozen codec.
pub fn encode_items(codec: &Codec<f32>, cfg: &RunConfig, items: &[&CorpusItem]) -> Result<Vec<TrainItem<f32>>> {
    items
        .iter()
        .map(|it| {
            let lat = codec.encode(&it.image, cfg.r_pre)?;
            Ok(TrainItem {
                tokens: patchify(lat.tensor(), cfg.patch)?,
                prompt: caption(&it.spec),
            })
        })
        .collect()
}

/// Frozen codec plus PAR training state.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RunConfig,
    pub codec: Codec<f32>,
    pub trainer: Trainer<f32>,
}

impl Session {
    pub fn new(config: RunConfig, codec: Codec<f32>) -> Result<Self> {
        let model = ParModel::new(config.model_config(), config.seed)?;
        let trainer = Trainer::new(model, config.train_config(), config.noise_schedule()?);
        Ok(Session { config, codec, trainer })
    }

    pub fn model(&self) -> &ParModel<f32> {
        &self.trainer.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.config.to_text(),
            stats: Some(self.codec.stats.clone()),
            optimizer: Some(self.trainer.opt.clone()),
            ..Checkpoint::default()
        };
        ck.push_params(&self.codec.params);
        ck.push_params(&self.trainer.model.params);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let config = RunConfig::parse(&ck.config)?;
        let codec = restore_codec(ck, &config, path)?;
        let mut s = Session::new(config, codec)?;
        ck.restore_params(&mut s.trainer.model.params, MODEL_PREFIX)?;
        if let Some(opt) = &ck.optimizer {
            if opt.m.len() != s.trainer.model.params.len() {
                return Err(ParError::format(path, "optimizer state does not match the model"));
            }
            s.trainer.step = opt.step;
            s.trainer.opt = opt.clone();
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Outcome of [`train_session`].
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: usize,
}

/// Trains until the configured step count (or `stop_after`, whichever comes
/// first), checkpointing every
/// `checkpoint_every` steps and appending metrics lines to `log_path` when
/// given. A numeric failure writes the last good state to `ckpt_path`
/// before returning the error.
pub fn train_session(
    session: &mut Session,
    data: &[TrainItem<f32>],
    ckpt_path: Option<&Path>,
    log_path: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainLog> {
    let mut log_file = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| ParError::io(dir, e))?;
            }
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| ParError::io(p, e))?,
            )
        }
        None => None,
    };
    let mut out = TrainLog::default();
    let every = session.config.checkpoint_every;
    let end = stop_after.map_or(session.trainer.config.steps, |n| n.min(session.trainer.config.steps));
    while session.trainer.step < end {
        let m = match session.trainer.train_step(data) {
            Ok(m) => m,
            Err(e) if e.is_numeric() => {
                if let Some(p) = ckpt_path {
                    session.save(p)?;
                    return Err(ParError::Numeric(format!("{e}; last good checkpoint written to {}", p.display())));
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), log_path) {
            writeln!(f, "{m}").map_err(|e| ParError::io(p, e))?;
        }
        out.metrics.push(m);
        let done = session.trainer.step;
        if let Some(p) = ckpt_path {
            if done % every == 0 || done == end {
                session.save(p)?;
                out.checkpoints += 1;
            }
        }
    }
    Ok(out)
}
