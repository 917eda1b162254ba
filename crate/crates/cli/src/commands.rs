use std::fmt::Write as _;
use std::path::Path;

use par_core::config::RunConfig;
use par_core::erp::{verify_non_iid, NonIidConfig};
use par_core::io::{read_pgm, read_ppm, write_ppm};
use par_core::metrics::{equivariance_gap, frechet_distance, mean_discontinuity, RandomPatchFeatures};
use par_core::sampler::{complete, text_to_panorama, token_mask, Panorama};
use par_core::synth::{caption, prompt_from_attrs, Corpus};
use par_core::{ParError, Result};

use crate::args::{Cli, Command, EditArgs, SampleArgs, TrainArgs};
use crate::pipeline::{encode_items, fit_codec, load_codec, load_corpus, save_codec, train_session, Session};

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::MakeData { n, seed, out_dir, height } => make_data(n, seed, &out_dir, height),
        Command::TrainCodec(a) => train_codec_cmd(&a),
        Command::Train { common, resume, stop_after } => train_cmd(&common, resume, stop_after),
        Command::Generate { sample, prompt, count, out_dir } => generate_cmd(&sample, &prompt, count, &out_dir),
        Command::Outpaint(a) => edit_cmd(&a, "outpaint"),
        Command::Edit(a) => edit_cmd(&a, "edit"),
        Command::Eval { sample, data_dir, count, out } => eval_cmd(&sample, data_dir.as_deref(), count, &out),
        Command::VerifyErp { height, samples, realizations, seed, out } => verify_erp(height, samples, realizations, seed, out.as_deref()),
    }
}

pub fn make_data(n: usize, seed: u64, dir: &Path, height: usize) -> Result<String> {
    let corpus = Corpus::build(n, seed, height)?;
    corpus.write(dir)?;
    Ok(format!("wrote {n} images ({height}x{}) to {}", 2 * height, dir.display()))
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ParError::config(kv.as_str(), "override must be key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_codec_cmd(a: &TrainArgs) -> Result<String> {
    let cfg = load_config(a)?;
    let corpus = load_corpus(&cfg)?;
    let train: Vec<_> = corpus.subset(&corpus.train).into_iter().map(|i| i.image.clone()).collect();
    let (codec, report) = fit_codec(&cfg, &train, |_, _| {})?;
    save_codec(&cfg.codec_checkpoint, &cfg, &codec)?;
    let val: Vec<_> = corpus.subset(&corpus.val).into_iter().map(|i| i.image.clone()).collect();
    let mut msg = format!(
        "codec trained {} steps: mse {:.6} -> {:.6}",
        report.steps, report.initial_mse, report.final_mse
    );
    if !val.is_empty() {
        let _ = write!(msg, ", held-out mse {:.6}", codec.mse(&val, cfg.r_pre, cfg.r_post)?);
    }
    let _ = write!(msg, "; saved {}", cfg.codec_checkpoint.display());
    Ok(msg)
}

fn train_cmd(a: &TrainArgs, resume: bool, stop_after: Option<u64>) -> Result<String> {
    let cfg = load_config(a)?;
    let corpus = load_corpus(&cfg)?;
    let mut session = if resume {
        let mut s = Session::load(&cfg.checkpoint)?;
        s.trainer.config.steps = cfg.steps;
        s.trainer.config.optimizer.decay_horizon = cfg.steps;
        s.config.steps = cfg.steps;
        s
    } else {
        let (codec_cfg, codec) = load_codec(&cfg.codec_checkpoint)?;
        for key in ["image_height", "codec_widths", "latent_channels", "r_pre"] {
            let (a, b) = (field(&codec_cfg, key), field(&cfg, key));
            if a != b {
                return Err(ParError::config(key, format!("{b} differs from the codec checkpoint's {a}")));
            }
        }
        Session::new(cfg.clone(), codec)?
    };
    let items = encode_items(&session.codec, &session.config, &corpus.subset(&corpus.train))?;
    let start = session.trainer.step;
    let log = train_session(&mut session, &items, Some(&cfg.checkpoint), Some(&cfg.metrics_log), stop_after)?;
    let mut msg = format!("trained steps {start}..{}", session.trainer.step);
    if let (Some(first), Some(last)) = (log.metrics.first(), log.metrics.last()) {
        let _ = write!(msg, ": loss_va {:.5} -> {:.5}", first.loss_va, last.loss_va);
    }
    let _ = write!(msg, "; saved {}", cfg.checkpoint.display());
    Ok(msg)
}

fn field(cfg: &RunConfig, key: &str) -> String {
    cfg.to_text()
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")).map(str::to_string))
        .unwrap_or_default()
}

/// Checkpoint with sampling overrides applied to its config.
fn load_for_sampling(a: &SampleArgs) -> Result<Session> {
    let mut s = Session::load(&a.checkpoint)?;
    let c = &mut s.config;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.cfg {
        c.cfg = v;
    }
    if let Some(v) = a.ar_steps {
        c.ar_steps = v;
    }
    if let Some(v) = a.denoise_steps {
        c.denoise_steps = v;
    }
    if let Some(v) = a.r_pre {
        c.r_pre = v;
    }
    if let Some(v) = a.r_post {
        c.r_post = v;
    }
    c.validate()?;
    Ok(s)
}

pub fn parse_prompt(text: &str) -> Result<Vec<usize>> {
    let attrs: Vec<u8> = text
        .split_whitespace()
        .map(|t| t.parse::<u8>().map_err(|_| ParError::config("prompt", format!("{t:?} is not an attribute value"))))
        .collect::<Result<_>>()?;
    prompt_from_attrs(&attrs).map_err(|e| ParError::config("prompt", e.to_string()))
}

fn sidecar(cfg: &RunConfig, task: &str, prompt: &[usize], pano: &Panorama<f32>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "task = {task}");
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let ids: Vec<String> = prompt.iter().map(|p| p.to_string()).collect();
    let _ = writeln!(s, "prompt_ids = {}", ids.join(" "));
    for key in ["ar_steps", "denoise_steps", "cfg", "order", "r_pre", "r_post", "x0_clip"] {
        let _ = writeln!(s, "{key} = {}", field(cfg, key));
    }
    let _ = writeln!(s, "backbone_calls = {}", pano.generation.backbone_calls);
    if let Some(plan) = &pano.generation.plan {
        for (i, g) in plan.groups.iter().enumerate() {
            let pos: Vec<String> = g.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(s, "group {i} = {}", pos.join(" "));
        }
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ParError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| ParError::io(path, e))
}

fn generate_cmd(a: &SampleArgs, prompt: &str, count: usize, out_dir: &Path) -> Result<String> {
    let mut s = load_for_sampling(a)?;
    let ids = parse_prompt(prompt)?;
    let base = s.config.seed;
    let sched = s.trainer.schedule.clone();
    for i in 0..count {
        s.config.seed = base + i as u64;
        let pano = text_to_panorama(s.model(), &s.codec, &sched, &ids, &s.config.sample_config(), s.config.padding())?;
        let stem = out_dir.join(format!("sample_{i:03}"));
        write_ppm(&stem.with_extension("ppm"), &pano.image)?;
        write_text(&stem.with_extension("txt"), &sidecar(&s.config, "generate", &ids, &pano))?;
    }
    Ok(format!("wrote {count} samples to {}", out_dir.display()))
}

fn edit_cmd(a: &EditArgs, task: &str) -> Result<String> {
    let s = load_for_sampling(&a.sample)?;
    let img = read_ppm::<f32>(&a.input)?;
    let mask = read_pgm(&a.mask)?;
    if mask.width != img.width() || mask.height != img.height() {
        return Err(ParError::contract(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    let mc = &s.model().config;
    let keep = token_mask(&mask, s.codec.stride() * mc.patch, mc.grid_h, mc.grid_w)?;
    if !keep.contains(&true) {
        eprintln!("warning: keep-mask is empty; {task} reduces to text-to-panorama");
    }
    let ids = parse_prompt(&a.prompt)?;
    let pano = complete(s.model(), &s.codec, &s.trainer.schedule, &img, &keep, &ids, &s.config.sample_config(), s.config.padding())?;
    write_ppm(&a.out, &pano.image)?;
    write_text(&a.out.with_extension("txt"), &sidecar(&s.config, task, &ids, &pano))?;
    Ok(format!("wrote {}", a.out.display()))
}

fn eval_cmd(a: &SampleArgs, data_dir: Option<&Path>, count: usize, out: &Path) -> Result<String> {
    let mut s = load_for_sampling(a)?;
    let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| s.config.data_dir.clone());
    let corpus = Corpus::load(&dir)?;
    let real = corpus.images();
    let eval_items = if corpus.val.is_empty() { corpus.subset(&corpus.train) } else { corpus.subset(&corpus.val) };
    let base = s.config.seed;
    let mut generated = Vec::with_capacity(count);
    for i in 0..count {
        s.config.seed = base + i as u64;
        let prompt = caption(&corpus.items[i % corpus.len()].spec);
        let pano = text_to_panorama(s.model(), &s.codec, &s.trainer.schedule, &prompt, &s.config.sample_config(), s.config.padding())?;
        generated.push(pano.image.clamp01());
    }
    let feats = RandomPatchFeatures::new(8, 64, 3, base);
    let fd = frechet_distance(&feats.feature_set(&generated)?, &feats.feature_set(&real)?)?;
    let held: Vec<_> = eval_items.iter().map(|i| i.image.clone()).collect();
    let tokens = encode_items(&s.codec, &s.config, &eval_items)?;
    let mc = &s.model().config;
    let shifts: Vec<usize> = (1..mc.grid_w).map(|k| k * mc.patch).collect();
    let gap = equivariance_gap(s.model(), &s.trainer.schedule, &tokens, &shifts, (s.config.mask_min, s.config.mask_max), base)?;
    let rows = [
        ("ds_generated".to_string(), mean_discontinuity(&generated)?, count),
        ("ds_corpus".to_string(), mean_discontinuity(&real)?, real.len()),
        (format!("frechet_{}", feats.label()), fd, count),
        ("codec_mse_held_out".to_string(), s.codec.mse(&held, s.config.r_pre, s.config.r_post)?, held.len()),
        ("equivariance_gap_held_out".to_string(), gap, tokens.len()),
    ];
    let mut table = format!("{:<28} {:>14} {:>6} {:>6}\n", "metric", "value", "n", "seed");
    for (name, v, n) in rows {
        let _ = writeln!(table, "{name:<28} {v:>14.6} {n:>6} {base:>6}");
    }
    write_text(out, &table)?;
    Ok(table.trim_end().to_string())
}

pub fn verify_erp(height: usize, samples: usize, realizations: usize, seed: u64, out: Option<&Path>) -> Result<String> {
    let mut cfg = NonIidConfig::new(height, samples);
    cfg.realizations = realizations;
    cfg.seed = seed;
    cfg.threads = crate::worker_threads();
    let report = verify_non_iid(&cfg)?;
    let text = report.to_text();
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    if report.passes() {
        Ok(text.trim_end().to_string())
    } else {
        print!("{text}");
        Err(ParError::Verification("ERP variance/independence check failed".into()))
    }
}
