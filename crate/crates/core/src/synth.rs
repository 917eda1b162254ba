//! Procedural wrap-continuous panoramas with attribute captions.
//!
//! Every image is a sum of a flat palette colour, an integer-frequency
//! luminance stripe band, a latitude gradient and wrapped Gaussian blobs, so
//! each column pair of the raster, the seam included, is an ordinary
//! neighbour pair.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use par_tensor::{Purpose, RngStream, Scalar};

use crate::error::{ParError, Result};
use crate::image::PanoImage;
use crate::io::{read_bytes, read_ppm, write_bytes, write_ppm};
use crate::metrics::discontinuity_score;

/// Vocabulary sizes of the four attribute slots: palette, stripe frequency,
/// blob count, pole gradient.
pub const SLOT_SIZES: [usize; 4] = [8, 6, 4, 4];
/// Stride between slots in the prompt vocabulary.
pub const SLOT_STRIDE: usize = 8;
pub const VOCAB_SIZE: usize = SLOT_STRIDE * SLOT_SIZES.len();

const STRIPE_AMP: f64 = 0.1;
const POLE_STRENGTH: [f64; 4] = [-0.15, -0.05, 0.05, 0.15];
const POLE_DIR: [f64; 3] = [0.5, 0.5, 1.0];
const BLOB_COLOR: [f64; 3] = [0.2, -0.1, 0.0];
const BLOB_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub attrs: [u8; 4],
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(attrs: [u8; 4], seed: u64) -> Result<Self> {
        for (slot, (&a, &n)) in attrs.iter().zip(&SLOT_SIZES).enumerate() {
            if a as usize >= n {
                return Err(ParError::contract(format!("attribute slot {slot} value {a} outside 0..{n}")));
            }
        }
        Ok(SceneSpec { attrs, seed })
    }

    pub fn random(rng: &mut RngStream) -> Self {
        let mut attrs = [0u8; 4];
        for (a, &n) in attrs.iter_mut().zip(&SLOT_SIZES) {
            *a = rng.below(n) as u8;
        }
        let seed = (rng.uniform() * (1u64 << 53) as f64) as u64;
        SceneSpec { attrs, seed }
    }

    pub fn palette(&self) -> usize {
        self.attrs[0] as usize
    }

    pub fn stripe_frequency(&self) -> usize {
        self.attrs[1] as usize + 1
    }

    pub fn blob_count(&self) -> usize {
        self.attrs[2] as usize
    }

    pub fn pole_strength(&self) -> f64 {
        POLE_STRENGTH[self.attrs[3] as usize]
    }
}

/// Corners of the `[0.3, 0.6]³` cube, bit `i` selecting channel `i`.
pub fn palette_color(id: usize) -> [f64; 3] {
    std::array::from_fn(|c| 0.3 + 0.3 * ((id >> c) & 1) as f64)
}

/// Prompt vocabulary id of `value` in `slot`.
pub fn token_id(slot: usize, value: u8) -> usize {
    slot * SLOT_STRIDE + value as usize
}

/// Prompt token ids for attribute values in canonical slot order.
pub fn prompt_from_attrs(attrs: &[u8]) -> Result<Vec<usize>> {
    if attrs.len() > SLOT_SIZES.len() {
        return Err(ParError::contract(format!("prompt has {} attributes, at most 4 slots", attrs.len())));
    }
    attrs
        .iter()
        .enumerate()
        .map(|(slot, &a)| {
            if a as usize >= SLOT_SIZES[slot] {
                Err(ParError::contract(format!("slot {slot} value {a} outside 0..{}", SLOT_SIZES[slot])))
            } else {
                Ok(token_id(slot, a))
            }
        })
        .collect()
}

pub fn caption(spec: &SceneSpec) -> Vec<usize> {
    spec.attrs.iter().enumerate().map(|(s, &a)| token_id(s, a)).collect()
}

fn row_theta(v: usize, h: usize) -> f64 {
    PI * (v as f64 + 0.5) / h as f64
}

fn render_raw(spec: &SceneSpec, h: usize) -> Vec<f64> {
    let w = 2 * h;
    let mut rng = RngStream::new(spec.seed, Purpose::Data);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let n_blobs = spec.blob_count();
    let offset = rng.uniform();
    let blobs: Vec<(f64, f64)> = (0..n_blobs)
        .map(|j| {
            let jitter = rng.uniform_range(-0.25, 0.25);
            let col = (offset + (j as f64 + jitter * 0.5) / n_blobs as f64) * w as f64;
            let row = h as f64 / 2.0 + rng.uniform_range(-1.0, 1.0) * h as f64 / 16.0;
            (row, col)
        })
        .collect();
    let (sig_u, sig_v) = (w as f64 / 24.0, h as f64 / 12.0);
    let base = palette_color(spec.palette());
    let k = spec.stripe_frequency() as f64;
    let g = spec.pole_strength();
    let mut out = vec![0.0; h * w * 3];
    for v in 0..h {
        let theta = row_theta(v, h);
        for u in 0..w {
            let stripe = STRIPE_AMP * (2.0 * PI * k * u as f64 / w as f64 + theta * 2.0 + phase).sin();
            let mut blob = 0.0;
            for &(bv, bu) in &blobs {
                let dv = (v as f64 + 0.5 - bv) / sig_v;
                for wrap in [-1.0, 0.0, 1.0] {
                    let du = (u as f64 - bu + wrap * w as f64) / sig_u;
                    blob += (-0.5 * (du * du + dv * dv)).exp();
                }
            }
            for c in 0..3 {
                let x = base[c] + stripe + g * theta.cos() * POLE_DIR[c] + blob * BLOB_COLOR[c];
                out[(v * w + u) * 3 + c] = (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    out
}

/// Renders `spec` at height `h` (width `2h`), values on the 8-bit grid.
///
/// The raster is rolled so that the seam falls on the column pair whose
/// discontinuity score is largest among those not exceeding 1.
pub fn render<T: Scalar>(spec: &SceneSpec, h: usize) -> Result<PanoImage<T>> {
    if h < 8 || h % 2 != 0 {
        return Err(ParError::contract(format!("render height {h} must be even and >= 8")));
    }
    let raw = PanoImage::<f64>::new(par_tensor::Tensor::new(&[h, 2 * h, 3], render_raw(spec, h))?)?;
    let mut best = (f64::NEG_INFINITY, 0isize);
    for s in 0..2 * h as isize {
        let ds = discontinuity_score(&raw.shift(s)?)?;
        if ds <= 1.0 && ds > best.0 {
            best = (ds, s);
        }
    }
    Ok(raw.shift(best.1)?.cast())
}

/// Attribute measurements that read the rendered raster directly.
pub mod oracle {
    use super::*;

    pub fn palette<T: Scalar>(img: &PanoImage<T>) -> u8 {
        let n = (img.height() * img.width()) as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| {
            let mut s = 0.0;
            for v in 0..img.height() {
                for u in 0..img.width() {
                    s += img.at(v, u, c).as_f64();
                }
            }
            s / n
        });
        (0..SLOT_SIZES[0])
            .min_by(|&a, &b| {
                let d = |id: usize| palette_color(id).iter().zip(&mean).map(|(p, m)| (p - m).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap() as u8
    }

    /// Dominant longitude frequency of the blue channel, majority over rows.
    pub fn stripe_frequency<T: Scalar>(img: &PanoImage<T>) -> usize {
        let (h, w) = (img.height(), img.width());
        let mut votes = vec![0usize; w / 2 + 1];
        for v in 0..h {
            let mut best = (0.0, 0usize);
            for k in 1..=w / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for u in 0..w {
                    let a = 2.0 * PI * (k * u) as f64 / w as f64;
                    let x = img.at(v, u, 2).as_f64();
                    re += x * a.cos();
                    im += x * a.sin();
                }
                let mag = re * re + im * im;
                if mag > best.0 {
                    best = (mag, k);
                }
            }
            votes[best.1] += 1;
        }
        (0..votes.len()).max_by_key(|&k| (votes[k], std::cmp::Reverse(k))).unwrap()
    }

    pub fn stripe<T: Scalar>(img: &PanoImage<T>) -> u8 {
        stripe_frequency(img).saturating_sub(1).min(SLOT_SIZES[1] - 1) as u8
    }

    /// Least-squares slope of blue row means against `cos θ`.
    pub fn pole_slope<T: Scalar>(img: &PanoImage<T>) -> f64 {
        let (h, w) = (img.height(), img.width());
        let pts: Vec<(f64, f64)> = (0..h)
            .map(|v| {
                let m = (0..w).map(|u| img.at(v, u, 2).as_f64()).sum::<f64>() / w as f64;
                (row_theta(v, h).cos(), m)
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / h as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / h as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    pub fn pole<T: Scalar>(img: &PanoImage<T>) -> u8 {
        let s = pole_slope(img);
        (0..POLE_STRENGTH.len())
            .min_by(|&a, &b| (POLE_STRENGTH[a] - s).abs().total_cmp(&(POLE_STRENGTH[b] - s).abs()))
            .unwrap() as u8
    }

    /// Circular runs of columns where the red-minus-green excess peaks
    /// above the blob threshold.
    pub fn blob_count<T: Scalar>(img: &PanoImage<T>) -> usize {
        let (h, w) = (img.height(), img.width());
        let diff = |v: usize, u: usize| img.at(v, u, 0).as_f64() - img.at(v, u, 1).as_f64();
        let mean = (0..h).flat_map(|v| (0..w).map(move |u| (v, u))).map(|(v, u)| diff(v, u)).sum::<f64>()
            / (h * w) as f64;
        let above: Vec<bool> = (0..w)
            .map(|u| (0..h).map(|v| diff(v, u) - mean).fold(f64::NEG_INFINITY, f64::max) > BLOB_THRESHOLD)
            .collect();
        if above.iter().all(|&a| a) {
            return 1;
        }
        (0..w).filter(|&u| above[u] && !above[(u + w - 1) % w]).count()
    }

    pub fn blobs<T: Scalar>(img: &PanoImage<T>) -> u8 {
        blob_count(img).min(SLOT_SIZES[2] - 1) as u8
    }

    pub fn classify<T: Scalar>(img: &PanoImage<T>) -> [u8; 4] {
        [palette(img), stripe(img), blobs(img), pole(img)]
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub file: String,
    pub spec: SceneSpec,
    pub image: PanoImage<f32>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub height: usize,
    pub items: Vec<CorpusItem>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.txt";
pub const SPLIT: &str = "split.txt";

/// 90/10 train/validation split by seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = RngStream::new(seed, Purpose::Data).substream(u64::MAX).permutation(n);
    let n_val = (n as f64 * 0.1).round() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

impl Corpus {
    pub fn build(n: usize, seed: u64, height: usize) -> Result<Self> {
        if n == 0 {
            return Err(ParError::contract("corpus size must be >= 1"));
        }
        let root = RngStream::new(seed, Purpose::Data);
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let spec = SceneSpec::random(&mut root.substream(i as u64));
            items.push(CorpusItem {
                file: format!("img_{i:05}.ppm"),
                spec,
                image: render(&spec, height)?,
            });
        }
        let (train, val) = split_indices(n, seed);
        Ok(Corpus {
            height,
            items,
            train,
            val,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<PanoImage<f32>> {
        self.items.iter().map(|i| i.image.clone()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&CorpusItem> {
        idx.iter().map(|&i| &self.items[i]).collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            let a = it.spec.attrs;
            let _ = writeln!(s, "{}, {}, {}, {}, {}, {}", it.file, a[0], a[1], a[2], a[3], it.spec.seed);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for it in &self.items {
            write_ppm(&dir.join(&it.file), &it.image)?;
        }
        write_bytes(&dir.join(MANIFEST), self.manifest_text().as_bytes())?;
        let mut split = String::new();
        for (name, set) in [("train", &self.train), ("val", &self.val)] {
            for &i in set.iter() {
                let _ = writeln!(split, "{name} {}", self.items[i].file);
            }
        }
        write_bytes(&dir.join(SPLIT), split.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = String::from_utf8(read_bytes(&mpath)?).map_err(|_| ParError::format(&mpath, "not UTF-8"))?;
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || ParError::format(&mpath, format!("line {}: expected `path, a0, a1, a2, a3, seed`", ln + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let mut attrs = [0u8; 4];
            for (a, s) in attrs.iter_mut().zip(&f[1..5]) {
                *a = s.parse().map_err(|_| bad())?;
            }
            let spec = SceneSpec::new(attrs, f[5].parse().map_err(|_| bad())?)
                .map_err(|e| ParError::format(&mpath, format!("line {}: {e}", ln + 1)))?;
            let image = read_ppm(&dir.join(f[0]))?;
            items.push(CorpusItem {
                file: f[0].to_string(),
                spec,
                image,
            });
        }
        if items.is_empty() {
            return Err(ParError::format(&mpath, "manifest lists no images"));
        }
        let height = items[0].image.height();
        if let Some(it) = items.iter().find(|it| it.image.height() != height) {
            return Err(ParError::format(dir.join(&it.file), format!("height differs from {height}")));
        }
        let (train, val) = load_split(dir, &items)?;
        Ok(Corpus {
            height,
            items,
            train,
            val,
        })
    }
}

fn load_split(dir: &Path, items: &[CorpusItem]) -> Result<(Vec<usize>, Vec<usize>)> {
    let path: PathBuf = dir.join(SPLIT);
    if !path.exists() {
        return Ok(((0..items.len()).collect(), Vec::new()));
    }
    let text = String::from_utf8(read_bytes(&path)?).map_err(|_| ParError::format(&path, "not UTF-8"))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (set, file) = line
            .split_once(' ')
            .ok_or_else(|| ParError::format(&path, format!("bad line `{line}`")))?;
        let i = items
            .iter()
            .position(|it| it.file == file)
            .ok_or_else(|| ParError::format(&path, format!("unknown file `{file}`")))?;
        match set {
            "train" => train.push(i),
            "val" => val.push(i),
            _ => return Err(ParError::format(&path, format!("unknown split `{set}`"))),
        }
    }
    Ok((train, val))
}
