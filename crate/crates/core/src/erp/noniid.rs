//! Monte-Carlo check that area-averaged white noise on the sphere yields
//! independent ERP pixels whose variance grows toward the poles.

use std::f64::consts::PI;
use std::fmt::Write as _;

use par_tensor::{Purpose, RngStream};

use super::{pixel_solid_angle, row_theta};
use crate::error::{ParError, Result};

#[derive(Debug, Clone)]
pub struct NonIidConfig {
    pub height: usize,
    pub sigma2: f64,
    /// Points drawn per field realization.
    pub samples: usize,
    /// Independent field realizations; controls estimator precision.
    pub realizations: usize,
    pub seed: u64,
    pub threads: usize,
    /// Relative tolerance for the variance tests.
    pub tolerance: f64,
}

impl NonIidConfig {
    pub fn new(height: usize, samples: usize) -> Self {
        NonIidConfig {
            height,
            sigma2: 1.0,
            samples,
            realizations: 1000,
            seed: 0,
            threads: 1,
            tolerance: 0.05,
        }
    }

    pub fn width(&self) -> usize {
        2 * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowVariance {
    pub v: usize,
    pub sin_theta: f64,
    pub empirical: f64,
    /// `σ²/A` with the exact cell area.
    pub predicted_exact: f64,
    /// `σ²·WH/(2π²)·(1/sin θ_v)`.
    pub predicted: f64,
    /// `empirical / predicted`; `None` for degenerate pole rows.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceCheck {
    pub label: &'static str,
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub covariance: f64,
    pub std_err: f64,
    pub correlation: f64,
}

impl CovarianceCheck {
    pub fn within(&self, n_se: f64) -> bool {
        self.covariance.abs() <= n_se * self.std_err
    }
}

/// Variance ratio between the row nearest `sin θ = ½` (pooled with its
/// mirror) and the equator row.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCheck {
    pub equator_row: usize,
    pub half_rows: (usize, usize),
    pub empirical: f64,
    pub predicted: f64,
    pub nominal: f64,
}

impl RatioCheck {
    pub fn passes(&self, tol: f64) -> bool {
        (self.empirical / self.nominal - 1.0).abs() <= tol && (self.empirical / self.predicted - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone)]
pub struct NonIidReport {
    pub config: NonIidConfig,
    pub rows: Vec<RowVariance>,
    pub covariances: Vec<CovarianceCheck>,
    pub ratio: RatioCheck,
    pub degenerate_rows: Vec<usize>,
}

const SIN_FLOOR: f64 = 1e-6;
const ROW_TEST_MIN_SIN: f64 = 0.2;

impl NonIidReport {
    /// Rows with `sin θ ≥ 0.2` whose empirical variance misses the prediction.
    pub fn failing_rows(&self) -> Vec<usize> {
        let tol = self.config.tolerance;
        self.rows
            .iter()
            .filter(|r| r.sin_theta >= ROW_TEST_MIN_SIN)
            .filter(|r| r.ratio.is_none_or(|q| (q - 1.0).abs() > tol))
            .map(|r| r.v)
            .collect()
    }

    pub fn passes(&self) -> bool {
        self.ratio.passes(self.config.tolerance)
            && self.covariances.iter().all(|c| c.within(3.0))
            && self.failing_rows().is_empty()
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# erp non-iid check W={} H={} sigma2={} samples={} realizations={} seed={}",
            c.width(),
            c.height,
            c.sigma2,
            c.samples,
            c.realizations,
            c.seed
        );
        let _ = writeln!(s, "# v sin_theta empirical_var predicted_var ratio");
        for r in &self.rows {
            match r.ratio {
                Some(q) => {
                    let _ = writeln!(s, "{} {:.6} {:.6e} {:.6e} {:.5}", r.v, r.sin_theta, r.empirical, r.predicted, q);
                }
                None => {
                    let _ = writeln!(s, "{} {:.6} {:.6e} - degenerate", r.v, r.sin_theta, r.empirical);
                }
            }
        }
        let q = &self.ratio;
        let _ = writeln!(
            s,
            "ratio rows {}+{} / {}: empirical {:.5} predicted {:.5} nominal {:.1} -> {}",
            q.half_rows.0,
            q.half_rows.1,
            q.equator_row,
            q.empirical,
            q.predicted,
            q.nominal,
            verdict(q.passes(c.tolerance))
        );
        for cv in &self.covariances {
            let _ = writeln!(
                s,
                "cov {} ({},{})-({},{}): {:.4e} se {:.4e} corr {:+.5} -> {}",
                cv.label,
                cv.a.0,
                cv.a.1,
                cv.b.0,
                cv.b.1,
                cv.covariance,
                cv.std_err,
                cv.correlation,
                verdict(cv.within(3.0))
            );
        }
        let failing = self.failing_rows();
        let _ = writeln!(
            s,
            "rows with sin>={ROW_TEST_MIN_SIN} within {}%: {}",
            c.tolerance * 100.0,
            if failing.is_empty() { "all".to_string() } else { format!("failing {failing:?}") }
        );
        let _ = writeln!(s, "overall: {}", verdict(self.passes()));
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Pixel pairs (u, v) whose covariance is estimated; all offsets are taken
/// relative to a base column that sweeps the full width.
fn pair_specs(h: usize, w: usize) -> Vec<(&'static str, (usize, usize), (usize, usize))> {
    vec![
        ("equator-horizontal", (0, h / 2), (1, h / 2)),
        ("equator-vertical", (0, h / 2), (0, h / 2 + 1)),
        ("diagonal", (0, h / 4), (1, h / 4 + 1)),
        ("antipodal", (0, h / 2), (w / 2, h / 2)),
        ("high-latitude", (0, h / 8), (1, h / 8)),
    ]
}

/// Maps `z = cos θ` to the row whose band `[θ_v − ½, θ_v + ½)` contains it,
/// without evaluating `acos` per point.
struct RowLookup {
    /// `cos` of the lower band edge of each row but the last (decreasing).
    edges: Vec<f64>,
    /// First row reachable from each uniform bin of `z`, scanning downward.
    start: Vec<usize>,
}

impl RowLookup {
    const BINS: usize = 4096;

    fn new(h: usize) -> Self {
        let edges: Vec<f64> = (0..h - 1).map(|r| row_theta(r as f64 + 0.5, h).cos()).collect();
        let start = (0..Self::BINS)
            .map(|b| {
                let z_hi = 1.0 - 2.0 * b as f64 / Self::BINS as f64;
                edges.iter().take_while(|&&e| z_hi <= e).count()
            })
            .collect();
        RowLookup { edges, start }
    }

    #[inline]
    fn row(&self, z: f64) -> usize {
        let bin = (((1.0 - z) * 0.5 * Self::BINS as f64) as usize).min(Self::BINS - 1);
        let mut r = self.start[bin];
        while r < self.edges.len() && z <= self.edges[r] {
            r += 1;
        }
        r
    }
}

struct Partial {
    row_sum: Vec<f64>,
    row_sq: Vec<f64>,
    pair_xy: Vec<f64>,
    pair_xy2: Vec<f64>,
    pair_xx: Vec<f64>,
    pair_yy: Vec<f64>,
}

fn realization(cfg: &NonIidConfig, inv_area: &[f64], pairs: &[(&str, (usize, usize), (usize, usize))], k: u64) -> Partial {
    let (h, w) = (cfg.height, cfg.width());
    let mut rng = RngStream::new(cfg.seed, Purpose::DiffusionNoise).substream(k);
    let weight_std = (cfg.sigma2 * 4.0 * PI / cfg.samples as f64).sqrt();
    let mut acc = vec![0.0f64; h * w];
    let rows = RowLookup::new(h);
    let wf = w as f64;
    for _ in 0..cfg.samples {
        let z = 1.0 - 2.0 * rng.uniform();
        let col_frac = rng.uniform();
        let g = rng.normal();
        let row = rows.row(z);
        let mut col = (col_frac * wf + 0.5) as usize;
        if col == w {
            col = 0;
        }
        acc[row * w + col] += g;
    }
    for v in 0..h {
        for x in &mut acc[v * w..(v + 1) * w] {
            *x *= weight_std * inv_area[v];
        }
    }
    let mut p = Partial {
        row_sum: vec![0.0; h],
        row_sq: vec![0.0; h],
        pair_xy: vec![0.0; pairs.len()],
        pair_xy2: vec![0.0; pairs.len()],
        pair_xx: vec![0.0; pairs.len()],
        pair_yy: vec![0.0; pairs.len()],
    };
    for v in 0..h {
        for &x in &acc[v * w..(v + 1) * w] {
            p.row_sum[v] += x;
            p.row_sq[v] += x * x;
        }
    }
    for (i, &(_, a, b)) in pairs.iter().enumerate() {
        for u in 0..w {
            let x = acc[a.1 * w + (a.0 + u) % w];
            let y = acc[b.1 * w + (b.0 + u) % w];
            p.pair_xy[i] += x * y;
            p.pair_xy2[i] += (x * y) * (x * y);
            p.pair_xx[i] += x * x;
            p.pair_yy[i] += y * y;
        }
    }
    p
}

/// Samples white-noise fields on the sphere and tests the per-row variance
/// law and pixel independence. Realizations are sharded over
/// `config.threads` workers and reduced in realization order, so the report
/// does not depend on the thread count.
pub fn verify_non_iid(config: &NonIidConfig) -> Result<NonIidReport> {
    let (h, w) = (config.height, config.width());
    if h < 8 || h % 8 != 0 {
        return Err(ParError::contract(format!("height {h} must be a positive multiple of 8")));
    }
    if config.samples < 100_000 {
        return Err(ParError::contract(format!("samples {} below the 1e5 minimum", config.samples)));
    }
    if config.realizations < 2 || !(config.sigma2 > 0.0) {
        return Err(ParError::contract("need at least 2 realizations and sigma2 > 0"));
    }
    let areas: Vec<_> = (0..h).map(|v| pixel_solid_angle(v, w, h)).collect::<Result<_>>()?;
    let inv_area: Vec<f64> = areas.iter().map(|a| 1.0 / a.exact).collect();
    let pairs = pair_specs(h, w);

    let threads = config.threads.clamp(1, config.realizations);
    let mut partials: Vec<Option<Partial>> = (0..config.realizations).map(|_| None).collect();
    let chunk = config.realizations.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slot) in partials.chunks_mut(chunk).enumerate() {
            let (inv_area, pairs) = (&inv_area, &pairs);
            scope.spawn(move || {
                for (j, out) in slot.iter_mut().enumerate() {
                    *out = Some(realization(config, inv_area, pairs, (t * chunk + j) as u64));
                }
            });
        }
    });

    let mut row_sum = vec![0.0; h];
    let mut row_sq = vec![0.0; h];
    let np = pairs.len();
    let (mut xy, mut xy2, mut xx, mut yy) = (vec![0.0; np], vec![0.0; np], vec![0.0; np], vec![0.0; np]);
    for p in partials.into_iter().flatten() {
        for v in 0..h {
            row_sum[v] += p.row_sum[v];
            row_sq[v] += p.row_sq[v];
        }
        for i in 0..np {
            xy[i] += p.pair_xy[i];
            xy2[i] += p.pair_xy2[i];
            xx[i] += p.pair_xx[i];
            yy[i] += p.pair_yy[i];
        }
    }

    let n_row = (w * config.realizations) as f64;
    let pooled_var = |sum: f64, sq: f64, n: f64| (sq - sum * sum / n) / (n - 1.0);
    let mut rows = Vec::with_capacity(h);
    let mut degenerate_rows = Vec::new();
    for v in 0..h {
        let sin_theta = row_theta(v as f64, h).sin();
        let empirical = pooled_var(row_sum[v], row_sq[v], n_row);
        let predicted = config.sigma2 * (w * h) as f64 / (2.0 * PI * PI) / sin_theta.max(SIN_FLOOR);
        let degenerate = sin_theta < SIN_FLOOR;
        if degenerate {
            degenerate_rows.push(v);
        }
        rows.push(RowVariance {
            v,
            sin_theta,
            empirical,
            predicted_exact: config.sigma2 * inv_area[v],
            predicted,
            ratio: (!degenerate).then(|| empirical / predicted),
        });
    }

    // Row nearest sin θ = ½ in the northern half, pooled with its mirror.
    let half = (h as f64 / 6.0).round() as usize;
    let mirror = h - half;
    let eq = h / 2;
    let half_var = pooled_var(row_sum[half] + row_sum[mirror], row_sq[half] + row_sq[mirror], 2.0 * n_row);
    let ratio = RatioCheck {
        equator_row: eq,
        half_rows: (half, mirror),
        empirical: half_var / rows[eq].empirical,
        predicted: rows[eq].sin_theta / rows[half].sin_theta,
        nominal: 2.0,
    };

    let covariances = pairs
        .iter()
        .enumerate()
        .map(|(i, &(label, a, b))| {
            let cov = xy[i] / n_row;
            let var_prod = (xy2[i] / n_row - cov * cov).max(0.0);
            CovarianceCheck {
                label,
                a,
                b,
                covariance: cov,
                std_err: (var_prod / n_row).sqrt(),
                correlation: cov / (xx[i] / n_row * yy[i] / n_row).sqrt(),
            }
        })
        .collect();

    Ok(NonIidReport {
        config: config.clone(),
        rows,
        covariances,
        ratio,
        degenerate_rows,
    })
}
