//! Equirectangular projection: sphere ↔ raster mapping, per-pixel solid
//! angles, the cyclic translation operator and circular padding.
//!
//! Conventions: `φ ∈ (−π, π]` is longitude, `θ ∈ [0, π]` the polar angle,
//! `u = (φ+π)/(2π)·W`, `v = θ/π·H`, and every raster has `W = 2H`.
//! Geometry is evaluated in `f64`; the tensor operators are scalar-generic.

mod noniid;
mod wrap;

use std::f64::consts::PI;

pub use noniid::{verify_non_iid, CovarianceCheck, NonIidConfig, NonIidReport, RatioCheck, RowVariance};
pub use wrap::{circular_pad, circular_pad_axis, crop_padding, crop_padding_axis, cyclic_shift, cyclic_shift_axis, pad_width};

use crate::error::{ParError, Result};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SpherePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let p = SpherePoint { x, y, z };
        let n2 = x * x + y * y + z * z;
        if !((n2 - 1.0).abs() <= UNIT_TOL) {
            return Err(ParError::contract(format!(
                "sphere point ({x}, {y}, {z}) has squared norm {n2}, expected 1"
            )));
        }
        Ok(p)
    }

    /// Angle between two unit vectors, stable for tiny separations.
    pub fn angle_to(&self, o: &SpherePoint) -> f64 {
        let cross = [
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        ];
        let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
        let cos = self.x * o.x + self.y * o.y + self.z * o.z;
        sin.atan2(cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErpCoord {
    pub u: f64,
    pub v: f64,
    pub width: usize,
    pub height: usize,
}

fn check_aspect(width: usize, height: usize) -> Result<()> {
    if height == 0 || width != 2 * height {
        return Err(ParError::contract(format!(
            "equirectangular raster must satisfy W = 2H, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Longitude/latitude to raster coordinates; `u` wraps into `[0, W)`.
pub fn sphere_to_erp(p: &SpherePoint, width: usize, height: usize) -> Result<ErpCoord> {
    SpherePoint::new(p.x, p.y, p.z)?;
    check_aspect(width, height)?;
    // atan2(0, 0) is 0, which puts the poles at u = W/2.
    let phi = p.y.atan2(p.x);
    let theta = p.z.clamp(-1.0, 1.0).acos();
    let w = width as f64;
    let mut u = (phi + PI) / (2.0 * PI) * w;
    if u >= w {
        u -= w;
    }
    Ok(ErpCoord {
        u,
        v: theta / PI * height as f64,
        width,
        height,
    })
}

pub fn erp_to_sphere(c: &ErpCoord) -> SpherePoint {
    let phi = 2.0 * PI * c.u / c.width as f64 - PI;
    let theta = PI * c.v / c.height as f64;
    SpherePoint {
        x: theta.sin() * phi.cos(),
        y: theta.sin() * phi.sin(),
        z: theta.cos(),
    }
}

/// Polar angle at the centre of row `v`.
pub fn row_theta(v: f64, height: usize) -> f64 {
    PI * v / height as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelArea {
    /// Cosine-difference form with pole boundaries clamped to `[0, π]`.
    pub exact: f64,
    /// Mid-latitude form `2π²/(WH)·sin θ_v`.
    pub approx: f64,
}

/// Row boundaries in polar angle. The first and last rows extend to the
/// poles so the rows tile the sphere.
pub fn row_bounds(v: usize, height: usize) -> (f64, f64) {
    let lo = if v == 0 { 0.0 } else { row_theta(v as f64 - 0.5, height) };
    let hi = if v + 1 == height { PI } else { row_theta(v as f64 + 0.5, height) };
    (lo, hi)
}

pub fn pixel_solid_angle(v: usize, width: usize, height: usize) -> Result<PixelArea> {
    check_aspect(width, height)?;
    if v >= height {
        return Err(ParError::contract(format!("row {v} outside 0..{height}")));
    }
    let (lo, hi) = row_bounds(v, height);
    let w = width as f64;
    Ok(PixelArea {
        exact: 2.0 * PI / w * (lo.cos() - hi.cos()),
        approx: 2.0 * PI * PI / (w * height as f64) * row_theta(v as f64, height).sin(),
    })
}
