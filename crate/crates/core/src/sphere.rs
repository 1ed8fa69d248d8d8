//! Equirectangular geometry on the viewing sphere.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{atan2, cos, sin, sqrt, FRAC_PI_2, PI, TAU};

/// Direction on the sphere: azimuth `theta` and latitude `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereCoord {
    pub theta: f64,
    pub phi: f64,
}

/// Patch tiling of an equirectangular image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
}

impl PatchGrid {
    pub fn for_image(height: usize, width: usize, patch_px: usize) -> Result<Self> {
        if patch_px == 0 || height == 0 || width == 0 || height % patch_px != 0 || width % patch_px != 0 {
            return Err(Error::ImageDims {
                width,
                height,
                reason: "image dimensions must be positive multiples of the patch size",
            });
        }
        Ok(Self {
            rows: height / patch_px,
            cols: width / patch_px,
            patch_px,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Latitude at the vertical middle of patch row `i`, using the same
    /// orientation as [`patch_center_to_sphere`] (row 0 toward `-π/2`).
    pub fn band_center_latitude(&self, i: usize) -> f64 {
        ((i as f64 + 0.5) - self.rows as f64 / 2.0) * PI / self.rows as f64
    }
}

/// Map patch `(i, j)` to sphere coordinates.
///
/// Latitude is `φ = (i − rows/2)·π/rows`. Azimuth is `θ = jπ/cols` by default,
/// which reproduces `θ = jπ/32, φ = (i−8)π/16` on the 16×32 grid and spans
/// half a turn across the image. `azimuth_full` switches to `θ = 2πj/cols`.
pub fn patch_center_to_sphere(i: usize, j: usize, grid: &PatchGrid, azimuth_full: bool) -> Result<SphereCoord> {
    if i >= grid.rows {
        return Err(Error::IndexOutOfRange {
            what: "patch row",
            index: i,
            len: grid.rows,
        });
    }
    if j >= grid.cols {
        return Err(Error::IndexOutOfRange {
            what: "patch column",
            index: j,
            len: grid.cols,
        });
    }
    let span = if azimuth_full { TAU } else { PI };
    Ok(SphereCoord {
        theta: j as f64 * span / grid.cols as f64,
        phi: (i as f64 - grid.rows as f64 / 2.0) * PI / grid.rows as f64,
    })
}

/// Number of real spherical harmonics up to degree `l_max`.
pub fn sh_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Real orthonormal spherical harmonics `Y_l^m` for `l = 0..=l_max`, ordered
/// by `l` then `m = -l..=l`, evaluated at colatitude `π/2 − φ`, azimuth `θ`.
///
/// `m > 0` uses `√2·K·P_l^m·cos(mθ)`, `m < 0` uses `√2·K·P_l^|m|·sin(|m|θ)`,
/// with `K = √((2l+1)/(4π)·(l−m)!/(l+m)!)` and no Condon-Shortley phase.
pub fn real_sh_basis(coord: SphereCoord, l_max: usize) -> Vec<f64> {
    let x = sin(coord.phi); // cos(colatitude)
    let s = sqrt(((1.0 - x) * (1.0 + x)).max(0.0)); // sin(colatitude)
    let size = l_max + 1;

    // legendre[l][m] = P_l^m(x) for m <= l
    let mut legendre = vec![vec![0.0; size]; size];
    let mut pmm = 1.0;
    for m in 0..size {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        legendre[m][m] = pmm;
        if m + 1 < size {
            legendre[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..size {
            legendre[l][m] = ((2 * l - 1) as f64 * x * legendre[l - 1][m] - (l + m - 1) as f64 * legendre[l - 2][m])
                / (l - m) as f64;
        }
    }

    let mut out = Vec::with_capacity(sh_count(l_max));
    for l in 0..size {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            // (l-m)!/(l+m)! as a running product
            let ratio: f64 = ((l - am + 1)..=(l + am)).map(|k| 1.0 / k as f64).product();
            let k = sqrt((2 * l + 1) as f64 / (4.0 * PI) * ratio);
            let p = legendre[l][am];
            let y = match m {
                0 => k * p,
                m if m > 0 => core::f64::consts::SQRT_2 * k * p * cos(am as f64 * coord.theta),
                _ => core::f64::consts::SQRT_2 * k * p * sin(am as f64 * coord.theta),
            };
            out.push(y);
        }
    }
    out
}

/// Relative pixel density of an equirectangular row at latitude `phi`.
pub fn area_weight(phi: f64) -> f64 {
    if phi.abs() >= FRAC_PI_2 {
        0.0
    } else {
        cos(phi)
    }
}

fn check_unit(value: f64, field: &'static str) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::FieldOutOfRange {
            index: 0,
            field,
            value,
            min: 0.0,
            max: 1.0,
        })
    }
}

/// Normalized image coordinates to `(longitude, latitude)` in radians, with
/// the full image width covering `[-π, π]`.
pub fn normalized_to_sphere(x: f64, y: f64) -> Result<(f64, f64)> {
    check_unit(x, "x")?;
    check_unit(y, "y")?;
    Ok((TAU * (x - 0.5), PI * (0.5 - y)))
}

fn to_sphere_unchecked(p: [f64; 2]) -> (f64, f64) {
    (TAU * (p[0] - 0.5), PI * (0.5 - p[1]))
}

/// Great-circle distance in degrees between two normalized gaze points
/// (haversine form).
pub fn angular_error_deg(p: [f64; 2], q: [f64; 2]) -> f64 {
    let (lon1, lat1) = to_sphere_unchecked(p);
    let (lon2, lat2) = to_sphere_unchecked(q);
    let sdlat = sin((lat2 - lat1) / 2.0);
    let sdlon = sin((lon2 - lon1) / 2.0);
    let a = (sdlat * sdlat + cos(lat1) * cos(lat2) * sdlon * sdlon).clamp(0.0, 1.0);
    let c = 2.0 * atan2(sqrt(a), sqrt(1.0 - a));
    c.to_degrees()
}
