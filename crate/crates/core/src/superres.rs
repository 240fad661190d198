//! Construction of unmeasured spots by polar translation of measured ones.
//!
//! Supported factors:
//!
//! | N | translations `(r, theta)` |
//! |---|---------------------------|
//! | 2 | `(R/2, 0)` |
//! | 4 | `(R/2, 0)`, `(R/2, pi/2)`, `(R/(2 sqrt 2), pi/4)` |
//! | 8 | `(R/2, 0)`, `(R/(2 sqrt 2), pi/4)`, `(R/(2 sqrt 2), 3pi/4)`, `(R/(2 sqrt 2), 7pi/4)`, `(R/(2 sqrt 2), 5pi/4)`, `(R/2, pi)`, `(R/2, pi/2)` |
//!
//! Angles follow image axes: `x + r cos(theta)`, `y + r sin(theta)` with `y` pointing down.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::dataset::Spot;
use crate::error::{Error, Result};

pub const SUPPORTED_FACTORS: [usize; 3] = [2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleScheme {
    pub factor: usize,
    /// `(r, theta)` pairs in pixels and radians.
    pub translations: Vec<(f64, f64)>,
}

impl UpsampleScheme {
    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 || self.translations.len() != self.factor - 1 {
            return Err(Error::Parameter(format!(
                "a {}-fold scheme needs {} translations, got {}",
                self.factor,
                self.factor.saturating_sub(1),
                self.translations.len()
            )));
        }
        for (i, &(r, t)) in self.translations.iter().enumerate() {
            if !(r.is_finite() && r > 0.0 && t.is_finite()) {
                return Err(Error::Parameter(format!("translation {i} has r={r}, theta={t}")));
            }
        }
        let offs = self.offsets();
        for i in 0..offs.len() {
            for j in 0..i {
                let (dx, dy) = (offs[i].0 - offs[j].0, offs[i].1 - offs[j].1);
                if dx.hypot(dy) < 1e-9 {
                    return Err(Error::Parameter(format!("translations {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Cartesian `(dx, dy)` for each translation.
    pub fn offsets(&self) -> Vec<(f64, f64)> {
        self.translations
            .iter()
            .map(|&(r, t)| (r * t.cos(), r * t.sin()))
            .collect()
    }

    pub fn max_radius(&self) -> f64 {
        self.translations.iter().map(|t| t.0).fold(0.0, f64::max)
    }
}

/// Median distance from each measured spot to its nearest measured neighbour.
pub fn nearest_neighbor_spacing(spots: &[Spot]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = spots
        .iter()
        .filter(|s| s.measured)
        .map(|s| (s.x_px as f64, s.y_px as f64))
        .collect();
    if pts.len() < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2 measured spots, got {}",
            pts.len()
        )));
    }
    let mut nearest = Vec::with_capacity(pts.len());
    for (i, a) in pts.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in pts.iter().enumerate() {
            if i != j {
                best = best.min((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
        if best == 0.0 {
            return Err(Error::DegenerateGrid(format!(
                "two measured spots share coordinates ({}, {})",
                a.0, a.1
            )));
        }
        nearest.push(best);
    }
    nearest.sort_by(f64::total_cmp);
    let n = nearest.len();
    Ok(if n % 2 == 1 {
        nearest[n / 2]
    } else {
        0.5 * (nearest[n / 2 - 1] + nearest[n / 2])
    })
}

/// The seven translations for 8-fold upsampling.
pub fn scheme_8x(r: f64) -> UpsampleScheme {
    let half = r / 2.0;
    let diag = r / (2.0 * SQRT_2);
    UpsampleScheme {
        factor: 8,
        translations: vec![
            (half, 0.0),
            (diag, FRAC_PI_4),
            (diag, 3.0 * FRAC_PI_4),
            (diag, 7.0 * FRAC_PI_4),
            (diag, 5.0 * FRAC_PI_4),
            (half, PI),
            (half, FRAC_PI_2),
        ],
    }
}

pub fn generalized_scheme(factor: usize, r: f64) -> Result<UpsampleScheme> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Parameter(format!("spacing R must be positive, got {r}")));
    }
    match factor {
        8 => Ok(scheme_8x(r)),
        4 => Ok(UpsampleScheme {
            factor: 4,
            translations: vec![(r / 2.0, 0.0), (r / 2.0, FRAC_PI_2), (r / (2.0 * SQRT_2), FRAC_PI_4)],
        }),
        2 => Ok(UpsampleScheme {
            factor: 2,
            translations: vec![(r / 2.0, 0.0)],
        }),
        n => Err(Error::Parameter(format!(
            "unsupported upsampling factor {n}; supported: 2, 4, 8"
        ))),
    }
}

/// New unmeasured spots around every measured spot.
///
/// Candidates are rounded to the nearest pixel, dropped when outside
/// `[0, w) x [0, h)`, and dropped when within one pixel (Euclidean) of an input
/// spot or an earlier candidate. Ids are `{parent}#u{k}` with `k` the
/// translation index.
pub fn construct_unmeasured(spots: &[Spot], scheme: &UpsampleScheme, image_bounds: (u32, u32)) -> Vec<Spot> {
    let (w, h) = image_bounds;
    let offsets = scheme.offsets();
    let mut occupied: HashSet<(i64, i64)> = spots.iter().map(|s| (s.x_px as i64, s.y_px as i64)).collect();
    let taken = |occ: &HashSet<(i64, i64)>, x: i64, y: i64| {
        [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(dx, dy)| occ.contains(&(x + dx, y + dy)))
    };
    let mut out = Vec::new();
    for s in spots.iter().filter(|s| s.measured) {
        for (k, &(dx, dy)) in offsets.iter().enumerate() {
            let x = (s.x_px as f64 + dx).round() as i64;
            let y = (s.y_px as f64 + dy).round() as i64;
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            if taken(&occupied, x, y) {
                continue;
            }
            occupied.insert((x, y));
            out.push(Spot::unmeasured(format!("{}#u{k}", s.spot_id), x as u32, y as u32));
        }
    }
    out
}

/// Input spots followed by the constructed ones for `factor`.
pub fn upsample_spots(spots: &[Spot], factor: usize, image_bounds: (u32, u32)) -> Result<(UpsampleScheme, Vec<Spot>)> {
    if !SUPPORTED_FACTORS.contains(&factor) {
        return Err(Error::Parameter(format!(
            "unsupported upsampling factor {factor}; supported: 2, 4, 8"
        )));
    }
    let r = nearest_neighbor_spacing(spots)?;
    let scheme = generalized_scheme(factor, r)?;
    let mut all = spots.to_vec();
    all.extend(construct_unmeasured(spots, &scheme, image_bounds));
    Ok((scheme, all))
}
