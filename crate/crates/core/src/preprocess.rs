//! Expression normalization, highly-variable-gene selection and patch extraction.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{check_in_bounds, Spot, StDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub patch_w: u32,
    pub patch_h: u32,
    pub n_hvg: usize,
    pub normalize_target_sum: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            patch_w: 50,
            patch_h: 50,
            n_hvg: 1000,
            normalize_target_sum: 1e4,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(Error::Parameter("patch dimensions must be at least 1".into()));
        }
        if self.n_hvg == 0 {
            return Err(Error::Parameter("n_hvg must be at least 1".into()));
        }
        if !(self.normalize_target_sum.is_finite() && self.normalize_target_sum > 0.0) {
            return Err(Error::Parameter("normalize_target_sum must be positive".into()));
        }
        Ok(())
    }
}

/// Image window around one spot, channels last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub spot_id: String,
    /// Shape `(patch_h, patch_w, 3)`.
    pub pixels: Array3<f64>,
}

impl PatchTensor {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Quantize back to 8-bit RGB.
    pub fn to_rgb_image(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Library-size normalization to `target_sum` followed by `ln(1 + x)`.
pub fn normalize_expression(raw: &Array2<f64>, target_sum: f64) -> Result<Array2<f64>> {
    if !(target_sum.is_finite() && target_sum > 0.0) {
        return Err(Error::Parameter(format!("target sum must be positive, got {target_sum}")));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Validation(format!("raw expression must be finite and non-negative, found {v}")));
    }
    let mut out = raw.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let total: f64 = row.sum();
        if total <= 0.0 {
            return Err(Error::DegenerateSpot { index: i });
        }
        let scale = target_sum / total;
        row.mapv_inplace(|v| (v * scale).ln_1p());
    }
    Ok(out)
}

/// Keep the `n_hvg` genes with the largest variance; ties go to the lower index.
///
/// Returned indices (and columns) are in original gene order.
pub fn select_hvg(normalized: &Array2<f64>, n_hvg: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let n_genes = normalized.ncols();
    if n_hvg == 0 || n_hvg > n_genes {
        return Err(Error::Parameter(format!(
            "n_hvg must lie in 1..={n_genes}, got {n_hvg}"
        )));
    }
    let variances: Vec<f64> = normalized
        .axis_iter(Axis(1))
        .map(|col| col.var(0.0))
        .collect();
    let mut order: Vec<usize> = (0..n_genes).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut selected = order[..n_hvg].to_vec();
    selected.sort_unstable();
    Ok((normalized.select(Axis(1), &selected), selected))
}

/// Normalize, select HVGs and return a new dataset restricted to them.
pub fn preprocess_dataset(ds: &StDataset, cfg: &PreprocessConfig) -> Result<(StDataset, Vec<usize>)> {
    cfg.validate()?;
    let normalized = normalize_expression(ds.expression(), cfg.normalize_target_sum)?;
    let n_hvg = cfg.n_hvg.min(ds.n_genes());
    let (expr, idx) = select_hvg(&normalized, n_hvg)?;
    let genes = idx.iter().map(|&i| ds.gene_names()[i].clone()).collect();
    Ok((ds.with_expression(expr, genes)?, idx))
}

/// Window `[y - h/2, y - h/2 + h) x [x - w/2, x - w/2 + w)` with edge replication.
pub fn extract_patch(img: &image::RgbImage, spot: &Spot, cfg: &PreprocessConfig) -> Result<PatchTensor> {
    check_in_bounds(spot, img)?;
    let (w, h) = (cfg.patch_w as i64, cfg.patch_h as i64);
    let x0 = spot.x_px as i64 - w / 2;
    let y0 = spot.y_px as i64 - h / 2;
    let max_x = img.width() as i64 - 1;
    let max_y = img.height() as i64 - 1;
    let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        let yy = (y0 + r as i64).clamp(0, max_y) as u32;
        let xx = (x0 + c as i64).clamp(0, max_x) as u32;
        img.get_pixel(xx, yy).0[ch] as f64 / 255.0
    });
    Ok(PatchTensor {
        spot_id: spot.spot_id.clone(),
        pixels,
    })
}

pub fn extract_patch_for(ds: &StDataset, spot: &Spot, cfg: &PreprocessConfig) -> Result<PatchTensor> {
    extract_patch(ds.image(), spot, cfg)
}

/// Per-channel mean over the patch.
pub fn rgb_feature(patch: &PatchTensor) -> [f64; 3] {
    let (h, w, _) = patch.pixels.dim();
    let count = (h * w) as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = patch.pixels.index_axis(Axis(2), c).sum() / count;
    }
    out
}
