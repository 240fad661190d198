//! Synthetic slices with a known image-to-expression mapping.
//!
//! The image is cut into a near-square grid of rectangular regions whose edges
//! fall on spot-cell boundaries. Region `i` gets texture class `i % n_textures`;
//! each class has a seeded expression prototype, and a spot's expression is its
//! region's prototype plus Gaussian noise, clamped at zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, Spot, StDataset};
use crate::error::{Error, Result};

pub const TRUTH_JSON: &str = "truth.json";

/// Probability that a prototype entry is exactly zero.
const PROTOTYPE_ZERO_P: f64 = 0.3;
const PIXEL_NOISE: i32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub pitch_px: u32,
    pub n_genes: usize,
    pub n_textures: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid_rows: 10,
            grid_cols: 10,
            pitch_px: 60,
            n_genes: 50,
            n_textures: 4,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Region grid `(rows, cols)` used for `n_textures`.
    pub fn region_layout(&self) -> (u32, u32) {
        let n = self.n_textures.max(1) as u32;
        let cols = (n as f64).sqrt().ceil() as u32;
        let rows = n.div_ceil(cols);
        (rows, cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return Err(Error::Parameter("grid dimensions must be at least 2".into()));
        }
        if self.pitch_px < 2 {
            return Err(Error::Parameter("pitch_px must be at least 2".into()));
        }
        if self.n_genes == 0 || self.n_textures == 0 {
            return Err(Error::Parameter("n_genes and n_textures must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise_sigma must be non-negative".into()));
        }
        let (rr, rc) = self.region_layout();
        if rr > self.grid_rows || rc > self.grid_cols {
            return Err(Error::Parameter(format!(
                "{} textures need a {rr}x{rc} region layout, larger than the {}x{} grid",
                self.n_textures, self.grid_rows, self.grid_cols
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self, patch_size: u32) -> Vec<String> {
        let mut w = Vec::new();
        if self.pitch_px < patch_size {
            w.push(format!(
                "pitch {} px is smaller than the {patch_size} px patch; neighbouring patches overlap",
                self.pitch_px
            ));
        }
        w
    }
}

/// Everything needed to recompute the noiseless expression at any pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDescriptor {
    pub width: u32,
    pub height: u32,
    /// Region row edges in pixels, `len = region rows + 1`.
    pub row_edges: Vec<u32>,
    pub col_edges: Vec<u32>,
    /// Texture class of each region, row-major.
    pub region_class: Vec<usize>,
    /// `n_textures x n_genes`.
    pub prototypes: Vec<Vec<f64>>,
    pub gene_names: Vec<String>,
    pub config: SynthConfig,
}

impl TruthDescriptor {
    pub fn region_at(&self, x: u32, y: u32) -> Option<usize> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let r = self.row_edges.windows(2).position(|e| y >= e[0] && y < e[1])?;
        let c = self.col_edges.windows(2).position(|e| x >= e[0] && x < e[1])?;
        Some(r * (self.col_edges.len() - 1) + c)
    }

    pub fn class_at(&self, x: u32, y: u32) -> Option<usize> {
        self.region_at(x, y).map(|r| self.region_class[r])
    }
}

pub fn class_label(class: usize) -> String {
    format!("class_{class}")
}

fn edges(cells: u32, parts: u32, pitch: u32) -> Vec<u32> {
    (0..=parts)
        .map(|i| ((i as f64 * cells as f64 / parts as f64).round() as u32) * pitch)
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [200, 70, 80],
    [70, 170, 90],
    [70, 90, 200],
    [170, 150, 60],
    [150, 70, 170],
    [60, 160, 170],
    [220, 130, 50],
    [120, 120, 120],
];

fn texture_pixel(class: usize, x: u32, y: u32) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()].map(|v| v as f64);
    // cycle through four patterns; later classes reuse a pattern at a shifted period
    let period = 8 + 4 * (class / 4) as u32;
    match class % 4 {
        0 => {
            let on = (y / (period / 2)).is_multiple_of(2);
            if on { base } else { base.map(|v| v * 0.45) }
        }
        1 => {
            let (dx, dy) = ((x % (period + 2)) as f64 - 4.0, (y % (period + 2)) as f64 - 4.0);
            if dx * dx + dy * dy <= 6.0 { [30.0, 30.0, 40.0] } else { base }
        }
        2 => {
            let t = ((x + y) % (3 * period)) as f64 / (3 * period) as f64;
            base.map(|v| v * (0.35 + 0.65 * t))
        }
        _ => base,
    }
}

/// Builds the slice and its ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(StDataset, TruthDescriptor)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (rr, rc) = cfg.region_layout();
    let width = cfg.grid_cols * cfg.pitch_px;
    let height = cfg.grid_rows * cfg.pitch_px;

    let prototypes: Vec<Vec<f64>> = (0..cfg.n_textures)
        .map(|_| {
            (0..cfg.n_genes)
                .map(|_| {
                    if rng.random::<f64>() < PROTOTYPE_ZERO_P {
                        0.0
                    } else {
                        rng.random_range(0.5..3.0)
                    }
                })
                .collect()
        })
        .collect();
    let gene_names: Vec<String> = (0..cfg.n_genes).map(|g| format!("gene_{g:03}")).collect();
    let truth = TruthDescriptor {
        width,
        height,
        row_edges: edges(cfg.grid_rows, rr, cfg.pitch_px),
        col_edges: edges(cfg.grid_cols, rc, cfg.pitch_px),
        region_class: (0..(rr * rc) as usize).map(|i| i % cfg.n_textures).collect(),
        prototypes,
        gene_names: gene_names.clone(),
        config: cfg.clone(),
    };

    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let class = truth.class_at(x, y).expect("pixel inside image");
            let px = texture_pixel(class, x, y);
            let mut out = [0u8; 3];
            for (o, v) in out.iter_mut().zip(px) {
                let jitter = rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE) as f64;
                *o = (v + jitter).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(out));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n_spots = (cfg.grid_rows * cfg.grid_cols) as usize;
    let mut spots = Vec::with_capacity(n_spots);
    let mut expr = Array2::zeros((n_spots, cfg.n_genes));
    let mut annotations = BTreeMap::new();
    for r in 0..cfg.grid_rows {
        for c in 0..cfg.grid_cols {
            let i = spots.len();
            let spot = Spot::new(
                format!("spot_{r:03}_{c:03}"),
                c * cfg.pitch_px + cfg.pitch_px / 2,
                r * cfg.pitch_px + cfg.pitch_px / 2,
            );
            let class = truth.class_at(spot.x_px, spot.y_px).expect("spot inside image");
            for g in 0..cfg.n_genes {
                let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                expr[[i, g]] = (truth.prototypes[class][g] + eps).max(0.0);
            }
            annotations.insert(spot.spot_id.clone(), class_label(class));
            spots.push(spot);
        }
    }
    let ds = StDataset::new(
        format!("synth_{}", cfg.seed),
        Arc::new(img),
        spots,
        expr,
        gene_names,
        Some(annotations),
    )?;
    Ok((ds, truth))
}

/// Noiseless expression of the region under `spot`.
pub fn true_expression(truth: &TruthDescriptor, spot: &Spot) -> Result<Vec<f64>> {
    let class = truth.class_at(spot.x_px, spot.y_px).ok_or_else(|| Error::Bounds {
        spot_id: spot.spot_id.clone(),
        x: spot.x_px as i64,
        y: spot.y_px as i64,
        width: truth.width,
        height: truth.height,
    })?;
    Ok(truth.prototypes[class].clone())
}

pub fn true_expression_matrix(truth: &TruthDescriptor, spots: &[Spot]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((spots.len(), truth.gene_names.len()));
    for (i, s) in spots.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(true_expression(truth, s)?) {
            *o = v;
        }
    }
    Ok(out)
}

pub fn save_truth(truth: &TruthDescriptor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(truth).expect("descriptor serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthDescriptor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Dataset directory plus `truth.json`.
pub fn write_synthetic(dir: impl AsRef<Path>, ds: &StDataset, truth: &TruthDescriptor) -> Result<()> {
    let dir = dir.as_ref();
    save_dataset(ds, dir)?;
    save_truth(truth, dir.join(TRUTH_JSON))
}
