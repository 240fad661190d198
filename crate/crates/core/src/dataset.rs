//! Spatial-transcriptomics slice model and its canonical on-disk layout.
//!
//! A dataset directory holds:
//!
//! | file              | contents                                                        |
//! |-------------------|-----------------------------------------------------------------|
//! | `image.png`       | RGB histology raster (`image.tiff` is accepted on load)         |
//! | `coords.csv`      | `spot_id,x_px,y_px[,measured]`                                  |
//! | `gene_names.txt`  | one gene name per line                                          |
//! | `expression.csv`  | `spot_id,<gene...>`, one row per spot                           |
//! | `expression.bin`  | alternative dense matrix, rows in `coords.csv` order            |
//! | `annotations.csv` | optional `spot_id,label`                                        |
//! | `meta.json`       | optional `{"slice_id": ...}`; defaults to the directory name    |
//!
//! The binary matrix starts with the 8-byte magic `HSGEXPR\0`, a little-endian
//! `u32` version (1), `u64` row and column counts, then row-major `f64` values.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array2, Axis};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_PNG: &str = "image.png";
pub const IMAGE_TIFF: &str = "image.tiff";
pub const COORDS_CSV: &str = "coords.csv";
pub const GENE_NAMES_TXT: &str = "gene_names.txt";
pub const EXPRESSION_CSV: &str = "expression.csv";
pub const EXPRESSION_BIN: &str = "expression.bin";
pub const ANNOTATIONS_CSV: &str = "annotations.csv";
pub const META_JSON: &str = "meta.json";

const EXPRESSION_MAGIC: &[u8; 8] = b"HSGEXPR\0";
const EXPRESSION_VERSION: u32 = 1;

/// One sequencing location on the slide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Spot {
    pub spot_id: String,
    pub x_px: u32,
    pub y_px: u32,
    /// False for spots constructed by super-resolution.
    pub measured: bool,
}

impl Spot {
    pub fn new(spot_id: impl Into<String>, x_px: u32, y_px: u32) -> Self {
        Spot {
            spot_id: spot_id.into(),
            x_px,
            y_px,
            measured: true,
        }
    }

    pub fn unmeasured(spot_id: impl Into<String>, x_px: u32, y_px: u32) -> Self {
        Spot {
            measured: false,
            ..Spot::new(spot_id, x_px, y_px)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpressionFormat {
    #[default]
    Csv,
    Binary,
}

/// One tissue slice: image, spots, expression and optional region labels.
///
/// Immutable after construction; every constructor validates.
#[derive(Debug, Clone)]
pub struct StDataset {
    slice_id: String,
    image: Arc<RgbImage>,
    spots: Vec<Spot>,
    expression: Array2<f64>,
    gene_names: Vec<String>,
    annotations: Option<BTreeMap<String, String>>,
}

impl StDataset {
    pub fn new(
        slice_id: impl Into<String>,
        image: Arc<RgbImage>,
        spots: Vec<Spot>,
        expression: Array2<f64>,
        gene_names: Vec<String>,
        annotations: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let ds = StDataset {
            slice_id: slice_id.into(),
            image,
            spots,
            expression,
            gene_names,
            annotations,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spots.is_empty() {
            return Err(Error::Validation("dataset must contain at least one spot".into()));
        }
        if self.gene_names.is_empty() {
            return Err(Error::Validation("dataset must contain at least one gene".into()));
        }
        let (rows, cols) = self.expression.dim();
        if rows != self.spots.len() {
            return Err(Error::Validation(format!(
                "expression has {rows} rows but there are {} spots",
                self.spots.len()
            )));
        }
        if cols != self.gene_names.len() {
            return Err(Error::Validation(format!(
                "expression has {cols} columns but there are {} gene names",
                self.gene_names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.spots.len());
        for spot in &self.spots {
            if spot.spot_id.is_empty() || spot.spot_id.contains(['\n', '\r']) {
                return Err(Error::Validation(format!("invalid spot id {:?}", spot.spot_id)));
            }
            if !seen.insert(spot.spot_id.as_str()) {
                return Err(Error::Validation(format!("duplicate spot id {}", spot.spot_id)));
            }
            check_in_bounds(spot, &self.image)?;
        }
        let mut genes = HashSet::with_capacity(self.gene_names.len());
        for g in &self.gene_names {
            if g.is_empty() || g.contains(['\n', '\r']) {
                return Err(Error::Validation(format!("invalid gene name {g:?}")));
            }
            if !genes.insert(g.as_str()) {
                return Err(Error::Validation(format!("duplicate gene name {g}")));
            }
        }
        if let Some((idx, v)) = self
            .expression
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            let (r, c) = (idx / cols, idx % cols);
            return Err(Error::Validation(format!(
                "expression value {v} at spot {} gene {} must be finite and non-negative",
                self.spots[r].spot_id, self.gene_names[c]
            )));
        }
        if let Some(ann) = &self.annotations {
            if let Some(k) = ann.keys().find(|k| !seen.contains(k.as_str())) {
                return Err(Error::Validation(format!("annotation for unknown spot {k}")));
            }
        }
        Ok(())
    }

    pub fn slice_id(&self) -> &str {
        &self.slice_id
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn image_arc(&self) -> Arc<RgbImage> {
        Arc::clone(&self.image)
    }

    pub fn spots(&self) -> &[Spot] {
        &self.spots
    }

    pub fn expression(&self) -> &Array2<f64> {
        &self.expression
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn annotations(&self) -> Option<&BTreeMap<String, String>> {
        self.annotations.as_ref()
    }

    pub fn n_spots(&self) -> usize {
        self.spots.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn spot_index(&self) -> HashMap<&str, usize> {
        self.spots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.spot_id.as_str(), i))
            .collect()
    }

    /// Fraction of exactly-zero expression entries.
    pub fn dropout_rate(&self) -> f64 {
        let zeros = self.expression.iter().filter(|v| **v == 0.0).count();
        zeros as f64 / self.expression.len() as f64
    }

    /// Same spots and image with a new expression matrix and gene list.
    pub fn with_expression(&self, expression: Array2<f64>, gene_names: Vec<String>) -> Result<Self> {
        StDataset::new(
            self.slice_id.clone(),
            self.image_arc(),
            self.spots.clone(),
            expression,
            gene_names,
            self.annotations.clone(),
        )
    }

    /// Rows `indices` (in that order), sharing the image.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let spots: Vec<Spot> = indices.iter().map(|&i| self.spots[i].clone()).collect();
        let expression = self.expression.select(Axis(0), indices);
        let annotations = self.annotations.as_ref().map(|ann| {
            spots
                .iter()
                .filter_map(|s| ann.get(&s.spot_id).map(|l| (s.spot_id.clone(), l.clone())))
                .collect()
        });
        StDataset::new(
            self.slice_id.clone(),
            self.image_arc(),
            spots,
            expression,
            self.gene_names.clone(),
            annotations,
        )
    }
}

pub(crate) fn check_in_bounds(spot: &Spot, image: &RgbImage) -> Result<()> {
    if spot.x_px >= image.width() || spot.y_px >= image.height() {
        return Err(Error::Bounds {
            spot_id: spot.spot_id.clone(),
            x: spot.x_px as i64,
            y: spot.y_px as i64,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    slice_id: String,
}

#[derive(Debug, Deserialize)]
struct CoordRecord {
    spot_id: String,
    x_px: i64,
    y_px: i64,
    measured: Option<String>,
}

fn parse_bool(file: &str, s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::format(file, format!("invalid measured flag {other:?}"))),
    }
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::format(name, format!("missing file {}", p.display())))
    }
}

fn read_coords(dir: &Path) -> Result<Vec<Spot>> {
    let path = require(dir, COORDS_CSV)?;
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::format(COORDS_CSV, e.to_string()))?;
    let mut spots = Vec::new();
    for rec in rdr.deserialize::<CoordRecord>() {
        let rec = rec.map_err(|e| Error::format(COORDS_CSV, e.to_string()))?;
        if rec.x_px < 0 || rec.y_px < 0 || rec.x_px > u32::MAX as i64 || rec.y_px > u32::MAX as i64 {
            return Err(Error::Validation(format!(
                "spot {} has invalid pixel coordinates ({}, {})",
                rec.spot_id, rec.x_px, rec.y_px
            )));
        }
        let measured = match rec.measured.as_deref() {
            None | Some("") => true,
            Some(s) => parse_bool(COORDS_CSV, s)?,
        };
        spots.push(Spot {
            spot_id: rec.spot_id,
            x_px: rec.x_px as u32,
            y_px: rec.y_px as u32,
            measured,
        });
    }
    Ok(spots)
}

fn read_gene_names(dir: &Path) -> Result<Vec<String>> {
    let path = require(dir, GENE_NAMES_TXT)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn alignment_offenders(a: &[String], b: &[String]) -> Vec<String> {
    let sa: HashSet<&String> = a.iter().collect();
    let sb: HashSet<&String> = b.iter().collect();
    let mut out: Vec<String> = sa.symmetric_difference(&sb).map(|s| (*s).clone()).collect();
    out.sort();
    out
}

fn read_expression_csv(path: &Path, spots: &[Spot], genes: &[String]) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(EXPRESSION_CSV, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(EXPRESSION_CSV, e.to_string()))?
        .clone();
    let header_genes: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if header_genes != genes {
        return Err(Error::format(
            EXPRESSION_CSV,
            "header gene columns do not match gene_names.txt",
        ));
    }
    let mut rows: HashMap<String, Vec<f64>> = HashMap::with_capacity(spots.len());
    let mut order = Vec::with_capacity(spots.len());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(EXPRESSION_CSV, e.to_string()))?;
        let id = rec.get(0).unwrap_or_default().to_owned();
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::format(EXPRESSION_CSV, format!("spot {id}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != genes.len() {
            return Err(Error::format(
                EXPRESSION_CSV,
                format!("spot {id} has {} values, expected {}", vals.len(), genes.len()),
            ));
        }
        if rows.insert(id.clone(), vals).is_some() {
            return Err(Error::format(EXPRESSION_CSV, format!("duplicate spot {id}")));
        }
        order.push(id);
    }
    let coord_ids: Vec<String> = spots.iter().map(|s| s.spot_id.clone()).collect();
    let offenders = alignment_offenders(&coord_ids, &order);
    if !offenders.is_empty() {
        return Err(Error::Alignment {
            msg: "coords.csv and expression.csv list different spots".into(),
            offenders,
        });
    }
    let mut m = Array2::zeros((spots.len(), genes.len()));
    for (i, s) in spots.iter().enumerate() {
        let row = &rows[&s.spot_id];
        for (j, v) in row.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(m)
}

fn read_expression_bin(path: &Path, n_spots: usize, n_genes: usize) -> Result<Array2<f64>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(EXPRESSION_BIN, msg.to_owned());
    if bytes.len() < 28 || &bytes[..8] != EXPRESSION_MAGIC {
        return Err(bad("missing HSGEXPR header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != EXPRESSION_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if rows != n_spots || cols != n_genes {
        return Err(bad(&format!(
            "matrix is {rows}x{cols} but coords/gene_names imply {n_spots}x{n_genes}"
        )));
    }
    let body = &bytes[28..];
    if body.len() != rows * cols * 8 {
        return Err(bad("truncated matrix body"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

fn read_annotations(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(ANNOTATIONS_CSV, e.to_string()))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(ANNOTATIONS_CSV, e.to_string()))?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::format(ANNOTATIONS_CSV, "expected spot_id,label"));
        };
        out.insert(id.to_owned(), label.to_owned());
    }
    Ok(out)
}

/// Read a labels CSV (`spot_id,label`), e.g. cluster assignments from an external tool.
pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.is_file() {
        return Err(Error::format(
            path.display().to_string(),
            "missing labels file",
        ));
    }
    read_annotations(path)
}

fn load_image(dir: &Path) -> Result<RgbImage> {
    let path = [IMAGE_PNG, IMAGE_TIFF, "image.tif"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::format(IMAGE_PNG, format!("missing image file (image.png or image.tiff) in {}", dir.display())))?;
    Ok(image::open(&path)?.to_rgb8())
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<StDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::format(
            dir.display().to_string(),
            "dataset directory does not exist",
        ));
    }
    let spots = read_coords(dir)?;
    let genes = read_gene_names(dir)?;
    let csv_path = dir.join(EXPRESSION_CSV);
    let bin_path = dir.join(EXPRESSION_BIN);
    let expression = if bin_path.is_file() {
        read_expression_bin(&bin_path, spots.len(), genes.len())?
    } else if csv_path.is_file() {
        read_expression_csv(&csv_path, &spots, &genes)?
    } else {
        return Err(Error::format(
            EXPRESSION_CSV,
            format!("missing expression.csv or expression.bin in {}", dir.display()),
        ));
    };
    let image = load_image(dir)?;
    let ann_path = dir.join(ANNOTATIONS_CSV);
    let annotations = if ann_path.is_file() {
        Some(read_annotations(&ann_path)?)
    } else {
        None
    };
    let meta_path = dir.join(META_JSON);
    let slice_id = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(META_JSON, e.to_string()))?;
        meta.slice_id
    } else {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slice".into())
    };
    StDataset::new(slice_id, Arc::new(image), spots, expression, genes, annotations)
}

pub fn save_dataset(ds: &StDataset, dir: impl AsRef<Path>) -> Result<()> {
    save_dataset_with(ds, dir, ExpressionFormat::Csv)
}

pub fn save_dataset_with(ds: &StDataset, dir: impl AsRef<Path>, format: ExpressionFormat) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = serde_json::to_string_pretty(&Meta {
        slice_id: ds.slice_id.clone(),
    })
    .expect("meta serializes");
    write_file(&dir.join(META_JSON), meta.as_bytes())?;

    ds.image
        .save_with_format(dir.join(IMAGE_PNG), image::ImageFormat::Png)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["spot_id", "x_px", "y_px", "measured"]).map_err(csv_io)?;
    for s in &ds.spots {
        w.write_record([
            s.spot_id.as_str(),
            &s.x_px.to_string(),
            &s.y_px.to_string(),
            if s.measured { "true" } else { "false" },
        ])
        .map_err(csv_io)?;
    }
    write_file(&dir.join(COORDS_CSV), &w.into_inner().map_err(|e| csv_io(e.into_error().into()))?)?;

    let mut genes = ds.gene_names.join("\n");
    genes.push('\n');
    write_file(&dir.join(GENE_NAMES_TXT), genes.as_bytes())?;

    match format {
        ExpressionFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["spot_id".to_owned()];
            header.extend(ds.gene_names.iter().cloned());
            w.write_record(&header).map_err(csv_io)?;
            for (s, row) in ds.spots.iter().zip(ds.expression.rows()) {
                let mut rec = Vec::with_capacity(row.len() + 1);
                rec.push(s.spot_id.clone());
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_io)?;
            }
            write_file(&dir.join(EXPRESSION_CSV), &w.into_inner().map_err(|e| csv_io(e.into_error().into()))?)?;
            remove_if_present(&dir.join(EXPRESSION_BIN))?;
        }
        ExpressionFormat::Binary => {
            let path = dir.join(EXPRESSION_BIN);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            let (rows, cols) = ds.expression.dim();
            let io = |e| Error::io(&path, e);
            w.write_all(EXPRESSION_MAGIC).map_err(io)?;
            w.write_all(&EXPRESSION_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(rows as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(cols as u64).to_le_bytes()).map_err(io)?;
            for v in ds.expression.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.flush().map_err(io)?;
            remove_if_present(&dir.join(EXPRESSION_CSV))?;
        }
    }

    let ann_path = dir.join(ANNOTATIONS_CSV);
    match &ds.annotations {
        Some(ann) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["spot_id", "label"]).map_err(csv_io)?;
            for (k, v) in ann {
                w.write_record([k, v]).map_err(csv_io)?;
            }
            write_file(&ann_path, &w.into_inner().map_err(|e| csv_io(e.into_error().into()))?)?;
        }
        None => remove_if_present(&ann_path)?,
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<csv buffer>", std::io::Error::other(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Seeded uniform permutation of `0..n`.
///
/// Generator: ChaCha8 seeded with `seed_from_u64(seed)`. Shuffle: Fisher-Yates
/// from the last index down, swapping `i` with `next_u64() % (i + 1)`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    shuffle_in_place(&mut order, &mut rng);
    order
}

/// The Fisher-Yates pass used by [`seeded_permutation`], on a caller-owned generator.
pub fn shuffle_in_place<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Random disjoint train/test partition; `|test| = round(fraction * n)`.
///
/// Both halves keep the original spot order and share the image.
pub fn split_spots(ds: &StDataset, holdout_fraction: f64, seed: u64) -> Result<(StDataset, StDataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let n = ds.n_spots();
    if n < 2 {
        return Err(Error::Parameter("splitting needs at least two spots".into()));
    }
    let n_test = (holdout_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Parameter(format!(
            "holdout fraction {holdout_fraction} leaves an empty partition for {n} spots"
        )));
    }
    let order = seeded_permutation(n, seed);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> StDataset {
        let img = Arc::new(RgbImage::from_pixel(200, 200, image::Rgb([10, 20, 30])));
        let spots = vec![Spot::new("a", 10, 10), Spot::new("b", 100, 50), Spot::new("c", 199, 199)];
        let expr = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.25);
        let genes = (0..5).map(|g| format!("G{g}")).collect();
        StDataset::new("tiny", img, spots, expr, genes, None).unwrap()
    }

    #[test]
    fn load_three_spot_directory() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.expression().dim(), (3, 5));
        assert_eq!(ds.slice_id(), "tiny");
    }

    #[test]
    fn coords_spot_missing_from_expression_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let coords = fs::read_to_string(dir.path().join(COORDS_CSV)).unwrap();
        fs::write(dir.path().join(COORDS_CSV), format!("{coords}zz,1,1,true\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Alignment { offenders, .. }) => assert_eq!(offenders, vec!["zz".to_string()]),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn missing_coords_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(COORDS_CSV)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("coords.csv"), "{err}");
    }

    #[test]
    fn out_of_bounds_coordinate_names_spot() {
        let img = Arc::new(RgbImage::new(20, 20));
        let err = StDataset::new("s", img, vec![Spot::new("far", 20, 3)], array![[1.0]], vec!["g".into()], None)
            .unwrap_err();
        assert!(matches!(err, Error::Bounds { ref spot_id, .. } if spot_id == "far"));
    }

    #[test]
    fn empty_dataset_rejected() {
        let img = Arc::new(RgbImage::new(20, 20));
        let err = StDataset::new("s", img, vec![], Array2::zeros((0, 1)), vec!["g".into()], None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn expression_rows_follow_coords_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        // reverse the data rows of expression.csv
        let text = fs::read_to_string(dir.path().join(EXPRESSION_CSV)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        fs::write(dir.path().join(EXPRESSION_CSV), lines.join("\n") + "\n").unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.expression(), ds.expression());
    }

    #[test]
    fn binary_and_csv_load_identically() {
        let ds = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset_with(&ds, a.path(), ExpressionFormat::Csv).unwrap();
        save_dataset_with(&ds, b.path(), ExpressionFormat::Binary).unwrap();
        assert!(!b.path().join(EXPRESSION_CSV).exists());
        assert_eq!(load_dataset(a.path()).unwrap().expression(), load_dataset(b.path()).unwrap().expression());
    }

    #[test]
    fn saves_are_byte_stable() {
        let ds = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, a.path()).unwrap();
        save_dataset(&ds, b.path()).unwrap();
        for name in [META_JSON, IMAGE_PNG, COORDS_CSV, GENE_NAMES_TXT, EXPRESSION_CSV] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let img = Arc::new(RgbImage::new(50, 50));
        let spots: Vec<Spot> = (0..10).map(|i| Spot::new(format!("s{i}"), i * 4, 1)).collect();
        let ds = StDataset::new("s", img, spots, Array2::ones((10, 2)), vec!["a".into(), "b".into()], None).unwrap();
        let (tr, te) = split_spots(&ds, 0.5, 7).unwrap();
        assert_eq!((tr.n_spots(), te.n_spots()), (5, 5));
        let ids: HashSet<_> = tr.spots().iter().chain(te.spots()).map(|s| s.spot_id.clone()).collect();
        assert_eq!(ids.len(), 10);
        let (tr2, te2) = split_spots(&ds, 0.5, 7).unwrap();
        assert_eq!(tr.spots(), tr2.spots());
        assert_eq!(te.spots(), te2.spots());
        assert!(split_spots(&ds, 1.0, 7).is_err());
        assert!(split_spots(&ds, 0.0, 7).is_err());
    }

    #[test]
    fn split_of_3460_spots_holds_out_1730() {
        let img = Arc::new(RgbImage::new(100, 100));
        let spots: Vec<Spot> = (0..3460u32).map(|i| Spot::new(format!("s{i}"), i % 100, i / 100)).collect();
        let ds = StDataset::new("dlpfc", img, spots, Array2::ones((3460, 1)), vec!["g".into()], None).unwrap();
        let (tr, te) = split_spots(&ds, 0.5, 1).unwrap();
        assert_eq!(te.n_spots(), 1730);
        assert_eq!(tr.n_spots(), 1730);
    }

    #[test]
    fn dropout_rate_counts_zeros() {
        let img = Arc::new(RgbImage::new(10, 10));
        let ds = StDataset::new(
            "d",
            img,
            vec![Spot::new("a", 0, 0), Spot::new("b", 1, 1)],
            array![[0.0, 1.0], [0.0, 0.0]],
            vec!["x".into(), "y".into()],
            None,
        )
        .unwrap();
        assert_eq!(ds.dropout_rate(), 0.75);
    }
}
