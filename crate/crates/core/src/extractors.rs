//! Histology embeddings and the per-spot multimodal feature map.
//!
//! [`FallbackExtractor`] is a fixed, hermetic hand-crafted descriptor. The
//! foundation-model path goes through [`RemoteExtractor`] (HTTP endpoint) or
//! [`CommandExtractor`] (local weights runner), both speaking the same wire
//! format: the request is a PNG-encoded patch, the response is either a JSON
//! array of numbers or `embed_dim` little-endian `f32` values.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Mutex, OnceLock};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{Spot, StDataset};
use crate::error::{Error, Result};
use crate::preprocess::{extract_patch, rgb_feature, PatchTensor, PreprocessConfig};

/// Embedding width of the pathology foundation model.
pub const FOUNDATION_EMBED_DIM: usize = 1024;
/// Width of location (2) plus mean-RGB (3) features appended to each embedding.
pub const EXTRA_FEATURES: usize = 5;
/// Environment variable holding the bearer token for [`RemoteExtractor`].
pub const EMBED_TOKEN_ENV: &str = "HISTOSGE_EMBED_TOKEN";

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn extract(&self, patch: &PatchTensor) -> Result<Vec<f64>>;
}

/// Concatenated per-spot features `m = [z, l, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalFeatureMap {
    pub spot_id: String,
    pub z: Vec<f64>,
    pub l: [f64; 2],
    pub t: [f64; 3],
    pub m: Vec<f64>,
}

impl MultimodalFeatureMap {
    pub fn new(spot_id: impl Into<String>, z: Vec<f64>, l: [f64; 2], t: [f64; 3]) -> Self {
        let mut m = Vec::with_capacity(z.len() + EXTRA_FEATURES);
        m.extend_from_slice(&z);
        m.extend_from_slice(&l);
        m.extend_from_slice(&t);
        MultimodalFeatureMap {
            spot_id: spot_id.into(),
            z,
            l,
            t,
            m,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.z.len()
    }
}

/// Stack the `m` vectors into an `n_spots x (embed_dim + 5)` matrix.
pub fn stack_features(maps: &[MultimodalFeatureMap]) -> Result<Array2<f64>> {
    let width = maps.first().map_or(0, |f| f.m.len());
    let mut out = Array2::zeros((maps.len(), width));
    for (mut row, f) in out.axis_iter_mut(Axis(0)).zip(maps) {
        if f.m.len() != width {
            return Err(Error::Contract(format!(
                "feature map for {} has width {}, expected {width}",
                f.spot_id,
                f.m.len()
            )));
        }
        row.assign(&ndarray::ArrayView1::from(&f.m[..]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// deterministic fallback

const INTENSITY_BINS: usize = 16;
const ORIENTATION_BINS: usize = 8;
const QUADRANTS: usize = 4;
const DOWNSAMPLE: usize = 8;
const DESCRIPTOR_DIM: usize =
    3 * INTENSITY_BINS + 3 * ORIENTATION_BINS * QUADRANTS + 3 * DOWNSAMPLE * DOWNSAMPLE;

/// Seed of the fixed Gaussian projection used by [`FallbackExtractor`].
pub const FALLBACK_PROJECTION_SEED: u64 = 0x4869_5354_6f53_4745;

fn projection_matrix() -> &'static Array2<f64> {
    static MATRIX: OnceLock<Array2<f64>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(FALLBACK_PROJECTION_SEED);
        let scale = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
        Array2::from_shape_simple_fn((FOUNDATION_EMBED_DIM, DESCRIPTOR_DIM), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
    })
}

/// Hand-crafted patch descriptor before projection.
///
/// Layout: per-channel 16-bin intensity histograms (48), per-channel
/// gradient-orientation histograms over 4 quadrants x 8 bins (96), and a
/// per-channel 8x8 box downsample (192).
pub fn fallback_descriptor(patch: &PatchTensor) -> Vec<f64> {
    let (h, w, _) = patch.pixels.dim();
    let px = &patch.pixels;
    let n = (h * w) as f64;
    let mut out = vec![0.0; DESCRIPTOR_DIM];

    let (hist, rest) = out.split_at_mut(3 * INTENSITY_BINS);
    let (grad, down) = rest.split_at_mut(3 * ORIENTATION_BINS * QUADRANTS);

    for c in 0..3 {
        for r in 0..h {
            for col in 0..w {
                let v = px[[r, col, c]];
                let bin = ((v * INTENSITY_BINS as f64) as usize).min(INTENSITY_BINS - 1);
                hist[c * INTENSITY_BINS + bin] += 1.0 / n;
            }
        }
    }

    for c in 0..3 {
        for r in 0..h {
            for col in 0..w {
                let left = px[[r, col.saturating_sub(1), c]];
                let right = px[[r, (col + 1).min(w - 1), c]];
                let up = px[[r.saturating_sub(1), col, c]];
                let below = px[[(r + 1).min(h - 1), col, c]];
                let (gx, gy) = (right - left, below - up);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx) + PI;
                let bin = ((angle / (2.0 * PI) * ORIENTATION_BINS as f64) as usize) % ORIENTATION_BINS;
                let quad = usize::from(r >= h / 2) * 2 + usize::from(col >= w / 2);
                grad[(c * QUADRANTS + quad) * ORIENTATION_BINS + bin] += mag / n;
            }
        }
    }

    let mut counts = [0usize; DOWNSAMPLE * DOWNSAMPLE];
    for r in 0..h {
        let cr = r * DOWNSAMPLE / h;
        for col in 0..w {
            let cc = col * DOWNSAMPLE / w;
            counts[cr * DOWNSAMPLE + cc] += 1;
            for c in 0..3 {
                down[c * DOWNSAMPLE * DOWNSAMPLE + cr * DOWNSAMPLE + cc] += px[[r, col, c]];
            }
        }
    }
    for c in 0..3 {
        for (cell, &k) in counts.iter().enumerate() {
            if k > 0 {
                down[c * DOWNSAMPLE * DOWNSAMPLE + cell] /= k as f64;
            }
        }
    }
    out
}

/// Hermetic stand-in for the foundation model: descriptor, fixed random
/// projection to 1024 dims, L2 normalization.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackExtractor;

impl FallbackExtractor {
    pub const NAME: &'static str = "fallback-v1";
}

pub fn deterministic_fallback_extract(patch: &PatchTensor) -> Vec<f64> {
    let desc = ndarray::Array1::from(fallback_descriptor(patch));
    let mut z = projection_matrix().dot(&desc);
    let norm = z.dot(&z).sqrt();
    if norm > 0.0 {
        z /= norm;
    }
    z.to_vec()
}

impl FeatureExtractor for FallbackExtractor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn embed_dim(&self) -> usize {
        FOUNDATION_EMBED_DIM
    }

    fn extract(&self, patch: &PatchTensor) -> Result<Vec<f64>> {
        Ok(deterministic_fallback_extract(patch))
    }
}

// ---------------------------------------------------------------------------
// foundation-model adapters

/// PNG-encode a patch, resizing first when the backend wants a fixed input size.
pub fn encode_patch_png(patch: &PatchTensor, input_size: Option<(u32, u32)>) -> Result<Vec<u8>> {
    let mut img = patch.to_rgb_image();
    if let Some((w, h)) = input_size {
        if (w, h) != img.dimensions() {
            img = image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle);
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Parse a backend response: JSON array, or raw little-endian `f32`s.
pub fn decode_embedding(body: &[u8], embed_dim: usize, backend: &str) -> Result<Vec<f64>> {
    let err = |msg: String| Error::ExtractorBackend {
        backend: backend.to_owned(),
        msg,
    };
    let trimmed = body.iter().position(|b| !b.is_ascii_whitespace()).map(|i| &body[i..]);
    let values: Vec<f64> = if trimmed.is_some_and(|b| b.first() == Some(&b'[')) {
        serde_json::from_slice::<Vec<f64>>(body).map_err(|e| err(format!("bad JSON embedding: {e}")))?
    } else {
        if body.len() != embed_dim * 4 {
            return Err(err(format!(
                "expected {} bytes of f32 data, got {}",
                embed_dim * 4,
                body.len()
            )));
        }
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    if values.len() != embed_dim {
        return Err(err(format!("expected {embed_dim} values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(err("embedding contains non-finite values".into()));
    }
    Ok(values)
}

/// Remote embedding endpoint: `POST <url>` with `Content-Type: image/png`.
#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    pub url: String,
    pub token: Option<String>,
    pub embed_dim: usize,
    pub input_size: Option<(u32, u32)>,
    name: String,
}

impl RemoteExtractor {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        let url = url.into();
        RemoteExtractor {
            name: format!("remote:{url}"),
            url,
            token,
            embed_dim: FOUNDATION_EMBED_DIM,
            input_size: None,
        }
    }

    /// Token taken from [`EMBED_TOKEN_ENV`] when set.
    pub fn from_env(url: impl Into<String>) -> Self {
        RemoteExtractor::new(url, std::env::var(EMBED_TOKEN_ENV).ok())
    }

    pub fn with_input_size(mut self, w: u32, h: u32) -> Self {
        self.input_size = Some((w, h));
        self
    }
}

impl FeatureExtractor for RemoteExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn extract(&self, patch: &PatchTensor) -> Result<Vec<f64>> {
        let png = encode_patch_png(patch, self.input_size)?;
        let mut req = ureq::post(&self.url).header("Content-Type", "image/png");
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send(&png[..]).map_err(|e| Error::ExtractorBackend {
            backend: self.name.clone(),
            msg: e.to_string(),
        })?;
        let body = resp.body_mut().read_to_vec().map_err(|e| Error::ExtractorBackend {
            backend: self.name.clone(),
            msg: e.to_string(),
        })?;
        decode_embedding(&body, self.embed_dim, &self.name)
    }
}

/// Local weights runner: a program reading a PNG on stdin and writing the
/// embedding on stdout.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub embed_dim: usize,
    pub input_size: Option<(u32, u32)>,
    name: String,
}

impl CommandExtractor {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let program = program.into();
        CommandExtractor {
            name: format!("local:{}", program.display()),
            program,
            args,
            embed_dim: FOUNDATION_EMBED_DIM,
            input_size: None,
        }
    }

    /// Split a shell-like command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::Parameter("empty local extractor command".into()))?;
        Ok(CommandExtractor::new(program, parts.collect()))
    }
}

impl FeatureExtractor for CommandExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn extract(&self, patch: &PatchTensor) -> Result<Vec<f64>> {
        let backend_err = |msg: String| Error::ExtractorBackend {
            backend: self.name.clone(),
            msg,
        };
        let png = encode_patch_png(patch, self.input_size)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| backend_err(format!("cannot start: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&png));
        let out = child
            .wait_with_output()
            .map_err(|e| backend_err(e.to_string()))?;
        // a runner may legitimately stop reading early; only its exit status matters
        let _ = writer.join();
        if !out.status.success() {
            return Err(backend_err(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        decode_embedding(&out.stdout, self.embed_dim, &self.name)
    }
}

// ---------------------------------------------------------------------------
// cache

/// Append-only embedding cache.
///
/// Each record is a 32-byte SHA-256 key, a little-endian `u32` length and that
/// many little-endian `f64` values. Later records win; a truncated tail is ignored.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: Mutex<HashMap<[u8; 32], Vec<f64>>>,
    file: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.is_file() {
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(&path, e))?;
            let mut off = 0;
            while off + 36 <= bytes.len() {
                let key: [u8; 32] = bytes[off..off + 32].try_into().unwrap();
                let len = u32::from_le_bytes(bytes[off + 32..off + 36].try_into().unwrap()) as usize;
                let end = off + 36 + len * 8;
                if end > bytes.len() {
                    break;
                }
                let vals = bytes[off + 36..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.insert(key, vals);
                off = end;
            }
        }
        Ok(EmbeddingCache {
            path,
            entries: Mutex::new(entries),
            file: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key(slice_id: &str, spot_id: &str, extractor: &str, patch: &PatchTensor) -> [u8; 32] {
        let mut patch_hasher = Sha256::new();
        for v in patch.pixels.iter() {
            patch_hasher.update(v.to_le_bytes());
        }
        let patch_digest = patch_hasher.finalize();
        let mut h = Sha256::new();
        for part in [slice_id.as_bytes(), spot_id.as_bytes(), extractor.as_bytes()] {
            h.update(part);
            h.update([0u8]);
        }
        h.update(patch_digest);
        h.finalize().into()
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<Vec<f64>> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: [u8; 32], values: Vec<f64>) -> Result<()> {
        let mut rec = Vec::with_capacity(36 + values.len() * 8);
        rec.extend_from_slice(&key);
        rec.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in &values {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        {
            let _guard = self.file.lock().unwrap();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| Error::io(&self.path, e))?;
            f.write_all(&rec).map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries.lock().unwrap().insert(key, values);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// feature maps

#[derive(Default)]
pub struct BuildOptions<'a> {
    pub cache: Option<&'a EmbeddingCache>,
    /// Extract spots on the rayon pool; output order is unaffected.
    pub parallel: bool,
}

pub fn build_feature_map(
    ds: &StDataset,
    spots: &[Spot],
    extractor: &dyn FeatureExtractor,
    cfg: &PreprocessConfig,
) -> Result<Vec<MultimodalFeatureMap>> {
    build_feature_map_with(ds, spots, extractor, cfg, &BuildOptions::default())
}

pub fn build_feature_map_with(
    ds: &StDataset,
    spots: &[Spot],
    extractor: &dyn FeatureExtractor,
    cfg: &PreprocessConfig,
    opts: &BuildOptions<'_>,
) -> Result<Vec<MultimodalFeatureMap>> {
    let one = |spot: &Spot| -> Result<MultimodalFeatureMap> {
        let wrap = |e: Error| Error::SpotExtraction {
            spot_id: spot.spot_id.clone(),
            source: Box::new(e),
        };
        let patch = extract_patch(ds.image(), spot, cfg).map_err(wrap)?;
        let z = match opts.cache {
            Some(cache) => {
                let key = EmbeddingCache::key(ds.slice_id(), &spot.spot_id, extractor.name(), &patch);
                match cache.get(&key) {
                    Some(z) => z,
                    None => {
                        let z = extractor.extract(&patch).map_err(wrap)?;
                        cache.insert(key, z.clone()).map_err(wrap)?;
                        z
                    }
                }
            }
            None => extractor.extract(&patch).map_err(wrap)?,
        };
        if z.len() != extractor.embed_dim() {
            return Err(wrap(Error::Contract(format!(
                "extractor returned {} values, expected {}",
                z.len(),
                extractor.embed_dim()
            ))));
        }
        let t = rgb_feature(&patch);
        Ok(MultimodalFeatureMap::new(
            spot.spot_id.clone(),
            z,
            [spot.x_px as f64, spot.y_px as f64],
            t,
        ))
    };
    if opts.parallel {
        spots.par_iter().map(one).collect()
    } else {
        spots.iter().map(one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use ndarray::Array3;
    use std::sync::Arc;

    fn patch_from(f: impl Fn(usize, usize, usize) -> f64) -> PatchTensor {
        PatchTensor {
            spot_id: "p".into(),
            pixels: Array3::from_shape_fn((50, 50, 3), |(r, c, ch)| f(r, c, ch)),
        }
    }

    fn checker(r: usize, c: usize) -> f64 {
        if (r / 25 + c / 25).is_multiple_of(2) { 1.0 } else { 0.0 }
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let p = patch_from(|r, c, ch| ((r * 7 + c * 3 + ch) % 11) as f64 / 10.0);
        let a = FallbackExtractor.extract(&p).unwrap();
        let b = FallbackExtractor.extract(&p.clone()).unwrap();
        assert_eq!(a.len(), 1024);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeros_and_ones_differ() {
        let a = FallbackExtractor.extract(&patch_from(|_, _, _| 0.0)).unwrap();
        let b = FallbackExtractor.extract(&patch_from(|_, _, _| 1.0)).unwrap();
        assert!(l2(&a, &b) > 0.0);
    }

    #[test]
    fn uniform_patch_has_no_gradient_energy() {
        let d = fallback_descriptor(&patch_from(|_, _, ch| 0.2 * ch as f64));
        let grad = &d[48..48 + 96];
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rotated_checkerboard_differs() {
        let orig = patch_from(|r, c, _| checker(r, c));
        let rot = patch_from(|r, c, _| checker(c, 49 - r));
        let a = FallbackExtractor.extract(&orig).unwrap();
        let b = FallbackExtractor.extract(&rot).unwrap();
        assert!(l2(&a, &b) > 1e-3);
    }

    #[test]
    fn decode_json_and_binary() {
        let json = b" [1.0, 2.5, -3]";
        assert_eq!(decode_embedding(json, 3, "t").unwrap(), vec![1.0, 2.5, -3.0]);
        let bin: Vec<u8> = [0.5f32, -1.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(decode_embedding(&bin, 2, "t").unwrap(), vec![0.5, -1.0]);
        assert!(matches!(decode_embedding(&bin, 3, "t"), Err(Error::ExtractorBackend { .. })));
    }

    #[test]
    fn png_encoding_resizes_on_request() {
        let p = patch_from(|r, _, _| r as f64 / 49.0);
        let png = encode_patch_png(&p, Some((224, 224))).unwrap();
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width(), img.height()), (224, 224));
    }

    fn dataset(spots: Vec<Spot>) -> StDataset {
        let img = RgbImage::from_fn(300, 100, |x, y| Rgb([((x % 100) * 2) as u8, (y * 2) as u8, 40]));
        let n = spots.len();
        StDataset::new("slice", Arc::new(img), spots, Array2::ones((n, 1)), vec!["g".into()], None).unwrap()
    }

    #[test]
    fn feature_map_layout() {
        let ds = dataset(vec![Spot::new("a", 50, 50)]);
        let maps = build_feature_map(&ds, ds.spots(), &FallbackExtractor, &PreprocessConfig::default()).unwrap();
        assert_eq!(maps.len(), 1);
        let f = &maps[0];
        assert_eq!(f.m.len(), 1029);
        assert_eq!(&f.m[..1024], &f.z[..]);
        assert_eq!(&f.m[1024..1026], &[50.0, 50.0]);
        assert_eq!(&f.m[1026..], &f.t[..]);
        assert!(build_feature_map(&ds, &[], &FallbackExtractor, &PreprocessConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_patches_share_z_and_t() {
        // the image repeats every 100 columns
        let ds = dataset(vec![Spot::new("a", 50, 50), Spot::new("b", 150, 50)]);
        let maps = build_feature_map(&ds, ds.spots(), &FallbackExtractor, &PreprocessConfig::default()).unwrap();
        assert_eq!(maps[0].z, maps[1].z);
        assert_eq!(maps[0].t, maps[1].t);
        assert_ne!(maps[0].l, maps[1].l);
    }

    #[test]
    fn cache_roundtrip_and_hits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let ds = dataset(vec![Spot::new("a", 50, 50), Spot::new("b", 120, 20)]);
        let cfg = PreprocessConfig::default();
        let cache = EmbeddingCache::open(&path).unwrap();
        let opts = BuildOptions { cache: Some(&cache), parallel: true };
        let first = build_feature_map_with(&ds, ds.spots(), &FallbackExtractor, &cfg, &opts).unwrap();
        assert_eq!(cache.len(), 2);
        drop(cache);
        let reopened = EmbeddingCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        let opts = BuildOptions { cache: Some(&reopened), parallel: false };
        let second = build_feature_map_with(&ds, ds.spots(), &FallbackExtractor, &cfg, &opts).unwrap();
        assert_eq!(first, second);
        // second pass must not have appended anything
        assert_eq!(fs::metadata(&path).unwrap().len(), 2 * (36 + 1024 * 8));
    }

    #[test]
    fn cache_ignores_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let cache = EmbeddingCache::open(&path).unwrap();
        cache.insert([1; 32], vec![1.0, 2.0]).unwrap();
        cache.insert([1; 32], vec![3.0, 4.0]).unwrap();
        drop(cache);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[9; 40]).unwrap();
        let c = EmbeddingCache::open(&path).unwrap();
        assert_eq!(c.get(&[1; 32]), Some(vec![3.0, 4.0]));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn command_extractor_reads_stdout() {
        let ex = CommandExtractor::new("sh", vec!["-c".into(), "cat > /dev/null; head -c 4096 /dev/zero".into()]);
        let z = ex.extract(&patch_from(|_, _, _| 0.5)).unwrap();
        assert_eq!(z, vec![0.0; 1024]);
        let bad = CommandExtractor::new("sh", vec!["-c".into(), "exit 3".into()]);
        assert!(matches!(bad.extract(&patch_from(|_, _, _| 0.5)), Err(Error::ExtractorBackend { .. })));
    }

    #[test]
    fn extractor_errors_carry_spot_id() {
        let ds = dataset(vec![Spot::new("zz", 10, 10)]);
        let bad = CommandExtractor::new("/nonexistent/runner", vec![]);
        let err = build_feature_map(&ds, ds.spots(), &bad, &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SpotExtraction { ref spot_id, .. } if spot_id == "zz"));
    }
}
