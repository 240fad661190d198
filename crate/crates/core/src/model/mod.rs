//! Attention-based expression regressor.
//!
//! Input rows are per-spot multimodal feature maps. After per-channel input
//! standardization and a positional encoding, a stack of multi-head
//! self-attention blocks mixes information across the spots of a batch, and a
//! two-layer MLP head projects each row onto the gene panel.
//!
//! Every operation has a hand-written backward pass; `loss_and_grad` returns
//! exact gradients for all trainable tensors.

mod checkpoint;
mod layers;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Spot;
use crate::error::{Error, Result};
use crate::extractors::{stack_features, MultimodalFeatureMap, EXTRA_FEATURES, FOUNDATION_EMBED_DIM};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use layers::{attention, gelu, gelu_grad, softmax_rows};

use layers::{gelu_backward, layer_norm, layer_norm_backward, mha_backward, mha_forward, LayerNormCache, MhaCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Trainable table indexed by spot ordinal.
    LearnedTable,
    /// Fixed sin/cos features of the pixel coordinates.
    SinusoidalXy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub gene_dim: usize,
    pub dropout_rate: f64,
    pub pe_mode: PeMode,
    /// Rows of the learned positional table; ignored for `SinusoidalXy`.
    #[serde(default)]
    pub pe_table_size: usize,
    /// Attention only: no residuals, layer norms or feed-forward sublayers.
    #[serde(default)]
    pub plain_mhsa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: FOUNDATION_EMBED_DIM + EXTRA_FEATURES,
            n_heads: 7,
            n_layers: 2,
            d_ff: 1024,
            gene_dim: 1000,
            dropout_rate: 0.1,
            pe_mode: PeMode::SinusoidalXy,
            pe_table_size: 0,
            plain_mhsa: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Parameter(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.gene_dim == 0 {
            return Err(Error::Parameter("gene_dim must be at least 1".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Parameter("d_ff must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.pe_mode == PeMode::LearnedTable && self.pe_table_size == 0 {
            return Err(Error::Parameter("learned positional table needs pe_table_size >= 1".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// SHA-256 over the canonical JSON encoding of the config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

/// Residual/normalization/feed-forward parts of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub block: Option<BlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub pe_table: Option<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

macro_rules! push_param_views {
    ($self:ident, $out:ident) => {{
        if let Some(t) = &$self.pe_table {
            $out.push(("pe.table".into(), t.view().into_dyn()));
        }
        for (i, l) in $self.layers.iter().enumerate() {
            $out.push((format!("layers.{i}.attn.w_q"), l.attn.w_q.view().into_dyn()));
            $out.push((format!("layers.{i}.attn.w_k"), l.attn.w_k.view().into_dyn()));
            $out.push((format!("layers.{i}.attn.w_v"), l.attn.w_v.view().into_dyn()));
            $out.push((format!("layers.{i}.attn.w_o"), l.attn.w_o.view().into_dyn()));
            if let Some(b) = &l.block {
                $out.push((format!("layers.{i}.ln1.gamma"), b.ln1_gamma.view().into_dyn()));
                $out.push((format!("layers.{i}.ln1.beta"), b.ln1_beta.view().into_dyn()));
                $out.push((format!("layers.{i}.ff.w1"), b.ff_w1.view().into_dyn()));
                $out.push((format!("layers.{i}.ff.b1"), b.ff_b1.view().into_dyn()));
                $out.push((format!("layers.{i}.ff.w2"), b.ff_w2.view().into_dyn()));
                $out.push((format!("layers.{i}.ff.b2"), b.ff_b2.view().into_dyn()));
                $out.push((format!("layers.{i}.ln2.gamma"), b.ln2_gamma.view().into_dyn()));
                $out.push((format!("layers.{i}.ln2.beta"), b.ln2_beta.view().into_dyn()));
            }
        }
        $out.push(("head.w1".into(), $self.head.w1.view().into_dyn()));
        $out.push(("head.b1".into(), $self.head.b1.view().into_dyn()));
        $out.push(("head.w2".into(), $self.head.w2.view().into_dyn()));
        $out.push(("head.b2".into(), $self.head.b2.view().into_dyn()));
    }};
}

impl Params {
    /// Named views in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        push_param_views!(self, out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.pe_table {
            out.push(("pe.table".to_owned(), t.view_mut().into_dyn()));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let a = &mut l.attn;
            out.push((format!("layers.{i}.attn.w_q"), a.w_q.view_mut().into_dyn()));
            out.push((format!("layers.{i}.attn.w_k"), a.w_k.view_mut().into_dyn()));
            out.push((format!("layers.{i}.attn.w_v"), a.w_v.view_mut().into_dyn()));
            out.push((format!("layers.{i}.attn.w_o"), a.w_o.view_mut().into_dyn()));
            if let Some(b) = &mut l.block {
                out.push((format!("layers.{i}.ln1.gamma"), b.ln1_gamma.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ln1.beta"), b.ln1_beta.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ff.w1"), b.ff_w1.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ff.b1"), b.ff_b1.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ff.w2"), b.ff_w2.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ff.b2"), b.ff_b2.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ln2.gamma"), b.ln2_gamma.view_mut().into_dyn()));
                out.push((format!("layers.{i}.ln2.beta"), b.ln2_beta.view_mut().into_dyn()));
            }
        }
        let h = &mut self.head;
        out.push(("head.w1".to_owned(), h.w1.view_mut().into_dyn()));
        out.push(("head.b1".to_owned(), h.b1.view_mut().into_dyn()));
        out.push(("head.w2".to_owned(), h.w2.view_mut().into_dyn()));
        out.push(("head.b2".to_owned(), h.b2.view_mut().into_dyn()));
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Params {
        let d = cfg.d_model;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let attn = AttentionParams {
                    w_q: uniform(d, d, d),
                    w_k: uniform(d, d, d),
                    w_v: uniform(d, d, d),
                    w_o: uniform(d, d, d),
                };
                let block = (!cfg.plain_mhsa).then(|| BlockParams {
                    ln1_gamma: Array1::ones(d),
                    ln1_beta: Array1::zeros(d),
                    ff_w1: uniform(d, cfg.d_ff, d),
                    ff_b1: Array1::zeros(cfg.d_ff),
                    ff_w2: uniform(cfg.d_ff, d, cfg.d_ff),
                    ff_b2: Array1::zeros(d),
                    ln2_gamma: Array1::ones(d),
                    ln2_beta: Array1::zeros(d),
                });
                LayerParams { attn, block }
            })
            .collect();
        let head = HeadParams {
            w1: uniform(d, cfg.d_ff, d),
            b1: Array1::zeros(cfg.d_ff),
            w2: uniform(cfg.d_ff, cfg.gene_dim, cfg.d_ff),
            b2: Array1::zeros(cfg.gene_dim),
        };
        let pe_table = (cfg.pe_mode == PeMode::LearnedTable).then(|| uniform(cfg.pe_table_size, d, 100));
        Params { pe_table, layers, head }
    }
}

/// Where a row sits: its ordinal in the slice and its pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotPosition {
    pub ordinal: usize,
    pub x: f64,
    pub y: f64,
}

impl SpotPosition {
    /// Positions with ordinals taken from list order.
    pub fn from_spots(spots: &[Spot]) -> Vec<SpotPosition> {
        spots
            .iter()
            .enumerate()
            .map(|(i, s)| SpotPosition {
                ordinal: i,
                x: s.x_px as f64,
                y: s.y_px as f64,
            })
            .collect()
    }
}

/// Fixed sin/cos encoding of `(x, y)`.
///
/// The first `d/2` channels encode x, the rest y. Within an axis block of
/// width `m`, channel `j` uses frequency `10000^(-2*(j/2)/m)`, sine on even
/// `j` and cosine on odd `j`.
pub fn sinusoidal_xy(positions: &[SpotPosition], d_model: usize) -> Array2<f64> {
    let half = d_model / 2;
    let mut out = Array2::zeros((positions.len(), d_model));
    for (mut row, p) in out.axis_iter_mut(Axis(0)).zip(positions) {
        for c in 0..d_model {
            let (coord, j, m) = if c < half { (p.x, c, half) } else { (p.y, c - half, d_model - half) };
            let freq = 10000f64.powf(-2.0 * (j / 2) as f64 / m as f64);
            row[c] = if j % 2 == 0 { (coord * freq).sin() } else { (coord * freq).cos() };
        }
    }
    out
}

/// The trained network: config, parameters and fixed input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct HisToSgeModel {
    pub config: ModelConfig,
    pub params: Params,
    /// Subtracted from each input channel.
    pub input_shift: Array1<f64>,
    /// Input channels are divided by this after the shift.
    pub input_scale: Array1<f64>,
}

struct BlockCache {
    ln1: LayerNormCache,
    x1: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LayerNormCache,
    attn_mask: Option<Array2<f64>>,
    ff_mask: Option<Array2<f64>>,
}

struct LayerCache {
    mha: MhaCache,
    block: Option<BlockCache>,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    hidden: Array2<f64>,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
    ordinals: Vec<usize>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

fn add_row(m: &mut Array2<f64>, b: &Array1<f64>) {
    *m += &b.view().insert_axis(Axis(0));
}

impl HisToSgeModel {
    /// Fresh model with seeded fan-in uniform initialization and identity input scaling.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        let d = config.d_model;
        Ok(HisToSgeModel {
            config,
            params,
            input_shift: Array1::zeros(d),
            input_scale: Array1::ones(d),
        })
    }

    /// Set input standardization from a feature matrix (per-column mean and std).
    pub fn fit_input_scaling(&mut self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.config.d_model || features.nrows() == 0 {
            return Err(Error::Contract(format!(
                "cannot fit input scaling on a {}x{} matrix for d_model {}",
                features.nrows(),
                features.ncols(),
                self.config.d_model
            )));
        }
        self.input_shift = features.mean_axis(Axis(0)).expect("non-empty");
        self.input_scale = features
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-8 { s } else { 1.0 });
        Ok(())
    }

    pub fn positional_encoding(&self, positions: &[SpotPosition]) -> Result<Array2<f64>> {
        match self.config.pe_mode {
            PeMode::SinusoidalXy => Ok(sinusoidal_xy(positions, self.config.d_model)),
            PeMode::LearnedTable => {
                let table = self.params.pe_table.as_ref().expect("learned mode has a table");
                let mut out = Array2::zeros((positions.len(), self.config.d_model));
                for (mut row, p) in out.axis_iter_mut(Axis(0)).zip(positions) {
                    if p.ordinal >= table.nrows() {
                        return Err(Error::Encoding(format!(
                            "spot ordinal {} beyond positional table of {} rows",
                            p.ordinal,
                            table.nrows()
                        )));
                    }
                    row.assign(&table.row(p.ordinal));
                }
                Ok(out)
            }
        }
    }

    fn check_input(&self, features: &ArrayView2<f64>, positions: &[SpotPosition]) -> Result<()> {
        if features.ncols() != self.config.d_model {
            return Err(Error::Contract(format!(
                "features have {} columns, model expects d_model = {}",
                features.ncols(),
                self.config.d_model
            )));
        }
        if features.nrows() != positions.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} positions",
                features.nrows(),
                positions.len()
            )));
        }
        Ok(())
    }

    /// Standardized features plus positional encoding.
    pub fn embed(&self, features: ArrayView2<f64>, positions: &[SpotPosition]) -> Result<Array2<f64>> {
        self.check_input(&features, positions)?;
        let mut x = &features - &self.input_shift.view().insert_axis(Axis(0));
        x /= &self.input_scale.view().insert_axis(Axis(0));
        x += &self.positional_encoding(positions)?;
        Ok(x)
    }

    /// One attention block applied to already-embedded rows (inference mode).
    pub fn mhsa(&self, x: &Array2<f64>, layer: usize) -> Array2<f64> {
        let mut no_rng = None;
        self.layer_forward(x, layer, &mut no_rng).0
    }

    fn layer_forward(
        &self,
        x: &Array2<f64>,
        layer: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, LayerCache) {
        let lp = &self.params.layers[layer];
        let (a, mha) = mha_forward(x, &lp.attn, self.config.n_heads);
        let Some(bp) = &lp.block else {
            return (a, LayerCache { mha, block: None });
        };
        let rate = self.config.dropout_rate;
        let mut attn_mask = None;
        let mut ff_mask = None;
        let mut a = a;
        if let Some(r) = rng.as_deref_mut().filter(|_| rate > 0.0) {
            let m = dropout_mask(r, a.dim(), rate);
            a *= &m;
            attn_mask = Some(m);
        }
        let y = x + &a;
        let (x1, ln1) = layer_norm(&y, &bp.ln1_gamma, &bp.ln1_beta);
        let mut f1 = x1.dot(&bp.ff_w1);
        add_row(&mut f1, &bp.ff_b1);
        let g = f1.mapv(gelu);
        let mut f2 = g.dot(&bp.ff_w2);
        add_row(&mut f2, &bp.ff_b2);
        if let Some(r) = rng.as_deref_mut().filter(|_| rate > 0.0) {
            let m = dropout_mask(r, f2.dim(), rate);
            f2 *= &m;
            ff_mask = Some(m);
        }
        let z = &x1 + &f2;
        let (x2, ln2) = layer_norm(&z, &bp.ln2_gamma, &bp.ln2_beta);
        (
            x2,
            LayerCache {
                mha,
                block: Some(BlockCache {
                    ln1,
                    x1,
                    f1,
                    g,
                    ln2,
                    attn_mask,
                    ff_mask,
                }),
            },
        )
    }

    /// Forward pass keeping everything needed for `backward`. Dropout is
    /// active only when an RNG is supplied.
    pub fn forward_cached(
        &self,
        features: ArrayView2<f64>,
        positions: &[SpotPosition],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let mut x = self.embed(features, positions)?;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, cache) = self.layer_forward(&x, l, &mut rng);
            layers.push(cache);
            x = next;
        }
        let head = &self.params.head;
        let mut head_pre = x.dot(&head.w1);
        add_row(&mut head_pre, &head.b1);
        let head_act = head_pre.mapv(gelu);
        let mut out = head_act.dot(&head.w2);
        add_row(&mut out, &head.b2);
        Ok((
            out,
            ForwardCache {
                layers,
                hidden: x,
                head_pre,
                head_act,
                ordinals: positions.iter().map(|p| p.ordinal).collect(),
            },
        ))
    }

    /// Inference: `n_spots x gene_dim` predictions.
    pub fn forward(&self, features: ArrayView2<f64>, positions: &[SpotPosition]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(features, positions, None)?.0)
    }

    /// Forward from feature maps, with ordinals taken from the spot list order.
    pub fn forward_maps(&self, maps: &[MultimodalFeatureMap], spots: &[Spot]) -> Result<Array2<f64>> {
        if maps.len() != spots.len() || maps.iter().zip(spots).any(|(m, s)| m.spot_id != s.spot_id) {
            return Err(Error::Contract("feature maps are not aligned with spots".into()));
        }
        if maps.is_empty() {
            return Ok(Array2::zeros((0, self.config.gene_dim)));
        }
        let x = stack_features(maps)?;
        self.forward(x.view(), &SpotPosition::from_spots(spots))
    }

    /// Gradients of the loss given `d_out = dLoss/dPredictions`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Params {
        let mut grads = self.params.zeros_like();
        let head = &self.params.head;
        grads.head.w2 = cache.head_act.t().dot(d_out);
        grads.head.b2 = d_out.sum_axis(Axis(0));
        let d_act = d_out.dot(&head.w2.t());
        let d_pre = gelu_backward(&cache.head_pre, &d_act);
        grads.head.w1 = cache.hidden.t().dot(&d_pre);
        grads.head.b1 = d_pre.sum_axis(Axis(0));
        let mut dx = d_pre.dot(&head.w1.t());

        for l in (0..self.config.n_layers).rev() {
            let lp = &self.params.layers[l];
            let lc = &cache.layers[l];
            let lg = &mut grads.layers[l];
            let d_attn_out = match (&lp.block, &lc.block) {
                (Some(bp), Some(bc)) => {
                    let bg = lg.block.as_mut().expect("grad block mirrors params");
                    let (dz, dg2, db2) = layer_norm_backward(&bc.ln2, &bp.ln2_gamma, &dx);
                    bg.ln2_gamma = dg2;
                    bg.ln2_beta = db2;
                    let mut d_f2 = dz.clone();
                    if let Some(m) = &bc.ff_mask {
                        d_f2 *= m;
                    }
                    bg.ff_w2 = bc.g.t().dot(&d_f2);
                    bg.ff_b2 = d_f2.sum_axis(Axis(0));
                    let d_g = d_f2.dot(&bp.ff_w2.t());
                    let d_f1 = gelu_backward(&bc.f1, &d_g);
                    bg.ff_w1 = bc.x1.t().dot(&d_f1);
                    bg.ff_b1 = d_f1.sum_axis(Axis(0));
                    let d_x1 = dz + d_f1.dot(&bp.ff_w1.t());
                    let (dy, dg1, db1) = layer_norm_backward(&bc.ln1, &bp.ln1_gamma, &d_x1);
                    bg.ln1_gamma = dg1;
                    bg.ln1_beta = db1;
                    let mut da = dy.clone();
                    if let Some(m) = &bc.attn_mask {
                        da *= m;
                    }
                    dx = dy;
                    da
                }
                _ => std::mem::replace(&mut dx, Array2::zeros((0, 0))),
            };
            let (d_in, g) = mha_backward(&lc.mha, &lp.attn, self.config.n_heads, &d_attn_out);
            lg.attn = g;
            if dx.is_empty() {
                dx = d_in;
            } else {
                dx += &d_in;
            }
        }

        if let Some(table) = grads.pe_table.as_mut() {
            for (row, &ord) in dx.axis_iter(Axis(0)).zip(&cache.ordinals) {
                let mut t = table.row_mut(ord);
                t += &row;
            }
        }
        grads
    }

    /// Mean squared error and its gradient for one batch.
    pub fn loss_and_grad(
        &self,
        features: ArrayView2<f64>,
        positions: &[SpotPosition],
        targets: ArrayView2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Params)> {
        let (pred, cache) = self.forward_cached(features, positions, rng)?;
        let l = loss(&pred, &targets.to_owned())?;
        let scale = 2.0 / pred.len() as f64;
        let d_out = (&pred - &targets) * scale;
        Ok((l, self.backward(&cache, &d_out)))
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_parameters()
    }
}

/// Mean squared error over all entries: `sum ||pred_i - obs_i||^2 / (n * g)`.
pub fn loss(pred: &Array2<f64>, observed: &Array2<f64>) -> Result<f64> {
    if pred.dim() != observed.dim() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from observed shape {:?}",
            pred.dim(),
            observed.dim()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = pred.iter().zip(observed).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / pred.len() as f64)
}

/// Raw multi-head self-attention `[head_1 .. head_n] W_o` (no residual).
pub fn multi_head_attention(x: &Array2<f64>, p: &AttentionParams, n_heads: usize) -> Array2<f64> {
    mha_forward(x, p, n_heads).0
}

/// Row-wise attention maps of a single head; exposed for inspection.
pub fn head_attention_maps(x: &Array2<f64>, p: &AttentionParams, n_heads: usize) -> Vec<Array2<f64>> {
    let q = x.dot(&p.w_q);
    let k = x.dot(&p.w_k);
    let v = x.dot(&p.w_v);
    let dk = p.w_q.ncols() / n_heads;
    (0..n_heads)
        .map(|h| {
            let cols = s![.., h * dk..(h + 1) * dk];
            attention(&q.slice(cols), &k.slice(cols), &v.slice(cols)).1
        })
        .collect()
}

#[cfg(test)]
mod tests;
