//! Minibatch training loop, optimizers and batched prediction.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{shuffle_in_place, Spot, StDataset};
use crate::error::{Error, Result};
use crate::extractors::{build_feature_map_with, stack_features, BuildOptions, EmbeddingCache, FeatureExtractor, EXTRA_FEATURES};
use crate::model::{save_checkpoint, Checkpoint, CheckpointMeta, HisToSgeModel, ModelConfig, Params, PeMode, SpotPosition};
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Stop when the epoch loss has not improved for this many epochs.
    pub early_stopping_patience: Option<usize>,
    /// Where periodic and final checkpoints go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 512,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
            early_stopping_patience: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        // zero is allowed: it freezes the parameters, which the tests rely on
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub loss_trace: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub steps: u64,
}

/// Adam (with optional decoupled weight decay) or plain SGD.
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &Params, weight_decay: f64) -> Self {
        let zeros = || -> Vec<ArrayD<f64>> {
            params
                .tensors()
                .iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect()
        };
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let grads = grads.tensors();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((_, mut p), (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            if self.weight_decay > 0.0 {
                let decay = 1.0 - lr * self.weight_decay;
                p.mapv_inplace(|w| w * decay);
            }
            match self.kind {
                OptimizerKind::Sgd => p.scaled_add(-lr, &g),
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    Zip::from(&mut p)
                        .and(&mut self.m[i])
                        .and(&mut self.v[i])
                        .and(&g)
                        .for_each(|w, m, v, &gi| {
                            *m = b1 * *m + (1.0 - b1) * gi;
                            *v = b2 * *v + (1.0 - b2) * gi * gi;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let frac = epoch as f64 / cfg.epochs as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Training inputs already reduced to matrices.
pub struct TrainingData {
    pub features: Array2<f64>,
    pub positions: Vec<SpotPosition>,
    pub targets: Array2<f64>,
}

/// Extra knobs for [`train_with`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub preprocess: PreprocessConfig,
    pub cache: Option<&'a EmbeddingCache>,
    /// Extract features on the rayon pool.
    pub parallel_extraction: bool,
}

pub fn train(
    ds_train: &StDataset,
    extractor: &dyn FeatureExtractor,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(HisToSgeModel, TrainReport)> {
    train_with(ds_train, extractor, mcfg, tcfg, &TrainOptions::default())
}

pub fn train_with(
    ds_train: &StDataset,
    extractor: &dyn FeatureExtractor,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<(HisToSgeModel, TrainReport)> {
    if mcfg.gene_dim != ds_train.n_genes() {
        return Err(Error::Contract(format!(
            "model gene_dim {} does not match the {} genes of the training data",
            mcfg.gene_dim,
            ds_train.n_genes()
        )));
    }
    if mcfg.d_model != extractor.embed_dim() + EXTRA_FEATURES {
        return Err(Error::Contract(format!(
            "model d_model {} does not match extractor '{}' ({} + {EXTRA_FEATURES})",
            mcfg.d_model,
            extractor.name(),
            extractor.embed_dim()
        )));
    }
    let maps = build_feature_map_with(
        ds_train,
        ds_train.spots(),
        extractor,
        &opts.preprocess,
        &BuildOptions {
            cache: opts.cache,
            parallel: opts.parallel_extraction,
        },
    )?;
    let data = TrainingData {
        features: stack_features(&maps)?,
        positions: SpotPosition::from_spots(ds_train.spots()),
        targets: ds_train.expression().clone(),
    };
    let meta = CheckpointMeta {
        seed: tcfg.seed,
        gene_names: ds_train.gene_names().to_vec(),
        extractor: extractor.name().to_owned(),
        patch_w: opts.preprocess.patch_w,
        patch_h: opts.preprocess.patch_h,
        ..Default::default()
    };
    train_on_data(&data, mcfg, tcfg, meta)
}

/// The core loop: one optimizer step per shuffled minibatch, full passes per epoch.
pub fn train_on_data(
    data: &TrainingData,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    meta: CheckpointMeta,
) -> Result<(HisToSgeModel, TrainReport)> {
    tcfg.validate()?;
    let n = data.features.nrows();
    if n == 0 || data.targets.nrows() != n || data.positions.len() != n {
        return Err(Error::Contract(format!(
            "training data has {n} feature rows, {} target rows and {} positions",
            data.targets.nrows(),
            data.positions.len()
        )));
    }
    let mut mcfg = mcfg.clone();
    if mcfg.pe_mode == PeMode::LearnedTable && mcfg.pe_table_size == 0 {
        mcfg.pe_table_size = n;
    }
    let start = Instant::now();
    let mut model = HisToSgeModel::new(mcfg, tcfg.seed)?;
    model.fit_input_scaling(&data.features)?;
    let mut opt = Optimizer::new(tcfg.optimizer, &model.params, tcfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(2));

    let mut trace = Vec::with_capacity(tcfg.epochs);
    let mut meta = meta;
    let mut steps = 0u64;
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    if let Some(dir) = &tcfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..tcfg.epochs {
        shuffle_in_place(&mut order, &mut shuffle_rng);
        let lr = epoch_lr(tcfg, epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let x = data.features.select(Axis(0), batch);
            let y = data.targets.select(Axis(0), batch);
            let pos: Vec<SpotPosition> = batch.iter().map(|&i| data.positions[i]).collect();
            let (batch_loss, grads) = model.loss_and_grad(x.view(), &pos, y.view(), Some(&mut dropout_rng))?;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    last_checkpoint,
                });
            }
            opt.step(&mut model.params, &grads, lr);
            steps += 1;
            total += batch_loss * batch.len() as f64;
        }
        let epoch_loss = total / n as f64;
        trace.push(epoch_loss);

        if !model.params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: n.div_ceil(tcfg.batch_size) - 1,
                last_checkpoint,
            });
        }
        meta.step = steps;
        meta.epoch = epoch as u64 + 1;
        if let Some(dir) = &tcfg.checkpoint_dir {
            if tcfg.checkpoint_every > 0 && (epoch + 1) % tcfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{:05}.hsge", epoch + 1));
                save_checkpoint(
                    &Checkpoint {
                        model: model.clone(),
                        meta: meta.clone(),
                    },
                    &path,
                )?;
                last_checkpoint = Some(path);
            }
        }
        if let Some(patience) = tcfg.early_stopping_patience {
            if epoch_loss < best {
                best = epoch_loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    let final_checkpoint = match &tcfg.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("final.hsge");
            save_checkpoint(
                &Checkpoint {
                    model: model.clone(),
                    meta,
                },
                &path,
            )?;
            Some(path)
        }
        None => None,
    };
    Ok((
        model,
        TrainReport {
            loss_trace: trace,
            final_checkpoint,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            seed: tcfg.seed,
            steps,
        },
    ))
}

/// `epoch,loss` CSV, epochs numbered from 1.
pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Checks that a model can consume this extractor's features and produce `gene_dim` genes.
pub fn check_compatibility(
    model: &HisToSgeModel,
    extractor: &dyn FeatureExtractor,
    gene_dim: Option<usize>,
) -> Result<()> {
    model
        .config
        .validate()
        .map_err(|e| Error::Incompatible(e.to_string()))?;
    if model.config.d_model != extractor.embed_dim() + EXTRA_FEATURES {
        return Err(Error::Incompatible(format!(
            "model expects d_model {} but extractor '{}' yields {} features",
            model.config.d_model,
            extractor.name(),
            extractor.embed_dim() + EXTRA_FEATURES
        )));
    }
    if let Some(g) = gene_dim {
        if g != model.config.gene_dim {
            return Err(Error::Incompatible(format!(
                "model predicts {} genes, {} requested",
                model.config.gene_dim, g
            )));
        }
    }
    Ok(())
}

/// Checkpoint-level compatibility: digest, extractor identity and gene panel.
pub fn check_checkpoint(ckpt: &Checkpoint, extractor: &dyn FeatureExtractor) -> Result<()> {
    check_compatibility(&ckpt.model, extractor, None)?;
    // compare backend families ("remote", "local", "fallback-v1"), not endpoints
    let family = |n: &str| n.split(':').next().unwrap_or_default().to_owned();
    if !ckpt.meta.extractor.is_empty() && family(&ckpt.meta.extractor) != family(extractor.name()) {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained on '{}' features, got extractor '{}'",
            ckpt.meta.extractor,
            extractor.name()
        )));
    }
    if !ckpt.meta.gene_names.is_empty() && ckpt.meta.gene_names.len() != ckpt.model.config.gene_dim {
        return Err(Error::Incompatible("checkpoint gene list does not match gene_dim".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct PredictConfig {
    pub preprocess: PreprocessConfig,
    pub batch_size: usize,
    pub parallel_extraction: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            preprocess: PreprocessConfig::default(),
            batch_size: 512,
            parallel_extraction: false,
        }
    }
}

/// Batched inference; rows follow `spots`.
///
/// Spots are sorted canonically by (row, column, id), so any permutation of
/// `spots` yields the same rows permuted. With `B` batches, batch `b` takes
/// sorted positions `b, b + B, b + 2B, ...`: every batch samples the whole
/// slice, as random training minibatches do, rather than one strip of it.
/// Learned-table encodings use each spot's index in `ds`.
pub fn predict(
    model: &HisToSgeModel,
    ds: &StDataset,
    spots: &[Spot],
    extractor: &dyn FeatureExtractor,
    cfg: &PredictConfig,
) -> Result<Array2<f64>> {
    predict_cached(model, ds, spots, extractor, cfg, None)
}

pub fn predict_cached(
    model: &HisToSgeModel,
    ds: &StDataset,
    spots: &[Spot],
    extractor: &dyn FeatureExtractor,
    cfg: &PredictConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Array2<f64>> {
    check_compatibility(model, extractor, None)?;
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be at least 1".into()));
    }
    let gene_dim = model.config.gene_dim;
    if spots.is_empty() {
        return Ok(Array2::zeros((0, gene_dim)));
    }
    let mut order: Vec<usize> = (0..spots.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&spots[a], &spots[b]);
        (sa.y_px, sa.x_px, &sa.spot_id).cmp(&(sb.y_px, sb.x_px, &sb.spot_id))
    });
    let sorted: Vec<Spot> = order.iter().map(|&i| spots[i].clone()).collect();
    let maps = build_feature_map_with(
        ds,
        &sorted,
        extractor,
        &cfg.preprocess,
        &BuildOptions {
            cache,
            parallel: cfg.parallel_extraction,
        },
    )?;
    let features = stack_features(&maps)?;
    let index = ds.spot_index();
    let positions: Vec<SpotPosition> = sorted
        .iter()
        .map(|s| SpotPosition {
            ordinal: index.get(s.spot_id.as_str()).copied().unwrap_or(usize::MAX),
            x: s.x_px as f64,
            y: s.y_px as f64,
        })
        .collect();
    let mut out = Array2::zeros((spots.len(), gene_dim));
    let n_batches = sorted.len().div_ceil(cfg.batch_size);
    for b in 0..n_batches {
        let batch: Vec<usize> = (b..sorted.len()).step_by(n_batches).collect();
        let x = features.select(Axis(0), &batch);
        let pos: Vec<SpotPosition> = batch.iter().map(|&i| positions[i]).collect();
        let pred = model.forward(x.view(), &pos)?;
        for (row, &i) in pred.axis_iter(Axis(0)).zip(&batch) {
            out.row_mut(order[i]).assign(&row);
        }
    }
    Ok(out)
}
