//! Stage-1 contrastive pretraining: momentum key encoder, FIFO negative
//! queue, InfoNCE on augmented view pairs. The product is a frozen
//! content-feature extractor for stage 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;

use crate::augment::augment_pair;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::datasets::store::LoadedSplit;
use crate::error::{Result, StylexError};
use crate::losses::info_nce_grads;
use crate::metrics::{ClEpochRecord, MetricsLog, METRICS_SCHEMA};
use crate::models::{ArchConfig, Backbone, ModelDims, ProjectionHead};
use crate::nn::{Adam, Parameterized};
use crate::rng::{derive_epoch_rng, derive_rng};

pub const STATE_FILE: &str = "state.ckpt";
pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// FIFO ring of unit-norm negative keys.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    buffer: Array2<f64>, // (K, d_head)
    cursor: usize,
    filled: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, d: usize) -> Self {
        NegativeQueue {
            buffer: Array2::zeros((capacity, d)),
            cursor: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffer.nrows()
    }
    pub fn filled(&self) -> usize {
        self.filled
    }
    pub fn cursor(&self) -> usize {
        self.cursor
    }
    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    /// The currently valid negative keys.
    pub fn negatives(&self) -> ArrayView2<'_, f64> {
        self.buffer.slice(s![..self.filled, ..])
    }

    /// FIFO overwrite at the cursor with wraparound. Keys must be
    /// unit-norm and the batch no larger than the queue.
    pub fn enqueue(&mut self, keys: ArrayView2<f64>) -> Result<()> {
        let k = self.capacity();
        if keys.nrows() > k {
            return Err(StylexError::Contract(format!(
                "enqueue batch {} exceeds queue capacity {k}",
                keys.nrows()
            )));
        }
        if keys.ncols() != self.buffer.ncols() {
            return Err(StylexError::Contract(format!(
                "enqueue width {} vs queue width {}",
                keys.ncols(),
                self.buffer.ncols()
            )));
        }
        for row in keys.rows() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(StylexError::Contract(format!(
                    "enqueued key has norm {norm}, expected 1"
                )));
            }
        }
        for row in keys.rows() {
            self.buffer.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % k;
            self.filled = (self.filled + 1).min(k);
        }
        Ok(())
    }
}

/// Query or key tower: backbone plus projection head.
#[derive(Debug, Clone)]
pub struct ClModel {
    pub backbone: Backbone,
    pub head: ProjectionHead,
}

impl ClModel {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        ClModel {
            backbone: Backbone::new(dims, arch, rng),
            head: ProjectionHead::new(dims, arch, rng),
        }
    }

    /// Projected, normalized representation (no caches).
    pub fn project(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.head.forward(&self.backbone.forward(images)?))
    }
}

impl Parameterized for ClModel {
    fn params(&self) -> Vec<&crate::nn::Param> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut crate::nn::Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Query tower (gradient-trained) and its momentum-tracked key copy.
#[derive(Debug, Clone)]
pub struct MomentumPair {
    pub query: ClModel,
    pub key: ClModel,
    pub momentum: f64,
}

impl MomentumPair {
    pub fn new(query: ClModel, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(StylexError::Config(format!(
                "momentum {momentum} outside [0, 1]"
            )));
        }
        let key = query.clone();
        Ok(MomentumPair {
            query,
            key,
            momentum,
        })
    }

    /// key <- m * key + (1 - m) * query, elementwise over every parameter.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        let query_params = self.query.params();
        let mut key_params = self.key.params_mut();
        assert_eq!(query_params.len(), key_params.len(), "tower param count");
        for (kp, qp) in key_params.iter_mut().zip(query_params) {
            assert_eq!(kp.value.shape(), qp.value.shape(), "tower param shapes");
            ndarray::Zip::from(&mut kp.value)
                .and(&qp.value)
                .for_each(|k, &q| *k = m * *k + (1.0 - m) * q);
        }
    }
}

/// One InfoNCE step: query gradients only, then momentum update, then
/// enqueue of the detached positive keys.
pub fn cl_train_step(
    view_a: &Array4<f64>,
    view_b: &Array4<f64>,
    pair: &mut MomentumPair,
    queue: &mut NegativeQueue,
    tau: f64,
    opt: &mut Adam,
) -> Result<f64> {
    if queue.filled() == 0 {
        return Err(StylexError::Staging(
            "negative queue is empty: warmup has not run".into(),
        ));
    }
    let (codes, bcache) = pair.query.backbone.forward_train(view_a)?;
    let (q, hcache) = pair.query.head.forward_train(&codes);
    let k = pair.key.project(view_b)?; // no caches: no gradient path

    let (loss, grads) = info_nce_grads(q.view(), k.view(), queue.negatives(), tau)?;
    let dcodes = pair.query.head.backward(&hcache, &grads.dq);
    pair.query.backbone.backward(&bcache, &dcodes);

    let mut params = pair.query.params_mut();
    opt.step(&mut params);

    pair.momentum_update();
    queue.enqueue(k.view())?;
    Ok(loss)
}

/// One-hot class conditioning, the supervised reference variant.
pub fn supervised_condition(labels: &[u16], num_classes: u16) -> Result<Array2<f64>> {
    if num_classes < 1 {
        return Err(StylexError::Contract("num_classes must be >= 1".into()));
    }
    let mut out = Array2::zeros((labels.len(), num_classes as usize));
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(StylexError::Contract(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        out[[i, l as usize]] = 1.0;
    }
    Ok(out)
}

/// The stage-1 product: a read-only content-code extractor. The head is
/// discarded; there is no API to mutate the wrapped parameters.
pub struct FrozenExtractor {
    backbone: Backbone,
    normalize: bool,
}

impl FrozenExtractor {
    pub fn new(backbone: Backbone, normalize: bool) -> Self {
        FrozenExtractor {
            backbone,
            normalize,
        }
    }

    pub fn d_content(&self) -> usize {
        self.backbone.d_content
    }

    /// Content codes of an image batch; forward-only by construction.
    pub fn content_codes(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let mut codes = self.backbone.forward(images)?;
        if self.normalize {
            for mut row in codes.rows_mut() {
                let norm = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / (norm + 1e-12));
            }
        }
        Ok(codes)
    }

    pub fn load(path: &Path, dims: &ModelDims, arch: &ArchConfig, normalize: bool) -> Result<Self> {
        let ckpt = Checkpoint::load_expecting(path, "cl_extractor", dims, arch)?;
        if !ckpt.meta.frozen {
            return Err(StylexError::format(path, "extractor checkpoint is not frozen"));
        }
        let mut backbone = Backbone::new(dims, arch, &mut derive_rng(0, "extractor-shell"));
        ckpt.restore_params("backbone", &mut backbone)?;
        Ok(FrozenExtractor {
            backbone,
            normalize,
        })
    }
}

/// Collect `indices` into a batch tensor.
pub fn gather_images(images: &Array4<f64>, indices: &[usize]) -> Array4<f64> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (row, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}

fn augment_batch_pair(
    images: &Array4<f64>,
    indices: &[usize],
    config: &RunConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Array4<f64>, Array4<f64>) {
    let (_, c, h, w) = images.dim();
    let mut a = Array4::zeros((indices.len(), c, h, w));
    let mut b = Array4::zeros((indices.len(), c, h, w));
    for (row, &i) in indices.iter().enumerate() {
        let img = images
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let (va, vb) = augment_pair(&img, &config.augment, rng);
        a.index_axis_mut(Axis(0), row).assign(&va);
        b.index_axis_mut(Axis(0), row).assign(&vb);
    }
    (a, b)
}

pub struct ClArtifacts {
    pub extractor: FrozenExtractor,
    pub state_path: PathBuf,
    pub extractor_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs_run: u64,
    pub epoch_losses: Vec<f64>,
}

struct ClState {
    pair: MomentumPair,
    queue: NegativeQueue,
    opt: Adam,
    next_epoch: u64,
}

fn save_state(
    dir: &Path,
    state: &ClState,
    dims: &ModelDims,
    arch: &ArchConfig,
    config_hash: &str,
) -> Result<PathBuf> {
    let mut extra = BTreeMap::new();
    extra.insert("next_epoch".into(), state.next_epoch.to_string());
    extra.insert("queue_cursor".into(), state.queue.cursor.to_string());
    extra.insert("queue_filled".into(), state.queue.filled.to_string());
    let (t, m, v) = state.opt.state();
    extra.insert("adam_t".into(), t.to_string());
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        kind: "cl_state".into(),
        dims: *dims,
        arch: *arch,
        config_hash: config_hash.into(),
        frozen: false,
        extra,
    });
    ckpt.push_params("query_backbone", &state.pair.query.backbone);
    ckpt.push_params("query_head", &state.pair.query.head);
    ckpt.push_params("key_backbone", &state.pair.key.backbone);
    ckpt.push_params("key_head", &state.pair.key.head);
    ckpt.push_array("queue/buffer", state.queue.buffer.clone().into_dyn());
    for (i, arr) in m.iter().enumerate() {
        ckpt.push_array(format!("adam/m/{i}"), arr.clone());
    }
    for (i, arr) in v.iter().enumerate() {
        ckpt.push_array(format!("adam/v/{i}"), arr.clone());
    }
    let path = dir.join(STATE_FILE);
    ckpt.save(&path)?;
    Ok(path)
}

fn load_state(
    path: &Path,
    dims: &ModelDims,
    arch: &ArchConfig,
    config: &RunConfig,
) -> Result<ClState> {
    let ckpt = Checkpoint::load_expecting(path, "cl_state", dims, arch)?;
    let mut rng = derive_rng(config.seed, "cl/init");
    let mut pair = MomentumPair::new(ClModel::new(dims, arch, &mut rng), config.cl.momentum)?;
    ckpt.restore_params("query_backbone", &mut pair.query.backbone)?;
    ckpt.restore_params("query_head", &mut pair.query.head)?;
    ckpt.restore_params("key_backbone", &mut pair.key.backbone)?;
    ckpt.restore_params("key_head", &mut pair.key.head)?;

    let buffer = ckpt
        .get("queue/buffer")
        .ok_or_else(|| StylexError::Serde("missing queue/buffer".into()))?
        .clone()
        .into_dimensionality::<Ix2>()
        .map_err(|e| StylexError::Serde(e.to_string()))?;
    let mut queue = NegativeQueue::new(buffer.nrows(), buffer.ncols());
    queue.buffer = buffer;
    queue.cursor = ckpt.meta.extra["queue_cursor"].parse().unwrap_or(0);
    queue.filled = ckpt.meta.extra["queue_filled"].parse().unwrap_or(0);

    let mut opt = Adam::new(config.cl.lr);
    let t: u64 = ckpt.meta.extra["adam_t"].parse().unwrap_or(0);
    let n_params = pair.query.params().len();
    let mut ms = Vec::with_capacity(n_params);
    let mut vs = Vec::with_capacity(n_params);
    for i in 0..n_params {
        ms.push(
            ckpt.get(&format!("adam/m/{i}"))
                .ok_or_else(|| StylexError::Serde(format!("missing adam/m/{i}")))?
                .clone(),
        );
        vs.push(
            ckpt.get(&format!("adam/v/{i}"))
                .ok_or_else(|| StylexError::Serde(format!("missing adam/v/{i}")))?
                .clone(),
        );
    }
    opt.restore(t, ms, vs);

    let next_epoch: u64 = ckpt.meta.extra["next_epoch"].parse().unwrap_or(0);
    Ok(ClState {
        pair,
        queue,
        opt,
        next_epoch,
    })
}

/// Train the contrastive model and emit the frozen extractor.
///
/// `resume_from` restarts from a previous state checkpoint; epoch
/// numbering and RNG streams continue exactly where the interrupted run
/// stopped.
pub fn train_cl(
    dataset: &LoadedSplit,
    config: &RunConfig,
    resume_from: Option<&Path>,
) -> Result<ClArtifacts> {
    let dims = config.dims();
    dims.validate()?;
    let arch = config.model.arch;
    let config_hash = config.config_hash()?;
    let dir = config.cl_dir();
    std::fs::create_dir_all(&dir).map_err(|e| StylexError::io(&dir, e))?;
    let metrics = MetricsLog::new(dir.join(METRICS_FILE));

    let mut state = match resume_from {
        Some(path) => load_state(&path.join(STATE_FILE), &dims, &arch, config)?,
        None => {
            let mut rng = derive_rng(config.seed, "cl/init");
            let pair = MomentumPair::new(ClModel::new(&dims, &arch, &mut rng), config.cl.momentum)?;
            let d_head = pair.query.head.d_out();
            ClState {
                pair,
                queue: NegativeQueue::new(dims.queue_size, d_head),
                opt: Adam::new(config.cl.lr),
                next_epoch: 0,
            }
        }
    };

    let n = dataset.len();
    let batch = config.cl.batch_size.min(n);

    // queue warmup: enqueue-only passes until the queue is full
    if state.queue.filled() < state.queue.capacity() {
        let mut warmup_rng = derive_rng(config.seed, "cl/warmup");
        let mut indices: Vec<usize> = (0..n).collect();
        'warmup: loop {
            indices.shuffle(&mut warmup_rng);
            for chunk in indices.chunks(batch) {
                let (_, view_b) =
                    augment_batch_pair(&dataset.images, chunk, config, &mut warmup_rng);
                let k = state.pair.key.project(&view_b)?;
                state.queue.enqueue(k.view())?;
                if state.queue.is_full() {
                    break 'warmup;
                }
            }
        }
    }

    let mut epoch_losses = Vec::new();
    for epoch in state.next_epoch..config.cl.epochs {
        let started = Instant::now();
        let mut rng = derive_epoch_rng(config.seed, "cl", epoch);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in indices.chunks(batch) {
            if chunk.len() < batch {
                continue; // keep batch shapes fixed
            }
            let (view_a, view_b) = augment_batch_pair(&dataset.images, chunk, config, &mut rng);
            let loss = cl_train_step(
                &view_a,
                &view_b,
                &mut state.pair,
                &mut state.queue,
                dims.tau,
                &mut state.opt,
            )?;
            if !loss.is_finite() {
                return Err(StylexError::NonFiniteLoss {
                    step: epoch,
                    detail: format!("InfoNCE loss {loss} at epoch {epoch}"),
                });
            }
            losses.push(loss);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        epoch_losses.push(mean_loss);
        state.next_epoch = epoch + 1;
        metrics.append(&ClEpochRecord {
            schema: METRICS_SCHEMA,
            epoch,
            mean_loss,
            lr: config.cl.lr,
            wallclock_s: started.elapsed().as_secs_f64(),
        })?;
        save_state(&dir, &state, &dims, &arch, &config_hash)?;
    }

    // frozen extractor: backbone only, head discarded
    let mut extra = BTreeMap::new();
    extra.insert("epochs".into(), config.cl.epochs.to_string());
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        kind: "cl_extractor".into(),
        dims,
        arch,
        config_hash: config_hash.clone(),
        frozen: true,
        extra,
    });
    ckpt.push_params("backbone", &state.pair.query.backbone);
    let extractor_path = dir.join(EXTRACTOR_FILE);
    ckpt.save(&extractor_path)?;

    Ok(ClArtifacts {
        extractor: FrozenExtractor::new(
            state.pair.query.backbone.clone(),
            config.model.normalize_content,
        ),
        state_path: dir.join(STATE_FILE),
        extractor_path,
        metrics_path: dir.join(METRICS_FILE),
        epochs_run: config.cl.epochs,
        epoch_losses,
    })
}

/// Mean similarity diagnostics are occasionally useful in tests.
pub fn mean_positive_similarity(q: &Array2<f64>, k: &Array2<f64>) -> f64 {
    let sims: Array1<f64> = (q * k).sum_axis(Axis(1));
    sims.mean().unwrap_or(0.0)
}
