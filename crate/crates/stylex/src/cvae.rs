//! Stage-2 adversarial training: the statistics network ascends the
//! Jensen–Shannon MI estimate over its own parameters, and the CVAE
//! descends the combined loss (reconstruction + KLD + weighted MI
//! estimate) over encoder and decoder parameters, with the content
//! extractor frozen throughout. One ascent step per descent step by
//! default, GAN-style.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::augment;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::cl::{supervised_condition, FrozenExtractor};
use crate::config::RunConfig;
use crate::datasets::store::LoadedSplit;
use crate::error::{Result, StylexError};
use crate::losses::{kld_grads, mine_jsd_grads, recon_grad, LossWeights};
use crate::metrics::{CvaeEpochRecord, MetricsLog, METRICS_SCHEMA};
use crate::models::{
    reparameterize, reparameterize_backward, ArchConfig, CvaeEncoder, Decoder, ModelDims,
    StatisticsNetwork,
};
use crate::nn::{Adam, Parameterized};
use crate::rng::{derive_epoch_rng, derive_rng};

pub const STATE_FILE: &str = "state.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const DECODER_FILE: &str = "decoder.ckpt";
pub const SN_FILE: &str = "sn.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Alternation schedule of the min-max optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxSchedule {
    pub sn_steps_per_batch: u32,
    pub sn_lr: f64,
    pub cvae_lr: f64,
}

impl MinMaxSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.sn_steps_per_batch < 1 {
            return Err(StylexError::Config("sn_steps_per_batch must be >= 1".into()));
        }
        if self.sn_lr <= 0.0 || self.cvae_lr <= 0.0 {
            return Err(StylexError::Config("min-max learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// How marginal style samples are produced for the MI estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalMode {
    /// Draw from the prior N(0, I) (the method's definition).
    Gaussian,
    /// Within-batch permutation of the joint styles (ablation only).
    Shuffle,
}

impl MarginalMode {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(MarginalMode::Gaussian),
            "shuffle" => Ok(MarginalMode::Shuffle),
            other => Err(StylexError::Config(format!(
                "unknown marginal mode {other:?}"
            ))),
        }
    }
}

/// n i.i.d. standard-normal style vectors.
pub fn sample_marginal_style(n: usize, d_style: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d_style), |_| rng.sample(StandardNormal))
}

fn standard_normal_like(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn marginal_batch(
    z_style: &Array2<f64>,
    mode: MarginalMode,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    match mode {
        MarginalMode::Gaussian => sample_marginal_style(z_style.nrows(), z_style.ncols(), rng),
        MarginalMode::Shuffle => {
            let mut idx: Vec<usize> = (0..z_style.nrows()).collect();
            idx.shuffle(rng);
            let mut out = Array2::zeros(z_style.raw_dim());
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row).assign(&z_style.row(i));
            }
            out
        }
    }
}

/// One maximization step of the JSD estimate over the statistics network
/// parameters, with the code batches held fixed. Returns the estimate
/// before the update.
pub fn sn_ascent_on_codes(
    sn: &mut StatisticsNetwork,
    z_content: &Array2<f64>,
    z_style: &Array2<f64>,
    z_marginal: &Array2<f64>,
    opt: &mut Adam,
) -> Result<f64> {
    let (t_joint, joint_cache) = sn.forward_train(z_content, z_style)?;
    let (t_marg, marg_cache) = sn.forward_train(z_content, z_marginal)?;
    let (estimate, dt_joint, dt_marg) = mine_jsd_grads(t_joint.view(), t_marg.view())?;
    // Adam minimizes: negate to ascend the estimate
    sn.backward(&joint_cache, &dt_joint.mapv(|v| -v));
    sn.backward(&marg_cache, &dt_marg.mapv(|v| -v));
    let mut params = sn.params_mut();
    opt.step(&mut params);
    Ok(estimate)
}

/// Image-level ascent step: codes come from the frozen extractor (or any
/// precomputed condition) and the current encoder, with no gradient into
/// either — the encoder is taken immutably.
#[allow(clippy::too_many_arguments)]
pub fn sn_ascent_step(
    batch_images: &Array4<f64>,
    z_content: &Array2<f64>,
    encoder: &CvaeEncoder,
    sn: &mut StatisticsNetwork,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    sample_latent: bool,
    marginal: MarginalMode,
) -> Result<f64> {
    let post = encoder.forward(batch_images)?;
    let z_style = if sample_latent {
        let eps = standard_normal_like(post.mu.dim(), rng);
        reparameterize(&post, &eps)
    } else {
        post.mu.clone()
    };
    let z_marg = marginal_batch(&z_style, marginal, rng);
    sn_ascent_on_codes(sn, z_content, &z_style, &z_marg, opt)
}

/// Per-step loss breakdown returned by the descent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kld: f64,
    pub recon: f64,
    pub mi: f64,
    pub total: f64,
}

/// One minimization step of the combined loss over encoder and decoder
/// parameters. The statistics network is held fixed (immutable borrow);
/// the MI gradient reaches the encoder through the reparameterized style
/// code of the joint term only.
#[allow(clippy::too_many_arguments)]
pub fn cvae_descent_step(
    x: &Array4<f64>,
    z_content: &Array2<f64>,
    encoder: &mut CvaeEncoder,
    decoder: &mut Decoder,
    sn: &StatisticsNetwork,
    weights: &LossWeights,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    sample_latent: bool,
    marginal: MarginalMode,
    step: u64,
) -> Result<LossBreakdown> {
    let (post, enc_cache) = encoder.forward_train(x)?;
    let eps = if sample_latent {
        standard_normal_like(post.mu.dim(), rng)
    } else {
        Array2::zeros(post.mu.dim())
    };
    let z_style = reparameterize(&post, &eps);
    let (x_hat, dec_cache) = decoder.forward_train(&z_style, z_content)?;

    let (recon, mut dx_hat) = recon_grad(&x_hat, x)?;
    dx_hat.mapv_inplace(|v| v * weights.lambda_recon);
    let (kld, dmu_kld, dlv_kld) = kld_grads(post.mu.view(), post.logvar.view());

    // decoder pulls gradient into the style code
    let (mut dz_style, _dz_content) = decoder.backward(&dec_cache, &dx_hat);

    // MI term: only the joint scores depend on (theta, phi); skipped
    // entirely at lambda = 0 so the reduction to a plain CVAE step is
    // exact, including RNG consumption
    let mi = if weights.lambda_mine > 0.0 {
        let (t_joint, joint_cache) = sn.forward_train(z_content, &z_style)?;
        let z_marg = marginal_batch(&z_style, marginal, rng);
        let t_marg = sn.forward(z_content, &z_marg)?;
        let (mi, dt_joint, _) = mine_jsd_grads(t_joint.view(), t_marg.view())?;
        let (_, dz_from_sn) =
            sn.backward_inputs(&joint_cache, &dt_joint.mapv(|v| v * weights.lambda_mine));
        dz_style += &dz_from_sn;
        mi
    } else {
        0.0
    };

    let (dmu_r, dlv_r) = reparameterize_backward(&post, &eps, &dz_style);
    let dmu = &dmu_r + &dmu_kld.mapv(|v| v * weights.lambda_kl);
    let dlv = &dlv_r + &dlv_kld.mapv(|v| v * weights.lambda_kl);
    encoder.backward(&enc_cache, &dmu, &dlv);

    let total = weights.lambda_kl * kld + weights.lambda_recon * recon + weights.lambda_mine * mi;
    if !total.is_finite() {
        return Err(StylexError::NonFiniteLoss {
            step,
            detail: format!("kld={kld} recon={recon} mi={mi}"),
        });
    }

    let mut params = encoder.params_mut();
    params.extend(decoder.params_mut());
    opt.step(&mut params);

    Ok(LossBreakdown {
        kld,
        recon,
        mi,
        total,
    })
}

/// Source of the conditioning codes for stage 2.
pub enum ConditionSource {
    /// Frozen contrastive extractor (the method).
    Extractor(FrozenExtractor),
    /// One-hot labels (the supervised reference variant).
    Supervised { num_classes: u16 },
}

impl ConditionSource {
    pub fn d_content(&self) -> usize {
        match self {
            ConditionSource::Extractor(e) => e.d_content(),
            ConditionSource::Supervised { num_classes } => *num_classes as usize,
        }
    }

    pub fn codes(&self, images: &Array4<f64>, labels: &[u16]) -> Result<Array2<f64>> {
        match self {
            ConditionSource::Extractor(e) => e.content_codes(images),
            ConditionSource::Supervised { num_classes } => {
                supervised_condition(labels, *num_classes)
            }
        }
    }
}

pub struct CvaeArtifacts {
    pub encoder: CvaeEncoder,
    pub decoder: Decoder,
    pub sn: StatisticsNetwork,
    pub state_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epoch_records: Vec<CvaeEpochRecord>,
}

struct CvaeState {
    encoder: CvaeEncoder,
    decoder: Decoder,
    sn: StatisticsNetwork,
    opt_cvae: Adam,
    opt_sn: Adam,
    next_epoch: u64,
}

fn save_state(
    dir: &Path,
    state: &CvaeState,
    dims: &ModelDims,
    arch: &ArchConfig,
    config_hash: &str,
) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("next_epoch".into(), state.next_epoch.to_string());
    let (t_c, m_c, v_c) = state.opt_cvae.state();
    let (t_s, m_s, v_s) = state.opt_sn.state();
    extra.insert("adam_cvae_t".into(), t_c.to_string());
    extra.insert("adam_sn_t".into(), t_s.to_string());
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        kind: "cvae_state".into(),
        dims: *dims,
        arch: *arch,
        config_hash: config_hash.into(),
        frozen: false,
        extra,
    });
    ckpt.push_params("encoder", &state.encoder);
    ckpt.push_params("decoder", &state.decoder);
    ckpt.push_params("sn", &state.sn);
    for (i, arr) in m_c.iter().enumerate() {
        ckpt.push_array(format!("adam_cvae/m/{i}"), arr.clone());
    }
    for (i, arr) in v_c.iter().enumerate() {
        ckpt.push_array(format!("adam_cvae/v/{i}"), arr.clone());
    }
    for (i, arr) in m_s.iter().enumerate() {
        ckpt.push_array(format!("adam_sn/m/{i}"), arr.clone());
    }
    for (i, arr) in v_s.iter().enumerate() {
        ckpt.push_array(format!("adam_sn/v/{i}"), arr.clone());
    }
    ckpt.save(&dir.join(STATE_FILE))?;

    // per-component checkpoints for downstream consumers
    for (kind, file, prefix) in [
        ("cvae_encoder", ENCODER_FILE, "encoder"),
        ("cvae_decoder", DECODER_FILE, "decoder"),
        ("cvae_sn", SN_FILE, "sn"),
    ] {
        let mut c = Checkpoint::new(CheckpointMeta {
            kind: kind.into(),
            dims: *dims,
            arch: *arch,
            config_hash: config_hash.into(),
            frozen: false,
            extra: BTreeMap::new(),
        });
        match prefix {
            "encoder" => c.push_params(prefix, &state.encoder),
            "decoder" => c.push_params(prefix, &state.decoder),
            _ => c.push_params(prefix, &state.sn),
        }
        c.save(&dir.join(file))?;
    }
    Ok(())
}

fn restore_adam(ckpt: &Checkpoint, prefix: &str, t: u64, count: usize, opt: &mut Adam) -> Result<()> {
    let mut ms = Vec::with_capacity(count);
    let mut vs = Vec::with_capacity(count);
    for i in 0..count {
        ms.push(
            ckpt.get(&format!("{prefix}/m/{i}"))
                .ok_or_else(|| StylexError::Serde(format!("missing {prefix}/m/{i}")))?
                .clone(),
        );
        vs.push(
            ckpt.get(&format!("{prefix}/v/{i}"))
                .ok_or_else(|| StylexError::Serde(format!("missing {prefix}/v/{i}")))?
                .clone(),
        );
    }
    opt.restore(t, ms, vs);
    Ok(())
}

fn load_state(
    path: &Path,
    dims: &ModelDims,
    arch: &ArchConfig,
    config: &RunConfig,
) -> Result<CvaeState> {
    let ckpt = Checkpoint::load_expecting(path, "cvae_state", dims, arch)?;
    let mut rng = derive_rng(config.seed, "cvae/init");
    let mut encoder = CvaeEncoder::new(dims, arch, &mut rng);
    let mut decoder = Decoder::new(dims, arch, &mut rng);
    let mut sn = StatisticsNetwork::new(dims, arch, &mut rng);
    ckpt.restore_params("encoder", &mut encoder)?;
    ckpt.restore_params("decoder", &mut decoder)?;
    ckpt.restore_params("sn", &mut sn)?;

    let mut opt_cvae = Adam::new(config.cvae.lr);
    let mut opt_sn = Adam::new(config.cvae.sn_lr);
    let n_cvae = encoder.params().len() + decoder.params().len();
    let n_sn = sn.params().len();
    let t_c: u64 = ckpt.meta.extra["adam_cvae_t"].parse().unwrap_or(0);
    let t_s: u64 = ckpt.meta.extra["adam_sn_t"].parse().unwrap_or(0);
    restore_adam(&ckpt, "adam_cvae", t_c, n_cvae, &mut opt_cvae)?;
    restore_adam(&ckpt, "adam_sn", t_s, n_sn, &mut opt_sn)?;

    Ok(CvaeState {
        encoder,
        decoder,
        sn,
        opt_cvae,
        opt_sn,
        next_epoch: ckpt.meta.extra["next_epoch"].parse().unwrap_or(0),
    })
}

/// Stage-2 training loop. `condition` must come from a completed stage 1
/// (or the supervised variant); the CLI enforces the staging order.
pub fn train_cvae(
    dataset: &LoadedSplit,
    condition: &ConditionSource,
    config: &RunConfig,
    resume_from: Option<&Path>,
) -> Result<CvaeArtifacts> {
    let mut dims = config.stage2_dims(dataset.num_classes);
    dims.d_content = condition.d_content();
    dims.validate()?;
    let arch = config.model.arch;
    let schedule = MinMaxSchedule {
        sn_steps_per_batch: config.cvae.sn_steps_per_batch,
        sn_lr: config.cvae.sn_lr,
        cvae_lr: config.cvae.lr,
    };
    schedule.validate()?;
    let marginal = MarginalMode::from_str(&config.cvae.marginal)?;
    let weights = config.loss;
    weights.validate()?;
    let config_hash = config.config_hash()?;
    let dir = config.cvae_dir();
    std::fs::create_dir_all(&dir).map_err(|e| StylexError::io(&dir, e))?;
    let metrics = MetricsLog::new(dir.join(METRICS_FILE));

    let mut state = match resume_from {
        Some(path) => load_state(&path.join(STATE_FILE), &dims, &arch, config)?,
        None => {
            let mut rng = derive_rng(config.seed, "cvae/init");
            CvaeState {
                encoder: CvaeEncoder::new(&dims, &arch, &mut rng),
                decoder: Decoder::new(&dims, &arch, &mut rng),
                sn: StatisticsNetwork::new(&dims, &arch, &mut rng),
                opt_cvae: Adam::new(schedule.cvae_lr),
                opt_sn: Adam::new(schedule.sn_lr),
                next_epoch: 0,
            }
        }
    };

    let n = dataset.len();
    let batch = config.cvae.batch_size.min(n);
    let mut epoch_records = Vec::new();
    let mut global_step = state.next_epoch * (n / batch) as u64;

    for epoch in state.next_epoch..config.cvae.epochs {
        let started = Instant::now();
        let mut rng = derive_epoch_rng(config.seed, "cvae", epoch);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut sums = LossBreakdown {
            kld: 0.0,
            recon: 0.0,
            mi: 0.0,
            total: 0.0,
        };
        let mut batches = 0usize;
        for chunk in indices.chunks(batch) {
            if chunk.len() < batch {
                continue;
            }
            // one augmented view per sample: both the encoder input and
            // the reconstruction target
            let (_, c, h, w) = dataset.images.dim();
            let mut x = Array4::zeros((chunk.len(), c, h, w));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                let img = dataset
                    .images
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let aug = augment(&img, &config.augment, &mut rng);
                x.index_axis_mut(Axis(0), row).assign(&aug);
                labels.push(dataset.labels[i]);
            }
            let z_content = condition.codes(&x, &labels)?;

            if weights.lambda_mine > 0.0 {
                for _ in 0..schedule.sn_steps_per_batch {
                    sn_ascent_step(
                        &x,
                        &z_content,
                        &state.encoder,
                        &mut state.sn,
                        &mut state.opt_sn,
                        &mut rng,
                        config.cvae.sample_latent,
                        marginal,
                    )?;
                }
            }
            let outcome = cvae_descent_step(
                &x,
                &z_content,
                &mut state.encoder,
                &mut state.decoder,
                &state.sn,
                &weights,
                &mut state.opt_cvae,
                &mut rng,
                config.cvae.sample_latent,
                marginal,
                global_step,
            )?;
            sums.kld += outcome.kld;
            sums.recon += outcome.recon;
            sums.mi += outcome.mi;
            sums.total += outcome.total;
            batches += 1;
            global_step += 1;
        }
        let denom = batches.max(1) as f64;
        let record = CvaeEpochRecord {
            schema: METRICS_SCHEMA,
            epoch,
            kld: sums.kld / denom,
            recon: sums.recon / denom,
            mi_estimate: sums.mi / denom,
            total: sums.total / denom,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        metrics.append(&record)?;
        epoch_records.push(record);
        state.next_epoch = epoch + 1;
        save_state(&dir, &state, &dims, &arch, &config_hash)?;
    }

    Ok(CvaeArtifacts {
        encoder: state.encoder,
        decoder: state.decoder,
        sn: state.sn,
        state_path: dir.join(STATE_FILE),
        metrics_path: dir.join(METRICS_FILE),
        epoch_records,
    })
}

/// Load trained stage-2 components from a run directory.
pub fn load_components(
    dir: &Path,
    dims: &ModelDims,
    arch: &ArchConfig,
) -> Result<(CvaeEncoder, Decoder, StatisticsNetwork)> {
    let mut rng = derive_rng(0, "cvae-shell");
    let mut encoder = CvaeEncoder::new(dims, arch, &mut rng);
    let mut decoder = Decoder::new(dims, arch, &mut rng);
    let mut sn = StatisticsNetwork::new(dims, arch, &mut rng);
    Checkpoint::load_expecting(&dir.join(ENCODER_FILE), "cvae_encoder", dims, arch)?
        .restore_params("encoder", &mut encoder)?;
    Checkpoint::load_expecting(&dir.join(DECODER_FILE), "cvae_decoder", dims, arch)?
        .restore_params("decoder", &mut decoder)?;
    Checkpoint::load_expecting(&dir.join(SN_FILE), "cvae_sn", dims, arch)?
        .restore_params("sn", &mut sn)?;
    Ok((encoder, decoder, sn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::mine_jsd;
    use crate::models::GaussianPosterior;
    use crate::rng::derive_rng;

    const TWO_LOG_2: f64 = 1.3862943611198906;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            image_side: 32,
            d_content: 8,
            d_style: 8,
            queue_size: 64,
            tau: 0.2,
        }
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            head_hidden: 16,
            d_head: 8,
            fc_width: 16,
            sn_hidden: 64,
        }
    }

    #[test]
    fn marginal_sampler_statistics() {
        let a = sample_marginal_style(4, 3, &mut derive_rng(1, "marg"));
        let b = sample_marginal_style(4, 3, &mut derive_rng(1, "marg"));
        assert_eq!(a, b, "fixed seed reproduces batches");
        assert_eq!(sample_marginal_style(1, 5, &mut derive_rng(2, "m")).dim(), (1, 5));

        let big = sample_marginal_style(10_000, 1, &mut derive_rng(3, "marg-clt"));
        let mean = big.mean().unwrap();
        assert!(mean.abs() <= 3.0 / 100.0, "mean {mean}");
        let var = big.mapv(|v| (v - mean) * (v - mean)).sum() / (big.len() - 1) as f64;
        assert!((0.94..=1.06).contains(&var), "variance {var}");
    }

    #[test]
    fn ascent_detects_dependence() {
        // perfect dependence z_style := z_content must push the estimate
        // well above the independence floor of -2 log 2
        let mut rng = derive_rng(4, "dep");
        let mut sn = StatisticsNetwork::with_input_dims(8, 8, 64, &mut rng);
        let mut opt = Adam::new(1e-3);
        for _ in 0..200 {
            let zc = standard_normal_like((64, 8), &mut rng);
            let zs = zc.clone();
            let zm = sample_marginal_style(64, 8, &mut rng);
            sn_ascent_on_codes(&mut sn, &zc, &zs, &zm, &mut opt).unwrap();
        }
        // fresh evaluation batch
        let zc = standard_normal_like((512, 8), &mut rng);
        let zm = sample_marginal_style(512, 8, &mut rng);
        let t_joint = sn.forward(&zc, &zc.clone()).unwrap();
        let t_marg = sn.forward(&zc, &zm).unwrap();
        let estimate = mine_jsd(t_joint.view(), t_marg.view()).unwrap();
        assert!(
            estimate > -TWO_LOG_2 + 0.2,
            "estimate {estimate} did not rise above the floor"
        );
    }

    #[test]
    fn ascent_stays_at_independence_fixed_point() {
        let mut rng = derive_rng(5, "indep");
        let mut sn = StatisticsNetwork::with_input_dims(8, 8, 64, &mut rng);
        let mut opt = Adam::new(1e-3);
        for _ in 0..200 {
            let zc = standard_normal_like((64, 8), &mut rng);
            let zs = standard_normal_like((64, 8), &mut rng); // independent
            let zm = sample_marginal_style(64, 8, &mut rng);
            sn_ascent_on_codes(&mut sn, &zc, &zs, &zm, &mut opt).unwrap();
        }
        let zc = standard_normal_like((2048, 8), &mut rng);
        let zs = standard_normal_like((2048, 8), &mut rng);
        let zm = sample_marginal_style(2048, 8, &mut rng);
        let t_joint = sn.forward(&zc, &zs).unwrap();
        let t_marg = sn.forward(&zc, &zm).unwrap();
        let estimate = mine_jsd(t_joint.view(), t_marg.view()).unwrap();
        assert!(
            (estimate + TWO_LOG_2).abs() <= 0.05,
            "estimate {estimate} drifted from -2 log 2"
        );
    }

    #[test]
    fn ascent_touches_only_sn_parameters() {
        let mut rng = derive_rng(6, "isolate");
        let dims = tiny_dims();
        let arch = tiny_arch();
        let encoder = CvaeEncoder::new(&dims, &arch, &mut rng);
        let mut sn = StatisticsNetwork::new(&dims, &arch, &mut rng);
        let mut opt = Adam::new(1e-3);

        let enc_before: Vec<_> = encoder.params().iter().map(|p| p.value.clone()).collect();
        let sn_before: Vec<_> = sn.params().iter().map(|p| p.value.clone()).collect();

        let images = Array4::from_shape_fn((4, 1, 32, 32), |_| rng.gen_range(0.0..1.0));
        let zc = standard_normal_like((4, 8), &mut rng);
        sn_ascent_step(
            &images,
            &zc,
            &encoder,
            &mut sn,
            &mut opt,
            &mut rng,
            true,
            MarginalMode::Gaussian,
        )
        .unwrap();

        for (p, b) in encoder.params().iter().zip(&enc_before) {
            assert_eq!(&p.value, b, "encoder changed during ascent");
        }
        let mut any_changed = false;
        for (p, b) in sn.params().iter().zip(&sn_before) {
            if &p.value != b {
                any_changed = true;
            }
        }
        assert!(any_changed, "statistics network did not update");
    }

    #[test]
    fn descent_breakdown_bookkeeping() {
        let mut rng = derive_rng(7, "bk");
        let dims = tiny_dims();
        let arch = tiny_arch();
        let mut encoder = CvaeEncoder::new(&dims, &arch, &mut rng);
        let mut decoder = Decoder::new(&dims, &arch, &mut rng);
        let sn = StatisticsNetwork::new(&dims, &arch, &mut rng);
        let mut opt = Adam::new(1e-3);
        let weights = LossWeights {
            lambda_kl: 0.1,
            lambda_recon: 1.0,
            lambda_mine: 0.01,
        };
        let x = Array4::from_shape_fn((4, 1, 32, 32), |_| rng.gen_range(0.0..1.0));
        let zc = standard_normal_like((4, 8), &mut rng);
        let outcome = cvae_descent_step(
            &x,
            &zc,
            &mut encoder,
            &mut decoder,
            &sn,
            &weights,
            &mut opt,
            &mut rng,
            true,
            MarginalMode::Gaussian,
            0,
        )
        .unwrap();
        let reconstructed = weights.lambda_kl * outcome.kld
            + weights.lambda_recon * outcome.recon
            + weights.lambda_mine * outcome.mi;
        assert!((outcome.total - reconstructed).abs() < 1e-6);
        assert!(outcome.mi <= 0.0, "logged JSD estimate must be <= 0");
    }

    /// A reference CVAE step with no statistics network anywhere: at
    /// lambda_mine = 0 the descent step must produce bit-identical
    /// parameter updates.
    #[allow(clippy::too_many_arguments)]
    fn plain_cvae_step(
        x: &Array4<f64>,
        z_content: &Array2<f64>,
        encoder: &mut CvaeEncoder,
        decoder: &mut Decoder,
        weights: &LossWeights,
        opt: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) {
        let (post, enc_cache) = encoder.forward_train(x).unwrap();
        let eps = standard_normal_like(post.mu.dim(), rng);
        let z = reparameterize(&post, &eps);
        let (x_hat, dec_cache) = decoder.forward_train(&z, z_content).unwrap();
        let (_, mut dx_hat) = recon_grad(&x_hat, x).unwrap();
        dx_hat.mapv_inplace(|v| v * weights.lambda_recon);
        let (_, dmu_kld, dlv_kld) = kld_grads(post.mu.view(), post.logvar.view());
        let (dz, _) = decoder.backward(&dec_cache, &dx_hat);
        let (dmu_r, dlv_r) = reparameterize_backward(&post, &eps, &dz);
        let dmu = &dmu_r + &dmu_kld.mapv(|v| v * weights.lambda_kl);
        let dlv = &dlv_r + &dlv_kld.mapv(|v| v * weights.lambda_kl);
        encoder.backward(&enc_cache, &dmu, &dlv);
        let mut params = encoder.params_mut();
        params.extend(decoder.params_mut());
        opt.step(&mut params);
    }

    #[test]
    fn zero_mine_weight_reduces_to_plain_cvae_step() {
        let dims = tiny_dims();
        let arch = tiny_arch();
        let weights = LossWeights {
            lambda_kl: 0.1,
            lambda_recon: 1.0,
            lambda_mine: 0.0,
        };
        let mut rng_x = derive_rng(8, "x");
        let x = Array4::from_shape_fn((4, 1, 32, 32), |_| rng_x.gen_range(0.0..1.0));
        let zc = standard_normal_like((4, 8), &mut rng_x);

        let mut init_rng = derive_rng(9, "init");
        let mut enc_a = CvaeEncoder::new(&dims, &arch, &mut init_rng);
        let mut dec_a = Decoder::new(&dims, &arch, &mut init_rng);
        let sn = StatisticsNetwork::new(&dims, &arch, &mut init_rng);
        let mut enc_b = enc_a.clone();
        let mut dec_b = dec_a.clone();

        let mut opt_a = Adam::new(1e-3);
        let mut opt_b = Adam::new(1e-3);
        cvae_descent_step(
            &x,
            &zc,
            &mut enc_a,
            &mut dec_a,
            &sn,
            &weights,
            &mut opt_a,
            &mut derive_rng(10, "step"),
            true,
            MarginalMode::Gaussian,
            0,
        )
        .unwrap();
        plain_cvae_step(
            &x,
            &zc,
            &mut enc_b,
            &mut dec_b,
            &weights,
            &mut opt_b,
            &mut derive_rng(10, "step"),
        );

        for (pa, pb) in enc_a.params().iter().zip(enc_b.params()) {
            assert_eq!(pa.value, pb.value, "encoder deltas diverged");
        }
        for (pa, pb) in dec_a.params().iter().zip(dec_b.params()) {
            assert_eq!(pa.value, pb.value, "decoder deltas diverged");
        }
    }

    #[test]
    fn descent_leaves_sn_and_consumes_posterior() {
        let mut rng = derive_rng(11, "iso2");
        let dims = tiny_dims();
        let arch = tiny_arch();
        let mut encoder = CvaeEncoder::new(&dims, &arch, &mut rng);
        let mut decoder = Decoder::new(&dims, &arch, &mut rng);
        let sn = StatisticsNetwork::new(&dims, &arch, &mut rng);
        let sn_before: Vec<_> = sn.params().iter().map(|p| p.value.clone()).collect();
        let enc_before: Vec<_> = encoder.params().iter().map(|p| p.value.clone()).collect();

        let x = Array4::from_shape_fn((4, 1, 32, 32), |_| rng.gen_range(0.0..1.0));
        let zc = standard_normal_like((4, 8), &mut rng);
        let mut opt = Adam::new(1e-3);
        cvae_descent_step(
            &x,
            &zc,
            &mut encoder,
            &mut decoder,
            &sn,
            &LossWeights::default(),
            &mut opt,
            &mut rng,
            true,
            MarginalMode::Gaussian,
            0,
        )
        .unwrap();

        for (p, b) in sn.params().iter().zip(&sn_before) {
            assert_eq!(&p.value, b, "sn changed during descent");
        }
        let changed = encoder
            .params()
            .iter()
            .zip(&enc_before)
            .any(|(p, b)| &p.value != b);
        assert!(changed, "encoder did not update");
    }

    #[test]
    fn reparameterize_mu_passthrough_when_not_sampling() {
        let post = GaussianPosterior {
            mu: ndarray::arr2(&[[0.3, -0.7]]),
            logvar: ndarray::arr2(&[[1.0, -1.0]]),
        };
        let z = reparameterize(&post, &Array2::zeros((1, 2)));
        assert_eq!(z, post.mu);
    }
}
