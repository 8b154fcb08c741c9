//! The five differentiable maps: contrastive backbone, projection head,
//! CVAE encoder, decoder, and the statistics network.
//!
//! All are small stride-2 convolutional stacks (or MLPs) sized for 32x32
//! grayscale inputs. There is no normalization or dropout anywhere, so
//! forward passes are deterministic unconditionally.

use ndarray::{s, Array1, Array2, Array4, Axis, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};
use crate::nn::{
    relu, relu_grad, sigmoid, sigmoid_grad_from_y, softplus_arr, softplus_grad, Conv2d,
    ConvTranspose2d, Linear, Param, Parameterized,
};

/// Shared dimensioning of the model zoo.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub image_side: usize,
    pub d_content: usize,
    pub d_style: usize,
    /// Number of negative keys kept in the contrastive queue.
    pub queue_size: usize,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_side: 32,
            d_content: 128,
            d_style: 32,
            queue_size: 4096,
            tau: 0.2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_style < 1 || self.d_content < 1 {
            return Err(StylexError::Config(
                "d_style and d_content must be >= 1".into(),
            ));
        }
        if self.queue_size < 1 {
            return Err(StylexError::Config("queue_size must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(StylexError::Config("tau must be > 0".into()));
        }
        if self.image_side % 16 != 0 {
            return Err(StylexError::Config(
                "image_side must be a multiple of 16 (four stride-2 blocks)".into(),
            ));
        }
        Ok(())
    }
}

/// Architecture widths; dims stay in [`ModelDims`], capacities here.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channel count of the first conv block; later blocks double it.
    pub base_channels: usize,
    /// Projection head hidden width and output dimension.
    pub head_hidden: usize,
    pub d_head: usize,
    /// Encoder/decoder fully-connected fusion width.
    pub fc_width: usize,
    /// Statistics network hidden width (3 layers).
    pub sn_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 8,
            head_hidden: 128,
            d_head: 64,
            fc_width: 256,
            sn_hidden: 256,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1
            || self.head_hidden < 1
            || self.d_head < 1
            || self.fc_width < 1
            || self.sn_hidden < 1
        {
            return Err(StylexError::Config("architecture widths must be >= 1".into()));
        }
        Ok(())
    }
}

const LOGVAR_CLAMP: f64 = 10.0;
const NORM_EPS: f64 = 1e-12;

fn clamp_logvar(v: f64) -> f64 {
    v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
}

/// Gaussian posterior of the style latent: per-sample mean and clamped
/// log-variance, each (N, d_style).
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl GaussianPosterior {
    pub fn sigma(&self) -> Array2<f64> {
        self.logvar.mapv(|lv| (0.5 * lv).exp())
    }
}

/// z = mu + exp(logvar / 2) * eps.
pub fn reparameterize(post: &GaussianPosterior, eps: &Array2<f64>) -> Array2<f64> {
    assert_eq!(post.mu.dim(), eps.dim(), "reparameterize eps shape");
    &post.mu + &(post.sigma() * eps)
}

/// Backward through the reparameterization: returns (dmu, dlogvar).
pub fn reparameterize_backward(
    post: &GaussianPosterior,
    eps: &Array2<f64>,
    dz: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dmu = dz.clone();
    let mut dlogvar = post.sigma();
    ndarray::Zip::from(&mut dlogvar)
        .and(eps)
        .and(dz)
        .for_each(|s, &e, &d| *s = 0.5 * *s * e * d);
    (dmu, dlogvar)
}

// ---------------------------------------------------------------------------
// Contrastive backbone f: images -> content codes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    fc: Linear,
    pub image_side: usize,
    pub d_content: usize,
}

pub struct BackboneCache {
    conv_caches: Vec<crate::nn::conv::ConvCache>,
    pre_relu: Vec<Array4<f64>>,
    flat: Array2<f64>,
}

impl Backbone {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = arch.base_channels;
        let chans = [1, c, 2 * c, 4 * c, 8 * c];
        let convs = (0..4)
            .map(|i| Conv2d::new(&format!("backbone.conv{i}"), chans[i], chans[i + 1], 3, 2, 1, rng))
            .collect();
        let spatial = dims.image_side / 16;
        let fc = Linear::new(
            "backbone.fc",
            8 * c * spatial * spatial,
            dims.d_content,
            rng,
        );
        Backbone {
            convs,
            fc,
            image_side: dims.image_side,
            d_content: dims.d_content,
        }
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 1 || h != self.image_side || w != self.image_side {
            return Err(StylexError::Contract(format!(
                "backbone expects (N, 1, {0}, {0}) images, got {1:?}",
                self.image_side,
                images.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_train(images)?.0)
    }

    pub fn forward_train(&self, images: &Array4<f64>) -> Result<(Array2<f64>, BackboneCache)> {
        self.check_input(images)?;
        let n = images.dim().0;
        let mut conv_caches = Vec::with_capacity(4);
        let mut pre_relu = Vec::with_capacity(4);
        let mut x = images.clone();
        for conv in &self.convs {
            let (y, cache) = conv.forward_train(&x);
            conv_caches.push(cache);
            pre_relu.push(y.clone());
            x = relu(&y.into_dyn()).into_dimensionality::<Ix4>().unwrap();
        }
        let flat = x.into_shape_with_order((n, self.fc.in_dim)).unwrap();
        let codes = self.fc.forward(&flat);
        Ok((
            codes,
            BackboneCache {
                conv_caches,
                pre_relu,
                flat,
            },
        ))
    }

    /// Accumulates parameter gradients; the image gradient is discarded.
    pub fn backward(&mut self, cache: &BackboneCache, dcodes: &Array2<f64>) {
        let dflat = self.fc.backward(&cache.flat, dcodes);
        let n = dflat.nrows();
        let last = self.convs.len() - 1;
        let (_, cch, chh, cww) = cache.pre_relu[last].dim();
        let mut dy = dflat.into_shape_with_order((n, cch, chh, cww)).unwrap();
        for i in (0..self.convs.len()).rev() {
            let masked = relu_grad(&cache.pre_relu[i].clone().into_dyn(), &dy.into_dyn())
                .into_dimensionality::<Ix4>()
                .unwrap();
            dy = self.convs[i].backward(&cache.conv_caches[i], &masked);
        }
    }
}

impl Parameterized for Backbone {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fc.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.fc.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Projection head: content code -> unit vector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

pub struct HeadCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    v: Array2<f64>,      // pre-normalization output
    norms: Array1<f64>,  // ||v|| per row
}

impl ProjectionHead {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            fc1: Linear::new("head.fc1", dims.d_content, arch.head_hidden, rng),
            fc2: Linear::new("head.fc2", arch.head_hidden, arch.d_head, rng),
        }
    }

    pub fn d_out(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward(&self, z_content: &Array2<f64>) -> Array2<f64> {
        self.forward_train(z_content).0
    }

    pub fn forward_train(&self, z_content: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let h_pre = self.fc1.forward(z_content);
        let h = relu(&h_pre.clone().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let v = self.fc2.forward(&h);
        let mut q = v.clone();
        let mut norms = Array1::zeros(v.nrows());
        for (i, mut row) in q.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            norms[i] = norm;
            // epsilon keeps an all-zero pre-normalization vector finite
            row.mapv_inplace(|x| x / (norm + NORM_EPS));
        }
        (
            q,
            HeadCache {
                x: z_content.clone(),
                h_pre,
                h,
                v,
                norms,
            },
        )
    }

    /// Accumulates parameter gradients; returns the content-code gradient.
    pub fn backward(&mut self, cache: &HeadCache, dq: &Array2<f64>) -> Array2<f64> {
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for i in 0..cache.v.nrows() {
            let s = cache.norms[i];
            let r = s + NORM_EPS;
            let vrow = cache.v.row(i);
            let dqrow = dq.row(i);
            if s < NORM_EPS {
                let mut out = dv.row_mut(i);
                out.assign(&dqrow.mapv(|d| d / NORM_EPS));
                continue;
            }
            let dot = dqrow.dot(&vrow);
            let coeff = dot / (r * r * s);
            let mut out = dv.row_mut(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dqrow[j] / r - coeff * vrow[j];
            }
        }
        let dh = self.fc2.backward(&cache.h, &dv);
        let dh_pre = relu_grad(&cache.h_pre.clone().into_dyn(), &dh.into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        self.fc1.backward(&cache.x, &dh_pre)
    }
}

impl Parameterized for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// CVAE encoder: image -> Gaussian posterior (no content-code input, by
// construction: the signature takes only images)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CvaeEncoder {
    convs: Vec<Conv2d>,
    fc: Linear,
    mu_head: Linear,
    logvar_head: Linear,
    pub image_side: usize,
    pub d_style: usize,
}

pub struct EncoderCache {
    conv_caches: Vec<crate::nn::conv::ConvCache>,
    pre_relu: Vec<Array4<f64>>,
    flat: Array2<f64>,
    fc_pre: Array2<f64>,
    fc_out: Array2<f64>,
    logvar_raw: Array2<f64>,
}

impl CvaeEncoder {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = arch.base_channels;
        let chans = [1, c, 2 * c, 4 * c, 8 * c];
        let convs = (0..4)
            .map(|i| Conv2d::new(&format!("encoder.conv{i}"), chans[i], chans[i + 1], 3, 2, 1, rng))
            .collect();
        let spatial = dims.image_side / 16;
        let flat_dim = 8 * c * spatial * spatial;
        CvaeEncoder {
            convs,
            fc: Linear::new("encoder.fc", flat_dim, arch.fc_width, rng),
            mu_head: Linear::new("encoder.mu", arch.fc_width, dims.d_style, rng),
            logvar_head: Linear::new("encoder.logvar", arch.fc_width, dims.d_style, rng),
            image_side: dims.image_side,
            d_style: dims.d_style,
        }
    }

    fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 1 || h != self.image_side || w != self.image_side {
            return Err(StylexError::Contract(format!(
                "encoder expects (N, 1, {0}, {0}) images, got {1:?}",
                self.image_side,
                images.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, images: &Array4<f64>) -> Result<GaussianPosterior> {
        Ok(self.forward_train(images)?.0)
    }

    pub fn forward_train(
        &self,
        images: &Array4<f64>,
    ) -> Result<(GaussianPosterior, EncoderCache)> {
        self.check_input(images)?;
        let n = images.dim().0;
        let mut conv_caches = Vec::with_capacity(4);
        let mut pre_relu = Vec::with_capacity(4);
        let mut x = images.clone();
        for conv in &self.convs {
            let (y, cache) = conv.forward_train(&x);
            conv_caches.push(cache);
            pre_relu.push(y.clone());
            x = relu(&y.into_dyn()).into_dimensionality::<Ix4>().unwrap();
        }
        let flat = x.into_shape_with_order((n, self.fc.in_dim)).unwrap();
        let fc_pre = self.fc.forward(&flat);
        let fc_out = relu(&fc_pre.clone().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mu = self.mu_head.forward(&fc_out);
        let logvar_raw = self.logvar_head.forward(&fc_out);
        let logvar = logvar_raw.mapv(clamp_logvar);
        Ok((
            GaussianPosterior { mu, logvar },
            EncoderCache {
                conv_caches,
                pre_relu,
                flat,
                fc_pre,
                fc_out,
                logvar_raw,
            },
        ))
    }

    /// Accumulates parameter gradients from posterior gradients.
    pub fn backward(&mut self, cache: &EncoderCache, dmu: &Array2<f64>, dlogvar: &Array2<f64>) {
        // clamp passes gradient only strictly inside its bounds
        let mut dlv = dlogvar.clone();
        ndarray::Zip::from(&mut dlv)
            .and(&cache.logvar_raw)
            .for_each(|d, &raw| {
                if raw.abs() >= LOGVAR_CLAMP {
                    *d = 0.0;
                }
            });
        let d_fc_from_mu = self.mu_head.backward(&cache.fc_out, dmu);
        let d_fc_from_lv = self.logvar_head.backward(&cache.fc_out, &dlv);
        let d_fc = &d_fc_from_mu + &d_fc_from_lv;
        let d_fc_pre = relu_grad(&cache.fc_pre.clone().into_dyn(), &d_fc.into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dflat = self.fc.backward(&cache.flat, &d_fc_pre);
        let n = dflat.nrows();
        let last = self.convs.len() - 1;
        let (_, cch, chh, cww) = cache.pre_relu[last].dim();
        let mut dy = dflat.into_shape_with_order((n, cch, chh, cww)).unwrap();
        for i in (0..self.convs.len()).rev() {
            let masked = relu_grad(&cache.pre_relu[i].clone().into_dyn(), &dy.into_dyn())
                .into_dimensionality::<Ix4>()
                .unwrap();
            dy = self.convs[i].backward(&cache.conv_caches[i], &masked);
        }
    }
}

impl Parameterized for CvaeEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fc.params());
        p.extend(self.mu_head.params());
        p.extend(self.logvar_head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.fc.params_mut());
        p.extend(self.mu_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Decoder: (style code, content code) -> image in [0, 1]
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Decoder {
    fc1: Linear,
    fc2: Linear,
    deconvs: Vec<ConvTranspose2d>, // all but last followed by relu
    pub d_style: usize,
    pub d_content: usize,
    pub image_side: usize,
    seed_channels: usize,
    seed_spatial: usize,
}

pub struct DecoderCache {
    fused: Array2<f64>,
    fc1_pre: Array2<f64>,
    fc1_out: Array2<f64>,
    fc2_pre: Array2<f64>,
    deconv_caches: Vec<crate::nn::conv::ConvTransposeCache>,
    pre_act: Vec<Array4<f64>>, // pre-relu for hidden, pre-sigmoid for last
    y: Array4<f64>,
}

impl Decoder {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = arch.base_channels;
        let seed_channels = 8 * c;
        let seed_spatial = dims.image_side / 16;
        let fused_dim = dims.d_style + dims.d_content;
        let fc1 = Linear::new("decoder.fc1", fused_dim, arch.fc_width, rng);
        let fc2 = Linear::new(
            "decoder.fc2",
            arch.fc_width,
            seed_channels * seed_spatial * seed_spatial,
            rng,
        );
        let chans = [8 * c, 4 * c, 2 * c, c, 1];
        let deconvs = (0..4)
            .map(|i| {
                ConvTranspose2d::new(
                    &format!("decoder.deconv{i}"),
                    chans[i],
                    chans[i + 1],
                    4,
                    2,
                    1,
                    rng,
                )
            })
            .collect();
        Decoder {
            fc1,
            fc2,
            deconvs,
            d_style: dims.d_style,
            d_content: dims.d_content,
            image_side: dims.image_side,
            seed_channels,
            seed_spatial,
        }
    }

    fn fuse(&self, z_style: &Array2<f64>, z_content: &Array2<f64>) -> Result<Array2<f64>> {
        if z_style.ncols() != self.d_style || z_content.ncols() != self.d_content {
            return Err(StylexError::Contract(format!(
                "decoder expects codes of widths ({}, {}), got ({}, {})",
                self.d_style,
                self.d_content,
                z_style.ncols(),
                z_content.ncols()
            )));
        }
        if z_style.nrows() != z_content.nrows() {
            return Err(StylexError::Contract(format!(
                "decoder batch mismatch: {} style rows vs {} content rows",
                z_style.nrows(),
                z_content.nrows()
            )));
        }
        let n = z_style.nrows();
        let mut fused = Array2::zeros((n, self.d_style + self.d_content));
        fused.slice_mut(s![.., ..self.d_style]).assign(z_style);
        fused.slice_mut(s![.., self.d_style..]).assign(z_content);
        Ok(fused)
    }

    pub fn forward(&self, z_style: &Array2<f64>, z_content: &Array2<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_train(z_style, z_content)?.0)
    }

    pub fn forward_train(
        &self,
        z_style: &Array2<f64>,
        z_content: &Array2<f64>,
    ) -> Result<(Array4<f64>, DecoderCache)> {
        let fused = self.fuse(z_style, z_content)?;
        let n = fused.nrows();
        let fc1_pre = self.fc1.forward(&fused);
        let fc1_out = relu(&fc1_pre.clone().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let fc2_pre = self.fc2.forward(&fc1_out);
        let seed = relu(&fc2_pre.clone().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut x = seed
            .into_shape_with_order((n, self.seed_channels, self.seed_spatial, self.seed_spatial))
            .unwrap();

        let mut deconv_caches = Vec::with_capacity(4);
        let mut pre_act = Vec::with_capacity(4);
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let (y, cache) = deconv.forward_train(&x);
            deconv_caches.push(cache);
            pre_act.push(y.clone());
            x = if i == last {
                sigmoid(&y.into_dyn()).into_dimensionality::<Ix4>().unwrap()
            } else {
                relu(&y.into_dyn()).into_dimensionality::<Ix4>().unwrap()
            };
        }
        let y = x;
        Ok((
            y.clone(),
            DecoderCache {
                fused,
                fc1_pre,
                fc1_out,
                fc2_pre,
                deconv_caches,
                pre_act,
                y,
            },
        ))
    }

    /// Accumulates parameter gradients; returns (d z_style, d z_content).
    pub fn backward(&mut self, cache: &DecoderCache, dy: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        let last = self.deconvs.len() - 1;
        let mut grad = sigmoid_grad_from_y(&cache.y.clone().into_dyn(), &dy.clone().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        for i in (0..self.deconvs.len()).rev() {
            if i != last {
                grad = relu_grad(&cache.pre_act[i].clone().into_dyn(), &grad.into_dyn())
                    .into_dimensionality::<Ix4>()
                    .unwrap();
            }
            grad = self.deconvs[i].backward(&cache.deconv_caches[i], &grad);
        }
        let n = grad.dim().0;
        let dseed = grad
            .into_shape_with_order((n, self.seed_channels * self.seed_spatial * self.seed_spatial))
            .unwrap();
        let dfc2_pre = relu_grad(&cache.fc2_pre.clone().into_dyn(), &dseed.into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dfc1_out = self.fc2.backward(&cache.fc1_out, &dfc2_pre);
        let dfc1_pre = relu_grad(&cache.fc1_pre.clone().into_dyn(), &dfc1_out.into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dfused = self.fc1.backward(&cache.fused, &dfc1_pre);
        let dz_style = dfused.slice(s![.., ..self.d_style]).to_owned();
        let dz_content = dfused.slice(s![.., self.d_style..]).to_owned();
        (dz_style, dz_content)
    }
}

impl Parameterized for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        for d in &self.deconvs {
            p.extend(d.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        for d in &mut self.deconvs {
            p.extend(d.params_mut());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Statistics network T: (content code, style code) -> scalar score
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StatisticsNetwork {
    fcs: Vec<Linear>, // 3 hidden (softplus) + 1 output
    pub d_content: usize,
    pub d_style: usize,
}

pub struct SnCache {
    inputs: Vec<Array2<f64>>,  // input of each linear layer
    pre_act: Vec<Array2<f64>>, // pre-softplus of hidden layers
}

impl StatisticsNetwork {
    pub fn new(dims: &ModelDims, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::with_input_dims(dims.d_content, dims.d_style, arch.sn_hidden, rng)
    }

    /// Direct constructor, used by the Gaussian sanity harness where the
    /// pair dimensions do not come from the model zoo.
    pub fn with_input_dims(
        d_content: usize,
        d_style: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_in = d_content + d_style;
        let fcs = vec![
            Linear::new("sn.fc0", d_in, hidden, rng),
            Linear::new("sn.fc1", hidden, hidden, rng),
            Linear::new("sn.fc2", hidden, hidden, rng),
            Linear::new("sn.out", hidden, 1, rng),
        ];
        StatisticsNetwork {
            fcs,
            d_content,
            d_style,
        }
    }

    fn fuse(&self, z_content: &Array2<f64>, z_style: &Array2<f64>) -> Result<Array2<f64>> {
        if z_content.nrows() != z_style.nrows() {
            return Err(StylexError::Contract(format!(
                "statistics network batch mismatch: {} content rows vs {} style rows",
                z_content.nrows(),
                z_style.nrows()
            )));
        }
        if z_content.ncols() != self.d_content || z_style.ncols() != self.d_style {
            return Err(StylexError::Contract(format!(
                "statistics network expects widths ({}, {}), got ({}, {})",
                self.d_content,
                self.d_style,
                z_content.ncols(),
                z_style.ncols()
            )));
        }
        let n = z_content.nrows();
        let mut fused = Array2::zeros((n, self.d_content + self.d_style));
        fused.slice_mut(s![.., ..self.d_content]).assign(z_content);
        fused.slice_mut(s![.., self.d_content..]).assign(z_style);
        Ok(fused)
    }

    pub fn forward(&self, z_content: &Array2<f64>, z_style: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_train(z_content, z_style)?.0)
    }

    pub fn forward_train(
        &self,
        z_content: &Array2<f64>,
        z_style: &Array2<f64>,
    ) -> Result<(Array1<f64>, SnCache)> {
        let mut x = self.fuse(z_content, z_style)?;
        let mut inputs = Vec::with_capacity(4);
        let mut pre_act = Vec::with_capacity(3);
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            inputs.push(x.clone());
            let y = fc.forward(&x);
            if i != last {
                pre_act.push(y.clone());
                x = softplus_arr(&y.into_dyn())
                    .into_dimensionality::<Ix2>()
                    .unwrap();
            } else {
                x = y;
            }
        }
        let scores = x.index_axis(Axis(1), 0).to_owned();
        Ok((scores, SnCache { inputs, pre_act }))
    }

    /// Backward accumulating parameter gradients (the ascent path);
    /// returns (d z_content, d z_style).
    pub fn backward(&mut self, cache: &SnCache, dscores: &Array1<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = dscores.len();
        let mut dy = Array2::zeros((n, 1));
        dy.index_axis_mut(Axis(1), 0).assign(dscores);
        for i in (0..self.fcs.len()).rev() {
            let dx = self.fcs[i].backward(&cache.inputs[i], &dy);
            dy = if i > 0 {
                softplus_grad(&cache.pre_act[i - 1].clone().into_dyn(), &dx.into_dyn())
                    .into_dimensionality::<Ix2>()
                    .unwrap()
            } else {
                dx
            };
        }
        let dz_content = dy.slice(s![.., ..self.d_content]).to_owned();
        let dz_style = dy.slice(s![.., self.d_content..]).to_owned();
        (dz_content, dz_style)
    }

    /// Input gradients with the network held fixed (the descent path
    /// treats the statistics network as constants; `&self` guarantees it).
    pub fn backward_inputs(
        &self,
        cache: &SnCache,
        dscores: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = dscores.len();
        let mut dy = Array2::zeros((n, 1));
        dy.index_axis_mut(Axis(1), 0).assign(dscores);
        for i in (0..self.fcs.len()).rev() {
            let w = self.fcs[i].w.value.view().into_dimensionality::<Ix2>().unwrap();
            let dx = dy.dot(&w);
            dy = if i > 0 {
                softplus_grad(&cache.pre_act[i - 1].clone().into_dyn(), &dx.into_dyn())
                    .into_dimensionality::<Ix2>()
                    .unwrap()
            } else {
                dx
            };
        }
        let dz_content = dy.slice(s![.., ..self.d_content]).to_owned();
        let dz_style = dy.slice(s![.., self.d_content..]).to_owned();
        (dz_content, dz_style)
    }
}

impl Parameterized for StatisticsNetwork {
    fn params(&self) -> Vec<&Param> {
        self.fcs.iter().flat_map(|f| f.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fcs.iter_mut().flat_map(|f| f.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            image_side: 32,
            d_content: 16,
            d_style: 8,
            queue_size: 16,
            tau: 0.2,
        }
    }

    fn arch() -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            head_hidden: 12,
            d_head: 6,
            fc_width: 20,
            sn_hidden: 16,
        }
    }

    fn random_images(n: usize, seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, "model-test-images");
        Array4::from_shape_fn((n, 1, 32, 32), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn dims_validation() {
        assert!(dims().validate().is_ok());
        assert!(ModelDims { d_style: 0, ..dims() }.validate().is_err());
        assert!(ModelDims { tau: 0.0, ..dims() }.validate().is_err());
        assert!(ModelDims { queue_size: 0, ..dims() }.validate().is_err());
        assert!(ModelDims { image_side: 24, ..dims() }.validate().is_err());
    }

    #[test]
    fn backbone_shape_and_determinism() {
        let mut rng = derive_rng(1, "bb");
        let dims = ModelDims { d_content: 128, ..dims() };
        let bb = Backbone::new(&dims, &arch(), &mut rng);
        let x = random_images(4, 2);
        let a = bb.forward(&x).unwrap();
        assert_eq!(a.dim(), (4, 128));
        let b = bb.forward(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backbone_rejects_wrong_shape() {
        let mut rng = derive_rng(1, "bb");
        let bb = Backbone::new(&dims(), &arch(), &mut rng);
        let bad = Array4::<f64>::zeros((2, 1, 16, 16));
        assert!(bb.forward(&bad).is_err());
    }

    #[test]
    fn backbone_zero_final_layer_gives_zero_codes() {
        let mut rng = derive_rng(2, "bb0");
        let mut bb = Backbone::new(&dims(), &arch(), &mut rng);
        bb.fc.w.value.fill(0.0);
        bb.fc.b.value.fill(0.0);
        let codes = bb.forward(&random_images(3, 3)).unwrap();
        assert!(codes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_outputs_unit_norm() {
        let mut rng = derive_rng(3, "head");
        let head = ProjectionHead::new(&dims(), &arch(), &mut rng);
        for seed in 0..1000u64 {
            let mut r2 = derive_rng(seed, "head-in");
            let x = Array2::from_shape_fn((1, 16), |_| r2.gen_range(-2.0..2.0));
            let q = head.forward(&x);
            let norm = q.row(0).dot(&q.row(0)).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn normalization_arithmetic_and_zero_guard() {
        // (3, 4) normalizes to (0.6, 0.8); zero vector stays finite
        let mut rng = derive_rng(4, "norm");
        let mut head = ProjectionHead::new(
            &ModelDims { d_content: 2, ..dims() },
            &ArchConfig { head_hidden: 2, d_head: 2, ..arch() },
            &mut rng,
        );
        // make the head the identity: fc1 = relu-passing identity, fc2 = identity
        head.fc1.w.value = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        head.fc1.b.value.fill(0.0);
        head.fc2.w.value = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        head.fc2.b.value.fill(0.0);
        let q = head.forward(&ndarray::arr2(&[[3.0, 4.0]]));
        assert!((q[[0, 0]] - 0.6).abs() < 1e-9);
        assert!((q[[0, 1]] - 0.8).abs() < 1e-9);

        let q0 = head.forward(&ndarray::arr2(&[[0.0, 0.0]]));
        assert!(q0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_shapes_clamp_and_determinism() {
        let mut rng = derive_rng(5, "enc");
        let d = ModelDims { d_style: 32, ..dims() };
        let enc = CvaeEncoder::new(&d, &arch(), &mut rng);
        let x = random_images(2, 6);
        let post = enc.forward(&x).unwrap();
        assert_eq!(post.mu.dim(), (2, 32));
        assert_eq!(post.logvar.dim(), (2, 32));
        assert!(post.logvar.iter().all(|&v| (-10.0..=10.0).contains(&v)));
        let post2 = enc.forward(&x).unwrap();
        assert_eq!(post.mu, post2.mu);
        assert_eq!(post.logvar, post2.logvar);
    }

    #[test]
    fn reparameterize_closed_forms() {
        let post = GaussianPosterior {
            mu: ndarray::arr2(&[[1.0, 1.0]]),
            logvar: ndarray::arr2(&[[4.0f64.ln(), 4.0f64.ln()]]),
        };
        let eps = ndarray::arr2(&[[1.0, -1.0]]);
        let z = reparameterize(&post, &eps);
        assert!((z[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((z[[0, 1]] + 1.0).abs() < 1e-12);

        // eps = 0 -> z = mu
        let z0 = reparameterize(&post, &Array2::zeros((1, 2)));
        assert_eq!(z0, post.mu);

        // mu = 0, logvar = 0 -> z = eps
        let std = GaussianPosterior {
            mu: Array2::zeros((1, 2)),
            logvar: Array2::zeros((1, 2)),
        };
        assert_eq!(reparameterize(&std, &eps), eps);
    }

    #[test]
    fn reparameterize_matches_closed_form_on_random_inputs() {
        let mut rng = derive_rng(6, "reparam");
        for _ in 0..100 {
            let mu = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-2.0..2.0));
            let logvar = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-3.0..3.0));
            let eps = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-2.0..2.0));
            let post = GaussianPosterior { mu: mu.clone(), logvar: logvar.clone() };
            let z = reparameterize(&post, &eps);
            for i in 0..2 {
                for j in 0..4 {
                    let expect = mu[[i, j]] + (logvar[[i, j]] / 2.0).exp() * eps[[i, j]];
                    assert!((z[[i, j]] - expect).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn reparameterize_backward_matches_finite_differences() {
        let mut rng = derive_rng(7, "reparam-fd");
        let mu = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let logvar = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let dz = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let post = GaussianPosterior { mu: mu.clone(), logvar: logvar.clone() };
        let (dmu, dlogvar) = reparameterize_backward(&post, &eps, &dz);
        let h = 1e-6;
        for i in 0..mu.len() {
            let mut lp = logvar.clone();
            let mut lm = logvar.clone();
            lp.as_slice_mut().unwrap()[i] += h;
            lm.as_slice_mut().unwrap()[i] -= h;
            let zp = reparameterize(&GaussianPosterior { mu: mu.clone(), logvar: lp }, &eps);
            let zm = reparameterize(&GaussianPosterior { mu: mu.clone(), logvar: lm }, &eps);
            let fd = ((&zp - &zm).mapv(|v| v / (2.0 * h)) * &dz).sum();
            assert!((dlogvar.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
        assert_eq!(dmu, dz);
    }

    #[test]
    fn decoder_output_range_and_zero_style() {
        let mut rng = derive_rng(8, "dec");
        let d = dims();
        let dec = Decoder::new(&d, &arch(), &mut rng);
        let zs = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-2.0..2.0));
        let zc = Array2::from_shape_fn((3, 16), |_| rng.gen_range(-2.0..2.0));
        let y = dec.forward(&zs, &zc).unwrap();
        assert_eq!(y.dim(), (3, 1, 32, 32));
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // the style-free branch takes an all-zero code without error
        let y0 = dec.forward(&Array2::zeros((3, 8)), &zc).unwrap();
        assert_eq!(y0.dim(), (3, 1, 32, 32));
    }

    #[test]
    fn decoder_rejects_shape_mismatch() {
        let mut rng = derive_rng(8, "dec2");
        let dec = Decoder::new(&dims(), &arch(), &mut rng);
        let zs = Array2::<f64>::zeros((2, 8));
        let zc_bad = Array2::<f64>::zeros((2, 7));
        assert!(dec.forward(&zs, &zc_bad).is_err());
        let zc_n = Array2::<f64>::zeros((3, 16));
        assert!(dec.forward(&zs, &zc_n).is_err());
    }

    #[test]
    fn decoder_style_gradient_is_nonzero_and_matches_fd() {
        let mut rng = derive_rng(9, "dec-fd");
        let mut dec = Decoder::new(&dims(), &arch(), &mut rng);
        let zs = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
        let zc = Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = dec.forward_train(&zs, &zc).unwrap();
        let npix = y.len() as f64;
        let dy = Array4::from_elem(y.raw_dim(), 1.0 / npix); // d mean(y)
        let (dzs, dzc) = dec.backward(&cache, &dy);
        assert!(dzs.iter().any(|&v| v.abs() > 1e-12));
        assert!(dzc.iter().any(|&v| v.abs() > 1e-12));

        let h = 1e-5;
        for i in 0..zs.len() {
            let mut p = zs.clone();
            let mut m = zs.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fp = dec.forward(&p, &zc).unwrap().mean().unwrap();
            let fm = dec.forward(&m, &zc).unwrap().mean().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (dzs.as_slice().unwrap()[i] - fd).abs() < 1e-6,
                "dzs[{i}] {} vs {}",
                dzs.as_slice().unwrap()[i],
                fd
            );
        }
    }

    #[test]
    fn sn_shapes_zero_init_and_permutation() {
        let mut rng = derive_rng(10, "sn");
        let mut sn = StatisticsNetwork::new(&dims(), &arch(), &mut rng);
        let zc = Array2::from_shape_fn((8, 16), |_| rng.gen_range(-1.0..1.0));
        let zs = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let t = sn.forward(&zc, &zs).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|v| v.is_finite()));

        // permuting pair order permutes outputs identically
        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let zc_p = ndarray::stack(
            Axis(0),
            &perm.iter().map(|&i| zc.row(i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let zs_p = ndarray::stack(
            Axis(0),
            &perm.iter().map(|&i| zs.row(i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let t_p = sn.forward(&zc_p, &zs_p).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((t_p[j] - t[i]).abs() < 1e-12);
        }

        // zero-initialized final layer -> all scores zero
        let last = sn.fcs.len() - 1;
        sn.fcs[last].w.value.fill(0.0);
        sn.fcs[last].b.value.fill(0.0);
        let t0 = sn.forward(&zc, &zs).unwrap();
        assert!(t0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sn_rejects_batch_mismatch() {
        let mut rng = derive_rng(10, "sn2");
        let sn = StatisticsNetwork::new(&dims(), &arch(), &mut rng);
        let zc = Array2::<f64>::zeros((4, 16));
        let zs = Array2::<f64>::zeros((5, 8));
        assert!(sn.forward(&zc, &zs).is_err());
    }

    #[test]
    fn sn_input_gradients_match_fd_without_touching_params() {
        let mut rng = derive_rng(11, "sn-fd");
        let sn = StatisticsNetwork::new(&dims(), &arch(), &mut rng);
        let zc = Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0));
        let zs = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let dscores = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = sn.forward_train(&zc, &zs).unwrap();
        let (dzc, dzs) = sn.backward_inputs(&cache, &dscores);
        for p in sn.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0), "param grads must stay zero");
        }
        let h = 1e-6;
        let score = |sn: &StatisticsNetwork, zc: &Array2<f64>, zs: &Array2<f64>| {
            let t = sn.forward(zc, zs).unwrap();
            t.iter().zip(dscores.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..zs.len() {
            let mut p = zs.clone();
            let mut m = zs.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (score(&sn, &zc, &p) - score(&sn, &zc, &m)) / (2.0 * h);
            assert!((dzs.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
        for i in 0..zc.len() {
            let mut p = zc.clone();
            let mut m = zc.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (score(&sn, &p, &zs) - score(&sn, &m, &zs)) / (2.0 * h);
            assert!((dzc.as_slice().unwrap()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_head_backbone_param_gradients_match_fd() {
        // spot-check a handful of parameter coordinates in each model
        let mut rng = derive_rng(12, "full-fd");
        let d = dims();
        let a = arch();
        let x = random_images(2, 13);

        // backbone + head composite
        let mut bb = Backbone::new(&d, &a, &mut rng);
        let mut head = ProjectionHead::new(&d, &a, &mut rng);
        let dq = Array2::from_shape_fn((2, a.d_head), |_| rng.gen_range(-1.0..1.0));
        let (codes, bcache) = bb.forward_train(&x).unwrap();
        let (_, hcache) = head.forward_train(&codes);
        let dcodes = head.backward(&hcache, &dq);
        bb.backward(&bcache, &dcodes);

        let loss = |bb: &Backbone, head: &ProjectionHead| {
            let q = head.forward(&bb.forward(&x).unwrap());
            (&q * &dq).sum()
        };
        let h = 1e-5;

        // a few coordinates from the first conv and the head's final fc
        for idx in [0usize, 3, 7] {
            let g = bb.convs[0].w.grad.as_slice().unwrap()[idx];
            let orig = bb.convs[0].w.value.as_slice().unwrap()[idx];
            bb.convs[0].w.value.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&bb, &head);
            bb.convs[0].w.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&bb, &head);
            bb.convs[0].w.value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g - fd).abs() < 1e-5, "conv grad {g} vs fd {fd}");
        }
        for idx in [1usize, 5] {
            let g = head.fc2.w.grad.as_slice().unwrap()[idx];
            let orig = head.fc2.w.value.as_slice().unwrap()[idx];
            head.fc2.w.value.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&bb, &head);
            head.fc2.w.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&bb, &head);
            head.fc2.w.value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g - fd).abs() < 1e-5, "head grad {g} vs fd {fd}");
        }
    }

    #[test]
    fn all_maps_produce_finite_outputs() {
        let mut rng = derive_rng(14, "finite");
        let d = dims();
        let a = arch();
        let bb = Backbone::new(&d, &a, &mut rng);
        let head = ProjectionHead::new(&d, &a, &mut rng);
        let enc = CvaeEncoder::new(&d, &a, &mut rng);
        let dec = Decoder::new(&d, &a, &mut rng);
        let sn = StatisticsNetwork::new(&d, &a, &mut rng);

        let x = random_images(2, 15);
        let codes = bb.forward(&x).unwrap();
        assert!(codes.iter().all(|v| v.is_finite()));
        let q = head.forward(&codes);
        assert!(q.iter().all(|v| v.is_finite()));
        let post = enc.forward(&x).unwrap();
        assert!(post.mu.iter().all(|v| v.is_finite()));
        assert!(post.logvar.iter().all(|v| v.is_finite()));
        let eps = Array2::from_shape_fn(post.mu.raw_dim(), |_| rng.gen_range(-3.0..3.0));
        let z = reparameterize(&post, &eps);
        let y = dec.forward(&z, &codes).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let t = sn.forward(&codes, &z).unwrap();
        assert!(t.iter().all(|v| v.is_finite()));
    }
}
