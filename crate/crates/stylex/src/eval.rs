//! Evaluation: the four qualitative figure grids plus quantitative
//! linear probes over the synthetic ground-truth style factors.
//!
//! Every path here is read-only over the trained models and uses the
//! posterior mean (never a sample), so two invocations emit identical
//! bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::config::RunConfig;
use crate::cvae::ConditionSource;
use crate::datasets::glyphs::StyleFactors;
use crate::datasets::store::LoadedSplit;
use crate::error::{Result, StylexError};
use crate::models::{CvaeEncoder, Decoder};
use crate::rng::derive_rng;

pub const DA_REMOVAL_FILE: &str = "da_removal.png";
pub const INTERP_FILE: &str = "interp.png";
pub const STYLE_TRANSFER_FILE: &str = "style_transfer.png";
pub const NEIGHBORS_FILE: &str = "neighbors.png";
pub const PROBE_REPORT_FILE: &str = "probe_report.json";

/// Quantitative probe results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    /// Held-out R^2 of each style factor regressed from z_style; absent
    /// for datasets without ground-truth factors.
    pub style_r2: Option<BTreeMap<String, f64>>,
    pub content_from_style_accuracy: f64,
    pub content_from_content_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// Posterior-mean reconstruction and its style-free counterpart D(0, z_content).
pub fn style_free_reconstruction(
    x_batch: &Array4<f64>,
    labels: &[u16],
    condition: &ConditionSource,
    encoder: &CvaeEncoder,
    decoder: &Decoder,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let z_content = condition.codes(x_batch, labels)?;
    let post = encoder.forward(x_batch)?;
    let recon = decoder.forward(&post.mu, &z_content)?;
    let zeros = Array2::zeros(post.mu.raw_dim());
    let style_free = decoder.forward(&zeros, &z_content)?;
    Ok((recon, style_free))
}

/// grid[m][r] = D(radii[r] * direction, contents[m]).
pub fn conditional_generation_grid(
    contents: &Array2<f64>,
    direction: &Array1<f64>,
    radii: &[f64],
    decoder: &Decoder,
) -> Result<Vec<Vec<Array3<f64>>>> {
    let norm = direction.dot(direction).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(StylexError::Contract(format!(
            "interpolation direction must be unit-norm, got {norm}"
        )));
    }
    let m = contents.nrows();
    let mut grid = Vec::with_capacity(m);
    for i in 0..m {
        let content = contents.row(i).to_owned().insert_axis(Axis(0));
        let mut row = Vec::with_capacity(radii.len());
        for &r in radii {
            let z = direction.mapv(|v| v * r).insert_axis(Axis(0));
            let img = decoder.forward(&z, &content)?;
            row.push(img.index_axis(Axis(0), 0).to_owned());
        }
        grid.push(row);
    }
    Ok(grid)
}

/// Symmetric interpolation radii over [-radius, radius], centered on 0
/// when `steps` is odd.
pub fn interpolation_radii(radius: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    // mirrored construction keeps the grid exactly antisymmetric
    let half = steps / 2;
    let mut out = vec![0.0; steps];
    for i in 0..half {
        let v = radius * (1.0 - i as f64 / half as f64);
        out[i] = -v;
        out[steps - 1 - i] = v;
    }
    out
}

/// Style-transfer grid of (M+1) x (P+1) cells.
///
/// Column 0 is the "self" column: header blank, then the self-transfer
/// D(E_mu(x_m), f(x_m)) of each content source. Columns 1..=P hold the
/// destination thumbnail on top and the transfers D(E_mu(dst_p), f(src_m))
/// below. `None` cells render as blank tiles.
pub fn style_transfer_grid(
    content_sources: &Array4<f64>,
    source_labels: &[u16],
    style_destinations: &Array4<f64>,
    condition: &ConditionSource,
    encoder: &CvaeEncoder,
    decoder: &Decoder,
) -> Result<Vec<Vec<Option<Array3<f64>>>>> {
    let m = content_sources.dim().0;
    let p = style_destinations.dim().0;
    let src_content = condition.codes(content_sources, source_labels)?;
    let src_style = encoder.forward(content_sources)?.mu;
    let dst_style = encoder.forward(style_destinations)?.mu;

    let mut grid: Vec<Vec<Option<Array3<f64>>>> = Vec::with_capacity(m + 1);
    let mut header: Vec<Option<Array3<f64>>> = Vec::with_capacity(p + 1);
    header.push(None); // over the self column
    for j in 0..p {
        header.push(Some(
            style_destinations.index_axis(Axis(0), j).to_owned(),
        ));
    }
    grid.push(header);

    for i in 0..m {
        let mut row = Vec::with_capacity(p + 1);
        let content = src_content.row(i).to_owned().insert_axis(Axis(0));
        let self_style = src_style.row(i).to_owned().insert_axis(Axis(0));
        let self_cell = decoder.forward(&self_style, &content)?;
        row.push(Some(self_cell.index_axis(Axis(0), 0).to_owned()));
        for j in 0..p {
            let style = dst_style.row(j).to_owned().insert_axis(Axis(0));
            let cell = decoder.forward(&style, &content)?;
            row.push(Some(cell.index_axis(Axis(0), 0).to_owned()));
        }
        grid.push(row);
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborMetric {
    Euclidean,
    Cosine,
}

impl NeighborMetric {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(NeighborMetric::Euclidean),
            "cosine" => Ok(NeighborMetric::Cosine),
            other => Err(StylexError::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// k nearest gallery rows to the anchor, anchor excluded, ties broken by
/// ascending index.
pub fn neighbor_query(
    anchor_index: usize,
    gallery: &Array2<f64>,
    metric: NeighborMetric,
    k: usize,
) -> Result<Vec<usize>> {
    let n = gallery.nrows();
    if anchor_index >= n {
        return Err(StylexError::Contract(format!(
            "anchor {anchor_index} outside gallery of {n}"
        )));
    }
    if k == 0 || k > n - 1 {
        return Err(StylexError::Contract(format!(
            "k = {k} invalid for gallery of {n} (need 1 <= k <= {})",
            n - 1
        )));
    }
    let anchor = gallery.row(anchor_index);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != anchor_index)
        .map(|i| {
            let row = gallery.row(i);
            let d = match metric {
                NeighborMetric::Euclidean => {
                    let mut acc = 0.0;
                    for (a, b) in anchor.iter().zip(row.iter()) {
                        acc += (a - b) * (a - b);
                    }
                    acc.sqrt()
                }
                NeighborMetric::Cosine => {
                    let na = anchor.dot(&anchor).sqrt();
                    let nb = row.dot(&row).sqrt();
                    1.0 - anchor.dot(&row) / (na * nb + 1e-12)
                }
            };
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

/// Solve a s.p.d. system by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[[row, col]].abs() > a[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a[[col, j]];
                a[[col, j]] = a[[pivot, j]];
                a[[pivot, j]] = tmp;
            }
            b.swap(col, pivot);
        }
        let p = a[[col, col]];
        for row in (col + 1)..n {
            let factor = a[[row, col]] / p;
            for j in col..n {
                a[[row, j]] -= factor * a[[col, j]];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in (row + 1)..n {
            acc -= a[[row, j]] * x[j];
        }
        x[row] = acc / a[[row, row]];
    }
    x
}

fn with_bias(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(x);
    out
}

/// Ridge least squares (epsilon 1e-6) from codes to a scalar target;
/// returns held-out R^2 = 1 - SSE/SST with SST about the test mean.
pub fn regression_r2(
    train_codes: &Array2<f64>,
    train_targets: &Array1<f64>,
    test_codes: &Array2<f64>,
    test_targets: &Array1<f64>,
) -> f64 {
    let x = with_bias(train_codes);
    let d = x.ncols();
    let mut xtx = x.t().dot(&x);
    for i in 0..d {
        xtx[[i, i]] += 1e-6;
    }
    let xty = x.t().dot(train_targets);
    let beta = solve_linear(xtx, xty);

    let xt = with_bias(test_codes);
    let pred = xt.dot(&beta);
    let mean = test_targets.mean().unwrap_or(0.0);
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (p, t) in pred.iter().zip(test_targets.iter()) {
        sse += (p - t) * (p - t);
        sst += (t - mean) * (t - mean);
    }
    if sst <= 0.0 {
        return if sse <= 1e-18 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

pub const FACTOR_NAMES: [&str; 7] = [
    "slant",
    "thickness",
    "scale",
    "offset_x",
    "offset_y",
    "brightness",
    "contrast",
];

pub fn factor_values(factors: &[StyleFactors], name: &str) -> Array1<f64> {
    Array1::from_iter(factors.iter().map(|f| match name {
        "slant" => f.slant,
        "thickness" => f.thickness,
        "scale" => f.scale,
        "offset_x" => f.offset_x,
        "offset_y" => f.offset_y,
        "brightness" => f.brightness,
        "contrast" => f.contrast,
        other => unreachable!("unknown factor {other}"),
    }))
}

/// Per-factor held-out R^2 from style codes.
pub fn style_probe(
    train_codes: &Array2<f64>,
    train_factors: &[StyleFactors],
    test_codes: &Array2<f64>,
    test_factors: &[StyleFactors],
) -> Result<BTreeMap<String, f64>> {
    if train_codes.nrows() != train_factors.len() || test_codes.nrows() != test_factors.len() {
        return Err(StylexError::Contract(
            "style probe: codes and factors must align".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for name in FACTOR_NAMES {
        let r2 = regression_r2(
            train_codes,
            &factor_values(train_factors, name),
            test_codes,
            &factor_values(test_factors, name),
        );
        out.insert(name.to_string(), r2);
    }
    Ok(out)
}

/// Multinomial logistic probe trained by full-batch gradient descent with
/// momentum until the loss change falls below 1e-5; returns held-out
/// accuracy. Features are standardized with train statistics.
pub fn content_probe(
    train_codes: &Array2<f64>,
    train_labels: &[u16],
    test_codes: &Array2<f64>,
    test_labels: &[u16],
    num_classes: u16,
) -> Result<f64> {
    if num_classes < 2 {
        return Err(StylexError::Contract(
            "content probe needs at least 2 classes".into(),
        ));
    }
    if train_codes.nrows() != train_labels.len() || test_codes.nrows() != test_labels.len() {
        return Err(StylexError::Contract(
            "content probe: codes and labels must align".into(),
        ));
    }
    let d = train_codes.ncols();
    let n = train_codes.nrows();
    let c = num_classes as usize;

    // standardize with train statistics; zero-variance features drop out
    let mean = train_codes.mean_axis(Axis(0)).unwrap();
    let mut std = Array1::zeros(d);
    for j in 0..d {
        let col = train_codes.index_axis(Axis(1), j);
        let var = col.iter().map(|v| (v - mean[j]) * (v - mean[j])).sum::<f64>() / n as f64;
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 0.0 };
    }
    let normalize = |codes: &Array2<f64>| {
        let mut out = codes.clone();
        for mut row in out.rows_mut() {
            for j in 0..d {
                row[j] = if std[j] > 0.0 {
                    (row[j] - mean[j]) / std[j]
                } else {
                    0.0
                };
            }
        }
        with_bias(&out)
    };
    let x = normalize(train_codes);
    let xt = normalize(test_codes);

    let mut w = Array2::<f64>::zeros((c, d + 1));
    let mut velocity = Array2::<f64>::zeros((c, d + 1));
    let lr = 2.0 / (d as f64 + 2.0);
    let beta = 0.9;
    let mut prev_loss = f64::INFINITY;
    for _ in 0..5000 {
        let logits = x.dot(&w.t()); // (n, c)
        let mut loss = 0.0;
        let mut grad_logits = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let label = train_labels[i] as usize;
            loss += -(logits[[i, label]] - m - z.ln());
            for j in 0..c {
                let p = (logits[[i, j]] - m).exp() / z;
                grad_logits[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;
        let grad = grad_logits.t().dot(&x); // (c, d+1)
        velocity.zip_mut_with(&grad, |v, &g| *v = beta * *v + g);
        w.scaled_add(-lr, &velocity);
        if (prev_loss - loss).abs() < 1e-5 {
            break;
        }
        prev_loss = loss;
    }

    let logits = xt.dot(&w.t());
    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Batched encoding helpers
// ---------------------------------------------------------------------------

const EVAL_CHUNK: usize = 256;

pub fn encode_style_means(encoder: &CvaeEncoder, images: &Array4<f64>) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let mut out = Array2::zeros((n, encoder.d_style));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = images.slice(s![start..end, .., .., ..]).to_owned();
        let post = encoder.forward(&chunk)?;
        out.slice_mut(s![start..end, ..]).assign(&post.mu);
        start = end;
    }
    Ok(out)
}

pub fn encode_content_codes(
    condition: &ConditionSource,
    images: &Array4<f64>,
    labels: &[u16],
) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let mut out = Array2::zeros((n, condition.d_content()));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = images.slice(s![start..end, .., .., ..]).to_owned();
        let codes = condition.codes(&chunk, &labels[start..end])?;
        out.slice_mut(s![start..end, ..]).assign(&codes);
        start = end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PNG tiling
// ---------------------------------------------------------------------------

const GUTTER: usize = 2;

/// Tile cells row-major with 2-px white gutters; None cells stay white.
pub fn tile_grid(cells: &[Vec<Option<Array3<f64>>>], side: usize) -> image::GrayImage {
    let rows = cells.len();
    let cols = cells.iter().map(|r| r.len()).max().unwrap_or(0);
    let width = (cols * (side + GUTTER) + GUTTER) as u32;
    let height = (rows * (side + GUTTER) + GUTTER) as u32;
    let mut img = image::GrayImage::from_pixel(width, height, image::Luma([255u8]));
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some(tile) = cell {
                let x0 = (GUTTER + c * (side + GUTTER)) as u32;
                let y0 = (GUTTER + r * (side + GUTTER)) as u32;
                for y in 0..side {
                    for x in 0..side {
                        let v = (tile[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                        img.put_pixel(x0 + x as u32, y0 + y as u32, image::Luma([v]));
                    }
                }
            }
        }
    }
    img
}

pub fn save_png(img: &image::GrayImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StylexError::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| StylexError::Serde(format!("PNG encode {}: {e}", path.display())))
}

fn to_tiles(batch: &Array4<f64>) -> Vec<Option<Array3<f64>>> {
    (0..batch.dim().0)
        .map(|i| Some(batch.index_axis(Axis(0), i).to_owned()))
        .collect()
}

// ---------------------------------------------------------------------------
// Figure runners
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    DaRemoval,
    Interp,
    StyleTransfer,
    Neighbors,
    Probe,
}

pub const EXPERIMENT_NAMES: [&str; 5] =
    ["da_removal", "interp", "style_transfer", "neighbors", "probe"];

impl Experiment {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "da_removal" => Ok(Experiment::DaRemoval),
            "interp" => Ok(Experiment::Interp),
            "style_transfer" => Ok(Experiment::StyleTransfer),
            "neighbors" => Ok(Experiment::Neighbors),
            "probe" => Ok(Experiment::Probe),
            other => Err(StylexError::Config(format!(
                "unknown experiment {other:?}; valid names: {}",
                EXPERIMENT_NAMES.join(", ")
            ))),
        }
    }

    pub fn all() -> Vec<Experiment> {
        vec![
            Experiment::DaRemoval,
            Experiment::Interp,
            Experiment::StyleTransfer,
            Experiment::Neighbors,
            Experiment::Probe,
        ]
    }
}

pub struct EvalContext<'a> {
    pub condition: &'a ConditionSource,
    pub encoder: &'a CvaeEncoder,
    pub decoder: &'a Decoder,
    pub config: &'a RunConfig,
}

/// Rows: input, augmented input, reconstruction, style-free reconstruction.
pub fn run_da_removal(ctx: &EvalContext, test: &LoadedSplit, out: &Path) -> Result<PathBuf> {
    let n = ctx.config.eval.da_examples.min(test.len());
    let x = test.images.slice(s![..n, .., .., ..]).to_owned();
    let labels = &test.labels[..n];
    let mut rng = derive_rng(ctx.config.seed, "eval/da_removal");
    let mut augmented = x.clone();
    for i in 0..n {
        let img = x
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let aug = augment(&img, &ctx.config.augment, &mut rng);
        augmented.index_axis_mut(Axis(0), i).assign(&aug);
    }
    let (recon, style_free) =
        style_free_reconstruction(&augmented, labels, ctx.condition, ctx.encoder, ctx.decoder)?;
    let cells = vec![
        to_tiles(&x),
        to_tiles(&augmented),
        to_tiles(&recon),
        to_tiles(&style_free),
    ];
    let img = tile_grid(&cells, ctx.config.model.image_side);
    let path = out.join(DA_REMOVAL_FILE);
    save_png(&img, &path)?;
    Ok(path)
}

/// Rows: test contents; columns: style codes along a random unit
/// direction with radii spanning [-r, r].
pub fn run_interp(ctx: &EvalContext, test: &LoadedSplit, out: &Path) -> Result<PathBuf> {
    let m = ctx.config.eval.interp_rows.min(test.len());
    let x = test.images.slice(s![..m, .., .., ..]).to_owned();
    let contents = encode_content_codes(ctx.condition, &x, &test.labels[..m])?;
    let mut rng = derive_rng(ctx.config.seed, "eval/interp");
    let mut direction = crate::cvae::sample_marginal_style(1, ctx.encoder.d_style, &mut rng)
        .index_axis(Axis(0), 0)
        .to_owned();
    let norm = direction.dot(&direction).sqrt();
    direction.mapv_inplace(|v| v / norm);
    let radii = interpolation_radii(ctx.config.eval.interp_radius, ctx.config.eval.interp_steps);
    let grid = conditional_generation_grid(&contents, &direction, &radii, ctx.decoder)?;
    let cells: Vec<Vec<Option<Array3<f64>>>> = grid
        .into_iter()
        .map(|row| row.into_iter().map(Some).collect())
        .collect();
    let img = tile_grid(&cells, ctx.config.model.image_side);
    let path = out.join(INTERP_FILE);
    save_png(&img, &path)?;
    Ok(path)
}

pub fn run_style_transfer(ctx: &EvalContext, test: &LoadedSplit, out: &Path) -> Result<PathBuf> {
    let m = ctx.config.eval.transfer_sources.min(test.len());
    let p = ctx
        .config
        .eval
        .transfer_destinations
        .min(test.len().saturating_sub(m));
    if p == 0 {
        return Err(StylexError::Contract(
            "style transfer needs destination images beyond the sources".into(),
        ));
    }
    let sources = test.images.slice(s![..m, .., .., ..]).to_owned();
    let dests = test.images.slice(s![m..m + p, .., .., ..]).to_owned();
    let grid = style_transfer_grid(
        &sources,
        &test.labels[..m],
        &dests,
        ctx.condition,
        ctx.encoder,
        ctx.decoder,
    )?;
    let img = tile_grid(&grid, ctx.config.model.image_side);
    let path = out.join(STYLE_TRANSFER_FILE);
    save_png(&img, &path)?;
    Ok(path)
}

/// Two blocks: anchors with their nearest test images by z_style, then by
/// z_content, separated by a blank row.
pub fn run_neighbors(ctx: &EvalContext, test: &LoadedSplit, out: &Path) -> Result<PathBuf> {
    let n = test.len();
    let anchors = ctx.config.eval.neighbor_anchors.min(n);
    let k = ctx.config.eval.neighbor_k.min(n.saturating_sub(1));
    if k == 0 {
        return Err(StylexError::Contract("gallery too small for neighbors".into()));
    }
    let style_codes = encode_style_means(ctx.encoder, &test.images)?;
    let content_codes = encode_content_codes(ctx.condition, &test.images, &test.labels)?;
    let content_metric = NeighborMetric::from_str(&ctx.config.eval.neighbor_metric)?;

    let tile_of = |i: usize| -> Option<Array3<f64>> {
        Some(test.images.index_axis(Axis(0), i).to_owned())
    };
    let mut cells: Vec<Vec<Option<Array3<f64>>>> = Vec::new();
    for (codes, metric) in [
        (&style_codes, NeighborMetric::Euclidean),
        (&content_codes, content_metric),
    ] {
        for a in 0..anchors {
            let anchor_index = a * (n / anchors.max(1)).max(1);
            let ranked = neighbor_query(anchor_index, codes, metric, k)?;
            let mut row = Vec::with_capacity(k + 2);
            row.push(tile_of(anchor_index));
            row.push(None); // gap between anchor and neighbors
            for i in ranked {
                row.push(tile_of(i));
            }
            cells.push(row);
        }
        cells.push(vec![None; k + 2]); // blank separator row
    }
    cells.pop();
    let img = tile_grid(&cells, ctx.config.model.image_side);
    let path = out.join(NEIGHBORS_FILE);
    save_png(&img, &path)?;
    Ok(path)
}

/// Fit probes on train codes, evaluate on test codes, write the JSON report.
pub fn run_probe(
    ctx: &EvalContext,
    train: &LoadedSplit,
    test: &LoadedSplit,
    out: &Path,
) -> Result<(ProbeReport, PathBuf)> {
    let report = compute_probe_report(ctx, train, test)?;
    let path = out.join(PROBE_REPORT_FILE);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StylexError::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, json).map_err(|e| StylexError::io(&path, e))?;
    Ok((report, path))
}

pub fn compute_probe_report(
    ctx: &EvalContext,
    train: &LoadedSplit,
    test: &LoadedSplit,
) -> Result<ProbeReport> {
    let train_style = encode_style_means(ctx.encoder, &train.images)?;
    let test_style = encode_style_means(ctx.encoder, &test.images)?;
    let train_content = encode_content_codes(ctx.condition, &train.images, &train.labels)?;
    let test_content = encode_content_codes(ctx.condition, &test.images, &test.labels)?;

    let style_r2 = match (&train.factors, &test.factors) {
        (Some(tf), Some(sf)) => Some(style_probe(&train_style, tf, &test_style, sf)?),
        _ => None,
    };
    let content_from_style = content_probe(
        &train_style,
        &train.labels,
        &test_style,
        &test.labels,
        train.num_classes,
    )?;
    let content_from_content = content_probe(
        &train_content,
        &train.labels,
        &test_content,
        &test.labels,
        train.num_classes,
    )?;
    Ok(ProbeReport {
        style_r2,
        content_from_style_accuracy: content_from_style,
        content_from_content_accuracy: content_from_content,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}
