//! Deterministic dataset persistence: fixed-stride binary blobs plus a
//! JSON manifest with content hashes.
//!
//! Blob layout (all integers little-endian):
//! `"SXBL" | version u32 | count u32 | side u32 | flags u32` followed by
//! `count` records of
//! `sample_id u32 | content_id u16 | reserved u16 | [7 x f64 factors] | side^2 x u8 pixels`.
//! The factor block is present iff flags bit 0 is set. Pixels are
//! `round(v * 255)` of the rendered [0, 1] intensities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::glyphs::{
    render_glyph, sample_style_factors, StyleFactors, BRIGHTNESS_RANGE, CONTRAST_RANGE,
    OFFSET_RANGE, SCALE_RANGE, SLANT_RANGE, THICKNESS_RANGE,
};
use crate::datasets::idx::load_idx;
use crate::error::{Result, StylexError};
use crate::rng::derive_rng;

const BLOB_MAGIC: &[u8; 4] = b"SXBL";
const BLOB_VERSION: u32 = 1;
const FLAG_HAS_FACTORS: u32 = 1;

pub const MANIFEST_FORMAT_VERSION: &str = "1";

/// Canvas side every model consumes; smaller sources are zero-padded.
pub const CANVAS_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn blob_name(&self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
    pub fn key(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub source: String,
    pub seed: u64,
    pub num_classes: u16,
    pub image_side: usize,
    pub counts: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factor_ranges: Option<BTreeMap<String, (f64, f64)>>,
    pub blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetBuildConfig {
    pub num_classes: u16,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_side() -> usize {
    CANVAS_SIDE
}

impl DatasetBuildConfig {
    pub fn validate(&self) -> Result<()> {
        // single-class datasets are degenerate but allowed
        if self.num_classes < 1 {
            return Err(StylexError::Config("num_classes must be >= 1".into()));
        }
        if self.num_classes as usize > crate::datasets::glyphs::MAX_CONTENT_ID as usize + 1 {
            return Err(StylexError::Config(format!(
                "num_classes {} exceeds supported {}",
                self.num_classes,
                crate::datasets::glyphs::MAX_CONTENT_ID as usize + 1
            )));
        }
        if self.train_count < 1 || self.test_count < 1 {
            return Err(StylexError::Config("split counts must be >= 1".into()));
        }
        if self.side < 16 {
            return Err(StylexError::Config("side must be >= 16".into()));
        }
        Ok(())
    }
}

/// One loaded split, images scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Array4<f64>, // (N, 1, side, side)
    pub labels: Vec<u16>,
    pub factors: Option<Vec<StyleFactors>>,
    pub num_classes: u16,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode_blob(samples: &[(u32, u16, Option<StyleFactors>, &Array3<f64>)], side: usize) -> Vec<u8> {
    let has_factors = samples.first().map(|s| s.2.is_some()).unwrap_or(false);
    let mut buf = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(side as u32).to_le_bytes());
    buf.extend_from_slice(&(if has_factors { FLAG_HAS_FACTORS } else { 0 }).to_le_bytes());
    for (sample_id, content_id, factors, image) in samples {
        buf.extend_from_slice(&sample_id.to_le_bytes());
        buf.extend_from_slice(&content_id.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        if let Some(f) = factors {
            for v in [
                f.slant,
                f.thickness,
                f.scale,
                f.offset_x,
                f.offset_y,
                f.brightness,
                f.contrast,
            ] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in image.iter() {
            buf.push(quantize(v));
        }
    }
    buf
}

fn decode_blob(data: &[u8], path: &Path) -> Result<LoadedSplit> {
    let fail = |reason: &str| StylexError::format(path, reason);
    if data.len() < 20 || &data[0..4] != BLOB_MAGIC {
        return Err(fail("not a sample blob (bad magic)"));
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
    let version = rd_u32(4);
    if version != BLOB_VERSION {
        return Err(fail(&format!("unsupported blob version {version}")));
    }
    let count = rd_u32(8) as usize;
    let side = rd_u32(12) as usize;
    let has_factors = rd_u32(16) & FLAG_HAS_FACTORS != 0;
    let factor_bytes = if has_factors { 56 } else { 0 };
    let stride = 8 + factor_bytes + side * side;
    if data.len() != 20 + count * stride {
        return Err(fail(&format!(
            "blob length {} does not match {count} samples of stride {stride}",
            data.len()
        )));
    }

    let mut images = Array4::<f64>::zeros((count, 1, side, side));
    let mut labels = Vec::with_capacity(count);
    let mut factors = has_factors.then(|| Vec::with_capacity(count));
    let mut max_label = 0u16;
    for i in 0..count {
        let base = 20 + i * stride;
        let content_id = u16::from_le_bytes(data[base + 4..base + 6].try_into().unwrap());
        max_label = max_label.max(content_id);
        labels.push(content_id);
        let mut off = base + 8;
        if has_factors {
            let mut vals = [0f64; 7];
            for v in vals.iter_mut() {
                *v = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
                off += 8;
            }
            factors.as_mut().unwrap().push(StyleFactors {
                slant: vals[0],
                thickness: vals[1],
                scale: vals[2],
                offset_x: vals[3],
                offset_y: vals[4],
                brightness: vals[5],
                contrast: vals[6],
            });
        }
        let pixels = side * side;
        let dst = &mut images.as_slice_mut().unwrap()[i * pixels..(i + 1) * pixels];
        for (d, &s) in dst.iter_mut().zip(&data[off..off + pixels]) {
            *d = s as f64 / 255.0;
        }
    }
    Ok(LoadedSplit {
        images,
        labels,
        factors,
        num_classes: max_label + 1,
    })
}

fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|e| StylexError::io(path, e))
}

fn factor_ranges() -> BTreeMap<String, (f64, f64)> {
    let mut m = BTreeMap::new();
    m.insert("slant".into(), SLANT_RANGE);
    m.insert("thickness".into(), THICKNESS_RANGE);
    m.insert("scale".into(), SCALE_RANGE);
    m.insert("offset_x".into(), OFFSET_RANGE);
    m.insert("offset_y".into(), OFFSET_RANGE);
    m.insert("brightness".into(), BRIGHTNESS_RANGE);
    m.insert("contrast".into(), CONTRAST_RANGE);
    m
}

/// Render both splits and persist them under `dir`. Content ids cycle
/// round-robin so every class is present whenever count >= num_classes;
/// style factors come from per-split derived streams. Re-running with the
/// same config produces byte-identical files.
pub fn build_dataset(config: &DatasetBuildConfig, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| StylexError::io(dir, e))?;

    let mut blobs = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut next_id = 0u32;
    for (split, count) in [
        (Split::Train, config.train_count),
        (Split::Test, config.test_count),
    ] {
        let mut rng = derive_rng(config.seed, &format!("dataset/{}", split.key()));
        let mut images = Vec::with_capacity(count);
        let mut meta = Vec::with_capacity(count);
        for i in 0..count {
            let content_id = (i % config.num_classes as usize) as u16;
            let style = sample_style_factors(&mut rng);
            let image = render_glyph(content_id, &style, config.side)?;
            meta.push((next_id, content_id, Some(style)));
            images.push(image);
            next_id += 1;
        }
        let records: Vec<_> = meta
            .iter()
            .zip(&images)
            .map(|(&(id, cid, f), img)| (id, cid, f, img))
            .collect();
        let blob = encode_blob(&records, config.side);
        let file = split.blob_name();
        write_file(&dir.join(file), &blob)?;
        blobs.insert(
            split.key().to_string(),
            BlobEntry {
                file: file.to_string(),
                sha256: sha256_hex(&blob),
            },
        );
        counts.insert(split.key().to_string(), count);
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION.to_string(),
        source: "synthetic".to_string(),
        seed: config.seed,
        num_classes: config.num_classes,
        image_side: config.side,
        counts,
        factor_ranges: Some(factor_ranges()),
        blobs,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Convert an MNIST IDX pair per split into the internal blob format,
/// zero-padding images up to the 32x32 canvas.
pub fn ingest_mnist(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| StylexError::io(dir, e))?;
    let mut blobs = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut next_id = 0u32;
    let mut num_classes = 0u16;
    for (split, img_path, lbl_path) in [
        (Split::Train, train_images, train_labels),
        (Split::Test, test_images, test_labels),
    ] {
        let (images, labels) = load_idx(img_path, lbl_path)?;
        let (n, _, h, w) = images.dim();
        if h > CANVAS_SIDE || w > CANVAS_SIDE {
            return Err(StylexError::format(
                img_path,
                format!("images {h}x{w} exceed the {CANVAS_SIDE}x{CANVAS_SIDE} canvas"),
            ));
        }
        let pad_top = (CANVAS_SIDE - h) / 2;
        let pad_left = (CANVAS_SIDE - w) / 2;
        let mut padded_store: Vec<Array3<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut canvas = Array3::<f64>::zeros((1, CANVAS_SIDE, CANVAS_SIDE));
            for y in 0..h {
                for x in 0..w {
                    canvas[[0, pad_top + y, pad_left + x]] = images[[i, 0, y, x]];
                }
            }
            padded_store.push(canvas);
        }
        let records: Vec<_> = padded_store
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let label = labels[i] as u16;
                num_classes = num_classes.max(label + 1);
                let rec = (next_id + i as u32, label, None, img);
                rec
            })
            .collect();
        next_id += n as u32;
        let blob = encode_blob(&records, CANVAS_SIDE);
        let file = split.blob_name();
        write_file(&dir.join(file), &blob)?;
        blobs.insert(
            split.key().to_string(),
            BlobEntry {
                file: file.to_string(),
                sha256: sha256_hex(&blob),
            },
        );
        counts.insert(split.key().to_string(), n);
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION.to_string(),
        source: "mnist".to_string(),
        seed: 0,
        num_classes,
        image_side: CANVAS_SIDE,
        counts,
        factor_ranges: None,
        blobs,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| StylexError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(StylexError::format(
            &path,
            format!(
                "manifest format_version {} unsupported (expected {MANIFEST_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Load one split, verifying the blob hash recorded in the manifest.
pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let manifest = read_manifest(dir)?;
    let entry = manifest.blobs.get(split.key()).ok_or_else(|| {
        StylexError::format(dir.join("manifest.json"), format!("missing split {}", split.key()))
    })?;
    let blob_path = dir.join(&entry.file);
    let data = fs::read(&blob_path).map_err(|e| StylexError::io(&blob_path, e))?;
    if sha256_hex(&data) != entry.sha256 {
        return Err(StylexError::format(
            &blob_path,
            "blob hash does not match manifest (corrupted or regenerated data)",
        ));
    }
    let mut loaded = decode_blob(&data, &blob_path)?;
    loaded.num_classes = loaded.num_classes.max(manifest.num_classes);
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::idx::{write_idx_images, write_idx_labels};

    fn build_config() -> DatasetBuildConfig {
        DatasetBuildConfig {
            num_classes: 10,
            train_count: 100,
            test_count: 20,
            seed: 7,
            side: 32,
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&build_config(), dir_a.path()).unwrap();
        let mb = build_dataset(&build_config(), dir_b.path()).unwrap();
        assert_eq!(ma, mb);
        for f in ["train.bin", "test.bin", "manifest.json"] {
            let a = fs::read(dir_a.path().join(f)).unwrap();
            let b = fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between identical builds");
        }
    }

    #[test]
    fn counts_and_class_coverage() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&build_config(), dir.path()).unwrap();
        let train = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 100);
        let mut seen = [false; 10];
        for &l in &train.labels {
            seen[l as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "all 10 classes present");
    }

    #[test]
    fn single_class_dataset_is_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetBuildConfig {
            num_classes: 1,
            train_count: 5,
            test_count: 2,
            ..build_config()
        };
        build_dataset(&config, dir.path()).unwrap();
        let train = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(train.num_classes, 1);
        assert!(train.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DatasetBuildConfig {
            num_classes: 0,
            ..build_config()
        }
        .validate()
        .is_err());
        assert!(DatasetBuildConfig {
            train_count: 0,
            ..build_config()
        }
        .validate()
        .is_err());
        assert!(DatasetBuildConfig {
            side: 8,
            ..build_config()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stored_factors_rerender_to_stored_pixels() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&build_config(), dir.path()).unwrap();
        let test = load_split(dir.path(), Split::Test).unwrap();
        let factors = test.factors.as_ref().unwrap();
        for i in 0..test.len() {
            let rendered = render_glyph(test.labels[i], &factors[i], 32).unwrap();
            for (y, x) in itertools_product(32, 32) {
                let stored = test.images[[i, 0, y, x]];
                let requant = quantize(rendered[[0, y, x]]) as f64 / 255.0;
                assert_eq!(stored, requant, "sample {i} pixel ({y},{x})");
            }
        }
    }

    fn itertools_product(a: usize, b: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..a).flat_map(move |y| (0..b).map(move |x| (y, x)))
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&build_config(), dir.path()).unwrap();
        let path = dir.path().join("test.bin");
        let mut data = fs::read(&path).unwrap();
        let last = data.len() - 1;
        data[last] ^= 0xff;
        fs::write(&path, &data).unwrap();
        let err = load_split(dir.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn mnist_ingestion_pads_to_canvas() {
        let dir = tempfile::tempdir().unwrap();
        let n = 6;
        let mut images = Array4::<f64>::zeros((n, 1, 28, 28));
        for i in 0..n {
            images[[i, 0, 14, 14]] = 1.0;
        }
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        fs::write(&ip, write_idx_images(&images)).unwrap();
        fs::write(&lp, write_idx_labels(&labels)).unwrap();

        let out = dir.path().join("data");
        let manifest = ingest_mnist(&ip, &lp, &ip, &lp, &out).unwrap();
        assert_eq!(manifest.source, "mnist");
        assert_eq!(manifest.image_side, 32);
        let train = load_split(&out, Split::Train).unwrap();
        assert_eq!(train.images.dim(), (n, 1, 32, 32));
        assert!(train.factors.is_none());
        // the lit center pixel lands at 14 + pad 2
        assert!(train.images[[0, 0, 16, 16]] > 0.99);
    }
}
