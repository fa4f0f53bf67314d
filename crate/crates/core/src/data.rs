//! Dataset plumbing: manifests, image/mask loading, splitting, padding,
//! and a deterministic synthetic sample generator for desk-scale runs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm::read_pgm;
use crate::serialize::read_tensor_file;
use crate::tensor::Tensor;

/// One image/mask pair of a dataset listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Ordered dataset listing. An extent may be declared to assert that all
/// samples share it; entries themselves carry no size information.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub declared_extent: Option<(usize, usize)>,
}

/// Parse a manifest: one `image<TAB>mask` pair per line, `#` comments and
/// blank lines skipped, UTF-8 paths resolved relative to the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t').filter(|f| !f.is_empty());
        let (image, mask) = match (fields.next(), fields.next(), fields.next()) {
            (Some(i), Some(m), None) => (i, m),
            _ => {
                return Err(Error::Format(format!(
                    "{}: line {}: expected `image<TAB>mask`, got {line:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        if !seen.insert(image.to_string()) {
            return Err(Error::Format(format!(
                "{}: line {}: duplicate image path {image}",
                path.display(),
                lineno + 1
            )));
        }
        entries.push(ManifestEntry { image: base.join(image), mask: base.join(mask) });
    }
    Ok(Manifest { entries, declared_extent: None })
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load every entry, checking the declared extent when present.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        let mut samples = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let sample = load_sample(entry)?;
            if let Some((h, w)) = self.declared_extent {
                let [_, _, sh, sw] = sample.image.shape();
                if (sh, sw) != (h, w) {
                    return Err(Error::Format(format!(
                        "{}: extent {sh}x{sw} does not match declared {h}x{w}",
                        entry.image.display()
                    )));
                }
            }
            samples.push(sample);
        }
        Ok(samples)
    }
}

/// One preprocessed image/mask pair: the image normalized into [0, 1], the
/// mask strictly binary, both shaped (1, 1, h, w).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub source: String,
}

/// Load a raster as a (1, 1, h, w) float tensor. PGM pixel values are
/// scaled by 1/255; a raw tensor file (see the weight-file docs) is
/// accepted as-is for float inputs.
fn load_raster(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let img = read_pgm(path)?;
        let data: Vec<f32> = img.pixels.iter().map(|p| *p as f32 / 255.0).collect();
        Tensor::from_vec([1, 1, img.height, img.width], data)
    } else if bytes.starts_with(b"ULT1") {
        let (_, tensor) = read_tensor_file(path)?;
        Ok(tensor)
    } else {
        Err(Error::Format(format!(
            "{}: bad magic bytes, expected a P5 raster or ULT1 tensor",
            path.display()
        )))
    }
}

/// Load one image/mask pair. The image lands in [0, 1]; the mask must be
/// strictly two-valued ({0, 255} for PGM, {0.0, 1.0} for raw tensors) and
/// share the image's extent. Anything else fails loudly.
pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let image = load_raster(&entry.image)?;
    let mut mask = load_raster(&entry.mask)?;

    // PGM images land in [0, 1] by construction; float tensors must too
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!(
            "{}: image value {v} outside [0, 1]",
            entry.image.display()
        )));
    }
    if image.shape() != mask.shape() {
        return Err(Error::Format(format!(
            "{}: mask extent {:?} does not match image extent {:?}",
            entry.mask.display(),
            mask.shape(),
            image.shape()
        )));
    }
    // the PGM path scaled by 1/255, so a valid {0, 255} mask is now {0, 1/255 * 255}
    for v in mask.data_mut() {
        let unscaled = *v * 255.0;
        if (unscaled - 255.0).abs() < 1e-4 || (*v - 1.0).abs() < 1e-6 {
            *v = 1.0;
        } else if *v == 0.0 {
            // stays 0
        } else {
            return Err(Error::Format(format!(
                "{}: nonbinary mask value {}",
                entry.mask.display(),
                unscaled.round()
            )));
        }
    }

    Ok(Sample { image, mask, source: entry.image.display().to_string() })
}

/// Standardize a tensor in place to zero mean and unit variance. Optional
/// alternative to the default 1/255 scaling; the result leaves [0, 1].
pub fn zscore(t: &mut Tensor) {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    for v in t.data_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

/// Seeded shuffle followed by a contiguous three-way partition. The val and
/// test sizes are the fractions rounded to nearest; train takes the
/// remainder. Partitions are disjoint and exhaustive.
pub fn split(
    samples: Vec<Sample>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if fractions.iter().any(|f| *f <= 0.0) {
        return Err(Error::Usage(format!("fractions must be positive, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("fractions must sum to 1, got {sum}")));
    }
    let n = samples.len();
    if n < 3 {
        return Err(Error::Usage(format!("cannot split {n} samples into 3 partitions")));
    }

    let mut shuffled = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = (n as f64 * fractions[2]).round() as usize;
    let n_train = n - n_val - n_test;

    let mut rest = shuffled.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok((shuffled, rest, test))
}

/// Seeded shuffle plus two-way partition; `val_fraction` of the samples
/// (rounded to nearest) go to validation.
pub fn split_train_val(
    samples: Vec<Sample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Usage(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut shuffled = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * val_fraction).round() as usize;
    let n_train = shuffled.len() - n_val;
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

/// Padding applied to reach a divisible extent, and how to undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_padded(&self) -> bool {
        self.pad_bottom != 0 || self.pad_right != 0
    }
}

/// Zero-pad the bottom/right of every plane so both spatial extents become
/// multiples of `m`. Already-divisible inputs come back unchanged (with a
/// zero-padding record).
pub fn pad_to_multiple(t: &Tensor, m: usize) -> (Tensor, CropRecord) {
    assert!(m >= 1, "padding multiple must be >= 1");
    let [n, c, h, w] = t.shape();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let record = CropRecord { orig_h: h, orig_w: w, pad_bottom: ph - h, pad_right: pw - w };
    if !record.is_padded() {
        return (t.clone(), record);
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                let src = t.offset(ni, ci, i, 0);
                let dst = out.offset(ni, ci, i, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
            }
        }
    }
    (out, record)
}

/// Crop a padded tensor back to the recorded original extent. The channel
/// count may differ from the tensor originally padded (model outputs are
/// cropped with the input's record).
pub fn crop_back(t: &Tensor, record: &CropRecord) -> Tensor {
    let [n, c, h, w] = t.shape();
    assert_eq!(
        (h, w),
        (record.orig_h + record.pad_bottom, record.orig_w + record.pad_right),
        "crop_back: tensor extent does not match the crop record"
    );
    if !record.is_padded() {
        return t.clone();
    }
    let mut out = Tensor::zeros([n, c, record.orig_h, record.orig_w]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..record.orig_h {
                let src = t.offset(ni, ci, i, 0);
                let dst = out.offset(ni, ci, i, 0);
                out.data_mut()[dst..dst + record.orig_w]
                    .copy_from_slice(&t.data()[src..src + record.orig_w]);
            }
        }
    }
    out
}

/// Stack single-image samples into one (n, 1, h, w) image batch and mask
/// batch. All samples must share their extents.
pub fn stack_samples(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot stack an empty batch".to_string()));
    }
    let [_, c, h, w] = samples[0].image.shape();
    let mut images = Tensor::zeros([samples.len(), c, h, w]);
    let mut masks = Tensor::zeros([samples.len(), c, h, w]);
    let stride = c * h * w;
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != [1, c, h, w] {
            return Err(Error::Config(format!(
                "batching requires uniform extents: {} is {:?}, expected {:?}",
                s.source,
                s.image.shape(),
                [1, c, h, w]
            )));
        }
        images.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(s.image.data());
        masks.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(s.mask.data());
    }
    Ok((images, masks))
}

/// Generate `n` synthetic samples of `size` x `size` pixels: a smooth noise
/// background plus one bright filled ellipse; the mask is the ellipse.
/// Deterministic in `seed`. `size` must be divisible by 16 and `n` >= 1.
pub fn make_synthetic(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    assert!(n >= 1, "need at least one sample");
    assert!(size >= 16 && size % 16 == 0, "size must be a positive multiple of 16");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let cell = 8;
    let grid = size / cell + 1;

    for idx in 0..n {
        // smooth background: bilinear interpolation of a coarse noise grid
        let coarse: Vec<f32> = (0..grid * grid).map(|_| 0.05 + 0.35 * rng.gen::<f32>()).collect();

        let s = size as f32;
        let cx = s * (0.30 + 0.40 * rng.gen::<f32>());
        let cy = s * (0.30 + 0.40 * rng.gen::<f32>());
        let ax = s * (0.09 + 0.13 * rng.gen::<f32>());
        let ay = s * (0.09 + 0.13 * rng.gen::<f32>());

        let mut image = Tensor::zeros([1, 1, size, size]);
        let mut mask = Tensor::zeros([1, 1, size, size]);
        for i in 0..size {
            for j in 0..size {
                let (gi, gj) = (i / cell, j / cell);
                let (fi, fj) = ((i % cell) as f32 / cell as f32, (j % cell) as f32 / cell as f32);
                let g00 = coarse[gi * grid + gj];
                let g01 = coarse[gi * grid + gj + 1];
                let g10 = coarse[(gi + 1) * grid + gj];
                let g11 = coarse[(gi + 1) * grid + gj + 1];
                let bg = g00 * (1.0 - fi) * (1.0 - fj)
                    + g01 * (1.0 - fi) * fj
                    + g10 * fi * (1.0 - fj)
                    + g11 * fi * fj;

                let dx = (j as f32 + 0.5 - cx) / ax;
                let dy = (i as f32 + 0.5 - cy) / ay;
                let inside = dx * dx + dy * dy <= 1.0;

                let noise = 0.06 * rng.gen::<f32>() - 0.03;
                let value = (bg + noise + if inside { 0.45 } else { 0.0 }).clamp(0.0, 1.0);
                image.set(0, 0, i, j, value);
                if inside {
                    mask.set(0, 0, i, j, 1.0);
                }
            }
        }
        samples.push(Sample { image, mask, source: format!("synth-{idx}") });
    }
    samples
}
