//! Signed Sobel derivative features.
//!
//! Each 28x28 image (pixels scaled to `[0,1]`) is cross-correlated with the two
//! 3x3 Sobel kernels to produce signed horizontal/vertical derivative maps,
//! each map is min-max normalized independently with an epsilon guard, and
//! the two channels are flattened channel-major into a 1568-dim vector.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::{LabeledImageSet, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Denominator guard for the per-channel min-max normalization.
pub const NORM_EPSILON: f32 = 1e-8;
/// Two derivative channels of a 28x28 image.
pub const FEATURE_DIM: usize = 2 * IMAGE_PIXELS;

/// Horizontal-derivative kernel: bright-right gives positive response.
pub const KERNEL_GX: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical-derivative kernel: bright-below gives positive response.
pub const KERNEL_GY: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Signed derivative maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub gx: Vec<f32>, // IMAGE_PIXELS, row-major
    pub gy: Vec<f32>,
}

/// Per-channel min-max scaled derivative maps, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEdgeMap {
    pub gx_hat: Vec<f32>,
    pub gy_hat: Vec<f32>,
}

/// Flattened model input: `[gx_hat row-major | gy_hat row-major]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>, // FEATURE_DIM
}

/// Gradient magnitude and orientation, for inspection only.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDiagnostics {
    pub magnitude: Vec<f32>,
    /// Radians in (-pi, pi]; 0 where both derivatives vanish.
    pub orientation: Vec<f32>,
}

/// Reflect-101 index: reflection that does not repeat the edge pixel
/// (-1 -> 1, n -> n-2).
#[inline]
fn reflect101(i: isize, n: isize) -> usize {
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

// The window sum runs in f64 so integer-weighted cancellations are exact: a
// constant image yields exactly zero and a unit step exactly +/-4.
fn correlate3x3(image: &[f32], side: usize, kernel: &[[f32; 3]; 3]) -> Vec<f32> {
    let n = side as isize;
    let mut out = vec![0.0f32; image.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0f64;
            for (dy, krow) in kernel.iter().enumerate() {
                let sy = reflect101(y + dy as isize - 1, n);
                for (dx, &kv) in krow.iter().enumerate() {
                    let sx = reflect101(x + dx as isize - 1, n);
                    acc += kv as f64 * image[sy * side + sx] as f64;
                }
            }
            out[(y * n + x) as usize] = acc as f32;
        }
    }
    out
}

fn check_finite(image: &[f32], side: usize) -> Result<()> {
    if let Some(pos) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput {
            row: pos / side,
            col: pos % side,
        });
    }
    Ok(())
}

/// Signed Sobel derivatives of a 28x28 image with reflect-101 borders.
pub fn sobel_derivatives(image: &[f32]) -> Result<GradientPair> {
    sobel_derivatives_sized(image, IMAGE_SIDE)
}

/// Same as [`sobel_derivatives`] for an arbitrary square side (tests use
/// small images to make hand computation practical).
pub fn sobel_derivatives_sized(image: &[f32], side: usize) -> Result<GradientPair> {
    if image.len() != side * side || side < 2 {
        return Err(Error::BadImageShape {
            expected: format!("{side}x{side}"),
            got: format!("{} pixels", image.len()),
        });
    }
    check_finite(image, side)?;
    Ok(GradientPair {
        gx: correlate3x3(image, side, &KERNEL_GX),
        gy: correlate3x3(image, side, &KERNEL_GY),
    })
}

/// `(v - min) / (max - min + epsilon)` with min/max taken over this channel.
/// The ratio is formed in f64 (epsilon is far below f32 resolution at
/// typical ranges) and stored as f32.
pub fn minmax_normalize(channel: &[f32], epsilon: f32) -> Vec<f32> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in channel {
        let v = v as f64;
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let denom = hi - lo + epsilon as f64;
    channel
        .iter()
        .map(|&v| ((v as f64 - lo) / denom) as f32)
        .collect()
}

pub fn normalize_pair(pair: &GradientPair) -> NormalizedEdgeMap {
    NormalizedEdgeMap {
        gx_hat: minmax_normalize(&pair.gx, NORM_EPSILON),
        gy_hat: minmax_normalize(&pair.gy, NORM_EPSILON),
    }
}

/// Full per-image pipeline: Sobel, per-channel min-max, channel-major flatten.
pub fn featurize(image: &[f32]) -> Result<FeatureVector> {
    let pair = sobel_derivatives(image)?;
    let map = normalize_pair(&pair);
    let mut values = Vec::with_capacity(FEATURE_DIM);
    values.extend_from_slice(&map.gx_hat);
    values.extend_from_slice(&map.gy_hat);
    Ok(FeatureVector { values })
}

/// Magnitude and four-quadrant orientation of a gradient pair.
pub fn gradient_diagnostics(pair: &GradientPair) -> EdgeDiagnostics {
    let mut magnitude = Vec::with_capacity(pair.gx.len());
    let mut orientation = Vec::with_capacity(pair.gx.len());
    for (&gx, &gy) in pair.gx.iter().zip(&pair.gy) {
        magnitude.push((gx * gx + gy * gy).sqrt());
        orientation.push(if gx == 0.0 && gy == 0.0 {
            0.0
        } else {
            gy.atan2(gx)
        });
    }
    EdgeDiagnostics {
        magnitude,
        orientation,
    }
}

/// A featurized dataset: one 1568-dim row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows and labels at the given indices.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Featurize every image of a set (u8 intensities are scaled by 1/255
/// first). Rows are written independently, so the result does not depend on
/// scheduling.
pub fn featurize_batch(set: &LabeledImageSet) -> Result<FeatureSet> {
    let n = set.len();
    let mut features = Matrix::zeros(n, FEATURE_DIM);
    let errors = std::sync::Mutex::new(Vec::<(usize, Error)>::new());

    crate::tensor::for_each_row_par(features.as_mut_slice(), FEATURE_DIM, |i, row| {
        let mut image = [0.0f32; IMAGE_PIXELS];
        for (dst, &px) in image.iter_mut().zip(set.image(i)) {
            *dst = px as f32 / 255.0;
        }
        match featurize(&image) {
            Ok(fv) => row.copy_from_slice(&fv.values),
            Err(e) => errors.lock().unwrap().push((i, e)),
        }
    });

    let mut errors = errors.into_inner().unwrap();
    if !errors.is_empty() {
        errors.sort_by_key(|(i, _)| *i);
        let (index, source) = errors.remove(0);
        return Err(Error::ImageError {
            index,
            source: Box::new(source),
        });
    }
    Ok(FeatureSet {
        features,
        labels: set.labels().to_vec(),
        class_count: set.class_count(),
    })
}

// ---- feature cache file ----
//
// Layout (little-endian):
//   magic   6 bytes  "EMFC1\0"
//   n       u32      row count
//   d       u32      feature dimension (always 1568)
//   classes u8
//   data    n * d * f32
//   labels  n * u8

const CACHE_MAGIC: &[u8; 6] = b"EMFC1\0";

pub fn write_feature_cache(path: &Path, set: &FeatureSet) -> Result<()> {
    if set.features.cols() != FEATURE_DIM {
        return Err(Error::CacheFormat(format!(
            "feature dimension {} (expected {FEATURE_DIM})",
            set.features.cols()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(set.len() as u32).to_le_bytes())?;
        w.write_all(&(FEATURE_DIM as u32).to_le_bytes())?;
        w.write_all(&[set.class_count as u8])?;
        for &v in set.features.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&set.labels)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path)?;
    if bytes.len() < CACHE_MAGIC.len() + 9 {
        return Err(Error::CacheFormat("file shorter than header".into()));
    }
    if &bytes[..6] != CACHE_MAGIC {
        return Err(Error::BadMagic {
            what: "feature cache",
        });
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let class_count = bytes[14] as usize;
    if d != FEATURE_DIM {
        return Err(Error::CacheFormat(format!(
            "feature dimension {d} (expected {FEATURE_DIM})"
        )));
    }
    let expected = 15 + n * d * 4 + n;
    if bytes.len() != expected {
        return Err(Error::CacheFormat(format!(
            "expected {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for chunk in bytes[15..15 + n * d * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let labels = bytes[15 + n * d * 4..].to_vec();
    if let Some((index, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= class_count)
    {
        return Err(Error::LabelOutOfRange {
            index,
            label: label as i64,
            class_count,
        });
    }
    Ok(FeatureSet {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        class_count,
    })
}
