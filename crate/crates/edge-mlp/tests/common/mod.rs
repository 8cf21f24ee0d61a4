//! Shared helpers for the integration and acceptance suites: a synthetic
//! glyph generator, dataset discovery, and independent numeric oracles.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use edge_mlp::dataset::{DatasetName, LabeledImageSet, IMAGE_PIXELS, IMAGE_SIDE};
use edge_mlp::edge::{KERNEL_GX, KERNEL_GY};
use edge_mlp::model::{MlpConfig, Model};
use edge_mlp::rng::Rng;

/// Synthetic stroke glyphs: class `c` is a thick line through the image
/// center at angle `c * pi / class_count`, with jittered position, intensity,
/// and background noise. Edge maps separate the classes cleanly.
pub fn synthetic_glyphs(per_class: usize, class_count: usize, seed: u64) -> LabeledImageSet {
    assert!(class_count >= 1);
    let mut rng = Rng::new(seed);
    let n = per_class * class_count;
    let mut images = vec![0u8; n * IMAGE_PIXELS];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let class = i % class_count;
        labels[i] = class as u8;
        let img = &mut images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        for px in img.iter_mut() {
            *px = rng.next_below(26) as u8; // background noise
        }
        let angle = class as f64 * std::f64::consts::PI / class_count as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let cx = 14.0 + rng.uniform(-3.0, 3.0).unwrap() as f64;
        let cy = 14.0 + rng.uniform(-3.0, 3.0).unwrap() as f64;
        let ink = 200 + rng.next_below(56) as u8;
        let mut t = -9.0f64;
        while t <= 9.0 {
            let x = cx + t * dx;
            let y = cy + t * dy;
            for ox in -1..=1i64 {
                for oy in -1..=1i64 {
                    let px = x.round() as i64 + ox;
                    let py = y.round() as i64 + oy;
                    if (0..IMAGE_SIDE as i64).contains(&px) && (0..IMAGE_SIDE as i64).contains(&py)
                    {
                        img[py as usize * IMAGE_SIDE + px as usize] = ink;
                    }
                }
            }
            t += 0.5;
        }
    }
    LabeledImageSet::new(images, labels, class_count, "synthetic_glyphs").unwrap()
}

/// Balanced set of flat images; only the sizes and labels matter.
pub fn balanced_placeholder(class_count: usize, per_class: usize) -> LabeledImageSet {
    let n = class_count * per_class;
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push((i % class_count) as u8);
        images.extend(std::iter::repeat_n((i % 251) as u8, IMAGE_PIXELS));
    }
    LabeledImageSet::new(images, labels, class_count, "placeholder").unwrap()
}

/// Where real IDX datasets live: `$EDGEMLP_DATA_DIR`, else `<repo>/data`.
pub fn data_dir() -> Option<PathBuf> {
    if let Some(dir) = std::env::var_os("EDGEMLP_DATA_DIR") {
        let path = PathBuf::from(dir);
        if path.is_dir() {
            return Some(path);
        }
    }
    let fallback = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    if fallback.is_dir() {
        Some(fallback)
    } else {
        None
    }
}

/// Load a real dataset if its files are present; `None` (with a note on
/// stderr) otherwise.
pub fn try_load(name: DatasetName) -> Option<LabeledImageSet> {
    let Some(dir) = data_dir() else {
        eprintln!(
            "dataset {} unavailable: no data directory (set EDGEMLP_DATA_DIR or \
             populate ./data; see scripts/fetch_data.sh)",
            name.as_str()
        );
        return None;
    };
    match edge_mlp::dataset::load_dataset(name, &dir) {
        Ok(set) => Some(set),
        Err(edge_mlp::Error::MissingFile(path)) => {
            eprintln!(
                "dataset {} unavailable: missing {}",
                name.as_str(),
                path.display()
            );
            None
        }
        Err(err) => panic!("dataset {} present but unreadable: {err}", name.as_str()),
    }
}

/// Naive quadruple-loop Sobel cross-correlation with reflect-101 padding;
/// the independent oracle for the production path.
pub fn sobel_oracle(image: &[f32], side: usize) -> (Vec<f32>, Vec<f32>) {
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
    let n = side as isize;
    let mut gx = vec![0.0f32; image.len()];
    let mut gy = vec![0.0f32; image.len()];
    for y in 0..n {
        for x in 0..n {
            let mut ax = 0.0f64;
            let mut ay = 0.0f64;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = image[reflect101(y + dy, n) * side + reflect101(x + dx, n)] as f64;
                    ax += KERNEL_GX[(dy + 1) as usize][(dx + 1) as usize] as f64 * v;
                    ay += KERNEL_GY[(dy + 1) as usize][(dx + 1) as usize] as f64 * v;
                }
            }
            gx[(y * n + x) as usize] = ax as f32;
            gy[(y * n + x) as usize] = ay as f32;
        }
    }
    (gx, gy)
}

/// Independent f64 reference of the training-mode loss (dense, batch-norm,
/// ReLU per hidden layer; affine output; softmax cross-entropy), written
/// against the math rather than the production code. Tensors follow the
/// model's canonical parameter order.
pub struct RefNet {
    pub config: MlpConfig,
    pub tensors: Vec<Vec<f64>>,
}

impl RefNet {
    pub fn from_model(m: &Model) -> RefNet {
        RefNet {
            config: m.config.clone(),
            tensors: m
                .param_slices()
                .iter()
                .map(|s| s.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    pub fn loss(&self, batch: &[Vec<f64>], labels: &[u8]) -> f64 {
        let b = batch.len();
        let eps = self.config.bn_epsilon as f64;
        let mut x: Vec<Vec<f64>> = batch.to_vec();
        let mut t = 0;
        for &dim in &self.config.hidden_dims {
            let (w, bias) = (&self.tensors[t], &self.tensors[t + 1]);
            let (gamma, beta) = (&self.tensors[t + 2], &self.tensors[t + 3]);
            t += 4;
            let mut z = vec![vec![0.0f64; dim]; b];
            for (zi, xi) in z.iter_mut().zip(&x) {
                for (k, &xv) in xi.iter().enumerate() {
                    for (zv, &wv) in zi.iter_mut().zip(&w[k * dim..(k + 1) * dim]) {
                        *zv += xv * wv;
                    }
                }
                for (zv, &bv) in zi.iter_mut().zip(bias) {
                    *zv += bv;
                }
            }
            for j in 0..dim {
                let mean = z.iter().map(|r| r[j]).sum::<f64>() / b as f64;
                let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / b as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for row in &mut z {
                    let xh = (row[j] - mean) * inv;
                    row[j] = (gamma[j] * xh + beta[j]).max(0.0);
                }
            }
            x = z;
        }
        let (w, bias) = (&self.tensors[t], &self.tensors[t + 1]);
        let c = self.config.output_dim;
        let mut loss = 0.0f64;
        for (xi, &label) in x.iter().zip(labels) {
            let mut logits = bias.clone();
            for (k, &xv) in xi.iter().enumerate() {
                for (lv, &wv) in logits.iter_mut().zip(&w[k * c..(k + 1) * c]) {
                    *lv += xv * wv;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
            loss -= logits[label as usize] - max - sum.ln();
        }
        loss / b as f64
    }

    /// Central finite difference of the loss in one parameter coordinate.
    pub fn fd_gradient(
        &self,
        t: usize,
        i: usize,
        h: f64,
        batch: &[Vec<f64>],
        labels: &[u8],
    ) -> f64 {
        let mut plus = RefNet {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
        };
        plus.tensors[t][i] += h;
        let mut minus = RefNet {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
        };
        minus.tensors[t][i] -= h;
        (plus.loss(batch, labels) - minus.loss(batch, labels)) / (2.0 * h)
    }
}
