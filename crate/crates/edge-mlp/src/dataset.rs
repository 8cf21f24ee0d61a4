//! Dataset loading, label conventions, and the stratified split protocol.

use std::path::Path;

use crate::error::{Error, Result};
use crate::idx::{read_idx_file, IdxTensor};
use crate::rng::Rng;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// The two supported datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    EmnistLetters,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<DatasetName> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "emnist_letters" | "emnist-letters" => Ok(DatasetName::EmnistLetters),
            other => Err(Error::InvalidParameter(format!(
                "unknown dataset {other:?} (expected mnist or emnist_letters)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::EmnistLetters => "emnist_letters",
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DatasetName::Mnist => 10,
            DatasetName::EmnistLetters => 26,
        }
    }

    fn file_stems(&self) -> [&'static str; 4] {
        match self {
            DatasetName::Mnist => [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ],
            DatasetName::EmnistLetters => [
                "emnist-letters-train-images-idx3-ubyte",
                "emnist-letters-train-labels-idx1-ubyte",
                "emnist-letters-test-images-idx3-ubyte",
                "emnist-letters-test-labels-idx1-ubyte",
            ],
        }
    }
}

/// Raw 28x28 grayscale images with integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    images: Vec<u8>, // N * 784, row-major per image
    labels: Vec<u8>,
    class_count: usize,
    name: String,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<LabeledImageSet> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::InvalidDataset(format!(
                "{} image bytes cannot hold {} 28x28 images",
                images.len(),
                labels.len()
            )));
        }
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
        Ok(LabeledImageSet {
            images,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// New set containing the given sample indices, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImageSet {
            images,
            labels,
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }
}

/// Split fractions and the seed that drives every shuffle.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, validation_fraction: f64, seed: u64) -> Result<SplitSpec> {
        for (name, f) in [
            ("test_fraction", test_fraction),
            ("validation_fraction", validation_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} = {f}")));
            }
        }
        Ok(SplitSpec {
            test_fraction,
            validation_fraction,
            seed,
        })
    }

    /// 80/20 test split, 10% validation carve.
    pub fn standard(seed: u64) -> SplitSpec {
        SplitSpec {
            test_fraction: 0.2,
            validation_fraction: 0.1,
            seed,
        }
    }
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<IdxTensor> {
    for suffix in ["", ".gz"] {
        let candidate = dir.join(format!("{stem}{suffix}"));
        if candidate.is_file() {
            return read_idx_file(&candidate);
        }
    }
    Err(Error::MissingFile(dir.join(stem)))
}

/// Transpose a 28x28 image in place (EMNIST stores images transposed
/// relative to MNIST's visual convention).
fn transpose_image(img: &mut [u8]) {
    debug_assert_eq!(img.len(), IMAGE_PIXELS);
    for r in 0..IMAGE_SIDE {
        for c in (r + 1)..IMAGE_SIDE {
            img.swap(r * IMAGE_SIDE + c, c * IMAGE_SIDE + r);
        }
    }
}

fn check_image_tensor(t: &IdxTensor, what: &str) -> Result<usize> {
    if t.rank() != 3 || t.dims[1] != IMAGE_SIDE || t.dims[2] != IMAGE_SIDE {
        return Err(Error::InvalidDataset(format!(
            "{what}: expected Nx28x28 images, got dims {:?}",
            t.dims
        )));
    }
    Ok(t.dims[0])
}

/// Load a full dataset: the train and test portions concatenated, labels
/// normalized to `[0, class_count)`, EMNIST images transposed upright.
pub fn load_dataset(name: DatasetName, source_dir: &Path) -> Result<LabeledImageSet> {
    let [train_images, train_labels, test_images, test_labels] = name.file_stems();

    let tr_img = find_idx_file(source_dir, train_images)?;
    let tr_lbl = find_idx_file(source_dir, train_labels)?;
    let te_img = find_idx_file(source_dir, test_images)?;
    let te_lbl = find_idx_file(source_dir, test_labels)?;

    let n_train = check_image_tensor(&tr_img, train_images)?;
    let n_test = check_image_tensor(&te_img, test_images)?;
    if tr_lbl.rank() != 1 || tr_lbl.dims[0] != n_train {
        return Err(Error::InvalidDataset(format!(
            "{train_labels}: {} labels for {} images",
            tr_lbl.data.len(),
            n_train
        )));
    }
    if te_lbl.rank() != 1 || te_lbl.dims[0] != n_test {
        return Err(Error::InvalidDataset(format!(
            "{test_labels}: {} labels for {} images",
            te_lbl.data.len(),
            n_test
        )));
    }

    let mut images = tr_img.data;
    images.extend_from_slice(&te_img.data);
    let mut labels = tr_lbl.data;
    labels.extend_from_slice(&te_lbl.data);

    let class_count = name.class_count();
    if name == DatasetName::EmnistLetters {
        // Labels arrive as 1..=26; shift down to 0..=25.
        for (index, l) in labels.iter_mut().enumerate() {
            let shifted = *l as i64 - 1;
            if shifted < 0 || shifted >= class_count as i64 {
                return Err(Error::LabelOutOfRange {
                    index,
                    label: shifted,
                    class_count,
                });
            }
            *l = shifted as u8;
        }
        for img in images.chunks_exact_mut(IMAGE_PIXELS) {
            transpose_image(img);
        }
    }

    LabeledImageSet::new(images, labels, class_count, name.as_str())
}

fn round_half_to_even(x: f64) -> usize {
    let floor = x.floor();
    let frac = x - floor;
    let f = floor as usize;
    if frac > 0.5 || (frac == 0.5 && !f.is_multiple_of(2)) {
        f + 1
    } else {
        f
    }
}

/// Per-class index lists in dataset order.
fn class_index_lists(labels: &[u8], class_count: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    by_class
}

/// Stratified train/test partition over any labeled collection.
///
/// Each class's indices are shuffled with the split seed and the rounded
/// test fraction is taken from the front; both output index lists are then
/// sorted so the partition is a canonical function of (labels, seed).
pub fn stratified_split_indices(
    labels: &[u8],
    class_count: usize,
    spec: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = Rng::new(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut indices) in class_index_lists(labels, class_count)
        .into_iter()
        .enumerate()
    {
        if indices.len() < 5 {
            return Err(Error::DegenerateClass {
                class,
                count: indices.len(),
            });
        }
        rng.shuffle(&mut indices);
        let n_test = round_half_to_even(spec.test_fraction * indices.len() as f64);
        test.extend_from_slice(&indices[..n_test]);
        train.extend_from_slice(&indices[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified 80/20-style split into materialized train and test sets.
pub fn stratified_split(
    set: &LabeledImageSet,
    spec: &SplitSpec,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train_idx, test_idx) = stratified_split_indices(set.labels(), set.class_count(), spec)?;
    Ok((set.select(&train_idx), set.select(&test_idx)))
}

/// Index form of the validation carve: one seeded global shuffle, trailing
/// `validation_fraction` held out, fixed for the whole run.
pub fn carve_validation_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset("cannot carve validation".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).derive(1).shuffle(&mut indices);
    let fit_count = ((1.0 - spec.validation_fraction) * n as f64).floor() as usize;
    let val = indices.split_off(fit_count);
    Ok((indices, val))
}

/// Hold out the trailing `validation_fraction` of the training set after one
/// seeded global shuffle.
pub fn carve_validation(
    train: &LabeledImageSet,
    spec: &SplitSpec,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (fit_idx, val_idx) = carve_validation_indices(train.len(), spec)?;
    Ok((train.select(&fit_idx), train.select(&val_idx)))
}

/// Stratified subsample indices with `per_class` samples of each class
/// (fast mode for CI-sized runs).
pub fn stratified_subset_indices(
    labels: &[u8],
    class_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = Rng::new(seed).derive(2);
    let mut picked = Vec::with_capacity(per_class * class_count);
    for (class, mut indices) in class_index_lists(labels, class_count)
        .into_iter()
        .enumerate()
    {
        if indices.len() < per_class {
            return Err(Error::DegenerateClass {
                class,
                count: indices.len(),
            });
        }
        rng.shuffle(&mut indices);
        picked.extend_from_slice(&indices[..per_class]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Stratified subsample of an image set.
pub fn stratified_subset(
    set: &LabeledImageSet,
    per_class: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    let picked = stratified_subset_indices(set.labels(), set.class_count(), per_class, seed)?;
    Ok(set.select(&picked))
}
