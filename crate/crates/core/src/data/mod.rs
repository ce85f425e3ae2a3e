//! Datasets, batching, subset selection and augmentation.
//!
//! Images are stored as `f32` in `[0, 1]`, `[N, C, H, W]` order, without mean/std
//! normalization so the attack budget is exact in pixel space.

mod augment;
mod cifar;
mod toy;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::augment;
pub use cifar::{load_cifar_file, parse_cifar, serialize_cifar, CifarVariant, CIFAR_IMAGE_BYTES};
pub use toy::{make_toy_dataset, ToyRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Cifar10,
    Cifar100,
    Toy,
}

impl DatasetSource {
    pub fn id(self) -> &'static str {
        match self {
            DatasetSource::Cifar10 => "cifar10",
            DatasetSource::Cifar100 => "cifar100",
            DatasetSource::Toy => "toy",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetSource::Cifar100 => 100,
            DatasetSource::Cifar10 | DatasetSource::Toy => 10,
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetSource::Cifar10),
            "cifar100" => Ok(DatasetSource::Cifar100),
            "toy" => Ok(DatasetSource::Toy),
            other => Err(Error::config(
                "dataset",
                format!("unknown dataset `{other}` (expected cifar10, cifar100 or toy)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub split: Split,
    pub subset: Option<usize>,
    pub augment: bool,
    pub seed: u64,
}

/// An in-memory labelled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    image_shape: (usize, usize, usize),
}

/// `N` images with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        image_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let (c, h, w) = image_shape;
        if images.len() != labels.len() * c * h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), c, h, w],
                actual: vec![images.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the listed examples into one batch.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let (c, h, w) = self.image_shape;
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        ImageBatch {
            images: Tensor::from_vec(&[indices.len(), c, h, w], images).expect("sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the listed examples in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let batch = self.batch(indices);
        Dataset {
            images: batch.images.into_data(),
            labels: batch.labels,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    /// Contiguous batches of at most `batch_size` in storage order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |start| {
            let end = (start + batch_size).min(n);
            self.batch(&(start..end).collect::<Vec<_>>())
        })
    }
}

/// Seeded random order of `0..n` for one epoch.
pub fn shuffled_order(n: usize, master_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(master_seed, rng::SHUFFLE, &[epoch]));
    order
}

/// Picks `size` examples with as equal a class balance as the data allows. Within each
/// class the choice is a seeded shuffle, so the result is stable for a given seed.
pub fn select_subset(
    dataset: &Dataset,
    size: usize,
    master_seed: u64,
    split: Split,
) -> Result<Dataset> {
    if size == 0 || size > dataset.len() {
        return Err(Error::config(
            "subset",
            format!(
                "{size} must be between 1 and the split size {}",
                dataset.len()
            ),
        ));
    }
    let k = dataset.num_classes();
    let mut rng = rng::stream(master_seed, rng::SUBSET, &[split.index()]);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.labels().iter().enumerate() {
        per_class[l].push(i);
    }
    for members in &mut per_class {
        members.shuffle(&mut rng);
    }
    // round-robin over classes until the quota is met
    let mut chosen = Vec::with_capacity(size);
    let mut depth = 0;
    while chosen.len() < size {
        for members in &per_class {
            if chosen.len() == size {
                break;
            }
            if let Some(&i) = members.get(depth) {
                chosen.push(i);
            }
        }
        depth += 1;
    }
    chosen.sort_unstable();
    Ok(dataset.select(&chosen))
}

/// CIFAR file names inside a data directory, per split.
fn cifar_files(source: DatasetSource, split: Split) -> Vec<&'static str> {
    match (source, split) {
        (DatasetSource::Cifar10, Split::Train) => vec![
            "cifar-10-batches-bin/data_batch_1.bin",
            "cifar-10-batches-bin/data_batch_2.bin",
            "cifar-10-batches-bin/data_batch_3.bin",
            "cifar-10-batches-bin/data_batch_4.bin",
            "cifar-10-batches-bin/data_batch_5.bin",
        ],
        (DatasetSource::Cifar10, Split::Test) => vec!["cifar-10-batches-bin/test_batch.bin"],
        (DatasetSource::Cifar100, Split::Train) => vec!["cifar-100-binary/train.bin"],
        (DatasetSource::Cifar100, Split::Test) => vec!["cifar-100-binary/test.bin"],
        (DatasetSource::Toy, _) => Vec::new(),
    }
}

/// Loads one split as described by `spec`, then applies subset selection. CIFAR files are
/// looked up under `data_dir` in the layout of the standard binary archives; a file may
/// also sit directly in `data_dir` under its bare name.
pub fn load_dataset(
    spec: &DatasetSpec,
    data_dir: Option<&Path>,
    toy: &ToyRecipe,
) -> Result<Dataset> {
    let full = match spec.source {
        DatasetSource::Toy => {
            let size = match spec.split {
                Split::Train => toy.train_size,
                Split::Test => toy.test_size,
            };
            make_toy_dataset(toy, size, spec.seed, spec.split)?
        }
        source => {
            let dir = data_dir.ok_or_else(|| {
                Error::config("data_dir", format!("{source} needs a data directory"))
            })?;
            let variant = match source {
                DatasetSource::Cifar10 => CifarVariant::Cifar10,
                _ => CifarVariant::Cifar100,
            };
            let mut parts = Vec::new();
            for rel in cifar_files(source, spec.split) {
                let nested = dir.join(rel);
                let path = if nested.exists() {
                    nested
                } else {
                    dir.join(Path::new(rel).file_name().expect("static name"))
                };
                parts.push(load_cifar_file(&path, variant)?);
            }
            concat(parts)?
        }
    };
    match spec.subset {
        Some(size) if size < full.len() => select_subset(&full, size, spec.seed, spec.split),
        Some(size) if size > full.len() => Err(Error::config(
            "subset",
            format!("{size} exceeds the split size {}", full.len()),
        )),
        _ => Ok(full),
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut out = iter
        .next()
        .ok_or_else(|| Error::InvalidInput("no dataset files".into()))?;
    for part in iter {
        out.images.extend(part.images);
        out.labels.extend(part.labels);
    }
    Ok(out)
}
