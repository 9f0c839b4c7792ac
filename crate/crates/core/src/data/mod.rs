//! Labelled multi-modal embedding tables: storage, synthesis and batching.

pub mod blob;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Scalar};
use blob::BlobRef;

pub use synthetic::{generate_synthetic, CorrelationRegime, SyntheticConfig};

pub const DATASET_FORMAT: &str = "ccl-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// One split: aligned rows of student inputs, audio and image teacher
/// embeddings, and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub video_inputs: Matrix<T>,
    pub audio_embeddings: Matrix<T>,
    pub image_embeddings: Matrix<T>,
    pub labels: Vec<usize>,
}

/// A sampled mini-batch. Same layout as a [`Split`].
pub type Batch<T> = Split<T>;

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch<T> {
        Split {
            video_inputs: self.video_inputs.select_rows(indices),
            audio_embeddings: self.audio_embeddings.select_rows(indices),
            image_embeddings: self.image_embeddings.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn distinct_labels(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            video_inputs: self.video_inputs.cast(),
            audio_embeddings: self.audio_embeddings.cast(),
            image_embeddings: self.image_embeddings.cast(),
            labels: self.labels.clone(),
        }
    }

    fn validate(&self, name: &str, num_classes: usize) -> Result<()> {
        let n = self.labels.len();
        for (what, m) in [
            ("video_inputs", &self.video_inputs),
            ("audio_embeddings", &self.audio_embeddings),
            ("image_embeddings", &self.image_embeddings),
        ] {
            if m.rows() != n {
                return Err(Error::shape(
                    "dataset",
                    format!("{name}.{what} has {} rows, labels have {n}", m.rows()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{name}.{what}"),
                });
            }
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange {
                label,
                num_classes,
                context: format!("{name} split"),
            });
        }
        Ok(())
    }
}

/// Input and embedding widths of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub input_dim: usize,
    pub audio_dim: usize,
    pub image_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset<T> {
    pub num_classes: usize,
    pub train: Split<T>,
    pub test: Split<T>,
}

impl<T: Scalar> EmbeddingDataset<T> {
    /// Checks row counts, column agreement between splits, label ranges,
    /// finiteness, and that every class occurs in the training split.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        self.train.validate("train", self.num_classes)?;
        self.test.validate("test", self.num_classes)?;
        for (what, a, b) in [
            ("video_inputs", &self.train.video_inputs, &self.test.video_inputs),
            (
                "audio_embeddings",
                &self.train.audio_embeddings,
                &self.test.audio_embeddings,
            ),
            (
                "image_embeddings",
                &self.train.image_embeddings,
                &self.test.image_embeddings,
            ),
        ] {
            if a.cols() != b.cols() {
                return Err(Error::shape(
                    "dataset",
                    format!("{what}: train has {} columns, test {}", a.cols(), b.cols()),
                ));
            }
        }
        let present: BTreeSet<usize> = self.train.labels.iter().copied().collect();
        if let Some(missing) = (0..self.num_classes).find(|c| !present.contains(c)) {
            return Err(Error::Config(format!(
                "class {missing} has no training rows"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> DataDims {
        DataDims {
            input_dim: self.train.video_inputs.cols(),
            audio_dim: self.train.audio_embeddings.cols(),
            image_dim: self.train.image_embeddings.cols(),
            num_classes: self.num_classes,
        }
    }

    pub fn split(&self, kind: SplitKind) -> &Split<T> {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingDataset<U> {
        EmbeddingDataset {
            num_classes: self.num_classes,
            train: self.train.cast(),
            test: self.test.cast(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitManifest {
    rows: usize,
    video_inputs: BlobRef,
    audio_embeddings: BlobRef,
    image_embeddings: BlobRef,
    labels: BlobRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    format_version: u32,
    num_classes: usize,
    train: SplitManifest,
    test: SplitManifest,
}

/// Writes `dataset` as `manifest.toml` plus one blob per split and
/// modality. Returns the manifest path.
pub fn save_dataset<T: Scalar>(
    dataset: &EmbeddingDataset<T>,
    dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    dataset.validate()?;
    blob::prepare_output_dir(dir, overwrite)?;
    let write_split = |split: &Split<T>, name: &str| -> Result<SplitManifest> {
        Ok(SplitManifest {
            rows: split.len(),
            video_inputs: blob::write_matrix(dir, &format!("{name}.video.bin"), &split.video_inputs)?,
            audio_embeddings: blob::write_matrix(
                dir,
                &format!("{name}.audio.bin"),
                &split.audio_embeddings,
            )?,
            image_embeddings: blob::write_matrix(
                dir,
                &format!("{name}.image.bin"),
                &split.image_embeddings,
            )?,
            labels: blob::write_labels(dir, &format!("{name}.labels.bin"), &split.labels)?,
        })
    };
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        format_version: DATASET_FORMAT_VERSION,
        num_classes: dataset.num_classes,
        train: write_split(&dataset.train, "train")?,
        test: write_split(&dataset.test, "test")?,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    fs::write(&path, text)?;
    Ok(path)
}

/// Loads a dataset from a manifest file or from a directory holding
/// `manifest.toml`.
pub fn load_dataset<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset<T>> {
    let mut path = manifest_path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(e.into()),
    };
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT || manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Manifest {
            path,
            detail: format!(
                "unsupported format {} v{}",
                manifest.format, manifest.format_version
            ),
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let read_split = |m: &SplitManifest, name: &str| -> Result<Split<T>> {
        for blob in [&m.video_inputs, &m.audio_embeddings, &m.image_embeddings, &m.labels] {
            if blob.rows != m.rows {
                return Err(Error::Manifest {
                    path: path.clone(),
                    detail: format!("{name}: blob {} has {} rows, split has {}", blob.path, blob.rows, m.rows),
                });
            }
        }
        Ok(Split {
            video_inputs: blob::read_matrix(dir, &m.video_inputs)?,
            audio_embeddings: blob::read_matrix(dir, &m.audio_embeddings)?,
            image_embeddings: blob::read_matrix(dir, &m.image_embeddings)?,
            labels: blob::read_labels(dir, &m.labels)?,
        })
    };
    let dataset = EmbeddingDataset {
        num_classes: manifest.num_classes,
        train: read_split(&manifest.train, "train")?,
        test: read_split(&manifest.test, "test")?,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Draws `batch_size` distinct rows uniformly from `split`.
///
/// When the split holds at least two classes and the draw hits only one,
/// the batch is redrawn once; the second draw is kept whatever it holds.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    dataset: &EmbeddingDataset<T>,
    split: SplitKind,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch<T>> {
    let source = dataset.split(split);
    if batch_size < 2 || batch_size > source.len() {
        return Err(Error::Parameter(format!(
            "batch size {batch_size} outside [2, {}] for the {} split",
            source.len(),
            split.name()
        )));
    }
    let mut batch = source.gather(&index::sample(rng, source.len(), batch_size).into_vec());
    if batch.distinct_labels() < 2 && source.distinct_labels() >= 2 {
        batch = source.gather(&index::sample(rng, source.len(), batch_size).into_vec());
    }
    Ok(batch)
}
