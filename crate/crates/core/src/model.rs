//! Student encoder, shared classifier, residual composition heads, and
//! parameter checkpoints.
//!
//! The student maps raw inputs to a latent row through
//! `affine → tanh → affine`. A composition head rectifies a frozen teacher
//! embedding with a residual computed from the normalised teacher and
//! student rows:
//!
//! ```text
//! compose(x_t, x_v) = x_t + [norm(x_t) | norm(x_v)] · W + b
//! ```
//!
//! Heads start at zero, so every composed embedding equals its teacher
//! embedding until training moves the head.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::blob::{self, BlobRef};
use crate::data::{Batch, DataDims};
use crate::matrix::{self, l2_normalize_rows};
use crate::tape::{Tape, Var};
use crate::{Error, Matrix, Result, Scalar};

pub const CHECKPOINT_FORMAT: &str = "ccl-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const DEFAULT_LATENT_DIM: usize = 64;

/// Architecture knobs that are not implied by the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Student embedding width. Unset means the teacher width when the
    /// teachers agree and no projection heads are used, otherwise
    /// [`DEFAULT_LATENT_DIM`].
    pub latent_dim: Option<usize>,
    /// Learn linear maps taking each teacher embedding to `latent_dim`.
    /// Required whenever a teacher width differs from `latent_dim`.
    pub projection_heads: bool,
    /// Use one classifier for the student and both composed streams. When
    /// off, each composed stream gets its own classifier.
    pub shared_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: None,
            projection_heads: false,
            shared_classifier: true,
        }
    }
}

/// Full shape description of a [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub image_dim: usize,
    pub num_classes: usize,
    pub projection_heads: bool,
    pub shared_classifier: bool,
}

impl ModelDims {
    pub fn new(data: DataDims, cfg: ModelConfig) -> Self {
        let latent_dim = cfg.latent_dim.unwrap_or(
            if !cfg.projection_heads && data.audio_dim == data.image_dim {
                data.audio_dim
            } else {
                DEFAULT_LATENT_DIM
            },
        );
        Self {
            input_dim: data.input_dim,
            latent_dim,
            audio_dim: data.audio_dim,
            image_dim: data.image_dim,
            num_classes: data.num_classes,
            projection_heads: cfg.projection_heads,
            shared_classifier: cfg.shared_classifier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("audio_dim", self.audio_dim),
            ("image_dim", self.image_dim),
            ("num_classes", self.num_classes),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.projection_heads
            && (self.audio_dim != self.latent_dim || self.image_dim != self.latent_dim)
        {
            return Err(Error::Config(format!(
                "latent_dim {} differs from teacher widths (audio {}, image {}); enable projection_heads",
                self.latent_dim, self.audio_dim, self.image_dim
            )));
        }
        Ok(())
    }

    /// Width of the composed audio embedding.
    pub fn composed_audio_dim(&self) -> usize {
        if self.projection_heads {
            self.latent_dim
        } else {
            self.audio_dim
        }
    }

    pub fn composed_image_dim(&self) -> usize {
        if self.projection_heads {
            self.latent_dim
        } else {
            self.image_dim
        }
    }
}

/// Weight `in x out` and bias `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Normal weights with standard deviation `1/√input`, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * scale)
            }),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        matrix::affine(x, &self.weight, &self.bias)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_values(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    fn cast<U: Scalar>(&self) -> Affine<U> {
        Affine {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Which update stream a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Student,
    Classifier,
    AudioProjection,
    ImageProjection,
    AudioComposition,
    ImageComposition,
    AudioClassifier,
    ImageClassifier,
}

impl ParamGroup {
    /// Blocks trained by the video-network stream; the rest belong to the
    /// composition-function stream.
    pub fn in_video_stream(self) -> bool {
        matches!(
            self,
            ParamGroup::Student
                | ParamGroup::Classifier
                | ParamGroup::AudioProjection
                | ParamGroup::ImageProjection
        )
    }
}

/// All trainable parameters. Also used as the container for gradients,
/// which share every shape with the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    pub student_hidden: Affine<T>,
    pub student_output: Affine<T>,
    pub classifier: Affine<T>,
    pub compose_audio: Affine<T>,
    pub compose_image: Affine<T>,
    pub classifier_audio: Option<Affine<T>>,
    pub classifier_image: Option<Affine<T>>,
    pub project_audio: Option<Affine<T>>,
    pub project_image: Option<Affine<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Random student, classifier and projections; zero composition heads.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d = dims.latent_dim;
        let student_hidden = Affine::random(dims.input_dim, d, rng);
        let student_output = Affine::random(d, d, rng);
        let classifier = Affine::random(d, dims.num_classes, rng);
        let (project_audio, project_image) = if dims.projection_heads {
            (
                Some(Affine::random(dims.audio_dim, d, rng)),
                Some(Affine::random(dims.image_dim, d, rng)),
            )
        } else {
            (None, None)
        };
        let (classifier_audio, classifier_image) = if dims.shared_classifier {
            (None, None)
        } else {
            (
                Some(Affine::random(dims.composed_audio_dim(), dims.num_classes, rng)),
                Some(Affine::random(dims.composed_image_dim(), dims.num_classes, rng)),
            )
        };
        let ka = dims.composed_audio_dim();
        let ki = dims.composed_image_dim();
        Ok(Self {
            dims,
            student_hidden,
            student_output,
            classifier,
            compose_audio: Affine::zeros(ka + d, ka),
            compose_image: Affine::zeros(ki + d, ki),
            classifier_audio,
            classifier_image,
            project_audio,
            project_image,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_block_mut(|_, _, a| *a = a.zeros_like());
        out
    }

    /// Every parameter block with its name and update group, in a fixed
    /// order shared by checkpoints, tapes and gradient reports.
    pub fn blocks(&self) -> Vec<(&'static str, ParamGroup, &Affine<T>)> {
        let mut out = vec![
            ("student.hidden", ParamGroup::Student, &self.student_hidden),
            ("student.output", ParamGroup::Student, &self.student_output),
            ("classifier", ParamGroup::Classifier, &self.classifier),
            ("compose.audio", ParamGroup::AudioComposition, &self.compose_audio),
            ("compose.image", ParamGroup::ImageComposition, &self.compose_image),
        ];
        if let Some(a) = &self.classifier_audio {
            out.push(("classifier.audio", ParamGroup::AudioClassifier, a));
        }
        if let Some(a) = &self.classifier_image {
            out.push(("classifier.image", ParamGroup::ImageClassifier, a));
        }
        if let Some(a) = &self.project_audio {
            out.push(("project.audio", ParamGroup::AudioProjection, a));
        }
        if let Some(a) = &self.project_image {
            out.push(("project.image", ParamGroup::ImageProjection, a));
        }
        out
    }

    /// Mutable visit in the same order as [`ModelParams::blocks`].
    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&'static str, ParamGroup, &mut Affine<T>)) {
        f("student.hidden", ParamGroup::Student, &mut self.student_hidden);
        f("student.output", ParamGroup::Student, &mut self.student_output);
        f("classifier", ParamGroup::Classifier, &mut self.classifier);
        f("compose.audio", ParamGroup::AudioComposition, &mut self.compose_audio);
        f("compose.image", ParamGroup::ImageComposition, &mut self.compose_image);
        if let Some(a) = &mut self.classifier_audio {
            f("classifier.audio", ParamGroup::AudioClassifier, a);
        }
        if let Some(a) = &mut self.classifier_image {
            f("classifier.image", ParamGroup::ImageClassifier, a);
        }
        if let Some(a) = &mut self.project_audio {
            f("project.audio", ParamGroup::AudioProjection, a);
        }
        if let Some(a) = &mut self.project_image {
            f("project.image", ParamGroup::ImageProjection, a);
        }
    }

    /// Flat `(name, matrix)` view, e.g. `student.hidden.weight`.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix<T>)> {
        self.blocks()
            .into_iter()
            .flat_map(|(name, _, a)| {
                [
                    (format!("{name}.weight"), &a.weight),
                    (format!("{name}.bias"), &a.bias),
                ]
            })
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|(_, _, a)| a.num_values()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, a)| a.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            student_hidden: self.student_hidden.cast(),
            student_output: self.student_output.cast(),
            classifier: self.classifier.cast(),
            compose_audio: self.compose_audio.cast(),
            compose_image: self.compose_image.cast(),
            classifier_audio: self.classifier_audio.as_ref().map(Affine::cast),
            classifier_image: self.classifier_image.as_ref().map(Affine::cast),
            project_audio: self.project_audio.as_ref().map(Affine::cast),
            project_image: self.project_image.as_ref().map(Affine::cast),
        }
    }

    fn audio_classifier(&self) -> &Affine<T> {
        self.classifier_audio.as_ref().unwrap_or(&self.classifier)
    }

    fn image_classifier(&self) -> &Affine<T> {
        self.classifier_image.as_ref().unwrap_or(&self.classifier)
    }
}

/// Plain-value outputs of one forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    pub x_v: Matrix<T>,
    /// Teacher embeddings as seen by the losses (projected when projection
    /// heads are on, otherwise the inputs unchanged).
    pub x_a: Matrix<T>,
    pub x_i: Matrix<T>,
    pub x_av: Matrix<T>,
    pub x_iv: Matrix<T>,
    pub p_v: Matrix<T>,
    pub p_av: Matrix<T>,
    pub p_iv: Matrix<T>,
}

/// Student latent rows for raw inputs.
pub fn student_forward<T: Scalar>(params: &ModelParams<T>, inputs: &Matrix<T>) -> Result<Matrix<T>> {
    let h = params.student_hidden.apply(inputs)?.map(|v| v.tanh());
    params.student_output.apply(&h)
}

/// `teacher + head([norm(teacher) | norm(student)])`.
pub fn compose<T: Scalar>(head: &Affine<T>, teacher: &Matrix<T>, student: &Matrix<T>) -> Result<Matrix<T>> {
    let joint = l2_normalize_rows(teacher).concat_cols(&l2_normalize_rows(student))?;
    if joint.cols() != head.input_dim() || teacher.cols() != head.output_dim() {
        return Err(Error::shape(
            "compose",
            format!(
                "head {}→{} for teacher width {} and student width {}",
                head.input_dim(),
                head.output_dim(),
                teacher.cols(),
                student.cols()
            ),
        ));
    }
    teacher.add(&head.apply(&joint)?)
}

/// Class probabilities from the shared classifier (softmax at τ = 1).
pub fn classify<T: Scalar>(params: &ModelParams<T>, features: &Matrix<T>) -> Result<Matrix<T>> {
    classify_with(&params.classifier, features)
}

pub(crate) fn classify_with<T: Scalar>(head: &Affine<T>, features: &Matrix<T>) -> Result<Matrix<T>> {
    if features.cols() != head.input_dim() {
        return Err(Error::shape(
            "classify",
            format!("features have {} columns, classifier expects {}", features.cols(), head.input_dim()),
        ));
    }
    matrix::row_softmax(&head.apply(features)?, T::one())
}

/// Full forward pass without recording a tape.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<ForwardOutputs<T>> {
    let x_v = student_forward(params, &batch.video_inputs)?;
    let x_a = match &params.project_audio {
        Some(p) => p.apply(&batch.audio_embeddings)?,
        None => batch.audio_embeddings.clone(),
    };
    let x_i = match &params.project_image {
        Some(p) => p.apply(&batch.image_embeddings)?,
        None => batch.image_embeddings.clone(),
    };
    let x_av = compose(&params.compose_audio, &x_a, &x_v)?;
    let x_iv = compose(&params.compose_image, &x_i, &x_v)?;
    Ok(ForwardOutputs {
        p_v: classify(params, &x_v)?,
        p_av: classify_with(params.audio_classifier(), &x_av)?,
        p_iv: classify_with(params.image_classifier(), &x_iv)?,
        x_v,
        x_a,
        x_i,
        x_av,
        x_iv,
    })
}

/// Tape handles for one parameter block.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every parameter block, in [`ModelParams::blocks`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub blocks: Vec<(&'static str, ParamGroup, AffineVars)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<AffineVars> {
        self.blocks.iter().find(|(n, _, _)| *n == name).map(|b| b.2)
    }

    fn require(&self, name: &str) -> AffineVars {
        self.get(name).expect("parameter block registered")
    }

    /// Reads gradients for the blocks selected by `include` into a
    /// params-shaped container; excluded blocks are zero.
    pub fn collect_gradients<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        grads: &crate::tape::Gradients<T>,
        include: impl Fn(ParamGroup) -> bool,
    ) -> ModelParams<T> {
        let mut out = params.zeros_like();
        let mut i = 0;
        out.for_each_block_mut(|_, group, block| {
            let (_, _, vars) = self.blocks[i];
            i += 1;
            if include(group) {
                block.weight = grads.wrt(vars.weight);
                block.bias = grads.wrt(vars.bias);
            }
        });
        out
    }
}

/// Tape handles for the forward pass, mirroring [`ForwardOutputs`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub x_v: Var,
    pub x_a: Var,
    pub x_i: Var,
    pub x_av: Var,
    pub x_iv: Var,
    pub p_v: Var,
    pub p_av: Var,
    pub p_iv: Var,
}

/// Registers every parameter as a tape leaf.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ParamVars {
    ParamVars {
        blocks: params
            .blocks()
            .into_iter()
            .map(|(name, group, a)| {
                let weight = tape.leaf(a.weight.clone());
                let bias = tape.leaf(a.bias.clone());
                (name, group, AffineVars { weight, bias })
            })
            .collect(),
    }
}

fn affine_node<T: Scalar>(tape: &mut Tape<T>, x: Var, a: AffineVars) -> Result<Var> {
    tape.affine(x, a.weight, a.bias)
}

fn compose_node<T: Scalar>(tape: &mut Tape<T>, head: AffineVars, teacher: Var, student: Var) -> Result<Var> {
    let nt = tape.normalize_rows(teacher);
    let ns = tape.normalize_rows(student);
    let joint = tape.concat_cols(nt, ns)?;
    let residual = affine_node(tape, joint, head)?;
    tape.add(teacher, residual)
}

fn classify_node<T: Scalar>(tape: &mut Tape<T>, head: AffineVars, x: Var) -> Result<Var> {
    let logits = affine_node(tape, x, head)?;
    tape.row_softmax(logits, T::one())
}

/// Records the forward pass on `tape`. Teacher embeddings enter as
/// constants and never receive gradients.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    batch: &Batch<T>,
) -> Result<ForwardVars> {
    let inputs = tape.constant(batch.video_inputs.clone());
    let audio = tape.constant(batch.audio_embeddings.clone());
    let image = tape.constant(batch.image_embeddings.clone());

    let h = affine_node(tape, inputs, vars.require("student.hidden"))?;
    let h = tape.tanh(h);
    let x_v = affine_node(tape, h, vars.require("student.output"))?;
    tape.set_label(x_v, "x_v");

    let x_a = match vars.get("project.audio") {
        Some(p) => affine_node(tape, audio, p)?,
        None => audio,
    };
    let x_i = match vars.get("project.image") {
        Some(p) => affine_node(tape, image, p)?,
        None => image,
    };

    let x_av = compose_node(tape, vars.require("compose.audio"), x_a, x_v)?;
    tape.set_label(x_av, "x_av");
    let x_iv = compose_node(tape, vars.require("compose.image"), x_i, x_v)?;
    tape.set_label(x_iv, "x_iv");

    let shared = vars.require("classifier");
    let p_v = classify_node(tape, shared, x_v)?;
    let p_av = classify_node(tape, vars.get("classifier.audio").unwrap_or(shared), x_av)?;
    let p_iv = classify_node(tape, vars.get("classifier.image").unwrap_or(shared), x_iv)?;

    Ok(ForwardVars {
        x_v,
        x_a,
        x_i,
        x_av,
        x_iv,
        p_v,
        p_av,
        p_iv,
    })
}

impl ForwardVars {
    pub fn outputs<T: Scalar>(&self, tape: &Tape<T>) -> ForwardOutputs<T> {
        ForwardOutputs {
            x_v: tape.value(self.x_v).clone(),
            x_a: tape.value(self.x_a).clone(),
            x_i: tape.value(self.x_i).clone(),
            x_av: tape.value(self.x_av).clone(),
            x_iv: tape.value(self.x_iv).clone(),
            p_v: tape.value(self.p_v).clone(),
            p_av: tape.value(self.p_av).clone(),
            p_iv: tape.value(self.p_iv).clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    format_version: u32,
    dims: ModelDims,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    #[serde(flatten)]
    blob: BlobRef,
}

/// Writes parameters as `checkpoint.toml` plus one single-precision blob
/// per matrix. Returns the manifest path.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    blob::prepare_output_dir(dir, overwrite)?;
    let mut entries = Vec::new();
    for (name, m) in params.named_matrices() {
        let blob = blob::write_matrix(dir, &format!("{name}.bin"), m)?;
        entries.push(ParamEntry { name, blob });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        format_version: CHECKPOINT_FORMAT_VERSION,
        dims: params.dims,
        params: entries,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(CHECKPOINT_FILE);
    }
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(e.into()),
    };
    let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Manifest {
            path,
            detail: format!("unsupported format {} v{}", manifest.format, manifest.format_version),
        });
    }
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    // shapes come from a freshly built template so a manifest cannot smuggle
    // in inconsistent blocks
    let mut params = ModelParams::<T>::init(manifest.dims, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let mut failure = None;
    params.for_each_block_mut(|name, _, block| {
        if failure.is_some() {
            return;
        }
        for (suffix, target) in [("weight", &mut block.weight), ("bias", &mut block.bias)] {
            let key = format!("{name}.{suffix}");
            let result = manifest
                .params
                .iter()
                .find(|e| e.name == key)
                .ok_or_else(|| Error::Manifest {
                    path: path.clone(),
                    detail: format!("missing parameter {key}"),
                })
                .and_then(|e| blob::read_matrix::<T>(&dir, &e.blob));
            match result {
                Ok(m) if m.shape() == target.shape() => *target = m,
                Ok(m) => {
                    failure = Some(Error::shape(
                        "load_checkpoint",
                        format!("{key} is {}x{}, expected {}x{}", m.rows(), m.cols(), target.rows(), target.cols()),
                    ));
                    return;
                }
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(params),
    }
}
