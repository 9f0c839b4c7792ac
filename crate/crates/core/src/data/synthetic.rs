//! Synthetic class-structured embeddings with a controllable audio/video
//! semantic gap.
//!
//! Each class owns a semantic prototype. Student inputs and image
//! embeddings are (different) random linear images of that prototype plus
//! isotropic noise. Audio embeddings follow one of three regimes per class:
//! the prototype itself (high correlation), a blend with a distractor
//! prototype (weak), or a distractor alone that several classes share (none).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, Split};
use crate::{Error, Matrix, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationRegime {
    High,
    Weak,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub audio_dim: usize,
    pub image_dim: usize,
    pub semantic_dim: usize,
    /// Fractions of classes whose audio is highly, weakly and not
    /// correlated with the video content. Must sum to 1.
    pub frac_high: f64,
    pub frac_weak: f64,
    pub frac_none: f64,
    /// Weight of the class prototype in weakly correlated audio.
    pub weak_blend: f64,
    pub noise_scale: f64,
    pub distractor_pool: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 16,
            train_per_class: 40,
            test_per_class: 10,
            input_dim: 32,
            audio_dim: 32,
            image_dim: 32,
            semantic_dim: 8,
            frac_high: 1.0,
            frac_weak: 0.0,
            frac_none: 0.0,
            weak_blend: 0.5,
            noise_scale: 1.0,
            distractor_pool: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub const PRESETS: [&'static str; 3] = ["ucf51-gap", "aligned", "unaligned"];

    /// Named presets. `ucf51-gap` reproduces the share of action classes
    /// whose soundtrack is highly / weakly / not related to the visual
    /// content (29.4 / 29.4 / 41.2 %).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "ucf51-gap" => Self {
                frac_high: 0.294,
                frac_weak: 0.294,
                frac_none: 0.412,
                ..base
            },
            "aligned" => base,
            "unaligned" => Self {
                frac_high: 0.0,
                frac_none: 1.0,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.frac_high, self.frac_weak, self.frac_none];
        if fracs.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::Config("correlation fractions must be non-negative".into()));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "correlation fractions sum to {total}, expected 1"
            )));
        }
        for (name, d) in [
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("audio_dim", self.audio_dim),
            ("image_dim", self.image_dim),
            ("semantic_dim", self.semantic_dim),
        ] {
            if d < 2 {
                return Err(Error::Config(format!("{name} must be at least 2, got {d}")));
            }
        }
        if self.train_per_class < 1 {
            return Err(Error::Config("train_per_class must be at least 1".into()));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        if !(self.weak_blend > 0.0 && self.weak_blend < 1.0) {
            return Err(Error::Config("weak_blend must lie in (0, 1)".into()));
        }
        if self.distractor_pool < 1 {
            return Err(Error::Config("distractor_pool must be at least 1".into()));
        }
        Ok(())
    }

    /// Regime of every class: the first `⌈f_high·K⌉` classes are high, the
    /// next `⌈f_weak·K⌉` weak, the remainder none.
    pub fn regimes(&self) -> Vec<CorrelationRegime> {
        let k = self.num_classes;
        let n_high = ((self.frac_high * k as f64).ceil() as usize).min(k);
        let n_weak = ((self.frac_weak * k as f64).ceil() as usize).min(k - n_high);
        (0..k)
            .map(|c| {
                if c < n_high {
                    CorrelationRegime::High
                } else if c < n_high + n_weak {
                    CorrelationRegime::Weak
                } else {
                    CorrelationRegime::None
                }
            })
            .collect()
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Generates a dataset from `cfg`. Bitwise reproducible for a given seed.
pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticConfig) -> Result<EmbeddingDataset<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dz = cfg.semantic_dim;

    let prototypes = normal_matrix(&mut rng, cfg.num_classes, dz, 1.0);
    let distractors = normal_matrix(&mut rng, cfg.distractor_pool, dz, 1.0);
    let map_scale = 1.0 / (dz as f64).sqrt();
    let video_map = normal_matrix(&mut rng, dz, cfg.input_dim, map_scale);
    let audio_map = normal_matrix(&mut rng, dz, cfg.audio_dim, map_scale);
    let image_map = normal_matrix(&mut rng, dz, cfg.image_dim, map_scale);

    // semantic source of each class's audio track
    let regimes = cfg.regimes();
    let (mut weak_seen, mut none_seen) = (0usize, 0usize);
    let audio_sources = Matrix::from_rows(
        &regimes
            .iter()
            .enumerate()
            .map(|(c, regime)| {
                let z = prototypes.row(c);
                match regime {
                    CorrelationRegime::High => z.to_vec(),
                    CorrelationRegime::Weak => {
                        let d = distractors.row(weak_seen % cfg.distractor_pool);
                        weak_seen += 1;
                        z.iter()
                            .zip(d)
                            .map(|(&a, &b)| cfg.weak_blend * a + (1.0 - cfg.weak_blend) * b)
                            .collect()
                    }
                    CorrelationRegime::None => {
                        let d = distractors.row(none_seen % cfg.distractor_pool);
                        none_seen += 1;
                        d.to_vec()
                    }
                }
            })
            .collect::<Vec<_>>(),
    )?;

    let video_means = prototypes.matmul(&video_map)?;
    let image_means = prototypes.matmul(&image_map)?;
    let audio_means = audio_sources.matmul(&audio_map)?;

    let mut make_split = |per_class: usize| -> Split<T> {
        let n = per_class * cfg.num_classes;
        let mut video = Matrix::zeros(n, cfg.input_dim);
        let mut audio = Matrix::zeros(n, cfg.audio_dim);
        let mut image = Matrix::zeros(n, cfg.image_dim);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for c in 0..cfg.num_classes {
            for _ in 0..per_class {
                for (target, means) in [
                    (&mut video, &video_means),
                    (&mut image, &image_means),
                    (&mut audio, &audio_means),
                ] {
                    for (o, &mu) in target.row_mut(row).iter_mut().zip(means.row(c)) {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *o = T::lit(mu + cfg.noise_scale * e);
                    }
                }
                labels.push(c);
                row += 1;
            }
        }
        Split {
            video_inputs: video,
            audio_embeddings: audio,
            image_embeddings: image,
            labels,
        }
    };

    let train = make_split(cfg.train_per_class);
    let test = make_split(cfg.test_per_class);
    let dataset = EmbeddingDataset {
        num_classes: cfg.num_classes,
        train,
        test,
    };
    dataset.validate()?;
    Ok(dataset)
}
