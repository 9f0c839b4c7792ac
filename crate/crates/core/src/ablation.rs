//! Named objective variants and modality modes for ablation grids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::eval::{knn_retrieval, top1_accuracy};
use crate::losses::LossConfig;
use crate::trainer::{fit, TrainConfig};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cross-entropy on the student only.
    Baseline,
    Ccl,
    NoComposition,
    /// InfoNCE in place of multi-class NCE.
    InfoNce,
    /// Feature-space contrastive terms removed.
    NoNce,
    NoJsd,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Ccl,
        Variant::NoComposition,
        Variant::InfoNce,
        Variant::NoNce,
        Variant::NoJsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ccl => "ccl",
            Variant::NoComposition => "no-composition",
            Variant::InfoNce => "infonce",
            Variant::NoNce => "no-nce",
            Variant::NoJsd => "no-jsd",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Which teachers are distilled: audio, image, or both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    A,
    I,
    AI,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::A, Mode::I, Mode::AI];

    pub fn name(self) -> &'static str {
        match self {
            Mode::A => "A",
            Mode::I => "I",
            Mode::AI => "AI",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Mode::A),
            "I" => Ok(Mode::I),
            "AI" | "IA" => Ok(Mode::AI),
            _ => Err(Error::Config(format!("unknown mode '{s}'"))),
        }
    }
}

/// Applies `variant` and `mode` on top of `base` (temperatures and weights
/// are kept).
pub fn loss_config(base: &LossConfig, variant: Variant, mode: Mode) -> LossConfig {
    let full = LossConfig {
        use_composition: true,
        use_nce: true,
        use_contrastive: true,
        use_jsd: true,
        use_audio_branch: matches!(mode, Mode::A | Mode::AI),
        use_image_branch: matches!(mode, Mode::I | Mode::AI),
        ..*base
    };
    match variant {
        Variant::Baseline => LossConfig {
            use_audio_branch: false,
            use_image_branch: false,
            ..full
        },
        Variant::Ccl => full,
        Variant::NoComposition => LossConfig {
            use_composition: false,
            ..full
        },
        Variant::InfoNce => LossConfig { use_nce: false, ..full },
        Variant::NoNce => LossConfig {
            use_contrastive: false,
            ..full
        },
        Variant::NoJsd => LossConfig { use_jsd: false, ..full },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub mode: Mode,
    pub seed: u64,
    pub test_top1: f64,
    pub recall_at_1: f64,
    pub final_loss: f64,
}

/// Trains one grid cell and scores it on the test split.
pub fn run_cell<T: Scalar>(
    dataset: &EmbeddingDataset<T>,
    base: &TrainConfig,
    variant: Variant,
    mode: Mode,
    seed: u64,
) -> Result<CellResult> {
    let cfg = TrainConfig {
        seed,
        loss: loss_config(&base.loss, variant, mode),
        ..base.clone()
    };
    let (params, history) = fit(dataset, &cfg)?;
    let retrieval = knn_retrieval(&params, dataset, &[1])?;
    Ok(CellResult {
        variant,
        mode,
        seed,
        test_top1: top1_accuracy(&params, &dataset.test)?,
        recall_at_1: retrieval.recall_at[&1],
        final_loss: history.last().map_or(f64::NAN, |r| r.loss.l_total),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
