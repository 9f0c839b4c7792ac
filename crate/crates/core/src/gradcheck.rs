//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::losses::LossConfig;
use crate::model::{ModelDims, ModelParams, ParamGroup};
use crate::trainer::{objective_values, stream_gradients, total_gradient};
use crate::{Matrix, Result, Scalar};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude errors are measured in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `compose.audio.weight[3,1]`.
    pub worst: Option<String>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Reports for the full objective and both update streams.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepGradCheck {
    pub total: GradCheckReport,
    pub video: GradCheckReport,
    pub composition: GradCheckReport,
}

impl StepGradCheck {
    pub fn passed(&self) -> bool {
        self.reports().iter().all(|r| r.passed)
    }

    pub fn reports(&self) -> [&GradCheckReport; 3] {
        [&self.total, &self.video, &self.composition]
    }

    pub fn worst(&self) -> &GradCheckReport {
        self.reports()
            .into_iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .unwrap()
    }
}

/// Analytic gradients handed to the checker.
#[derive(Clone, Debug)]
pub struct AnalyticGradients<T> {
    pub total: ModelParams<T>,
    pub video: ModelParams<T>,
    pub composition: ModelParams<T>,
}

pub fn analytic_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
) -> Result<AnalyticGradients<T>> {
    let s = stream_gradients(params, batch, cfg)?;
    Ok(AnalyticGradients {
        total: total_gradient(params, batch, cfg)?,
        video: s.video,
        composition: s.composition,
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn perturbed<T: Scalar>(params: &ModelParams<T>, block: usize, bias: bool, k: usize, delta: f64) -> ModelParams<T> {
    let mut p = params.clone();
    let mut i = 0;
    p.for_each_block_mut(|_, _, a| {
        if i == block {
            let m = if bias { &mut a.bias } else { &mut a.weight };
            let v = &mut m.data_mut()[k];
            *v = T::lit(v.as_f64() + delta);
        }
        i += 1;
    });
    p
}

struct Tracker {
    objective: String,
    max: f64,
    worst: Option<String>,
    count: usize,
}

impl Tracker {
    fn new(objective: &str) -> Self {
        Self {
            objective: objective.into(),
            max: 0.0,
            worst: None,
            count: 0,
        }
    }

    fn observe(&mut self, analytic: f64, numeric: f64, name: impl FnOnce() -> String) {
        self.count += 1;
        let err = relative_error(analytic, numeric);
        if !(err <= self.max) {
            self.max = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some(name());
        }
    }

    fn report(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            passed: self.max <= tolerance,
            objective: self.objective,
            max_rel_error: self.max,
            worst: self.worst,
            coordinates: self.count,
            tolerance,
        }
    }
}

/// Compares `analytic` against central differences of `objective` on every
/// coordinate of the blocks selected by `include`.
pub fn check_objective<T: Scalar>(
    label: &str,
    params: &ModelParams<T>,
    analytic: &ModelParams<T>,
    include: impl Fn(ParamGroup) -> bool,
    objective: impl Fn(&ModelParams<T>) -> Result<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut tracker = Tracker::new(label);
    let analytic_blocks = analytic.blocks();
    for (b, (name, group, block)) in params.blocks().into_iter().enumerate() {
        if !include(group) {
            continue;
        }
        for (bias, m, am) in [
            (false, &block.weight, &analytic_blocks[b].2.weight),
            (true, &block.bias, &analytic_blocks[b].2.bias),
        ] {
            for k in 0..m.len() {
                let plus = objective(&perturbed(params, b, bias, k, step))?;
                let minus = objective(&perturbed(params, b, bias, k, -step))?;
                let numeric = (plus - minus) / (2.0 * step);
                tracker.observe(am.data()[k].as_f64(), numeric, || coord_name(name, bias, m, k));
            }
        }
    }
    Ok(tracker.report(tolerance))
}

fn coord_name<T: Scalar>(block: &str, bias: bool, m: &Matrix<T>, k: usize) -> String {
    let (r, c) = (k / m.cols(), k % m.cols());
    format!("{block}.{}[{r},{c}]", if bias { "bias" } else { "weight" })
}

/// Checks the full objective over all parameters, the video-stream
/// objective over video blocks, and the composition-stream objective over
/// composition blocks.
pub fn grad_check<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
    tolerance: f64,
) -> Result<StepGradCheck> {
    grad_check_with(params, batch, cfg, tolerance, analytic_gradients)
}

/// [`grad_check`] with a caller-supplied source of analytic gradients.
pub fn grad_check_with<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
    tolerance: f64,
    analytic: impl Fn(&ModelParams<T>, &Batch<T>, &LossConfig) -> Result<AnalyticGradients<T>>,
) -> Result<StepGradCheck> {
    let grads = analytic(params, batch, cfg)?;
    let step = DEFAULT_STEP;
    let mut trackers = [Tracker::new("total"), Tracker::new("video_stream"), Tracker::new("composition_stream")];
    let blocks = params.blocks();
    let analytic_blocks = [grads.total.blocks(), grads.video.blocks(), grads.composition.blocks()];
    for (b, (name, group, block)) in blocks.iter().enumerate() {
        for (bias, m) in [(false, &block.weight), (true, &block.bias)] {
            for k in 0..m.len() {
                let plus = objective_values(&perturbed(params, b, bias, k, step), batch, cfg)?;
                let minus = objective_values(&perturbed(params, b, bias, k, -step), batch, cfg)?;
                for (o, tracker) in trackers.iter_mut().enumerate() {
                    let in_scope = match o {
                        0 => true,
                        1 => group.in_video_stream(),
                        _ => !group.in_video_stream(),
                    };
                    if !in_scope {
                        continue;
                    }
                    let a = &analytic_blocks[o][b].2;
                    let a = if bias { &a.bias } else { &a.weight };
                    let numeric = (plus[o] - minus[o]) / (2.0 * step);
                    tracker.observe(a.data()[k].as_f64(), numeric, || coord_name(name, bias, m, k));
                }
            }
        }
    }
    let [total, video, composition] = trackers;
    Ok(StepGradCheck {
        total: total.report(tolerance),
        video: video.report(tolerance),
        composition: composition.report(tolerance),
    })
}

/// A small randomized configuration for gradient checking.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub seed: u64,
    pub params: ModelParams<f64>,
    pub batch: Batch<f64>,
    pub loss: LossConfig,
}

/// Builds a case with at most 4 classes, widths at most 8 and at most 6
/// rows. Composition heads and biases are randomized so every path carries
/// gradient; some seeds add projection heads or per-branch classifiers.
pub fn random_case(seed: u64) -> Result<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = rng.random_range(2..=4);
    let latent = rng.random_range(2..=8);
    let input_dim = rng.random_range(2..=8);
    let projection_heads = seed % 4 == 1;
    let (audio_dim, image_dim) = if projection_heads {
        (rng.random_range(2..=8), rng.random_range(2..=8))
    } else {
        (latent, latent)
    };
    let dims = ModelDims {
        input_dim,
        latent_dim: latent,
        audio_dim,
        image_dim,
        num_classes,
        projection_heads,
        shared_classifier: seed % 4 != 2,
    };
    let mut params = ModelParams::<f64>::init(dims, &mut rng)?;
    params.for_each_block_mut(|_, _, a| {
        for v in a.weight.data_mut().iter_mut().chain(a.bias.data_mut()) {
            if *v == 0.0 {
                *v = rng.random_range(-0.5..0.5);
            } else {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    });
    let rows = rng.random_range(2..=6);
    let mut labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..num_classes)).collect();
    if !seed.is_multiple_of(5) {
        // keep at least one negative pair in most cases
        labels[0] = 0;
        labels[1] = 1;
    }
    let mut gen = |cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let batch = Batch {
        video_inputs: gen(input_dim),
        audio_embeddings: gen(audio_dim),
        image_embeddings: gen(image_dim),
        labels,
    };
    let loss = LossConfig {
        tau_audio: 0.5,
        tau_image: if seed.is_multiple_of(2) { 0.1 } else { 0.3 },
        ..LossConfig::default()
    };
    Ok(GradCheckCase {
        seed,
        params,
        batch,
        loss,
    })
}
