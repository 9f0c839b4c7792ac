//! Classification, contrastive and prediction-alignment objectives.
//!
//! Every objective is built on a [`Tape`] so the trainer can differentiate
//! it; the plain functions here wrap a throwaway tape of constants and
//! return the value only.

use serde::{Deserialize, Serialize};

use crate::model::{ForwardOutputs, ForwardVars};
use crate::tape::{Tape, Var};
use crate::{Error, Matrix, Result, Scalar};

/// Weights, temperatures and ablation switches of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_audio: f64,
    pub tau_image: f64,
    /// Balance between the unimodal and the composed contrastive term.
    pub lambda: f64,
    /// Weight of every cross-entropy term.
    pub lambda_cls: f64,
    /// Build composed embeddings and use them in the objective.
    pub use_composition: bool,
    /// Multi-class NCE when on, instance-level InfoNCE when off.
    pub use_nce: bool,
    /// Feature-space contrastive terms at all.
    pub use_contrastive: bool,
    /// Symmetric-KL alignment of class predictions.
    pub use_jsd: bool,
    pub use_audio_branch: bool,
    pub use_image_branch: bool,
    /// Block the student gradient that reaches the contrastive terms through
    /// the composed embeddings.
    pub stop_grad_composed: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_audio: 0.5,
            tau_image: 0.1,
            lambda: 0.5,
            lambda_cls: 1.0,
            use_composition: true,
            use_nce: true,
            use_contrastive: true,
            use_jsd: true,
            use_audio_branch: true,
            use_image_branch: true,
            stop_grad_composed: false,
        }
    }
}

impl LossConfig {
    /// Supervised training of the student alone.
    pub fn baseline() -> Self {
        Self {
            use_audio_branch: false,
            use_image_branch: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_audio", self.tau_audio), ("tau_image", self.tau_image)] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lambda_cls >= 0.0) || !self.lambda_cls.is_finite() {
            return Err(Error::Config(format!(
                "lambda_cls must be non-negative, got {}",
                self.lambda_cls
            )));
        }
        Ok(())
    }

    fn branch_active(&self, modality: Modality) -> bool {
        match modality {
            Modality::Audio => self.use_audio_branch,
            Modality::Image => self.use_image_branch,
        }
    }

    fn tau(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Audio => self.tau_audio,
            Modality::Image => self.tau_image,
        }
    }

    /// Whether the composition head of `modality` has a loss term that can
    /// move it.
    pub fn composition_trained(&self, audio: bool) -> bool {
        let m = if audio { Modality::Audio } else { Modality::Image };
        self.use_composition && self.branch_active(m) && self.lambda_cls > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Modality {
    Audio,
    Image,
}

/// Value of every term of the objective for one batch. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_v: f64,
    pub ce_av: f64,
    pub ce_iv: f64,
    pub nce_va: f64,
    pub nce_v_av: f64,
    pub nce_vi: f64,
    pub nce_v_iv: f64,
    pub jsd_av: f64,
    pub jsd_iv: f64,
    pub l_cls: f64,
    pub l_distill: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Terms in a fixed order, for diagnostics.
    pub fn terms(&self) -> [(&'static str, f64); 12] {
        [
            ("ce_v", self.ce_v),
            ("ce_av", self.ce_av),
            ("ce_iv", self.ce_iv),
            ("nce_va", self.nce_va),
            ("nce_v_av", self.nce_v_av),
            ("nce_vi", self.nce_vi),
            ("nce_v_iv", self.nce_v_iv),
            ("jsd_av", self.jsd_av),
            ("jsd_iv", self.jsd_iv),
            ("l_cls", self.l_cls),
            ("l_distill", self.l_distill),
            ("l_total", self.l_total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Tape handles of the full objective.
#[derive(Clone, Copy, Debug)]
pub struct CclNodes {
    pub ce_v: Var,
    pub ce_av: Option<Var>,
    pub ce_iv: Option<Var>,
    pub nce_va: Option<Var>,
    pub nce_v_av: Option<Var>,
    pub nce_vi: Option<Var>,
    pub nce_v_iv: Option<Var>,
    pub jsd_av: Option<Var>,
    pub jsd_iv: Option<Var>,
    pub l_cls: Var,
    pub l_distill: Var,
    pub l_total: Var,
    /// `λ_cls·ce_v + L_distill`: what the student and classifier descend.
    pub video_objective: Var,
    /// `λ_cls·(ce_av + ce_iv)`: what the composition heads descend.
    pub composition_objective: Var,
}

impl CclNodes {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |n: Option<Var>| n.map_or(0.0, |n| tape.scalar(n).as_f64());
        LossBreakdown {
            ce_v: v(Some(self.ce_v)),
            ce_av: v(self.ce_av),
            ce_iv: v(self.ce_iv),
            nce_va: v(self.nce_va),
            nce_v_av: v(self.nce_v_av),
            nce_vi: v(self.nce_vi),
            nce_v_iv: v(self.nce_v_iv),
            jsd_av: v(self.jsd_av),
            jsd_iv: v(self.jsd_iv),
            l_cls: v(Some(self.l_cls)),
            l_distill: v(Some(self.l_distill)),
            l_total: v(Some(self.l_total)),
        }
    }
}

/// Contrastive term between anchor rows and candidate rows: multi-class NCE
/// when `labels` is given, InfoNCE otherwise.
pub fn contrastive_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    candidates: Var,
    labels: Option<&[usize]>,
    temperature: T,
) -> Result<Var> {
    let (na, nc) = (tape.value(anchors).rows(), tape.value(candidates).rows());
    if na != nc {
        return Err(Error::shape(
            "contrastive",
            format!("{na} anchors against {nc} candidates"),
        ));
    }
    let sim = tape.cosine_similarity(anchors, candidates)?;
    let probs = tape.row_softmax(sim, temperature)?;
    match labels {
        Some(labels) => tape.multiclass_nce(probs, labels),
        None => {
            if na < 2 {
                return Err(Error::Parameter(format!("InfoNCE needs at least 2 rows, got {na}")));
            }
            tape.diagonal_nll(probs)
        }
    }
}

struct ModalityNodes {
    objective: Var,
    unimodal: Var,
    composed: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn modality_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x_v: Var,
    x_t: Var,
    x_tv: Var,
    labels: &[usize],
    lambda: T,
    temperature: T,
    cfg: &LossConfig,
) -> Result<ModalityNodes> {
    let labels = cfg.use_nce.then_some(labels);
    let unimodal = contrastive_on_tape(tape, x_v, x_t, labels, temperature)?;
    if !cfg.use_composition {
        return Ok(ModalityNodes {
            objective: unimodal,
            unimodal,
            composed: None,
        });
    }
    let x_tv = if cfg.stop_grad_composed { tape.detach(x_tv) } else { x_tv };
    let composed = contrastive_on_tape(tape, x_v, x_tv, labels, temperature)?;
    let objective = tape.weighted_sum(&[(unimodal, lambda), (composed, T::one() - lambda)])?;
    Ok(ModalityNodes {
        objective,
        unimodal,
        composed: Some(composed),
    })
}

/// Records the full objective on `tape` on top of a recorded forward pass.
pub fn ccl_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    fv: &ForwardVars,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<CclNodes> {
    cfg.validate()?;
    let lambda = T::lit(cfg.lambda);
    let lambda_cls = T::lit(cfg.lambda_cls);

    let ce_v = tape.cross_entropy(fv.p_v, labels)?;
    tape.set_label(ce_v, "ce_v");

    let mut nodes = CclNodes {
        ce_v,
        ce_av: None,
        ce_iv: None,
        nce_va: None,
        nce_v_av: None,
        nce_vi: None,
        nce_v_iv: None,
        jsd_av: None,
        jsd_iv: None,
        l_cls: ce_v,
        l_distill: ce_v,
        l_total: ce_v,
        video_objective: ce_v,
        composition_objective: ce_v,
    };

    let mut cls_terms = vec![(ce_v, T::one())];
    let mut distill_terms = Vec::new();
    let mut composition_terms = Vec::new();

    for modality in [Modality::Audio, Modality::Image] {
        if !cfg.branch_active(modality) {
            continue;
        }
        let (x_t, x_tv, p_tv, names) = match modality {
            Modality::Audio => (fv.x_a, fv.x_av, fv.p_av, ["ce_av", "nce_va", "nce_v_av", "jsd_av"]),
            Modality::Image => (fv.x_i, fv.x_iv, fv.p_iv, ["ce_iv", "nce_vi", "nce_v_iv", "jsd_iv"]),
        };

        let mut ce = None;
        if cfg.use_composition {
            let c = tape.cross_entropy(p_tv, labels)?;
            tape.set_label(c, names[0]);
            cls_terms.push((c, T::one()));
            composition_terms.push((c, lambda_cls));
            ce = Some(c);
        }

        let mut unimodal = None;
        let mut composed = None;
        if cfg.use_contrastive {
            let m = modality_on_tape(tape, fv.x_v, x_t, x_tv, labels, lambda, T::lit(cfg.tau(modality)), cfg)?;
            tape.set_label(m.unimodal, names[1]);
            if let Some(c) = m.composed {
                tape.set_label(c, names[2]);
            }
            distill_terms.push((m.objective, T::one()));
            unimodal = Some(m.unimodal);
            composed = m.composed;
        }

        let mut jsd = None;
        if cfg.use_jsd && cfg.use_composition {
            let j = tape.symmetric_kl(fv.p_v, p_tv)?;
            tape.set_label(j, names[3]);
            distill_terms.push((j, T::one()));
            jsd = Some(j);
        }

        match modality {
            Modality::Audio => {
                nodes.ce_av = ce;
                nodes.nce_va = unimodal;
                nodes.nce_v_av = composed;
                nodes.jsd_av = jsd;
            }
            Modality::Image => {
                nodes.ce_iv = ce;
                nodes.nce_vi = unimodal;
                nodes.nce_v_iv = composed;
                nodes.jsd_iv = jsd;
            }
        }
    }

    nodes.l_cls = tape.weighted_sum(&cls_terms)?;
    tape.set_label(nodes.l_cls, "l_cls");
    nodes.l_distill = tape.weighted_sum(&distill_terms)?;
    tape.set_label(nodes.l_distill, "l_distill");
    nodes.l_total = tape.weighted_sum(&[(nodes.l_distill, T::one()), (nodes.l_cls, lambda_cls)])?;
    tape.set_label(nodes.l_total, "l_total");
    nodes.video_objective = tape.weighted_sum(&[(ce_v, lambda_cls), (nodes.l_distill, T::one())])?;
    tape.set_label(nodes.video_objective, "video_objective");
    nodes.composition_objective = tape.weighted_sum(&composition_terms)?;
    tape.set_label(nodes.composition_objective, "composition_objective");
    Ok(nodes)
}

/// Mean over rows of `-ln probs[i, label_i]`, log argument floored at ε.
pub fn cross_entropy<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let v = tape.cross_entropy(p, labels)?;
    Ok(tape.scalar(v))
}

/// InfoNCE: each anchor's own candidate is the only positive, scored
/// against every candidate in the batch.
pub fn info_nce<T: Scalar>(anchors: &Matrix<T>, candidates: &Matrix<T>, temperature: T) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let c = tape.constant(candidates.clone());
    let v = contrastive_on_tape(&mut tape, a, c, None, temperature)?;
    Ok(tape.scalar(v))
}

/// Multi-class NCE: candidates sharing the anchor's label are positives.
pub fn multiclass_nce<T: Scalar>(
    anchors: &Matrix<T>,
    candidates: &Matrix<T>,
    labels: &[usize],
    temperature: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let c = tape.constant(candidates.clone());
    let v = contrastive_on_tape(&mut tape, a, c, Some(labels), temperature)?;
    Ok(tape.scalar(v))
}

/// `λ·C(x_v, x_t) + (1-λ)·C(x_v, x_tv)`, where `C` is the contrastive term
/// selected by `cfg`. Without composition only `C(x_v, x_t)` remains.
pub fn modality_objective<T: Scalar>(
    x_v: &Matrix<T>,
    x_t: &Matrix<T>,
    x_tv: &Matrix<T>,
    labels: &[usize],
    lambda: T,
    temperature: T,
    cfg: &LossConfig,
) -> Result<T> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x_v.clone());
    let t = tape.constant(x_t.clone());
    let tv = tape.constant(x_tv.clone());
    let m = modality_on_tape(&mut tape, v, t, tv, labels, lambda, temperature, cfg)?;
    Ok(tape.scalar(m.objective))
}

/// Mean over rows of `(KL(P‖Q) + KL(Q‖P)) / 2`.
pub fn jsd<T: Scalar>(p: &Matrix<T>, q: &Matrix<T>) -> Result<T> {
    p.expect_same_shape("jsd", q)?;
    check_distributions(p)?;
    check_distributions(q)?;
    let mut tape = Tape::new();
    let a = tape.constant(p.clone());
    let b = tape.constant(q.clone());
    let v = tape.symmetric_kl(a, b)?;
    Ok(tape.scalar(v))
}

fn check_distributions<T: Scalar>(m: &Matrix<T>) -> Result<()> {
    let tol = 1e-6;
    for (row, r) in m.row_iter().enumerate() {
        if let Some(v) = r.iter().find(|v| !(v.as_f64() >= -tol)) {
            return Err(Error::Distribution {
                row,
                detail: format!("entry {v} is negative"),
            });
        }
        let total: f64 = r.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::Distribution {
                row,
                detail: format!("sums to {total}"),
            });
        }
    }
    Ok(())
}

/// Every term of the objective from plain forward outputs.
pub fn ccl_total<T: Scalar>(
    forward: &ForwardOutputs<T>,
    x_a: &Matrix<T>,
    x_i: &Matrix<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut c = |m: &Matrix<T>| tape.constant(m.clone());
    let fv = ForwardVars {
        x_v: c(&forward.x_v),
        x_a: c(x_a),
        x_i: c(x_i),
        x_av: c(&forward.x_av),
        x_iv: c(&forward.x_iv),
        p_v: c(&forward.p_v),
        p_av: c(&forward.p_av),
        p_iv: c(&forward.p_iv),
    };
    let nodes = ccl_on_tape(&mut tape, &fv, labels, cfg)?;
    Ok(nodes.breakdown(&tape))
}
