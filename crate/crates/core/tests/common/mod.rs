//! Brute-force reference implementations shared by the oracle and
//! acceptance suites.
#![allow(dead_code)]

use ccl::losses::LossConfig;
use ccl::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-12;
pub const TOL: f64 = 1e-10;
pub const FIXTURES: u64 = 60;

pub type Rows = Vec<Vec<f64>>;

pub fn to_matrix(rows: &Rows) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Rows {
    random_rows(rng, n, k).iter().map(|r| softmax(r, 1.0)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    dot / (na * nb)
}

pub fn similarity_probs(a: &Rows, c: &Rows, tau: f64) -> Rows {
    a.iter()
        .map(|ai| softmax(&c.iter().map(|cj| cosine(ai, cj)).collect::<Vec<_>>(), tau))
        .collect()
}

pub fn oracle_ce(p: &Rows, labels: &[usize]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -p[i][y].max(EPS).ln()).sum();
    total / labels.len() as f64
}

pub fn oracle_info_nce(a: &Rows, c: &Rows, tau: f64) -> f64 {
    let p = similarity_probs(a, c, tau);
    (0..a.len()).map(|i| -p[i][i].max(EPS).ln()).sum::<f64>() / a.len() as f64
}

pub fn oracle_nce(a: &Rows, c: &Rows, labels: &[usize], tau: f64) -> f64 {
    let p = similarity_probs(a, c, tau);
    let b = a.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..b {
            if labels[i] == labels[j] {
                pos.push(-p[i][j].max(EPS).ln());
            } else {
                let rest: f64 = (0..b).filter(|&k| k != j).map(|k| p[i][k]).sum();
                neg.push(-rest.max(EPS).ln());
            }
        }
        total += pos.iter().sum::<f64>() / pos.len() as f64;
        if !neg.is_empty() {
            total += neg.iter().sum::<f64>() / neg.len() as f64;
        }
    }
    total / b as f64
}

pub fn oracle_jsd(p: &Rows, q: &Rows) -> f64 {
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x * (x.max(EPS).ln() - y.max(EPS).ln())).sum()
    };
    let total: f64 = p.iter().zip(q).map(|(a, b)| 0.5 * (kl(a, b) + kl(b, a))).sum();
    total / p.len() as f64
}

pub fn oracle_contrastive(a: &Rows, c: &Rows, labels: &[usize], tau: f64, nce: bool) -> f64 {
    if nce {
        oracle_nce(a, c, labels, tau)
    } else {
        oracle_info_nce(a, c, tau)
    }
}

pub fn oracle_modality(x_v: &Rows, x_t: &Rows, x_tv: &Rows, labels: &[usize], lambda: f64, tau: f64, cfg: &LossConfig) -> f64 {
    let uni = oracle_contrastive(x_v, x_t, labels, tau, cfg.use_nce);
    if !cfg.use_composition {
        return uni;
    }
    lambda * uni + (1.0 - lambda) * oracle_contrastive(x_v, x_tv, labels, tau, cfg.use_nce)
}

pub struct Fixture {
    pub labels: Vec<usize>,
    pub x_v: Rows,
    pub x_a: Rows,
    pub x_i: Rows,
    pub x_av: Rows,
    pub x_iv: Rows,
    pub p_v: Rows,
    pub p_av: Rows,
    pub p_iv: Rows,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..=8);
    let d = rng.random_range(2..=6);
    let k = rng.random_range(2..=5);
    let labels = (0..b).map(|_| rng.random_range(0..k)).collect();
    Fixture {
        labels,
        x_v: random_rows(&mut rng, b, d),
        x_a: random_rows(&mut rng, b, d),
        x_i: random_rows(&mut rng, b, d),
        x_av: random_rows(&mut rng, b, d),
        x_iv: random_rows(&mut rng, b, d),
        p_v: random_probs(&mut rng, b, k),
        p_av: random_probs(&mut rng, b, k),
        p_iv: random_probs(&mut rng, b, k),
    }
}

pub fn configs() -> Vec<LossConfig> {
    let full = LossConfig::default();
    vec![
        full,
        LossConfig { use_nce: false, ..full },
        LossConfig { use_composition: false, ..full },
        LossConfig { use_jsd: false, ..full },
        LossConfig { use_contrastive: false, ..full },
        LossConfig { use_audio_branch: false, ..full },
        LossConfig { lambda: 0.2, lambda_cls: 0.7, tau_audio: 0.3, ..full },
        LossConfig::baseline(),
    ]
}

pub fn oracle_total(f: &Fixture, cfg: &LossConfig) -> (f64, f64, f64) {
    let ce_v = oracle_ce(&f.p_v, &f.labels);
    let mut l_cls = ce_v;
    let mut l_distill = 0.0;
    let branches = [
        (cfg.use_audio_branch, &f.x_a, &f.x_av, &f.p_av, cfg.tau_audio),
        (cfg.use_image_branch, &f.x_i, &f.x_iv, &f.p_iv, cfg.tau_image),
    ];
    for (active, x_t, x_tv, p_tv, tau) in branches {
        if !active {
            continue;
        }
        if cfg.use_composition {
            l_cls += oracle_ce(p_tv, &f.labels);
        }
        if cfg.use_contrastive {
            l_distill += oracle_modality(&f.x_v, x_t, x_tv, &f.labels, cfg.lambda, tau, cfg);
        }
        if cfg.use_jsd && cfg.use_composition {
            l_distill += oracle_jsd(&f.p_v, p_tv);
        }
    }
    (l_cls, l_distill, l_distill + cfg.lambda_cls * l_cls)
}

pub fn oracle_recall(q: &Rows, ql: &[usize], t: &Rows, tl: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (qi, query) in q.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = t.iter().enumerate().map(|(j, x)| (cosine(query, x), j)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if scored.iter().take(k).any(|&(_, j)| tl[j] == ql[qi]) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

pub fn forward_outputs(f: &Fixture) -> ccl::model::ForwardOutputs<f64> {
    ccl::model::ForwardOutputs {
        x_v: to_matrix(&f.x_v),
        x_a: to_matrix(&f.x_a),
        x_i: to_matrix(&f.x_i),
        x_av: to_matrix(&f.x_av),
        x_iv: to_matrix(&f.x_iv),
        p_v: to_matrix(&f.p_v),
        p_av: to_matrix(&f.p_av),
        p_iv: to_matrix(&f.p_iv),
    }
}
