//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ccl::ablation::{run_cell, Mode, Variant};
use ccl::data::{generate_synthetic, load_dataset, save_dataset, SyntheticConfig};
use ccl::eval::knn_recall;
use ccl::gradcheck::{grad_check, random_case};
use ccl::losses::{ccl_total, cross_entropy, info_nce, jsd, modality_objective, multiclass_nce, LossConfig};
use ccl::model::{forward, save_checkpoint, ModelParams};
use ccl::trainer::{fit, model_dims, TrainConfig};
use ccl::{Dataset32, Dataset64, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let case = random_case(seed).map_err(|e| e.to_string())?;
        let report = grad_check(&case.params, &case.batch, &case.loss, 1e-4).map_err(|e| e.to_string())?;
        let w = report.worst();
        worst = worst.max(w.max_rel_error);
        if !report.passed() {
            return Err(format!("seed {seed} {}: {:.2e} at {:?}", w.objective, w.max_rel_error, w.worst));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!("20 configs, max rel err {worst:.2e}, {secs:.1}s"),
        format!("took {secs:.1}s"),
    )
}

fn loss_oracles() -> Outcome {
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        let m = to_matrix;
        let (tau, lambda) = (0.5, 0.5);
        track(cross_entropy(&m(&f.p_v), &f.labels).unwrap(), oracle_ce(&f.p_v, &f.labels));
        track(info_nce(&m(&f.x_v), &m(&f.x_a), tau).unwrap(), oracle_info_nce(&f.x_v, &f.x_a, tau));
        track(
            multiclass_nce(&m(&f.x_v), &m(&f.x_i), &f.labels, tau).unwrap(),
            oracle_nce(&f.x_v, &f.x_i, &f.labels, tau),
        );
        track(jsd(&m(&f.p_v), &m(&f.p_av)).unwrap(), oracle_jsd(&f.p_v, &f.p_av));
        let forward = forward_outputs(&f);
        for cfg in configs() {
            track(
                modality_objective(&m(&f.x_v), &m(&f.x_a), &m(&f.x_av), &f.labels, lambda, tau, &cfg).unwrap(),
                oracle_modality(&f.x_v, &f.x_a, &f.x_av, &f.labels, lambda, tau, &cfg),
            );
            let got = ccl_total(&forward, &forward.x_a, &forward.x_i, &f.labels, &cfg).unwrap();
            track(got.l_total, oracle_total(&f, &cfg).2);
        }
    }
    let eye = Matrix::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let p = Matrix::<f64>::from_rows(&[[0.75, 0.25]]).unwrap();
    let q = Matrix::<f64>::from_rows(&[[0.25, 0.75]]).unwrap();
    let fixed = [
        (info_nce(&eye, &eye, 1.0).unwrap(), 0.3133),
        (multiclass_nce(&eye, &eye, &[0, 1], 1.0).unwrap(), 0.6266),
        (jsd(&p, &q).unwrap(), 0.5493),
    ];
    let fixed_ok = fixed.iter().all(|(got, want)| (got - want).abs() <= 1e-4);
    check(
        worst <= TOL && fixed_ok,
        format!("{FIXTURES} fixtures, max abs diff {worst:.1e}; fixed values {:.4}/{:.4}/{:.4}", fixed[0].0, fixed[1].0, fixed[2].0),
        format!("max abs diff {worst:.1e}, fixed values {fixed:?}"),
    )
}

fn identity_checks() -> Outcome {
    // two-sample NCE equals the binary two-term form
    let mut nce_gap = 0.0f64;
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=6);
        let a = random_rows(&mut rng, 2, d);
        let c = random_rows(&mut rng, 2, d);
        let p = similarity_probs(&a, &c, 0.5);
        let binary = (0..2).map(|i| -p[i][i].ln() - (1.0 - p[i][1 - i]).ln()).sum::<f64>() / 2.0;
        let got = multiclass_nce(&to_matrix(&a), &to_matrix(&c), &[0, 1], 0.5).unwrap();
        nce_gap = nce_gap.max((got - binary).abs());
    }

    // zero-initialised heads are the identity on teacher embeddings
    let ds: Dataset64 = generate_synthetic(&SyntheticConfig::preset("ucf51-gap").unwrap()).unwrap();
    let cfg = TrainConfig::default();
    let params = ModelParams::init(model_dims(&ds, &cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let out = forward(&params, &ds.train).unwrap();
    let identity = out.x_av == ds.train.audio_embeddings && out.x_iv == ds.train.image_embeddings;

    // baseline toggle leaves exactly λ_cls·ce_v
    let mut baseline_exact = true;
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        let forward = forward_outputs(&f);
        let cfg = LossConfig {
            lambda_cls: 0.7,
            ..LossConfig::baseline()
        };
        let b = ccl_total(&forward, &forward.x_a, &forward.x_i, &f.labels, &cfg).unwrap();
        baseline_exact &= b.l_total == cfg.lambda_cls * b.ce_v;
    }
    check(
        nce_gap < 1e-12 && identity && baseline_exact,
        format!("binary NCE gap {nce_gap:.1e}; zero-init heads identity; baseline total = λ_cls·ce_v"),
        format!("nce gap {nce_gap:.1e}, identity {identity}, baseline exact {baseline_exact}"),
    )
}

fn retrieval_correctness() -> Outcome {
    let ks = [1, 5, 10];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = rng.random_range(1..=20);
        let nt = rng.random_range(1..=50);
        let d = rng.random_range(2..=8);
        let classes = rng.random_range(2..=6);
        let q = random_rows(&mut rng, nq, d);
        let t = random_rows(&mut rng, nt, d);
        let ql: Vec<usize> = (0..nq).map(|_| rng.random_range(0..classes)).collect();
        let tl: Vec<usize> = (0..nt).map(|_| rng.random_range(0..classes)).collect();
        let report = knn_recall(&to_matrix(&q), &ql, &to_matrix(&t), &tl, &ks).unwrap();
        let scaled = knn_recall(&to_matrix(&q).scale(3.5), &ql, &to_matrix(&t).scale(0.2), &tl, &ks).unwrap();
        let mut previous = 0.0;
        for k in ks {
            let got = report.recall_at[&k];
            let want = oracle_recall(&q, &ql, &t, &tl, k.min(nt));
            if got != want || got < previous || scaled.recall_at[&k] != got {
                return Err(format!("fixture {seed} K={k}: {got} vs oracle {want}"));
            }
            previous = got;
        }
    }
    Ok("100 fixtures match the sort oracle; monotone in K; scale invariant".into())
}

fn trend_reproduction() -> Outcome {
    let started = Instant::now();
    let base = TrainConfig {
        epochs: 40,
        learning_rate: 0.03,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let data = SyntheticConfig {
            seed,
            noise_scale: 2.0,
            semantic_dim: 4,
            ..SyntheticConfig::preset("ucf51-gap").unwrap()
        };
        let ds: Dataset64 = generate_synthetic(&data).unwrap();
        let score = |v| run_cell(&ds, &base, v, Mode::AI, seed).map(|r| r.test_top1);
        let scores = (
            score(Variant::Baseline).map_err(|e| e.to_string())?,
            score(Variant::Ccl).map_err(|e| e.to_string())?,
            score(Variant::NoComposition).map_err(|e| e.to_string())?,
        );
        println!(
            "    seed {seed}: baseline {:.3}  ccl {:.3}  w/o composition {:.3}",
            scores.0, scores.1, scores.2
        );
        rows.push(scores);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (m_base, m_ccl, m_nocomp) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    let wins = rows.iter().filter(|r| r.1 > r.0).count();
    let secs = started.elapsed().as_secs_f64();
    let summary = format!(
        "mean top-1 baseline {m_base:.3}, ccl {m_ccl:.3}, w/o composition {m_nocomp:.3}; ccl > baseline in {wins}/5 seeds; {secs:.0}s"
    );
    let a = m_ccl - m_base > 0.0 && wins >= 4;
    let b = m_ccl >= m_nocomp;
    check(
        a && b && secs <= 600.0,
        summary.clone(),
        format!("{summary} [(a) {}, (b) {}]", if a { "pass" } else { "fail" }, if b { "pass" } else { "fail" }),
    )
}

fn determinism() -> Outcome {
    let data = SyntheticConfig {
        num_classes: 6,
        train_per_class: 10,
        test_per_class: 4,
        ..SyntheticConfig::preset("ucf51-gap").unwrap()
    };
    let ds: Dataset64 = generate_synthetic(&data).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.03,
        seed: 11,
        ..Default::default()
    };
    let (p1, h1) = fit(&ds, &cfg).unwrap();
    let (p2, h2) = fit(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&p1, dir.path().join("a"), false).unwrap();
    save_checkpoint(&p2, dir.path().join("b"), false).unwrap();
    let mut files_equal = true;
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        files_equal &= std::fs::read(dir.path().join("a").join(&name)).unwrap()
            == std::fs::read(dir.path().join("b").join(&name)).unwrap();
    }

    let single: Dataset32 = generate_synthetic(&data).unwrap();
    save_dataset(&single, dir.path().join("ds"), false).unwrap();
    let back: Dataset32 = load_dataset(dir.path().join("ds")).unwrap();
    check(
        h1 == h2 && h1.to_jsonl() == h2.to_jsonl() && files_equal && back == single,
        format!("{} iterations identical; checkpoints byte-identical; f32 round trip exact", h1.iterations.len()),
        format!("histories equal {}, checkpoints equal {files_equal}, round trip {}", h1 == h2, back == single),
    )
}

fn update_scoping() -> Outcome {
    let data = SyntheticConfig {
        num_classes: 6,
        train_per_class: 10,
        test_per_class: 2,
        ..SyntheticConfig::preset("ucf51-gap").unwrap()
    };
    let ds: Dataset64 = generate_synthetic(&data).unwrap();
    let teachers_before = ds.clone();
    let cfg = TrainConfig {
        epochs: 1000,
        max_iter: Some(100),
        learning_rate: 0.03,
        loss: LossConfig {
            lambda_cls: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let init = ModelParams::init(model_dims(&ds, &cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (params, history) = fit(&ds, &cfg).unwrap();
    let heads_frozen = params.compose_audio == init.compose_audio && params.compose_image == init.compose_image;
    let student_moved = params.student_hidden != init.student_hidden;
    check(
        history.iterations.len() == 100 && heads_frozen && student_moved && ds == teachers_before,
        "heads bit-identical over 100 steps with CE weight 0; teacher tables unchanged",
        format!("heads frozen {heads_frozen}, student moved {student_moved}, teachers unchanged {}", ds == teachers_before),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient correctness", gradient_correctness),
        ("loss oracle equivalence", loss_oracles),
        ("identity checks", identity_checks),
        ("retrieval correctness", retrieval_correctness),
        ("trend reproduction", trend_reproduction),
        ("determinism", determinism),
        ("update scoping", update_scoping),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
