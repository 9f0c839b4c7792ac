//! Loss and retrieval values against brute-force enumeration written
//! independently of the library kernels.

use ccl::eval::knn_recall;
use ccl::losses::{ccl_total, cross_entropy, info_nce, jsd, modality_objective, multiclass_nce};
use ccl::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

fn close(name: &str, seed: u64, got: f64, want: f64) {
    assert!((got - want).abs() <= TOL, "{name} fixture {seed}: {got} vs oracle {want}");
}

#[test]
fn cross_entropy_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        close("cross_entropy", seed, cross_entropy(&to_matrix(&f.p_v), &f.labels).unwrap(), oracle_ce(&f.p_v, &f.labels));
    }
}

#[test]
fn info_nce_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        for tau in [0.1, 0.5, 1.0] {
            let got = info_nce(&to_matrix(&f.x_v), &to_matrix(&f.x_a), tau).unwrap();
            close("info_nce", seed, got, oracle_info_nce(&f.x_v, &f.x_a, tau));
        }
    }
}

#[test]
fn multiclass_nce_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        for tau in [0.1, 0.5] {
            let got = multiclass_nce(&to_matrix(&f.x_v), &to_matrix(&f.x_i), &f.labels, tau).unwrap();
            close("multiclass_nce", seed, got, oracle_nce(&f.x_v, &f.x_i, &f.labels, tau));
        }
    }
}

#[test]
fn jsd_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        let got = jsd(&to_matrix(&f.p_v), &to_matrix(&f.p_av)).unwrap();
        close("jsd", seed, got, oracle_jsd(&f.p_v, &f.p_av));
    }
}

#[test]
fn modality_objective_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        for cfg in configs() {
            let (lambda, tau) = (cfg.lambda, cfg.tau_audio);
            let got = modality_objective(
                &to_matrix(&f.x_v),
                &to_matrix(&f.x_a),
                &to_matrix(&f.x_av),
                &f.labels,
                lambda,
                tau,
                &cfg,
            )
            .unwrap();
            close("modality_objective", seed, got, oracle_modality(&f.x_v, &f.x_a, &f.x_av, &f.labels, lambda, tau, &cfg));
        }
    }
}

#[test]
fn ccl_total_matches_oracle() {
    for seed in 0..FIXTURES {
        let f = fixture(seed);
        let forward = forward_outputs(&f);
        for cfg in configs() {
            let got = ccl_total(&forward, &forward.x_a, &forward.x_i, &f.labels, &cfg).unwrap();
            let (l_cls, l_distill, l_total) = oracle_total(&f, &cfg);
            close("l_cls", seed, got.l_cls, l_cls);
            close("l_distill", seed, got.l_distill, l_distill);
            close("l_total", seed, got.l_total, l_total);
        }
    }
}

#[test]
fn fixed_reference_values() {
    let eye = Matrix::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert!((info_nce(&eye, &eye, 1.0).unwrap() - 0.3133).abs() < 1e-4);
    assert!((multiclass_nce(&eye, &eye, &[0, 1], 1.0).unwrap() - 0.6266).abs() < 1e-4);
    let p = Matrix::<f64>::from_rows(&[[0.75, 0.25]]).unwrap();
    let q = Matrix::from_rows(&[[0.25, 0.75]]).unwrap();
    assert!((jsd(&p, &q).unwrap() - 0.5493).abs() < 1e-4);
}

#[test]
fn two_sample_nce_is_binary_nce() {
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=6);
        let a = random_rows(&mut rng, 2, d);
        let c = random_rows(&mut rng, 2, d);
        let tau = rng.random_range(0.1..1.0);
        // each anchor: own candidate positive, the other negative
        let p = similarity_probs(&a, &c, tau);
        let binary = (0..2)
            .map(|i| -p[i][i].ln() - (1.0 - p[i][1 - i]).ln())
            .sum::<f64>()
            / 2.0;
        let got = multiclass_nce(&to_matrix(&a), &to_matrix(&c), &[0, 1], tau).unwrap();
        assert!((got - binary).abs() < 1e-12, "fixture {seed}: {got} vs {binary}");
    }
}

#[test]
fn knn_recall_matches_sort_oracle() {
    let ks = [1, 5, 10];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = rng.random_range(1..=20);
        let nt = rng.random_range(1..=50);
        let d = rng.random_range(2..=8);
        let k = rng.random_range(2..=6);
        let q = random_rows(&mut rng, nq, d);
        let t = random_rows(&mut rng, nt, d);
        let ql: Vec<usize> = (0..nq).map(|_| rng.random_range(0..k)).collect();
        let tl: Vec<usize> = (0..nt).map(|_| rng.random_range(0..k)).collect();
        let report = knn_recall(&to_matrix(&q), &ql, &to_matrix(&t), &tl, &ks).unwrap();
        let mut previous = 0.0;
        for k in ks {
            let got = report.recall_at[&k];
            assert_eq!(got, oracle_recall(&q, &ql, &t, &tl, k.min(nt)), "fixture {seed} K={k}");
            assert!(got >= previous);
            previous = got;
        }
    }
}
