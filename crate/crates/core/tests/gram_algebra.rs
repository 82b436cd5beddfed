use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleless::style::{gram, gram_matrix, FeatureMap};
use styleless::{Tape, Tensor};

mod common;
use common::{gram_oracle, jacobi_eigenvalues};

fn random_map(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let c = rng.random_range(1..=8);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new([c, h, w], data).unwrap()
}

#[test]
fn jacobi_oracle_recovers_known_spectrum() {
    let mut ev = jacobi_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
    ev.sort_by(f64::total_cmp);
    assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
}

#[test]
fn gram_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let f = random_map(&mut rng);
        let g = gram_matrix(&FeatureMap::new(0, f.clone()).unwrap()).unwrap();
        let oracle = gram_oracle(&f);
        let c = g.channels();
        for i in 0..c {
            for j in 0..c {
                assert!((g.get(i, j) - oracle[i][j]).abs() <= 1e-12 * (1.0 + oracle[i][j].abs()));
            }
        }
    }
}

#[test]
fn gram_is_symmetric_psd_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..100 {
        let f = random_map(&mut rng);
        let g = gram_matrix(&FeatureMap::new(0, f.clone()).unwrap()).unwrap();
        let c = g.channels();
        for i in 0..c {
            for j in 0..c {
                assert_eq!(g.get(i, j), g.get(j, i), "map {n}: asymmetric at ({i},{j})");
            }
        }
        let rows: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| g.get(i, j)).collect()).collect();
        let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for ev in jacobi_eigenvalues(rows) {
            assert!(ev >= -1e-12 * scale, "map {n}: eigenvalue {ev}");
        }
        let a: f64 = rng.random_range(-3.0..3.0);
        let scaled = gram_matrix(&FeatureMap::new(0, f.map(|v| a * v)).unwrap()).unwrap();
        for (s, g) in scaled.values.data().iter().zip(g.values.data()) {
            let want = a * a * g;
            assert!((s - want).abs() <= 1e-10 * want.abs().max(1e-300), "map {n}: {s} vs {want}");
        }
    }
}

#[test]
fn tape_gram_agrees_with_direct_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let f = random_map(&mut rng);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(f.clone());
        let g = gram(&mut tape, v).unwrap();
        let direct = gram_matrix(&FeatureMap::new(0, f).unwrap()).unwrap();
        for (a, b) in tape.value(g).data().iter().zip(direct.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
