//! Permutation behaviour of the registration network.

use elastoreg_core::network::{encode, init_model, predict_points, tnet4, Arch};
use elastoreg_core::Vec3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-20.0..20.0),
                rng.random_range(-15.0..15.0),
                rng.random_range(-12.0..12.0),
            ]
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pooled_features_ignore_point_order(seed in 0u64..1000) {
        let model = init_model(seed, &Arch::compact()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = cloud(&mut rng, 40).iter().map(|p| p.map(|v| v * 0.01)).collect();
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(encode(&model, &pts).unwrap(), encode(&model, &shuffled).unwrap());
        prop_assert_eq!(tnet4(&model, &pts).unwrap(), tnet4(&model, &shuffled).unwrap());
    }

    #[test]
    fn displacements_follow_source_order(seed in 0u64..1000, transformed in any::<bool>()) {
        let mut arch = Arch::compact();
        arch.concat_transformed_coords = transformed;
        let model = init_model(seed, &arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let src = cloud(&mut rng, 30);
        let tgt = cloud(&mut rng, 25);
        let base = predict_points(&model, &src, &tgt, true).unwrap();

        let mut perm: Vec<usize> = (0..src.len()).collect();
        perm.shuffle(&mut rng);
        let src_p: Vec<Vec3> = perm.iter().map(|&i| src[i]).collect();
        let mut tgt_p = tgt.clone();
        tgt_p.shuffle(&mut rng);
        let moved = predict_points(&model, &src_p, &tgt_p, true).unwrap();

        let g0 = base.gradients.as_ref().unwrap();
        let g1 = moved.gradients.as_ref().unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for a in 0..3 {
                prop_assert!(close(moved.displacements[k][a], base.displacements[i][a]));
                for j in 0..3 {
                    prop_assert!(close(g1.disp_grad[k][a][j], g0.disp_grad[i][a][j]));
                }
            }
            for r in 0..6 {
                prop_assert!(close(moved.stresses[k][r], base.stresses[i][r]));
            }
        }
    }
}

#[test]
fn zero_heads_predict_identity() {
    let model = init_model(5, &Arch::compact()).unwrap().with_zero_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = cloud(&mut rng, 20);
    let out = predict_points(&model, &src, &cloud(&mut rng, 20), true).unwrap();
    assert!(out.displacements.iter().flatten().all(|&v| v == 0.0));
    assert!(out.stresses.iter().flatten().all(|&v| v == 0.0));
}
