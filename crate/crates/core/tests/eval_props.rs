mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrfocus::eval::{accuracy, pose_error, rho_ablation_aggregate, PoseError, SequenceResult, Spread};

use common::random_pose;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pose_error_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let (ab, ba) = (pose_error(&a, &b), pose_error(&b, &a));
        prop_assert!((ab.rotation_deg - ba.rotation_deg).abs() <= 1e-9);
        prop_assert!((ab.translation - ba.translation).abs() <= 1e-9);
    }

    #[test]
    fn pose_error_ignores_a_shared_world_transform(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, g) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        let e = pose_error(&a, &b);
        let f = pose_error(&g.compose(&a), &g.compose(&b));
        prop_assert!((e.rotation_deg - f.rotation_deg).abs() <= 1e-9 * e.rotation_deg.max(1.0));
        prop_assert!((e.translation - f.translation).abs() <= 1e-9 * e.translation.max(1.0));
    }

    #[test]
    fn accuracy_grows_with_both_thresholds(
        seed in any::<u64>(), r in 0.0f64..10.0, t in 0.0f64..0.2, dr in 0.0f64..5.0, dt in 0.0f64..0.1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results = SequenceResult {
            errors: (0..rng.gen_range(1..40))
                .map(|_| PoseError { rotation_deg: rng.gen_range(0.0..12.0), translation: rng.gen_range(0.0..0.3) })
                .collect(),
            failures: rng.gen_range(0..5),
        };
        let base = accuracy(&results, r, t);
        prop_assert!(accuracy(&results, r + dr, t) >= base);
        prop_assert!(accuracy(&results, r, t + dt) >= base);
    }

    #[test]
    fn ablation_score_ignores_per_sequence_scale(
        seed in any::<u64>(), n_seq in 1usize..5, n_r in 1usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let errors: Vec<Vec<f64>> = (0..n_seq)
            .map(|_| (0..n_r).map(|_| rng.gen_range(0.01..1.0)).collect())
            .collect();
        // powers of two keep the rescaling exact
        let scaled: Vec<Vec<f64>> = errors
            .iter()
            .map(|row| {
                let s = 2f64.powi(rng.gen_range(-8..8));
                row.iter().map(|e| e * s).collect()
            })
            .collect();
        let radii: Vec<f64> = (1..=n_r).map(|r| r as f64).collect();
        let a = rho_ablation_aggregate(&errors, &radii, Spread::Population).unwrap();
        let b = rho_ablation_aggregate(&scaled, &radii, Spread::Population).unwrap();
        prop_assert_eq!(a.scores, b.scores);
        prop_assert_eq!(a.argmin, b.argmin);
    }
}
