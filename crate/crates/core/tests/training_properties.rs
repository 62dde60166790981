use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tumorseg::nn::{ParamStore, Tensor};
use tumorseg::optim::{poly_lr, sgd_nesterov_step, OptimizerConfig, Sgd, SgdState};
use tumorseg::phantom::{generate_case_indexed, PhantomSpec};
use tumorseg::train::augment::{augment, AugmentationConfig};

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    s
}

fn spec() -> PhantomSpec {
    PhantomSpec {
        shape: [16; 3],
        r_et: [1.2, 1.5],
        r_tc: [2.0, 2.5],
        r_wt: [3.0, 3.5],
        ..PhantomSpec::default()
    }
}

proptest! {
    #[test]
    fn poly_lr_strictly_decreases(total in 2usize..500, lr0 in 1e-5f64..1.0, power in 0.1f64..3.0) {
        let mut prev = poly_lr(0, total, lr0, power).unwrap();
        prop_assert_eq!(prev, lr0);
        for step in 1..=total {
            let lr = poly_lr(step, total, lr0, power).unwrap();
            prop_assert!(lr < prev, "step {step}: {lr} !< {prev}");
            prev = lr;
        }
        prop_assert_eq!(prev, 0.0);
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent(
        w in prop::collection::vec(-10.0f64..10.0, 1..8),
        g_seed in prop::collection::vec(-10.0f64..10.0, 8),
        lr in 1e-4f64..1.0,
        nesterov in any::<bool>(),
    ) {
        let g: Vec<f64> = g_seed[..w.len()].to_vec();
        let mut params = store(&w);
        let mut state = SgdState::new();
        for _ in 0..3 {
            sgd_nesterov_step(&mut params, &store(&g), &mut state, lr, 0.0, nesterov).unwrap();
        }
        let mut expect = w.clone();
        for _ in 0..3 {
            for (e, gi) in expect.iter_mut().zip(&g) {
                *e -= lr * gi;
            }
        }
        prop_assert_eq!(params.get("w").unwrap().data(), &expect[..]);
    }

    #[test]
    fn a_large_gradient_always_moves_the_parameters(
        w in prop::collection::vec(-1.0f64..1.0, 1..6),
        scale in 1e3f64..1e12,
    ) {
        let mut opt = Sgd::new(OptimizerConfig::default()).unwrap();
        let mut params = store(&w);
        let g: Vec<f64> = (0..w.len()).map(|i| if i % 2 == 0 { scale } else { -scale }).collect();
        opt.step(&mut params, store(&g), 0, 10).unwrap();
        prop_assert!(params.get("w").unwrap().data().iter().zip(&w).any(|(a, b)| a != b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn disabled_augmentation_keeps_every_voxel(index in 0u64..1000, seed in any::<u64>()) {
        let (image, labels) = generate_case_indexed(&spec(), index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, lab) = augment(&image, &labels, &AugmentationConfig::disabled(), &mut rng).unwrap();
        prop_assert_eq!(img, image);
        prop_assert_eq!(lab, labels);
    }

    #[test]
    fn rotation_roughly_preserves_tumour_volume(index in 0u64..1000, seed in any::<u64>()) {
        let mut cfg = AugmentationConfig::disabled();
        cfg.rotation.enabled = true;
        cfg.rotation.probability = 1.0;
        check_volume_kept(index, seed, &cfg)?;
    }

    #[test]
    fn mild_scaling_roughly_preserves_tumour_volume(index in 0u64..1000, seed in any::<u64>()) {
        let mut cfg = AugmentationConfig::disabled();
        cfg.scaling.enabled = true;
        cfg.scaling.probability = 1.0;
        cfg.scaling.factor = [0.95, 1.05];
        check_volume_kept(index, seed, &cfg)?;
    }
}

fn check_volume_kept(index: u64, seed: u64, cfg: &AugmentationConfig) -> Result<(), TestCaseError> {
    let (image, labels) = generate_case_indexed(&spec(), index).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img, lab) = augment(&image, &labels, cfg, &mut rng).unwrap();
    prop_assert_eq!(img.geometry(), image.geometry());
    let before = labels.histogram()[1..].iter().sum::<usize>() as f64;
    let after = lab.histogram()[1..].iter().sum::<usize>() as f64;
    prop_assert!((after - before).abs() < 0.2 * before, "{before} -> {after}");
    Ok(())
}
