use proptest::prelude::*;

use tumorseg::phantom::{degrade, generate_case, DomainProfile, PhantomSpec};
use tumorseg::volume::{
    labels_to_regions, load_labels, load_volume, regions_to_labels, save_labels, save_volume, znormalize, Foreground,
    Geometry, LabelMap, MultiModalVolume, Volume,
};

fn shape() -> impl Strategy<Value = [usize; 3]> {
    [1usize..5, 1usize..5, 1usize..5]
}

fn label_map() -> impl Strategy<Value = LabelMap> {
    shape().prop_flat_map(|s| {
        prop::collection::vec(0u8..4, s[0] * s[1] * s[2]).prop_map(move |data| {
            LabelMap::new(Volume::from_vec(Geometry::with_shape(s).unwrap(), data).unwrap()).unwrap()
        })
    })
}

fn float_volume() -> impl Strategy<Value = Volume<f32>> {
    (shape(), [0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0]).prop_flat_map(|(s, spacing)| {
        prop::collection::vec(-1e3f32..1e3, s[0] * s[1] * s[2])
            .prop_map(move |data| Volume::from_vec(Geometry::new(s, spacing).unwrap(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn regions_are_nested(labels in label_map()) {
        prop_assert!(labels_to_regions(&labels).is_hierarchical());
    }

    #[test]
    fn regions_round_trip_to_labels(labels in label_map()) {
        let back = regions_to_labels(&labels_to_regions(&labels), false).unwrap();
        prop_assert_eq!(back, labels);
    }

    #[test]
    fn znormalize_standardizes_the_foreground(
        values in prop::collection::vec(prop_oneof![Just(0.0f32), 1.0f32..100.0], 8..200),
    ) {
        let n = values.len();
        let v = Volume::from_vec(Geometry::with_shape([1, 1, n]).unwrap(), values.clone()).unwrap();
        let out = znormalize(&v, Foreground::Nonzero);
        let fg: Vec<f64> = values.iter().zip(out.data()).filter(|(a, _)| **a != 0.0).map(|(_, b)| *b as f64).collect();
        let raw: Vec<f64> = values.iter().filter(|a| **a != 0.0).map(|a| *a as f64).collect();
        let raw_mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        let raw_var = raw.iter().map(|x| (x - raw_mean).powi(2)).sum::<f64>() / raw.len().max(1) as f64;
        prop_assume!(raw_var.sqrt() > 1e-3);
        let mean = fg.iter().sum::<f64>() / fg.len() as f64;
        let sd = (fg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / fg.len() as f64).sqrt();
        prop_assert!(mean.abs() < 1e-6, "mean {mean}");
        prop_assert!((sd - 1.0).abs() < 1e-6, "sd {sd}");
        for (a, b) in values.iter().zip(out.data()) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn label_files_round_trip_exactly(labels in label_map()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.nii.gz");
        save_labels(&path, &labels).unwrap();
        prop_assert_eq!(load_labels(&path).unwrap(), labels);
    }

    #[test]
    fn float_files_round_trip_within_tolerance(v in float_volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t1.nii.gz");
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.shape(), v.shape());
        for a in 0..3 {
            prop_assert!((back.geometry().spacing[a] - v.geometry().spacing[a]).abs() < 1e-6);
        }
        for (a, b) in back.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn degrade_maps_geometry(
        s in [2usize..9, 2usize..9, 2usize..9],
        spacing in [0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0],
        factor in 1usize..3,
        seed in any::<u64>(),
    ) {
        let g = Geometry::new(s, spacing).unwrap();
        let image = MultiModalVolume::new([0, 1, 2, 3].map(|c| Volume::from_fn(g, |i, j, k| (i + j + k + c) as f32))).unwrap();
        let profile = DomainProfile { downsample_factor: factor, ..DomainProfile::low_quality() };
        let out = degrade(&image, &profile, seed).unwrap();
        prop_assert_eq!(out.geometry().shape, s.map(|x| x / factor));
        for a in 0..3 {
            prop_assert!((out.geometry().spacing[a] - spacing[a] * factor as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn phantoms_are_pure_functions_of_their_spec(seed in any::<u64>(), tumors in 0usize..3) {
        let spec = PhantomSpec {
            shape: [14, 16, 18],
            tumor_count: tumors,
            r_et: [0.8, 1.0],
            r_tc: [1.2, 1.5],
            r_wt: [1.8, 2.2],
            seed,
            ..PhantomSpec::default()
        };
        let (a_img, a_lab) = generate_case(&spec).unwrap();
        let (b_img, b_lab) = generate_case(&spec).unwrap();
        prop_assert_eq!(&a_img, &b_img);
        prop_assert_eq!(&a_lab, &b_lab);
        prop_assert!(labels_to_regions(&a_lab).is_hierarchical());
        prop_assert_eq!(a_lab.has_tumor(), tumors > 0);
    }
}

#[test]
fn regions_round_trip_exhaustively_on_a_2x2x2_grid() {
    let g = Geometry::with_shape([2, 2, 2]).unwrap();
    for code in 0u32..4u32.pow(8) {
        let labels = LabelMap::new(Volume::from_vec(g, (0..8).map(|i| ((code >> (2 * i)) & 3) as u8).collect()).unwrap()).unwrap();
        let regions = labels_to_regions(&labels);
        assert!(regions.is_hierarchical());
        assert_eq!(regions_to_labels(&regions, false).unwrap(), labels);
    }
}
