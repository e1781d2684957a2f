use std::collections::HashSet;

use proptest::prelude::*;

use super::*;

fn one_class(n: usize) -> LabelMap {
    LabelMap::new(1, n, vec![1; n]).unwrap()
}

#[test]
fn split_sizes_follow_the_one_fortynine_fifty_protocol() {
    let m = make_split(&one_class(100), [0.01, 0.49, 0.50], 3).unwrap();
    assert_eq!((m.train.len(), m.pool.len(), m.test.len()), (1, 49, 50));
}

#[test]
fn split_is_deterministic() {
    let labels = LabelMap::new(10, 10, (0..100).map(|i| (i % 4 + 1) as u16).collect()).unwrap();
    let a = make_split(&labels, [0.1, 0.4, 0.5], 11).unwrap();
    assert_eq!(a, make_split(&labels, [0.1, 0.4, 0.5], 11).unwrap());
    assert_ne!(a, make_split(&labels, [0.1, 0.4, 0.5], 12).unwrap());
}

#[test]
fn degenerate_all_train_split() {
    let m = make_split(&one_class(20), [1.0, 0.0, 0.0], 0).unwrap();
    assert_eq!(m.train, (0..20).collect::<Vec<_>>());
    assert!(m.pool.is_empty() && m.test.is_empty());
}

#[test]
fn tiny_train_share_still_gives_one_sample_per_class() {
    let labels = LabelMap::new(1, 12, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2]).unwrap();
    let m = make_split(&labels, [0.01, 0.49, 0.50], 5).unwrap();
    m.validate(&labels).unwrap();
    assert_eq!(m.train.len(), 2);
}

#[test]
fn split_errors() {
    let labels = LabelMap::new(1, 5, vec![1, 1, 1, 2, 2]).unwrap();
    assert!(matches!(
        make_split(&labels, [0.5, 0.5, 0.0], 0),
        Err(HsiError::ClassTooSmall { class: 2, count: 2, required: 3 })
    ));
    assert!(matches!(
        make_split(&one_class(5), [0.5, 0.5, 0.5], 0),
        Err(HsiError::InvalidRatios(_))
    ));
}

#[test]
fn manifest_json_keys_and_overlap_check() {
    let m = make_split(&one_class(10), [0.2, 0.3, 0.5], 1).unwrap();
    let json = m.to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["seed", "ratios", "train", "pool", "test"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(SplitManifest::from_json(&json).unwrap(), m);
    let bad = r#"{"seed":0,"ratios":[0.5,0.5,0],"train":[1,2],"pool":[2],"test":[]}"#;
    assert!(matches!(SplitManifest::from_json(bad), Err(HsiError::ManifestOverlap(2))));
}

#[test]
fn noise_free_pixels_equal_their_prototype() {
    let p = SynthParams {
        classes: 3,
        rows: 12,
        cols: 10,
        bands: 8,
        noise_sigma: 0.0,
        domain_shift: 0.0,
        seed: 4,
    };
    let scene = synth_scene(&p).unwrap();
    for r in 0..12 {
        for c in 0..10 {
            let class = scene.labels.get(r, c) as usize - 1;
            let proto: Vec<f32> = prototype(class, 3, 8, 0.0).iter().map(|&v| v as f32).collect();
            assert_eq!(scene.cube.spectrum(r, c), proto.as_slice());
        }
    }
    let hist = scene.labels.histogram();
    assert_eq!(hist[0], 0);
    assert!(hist[1..].iter().all(|&n| n > 0));
}

#[test]
fn domain_shift_moves_prototypes_by_closed_form_distance() {
    // For one sine period sampled at k >= 3 evenly spaced bands,
    // ‖sin(θ+a) − sin(θ+b)‖² = 2k·sin²((a−b)/2).
    let bands = 16;
    let base = SynthParams {
        classes: 4,
        rows: 16,
        cols: 16,
        bands,
        noise_sigma: 0.0,
        domain_shift: 0.0,
        seed: 9,
    };
    let a = synth_scene(&base).unwrap();
    let b = synth_scene(&SynthParams {
        domain_shift: std::f64::consts::PI,
        ..base
    })
    .unwrap();
    assert_eq!(a.labels, b.labels);
    let expected = (2.0 * bands as f64).sqrt();
    for class in 1..=4u16 {
        let mean = |s: &SynthScene| -> Vec<f64> {
            let idx: Vec<usize> = (0..256).filter(|&i| s.labels.at_index(i) == class).collect();
            (0..bands)
                .map(|band| idx.iter().map(|&i| s.cube.data()[i * bands + band] as f64).sum::<f64>() / idx.len() as f64)
                .collect()
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let dist = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist - expected).abs() < 1e-5, "class {class}: {dist} vs {expected}");
    }
}

#[test]
fn synth_validation() {
    let p = SynthParams {
        classes: 5,
        rows: 2,
        cols: 2,
        bands: 8,
        noise_sigma: 0.1,
        domain_shift: 0.0,
        seed: 0,
    };
    assert!(matches!(synth_scene(&p), Err(HsiError::InvalidSynth(_))));
    assert!(matches!(
        synth_scene(&SynthParams { classes: 1, rows: 4, cols: 4, ..p.clone() }),
        Err(HsiError::InvalidSynth(_))
    ));
    assert!(matches!(
        synth_scene(&SynthParams { classes: 3, bands: 2, rows: 4, cols: 4, ..p }),
        Err(HsiError::InvalidSynth(_))
    ));
}

#[test]
fn nearest_prototype_classifier_is_perfect_without_noise() {
    let p = SynthParams {
        classes: 5,
        rows: 20,
        cols: 20,
        bands: 10,
        noise_sigma: 0.0,
        domain_shift: 0.3,
        seed: 21,
    };
    let scene = synth_scene(&p).unwrap();
    let protos: Vec<Vec<f64>> = (0..5).map(|c| prototype(c, 5, 10, 0.3)).collect();
    for i in 0..400 {
        let (r, c) = scene.labels.coords(i);
        let s = scene.cube.spectrum(r, c);
        let best = (0..5)
            .min_by(|&a, &b| {
                let d = |k: usize| protos[k].iter().zip(s).map(|(p, v)| (p - *v as f64).powi(2)).sum::<f64>();
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap();
        assert_eq!(best as u16 + 1, scene.labels.at_index(i));
    }
}

proptest! {
    #[test]
    fn cube_bytes_round_trip(rows in 1usize..5, cols in 1usize..5, bands in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols * bands).map(|_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF)).collect();
        let cube = HsiCube::new(rows, cols, bands, data).unwrap();
        let bytes = cube.to_bytes();
        let back = HsiCube::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn splits_partition_labeled_pixels(
        labels in proptest::collection::vec(0u16..4, 60),
        train in 0.0f64..0.5,
        pool in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut labels = labels;
        // Guarantee every class has at least 3 pixels.
        for c in 0..3usize {
            for j in 0..3 {
                labels[c * 3 + j] = c as u16 + 1;
            }
        }
        let map = LabelMap::new(6, 10, labels).unwrap();
        let m = make_split(&map, [train, pool, 1.0 - train - pool], seed).unwrap();
        m.validate(&map).unwrap();
        let all: HashSet<usize> = m.train.iter().chain(&m.pool).chain(&m.test).copied().collect();
        prop_assert_eq!(all.len(), m.train.len() + m.pool.len() + m.test.len());
        prop_assert_eq!(all, map.labeled_indices().into_iter().collect::<HashSet<_>>());
    }

    #[test]
    fn interior_windows_equal_direct_slices(r in 3usize..7, c in 3usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cube = HsiCube::new(10, 10, 2, (0..200).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let labels = LabelMap::new(10, 10, vec![1; 100]).unwrap();
        let w = extract_window(&cube, &labels, (r, c), 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for b in 0..2 {
                    prop_assert_eq!(w.value(i, j, b), cube.value(r + i - 3, c + j - 3, b) as f64);
                }
            }
        }
    }
}
