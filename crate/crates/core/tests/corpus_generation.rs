//! Corpus generation contracts: determinism, the spurious-cue dial, mask
//! consistency, augmentation identities, and the disk round trip.

use cavlab_core::corpus::{
    self, cue_label_correlation, cue_label_mutual_information, downscale_mask, generate,
    ingest_external, replace_background, AugmentKind, ConceptSpec, CorpusCounts, ShapeKind, Split,
    SpuriousSpec, IMAGE_SIZE,
};
use cavlab_core::tensor::Tensor;

fn small_counts() -> CorpusCounts {
    CorpusCounts {
        n_train_pos: 8,
        n_train_neg: 8,
        n_test_pos: 10,
        n_test_neg: 10,
        n_buffer: 12,
    }
}

fn circle_spec() -> ConceptSpec {
    ConceptSpec::for_shape(ShapeKind::Circle)
}

#[test]
fn same_seed_gives_bit_identical_corpora() {
    let a = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 7).unwrap();
    let b = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 7).unwrap();
    assert_eq!(a.len(), b.len());
    for i in 0..a.len() {
        assert_eq!(a.images[i].data(), b.images[i].data(), "image {i}");
        assert_eq!(a.masks[i].data(), b.masks[i].data(), "mask {i}");
        assert_eq!(a.meta(i).has_cue, b.meta(i).has_cue);
    }
    let c = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 8).unwrap();
    assert!(a.images[0].data() != c.images[0].data());
}

#[test]
fn full_strength_cue_is_forced() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(1.0), &small_counts(), 3).unwrap();
    for s in &corpus.manifest.samples {
        assert_eq!(s.has_cue, s.label, "sample {}", s.index);
    }
}

#[test]
fn half_strength_cue_is_roughly_independent() {
    let counts = CorpusCounts {
        n_train_pos: 250,
        n_train_neg: 250,
        n_test_pos: 250,
        n_test_neg: 250,
        n_buffer: 0,
    };
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.5), &counts, 11).unwrap();
    let corr = cue_label_correlation(&corpus.manifest);
    assert!(corr.abs() <= 0.1, "correlation {corr} too strong at rho=0.5");
}

#[test]
fn cue_information_is_monotone_in_strength() {
    let counts = CorpusCounts {
        n_train_pos: 250,
        n_train_neg: 250,
        n_test_pos: 250,
        n_test_neg: 250,
        n_buffer: 0,
    };
    let mut last = -1.0f64;
    for rho in [0.5, 0.7, 0.9, 1.0] {
        let corpus = generate(&circle_spec(), &SpuriousSpec::corner(rho), &counts, 13).unwrap();
        let mi = cue_label_mutual_information(&corpus.manifest);
        assert!(
            mi >= last - 1e-9,
            "MI not monotone: rho={rho} gives {mi}, previous {last}"
        );
        last = mi;
    }
}

#[test]
fn splits_are_balanced_and_buffer_is_negative() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.8), &small_counts(), 5).unwrap();
    for split in [Split::Train, Split::Test] {
        let pos = corpus.indices(split, Some(true)).len();
        let neg = corpus.indices(split, Some(false)).len();
        assert_eq!(pos, neg);
    }
    assert!(corpus
        .indices(Split::Buffer, None)
        .iter()
        .all(|&i| !corpus.meta(i).label));
}

#[test]
fn unbalanced_counts_are_rejected() {
    let mut counts = small_counts();
    counts.n_train_neg = 5;
    assert!(generate(&circle_spec(), &SpuriousSpec::corner(0.8), &counts, 5).is_err());
}

#[test]
fn infeasible_area_constraint_errors() {
    let mut spec = circle_spec();
    spec.min_area_fraction = 0.45;
    assert!(generate(&spec, &SpuriousSpec::corner(0.5), &small_counts(), 1).is_err());
}

#[test]
fn positive_masks_meet_area_minimum_and_negatives_are_blank() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 21).unwrap();
    let min_area = (0.01 * (IMAGE_SIZE * IMAGE_SIZE) as f32) as usize;
    for s in &corpus.manifest.samples {
        let area = corpus.masks[s.index]
            .data()
            .iter()
            .filter(|&&v| v > 0.5)
            .count();
        if s.label {
            assert!(area >= min_area, "sample {}: area {area}", s.index);
        } else {
            assert_eq!(area, 0);
        }
    }
}

#[test]
fn all_shape_kinds_rasterize() {
    for kind in corpus::ALL_SHAPES {
        let spec = ConceptSpec::for_shape(kind);
        let counts = CorpusCounts {
            n_train_pos: 3,
            n_train_neg: 3,
            n_test_pos: 3,
            n_test_neg: 3,
            n_buffer: 0,
        };
        let corpus = generate(&spec, &SpuriousSpec::corner(0.5), &counts, 17).unwrap();
        for &i in &corpus.indices(Split::Train, Some(true)) {
            assert!(corpus.masks[i].data().iter().any(|&v| v > 0.5), "{kind}");
        }
    }
}

#[test]
fn downscale_mask_block_cases() {
    let ones = Tensor::filled(&[64, 64], 1.0);
    assert!(downscale_mask(&ones).data().iter().all(|&v| v == 1.0));

    let zeros = Tensor::zeros(&[64, 64]);
    assert!(downscale_mask(&zeros).data().iter().all(|&v| v == 0.0));

    // a single aligned 4x4 block of ones sets exactly one cell
    let mut single = Tensor::zeros(&[64, 64]);
    for y in 8..12 {
        for x in 20..24 {
            single.set(&[y, x], 1.0);
        }
    }
    let d = downscale_mask(&single);
    let set: Vec<(usize, usize)> = (0..16)
        .flat_map(|y| (0..16).map(move |x| (y, x)))
        .filter(|&(y, x)| d.at(&[y, x]) > 0.5)
        .collect();
    assert_eq!(set, vec![(2, 5)]);
}

#[test]
fn replace_background_partitions_pixels() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 33).unwrap();
    let pos = corpus.indices(Split::Test, Some(true))[0];
    let donor = corpus.indices(Split::Test, Some(false))[0];
    let x = &corpus.images[pos];
    let m = &corpus.masks[pos];
    let d = &corpus.images[donor];

    let out = replace_background(x, m, d);
    for y in 0..IMAGE_SIZE {
        for xx in 0..IMAGE_SIZE {
            for c in 0..3 {
                let want = if m.at(&[y, xx]) > 0.5 {
                    x.at(&[c, y, xx])
                } else {
                    d.at(&[c, y, xx])
                };
                assert_eq!(out.at(&[c, y, xx]), want);
            }
        }
    }

    // mask extremes
    let all = Tensor::filled(&[64, 64], 1.0);
    assert_eq!(replace_background(x, &all, d).data(), x.data());
    let none = Tensor::zeros(&[64, 64]);
    assert_eq!(replace_background(x, &none, d).data(), d.data());
}

#[test]
fn donor_with_concept_is_rejected() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 35).unwrap();
    let pos = corpus.indices(Split::Test, Some(true))[0];
    let other_pos = corpus.indices(Split::Test, Some(true))[1];
    assert!(corpus.replace_background_checked(pos, other_pos).is_err());
}

#[test]
fn augmentation_identities() {
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 41).unwrap();
    let i = corpus.indices(Split::Test, Some(true))[0];
    let x = &corpus.images[i];

    // hflip is an involution
    let flipped = corpus::hflip(&corpus::hflip(x));
    assert_eq!(flipped.data(), x.data());

    // grayscale is idempotent
    let g1 = corpus::grayscale(x);
    let g2 = corpus::grayscale(&g1);
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert!((a - b).abs() <= 1e-6);
    }

    // zero-sigma noise is the identity
    let noisy = corpus.augment(i, AugmentKind::GaussianNoise(0.0), 9).unwrap();
    assert_eq!(noisy.data(), x.data());

    // seeded noise is deterministic
    let n1 = corpus.augment(i, AugmentKind::GaussianNoise(0.05), 9).unwrap();
    let n2 = corpus.augment(i, AugmentKind::GaussianNoise(0.05), 9).unwrap();
    assert_eq!(n1.data(), n2.data());

    // background replacement keeps the mask region intact
    let replaced = corpus.augment(i, AugmentKind::BackgroundReplace, 9).unwrap();
    for y in 0..IMAGE_SIZE {
        for xx in 0..IMAGE_SIZE {
            if corpus.masks[i].at(&[y, xx]) > 0.5 {
                for c in 0..3 {
                    assert_eq!(replaced.at(&[c, y, xx]), x.at(&[c, y, xx]));
                }
            }
        }
    }
}

#[test]
fn export_ingest_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 55).unwrap();
    corpus.export(dir.path()).unwrap();
    let back = ingest_external(dir.path(), None).unwrap();

    assert_eq!(
        serde_json::to_string(&corpus.manifest).unwrap(),
        serde_json::to_string(&back.manifest).unwrap()
    );
    for i in 0..corpus.len() {
        assert_eq!(corpus.images[i].data(), back.images[i].data(), "image {i}");
        assert_eq!(corpus.masks[i].data(), back.masks[i].data(), "mask {i}");
    }
}

#[test]
fn missing_mask_for_positive_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 57).unwrap();
    corpus.export(dir.path()).unwrap();
    let victim = corpus.indices(Split::Train, Some(true))[0];
    let mask_path = dir.path().join("masks").join(format!("{victim:05}.pgm"));
    std::fs::remove_file(&mask_path).unwrap();

    let err = ingest_external(dir.path(), None).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains(&format!("{victim:05}.pgm")),
        "error should name the file: {msg}"
    );
}

#[test]
fn activations_shape_is_enforced_with_override() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&circle_spec(), &SpuriousSpec::corner(0.9), &small_counts(), 59).unwrap();
    corpus.export(dir.path()).unwrap();

    // wrong channel count rejected without an override
    let odd: Vec<Tensor> = (0..corpus.len()).map(|_| Tensor::zeros(&[16, 16, 16])).collect();
    corpus.export_activations(dir.path(), &odd).unwrap();
    assert!(ingest_external(dir.path(), None).is_err());

    // accepted with --layer-shape
    let back = ingest_external(dir.path(), Some(&[16, 16, 16])).unwrap();
    assert_eq!(back.activations.as_ref().unwrap().len(), corpus.len());

    // default probe shape accepted without an override
    let good: Vec<Tensor> = (0..corpus.len()).map(|_| Tensor::zeros(&[32, 16, 16])).collect();
    corpus.export_activations(dir.path(), &good).unwrap();
    let back = ingest_external(dir.path(), None).unwrap();
    assert!(back.activations.is_some());
}

#[test]
fn class_corpus_covers_all_classes() {
    let corpus = corpus::generate_class_corpus(40, 3).unwrap();
    for class in 0..8 {
        assert_eq!(
            corpus
                .manifest
                .samples
                .iter()
                .filter(|s| s.class_label == class)
                .count(),
            5
        );
    }
}
