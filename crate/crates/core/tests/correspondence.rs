use pgssl::augment::{apply_augmentation, build_correspondence, sample_augmentation, AugConfig, AugmentationParams, PriorDictionary, Rotation};
use pgssl::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A grid of source linear indices, transformed one explicit step at a
/// time: crop, nearest-neighbour rescale, counter-clockwise quarter turns,
/// vertical flip, horizontal flip.
fn source_index_view(p: &AugmentationParams) -> Vec<Vec<usize>> {
    let (_, w) = p.source;
    let c = p.crop;
    let cropped: Vec<Vec<usize>> = (0..c.height).map(|r| (0..c.width).map(|col| (c.top + r) * w + c.left + col).collect()).collect();
    let (hv, wv) = p.out_size;
    let mut g: Vec<Vec<usize>> = (0..hv).map(|a| (0..wv).map(|b| cropped[a * c.height / hv][b * c.width / wv]).collect()).collect();
    let turns = match p.rotation {
        Rotation::R0 => 0,
        Rotation::R90 => 1,
        Rotation::R180 => 2,
        Rotation::R270 => 3,
    };
    for _ in 0..turns {
        let (rows, cols) = (g.len(), g[0].len());
        // one counter-clockwise turn: new[i][j] = old[j][cols - 1 - i]
        g = (0..cols).map(|i| (0..rows).map(|j| g[j][cols - 1 - i]).collect()).collect();
    }
    if p.vflip {
        g.reverse();
    }
    if p.hflip {
        for row in g.iter_mut() {
            row.reverse();
        }
    }
    g
}

/// Forward-maps every source pixel through the second view and pairs each
/// first-view pixel with the first second-view pixel holding its source.
fn oracle(p1: &AugmentationParams, p2: &AugmentationParams) -> Vec<u32> {
    let (h, w) = p1.source;
    let v1 = source_index_view(p1);
    let v2 = source_index_view(p2);
    let w2 = v2[0].len();
    let mut first = vec![PriorDictionary::NO_MATCH; h * w];
    for (r, row) in v2.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            let j = (r * w2 + c) as u32;
            if first[s] == PriorDictionary::NO_MATCH {
                first[s] = j;
            }
        }
    }
    v1.iter().flatten().map(|&s| first[s]).collect()
}

#[test]
fn thousand_pairs_match_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let configs = [
        AugConfig { out_size: 16, ..AugConfig::default() },
        AugConfig { out_size: 24, crop_scale: (0.1, 1.0), ..AugConfig::default() },
        AugConfig { out_size: 8, ..AugConfig::default() },
        AugConfig { out_size: 13, crop_scale: (0.2, 0.6), ..AugConfig::default() },
    ];
    let mut mismatches = 0;
    let mut matched = 0;
    for i in 0..1000 {
        let cfg = &configs[i % configs.len()];
        let p1 = sample_augmentation(&mut rng, cfg, (16, 16)).unwrap();
        let p2 = sample_augmentation(&mut rng, cfg, (16, 16)).unwrap();
        let dict = build_correspondence(&p1, &p2).unwrap();
        let want = oracle(&p1, &p2);
        mismatches += dict.entries().iter().zip(&want).filter(|(a, b)| a != b).count();
        matched += dict.matched_count();
    }
    assert_eq!(mismatches, 0);
    assert!(matched > 0);
}

#[test]
fn non_square_crops_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = AugConfig { out_size: 10, ..AugConfig::default() };
    for _ in 0..200 {
        let p1 = sample_augmentation(&mut rng, &cfg, (12, 20)).unwrap();
        let p2 = sample_augmentation(&mut rng, &cfg, (12, 20)).unwrap();
        assert_eq!(build_correspondence(&p1, &p2).unwrap().entries(), oracle(&p1, &p2).as_slice());
    }
}

#[test]
fn identity_pair_matches_every_pixel_to_itself() {
    let p = AugmentationParams::identity(16, 16);
    let d = build_correspondence(&p, &p).unwrap();
    assert_eq!(d.matched_count(), 256);
    assert!(d.pairs().all(|(i, j)| i == j));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matched_pixels_share_a_source_value(seed in any::<u64>(), out in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugConfig { out_size: out, ..AugConfig::default() };
        let p1 = sample_augmentation(&mut rng, &cfg, (16, 16)).unwrap().geometric_only();
        let p2 = sample_augmentation(&mut rng, &cfg, (16, 16)).unwrap().geometric_only();
        let x = Tensor::<f64>::from_fn(&[1, 16, 16], |i| i as f64);
        let a = apply_augmentation(&x, &p1).unwrap();
        let b = apply_augmentation(&x, &p2).unwrap();
        let d = build_correspondence(&p1, &p2).unwrap();
        for (i, j) in d.pairs() {
            prop_assert_eq!(a.data()[i], b.data()[j]);
        }
        // a pixel is unmatched only when its source is absent from view 2
        for (i, &e) in d.entries().iter().enumerate() {
            if e == PriorDictionary::NO_MATCH {
                prop_assert!(!b.data().contains(&a.data()[i]));
            }
        }
    }

    #[test]
    fn swapping_views_inverts_on_one_to_one_matches(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // equal crop and output sizes make both resamplers bijective
        let cfg = AugConfig { crop_scale: (1.0, 1.0), out_size: 16, ..AugConfig::default() };
        let p1 = sample_augmentation(&mut rng, &cfg, (16, 16)).unwrap();
        let p2 = sample_augmentation(&mut rng, &cfg, (16, 16)).unwrap();
        let fwd = build_correspondence(&p1, &p2).unwrap();
        let back = build_correspondence(&p2, &p1).unwrap();
        prop_assert_eq!(fwd.matched_count(), 256);
        for (i, j) in fwd.pairs() {
            prop_assert_eq!(back.get(j), Some(i));
        }
    }
}
