//! Invariant checks: indexing layout, relabel idempotence, container round
//! trips, flow-field bounds and locality, and shape-statistic ranges.

use proptest::prelude::*;

use cellflow_core::flowgen::label_to_flow;
use cellflow_core::io;
use cellflow_core::labelops::shape_stats;
use cellflow_core::metrics::{f1_score, MatchResult};
use cellflow_core::raster::{LabelMask, Raster};
use cellflow_core::synth::{generate_image, SynthSpec};

fn raster_strategy() -> impl Strategy<Value = Raster> {
    (1usize..8, 1usize..8, 1usize..4).prop_flat_map(|(h, w, c)| {
        proptest::collection::vec(-1e6f32..1e6f32, h * w * c)
            .prop_map(move |data| Raster::new(h, w, c, data).unwrap())
    })
}

fn mask_strategy() -> impl Strategy<Value = LabelMask> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u32..20, h * w)
            .prop_map(move |data| LabelMask::new(h, w, data).unwrap())
    })
}

proptest! {
    // value(r, c, ch) must agree with a reference scalar walk of the layout
    #[test]
    fn raster_indexing_matches_reference_loop(raster in raster_strategy()) {
        let mut cursor = 0usize;
        for r in 0..raster.height() {
            for c in 0..raster.width() {
                for ch in 0..raster.channels() {
                    prop_assert_eq!(raster.get(r, c, ch).to_bits(), raster.data()[cursor].to_bits());
                    cursor += 1;
                }
            }
        }
    }

    #[test]
    fn relabel_is_idempotent(mask in mask_strategy()) {
        let once = mask.relabel_sequential();
        let twice = once.relabel_sequential();
        prop_assert_eq!(&once, &twice);
        // nonzero ids afterwards are exactly 1..=K
        let ids = once.distinct_ids();
        for (i, id) in ids.iter().enumerate() {
            prop_assert_eq!(*id, i as u32 + 1);
        }
    }

    #[test]
    fn relabel_preserves_distinctness(mask in mask_strategy()) {
        let out = mask.relabel_sequential();
        for (a, b) in mask.data().iter().zip(out.data()) {
            prop_assert_eq!(*a == 0, *b == 0);
        }
        for i in 0..mask.data().len() {
            for j in (i + 1)..mask.data().len() {
                let same_before = mask.data()[i] == mask.data()[j];
                let same_after = out.data()[i] == out.data()[j];
                prop_assert_eq!(same_before, same_after);
            }
        }
    }

    #[test]
    fn f1_is_symmetric_in_fp_fn(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let a = f1_score(&MatchResult { tp, fp, fn_, pairs: Vec::new() });
        let b = f1_score(&MatchResult { tp, fp: fn_, fn_: fp, pairs: Vec::new() });
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn mask_png_round_trip(mask in mask_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        io::write_mask(&mask, &path).unwrap();
        prop_assert_eq!(io::read_mask(&path).unwrap(), mask);
    }
}

#[test]
fn cft_round_trip_preserves_bytes_for_10k_rasters() {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.cft");
    let mut rng = StdRng::seed_from_u64(0xCF7);
    for round in 0..10_000 {
        let h = rng.random_range(1..6);
        let w = rng.random_range(1..6);
        let c = rng.random_range(1..4);
        // arbitrary bit patterns, NaNs included: the container must not
        // canonicalize anything
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| f32::from_bits(rng.random::<u32>()))
            .collect();
        let raster = Raster::new(h, w, c, data).unwrap();
        io::write_raster(&raster, &path).unwrap();
        let back = io::read_raster(&path).unwrap();
        assert_eq!(back.height(), raster.height());
        assert_eq!(back.width(), raster.width());
        assert_eq!(back.channels(), raster.channels());
        for (a, b) in raster.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "payload bytes differ in round {round}");
        }
    }
}

#[test]
fn flow_magnitude_bounded_on_random_masks() {
    let spec = SynthSpec {
        height: 96,
        width: 96,
        blob_count: (2, 8),
        radius: (3.0, 12.0),
        touching_fraction: 0.3,
        noise_sigma: 0.0,
        contamination: 0.0,
    };
    for seed in 0..100u64 {
        let sample = generate_image(&spec, seed);
        let target = label_to_flow(&sample.mask);
        for i in 0..96 * 96 {
            let dy = target.flow.data()[2 * i] as f64;
            let dx = target.flow.data()[2 * i + 1] as f64;
            let mag = (dy * dy + dx * dx).sqrt();
            assert!(mag <= 1.0 + 1e-5, "seed {seed}: |flow| = {mag}");
            if sample.mask.data()[i] == 0 {
                assert_eq!((dy, dx), (0.0, 0.0), "background flow must be zero");
            }
        }
    }
}

#[test]
fn flow_is_invariant_under_id_permutation() {
    let spec = SynthSpec {
        height: 64,
        width: 64,
        blob_count: (3, 6),
        radius: (4.0, 10.0),
        touching_fraction: 0.5,
        noise_sigma: 0.0,
        contamination: 0.0,
    };
    for seed in [3u64, 17, 40] {
        let sample = generate_image(&spec, seed);
        let base = label_to_flow(&sample.mask);

        // permute ids: id -> K + 1 - id
        let k = sample.mask.max_id();
        let mut permuted = sample.mask.clone();
        for v in permuted.data_mut() {
            if *v != 0 {
                *v = k + 1 - *v;
            }
        }
        let other = label_to_flow(&permuted);
        for (a, b) in base.flow.data().iter().zip(other.flow.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn shape_ratios_stay_in_range_on_1000_blobs() {
    let spec = SynthSpec {
        height: 128,
        width: 128,
        blob_count: (8, 14),
        radius: (2.0, 16.0),
        touching_fraction: 0.4,
        noise_sigma: 0.0,
        contamination: 0.0,
    };
    let mut seen = 0usize;
    let mut seed = 0u64;
    while seen < 1000 {
        let sample = generate_image(&spec, seed);
        for s in shape_stats(&sample.mask) {
            assert!(s.solidity <= 1.0 + 1e-9, "solidity {}", s.solidity);
            assert!(s.solidity > 0.0);
            assert!(s.eccentricity <= 1.0 + 1e-9, "eccentricity {}", s.eccentricity);
            assert!(s.size >= 1);
            seen += 1;
        }
        seed += 1;
    }
}
