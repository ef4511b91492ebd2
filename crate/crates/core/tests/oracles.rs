mod common;

use adlsense::eval::{chi_square_sf, erfc, friedman_test, ln_gamma, mcnemar_test};
use adlsense::features::objects_to_grid;
use adlsense::features::{
    decode_feature_bundle, encode_feature_bundle, load_feature_bundle, store_feature_bundle,
    FeatureProvider, ObjectDetection, SyntheticProvider,
};
use adlsense::fusion::{
    apply_spatial_reference, concat_modalities, conv1d_forward, conv2d_forward, fuse, fuse_bundle,
    FusionWeights, PipelineConfig,
};
use adlsense::stream::{sample_windows, SamplerConfig};
use adlsense::synth::{synth_session, Activity, SynthConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

#[test]
fn conv_layers_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let c_in = rng.random_range(1..6);
        let c_out = rng.random_range(1..6);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let h = rng.random_range(k..8);
        let x = random_array3(&mut rng, (c_in, h, h + 1));
        let layer = random_conv2d(&mut rng, c_out, c_in, k, stride, padding);
        let fast = conv2d_forward(x.view(), &layer).unwrap();
        let slow = conv2d_oracle(&x, &layer);
        assert_eq!(fast.dim(), slow.dim());
        assert!(max_rel_err(fast.as_slice().unwrap(), slow.as_slice().unwrap()) < 1e-12);

        let t = rng.random_range(k..20);
        let x1 = random_array3(&mut rng, (1, c_in, t)).index_axis_move(ndarray::Axis(0), 0);
        let layer = random_conv1d(&mut rng, c_out, c_in, k, stride, padding);
        let fast = conv1d_forward(x1.view(), &layer).unwrap();
        let slow = conv1d_oracle(&x1, &layer);
        assert!(max_rel_err(fast.as_slice().unwrap(), slow.as_slice().unwrap()) < 1e-12);
    }
}

fn golden_bundle() -> adlsense::features::FeatureBundle {
    let session = synth_session(Activity::Dressing, &SynthConfig::default(), 21).unwrap();
    let windows = sample_windows(session.frames, SamplerConfig::default()).unwrap();
    let mut bundle = SyntheticProvider::default().features(&windows[3]).unwrap();
    bundle.objects = vec![
        ObjectDetection {
            class_id: 4,
            centroid: [0.4, 0.7],
            confidence: 0.9,
        },
        ObjectDetection {
            class_id: 30,
            centroid: [0.95, 0.05],
            confidence: 0.5,
        },
    ];
    bundle
}

#[test]
fn fusion_stack_matches_oracle() {
    let weights = FusionWeights::random(PipelineConfig::default(), 3).unwrap();
    let bundle = golden_bundle();
    let pose = apply_spatial_reference(&bundle.pose, &bundle.pose_joint_xy).unwrap();
    let fused = concat_modalities(
        &bundle.video,
        &pose,
        &objects_to_grid(&bundle.objects).unwrap(),
    )
    .unwrap();
    let fast = fuse(&fused, &weights).unwrap();
    let slow = fuse_oracle(&fused, &weights);
    assert!(max_rel_err(fast.as_slice(), &slow) < 1e-10);

    let (e, task) = fuse_bundle(&bundle, &weights).unwrap();
    assert_eq!(e, fast);
    assert_eq!(task.probs.len(), 11);
    assert!((task.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // frozen reference values for this fixture
    let golden = [
        (0, GOLDEN[0]),
        (1, GOLDEN[1]),
        (64, GOLDEN[2]),
        (127, GOLDEN[3]),
    ];
    for (i, v) in golden {
        assert!(
            (e.as_slice()[i] - v).abs() <= 1e-9 * v.abs().max(1.0),
            "embedding[{i}] = {:.17e}",
            e.as_slice()[i]
        );
    }
}

const GOLDEN: [f64; 4] = [
    -2.67408071139097481e-2,
    -1.22602436548487764e-2,
    5.43538446926118274e-2,
    -2.68356202403141827e-2,
];

#[test]
fn feature_bundle_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = golden_bundle();
    let a = dir.path().join("a.feat");
    let b = dir.path().join("b.feat");
    store_feature_bundle(&bundle, &a).unwrap();
    let loaded = load_feature_bundle(&a).unwrap();
    store_feature_bundle(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.pose, bundle.pose);
    assert_eq!(loaded.video, bundle.video);
    assert_eq!(loaded.pose_joint_xy, bundle.pose_joint_xy);
    let bytes = encode_feature_bundle(&bundle).unwrap();
    assert_eq!(decode_feature_bundle(&bytes).unwrap().objects.len(), 2);
}

#[test]
fn special_functions_match_statrs() {
    for &x in &[0.1, 0.5, 1.0, 2.5, 7.0, 30.5, 171.0] {
        let want = statrs::function::gamma::ln_gamma(x);
        assert!(
            (ln_gamma(x) - want).abs() <= 1e-12 * want.abs().max(1.0),
            "ln_gamma({x})"
        );
    }
    for &x in &[0.0, 0.01, 0.3, 1.0, 1.7, 3.0, 5.5] {
        let want = statrs::function::erf::erfc(x);
        assert!((erfc(x) - want).abs() <= 1e-13 + 1e-10 * want, "erfc({x})");
    }
    for df in 1..12 {
        let dist = ChiSquared::new(df as f64).unwrap();
        for &q in &[
            0.01,
            0.5,
            1.0,
            df as f64,
            df as f64 + 1.0,
            2.0 * df as f64,
            25.0,
            80.0,
        ] {
            let want = dist.sf(q);
            let got = chi_square_sf(q, df as f64);
            assert!(
                (got - want).abs() <= 1e-12 + 1e-9 * want,
                "df {df} q {q}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn mcnemar_against_binomial() {
    for n in 1..=25u64 {
        let dist = Binomial::new(0.5, n).unwrap();
        for b in 0..=n {
            let c = n - b;
            let k = b.min(c);
            let want = (2.0 * dist.cdf(k)).min(1.0);
            let got = mcnemar_test(b, c).exact_p.unwrap();
            assert!((got - want).abs() < 1e-12, "b {b} c {c}");
        }
    }
}

#[test]
fn friedman_hand_rank_oracle() {
    // 5 blocks, 4 methods, with ties ranked by hand
    let m = vec![
        vec![1.0, 0.0, 1.0, 0.0], // ranks 3.5 1.5 3.5 1.5
        vec![1.0, 1.0, 1.0, 1.0], // 2.5 each
        vec![0.0, 0.0, 0.0, 1.0], // 2 2 2 4
        vec![1.0, 0.0, 0.0, 0.0], // 4 2 2 2
        vec![1.0, 1.0, 0.0, 1.0], // 3 3 1 3
    ];
    let r = friedman_test(&m).unwrap();
    let sums = [15.0, 11.0, 11.0, 13.0];
    assert_eq!(r.rank_sums, sums);
    let q = 12.0 / (5.0 * 4.0 * 5.0) * sums.iter().map(|s| s * s).sum::<f64>() - 3.0 * 5.0 * 5.0;
    assert!((r.q - q).abs() < 1e-12);
    assert_eq!(r.df, 3);
}
