//! Task-head contract: stem geometry, residual path, persistence, and
//! frozen-codec downstream training.

use nzip::codec::{CodecConfig, CodecModel};
use nzip::data::make_synthetic_dataset;
use nzip::error::NzipError;
use nzip::task::{
    latent_accuracy, load_head, parse_activation, precompute_latents, save_head, train_downstream,
    DownstreamConfig, StemConfig, StemVariant, TaskHead,
};
use nzip::weights::{collect_model_entries, encode_entries, read_weight_file, write_weight_file};
use nzip_tensor::{Activation, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn seeded_z(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::constant((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(), shape).unwrap()
}

fn head(cz: usize, cf: usize, k: usize, cfg: StemConfig, seed: u64) -> TaskHead {
    TaskHead::new(cz, cf, k, cfg, &mut StdRng::seed_from_u64(seed)).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

mod stems {
    use super::*;

    #[test]
    fn subpixel_stem_upsamples_four_times_with_two_shuffles() {
        let mut h = head(8, 4, 3, StemConfig::default(), 1);
        let z = seeded_z(&[2, 8, 4, 4], 2);
        let f = h.stem(&z, false).unwrap();
        assert_eq!(f.shape(), &[2, 4, 16, 16]);
    }

    #[test]
    fn single_shuffle_block_reaches_the_same_geometry() {
        let cfg = StemConfig { pixel_shuffle_blocks: 1, ..StemConfig::default() };
        let mut h = head(8, 4, 3, cfg, 1);
        let z = seeded_z(&[2, 8, 4, 4], 2);
        let f = h.stem(&z, false).unwrap();
        assert_eq!(f.shape(), &[2, 4, 16, 16]);
    }

    #[test]
    fn truncated_stem_keeps_the_spatial_extent() {
        let mut h = head(8, 4, 3, StemConfig::truncated(), 1);
        let z = seeded_z(&[2, 8, 4, 4], 2);
        let f = h.stem(&z, false).unwrap();
        assert_eq!(f.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn residual_path_contributes_and_zeroing_it_matches_the_plain_stem() {
        let z = seeded_z(&[1, 6, 3, 3], 7);
        let mut with_skip = head(6, 4, 3, StemConfig::default(), 9);
        let full = with_skip.stem(&z, false).unwrap();

        // Same seed, so the three stem convs draw identical weights; the skip
        // conv draws afterwards and zeroing it must erase its contribution.
        let mut zeroed = head(6, 4, 3, StemConfig::default(), 9);
        zeroed.visit(&mut |name, t| {
            if name.starts_with("head.skip") {
                *t = Tensor::leaf(vec![0.0; t.numel()], t.shape()).unwrap();
            }
        });
        let without = zeroed.stem(&z, false).unwrap();
        assert!(
            max_abs_diff(&full, &without) > 1e-6,
            "residual path had no effect on the stem output"
        );

        let cfg = StemConfig { use_residual_block: false, ..StemConfig::default() };
        let mut plain = head(6, 4, 3, cfg, 9);
        let plain_out = plain.stem(&z, false).unwrap();
        assert_eq!(without.data(), plain_out.data());
    }

    #[test]
    fn truncated_head_without_skip_exposes_no_skip_parameters() {
        let mut names = Vec::new();
        head(8, 4, 3, StemConfig::truncated(), 1).visit(&mut |n, _| names.push(n));
        assert!(names.iter().all(|n| !n.starts_with("head.skip")));
        assert!(names.iter().all(|n| !n.starts_with("head.stem_bn")));
        assert!(names.contains(&"head.stem.0.weight".to_string()));

        let mut names = Vec::new();
        head(8, 4, 3, StemConfig::default(), 1).visit(&mut |n, _| names.push(n));
        for expected in [
            "head.stem.2.bias",
            "head.stem_bn.0.gamma",
            "head.skip.weight",
            "head.block.3.bn2.beta",
            "head.fc.weight",
        ] {
            assert!(names.contains(&expected.to_string()), "missing {expected}");
        }
    }

    #[test]
    fn identity_truncated_stem_passes_the_latent_through() {
        let c = 5;
        let mut h = head(c, c, 3, StemConfig::truncated(), 4);
        h.visit(&mut |name, t| {
            if name == "head.stem.0.weight" {
                let mut w = vec![0.0; c * c];
                for i in 0..c {
                    w[i * c + i] = 1.0;
                }
                *t = Tensor::leaf(w, &[c, c, 1, 1]).unwrap();
            } else if name == "head.stem.0.bias" {
                *t = Tensor::leaf(vec![0.0; c], &[c]).unwrap();
            }
        });
        let z = seeded_z(&[2, c, 6, 6], 11);
        let f = h.stem(&z, false).unwrap();
        assert_eq!(f.data(), z.data());
    }

    #[test]
    fn stem_rejects_latents_with_the_wrong_channel_count() {
        let mut h = head(8, 4, 3, StemConfig::default(), 1);
        let z = seeded_z(&[1, 7, 4, 4], 2);
        assert!(matches!(h.stem(&z, false), Err(NzipError::Dimension(_))));
        let flat = seeded_z(&[8, 4], 2);
        assert!(h.stem(&flat, false).is_err());
    }
}

mod classifier {
    use super::*;

    #[test]
    fn logits_have_one_row_per_sample_and_one_column_per_class() {
        let mut h = head(8, 4, 5, StemConfig::default(), 1);
        let z = seeded_z(&[3, 8, 4, 4], 2);
        let logits = h.forward(&z, false).unwrap();
        assert_eq!(logits.shape(), &[3, 5]);
    }

    #[test]
    fn untrained_head_scores_near_chance_on_balanced_labels() {
        let k = 4;
        let mut h = head(6, 8, k, StemConfig::default(), 13);
        let set: Vec<(Tensor, usize)> = (0..200)
            .map(|i| (seeded_z(&[1, 6, 4, 4], 1000 + i as u64), i % k))
            .collect();
        let acc = latent_accuracy(&mut h, &set).unwrap();
        assert!(
            (acc - 1.0 / k as f64).abs() <= 0.05,
            "untrained accuracy {acc} strays from chance 0.25"
        );
    }

    #[test]
    fn eval_mode_is_deterministic_and_leaves_the_head_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = head(6, 4, 3, StemConfig::default(), 21);
        let z = seeded_z(&[2, 6, 4, 4], 22);
        let before = save_head(&mut h, [0; 16], &dir.path().join("before.nzwt")).unwrap();
        let a = h.classify(&z).unwrap();
        let b = h.classify(&z).unwrap();
        assert_eq!(a.data(), b.data());
        let after = save_head(&mut h, [0; 16], &dir.path().join("after.nzwt")).unwrap();
        assert_eq!(before, after, "classify mutated head state");
    }

    #[test]
    fn train_mode_moves_batch_norm_running_statistics() {
        let mut h = head(6, 4, 3, StemConfig::default(), 21);
        let z = seeded_z(&[4, 6, 4, 4], 22);
        h.forward(&z, true).unwrap();
        let moved = h.stem_bns[0].running_mean.iter().any(|&m| m != 0.0);
        assert!(moved, "running mean still at its initial zeros after a training pass");
    }

    #[test]
    fn batched_accuracy_matches_per_sample_classification() {
        let mut h = head(5, 4, 3, StemConfig::default(), 31);
        let set: Vec<(Tensor, usize)> =
            (0..7).map(|i| (seeded_z(&[1, 5, 4, 4], 300 + i as u64), i % 3)).collect();
        let batched = latent_accuracy(&mut h, &set).unwrap();
        let mut correct = 0;
        for (z, label) in &set {
            let logits = h.classify(z).unwrap();
            let row = logits.data();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == *label {
                correct += 1;
            }
        }
        assert_eq!(batched, correct as f64 / set.len() as f64);
        assert!(latent_accuracy(&mut h, &[]).is_err());
    }
}

mod persistence {
    use super::*;

    fn exercised_head() -> TaskHead {
        let cfg = StemConfig {
            variant: StemVariant::Subpixel,
            pixel_shuffle_blocks: 1,
            use_residual_block: false,
            activation: Activation::Silu,
        };
        let mut h = head(5, 3, 4, cfg, 17);
        // One training pass so the running statistics are no longer trivial.
        h.forward(&seeded_z(&[4, 5, 4, 4], 18), true).unwrap();
        h
    }

    #[test]
    fn head_round_trips_through_its_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.nzwt");
        let mut h = exercised_head();
        let z = seeded_z(&[2, 5, 4, 4], 19);
        let logits = h.classify(&z).unwrap();

        let codec_digest = [7u8; 16];
        let first = save_head(&mut h, codec_digest, &path).unwrap();
        let (mut loaded, digest) = load_head(&path).unwrap();
        assert_eq!(digest, codec_digest);
        assert_eq!(loaded.config.variant, StemVariant::Subpixel);
        assert_eq!(loaded.config.pixel_shuffle_blocks, 1);
        assert!(!loaded.config.use_residual_block);
        assert!(matches!(loaded.config.activation, Activation::Silu));
        assert_eq!(
            (loaded.latent_channels, loaded.feature_channels, loaded.classes),
            (5, 3, 4)
        );

        // Weights are stored in single precision, so the reloaded head only
        // has to match to that accuracy. Saving it again must be lossless.
        let reloaded = loaded.classify(&z).unwrap();
        assert!(max_abs_diff(&logits, &reloaded) < 1e-5);
        let again = save_head(&mut loaded, codec_digest, &dir.path().join("again.nzwt")).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn load_rejects_missing_entries_and_bad_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.nzwt");
        let mut h = exercised_head();
        save_head(&mut h, [0; 16], &path).unwrap();
        let (entries, _) = read_weight_file(&path).unwrap();

        let missing_param = dir.path().join("missing_param.nzwt");
        let kept: Vec<_> =
            entries.iter().filter(|e| e.name != "head.fc.weight").cloned().collect();
        write_weight_file(&missing_param, &kept).unwrap();
        match load_head(&missing_param) {
            Err(NzipError::Format(msg)) => assert!(msg.contains("head.fc.weight")),
            Err(other) => panic!("expected a format error, got {other:?}"),
            Ok(_) => panic!("head file with a missing parameter loaded"),
        }

        let missing_buffer = dir.path().join("missing_buffer.nzwt");
        let kept: Vec<_> = entries
            .iter()
            .filter(|e| e.name != "head.stem_bn.0.running_var")
            .cloned()
            .collect();
        write_weight_file(&missing_buffer, &kept).unwrap();
        assert!(matches!(load_head(&missing_buffer), Err(NzipError::Format(_))));

        let bad_variant = dir.path().join("bad_variant.nzwt");
        let mut tampered = entries.clone();
        tampered.iter_mut().find(|e| e.name == "head.meta").unwrap().data[0] = 9.0;
        write_weight_file(&bad_variant, &tampered).unwrap();
        match load_head(&bad_variant) {
            Err(NzipError::Format(msg)) => assert!(msg.contains("variant")),
            Err(other) => panic!("expected a format error, got {other:?}"),
            Ok(_) => panic!("head file with a bogus stem variant loaded"),
        }

        let bad_shape = dir.path().join("bad_shape.nzwt");
        let mut tampered = entries.clone();
        let fc = tampered.iter_mut().find(|e| e.name == "head.fc.bias").unwrap();
        fc.shape = vec![fc.data.len(), 1];
        write_weight_file(&bad_shape, &tampered).unwrap();
        assert!(matches!(load_head(&bad_shape), Err(NzipError::Format(_))));

        assert!(load_head(&dir.path().join("nope.nzwt")).is_err());
    }
}

mod downstream {
    use super::*;

    fn tiny_codec() -> CodecModel {
        let cfg = CodecConfig { latent_channels: 4, hyper_channels: 4 };
        CodecModel::new(cfg, &mut StdRng::seed_from_u64(40)).unwrap()
    }

    #[test]
    fn precomputed_latents_are_integers_with_matching_labels() {
        let model = tiny_codec();
        let data = make_synthetic_dataset(1, 2, 6, 16).unwrap();
        let latents = precompute_latents(&model, &data).unwrap();
        assert_eq!(latents.len(), 6);
        for ((z, label), sample) in latents.iter().zip(&data) {
            assert_eq!(*label, sample.label);
            assert_eq!(z.shape(), &[1, 4, 1, 1]);
            assert!(z.data().iter().all(|v| v.fract() == 0.0), "latent not rounded");
        }
    }

    #[test]
    fn downstream_training_reports_holdout_accuracy_and_freezes_the_codec() {
        let mut model = tiny_codec();
        let data = make_synthetic_dataset(2, 2, 16, 16).unwrap();
        let before = encode_entries(&collect_model_entries(&mut model)).unwrap();

        let cfg = DownstreamConfig {
            feature_channels: 4,
            classes: 2,
            epochs: 2,
            batch: 8,
            seed: 5,
            ..DownstreamConfig::default()
        };
        let (mut trained, acc) = train_downstream(&mut model, &data, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");

        let after = encode_entries(&collect_model_entries(&mut model)).unwrap();
        assert_eq!(before, after, "codec weights drifted during head training");

        let latents = precompute_latents(&model, &data).unwrap();
        latent_accuracy(&mut trained, &latents).unwrap();
    }

    #[test]
    fn holdout_fraction_must_leave_both_splits_nonempty() {
        let mut model = tiny_codec();
        let data = make_synthetic_dataset(2, 2, 8, 16).unwrap();
        for holdout in [0.0, 1.0] {
            let cfg = DownstreamConfig {
                feature_channels: 4,
                classes: 2,
                epochs: 1,
                holdout,
                ..DownstreamConfig::default()
            };
            assert!(matches!(
                train_downstream(&mut model, &data, &cfg),
                Err(NzipError::Config(_))
            ));
        }
    }
}

mod config {
    use super::*;

    #[test]
    fn invalid_head_configurations_are_rejected() {
        let mut rng = StdRng::seed_from_u64(0);
        assert!(matches!(
            TaskHead::new(8, 4, 1, StemConfig::default(), &mut rng),
            Err(NzipError::Config(_))
        ));
        let cfg = StemConfig { pixel_shuffle_blocks: 3, ..StemConfig::default() };
        assert!(matches!(TaskHead::new(8, 4, 3, cfg, &mut rng), Err(NzipError::Config(_))));
    }

    #[test]
    fn activation_names_parse_to_the_expected_variants() {
        assert!(matches!(parse_activation("relu"), Ok(Activation::Relu)));
        assert!(matches!(parse_activation("mish"), Ok(Activation::Mish)));
        assert!(matches!(parse_activation("silu"), Ok(Activation::Silu)));
        assert!(parse_activation("gelu").is_err());
    }
}

mod golden {
    use super::*;

    // Frozen outputs of seed-77 heads (C_z=8, C_f=4, K=3) on a seed-5 latent
    // [1,8,2,2]; guards stem wiring against silent reordering.
    const SUBPIXEL_STEM_SUM: f64 = 1.04474733310708075e2;
    const SUBPIXEL_STEM_FIRST: f64 = 8.81088421558090640e-1;
    const SUBPIXEL_LOGITS_SUM: f64 = 7.56530984110735050e-1;
    const TRUNCATED_STEM_SUM: f64 = 1.57815492393001611e0;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} != {b}");
    }

    #[test]
    fn seeded_stem_outputs_match_their_frozen_values() {
        let z = seeded_z(&[1, 8, 2, 2], 5);
        let mut h = head(8, 4, 3, StemConfig::default(), 77);
        let f = h.stem(&z, false).unwrap();
        assert_eq!(f.shape(), &[1, 4, 8, 8]);
        close(f.data().iter().sum(), SUBPIXEL_STEM_SUM);
        close(f.data()[0], SUBPIXEL_STEM_FIRST);
        close(h.classify(&z).unwrap().data().iter().sum(), SUBPIXEL_LOGITS_SUM);
        assert_eq!(h.param_count(), 3819);

        let mut t = head(8, 4, 3, StemConfig::truncated(), 77);
        let f = t.stem(&z, false).unwrap();
        assert_eq!(f.shape(), &[1, 4, 2, 2]);
        close(f.data().iter().sum(), TRUNCATED_STEM_SUM);
    }
}
