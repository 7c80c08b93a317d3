use nzip_tensor::{assert_grads_match, Tensor};
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = StdRng::seed_from_u64(5);
    let x = Tensor::uniform(&[4, 3, 5, 5], -3.0, 7.0, &mut rng);
    let gamma = Tensor::ones(&[3]);
    let beta = Tensor::zeros(&[3]);
    let (y, mean, var) = x.batch_norm_train(&gamma, &beta).unwrap();

    let hw = 25;
    for ch in 0..3 {
        let mut m = 0.0;
        let mut v = 0.0;
        let mut cnt = 0.0;
        for bn in 0..4 {
            let base = (bn * 3 + ch) * hw;
            for i in 0..hw {
                m += y.data()[base + i];
                cnt += 1.0;
            }
        }
        m /= cnt;
        for bn in 0..4 {
            let base = (bn * 3 + ch) * hw;
            for i in 0..hw {
                v += (y.data()[base + i] - m).powi(2);
            }
        }
        v /= cnt;
        assert!(m.abs() < 1e-10, "channel {ch} mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "channel {ch} var {v}");
        assert!(var[ch] > 0.0);
        assert!(mean[ch].is_finite());
    }
}

#[test]
fn batch_norm_eval_applies_fixed_statistics() {
    let x = Tensor::leaf(vec![1.0, 3.0, 2.0, 6.0], &[1, 2, 1, 2]).unwrap();
    let gamma = Tensor::leaf(vec![2.0, 1.0], &[2]).unwrap();
    let beta = Tensor::leaf(vec![0.5, -1.0], &[2]).unwrap();
    let y = x.batch_norm_eval(&gamma, &beta, &[2.0, 4.0], &[1.0, 4.0]).unwrap();
    let eps = 1e-5;
    let want = [
        2.0 * (1.0 - 2.0) / (1.0f64 + eps).sqrt() + 0.5,
        2.0 * (3.0 - 2.0) / (1.0f64 + eps).sqrt() + 0.5,
        (2.0 - 4.0) / (4.0f64 + eps).sqrt() - 1.0,
        (6.0 - 4.0) / (4.0f64 + eps).sqrt() - 1.0,
    ];
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(17);
    let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng).data().to_vec();
    let gamma = vec![1.2, 0.7];
    let beta = vec![-0.3, 0.4];
    // probe with a random linear functional: Σ c·y² alone is almost invariant
    // in x (normalization fixes the second moment), which starves the check
    let probe = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    assert_grads_match(
        "batch_norm_train",
        &[(x.clone(), vec![2, 2, 3, 3]), (gamma.clone(), vec![2]), (beta.clone(), vec![2])],
        |t| {
            let (y, _, _) = t[0].batch_norm_train(&t[1], &t[2])?;
            Ok(y.mul(&probe)?.sum())
        },
    );
    assert_grads_match(
        "batch_norm_eval",
        &[(x, vec![2, 2, 3, 3]), (gamma, vec![2]), (beta, vec![2])],
        |t| {
            let y = t[0].batch_norm_eval(&t[1], &t[2], &[0.1, -0.2], &[0.9, 1.4])?;
            Ok(y.powf(2.0).sum())
        },
    );
}

#[test]
fn batch_norm_rejects_single_element_batches() {
    let x = Tensor::zeros(&[1, 2, 1, 1]);
    let gamma = Tensor::ones(&[2]);
    let beta = Tensor::zeros(&[2]);
    assert!(x.batch_norm_train(&gamma, &beta).is_err());
}
