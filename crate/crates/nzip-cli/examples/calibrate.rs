use std::time::Instant;

use nzip::codec::CodecModel;
use nzip::container::{compress, decompress};
use nzip::data::{make_synthetic_dataset, SyntheticSample};
use nzip::entropy::{hyper_rate_bits, quantize_noise, quantize_round, rate_bits};
use nzip::error::Result;
use nzip::losses::psnr;
use nzip::task::{train_downstream, DownstreamConfig, StemConfig, StemVariant};
use nzip::train::{train, TrainConfig, TrainOutcome};
use nzip::weights::{collect_model_entries, decode_entries, digest16, encode_entries, model_from_entries};
use nzip_tensor::{no_grad, Tensor};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn naive_cfg(lambda_d: f64, epochs: usize, seed: u64) -> TrainConfig {
    let lr = std::env::var("CAL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    TrainConfig {
        lr,
        lr_decay: 1.0,
        recon_batch: 8,
        task_batch: 16,
        epochs,
        seed,
        lambda_d,
        lambda_t: 0.0,
        latent_channels: 16,
        hyper_channels: 16,
        feature_channels: 32,
        classes: 4,
        dataset_size: 64,
        image_size: 32,
        stem: StemConfig::default(),
    }
}

fn storage(outcome: &mut TrainOutcome) -> Result<(CodecModel, [u8; 16])> {
    let bytes = encode_entries(&collect_model_entries(&mut outcome.model))?;
    let digest = digest16(&bytes);
    Ok((model_from_entries(&decode_entries(&bytes)?)?, digest))
}

fn rd_measure(model: &CodecModel, digest: [u8; 16], samples: &[SyntheticSample], n: usize) -> Result<(f64, f64)> {
    let (mut bpp, mut ps) = (0.0, 0.0);
    for s in samples.iter().take(n) {
        let (c, stats) = compress(model, digest, &s.image)?;
        let back = decompress(model, digest, &c)?;
        bpp += stats.bpp;
        ps += psnr(&s.image.to_tensor(), &back.to_tensor(), 1.0)?;
    }
    Ok((bpp / n as f64, ps / n as f64))
}

/// Latent rate under the deployment parameters (decoded from rounded w),
/// with only the evaluation point switching between round(z) and z+u.
fn latent_rates(
    model: &CodecModel,
    x: &Tensor,
    draws: usize,
    rng: &mut StdRng,
) -> Result<(f64, f64)> {
    no_grad(|| {
        let z = model.encode_latent(x)?;
        let w = model.hyper_encode(&z)?;
        let w_hat = quantize_round(&w)?.to_tensor();
        let params = model.hyper_decode(&w_hat, (z.shape()[2], z.shape()[3]))?;
        let round = rate_bits(&quantize_round(&z)?.to_tensor(), &params)?.item();
        let mut noisy = 0.0;
        for _ in 0..draws {
            noisy += rate_bits(&quantize_noise(&z, rng), &params)?.item();
        }
        Ok((round, noisy / draws as f64))
    })
}

fn sweep(epochs: usize, lambdas: &[f64]) -> Result<()> {
    let heldout = make_synthetic_dataset(5555, 4, 8, 32)?;
    for &l in lambdas {
        let t0 = Instant::now();
        let mut outcome = train(&naive_cfg(l, epochs, 7))?;
        let train_secs = t0.elapsed().as_secs_f64();
        if let Ok(path) = std::env::var("CAL_SAVE") {
            nzip::weights::save_model(&mut outcome.model, std::path::Path::new(&path))?;
            println!("saved {path}");
        }
        let (model, digest) = storage(&mut outcome)?;
        let (bpp, ps) = rd_measure(&model, digest, &outcome.dataset, 8)?;
        let mut rng = StdRng::seed_from_u64(4242);
        let (mut rr, mut rn, mut worst) = (0.0, 0.0, 0.0f64);
        for s in heldout.iter() {
            let x = s.image.to_tensor();
            let (r, n) = latent_rates(&model, &x, 16, &mut rng)?;
            worst = worst.max((r - n).abs() / r);
            rr += r;
            rn += n;
        }
        let ratio = (rr - rn).abs() / rr;
        println!(
            "lambda_d={l:<6} epochs={epochs:<3} bpp={bpp:.4} psnr={ps:.2} rate_round={:.1} rate_noisy={:.1} ratio={ratio:.4} worst={worst:.4} train_s={train_secs:.1}",
            rr / 8.0,
            rn / 8.0
        );
    }
    Ok(())
}

fn downstream(model: &mut CodecModel, data: &[SyntheticSample], stem: StemConfig, seeds: &[u64], epochs: usize, cf: usize) -> Result<Vec<f64>> {
    let mut accs = Vec::new();
    for &s in seeds {
        let cfg = DownstreamConfig {
            stem,
            feature_channels: cf,
            classes: 4,
            lr: 1e-3,
            epochs,
            batch: 16,
            seed: s,
            holdout: 0.25,
        };
        let (_, acc) = train_downstream(model, data, &cfg)?;
        accs.push(acc);
    }
    Ok(accs)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn utility(epochs: usize, lambda_d: f64, lambda_t: f64, ds_epochs: usize) -> Result<()> {
    let t0 = Instant::now();
    let mut naive = train(&naive_cfg(lambda_d, epochs, 7))?;
    let mut informed_cfg = naive_cfg(lambda_d, epochs, 7);
    informed_cfg.lambda_t = lambda_t;
    let mut informed = train(&informed_cfg)?;
    println!("trained both codecs in {:.1}s", t0.elapsed().as_secs_f64());

    let (mut nm, nd) = storage(&mut naive)?;
    let (mut im, idg) = storage(&mut informed)?;
    let (nbpp, nps) = rd_measure(&nm, nd, &naive.dataset, 8)?;
    let (ibpp, ips) = rd_measure(&im, idg, &informed.dataset, 8)?;
    println!("naive    bpp={nbpp:.4} psnr={nps:.2}");
    println!("informed bpp={ibpp:.4} psnr={ips:.2}  (bpp delta {:.1}%)", 100.0 * (ibpp - nbpp).abs() / nbpp);

    let corpus = make_synthetic_dataset(7777, 4, 96, 32)?;
    let t1 = Instant::now();
    let na = downstream(&mut nm, &corpus, StemConfig::default(), &[1, 2, 3], ds_epochs, 32)?;
    let ia = downstream(&mut im, &corpus, StemConfig::default(), &[1, 2, 3], ds_epochs, 32)?;
    println!(
        "downstream {:.1}s  naive acc {:?} median {:.3} | informed acc {:?} median {:.3}",
        t1.elapsed().as_secs_f64(),
        na.clone(),
        median(na),
        ia.clone(),
        median(ia)
    );
    Ok(())
}

fn stems(epochs: usize, lambda_d: f64, ds_epochs: usize) -> Result<()> {
    let mut outcome = train(&naive_cfg(lambda_d, epochs, 7))?;
    let (mut model, _) = storage(&mut outcome)?;
    let corpus = make_synthetic_dataset(7777, 4, 96, 32)?;
    let sub2 = StemConfig::default();
    let sub1 = StemConfig { pixel_shuffle_blocks: 1, ..StemConfig::default() };
    let trunc = StemConfig { variant: StemVariant::Truncated, ..StemConfig::default() };
    let t0 = Instant::now();
    let a2 = downstream(&mut model, &corpus, sub2, &[1, 2, 3], ds_epochs, 32)?;
    let a1 = downstream(&mut model, &corpus, sub1, &[1, 2, 3], ds_epochs, 32)?;
    let at = downstream(&mut model, &corpus, trunc, &[1, 2, 3], ds_epochs, 32)?;
    println!(
        "stems {:.1}s sub2 {:?} med {:.3} | sub1 {:?} med {:.3} | trunc {:?} med {:.3}",
        t0.elapsed().as_secs_f64(),
        a2.clone(), median(a2),
        a1.clone(), median(a1),
        at.clone(), median(at)
    );
    Ok(())
}

fn invariance(path: &str, draws: usize, size: usize) -> Result<()> {
    let (model, _) = nzip::weights::load_model(std::path::Path::new(path))?;
    let heldout = make_synthetic_dataset(5555, 4, 8, size)?;
    let mut rng = StdRng::seed_from_u64(4242);
    let (mut rr, mut rn, mut worst) = (0.0, 0.0, 0.0f64);
    for s in heldout.iter() {
        let x = s.image.to_tensor();
        let (r, n) = latent_rates(&model, &x, draws, &mut rng)?;
        let per = (r - n).abs() / r;
        println!("image ratio {per:.4} (round {r:.1} noisy {n:.1})");
        worst = worst.max(per);
        rr += r;
        rn += n;
    }
    println!("draws={draws} aggregate={:.4} worst={worst:.4}", (rr - rn).abs() / rr);
    Ok(())
}

fn stems_from(path: &str, ds_epochs: usize) -> Result<()> {
    let (mut model, _) = nzip::weights::load_model(std::path::Path::new(path))?;
    let corpus = make_synthetic_dataset(7777, 4, 96, 32)?;
    let sub2 = StemConfig::default();
    let sub1 = StemConfig { pixel_shuffle_blocks: 1, ..StemConfig::default() };
    let trunc = StemConfig { variant: StemVariant::Truncated, ..StemConfig::default() };
    let t0 = Instant::now();
    let a2 = downstream(&mut model, &corpus, sub2, &[1, 2, 3], ds_epochs, 32)?;
    let a1 = downstream(&mut model, &corpus, sub1, &[1, 2, 3], ds_epochs, 32)?;
    let at = downstream(&mut model, &corpus, trunc, &[1, 2, 3], ds_epochs, 32)?;
    println!(
        "stems {:.1}s sub2 {:?} med {:.3} | sub1 {:?} med {:.3} | trunc {:?} med {:.3}",
        t0.elapsed().as_secs_f64(),
        a2.clone(), median(a2),
        a1.clone(), median(a1),
        at.clone(), median(at)
    );
    Ok(())
}

fn decompose(path: &str) -> Result<()> {
    let (model, _) = nzip::weights::load_model(std::path::Path::new(path))?;
    let heldout = make_synthetic_dataset(5555, 4, 8, 32)?;
    let mut rng = StdRng::seed_from_u64(4242);
    no_grad(|| {
        for s in heldout.iter().take(4) {
            let x = s.image.to_tensor();
            let z = model.encode_latent(&x)?;
            let hw = (z.shape()[2], z.shape()[3]);
            let w = model.hyper_encode(&z)?;
            let w_round = quantize_round(&w)?.to_tensor();
            let z_round = quantize_round(&z)?.to_tensor();
            let params_round = model.hyper_decode(&w_round, hw)?;

            let lat_round = rate_bits(&z_round, &params_round)?.item();
            let hyp_round = hyper_rate_bits(&w_round, &model.prior)?.item();

            let draws = 16;
            let (mut lat_noisy, mut hyp_noisy, mut lat_mixed, mut lat_zround_noisyparams) =
                (0.0, 0.0, 0.0, 0.0);
            for _ in 0..draws {
                let z_t = quantize_noise(&z, &mut rng);
                let w_t = quantize_noise(&w, &mut rng);
                let params_noisy = model.hyper_decode(&w_t, hw)?;
                lat_noisy += rate_bits(&z_t, &params_noisy)?.item();
                hyp_noisy += hyper_rate_bits(&w_t, &model.prior)?.item();
                // noisy z under rounded-w params, and vice versa
                lat_mixed += rate_bits(&z_t, &params_round)?.item();
                lat_zround_noisyparams += rate_bits(&z_round, &params_noisy)?.item();
            }
            lat_noisy /= draws as f64;
            hyp_noisy /= draws as f64;
            lat_mixed /= draws as f64;
            lat_zround_noisyparams /= draws as f64;
            println!(
                "lat: round {lat_round:.1} noisy {lat_noisy:.1} | z-noisy/params-round {lat_mixed:.1} z-round/params-noisy {lat_zround_noisyparams:.1} | hyp: round {hyp_round:.1} noisy {hyp_noisy:.1}"
            );
        }
        Ok(())
    })
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("sweep");
    let result = match mode {
        "decompose" => decompose(args.get(2).expect("decompose needs a model path")),
        "invariance" => invariance(
            args.get(2).expect("invariance needs a model path"),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32),
        ),
        "stems-from" => stems_from(
            args.get(2).expect("stems-from needs a model path"),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6),
        ),
        "sweep" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let lambdas: Vec<f64> = args
                .get(3)
                .map(|s| s.split(',').map(|p| p.parse().unwrap()).collect())
                .unwrap_or_else(|| vec![0.02, 0.1, 0.3, 1.0, 3.0]);
            sweep(epochs, &lambdas)
        }
        "utility" => {
            let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let lambda_d = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
            let lambda_t = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
            let ds_epochs = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(6);
            utility(epochs, lambda_d, lambda_t, ds_epochs)
        }
        "stems" => {
            let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let lambda_d = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
            let ds_epochs = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6);
            stems(epochs, lambda_d, ds_epochs)
        }
        other => {
            eprintln!("unknown mode {other}");
            std::process::exit(1);
        }
    };
    if let Err(e) = result {
        eprintln!("calibration failed: {e}");
        std::process::exit(1);
    }
}
