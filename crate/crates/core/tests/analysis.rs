use num_complex::Complex64;
use num_rational::Ratio;
use proptest::prelude::*;
use semlink::analysis::*;
use semlink::nn::ViTStageConfig;
use semlink::{ArchSpec, Codec, CodecConfig, Error, SymbolBlock};
use semlink_tensor::{RngStream, Tensor};

fn fmap(h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureMap {
    FeatureMap::new(LayerId::Stage(0), &Tensor::<f64>::new(vec![h, w, c], data).unwrap()).unwrap()
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = RngStream::new(seed, 6).rng();
    (0..n).map(|_| r.normal()).collect()
}

fn brute_cosine(data: &[f64], c: usize) -> f64 {
    let v: Vec<&[f64]> = data.chunks(c).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += dot(v[i], v[j]) / (dot(v[i], v[i]).sqrt() * dot(v[j], v[j]).sqrt());
            }
        }
    }
    s / (n * (n - 1)) as f64
}

#[test]
fn cosine_examples() {
    let same = fmap(3, 3, 2, [0.3, -1.2].repeat(9));
    assert!((avg_cosine_similarity(&same).unwrap().s - 1.0).abs() < 1e-12);
    let ortho = fmap(1, 2, 2, vec![1.0, 0.0, 0.0, 5.0]);
    assert!(avg_cosine_similarity(&ortho).unwrap().s.abs() < 1e-12);
    let data = random(4 * 4 * 8, 1);
    let r = avg_cosine_similarity(&fmap(4, 4, 8, data.clone())).unwrap();
    assert!((r.s - brute_cosine(&data, 8)).abs() < 1e-6);
    assert_eq!(r.n_positions, 16);
}

#[test]
fn cosine_excludes_zero_vectors_and_rejects_all_zero() {
    let mut data = random(3 * 3 * 4, 2);
    data[..4].fill(0.0);
    let r = avg_cosine_similarity(&fmap(3, 3, 4, data.clone())).unwrap();
    assert_eq!(r.excluded, 1);
    assert!((r.s - brute_cosine(&data[4..], 4)).abs() < 1e-12);
    assert!(matches!(
        avg_cosine_similarity(&fmap(2, 2, 3, vec![0.0; 12])),
        Err(Error::ZeroEnergy(_))
    ));
}

fn dft_oracle(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            for n in 0..h {
                for m in 0..w {
                    let ph =
                        -2.0 * std::f64::consts::PI * (n as f64 * k as f64 / h as f64 + m as f64 * l as f64 / w as f64);
                    out[k * w + l] += x[n * w + m] * Complex64::from_polar(1.0, ph);
                }
            }
        }
    }
    out
}

#[test]
fn dft_matches_direct_sum() {
    for h in 1..=16 {
        for w in [1, 2, 3, 5, 8, 13, 16] {
            let x = random(h * w, (h * 100 + w) as u64);
            let got = dft2(&x, h, w).unwrap();
            let want = dft_oracle(&x, h, w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).norm() < 1e-9, "{h}x{w}");
            }
        }
    }
}

#[test]
fn profile_of_impulse_is_flat() {
    let mut x = vec![0.0; 8 * 8];
    x[19] = 1.0;
    let p = fourier_profile(&fmap(8, 8, 1, x)).unwrap();
    assert_eq!(p.y.len(), 5);
    assert!(p.y.iter().all(|v| v.abs() < 1e-9), "{:?}", p.y);
}

#[test]
fn profile_of_constant_hits_the_floor() {
    let p = fourier_profile(&fmap(8, 8, 2, vec![0.5; 128])).unwrap();
    let floor = LOG_EPS.ln() - (32.0f64 + LOG_EPS).ln();
    assert_eq!(p.y[0], 0.0);
    for v in &p.y[1..] {
        assert!((v - floor).abs() < 0.1, "{v} vs {floor}");
    }
}

#[test]
fn profile_peaks_at_cosine_frequency() {
    let h = 16;
    for d in 1..=h / 2 {
        let x: Vec<f64> = (0..h * h)
            .map(|i| (2.0 * std::f64::consts::PI * d as f64 * ((i / h) + (i % h)) as f64 / h as f64).cos() + 2.0)
            .collect();
        let p = fourier_profile(&fmap(h, h, 1, x)).unwrap();
        let peak = (1..p.y.len()).max_by(|&a, &b| p.y[a].total_cmp(&p.y[b])).unwrap();
        assert_eq!(peak, d);
    }
}

#[test]
fn profile_requires_square_grid() {
    assert!(fourier_profile(&fmap(2, 4, 1, vec![1.0; 8])).is_err());
}

#[test]
fn psnr_examples() {
    let a = Tensor::<f64>::zeros([4, 4, 3]);
    let b = Tensor::<f64>::ones([4, 4, 3]);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
    let c = Tensor::<f64>::new(vec![4, 4, 3], vec![0.01; 48]).unwrap();
    assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
    assert_eq!(psnr(&b, &c).unwrap(), psnr(&c, &b).unwrap());
    assert!(psnr(&a, &Tensor::zeros([4, 4, 1])).is_err());
}

/// SSIM via full-image separable Gaussian filtering (valid region), written
/// independently of the windowed loop in the library.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k: Vec<f64> = {
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    };
    let filt = |x: &[f64]| -> Vec<f64> {
        let (oh, ow) = (h - 10, w - 10);
        let mut tmp = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                tmp[r * ow + c] = (0..11).map(|j| k[j] * x[r * w + c + j]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..11).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
            }
        }
        out
    };
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (ma, mb) = (filt(a), filt(b));
    let (saa, sbb, sab) = (filt(&prod(a, a)), filt(&prod(b, b)), filt(&prod(a, b)));
    let (c1, c2) = (1e-4, 9e-4);
    let vals: Vec<f64> = (0..ma.len())
        .map(|i| {
            let (va, vb, cab) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
            (2.0 * ma[i] * mb[i] + c1) * (2.0 * cab + c2) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2))
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn ssim_examples() {
    let mut r = RngStream::new(5, 6).rng();
    let a: Vec<f64> = (0..32 * 32 * 3).map(|_| r.uniform()).collect();
    let ta = Tensor::<f64>::new(vec![32, 32, 3], a.clone()).unwrap();
    assert!((ssim(&ta, &ta).unwrap() - 1.0).abs() < 1e-12);

    let bin: Vec<f64> = (0..16 * 16).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
    let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
    let s = ssim(
        &Tensor::<f64>::new(vec![16, 16], bin).unwrap(),
        &Tensor::new(vec![16, 16], inv).unwrap(),
    )
    .unwrap();
    assert!(s < 0.0, "{s}");

    let b: Vec<f64> = a.iter().map(|v| (v + 0.1 * r.normal()).clamp(0.0, 1.0)).collect();
    let tb = Tensor::<f64>::new(vec![32, 32, 3], b.clone()).unwrap();
    let gray = |x: &[f64]| x.chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect::<Vec<_>>();
    let want = ssim_oracle(&gray(&a), &gray(&b), 32, 32);
    let got = ssim(&ta, &tb).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got < 1.0);

    assert!(ssim(&Tensor::<f64>::zeros([8, 8, 3]), &Tensor::zeros([8, 8, 3])).is_err());
}

fn small_cfg(heads: usize) -> CodecConfig {
    CodecConfig {
        arch: ArchSpec::semvit(),
        width: 8,
        kernels: [3; 6],
        depths: [1; 6],
        vit: ViTStageConfig::new(heads, 8 / heads, 2),
        image: (8, 8),
        ratio: Ratio::new(1, 6),
    }
}

fn image(seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed, 5).rng();
    Tensor::from_f64([8, 8, 3], &(0..192).map(|_| r.uniform()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn attention_uniform_for_zero_weights() {
    let mut codec = Codec::<f64>::build(small_cfg(2), 3).unwrap();
    for p in codec.params.iter_mut() {
        if p.name.starts_with("layer2.") && (p.name.ends_with("w_qry") || p.name.ends_with("w_key")) {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
    let m = extract_attention_map(&codec, 2, (1, 1), &[image(1), image(2)]).unwrap();
    assert_eq!((m.h, m.w), (2, 2));
    assert!(m.grid.iter().all(|v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn attention_maps_are_simplex_vectors() {
    let mut codec = Codec::<f64>::build(small_cfg(2), 4).unwrap();
    let mut r = RngStream::new(4, 9).rng();
    for p in codec.params.iter_mut() {
        if p.name.contains(".mhsa.") {
            let d = p.value.data().iter().map(|_| r.normal()).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), d).unwrap();
        }
    }
    for layer in [2, 3] {
        for q in [(0, 0), (1, 0), (1, 1)] {
            let m = extract_attention_map(&codec, layer, q, &[image(3), image(4), image(5)]).unwrap();
            assert!(m.grid.iter().all(|&v| v >= 0.0));
            assert!((m.grid.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(extract_attention_map(&codec, 0, (0, 0), &[image(3)]).is_err());
    assert!(extract_attention_map(&codec, 2, (2, 0), &[image(3)]).is_err());
}

/// One head on a 2x2 grid, evaluated directly from the stage input:
/// `softmax((LN(x) Wq (LN(x) Wk)^T + P) / sqrt(D))`.
#[test]
fn attention_matches_hand_evaluation() {
    let mut codec = Codec::<f64>::build(small_cfg(1), 6).unwrap();
    let mut r = RngStream::new(6, 9).rng();
    for p in codec.params.iter_mut() {
        if p.name.starts_with("layer2.block0.") {
            let d = p.value.data().iter().map(|v| v + 0.3 * r.normal()).collect();
            p.value = Tensor::new(p.value.shape().to_vec(), d).unwrap();
        }
    }
    let img = image(7);
    let x = feature_maps(&codec, &img, &[LayerId::Stage(1)])
        .unwrap()
        .remove(0)
        .values;
    let get = |n: &str| codec.params.get(codec.params.id(n).unwrap()).data().to_vec();
    let (gain, bias) = (get("layer2.block0.ln1.gain"), get("layer2.block0.ln1.bias"));
    let (wq, wk, table) = (
        get("layer2.block0.mhsa.w_qry"),
        get("layer2.block0.mhsa.w_key"),
        get("layer2.block0.mhsa.rel_pos"),
    );
    let d = 8;
    let tokens: Vec<Vec<f64>> = x
        .data()
        .chunks(d)
        .map(|t| {
            let mu = t.iter().sum::<f64>() / d as f64;
            let var = t.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|i| (t[i] - mu) / (var + 1e-5).sqrt() * gain[i] + bias[i])
                .collect()
        })
        .collect();
    let proj = |t: &[f64], w: &[f64]| {
        (0..d)
            .map(|j| (0..d).map(|i| t[i] * w[i * d + j]).sum())
            .collect::<Vec<f64>>()
    };
    let q: Vec<Vec<f64>> = tokens.iter().map(|t| proj(t, &wq)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|t| proj(t, &wk)).collect();
    for query in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        let qi = query.0 * 2 + query.1;
        let logits: Vec<f64> = (0..4)
            .map(|j| {
                let (r1, c1, r2, c2) = (query.0 as i64, query.1 as i64, (j / 2) as i64, (j % 2) as i64);
                let cell = ((r1 - r2 + 1) * 3 + (c1 - c2 + 1)) as usize;
                let dot: f64 = q[qi].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                (dot + table[cell]) / (d as f64).sqrt()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let m = extract_attention_map(&codec, 2, query, std::slice::from_ref(&img)).unwrap();
        for j in 0..4 {
            assert!((m.grid[j] - e[j] / z).abs() < 1e-9, "{query:?} {j}");
        }
    }
}

#[test]
fn feature_maps_and_probe_reports() {
    let codec = Codec::<f64>::build(small_cfg(2), 8).unwrap();
    let layers = [LayerId::Stage(0), LayerId::Stage(2), LayerId::Symbols];
    let maps = feature_maps(&codec, &image(1), &layers).unwrap();
    assert_eq!(maps[0].dims(), (4, 4, 8));
    assert_eq!(maps[2].dims(), (32, 1, 2));
    let imgs = [image(1), image(2)];
    let sims = probe_similarity(&codec, &imgs, &layers).unwrap();
    assert_eq!(sims.len(), 3);
    let each: Vec<f64> = imgs
        .iter()
        .map(|i| {
            avg_cosine_similarity(&feature_maps(&codec, i, &layers[1..2]).unwrap()[0])
                .unwrap()
                .s
        })
        .collect();
    assert!((sims[1].s - (each[0] + each[1]) / 2.0).abs() < 1e-12);
    let profiles = probe_profiles(&codec, &imgs, &layers[..2]).unwrap();
    assert_eq!(profiles[0].y.len(), 3);
    assert_eq!(profiles[1].y[0], 0.0);
    let block = SymbolBlock::new(vec![1.0, 0.0, 0.0, 1.0], (1, 1)).unwrap();
    assert!(
        avg_cosine_similarity(&FeatureMap::from_symbols(&block).unwrap())
            .unwrap()
            .s
            .abs()
            < 1e-12
    );
}

#[test]
fn layer_ids_round_trip() {
    for l in [LayerId::Stage(0), LayerId::Stage(5), LayerId::Symbols] {
        assert_eq!(l.to_string().parse::<LayerId>().unwrap(), l);
    }
    assert!("6".parse::<LayerId>().is_err());
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(seed in 0u64..500, scales in proptest::collection::vec(0.01f64..100.0, 9)) {
        let data = random(9 * 3, seed);
        let scaled: Vec<f64> = data.chunks(3).zip(&scales).flat_map(|(v, s)| v.iter().map(move |x| x * s)).collect();
        let a = avg_cosine_similarity(&fmap(3, 3, 3, data)).unwrap().s;
        let b = avg_cosine_similarity(&fmap(3, 3, 3, scaled)).unwrap().s;
        prop_assert!((a - b).abs() < 1e-6);
        prop_assert!(a.abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn profile_is_finite_with_zero_dc(data in proptest::collection::vec(-10.0f64..10.0, 36)) {
        let p = fourier_profile(&fmap(6, 6, 1, data)).unwrap();
        prop_assert_eq!(p.y[0], 0.0);
        prop_assert!(p.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ssim_self_is_one(seed in 0u64..100) {
        let a = Tensor::<f64>::from_f64([12, 13, 3], &random(12 * 13 * 3, seed).iter().map(|v| v.abs().min(1.0)).collect::<Vec<_>>()).unwrap();
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
