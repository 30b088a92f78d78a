//! Encoder forward pass: zero-update equivalence and a loop-based reference.

use std::time::Instant;

use fscil_core::encoder::{forward, forward_backbone, EncoderConfig, EncoderModel, UpdateTarget};
use fscil_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(image: usize, patch: usize, d: usize, depth: usize, heads: usize, adapted: usize, target: UpdateTarget) -> EncoderConfig {
    EncoderConfig {
        image_size: image,
        channels: 3,
        patch_size: patch,
        embed_dim: d,
        depth,
        heads,
        mlp_hidden: None,
        adapted_blocks: adapted,
        update_target: target,
        share_updates: true,
    }
}

fn three_configs() -> [EncoderConfig; 3] {
    [
        config(8, 4, 8, 2, 2, 2, UpdateTarget::AttentionQkv),
        config(16, 4, 16, 3, 4, 1, UpdateTarget::Mlp),
        config(16, 8, 32, 6, 4, 6, UpdateTarget::AttentionQkv),
    ]
}

#[test]
fn zero_updates_are_bit_identical_to_the_backbone() {
    let start = Instant::now();
    for (k, cfg) in three_configs().into_iter().enumerate() {
        let model = EncoderModel::<f64>::new(cfg.clone(), 40 + k as u64).unwrap();
        assert!(model.deltas.is_zero());
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for _ in 0..100 {
            let img = Tensor::randn(&[3, cfg.image_size, cfg.image_size], 1.0, &mut rng);
            let a = forward(&img, &model).unwrap();
            let b = forward_backbone(&img, &model).unwrap();
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

// --- loop-based reference ---------------------------------------------------

fn mm(a: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn plus(w: &Tensor<f64>, d: Option<&Tensor<f64>>) -> Tensor<f64> {
    match d {
        Some(d) => Tensor::new(w.shape().to_vec(), w.data().iter().zip(d.data()).map(|(a, b)| a + b).collect()).unwrap(),
        None => w.clone(),
    }
}

fn add_bias(x: &mut [Vec<f64>], b: &Tensor<f64>) {
    for row in x {
        for (v, c) in row.iter_mut().zip(b.data()) {
            *v += c;
        }
    }
}

fn norm(x: &[Vec<f64>], g: &Tensor<f64>, s: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g.data()[i] + s.data()[i])
                .collect()
        })
        .collect()
}

fn reference(img: &Tensor<f64>, m: &EncoderModel<f64>) -> Vec<f64> {
    let c = &m.config;
    let (p, s, d) = (c.patch_size, c.image_size, c.embed_dim);
    let mut patches = Vec::new();
    for gy in 0..s / p {
        for gx in 0..s / p {
            let mut v = Vec::new();
            for ch in 0..c.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        v.push(img.data()[ch * s * s + (gy * p + dy) * s + gx * p + dx]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let bb = &m.backbone;
    let mut tok = mm(&patches, &bb.patch_weight);
    add_bias(&mut tok, &bb.patch_bias);
    let mut x = vec![bb.cls_token.data().to_vec()];
    x.extend(tok);
    for (i, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += bb.pos_embed.data()[i * d + j];
        }
    }
    for (b, blk) in bb.blocks.iter().enumerate() {
        let set = m.delta_set_for_block(b);
        let (dq, dk, dv, d1, d2) = match (set, c.update_target) {
            (Some(s), UpdateTarget::AttentionQkv) => (Some(&s[0]), Some(&s[1]), Some(&s[2]), None, None),
            (Some(s), UpdateTarget::Mlp) => (None, None, None, Some(&s[0]), Some(&s[1])),
            _ => (None, None, None, None, None),
        };
        let h = norm(&x, &blk.ln1_gain, &blk.ln1_shift);
        let mut q = mm(&h, &plus(&blk.wq, dq));
        add_bias(&mut q, &blk.bq);
        let mut k = mm(&h, &plus(&blk.wk, dk));
        add_bias(&mut k, &blk.bk);
        let mut v = mm(&h, &plus(&blk.wv, dv));
        add_bias(&mut v, &blk.bv);
        let dh = d / c.heads;
        let n = x.len();
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..c.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in cols.clone() {
                    att[i][t] = (0..n).map(|j| e[j] / z * v[j][t]).sum();
                }
            }
        }
        let mut o = mm(&att, &blk.wo);
        add_bias(&mut o, &blk.bo);
        for (xr, orow) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(orow) {
                *a += b;
            }
        }
        let h = norm(&x, &blk.ln2_gain, &blk.ln2_shift);
        let mut u = mm(&h, &plus(&blk.w1, d1));
        add_bias(&mut u, &blk.b1);
        for row in &mut u {
            for v in row.iter_mut() {
                let t = (2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3));
                *v = 0.5 * *v * (1.0 + t.tanh());
            }
        }
        let mut o = mm(&u, &plus(&blk.w2, d2));
        add_bias(&mut o, &blk.b2);
        for (xr, orow) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }
    let cls = &x[0];
    let n = cls.iter().map(|v| v * v).sum::<f64>().sqrt();
    cls.iter().map(|v| v / n).collect()
}

#[test]
fn forward_matches_loop_reference_with_updates() {
    for (k, cfg) in three_configs().into_iter().enumerate() {
        let mut model = EncoderModel::<f64>::new(cfg.clone(), k as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90 + k as u64);
        for blk in &mut model.backbone.blocks {
            blk.wq = Tensor::randn(blk.wq.shape(), 0.3, &mut rng);
            blk.wk = Tensor::randn(blk.wk.shape(), 0.3, &mut rng);
            blk.bq = Tensor::randn(blk.bq.shape(), 0.1, &mut rng);
            blk.b1 = Tensor::randn(blk.b1.shape(), 0.1, &mut rng);
        }
        for t in model.deltas.sets.iter_mut().flatten() {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
        for _ in 0..5 {
            let img = Tensor::randn(&[3, cfg.image_size, cfg.image_size], 1.0, &mut rng);
            let got = forward(&img, &model).unwrap();
            let want = reference(&img, &model);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let cfg = three_configs()[0].clone();
    let model = EncoderModel::<f64>::new(cfg.clone(), 3).unwrap();
    let single = model.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
    let a = forward(&img, &model).unwrap();
    let b = forward(&img.cast::<f32>(), &single).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
