mod common;

use common::*;
use speakerssl::checkpoint::Checkpoint;
use speakerssl::encoder::{attention_weights, encode, encode_batch, EncoderParams};
use speakerssl::features::MelSpectrogram;

fn mel(seed: u64, t: usize, d: usize) -> MelSpectrogram {
    MelSpectrogram {
        frames: random_matrix(&mut rng(seed), t, d, 2.0),
        frame_shift: 0.01,
        frame_length: 0.025,
    }
}

/// `y = tanh(x·W + b)` with explicit loops.
fn layer(x: &[f64], w: &[f64], b: &[f64], out: usize, act: bool) -> Vec<f64> {
    (0..out)
        .map(|j| {
            let mut s = b[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[i * out + j];
            }
            if act {
                s.tanh()
            } else {
                s
            }
        })
        .collect()
}

fn forward_oracle(m: &MelSpectrogram, p: &EncoderParams) -> Vec<f64> {
    let t = |k: usize| p.tensors[k].data();
    let hdim = p.hidden;
    let hs: Vec<Vec<f64>> = (0..m.frames.rows())
        .map(|r| {
            let h1 = layer(m.frames.row(r), t(0), t(1), hdim, true);
            layer(&h1, t(2), t(3), hdim, true)
        })
        .collect();
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| {
            let u = layer(h, t(4), t(5), hdim, true);
            u.iter().zip(t(6)).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut pooled = vec![0.0; hdim];
    for (h, wt) in hs.iter().zip(&w) {
        for k in 0..hdim {
            pooled[k] += wt / z * h[k];
        }
    }
    layer(&pooled, t(7), t(8), p.embed_dim, false)
}

#[test]
fn forward_pass_matches_loop_oracle() {
    for seed in 0..30 {
        let p = EncoderParams::init(seed, 10, 7, 5).unwrap();
        let m = mel(seed + 1, 1 + (seed as usize % 9), 10);
        let got = encode(&m, &p).unwrap();
        for (a, b) in got.data().iter().zip(forward_oracle(&m, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = attention_weights(&m, &p).unwrap();
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn normalized_rows_are_unit_and_init_is_seeded() {
    let p = EncoderParams::init(4, 10, 7, 5).unwrap();
    let mels: Vec<_> = (0..6).map(|i| mel(i, 3 + i as usize, 10)).collect();
    let b = encode_batch(&mels, &p).unwrap();
    for i in 0..6 {
        let n: f64 = b.normalized.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert_eq!(p, EncoderParams::init(4, 10, 7, 5).unwrap());
    assert_ne!(p, EncoderParams::init(5, 10, 7, 5).unwrap());
    let bound = [10usize, 10, 7, 7, 7, 7, 7, 7, 7].map(|f| (1.0 / f as f64).sqrt());
    for (t, s) in p.tensors.iter().zip(bound) {
        assert!(t.data().iter().all(|v| v.abs() <= s));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = EncoderParams::init(8, 40, 16, 8).unwrap();
    let mut ck = Checkpoint::new(serde_json::json!({ "note": "x" }));
    ck.push_encoder("encoder", &p);
    let path = dir.path().join("a.ckpt");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    let q = back.encoder("encoder").unwrap();
    for (a, b) in p.tensors.iter().zip(&q.tensors) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &speakerssl::autodiff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.to_bytes(), ck.to_bytes());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"SSLCKPT\0");
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
    assert!(header.contains("sap_scoring"));
    assert!(header.contains("frame.w1"));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
