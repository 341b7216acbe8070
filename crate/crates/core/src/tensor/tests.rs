use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{attention, linear};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn linear_examples() {
    let tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zero = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(linear(x, eye, Some(zero)).unwrap().value().data(), &[1.0, 2.0]);

    let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
    let b = tape.constant(t(&[1], &[1.0]));
    assert_eq!(linear(x, w, Some(b)).unwrap().value().data(), &[6.0]);

    let x = tape.constant(t(&[3, 2], &[0.3, -1.0, 2.0, 5.0, 0.0, 7.0]));
    let w = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::full(&[4], 2.5));
    assert!(linear(x, w, Some(b)).unwrap().value().data().iter().all(|&v| v == 2.5));

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(linear(x, bad, None).is_err());
}

#[test]
fn conv2d_examples() {
    let tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
    let one = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    assert_eq!(x.conv2d(one, None, 1, 0).unwrap().value(), x.value());

    let ones = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = ones.conv2d(k, None, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1]);
    assert_eq!(y.value().data(), &[9.0]);

    let zk = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(x.conv2d(zk, None, 1, 1).unwrap().value().data().iter().all(|&v| v == 0.0));

    // (4 + 0 - 3) / 2 is not integral
    let x4 = tape.constant(Tensor::zeros(&[1, 4, 4]));
    assert!(x4.conv2d(k, None, 2, 0).is_err());
    // kernel larger than padded input
    let k5 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(ones.conv2d(k5, None, 1, 0).is_err());
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&[2, 5, 7], &mut rng);
    let k = randn(&[3, 2, 3, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    let tape = Tape::inference();
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(k.clone()), Some(tape.constant(b.clone())), 2, 1)
        .unwrap()
        .value();
    let (ho, wo) = (3, 4);
    assert_eq!(y.shape(), &[3, ho, wo]);
    for co in 0..3 {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b.data()[co];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..7).contains(&ix) {
                                s += k.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * 5 + iy as usize) * 7 + ix as usize];
                            }
                        }
                    }
                }
                assert!((y.data()[(co * ho + oy) * wo + ox] - s).abs() < 1e-12);
            }
        }
    }
}

/// softmax(q·kᵀ/√d)·v evaluated with plain loops.
fn attention_reference(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..m {
            let p = (logits[j] - mx).exp() / z;
            for c in 0..d {
                out[i * d + c] += p * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let tape = Tape::<f64>::inference();
    let q = tape.constant(t(&[3, 2], &[0.1, 0.2, -1.0, 2.0, 3.0, 0.0]));
    let k1 = tape.constant(t(&[1, 2], &[0.5, -0.5]));
    let v1 = tape.constant(t(&[1, 2], &[7.0, -3.0]));
    let out = attention(q, k1, v1).unwrap().value();
    for row in out.data().chunks(2) {
        assert_eq!(row, &[7.0, -3.0]);
    }

    let ks = tape.constant(t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
    let vs = tape.constant(t(&[3, 2], &[1.0, 0.0, 2.0, 3.0, 6.0, 3.0]));
    let out = attention(q, ks, vs).unwrap().value();
    for row in out.data().chunks(2) {
        assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
    }

    let (qd, kd, vd) = ([0.3, -0.7, 1.1, 0.4], [0.9, 0.1, -0.5, 0.8], [1.0, 2.0, -1.0, 0.5]);
    let out = attention(tape.constant(t(&[2, 2], &qd)), tape.constant(t(&[2, 2], &kd)), tape.constant(t(&[2, 2], &vd)))
        .unwrap()
        .value();
    let want = attention_reference(&qd, &kd, &vd, 2, 2, 2);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_weights_are_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::<f64>::inference();
    let q = tape.constant(randn(&[5, 4], &mut rng));
    let k = tape.constant(randn(&[7, 4], &mut rng));
    let p = q.matmul_t(k, false, true).unwrap().scale(0.5).unwrap().softmax_rows().unwrap().value();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

/// Per-sample align-corners-false bilinear weights along one axis.
fn ramp_reference(src: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = src.len();
    (0..n_out)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            let f = pos - lo as f64;
            src[lo] * (1.0 - f) + src[hi] * f
        })
        .collect()
}

#[test]
fn bilinear_examples() {
    let c = Tensor::full(&[2, 3, 5], 0.37f64);
    assert!(bilinear_resize(&c, 7, 2).unwrap().data().iter().all(|&v| (v - 0.37).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&[3, 4, 6], &mut rng);
    assert_eq!(bilinear_resize(&x, 4, 6).unwrap(), x);

    let ramp = t(&[1, 1, 2], &[0.0, 1.0]);
    let got = bilinear_resize(&ramp, 1, 4).unwrap();
    let want = ramp_reference(&[0.0, 1.0], 4);
    assert_eq!(want, vec![0.0, 0.25, 0.75, 1.0]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let w = tape.param(t(&[4], &[1.0, -2.0, 0.5, 8.0]));
    let g = tape.backward(w.sum().unwrap()).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);

    let tape = Tape::<f64>::new();
    let w = tape.param(t(&[1], &[3.0]));
    let g = tape.backward(w.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[6.0]);

    let tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[5.0, 6.0]));
    let loss = w.mul(c).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(w).unwrap().data(), &[5.0, 6.0]);

    let tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&[3, 8, 8], &mut rng).cast::<f32>();
    let k = randn(&[4, 3, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let tape = Tape::<f32>::inference();
        let y = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), None, 1, 1).unwrap();
        y.resize(5, 11).unwrap().silu().unwrap().value()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn every_primitive_passes_gradient_check() {
    for seed in 0..5 {
        for (name, err) in super::gradcheck::primitive_cases(seed).unwrap() {
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn resize_to_same_extents_is_identity(c in 1usize..3, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&[c, h, w], &mut rng).cast::<f32>();
            let tape = Tape::<f32>::inference();
            let y = tape.constant(x.clone()).resize(h, w).unwrap().value();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn resize_preserves_constants(h in 1usize..6, w in 1usize..6, ho in 1usize..9, wo in 1usize..9, v in -5.0f64..5.0) {
            let x = Tensor::full(&[1, h, w], v);
            let y = bilinear_resize(&x, ho, wo).unwrap();
            prop_assert!(y.data().iter().all(|&a| (a - v).abs() < 1e-12));
        }
    }
}
