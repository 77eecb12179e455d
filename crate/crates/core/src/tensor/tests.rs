use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)))
}

/// The same values rounded through `f32`, so 32-bit results are compared on identical inputs.
fn f32ed(x: &Tensor<f64>) -> Tensor<f64> {
    x.cast::<f32>().cast()
}

/// Direct summation over the padded, strided, grouped window.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeom) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cin_g, k, _] = w.shape();
    let cout_g = c_out / geom.groups;
    let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
    let wo = (wd + 2 * geom.padding - k) / geom.stride + 1;
    assert_eq!(cin_g * geom.groups, c_in);
    Tensor::from_fn([n, c_out, ho, wo], |ni, co, y, xx| {
        let g = co / cout_g;
        let mut s = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * geom.stride + ky) as isize - geom.padding as isize;
                    let ix = (xx * geom.stride + kx) as isize - geom.padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    s += w.at(co, ci, ky, kx) * x.at(ni, g * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        s
    })
}

#[test]
fn conv_shape() {
    let x = Tensor::<f32>::zeros([1, 3, 48, 48]);
    let w = Tensor::zeros([64, 3, 3, 3]);
    let y = conv2d_raw(&x, &w, None, ConvGeom::same(3)).unwrap();
    assert_eq!(y.shape(), [1, 64, 48, 48]);
}

#[test]
fn conv_of_zero_input_is_bias() {
    let x = Tensor::<f32>::zeros([2, 3, 5, 4]);
    let w = random([4, 3, 3, 3], 1);
    let b = Tensor::new([4, 1, 1, 1], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let y = conv2d(&x, &ConvParams { weight: w, bias: Some(b.clone()), geom: ConvGeom::same(3) }).unwrap();
    for n in 0..2 {
        for c in 0..4 {
            assert!(y.plane(n, c).iter().all(|&v| v == b.data()[c]));
        }
    }
}

#[test]
fn conv_matches_direct_summation() {
    for seed in 0..5 {
        let x = random::<f64>([1, 2, 5, 5], seed);
        let w = random::<f64>([3, 2, 3, 3], seed + 100);
        let b = random::<f64>([3, 1, 1, 1], seed + 200);
        let geom = ConvGeom::same(3);
        let got = conv2d_raw(&x.cast::<f32>(), &w.cast(), Some(&b.cast()), geom).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&conv_oracle(&f32ed(&x), &f32ed(&w), Some(&f32ed(&b)), geom)) <= 1e-6);
        let want = conv_oracle(&x, &w, Some(&b), geom);
        let got64 = conv2d_raw(&x, &w, Some(&b), geom).unwrap();
        assert!(got64.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn conv_strided_grouped_and_unpadded() {
    for (geom, cin, cout, k) in [
        (ConvGeom { stride: 2, padding: 1, groups: 1 }, 3, 4, 3),
        (ConvGeom { stride: 1, padding: 0, groups: 2 }, 4, 6, 3),
        (ConvGeom { stride: 3, padding: 2, groups: 1 }, 2, 2, 5),
        (ConvGeom { stride: 1, padding: 0, groups: 1 }, 5, 3, 1),
    ] {
        let x = random::<f64>([2, cin, 9, 7], 3);
        let w = random::<f64>([cout, cin / geom.groups, k, k], 4);
        let want = conv_oracle(&x, &w, None, geom);
        let got = conv2d_raw(&x, &w, None, geom).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-12, "{geom:?}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
    let w = Tensor::zeros([4, 2, 3, 3]);
    assert!(matches!(conv2d_raw(&x, &w, None, ConvGeom::same(3)), Err(Error::Shape { .. })));
    let w = Tensor::zeros([4, 3, 7, 7]);
    assert!(conv2d_raw(&x, &w, None, ConvGeom::default()).is_err());
}

#[test]
fn depthwise_shape_identity_and_oracle() {
    let x = random::<f32>([1, 4, 8, 8], 5);
    let mut w = Tensor::zeros([4, 1, 3, 3]);
    for c in 0..4 {
        w.set(c, 0, 1, 1, 1.0);
    }
    let y = depthwise_conv2d(&x, &ConvParams { weight: w, bias: None, geom: ConvGeom::depthwise(3, 4) }).unwrap();
    assert_eq!(y, x);

    let x = random::<f64>([1, 3, 6, 6], 6);
    let w = random::<f64>([3, 1, 5, 5], 7);
    let geom = ConvGeom::depthwise(5, 3);
    let got = depthwise_conv2d(&x.cast::<f32>(), &ConvParams { weight: w.cast(), bias: None, geom }).unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&conv_oracle(&f32ed(&x), &f32ed(&w), None, geom)) <= 1e-6);
}

#[test]
fn depthwise_channels_are_independent() {
    let x = random::<f64>([1, 3, 6, 6], 8);
    let w = random::<f64>([3, 1, 3, 3], 9);
    let p = ConvParams { weight: w, bias: None, geom: ConvGeom::depthwise(3, 3) };
    let y = depthwise_conv2d(&x, &p).unwrap();
    let mut x2 = x.clone();
    x2.set(0, 1, 2, 2, 10.0);
    let y2 = depthwise_conv2d(&x2, &p).unwrap();
    assert_eq!(y.plane(0, 0), y2.plane(0, 0));
    assert_eq!(y.plane(0, 2), y2.plane(0, 2));
    assert_ne!(y.plane(0, 1), y2.plane(0, 1));
}

#[test]
fn depthwise_rejects_group_mismatch() {
    let x = Tensor::<f32>::zeros([1, 4, 5, 5]);
    let p = ConvParams { weight: Tensor::zeros([4, 1, 3, 3]), bias: None, geom: ConvGeom::depthwise(3, 2) };
    assert!(depthwise_conv2d(&x, &p).is_err());
}

#[test]
fn elementwise_basics() {
    assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    let x = random::<f32>([2, 3, 4, 4], 10);
    assert_eq!(mul(&x, &Tensor::ones(x.shape())).unwrap(), x);
    assert_eq!(mul(&x, &Tensor::ones([2, 3, 1, 1])).unwrap(), x);
    let r = relu(&x);
    assert!(r.data().iter().zip(x.data()).all(|(&r, &x)| r == x.max(0.0)));
    let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
    let b = Tensor::zeros([1, 3, 4, 4]);
    assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), [1, 5, 4, 4]);
    assert!(add(&a, &b).is_err());
    assert!(mul(&a, &Tensor::ones([1, 2, 3, 1])).is_err());
}

#[test]
fn mul_broadcasts_over_spatial_and_channel_axes() {
    let x = random::<f64>([2, 3, 4, 5], 11);
    let cg = random::<f64>([2, 3, 1, 1], 12);
    let sg = random::<f64>([2, 1, 4, 5], 13);
    let y = mul(&x, &cg).unwrap();
    let z = mul(&x, &sg).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for h in 0..4 {
                for w in 0..5 {
                    assert_eq!(y.at(n, c, h, w), x.at(n, c, h, w) * cg.at(n, c, 0, 0));
                    assert_eq!(z.at(n, c, h, w), x.at(n, c, h, w) * sg.at(n, 0, h, w));
                }
            }
        }
    }
}

#[test]
fn pad_adds_zero_border() {
    let x = Tensor::<f32>::ones([1, 1, 2, 3]);
    let y = pad2d(&x, 2);
    assert_eq!(y.shape(), [1, 1, 6, 7]);
    assert_eq!(y.data().iter().sum::<f32>(), 6.0);
    assert_eq!(y.at(0, 0, 2, 2), 1.0);
    assert_eq!(y.at(0, 0, 1, 2), 0.0);
}

#[test]
fn pooling_values() {
    let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    assert_eq!(global_max_pool(&x).unwrap().data(), &[4.0]);
    let c = Tensor::<f32>::full([1, 2, 3, 3], 2.0);
    assert_eq!(global_avg_pool(&c).unwrap().data(), &[2.0, 2.0]);
    assert!(global_avg_pool(&Tensor::<f32>::zeros([1, 1, 0, 3])).is_err());
}

#[test]
fn channel_mean_max_values() {
    let x = Tensor::<f32>::new([1, 2, 1, 1], vec![0.0, 4.0]).unwrap();
    assert_eq!(channel_mean_max(&x).unwrap().data(), &[2.0, 4.0]);
    let single = random::<f32>([2, 1, 3, 4], 14);
    let d = channel_mean_max(&single).unwrap();
    assert_eq!(d.shape(), [2, 2, 3, 4]);
    for n in 0..2 {
        assert_eq!(d.plane(n, 0), single.plane(n, 0));
        assert_eq!(d.plane(n, 1), single.plane(n, 0));
    }
}

#[test]
fn pixel_shuffle_layout() {
    let x = Tensor::<f32>::from_fn([1, 4, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f32);
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), [1, 1, 4, 4]);
    // channel i·2 + j lands at (2y + i, 2x + j)
    assert_eq!(y.at(0, 0, 0, 1), x.at(0, 1, 0, 0));
    assert_eq!(y.at(0, 0, 1, 0), x.at(0, 2, 0, 0));
    assert_eq!(y.at(0, 0, 3, 3), x.at(0, 3, 1, 1));
    assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    assert!(pixel_shuffle(&Tensor::<f32>::zeros([1, 3, 2, 2]), 2).is_err());
}

#[test]
fn l1_loss_value() {
    let a = Tensor::<f64>::new([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let b = Tensor::<f64>::new([1, 1, 1, 4], vec![1.0, 1.0, 0.0, 3.5]).unwrap();
    assert_eq!(l1_loss(&a, &b).unwrap().data(), &[3.5 / 4.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let x = Tensor::<f32>::full([1, 1, 2, 2], f32::MAX);
    assert!(matches!(add(&x, &x), Err(Error::NonFinite { .. })));
}

#[test]
fn tape_sigmoid_grad_at_zero() {
    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let y = tape.sigmoid(x).unwrap();
    let g = tape.backward(y, 1.0).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn tape_add_distributes_gradient() {
    let mut tape = GradTape::<f64>::new();
    let a = tape.leaf(random([1, 2, 3, 3], 15)).unwrap();
    let b = tape.leaf(random([1, 2, 3, 3], 16)).unwrap();
    let s = tape.add(a, b).unwrap();
    let l = tape.sum_all(s).unwrap();
    let g = tape.backward(l, 2.0).unwrap();
    assert!(g.get(a).unwrap().data().iter().all(|&v| v == 2.0));
    assert!(g.get(b).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn tape_visits_every_op_once_and_cannot_replay() {
    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(random([1, 2, 4, 4], 17)).unwrap();
    let w = tape.leaf(random([2, 2, 3, 3], 18)).unwrap();
    let y = tape.conv2d(x, w, None, ConvGeom::same(3)).unwrap();
    let y = tape.relu(y).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l, 1.0).unwrap();
    assert_eq!(g.visited(), tape.len());
    assert!(matches!(tape.backward(l, 1.0), Err(Error::TapeConsumed)));
}

#[test]
fn tape_requires_scalar_loss() {
    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(random([1, 2, 2, 2], 19)).unwrap();
    assert!(tape.backward(x, 1.0).is_err());
}

#[test]
fn gradient_is_accumulated_for_reused_values() {
    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y, 1.0).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 1usize..5, 1usize..7, 1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear((n, c, h, w) in shape_strategy(), k in prop::sample::select(vec![1usize, 3, 5]),
                      a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let x = random::<f32>([n, c, h, w], seed);
        let y = random::<f32>([n, c, h, w], seed + 1);
        let wt = random::<f32>([3, c, k, k], seed + 2);
        let geom = ConvGeom::same(k);
        let (af, bf) = (a as f32, b as f32);
        let lhs = conv2d_raw(&add(&scale(&x, af).unwrap(), &scale(&y, bf).unwrap()).unwrap(), &wt, None, geom).unwrap();
        let rhs = add(
            &scale(&conv2d_raw(&x, &wt, None, geom).unwrap(), af).unwrap(),
            &scale(&conv2d_raw(&y, &wt, None, geom).unwrap(), bf).unwrap(),
        ).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
    }

    #[test]
    fn conv_agrees_with_oracle((n, c, h, w) in shape_strategy(), k in prop::sample::select(vec![1usize, 3]),
                               cout in 1usize..4, seed in 0u64..1000) {
        let x = random::<f64>([n, c, h, w], seed);
        let wt = random::<f64>([cout, c, k, k], seed + 1);
        let bias = random::<f64>([cout, 1, 1, 1], seed + 2);
        let geom = ConvGeom::same(k);
        let want = conv_oracle(&x, &wt, Some(&bias), geom);
        prop_assert!(conv2d_raw(&x, &wt, Some(&bias), geom).unwrap().max_abs_diff(&want) <= 1e-12);
        let got32 = conv2d_raw(&x.cast::<f32>(), &wt.cast(), Some(&bias.cast()), geom).unwrap();
        let want32 = conv_oracle(&f32ed(&x), &f32ed(&wt), Some(&f32ed(&bias)), geom);
        // f32 summation error grows with the absolute size of the summands
        let abs = |t: &Tensor<f64>| t.map(f64::abs);
        let mag = conv_oracle(&abs(&x), &abs(&wt), Some(&abs(&bias)), geom);
        for ((g, w), m) in got32.cast::<f64>().data().iter().zip(want32.data()).zip(mag.data()) {
            prop_assert!((g - w).abs() <= 1e-6 * m.max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn pixel_shuffle_round_trips((n, c, h, w) in shape_strategy(), r in 1usize..4, seed in 0u64..1000) {
        let x = random::<f32>([n, c * r * r, h, w], seed);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), [n, c, h * r, w * r]);
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x.clone());
        let mut a: Vec<f32> = x.data().to_vec();
        let mut b: Vec<f32> = y.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn concat_then_slice_is_identity((n, c, h, w) in shape_strategy(), c2 in 1usize..4, seed in 0u64..1000) {
        let a = random::<f32>([n, c, h, w], seed);
        let b = random::<f32>([n, c2, h, w], seed + 1);
        let cat = concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(slice_channels(&cat, 0, c).unwrap(), a);
        prop_assert_eq!(slice_channels(&cat, c, c2).unwrap(), b);
    }

    #[test]
    fn pooling_is_permutation_invariant((n, c, h, w) in shape_strategy(), seed in 0u64..1000) {
        let x = random::<f64>([n, c, h, w], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = h * w;
        let mut perm: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let y = Tensor::from_fn(x.shape(), |ni, ci, hi, wi| {
            let p = perm[hi * w + wi];
            x.at(ni, ci, p / w, p % w)
        });
        prop_assert_eq!(global_max_pool(&x).unwrap(), global_max_pool(&y).unwrap());
        prop_assert!(global_avg_pool(&x).unwrap().max_abs_diff(&global_avg_pool(&y).unwrap()) <= 1e-12);
    }

    #[test]
    fn sigmoid_is_open_unit_interval(v in -15.0f32..15.0) {
        let s = sigmoid_scalar(v);
        prop_assert!(s > 0.0 && s < 1.0);
    }
}
