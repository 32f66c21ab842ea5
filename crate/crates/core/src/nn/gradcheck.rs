//! Directional finite-difference checks of every backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Loss = <layer(x), r>; compares analytic and numeric directional
/// derivatives w.r.t. the input and every parameter tensor.
fn check(mut layer: Layer, shape: [usize; 4], mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(shape, randn(&mut rng, shape.iter().product()));
    let (y, cache) = layer.forward(&x, mode);
    let r = Tensor::from_vec(y.shape, randn(&mut rng, y.data.len()));
    for p in layer.params_mut() {
        p.ensure_state();
        p.zero_grad();
    }
    let dx = layer.backward(&cache, &r, true, true).expect("dx");

    let h = 1e-2f32;
    let loss = |l: &mut Layer, x: &Tensor| dot(&l.forward(x, mode).0.data, &r.data);
    let tol = |a: f64, b: f64| (a - b).abs() <= 2e-2 * a.abs().max(b.abs()).max(1e-1);

    // input direction
    let v = randn(&mut rng, x.data.len());
    let shifted = |s: f32| {
        let mut xs = x.clone();
        xs.data.iter_mut().zip(&v).for_each(|(a, b)| *a += s * b);
        xs
    };
    let mut l2 = layer.clone();
    let num = (loss(&mut l2, &shifted(h)) - loss(&mut l2, &shifted(-h))) / (2.0 * h as f64);
    let ana = dot(&dx.data, &v);
    assert!(tol(num, ana), "input grad: numeric {num} vs analytic {ana}");

    let grads: Vec<Vec<f32>> = layer.params_mut().iter().map(|p| p.grad.clone()).collect();
    for (k, g) in grads.iter().enumerate() {
        let v = randn(&mut rng, g.len());
        let perturbed = |s: f32| {
            let mut l = layer.clone();
            let p = &mut l.params_mut()[k];
            p.value.iter_mut().zip(&v).for_each(|(a, b)| *a += s * b);
            l
        };
        let num = (loss(&mut perturbed(h), &x) - loss(&mut perturbed(-h), &x)) / (2.0 * h as f64);
        let ana = dot(g, &v);
        assert!(tol(num, ana), "param {k}: numeric {num} vs analytic {ana}");
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv_same_padding() {
    let c = Conv2d::new("c", 3, 4, 3, 1, Padding::same(3), true, &mut rng(1));
    check(Layer::Conv(c), [2, 3, 6, 5], Mode::Train, 10);
}

#[test]
fn conv_stride2_asymmetric() {
    let c = Conv2d::new("c", 2, 3, 3, 2, Padding::stride2_even(3), false, &mut rng(2));
    check(Layer::Conv(c), [2, 2, 8, 8], Mode::Train, 11);
    let c = Conv2d::new("c", 2, 3, 5, 2, Padding::stride2_even(5), false, &mut rng(3));
    check(Layer::Conv(c), [2, 2, 8, 6], Mode::Train, 12);
}

#[test]
fn conv_pointwise() {
    let c = Conv2d::new("c", 5, 3, 1, 1, Padding::default(), true, &mut rng(4));
    check(Layer::Conv(c), [3, 5, 4, 4], Mode::Train, 13);
}

#[test]
fn depthwise() {
    let c = Conv2d::depthwise("d", 3, 3, 1, Padding::same(3), &mut rng(5));
    check(Layer::Conv(c), [2, 3, 5, 5], Mode::Train, 14);
    let c = Conv2d::depthwise("d", 3, 5, 2, Padding::stride2_even(5), &mut rng(6));
    check(Layer::Conv(c), [2, 3, 8, 8], Mode::Train, 15);
}

#[test]
fn batch_norm_both_modes() {
    let mut bn = BatchNorm::new("bn", 3);
    bn.gamma.value = vec![0.5, 1.5, -1.0];
    bn.beta.value = vec![0.1, 0.0, 0.3];
    bn.running_mean.value = vec![0.2, -0.1, 0.0];
    bn.running_var.value = vec![0.8, 1.2, 2.0];
    check(Layer::BatchNorm(bn.clone()), [4, 3, 3, 3], Mode::Train, 16);
    check(Layer::BatchNorm(bn), [4, 3, 3, 3], Mode::Infer, 17);
}

#[test]
fn activations_and_pools() {
    check(Layer::Act(Activation::Swish), [2, 3, 4, 4], Mode::Train, 18);
    check(Layer::Act(Activation::Sigmoid), [2, 3, 4, 4], Mode::Train, 19);
    check(Layer::AvgPool2, [2, 3, 4, 6], Mode::Train, 20);
    check(Layer::GlobalAvgPool, [2, 3, 4, 6], Mode::Train, 21);
}

#[test]
fn dense() {
    let d = Dense::new("fc", 12, 5, &mut rng(7));
    check(Layer::Dense(d), [3, 3, 2, 2], Mode::Train, 22);
}

#[test]
fn mbconv_expand_stride2() {
    let spec = MbConvSpec {
        prefix: "b_".into(),
        in_channels: 4,
        out_channels: 6,
        kernel: 5,
        stride: 2,
        expand_ratio: 3,
        se_ratio: 0.25,
        input_hw: (8, 8),
    };
    let m = MbConv::new(&spec, &mut rng(8));
    check(Layer::MbConv(Box::new(m.clone())), [2, 4, 8, 8], Mode::Train, 23);
    check(Layer::MbConv(Box::new(m)), [2, 4, 8, 8], Mode::Infer, 24);
}

#[test]
fn mbconv_residual_no_expand() {
    let spec = MbConvSpec {
        prefix: "b_".into(),
        in_channels: 4,
        out_channels: 4,
        kernel: 3,
        stride: 1,
        expand_ratio: 1,
        se_ratio: 0.25,
        input_hw: (5, 5),
    };
    let m = MbConv::new(&spec, &mut rng(9));
    assert!(m.skip);
    check(Layer::MbConv(Box::new(m)), [2, 4, 5, 5], Mode::Train, 25);
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(26);
    let logits = Tensor::from_vec([3, 4, 1, 1], randn(&mut r, 12));
    let labels = [0usize, 3, 2];
    let (_, g, _) = softmax_cross_entropy(&logits, &labels);
    let h = 1e-2f32;
    for k in 0..12 {
        let mut p = logits.clone();
        p.data[k] += h;
        let mut m = logits.clone();
        m.data[k] -= h;
        let num = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / (2.0 * h);
        assert!((num - g.data[k]).abs() < 1e-3, "{k}: {num} vs {}", g.data[k]);
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let spec = MbConvSpec {
        prefix: "b_".into(),
        in_channels: 4,
        out_channels: 6,
        kernel: 3,
        stride: 2,
        expand_ratio: 6,
        se_ratio: 0.25,
        input_hw: (8, 8),
    };
    let m = MbConv::new(&spec, &mut rng(30));
    let mut r = rng(31);
    let x = Tensor::from_vec([4, 4, 8, 8], randn(&mut r, 4 * 4 * 64));
    let run = |on: bool| {
        crate::par::with_mode(on, || {
            let mut l = Layer::MbConv(Box::new(m.clone()));
            let (y, c) = l.forward(&x, Mode::Train);
            let dx = l.backward(&c, &y, true, true).unwrap();
            let grads: Vec<Vec<f32>> = l.params_mut().iter().map(|p| p.grad.clone()).collect();
            (y, dx, grads)
        })
    };
    assert!(run(false) == run(true));
}
