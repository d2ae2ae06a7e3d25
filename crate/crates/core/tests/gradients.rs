//! Central finite-difference checks of the analytic gradients.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::network::ops::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvSpec};
use vesselseg::network::{Scalar, Tensor};

fn random<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len)
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

/// Central differences of `<f(x, k), r>` in `k` and in `x`, paired with the analytic values.
fn numeric_vs_analytic<T: Scalar, F>(
    f: &F,
    x: &Tensor<T>,
    k: &Tensor<T>,
    r: &Tensor<T>,
    gk: &Tensor<T>,
    gx: &Tensor<T>,
) -> Vec<(f64, f64)>
where
    F: Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
{
    let h = 1e-3;
    let mut pairs = Vec::new();
    for i in 0..k.len() {
        let (mut plus, mut minus) = (k.clone(), k.clone());
        plus.data_mut()[i] = T::from_f64(k.data()[i].as_f64() + h);
        minus.data_mut()[i] = T::from_f64(k.data()[i].as_f64() - h);
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        pairs.push((
            (dot(&f(x, &plus), r) - dot(&f(x, &minus), r)) / step,
            gk.data()[i].as_f64(),
        ));
    }
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] = T::from_f64(x.data()[i].as_f64() + h);
        minus.data_mut()[i] = T::from_f64(x.data()[i].as_f64() - h);
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        pairs.push((
            (dot(&f(&plus, k), r) - dot(&f(&minus, k), r)) / step,
            gx.data()[i].as_f64(),
        ));
    }
    pairs
}

fn max_elementwise_rel(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn normwise_rel(pairs: &[(f64, f64)]) -> f64 {
    let diff: f64 = pairs.iter().map(|&(n, a)| (n - a) * (n - a)).sum();
    let norm: f64 = pairs.iter().map(|&(_, a)| a * a).sum();
    (diff / norm).sqrt()
}

enum Primitive {
    Conv(ConvSpec),
    Deconv,
}

fn check<T: Scalar>(prim: &Primitive, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *prim {
        Primitive::Conv(spec) => {
            let x = random::<T>(&[1, 2, 8, 8], &mut rng);
            let k = random::<T>(&[3, 2, 3, 3], &mut rng);
            let side = if spec.stride == 2 { 4 } else { 8 };
            let r = random::<T>(&[1, 3, side, side], &mut rng);
            let g = conv2d_backward(&x, &k, &r, spec).unwrap();
            let f = |x: &Tensor<T>, k: &Tensor<T>| conv2d(x, k, None, spec).unwrap();
            numeric_vs_analytic(&f, &x, &k, &r, &g.kernel, &g.input)
        }
        Primitive::Deconv => {
            let x = random::<T>(&[1, 3, 4, 4], &mut rng);
            let k = random::<T>(&[3, 2, 2, 2], &mut rng);
            let r = random::<T>(&[1, 2, 8, 8], &mut rng);
            let g = deconv2d_backward(&x, &k, &r, 2).unwrap();
            let f = |x: &Tensor<T>, k: &Tensor<T>| deconv2d(x, k, None, 2).unwrap();
            numeric_vs_analytic(&f, &x, &k, &r, &g.kernel, &g.input)
        }
    }
}

#[test]
fn conv2d_gradients_match_central_differences() {
    for (seed, spec) in [(3, ConvSpec::SAME3), (5, ConvSpec::DOWN3)] {
        let prim = Primitive::Conv(spec);
        let exact = max_elementwise_rel(&check::<f64>(&prim, seed));
        assert!(exact < 1e-3, "{spec:?}: elementwise {exact:e}");
        let single = normwise_rel(&check::<f32>(&prim, seed));
        assert!(single < 1e-3, "{spec:?}: f32 normwise {single:e}");
    }
}

#[test]
fn deconv2d_gradients_match_central_differences() {
    let exact = max_elementwise_rel(&check::<f64>(&Primitive::Deconv, 4));
    assert!(exact < 1e-3, "elementwise {exact:e}");
    let single = normwise_rel(&check::<f32>(&Primitive::Deconv, 4));
    assert!(single < 1e-3, "f32 normwise {single:e}");
}

#[test]
fn micro_net_total_loss_gradient_matches_central_differences() {
    let report = common::micro_net_gradcheck(100, 1e-3, 7);
    assert_eq!(report.checked, 100);
    assert!(
        report.max_rel_error < 1e-3,
        "max relative error {:e} at {}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn micro_net_gradient_holds_for_other_seeds() {
    for seed in [1, 2] {
        let report = common::micro_net_gradcheck(40, 1e-3, seed);
        assert!(
            report.max_rel_error < 1e-3,
            "seed {seed}: {:e} at {}",
            report.max_rel_error,
            report.worst
        );
    }
}
