//! Finite-difference checks for every layer's backward pass, in f64.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-0.8..0.8))
}

/// Scalar test loss: weighted sum of outputs, weights fixed per element.
fn loss_of(y: &Array4<f64>) -> f64 {
    y.iter()
        .enumerate()
        .map(|(i, &v)| v * (0.3 + 0.1 * ((i % 7) as f64) - 0.25 * ((i % 3) as f64)))
        .sum()
}

fn dloss_of(y: &Array4<f64>) -> Array4<f64> {
    let mut d = Array4::zeros(y.raw_dim());
    for (i, v) in d.iter_mut().enumerate() {
        *v = 0.3 + 0.1 * ((i % 7) as f64) - 0.25 * ((i % 3) as f64);
    }
    d
}

fn check_conv(kernel: usize, stride: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let conv: Conv2d<f64> = conv2d(3, 4, kernel, stride, ParamInit::He, &mut rng);
    let x = rand4((2, 3, 8, 8), 1);

    let y = conv.forward(&x);
    let mut dw = Array4::zeros(conv.w.raw_dim());
    let mut db = Array1::zeros(conv.b.raw_dim());
    let dx = conv
        .backward(&x, &dloss_of(&y), &mut dw, &mut db, true)
        .unwrap();

    // Weight gradients.
    let w_len = conv.w.len();
    for k in (0..w_len).step_by(w_len / 11 + 1) {
        let mut cp = conv.clone();
        cp.w.as_slice_mut().unwrap()[k] += EPS;
        let mut cm = conv.clone();
        cm.w.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&cp.forward(&x)) - loss_of(&cm.forward(&x))) / (2.0 * EPS);
        let ana = dw.as_slice().unwrap()[k];
        assert!(
            rel_err(ana, num) < TOL,
            "conv k{kernel}s{stride} dw[{k}]: {ana} vs {num}"
        );
    }
    // Bias gradients.
    for k in 0..conv.b.len() {
        let mut cp = conv.clone();
        cp.b[k] += EPS;
        let mut cm = conv.clone();
        cm.b[k] -= EPS;
        let num = (loss_of(&cp.forward(&x)) - loss_of(&cm.forward(&x))) / (2.0 * EPS);
        assert!(rel_err(db[k], num) < TOL, "conv db[{k}]");
    }
    // Input gradients.
    let x_len = x.len();
    for k in (0..x_len).step_by(x_len / 13 + 1) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += EPS;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&conv.forward(&xp)) - loss_of(&conv.forward(&xm))) / (2.0 * EPS);
        let ana = dx.as_slice().unwrap()[k];
        assert!(rel_err(ana, num) < TOL, "conv dx[{k}]: {ana} vs {num}");
    }
}

#[test]
fn conv_gradients_k3s1() {
    check_conv(3, 1);
}

#[test]
fn conv_gradients_k3s2() {
    check_conv(3, 2);
}

#[test]
fn conv_gradients_k4s2() {
    check_conv(4, 2);
}

#[test]
fn conv_gradients_k4s1_asymmetric_padding() {
    check_conv(4, 1);
}

#[test]
fn conv_same_padding_preserves_or_halves() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c1: Conv2d<f64> = conv2d(2, 2, 4, 1, ParamInit::He, &mut rng);
    assert_eq!(c1.out_hw(16, 16), (16, 16));
    let c2: Conv2d<f64> = conv2d(2, 2, 4, 2, ParamInit::He, &mut rng);
    assert_eq!(c2.out_hw(16, 16), (8, 8));
    let c3: Conv2d<f64> = conv2d(2, 2, 3, 2, ParamInit::He, &mut rng);
    assert_eq!(c3.out_hw(16, 16), (8, 8));
}

#[test]
fn instance_norm_gradients() {
    let norm = {
        let mut n = InstanceNorm::<f64>::new(3);
        n.gamma[0] = 1.3;
        n.gamma[1] = 0.7;
        n.gamma[2] = -0.4;
        n.beta[0] = 0.1;
        n.beta[2] = -0.2;
        n
    };
    let x = rand4((2, 3, 5, 5), 7);
    let (y, stats) = norm.forward(&x);
    let mut dg = Array1::zeros(3);
    let mut db = Array1::zeros(3);
    let dx = norm.backward(&x, &stats, &dloss_of(&y), &mut dg, &mut db);

    for k in 0..3 {
        let mut np = norm.clone();
        np.gamma[k] += EPS;
        let mut nm = norm.clone();
        nm.gamma[k] -= EPS;
        let num = (loss_of(&np.forward(&x).0) - loss_of(&nm.forward(&x).0)) / (2.0 * EPS);
        assert!(rel_err(dg[k], num) < 1e-5, "norm dgamma[{k}]");

        let mut np = norm.clone();
        np.beta[k] += EPS;
        let mut nm = norm.clone();
        nm.beta[k] -= EPS;
        let num = (loss_of(&np.forward(&x).0) - loss_of(&nm.forward(&x).0)) / (2.0 * EPS);
        assert!(rel_err(db[k], num) < 1e-5, "norm dbeta[{k}]");
    }
    let x_len = x.len();
    for k in (0..x_len).step_by(x_len / 9 + 1) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += EPS;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&norm.forward(&xp).0) - loss_of(&norm.forward(&xm).0)) / (2.0 * EPS);
        let ana = dx.as_slice().unwrap()[k];
        assert!(rel_err(ana, num) < 1e-4, "norm dx[{k}]: {ana} vs {num}");
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lin: Linear<f64> = linear(6, 4, ParamInit::Normal(0.3), &mut rng);
    let x = Array2::from_shape_simple_fn((3, 6), || rng.gen_range(-1.0..1.0));

    let loss2 = |y: &Array2<f64>| -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &v)| v * (0.2 + 0.07 * (i % 5) as f64))
            .sum()
    };
    let y = lin.forward(&x);
    let mut dy = Array2::zeros(y.raw_dim());
    for (i, v) in dy.iter_mut().enumerate() {
        *v = 0.2 + 0.07 * (i % 5) as f64;
    }
    let mut dw = Array2::zeros(lin.w.raw_dim());
    let mut db = Array1::zeros(4);
    let dx = lin.backward(&x, &dy, &mut dw, &mut db);

    for k in (0..lin.w.len()).step_by(3) {
        let mut lp = lin.clone();
        lp.w.as_slice_mut().unwrap()[k] += EPS;
        let mut lm = lin.clone();
        lm.w.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss2(&lp.forward(&x)) - loss2(&lm.forward(&x))) / (2.0 * EPS);
        assert!(rel_err(dw.as_slice().unwrap()[k], num) < TOL, "linear dw[{k}]");
    }
    for k in 0..4 {
        let mut lp = lin.clone();
        lp.b[k] += EPS;
        let mut lm = lin.clone();
        lm.b[k] -= EPS;
        let num = (loss2(&lp.forward(&x)) - loss2(&lm.forward(&x))) / (2.0 * EPS);
        assert!(rel_err(db[k], num) < TOL, "linear db[{k}]");
    }
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += EPS;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss2(&lin.forward(&xp)) - loss2(&lin.forward(&xm))) / (2.0 * EPS);
        assert!(rel_err(dx.as_slice().unwrap()[k], num) < TOL, "linear dx[{k}]");
    }
}

/// A composite stack exercising every layer kind, checked end to end.
#[test]
fn seq_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut layers: Vec<Layer<f64>> = Vec::new();
    layers.push(Layer::Conv(conv2d(2, 4, 3, 2, ParamInit::He, &mut rng)));
    layers.push(Layer::Norm(InstanceNorm::new(4)));
    layers.push(Layer::Act(Act::Relu));
    layers.push(Layer::Residual(Seq::new(vec![
        Layer::Conv(conv2d(4, 4, 3, 1, ParamInit::He, &mut rng)),
        Layer::Norm(InstanceNorm::new(4)),
        Layer::Act(Act::LeakyRelu(0.2)),
        Layer::Conv(conv2d(4, 4, 3, 1, ParamInit::He, &mut rng)),
        Layer::Norm(InstanceNorm::new(4)),
    ])));
    layers.push(Layer::Upsample2x);
    layers.push(Layer::Conv(conv2d(4, 2, 3, 1, ParamInit::He, &mut rng)));
    layers.push(Layer::Scale(1.7));
    layers.push(Layer::Act(Act::Tanh));
    layers.push(Layer::Conv(conv2d(2, 1, 3, 1, ParamInit::He, &mut rng)));
    layers.push(Layer::Act(Act::Sigmoid));
    let seq = Seq::new(layers);

    let x = rand4((2, 2, 6, 6), 3);
    let cache = seq.forward(&x);
    let y = cache.output().clone();
    let mut grads = seq.zero_grads();
    let dx = seq
        .backward(&cache, dloss_of(&y), &mut grads, true)
        .unwrap();

    // Check a spread of parameters against central differences.
    let mut seq_mut = seq.clone();
    let n_params = {
        let mut v = Vec::new();
        seq.visit("s", &mut v);
        probe::flat_len(&v)
    };
    let mut gviews = Vec::new();
    grads.visit(&mut gviews);
    assert_eq!(probe::grad_len(&gviews), n_params);

    for k in (0..n_params).step_by(n_params / 23 + 1) {
        let eval = |s: &Seq<f64>| loss_of(&s.infer(&x));
        {
            let mut v = Vec::new();
            seq_mut.visit_mut("s", &mut v);
            probe::add_at(&mut v, k, EPS);
        }
        let lp = eval(&seq_mut);
        {
            let mut v = Vec::new();
            seq_mut.visit_mut("s", &mut v);
            probe::add_at(&mut v, k, -2.0 * EPS);
        }
        let lm = eval(&seq_mut);
        {
            let mut v = Vec::new();
            seq_mut.visit_mut("s", &mut v);
            probe::add_at(&mut v, k, EPS);
        }
        let num = (lp - lm) / (2.0 * EPS);
        let ana = probe::grad_at(&gviews, k);
        assert!(
            rel_err(ana, num) < 1e-4,
            "seq param {k}: analytic {ana} vs numeric {num}"
        );
    }

    // And input gradients.
    for k in (0..x.len()).step_by(x.len() / 11 + 1) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += EPS;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&seq.infer(&xp)) - loss_of(&seq.infer(&xm))) / (2.0 * EPS);
        let ana = dx.as_slice().unwrap()[k];
        assert!(rel_err(ana, num) < 1e-4, "seq dx[{k}]: {ana} vs {num}");
    }
}

#[test]
fn adam_descends_quadratic() {
    // Minimize ||p - target||^2; Adam should reduce it monotonically-ish.
    let mut p = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[4]), 1.0f64);
    let target = [0.3, -0.7, 0.2, 0.9];
    let mut opt = Adam::<f64>::new(0.05, 0.5, 0.999);
    let loss = |p: &ndarray::ArrayD<f64>| -> f64 {
        p.iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    };
    let l0 = loss(&p);
    for _ in 0..200 {
        let g = ndarray::ArrayD::from_shape_fn(p.raw_dim(), |i| 2.0 * (p[&i] - target[i[0]]));
        opt.step(vec![p.view_mut()], vec![g.view()]);
    }
    assert!(loss(&p) < 1e-3 * l0.max(1.0), "adam failed to descend");
}

#[test]
fn upsample_roundtrip_shapes() {
    let x = rand4((1, 2, 3, 3), 2);
    let y = upsample2x(&x);
    assert_eq!(y.dim(), (1, 2, 6, 6));
    assert_eq!(y[(0, 1, 4, 5)], x[(0, 1, 2, 2)]);
}

/// The patch head runs a 4x4 stride-1 conv over a 1x1 feature map; padding
/// taps past both edges must behave.
#[test]
fn conv_gradients_k4s1_on_1x1_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let conv: Conv2d<f64> = conv2d(5, 1, 4, 1, ParamInit::He, &mut rng);
    let x = rand4((2, 5, 1, 1), 4);
    assert_eq!(conv.out_hw(1, 1), (1, 1));
    let y = conv.forward(&x);
    let mut dw = ndarray::Array4::zeros(conv.w.raw_dim());
    let mut db = Array1::zeros(1);
    let dx = conv
        .backward(&x, &dloss_of(&y), &mut dw, &mut db, true)
        .unwrap();
    for k in 0..conv.w.len() {
        let mut cp = conv.clone();
        cp.w.as_slice_mut().unwrap()[k] += EPS;
        let mut cm = conv.clone();
        cm.w.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&cp.forward(&x)) - loss_of(&cm.forward(&x))) / (2.0 * EPS);
        let ana = dw.as_slice().unwrap()[k];
        assert!(rel_err(ana, num) < TOL || (ana == 0.0 && num.abs() < 1e-12));
    }
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[k] += EPS;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[k] -= EPS;
        let num = (loss_of(&conv.forward(&xp)) - loss_of(&conv.forward(&xm))) / (2.0 * EPS);
        assert!(rel_err(dx.as_slice().unwrap()[k], num) < TOL);
    }
}
