use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
}

/// Central finite differences against reverse-mode gradients for a scalar
/// function of several inputs.
fn grad_check(inputs: &[ArrayD<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) {
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::trainable(a.clone())).collect();
    let loss = f(&tensors);
    assert_eq!(loss.len(), 1);
    let grads = backward(&loss);

    let eps = 1e-5;
    for (i, base) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&tensors[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(base.shape())));
        for idx in ndarray::indices(base.shape()) {
            let mut plus = inputs.to_vec();
            plus[i][&idx] += eps;
            let mut minus = inputs.to_vec();
            minus[i][&idx] -= eps;
            let lp = f(&plus.iter().map(|a| Tensor::trainable(a.clone())).collect::<Vec<_>>()).item();
            let lm = f(&minus.iter().map(|a| Tensor::trainable(a.clone())).collect::<Vec<_>>()).item();
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[&idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn grad_elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[3, 4]);
    grad_check(&[a.clone(), b.clone()], |t| t[0].add(&t[1]).mul(&t[0]).sum());
    grad_check(&[a.clone(), b.clone()], |t| t[0].sub(&t[1]).sum());
    // keep denominators away from zero for div
    let bq = b.mapv(|v| if v.abs() < 0.3 { 0.3 + v.abs() } else { v });
    grad_check(&[a.clone(), bq], |t| t[0].div(&t[1]).sum());
    grad_check(&[a.clone(), b.clone()], |t| t[0].minimum(&t[1]).sum());
    grad_check(&[a, b], |t| t[0].maximum(&t[1]).sum());
}

#[test]
fn grad_elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&mut rng, &[2, 5]);
    grad_check(&[a.clone()], |t| t[0].scale(2.5).sum());
    grad_check(&[a.clone()], |t| t[0].add_scalar(-0.7).mul(&t[0]).sum());
    grad_check(&[a.clone()], |t| t[0].silu().sum());
    grad_check(&[a.clone()], |t| t[0].sigmoid().sum());
    grad_check(&[a.clone()], |t| t[0].softplus().sum());
    // abs/relu are kinked at zero; random values sit away from it
    grad_check(&[a.clone()], |t| t[0].abs().sum());
    grad_check(&[a], |t| t[0].relu().sum());
}

#[test]
fn grad_matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_array(&mut rng, &[3, 4]);
    let b = rand_array(&mut rng, &[4, 2]);
    let bias = rand_array(&mut rng, &[2]);
    grad_check(&[a, b, bias], |t| {
        t[0].matmul(&t[1]).add_bias_row(&t[2]).silu().sum()
    });
}

#[test]
fn grad_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_array(&mut rng, &[2, 3, 4]);
    let b = rand_array(&mut rng, &[2, 4, 2]);
    grad_check(&[a, b], |t| t[0].bmm(&t[1]).sigmoid().sum());
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_array(&mut rng, &[2, 3, 4]);
    grad_check(&[a.clone()], |t| t[0].permute(&[2, 0, 1]).silu().sum());
    grad_check(&[a.clone()], |t| t[0].reshape(&[6, 4]).sigmoid().sum());
    grad_check(&[a.clone()], |t| t[0].narrow(1, 1, 2).mul(&t[0].narrow(1, 0, 2)).sum());
    let b = rand_array(&mut rng, &[2, 3, 4]);
    grad_check(&[a.clone(), b], |t| {
        Tensor::concat(&[t[0].clone(), t[1].clone()], 1).silu().sum()
    });
    grad_check(&[a], |t| {
        t[0].reshape(&[6, 4]).index_select(&[0, 2, 2, 5]).sum()
    });
}

#[test]
fn grad_im2col_and_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 5, 5]);
    let w = rand_array(&mut rng, &[2 * 3 * 3, 3]);
    let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
    grad_check(&[x.clone(), w], |t| t[0].im2col(spec).matmul(&t[1]).silu().sum());
    grad_check(&[x], |t| t[0].upsample_nearest2().sigmoid().sum());
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_array(&mut rng, &[4, 6]);
    let gamma = rand_array(&mut rng, &[6]);
    let beta = rand_array(&mut rng, &[6]);
    grad_check(&[x, gamma, beta], |t| {
        t[0].layer_norm(&t[1], &t[2], 1e-5).silu().sum()
    });
}

#[test]
fn grad_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&mut rng, &[3, 5]);
    let v = rand_array(&mut rng, &[3, 5]);
    grad_check(&[x, v], |t| t[0].softmax_last().mul(&t[1]).sum());
}

#[test]
fn grad_bce_with_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&mut rng, &[4, 3]);
    let t_arr = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |_| rng.gen_range(0.0..1.0));
    grad_check(&[x], |t| t[0].bce_with_logits(&t_arr).sum());
}

#[test]
fn bce_matches_naive_formula() {
    let x = Tensor::<f64>::constant(ndarray::arr1(&[-3.0, -0.5, 0.0, 2.0, 30.0]).into_dyn());
    let t = ndarray::arr1(&[1.0, 0.25, 0.5, 0.0, 1.0]).into_dyn();
    let loss = x.bce_with_logits(&t);
    for (i, (&xv, &tv)) in x.data().iter().zip(t.iter()).enumerate() {
        let p: f64 = 1.0 / (1.0 + (-xv as f64).exp());
        let naive = -(tv * p.ln() + (1.0 - tv) * (1.0 - p).ln());
        assert!(
            (loss.data().iter().nth(i).unwrap() - naive).abs() < 1e-9,
            "mismatch at {i}"
        );
    }
}

#[test]
fn detach_blocks_gradient() {
    let a = Tensor::<f64>::trainable(ndarray::arr1(&[2.0, 3.0]).into_dyn());
    let loss = a.detach().mul(&a).sum();
    let grads = backward(&loss);
    // d/da (detach(a) * a) = detach(a), not 2a
    let g = grads.get(&a).unwrap();
    assert_eq!(g[[0]], 2.0);
    assert_eq!(g[[1]], 3.0);
}

#[test]
fn shared_param_accumulates() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("w", ndarray::arr1(&[1.5]).into_dyn());
    let ctx = GraphCtx::new(&ps);
    let w1 = ctx.p(id);
    let w2 = ctx.p(id);
    assert_eq!(w1.id(), w2.id(), "same param must be one node per graph");
    let loss = w1.mul(&w2).sum(); // w^2
    let grads = backward(&loss);
    let pg = ctx.param_grads(&grads);
    assert_eq!(pg[0].as_ref().unwrap()[[0]], 3.0); // 2w
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_array(&mut rng, &[4, 4]);
    let w = rand_array(&mut rng, &[4, 4]);
    let run = || {
        let xt = Tensor::trainable(x.clone());
        let wt = Tensor::trainable(w.clone());
        let loss = xt.matmul(&wt).silu().layer_norm(
            &Tensor::constant(ArrayD::from_elem(IxDyn(&[4]), 1.0)),
            &Tensor::constant(ArrayD::zeros(IxDyn(&[4]))),
            1e-5,
        ).sum();
        let g = backward(&loss);
        g.get(&wt).unwrap().clone()
    };
    let g1 = run();
    let g2 = run();
    assert_eq!(g1, g2);
}

#[test]
fn im2col_shapes_and_values() {
    // 1x3x3 input, k=3 s=1 p=1 -> 9 rows, center row equals the flattened input
    let x: ArrayD<f64> = ndarray::Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64).into_dyn();
    let t = Tensor::constant(x);
    let spec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
    let cols = t.im2col(spec);
    assert_eq!(cols.shape(), &[9, 9]);
    let center = cols.data().index_axis(ndarray::Axis(0), 4);
    let expect: Vec<f64> = (0..9).map(|v| v as f64).collect();
    assert_eq!(center.as_slice().unwrap(), expect.as_slice());
}
