//! Finite-difference gradient checks for every differentiable op. These are
//! the independent oracle for the backward implementations.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Checks analytic grads of `f` (sum-reduced to a scalar) against central
/// differences for every input entry.
fn grad_check<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.add(format!("p{i}"), rand_array(s, &mut rng)))
        .collect();

    let eval = |params: &ParamSet| -> f64 {
        let mut tape = Tape::for_inference(params);
        let ts: Vec<Tensor> = ids.iter().map(|&id| tape.param(id)).collect();
        let out = f(&mut tape, &ts);
        tape.value(out).iter().map(|&v| v as f64).sum()
    };

    // Analytic pass: scalarize by summing the output.
    let mut tape = Tape::for_training(&params, 0);
    let ts: Vec<Tensor> = ids.iter().map(|&id| tape.param(id)).collect();
    let out = f(&mut tape, &ts);
    let out_shape = tape.shape(out).to_vec();
    let flat_len: usize = out_shape.iter().product();
    let out2 = tape.reshape(out, &[1, flat_len]).unwrap();
    let loss2 = tape.mean_axes(out2, &[1]).unwrap();
    let loss = tape.reshape(loss2, &[]).unwrap();
    let scale = flat_len as f64; // mean -> sum rescale
    let grads = tape.backward(loss).unwrap();

    let h = 1e-2f32;
    for (&id, shape) in ids.iter().zip(shapes) {
        let g = grads
            .get(id)
            .unwrap_or_else(|| panic!("no grad for input {:?}", shape));
        let n: usize = shape.iter().product();
        for i in 0..n {
            let mut plus = params.value(id).clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = params.value(id).clone();
            minus.as_slice_mut().unwrap()[i] -= h;

            let orig = params.value(id).clone();
            params.set_value(id, plus);
            let fp = eval(&params);
            params.set_value(id, minus);
            let fm = eval(&params);
            params.set_value(id, orig);

            let numeric = (fp - fm) / (2.0 * h as f64);
            let analytic = g.as_slice().unwrap()[i] as f64 * scale;
            let denom = numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(
                ((numeric - analytic) / denom).abs() < 2e-2,
                "entry {i} of {shape:?}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn grad_add_broadcast() {
    grad_check(&[&[2, 3, 4], &[1, 1, 4]], |t, xs| t.add(xs[0], xs[1]).unwrap());
}

#[test]
fn grad_mul_broadcast() {
    grad_check(&[&[2, 3], &[2, 3]], |t, xs| t.mul(xs[0], xs[1]).unwrap());
}

#[test]
fn grad_matmul() {
    grad_check(&[&[3, 4], &[4, 5]], |t, xs| t.matmul(xs[0], xs[1]).unwrap());
}

#[test]
fn grad_batch_matmul() {
    grad_check(&[&[2, 3, 4], &[2, 4, 2]], |t, xs| {
        t.batch_matmul(xs[0], xs[1]).unwrap()
    });
}

#[test]
fn grad_linear() {
    grad_check(&[&[2, 3, 4], &[4, 5], &[5]], |t, xs| {
        t.linear(xs[0], xs[1], Some(xs[2])).unwrap()
    });
}

#[test]
fn grad_permute_reshape_concat() {
    grad_check(&[&[2, 3, 4], &[2, 3, 4]], |t, xs| {
        let p = t.permute(xs[0], &[1, 0, 2]).unwrap();
        let r = t.reshape(p, &[3, 2, 4]).unwrap();
        let q = t.permute(xs[1], &[1, 0, 2]).unwrap();
        t.concat(2, &[r, q]).unwrap()
    });
}

#[test]
fn grad_index_axis() {
    grad_check(&[&[3, 4, 2]], |t, xs| t.index_axis(xs[0], 1, 2).unwrap());
}

#[test]
fn grad_relu_gelu() {
    grad_check(&[&[4, 5]], |t, xs| t.relu(xs[0]));
    grad_check(&[&[4, 5]], |t, xs| t.gelu(xs[0]));
}

#[test]
fn grad_mean_axes() {
    grad_check(&[&[2, 3, 4]], |t, xs| t.mean_axes(xs[0], &[0, 2]).unwrap());
}

#[test]
fn grad_softmax() {
    grad_check(&[&[3, 5]], |t, xs| t.softmax_last(xs[0]));
}

#[test]
fn grad_layer_norm() {
    grad_check(&[&[3, 6], &[6], &[6]], |t, xs| {
        t.layer_norm(xs[0], xs[1], xs[2], 1e-5).unwrap()
    });
}

#[test]
fn grad_conv2d() {
    grad_check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |t, xs| {
        t.conv2d(xs[0], xs[1], Some(xs[2]), 1, 1).unwrap()
    });
    // Strided, patch-embedding style (kernel == stride, no padding).
    grad_check(&[&[1, 2, 8, 8], &[5, 2, 4, 4], &[5]], |t, xs| {
        t.conv2d(xs[0], xs[1], Some(xs[2]), 4, 0).unwrap()
    });
}

#[test]
fn grad_conv_transpose() {
    grad_check(&[&[1, 3, 4, 4], &[3, 5, 2, 2], &[5]], |t, xs| {
        t.conv_transpose2d_blocky(xs[0], xs[1], Some(xs[2]), 2).unwrap()
    });
}

#[test]
fn grad_pooling() {
    grad_check(&[&[1, 2, 6, 6]], |t, xs| t.avg_pool2d(xs[0], 2, 2).unwrap());
    grad_check(&[&[1, 2, 7, 7]], |t, xs| {
        t.adaptive_avg_pool2d(xs[0], 3, 3).unwrap()
    });
}

#[test]
fn grad_bilinear_resize() {
    grad_check(&[&[1, 2, 4, 4]], |t, xs| {
        t.bilinear_resize(xs[0], 7, 7).unwrap()
    });
    grad_check(&[&[1, 2, 6, 6]], |t, xs| {
        t.bilinear_resize(xs[0], 3, 3).unwrap()
    });
}

#[test]
fn grad_cross_entropy() {
    let targets =
        ArrayD::from_shape_vec(IxDyn(&[2, 3, 3]), vec![0i64, 1, 2, -1, 0, 1, 2, -1, 0, 1, 2, 0, 1, 2, 0, 1, -1, 2])
            .unwrap();
    grad_check(&[&[2, 3, 3, 3]], move |t, xs| {
        t.cross_entropy(xs[0], &targets, -1).unwrap()
    });
}

#[test]
fn grad_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = rand_array(&[2, 1, 4, 4], &mut rng);
    let mask: ArrayD<f32> = ArrayD::from_shape_fn(IxDyn(&[2, 1, 4, 4]), |ix| {
        if (ix[2] + ix[3]) % 3 == 0 {
            0.0
        } else {
            1.0
        }
    });
    grad_check(&[&[2, 1, 4, 4]], move |t, xs| {
        t.mse_loss(xs[0], &target, Some(&mask)).unwrap()
    });
}

#[test]
fn dropout_identity_in_inference() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let id = params.add("x", rand_array(&[4, 4], &mut rng));
    let mut tape = Tape::for_inference(&params);
    let x = tape.param(id);
    let y = tape.dropout(x, 0.5);
    assert_eq!(tape.value(y), params.value(id));
}

#[test]
fn frozen_params_receive_grads_but_are_skipped_by_adamw() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = params.add("frozen.w", rand_array(&[3, 3], &mut rng));
    let b = params.add("head.w", rand_array(&[3, 3], &mut rng));
    params.set_trainable_prefix("frozen.", false);

    let before = params.value(a).clone();
    let mut opt = optim::AdamW::new(1e-2, 0.1, params.len());
    for _ in 0..3 {
        let mut tape = Tape::for_training(&params, 0);
        let ta = tape.param(a);
        let tb = tape.param(b);
        let y = tape.matmul(ta, tb).unwrap();
        let y2 = tape.reshape(y, &[1, 9]).unwrap();
        let m = tape.mean_axes(y2, &[1]).unwrap();
        let loss = tape.reshape(m, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        opt.step(&mut params, &grads);
    }
    assert_eq!(params.value(a), &before, "frozen parameter changed");
    assert_ne!(params.value(b), &before);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = params.add("w", rand_array(&[2, 2], &mut rng));
    let mut tape = Tape::for_training(&params, 0);
    let t = tape.param(a);
    assert!(tape.backward(t).is_err());
}
