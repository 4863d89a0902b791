use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_length() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.5 - 1.0).collect();
    let x = tape.constant(t(&[1, 1, 3, 3], &data));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn zero_input_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3, 4, 4]));
    let k = tape.constant(Tensor::full(vec![2, 3, 3, 3], 0.7));
    let b = tape.constant(t(&[2], &[1.5, -2.0]));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 2, 4, 4]);
    for (i, v) in out.data().iter().enumerate() {
        let ch = (i / 16) % 2;
        assert_eq!(*v, if ch == 0 { 1.5 } else { -2.0 });
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let err = tape.conv2d(x, k, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn strided_conv_halves_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 8, 8], 1.0));
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, k, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    // Top-left window overlaps the zero padding on two sides.
    assert_eq!(tape.value(y).data()[0], 4.0);
    assert_eq!(tape.value(y).data()[5], 9.0);
}

#[test]
fn relu_splits_sign() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = tape.leaky_relu(x, 0.1);
    assert_eq!(tape.value(z).data(), &[-0.1, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 4, 2, 3], 0.3));
    let y = tape.softmax_channels(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    assert!((tape.grad(x).unwrap().item() - 0.25).abs() < 1e-15);
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn maxpool_single_window() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_tie_routes_to_first_index() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = tape.maxpool2(x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_odd_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(tape.maxpool2(x).is_err());
}

#[test]
fn upsample_then_maxpool_is_identity() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..24).map(|v| ((v * 7) % 11) as f64).collect();
    let x = tape.constant(t(&[1, 2, 3, 4], &data));
    let u = tape.upsample2(x).unwrap();
    assert_eq!(tape.shape(u), &[1, 2, 6, 8]);
    let p = tape.maxpool2(u).unwrap();
    assert_eq!(tape.value(p).data(), &data[..]);
}

#[test]
fn concat_requires_matching_extents() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let b = tape.constant(Tensor::zeros(vec![1, 1, 4, 2]));
    assert!(tape.concat_channels(a, b).is_err());
    let c = tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
    let ac = tape.concat_channels(a, c).unwrap();
    assert_eq!(tape.shape(ac), &[1, 3, 4, 4]);
    assert_eq!(tape.value(ac).data()[32..], [1.0; 16]);
}

#[test]
fn global_max_pool_gradient_hits_unique_max() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 2, 3], &[0.1, -0.3, 0.9, 0.2, 0.5, -0.8]));
    let y = tape.global_max_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.9]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn dense_matches_manual_product() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
    let w = tape.constant(t(&[2, 3], &[0.5, 0.0, -1.0, 1.0, 1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.25, -0.25]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[-2.25, 5.75, -1.25, -0.25]);
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![2, 1, 3, 3], 4.2));
    let g = tape.constant(Tensor::full(vec![1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let mut state = BnState::new(1);
    let y = tape.batch_norm(x, g, b, BnMode::Train(&mut state)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_zero_gamma_outputs_beta() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..32).map(|v| (v as f64).cos()).collect();
    let x = tape.constant(t(&[2, 2, 2, 4], &data));
    let g = tape.constant(Tensor::zeros(vec![2]));
    let b = tape.constant(t(&[2], &[0.3, -0.7]));
    let mut state = BnState::new(2);
    let y = tape.batch_norm(x, g, b, BnMode::Train(&mut state)).unwrap();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        let ch = (i / 8) % 2;
        assert_eq!(*v, if ch == 0 { 0.3 } else { -0.7 });
    }
}

#[test]
fn batch_norm_updates_running_moments() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
    let g = tape.constant(Tensor::full(vec![1], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let mut state = BnState::new(1);
    tape.batch_norm(x, g, b, BnMode::Train(&mut state)).unwrap();
    assert!((state.mean[0] - 0.2).abs() < 1e-15);
    // unbiased batch variance is 2
    assert!((state.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    let y = tape.batch_norm(x, g, b, BnMode::Eval(&state)).unwrap();
    let want = (1.0 - 0.2) / (1.1f64 + BN_EPS).sqrt();
    assert!((tape.value(y).data()[0] - want).abs() < 1e-12);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![2, 3], 0.4));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn zero_scaled_loss_gives_zero_grads() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y);
    let z = tape.scale(s, 0.0);
    tape.backward(z).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn constants_and_detached_values_get_no_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![2], 2.0));
    let c = tape.constant(Tensor::full(vec![2], 3.0));
    let d = tape.detach(x);
    let p = tape.mul(x, c).unwrap();
    let q = tape.mul(p, d).unwrap();
    let s = tape.sum(q);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(d).is_none());
}

#[test]
fn backward_order_is_reverse_topological() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![1, 2, 4, 4], 0.5));
    let k = tape.param(Tensor::full(vec![2, 2, 3, 3], 0.1));
    let b = tape.param(Tensor::zeros(vec![2]));
    let c = tape.conv2d(x, k, b, 1, 1).unwrap();
    let r = tape.relu(c);
    let cat = tape.concat_channels(r, x).unwrap();
    let p = tape.maxpool2(cat).unwrap();
    let s = tape.sum(p);
    let order = tape.backward_traced(s).unwrap();
    let pos = |v: Var| order.iter().position(|&o| o == v);
    let mut seen = std::collections::HashSet::new();
    for &v in &order {
        assert!(seen.insert(v), "node visited twice");
        for input in tape.inputs_of(v) {
            if let Some(ip) = pos(input) {
                assert!(ip > pos(v).unwrap(), "producer visited before consumer");
            }
        }
    }
    assert_eq!(order.len(), 8);
}

/// Direct-loop convolution and its gradients under the loss `sum(r * y)`.
fn naive_conv(x: &Tensor, w: &Tensor, r: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let (xd, wdt) = (x.data(), w.data());
    let mut y = vec![0.0; n * co * oh * ow];
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdt.len()];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let yi = ((b * co + o) * oh + oy) * ow + ox;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                y[yi] += wdt[wi] * xd[xi];
                                dx[xi] += wdt[wi] * r[yi];
                                dw[wi] += xd[xi] * r[yi];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, dx, dw)
}

#[test]
fn large_convolutions_match_direct_loops() {
    // Wide inputs are unfolded in several row bands, the last one partial.
    for (stride, h, w) in [(1, 20, 40), (2, 40, 80)] {
        let wave = |len: usize, f: f64| (0..len).map(|i| (i as f64 * f).sin()).collect::<Vec<_>>();
        let x = t(&[2, 8, h, w], &wave(2 * 8 * h * w, 0.37));
        let k = t(&[3, 8, 3, 3], &wave(3 * 72, 1.3));
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = tape.param(k.clone());
        let bv = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv2d(xv, kv, bv, stride, 1).unwrap();
        let r = wave(tape.value(y).len(), 0.11);
        let rv = tape.constant(Tensor::new(tape.value(y).shape().to_vec(), r.clone()).unwrap());
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let (want_y, want_dx, want_dw) = naive_conv(&x, &k, &r, stride, 1);
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-9);
        assert!(close(tape.value(y).data(), &want_y), "forward, stride {stride}");
        assert!(close(tape.grad(xv).unwrap().data(), &want_dx), "input gradient, stride {stride}");
        assert!(close(tape.grad(kv).unwrap().data(), &want_dw), "kernel gradient, stride {stride}");
    }
}
