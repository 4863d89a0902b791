//! Finite-difference gradient checks shared by the gradient and acceptance
//! test targets.

#![allow(dead_code)]

use combreg::autodiff::{BnMode, BnState, Tape, Tensor, Var};
use combreg::error::Result;
use combreg::nets::{
    AutoEncoder, AutoEncoderConfig, Discriminator, DiscriminatorConfig, Head, NormStates, SegNet, SegNetConfig,
};
use combreg::train::{adv_loss, combined_loss, dice_loss, disc_loss, shape_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Coordinates probed per input tensor.
pub const PROBES: usize = 48;

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random binary-valued tensor.
pub fn mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect()).unwrap()
}

/// Scalar objective: the output itself if scalar, otherwise its dot product
/// with fixed pseudo-random weights.
fn objective(case: &GradCase, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let out = (case.forward)(tape, vars)?;
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = objective(case, &mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest relative error `|a - n| / max(|a|, |n|)` over the probed
/// coordinates, with the denominator floored at 1e-3 times the largest
/// gradient magnitude over all inputs, so entries that are exactly zero
/// analytically (a conv bias feeding batch norm) are judged absolutely.
pub fn max_relative_error(case: &GradCase) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = objective(case, &mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= PROBES { (0..n).collect() } else { (0..PROBES).map(|_| rng.gen_range(0..n)).collect() };
        for j in picks {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(case, &plus) - evaluate(case, &minus)) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-10);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn case(name: &'static str, inputs: Vec<Tensor>, forward: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        forward: Box::new(forward),
    }
}

fn params_of(store: &combreg::nets::ParamStore) -> Vec<Tensor> {
    store.tensors().to_vec()
}

/// Every differentiable operation, loss and network, on small random inputs
/// kept away from kinks.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut cases = Vec::new();

    cases.push(case(
        "add sub mul div",
        vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], 1.0, 2.0)],
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            t.div(m, v[1])
        },
    ));
    cases.push(case("scale add_scalar log", vec![uniform(r, &[5], 0.5, 2.0)], |t, v| {
        let s = t.scale(v[0], 1.7);
        let a = t.add_scalar(s, 0.3);
        Ok(t.log(a))
    }));
    cases.push(case("clamp interior", vec![uniform(r, &[6], 0.1, 0.9)], |t, v| Ok(t.clamp(v[0], 0.0, 1.0))));
    cases.push(case("sum mean", vec![uniform(r, &[2, 2, 3], -1.0, 1.0)], |t, v| {
        let m = t.mul(v[0], v[0])?;
        let s = t.sum(m);
        let mean = t.mean(v[0]);
        t.add(s, mean)
    }));
    cases.push(case("sum_spatial sum_batch", vec![uniform(r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.sum_spatial(sq)?;
        t.sum_batch(s)
    }));
    cases.push(case("relu", vec![nonzero(r, &[2, 3, 4])], |t, v| Ok(t.relu(v[0]))));
    cases.push(case("leaky_relu", vec![nonzero(r, &[2, 3, 4])], |t, v| Ok(t.leaky_relu(v[0], 0.1))));
    cases.push(case("sigmoid", vec![uniform(r, &[2, 5], -3.0, 3.0)], |t, v| Ok(t.sigmoid(v[0]))));
    cases.push(case("softmax_channels", vec![uniform(r, &[2, 4, 3, 3], -2.0, 2.0)], |t, v| t.softmax_channels(v[0])));
    cases.push(case("maxpool2", vec![distinct(r, &[2, 2, 4, 4])], |t, v| t.maxpool2(v[0])));
    cases.push(case("upsample2", vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)], |t, v| t.upsample2(v[0])));
    cases.push(case(
        "concat_channels slice_channels",
        vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0)],
        |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice_channels(c, 1, 3)?;
            t.mul(s, s)
        },
    ));
    cases.push(case("global_max_pool", vec![distinct(r, &[2, 3, 4, 4])], |t, v| t.global_max_pool(v[0])));
    cases.push(case(
        "dense",
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
        |t, v| t.dense(v[0], v[1], v[2]),
    ));
    for (name, stride, k) in [("conv2d 3x3", 1, 3), ("conv2d 3x3 stride 2", 2, 3), ("conv2d 1x1", 1, 1)] {
        cases.push(case(
            name,
            vec![uniform(r, &[2, 2, 6, 6], -1.0, 1.0), uniform(r, &[3, 2, k, k], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride, k / 2),
        ));
    }
    cases.push(case(
        "batch_norm train",
        vec![uniform(r, &[3, 2, 3, 3], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -1.0, 1.0)],
        |t, v| {
            let mut state = BnState::new(2);
            t.batch_norm(v[0], v[1], v[2], BnMode::Train(&mut state))
        },
    ));
    let eval_state = {
        let mut s = BnState::new(2);
        let mut t = Tape::new();
        let x = t.constant(uniform(r, &[4, 2, 3, 3], -2.0, 3.0));
        let g = t.constant(Tensor::full(vec![2], 1.0));
        let b = t.constant(Tensor::zeros(vec![2]));
        t.batch_norm(x, g, b, BnMode::Train(&mut s)).unwrap();
        s
    };
    cases.push(case(
        "batch_norm eval",
        vec![uniform(r, &[3, 2, 3, 3], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -1.0, 1.0)],
        move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&eval_state)),
    ));

    let y = mask(r, &[2, 2, 4, 4]);
    cases.push(case("dice_loss", vec![uniform(r, &[2, 2, 4, 4], 0.05, 0.95)], move |t, v| {
        let yv = t.constant(y.clone());
        dice_loss(t, v[0], yv)
    }));

    let ae = AutoEncoder::build(
        &AutoEncoderConfig {
            in_channels: 2,
            depth: 1,
            base_channels: 3,
            code_channels: 4,
        },
        3,
    )
    .unwrap();
    let y = mask(r, &[2, 2, 4, 4]);
    let ae_shape = ae.clone();
    cases.push(case("shape_loss", vec![uniform(r, &[2, 2, 4, 4], 0.05, 0.95)], move |t, v| {
        let yv = t.constant(y.clone());
        shape_loss(t, v[0], yv, &ae_shape)
    }));
    cases.push(case(
        "disc_loss",
        vec![uniform(r, &[2, 1, 2, 2], 0.05, 0.95), uniform(r, &[2, 1, 2, 2], 0.05, 0.95)],
        |t, v| disc_loss(t, v[0], v[1]),
    ));
    cases.push(case("adv_loss", vec![uniform(r, &[2, 1, 2, 2], 0.05, 0.95)], |t, v| Ok(adv_loss(t, v[0]))));

    let disc_cfg = DiscriminatorConfig {
        in_channels: 3,
        depth: 1,
        base_channels: 2,
    };
    let disc = Discriminator::build(&disc_cfg, 4).unwrap();
    let y = mask(r, &[2, 2, 4, 4]);
    let x = uniform(r, &[2, 1, 4, 4], -1.0, 1.0);
    let (ae_c, disc_c) = (ae.clone(), disc.clone());
    cases.push(case("combined_loss", vec![uniform(r, &[2, 2, 4, 4], 0.05, 0.95)], move |t, v| {
        let yv = t.constant(y.clone());
        let xv = t.constant(x.clone());
        Ok(combined_loss(t, v[0], yv, xv, Some(&ae_c), Some(&disc_c), 0.1, 0.5)?.total)
    }));

    for head in [Head::Softmax, Head::Sigmoid] {
        let cfg = SegNetConfig {
            in_channels: 1,
            num_classes: 2,
            depth: 1,
            base_channels: 2,
            head,
        };
        let net = SegNet::build(&cfg, 5).unwrap();
        let x = uniform(r, &[2, 1, 4, 4], -1.0, 1.0);
        let name = if head == Head::Softmax { "segmenter softmax (params)" } else { "segmenter sigmoid (params)" };
        cases.push(case(name, params_of(net.params()), move |t, p| {
            let xv = t.constant(x.clone());
            let mut bn = net.norm_states().to_vec();
            net.forward(t, p, xv, &mut NormStates::Train(&mut bn))
        }));
    }
    let cfg = SegNetConfig {
        in_channels: 1,
        num_classes: 2,
        depth: 1,
        base_channels: 2,
        head: Head::Softmax,
    };
    let net = SegNet::build(&cfg, 6).unwrap();
    cases.push(case("segmenter (input, eval)", vec![uniform(r, &[1, 1, 4, 4], -1.0, 1.0)], move |t, v| {
        let p = net.params().bind(t, false);
        net.forward(t, &p, v[0], &mut NormStates::Eval(net.norm_states()))
    }));

    let y = mask(r, &[2, 2, 4, 4]);
    let ae_p = ae.clone();
    cases.push(case("auto-encoder (params)", params_of(ae.params()), move |t, p| {
        let yv = t.constant(y.clone());
        let mut bn = ae_p.norm_states().to_vec();
        ae_p.reconstruct(t, p, yv, &mut NormStates::Train(&mut bn))
    }));

    let y = uniform(r, &[2, 2, 4, 4], 0.0, 1.0);
    let x = uniform(r, &[2, 1, 4, 4], -1.0, 1.0);
    cases.push(case("discriminator (params)", params_of(disc.params()), move |t, p| {
        let yv = t.constant(y.clone());
        let xv = t.constant(x.clone());
        disc.discriminate(t, p, yv, xv)
    }));
    cases
}

/// Values bounded away from zero so ReLU-type kinks are not crossed.
fn nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values at least 0.01 apart so max selections are stable.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}
