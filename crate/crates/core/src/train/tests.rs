use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth::{generate_case, Extents, PhantomConfig};

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()).unwrap()
}

struct IdentityEncoder(usize);

impl ShapeEncoder for IdentityEncoder {
    fn in_channels(&self) -> usize {
        self.0
    }
    fn encode_frozen(&self, _tape: &mut Tape, y: Var) -> Result<Var> {
        Ok(y)
    }
}

struct ConstCritic(f64);

impl Critic for ConstCritic {
    fn critique(&self, tape: &mut Tape, y: Var, _x: Var) -> Result<Var> {
        let s = tape.shape(y);
        Ok(tape.constant(Tensor::full(vec![s[0], 1, 2, 2], self.0)))
    }
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

#[test]
fn dice_of_perfect_prediction_is_zero() {
    let y = binary(&[2, 3, 4, 4], 1);
    let v = eval(|t| {
        let (a, b) = (t.constant(y.clone()), t.constant(y.clone()));
        dice_loss(t, a, b)
    });
    assert_eq!(v, 0.0);
}

#[test]
fn dice_of_complement_is_one() {
    let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let inv = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let v = eval(|t| {
        let (a, b) = (t.constant(inv), t.constant(y));
        dice_loss(t, a, b)
    });
    assert!((v - 1.0).abs() < 1e-7);
}

#[test]
fn dice_of_half_confident_prediction_matches_hand_value() {
    let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let v = eval(|t| {
        let (a, b) = (t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5)), t.constant(y));
        dice_loss(t, a, b)
    });
    assert!((v - 0.5).abs() < 1e-7, "{v}");
}

#[test]
fn dice_rejects_mismatched_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    let b = t.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    assert!(matches!(dice_loss(&mut t, a, b), Err(Error::Contract(_))));
}

#[test]
fn dice_stays_in_unit_interval() {
    for seed in 0..20 {
        let v = eval(|t| {
            let a = t.constant(random(&[2, 2, 3, 3], 0.0, 1.0, seed));
            let b = t.constant(binary(&[2, 2, 3, 3], seed + 100));
            dice_loss(t, a, b)
        });
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn shape_loss_with_identity_encoder_is_squared_norm() {
    let v = eval(|t| {
        let a = t.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::zeros(vec![1, 1, 1, 2]));
        shape_loss(t, a, b, &IdentityEncoder(1))
    });
    assert_eq!(v, 25.0);
    let y = random(&[2, 1, 4, 4], 0.0, 1.0, 3);
    let same = eval(|t| {
        let (a, b) = (t.constant(y.clone()), t.constant(y.clone()));
        shape_loss(t, a, b, &IdentityEncoder(1))
    });
    assert_eq!(same, 0.0);
}

#[test]
fn shape_loss_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    let b = t.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    assert!(matches!(shape_loss(&mut t, a, b, &IdentityEncoder(1)), Err(Error::Contract(_))));
}

#[test]
fn shape_loss_through_a_real_encoder_is_zero_on_identical_masks() {
    let ae = AutoEncoder::build(&AutoEncoderConfig::new(2), 1).unwrap();
    let y = binary(&[2, 2, 16, 16], 4);
    let v = eval(|t| {
        let (a, b) = (t.constant(y.clone()), t.constant(y.clone()));
        shape_loss(t, a, b, &ae)
    });
    assert_eq!(v, 0.0);
}

#[test]
fn disc_loss_closed_forms() {
    let half = eval(|t| {
        let f = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let r = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        disc_loss(t, f, r)
    });
    assert!((half - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let perfect = eval(|t| {
        let f = t.constant(Tensor::full(vec![1, 1, 2, 2], 0.0));
        let r = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        disc_loss(t, f, r)
    });
    assert!((0.0..3e-7).contains(&perfect), "{perfect}");
}

#[test]
fn disc_loss_matches_elementwise_recomputation() {
    for seed in 0..10 {
        let f = random(&[2, 1, 3, 3], 0.01, 0.99, seed);
        let r = random(&[2, 1, 3, 3], 0.01, 0.99, seed + 50);
        let oracle = f
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| -(1.0 - a).ln() - b.ln())
            .sum::<f64>()
            / f.len() as f64;
        let v = eval(|t| {
            let (a, b) = (t.constant(f.clone()), t.constant(r.clone()));
            disc_loss(t, a, b)
        });
        assert!((v - oracle).abs() < 1e-12);
    }
}

#[test]
fn adv_loss_closed_forms() {
    let at = |p: f64| {
        eval(|t| {
            let f = t.constant(Tensor::full(vec![1, 1, 2, 2], p));
            Ok(adv_loss(t, f))
        })
    };
    assert!(at(1.0).abs() < 1e-6);
    assert!((at(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((at((-1.0f64).exp()) - 1.0).abs() < 1e-12);
}

fn loss_inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
    (
        random(&[2, 1, 4, 4], 0.05, 0.95, seed),
        binary(&[2, 1, 4, 4], seed + 1),
        random(&[2, 1, 4, 4], -1.0, 1.0, seed + 2),
    )
}

fn combined_value_and_grad(seed: u64, l1: f64, l2: f64) -> (f64, Tensor, [f64; 3]) {
    let (yh, y, x) = loss_inputs(seed);
    let mut t = Tape::new();
    let yh = t.param(yh);
    let (y, x) = (t.constant(y), t.constant(x));
    let terms = combined_loss(&mut t, yh, y, x, Some(&IdentityEncoder(1)), Some(&ConstCritic(0.3)), l1, l2).unwrap();
    let parts = [
        t.value(terms.dice).item(),
        t.value(terms.shape.unwrap()).item(),
        t.value(terms.adv.unwrap()).item(),
    ];
    let total = t.value(terms.total).item();
    t.backward(terms.total).unwrap();
    (total, t.grad_or_zeros(yh), parts)
}

#[test]
fn combined_loss_reduces_to_dice_with_zero_weights() {
    let (yh, y, _) = loss_inputs(7);
    let mut t = Tape::new();
    let a = t.param(yh);
    let b = t.constant(y);
    let d = dice_loss(&mut t, a, b).unwrap();
    let dice_value = t.value(d).item();
    t.backward(d).unwrap();
    let dice_grad = t.grad_or_zeros(a);
    let (total, grad, _) = combined_value_and_grad(7, 0.0, 0.0);
    assert_eq!(total, dice_value);
    assert_eq!(grad, dice_grad);
}

#[test]
fn combined_loss_is_the_weighted_sum_of_its_terms() {
    for seed in 0..20 {
        let (total, _, [d, s, a]) = combined_value_and_grad(seed, 1e-4, 1e-2);
        assert!((total - (d + 1e-4 * s + 1e-2 * a)).abs() < 1e-12);
        // linear in each weight: the slope is the term itself
        let (t1, _, _) = combined_value_and_grad(seed, 1e-4 + 0.5, 1e-2);
        let (t2, _, _) = combined_value_and_grad(seed, 1e-4, 1e-2 + 0.5);
        assert!(((t1 - total) / 0.5 - s).abs() < 1e-9);
        assert!(((t2 - total) / 0.5 - a).abs() < 1e-9);
    }
}

#[test]
fn combined_loss_vanishes_on_a_fooled_critic_and_perfect_prediction() {
    let y = binary(&[1, 1, 4, 4], 2);
    let v = eval(|t| {
        let (a, b, x) = (t.constant(y.clone()), t.constant(y.clone()), t.constant(y.clone()));
        Ok(combined_loss(t, a, b, x, Some(&IdentityEncoder(1)), Some(&ConstCritic(1.0)), 1e-4, 1e-2)?.total)
    });
    assert!(v.abs() < 1e-8, "{v}");
}

#[test]
fn frozen_networks_contribute_no_trainable_leaves() {
    let ae = AutoEncoder::build(&AutoEncoderConfig::new(1), 1).unwrap();
    let d = Discriminator::build(&DiscriminatorConfig::new(1), 2).unwrap();
    let (yh, y, x) = (random(&[1, 1, 16, 16], 0.1, 0.9, 1), binary(&[1, 1, 16, 16], 2), random(&[1, 1, 16, 16], -1.0, 1.0, 3));
    let mut t = Tape::new();
    let yh = t.param(yh);
    let (y, x) = (t.constant(y), t.constant(x));
    let start = t.len();
    let terms = combined_loss(&mut t, yh, y, x, Some(&ae), Some(&d), 1e-4, 1e-2).unwrap();
    t.backward(terms.total).unwrap();
    for i in start..t.len() {
        let v = Var(i);
        if t.inputs_of(v).is_empty() {
            assert!(!t.requires_grad(v), "leaf {i} is trainable");
            assert!(t.grad(v).is_none());
        }
    }
    assert!(t.grad(yh).unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = vec![random(&[3], -1.0, 1.0, 1)];
    let before = p.clone();
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut s, 0.1).unwrap();
    assert_eq!(p, before);
    assert_eq!(s.step(), 1);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut p = vec![Tensor::zeros(vec![2])];
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::full(vec![2], 1.0)], &mut s, 0.1).unwrap();
    // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    for &v in p[0].data() {
        assert!((v + 0.1).abs() < 1e-7);
    }
    assert_eq!(p[0].data()[0], p[0].data()[1]);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut p = vec![Tensor::zeros(vec![2])];
    let mut s = AdamState::new(&p);
    assert!(adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut s, 0.1).is_err());
}

fn tiny_cases(n: u64, classes: usize) -> Vec<crate::synth::Case> {
    let cfg = PhantomConfig {
        classes,
        extents: Extents::new(8, 32, 32),
        ..PhantomConfig::default()
    };
    (0..n).map(|s| generate_case(s, &cfg).unwrap()).collect()
}

fn tiny_cfg(reg: Regularization, strategy: Strategy) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ae_epochs: 3,
        batch_size: 4,
        seed: 5,
        strategy,
        regularization: reg,
        lr_main: 1e-3,
        depth: 2,
        base_channels: 4,
        code_channels: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn slice_dataset_layout() {
    let cases = tiny_cases(2, 3);
    let multi = SliceDataset::from_cases(&cases, MaskTarget::Multi).unwrap();
    assert_eq!((multi.len(), multi.channels), (16, 3));
    assert_eq!(multi.masks[0].len(), 3 * 32 * 32);
    let single = SliceDataset::from_cases(&cases, MaskTarget::Structure(2)).unwrap();
    assert_eq!(single.channels, 1);
    for (s, m) in single.masks.iter().zip(&multi.masks) {
        assert_eq!(&s[..], &m[1024..2048]);
    }
    assert!(SliceDataset::from_cases(&cases, MaskTarget::Structure(4)).unwrap_err().is_config());
    assert!(SliceDataset::from_cases(&[], MaskTarget::Global).is_err());
    let (x, y) = multi.batch(&[3, 0], None).unwrap();
    assert_eq!(x.shape(), &[2, 1, 32, 32]);
    assert_eq!(y.shape(), &[2, 3, 32, 32]);
    assert_eq!(&x.data()[..1024], &multi.images[3][..]);
}

#[test]
fn autoencoder_training_lowers_loss_and_is_deterministic() {
    let data = SliceDataset::from_cases(&tiny_cases(2, 2), MaskTarget::Multi).unwrap();
    let cfg = tiny_cfg(Regularization::Shape, Strategy::Multi);
    let a = train_autoencoder(&data, &cfg).unwrap();
    let b = train_autoencoder(&data, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert!(a.losses.last().unwrap() < &a.losses[0], "{:?}", a.losses);
    let empty = SliceDataset {
        images: vec![],
        masks: vec![],
        case_ids: vec![],
        ..data
    };
    assert!(matches!(train_autoencoder(&empty, &cfg), Err(Error::Contract(_))));
}

#[test]
fn main_training_checks_its_configuration() {
    let data = SliceDataset::from_cases(&tiny_cases(1, 2), MaskTarget::Multi).unwrap();
    let ae = AutoEncoder::build(&AutoEncoderConfig::new(2), 0).unwrap();
    let wrong_ae = AutoEncoder::build(&AutoEncoderConfig::new(1), 0).unwrap();
    assert!(train_main(&data, &tiny_cfg(Regularization::Shape, Strategy::Multi), None).unwrap_err().is_config());
    assert!(train_main(&data, &tiny_cfg(Regularization::Base, Strategy::Multi), Some(&ae)).unwrap_err().is_config());
    assert!(train_main(&data, &tiny_cfg(Regularization::Shape, Strategy::Multi), Some(&wrong_ae)).unwrap_err().is_config());
    assert!(train_main(&data, &tiny_cfg(Regularization::Base, Strategy::Global), None).unwrap_err().is_config());
    let mut bad = tiny_cfg(Regularization::Base, Strategy::Multi);
    bad.lambda1 = -1.0;
    assert!(train_main(&data, &bad, None).unwrap_err().is_config());
}

#[test]
fn main_training_is_deterministic_and_logs_every_epoch() {
    let data = SliceDataset::from_cases(&tiny_cases(2, 2), MaskTarget::Multi).unwrap();
    let ae = AutoEncoder::build(&AutoEncoderConfig { code_channels: 8, depth: 2, base_channels: 4, in_channels: 2 }, 0).unwrap();
    let cfg = tiny_cfg(Regularization::Combined, Strategy::Multi);
    let a = train_main(&data, &cfg, Some(&ae)).unwrap();
    let b = train_main(&data, &cfg, Some(&ae)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.seg.params(), b.seg.params());
    assert_eq!(a.log.len(), 2);
    assert!(a.log.iter().all(|e| e.disc > 0.0 && e.adv > 0.0 && e.shape >= 0.0));
    assert!(a.disc.is_some());
    let ids: Vec<_> = a.seen_cases.iter().cloned().collect();
    assert_eq!(ids, vec!["case_0000".to_string(), "case_0001".to_string()]);
    let mut out = Vec::new();
    write_loss_log(&mut out, &a.log).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with(LOSS_LOG_HEADER));
}

#[test]
fn zero_weighted_stubbed_combined_run_matches_baseline_bit_for_bit() {
    let data = SliceDataset::from_cases(&tiny_cases(2, 1), MaskTarget::Global).unwrap();
    let base = train_main(&data, &tiny_cfg(Regularization::Base, Strategy::Global), None).unwrap();
    let ae = AutoEncoder::build(&AutoEncoderConfig { code_channels: 8, depth: 2, base_channels: 4, in_channels: 1 }, 0).unwrap();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        stub_adversarial: true,
        ..tiny_cfg(Regularization::Combined, Strategy::Global)
    };
    let comb = train_main(&data, &cfg, Some(&ae)).unwrap();
    let totals = |r: &MainRun| r.log.iter().map(|e| e.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&base), totals(&comb));
    assert_eq!(base.seg.params(), comb.seg.params());
}
