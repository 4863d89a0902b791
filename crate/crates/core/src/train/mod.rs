//! Losses, the Adam optimizer and the two training stages: the shape
//! auto-encoder first, then alternating discriminator/segmenter updates.

mod adam;
mod data;
mod losses;
#[cfg(test)]
mod tests;

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{AutoEncoder, AutoEncoderConfig, Discriminator, DiscriminatorConfig, SegNet, SegNetConfig};
use crate::synth::AugmentConfig;
use crate::types::{derive_seed, Regularization, Strategy};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use data::{MaskTarget, SliceDataset};
pub use losses::{
    adv_loss, combine, combined_loss, dice_loss, disc_loss, shape_loss, Critic, LossTerms, ShapeEncoder, DICE_SMOOTH,
    LOG_CLAMP,
};

use losses::scalar;

/// Hyper-parameters of both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_ae: f64,
    pub lr_main: f64,
    pub epochs: usize,
    /// Epochs of the auto-encoder stage.
    pub ae_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub regularization: Regularization,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Replace the discriminator by a constant zero adversarial term and
    /// skip its updates.
    pub stub_adversarial: bool,
    /// Pool stages and first-level width of the segmenter and discriminator.
    pub depth: usize,
    pub base_channels: usize,
    pub ae_depth: usize,
    pub ae_base_channels: usize,
    pub code_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-2,
            lr_ae: 1e-2,
            lr_main: 1e-4,
            epochs: 10,
            ae_epochs: 10,
            batch_size: 8,
            seed: 0,
            strategy: Strategy::Multi,
            regularization: Regularization::Combined,
            augment: true,
            augmentation: AugmentConfig::default(),
            stub_adversarial: false,
            depth: 3,
            base_channels: 8,
            ae_depth: 2,
            ae_base_channels: 8,
            code_channels: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0 && self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return bad(format!("lambdas must be finite and non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.lr_ae > 0.0 && self.lr_ae.is_finite() && self.lr_main > 0.0 && self.lr_main.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_ae, self.lr_main));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.ae_epochs == 0 {
            return bad("batch_size, epochs and ae_epochs must be at least 1".into());
        }
        if [self.depth, self.base_channels, self.ae_depth, self.ae_base_channels, self.code_channels].contains(&0) {
            return bad("network depth and widths must be at least 1".into());
        }
        Ok(())
    }

    pub fn seg_config(&self, classes: usize) -> SegNetConfig {
        SegNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            ..SegNetConfig::for_strategy(self.strategy, classes)
        }
    }

    pub fn ae_config(&self, channels: usize) -> AutoEncoderConfig {
        AutoEncoderConfig {
            in_channels: channels,
            depth: self.ae_depth,
            base_channels: self.ae_base_channels,
            code_channels: self.code_channels,
        }
    }

    pub fn disc_config(&self, channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            ..DiscriminatorConfig::new(channels)
        }
    }
}

/// Per-epoch means of the loss terms (terms a run does not use stay 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub dice: f64,
    pub shape: f64,
    pub adv: f64,
    pub disc: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch\tdice\tshape\tadv\tdisc\ttotal";

/// Writes a tab-separated loss log with a header line.
pub fn write_loss_log<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    for e in log {
        writeln!(w, "{}\t{}\t{}\t{}\t{}\t{}", e.epoch, e.dice, e.shape, e.adv, e.disc, e.total)?;
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
}

fn finite(value: f64, epoch: usize, batch: usize, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { epoch, batch, what })
    }
}

/// A trained shape auto-encoder and its per-epoch mean reconstruction loss.
#[derive(Clone, Debug)]
pub struct AeRun {
    pub model: AutoEncoder,
    pub losses: Vec<f64>,
}

/// Trains `G∘F` to reproduce ground-truth masks under the Dice loss.
pub fn train_autoencoder(data: &SliceDataset, cfg: &TrainConfig) -> Result<AeRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("auto-encoder training needs at least one mask".into()));
    }
    let mut model = AutoEncoder::build(&cfg.ae_config(data.channels), derive_seed(cfg.seed, "ae", &[]))?;
    let mut adam = AdamState::new(model.params().tensors());
    let mut losses = Vec::with_capacity(cfg.ae_epochs);
    for epoch in 0..cfg.ae_epochs {
        let order = epoch_order(data.len(), cfg.seed, "ae-shuffle", epoch);
        let seed_for = |i: usize| derive_seed(cfg.seed, "ae-aug", &[epoch as u64, i as u64]);
        let aug = cfg.augment.then_some((&cfg.augmentation, &seed_for as &dyn Fn(usize) -> u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (_, y) = data.batch(idx, aug)?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true);
            let yv = tape.constant(y);
            let rec = model.reconstruct_train(&mut tape, &p, yv)?;
            let loss = dice_loss(&mut tape, rec, yv)?;
            sum += finite(scalar(&tape, loss), epoch, b, "auto-encoder dice loss")?;
            batches += 1;
            tape.backward(loss)?;
            adam_step(model.params_mut().tensors_mut(), &grads(&tape, &p), &mut adam, cfg.lr_ae)?;
        }
        losses.push(sum / batches as f64);
    }
    Ok(AeRun { model, losses })
}

/// Dice between thresholded reconstructions and the masks, accumulated over
/// the whole dataset per channel and averaged over channels that are
/// non-empty.
pub fn reconstruction_dice(model: &AutoEncoder, data: &SliceDataset) -> Result<f64> {
    let plane = data.height * data.width;
    let mut inter = vec![0.0; data.channels];
    let mut total = vec![0.0; data.channels];
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(16) {
        let (_, y) = data.batch(chunk, None)?;
        let rec = model.reconstruct_tensor(&y)?;
        for (i, (&r, &t)) in rec.data().iter().zip(y.data()).enumerate() {
            let c = (i / plane) % data.channels;
            let p = f64::from(u8::from(r > 0.5));
            inter[c] += p * t;
            total[c] += p + t;
        }
    }
    let scores: Vec<f64> = inter
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&i, &t)| 2.0 * i / t)
        .collect();
    if scores.is_empty() {
        return Err(Error::Contract("reconstruction Dice is undefined on all-empty masks".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Outcome of the alternating segmenter/discriminator stage.
#[derive(Clone, Debug)]
pub struct MainRun {
    pub seg: SegNet,
    pub disc: Option<Discriminator>,
    pub log: Vec<EpochLog>,
    /// Every case that contributed a slice to some training batch.
    pub seen_cases: BTreeSet<String>,
}

enum Adversary {
    Off,
    Stub,
    Trained(Box<Discriminator>, AdamState),
}

/// Trains the segmenter, alternating per batch: first one discriminator
/// update on the detached prediction, then one segmenter update on the
/// combined objective with the discriminator and shape encoder frozen.
pub fn train_main(data: &SliceDataset, cfg: &TrainConfig, prior: Option<&AutoEncoder>) -> Result<MainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("segmenter training needs at least one slice".into()));
    }
    if data.target.strategy() != cfg.strategy {
        return Err(Error::Config(format!(
            "dataset encodes the {} strategy but the config asks for {}",
            data.target.strategy(),
            cfg.strategy
        )));
    }
    let reg = cfg.regularization;
    match (reg.uses_shape_prior(), prior) {
        (true, None) => {
            return Err(Error::Config(format!("{reg} regularization needs a trained shape auto-encoder")));
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!("{reg} regularization does not take a shape auto-encoder")));
        }
        (true, Some(ae)) if ae.config().in_channels != data.channels => {
            return Err(Error::Config(format!(
                "shape auto-encoder takes {} channels, dataset has {}",
                ae.config().in_channels,
                data.channels
            )));
        }
        _ => {}
    }
    let mut seg = SegNet::build(&cfg.seg_config(data.channels), derive_seed(cfg.seed, "seg", &[]))?;
    let mut adam_s = AdamState::new(seg.params().tensors());
    let mut adversary = if !reg.uses_discriminator() {
        Adversary::Off
    } else if cfg.stub_adversarial {
        Adversary::Stub
    } else {
        let d = Discriminator::build(&cfg.disc_config(data.channels), derive_seed(cfg.seed, "disc", &[]))?;
        let adam = AdamState::new(d.params().tensors());
        Adversary::Trained(Box::new(d), adam)
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut seen_cases = BTreeSet::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, "shuffle", epoch);
        let seed_for = |i: usize| derive_seed(cfg.seed, "aug", &[epoch as u64, i as u64]);
        let aug = cfg.augment.then_some((&cfg.augmentation, &seed_for as &dyn Fn(usize) -> u64));
        let mut sums = [0.0; 5];
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            seen_cases.extend(idx.iter().map(|&i| data.case_ids[i].clone()));
            let (x, y) = data.batch(idx, aug)?;

            let mut tape = Tape::new();
            let p_s = seg.params().bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let probs = seg.forward_train(&mut tape, &p_s, xv)?;
            let y_hat = seg.foreground(&mut tape, probs)?;

            let disc_value = match &mut adversary {
                Adversary::Trained(d, adam_d) => {
                    let fake = tape.value(y_hat).clone();
                    let v = discriminator_step(d, adam_d, fake, y, x, cfg.lr_main)?;
                    finite(v, epoch, b, "discriminator loss")?
                }
                _ => 0.0,
            };

            let dice = dice_loss(&mut tape, y_hat, yv)?;
            let shape = prior.map(|ae| shape_loss(&mut tape, y_hat, yv, ae)).transpose()?;
            let adv = match &adversary {
                Adversary::Off => None,
                Adversary::Stub => Some(tape.constant(Tensor::scalar(0.0))),
                Adversary::Trained(d, _) => {
                    let d_fake = d.critique(&mut tape, y_hat, xv)?;
                    Some(adv_loss(&mut tape, d_fake))
                }
            };
            let total = combine(&mut tape, dice, shape, adv, cfg.lambda1, cfg.lambda2)?;
            let values = [
                scalar(&tape, dice),
                shape.map_or(0.0, |s| scalar(&tape, s)),
                adv.map_or(0.0, |a| scalar(&tape, a)),
                disc_value,
                finite(scalar(&tape, total), epoch, b, "segmenter loss")?,
            ];
            tape.backward(total)?;
            adam_step(seg.params_mut().tensors_mut(), &grads(&tape, &p_s), &mut adam_s, cfg.lr_main)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        log.push(EpochLog {
            epoch,
            dice: sums[0] / n,
            shape: sums[1] / n,
            adv: sums[2] / n,
            disc: sums[3] / n,
            total: sums[4] / n,
        });
    }
    let disc = match adversary {
        Adversary::Trained(d, _) => Some(*d),
        _ => None,
    };
    Ok(MainRun {
        seg,
        disc,
        log,
        seen_cases,
    })
}

/// One discriminator update on its own tape, so nothing reaches the
/// segmenter. Returns the pre-update loss.
fn discriminator_step(
    d: &mut Discriminator,
    adam: &mut AdamState,
    fake: Tensor,
    real: Tensor,
    image: Tensor,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = d.params().bind(&mut tape, true);
    let fake = tape.constant(fake);
    let real = tape.constant(real);
    let image = tape.constant(image);
    let d_fake = d.discriminate(&mut tape, &p, fake, image)?;
    let d_real = d.discriminate(&mut tape, &p, real, image)?;
    let loss = disc_loss(&mut tape, d_fake, d_real)?;
    let value = scalar(&tape, loss);
    if value.is_finite() {
        tape.backward(loss)?;
        adam_step(d.params_mut().tensors_mut(), &grads(&tape, &p), adam, lr)?;
    }
    Ok(value)
}
