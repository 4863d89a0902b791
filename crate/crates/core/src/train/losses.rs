use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{AutoEncoder, Discriminator};

/// Smoothing added to both numerator and denominator of each per-class Dice
/// ratio, so an empty class predicted empty scores as a perfect match.
pub const DICE_SMOOTH: f64 = 1e-7;

/// Lower clamp applied to likelihoods before taking logarithms; the upper
/// clamp is `1 - LOG_CLAMP`.
pub const LOG_CLAMP: f64 = 1e-7;

fn same_shape(tape: &Tape, what: &str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Contract(format!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Soft Dice loss over `[N,C,H,W]` foreground channels: one minus the mean
/// over classes of the Dice ratio, with overlap and volume sums taken over
/// the whole mini-batch. For a single image this is the per-image Dice loss.
pub fn dice_loss(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    same_shape(tape, "dice_loss", y_hat, y)?;
    if tape.shape(y).len() != 4 {
        return Err(Error::Contract(format!("dice_loss expects [N,C,H,W], got {:?}", tape.shape(y))));
    }
    let overlap = tape.mul(y_hat, y)?;
    let overlap = tape.sum_spatial(overlap)?;
    let overlap = tape.sum_batch(overlap)?;
    let pred = tape.sum_spatial(y_hat)?;
    let pred = tape.sum_batch(pred)?;
    let truth = tape.sum_spatial(y)?;
    let truth = tape.sum_batch(truth)?;
    let denom = tape.add(pred, truth)?;
    let denom = tape.add_scalar(denom, DICE_SMOOTH);
    let numer = tape.scale(overlap, 2.0);
    let numer = tape.add_scalar(numer, DICE_SMOOTH);
    let ratio = tape.div(numer, denom)?;
    let mean = tape.mean(ratio);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// A frozen shape encoder `F`: nothing it records on the tape is trainable.
pub trait ShapeEncoder {
    fn in_channels(&self) -> usize;
    fn encode_frozen(&self, tape: &mut Tape, y: Var) -> Result<Var>;
}

impl ShapeEncoder for AutoEncoder {
    fn in_channels(&self) -> usize {
        self.config().in_channels
    }

    fn encode_frozen(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        AutoEncoder::encode_frozen(self, tape, y)
    }
}

/// A frozen conditional critic `D(y, x)`.
pub trait Critic {
    fn critique(&self, tape: &mut Tape, y: Var, x: Var) -> Result<Var>;
}

impl Critic for Discriminator {
    fn critique(&self, tape: &mut Tape, y: Var, x: Var) -> Result<Var> {
        let p = self.params().bind(tape, false);
        self.discriminate(tape, &p, y, x)
    }
}

/// Squared Euclidean distance between the codes of prediction and target,
/// summed over each sample's bottleneck map and averaged over the batch.
pub fn shape_loss(tape: &mut Tape, y_hat: Var, y: Var, encoder: &dyn ShapeEncoder) -> Result<Var> {
    same_shape(tape, "shape_loss", y_hat, y)?;
    let channels = tape.shape(y).get(1).copied().unwrap_or(0);
    if channels != encoder.in_channels() {
        return Err(Error::Contract(format!(
            "shape_loss: masks have {channels} channels, shape encoder expects {}",
            encoder.in_channels()
        )));
    }
    let batch = tape.shape(y)[0];
    let target = encoder.encode_frozen(tape, y)?;
    let target = tape.detach(target);
    let code = encoder.encode_frozen(tape, y_hat)?;
    let diff = tape.sub(code, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

fn clamped_log(tape: &mut Tape, v: Var) -> Var {
    let c = tape.clamp(v, LOG_CLAMP, 1.0 - LOG_CLAMP);
    tape.log(c)
}

/// Discriminator objective: mean over map elements of
/// `-log(1 - d_fake) - log(d_real)`.
pub fn disc_loss(tape: &mut Tape, d_fake: Var, d_real: Var) -> Result<Var> {
    if tape.shape(d_fake) != tape.shape(d_real) {
        return Err(Error::Contract(format!(
            "disc_loss: fake map {:?} and real map {:?} differ",
            tape.shape(d_fake),
            tape.shape(d_real)
        )));
    }
    let flipped = tape.scale(d_fake, -1.0);
    let flipped = tape.add_scalar(flipped, 1.0);
    let log_fake = clamped_log(tape, flipped);
    let log_real = clamped_log(tape, d_real);
    let both = tape.add(log_fake, log_real)?;
    let mean = tape.mean(both);
    Ok(tape.scale(mean, -1.0))
}

/// Adversarial term for the segmenter: mean of `-log(d_fake)`.
pub fn adv_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let l = clamped_log(tape, d_fake);
    let mean = tape.mean(l);
    tape.scale(mean, -1.0)
}

/// The individual terms of one combined objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub dice: Var,
    pub shape: Option<Var>,
    pub adv: Option<Var>,
    pub total: Var,
}

/// `dice + lambda1 * shape + lambda2 * adv`, skipping absent terms.
pub fn combine(tape: &mut Tape, dice: Var, shape: Option<Var>, adv: Option<Var>, lambda1: f64, lambda2: f64) -> Result<Var> {
    let mut total = dice;
    if let Some(s) = shape {
        let weighted = tape.scale(s, lambda1);
        total = tape.add(total, weighted)?;
    }
    if let Some(a) = adv {
        let weighted = tape.scale(a, lambda2);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// Full segmenter objective. Both the shape encoder and the critic are
/// recorded as constants, so only `y_hat` and its producers receive
/// gradients.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    y_hat: Var,
    y: Var,
    x: Var,
    encoder: Option<&dyn ShapeEncoder>,
    critic: Option<&dyn Critic>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    let dice = dice_loss(tape, y_hat, y)?;
    let shape = encoder.map(|e| shape_loss(tape, y_hat, y, e)).transpose()?;
    let adv = match critic {
        Some(c) => {
            let d_fake = c.critique(tape, y_hat, x)?;
            Some(adv_loss(tape, d_fake))
        }
        None => None,
    };
    let total = combine(tape, dice, shape, adv, lambda1, lambda2)?;
    Ok(LossTerms { dice, shape, adv, total })
}

/// Convenience for evaluating a loss on plain tensors.
pub(crate) fn scalar(tape: &Tape, v: Var) -> f64 {
    let t: &Tensor = tape.value(v);
    t.item()
}
