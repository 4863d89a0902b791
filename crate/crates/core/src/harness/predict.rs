use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Head, SegNet};
use crate::postproc::{postprocess, BinaryVolume, PostprocConfig};
use crate::synth::{normalize_intensity, Case};
use crate::types::Strategy;

/// Probability threshold of sigmoid heads.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// Slices per forward pass at prediction time.
const PREDICT_BATCH: usize = 16;

/// Trained segmenters covering one strategy: one per structure for
/// individual, a single network otherwise.
#[derive(Clone, Debug)]
pub struct StrategyModels {
    pub strategy: Strategy,
    pub classes: usize,
    pub nets: Vec<SegNet>,
}

impl StrategyModels {
    pub fn new(strategy: Strategy, classes: usize, nets: Vec<SegNet>) -> Result<Self> {
        let want = if strategy == Strategy::Individual { classes } else { 1 };
        if nets.len() != want {
            return Err(Error::Contract(format!(
                "{strategy} strategy over {classes} structures needs {want} networks, got {}",
                nets.len()
            )));
        }
        for net in &nets {
            let head_ok = match strategy {
                Strategy::Multi => net.config().head == Head::Softmax && net.config().num_classes == classes,
                _ => net.config().head == Head::Sigmoid && net.config().num_classes == 1,
            };
            if !head_ok {
                return Err(Error::Contract(format!(
                    "network with {:?} head over {} classes does not fit the {strategy} strategy",
                    net.config().head,
                    net.config().num_classes
                )));
            }
        }
        Ok(Self {
            strategy,
            classes,
            nets,
        })
    }
}

/// Post-processed masks of one case. `structures` is empty for the global
/// strategy; `global` is always the union of all structures.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub structures: Vec<BinaryVolume>,
    pub global: BinaryVolume,
}

impl Prediction {
    /// Label map: structure index per voxel, the lowest index on overlap.
    pub fn label_map(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.global.bits().len()];
        if self.structures.is_empty() {
            for (l, &b) in labels.iter_mut().zip(self.global.bits()) {
                *l = u8::from(b);
            }
        }
        for (c, s) in self.structures.iter().enumerate().rev() {
            for (l, &b) in labels.iter_mut().zip(s.bits()) {
                if b {
                    *l = c as u8 + 1;
                }
            }
        }
        labels
    }
}

/// Voxel-wise union of structure masks.
pub fn global_transform(structures: &[BinaryVolume]) -> Result<BinaryVolume> {
    let (first, rest) = structures
        .split_first()
        .ok_or_else(|| Error::Contract("global transform of zero structures".into()))?;
    rest.iter().try_fold(first.clone(), |acc, s| acc.union(s))
}

/// Index of the largest entry, the lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode head outputs for every slice of the case, `[D, K, H, W]`.
fn forward_volume(net: &SegNet, image: &[f64], case: &Case) -> Result<Vec<f64>> {
    let e = case.extents;
    let plane = e.plane();
    let mut out = Vec::with_capacity(e.depth * net.config().out_channels() * plane);
    for start in (0..e.depth).step_by(PREDICT_BATCH) {
        let n = PREDICT_BATCH.min(e.depth - start);
        let x = Tensor::new(vec![n, 1, e.height, e.width], image[start * plane..(start + n) * plane].to_vec())?;
        out.extend_from_slice(net.predict(&x)?.data());
    }
    Ok(out)
}

/// Raw binary masks (before post-processing), one per structure, or a single
/// global mask for the global strategy.
pub fn raw_masks(models: &StrategyModels, case: &Case) -> Result<Vec<BinaryVolume>> {
    let e = case.extents;
    if case.classes != models.classes {
        return Err(Error::Contract(format!(
            "case {} has {} structures, models cover {}",
            case.case_id, case.classes, models.classes
        )));
    }
    let m = 1usize << models.nets[0].config().depth;
    if !e.height.is_multiple_of(m) || !e.width.is_multiple_of(m) {
        return Err(Error::Contract(format!(
            "slice extent {}x{} of {} is not a multiple of {m}",
            e.height, e.width, case.case_id
        )));
    }
    let image = normalize_intensity(&case.image);
    let plane = e.plane();
    let empty = || BinaryVolume::empty(e, case.spacing_mm);
    match models.strategy {
        Strategy::Multi => {
            let k = models.classes + 1;
            let probs = forward_volume(&models.nets[0], &image, case)?;
            let mut masks = vec![empty(); models.classes];
            let mut column = vec![0.0; k];
            for z in 0..e.depth {
                let block = &probs[z * k * plane..(z + 1) * k * plane];
                for i in 0..plane {
                    for (c, v) in column.iter_mut().enumerate() {
                        *v = block[c * plane + i];
                    }
                    let label = argmax(&column);
                    if label > 0 {
                        masks[label - 1].set(z, i / e.width, i % e.width, true);
                    }
                }
            }
            Ok(masks)
        }
        Strategy::Global | Strategy::Individual => models
            .nets
            .iter()
            .map(|net| {
                let probs = forward_volume(net, &image, case)?;
                let bits = probs.iter().map(|&p| p > BINARY_THRESHOLD).collect();
                BinaryVolume::from_bits(e, bits, case.spacing_mm)
            })
            .collect(),
    }
}

/// Slice-wise prediction, stacking, then largest component and closing per
/// structure. Structure masks are unioned into the global mask.
pub fn predict(models: &StrategyModels, case: &Case, post: &PostprocConfig) -> Result<Prediction> {
    let masks = raw_masks(models, case)?;
    let processed = masks.iter().map(|m| postprocess(m, post)).collect::<Result<Vec<_>>>()?;
    if models.strategy == Strategy::Global {
        let global = processed.into_iter().next().expect("one global mask");
        return Ok(Prediction {
            structures: Vec::new(),
            global,
        });
    }
    Ok(Prediction {
        global: global_transform(&processed)?,
        structures: processed,
    })
}
