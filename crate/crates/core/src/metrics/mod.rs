//! Overlap, surface-distance and volume metrics on binary 3D masks with
//! anisotropic voxel spacing.
//!
//! Metrics that are undefined for a given pair (empty ground truth, empty
//! surfaces) are `None` rather than a sentinel number, with a note saying why.

mod distance;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::BinaryVolume;
use crate::synth::{Extents, Spacing};

pub use distance::{directed_distances, squared_edt};

/// Voxel counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn gt(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }
}

fn same_extents(gt: &BinaryVolume, p: &BinaryVolume) -> Result<()> {
    if gt.extents != p.extents {
        return Err(Error::Contract(format!(
            "ground truth is {:?} but prediction is {:?}",
            gt.extents.as_array(),
            p.extents.as_array()
        )));
    }
    Ok(())
}

pub fn confusion(gt: &BinaryVolume, p: &BinaryVolume) -> Result<Confusion> {
    same_extents(gt, p)?;
    let mut c = Confusion::default();
    for (&g, &q) in gt.bits().iter().zip(p.bits()) {
        match (g, q) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl Overlap {
    pub fn from_confusion(c: &Confusion) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            dice: ratio(2 * c.tp, c.gt() + c.predicted()).filter(|_| c.gt() > 0),
            sensitivity: ratio(c.tp, c.gt()),
            specificity: ratio(c.tn, c.tn + c.fp),
        }
    }
}

/// Dice, sensitivity and specificity. Dice and sensitivity are undefined for
/// an empty ground truth, specificity for a ground truth filling the volume.
pub fn overlap_metrics(gt: &BinaryVolume, p: &BinaryVolume) -> Result<Overlap> {
    Ok(Overlap::from_confusion(&confusion(gt, p)?))
}

/// Foreground voxels with a 6-neighbour that is background or outside.
pub fn surface_voxels(vol: &BinaryVolume) -> Vec<[usize; 3]> {
    let Extents { depth, height, width } = vol.extents;
    let mut out = Vec::new();
    for i in vol.foreground() {
        let [z, y, x] = vol.coords(i);
        let interior = z > 0
            && z + 1 < depth
            && y > 0
            && y + 1 < height
            && x > 0
            && x + 1 < width
            && vol.get(z - 1, y, x)
            && vol.get(z + 1, y, x)
            && vol.get(z, y - 1, x)
            && vol.get(z, y + 1, x)
            && vol.get(z, y, x - 1)
            && vol.get(z, y, x + 1);
        if !interior {
            out.push([z, y, x]);
        }
    }
    out
}

/// Nearest-surface distances in both directions, or `None` when either
/// surface is empty.
fn surface_distances(gt: &BinaryVolume, p: &BinaryVolume, spacing: Spacing) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    same_extents(gt, p)?;
    spacing.validate()?;
    let (sg, sp) = (surface_voxels(gt), surface_voxels(p));
    if sg.is_empty() || sp.is_empty() {
        return Ok(None);
    }
    let to_p = directed_distances(gt.extents, &sp, &sg, spacing);
    let to_g = directed_distances(gt.extents, &sg, &sp, spacing);
    Ok(Some((to_p, to_g)))
}

/// Symmetric Hausdorff distance between the two surfaces, in millimetres.
pub fn hausdorff(gt: &BinaryVolume, p: &BinaryVolume, spacing: Spacing) -> Result<Option<f64>> {
    Ok(surface_distances(gt, p, spacing)?.map(|(a, b)| a.iter().chain(&b).fold(0.0, |m: f64, &d| m.max(d))))
}

/// Mean of all nearest-surface distances in both directions, in millimetres.
pub fn mean_surface_distance(gt: &BinaryVolume, p: &BinaryVolume, spacing: Spacing) -> Result<Option<f64>> {
    Ok(surface_distances(gt, p, spacing)?.map(|(a, b)| {
        let n = (a.len() + b.len()) as f64;
        (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n
    }))
}

/// Relative absolute volume difference as a fraction of the ground-truth
/// volume; undefined for an empty ground truth.
pub fn ravd(gt: &BinaryVolume, p: &BinaryVolume) -> Result<Option<f64>> {
    same_extents(gt, p)?;
    let (g, q) = (gt.count(), p.count());
    Ok((g > 0).then(|| g.abs_diff(q) as f64 / g as f64))
}

/// Longest distance inside the volume: the spacing-scaled diagonal between
/// the two extreme voxel centres.
pub fn volume_diagonal(extents: Extents, spacing: Spacing) -> f64 {
    extents
        .as_array()
        .iter()
        .zip(spacing.as_array())
        .map(|(&n, s)| ((n.saturating_sub(1)) as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// All six metrics for one structure of one case. Fractions stay in [0,1];
/// distances are in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub case_id: String,
    /// Structure label (`1..=C`), or `global` for the union of structures.
    pub structure: String,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub ravd: Option<f64>,
    /// Volume diagonal, the worst possible distance.
    pub delta_mm: f64,
    /// Reasons for undefined metrics, `;`-separated.
    pub note: String,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "method",
        "case_id",
        "structure",
        "dice",
        "sensitivity",
        "specificity",
        "hd_mm",
        "msd_mm",
        "ravd",
        "delta_mm",
        "note",
    ];
}

/// Evaluates a prediction against ground truth using the ground truth's spacing.
pub fn evaluate(
    method: &str,
    case_id: &str,
    structure: &str,
    gt: &BinaryVolume,
    p: &BinaryVolume,
) -> Result<MetricReport> {
    let spacing = gt.spacing_mm;
    let overlap = overlap_metrics(gt, p)?;
    let hd = hausdorff(gt, p, spacing)?;
    let msd = mean_surface_distance(gt, p, spacing)?;
    let ravd = ravd(gt, p)?;
    let mut notes = Vec::new();
    if gt.is_empty() {
        notes.push("empty ground truth");
    } else if gt.count() == gt.extents.voxels() {
        notes.push("ground truth fills the volume");
    }
    if p.is_empty() {
        notes.push("empty prediction");
    }
    Ok(MetricReport {
        method: method.to_owned(),
        case_id: case_id.to_owned(),
        structure: structure.to_owned(),
        dice: overlap.dice,
        sensitivity: overlap.sensitivity,
        specificity: overlap.specificity,
        hd_mm: hd,
        msd_mm: msd,
        ravd,
        delta_mm: volume_diagonal(gt.extents, spacing),
        note: notes.join(";"),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes reports as CSV; undefined values are empty fields.
pub fn write_metrics_csv<W: Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MetricReport::CSV_HEADER)?;
    for r in reports {
        out.write_record([
            r.method.clone(),
            r.case_id.clone(),
            r.structure.clone(),
            fmt_opt(r.dice),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            fmt_opt(r.hd_mm),
            fmt_opt(r.msd_mm),
            fmt_opt(r.ravd),
            format!("{}", r.delta_mm),
            r.note.clone(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Parses CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let bad = |detail: String| Error::Format {
        kind: "metrics csv",
        path: path.to_owned(),
        detail,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let opt = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 11 {
            return Err(bad(format!("expected 11 fields, found {}", rec.len())));
        }
        out.push(MetricReport {
            method: rec[0].to_owned(),
            case_id: rec[1].to_owned(),
            structure: rec[2].to_owned(),
            dice: opt(&rec[3]).map_err(bad)?,
            sensitivity: opt(&rec[4]).map_err(bad)?,
            specificity: opt(&rec[5]).map_err(bad)?,
            hd_mm: opt(&rec[6]).map_err(bad)?,
            msd_mm: opt(&rec[7]).map_err(bad)?,
            ravd: opt(&rec[8]).map_err(bad)?,
            delta_mm: rec[9].parse().map_err(|e| bad(format!("delta_mm: {e}")))?,
            note: rec[10].to_owned(),
        });
    }
    Ok(out)
}
