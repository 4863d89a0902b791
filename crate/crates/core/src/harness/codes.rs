use std::io::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::AutoEncoder;
use crate::synth::Case;
use crate::train::{MaskTarget, SliceDataset};

/// Latent code of one mask slice.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeRow {
    pub case_id: String,
    /// Structure index, `global` or `multi`.
    pub structure: String,
    pub slice: usize,
    pub code: Vec<f64>,
}

fn target_label(target: MaskTarget) -> String {
    match target {
        MaskTarget::Structure(c) => c.to_string(),
        MaskTarget::Global => "global".into(),
        MaskTarget::Multi => "multi".into(),
    }
}

/// Global-max-pooled bottleneck codes of every ground-truth mask slice of
/// `cases`, encoded as `target`. Slices with an empty mask are skipped
/// unless `include_empty`.
pub fn export_codes(ae: &AutoEncoder, cases: &[Case], target: MaskTarget, include_empty: bool) -> Result<Vec<CodeRow>> {
    if cases.is_empty() {
        return Ok(Vec::new());
    }
    let data = SliceDataset::from_cases(cases, target)?;
    if data.channels != ae.config().in_channels {
        return Err(Error::Contract(format!(
            "auto-encoder expects {} mask channels, {target:?} masks have {}",
            ae.config().in_channels,
            data.channels
        )));
    }
    let label = target_label(target);
    let mut rows = Vec::new();
    let mut slice = 0;
    for (i, mask) in data.masks.iter().enumerate() {
        if i > 0 && data.case_ids[i] != data.case_ids[i - 1] {
            slice = 0;
        }
        if include_empty || mask.iter().any(|&v| v > 0.0) {
            let y = Tensor::new(vec![1, data.channels, data.height, data.width], mask.clone())?;
            rows.push(CodeRow {
                case_id: data.case_ids[i].clone(),
                structure: label.clone(),
                slice,
                code: ae.latent_codes(&y)?.data().to_vec(),
            });
        }
        slice += 1;
    }
    Ok(rows)
}

/// CSV with columns case_id, structure, slice, c0..c{K-1}.
pub fn write_codes_csv<W: Write>(w: W, rows: &[CodeRow], code_len: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["case_id".to_owned(), "structure".into(), "slice".into()];
    header.extend((0..code_len).map(|k| format!("c{k}")));
    out.write_record(&header)?;
    for r in rows {
        if r.code.len() != code_len {
            return Err(Error::Contract(format!("code of length {} in a table of {code_len}", r.code.len())));
        }
        let mut rec = vec![r.case_id.clone(), r.structure.clone(), r.slice.to_string()];
        rec.extend(r.code.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
