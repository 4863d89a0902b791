//! VVOL volume container: `<stem>.json` header plus `<stem>.raw` payload of
//! little-endian samples (`f64` images, `u8` label maps).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Case, ConditionTag, Extents, Spacing};

pub const VVOL_FORMAT: &str = "vvol";
pub const VVOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VvolHeader {
    pub format: String,
    pub version: u32,
    /// `[D, H, W]`.
    pub extents: [usize; 3],
    /// `[z, y, x]` in millimetres.
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub classes: usize,
    pub case_id: String,
    pub condition_tag: Option<ConditionTag>,
}

impl VvolHeader {
    pub fn new(extents: Extents, spacing: Spacing, dtype: Dtype, classes: usize, case_id: &str) -> Self {
        Self {
            format: VVOL_FORMAT.into(),
            version: VVOL_VERSION,
            extents: extents.as_array(),
            spacing_mm: spacing.as_array(),
            dtype,
            classes,
            case_id: case_id.into(),
            condition_tag: None,
        }
    }

    pub fn extents(&self) -> Extents {
        let [d, h, w] = self.extents;
        Extents::new(d, h, w)
    }

    pub fn spacing(&self) -> Spacing {
        let [z, y, x] = self.spacing_mm;
        Spacing::new(z, y, x)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

fn write_pair(stem: &Path, header: &VvolHeader, payload: &[u8]) -> Result<()> {
    let (json, raw) = paths(stem);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn write_f64(stem: &Path, header: &VvolHeader, data: &[f64]) -> Result<()> {
    let mut h = header.clone();
    h.dtype = Dtype::F64;
    let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(stem, &h, &payload)
}

pub fn write_u8(stem: &Path, header: &VvolHeader, data: &[u8]) -> Result<()> {
    let mut h = header.clone();
    h.dtype = Dtype::U8;
    write_pair(stem, &h, data)
}

pub fn read_header(stem: &Path) -> Result<VvolHeader> {
    let (json, _) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let bad = |detail: String| Error::Format {
        kind: "vvol header",
        path: json.clone(),
        detail,
    };
    let header: VvolHeader = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if header.format != VVOL_FORMAT || header.version != VVOL_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    header.spacing().validate().map_err(|e| bad(e.to_string()))?;
    Ok(header)
}

fn read_payload(stem: &Path, expect: Dtype) -> Result<(VvolHeader, Vec<u8>)> {
    let header = read_header(stem)?;
    let (_, raw) = paths(stem);
    let bad = |detail: String| Error::Format {
        kind: "vvol payload",
        path: raw.clone(),
        detail,
    };
    if header.dtype != expect {
        return Err(bad(format!("expected {expect:?} samples, header says {:?}", header.dtype)));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let want = header.extents().voxels() * expect.size();
    if bytes.len() != want {
        return Err(bad(format!("{} bytes, expected {want}", bytes.len())));
    }
    Ok((header, bytes))
}

pub fn read_f64(stem: &Path) -> Result<(VvolHeader, Vec<f64>)> {
    let (h, bytes) = read_payload(stem, Dtype::F64)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((h, data))
}

pub fn read_u8(stem: &Path) -> Result<(VvolHeader, Vec<u8>)> {
    read_payload(stem, Dtype::U8)
}

pub fn image_stem(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_image"))
}

pub fn labels_stem(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_labels"))
}

/// Writes `<case_id>_image` and `<case_id>_labels` into `dir`.
pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    let mut h = VvolHeader::new(case.extents, case.spacing_mm, Dtype::F64, case.classes, &case.case_id);
    h.condition_tag = Some(case.condition_tag);
    write_f64(&image_stem(dir, &case.case_id), &h, &case.image)?;
    write_u8(&labels_stem(dir, &case.case_id), &h, &case.labels)
}

pub fn read_case(dir: &Path, case_id: &str) -> Result<Case> {
    let (hi, image) = read_f64(&image_stem(dir, case_id))?;
    let (hl, labels) = read_u8(&labels_stem(dir, case_id))?;
    if hi.extents != hl.extents || hi.spacing_mm != hl.spacing_mm || hi.classes != hl.classes {
        return Err(Error::Format {
            kind: "vvol case",
            path: labels_stem(dir, case_id),
            detail: "image and label headers disagree".into(),
        });
    }
    let case = Case {
        case_id: hi.case_id.clone(),
        image,
        labels,
        extents: hi.extents(),
        spacing_mm: hi.spacing(),
        classes: hi.classes,
        condition_tag: hi.condition_tag.unwrap_or(ConditionTag::Healthy),
    };
    case.validate().map_err(|e| Error::Format {
        kind: "vvol case",
        path: labels_stem(dir, case_id),
        detail: e.to_string(),
    })?;
    Ok(case)
}

/// Case ids with an image header in `dir`, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix("_image.json")) {
            ids.push(id.to_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Case>> {
    list_cases(dir)?.iter().map(|id| read_case(dir, id)).collect()
}
