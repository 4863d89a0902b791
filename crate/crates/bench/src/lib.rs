//! Benchmark inputs shared by the criterion targets.

use combreg::postproc::BinaryVolume;
use combreg::synth::{generate_case, Case, PhantomConfig};

/// Default-sized phantom case.
pub fn phantom(seed: u64) -> Case {
    generate_case(seed, &PhantomConfig::default()).expect("default phantom")
}

/// Mask of structure `label` of a case.
pub fn structure(case: &Case, label: u8) -> BinaryVolume {
    BinaryVolume::from_labels(case.extents, &case.labels, label, case.spacing_mm).expect("matching extents")
}
