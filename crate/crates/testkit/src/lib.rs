//! Test support for the elab workspace: random scenario generators and
//! independent reference models that the real implementation is checked
//! against. Not part of any shipped binary.

pub mod bench;
pub mod generate;
pub mod oracle;

use rand::SeedableRng;
use rand::rngs::StdRng;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

use elab_core::learning_design::parse_manifest;
use elab_core::packaging::{UnitOfLearning, save_package};

/// Directory of the bundled tank scenario.
pub fn sample_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples/tank-level")
}

/// The bundled tank scenario, read from its source directory.
pub fn sample_unit() -> UnitOfLearning {
    let dir = sample_dir();
    let xml = std::fs::read_to_string(dir.join("imsmanifest.xml")).expect("sample manifest");
    let manifest = parse_manifest(&xml).expect("sample manifest parses");
    let bytes = manifest
        .resources
        .iter()
        .map(|r| (r.id.clone(), std::fs::read(dir.join(&r.href)).expect("sample resource")))
        .collect();
    UnitOfLearning::from_parts(manifest, bytes)
}

pub fn sample_package() -> Vec<u8> {
    save_package(&sample_unit()).expect("sample unit saves")
}
