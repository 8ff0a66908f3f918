//! Shared fixtures for the kernel benchmarks.

use std::path::PathBuf;

use orchestra_core::kernel::{Kernel, KernelConfig};
use orchestra_core::scenario::Scenario;
use orchestra_core::seeds;
use tempfile::TempDir;

/// Kernel over the default generated seeds. Keep the directory alive as
/// long as the kernel.
pub fn seeded_kernel() -> (TempDir, Kernel) {
    let dir = TempDir::new().expect("temp dir");
    seeds::generate(seeds::DEFAULT_SEED)
        .write(dir.path())
        .expect("write seeds");
    let kernel = Kernel::load(KernelConfig::from_seed_dir(dir.path())).expect("load seeds");
    (dir, kernel)
}

/// A shipped scenario by file stem.
pub fn shipped_scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.yaml"));
    Scenario::load(&path).expect("shipped scenario")
}
