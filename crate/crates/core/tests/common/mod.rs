#![allow(dead_code)]

use std::time::Duration;

use orchestra_core::kernel::{Kernel, KernelConfig};
use orchestra_core::seeds;
use orchestra_core::stream::{MessageKind, SessionId, TranscriptRecord};
use tempfile::TempDir;

pub const SETTLE: Duration = Duration::from_secs(20);

/// Kernel over freshly generated default seeds.
pub fn kernel() -> (TempDir, Kernel) {
    kernel_with(|_| {})
}

pub fn kernel_with(tune: impl FnOnce(&mut KernelConfig)) -> (TempDir, Kernel) {
    let dir = TempDir::new().unwrap();
    seeds::generate(seeds::DEFAULT_SEED).write(dir.path()).unwrap();
    let mut config = KernelConfig::from_seed_dir(dir.path());
    tune(&mut config);
    let k = Kernel::load(config).unwrap();
    (dir, k)
}

pub fn transcript(k: &Kernel, s: &SessionId) -> Vec<TranscriptRecord> {
    k.substrate.transcript(s).unwrap()
}

pub fn controls<'a>(t: &'a [TranscriptRecord], instruction: &str) -> Vec<&'a TranscriptRecord> {
    t.iter()
        .filter(|r| r.kind == MessageKind::Control && r.payload.instruction() == Some(instruction))
        .collect()
}

pub fn tagged<'a>(t: &'a [TranscriptRecord], tag: &str) -> Vec<&'a TranscriptRecord> {
    t.iter()
        .filter(|r| r.kind != MessageKind::Eos && r.tags.contains(tag))
        .collect()
}
