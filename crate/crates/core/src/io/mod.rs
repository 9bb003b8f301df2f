//! Files, run configs, synthetic tasks and end-to-end runs.

pub mod dataset_spec;
pub mod feature_file;
pub mod model_file;
pub mod pipeline;
pub mod run_config;
pub mod synth;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use dataset_spec::{ConditionSpec, DatasetSpec, SamplerSpec};
pub use feature_file::{read_features, write_features, Dtype};
pub use model_file::{ModelFile, ModelKind};
pub use pipeline::{run, RunOutcome};
pub use run_config::RunConfig;
pub use synth::{generate, SynthBundle, SynthTask, SynthTruth};

/// Writes `bytes` to a temporary sibling of `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"z").is_err());
    }
}
