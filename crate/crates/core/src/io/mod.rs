//! Files and synthetic data: labeled point-cloud formats, checkpoints and
//! the procedural road-scene generator.

pub mod checkpoint;
pub mod cloud_file;
mod detmath;
pub mod synth;

use std::path::Path;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file under the final name.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
