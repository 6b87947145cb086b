//! Sequence manifest written next to the per-frame `.ddpc` files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::failure::{read_input, write_output, CliResult, Failure};

pub const FORMAT: &str = "ddpc-sequence";
pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    pub frame_type: String,
    /// Source cloud; relative paths resolve against the manifest directory.
    pub original: String,
    pub points: usize,
    pub payload_bytes: usize,
    pub file_bytes: usize,
    pub bpp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub sequence: String,
    pub precision_bits: u32,
    /// Capture precision of the originals when they were requantized.
    pub source_bits: Option<u32>,
    pub lambda: u8,
    pub alpha: f64,
    pub gop: Option<usize>,
    pub transmit_c3: bool,
    pub latent_carry: bool,
    pub frames: Vec<FrameEntry>,
    pub total_payload_bytes: usize,
    pub total_points: usize,
    pub bpp: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let data = read_input(path)?;
        let m: Self = serde_json::from_slice(&data)
            .map_err(|e| Failure::input(format!("{} is not a sequence manifest: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Failure::input(format!("{} has format `{}`", path.display(), m.format)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_output(path, text.as_bytes())
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
