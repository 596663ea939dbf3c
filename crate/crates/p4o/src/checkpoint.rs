//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! P4O-CHECKPOINT 1\n
//! <manifest length in bytes, decimal>\n
//! <manifest: UTF-8 JSON>
//! <payload: little-endian f64 values>
//! ```
//!
//! The manifest holds the run configuration and the session snapshot with
//! every array's values moved to the payload. Arrays are stored in manifest
//! order: parameters, Adam first moments, Adam second moments, anchor
//! parameters (if any), then recurrent state.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use p4o_core::session::{NamedArray, SessionSnapshot};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "P4O-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub snapshot: SessionSnapshot,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    snapshot: SessionSnapshot,
    /// Number of f64 values in the payload.
    payload_values: usize,
}

fn arrays_mut(s: &mut SessionSnapshot) -> impl Iterator<Item = &mut NamedArray> {
    s.params
        .iter_mut()
        .chain(s.adam_m.iter_mut())
        .chain(s.adam_v.iter_mut())
        .chain(s.anchor.iter_mut().flatten())
        .chain(s.state.iter_mut())
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("invalid checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut snapshot = self.snapshot.clone();
        let mut payload = Vec::new();
        for a in arrays_mut(&mut snapshot) {
            for v in a.values.drain(..) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { config: self.config.clone(), snapshot, payload_values: payload.len() / 8 };
        let json = serde_json::to_vec(&manifest)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(f, "{MAGIC}")?;
            writeln!(f, "{}", json.len())?;
            f.write_all(&json)?;
            f.write_all(&payload)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad(format!("{} does not start with `{MAGIC}`", path.display())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let len: usize = line.trim_end().parse().map_err(|_| bad("manifest length is not a number"))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
        let mut manifest: Manifest = serde_json::from_slice(&json).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != manifest.payload_values * 8 {
            return Err(bad(format!(
                "payload has {} bytes, manifest promises {} values",
                payload.len(),
                manifest.payload_values
            )));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for a in arrays_mut(&mut manifest.snapshot) {
            let n: usize = a.shape.iter().product();
            a.values = values.by_ref().take(n).collect();
            if a.values.len() != n {
                return Err(bad(format!("payload ends inside array `{}`", a.name)));
            }
        }
        if values.next().is_some() {
            return Err(bad("payload longer than its arrays"));
        }
        Ok(Self { config: manifest.config, snapshot: manifest.snapshot })
    }
}
