//! Run manifests.
//!
//! A manifest is the fully resolved training config preceded by `#` comment
//! lines carrying provenance (hashes, seed, timestamps). Since comments are
//! ignored by the config grammar, the file itself is a valid `--config`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dnl::training::TrainConfig;
use dnl::Result;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct RunManifest {
    pub config: TrainConfig,
    pub data_hash: String,
    pub resumed_from: Option<String>,
    pub started_unix: u64,
}

impl RunManifest {
    /// Hash over program version and resolved config text.
    pub fn config_hash(&self) -> String {
        sha256_hex(format!("{}\0{}", env!("CARGO_PKG_VERSION"), self.config.to_text()).as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dnl run manifest");
        let _ = writeln!(out, "# program_version: {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(out, "# config_hash: {}", self.config_hash());
        let _ = writeln!(out, "# data_sha256: {}", self.data_hash);
        let _ = writeln!(out, "# seed: {}", self.config.seed);
        if let Some(r) = &self.resumed_from {
            let _ = writeln!(out, "# resumed_from: {r}");
        }
        let _ = writeln!(out, "# started_unix: {}", self.started_unix);
        out.push_str(&self.config.to_text());
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
