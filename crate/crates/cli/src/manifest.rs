//! Run directories and the per-run manifest: where artifacts land, what
//! produced them, and a digest of the exact configuration used.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twindiff_core::error::{CoreError, Result};

use crate::config::RunConfig;

pub const MANIFEST_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Summary written into every run directory once the command finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_format: u32,
    pub command: String,
    /// SHA-256 over the canonical JSON encoding of the resolved config.
    pub config_sha256: String,
    /// Format versions of the artifact kinds this tool reads and writes.
    pub artifact_versions: BTreeMap<String, String>,
    pub wall_time_ms: u64,
    /// Every file under the run directory (relative paths, sorted), except
    /// the manifest itself.
    pub produced: Vec<String>,
}

pub fn config_sha256(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Create `output_dir/<command>-<epoch-millis>`, suffixing `-1`, `-2`, … on
/// collision so rapid back-to-back runs never clobber each other.
pub fn create_run_dir(output_dir: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(output_dir)?;
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_err(|e| CoreError::Config(format!("system clock before epoch: {e}")))?
        .as_millis();
    for n in 0u64.. {
        let name = if n == 0 {
            format!("{command}-{millis}")
        } else {
            format!("{command}-{millis}-{n}")
        };
        let dir = output_dir.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

/// Echo the fully resolved configuration into the run directory.
pub fn echo_config(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CoreError::Config(format!("internal: config not serializable: {e}")))?;
    std::fs::write(run_dir.join(CONFIG_ECHO_FILE), text)?;
    Ok(())
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Inventory the run directory and write `manifest.json` atomically
/// (temp file + rename), so a manifest only ever exists complete.
pub fn finalize_run(
    run_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    started: Instant,
) -> Result<RunManifest> {
    let mut produced = Vec::new();
    walk_files(run_dir, run_dir, &mut produced)?;
    produced.retain(|p| p != MANIFEST_FILE);
    produced.sort();

    let mut artifact_versions = BTreeMap::new();
    artifact_versions.insert("checkpoint_format".into(), twindiff_core::ckpt::FORMAT_VERSION.to_string());
    artifact_versions.insert("run_manifest_format".into(), MANIFEST_FORMAT.to_string());
    artifact_versions.insert("cli".into(), env!("CARGO_PKG_VERSION").to_string());

    let manifest = RunManifest {
        manifest_format: MANIFEST_FORMAT,
        command: command.to_string(),
        config_sha256: config_sha256(cfg),
        artifact_versions,
        wall_time_ms: started.elapsed().as_millis() as u64,
        produced,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, run_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(run_dir.join(MANIFEST_FILE))
        .map_err(|e| CoreError::Data(format!("missing {MANIFEST_FILE} in {}: {e}", run_dir.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("malformed {MANIFEST_FILE}: {e}")))
}
