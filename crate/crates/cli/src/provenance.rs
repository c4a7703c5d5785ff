//! Stage records: which configuration produced an artifact directory and
//! the hashes of everything it read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ECHO_FILE};
use crate::error::{CliError, CliResult};

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    /// Hash of the configuration slice the stage depends on, chained with
    /// the keys of its upstream stages.
    pub key: String,
    pub seed: u64,
    /// Upstream artifact (relative to the run directory) -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Artifact in this stage directory -> sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn stage_key(stage: &str, slice: &impl Serialize, upstream: &[&str]) -> CliResult<String> {
    let doc = serde_json::json!({ "stage": stage, "config": slice, "upstream": upstream });
    Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
}

/// An artifact directory being written by one stage.
pub struct StageWriter {
    dir: PathBuf,
    prov: Provenance,
}

impl StageWriter {
    pub fn create(dir: &Path, stage: &str, key: String, seed: u64) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        // a stale record must not survive a partially rewritten directory
        let old = dir.join(PROVENANCE_FILE);
        if old.exists() {
            std::fs::remove_file(&old)?;
        }
        let prov = Provenance { stage: stage.into(), key, seed, inputs: BTreeMap::new(), outputs: BTreeMap::new() };
        Ok(Self { dir: dir.to_path_buf(), prov })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, label: String, hash: String) {
        self.prov.inputs.insert(label, hash);
    }

    pub fn inputs_from(&mut self, label: &str, upstream: &Provenance) {
        for (name, h) in &upstream.outputs {
            self.prov.inputs.insert(format!("{label}/{name}"), h.clone());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        self.prov.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file that something else already wrote into the directory.
    pub fn adopt(&mut self, name: &str) -> CliResult<()> {
        let h = file_hash(&self.path(name))?;
        self.prov.outputs.insert(name.into(), h);
        Ok(())
    }

    /// Writes the config echo and the provenance record.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> CliResult<Provenance> {
        self.write(ECHO_FILE, cfg.to_toml()?.as_bytes())?;
        let text = serde_json::to_string_pretty(&self.prov)?;
        std::fs::write(self.dir.join(PROVENANCE_FILE), text)?;
        Ok(self.prov)
    }
}

/// Loads a stage record and checks it against the key the current
/// configuration expects and against the bytes on disk.
pub fn verify_stage(dir: &Path, stage: &str, expected_key: &str, hint: &str) -> CliResult<Provenance> {
    let p = dir.join(PROVENANCE_FILE);
    let text = std::fs::read_to_string(&p)
        .map_err(|_| CliError::Data(format!("missing {stage} artifacts in {} (run `{hint}` first)", dir.display())))?;
    let prov: Provenance = serde_json::from_str(&text)?;
    if prov.stage != stage {
        return Err(CliError::Provenance(format!("{} holds a {} stage, expected {stage}", dir.display(), prov.stage)));
    }
    if prov.key != expected_key {
        return Err(CliError::Provenance(format!(
            "{} was produced under a different configuration (key {}, current {}); re-run `{hint}`",
            dir.display(),
            short(&prov.key),
            short(expected_key)
        )));
    }
    for (name, h) in &prov.outputs {
        let actual = file_hash(&dir.join(name))?;
        if &actual != h {
            return Err(CliError::Provenance(format!("{} changed since it was recorded", dir.join(name).display())));
        }
    }
    Ok(prov)
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn keys_depend_on_slice_and_upstream() {
        let a = stage_key("s", &1, &["u"]).unwrap();
        assert_eq!(a, stage_key("s", &1, &["u"]).unwrap());
        assert_ne!(a, stage_key("s", &2, &["u"]).unwrap());
        assert_ne!(a, stage_key("s", &1, &["v"]).unwrap());
        assert_ne!(a, stage_key("t", &1, &["u"]).unwrap());
    }

    #[test]
    fn verify_detects_key_mismatch_tampering_and_absence() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("stage");
        let cfg = ExperimentConfig::default();
        let mut w = StageWriter::create(&dir, "demo", "k1".into(), 7).unwrap();
        w.write("a.bin", b"payload").unwrap();
        let prov = w.finish(&cfg).unwrap();
        assert!(prov.outputs.contains_key(ECHO_FILE));
        assert_eq!(verify_stage(&dir, "demo", "k1", "x").unwrap(), prov);
        assert!(matches!(verify_stage(&dir, "demo", "k2", "x"), Err(CliError::Provenance(_))));
        assert!(matches!(verify_stage(&dir, "other", "k1", "x"), Err(CliError::Provenance(_))));
        std::fs::write(dir.join("a.bin"), b"tampered").unwrap();
        assert!(matches!(verify_stage(&dir, "demo", "k1", "x"), Err(CliError::Provenance(_))));
        assert!(matches!(verify_stage(&tmp.path().join("none"), "demo", "k1", "x"), Err(CliError::Data(_))));
    }
}
