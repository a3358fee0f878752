//! Message transports: in-memory value passing and a shared-directory file
//! exchange, both behind one relay interface so the protocol driver is
//! transport-agnostic.
//!
//! The file layout is one directory per round with one file per site
//! message, named `{round}-{site id}.json`, plus a `manifest.json` at the
//! root. Files are written atomically (temp file + rename) so pollers never
//! observe partial writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::data::SiteId;
use crate::error::{Error, Result};

use super::messages::{Manifest, Message, SCHEMA};

/// One relayed message, for auditing protocol shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TranscriptEntry {
    pub round: String,
    pub from: SiteId,
    pub bytes: usize,
}

/// A duplex relay: the driver hands a message in, the recipient's copy comes
/// back. For the file transport the copy is what was read back from disk,
/// so any serialization defect surfaces as a difference in results.
pub trait Channel {
    fn relay(&mut self, msg: Message) -> Result<Message>;
    fn transcript(&self) -> &[TranscriptEntry];
}

/// Transport that passes values directly, recording sizes by serializing.
#[derive(Default)]
pub struct InMemoryChannel {
    log: Vec<TranscriptEntry>,
}

impl InMemoryChannel {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Channel for InMemoryChannel {
    fn relay(&mut self, msg: Message) -> Result<Message> {
        let bytes = serde_json::to_vec(&msg)?.len();
        self.log.push(TranscriptEntry {
            round: msg.round().to_string(),
            from: msg.site(),
            bytes,
        });
        Ok(msg)
    }

    fn transcript(&self) -> &[TranscriptEntry] {
        &self.log
    }
}

/// Transport that writes every message to a shared directory and reads it
/// back, exercising the full serialization path.
pub struct FileChannel {
    dir: PathBuf,
    log: Vec<TranscriptEntry>,
}

impl FileChannel {
    /// Create the channel, its round directories, and the manifest.
    pub fn create(
        dir: impl Into<PathBuf>,
        target_site: SiteId,
        source_sites: &[SiteId],
    ) -> Result<Self> {
        let dir = dir.into();
        init_run_dir(&dir, target_site, source_sites)?;
        Ok(Self {
            dir,
            log: Vec::new(),
        })
    }
}

impl Channel for FileChannel {
    fn relay(&mut self, msg: Message) -> Result<Message> {
        let path = message_path(&self.dir, msg.round(), msg.site());
        let bytes = write_message(&path, &msg)?;
        self.log.push(TranscriptEntry {
            round: msg.round().to_string(),
            from: msg.site(),
            bytes,
        });
        read_message(&path)
    }

    fn transcript(&self) -> &[TranscriptEntry] {
        &self.log
    }
}

/// Canonical path of a message file.
pub fn message_path(dir: &Path, round: &str, site: SiteId) -> PathBuf {
    dir.join(round).join(format!("{round}-{site}.json"))
}

/// Prepare a shared run directory: round subdirectories plus manifest.
pub fn init_run_dir(dir: &Path, target_site: SiteId, source_sites: &[SiteId]) -> Result<()> {
    for round in ["round1", "broadcast", "round2"] {
        fs::create_dir_all(dir.join(round))?;
    }
    let manifest = Manifest {
        schema: SCHEMA.into(),
        target_site,
        source_sites: source_sites.to_vec(),
    };
    let body = serde_json::to_vec_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), &body)?;
    Ok(())
}

/// Read and check the manifest of a shared run directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let body = fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&body)?;
    if manifest.schema != SCHEMA {
        return Err(Error::SchemaVersion {
            expected: SCHEMA.into(),
            actual: manifest.schema,
        });
    }
    Ok(manifest)
}

/// Serialize a message to its canonical file; returns the byte count.
pub fn write_message(path: &Path, msg: &Message) -> Result<usize> {
    let body = serde_json::to_vec(msg)?;
    atomic_write(path, &body)?;
    Ok(body.len())
}

/// Read a message file.
pub fn read_message(path: &Path) -> Result<Message> {
    let body = fs::read(path)?;
    Ok(serde_json::from_slice(&body)?)
}

/// Poll for a message file until it parses or the timeout elapses.
pub fn poll_message(path: &Path, timeout: Duration) -> Result<Message> {
    let start = Instant::now();
    loop {
        if path.exists() {
            // The write is atomic (rename), so an existing file is complete.
            return read_message(path);
        }
        if start.elapsed() > timeout {
            return Err(Error::Timeout {
                seconds: timeout.as_secs(),
                what: path.display().to_string(),
            });
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}

fn atomic_write(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::messages::Round1Summary;
    use crate::shift::phi_len;

    fn sample_msg() -> Message {
        Message::Round1(Round1Summary {
            schema: SCHEMA.into(),
            site: 2,
            n: 7,
            phi_moments: vec![0.1; phi_len(1)],
            xi_forms: vec!["log(y)".into()],
            xi_mean: vec![0.375],
        })
    }

    #[test]
    fn file_roundtrip_preserves_message() {
        let dir = tempfile::tempdir().unwrap();
        let mut ch = FileChannel::create(dir.path(), 0, &[2]).unwrap();
        let msg = sample_msg();
        let back = ch.relay(msg.clone()).unwrap();
        assert_eq!(msg, back);
        assert_eq!(ch.transcript().len(), 1);
        assert_eq!(ch.transcript()[0].round, "round1");
        assert!(message_path(dir.path(), "round1", 2).exists());
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.source_sites, vec![2]);
    }

    #[test]
    fn poll_times_out_on_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let err = poll_message(&missing, Duration::from_millis(60)).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }));
    }

    #[test]
    fn in_memory_relay_is_identity() {
        let mut ch = InMemoryChannel::new();
        let msg = sample_msg();
        let back = ch.relay(msg.clone()).unwrap();
        assert_eq!(msg, back);
        assert_eq!(ch.transcript().len(), 1);
        assert!(ch.transcript()[0].bytes > 0);
    }
}
