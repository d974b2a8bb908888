//! Versioned on-disk store of bundle archives.
//!
//! Layout: `<root>/<model>/<version>/bundle.zip` plus `<root>/<model>/manifest.json`.
//! Archives and manifests are written to a temporary file and renamed into
//! place; the manifest is updated last, so a version exists exactly when the
//! manifest lists it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{load_bundle, valid_model_name, BundleError};
use crate::schema::content_hash;

const MANIFEST: &str = "manifest.json";
const ARCHIVE: &str = "bundle.zip";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("refusing to store invalid bundle: {0}")]
    InvalidBundle(#[from] BundleError),
    #[error("invalid model name {0:?}")]
    InvalidName(String),
    #[error("{name} version {version} not found")]
    VersionNotFound { name: String, version: u64 },
    #[error("{name} version {version} is corrupt: expected hash {expected}, found {actual}")]
    HashMismatch { name: String, version: u64, expected: String, actual: String },
    #[error("store I/O error at {path}: {source}")]
    StoreIoError { path: PathBuf, source: io::Error },
    #[error("manifest {path} is unreadable: {detail}")]
    ManifestCorrupt { path: PathBuf, detail: String },
    #[error("injected fault at {0:?}")]
    InjectedFault(FaultPoint),
}

/// Where a `put_version` can be interrupted in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    PreWrite,
    MidWrite,
    PreRename,
    PreManifest,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 4] = [FaultPoint::PreWrite, FaultPoint::MidWrite, FaultPoint::PreRename, FaultPoint::PreManifest];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredVersion {
    pub model_name: String,
    pub version: u64,
    pub archive_path: String,
    pub content_hash: String,
    pub created_at: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    versions: Vec<StoredVersion>,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::StoreIoError { path: path.to_path_buf(), source }
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(ArtifactStore { root, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_name(name: &str) -> Result<(), StoreError> {
        if valid_model_name(name) {
            Ok(())
        } else {
            Err(StoreError::InvalidName(name.to_string()))
        }
    }

    fn read_manifest(&self, name: &str) -> Result<Manifest, StoreError> {
        let path = self.root.join(name).join(MANIFEST);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::ManifestCorrupt { path, detail: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(StoreError::StoreIoError { path, source: e }),
        }
    }

    pub fn put_version(&self, name: &str, archive: &[u8]) -> Result<StoredVersion, StoreError> {
        self.put(name, archive, None)
    }

    /// `put_version` that stops at `fault`, leaving the disk as a crash there would.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn put_version_with_fault(&self, name: &str, archive: &[u8], fault: FaultPoint) -> Result<StoredVersion, StoreError> {
        self.put(name, archive, Some(fault))
    }

    fn put(&self, name: &str, archive: &[u8], fault: Option<FaultPoint>) -> Result<StoredVersion, StoreError> {
        Self::check_name(name)?;
        load_bundle(archive)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let crash = |point| if fault == Some(point) { Err(StoreError::InjectedFault(point)) } else { Ok(()) };

        let mut manifest = self.read_manifest(name)?;
        let version = manifest.versions.last().map_or(1, |v| v.version + 1);
        let model_dir = self.root.join(name);
        let dir = model_dir.join(version.to_string());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        crash(FaultPoint::PreWrite)?;

        let tmp = dir.join(format!("{ARCHIVE}.tmp"));
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        if fault == Some(FaultPoint::MidWrite) {
            file.write_all(&archive[..archive.len() / 2]).map_err(io_err(&tmp))?;
            return Err(StoreError::InjectedFault(FaultPoint::MidWrite));
        }
        file.write_all(archive).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
        drop(file);
        crash(FaultPoint::PreRename)?;

        let target = dir.join(ARCHIVE);
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        sync_dir(&dir);
        crash(FaultPoint::PreManifest)?;

        let record = StoredVersion {
            model_name: name.to_string(),
            version,
            archive_path: format!("{name}/{version}/{ARCHIVE}"),
            content_hash: content_hash(archive),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        manifest.versions.push(record.clone());
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let manifest_tmp = model_dir.join(format!("{MANIFEST}.tmp"));
        let manifest_path = model_dir.join(MANIFEST);
        let mut file = fs::File::create(&manifest_tmp).map_err(io_err(&manifest_tmp))?;
        file.write_all(&manifest_bytes).map_err(io_err(&manifest_tmp))?;
        file.sync_all().map_err(io_err(&manifest_tmp))?;
        drop(file);
        fs::rename(&manifest_tmp, &manifest_path).map_err(io_err(&manifest_path))?;
        sync_dir(&model_dir);
        Ok(record)
    }

    /// Returns the stored bytes after re-checking their hash.
    pub fn get_version(&self, name: &str, version: u64) -> Result<Vec<u8>, StoreError> {
        Self::check_name(name)?;
        let manifest = self.read_manifest(name)?;
        let record = manifest
            .versions
            .iter()
            .find(|v| v.version == version)
            .ok_or_else(|| StoreError::VersionNotFound { name: name.to_string(), version })?;
        let path = self.root.join(&record.archive_path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = content_hash(&bytes);
        if actual != record.content_hash {
            return Err(StoreError::HashMismatch {
                name: name.to_string(),
                version,
                expected: record.content_hash.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Versions in ascending order; empty for an unknown name.
    pub fn list_versions(&self, name: &str) -> Result<Vec<StoredVersion>, StoreError> {
        Self::check_name(name)?;
        Ok(self.read_manifest(name)?.versions)
    }

    /// Names with at least one stored version, sorted.
    pub fn model_names(&self) -> Result<Vec<String>, StoreError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_model_name(&name) && entry.path().join(MANIFEST).is_file() {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }
}

fn sync_dir(dir: &Path) {
    // Not every platform can fsync a directory; the rename is still atomic.
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{assemble_bundle, save_bundle};

    fn archive(name: &str, weight: f64) -> Vec<u8> {
        let proto = "message DataFrame { double x = 1; } message Prediction { double prediction = 1; }";
        let ppf = format!(r#"{{"format_version":"ppf-1","kind":"linear","input_fields":["x"],"output_field":"prediction","params":{{"weights":[{weight}],"intercept":0}}}}"#);
        let meta = format!(r#"{{"model_name":"{name}","created_at":"2024-01-01T00:00:00Z"}}"#);
        save_bundle(&assemble_bundle(proto, &ppf, "{}", &meta).unwrap())
    }

    #[test]
    fn versions_are_contiguous_events() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let a = archive("churn", 1.0);
        assert_eq!(store.put_version("churn", &a).unwrap().version, 1);
        let second = store.put_version("churn", &a).unwrap();
        assert_eq!(second.version, 2);
        assert_eq!(second.content_hash, store.list_versions("churn").unwrap()[0].content_hash);
        store.put_version("churn", &archive("churn", 2.0)).unwrap();
        let versions: Vec<_> = store.list_versions("churn").unwrap().iter().map(|v| v.version).collect();
        assert_eq!(versions, [1, 2, 3]);
        assert_eq!(store.get_version("churn", 1).unwrap(), a);
        assert!(matches!(store.get_version("churn", 99), Err(StoreError::VersionNotFound { version: 99, .. })));
        assert!(store.list_versions("unknown").unwrap().is_empty());
        assert_eq!(store.model_names().unwrap(), ["churn"]);

        let reopened = ArtifactStore::open(dir.path()).unwrap();
        assert_eq!(reopened.list_versions("churn").unwrap(), store.list_versions("churn").unwrap());
    }

    #[test]
    fn rejects_invalid_input() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        assert!(matches!(store.put_version("churn", b"junk"), Err(StoreError::InvalidBundle(_))));
        assert!(matches!(store.put_version("../x", &archive("x", 1.0)), Err(StoreError::InvalidName(_))));
        assert!(store.list_versions("churn").unwrap().is_empty());
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        store.put_version("churn", &archive("churn", 1.0)).unwrap();
        let path = dir.path().join("churn/1/bundle.zip");
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get_version("churn", 1), Err(StoreError::HashMismatch { .. })));
    }

    #[test]
    fn interrupted_puts_leave_store_readable() {
        for fault in FaultPoint::ALL {
            let dir = tempfile::tempdir().unwrap();
            let store = ArtifactStore::open(dir.path()).unwrap();
            store.put_version("m", &archive("m", 1.0)).unwrap();
            let err = store.put_version_with_fault("m", &archive("m", 2.0), fault).unwrap_err();
            assert!(matches!(err, StoreError::InjectedFault(p) if p == fault));
            let reopened = ArtifactStore::open(dir.path()).unwrap();
            assert_eq!(reopened.list_versions("m").unwrap().len(), 1, "{fault:?}");
            reopened.get_version("m", 1).unwrap();
            // the next put reuses the orphaned slot
            assert_eq!(reopened.put_version("m", &archive("m", 3.0)).unwrap().version, 2);
            assert_eq!(reopened.get_version("m", 2).unwrap(), archive("m", 3.0));
        }
    }
}
