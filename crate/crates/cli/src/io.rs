//! Artifact files, JSON with path-annotated schema errors, and the output
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Parses JSON, reporting schema violations with their JSON path.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &Path) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::input(e.into_inner().to_string())
            .in_file(file)
            .at_path(path)
    })
}

pub fn read_json<T: DeserializeOwned>(file: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
    parse_json(&text, file)
}

/// Pretty JSON with a trailing newline; the canonical artifact encoding.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Subcommand that wrote the file.
    pub producer: String,
    /// Size and digest; absent for files that legitimately differ between
    /// runs (wall-clock timings).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

/// An output directory. Files are written immediately; [`OutDir::finish`]
/// merges them into the directory's manifest.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    producer: String,
    entries: BTreeMap<String, ManifestEntry>,
}

impl OutDir {
    pub fn create(root: &Path, producer: &str) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            producer: producer.into(),
            entries: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn put(&mut self, name: &str, bytes: &[u8], stable: bool) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.entries.insert(
            name.to_string(),
            ManifestEntry {
                producer: self.producer.clone(),
                bytes: stable.then_some(bytes.len() as u64),
                sha256: stable.then(|| sha256_hex(bytes)),
            },
        );
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.put(name, bytes, true)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.put(name, to_json(value).as_bytes(), true)
    }

    /// A file excluded from byte-level reproducibility (timings).
    pub fn write_volatile_json<T: Serialize>(
        &mut self,
        name: &str,
        value: &T,
    ) -> Result<(), CliError> {
        self.put(name, to_json(value).as_bytes(), false)
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let path = self.path(MANIFEST_FILE);
        let mut manifest: Manifest = if path.exists() {
            read_json(&path).unwrap_or_default()
        } else {
            Manifest::default()
        };
        manifest.files.extend(self.entries);
        fs::write(&path, to_json(&manifest)).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
