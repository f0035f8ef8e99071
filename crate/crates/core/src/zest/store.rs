use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::codec::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::lime::Signature;

const INDEX_FILE: &str = "index.tsv";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq)]
struct IndexEntry {
    id: String,
    fingerprint: String,
    file: String,
    checksum: String,
}

/// Directory of signature files plus an index with one line per signature:
/// `id<TAB>fingerprint<TAB>file<TAB>sha256`.
///
/// Signature files and the index are replaced atomically. Index updates are serialized
/// with an in-process mutex and an exclusive lock on `.lock`, so concurrent writers from
/// several threads or processes do not lose entries.
#[derive(Debug)]
pub struct SignatureStore {
    dir: PathBuf,
    guard: Mutex<()>,
}

fn file_name_for(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean == id && !id.starts_with('.') && !id.is_empty() {
        format!("{id}.sig")
    } else {
        format!("{clean}-{}.sig", &sha256_hex(id.as_bytes())[..8])
    }
}

impl SignatureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            guard: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join(INDEX_FILE)
    }

    fn read_index(&self) -> Result<Vec<IndexEntry>> {
        let path = self.index_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 4 {
                    return Err(Error::Integrity {
                        path: path.clone(),
                        reason: format!("line {} has {} fields, expected 4", n + 1, f.len()),
                    });
                }
                Ok(IndexEntry {
                    id: f[0].to_string(),
                    fingerprint: f[1].to_string(),
                    file: f[2].to_string(),
                    checksum: f[3].to_string(),
                })
            })
            .collect()
    }

    /// Writes (or replaces) the signature under its model id.
    pub fn put(&self, sig: &Signature) -> Result<PathBuf> {
        if sig.model_id().contains(['\t', '\n']) {
            return Err(Error::Config("model ids may not contain tabs or newlines".into()));
        }
        let bytes = sig.to_bytes();
        let file = file_name_for(sig.model_id());
        let path = self.dir.join(&file);
        codec::write_atomic(&path, &bytes)?;

        let _local = self.guard.lock().unwrap_or_else(|e| e.into_inner());
        let lock_path = self.dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;

        let mut index = self.read_index()?;
        index.retain(|e| e.id != sig.model_id());
        index.push(IndexEntry {
            id: sig.model_id().to_string(),
            fingerprint: sig.fingerprint().to_string(),
            file,
            checksum: sha256_hex(&bytes),
        });
        index.sort_by(|a, b| a.id.cmp(&b.id));
        let text: String = index
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.fingerprint, e.file, e.checksum))
            .collect();
        codec::write_atomic(&self.index_path(), text.as_bytes())?;
        lock.unlock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(path)
    }

    /// Loads a signature, verifying its checksum against the index.
    pub fn get(&self, id: &str) -> Result<Signature> {
        let entry = self
            .read_index()?
            .into_iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Empty(format!("no signature for {id:?} in {}", self.dir.display())))?;
        self.load_entry(&entry)
    }

    fn load_entry(&self, entry: &IndexEntry) -> Result<Signature> {
        let path = self.dir.join(&entry.file);
        let bytes = codec::read_file(&path)?;
        if sha256_hex(&bytes) != entry.checksum {
            return Err(Error::Integrity {
                path,
                reason: "checksum does not match the store index".into(),
            });
        }
        let sig = codec::in_file(&path, Signature::from_bytes(&bytes))?;
        if sig.model_id() != entry.id || sig.fingerprint() != entry.fingerprint {
            return Err(Error::Integrity {
                path,
                reason: "file contents disagree with the store index".into(),
            });
        }
        Ok(sig)
    }

    /// Model ids stored under `fingerprint`, sorted.
    pub fn list_by_fingerprint(&self, fingerprint: &str) -> Result<Vec<String>> {
        Ok(self
            .read_index()?
            .into_iter()
            .filter(|e| e.fingerprint == fingerprint)
            .map(|e| e.id)
            .collect())
    }

    /// All fingerprint groups with their sorted model ids.
    pub fn groups(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in self.read_index()? {
            out.entry(e.fingerprint).or_default().push(e.id);
        }
        Ok(out)
    }

    /// Every signature in one fingerprint group, sorted by id.
    pub fn load_group(&self, fingerprint: &str) -> Result<Vec<Signature>> {
        self.read_index()?
            .iter()
            .filter(|e| e.fingerprint == fingerprint)
            .map(|e| self.load_entry(e))
            .collect()
    }
}
