//! Content-addressed response cache.
//!
//! Keys are SHA-256 digests over the model identity, decoding parameters and
//! the exact rendered prompt bytes. A cache is either purely in memory or
//! backed by a directory holding one JSON file per key.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Hex digest identifying one (model, parameters, prompt) triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(model: &str, params: &str, prompt: &str) -> Self {
        let mut h = KeyHasher::new(model, params);
        h.update(prompt);
        h.finish()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Incremental form of [`CacheKey::new`]; clone it after feeding a shared
/// prompt prefix to key many prompts cheaply.
#[derive(Debug, Clone)]
pub struct KeyHasher(Sha256);

impl KeyHasher {
    pub fn new(model: &str, params: &str) -> Self {
        let mut hasher = Sha256::new();
        // The prompt is the last field, so only the first two need lengths.
        for part in [model, params] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        Self(hasher)
    }

    pub fn update(&mut self, prompt_part: &str) {
        self.0.update(prompt_part.as_bytes());
    }

    pub fn finish(self) -> CacheKey {
        CacheKey(hex::encode(self.0.finalize()))
    }
}

/// What the key was computed from, stored for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    pub model: String,
    pub params: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub material: KeyMaterial,
    pub raw: String,
    /// Milliseconds since the Unix epoch when the entry was written.
    pub timestamp_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or(Duration::ZERO)
        .as_millis() as u64
}

const WRITE_STRIPES: usize = 64;

#[derive(Debug)]
pub struct Cache {
    dir: Option<PathBuf>,
    // Raw response and write time only; prompts stay on disk.
    memo: RwLock<HashMap<CacheKey, (String, u64)>>,
    // Writes to the same key are serialized through the stripe its digest maps to.
    stripes: Vec<Mutex<()>>,
}

/// Removes entries written before `cutoff`.
#[derive(Debug, Clone, Copy)]
pub struct GcPolicy {
    pub cutoff: SystemTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GcStats {
    pub scanned: usize,
    pub removed: usize,
}

impl Cache {
    fn with_dir(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memo: RwLock::new(HashMap::new()),
            stripes: (0..WRITE_STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn in_memory() -> Self {
        Self::with_dir(None)
    }

    /// Opens (creating if needed) a cache directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self::with_dir(Some(dir)))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", key.as_str())))
    }

    fn stripe(&self, key: &CacheKey) -> &Mutex<()> {
        let idx = u8::from_str_radix(&key.as_str()[..2], 16).unwrap_or(0) as usize % WRITE_STRIPES;
        &self.stripes[idx]
    }

    /// The cached raw response for `key`, if any.
    pub fn get(&self, key: &CacheKey) -> Result<Option<String>, CacheError> {
        if let Some((raw, _)) = self.memo.read().expect("cache lock").get(key) {
            return Ok(Some(raw.clone()));
        }
        Ok(self.entry(key)?.map(|e| {
            self.memo
                .write()
                .expect("cache lock")
                .insert(key.clone(), (e.raw.clone(), e.timestamp_ms));
            e.raw
        }))
    }

    /// The full stored entry; only directory-backed caches keep one.
    pub fn entry(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let Some(path) = self.entry_path(key) else {
            return Ok(None);
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|source| CacheError::Corrupt { path, source })
    }

    pub fn put(&self, key: &CacheKey, material: KeyMaterial, raw: &str) -> Result<(), CacheError> {
        let timestamp_ms = now_ms();
        let _guard = self.stripe(key).lock().expect("stripe lock");
        if let Some(path) = self.entry_path(key) {
            let entry = CacheEntry {
                key: key.clone(),
                material,
                raw: raw.to_string(),
                timestamp_ms,
            };
            // Write-then-rename so readers never observe a partial file.
            let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
            let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
            fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        self.memo
            .write()
            .expect("cache lock")
            .insert(key.clone(), (raw.to_string(), timestamp_ms));
        Ok(())
    }

    pub fn len(&self) -> Result<usize, CacheError> {
        match &self.dir {
            None => Ok(self.memo.read().expect("cache lock").len()),
            Some(dir) => Ok(self.entry_files(dir)?.len()),
        }
    }

    pub fn is_empty(&self) -> Result<bool, CacheError> {
        self.len().map(|n| n == 0)
    }

    fn entry_files(&self, dir: &Path) -> Result<Vec<PathBuf>, CacheError> {
        let mut out = Vec::new();
        for item in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = item.map_err(io_err(dir))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Deletes every entry older than the policy cutoff.
    pub fn gc(&self, policy: GcPolicy) -> Result<GcStats, CacheError> {
        let cutoff = policy
            .cutoff
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO)
            .as_millis() as u64;
        let mut stats = GcStats::default();
        let mut memo = self.memo.write().expect("cache lock");
        match &self.dir {
            None => {
                stats.scanned = memo.len();
                memo.retain(|_, (_, ts)| *ts >= cutoff);
                stats.removed = stats.scanned - memo.len();
            }
            Some(dir) => {
                for path in self.entry_files(dir)? {
                    stats.scanned += 1;
                    let bytes = fs::read(&path).map_err(io_err(&path))?;
                    let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|source| CacheError::Corrupt {
                        path: path.clone(),
                        source,
                    })?;
                    if entry.timestamp_ms < cutoff {
                        fs::remove_file(&path).map_err(io_err(&path))?;
                        memo.remove(&entry.key);
                        stats.removed += 1;
                    }
                }
            }
        }
        Ok(stats)
    }
}

/// Free-function form of [`Cache::gc`].
pub fn cache_gc(cache: &Cache, policy: GcPolicy) -> Result<GcStats, CacheError> {
    cache.gc(policy)
}
