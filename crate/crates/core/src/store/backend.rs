//! Raw persistence behind [`ContentStore`](super::ContentStore).
//!
//! Two kinds of data: small documents replaced atomically under a key, and
//! append-only record logs. Keys are `/`-separated relative paths.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

pub trait Backend: Send + Sync {
    /// Atomically replaces the document at `key`.
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()>;
    fn get(&self, key: &str) -> io::Result<Option<Vec<u8>>>;
    fn delete(&self, key: &str) -> io::Result<()>;
    /// Immediate children (documents and directories) under `prefix`, sorted.
    fn list(&self, prefix: &str) -> io::Result<Vec<String>>;
    /// Appends records durably; returns only once they survive a crash.
    fn append(&self, log: &str, records: &[Vec<u8>]) -> io::Result<()>;
    /// Every complete record in append order.
    fn read_log(&self, log: &str) -> io::Result<Vec<Vec<u8>>>;
}

/// Volatile backend for simulation and tests.
#[derive(Debug, Default)]
pub struct MemBackend {
    docs: Mutex<BTreeMap<String, Vec<u8>>>,
    logs: Mutex<HashMap<String, Vec<Vec<u8>>>>,
}

impl MemBackend {
    pub fn new() -> MemBackend {
        MemBackend::default()
    }
}

fn children<'a>(keys: impl Iterator<Item = &'a String>, prefix: &str) -> Vec<String> {
    let prefix = if prefix.is_empty() || prefix.ends_with('/') {
        prefix.to_string()
    } else {
        format!("{prefix}/")
    };
    let mut out: Vec<String> = keys
        .filter_map(|k| k.strip_prefix(&prefix))
        .map(|rest| rest.split('/').next().unwrap_or(rest).to_string())
        .collect();
    out.sort();
    out.dedup();
    out
}

impl Backend for MemBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        self.docs.lock().expect("docs lock").insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.docs.lock().expect("docs lock").get(key).cloned())
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        self.docs.lock().expect("docs lock").remove(key);
        Ok(())
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        let docs = self.docs.lock().expect("docs lock");
        let logs = self.logs.lock().expect("logs lock");
        let mut all = children(docs.keys(), prefix);
        all.extend(children(logs.keys(), prefix));
        all.sort();
        all.dedup();
        Ok(all)
    }

    fn append(&self, log: &str, records: &[Vec<u8>]) -> io::Result<()> {
        self.logs
            .lock()
            .expect("logs lock")
            .entry(log.to_string())
            .or_default()
            .extend(records.iter().cloned());
        Ok(())
    }

    fn read_log(&self, log: &str) -> io::Result<Vec<Vec<u8>>> {
        Ok(self
            .logs
            .lock()
            .expect("logs lock")
            .get(log)
            .cloned()
            .unwrap_or_default())
    }
}

/// Default segment size before a log rolls over to a new file.
pub const DEFAULT_SEGMENT_BYTES: u64 = 4 * 1024 * 1024;

struct OpenSegment {
    index: u32,
    file: File,
    len: u64,
}

/// On-disk backend rooted at a data directory.
///
/// Documents are written to a temp file, synced, then renamed over the
/// target. Logs are directories of newline-terminated segment files; a torn
/// final line left by a crash is discarded when the log is next opened.
pub struct DirBackend {
    root: PathBuf,
    segment_bytes: u64,
    open: Mutex<HashMap<String, OpenSegment>>,
    tmp_counter: AtomicU64,
}

impl DirBackend {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<DirBackend> {
        Self::with_segment_bytes(root, DEFAULT_SEGMENT_BYTES)
    }

    pub fn with_segment_bytes(root: impl Into<PathBuf>, segment_bytes: u64) -> io::Result<DirBackend> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(DirBackend {
            root,
            segment_bytes: segment_bytes.max(1),
            open: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> io::Result<PathBuf> {
        if key.split('/').any(|part| part.is_empty() || part == "." || part == "..") {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad key {key:?}")));
        }
        Ok(self.root.join(key))
    }

    fn segment_path(dir: &Path, index: u32) -> PathBuf {
        dir.join(format!("segment-{index:06}.ndjson"))
    }

    fn segments(dir: &Path) -> io::Result<Vec<u32>> {
        let mut out = Vec::new();
        match fs::read_dir(dir) {
            Ok(entries) => {
                for entry in entries {
                    let name = entry?.file_name();
                    let name = name.to_string_lossy();
                    if let Some(n) = name
                        .strip_prefix("segment-")
                        .and_then(|s| s.strip_suffix(".ndjson"))
                        .and_then(|s| s.parse().ok())
                    {
                        out.push(n);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Opens the newest segment for appending, cutting any torn tail.
    fn open_segment(&self, dir: &Path) -> io::Result<OpenSegment> {
        fs::create_dir_all(dir)?;
        let index = Self::segments(dir)?.last().copied().unwrap_or(0);
        let path = Self::segment_path(dir, index);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut contents = Vec::new();
        file.read_to_end(&mut contents)?;
        let keep = contents
            .iter()
            .rposition(|b| *b == b'\n')
            .map_or(0, |p| p + 1) as u64;
        if keep != contents.len() as u64 {
            file.set_len(keep)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        sync_dir(dir)?;
        Ok(OpenSegment {
            index,
            file,
            len: keep,
        })
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl Backend for DirBackend {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.path(key)?;
        let dir = path.parent().expect("key has a parent").to_path_buf();
        fs::create_dir_all(&dir)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(
            ".{}.tmp-{}-{n}",
            path.file_name().expect("file name").to_string_lossy(),
            std::process::id()
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        sync_dir(&dir)
    }

    fn get(&self, key: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(key)?) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        let path = self.path(key)?;
        match fs::remove_file(&path) {
            Ok(()) => sync_dir(path.parent().expect("parent")),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        let dir = if prefix.is_empty() {
            self.root.clone()
        } else {
            self.path(prefix.trim_end_matches('/'))?
        };
        let mut out = Vec::new();
        match fs::read_dir(&dir) {
            Ok(entries) => {
                for entry in entries {
                    let name = entry?.file_name().to_string_lossy().into_owned();
                    if !name.starts_with('.') {
                        out.push(name);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        out.sort();
        Ok(out)
    }

    fn append(&self, log: &str, records: &[Vec<u8>]) -> io::Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let dir = self.path(log)?;
        let mut open = self.open.lock().expect("segment lock");
        if !open.contains_key(log) {
            let seg = self.open_segment(&dir)?;
            open.insert(log.to_string(), seg);
        }
        let seg = open.get_mut(log).expect("segment present");
        if seg.len >= self.segment_bytes {
            let next = seg.index + 1;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(Self::segment_path(&dir, next))?;
            sync_dir(&dir)?;
            *seg = OpenSegment {
                index: next,
                file,
                len: 0,
            };
        }
        let mut buf = Vec::new();
        for r in records {
            debug_assert!(!r.contains(&b'\n'), "records are single lines");
            buf.extend_from_slice(r);
            buf.push(b'\n');
        }
        let result = seg.file.write_all(&buf).and_then(|_| seg.file.sync_data());
        if let Err(e) = result {
            // Drop the handle so the next append re-opens and trims.
            open.remove(log);
            return Err(e);
        }
        seg.len += buf.len() as u64;
        Ok(())
    }

    fn read_log(&self, log: &str) -> io::Result<Vec<Vec<u8>>> {
        let dir = self.path(log)?;
        let mut out = Vec::new();
        for index in Self::segments(&dir)? {
            let bytes = fs::read(Self::segment_path(&dir, index))?;
            let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            out.extend(
                bytes[..complete]
                    .split(|b| *b == b'\n')
                    .filter(|line| !line.is_empty())
                    .map(<[u8]>::to_vec),
            );
        }
        Ok(out)
    }
}
