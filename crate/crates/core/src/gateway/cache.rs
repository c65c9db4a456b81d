use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Content-addressed response cache: one immutable JSON file per request
/// digest, laid out as `<root>/<first two hex chars>/<digest>.json`.
///
/// Writes go through a uniquely named temporary file and a rename, so
/// concurrent readers never see partial content; an existing entry is never
/// rewritten.
#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let shard = &key[..key.len().min(2)];
        self.root.join(shard).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.path_for(key);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(value).map_err(std::io::Error::other)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }

    pub fn len(&self) -> usize {
        walk_json(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else if p.extension().is_some_and(|x| x == "json") {
                1
            } else {
                0
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get_and_never_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = "ab".repeat(32);
        assert_eq!(cache.get::<Vec<String>>(&key), None);
        cache.put(&key, &vec!["x".to_string()]).unwrap();
        cache.put(&key, &vec!["y".to_string()]).unwrap();
        assert_eq!(cache.get::<Vec<String>>(&key), Some(vec!["x".to_string()]));
        assert_eq!(cache.len(), 1);
    }
}
