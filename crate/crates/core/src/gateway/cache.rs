//! Append-only response cache, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    model: String,
    response: String,
    created_at: u64,
}

pub struct ResponseCache {
    path: PathBuf,
    records: Vec<(String, String)>,
    file: Mutex<File>,
}

fn io_err(e: std::io::Error) -> GatewayError {
    GatewayError::Cache(e.to_string())
}

impl ResponseCache {
    /// Opens (or creates) the cache file. A torn final record left by a
    /// crash is cut off; corrupt records elsewhere are skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut torn = false;
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            let mut offset = 0u64;
            let mut lines = reader.split(b'\n').peekable();
            while let Some(line) = lines.next() {
                let line = line.map_err(io_err)?;
                let is_last = lines.peek().is_none();
                let len = line.len() as u64 + 1;
                match serde_json::from_slice::<Record>(&line) {
                    Ok(rec) => {
                        records.push((rec.key, rec.response));
                        good_len = offset + len;
                    }
                    Err(_) if line.iter().all(u8::is_ascii_whitespace) => good_len = offset + len,
                    Err(_) if is_last => torn = true,
                    Err(e) => {
                        tracing::warn!(path = %path.display(), error = %e, "skipping corrupt cache record");
                        good_len = offset + len;
                    }
                }
                offset += len;
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let actual = file.metadata().map_err(io_err)?.len();
        if torn || good_len < actual {
            file.set_len(good_len.min(actual)).map_err(io_err)?;
        } else if good_len > actual {
            // last record is intact but lacks its newline
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(ResponseCache {
            path,
            records,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Records present when the file was opened, in file order.
    pub fn records(&self) -> &[(String, String)] {
        &self.records
    }

    pub(super) fn append(
        &self,
        key: &str,
        model: &str,
        response: &str,
        created_at: u64,
    ) -> Result<(), GatewayError> {
        let mut line = serde_json::to_string(&Record {
            key: key.to_string(),
            model: model.to_string(),
            response: response.to_string(),
            created_at,
        })
        .map_err(|e| GatewayError::Cache(e.to_string()))?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.flush().map_err(io_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.append("k1", "m", "one", 0).unwrap();
            cache.append("k2", "m", "two", 0).unwrap();
        }
        let intact = std::fs::metadata(&path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"k3\",\"mod").unwrap();
        drop(f);

        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.records().len(), 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), intact);
        cache.append("k3", "m", "three", 0).unwrap();
        drop(cache);
        let cache = ResponseCache::open(&path).unwrap();
        let keys: Vec<&str> = cache.records().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["k1", "k2", "k3"]);
    }

    #[test]
    fn corrupt_middle_record_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"key\":\"a\",\"model\":\"m\",\"response\":\"x\",\"created_at\":1}\nnot json\n{\"key\":\"b\",\"model\":\"m\",\"response\":\"y\",\"created_at\":1}\n",
        )
        .unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.records().len(), 2);
    }
}
