//! Versioned checkpoint container: a UTF-8 header (format version, module
//! name, shapes, seed, config hash) followed by the named parameter arrays
//! as raw little-endian f32.
//!
//! ```text
//! rtify-checkpoint v1
//! module = backbone
//! seed = 42
//! config_hash = 5f8a...
//! meta epochs = 100
//! array w_in 8 64
//! array b 64
//! binary
//! <w_in bytes><b bytes>
//! ```

use crate::diffcore::Array;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "rtify-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: String, supported: u32 },
    #[error("checkpoint has no array named `{0}`")]
    MissingArray(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub module: String,
    pub seed: u64,
    pub config_hash: String,
    pub meta: Vec<(String, String)>,
    arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new(module: &str, seed: u64, config_hash: &str) -> Self {
        Checkpoint {
            module: module.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, array: Array) {
        assert!(
            !name.contains(char::is_whitespace),
            "array name must not contain whitespace: {name:?}"
        );
        self.arrays.push((name.to_string(), array));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn arrays(&self) -> &[(String, Array)] {
        &self.arrays
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut header = String::new();
        header.push_str(&format!("{MAGIC} v{CHECKPOINT_VERSION}\n"));
        header.push_str(&format!("module = {}\n", self.module));
        header.push_str(&format!("seed = {}\n", self.seed));
        header.push_str(&format!("config_hash = {}\n", self.config_hash));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} = {v}\n"));
        }
        for (name, arr) in &self.arrays {
            header.push_str(&format!("array {name}"));
            for d in arr.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("binary\n");

        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(header.as_bytes()).map_err(io_err)?;
        for (_, arr) in &self.arrays {
            let mut buf = Vec::with_capacity(arr.numel() * 4);
            for v in arr.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;

        // split header (UTF-8 lines) from the binary payload
        let marker = b"binary\n";
        let header_end = find_subsequence(&bytes, marker)
            .ok_or_else(|| CheckpointError::Format("missing `binary` marker".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| CheckpointError::Format("header is not valid UTF-8".into()))?;
        let mut payload = &bytes[header_end + marker.len()..];

        let mut lines = header.lines();
        let first = lines
            .next()
            .ok_or_else(|| CheckpointError::Format("empty header".into()))?;
        let expected = format!("{MAGIC} v{CHECKPOINT_VERSION}");
        if first != expected {
            return Err(CheckpointError::Version {
                found: first.to_string(),
                supported: CHECKPOINT_VERSION,
            });
        }

        let mut ckpt = Checkpoint::new("", 0, "");
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("module = ") {
                ckpt.module = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("seed = ") {
                ckpt.seed = rest
                    .parse()
                    .map_err(|_| CheckpointError::Format(format!("bad seed line: {line}")))?;
            } else if let Some(rest) = line.strip_prefix("config_hash = ") {
                ckpt.config_hash = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| CheckpointError::Format(format!("bad meta line: {line}")))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("array ") {
                let mut toks = rest.split_whitespace();
                let name = toks
                    .next()
                    .ok_or_else(|| CheckpointError::Format("array line without name".into()))?;
                let dims: Vec<usize> = toks
                    .map(|t| {
                        t.parse()
                            .map_err(|_| CheckpointError::Format(format!("bad dim in: {line}")))
                    })
                    .collect::<Result<_, _>>()?;
                specs.push((name.to_string(), dims));
            } else if !line.trim().is_empty() {
                return Err(CheckpointError::Format(format!(
                    "unrecognized header line: {line}"
                )));
            }
        }

        for (name, dims) in specs {
            let numel: usize = dims.iter().product();
            let nbytes = numel * 4;
            if payload.len() < nbytes {
                return Err(CheckpointError::Format(format!(
                    "payload truncated while reading `{name}`"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in payload[..nbytes].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            payload = &payload[nbytes..];
            let arr = Array::new(dims, data)
                .map_err(|e| CheckpointError::Format(format!("array `{name}`: {e}")))?;
            ckpt.arrays.push((name, arr));
        }
        if !payload.is_empty() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after last array",
                payload.len()
            )));
        }
        Ok(ckpt)
    }
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new("rtify", 7, "deadbeef");
        ck.set_meta("epochs", 12);
        ck.push("w", Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        ck.push("theta", Array::scalar(0.75));
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.module, "rtify");
        assert_eq!(back.seed, 7);
        assert_eq!(back.config_hash, "deadbeef");
        assert_eq!(back.meta_value("epochs"), Some("12"));
        assert_eq!(back.get("w").unwrap().shape(), &[2, 3]);
        assert_eq!(back.get("w").unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(back.get("theta").unwrap().item(), 0.75);
        assert!(matches!(
            back.get("nope"),
            Err(CheckpointError::MissingArray(_))
        ));
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"rtify-checkpoint v99\nbinary\n").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Version { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        std::fs::write(
            &path,
            b"rtify-checkpoint v1\nmodule = x\nseed = 0\nconfig_hash = h\narray w 4\nbinary\n\x00\x00",
        )
        .unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Format(_))
        ));
    }
}
