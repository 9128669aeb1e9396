//! File emission. Every file carries the configuration hash; files are
//! written only after all computation has finished.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Files accumulated during a run and flushed together at the end.
pub struct Outputs {
    dir: PathBuf,
    hash: String,
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: PathBuf, hash: String) -> Self {
        Self {
            dir,
            hash,
            files: Vec::new(),
        }
    }

    /// Adds a CSV with the hash as a leading comment line.
    pub fn csv(&mut self, name: &str, body: String) {
        let text = format!("# config_sha256: {}\n{body}", self.hash);
        self.files.push((name.to_string(), text));
    }

    /// Adds a JSON document; `value` must serialize to an object, which gets
    /// a `config_sha256` field.
    pub fn json(&mut self, name: &str, value: &impl Serialize) {
        let mut v = serde_json::to_value(value).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config_sha256".into(), self.hash.clone().into());
        }
        let text = serde_json::to_string_pretty(&v).expect("report serializes") + "\n";
        self.files.push((name.to_string(), text));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.0.clone()).collect()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn flush(self) -> Result<(), Failure> {
        fs::create_dir_all(&self.dir).map_err(|source| Failure::Io {
            path: self.dir.clone(),
            source,
        })?;
        for (name, text) in self.files {
            let path = self.dir.join(name);
            fs::write(&path, text).map_err(|source| Failure::Io { path, source })?;
        }
        Ok(())
    }
}

/// CSV `i,theta_1..theta_N`, one row per measurement.
pub fn theta_csv(theta: &DMatrix<f64>) -> String {
    let n = theta.nrows();
    let mut s = String::from("i");
    for j in 1..=n {
        s.push_str(&format!(",theta_{j}"));
    }
    s.push('\n');
    for i in 0..n {
        s.push_str(&(i + 1).to_string());
        for j in 0..n {
            s.push_str(&format!(",{:?}", theta[(i, j)]));
        }
        s.push('\n');
    }
    s
}
