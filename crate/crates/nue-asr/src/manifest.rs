//! JSON Lines manifests: one `{"audio": ..., "text": ...}` object per line,
//! audio paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, IoContext, Result};

/// A manifest line as stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub audio: String,
    pub text: String,
}

/// A loaded manifest line with its audio path resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub audio: PathBuf,
    pub text: String,
}

/// Loads and resolves a manifest. Every line must be a record and every
/// audio file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<Entry>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| AsrError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let audio = base.join(&rec.audio);
        if !audio.is_file() {
            return Err(err(format!("audio file {} not found", audio.display())));
        }
        out.push(Entry {
            audio,
            text: rec.text,
        });
    }
    Ok(out)
}

pub fn render_manifest(records: &[Record]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, render_manifest(records)).at(path)
}
