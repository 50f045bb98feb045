//! Record directories and subject manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use vitalflow::record::{read_record, WaveformRecord};

use crate::failure::{fail, CmdResult, WithCode, EXIT_IO, EXIT_SCHEMA};

pub const RECORD_EXT: &str = "vsr";

/// Files in `dir` with extension `ext`, sorted by name.
pub fn files_with_ext(dir: &Path, ext: &str) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .code(EXIT_IO)?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("cannot list {}", dir.display())).code(EXIT_IO)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_record(path: &Path) -> CmdResult<WaveformRecord> {
    read_record(path)
        .with_context(|| format!("cannot read record {}", path.display()))
        .code(EXIT_IO)
}

/// All records of `dir`, keyed by subject ID.
pub fn load_dir(dir: &Path) -> CmdResult<BTreeMap<String, WaveformRecord>> {
    let mut out = BTreeMap::new();
    for path in files_with_ext(dir, RECORD_EXT)? {
        let rec = load_record(&path)?;
        if out.contains_key(&rec.subject_id) {
            return fail(
                EXIT_SCHEMA,
                format!("subject '{}' appears twice in {}", rec.subject_id, dir.display()),
            );
        }
        out.insert(rec.subject_id.clone(), rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> CmdResult<Vec<String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest {}", path.display()))
        .code(EXIT_IO)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> CmdResult {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .code(EXIT_IO)
}

pub fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .code(EXIT_IO)
}

/// Looks up `ids` in `records`; a missing subject is an I/O failure that
/// lists every absent ID.
pub fn select<'a>(
    records: &'a BTreeMap<String, WaveformRecord>,
    ids: &[String],
    dir: &Path,
) -> CmdResult<Vec<&'a WaveformRecord>> {
    let missing: Vec<&str> = ids.iter().filter(|id| !records.contains_key(*id)).map(String::as_str).collect();
    if !missing.is_empty() {
        return fail(
            EXIT_IO,
            format!("no record in {} for subject(s): {}", dir.display(), missing.join(", ")),
        );
    }
    Ok(ids.iter().map(|id| &records[id]).collect())
}
