//! Loading a data directory.
//!
//! A directory may hold event files (`.evb1`, `.evb`, `.aedat`), window files
//! written by `evmae windows` and patch files written by `evmae patches`, in
//! any mix. An optional `labels.csv` with header `file,class` assigns a class
//! to each file; every window of a file inherits its class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evmae::event::{parse_aedat31, parse_binary_events};
use evmae::patch::generate_patch_sets;
use evmae::sampler::sample_stream;
use evmae::{EventStream, PatchConfig, PatchSet, PointSet, SamplerConfig};

use crate::error::CliError;

pub const LABELS_FILE: &str = "labels.csv";
const PATCH_HEADER: &str = "patch_id,";

#[derive(Debug, Clone)]
pub enum Content {
    Window(PointSet),
    Patches(PatchSet),
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub file: String,
    /// Sample id used by the held-out split; a hash of the file name.
    pub id: u64,
    pub label: Option<usize>,
    pub content: Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl Split {
    pub fn keeps(self, id: u64) -> bool {
        match self {
            Split::All => true,
            Split::Heldout => evmae::train::is_held_out(id),
            Split::Train => !evmae::train::is_held_out(id),
        }
    }
}

/// 64-bit FNV-1a.
pub fn file_id(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn read_events(path: &Path) -> Result<EventStream, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let parsed = match extension(path).as_str() {
        "aedat" => parse_aedat31(&bytes),
        _ => parse_binary_events(&bytes),
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn read_labels(dir: &Path) -> Result<Option<BTreeMap<String, usize>>, CliError> {
    let path = dir.join(LABELS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || CliError::Data(format!("{}: line {}: expected `file,class`", path.display(), i + 1));
        let (file, class) = line.split_once(',').ok_or_else(bad)?;
        let class = class.trim().parse().map_err(|_| bad())?;
        labels.insert(file.trim().to_string(), class);
    }
    Ok(Some(labels))
}

fn data_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if p.is_file() && name != LABELS_FILE && matches!(extension(&p).as_str(), "evb1" | "evb" | "aedat" | "csv") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Every window or patch set in `dir`, in file-name order.
pub fn load_dir(dir: &Path, sampler: &SamplerConfig) -> Result<Vec<Entry>, CliError> {
    let labels = read_labels(dir)?;
    let mut out = Vec::new();
    for path in data_files(dir)? {
        let file = path.file_name().unwrap().to_string_lossy().into_owned();
        let label = match &labels {
            Some(map) => Some(
                *map.get(&file)
                    .ok_or_else(|| CliError::Data(format!("{file} has no entry in {LABELS_FILE}")))?,
            ),
            None => None,
        };
        let entry = |content| Entry {
            file: file.clone(),
            id: file_id(&file),
            label,
            content,
        };
        if extension(&path) == "csv" {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let content = if text.starts_with(PATCH_HEADER) {
                Content::Patches(PatchSet::read_csv(&text).map_err(|e| CliError::Data(format!("{file}: {e}")))?)
            } else {
                Content::Window(PointSet::read_csv(&text).map_err(|e| CliError::Data(format!("{file}: {e}")))?)
            };
            out.push(entry(content));
        } else {
            let stream = read_events(&path)?;
            for w in sample_stream(&stream, sampler).map_err(|e| CliError::Data(format!("{file}: {e}")))? {
                out.push(entry(Content::Window(w)));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no windows found", dir.display())));
    }
    Ok(out)
}

/// Patch sets of all entries. Windows are patched with `cfg`, window `i`
/// (counting windows only) seeded by `window_rng(cfg.seed, i)`; patch files
/// pass through and must match `cfg.k`.
pub fn patch_entries(entries: &[Entry], cfg: &PatchConfig) -> Result<Vec<PatchSet>, CliError> {
    let windows: Vec<PointSet> = entries
        .iter()
        .filter_map(|e| match &e.content {
            Content::Window(w) => Some(w.clone()),
            Content::Patches(_) => None,
        })
        .collect();
    let mut patched = generate_patch_sets(&windows, cfg)?.into_iter();
    entries
        .iter()
        .map(|e| match &e.content {
            Content::Window(_) => Ok(patched.next().expect("one patch set per window")),
            Content::Patches(p) if p.k == cfg.k => Ok(p.clone()),
            Content::Patches(p) => Err(CliError::Data(format!("{}: patches have k = {}, expected {}", e.file, p.k, cfg.k))),
        })
        .collect()
}

/// Windows of all entries; patch files cannot be re-patched.
pub fn windows_only(entries: &[Entry]) -> Result<Vec<PointSet>, CliError> {
    entries
        .iter()
        .map(|e| match &e.content {
            Content::Window(w) => Ok(w.clone()),
            Content::Patches(_) => Err(CliError::Data(format!("{}: expected events or windows, found patches", e.file))),
        })
        .collect()
}

/// Labels of all entries, or an error naming the first unlabeled file.
pub fn labels_of(entries: &[Entry]) -> Result<Vec<usize>, CliError> {
    entries
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| CliError::Data(format!("{}: no label (missing {LABELS_FILE}?)", e.file)))
        })
        .collect()
}

pub fn select(entries: Vec<Entry>, split: Split) -> Vec<Entry> {
    entries.into_iter().filter(|e| split.keeps(e.id)).collect()
}
