use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train/val/test assignment of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(s)
    }
}

/// One image's manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub layer_id: u32,
    /// Class id (>= 1) when labeled, `None` for unlabeled pool images.
    pub class_label: Option<u32>,
    pub wafer_id: String,
    pub split: Split,
}

/// Sorted set of class ids with a contiguous zero-based index mapping.
///
/// Manifest labels are arbitrary ids >= 1; the classification head and
/// confusion matrices work on dense `[0, C)` indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSet {
    ids: Vec<u32>,
}

impl ClassSet {
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let set: BTreeSet<u32> = ids.into_iter().collect();
        ClassSet {
            ids: set.into_iter().collect(),
        }
    }

    pub fn from_records(records: &[ImageRecord]) -> Self {
        Self::from_ids(records.iter().filter_map(|r| r.class_label))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Dense index of a class id.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn id_at(&self, index: usize) -> u32 {
        self.ids[index]
    }
}

/// Parsed manifest: records plus the declared class and layer sets.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub class_set: ClassSet,
    pub layers: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    path: String,
    layer: u32,
    label: Option<u32>,
    wafer: String,
    split: String,
}

fn parse_split(token: &str) -> Option<Split> {
    match token {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "unassigned" => Some(Split::Unassigned),
        _ => None,
    }
}

/// Load a JSON Lines manifest.
///
/// One record per non-empty line. Rejects malformed lines (with the line
/// number), duplicate image paths, empty wafer ids, label ids below 1 and
/// unknown split tokens.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    manifest_from_str(&text)
}

/// Parse manifest text; see [`load_manifest`].
pub fn manifest_from_str(text: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut seen_paths = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: lineno,
            msg: e.to_string(),
        })?;
        let split = parse_split(&parsed.split).ok_or_else(|| Error::Manifest {
            line: lineno,
            msg: format!(
                "unknown split token \"{}\" (expected train, val, test or unassigned)",
                parsed.split
            ),
        })?;
        if parsed.wafer.is_empty() {
            return Err(Error::Manifest {
                line: lineno,
                msg: "wafer id must be non-empty".into(),
            });
        }
        if let Some(label) = parsed.label {
            if label < 1 {
                return Err(Error::Manifest {
                    line: lineno,
                    msg: format!("class label must be >= 1, got {label}"),
                });
            }
        }
        if !seen_paths.insert(parsed.path.clone()) {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("duplicate image path \"{}\"", parsed.path),
            });
        }
        records.push(ImageRecord {
            image_path: PathBuf::from(parsed.path),
            layer_id: parsed.layer,
            class_label: parsed.label,
            wafer_id: parsed.wafer,
            split,
        });
    }
    let class_set = ClassSet::from_records(&records);
    let layers: BTreeSet<u32> = records.iter().map(|r| r.layer_id).collect();
    Ok(Manifest {
        records,
        class_set,
        layers: layers.into_iter().collect(),
    })
}

/// Write records as a JSON Lines manifest, one object per line.
pub fn save_manifest(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        let line = ManifestLine {
            path: rec.image_path.to_string_lossy().into_owned(),
            layer: rec.layer_id,
            label: rec.class_label,
            wafer: rec.wafer_id.clone(),
            split: rec.split.to_string(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}
