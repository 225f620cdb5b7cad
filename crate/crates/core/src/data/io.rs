use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureMode};
use crate::compute::Tensor2D;
use crate::error::{Error, Result};
use crate::model::InteractionMatrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"SEMF";
pub const FEATURE_VERSION: u32 = 1;

/// Dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub interactions: PathBuf,
    /// One item id per line; fixes the row order of every feature file.
    pub items: PathBuf,
    pub modes: Vec<ModeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub name: String,
    pub path: PathBuf,
    pub dim: usize,
}

/// Writes `"SEMF" | u32 version | u32 rows | u32 cols | rows·cols f32`,
/// little-endian, row-major.
pub fn write_feature_matrix(path: &Path, t: &Tensor2D<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.data().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_matrix(path: &Path) -> Result<Tensor2D<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic, expected SEMF".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("size overflow".into()))?;
    if bytes.len() - 16 != expected {
        return Err(bad(format!(
            "{rows}x{cols} header needs {expected} data bytes, found {}",
            bytes.len() - 16
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor2D::from_vec(rows, cols, data).map_err(|e| bad(e.to_string()))
}

/// Reads one id per line. Blank lines and duplicates are errors.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let id = line.trim_end_matches('\r');
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if id.is_empty() {
            return Err(parse("empty id".into()));
        }
        if let Some(prev) = seen.insert(id.to_string(), n + 1) {
            return Err(parse(format!("duplicate id `{id}` (first on line {prev})")));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn write_id_list(path: &Path, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for id in ids {
        writeln!(w, "{}", id.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `user_id<TAB>item_id` lines, returning `(user, item, line)` triples.
/// Blank lines are skipped.
pub fn read_interactions_file(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => {
                out.push((u.to_string(), i.to_string(), n + 1))
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: "expected `user_id<TAB>item_id`".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_interactions_file(
    path: &Path,
    pairs: impl IntoIterator<Item = (usize, usize)>,
    user_ids: &[String],
    item_ids: &[String],
) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (u, i) in pairs {
        writeln!(w, "{}\t{}", user_ids[u], item_ids[i]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a dataset from its manifest. Any malformed input yields an error;
/// no partial dataset is ever returned.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let item_ids = read_id_list(&resolve(base, &manifest.items))?;
    let item_index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    if manifest.modes.is_empty() {
        return Err(Error::Format {
            path: manifest_path.to_path_buf(),
            msg: "manifest lists no feature modes".into(),
        });
    }
    let mut modes = Vec::with_capacity(manifest.modes.len());
    for entry in &manifest.modes {
        let features = read_feature_matrix(&resolve(base, &entry.path))?;
        if features.rows() != item_ids.len() {
            return Err(Error::DimensionMismatch {
                mode: entry.name.clone(),
                detail: format!(
                    "{} feature rows but {} items listed",
                    features.rows(),
                    item_ids.len()
                ),
            });
        }
        if features.cols() != entry.dim {
            return Err(Error::DimensionMismatch {
                mode: entry.name.clone(),
                detail: format!(
                    "{} feature columns but manifest says {}",
                    features.cols(),
                    entry.dim
                ),
            });
        }
        modes.push(FeatureMode {
            name: entry.name.clone(),
            features,
        });
    }

    let inter_path = resolve(base, &manifest.interactions);
    let rows = read_interactions_file(&inter_path)?;
    let mut user_ids: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut pairs = Vec::with_capacity(rows.len());
    for (u, i, line) in rows {
        let item = *item_index.get(i.as_str()).ok_or_else(|| Error::Parse {
            path: inter_path.clone(),
            line,
            msg: format!("unknown item id `{i}`"),
        })?;
        let next = user_ids.len();
        let user = *user_index.entry(u.clone()).or_insert_with(|| {
            user_ids.push(u);
            next
        });
        pairs.push((user, item));
    }
    let (interactions, dupes) = InteractionMatrix::from_pairs(user_ids.len(), item_ids.len(), pairs)?;
    if dupes > 0 {
        log::warn!("{}: collapsed {dupes} duplicate interactions", inter_path.display());
    }
    let mut ds = Dataset::new(manifest.name, interactions, modes, user_ids, item_ids)?;
    ds.duplicates_collapsed = dupes;
    Ok(ds)
}

/// Writes `manifest.json`, `items.txt`, `interactions.tsv` and one `.semf`
/// file per mode into `dir`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_id_list(&dir.join("items.txt"), &dataset.item_ids)?;
    write_interactions_file(
        &dir.join("interactions.tsv"),
        dataset.interactions.pairs(),
        &dataset.user_ids,
        &dataset.item_ids,
    )?;
    let mut modes = Vec::new();
    for m in &dataset.modes {
        let file = PathBuf::from(format!("{}.semf", m.name));
        write_feature_matrix(&dir.join(&file), &m.features)?;
        modes.push(ModeEntry {
            name: m.name.clone(),
            path: file,
            dim: m.features.cols(),
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        interactions: "interactions.tsv".into(),
        items: "items.txt".into(),
        modes,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
