//! Manifests, tile loading, patch sampling and class unification.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImagePatch, LabelGrid, VOID};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One tile entry; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_band_path: Option<PathBuf>,
    pub lr_label_path: PathBuf,
    pub gt_path: PathBuf,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    tiles: Vec<TileRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub tiles: Vec<TileRecord>,
    /// Directory the relative tile paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(tiles: Vec<TileRecord>, root: PathBuf) -> Self {
        Self { tiles, root }
    }

    /// Reads and validates a manifest: unique ids and existing files.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(file.tiles, root);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tiles {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Load {
                    tile: t.id.clone(),
                    reason: "duplicate tile id (splits must be disjoint)".into(),
                });
            }
            let mut paths = vec![&t.image_path, &t.lr_label_path, &t.gt_path];
            paths.extend(t.extra_band_path.as_ref());
            for p in paths {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::Load {
                        tile: t.id.clone(),
                        reason: format!("missing file {}", full.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            tiles: self.tiles.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TileRecord> {
        self.tiles.iter().filter(move |t| t.split == split)
    }

    pub fn load_tile(&self, record: &TileRecord) -> Result<Tile> {
        load_tile(record, &self.root)
    }

    /// Loads all tiles of a split in parallel, preserving manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Tile>> {
        use rayon::prelude::*;
        let records: Vec<&TileRecord> = self.split(split).collect();
        records.par_iter().map(|r| self.load_tile(r)).collect()
    }
}

/// A fully loaded tile: image scaled to `[0, 1]`, coarse labels and truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: String,
    pub image: ImagePatch,
    pub lr_label: LabelGrid,
    pub gt: LabelGrid,
}

pub fn load_tile(record: &TileRecord, root: &Path) -> Result<Tile> {
    let fail = |reason: String| Error::Load {
        tile: record.id.clone(),
        reason,
    };
    let image = io::read_image_png(
        &root.join(&record.image_path),
        record.extra_band_path.as_ref().map(|p| root.join(p)).as_deref(),
    )
    .map_err(|e| fail(e.to_string()))?;
    let lr_label =
        io::read_label_png(&root.join(&record.lr_label_path)).map_err(|e| fail(e.to_string()))?;
    let gt = io::read_label_png(&root.join(&record.gt_path)).map_err(|e| fail(e.to_string()))?;
    if lr_label.dims() != image.dims() || gt.dims() != image.dims() {
        return Err(fail(format!(
            "dimension mismatch: image {:?}, lr label {:?}, gt {:?}",
            image.dims(),
            lr_label.dims(),
            gt.dims()
        )));
    }
    Ok(Tile {
        id: record.id.clone(),
        image,
        lr_label,
        gt,
    })
}

/// A training crop: image, coarse labels and the matching truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: ImagePatch,
    pub label: LabelGrid,
    pub gt: LabelGrid,
    pub offset: (usize, usize),
}

/// Crops `patch_size × patch_size` at a uniform offset drawn from `rng`.
pub fn sample_patch_with<R: Rng>(tile: &Tile, patch_size: usize, rng: &mut R) -> Result<Patch> {
    let (h, w) = tile.image.dims();
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::Shape(format!(
            "patch {patch_size} does not fit tile `{}` of {h}x{w}",
            tile.id
        )));
    }
    let top = rng.random_range(0..=h - patch_size);
    let left = rng.random_range(0..=w - patch_size);
    Ok(Patch {
        image: tile.image.crop(top, left, patch_size, patch_size)?,
        label: tile.lr_label.crop(top, left, patch_size, patch_size)?,
        gt: tile.gt.crop(top, left, patch_size, patch_size)?,
        offset: (top, left),
    })
}

pub fn sample_patch(tile: &Tile, patch_size: usize, seed: u64) -> Result<Patch> {
    sample_patch_with(tile, patch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTarget {
    Class(u8),
    Void,
}

/// Relabeling table from source class values onto contiguous base classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    table: BTreeMap<u8, ClassTarget>,
}

impl ClassMap {
    pub fn new(entries: impl IntoIterator<Item = (u8, ClassTarget)>) -> Result<Self> {
        let table: BTreeMap<u8, ClassTarget> = entries.into_iter().collect();
        if table.contains_key(&VOID) {
            return Err(Error::Config("void (255) cannot be remapped".into()));
        }
        let mut targets: Vec<u8> = table
            .values()
            .filter_map(|t| match t {
                ClassTarget::Class(c) => Some(*c),
                ClassTarget::Void => None,
            })
            .collect();
        targets.sort_unstable();
        targets.dedup();
        if targets.iter().enumerate().any(|(i, &c)| i != c as usize) {
            return Err(Error::Config(format!(
                "class map targets must be contiguous from 0, got {targets:?}"
            )));
        }
        Ok(Self { table })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            table: (0..num_classes as u8).map(|c| (c, ClassTarget::Class(c))).collect(),
        }
    }

    pub fn num_targets(&self) -> usize {
        self.table
            .values()
            .filter_map(|t| match t {
                ClassTarget::Class(c) => Some(*c as usize + 1),
                ClassTarget::Void => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn get(&self, class: u8) -> Option<ClassTarget> {
        self.table.get(&class).copied()
    }

    /// Parses `{"0": 0, "1": 0, "7": "void"}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(raw.len());
        for (k, v) in raw {
            let src: u8 = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("class map key `{k}` is not a class index")))?;
            let target = match &v {
                serde_json::Value::String(s) if s == "void" => ClassTarget::Void,
                serde_json::Value::Number(n) => {
                    let c = n
                        .as_u64()
                        .filter(|&c| c < VOID as u64)
                        .ok_or_else(|| Error::Config(format!("bad target {n} for class {k}")))?;
                    ClassTarget::Class(c as u8)
                }
                other => {
                    return Err(Error::Config(format!("bad target {other} for class {k}")));
                }
            };
            entries.push((src, target));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Relabels every non-void pixel through `map`; void stays void.
pub fn unify_classes(label: &LabelGrid, map: &ClassMap) -> Result<LabelGrid> {
    let mut missing = Vec::new();
    let data: Vec<u8> = label
        .as_slice()
        .iter()
        .map(|&v| {
            if v == VOID {
                return VOID;
            }
            match map.get(v) {
                Some(ClassTarget::Class(c)) => c,
                Some(ClassTarget::Void) => VOID,
                None => {
                    missing.push(v);
                    VOID
                }
            }
        })
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::UnmappedClass(missing));
    }
    LabelGrid::from_vec(label.height(), label.width(), data)
}
