use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm;
use super::synth::regenerate;
use super::{check_pixels, Dataset, LabeledImage, TrafficClass};
use crate::error::{Error, Result};
use crate::micronet::Tensor;

/// Target geometry for images read from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
        }
    }
}

impl LoadOptions {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [height, width, channels] => Ok(Self {
                height,
                width,
                channels,
            }),
            _ => Err(Error::Validation(format!("not an image shape: {shape:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<SkippedFile>,
}

fn is_pnm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
}

/// Reads and decodes one image file, resizing it to `opts`.
pub fn read_image(path: &Path, opts: &LoadOptions) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let px = pnm::decode(&bytes)?;
    let px = pnm::resize_nearest(&px, opts.height, opts.width, opts.channels);
    check_pixels(&px)?;
    Ok(px)
}

/// Loads a `root/<ClassName>/*.p?m` corpus.
///
/// Classes are read in label order, files in lexicographic order. Unreadable
/// files are logged, skipped and listed in the report.
pub fn load_dir(root: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let layout_err = |reason: String| Error::CorpusLayout {
        path: root.to_path_buf(),
        reason,
    };
    if !root.is_dir() {
        return Err(layout_err("not a directory".into()));
    }
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for class in TrafficClass::ALL {
        let dir = root.join(class.name());
        if !dir.is_dir() {
            return Err(layout_err(format!("missing class directory {}", class.name())));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_pnm(p))
            .collect();
        files.sort();
        for path in files {
            match read_image(&path, opts) {
                Ok(pixels) => {
                    let id = path
                        .strip_prefix(root)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .replace('\\', "/");
                    items.push(LabeledImage {
                        pixels,
                        label: class,
                        source_id: id,
                    });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(SkippedFile {
                        path,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(LoadReport {
        dataset: Dataset::new(items),
        skipped,
    })
}

/// Materializes a dataset as `root/<ClassName>/<nnnnn>.pgm` (or `.ppm` for colour).
/// Returns the written paths in dataset order.
pub fn write_dir(d: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut next = [0usize; 4];
    for class in TrafficClass::ALL {
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut written = Vec::with_capacity(d.len());
    for item in d {
        let ext = if item.channels() == 3 { "ppm" } else { "pgm" };
        let n = &mut next[item.label.index()];
        let path = root
            .join(item.label.name())
            .join(format!("{:05}.{ext}", *n));
        *n += 1;
        fs::write(&path, pnm::encode(&item.pixels)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Recovers the pixels behind a `source_id`: synthetic descriptors are
/// regenerated, anything else is read as a path relative to `base`.
pub fn resolve_source(source_id: &str, base: &Path, opts: &LoadOptions) -> Result<Tensor<f64>> {
    if let Some(regenerated) = regenerate(source_id) {
        let px = regenerated?.pixels;
        return Ok(pnm::resize_nearest(&px, opts.height, opts.width, opts.channels));
    }
    let rel = Path::new(source_id);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Validation(format!("source id {source_id:?} escapes the data directory")));
    }
    read_image(&base.join(rel), opts)
}
