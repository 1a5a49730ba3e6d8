//! On-disk layout of raw datasets and of the preprocessed image cache.
//!
//! Raw datasets are `<root>/<class>/<image>`, or `<root>/{train,test}/<class>/<image>`
//! when the dataset prescribes its partition. The cache mirrors that tree with
//! canvas-sized PNGs and records everything in `manifest.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::{preprocess_image, PreprocessConfig};
use super::split::{DatasetIndex, ImageEntry, Part};
use crate::image::ImageU8;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub class: String,
    /// Relative to the dataset root.
    pub source: String,
    /// Relative to the cache directory.
    pub cached: String,
    /// SHA-256 of the source file bytes.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheFailure {
    pub source: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub dataset: String,
    pub preprocess: PreprocessConfig,
    pub classes: Vec<String>,
    pub entries: Vec<CacheEntry>,
    #[serde(default)]
    pub failures: Vec<CacheFailure>,
}

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub manifest: CacheManifest,
    pub written: usize,
    pub skipped: usize,
    /// Classes left without a single usable image.
    pub empty_classes: Vec<String>,
}

impl PreprocessReport {
    pub fn class_counts(&self) -> Vec<(String, usize)> {
        self.manifest
            .classes
            .iter()
            .map(|c| (c.clone(), self.manifest.entries.iter().filter(|e| &e.class == c).count()))
            .collect()
    }
}

struct RawFile {
    class: String,
    relative: PathBuf,
    part: Option<Part>,
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_fixed_layout(root: &Path) -> bool {
    root.join("train").is_dir() && root.join("test").is_dir()
}

/// Lists `(class, relative path, part)` for every image under `root`.
fn scan(root: &Path) -> Result<(Vec<String>, Vec<RawFile>)> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory")));
    }
    let parts: Vec<(Option<Part>, PathBuf)> = if is_fixed_layout(root) {
        vec![(Some(Part::Train), root.join("train")), (Some(Part::Test), root.join("test"))]
    } else {
        vec![(None, root.to_path_buf())]
    };
    let mut classes = BTreeSet::new();
    let mut files = Vec::new();
    for (part, base) in parts {
        for class_dir in sorted_dirs(&base)? {
            let class = file_name(&class_dir);
            classes.insert(class.clone());
            for img in sorted_images(&class_dir)? {
                let relative = img.strip_prefix(root).expect("scanned below root").to_path_buf();
                files.push(RawFile {
                    class: class.clone(),
                    relative,
                    part,
                });
            }
        }
    }
    Ok((classes.into_iter().collect(), files))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_name(root: &Path) -> String {
    root.canonicalize()
        .ok()
        .as_deref()
        .map(file_name)
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "dataset".into())
}

pub fn read_manifest(cache_dir: &Path) -> Result<CacheManifest> {
    let path = cache_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Parameter(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Preprocesses every image under `root` into `out`. Images whose checksum and
/// preprocessing parameters match the existing manifest are not rewritten.
/// Unreadable or blank images are reported in the manifest, not fatal.
pub fn preprocess_tree(root: &Path, out: &Path, config: &PreprocessConfig) -> Result<PreprocessReport> {
    let (classes, files) = scan(root)?;
    let previous = read_manifest(out).ok().filter(|m| m.preprocess == *config);

    let mut entries = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    let (mut written, mut skipped) = (0, 0);
    for file in files {
        let source_path = root.join(&file.relative);
        let source = file.relative.to_string_lossy().replace('\\', "/");
        let bytes = match fs::read(&source_path) {
            Ok(b) => b,
            Err(e) => {
                failures.push(CacheFailure { source, reason: e.to_string() });
                continue;
            }
        };
        let checksum = sha256_hex(&bytes);
        let cached = Path::new(&source).with_extension("png").to_string_lossy().into_owned();
        let entry = CacheEntry {
            class: file.class,
            source: source.clone(),
            cached: cached.clone(),
            checksum,
            part: file.part,
        };
        let unchanged = previous
            .as_ref()
            .is_some_and(|m| m.entries.iter().any(|e| *e == entry))
            && out.join(&cached).is_file();
        if unchanged {
            skipped += 1;
            entries.push(entry);
            continue;
        }
        let processed = ImageU8::load(&source_path).and_then(|raw| preprocess_image(&raw, config));
        match processed {
            Ok(img) => {
                let target = out.join(&cached);
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                img.save(&target)?;
                written += 1;
                entries.push(entry);
            }
            Err(e) => failures.push(CacheFailure { source, reason: e.to_string() }),
        }
    }

    let empty_classes = classes
        .iter()
        .filter(|c| !entries.iter().any(|e| &e.class == *c))
        .cloned()
        .collect();
    let manifest = CacheManifest {
        version: MANIFEST_VERSION,
        dataset: dataset_name(root),
        preprocess: *config,
        classes,
        entries,
        failures,
    };
    write_manifest_if_changed(out, &manifest)?;
    Ok(PreprocessReport {
        manifest,
        written,
        skipped,
        empty_classes,
    })
}

fn write_manifest_if_changed(out: &Path, manifest: &CacheManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    if fs::read_to_string(&path).is_ok_and(|old| old == text) {
        return Ok(());
    }
    let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, &text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// A loaded cache: the index plus every preprocessed image, aligned with
/// `index.entries`.
#[derive(Debug, Clone)]
pub struct CachedDataset {
    pub index: DatasetIndex,
    pub images: Vec<ImageU8>,
    pub manifest: CacheManifest,
}

pub fn load_cache(cache_dir: &Path) -> Result<CachedDataset> {
    let manifest = read_manifest(cache_dir)?;
    let canvas = manifest.preprocess.canvas();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut images = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let class = manifest
            .classes
            .iter()
            .position(|c| c == &e.class)
            .ok_or_else(|| Error::Parameter(format!("manifest entry '{}' has unknown class '{}'", e.source, e.class)))?;
        let img = ImageU8::load(&cache_dir.join(&e.cached))?;
        if img.width() != canvas || img.height() != canvas {
            return Err(Error::Dimension(format!(
                "cached image '{}' is {}x{}, expected {canvas}x{canvas}",
                e.cached,
                img.width(),
                img.height()
            )));
        }
        images.push(img);
        entries.push(ImageEntry {
            class,
            path: e.cached.clone(),
            part: e.part,
        });
    }
    let index = DatasetIndex::new(manifest.dataset.clone(), manifest.classes.clone(), entries)?;
    Ok(CachedDataset {
        index,
        images,
        manifest,
    })
}
