use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Gray level at or above which a mask pixel counts as lesion.
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    /// File stem of the image, used as the per-image key in reports.
    pub fn name(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// `(height, width)` every image and mask is resized to.
    pub resize_to: (usize, usize),
    pub mask_threshold: u8,
}

impl DatasetManifest {
    /// Parses `image<TAB>mask_or_-<TAB>split` records. Relative paths are
    /// resolved against `base_dir`; `#` starts a comment line.
    pub fn parse(text: &str, base_dir: &Path, source: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            reason,
        };
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut entries = Vec::new();
        let mut seen: HashMap<PathBuf, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(
                    line_no,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let (image, mask, split) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if image.is_empty() {
                return Err(err(line_no, "empty image path".into()));
            }
            let split = split.parse::<Split>().map_err(|e| err(line_no, e))?;
            let mask = match mask {
                "-" => None,
                "" => return Err(err(line_no, "empty mask field (use `-` for none)".into())),
                m => Some(resolve(m)),
            };
            let image = resolve(image);
            if split == Split::Train && mask.is_none() {
                return Err(err(line_no, format!("train entry {} has no mask", image.display())));
            }
            if let Some(first) = seen.insert(image.clone(), line_no) {
                return Err(err(
                    line_no,
                    format!(
                        "{} already listed on line {first}; splits must be disjoint",
                        image.display()
                    ),
                ));
            }
            entries.push(ManifestEntry { image, mask, split });
        }
        Ok(Self {
            entries,
            resize_to: (256, 256),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
        })
    }

    /// Reads and parses a manifest file, then checks that every referenced
    /// file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = Self::parse(&text, base, path)?;
        manifest.check_files()?;
        Ok(manifest)
    }

    pub fn with_resize(mut self, height: usize, width: usize) -> Self {
        self.resize_to = (height, width);
        self
    }

    pub fn with_mask_threshold(mut self, threshold: u8) -> Self {
        self.mask_threshold = threshold;
        self
    }

    /// Every image and mask path must exist.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                if !p.is_file() {
                    return Err(Error::ingestion(p, "file does not exist"));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
