//! Class-per-directory image corpora, stratified splits and patch batches.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::imaging::{degrade, load_image, ImageError, ImageF32, Provenance, SamplePair};

/// Size of the complete land-use corpus (21 classes of 100 images).
pub const FULL_CORPUS_IMAGES: usize = 2100;
pub const FULL_CORPUS_CLASSES: usize = 21;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),

    #[error("no usable images under {0}")]
    NoImages(PathBuf),

    #[error("class `{class}` has {count} image(s); at least 2 are needed to split")]
    ClassTooSmall { class: String, count: usize },

    #[error("{path}:{line}: {reason}")]
    SplitFile { path: PathBuf, line: usize, reason: String },

    #[error("split `{0}` is empty")]
    EmptySplit(Split),

    #[error("patch size {patch_hr} is invalid at scale {scale}: {reason}")]
    BadPatch { patch_hr: usize, scale: usize, reason: String },

    #[error("{path}: image {h}x{w} is smaller than the {patch}x{patch} training patch")]
    PatchTooLarge { path: PathBuf, h: usize, w: usize, patch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub class: String,
    pub path: PathBuf,
}

impl DatasetEntry {
    /// `<class>/<filename>`, the key used in split files.
    pub fn key(&self) -> String {
        let file = self.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}/{}", self.class, file)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices grouped by class, in class-name order.
    pub fn by_class(&self) -> Vec<(String, Vec<usize>)> {
        self.class_names
            .iter()
            .map(|c| {
                let idx = self.entries.iter().enumerate().filter(|(_, e)| &e.class == c).map(|(i, _)| i);
                (c.clone(), idx.collect())
            })
            .collect()
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let rd = std::fs::read_dir(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Indexes `root/<class>/<image>` in lexicographic order.
///
/// Files whose header cannot be parsed are skipped with a warning.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut entries = Vec::new();
    let mut class_names = Vec::new();
    for class_dir in sorted_dir(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut found = false;
        for file in sorted_dir(&class_dir)? {
            if !file.is_file() || !has_image_extension(&file) {
                continue;
            }
            match image::image_dimensions(&file) {
                Ok(_) => {
                    entries.push(DatasetEntry { class: class.clone(), path: file });
                    found = true;
                }
                Err(e) => warn!("skipping {}: {e}", file.display()),
            }
        }
        if found {
            class_names.push(class);
        }
    }
    if entries.is_empty() {
        return Err(DatasetError::NoImages(root.to_path_buf()));
    }
    if entries.len() != FULL_CORPUS_IMAGES || class_names.len() != FULL_CORPUS_CLASSES {
        warn!(
            "partial corpus: {} images in {} classes (full corpus is {FULL_CORPUS_IMAGES} in {FULL_CORPUS_CLASSES})",
            entries.len(),
            class_names.len()
        );
    }
    Ok(DatasetIndex { root: root.to_path_buf(), entries, class_names })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

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

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `(train, val, test)` counts for a class of `n` images.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let test = n / 2;
    let rest = n - test;
    let mut val = (rest as f64 * 0.2).round() as usize;
    if rest >= 5 {
        val = val.max(1);
    }
    (rest - val, val, test)
}

/// Seeded per-class shuffle: half to test, a fifth of the rest to val.
pub fn make_splits(index: &DatasetIndex, seed: u64) -> Result<SplitSpec, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SplitSpec { seed, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (class, mut members) in index.by_class() {
        if members.len() < 2 {
            return Err(DatasetError::ClassTooSmall { class, count: members.len() });
        }
        members.shuffle(&mut rng);
        let (_, val, test) = split_counts(members.len());
        spec.test.extend_from_slice(&members[..test]);
        spec.val.extend_from_slice(&members[test..test + val]);
        spec.train.extend_from_slice(&members[test + val..]);
    }
    spec.train.sort_unstable();
    spec.val.sort_unstable();
    spec.test.sort_unstable();
    Ok(spec)
}

impl SplitSpec {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Split-file text, one `<split>\t<class>/<file>` line per entry.
    pub fn to_text(&self, index: &DatasetIndex) -> String {
        let mut labels = vec![None; index.len()];
        for split in Split::ALL {
            for &i in self.indices(split) {
                labels[i] = Some(split);
            }
        }
        let mut out = format!("# seed {}\n", self.seed);
        for (entry, label) in index.entries.iter().zip(labels) {
            if let Some(split) = label {
                out.push_str(&format!("{split}\t{}\n", entry.key()));
            }
        }
        out
    }

    pub fn write(&self, path: &Path, index: &DatasetIndex) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_text(index))
            .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    pub fn parse(text: &str, path: &Path, index: &DatasetIndex) -> Result<Self, DatasetError> {
        let lookup: HashMap<String, usize> =
            index.entries.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
        let mut spec = SplitSpec { seed: 0, train: Vec::new(), val: Vec::new(), test: Vec::new() };
        let err = |line: usize, reason: String| DatasetError::SplitFile { path: path.to_path_buf(), line, reason };
        let mut seen = vec![false; index.len()];
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if let Some(seed) = line.strip_prefix("# seed ") {
                spec.seed = seed.trim().parse().map_err(|_| err(line_no, format!("bad seed `{seed}`")))?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, key) = line.split_once('\t').ok_or_else(|| err(line_no, "expected `<split>\\t<class>/<file>`".into()))?;
            let split: Split = label.parse().map_err(|e| err(line_no, e))?;
            let &i = lookup.get(key).ok_or_else(|| err(line_no, format!("`{key}` is not in the dataset")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(err(line_no, format!("`{key}` listed twice")));
            }
            match split {
                Split::Train => spec.train.push(i),
                Split::Val => spec.val.push(i),
                Split::Test => spec.test.push(i),
            }
        }
        spec.train.sort_unstable();
        spec.val.sort_unstable();
        spec.test.sort_unstable();
        Ok(spec)
    }

    pub fn read(path: &Path, index: &DatasetIndex) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path, index)
    }
}

/// Checks the training patch against the scale and the token patch size.
pub fn validate_patch(patch_hr: usize, scale: usize, token_patch: usize) -> Result<(), DatasetError> {
    let bad = |reason: String| DatasetError::BadPatch { patch_hr, scale, reason };
    if patch_hr == 0 || scale == 0 {
        return Err(bad("must be positive".into()));
    }
    if patch_hr % scale != 0 {
        return Err(bad(format!("not divisible by the scale {scale}")));
    }
    if patch_hr % (token_patch * scale) != 0 {
        return Err(bad(format!("not divisible by token patch x scale = {}", token_patch * scale)));
    }
    Ok(())
}

/// Source of training batches.
pub trait BatchSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<SamplePair>, DatasetError>;
}

/// Random HR crops from one split, degraded on the fly.
pub struct PatchSampler {
    index: Arc<DatasetIndex>,
    members: Vec<usize>,
    scale: usize,
    patch_hr: usize,
    batch: usize,
    augment: bool,
    cache: HashMap<usize, Arc<ImageF32>>,
}

impl PatchSampler {
    pub fn new(
        index: Arc<DatasetIndex>,
        members: &[usize],
        scale: usize,
        patch_hr: usize,
        batch: usize,
    ) -> Result<Self, DatasetError> {
        if members.is_empty() {
            return Err(DatasetError::EmptySplit(Split::Train));
        }
        if patch_hr % scale != 0 {
            return Err(DatasetError::BadPatch { patch_hr, scale, reason: "not divisible by the scale".into() });
        }
        Ok(Self {
            index,
            members: members.to_vec(),
            scale,
            patch_hr,
            batch,
            augment: false,
            cache: HashMap::new(),
        })
    }

    /// Random flips and transposes of each crop.
    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    fn image(&mut self, i: usize) -> Result<Arc<ImageF32>, DatasetError> {
        if let Some(img) = self.cache.get(&i) {
            return Ok(img.clone());
        }
        let img = Arc::new(load_image(&self.index.entries[i].path)?);
        self.cache.insert(i, img.clone());
        Ok(img)
    }
}

fn augment(img: &ImageF32, code: u8) -> ImageF32 {
    let (c, h, w) = img.shape();
    let transpose = code & 4 != 0 && h == w;
    let (flip_y, flip_x) = (code & 1 != 0, code & 2 != 0);
    let mut data = Vec::with_capacity(img.data.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if transpose { (x, y) } else { (y, x) };
                let sy = if flip_y { h - 1 - sy } else { sy };
                let sx = if flip_x { w - 1 - sx } else { sx };
                data.push(img.at(ch, sy, sx));
            }
        }
    }
    ImageF32 { data, ..img.clone() }
}

impl BatchSource for PatchSampler {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<SamplePair>, DatasetError> {
        let p = self.patch_hr;
        let mut out = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let i = self.members[rng.random_range(0..self.members.len())];
            let img = self.image(i)?;
            if img.height < p || img.width < p {
                return Err(DatasetError::PatchTooLarge {
                    path: self.index.entries[i].path.clone(),
                    h: img.height,
                    w: img.width,
                    patch: p,
                });
            }
            let top = rng.random_range(0..=img.height - p);
            let left = rng.random_range(0..=img.width - p);
            let mut crop = img.crop(top, left, p, p);
            if self.augment {
                crop = augment(&crop, rng.random_range(0..8u8));
            }
            let mut pair = degrade(&crop, self.scale)?;
            pair.provenance =
                Some(Provenance { image_path: self.index.entries[i].path.clone(), crop_origin: (top, left) });
            out.push(pair);
        }
        Ok(out)
    }
}

/// Replays the same pairs every call, for memorization runs.
pub struct FixedPairs(pub Vec<SamplePair>);

impl BatchSource for FixedPairs {
    fn next_batch(&mut self, _rng: &mut ChaCha8Rng) -> Result<Vec<SamplePair>, DatasetError> {
        Ok(self.0.clone())
    }
}
