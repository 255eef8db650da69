//! Paired RGB / target-band dataset ingestion, batching and synthetic data.
//!
//! Supported layouts under a dataset root:
//!
//! * `paired-subdirs`: `rgb/*.png|jpg` next to `nir/*.png|jpg` (or `lwir/`), matched by file stem.
//! * `file-list`: a `pairs.tsv` file with one `rgb_path<TAB>target_path<TAB>id` per line. Relative
//!   paths resolve against the file's directory. A `#modality=lwir` line switches the modality.
//!
//! Either layout may carry `split.txt` (`<id> train|test` per line, unlisted ids are train) and
//! `exclude.txt` (one id per line, dropped before anything else).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::seeded_rng;

pub const FILE_LIST_NAME: &str = "pairs.tsv";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Nir,
    Lwir,
}

impl Modality {
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Nir => "nir",
            Modality::Lwir => "lwir",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    #[default]
    PairedSubdirs,
    FileList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    #[default]
    None,
    /// Random horizontal flip applied identically to both images of a pair.
    Hflip,
}

/// A planar float image, channel-major (`C x H x W`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }

    /// Builds an image from one element of an `N x C x H x W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let data = t
            .get(index)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self::new(c, h, w, data))
    }

    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, self.plane(c).to_vec())
                    .expect("plane size matches");
            // Triangle filtering widens its support when shrinking, so this is anti-aliased bilinear.
            let out =
                image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
            data.extend(out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Image::new(self.channels, height, width, data)
    }

    fn hflip(&self) -> Image {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Image::new(self.channels, self.height, self.width, data)
    }

    /// Quantizes to 8 bits and writes a grayscale (1 channel) or RGB (3 channel) PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let n = self.height * self.width;
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| quant(v)).collect())
                .expect("size")
                .save(path),
            3 => {
                let mut raw = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        raw.push(quant(self.data[c * n + i]));
                    }
                }
                image::RgbImage::from_raw(w, h, raw).expect("size").save(path)
            }
            c => return Err(Error::Shape(format!("cannot save {c}-channel image"))),
        };
        res.map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A co-registered RGB input and single-band target.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub rgb: Image,
    pub target: Image,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub target: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by id.
    pub entries: Vec<PairEntry>,
    pub modality: Modality,
    /// `(height, width)` of the first RGB image on disk.
    pub resolution: (usize, usize),
    /// File names present on only one side of a paired-subdirs layout.
    pub unmatched: Vec<String>,
    pub excluded: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn read_lines(path: &Path) -> Result<Option<Vec<String>>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s.lines().map(|l| l.trim().to_string()).collect())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate id `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn load_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.exists() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let (base, mut entries, modality, unmatched) = match layout {
        Layout::PairedSubdirs => paired_subdirs(root)?,
        Layout::FileList => file_list(root)?,
    };

    let excluded: HashSet<String> = read_lines(&base.join("exclude.txt"))?
        .unwrap_or_default()
        .into_iter()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    entries.retain(|e| !excluded.contains(&e.id));

    if let Some(lines) = read_lines(&base.join("split.txt"))? {
        let mut splits = HashMap::new();
        for (lineno, line) in lines.iter().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Dataset(format!("split.txt:{}: expected `<id> train|test`", lineno + 1)));
            };
            let split = match tag {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Dataset(format!(
                        "split.txt:{}: unknown split `{other}`",
                        lineno + 1
                    )))
                }
            };
            splits.insert(id.to_string(), split);
        }
        for e in &mut entries {
            if let Some(&s) = splits.get(&e.id) {
                e.split = s;
            }
        }
    }

    if !unmatched.is_empty() {
        log::warn!(
            "{} unmatched file(s) under {}: {}",
            unmatched.len(),
            root.display(),
            unmatched.join(", ")
        );
    }
    if entries.is_empty() {
        return Err(Error::NoPairs {
            root: root.to_path_buf(),
            unmatched,
        });
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
        for p in [&e.rgb, &e.target] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let first = &entries[0].rgb;
    let (w, h) = image::image_dimensions(first).map_err(|source| Error::Decode {
        path: first.clone(),
        source,
    })?;
    let mut excluded: Vec<String> = excluded.into_iter().collect();
    excluded.sort();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        modality,
        resolution: (h as usize, w as usize),
        unmatched,
        excluded,
    })
}

type Listing = (PathBuf, Vec<PairEntry>, Modality, Vec<String>);

fn paired_subdirs(root: &Path) -> Result<Listing> {
    let rgb_dir = root.join("rgb");
    if !rgb_dir.is_dir() {
        return Err(Error::MissingFile(rgb_dir));
    }
    let modality = [Modality::Nir, Modality::Lwir]
        .into_iter()
        .find(|m| root.join(m.dir_name()).is_dir())
        .ok_or_else(|| Error::MissingFile(root.join("nir")))?;
    let target_dir = root.join(modality.dir_name());
    let rgb = list_images(&rgb_dir)?;
    let target = list_images(&target_dir)?;

    let mut entries = Vec::new();
    let mut unmatched = Vec::new();
    for (id, path) in &rgb {
        match target.get(id) {
            Some(t) => entries.push(PairEntry {
                id: id.clone(),
                rgb: path.clone(),
                target: t.clone(),
                split: Split::Train,
            }),
            None => unmatched.push(format!("rgb/{}", file_name(path))),
        }
    }
    for (id, path) in &target {
        if !rgb.contains_key(id) {
            unmatched.push(format!("{}/{}", modality.dir_name(), file_name(path)));
        }
    }
    Ok((root.to_path_buf(), entries, modality, unmatched))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn file_list(root: &Path) -> Result<Listing> {
    let list = if root.is_dir() {
        root.join(FILE_LIST_NAME)
    } else {
        root.to_path_buf()
    };
    let base = list.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let mut modality = Modality::Nir;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            match comment.trim() {
                "modality=lwir" => modality = Modality::Lwir,
                "modality=nir" => modality = Modality::Nir,
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rgb, target, id] = fields.as_slice() else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected 3 tab-separated fields, found {}",
                list.display(),
                lineno + 1,
                fields.len()
            )));
        };
        entries.push(PairEntry {
            id: id.to_string(),
            rgb: base.join(rgb),
            target: base.join(target),
            split: Split::Train,
        });
    }
    Ok((base, entries, modality, Vec::new()))
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn rgb_from_dynamic(img: &image::DynamicImage) -> Image {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

/// Collapses a stored target to one band.
///
/// Three-channel files are expected to hold replicated gray values; when channels differ by more
/// than one intensity step the average is used and a warning is logged.
pub fn target_from_dynamic(img: &image::DynamicImage, path: &Path) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() <= 2 {
        let gray = img.to_luma8();
        let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        return Image::new(1, h, w, data);
    }
    let rgb = img.to_rgb8();
    let equal = rgb.pixels().all(|p| {
        let (lo, hi) = (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]));
        hi - lo <= 1
    });
    if !equal {
        log::warn!(
            "{}: target channels differ, averaging to one band",
            path.display()
        );
    }
    let data = rgb
        .pixels()
        .map(|p| {
            if equal {
                p[0] as f32 / 255.0
            } else {
                (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0)
            }
        })
        .collect();
    Image::new(1, h, w, data)
}

/// Reads an RGB image from disk into `[0, 1]`, resized to `(height, width)`.
pub fn load_rgb(path: &Path, resize: (usize, usize)) -> Result<Image> {
    Ok(rgb_from_dynamic(&decode(path)?).resize(resize.0, resize.1))
}

/// Reads a single-band image from disk into `[0, 1]` at its stored size.
pub fn load_target(path: &Path) -> Result<Image> {
    Ok(target_from_dynamic(&decode(path)?, path))
}

pub fn load_pair(entry: &PairEntry, resize: (usize, usize)) -> Result<ImagePair> {
    let rgb = rgb_from_dynamic(&decode(&entry.rgb)?);
    let target = load_target(&entry.target)?;
    if (rgb.height, rgb.width) != (target.height, target.width) {
        return Err(Error::Shape(format!(
            "pair `{}`: rgb is {}x{}, target is {}x{}",
            entry.id, rgb.height, rgb.width, target.height, target.width
        )));
    }
    Ok(ImagePair {
        id: entry.id.clone(),
        rgb: rgb.resize(resize.0, resize.1),
        target: target.resize(resize.0, resize.1),
        split: entry.split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seed: u64,
    /// `(height, width)`
    pub resize: (usize, usize),
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 1,
            seed: 0,
            resize: (256, 256),
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Spec("batch size must be at least 1".into()));
        }
        let (h, w) = self.resize;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Spec(format!(
                "resize target {h}x{w} must be positive and divisible by 8"
            )));
        }
        Ok(())
    }
}

/// The order in which one epoch visits a split of `n` items; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Stream = epoch. Augmentation draws use streams with the top bit set.
    let mut rng = seeded_rng(seed, epoch);
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B x 3 x H x W`
    pub rgb: Tensor,
    /// `B x 1 x H x W`
    pub target: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[ImagePair], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let rgb: Vec<Tensor> = pairs
            .iter()
            .map(|p| p.rgb.to_tensor(dtype))
            .collect::<Result<_>>()?;
        let target: Vec<Tensor> = pairs
            .iter()
            .map(|p| p.target.to_tensor(dtype))
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            rgb: Tensor::cat(&rgb, 0)?,
            target: Tensor::cat(&target, 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Loads pairs for training, optionally keeping decoded images in memory.
#[derive(Debug)]
pub struct PairLoader {
    resize: (usize, usize),
    cache: Option<HashMap<String, ImagePair>>,
}

impl PairLoader {
    pub fn new(resize: (usize, usize), cache: bool) -> Self {
        Self {
            resize,
            cache: cache.then(HashMap::new),
        }
    }

    pub fn load(&mut self, entry: &PairEntry) -> Result<ImagePair> {
        match &mut self.cache {
            None => load_pair(entry, self.resize),
            Some(cache) => {
                if let Some(p) = cache.get(&entry.id) {
                    return Ok(p.clone());
                }
                let p = load_pair(entry, self.resize)?;
                cache.insert(entry.id.clone(), p.clone());
                Ok(p)
            }
        }
    }
}

/// Batches of one epoch over a split. The final short batch is emitted.
pub struct BatchIter<'a> {
    entries: Vec<&'a PairEntry>,
    order: Vec<usize>,
    pos: usize,
    spec: BatchSpec,
    epoch: u64,
    augment: Augment,
    loader: &'a mut PairLoader,
    dtype: DType,
}

impl<'a> BatchIter<'a> {
    pub fn num_batches(&self) -> usize {
        self.entries.len().div_ceil(self.spec.batch_size)
    }

    /// Ids of the epoch in visiting order.
    pub fn ids(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.entries[i].id.as_str()).collect()
    }

    fn flip_drawn(&self, id: &str) -> bool {
        // Independent of batch composition: keyed by (seed, epoch, id).
        let mut key = self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (1 << 63);
        for b in id.bytes() {
            key = key.rotate_left(5) ^ b as u64;
        }
        seeded_rng(self.spec.seed, key).random::<bool>()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.spec.batch_size).min(self.order.len());
        let picks: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut pairs = Vec::with_capacity(picks.len());
        for i in picks {
            let entry = self.entries[i];
            let mut pair = match self.loader.load(entry) {
                Ok(p) => p,
                Err(e) => return Some(Err(e)),
            };
            if self.augment == Augment::Hflip && self.flip_drawn(&entry.id) {
                pair.rgb = pair.rgb.hflip();
                pair.target = pair.target.hflip();
            }
            pairs.push(pair);
        }
        Some(Batch::from_pairs(&pairs, self.dtype))
    }
}

pub fn iter_batches<'a>(
    manifest: &'a DatasetManifest,
    spec: BatchSpec,
    split: Split,
    epoch: u64,
    loader: &'a mut PairLoader,
) -> Result<BatchIter<'a>> {
    iter_batches_with(manifest, spec, split, epoch, loader, Augment::None, DType::F32)
}

pub fn iter_batches_with<'a>(
    manifest: &'a DatasetManifest,
    spec: BatchSpec,
    split: Split,
    epoch: u64,
    loader: &'a mut PairLoader,
    augment: Augment,
    dtype: DType,
) -> Result<BatchIter<'a>> {
    spec.validate()?;
    let entries: Vec<&PairEntry> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    if spec.batch_size > entries.len() {
        log::warn!(
            "batch size {} exceeds split size {}; emitting one short batch",
            spec.batch_size,
            entries.len()
        );
    }
    let order = epoch_order(entries.len(), spec.seed, epoch);
    Ok(BatchIter {
        entries,
        order,
        pos: 0,
        spec,
        epoch,
        augment,
        loader,
        dtype,
    })
}

/// The analytic RGB to gray mapping behind the synthetic dataset: Rec.601 luminance weights
/// applied to the rotated channel order (G, B, R).
pub fn synthetic_target_value(r: f32, g: f32, b: f32) -> f32 {
    0.299 * g + 0.587 * b + 0.114 * r
}

fn smooth_field(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f32> {
    const WAVES: usize = 4;
    let waves: Vec<(f32, f32, f32, f32)> = (0..WAVES)
        .map(|_| {
            let amp = rng.random_range(0.5f32..1.0);
            let fx = rng.random_range(-5.0f32..5.0);
            let fy = rng.random_range(-5.0f32..5.0);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            (amp, fx, fy, phase)
        })
        .collect();
    let total: f32 = waves.iter().map(|w| w.0).sum();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let s: f32 = waves
                .iter()
                .map(|&(a, fx, fy, ph)| a * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            out.push((0.5 + 0.45 * s / total).clamp(0.0, 1.0));
        }
    }
    out
}

/// Writes `n` synthetic pairs under `root` in the paired-subdirs layout and loads them back.
pub fn make_synthetic_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    resolution: (usize, usize),
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Spec("synthetic dataset needs at least one pair".into()));
    }
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Spec("synthetic resolution must be positive".into()));
    }
    let rgb_dir = root.join("rgb");
    let nir_dir = root.join("nir");
    for d in [&rgb_dir, &nir_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..n {
        let mut rng = seeded_rng(seed, i as u64);
        let planes: Vec<Vec<u8>> = (0..3)
            .map(|_| {
                smooth_field(&mut rng, h, w)
                    .into_iter()
                    .map(|v| (v * 255.0).round() as u8)
                    .collect()
            })
            .collect();
        let mut rgb = Vec::with_capacity(3 * h * w);
        let mut gray = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let (r, g, b) = (planes[0][p], planes[1][p], planes[2][p]);
            rgb.extend([r, g, b]);
            let t = synthetic_target_value(r as f32, g as f32, b as f32);
            gray.push(t.round().clamp(0.0, 255.0) as u8);
        }
        let name = format!("pair_{i:04}.png");
        let save_err = |path: PathBuf| move |source| Error::Decode { path, source };
        let p = rgb_dir.join(&name);
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("size")
            .save(&p)
            .map_err(save_err(p.clone()))?;
        let p = nir_dir.join(&name);
        image::GrayImage::from_raw(w as u32, h as u32, gray)
            .expect("size")
            .save(&p)
            .map_err(save_err(p.clone()))?;
    }
    load_manifest(root, Layout::PairedSubdirs)
}
