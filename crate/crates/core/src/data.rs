//! Dataset ingestion, preprocessing, splitting and stratified subsampling.
//!
//! A [`Dataset`] is a list of `(id, label)` items backed by a shared image
//! source; images are decoded, resized and normalised lazily when a batch is
//! materialised. Subsets share the source, so splits and subsamples are cheap
//! index lists and disjointness is checked by item id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::par;

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `x / 255`.
    #[default]
    Unit,
    /// `(x / 255 - mean) / std` with the ImageNet channel statistics the
    /// EfficientNet weights were trained with.
    Imagenet,
}

impl Normalization {
    const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const STD: [f32; 3] = [0.229, 0.224, 0.225];

    pub fn apply(self, channel: usize, byte: u8) -> f32 {
        let v = byte as f32 / 255.0;
        match self {
            Normalization::Unit => v,
            Normalization::Imagenet => (v - Self::MEAN[channel]) / Self::STD[channel],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural geometric patterns, one pattern family per class.
    Synthetic {
        per_class: usize,
        /// Class `c` draws pattern `(c + pattern_offset) % 6`.
        #[serde(default)]
        pattern_offset: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_native")]
        native_size: usize,
    },
    /// `<root>/<class_name>/<image files>`.
    Folder { root: PathBuf },
    /// CIFAR-100 binary release (`train.bin`, `test.bin`).
    Cifar100 { root: PathBuf },
    /// Food-101 release layout (`meta/*.txt`, `images/`).
    Food101 { root: PathBuf },
}

fn default_noise() -> f32 {
    0.08
}

fn default_native() -> usize {
    32
}

fn default_image_size() -> (usize, usize) {
    (224, 224)
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DatasetSource,
    pub num_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    /// Fraction of the training data held out for validation when the
    /// source has no validation split.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Test fraction for sources without a canonical test split.
    #[serde(default = "default_val_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// Random horizontal flips on training batches.
    #[serde(default)]
    pub augment_flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

trait ImageSource: Send + Sync {
    /// `None` for an unreadable or corrupt image.
    fn load(&self, key: usize) -> Option<RgbImage>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub label: usize,
    #[serde(skip)]
    key: usize,
}

#[derive(Clone)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
    pub image_size: (usize, usize),
    pub normalization: Normalization,
    /// Training batches get random horizontal flips.
    pub augment_flip: bool,
    source: Arc<dyn ImageSource>,
    skipped: Arc<AtomicUsize>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("name", &self.name)
            .field("classes", &self.class_names.len())
            .field("items", &self.items.len())
            .finish()
    }
}

/// One materialised batch.
#[derive(Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Items dropped because their image could not be decoded.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for it in &self.items {
            *m.entry(it.label).or_default() += 1;
        }
        m
    }

    /// Images dropped as unreadable so far, across every subset sharing the
    /// source.
    pub fn skipped_images(&self) -> usize {
        self.skipped.load(Ordering::Relaxed)
    }

    pub fn chw(&self) -> [usize; 3] {
        [3, self.image_size.0, self.image_size.1]
    }

    /// A dataset with no items sharing this one's source and settings.
    pub fn empty_like(other: &Dataset) -> Dataset {
        other.subset(&[])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Decodes, resizes and normalises one item to CHW.
    pub fn load_tensor(&self, index: usize, flip: bool) -> Option<Vec<f32>> {
        let img = self.source.load(self.items[index].key)?;
        let (h, w) = self.image_size;
        let img = if img.width() as usize != w || img.height() as usize != h {
            imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        } else {
            img
        };
        let mut out = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let p = img.get_pixel(sx as u32, y as u32);
                for c in 0..3 {
                    out[c * h * w + y * w + x] = self.normalization.apply(c, p[c]);
                }
            }
        }
        Some(out)
    }

    /// Materialises the items at `indices` as one batch, in order. Decoding
    /// runs in parallel; unreadable images are skipped and counted.
    pub fn batch(&self, indices: &[usize], flips: Option<&[bool]>) -> Batch {
        let loaded = par::map_range(indices.len(), |k| {
            let flip = flips.is_some_and(|f| f[k]);
            self.load_tensor(indices[k], flip)
        });
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut skipped = 0;
        for (k, t) in loaded.into_iter().enumerate() {
            match t {
                Some(t) => {
                    data.extend(t);
                    labels.push(self.items[indices[k]].label);
                }
                None => {
                    skipped += 1;
                    log::warn!("skipping unreadable image {}", self.items[indices[k]].id);
                }
            }
        }
        self.skipped.fetch_add(skipped, Ordering::Relaxed);
        let [c, h, w] = self.chw();
        Batch {
            x: Tensor::from_vec([labels.len(), c, h, w], data),
            labels,
            skipped,
        }
    }

    /// Index order for one epoch: a permutation drawn from `(seed, epoch)`
    /// when shuffling, dataset order otherwise.
    pub fn epoch_order(&self, seed: Option<(u64, u64)>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some((seed, epoch)) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
        }
        order
    }

    /// Batches over `order`, `batch_size` at a time.
    pub fn batches<'a>(
        &'a self,
        order: &'a [usize],
        batch_size: usize,
        flip_seed: Option<u64>,
    ) -> impl Iterator<Item = Batch> + 'a {
        order.chunks(batch_size.max(1)).enumerate().map(move |(b, idx)| {
            let flips: Option<Vec<bool>> = flip_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(s, b as u64));
                idx.iter().map(|_| r.random::<bool>()).collect()
            });
            self.batch(idx, flips.as_deref())
        })
    }

    pub fn manifest(&self, split: Split, seed: u64) -> Manifest {
        Manifest {
            dataset: self.name.clone(),
            split,
            seed,
            class_names: self.class_names.clone(),
            items: self.items.clone(),
        }
    }
}

/// Audit record of which items landed in a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub split: Split,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads every split of `spec`. Splits the source lacks are carved out
/// stratified and seeded.
pub fn load_splits(spec: &DatasetSpec, seed: u64) -> Result<DatasetSplits> {
    if spec.num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let (full_train, test) = match &spec.source {
        DatasetSource::Synthetic { .. } | DatasetSource::Folder { .. } => {
            let all = open_source(spec, None)?;
            let (rest, test) = make_holdout(&all, spec.test_fraction, derive_seed(seed, 0x7e57))?;
            (rest, test)
        }
        DatasetSource::Cifar100 { .. } | DatasetSource::Food101 { .. } => (
            open_source(spec, Some(Split::Train))?,
            open_source(spec, Some(Split::Test))?,
        ),
    };
    let (train, val) = make_validation_split(&full_train, spec.val_fraction, derive_seed(seed, 0x7a1))?;
    Ok(DatasetSplits { train, val, test })
}

/// Loads one split of `spec`.
pub fn load_dataset(spec: &DatasetSpec, split: Split, seed: u64) -> Result<Dataset> {
    Ok(load_splits(spec, seed)?.get(split).clone())
}

fn finish(spec: &DatasetSpec, class_names: Vec<String>, items: Vec<Item>, source: Arc<dyn ImageSource>) -> Result<Dataset> {
    if class_names.len() != spec.num_classes {
        return Err(Error::Dataset(format!(
            "{}: declared {} classes, found {}",
            spec.name,
            spec.num_classes,
            class_names.len()
        )));
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("{}: no images found", spec.name)));
    }
    Ok(Dataset {
        name: spec.name.clone(),
        class_names,
        items,
        image_size: spec.image_size,
        normalization: spec.normalization,
        augment_flip: spec.augment_flip,
        source,
        skipped: Arc::new(AtomicUsize::new(0)),
    })
}

fn open_source(spec: &DatasetSpec, split: Option<Split>) -> Result<Dataset> {
    match &spec.source {
        DatasetSource::Synthetic {
            per_class,
            pattern_offset,
            noise,
            seed,
            native_size,
        } => {
            let gen = SyntheticSource {
                num_classes: spec.num_classes,
                pattern_offset: *pattern_offset,
                noise: *noise,
                seed: *seed,
                size: *native_size,
            };
            let mut items = Vec::new();
            for c in 0..spec.num_classes {
                for k in 0..*per_class {
                    let key = c * per_class + k;
                    items.push(Item {
                        id: format!("{}/{c}/{k}", spec.name),
                        label: c,
                        key,
                    });
                }
            }
            let names = (0..spec.num_classes)
                .map(|c| PATTERNS[(c + pattern_offset) % PATTERNS.len()].to_string())
                .collect();
            let per_class = *per_class;
            finish(spec, names, items, Arc::new(SyntheticWithStride { gen, per_class }))
        }
        DatasetSource::Folder { root } => {
            let (names, files) = scan_folder(root)?;
            let items = files
                .iter()
                .enumerate()
                .map(|(key, (label, path))| Item {
                    id: path.strip_prefix(root).unwrap_or(path).display().to_string(),
                    label: *label,
                    key,
                })
                .collect();
            let paths = files.into_iter().map(|(_, p)| p).collect();
            finish(spec, names, items, Arc::new(FileSource { paths }))
        }
        DatasetSource::Food101 { root } => {
            let classes_txt = root.join("meta").join("classes.txt");
            let names: Vec<String> = read_lines(&classes_txt)?;
            let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
            let list = match split {
                Some(Split::Test) => "test.txt",
                _ => "train.txt",
            };
            let mut items = Vec::new();
            let mut paths = Vec::new();
            for line in read_lines(&root.join("meta").join(list))? {
                let class = line.split('/').next().unwrap_or_default();
                let label = *index
                    .get(class)
                    .ok_or_else(|| Error::Dataset(format!("unknown Food-101 class {class:?}")))?;
                items.push(Item {
                    id: line.clone(),
                    label,
                    key: paths.len(),
                });
                paths.push(root.join("images").join(format!("{line}.jpg")));
            }
            finish(spec, names, items, Arc::new(FileSource { paths }))
        }
        DatasetSource::Cifar100 { root } => {
            let file = match split {
                Some(Split::Test) => "test.bin",
                _ => "train.bin",
            };
            let path = root.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % CIFAR_RECORD != 0 {
                return Err(Error::Dataset(format!("{}: truncated CIFAR-100 record", path.display())));
            }
            let n = bytes.len() / CIFAR_RECORD;
            let items = (0..n)
                .map(|k| Item {
                    id: format!("{file}#{k}"),
                    label: bytes[k * CIFAR_RECORD + 1] as usize,
                    key: k,
                })
                .collect();
            let names = read_lines(&root.join("fine_label_names.txt"))
                .unwrap_or_else(|_| (0..100).map(|i| format!("class_{i}")).collect());
            finish(spec, names, items, Arc::new(CifarSource { bytes }))
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn scan_folder(root: &Path) -> Result<(Vec<String>, Vec<(usize, PathBuf)>)> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut names = Vec::new();
    let mut files = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut imgs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
            })
            .collect();
        imgs.sort();
        files.extend(imgs.into_iter().map(|p| (label, p)));
    }
    Ok((names, files))
}

struct FileSource {
    paths: Vec<PathBuf>,
}

impl ImageSource for FileSource {
    fn load(&self, key: usize) -> Option<RgbImage> {
        image::open(&self.paths[key]).ok().map(|i| i.to_rgb8())
    }
}

const CIFAR_RECORD: usize = 2 + 3072;

struct CifarSource {
    bytes: Vec<u8>,
}

impl ImageSource for CifarSource {
    fn load(&self, key: usize) -> Option<RgbImage> {
        let rec = &self.bytes[key * CIFAR_RECORD + 2..(key + 1) * CIFAR_RECORD];
        let mut img = RgbImage::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let p = y * 32 + x;
                img.put_pixel(x as u32, y as u32, image::Rgb([rec[p], rec[1024 + p], rec[2048 + p]]));
            }
        }
        Some(img)
    }
}

pub const PATTERNS: [&str; 6] = [
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkerboard",
    "disc",
    "ring",
];

/// Procedural pattern images. Everything except the pattern family (period,
/// phase, position, colours, noise) is drawn per image and independent of
/// the class.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub num_classes: usize,
    pub pattern_offset: usize,
    pub noise: f32,
    pub seed: u64,
    pub size: usize,
}

impl SyntheticSource {
    pub fn render(&self, class: usize, index: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, ((class as u64) << 32) | index as u64));
        let pattern = (class + self.pattern_offset) % PATTERNS.len();
        let n = self.size as f32;
        let period = rng.random_range(4.0f32..8.0);
        let phase = rng.random_range(0.0f32..period);
        let cx = rng.random_range(0.35f32..0.65) * n;
        let cy = rng.random_range(0.35f32..0.65) * n;
        let radius = rng.random_range(0.2f32..0.32) * n;
        let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55f32..1.0));
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..0.4));
        let mut img = RgbImage::new(self.size as u32, self.size as u32);
        for y in 0..self.size {
            for x in 0..self.size {
                let (xf, yf) = (x as f32, y as f32);
                let stripe = |t: f32| ((t + phase) / period).floor() as i64 % 2 == 0;
                let on = match pattern {
                    0 => stripe(yf),
                    1 => stripe(xf),
                    2 => stripe((xf + yf) / std::f32::consts::SQRT_2),
                    3 => stripe(xf) ^ stripe(yf),
                    4 => (xf - cx).hypot(yf - cy) < radius,
                    _ => ((xf - cx).hypot(yf - cy) - radius).abs() < 2.0,
                };
                let base = if on { fg } else { bg };
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let e: f32 = rng.sample(StandardNormal);
                    ((base[c] + self.noise * e).clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }
}

struct SyntheticWithStride {
    gen: SyntheticSource,
    per_class: usize,
}

impl ImageSource for SyntheticWithStride {
    fn load(&self, key: usize) -> Option<RgbImage> {
        Some(self.gen.render(key / self.per_class, key % self.per_class))
    }
}

/// Per-class index lists in dataset order.
fn class_indices(ds: &Dataset) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in ds.items.iter().enumerate() {
        m.entry(it.label).or_default().push(i);
    }
    m
}

/// Largest-remainder allocation of `n` across classes proportional to
/// their sizes.
fn proportional_quotas(counts: &BTreeMap<usize, Vec<usize>>, n: usize, total: usize) -> BTreeMap<usize, usize> {
    let mut quotas = BTreeMap::new();
    let mut rems = Vec::new();
    let mut assigned = 0;
    for (c, idx) in counts {
        let exact = n as f64 * idx.len() as f64 / total as f64;
        let q = exact.floor() as usize;
        quotas.insert(*c, q);
        assigned += q;
        rems.push((exact - q as f64, *c));
    }
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, c) in rems.into_iter().take(n - assigned) {
        *quotas.get_mut(&c).expect("known class") += 1;
    }
    quotas
}

/// `draws` pairwise-disjoint stratified subsamples of size `n`.
///
/// Each class's indices are shuffled once with a generator derived from
/// `(seed, class)`; draw `k` takes the `k`-th window of the class quota from
/// that permutation, so draws never overlap.
pub fn stratified_draws(ds: &Dataset, n: usize, seed: u64, draws: usize) -> Result<Vec<Dataset>> {
    let by_class = class_indices(ds);
    if n > ds.len() {
        return Err(Error::Stratification(format!(
            "requested {n} samples from a dataset of {}",
            ds.len()
        )));
    }
    if n < by_class.len() {
        return Err(Error::Stratification(format!(
            "sample size {n} is smaller than the {} classes present",
            by_class.len()
        )));
    }
    let quotas = proportional_quotas(&by_class, n, ds.len());
    let mut perms = BTreeMap::new();
    for (c, idx) in &by_class {
        let mut p = idx.clone();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, *c as u64)));
        perms.insert(*c, p);
    }
    (0..draws)
        .map(|k| {
            let mut chosen = Vec::with_capacity(n);
            for (c, perm) in &perms {
                let q = quotas[c];
                if (k + 1) * q > perm.len() {
                    return Err(Error::Stratification(format!(
                        "class {c} has {} samples; {} disjoint draws of {q} do not fit",
                        perm.len(),
                        k + 1
                    )));
                }
                chosen.extend_from_slice(&perm[k * q..(k + 1) * q]);
            }
            chosen.sort_unstable();
            Ok(ds.subset(&chosen))
        })
        .collect()
}

/// Stratified subsample of size `n`; class proportions preserved to within
/// one sample per class.
pub fn stratified_subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(stratified_draws(ds, n, seed, 1)?.remove(0))
}

/// Stratified held-out part: `round(fraction * class_size)` per class,
/// leaving at least one training sample in every class.
fn make_holdout(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (c, idx) in class_indices(ds) {
        let mut p = idx.clone();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64)));
        let k = ((fraction * p.len() as f64).round() as usize).min(p.len().saturating_sub(1));
        held.extend_from_slice(&p[..k]);
        keep.extend_from_slice(&p[k..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((ds.subset(&keep), ds.subset(&held)))
}

/// Carves a stratified validation split off `train`.
pub fn make_validation_split(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 0.5), got {fraction}"
        )));
    }
    make_holdout(train, fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_spec(classes: usize, per_class: usize) -> DatasetSpec {
        DatasetSpec {
            name: "toy".into(),
            source: DatasetSource::Synthetic {
                per_class,
                pattern_offset: 0,
                noise: 0.05,
                seed: 1,
                native_size: 16,
            },
            num_classes: classes,
            image_size: (16, 16),
            val_fraction: 0.1,
            test_fraction: 0.1,
            normalization: Normalization::Unit,
            augment_flip: false,
        }
    }

    fn all(spec: &DatasetSpec) -> Dataset {
        open_source(spec, None).unwrap()
    }

    #[test]
    fn subsample_identity() {
        let ds = all(&synthetic_spec(3, 10));
        let s = stratified_subsample(&ds, ds.len(), 9).unwrap();
        assert_eq!(s.items, ds.items);
    }

    #[test]
    fn balanced_subsample_is_exact() {
        let ds = all(&synthetic_spec(8, 20));
        let s = stratified_subsample(&ds, 80, 3).unwrap();
        assert!(s.class_counts().values().all(|&c| c == 10));
    }

    #[test]
    fn consecutive_draws_are_disjoint() {
        let ds = all(&synthetic_spec(3, 30));
        let draws = stratified_draws(&ds, 40, 17, 2).unwrap();
        assert!(draws[0].ids().is_disjoint(&draws[1].ids()));
        // deterministic
        let again = stratified_draws(&ds, 40, 17, 2).unwrap();
        assert_eq!(draws[1].items, again[1].items);
    }

    #[test]
    fn subsample_too_small() {
        let ds = all(&synthetic_spec(4, 10));
        assert!(matches!(stratified_subsample(&ds, 3, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn validation_split_contract() {
        let ds = all(&synthetic_spec(5, 500));
        let (tr, val) = make_validation_split(&ds, 0.1, 4).unwrap();
        assert!(tr.class_counts().values().all(|&c| c == 450));
        assert!(val.class_counts().values().all(|&c| c == 50));
        let mut union: Vec<_> = tr.ids().union(&val.ids()).map(|s| s.to_string()).collect();
        union.sort();
        let mut orig: Vec<_> = ds.ids().iter().map(|s| s.to_string()).collect();
        orig.sort();
        assert_eq!(union, orig);
        let (tr2, _) = make_validation_split(&ds, 0.1, 4).unwrap();
        assert_eq!(tr.items, tr2.items);
        assert!(make_validation_split(&ds, 0.6, 4).is_err());
        assert!(make_validation_split(&ds, 0.0, 4).is_err());
    }

    #[test]
    fn splits_disjoint_and_shaped() {
        let spec = synthetic_spec(3, 40);
        let s = load_splits(&spec, 5).unwrap();
        assert!(s.train.ids().is_disjoint(&s.val.ids()));
        assert!(s.train.ids().is_disjoint(&s.test.ids()));
        assert!(s.val.ids().is_disjoint(&s.test.ids()));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 120);
        let b = s.train.batch(&[0, 1], None);
        assert_eq!(b.x.shape, [2, 3, 16, 16]);
    }

    #[test]
    fn class_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b"] {
            fs::create_dir(dir.path().join(c)).unwrap();
            RgbImage::new(4, 4).save(dir.path().join(c).join("x.png")).unwrap();
        }
        let spec = DatasetSpec {
            source: DatasetSource::Folder { root: dir.path().into() },
            num_classes: 3,
            ..synthetic_spec(3, 1)
        };
        assert!(matches!(open_source(&spec, None), Err(Error::Dataset(_))));
    }

    #[test]
    fn corrupt_images_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b"] {
            fs::create_dir(dir.path().join(c)).unwrap();
            for k in 0..3 {
                RgbImage::new(8, 8).save(dir.path().join(c).join(format!("{k}.png"))).unwrap();
            }
        }
        fs::write(dir.path().join("a").join("9.png"), b"not an image").unwrap();
        let spec = DatasetSpec {
            source: DatasetSource::Folder { root: dir.path().into() },
            num_classes: 2,
            ..synthetic_spec(2, 1)
        };
        let ds = open_source(&spec, None).unwrap();
        assert_eq!(ds.len(), 7);
        let order: Vec<usize> = (0..ds.len()).collect();
        let n: usize = ds.batches(&order, 4, None).map(|b| b.labels.len()).sum();
        assert_eq!(n, 6);
        assert_eq!(ds.skipped_images(), 1);
    }

    #[test]
    fn epoch_order_is_seeded() {
        let ds = all(&synthetic_spec(3, 10));
        assert_eq!(ds.epoch_order(Some((1, 0))), ds.epoch_order(Some((1, 0))));
        assert_ne!(ds.epoch_order(Some((1, 0))), ds.epoch_order(Some((1, 1))));
        assert_eq!(ds.epoch_order(None), (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn cifar_binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for k in 0..4u8 {
            bytes.push(0);
            bytes.push(k % 2);
            bytes.extend(std::iter::repeat_n(k * 10, 3072));
        }
        fs::write(dir.path().join("train.bin"), &bytes).unwrap();
        fs::write(dir.path().join("test.bin"), &bytes[..2 * CIFAR_RECORD]).unwrap();
        fs::write(dir.path().join("fine_label_names.txt"), "a\nb\n").unwrap();
        let spec = DatasetSpec {
            source: DatasetSource::Cifar100 { root: dir.path().into() },
            num_classes: 2,
            image_size: (32, 32),
            ..synthetic_spec(2, 1)
        };
        let train = open_source(&spec, Some(Split::Train)).unwrap();
        assert_eq!(train.labels(), vec![0, 1, 0, 1]);
        let t = train.load_tensor(3, false).unwrap();
        assert!((t[0] - 30.0 / 255.0).abs() < 1e-6);
        assert_eq!(open_source(&spec, Some(Split::Test)).unwrap().len(), 2);
    }
}
