//! Synthetic annular image generator and image-file I/O.
//!
//! Produces small fundus-like pictures: a dark disc on black background
//! with one bright annulus per image. The class determines the annulus
//! radius and the frequency of a sinusoidal brightness modulation along
//! the ring, so the label is carried entirely by rotation-invariant
//! annular structure — no single pixel gives it away. Each sample gets a
//! random global rotation and optional Gaussian noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::RngStream;
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;

/// Ring geometry for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// annulus radius as a fraction of the image side, in (0, 0.5]
    pub ring_radius: f64,
    /// whole number of brightness lobes around the ring (0 = unmodulated)
    pub lesion_freq: u32,
}

/// Number of samples per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub finetune_train: usize,
    pub finetune_val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { pretrain: 600, finetune_train: 150, finetune_val: 75, test: 150 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    pub noise_sigma: f64,
    pub counts: SplitCounts,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            classes: vec![
                ClassSpec { ring_radius: 0.20, lesion_freq: 0 },
                ClassSpec { ring_radius: 0.30, lesion_freq: 4 },
                ClassSpec { ring_radius: 0.40, lesion_freq: 8 },
            ],
            noise_sigma: 0.05,
            counts: SplitCounts::default(),
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!("synth: image size {} too small", self.image_size)));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("synth: need at least 2 classes".to_string()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.ring_radius > 0.0 && c.ring_radius <= 0.5) {
                return Err(Error::config(format!(
                    "synth: class {i} ring radius {} outside (0, 0.5]",
                    c.ring_radius
                )));
            }
            for (j, other) in self.classes.iter().enumerate().take(i) {
                if (c.ring_radius - other.ring_radius).abs() < 1e-9 && c.lesion_freq == other.lesion_freq
                {
                    return Err(Error::config(format!(
                        "synth: classes {j} and {i} are indistinguishable"
                    )));
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("synth: noise sigma {}", self.noise_sigma)));
        }
        let k = self.classes.len();
        for (name, n) in [
            ("finetune-train", self.counts.finetune_train),
            ("finetune-val", self.counts.finetune_val),
            ("test", self.counts.test),
        ] {
            if n < k {
                return Err(Error::config(format!(
                    "synth: {name} split has {n} samples for {k} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Images only — the pretraining interface never sees labels.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    pub images: Vec<ImageBuf>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Images with class labels in [0, K). Label reads are counted, so a
/// pipeline can assert that pretraining never touched them.
#[derive(Debug)]
pub struct LabeledSet {
    images: Vec<ImageBuf>,
    labels: Vec<usize>,
    label_reads: AtomicU64,
}

impl Clone for LabeledSet {
    fn clone(&self) -> Self {
        LabeledSet {
            images: self.images.clone(),
            labels: self.labels.clone(),
            label_reads: AtomicU64::new(self.label_reads.load(Ordering::Relaxed)),
        }
    }
}

impl LabeledSet {
    pub fn new(images: Vec<ImageBuf>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::data(format!(
                "labeled set: {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(LabeledSet { images, labels, label_reads: AtomicU64::new(0) })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageBuf] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&ImageBuf, usize) {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        (&self.images[i], self.labels[i])
    }

    /// How many times the labels have been read since construction.
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }
}

/// All four splits of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub pretrain: UnlabeledSet,
    pub finetune_train: LabeledSet,
    pub finetune_val: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneVal,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::FinetuneTrain, Split::FinetuneVal, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune-train",
            Split::FinetuneVal => "finetune-val",
            Split::Test => "test",
        }
    }
}

// Fixed palette: a reddish disc and a brighter ring, additive, chosen so
// the noiseless image never clips.
const DISC_RGB: [f64; 3] = [0.24, 0.12, 0.07];
const RING_RGB: [f64; 3] = [0.72, 0.55, 0.40];
const DISC_RADIUS_FRAC: f64 = 0.47;
const DISC_EDGE_FRAC: f64 = 0.02;
const RING_WIDTH_FRAC: f64 = 0.02;
const MODULATION_DEPTH: f64 = 0.5;

/// Noiseless closed form: for each pixel at radius r and angle θ from the
/// center,
///   disc(r)  = 1 / (1 + exp((r − 0.47·S) / (0.02·S)))
///   ring(r)  = exp(−(r − radius·S)² / (2·(0.02·S)²))
///   mod(θ)   = (1 + 0.5·cos(freq·(θ − rotation))) / 1.5
///   channel c = disc·DISC_RGB[c] + ring·mod·RING_RGB[c]
/// with S the image side and θ measured like the polar warp (y grows
/// downward, angles in degrees).
pub fn render_sample(cfg: &SynthConfig, class_id: usize, rotation_deg: f64) -> Result<ImageBuf> {
    cfg.validate()?;
    let spec = *cfg
        .classes
        .get(class_id)
        .ok_or_else(|| Error::invalid(format!("class {class_id} of {}", cfg.classes.len())))?;
    let s = cfg.image_size;
    let sf = s as f64;
    let c = (sf - 1.0) / 2.0;
    let ring_r = spec.ring_radius * sf;
    let ring_w = RING_WIDTH_FRAC * sf;
    let disc_r = DISC_RADIUS_FRAC * sf;
    let disc_w = DISC_EDGE_FRAC * sf;
    let mut img = ImageBuf::zeros(s, s, 3)?;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let r = (dx * dx + dy * dy).sqrt();
            let disc = 1.0 / (1.0 + ((r - disc_r) / disc_w).exp());
            let ring = (-((r - ring_r) * (r - ring_r)) / (2.0 * ring_w * ring_w)).exp();
            let theta = dy.atan2(dx).to_degrees();
            let phase = (spec.lesion_freq as f64) * (theta - rotation_deg).to_radians();
            let modulation = (1.0 + MODULATION_DEPTH * phase.cos()) / (1.0 + MODULATION_DEPTH);
            for ch in 0..3 {
                let v = disc * DISC_RGB[ch] + ring * modulation * RING_RGB[ch];
                img.set(x, y, ch, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(img)
}

/// One random sample: rotation drawn uniformly from [0°, 360°), then
/// pixel-wise Gaussian noise, clamped back to [0, 1].
pub fn generate_sample(cfg: &SynthConfig, class_id: usize, rng: &mut impl Rng) -> Result<ImageBuf> {
    let rotation = rng.random::<f64>() * 360.0;
    let mut img = render_sample(cfg, class_id, rotation)?;
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::config(format!("synth noise: {e}")))?;
        for v in img.data_mut() {
            *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(img)
}

fn generate_split(cfg: &SynthConfig, seed: u64, split_idx: u64, n: usize) -> Result<(Vec<ImageBuf>, Vec<usize>)> {
    let k = cfg.num_classes();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        // one RNG stream per (split, sample): parallel-safe and stable
        // under count changes elsewhere
        let mut rng = RngStream::new(seed, (split_idx << 32) | i as u64).rng();
        images.push(generate_sample(cfg, label, &mut rng)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Deterministic in (cfg, seed); splits use disjoint RNG streams and are
/// each stratified round-robin over classes (histogram within ±1 of
/// uniform).
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let (pre_images, _) = generate_split(cfg, seed, 0, cfg.counts.pretrain)?;
    let (ft_i, ft_l) = generate_split(cfg, seed, 1, cfg.counts.finetune_train)?;
    let (fv_i, fv_l) = generate_split(cfg, seed, 2, cfg.counts.finetune_val)?;
    let (te_i, te_l) = generate_split(cfg, seed, 3, cfg.counts.test)?;
    Ok(SynthDataset {
        pretrain: UnlabeledSet { images: pre_images },
        finetune_train: LabeledSet::new(ft_i, ft_l)?,
        finetune_val: LabeledSet::new(fv_i, fv_l)?,
        test: LabeledSet::new(te_i, te_l)?,
        num_classes: cfg.num_classes(),
    })
}

fn quantize(v: f32) -> u8 {
    // round half up: 0.5 maps to 128
    (f64::from(v).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Write as 8-bit PNG: RGB for 3-channel images, grayscale for 1-channel.
/// Floats map to bytes as floor(v·255 + 0.5).
pub fn write_png(img: &ImageBuf, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        3 => {
            let mut out = image::RgbImage::new(w, h);
            for (x, y, p) in out.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quantize(img.get(x as usize, y as usize, ch));
                }
            }
            out.save_with_format(path, image::ImageFormat::Png)?;
        }
        1 => {
            let mut out = image::GrayImage::new(w, h);
            for (x, y, p) in out.enumerate_pixels_mut() {
                p.0[0] = quantize(img.get(x as usize, y as usize, 0));
            }
            out.save_with_format(path, image::ImageFormat::Png)?;
        }
        c => return Err(Error::invalid(format!("write_png: {c}-channel image"))),
    }
    Ok(())
}

/// Read an 8-bit image file into floats in [0, 1]. Alpha channels are
/// dropped with a warning; grayscale stays single-channel.
pub fn read_png(path: &Path) -> Result<ImageBuf> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Image(other),
    })?;
    let has_alpha = decoded.color().has_alpha();
    if has_alpha {
        log::warn!("{}: dropping alpha channel", path.display());
    }
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    if gray {
        let pixels = decoded.into_luma8();
        let data = pixels.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        ImageBuf::new(w, h, 1, data)
    } else {
        let pixels = decoded.into_rgb8();
        let data = pixels.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        ImageBuf::new(w, h, 3, data)
    }
}

/// Echo of the generation parameters written next to a saved dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
}

/// Layout: `<root>/<split>/<index>_<label>.png` for labeled splits,
/// `<root>/pretrain/<index>.png` (no label in the name) for the
/// pretraining split, plus `manifest.json`.
pub fn save_dataset(ds: &SynthDataset, cfg: &SynthConfig, seed: u64, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, img) in ds.pretrain.images.iter().enumerate() {
        write_png(img, &root.join("pretrain").join(format!("{i:04}.png")))?;
    }
    for (split, set) in [
        (Split::FinetuneTrain, &ds.finetune_train),
        (Split::FinetuneVal, &ds.finetune_val),
        (Split::Test, &ds.test),
    ] {
        let dir = root.join(split.dir_name());
        for (i, (img, label)) in set.images().iter().zip(set.labels()).enumerate() {
            write_png(img, &dir.join(format!("{i:04}_{label}.png")))?;
        }
    }
    let manifest = DatasetManifest { seed, config: cfg.clone() };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .is_some_and(|e| e == "png" || e == "jpg" || e == "jpeg")
        })
        .collect();
    files.sort();
    Ok(files)
}

fn label_from_name(path: &Path) -> Result<usize> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(format!("{}: unreadable file name", path.display())))?;
    let label = stem
        .rsplit_once('_')
        .map(|(_, l)| l)
        .ok_or_else(|| Error::data(format!("{}: expected <index>_<label>.png", path.display())))?;
    label
        .parse()
        .map_err(|_| Error::data(format!("{}: label '{label}' is not an integer", path.display())))
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<(SynthDataset, DatasetManifest)> {
    let manifest_path = root.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?,
    )?;
    let load_labeled = |split: Split| -> Result<LabeledSet> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for path in sorted_pngs(&root.join(split.dir_name()))? {
            images.push(read_png(&path)?);
            labels.push(label_from_name(&path)?);
        }
        LabeledSet::new(images, labels)
    };
    let pretrain = UnlabeledSet {
        images: sorted_pngs(&root.join(Split::Pretrain.dir_name()))?
            .iter()
            .map(|p| read_png(p))
            .collect::<Result<_>>()?,
    };
    let ds = SynthDataset {
        pretrain,
        finetune_train: load_labeled(Split::FinetuneTrain)?,
        finetune_val: load_labeled(Split::FinetuneVal)?,
        test: load_labeled(Split::Test)?,
        num_classes: manifest.config.num_classes(),
    };
    for (name, set) in [
        ("finetune-train", &ds.finetune_train),
        ("finetune-val", &ds.finetune_val),
        ("test", &ds.test),
    ] {
        for &l in set.labels() {
            if l >= ds.num_classes {
                return Err(Error::data(format!(
                    "{name}: label {l} outside [0, {})",
                    ds.num_classes
                )));
            }
        }
    }
    Ok((ds, manifest))
}

/// A directory of images loaded as either an unlabeled pool or a labeled
/// set with the class count inferred from the labels.
#[derive(Debug, Clone)]
pub enum LoadedDir {
    Unlabeled(UnlabeledSet),
    Labeled { set: LabeledSet, num_classes: usize },
}

/// Load every PNG/JPEG in `dir` (sorted by file name), resized to
/// `resize_to` square. With a labels CSV (`filename,label` per line, no
/// header) the result is labeled and every file must be covered both
/// ways; without one it is an unlabeled pool.
pub fn load_image_dir(dir: &Path, labels_csv: Option<&Path>, resize_to: usize) -> Result<LoadedDir> {
    if resize_to == 0 {
        return Err(Error::invalid("load_image_dir: resize target 0".to_string()));
    }
    let files = sorted_pngs(dir)?;
    let mut images = Vec::with_capacity(files.len());
    for path in &files {
        let img = read_png(path)?;
        images.push(img.crop_resize(0.0, 0.0, img.width() as f64, img.height() as f64, resize_to, resize_to)?);
    }
    let Some(csv_path) = labels_csv else {
        return Ok(LoadedDir::Unlabeled(UnlabeledSet { images }));
    };

    let text = fs::read_to_string(csv_path)
        .map_err(|e| Error::data(format!("{}: {e}", csv_path.display())))?;
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("filename,label")) {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| {
            Error::data(format!("{}:{}: expected 'filename,label'", csv_path.display(), lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::data(format!("{}:{}: label '{}' is not an integer", csv_path.display(), lineno + 1, label))
        })?;
        if by_name.insert(name.trim().to_string(), label).is_some() {
            return Err(Error::data(format!(
                "{}: duplicate row for '{}'",
                csv_path.display(),
                name.trim()
            )));
        }
    }

    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string())
        .collect();
    let missing: Vec<&String> = by_name.keys().filter(|n| !names.contains(n)).collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "labels reference missing images: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let unlabeled: Vec<&String> = names.iter().filter(|n| !by_name.contains_key(*n)).collect();
    if !unlabeled.is_empty() {
        return Err(Error::data(format!(
            "images without labels: {}",
            unlabeled.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let labels: Vec<usize> = names.iter().map(|n| by_name[n]).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(LoadedDir::Labeled { set: LabeledSet::new(images, labels)?, num_classes })
}
