//! Deterministic synthetic localization dataset.
//!
//! Each image holds one object motif whose shape identifies the class, drawn
//! over a noisy textured background with a few class-irrelevant distractor
//! blobs. The motif's pixels are the ground-truth mask, so localization
//! metrics are exact.
//!
//! Every sample is a pure function of `(seed, split, index)`: the generator is
//! ChaCha8 keyed by `seed`, with the stream id `split << 32 | index`. Floats
//! are drawn as `(u32 >> 8) · 2^-24`.

use std::fmt;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{self, KvConfig};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::metrics::BBox;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const BLOB_MAGIC: &[u8; 4] = b"SYNS";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const SPEC_NAME: &str = "dataset.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split `{s}` (train|val|test)"))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Object motifs, one per class, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    Disk,
    Ring,
    Square,
    Cross,
    Triangle,
    StripesPatch,
    CheckerPatch,
    DiagonalBar,
}

impl Motif {
    pub const ALL: [Motif; 8] = [
        Motif::Disk,
        Motif::Ring,
        Motif::Square,
        Motif::Cross,
        Motif::Triangle,
        Motif::StripesPatch,
        Motif::CheckerPatch,
        Motif::DiagonalBar,
    ];

    /// Shading factor in `(0, 1]` when the normalized point `(u, v)` in
    /// `[-1, 1]²` belongs to the motif.
    fn shade(self, u: f32, v: f32) -> Option<f32> {
        let r2 = u * u + v * v;
        let in_patch = u.abs() <= 0.8 && v.abs() <= 0.8;
        match self {
            Motif::Disk => (r2 <= 1.0).then_some(1.0),
            Motif::Ring => (0.55 * 0.55..=1.0).contains(&r2).then_some(1.0),
            Motif::Square => in_patch.then_some(1.0),
            Motif::Cross => {
                ((u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)).then_some(1.0)
            }
            Motif::Triangle => (v.abs() <= 1.0 && u.abs() <= (v + 1.0) * 0.5).then_some(1.0),
            Motif::StripesPatch => in_patch.then(|| {
                let band = ((v + 0.8) / 0.4).floor() as i32;
                if band % 2 == 0 {
                    1.0
                } else {
                    0.45
                }
            }),
            Motif::CheckerPatch => in_patch.then(|| {
                let a = ((u + 0.8) / 0.4).floor() as i32;
                let b = ((v + 0.8) / 0.4).floor() as i32;
                if (a + b) % 2 == 0 {
                    1.0
                } else {
                    0.45
                }
            }),
            Motif::DiagonalBar => {
                let across = (u - v).abs() * std::f32::consts::FRAC_1_SQRT_2;
                let along = (u + v).abs() * std::f32::consts::FRAC_1_SQRT_2;
                (across <= 0.28 && along <= 1.3 && u.abs() <= 1.0 && v.abs() <= 1.0).then_some(1.0)
            }
        }
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    /// Motif extent as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    /// Amplitude of the uniform per-pixel background noise.
    pub noise: f64,
    pub distractors: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 32,
            train_samples: 2000,
            val_samples: 400,
            test_samples: 400,
            seed: 17,
            size_min: 0.35,
            size_max: 0.6,
            noise: 0.08,
            distractors: 2,
        }
    }
}

impl DatasetSpec {
    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.validate().map_err(Error::Invalid)
    }
}

impl KvConfig for DatasetSpec {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "num_classes" => self.num_classes = config::parse_usize(value)?,
            "image_size" => self.image_size = config::parse_usize(value)?,
            "train_samples" => self.train_samples = config::parse_usize(value)?,
            "val_samples" => self.val_samples = config::parse_usize(value)?,
            "test_samples" => self.test_samples = config::parse_usize(value)?,
            "seed" => self.seed = config::parse_u64(value)?,
            "size_min" => self.size_min = config::parse_f64(value)?,
            "size_max" => self.size_max = config::parse_f64(value)?,
            "noise" => self.noise = config::parse_f64(value)?,
            "distractors" => self.distractors = config::parse_usize(value)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "num_classes = {}\nimage_size = {}\ntrain_samples = {}\nval_samples = {}\n\
             test_samples = {}\nseed = {}\nsize_min = {}\nsize_max = {}\nnoise = {}\ndistractors = {}\n",
            self.num_classes,
            self.image_size,
            self.train_samples,
            self.val_samples,
            self.test_samples,
            self.seed,
            self.size_min,
            self.size_max,
            self.noise,
            self.distractors
        )
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.num_classes > Motif::ALL.len() {
            return Err(format!(
                "num_classes {} exceeds the {} available motifs",
                self.num_classes,
                Motif::ALL.len()
            ));
        }
        if self.image_size < 8 {
            return Err("image_size must be at least 8".into());
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err("size range must satisfy 0 < size_min <= size_max < 1".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err("noise must lie in [0, 0.5]".into());
        }
        Ok(())
    }
}

/// One labelled image with exact localization ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub gt_box: BBox,
    /// `[H, W]`, values in `{0, 1}`.
    pub gt_mask: Tensor<f32>,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.gt_mask.data().iter().map(|&v| v > 0.5).collect()
    }
}

struct SampleRng(ChaCha8Rng);

impl SampleRng {
    fn new(seed: u64, split: Split, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split.stream() << 32) | index as u64);
        Self(rng)
    }

    fn unit(&mut self) -> f32 {
        (self.0.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.unit()
    }

    /// Integer in `0..n` by multiply-shift.
    fn below(&mut self, n: usize) -> usize {
        ((self.0.next_u32() as u64 * n as u64) >> 32) as usize
    }
}

/// Tight inclusive-exclusive box around the set pixels of a row-major mask.
pub fn mask_bbox(mask: &[bool], height: usize, width: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(BBox { x0, y0, x1, y1 })
}

/// Generate sample `index` of `split`.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<SynthSample> {
    spec.check()?;
    let n = spec.image_size;
    let mut rng = SampleRng::new(spec.seed, split, index);
    let label = rng.below(spec.num_classes);
    let motif = Motif::ALL[label];

    // Background: per-channel base level, a low-frequency wave, uniform noise.
    let base: [f32; CHANNELS] = std::array::from_fn(|_| rng.uniform(0.08, 0.32));
    #[allow(clippy::approx_constant)]
    let (fx, fy, phase) = (
        rng.uniform(0.1, 0.5),
        rng.uniform(0.1, 0.5),
        rng.uniform(0.0, 6.28),
    );
    let noise = spec.noise as f32;
    let mut image = vec![0.0f32; CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let wave = 0.05 * (fx * x as f32 + fy * y as f32 + phase).sin();
            for (c, b) in base.iter().enumerate() {
                image[(c * n + y) * n + x] = b + wave + rng.uniform(-noise, noise);
            }
        }
    }

    for _ in 0..spec.distractors {
        let (cx, cy) = (rng.uniform(0.0, n as f32), rng.uniform(0.0, n as f32));
        let radius = rng.uniform(1.2, 2.5);
        let color: [f32; CHANNELS] = std::array::from_fn(|_| rng.uniform(0.3, 0.9));
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
                let alpha = (-d2 / (radius * radius)).exp();
                if alpha > 0.05 {
                    for (c, col) in color.iter().enumerate() {
                        let p = &mut image[(c * n + y) * n + x];
                        *p = *p * (1.0 - alpha) + col * alpha;
                    }
                }
            }
        }
    }

    let color: [f32; CHANNELS] = std::array::from_fn(|_| rng.uniform(0.6, 1.0));
    let mut mask = vec![false; n * n];
    loop {
        let extent = rng.uniform(spec.size_min as f32, spec.size_max as f32) * n as f32;
        let half = extent * 0.5;
        let cx = rng.uniform(half, n as f32 - half);
        let cy = rng.uniform(half, n as f32 - half);
        for y in 0..n {
            for x in 0..n {
                let u = (x as f32 + 0.5 - cx) / half;
                let v = (y as f32 + 0.5 - cy) / half;
                if let Some(shade) = motif.shade(u, v) {
                    mask[y * n + x] = true;
                    for (c, col) in color.iter().enumerate() {
                        image[(c * n + y) * n + x] = col * shade;
                    }
                }
            }
        }
        if mask.iter().any(|&m| m) {
            break;
        }
    }
    image.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));

    let gt_box = mask_bbox(&mask, n, n).expect("mask is non-empty");
    Ok(SynthSample {
        index,
        image: Tensor::new([CHANNELS, n, n], image)?,
        label,
        gt_box,
        gt_mask: Tensor::new([n, n], mask.iter().map(|&m| m as u8 as f32).collect())?,
    })
}

pub fn generate(spec: &DatasetSpec, split: Split) -> Result<Vec<SynthSample>> {
    (0..spec.samples(split))
        .map(|i| generate_sample(spec, split, i))
        .collect()
}

/// Mirror a `[C, H, W]` image left to right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(w)
        .zip(image.data().chunks_exact(w))
    {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

fn blob_name(index: usize) -> String {
    format!("{index:06}.bin")
}

fn encode_blob(sample: &SynthSample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(16 + 4 * (CHANNELS + 1) * h * w);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&sample.image.to_le_bytes());
    out.extend_from_slice(&sample.gt_mask.to_le_bytes());
    out
}

/// Write `samples` as `manifest.csv` plus one blob per sample under `dir`.
pub fn save_dataset(samples: &[SynthSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        let name = blob_name(s.index);
        write_atomic(&dir.join(&name), &encode_blob(s))?;
        let b = s.gt_box;
        manifest.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.index, s.label, b.x0, b.y0, b.x1, b.y1, name
        ));
    }
    write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(&manifest_path, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad("expected 7 comma-separated fields"));
        }
        let num = |i: usize| {
            fields[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| bad("non-integer field"))
        };
        let (index, label) = (num(0)?, num(1)?);
        let gt_box = BBox {
            x0: num(2)?,
            y0: num(3)?,
            x1: num(4)?,
            y1: num(5)?,
        };
        let blob_path = dir.join(fields[6].trim());
        let bytes = read_bytes(&blob_path)?;
        if bytes.len() < 16 || &bytes[..4] != BLOB_MAGIC {
            return Err(Error::format(&blob_path, "missing SYNS header"));
        }
        let version = u32_at(&bytes, 4);
        if version != BLOB_VERSION {
            return Err(Error::format(
                &blob_path,
                format!("unsupported blob version {version}"),
            ));
        }
        let (h, w) = (u32_at(&bytes, 8) as usize, u32_at(&bytes, 12) as usize);
        let image_len = 4 * CHANNELS * h * w;
        if bytes.len() != 16 + image_len + 4 * h * w {
            return Err(Error::format(&blob_path, "truncated or oversized blob"));
        }
        let image = Tensor::from_le_bytes([CHANNELS, h, w], &bytes[16..16 + image_len])?;
        let gt_mask = Tensor::from_le_bytes([h, w], &bytes[16 + image_len..])?;
        let bits: Vec<bool> = gt_mask.data().iter().map(|&v| v > 0.5).collect();
        if mask_bbox(&bits, h, w) != Some(gt_box) {
            return Err(Error::format(
                &blob_path,
                "manifest box disagrees with the stored mask",
            ));
        }
        out.push(SynthSample {
            index,
            image,
            label,
            gt_box,
            gt_mask,
        });
    }
    Ok(out)
}

/// A generated dataset with all three splits in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            train: generate(spec, Split::Train)?,
            val: generate(spec, Split::Val)?,
            test: generate(spec, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SynthSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Layout: `dataset.cfg` plus one subdirectory per split.
    pub fn save(&self, root: &Path) -> Result<()> {
        for split in Split::ALL {
            save_dataset(self.split(split), &root.join(split.name()))?;
        }
        write_atomic(&root.join(SPEC_NAME), self.spec.to_text().as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self {
            spec: DatasetSpec::load(&root.join(SPEC_NAME))?,
            train: load_dataset(&root.join("train"))?,
            val: load_dataset(&root.join("val"))?,
            test: load_dataset(&root.join("test"))?,
        })
    }

    /// SHA-256 over every split's manifest followed by its blobs in
    /// manifest order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            h.update(split.name().as_bytes());
            for s in self.split(split) {
                let b = s.gt_box;
                h.update(
                    format!(
                        "{},{},{},{},{},{},{}\n",
                        s.index,
                        s.label,
                        b.x0,
                        b.y0,
                        b.x1,
                        b.y1,
                        blob_name(s.index)
                    )
                    .as_bytes(),
                );
                h.update(encode_blob(s));
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            image_size: 32,
            train_samples: 8,
            val_samples: 4,
            test_samples: 4,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), Split::Train).unwrap();
        let b = generate(&small(), Split::Train).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bits_eq(&y.image));
            assert!(x.gt_mask.bits_eq(&y.gt_mask));
            assert_eq!((x.label, x.gt_box), (y.label, y.gt_box));
        }
    }

    #[test]
    fn splits_use_disjoint_streams() {
        let train = generate_sample(&small(), Split::Train, 0).unwrap();
        let test = generate_sample(&small(), Split::Test, 0).unwrap();
        assert!(!train.image.bits_eq(&test.image));
    }

    #[test]
    fn boxes_are_tight_and_images_in_range() {
        for s in generate(
            &DatasetSpec {
                train_samples: 200,
                ..small()
            },
            Split::Train,
        )
        .unwrap()
        {
            let bits = s.mask_bits();
            assert!(bits.iter().any(|&b| b));
            assert_eq!(mask_bbox(&bits, 32, 32), Some(s.gt_box));
            let b = s.gt_box;
            assert!(b.x0 < b.x1 && b.x1 <= 32 && b.y0 < b.y1 && b.y1 <= 32);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn too_many_classes_is_a_configuration_error() {
        let spec = DatasetSpec {
            num_classes: 9,
            ..small()
        };
        assert!(matches!(generate(&spec, Split::Train), Err(Error::Invalid(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_sample(&small(), Split::Val, 3).unwrap();
        let f = flip_horizontal(&s.image);
        assert!(!f.bits_eq(&s.image));
        assert!(flip_horizontal(&f).bits_eq(&s.image));
        assert_eq!(f.data()[0], s.image.data()[31]);
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = small();
        assert_eq!(DatasetSpec::from_text(&spec.to_text()).unwrap(), spec);
    }
}
