//! Dataset ingestion: CSV manifests, image/mask loading, paired augmentation,
//! deterministic splitting and batching.
//!
//! Images become `[3,H,W]` tensors in `[0,1]` (plain division by 255, no mean
//! or std normalization); masks become `[1,H,W]` tensors in `{0,1}`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Masks are foreground where the 8-bit value exceeds this.
pub const MASK_THRESHOLD: u8 = 127;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}: image has a zero dimension")]
    EmptyImage(PathBuf),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("split `{0}` has no samples")]
    EmptySplit(Split),
    #[error("manifest has no records")]
    NoRecords,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
    /// `None` until [`make_split`] assigns one.
    pub split: Option<Split>,
}

#[derive(Deserialize, Serialize)]
struct CsvRecord {
    image: String,
    mask: String,
    #[serde(default)]
    split: String,
}

/// Records with paths relative to `root` (the manifest's directory).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    /// Read a `image,mask,split` CSV. An empty split cell leaves the record unassigned.
    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let csv_err = |source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRecord>() {
            let row = row.map_err(csv_err)?;
            let split = if row.split.trim().is_empty() {
                None
            } else {
                Some(row.split.parse()?)
            };
            records.push(Record {
                image: PathBuf::from(row.image),
                mask: PathBuf::from(row.mask),
                split,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest { root, records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let csv_err = |source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(CsvRecord {
                image: r.image.to_string_lossy().into_owned(),
                mask: r.mask.to_string_lossy().into_owned(),
                split: r.split.map(|s| s.to_string()).unwrap_or_default(),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }
}

/// Assign splits: shuffle under `seed`, first `⌈ratio·n⌉` records train, rest test.
/// Records that already carry a split keep it; only unassigned ones are shuffled.
pub fn make_split(mut manifest: DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest, DataError> {
    if manifest.records.is_empty() {
        return Err(DataError::NoRecords);
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::Invalid(format!("split ratio {ratio} outside [0,1]")));
    }
    let mut open: Vec<usize> = (0..manifest.records.len()).filter(|&i| manifest.records[i].split.is_none()).collect();
    open.shuffle(&mut rng_for(seed, "split", 0));
    let n_train = (ratio * open.len() as f64).ceil() as usize;
    for (k, &i) in open.iter().enumerate() {
        manifest.records[i].split = Some(if k < n_train { Split::Train } else { Split::Test });
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DataError> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::Io {
            path: path.to_path_buf(),
            source: e,
        },
        source => DataError::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(DataError::EmptyImage(path.to_path_buf()));
    }
    Ok(img)
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(&[1, h, w], img.as_raw().iter().map(|&v| (v > MASK_THRESHOLD) as u8 as f32).collect())
        .expect("buffer length matches dimensions")
}

/// Load an RGB image resized bilinearly to `size = (h, w)`; also returns the
/// original `(width, height)`.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<(Tensor<f32>, (u32, u32)), DataError> {
    let img = open_image(path)?.to_rgb8();
    let orig = img.dimensions();
    let resized = imageops::resize(&img, size.1 as u32, size.0 as u32, FilterType::Triangle);
    Ok((rgb_to_tensor(&resized), orig))
}

pub fn load_mask(path: &Path, size: (usize, usize)) -> Result<Tensor<f32>, DataError> {
    let img = open_image(path)?.to_luma8();
    let resized = imageops::resize(&img, size.1 as u32, size.0 as u32, FilterType::Nearest);
    Ok(gray_to_mask(&resized))
}

pub fn load_sample(image_path: &Path, mask_path: &Path, size: (usize, usize)) -> Result<Sample, DataError> {
    let (image, _) = load_image(image_path, size)?;
    let mask = load_mask(mask_path, size)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample { image, mask, id })
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write `image` as RGB PNG and `mask` as 0/255 grayscale PNG.
pub fn save_sample_png(s: &Sample, image_path: &Path, mask_path: &Path) -> Result<(), DataError> {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(s.image.at(&[c, y as usize, x as usize]));
        Rgb([at(0), at(1), at(2)])
    });
    img.save(image_path).map_err(|source| DataError::Image {
        path: image_path.to_path_buf(),
        source,
    })?;
    save_mask_png(&s.mask, mask_path, 0.5)
}

fn mask_image(mask: &Tensor<f32>, threshold: f32) -> GrayImage {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.data()[y as usize * w + x as usize] >= threshold { 255 } else { 0 }])
    })
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a `[1,H,W]` (or `[H,W]`) map as a 0/255 PNG, foreground where `v ≥ threshold`.
pub fn save_mask_png(mask: &Tensor<f32>, path: &Path, threshold: f32) -> Result<(), DataError> {
    save_gray(&mask_image(mask, threshold), path)
}

/// As [`save_mask_png`], then resized nearest-neighbour to `size = (width, height)`.
/// Thresholding happens first, so the file holds only 0 and 255.
pub fn save_mask_png_resized(mask: &Tensor<f32>, path: &Path, threshold: f32, size: (u32, u32)) -> Result<(), DataError> {
    if size.0 == 0 || size.1 == 0 {
        return Err(DataError::EmptyImage(path.to_path_buf()));
    }
    let img = imageops::resize(&mask_image(mask, threshold), size.0, size.1, FilterType::Nearest);
    save_gray(&img, path)
}

// ── augmentation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Angle drawn uniformly from `[0, rotation_max)` degrees; 0 disables rotation.
    pub rotation_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotation_max: 360.0,
        }
    }
}

/// One geometric transform, shared by image and mask: flips, then a rotation
/// about the image centre. Maps each output pixel to a source coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub hflip: bool,
    pub vflip: bool,
    pub degrees: f64,
}

impl Warp {
    /// Draw order is fixed (hflip, vflip, angle) so each stream yields the same warp.
    pub fn draw<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hflip = rng.gen::<f64>() < cfg.hflip_p;
        let vflip = rng.gen::<f64>() < cfg.vflip_p;
        let u = rng.gen::<f64>();
        Warp {
            hflip,
            vflip,
            degrees: u * cfg.rotation_max,
        }
    }

    fn source(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        // inverse rotation of the output coordinate
        let (s, c) = (-self.degrees.to_radians()).sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let (mut sx, mut sy) = if self.degrees == 0.0 {
            (x, y)
        } else {
            (c * dx - s * dy + cx, s * dx + c * dy + cy)
        };
        if self.hflip {
            sx = w as f64 - 1.0 - sx;
        }
        if self.vflip {
            sy = h as f64 - 1.0 - sy;
        }
        (sx, sy)
    }

    /// Apply to a `[C,H,W]` tensor; bilinear or nearest sampling, zero outside.
    pub fn apply(&self, t: &Tensor<f32>, bilinear: bool) -> Tensor<f32> {
        let s = t.shape();
        let (ch, h, w) = (s[0], s[1], s[2]);
        let src = t.data();
        let mut out = vec![0f32; t.numel()];
        let px = |c: usize, y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[(c * h + y as usize) * w + x as usize]
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x as f64, y as f64, h, w);
                for c in 0..ch {
                    out[(c * h + y) * w + x] = if bilinear {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        let top = px(c, y0, x0) * (1.0 - fx) + px(c, y0, x0 + 1) * fx;
                        let bot = px(c, y0 + 1, x0) * (1.0 - fx) + px(c, y0 + 1, x0 + 1) * fx;
                        top * (1.0 - fy) + bot * fy
                    } else {
                        px(c, sy.round() as isize, sx.round() as isize)
                    };
                }
            }
        }
        Tensor::new(s, out).expect("same shape")
    }
}

/// Same warp for image (bilinear) and mask (nearest), drawn from `rng`.
pub fn augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    if !cfg.enabled {
        return s.clone();
    }
    let warp = Warp::draw(cfg, rng);
    Sample {
        image: warp.apply(&s.image, true),
        mask: warp.apply(&s.mask, false),
        id: s.id.clone(),
    }
}

// ── batching ──────────────────────────────────────────────────────────────

/// Random access to samples, either preloaded or read from disk on demand.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Sample, DataError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> Result<Sample, DataError> {
        Ok(self[i].clone())
    }
}

/// One split of a manifest, loaded lazily at `size`.
pub struct ManifestSource {
    pub paths: Vec<(PathBuf, PathBuf)>,
    pub size: (usize, usize),
}

impl ManifestSource {
    pub fn new(m: &DatasetManifest, split: Split, size: (usize, usize)) -> Result<Self, DataError> {
        let paths: Vec<_> = m
            .split(split)
            .into_iter()
            .map(|r| (m.resolve(&r.image), m.resolve(&r.mask)))
            .collect();
        if paths.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        for (img, mask) in &paths {
            for p in [img, mask] {
                if !p.exists() {
                    return Err(DataError::Io {
                        path: p.clone(),
                        source: std::io::Error::from(std::io::ErrorKind::NotFound),
                    });
                }
            }
        }
        Ok(ManifestSource { paths, size })
    }

    /// Load every sample now.
    pub fn preload(&self) -> Result<Vec<Sample>, DataError> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn get(&self, i: usize) -> Result<Sample, DataError> {
        let (img, mask) = &self.paths[i];
        load_sample(img, mask, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B,3,H,W]`
    pub images: Tensor<f32>,
    /// `[B,1,H,W]`
    pub masks: Tensor<f32>,
    pub ids: Vec<String>,
    /// Source indices, in batch order.
    pub indices: Vec<usize>,
}

/// Index batches for one epoch. Train: a per-epoch shuffle derived from
/// `seed`, last partial batch kept. Test: original order, one sample per batch.
pub fn batch_indices(n: usize, split: Split, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let bs = match split {
        Split::Train => {
            order.shuffle(&mut rng_for(seed, "shuffle", epoch));
            batch_size
        }
        Split::Test => 1,
    };
    Ok(order.chunks(bs).map(<[usize]>::to_vec).collect())
}

/// Assemble a batch; with `augment`, sample `i` uses its own stream
/// `(seed, "augment/i", epoch)` so the result does not depend on batch composition.
pub fn make_batch<S: SampleSource + ?Sized>(
    src: &S,
    indices: &[usize],
    augment_with: Option<(&AugmentConfig, u64, u64)>,
) -> Result<Batch, DataError> {
    let mut images = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut s = src.get(i)?;
        if let Some((cfg, seed, epoch)) = augment_with {
            s = augment(&s, cfg, &mut rng_for(seed, &format!("augment/{i}"), epoch));
        }
        images.push(s.image);
        masks.push(s.mask);
        ids.push(s.id);
    }
    let stack = |v: &[Tensor<f32>]| Tensor::stack(&v.iter().collect::<Vec<_>>()).map_err(|e| DataError::Invalid(e.to_string()));
    Ok(Batch {
        images: stack(&images)?,
        masks: stack(&masks)?,
        ids,
        indices: indices.to_vec(),
    })
}

/// Synthetic lesion-like samples: a dark disc on a noisy skin-toned
/// background, with the disc as the mask.
pub fn synthetic_circles(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = rng_for(seed, "synthetic", 0);
    (0..n)
        .map(|k| {
            let s = size as f64;
            let r = rng.gen_range(0.15 * s..0.3 * s);
            let cx = rng.gen_range(r..s - r);
            let cy = rng.gen_range(r..s - r);
            let inside: Vec<bool> = (0..size * size)
                .map(|p| {
                    let (y, x) = ((p / size) as f64, (p % size) as f64);
                    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
                })
                .collect();
            let skin = [0.85f32, 0.65, 0.55];
            let lesion = [0.35f32, 0.2, 0.15];
            let mut image = vec![0f32; 3 * size * size];
            for c in 0..3 {
                for p in 0..size * size {
                    let base = if inside[p] { lesion[c] } else { skin[c] };
                    image[c * size * size + p] = (base + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0);
                }
            }
            Sample {
                image: Tensor::new(&[3, size, size], image).expect("sized"),
                mask: Tensor::new(&[1, size, size], inside.iter().map(|&b| b as u8 as f32).collect()).expect("sized"),
                id: format!("synth{k:04}"),
            }
        })
        .collect()
}

/// Write `samples` as PNGs under `dir` plus a `manifest.csv` without split
/// assignments; returns the manifest path.
pub fn write_png_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir.join("images")).map_err(io)?;
    std::fs::create_dir_all(dir.join("masks")).map_err(io)?;
    let mut records = Vec::new();
    for s in samples {
        let img = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        save_sample_png(s, &dir.join(&img), &dir.join(&mask))?;
        records.push(Record { image: img, mask, split: None });
    }
    let path = dir.join("manifest.csv");
    DatasetManifest {
        root: dir.to_path_buf(),
        records,
    }
    .write_csv(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn records(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            records: (0..n)
                .map(|i| Record {
                    image: format!("i{i}.png").into(),
                    mask: format!("m{i}.png").into(),
                    split: None,
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let m = make_split(records(400), 0.7, 1).unwrap();
        assert_eq!((m.split(Split::Train).len(), m.split(Split::Test).len()), (280, 120));
        assert_eq!(make_split(records(400), 0.7, 1).unwrap(), m);
        assert_ne!(make_split(records(400), 0.7, 2).unwrap(), m);
        let all = make_split(records(5), 1.0, 0).unwrap();
        assert!(all.split(Split::Test).is_empty());
        assert!(matches!(make_split(records(0), 0.7, 0), Err(DataError::NoRecords)));
        assert_eq!(make_split(records(7), 0.7, 0).unwrap().split(Split::Train).len(), 5);
    }

    #[test]
    fn existing_split_column_is_honoured() {
        let mut m = records(4);
        m.records[0].split = Some(Split::Test);
        m.records[1].split = Some(Split::Test);
        let out = make_split(m, 1.0, 3).unwrap();
        assert_eq!(out.records[0].split, Some(Split::Test));
        assert_eq!(out.records[1].split, Some(Split::Test));
        assert_eq!(out.split(Split::Train).len(), 2);
    }

    #[test]
    fn batch_counts_and_order() {
        let b = batch_indices(280, Split::Train, 8, 0, 0).unwrap();
        assert_eq!(b.len(), 35);
        let b = batch_indices(10, Split::Train, 4, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(batch_indices(50, Split::Train, 50, 0, 0).unwrap(), batch_indices(50, Split::Train, 50, 0, 1).unwrap());
        let t = batch_indices(3, Split::Test, 8, 0, 5).unwrap();
        assert_eq!(t, vec![vec![0], vec![1], vec![2]]);
    }

    fn sample_eq_mask(size: usize) -> Sample {
        let s = &synthetic_circles(1, size, 4)[0];
        let m = s.mask.clone();
        Sample {
            image: Tensor::stack(&[&m, &m, &m]).unwrap().reshape(&[3, size, size]).unwrap(),
            mask: m,
            id: "x".into(),
        }
    }

    #[test]
    fn augmentation_identities() {
        let s = &synthetic_circles(1, 16, 0)[0];
        let flip = Warp { hflip: true, vflip: false, degrees: 0.0 };
        assert_eq!(flip.apply(&flip.apply(&s.image, true), true), s.image);
        let id = Warp { hflip: false, vflip: false, degrees: 0.0 };
        assert_eq!(id.apply(&s.image, true), s.image);
        assert_eq!(id.apply(&s.mask, false), s.mask);
        let q = Warp { hflip: false, vflip: false, degrees: 90.0 };
        let once = q.apply(&s.mask, false);
        assert_ne!(once, s.mask);
        let four = (0..3).fold(once, |m, _| q.apply(&m, false));
        assert_eq!(four, s.mask);
    }

    #[test]
    fn image_and_mask_share_the_transform() {
        let s = sample_eq_mask(24);
        for seed in 0..20 {
            let cfg = AugmentConfig::default();
            let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let warp = Warp::draw(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.image, warp.apply(&s.image, true));
            let ch0 = s.image.index_first(0).reshape(&[1, 24, 24]).unwrap();
            assert_eq!(out.mask, warp.apply(&ch0, false));
            assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let flips_only = AugmentConfig { rotation_max: 0.0, ..cfg.clone() };
            let f = augment(&s, &flips_only, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(f.image.index_first(0).data(), f.mask.data());
        }
    }

    #[test]
    fn png_round_trip_and_loading() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_circles(3, 32, 1);
        let path = write_png_dataset(&samples, dir.path()).unwrap();
        let m = make_split(DatasetManifest::read_csv(&path).unwrap(), 0.7, 0).unwrap();
        let src = ManifestSource::new(&m, Split::Train, (32, 32)).unwrap();
        assert_eq!(src.len(), 3);
        let orig = samples.iter().find(|s| s.id == src.get(0).unwrap().id).unwrap();
        let loaded = src.get(0).unwrap();
        assert_eq!(loaded.mask, orig.mask);
        assert!(loaded.image.max_abs_diff(&orig.image) <= 0.5 / 255.0 + 1e-6);
        // downsized load keeps masks binary
        let small = load_sample(&m.resolve(&m.records[0].image), &m.resolve(&m.records[0].mask), (16, 16)).unwrap();
        assert_eq!(small.image.shape(), &[3, 16, 16]);
        assert!(small.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(matches!(ManifestSource::new(&m, Split::Test, (32, 32)), Err(DataError::EmptySplit(Split::Test))));
    }

    #[test]
    fn pixel_scaling_and_binarization() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.png");
        let mp = dir.path().join("m.png");
        RgbImage::from_pixel(4, 4, Rgb([200, 0, 255])).save(&ip).unwrap();
        GrayImage::from_fn(4, 4, |x, _| Luma([if x < 2 { 127 } else { 128 }])).save(&mp).unwrap();
        let s = load_sample(&ip, &mp, (4, 4)).unwrap();
        assert!((s.image.data()[0] - 200.0 / 255.0).abs() < 1e-7);
        assert_eq!(&s.mask.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        let missing = load_sample(&dir.path().join("nope.png"), &mp, (4, 4)).unwrap_err();
        assert!(missing.to_string().contains("nope.png"));
    }

    #[test]
    fn resized_mask_is_binary_at_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mask = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f32 / 8.0);
        save_mask_png_resized(&mask, &p, 0.5, (13, 5)).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (13, 5));
        assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(12, 4).0[0], 255);
    }
}
