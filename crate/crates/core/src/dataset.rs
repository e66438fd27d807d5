//! CIFAR-10 ingestion and pixel conversions.
//!
//! Images are held interleaved (height, width, channel): pixel `(r, c)`
//! channel `k` lives at index `(r * 32 + c) * 3 + k`. The on-disk CIFAR-10
//! records are planar (all red, then green, then blue) and are transposed on
//! load and on write.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = SIDE * SIDE * CHANNELS;
/// One label byte plus 3072 planar pixel bytes.
pub const RECORD_LEN: usize = PIXELS + 1;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// A 32×32 RGB byte image.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pixels: Box<[u8; PIXELS]>,
    label: Option<u8>,
}

impl std::fmt::Debug for ImageU8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageU8").field("label", &self.label).finish_non_exhaustive()
    }
}

impl ImageU8 {
    /// Builds an image from interleaved pixel bytes.
    pub fn from_pixels(pixels: &[u8], label: Option<u8>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{PIXELS} bytes"),
                got: format!("{} bytes", pixels.len()),
            });
        }
        if let Some(l) = label {
            if l > 9 {
                return Err(Error::InvalidConfig(format!("label {l} outside 0..=9")));
            }
        }
        let mut buf = Box::new([0u8; PIXELS]);
        buf.copy_from_slice(pixels);
        Ok(Self { pixels: buf, label })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels[..]
    }

    pub fn label(&self) -> Option<u8> {
        self.label
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * SIDE + col) * CHANNELS + ch]
    }

    /// Parses one CIFAR-10 record (label byte then planar RGB).
    pub fn from_record(record: &[u8]) -> Result<Self, String> {
        if record.len() != RECORD_LEN {
            return Err(format!("record of {} bytes", record.len()));
        }
        let label = record[0];
        if label > 9 {
            return Err(format!("label byte {label} outside 0..=9"));
        }
        let planes = &record[1..];
        let mut buf = Box::new([0u8; PIXELS]);
        for ch in 0..CHANNELS {
            for i in 0..SIDE * SIDE {
                buf[i * CHANNELS + ch] = planes[ch * SIDE * SIDE + i];
            }
        }
        Ok(Self {
            pixels: buf,
            label: Some(label),
        })
    }

    /// Serializes back to the CIFAR-10 record layout. Unlabeled images get
    /// label 0.
    pub fn to_record(&self) -> [u8; RECORD_LEN] {
        let mut out = [0u8; RECORD_LEN];
        out[0] = self.label.unwrap_or(0);
        for ch in 0..CHANNELS {
            for i in 0..SIDE * SIDE {
                out[1 + ch * SIDE * SIDE + i] = self.pixels[i * CHANNELS + ch];
            }
        }
        out
    }

    pub fn to_float(&self) -> ImageF {
        to_float(self)
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(SIDE as u32, SIDE as u32, self.pixels.to_vec())
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb_image(img: &image::RgbImage) -> Result<Self> {
        if img.width() as usize != SIDE || img.height() as usize != SIDE {
            return Err(Error::ShapeMismatch {
                expected: "32x32".into(),
                got: format!("{}x{}", img.width(), img.height()),
            });
        }
        Self::from_pixels(img.as_raw(), None)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb_image(&img)
    }
}

/// A 32×32 RGB image with values in `[0, 1]`, interleaved like [`ImageU8`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pixels: Vec<f32>,
}

impl ImageF {
    /// Values are clamped into `[0, 1]`; NaN maps to 0.
    pub fn from_pixels(pixels: &[f32]) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{PIXELS} values"),
                got: format!("{} values", pixels.len()),
            });
        }
        Ok(Self {
            pixels: pixels.iter().map(|&v| clamp_unit(v)).collect(),
        })
    }

    pub fn filled(value: f32) -> Self {
        Self {
            pixels: vec![clamp_unit(value); PIXELS],
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_bytes(&self) -> ImageU8 {
        to_bytes(self)
    }
}

fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `byte / 255` per value.
pub fn to_float(img: &ImageU8) -> ImageF {
    ImageF {
        pixels: img.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    }
}

/// Byte quantization of one unit-interval value, rounding half away from zero.
pub fn quantize(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// `round(clamp(v, 0, 1) * 255)` per value.
pub fn to_bytes(img: &ImageF) -> ImageU8 {
    let mut buf = Box::new([0u8; PIXELS]);
    for (dst, &v) in buf.iter_mut().zip(&img.pixels) {
        *dst = quantize(v);
    }
    ImageU8 {
        pixels: buf,
        label: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// The two CIFAR-10 splits in record order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<ImageU8>,
    pub test: Vec<ImageU8>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageU8] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Deterministic subset of at most `max_train` training images, used by
    /// reduced training profiles. The test split is untouched.
    pub fn subset_train(&self, max_train: usize, seed: u64) -> Dataset {
        let n = max_train.min(self.train.len());
        let train = sample_images(self, Split::Train, n, seed).expect("n bounded by split size");
        Dataset {
            train,
            test: self.test.clone(),
        }
    }
}

/// Reads a batch file of whole CIFAR-10 records.
pub fn read_batch(path: &Path) -> Result<Vec<ImageU8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % RECORD_LEN != 0 {
        return Err(Error::format(
            path,
            format!(
                "size {} is not a multiple of the {RECORD_LEN}-byte record length",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            ImageU8::from_record(rec).map_err(|r| Error::format(path, format!("record {i}: {r}")))
        })
        .collect()
}

/// Writes images as CIFAR-10 records; the inverse of [`read_batch`].
pub fn write_batch(path: &Path, images: &[ImageU8]) -> Result<()> {
    let mut buf = Vec::with_capacity(images.len() * RECORD_LEN);
    for img in images {
        buf.extend_from_slice(&img.to_record());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut train = Vec::new();
    for name in TRAIN_FILES {
        train.extend(read_batch(&dir.join(name))?);
    }
    let test = read_batch(&dir.join(TEST_FILE))?;
    Ok(Dataset { train, test })
}

/// `n` distinct images drawn from one split; a pure function of
/// `(dataset, split, n, seed)`.
pub fn sample_images(ds: &Dataset, split: Split, n: usize, seed: u64) -> Result<Vec<ImageU8>> {
    let pool = ds.split(split);
    Ok(sample_indices(pool.len(), n, seed)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// The index selection behind [`sample_images`]: the first `n` positions of
/// a seeded partial Fisher–Yates shuffle of `0..len`.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: len,
        });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = SimRng::new(seed);
    for i in 0..n {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

/// Smooth labelled stand-in images: a few random plane waves per channel
/// plus a colored rectangle. Used where the real dataset is unavailable
/// (fixtures, examples, smoke runs).
pub fn synthetic_images(n: usize, seed: u64) -> Vec<ImageU8> {
    (0..n)
        .map(|i| {
            let mut rng = SimRng::derived(&[seed, i as u64]);
            let mut waves = [[0.0f64; 4]; CHANNELS];
            for w in waves.iter_mut() {
                *w = [
                    rng.uniform_range(-0.4, 0.4),
                    rng.uniform_range(-0.4, 0.4),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                    rng.uniform_range(0.15, 0.35),
                ];
            }
            let base: Vec<f64> = (0..CHANNELS).map(|_| rng.uniform_range(0.3, 0.7)).collect();
            let (r0, c0) = (rng.below(20), rng.below(20));
            let (rh, cw) = (4 + rng.below(12), 4 + rng.below(12));
            let fill: Vec<f64> = (0..CHANNELS).map(|_| rng.uniform()).collect();
            let mut px = vec![0u8; PIXELS];
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let inside = (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c);
                    for k in 0..CHANNELS {
                        let [fy, fx, ph, amp] = waves[k];
                        let v = if inside {
                            fill[k]
                        } else {
                            base[k] + amp * (fy * r as f64 + fx * c as f64 + ph).sin()
                        };
                        px[(r * SIDE + c) * CHANNELS + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            ImageU8::from_pixels(&px, Some((i % 10) as u8)).expect("fixed size")
        })
        .collect()
}

/// Writes a CIFAR-10-layout directory of synthetic images.
pub fn write_synthetic_dataset(dir: &Path, per_train_file: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, name) in TRAIN_FILES.iter().enumerate() {
        let imgs = synthetic_images(per_train_file, crate::rng::derive_seed(&[seed, f as u64]));
        write_batch(&dir.join(name), &imgs)?;
    }
    let imgs = synthetic_images(test, crate::rng::derive_seed(&[seed, TRAIN_FILES.len() as u64]));
    write_batch(&dir.join(TEST_FILE), &imgs)
}
