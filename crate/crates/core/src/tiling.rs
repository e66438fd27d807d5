//! Arbitrary-size RGB images as grids of independent 32×32 tiles.
//!
//! Frames are padded by edge replication to multiples of 32, cut into
//! row-major tiles, sent tile by tile, reassembled and cropped back. Tile
//! seams are not smoothed.

use image::RgbImage;

use crate::channel::{ChannelModel, Snr, DEFAULT_H_FLOOR};
use crate::codec::CodecParams;
use crate::dataset::{ImageU8, SIDE};
use crate::error::{Error, Result};
use crate::harness::{image_spec, transmit_dnn, System};
use crate::metrics::{self, MetricReport};
use crate::qam::transmit_qam;

/// Replicates the last row and column until both sides are multiples of 32.
pub fn pad_to_tiles(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width().max(1), img.height().max(1));
    let side = SIDE as u32;
    let (pw, ph) = (w.div_ceil(side) * side, h.div_ceil(side) * side);
    if (pw, ph) == (img.width(), img.height()) {
        return img.clone();
    }
    RgbImage::from_fn(pw, ph, |x, y| *img.get_pixel(x.min(w - 1), y.min(h - 1)))
}

/// Row-major 32×32 tiles of a frame whose sides are multiples of 32.
pub fn split_tiles(img: &RgbImage) -> Result<Vec<ImageU8>> {
    let side = SIDE as u32;
    if img.width() == 0 || img.height() == 0 || !img.width().is_multiple_of(side) || !img.height().is_multiple_of(side) {
        return Err(Error::ShapeMismatch {
            expected: "sides that are positive multiples of 32".into(),
            got: format!("{}x{}", img.width(), img.height()),
        });
    }
    let mut tiles = Vec::new();
    for ty in 0..img.height() / side {
        for tx in 0..img.width() / side {
            let sub = image::imageops::crop_imm(img, tx * side, ty * side, side, side).to_image();
            tiles.push(ImageU8::from_rgb_image(&sub)?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`split_tiles`].
pub fn join_tiles(tiles: &[ImageU8], width: u32, height: u32) -> Result<RgbImage> {
    let side = SIDE as u32;
    let cols = width / side;
    if !width.is_multiple_of(side) || !height.is_multiple_of(side) || tiles.len() as u32 != cols * (height / side) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} tiles for {width}x{height}", (width / side) * (height / side)),
            got: format!("{}", tiles.len()),
        });
    }
    let mut out = RgbImage::new(width, height);
    for (i, t) in tiles.iter().enumerate() {
        let (tx, ty) = (i as u32 % cols, i as u32 / cols);
        image::imageops::replace(&mut out, &t.to_rgb_image(), (tx * side) as i64, (ty * side) as i64);
    }
    Ok(out)
}

pub fn tile_count(width: u32, height: u32) -> usize {
    let side = SIDE as u32;
    (width.div_ceil(side) * height.div_ceil(side)) as usize
}

/// Channel conditions for one frame transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLink {
    pub channel: ChannelModel,
    pub snr: Snr,
    pub seed: u64,
    pub h_floor: f64,
}

impl FrameLink {
    pub fn new(channel: ChannelModel, snr: Snr, seed: u64) -> Self {
        Self {
            channel,
            snr,
            seed,
            h_floor: DEFAULT_H_FLOOR,
        }
    }
}

/// Sends a frame of any size through one system. Tile `i` uses the channel
/// realization of image `i` in a sweep cell with the same seed.
pub fn transmit_frame(
    system: System,
    params: Option<&CodecParams<f32>>,
    img: &RgbImage,
    link: &FrameLink,
) -> Result<RgbImage> {
    let padded = pad_to_tiles(img);
    let tiles = split_tiles(&padded)?;
    let specs: Vec<_> = (0..tiles.len())
        .map(|i| image_spec(link.seed, system, link.channel, link.snr, i, link.h_floor))
        .collect();
    let out = match system {
        System::Qam256 => tiles.iter().zip(&specs).map(|(t, s)| transmit_qam(t, s)).collect(),
        System::Dnn => {
            let p = params.ok_or_else(|| Error::InvalidConfig("the dnn system needs trained parameters".into()))?;
            transmit_dnn(p, &tiles, &specs)?
        }
    };
    let joined = join_tiles(&out, padded.width(), padded.height())?;
    if (joined.width(), joined.height()) == (img.width(), img.height()) {
        return Ok(joined);
    }
    Ok(image::imageops::crop_imm(&joined, 0, 0, img.width(), img.height()).to_image())
}

fn unit_floats(img: &RgbImage) -> Vec<f32> {
    img.as_raw().iter().map(|&b| b as f32 / 255.0).collect()
}

/// SSIM and PSNR of two equally sized frames (each side at least 11).
pub fn frame_report(reference: &RgbImage, other: &RgbImage) -> Result<MetricReport> {
    if reference.dimensions() != other.dimensions() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference.dimensions()),
            got: format!("{:?}", other.dimensions()),
        });
    }
    let (a, b) = (unit_floats(reference), unit_floats(other));
    let (w, h) = reference.dimensions();
    Ok(MetricReport {
        ssim: metrics::ssim_rgb(&a, &b, w as usize, h as usize)?,
        psnr_db: metrics::psnr_rgb(&a, &b)?,
    })
}
