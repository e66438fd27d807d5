//! SNR sweeps over both systems and both channels, CSV export, and
//! side-by-side reconstruction grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_symbols, ChannelModel, ChannelSpec, Snr, DEFAULT_H_FLOOR};
use crate::codec::{self, CodecParams};
use crate::dataset::{quantize, sample_images, Dataset, ImageU8, Split, PIXELS};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::qam::transmit_qam;
use crate::rng::derive_seed;
use crate::tiling::{frame_report, transmit_frame, FrameLink};
use crate::training::images_to_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "dnn")]
    Dnn,
    #[serde(rename = "qam256")]
    Qam256,
}

impl System {
    pub const ALL: [System; 2] = [System::Dnn, System::Qam256];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Dnn => "dnn",
            System::Qam256 => "qam256",
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "dnn" => Ok(System::Dnn),
            "qam256" => Ok(System::Qam256),
            other => Err(format!("unknown system '{other}' (expected dnn or qam256)")),
        }
    }
}

/// Images per forward pass when running the learned codec. Chunks run on
/// separate threads; the partition is fixed so outputs do not depend on
/// the thread count.
const DNN_CHUNK: usize = 8;

fn transmit_chunk(params: &CodecParams<f32>, imgs: &[ImageU8], specs: &[ChannelSpec]) -> Result<Vec<ImageU8>> {
    let refs: Vec<&ImageU8> = imgs.iter().collect();
    let x = codec::encode(params, &images_to_tensor(&refs), imgs.len())?;
    let mut xh = Vec::with_capacity(x.len());
    for (sym, spec) in x.chunks_exact(PIXELS).zip(specs) {
        xh.extend(transmit_symbols(sym, spec)?);
    }
    let recon = codec::decode(params, &xh, imgs.len())?;
    recon
        .chunks_exact(PIXELS)
        .map(|px| {
            let bytes: Vec<u8> = px.iter().map(|&v| quantize(v)).collect();
            ImageU8::from_pixels(&bytes, None)
        })
        .collect()
}

/// Sends images through the learned link, one channel realization per
/// image, and returns byte reconstructions.
pub fn transmit_dnn(params: &CodecParams<f32>, images: &[ImageU8], specs: &[ChannelSpec]) -> Result<Vec<ImageU8>> {
    assert_eq!(images.len(), specs.len());
    let jobs: Vec<(&[ImageU8], &[ChannelSpec])> = images.chunks(DNN_CHUNK).zip(specs.chunks(DNN_CHUNK)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let results: Vec<Result<Vec<ImageU8>>> = if workers <= 1 {
        jobs.iter().map(|(i, s)| transmit_chunk(params, i, s)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<ImageU8>>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    scope.spawn(move || {
                        (w..jobs.len())
                            .step_by(workers)
                            .map(|j| (j, transmit_chunk(params, jobs[j].0, jobs[j].1)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("codec worker panicked") {
                    slots[j] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk ran")).collect()
    };
    let mut out = Vec::with_capacity(images.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// One image through one system.
pub fn transmit_image(
    system: System,
    params: Option<&CodecParams<f32>>,
    img: &ImageU8,
    spec: &ChannelSpec,
) -> Result<ImageU8> {
    match system {
        System::Qam256 => Ok(transmit_qam(img, spec)),
        System::Dnn => {
            let p = params.ok_or_else(|| Error::InvalidConfig("the dnn system needs trained parameters".into()))?;
            Ok(transmit_dnn(p, std::slice::from_ref(img), std::slice::from_ref(spec))?.remove(0))
        }
    }
}

/// One (system, channel, SNR) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub system: System,
    pub channel: ChannelModel,
    pub snr: Snr,
    pub n_images: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub grid: Vec<Snr>,
    pub channels: Vec<ChannelModel>,
    pub systems: Vec<System>,
    pub n_images: usize,
    pub seed: u64,
    pub h_floor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            channels: ChannelModel::ALL.to_vec(),
            systems: System::ALL.to_vec(),
            n_images: 320,
            seed: 0,
            h_floor: DEFAULT_H_FLOOR,
        }
    }
}

/// 0 to 40 dB in 5 dB steps.
pub fn default_grid() -> Vec<Snr> {
    (0..=8).map(|i| Snr::Db(5.0 * i as f64)).collect()
}

/// Parses `start:stop:step` (inclusive) or a comma list such as `0,10,inf`.
pub fn parse_grid(text: &str) -> std::result::Result<Vec<Snr>, String> {
    let t = text.trim();
    if t.is_empty() {
        return Err("empty SNR grid".into());
    }
    let parts: Vec<&str> = t.split(':').collect();
    if parts.len() == 3 {
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number '{p}' in grid '{t}'")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (start, stop, step) = (nums[0], nums[1], nums[2]);
        if step.is_nan() || step <= 0.0 || !start.is_finite() || !stop.is_finite() || stop < start {
            return Err(format!("grid '{t}' must satisfy start <= stop and step > 0"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| Snr::Db(start + step * i as f64)).collect());
    }
    if parts.len() != 1 {
        return Err(format!("grid '{t}' must be start:stop:step or a comma list"));
    }
    t.split(',').map(|s| s.parse::<Snr>()).collect()
}

/// Per-cell identifier mixed into each image's channel seed.
fn cell_id(system: System, channel: ChannelModel, snr: Snr) -> u64 {
    let snr_bits = match snr {
        Snr::Db(db) => db.to_bits(),
        Snr::Noiseless => u64::MAX,
    };
    derive_seed(&[system as u64, channel as u64, snr_bits])
}

/// Channel spec for image `index` of a cell.
pub fn image_spec(seed: u64, system: System, channel: ChannelModel, snr: Snr, index: usize, h_floor: f64) -> ChannelSpec {
    ChannelSpec::new(channel, snr, derive_seed(&[seed, cell_id(system, channel, snr), index as u64]))
        .with_h_floor(h_floor)
}

fn score(originals: &[ImageU8], recons: &[ImageU8]) -> Vec<MetricReport> {
    originals
        .iter()
        .zip(recons)
        .map(|(a, b)| metrics::report(&a.to_float(), &b.to_float()))
        .collect()
}

/// Runs every (system, channel, SNR) cell on the same seeded test images.
pub fn run_sweep(params: Option<&CodecParams<f32>>, ds: &Dataset, cfg: &SweepConfig) -> Result<Vec<EvalRecord>> {
    if cfg.systems.contains(&System::Dnn) && params.is_none() {
        return Err(Error::InvalidConfig("the dnn system needs trained parameters".into()));
    }
    let images = sample_images(ds, Split::Test, cfg.n_images, cfg.seed)?;
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut records = Vec::new();
    for &system in &cfg.systems {
        for &channel in &cfg.channels {
            for &snr in &cfg.grid {
                let specs: Vec<ChannelSpec> = (0..images.len())
                    .map(|i| image_spec(cfg.seed, system, channel, snr, i, cfg.h_floor))
                    .collect();
                let recons = match system {
                    System::Qam256 => images.iter().zip(&specs).map(|(img, s)| transmit_qam(img, s)).collect(),
                    System::Dnn => transmit_dnn(params.unwrap(), &images, &specs)?,
                };
                let agg = metrics::aggregate_reports(&score(&images, &recons))?;
                log::debug!("{system} {channel} {snr}: ssim {:.4}", agg.ssim_mean);
                records.push(EvalRecord {
                    system,
                    channel,
                    snr,
                    n_images: images.len(),
                    ssim_mean: agg.ssim_mean,
                    ssim_std: agg.ssim_std,
                    psnr_mean_db: agg.psnr_mean,
                    seed: cfg.seed,
                });
            }
        }
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        (a.system, a.channel)
            .cmp(&(b.system, b.channel))
            .then(a.snr.sort_key().partial_cmp(&b.snr.sort_key()).unwrap())
    });
}

pub const CSV_HEADER: &str = "system,channel,snr_db,n_images,ssim_mean,ssim_std,psnr_mean_db,seed";

/// Six significant digits; `inf`/`-inf`/`nan` for non-finite values.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn format_snr(s: Snr) -> String {
    match s {
        Snr::Noiseless => "inf".into(),
        Snr::Db(db) => format_sig6(db),
    }
}

/// CSV text with rows sorted by (system, channel, snr_db).
pub fn format_csv(records: &[EvalRecord]) -> String {
    let mut rows = records.to_vec();
    sort_records(&mut rows);
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.system,
            r.channel,
            format_snr(r.snr),
            r.n_images,
            format_sig6(r.ssim_mean),
            format_sig6(r.ssim_std),
            format_sig6(r.psnr_mean_db),
            r.seed
        );
    }
    out
}

pub fn write_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    fs::write(path, format_csv(records)).map_err(|e| Error::io(path, e))
}

/// Parses text produced by [`format_csv`].
pub fn parse_csv(text: &str) -> std::result::Result<Vec<EvalRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing or unexpected header".into());
    }
    let num = |s: &str| -> std::result::Result<f64, String> {
        match s {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => s.parse().map_err(|_| format!("bad number '{s}'")),
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("expected 8 fields in '{line}'"));
            }
            Ok(EvalRecord {
                system: f[0].parse()?,
                channel: f[1].parse()?,
                snr: f[2].parse()?,
                n_images: f[3].parse().map_err(|_| format!("bad count '{}'", f[3]))?,
                ssim_mean: num(f[4])?,
                ssim_std: num(f[5])?,
                psnr_mean_db: num(f[6])?,
                seed: f[7].parse().map_err(|_| format!("bad seed '{}'", f[7]))?,
            })
        })
        .collect()
}

/// One written file of a comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub system: String,
    pub snr_db: Option<Snr>,
    pub ssim: f64,
}

fn snr_label(s: Snr) -> String {
    match s {
        Snr::Noiseless => "inf".into(),
        Snr::Db(db) => format!("{db}"),
    }
}

/// Writes `original.png` plus one PNG per (system, SNR) and a
/// `manifest.json` listing each file with its SSIM against the original.
/// Frames of any size are sent as 32×32 tiles.
pub fn render_comparison(
    params: Option<&CodecParams<f32>>,
    img: &RgbImage,
    grid: &[Snr],
    channel: ChannelModel,
    systems: &[System],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let save = |im: &RgbImage, file: &str| -> Result<()> {
        im.save_with_format(out_dir.join(file), image::ImageFormat::Png)?;
        Ok(())
    };
    save(img, "original.png")?;
    let mut manifest = vec![ManifestEntry {
        file: "original.png".into(),
        system: "original".into(),
        snr_db: None,
        ssim: 1.0,
    }];
    for &system in systems {
        for &snr in grid {
            let recon = transmit_frame(system, params, img, &FrameLink::new(channel, snr, seed))?;
            let file = format!("{system}_{channel}_{}.png", snr_label(snr));
            save(&recon, &file)?;
            manifest.push(ManifestEntry {
                file,
                system: system.to_string(),
                snr_db: Some(snr),
                ssim: frame_report(img, &recon)?.ssim,
            });
        }
    }
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(23.4567891), "23.4568");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(f64::INFINITY), "inf");
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:40:5").unwrap(), default_grid());
        assert_eq!(parse_grid("0:40:5").unwrap().len(), 9);
        assert_eq!(
            parse_grid("0,12.5,inf").unwrap(),
            vec![Snr::Db(0.0), Snr::Db(12.5), Snr::Noiseless]
        );
        assert!(parse_grid("").is_err());
        assert!(parse_grid("5:0:1").is_err());
        assert!(parse_grid("0:10:0").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(format_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rows_are_sorted() {
        let rec = |system, channel, snr| EvalRecord {
            system,
            channel,
            snr,
            n_images: 1,
            ssim_mean: 0.5,
            ssim_std: 0.0,
            psnr_mean_db: 20.0,
            seed: 1,
        };
        let recs = vec![
            rec(System::Qam256, ChannelModel::Awgn, Snr::Db(0.0)),
            rec(System::Dnn, ChannelModel::Rayleigh, Snr::Noiseless),
            rec(System::Dnn, ChannelModel::Rayleigh, Snr::Db(10.0)),
            rec(System::Dnn, ChannelModel::Awgn, Snr::Db(5.0)),
        ];
        let csv = format_csv(&recs);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("dnn,awgn,5.00000,"));
        assert!(lines[2].starts_with("dnn,rayleigh,10.0000,"));
        assert!(lines[3].starts_with("dnn,rayleigh,inf,"));
        assert!(lines[4].starts_with("qam256,awgn,0,"));
    }
}
