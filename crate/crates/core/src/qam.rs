//! Gray-coded square 256-QAM carrying one pixel byte per symbol.
//!
//! The high nibble selects the in-phase level and the low nibble the
//! quadrature level. Each nibble is a binary-reflected Gray label `g` of a
//! level index `k` (`g = k ^ (k >> 1)`), and level `k` has amplitude
//! `2k − 15`. Points are scaled by `1/sqrt(170)` so the constellation has
//! unit mean power.

use num_complex::Complex64;

use crate::channel::{sample_complex_noise, sample_gain, ChannelModel, ChannelSpec};
use crate::dataset::ImageU8;
use crate::rng::SimRng;

pub const LEVELS: usize = 16;
/// Mean squared amplitude of the unscaled constellation (85 per axis).
pub const RAW_MEAN_POWER: f64 = 170.0;

pub fn gray_encode(k: u8) -> u8 {
    k ^ (k >> 1)
}

pub fn gray_decode(mut g: u8) -> u8 {
    let mut k = g;
    while g > 0 {
        g >>= 1;
        k ^= g;
    }
    k
}

fn scale() -> f64 {
    1.0 / RAW_MEAN_POWER.sqrt()
}

fn nibble_amplitude(g: u8) -> f64 {
    2.0 * gray_decode(g) as f64 - 15.0
}

/// The 256 constellation points indexed by byte label.
#[derive(Debug, Clone)]
pub struct Constellation256 {
    points: [Complex64; 256],
}

impl Default for Constellation256 {
    fn default() -> Self {
        Self::new()
    }
}

impl Constellation256 {
    pub fn new() -> Self {
        let mut points = [Complex64::new(0.0, 0.0); 256];
        for (b, p) in points.iter_mut().enumerate() {
            *p = map_symbol(b as u8);
        }
        Self { points }
    }

    pub fn points(&self) -> &[Complex64; 256] {
        &self.points
    }

    pub fn point(&self, label: u8) -> Complex64 {
        self.points[label as usize]
    }
}

/// Symbol for one byte.
pub fn map_symbol(b: u8) -> Complex64 {
    Complex64::new(nibble_amplitude(b >> 4), nibble_amplitude(b & 0x0F)) * scale()
}

pub fn map_qam256(bytes: &[u8]) -> Vec<Complex64> {
    bytes.iter().map(|&b| map_symbol(b)).collect()
}

/// Nearest level along one axis, returned as its Gray label. A value lying
/// on the midpoint of two levels (within 1e-9 level units) resolves to the
/// smaller label.
fn detect_axis(v: f64) -> u8 {
    let u = v / scale();
    let t = ((u + 15.0) / 2.0).clamp(0.0, 15.0);
    let lo = t.floor();
    let frac = t - lo;
    let lo = lo as u8;
    if lo == 15 {
        return gray_encode(15);
    }
    let hi = lo + 1;
    if (frac - 0.5).abs() <= 1e-9 {
        gray_encode(lo).min(gray_encode(hi))
    } else if frac < 0.5 {
        gray_encode(lo)
    } else {
        gray_encode(hi)
    }
}

/// Hard minimum-distance detection. The square grid makes the 2-D nearest
/// point the product of the per-axis nearest levels, and the smallest byte
/// among tied points is the one with the smallest label on each axis.
pub fn demap_symbol(s: Complex64) -> u8 {
    (detect_axis(s.re) << 4) | detect_axis(s.im)
}

pub fn demap_qam256(symbols: &[Complex64]) -> Vec<u8> {
    symbols.iter().map(|&s| demap_symbol(s)).collect()
}

/// Sends every byte of `bytes` through the channel and detects it.
pub fn transmit_bytes(bytes: &[u8], spec: &ChannelSpec) -> Vec<u8> {
    let noise_var = spec.snr.noise_var();
    let mut rng = SimRng::new(spec.seed);
    bytes
        .iter()
        .map(|&b| {
            let s = map_symbol(b);
            let h = match spec.model {
                ChannelModel::Awgn => Complex64::new(1.0, 0.0),
                ChannelModel::Rayleigh => sample_gain(&mut rng, spec.h_floor),
            };
            let n = if noise_var > 0.0 {
                sample_complex_noise(&mut rng, noise_var)
            } else {
                Complex64::new(0.0, 0.0)
            };
            demap_symbol((h * s + n) / h)
        })
        .collect()
}

/// Baseline transmission of an image, one symbol per pixel byte.
pub fn transmit_qam(img: &ImageU8, spec: &ChannelSpec) -> ImageU8 {
    let out = transmit_bytes(img.pixels(), spec);
    ImageU8::from_pixels(&out, img.label()).expect("same length as input")
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Symbol error rate of square 256-QAM over AWGN at a linear SNR.
pub fn ser_closed_form_linear(snr: f64) -> f64 {
    let p_axis = 2.0 * (1.0 - 1.0 / LEVELS as f64) * q_function((3.0 * snr / 255.0).sqrt());
    1.0 - (1.0 - p_axis).powi(2)
}

pub fn ser_closed_form(snr_db: f64) -> f64 {
    ser_closed_form_linear(10f64.powf(snr_db / 10.0))
}

/// Monte Carlo AWGN symbol error count over `n` uniformly random bytes.
pub fn simulate_ser(snr_db: f64, n: u64, seed: u64) -> (u64, u64) {
    let noise_var = crate::channel::snr_to_noise_var(snr_db);
    let mut rng = SimRng::new(seed);
    let mut errors = 0;
    for _ in 0..n {
        let b = (rng.next_u64() & 0xFF) as u8;
        let y = map_symbol(b) + sample_complex_noise(&mut rng, noise_var);
        if demap_symbol(y) != b {
            errors += 1;
        }
    }
    (errors, n)
}
