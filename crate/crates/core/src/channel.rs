//! Power normalization, AWGN and flat Rayleigh fading, and perfect-CSI
//! equalization.
//!
//! Signal power is one per symbol after normalization, so the noise variance
//! is `10^(-snr_db / 10)`. AWGN adds real Gaussian noise to the real
//! symbols. Rayleigh draws an independent circular complex gain per symbol
//! (`E|h|² = 1`) and adds complex circular noise of total variance `σ²`.
//! Gains with magnitude below the configured floor are redrawn.

use num_complex::Complex64;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Default lower bound on `|h|`.
pub const DEFAULT_H_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
}

impl ChannelModel {
    pub const ALL: [ChannelModel; 2] = [ChannelModel::Awgn, ChannelModel::Rayleigh];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelModel::Awgn => "awgn",
            ChannelModel::Rayleigh => "rayleigh",
        }
    }
}

impl std::fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelModel::Awgn),
            "rayleigh" => Ok(ChannelModel::Rayleigh),
            other => Err(format!("unknown channel model '{other}' (expected awgn or rayleigh)")),
        }
    }
}

/// Signal-to-noise ratio, with an explicit noiseless sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Noiseless,
}

impl Snr {
    /// `σ²` for unit signal power.
    pub fn noise_var(self) -> f64 {
        match self {
            Snr::Db(db) => snr_to_noise_var(db),
            Snr::Noiseless => 0.0,
        }
    }

    /// Decibel value, `+∞` for the noiseless sentinel.
    pub fn db(self) -> f64 {
        match self {
            Snr::Db(db) => db,
            Snr::Noiseless => f64::INFINITY,
        }
    }

    pub fn from_db(db: f64) -> Self {
        if db == f64::INFINITY {
            Snr::Noiseless
        } else {
            Snr::Db(db)
        }
    }

    /// Sort key placing the noiseless sentinel after every finite value.
    pub fn sort_key(self) -> (u8, f64) {
        match self {
            Snr::Db(db) => (0, db),
            Snr::Noiseless => (1, 0.0),
        }
    }
}

/// Serialized as a JSON number, or the string `"inf"` for the noiseless
/// sentinel.
impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Db(db) => s.serialize_f64(*db),
            Snr::Noiseless => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() => Ok(Snr::Db(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("invalid SNR {v}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Db(db) => write!(f, "{db}"),
            Snr::Noiseless => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = String;

    /// Accepts a finite decibel number or `inf`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("+inf") {
            return Ok(Snr::Noiseless);
        }
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Snr::Db(v)),
            _ => Err(format!("invalid SNR '{t}' (expected a finite dB value or 'inf')")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub model: ChannelModel,
    pub snr: Snr,
    pub seed: u64,
    pub h_floor: f64,
}

impl ChannelSpec {
    pub fn new(model: ChannelModel, snr: Snr, seed: u64) -> Self {
        Self {
            model,
            snr,
            seed,
            h_floor: DEFAULT_H_FLOOR,
        }
    }

    pub fn with_h_floor(mut self, h_floor: f64) -> Self {
        self.h_floor = h_floor;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Normalized real symbols and the coefficient that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<f64>,
    pub power_coeff: f64,
}

/// Channel output with the realized gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedBlock {
    pub received: Vec<Complex64>,
    pub gains: Vec<Complex64>,
    pub noise_var: f64,
}

/// `σ² = 10^(-snr_db / 10)`.
pub fn snr_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Root-mean-square power coefficient of a block.
pub fn power_coeff<T: Float>(x: &[T]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ms = x.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / x.len() as f64;
    if ms == 0.0 || !ms.is_finite() {
        return Err(Error::DegenerateBlock);
    }
    Ok(ms.sqrt())
}

/// Scales `x` to unit mean-square: `c = sqrt(mean(x²))`, `x̄ = x / c`.
pub fn normalize_power<T: Float>(x: &[T]) -> Result<SymbolBlock> {
    let c = power_coeff(x)?;
    Ok(SymbolBlock {
        symbols: x.iter().map(|v| v.to_f64().unwrap() / c).collect(),
        power_coeff: c,
    })
}

/// Circular complex Gaussian gain with `E|h|² = 1`, redrawn below `floor`.
pub fn sample_gain(rng: &mut SimRng, floor: f64) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    loop {
        let (a, b) = rng.gaussian_pair();
        let h = Complex64::new(a * s, b * s);
        if h.norm() >= floor {
            return h;
        }
    }
}

/// Complex circular noise of total variance `noise_var`.
pub fn sample_complex_noise(rng: &mut SimRng, noise_var: f64) -> Complex64 {
    let (a, b) = rng.gaussian_pair();
    let s = (noise_var / 2.0).sqrt();
    Complex64::new(a * s, b * s)
}

/// One realized channel use for symbol `x`. Consumes the stream in a fixed
/// order (gain, then noise) shared by every transmit path.
fn channel_use(rng: &mut SimRng, spec: &ChannelSpec, noise_var: f64) -> (Complex64, Complex64) {
    match spec.model {
        ChannelModel::Awgn => {
            let n = if noise_var > 0.0 {
                rng.gaussian() * noise_var.sqrt()
            } else {
                0.0
            };
            (Complex64::new(1.0, 0.0), Complex64::new(n, 0.0))
        }
        ChannelModel::Rayleigh => {
            let h = sample_gain(rng, spec.h_floor);
            let n = if noise_var > 0.0 {
                sample_complex_noise(rng, noise_var)
            } else {
                Complex64::new(0.0, 0.0)
            };
            (h, n)
        }
    }
}

/// `y = h·x̄ + n` per symbol.
pub fn apply_channel(block: &SymbolBlock, spec: &ChannelSpec) -> ReceivedBlock {
    let noise_var = spec.snr.noise_var();
    let mut rng = SimRng::new(spec.seed);
    let mut received = Vec::with_capacity(block.symbols.len());
    let mut gains = Vec::with_capacity(block.symbols.len());
    for &x in &block.symbols {
        let (h, n) = channel_use(&mut rng, spec, noise_var);
        received.push(h * x + n);
        gains.push(h);
    }
    ReceivedBlock {
        received,
        gains,
        noise_var,
    }
}

/// Perfect-CSI estimate `x̂ = Re(c·y/h)`.
pub fn equalize(rx: &ReceivedBlock, power_coeff: f64) -> Vec<f64> {
    rx.received
        .iter()
        .zip(&rx.gains)
        .map(|(y, h)| (y / h).re * power_coeff)
        .collect()
}

/// Normalize, transmit and equalize a block of real symbols.
pub fn transmit_symbols<T: Float>(x: &[T], spec: &ChannelSpec) -> Result<Vec<T>> {
    let block = normalize_power(x)?;
    let rx = apply_channel(&block, spec);
    Ok(equalize(&rx, block.power_coeff)
        .into_iter()
        .map(|v| T::from(v).unwrap())
        .collect())
}

/// The collapsed training form of normalize → channel → equalize:
/// `x̂ = x + c·Re(n/h)`. With the realization held fixed the map is a
/// translation, so its Jacobian is the identity.
pub fn channel_pass_training<T: Float>(x: &[T], spec: &ChannelSpec) -> Result<Vec<T>> {
    let c = power_coeff(x)?;
    let noise_var = spec.snr.noise_var();
    let mut rng = SimRng::new(spec.seed);
    Ok(x.iter()
        .map(|&xi| {
            let (h, n) = channel_use(&mut rng, spec, noise_var);
            xi + T::from(c * (n / h).re).unwrap()
        })
        .collect())
}

/// Gradient of [`channel_pass_training`] with respect to its input.
pub fn channel_pass_backward<T: Float>(grad_out: &[T]) -> Vec<T> {
    grad_out.to_vec()
}
