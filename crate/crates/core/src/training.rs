//! The two-phase training curriculum.
//!
//! Phase one minimizes pixel MSE over a Rayleigh channel at 35 dB, phase two
//! fine-tunes with MAE at 15 dB, each for 150 epochs with Adam at
//! lr = 0.002. Every batch gets fresh fading and noise derived from the run
//! seed; optimizer moments are reset between phases.
//!
//! All arithmetic runs on one thread in a fixed order, so a run is a pure
//! function of (dataset, config, schedule) down to the last bit.

use std::path::PathBuf;

use crate::channel::{channel_pass_training, ChannelModel, ChannelSpec, Snr, DEFAULT_H_FLOOR};
use crate::checkpoint::{save_checkpoint, Checkpoint, SchedulePosition};
use crate::codec::{self, CodecConfig, CodecParams, Gradients};
use crate::dataset::{ImageU8, PIXELS};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::rng::{derive_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }
}

fn check_pair<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", target.len()),
            got: format!("{} values", pred.len()),
        });
    }
    Ok(())
}

/// Mean squared or mean absolute error over every element.
pub fn loss<T: Scalar>(pred: &[T], target: &[T], kind: LossKind) -> Result<f64> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t).to_f64().unwrap();
            match kind {
                LossKind::Mse => d * d,
                LossKind::Mae => d.abs(),
            }
        })
        .sum();
    Ok(sum / n)
}

/// Loss value and its gradient with respect to `pred`. The MAE subgradient
/// at zero is zero.
pub fn loss_grad<T: Scalar>(pred: &[T], target: &[T], kind: LossKind) -> Result<(f64, Vec<T>)> {
    let value = loss(pred, target, kind)?;
    let inv_n = T::one() / T::from_usize(pred.len()).unwrap();
    let two = T::lit(2.0);
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            match kind {
                LossKind::Mse => two * d * inv_n,
                LossKind::Mae => {
                    if d > T::zero() {
                        inv_n
                    } else if d < T::zero() {
                        -inv_n
                    } else {
                        T::zero()
                    }
                }
            }
        })
        .collect();
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(p: &CodecParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = p.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice at step `t`
/// (1-based).
pub fn adam_update<T: Scalar>(theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(t as f64));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every tensor. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut CodecParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (t, g) in params.tensors().iter().zip(&grads.tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: t.name.clone() });
        }
    }
    state.step += 1;
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        adam_update(&mut t.data, &grads.tensors[i], &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
    Ok(())
}

/// How the symbols are corrupted between encoder and decoder.
#[derive(Debug, Clone, Copy)]
pub enum Perturbation<'a, T> {
    /// Each image `i` of the batch crosses the channel with seed
    /// `derive_seed([spec.seed, i])`.
    Channel(ChannelSpec),
    /// A fixed additive realization `x̂ = x + δ`.
    Fixed(&'a [T]),
}

/// Per-image channel realizations expressed as additive offsets `x̂ − x`.
pub fn channel_offsets<T: Scalar>(symbols: &[T], spec: &ChannelSpec) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(symbols.len());
    for (i, x) in symbols.chunks_exact(PIXELS).enumerate() {
        let s = spec.with_seed(derive_seed(&[spec.seed, i as u64]));
        let xh = channel_pass_training(x, &s)?;
        out.extend(xh.iter().zip(x).map(|(&a, &b)| a - b));
    }
    Ok(out)
}

fn perturb<T: Scalar>(symbols: &[T], how: Perturbation<'_, T>) -> Result<Vec<T>> {
    let offsets;
    let delta = match how {
        Perturbation::Channel(spec) => {
            offsets = channel_offsets(symbols, &spec)?;
            &offsets[..]
        }
        Perturbation::Fixed(d) => {
            if d.len() != symbols.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} offsets", symbols.len()),
                    got: format!("{}", d.len()),
                });
            }
            d
        }
    };
    Ok(symbols.iter().zip(delta).map(|(&x, &n)| x + n).collect())
}

/// Forward pass of the whole link; returns the loss and the sign pattern of
/// every ReLU (useful to detect non-smooth points).
pub fn forward_loss<T: Scalar>(
    params: &CodecParams<T>,
    images: &[T],
    batch: usize,
    how: Perturbation<'_, T>,
    kind: LossKind,
) -> Result<(f64, Vec<bool>)> {
    let (x, et) = codec::encode_forward(params, images, batch)?;
    let xh = perturb(&x, how)?;
    let (out, dt) = codec::decode_forward(params, &xh, batch)?;
    let mut pattern = et.activation_pattern();
    pattern.extend(dt.activation_pattern());
    Ok((loss(&out, images, kind)?, pattern))
}

/// Loss and parameter gradients for reconstructing `images` through the
/// link. The channel is a fixed translation in the backward pass.
pub fn loss_and_gradients<T: Scalar>(
    params: &CodecParams<T>,
    images: &[T],
    batch: usize,
    how: Perturbation<'_, T>,
    kind: LossKind,
) -> Result<(f64, Gradients<T>)> {
    let (x, et) = codec::encode_forward(params, images, batch)?;
    let xh = perturb(&x, how)?;
    let (out, dt) = codec::decode_forward(params, &xh, batch)?;
    let (value, d_out) = loss_grad(&out, images, kind)?;
    let mut grads = Gradients::zeros_like(params);
    let d_xh = codec::decode_backward(params, &dt, &d_out, &mut grads);
    let d_x = crate::channel::channel_pass_backward(&d_xh);
    codec::encode_backward(params, &et, &d_x, &mut grads);
    Ok((value, grads))
}

/// Interleaved float tensor `[B, 32, 32, 3]` of a set of images.
pub fn images_to_tensor(images: &[&ImageU8]) -> Vec<f32> {
    let mut out = Vec::with_capacity(images.len() * PIXELS);
    for img in images {
        out.extend(img.pixels().iter().map(|&b| b as f32 / 255.0));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub epochs: u32,
    pub snr_db: f64,
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 150 + 150 epochs on the full training split.
    Full,
    /// 20 + 20 epochs on the full training split.
    Desk,
    /// 10 + 10 epochs on a 5,000-image subset.
    Tiny,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            "tiny" => Ok(Profile::Tiny),
            other => Err(format!("unknown profile '{other}' (expected full, desk or tiny)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub channel: ChannelModel,
    pub h_floor: f64,
    pub seed: u64,
    /// Deterministic training subset size; `None` uses every image.
    pub max_images: Option<usize>,
    /// Write a checkpoint every this many epochs (0 = only at phase ends).
    pub checkpoint_every: u32,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::for_profile(Profile::Full, 0)
    }
}

impl TrainSchedule {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        let (epochs, max_images) = match profile {
            Profile::Full => (150, None),
            Profile::Desk => (20, None),
            Profile::Tiny => (10, Some(5_000)),
        };
        Self {
            phases: vec![
                Phase {
                    epochs,
                    snr_db: 35.0,
                    loss: LossKind::Mse,
                },
                Phase {
                    epochs,
                    snr_db: 15.0,
                    loss: LossKind::Mae,
                },
            ],
            batch_size: 128,
            adam: AdamConfig::default(),
            channel: ChannelModel::Rayleigh,
            h_floor: DEFAULT_H_FLOOR,
            seed,
            max_images,
            checkpoint_every: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub phase: u32,
    pub epoch: u32,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// Output paths and resume state for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Runs the schedule and returns the final parameters with the loss history.
pub fn train(
    images: &[ImageU8],
    cfg: &CodecConfig,
    sched: &TrainSchedule,
    mut opts: TrainOptions<'_>,
) -> Result<(CodecParams<f32>, History)> {
    sched.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pool: Vec<&ImageU8> = match sched.max_images {
        Some(n) if n < images.len() => crate::dataset::sample_indices(images.len(), n, sched.seed)?
            .into_iter()
            .map(|i| &images[i])
            .collect(),
        _ => images.iter().collect(),
    };

    let (mut params, mut adam, mut history, start) = match opts.resume.take() {
        Some(ck) => {
            if ck.params.config() != cfg {
                return Err(Error::ConfigMismatch);
            }
            (ck.params, ck.adam, ck.history, ck.position)
        }
        None => {
            let p = CodecParams::<f32>::init(cfg, derive_seed(&[sched.seed, 0]))?;
            let a = AdamState::new(&p);
            (p, a, History::default(), SchedulePosition::default())
        }
    };

    let save = |params: &CodecParams<f32>, adam: &AdamState<f32>, history: &History, pos: SchedulePosition| -> Result<()> {
        if let Some(path) = &opts.checkpoint_path {
            let ck = Checkpoint {
                params: params.clone(),
                adam: adam.clone(),
                position: pos,
                seed: sched.seed,
                history: history.clone(),
            };
            save_checkpoint(path, &ck)?;
        }
        Ok(())
    };

    for (pi, phase) in sched.phases.iter().enumerate() {
        let pi = pi as u32;
        if pi < start.phase {
            continue;
        }
        let first_epoch = if pi == start.phase { start.epoch } else { 0 };
        if pi != start.phase || (start.epoch == 0 && pi > 0) {
            adam = AdamState::new(&params);
        }
        for epoch in first_epoch..phase.epochs {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            SimRng::derived(&[sched.seed, 1, pi as u64, epoch as u64]).shuffle(&mut order);
            let mut weighted = 0.0;
            for (bi, chunk) in order.chunks(sched.batch_size).enumerate() {
                let batch: Vec<&ImageU8> = chunk.iter().map(|&i| pool[i]).collect();
                let x = images_to_tensor(&batch);
                let spec = ChannelSpec::new(
                    sched.channel,
                    Snr::Db(phase.snr_db),
                    derive_seed(&[sched.seed, 2, pi as u64, epoch as u64, bi as u64]),
                )
                .with_h_floor(sched.h_floor);
                let (value, grads) =
                    loss_and_gradients(&params, &x, batch.len(), Perturbation::Channel(spec), phase.loss)?;
                adam_step(&mut params, &grads, &mut adam, &sched.adam)?;
                weighted += value * batch.len() as f64;
            }
            let rec = EpochRecord {
                phase: pi,
                epoch,
                mean_loss: weighted / pool.len() as f64,
            };
            log::info!(
                "phase {} epoch {} {} {:.6}",
                pi + 1,
                epoch + 1,
                phase.loss.as_str(),
                rec.mean_loss
            );
            history.epochs.push(rec);
            if let Some(cb) = opts.on_epoch.as_mut() {
                cb(&rec);
            }
            let next = if epoch + 1 == phase.epochs {
                SchedulePosition { phase: pi + 1, epoch: 0 }
            } else {
                SchedulePosition { phase: pi, epoch: epoch + 1 }
            };
            let periodic = sched.checkpoint_every > 0 && (epoch + 1) % sched.checkpoint_every == 0;
            if periodic || epoch + 1 == phase.epochs {
                save(&params, &adam, &history, next)?;
            }
        }
    }
    if sched.phases.iter().all(|p| p.epochs == 0) {
        save(&params, &adam, &history, SchedulePosition { phase: sched.phases.len() as u32, epoch: 0 })?;
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_closed_forms() {
        let a = vec![0.3f64; 12];
        assert_eq!(loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert_eq!(loss(&a, &a, LossKind::Mae).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((loss(&b, &a, LossKind::Mse).unwrap() - 0.25).abs() < 1e-15);
        assert!((loss(&b, &a, LossKind::Mae).unwrap() - 0.5).abs() < 1e-15);
        assert!(loss(&a[..3], &a, LossKind::Mse).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let mut r = SimRng::new(2);
        let p: Vec<f64> = (0..20).map(|_| r.uniform()).collect();
        let t: Vec<f64> = (0..20).map(|_| r.uniform()).collect();
        for kind in [LossKind::Mse, LossKind::Mae] {
            let (_, g) = loss_grad(&p, &t, kind).unwrap();
            for i in 0..p.len() {
                let mut q = p.clone();
                q[i] += 1e-7;
                let up = loss(&q, &t, kind).unwrap();
                q[i] -= 2e-7;
                let dn = loss(&q, &t, kind).unwrap();
                assert!(((up - dn) / 2e-7 - g[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn adam_single_step() {
        let mut th = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut th, &[1.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert!((th[0] + 0.002 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut th = [0.7f64];
        adam_update(&mut th, &[0.0], &mut [0.0], &mut [0.0], 1, &AdamConfig::default());
        assert_eq!(th[0], 0.7);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let cfg = AdamConfig::default();
        let mut th = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=100 {
            let g = [th[0]];
            adam_update(&mut th, &g, &mut m, &mut v, t, &cfg);
        }
        assert!(th[0].abs() < 1.0);
        assert!((th[0] - 0.8).abs() < 0.01, "{}", th[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = CodecParams::<f32>::init(&CodecConfig::tiny(), 0).unwrap();
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.tensors[3][0] = f32::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains(&before.tensors()[3].name));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn profiles() {
        let s = TrainSchedule::default();
        assert_eq!(s.phases[0], Phase { epochs: 150, snr_db: 35.0, loss: LossKind::Mse });
        assert_eq!(s.phases[1], Phase { epochs: 150, snr_db: 15.0, loss: LossKind::Mae });
        assert_eq!(s.channel, ChannelModel::Rayleigh);
        assert_eq!(s.adam.lr, 0.002);
        assert_eq!(s.batch_size, 128);
        let t = TrainSchedule::for_profile(Profile::Tiny, 1);
        assert_eq!(t.max_images, Some(5000));
        assert_eq!(t.phases[0].epochs, 10);
        assert_eq!(TrainSchedule::for_profile(Profile::Desk, 1).phases[1].epochs, 20);
    }
}
