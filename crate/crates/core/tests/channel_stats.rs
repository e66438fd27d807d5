use semlink::channel::{apply_channel, normalize_power, sample_gain, ChannelModel, ChannelSpec, Snr};
use semlink::qam::{ser_closed_form, simulate_ser};
use semlink::rng::SimRng;

const N: usize = 1_000_000;

/// Kolmogorov–Smirnov distance of a sample against a continuous CDF.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn rayleigh_magnitudes_follow_closed_form_cdf() {
    let mut rng = SimRng::new(2024);
    let mags: Vec<f64> = (0..N).map(|_| sample_gain(&mut rng, 1e-3).norm()).collect();
    let power = mags.iter().map(|m| m * m).sum::<f64>() / N as f64;
    // |h|² is Exp(1): standard deviation of the mean is 1/sqrt(N).
    assert!((power - 1.0).abs() < 5.0 / (N as f64).sqrt(), "E|h|^2 = {power}");
    let d = ks_statistic(mags, |r| 1.0 - (-r * r).exp());
    assert!(d < 0.01, "KS statistic {d}");
}

#[test]
fn ks_rejects_a_wrong_scale() {
    let mut rng = SimRng::new(7);
    let mags: Vec<f64> = (0..100_000).map(|_| 1.2 * sample_gain(&mut rng, 1e-3).norm()).collect();
    assert!(ks_statistic(mags, |r| 1.0 - (-r * r).exp()) > 0.05);
}

#[test]
fn awgn_noise_variance_matches_snr() {
    let block = normalize_power(&vec![1.0f64; N]).unwrap();
    for db in [0.0, 10.0, 20.0] {
        let rx = apply_channel(&block, &ChannelSpec::new(ChannelModel::Awgn, Snr::Db(db), 5));
        let var = rx.received.iter().map(|y| (y.re - 1.0).powi(2)).sum::<f64>() / N as f64;
        let expect = 10f64.powf(-db / 10.0);
        // Sample variance of N Gaussians has relative sd sqrt(2/N).
        assert!((var / expect - 1.0).abs() < 5.0 * (2.0 / N as f64).sqrt(), "{db} dB: {var}");
        assert!(rx.received.iter().all(|y| y.im == 0.0));
    }
}

#[test]
fn rayleigh_noise_is_circular_with_total_variance() {
    let block = normalize_power(&vec![1.0f64; N]).unwrap();
    let rx = apply_channel(&block, &ChannelSpec::new(ChannelModel::Rayleigh, Snr::Db(3.0), 8));
    let (mut re, mut im) = (0.0, 0.0);
    for (y, h) in rx.received.iter().zip(&rx.gains) {
        let n = y - h;
        re += n.re * n.re;
        im += n.im * n.im;
    }
    let expect = 10f64.powf(-0.3) / 2.0;
    for v in [re / N as f64, im / N as f64] {
        assert!((v / expect - 1.0).abs() < 0.01, "per-axis variance {v}");
    }
}

#[test]
fn qam_ser_tracks_theory_at_moderate_scale() {
    for db in [15.0, 20.0] {
        let (errs, n) = simulate_ser(db, 1_000_000, 31);
        let p = ser_closed_form(db);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let est = errs as f64 / n as f64;
        assert!((est - p).abs() < 3.0 * sd, "{db} dB: {est} vs {p} (sd {sd})");
    }
}
