//! Acceptance criteria P1–P7, one PASS/FAIL line each.
//!
//! P5 and P6 need CIFAR-10 (`SEMLINK_DATA`, the python-format batch
//! directory) and either a desk-profile checkpoint (`SEMLINK_CKPT`) or the
//! hours it takes to train one. Without the dataset they are reported as
//! FAIL with the reason; such blocked failures only affect the exit status
//! when `SEMLINK_ACCEPT_STRICT` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use semlink::channel::{normalize_power, sample_gain, transmit_symbols, ChannelModel, ChannelSpec, Snr};
use semlink::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, Checkpoint};
use semlink::codec::{self, param_count, CodecConfig, CodecParams};
use semlink::dataset::{load_cifar10, synthetic_images, to_float, write_synthetic_dataset, Dataset, ImageF};
use semlink::harness::{format_csv, parse_csv, run_sweep, EvalRecord, SweepConfig, System};
use semlink::metrics::ssim;
use semlink::qam::{demap_symbol, map_symbol, ser_closed_form, simulate_ser, transmit_bytes, Constellation256};
use semlink::rng::SimRng;
use semlink::training::{
    channel_offsets, forward_loss, loss_and_gradients, train, LossKind, Perturbation, Profile, TrainOptions,
    TrainSchedule,
};

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Check = Result<String, String>;
type NamedCheck = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- P1

fn unit_power() -> Check {
    let mut rng = SimRng::new(1);
    for trial in 0..2000 {
        let n = 1 + rng.below(4096);
        let scale = 10f64.powf(rng.uniform_range(-6.0, 6.0));
        let x: Vec<f64> = (0..n).map(|_| scale * rng.gaussian()).collect();
        let b = normalize_power(&x).map_err(|e| e.to_string())?;
        let p = b.symbols.iter().map(|v| v * v).sum::<f64>() / n as f64;
        ensure((p - 1.0).abs() < 1e-12, || format!("trial {trial}: mean power {p}"))?;
    }
    Ok("2000 random blocks at unit power".into())
}

fn noiseless_roundtrip() -> Check {
    let mut rng = SimRng::new(2);
    for model in ChannelModel::ALL {
        for seed in 0..200 {
            let x: Vec<f64> = (0..3072).map(|_| rng.gaussian() * 3.0).collect();
            let y = transmit_symbols(&x, &ChannelSpec::new(model, Snr::Noiseless, seed)).map_err(|e| e.to_string())?;
            let worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
            ensure(worst < 1e-12, || format!("{model}: deviation {worst:e}"))?;
        }
    }
    Ok("awgn and rayleigh return the input".into())
}

fn rayleigh_distribution() -> Check {
    const N: usize = 1_000_000;
    let mut rng = SimRng::new(2024);
    let mut mags: Vec<f64> = (0..N).map(|_| sample_gain(&mut rng, 1e-3).norm()).collect();
    let power = mags.iter().map(|m| m * m).sum::<f64>() / N as f64;
    ensure((power - 1.0).abs() < 5.0 / (N as f64).sqrt(), || format!("E|h|^2 = {power}"))?;
    mags.sort_by(f64::total_cmp);
    let n = N as f64;
    let ks = mags
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = 1.0 - (-r * r).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    ensure(ks < 0.01, || format!("KS {ks}"))?;
    Ok(format!("E|h|^2 = {power:.5}, KS = {ks:.5}"))
}

fn qam_exhaustive() -> Check {
    let all: Vec<u8> = (0..=255).collect();
    for &b in &all {
        ensure(demap_symbol(map_symbol(b)) == b, || format!("byte {b} does not survive"))?;
    }
    for model in ChannelModel::ALL {
        let out = transmit_bytes(&all, &ChannelSpec::new(model, Snr::Noiseless, 3));
        ensure(out == all, || format!("{model} noiseless changed bytes"))?;
    }
    Ok("256/256 bytes".into())
}

fn gray_adjacency() -> Check {
    let c = Constellation256::new();
    let pts = c.points();
    let min_d = (0..256)
        .flat_map(|i| (0..256).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (pts[i] - pts[j]).norm())
        .fold(f64::INFINITY, f64::min);
    let mut pairs = 0;
    for i in 0..256 {
        for j in i + 1..256 {
            if ((pts[i] - pts[j]).norm() - min_d).abs() < 1e-9 {
                pairs += 1;
                let diff = (i ^ j).count_ones();
                ensure(diff == 1, || format!("neighbours {i} and {j} differ in {diff} bits"))?;
            }
        }
    }
    // 16×15 horizontal plus 15×16 vertical neighbour pairs.
    ensure(pairs == 480, || format!("{pairs} nearest-neighbour pairs"))?;
    Ok("480 neighbour pairs differ in one bit".into())
}

fn constellation_power() -> Check {
    let pts = Constellation256::new();
    let p = pts.points().iter().map(|z| z.norm_sqr()).sum::<f64>() / 256.0;
    ensure((p - 1.0).abs() <= 4.0 * f64::EPSILON, || format!("mean power {p}"))?;
    Ok(format!("mean power 1 {:+e}", p - 1.0))
}

fn ssim_axioms() -> Check {
    let imgs: Vec<ImageF> = synthetic_images(40, 5).iter().map(to_float).collect();
    let mut rng = SimRng::new(6);
    for (i, a) in imgs.iter().enumerate() {
        ensure((ssim(a, a) - 1.0).abs() < 1e-12, || format!("identity {i}"))?;
        let noisy: Vec<f32> = a.pixels().iter().map(|&v| (v + 0.2 * rng.gaussian() as f32).clamp(0.0, 1.0)).collect();
        let b = ImageF::from_pixels(&noisy).map_err(|e| e.to_string())?;
        let (ab, ba) = (ssim(a, &b), ssim(&b, a));
        ensure((ab - ba).abs() < 1e-12, || format!("symmetry {ab} vs {ba}"))?;
        ensure((-1.0..=1.0).contains(&ab), || format!("range {ab}"))?;
        let c = &imgs[(i + 1) % imgs.len()];
        ensure((-1.0..=1.0).contains(&ssim(a, c)), || "range across images".into())?;
    }
    Ok("identity, symmetry and range on 40 pairs".into())
}

fn checkpoint_roundtrip() -> Check {
    let params = CodecParams::<f32>::init(&CodecConfig::default(), 8).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_params(params);
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes, Path::new("memory")).map_err(|e| e.to_string())?;
    ensure(encode_checkpoint(&back) == bytes, || "re-encoding differs".into())?;
    let same = back.params.tensors().iter().zip(ck.params.tensors()).all(|(a, b)| {
        a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(same, || "weights changed".into())?;
    Ok(format!("{} bytes bit-exact", bytes.len()))
}

fn csv_determinism() -> Check {
    let ds = Dataset {
        train: vec![],
        test: synthetic_images(10, 3),
    };
    let params = CodecParams::<f32>::init(&CodecConfig::tiny(), 2).map_err(|e| e.to_string())?;
    let cfg = SweepConfig {
        n_images: 10,
        seed: 42,
        ..SweepConfig::default()
    };
    let a = format_csv(&run_sweep(Some(&params), &ds, &cfg).map_err(|e| e.to_string())?);
    let b = format_csv(&run_sweep(Some(&params), &ds, &cfg).map_err(|e| e.to_string())?);
    ensure(a == b, || "two runs differ".into())?;
    let parsed = parse_csv(&a)?;
    ensure(format_csv(&parsed) == a, || "parse/format changes the text".into())?;
    Ok(format!("{} rows byte-identical", parsed.len()))
}

fn p1() -> Verdict {
    let checks: [NamedCheck; 9] = [
        ("unit power", unit_power),
        ("noiseless roundtrip", noiseless_roundtrip),
        ("rayleigh statistics", rayleigh_distribution),
        ("qam exhaustive", qam_exhaustive),
        ("gray adjacency", gray_adjacency),
        ("constellation power", constellation_power),
        ("ssim axioms", ssim_axioms),
        ("checkpoint roundtrip", checkpoint_roundtrip),
        ("csv determinism", csv_determinism),
    ];
    let mut notes = Vec::new();
    for (name, f) in checks {
        match f() {
            Ok(n) => notes.push(format!("{name}: {n}")),
            Err(e) => return Verdict::Fail(format!("{name}: {e}")),
        }
    }
    Verdict::Pass(notes.join("; "))
}

// ---------------------------------------------------------------- P2

fn p2() -> Verdict {
    const N: u64 = 10_000_000;
    let mut notes = Vec::new();
    for (i, db) in [15.0, 20.0, 25.0, 30.0].into_iter().enumerate() {
        let (errs, n) = simulate_ser(db, N, 1000 + i as u64);
        let p = ser_closed_form(db);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let est = errs as f64 / n as f64;
        let z = (est - p) / sd;
        notes.push(format!("{db} dB {est:.4e} vs {p:.4e} ({z:+.2} sd)"));
        if z.abs() >= 3.0 {
            return Verdict::Fail(notes.join(", "));
        }
    }
    Verdict::Pass(notes.join(", "))
}

// ---------------------------------------------------------------- P3

fn p3() -> Verdict {
    const BATCH: usize = 2;
    let cfg = CodecConfig::tiny();
    let mut params = CodecParams::<f64>::init(&cfg, 21).unwrap();
    let mut rng = SimRng::new(22);
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v += 0.05 * rng.gaussian();
        }
    }
    let x: Vec<f64> = (0..BATCH * 3072).map(|_| rng.uniform()).collect();
    let symbols = codec::encode(&params, &x, BATCH).unwrap();
    let delta = channel_offsets(&symbols, &ChannelSpec::new(ChannelModel::Rayleigh, Snr::Db(15.0), 23)).unwrap();
    let how = Perturbation::Fixed(&delta);
    let kind = LossKind::Mse;
    let (_, base) = forward_loss(&params, &x, BATCH, how, kind).unwrap();
    let (_, grads) = loss_and_gradients(&params, &x, BATCH, how, kind).unwrap();

    let mut work = params.clone();
    let mut worst = (0.0f64, String::new());
    for ti in 0..params.tensors().len() {
        let analytic = &grads.tensors[ti];
        let (mut diff2, mut fd2, mut an2, mut skipped) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        let n = params.tensors()[ti].data.len();
        #[allow(clippy::needless_range_loop)]
        for j in 0..n {
            let orig = params.tensors()[ti].data[j];
            let mut h = 1e-5 * orig.abs().max(1.0);
            let mut fd = None;
            for _ in 0..4 {
                work.tensors_mut()[ti].data[j] = orig + h;
                let (lp, pp) = forward_loss(&work, &x, BATCH, how, kind).unwrap();
                work.tensors_mut()[ti].data[j] = orig - h;
                let (lm, pm) = forward_loss(&work, &x, BATCH, how, kind).unwrap();
                work.tensors_mut()[ti].data[j] = orig;
                if pp == base && pm == base {
                    fd = Some((lp - lm) / (2.0 * h));
                    break;
                }
                h *= 0.1;
            }
            match fd {
                Some(g) => {
                    diff2 += (g - analytic[j]).powi(2);
                    fd2 += g * g;
                    an2 += analytic[j] * analytic[j];
                }
                None => skipped += 1,
            }
        }
        let rel = diff2.sqrt() / fd2.sqrt().max(an2.sqrt()).max(1e-8);
        let name = &params.tensors()[ti].name;
        if rel >= 1e-6 || skipped * 100 > n {
            return Verdict::Fail(format!("{name}: relative error {rel:.3e}, {skipped}/{n} entries skipped"));
        }
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    Verdict::Pass(format!(
        "{} tensors, worst relative error {:.2e} ({})",
        params.tensors().len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------- P4

fn p4() -> Verdict {
    let n = param_count(&CodecConfig::default());
    let msg = format!("{n} parameters (target 0.76M ±15% = [646000, 874000])");
    if (646_000..=874_000).contains(&n) {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

// ---------------------------------------------------------------- P5, P6

/// The 320-image sweep of a desk-profile model, or why it cannot be run.
fn desk_sweep() -> Result<Vec<EvalRecord>, Verdict> {
    let Some(data) = std::env::var_os("SEMLINK_DATA").map(PathBuf::from) else {
        return Err(Verdict::Blocked(
            "SEMLINK_DATA is not set; the CIFAR-10 binary batches are required and are not available in this environment"
                .into(),
        ));
    };
    let ds = load_cifar10(&data).map_err(|e| Verdict::Fail(format!("cannot load CIFAR-10: {e}")))?;
    let params = match std::env::var_os("SEMLINK_CKPT").map(PathBuf::from) {
        Some(ck) => load_checkpoint(&ck).map_err(|e| Verdict::Fail(format!("cannot load checkpoint: {e}")))?.params,
        None => {
            let out = std::env::var_os("SEMLINK_CKPT_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| std::env::temp_dir().join("semlink-desk.ckpt"));
            eprintln!("training the desk profile into {} (hours on a CPU)", out.display());
            let sched = TrainSchedule::for_profile(Profile::Desk, 0);
            let opts = TrainOptions {
                checkpoint_path: Some(out),
                ..TrainOptions::default()
            };
            train(&ds.train, &CodecConfig::default(), &sched, opts)
                .map_err(|e| Verdict::Fail(format!("training failed: {e}")))?
                .0
        }
    };
    let cfg = SweepConfig {
        n_images: 320,
        ..SweepConfig::default()
    };
    run_sweep(Some(&params), &ds, &cfg).map_err(|e| Verdict::Fail(format!("sweep failed: {e}")))
}

fn cell(records: &[EvalRecord], system: System, channel: ChannelModel, db: f64) -> f64 {
    records
        .iter()
        .find(|r| r.system == system && r.channel == channel && r.snr == Snr::Db(db))
        .map_or(f64::NAN, |r| r.ssim_mean)
}

/// The sweep if it ran, otherwise the verdict to report.
fn sweep_or(sweep: &Result<Vec<EvalRecord>, Verdict>) -> Result<&[EvalRecord], Verdict> {
    match sweep {
        Ok(r) => Ok(r),
        Err(Verdict::Blocked(m)) => Err(Verdict::Blocked(m.clone())),
        Err(Verdict::Fail(m) | Verdict::Pass(m)) => Err(Verdict::Fail(m.clone())),
    }
}

fn p5(sweep: &Result<Vec<EvalRecord>, Verdict>) -> Verdict {
    let recs = match sweep_or(sweep) {
        Ok(r) => r,
        Err(v) => return v,
    };
    let ray = ChannelModel::Rayleigh;
    let at = |db| (cell(recs, System::Dnn, ray, db), cell(recs, System::Qam256, ray, db));
    let (d10, q10) = at(10.0);
    let (d0, q0) = at(0.0);
    let (d5, q5) = at(5.0);
    let msg = format!("rayleigh SSIM dnn/qam: 0 dB {d0:.4}/{q0:.4}, 5 dB {d5:.4}/{q5:.4}, 10 dB {d10:.4}/{q10:.4}");
    if d10 - q10 >= 0.05 && d0 >= q0 && d5 >= q5 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn p6(sweep: &Result<Vec<EvalRecord>, Verdict>) -> Verdict {
    let recs = match sweep_or(sweep) {
        Ok(r) => r,
        Err(v) => return v,
    };
    let q = cell(recs, System::Qam256, ChannelModel::Awgn, 40.0);
    let d = cell(recs, System::Dnn, ChannelModel::Awgn, 40.0);
    let msg = format!("awgn 40 dB SSIM qam {q:.4}, dnn {d:.4}");
    if q >= 0.99 && q >= d {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

// ---------------------------------------------------------------- P7

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_semlink"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{:?} exited {}: {}", args, out.status, String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.path().join("cifar");
    write_synthetic_dataset(&data, 8, 16, 77).unwrap();
    let (ck1, ck2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    for ck in [&ck1, &ck2] {
        let r = run_cli(&[
            "train", "--data", &s(&data), "--out", &s(ck), "--profile", "tiny", "--deterministic", "--seed", "5",
            "--batch", "16",
        ]);
        if let Err(e) = r {
            return Verdict::Fail(e);
        }
    }
    let (a, b) = (std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());
    if a != b {
        return Verdict::Fail("train --profile tiny --deterministic produced different checkpoints".into());
    }
    let (csv1, csv2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for csv in [&csv1, &csv2] {
        let r = run_cli(&[
            "eval", "--ckpt", &s(&ck1), "--data", &s(&data), "--images", "16", "--seed", "9", "--csv", &s(csv),
        ]);
        if let Err(e) = r {
            return Verdict::Fail(e);
        }
    }
    let (c1, c2) = (std::fs::read(&csv1).unwrap(), std::fs::read(&csv2).unwrap());
    if c1 != c2 {
        return Verdict::Fail("eval with a fixed seed produced different CSV files".into());
    }
    Verdict::Pass(format!(
        "checkpoints identical ({} bytes), CSV identical ({} rows)",
        a.len(),
        c1.iter().filter(|&&b| b == b'\n').count() - 1
    ))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let strict = std::env::var_os("SEMLINK_ACCEPT_STRICT").is_some();
    let mut sweep = None;
    let criteria: Vec<(&str, &str)> = vec![
        ("P1", "property suite"),
        ("P2", "QAM SER vs closed form, 10^7 symbols"),
        ("P3", "finite-difference gradients, tiny config, f64"),
        ("P4", "parameter budget"),
        ("P5", "low-SNR crossover, desk profile"),
        ("P6", "high-SNR reversal"),
        ("P7", "determinism of eval and train"),
    ];
    let (mut failed, mut blocked) = (0, 0);
    for (id, title) in criteria {
        let start = Instant::now();
        let verdict = guarded(|| match id {
            "P1" => p1(),
            "P2" => p2(),
            "P3" => p3(),
            "P4" => p4(),
            "P5" | "P6" => {
                let sw = sweep.get_or_insert_with(desk_sweep);
                if id == "P5" {
                    p5(sw)
                } else {
                    p6(sw)
                }
            }
            _ => p7(),
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Verdict::Pass(m) => println!("PASS {id} {title}: {m} [{secs:.1} s]"),
            Verdict::Fail(m) => {
                failed += 1;
                println!("FAIL {id} {title}: {m} [{secs:.1} s]");
            }
            Verdict::Blocked(m) => {
                blocked += 1;
                println!("FAIL {id} {title}: not run: {m}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed, {blocked} failed as blocked", 7 - failed - blocked);
    if failed > 0 || (strict && blocked > 0) {
        std::process::exit(1);
    }
}
