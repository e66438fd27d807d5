use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Parser;
use semlink::checkpoint::{load_checkpoint, load_checkpoint_for};
use semlink::codec::{CodecConfig, CodecParams};
use semlink::dataset::load_cifar10;
use semlink::harness::{render_comparison, run_sweep, write_csv, SweepConfig, System};
use semlink::tiling::{frame_report, transmit_frame, FrameLink};
use semlink::training::{train, TrainOptions, TrainSchedule};

use crate::args::{expand_config, Cli, Command, EvalArgs, ModelArg, ServeArgs, SweepImagesArgs, TrainArgs, TransmitArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<semlink::Error> for Failure {
    fn from(e: semlink::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `argv` and runs the chosen subcommand, returning the exit code.
pub fn run<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let argv = match expand_config(argv.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transmit(a) => cmd_transmit(a),
        Command::SweepImages(a) => cmd_sweep_images(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            EXIT_FAILURE
        }
    }
}

fn load_params(path: &Path) -> anyhow::Result<CodecParams<f32>> {
    Ok(load_checkpoint(path)?.params)
}

fn params_if_needed(systems: &[System], ckpt: &Option<PathBuf>) -> Result<Option<CodecParams<f32>>, Failure> {
    if !systems.contains(&System::Dnn) {
        return Ok(None);
    }
    match ckpt {
        Some(p) => Ok(Some(load_params(p)?)),
        None => Err(Failure::Usage("--ckpt is required when the dnn system is selected".into())),
    }
}

fn dedup<T: PartialEq + Copy>(items: &[T]) -> Vec<T> {
    let mut out = Vec::new();
    for &x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = match a.model {
        ModelArg::Default => CodecConfig::default(),
        ModelArg::Tiny => CodecConfig::tiny(),
    };
    let mut sched = TrainSchedule::for_profile(a.profile.into(), a.seed);
    sched.batch_size = a.batch as usize;
    sched.adam.lr = a.lr;
    sched.h_floor = a.h_floor;
    sched.checkpoint_every = a.checkpoint_every;
    if a.max_images.is_some() {
        sched.max_images = a.max_images;
    }
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint_for(p, &cfg).with_context(|| format!("resuming from {}", p.display()))?),
        None => None,
    };
    let ds = load_cifar10(&a.data)?;
    log::info!(
        "training {} parameters on {} images ({} phases, batch {})",
        semlink::codec::param_count(&cfg),
        sched.max_images.map_or(ds.train.len(), |m| m.min(ds.train.len())),
        sched.phases.len(),
        sched.batch_size
    );
    let opts = TrainOptions {
        checkpoint_path: Some(a.out.clone()),
        resume,
        on_epoch: None,
    };
    let (_, history) = train(&ds.train, &cfg, &sched, opts)?;
    if let Some(last) = history.epochs.last() {
        println!("final loss {:.6} ({} epochs) -> {}", last.mean_loss, history.epochs.len(), a.out.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let systems = dedup(&a.systems);
    let channels = dedup(&a.channels);
    let params = params_if_needed(&systems, &a.ckpt)?;
    let ds = load_cifar10(&a.data)?;
    let cfg = SweepConfig {
        grid: a.snr_grid.0,
        channels,
        systems,
        n_images: a.images as usize,
        seed: a.seed,
        h_floor: a.h_floor,
    };
    let records = run_sweep(params.as_ref(), &ds, &cfg)?;
    write_csv(&records, &a.csv)?;
    println!("{} rows -> {}", records.len(), a.csv.display());
    Ok(())
}

fn load_rgb(path: &Path) -> anyhow::Result<image::RgbImage> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    Ok(img.to_rgb8())
}

fn cmd_transmit(a: TransmitArgs) -> Result<(), Failure> {
    let params = params_if_needed(&[a.system], &a.ckpt)?;
    let img = load_rgb(&a.input)?;
    let mut link = FrameLink::new(a.channel, a.snr, a.seed);
    link.h_floor = a.h_floor;
    let recon = transmit_frame(a.system, params.as_ref(), &img, &link)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let stem = a.input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let path = a.out.join(format!("{stem}_{}_{}_{}.png", a.system, a.channel, a.snr));
    recon
        .save_with_format(&path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write {}", path.display()))?;
    match frame_report(&img, &recon) {
        Ok(r) => println!("{} ssim {:.6} psnr_db {:.3}", path.display(), r.ssim, r.psnr_db),
        Err(_) => println!("{}", path.display()),
    }
    Ok(())
}

fn cmd_sweep_images(a: SweepImagesArgs) -> Result<(), Failure> {
    let systems = dedup(&a.systems);
    if systems.is_empty() {
        bail_usage("--systems must name at least one system")?;
    }
    let params = params_if_needed(&systems, &a.ckpt)?;
    let img = load_rgb(&a.input)?;
    let manifest = render_comparison(params.as_ref(), &img, &a.snr_grid.0, a.channel, &systems, a.seed, &a.out)?;
    for m in &manifest {
        println!("{} ssim {:.6}", m.file, m.ssim);
    }
    Ok(())
}

fn bail_usage(msg: &str) -> Result<(), Failure> {
    Err(Failure::Usage(msg.into()))
}

fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let state = crate::service::AppState::from_checkpoint(&a.ckpt)?;
    if let Some(ui) = &a.ui {
        if !ui.is_dir() {
            return Err(Failure::Runtime(anyhow::anyhow!("ui directory {} does not exist", ui.display())));
        }
    }
    let addr = format!("{}:{}", a.bind, a.port);
    let rt = tokio::runtime::Runtime::new().context("cannot start async runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("cannot bind {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        let app = crate::service::router(std::sync::Arc::new(state), a.ui);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")?;
        anyhow::Ok(())
    })?;
    Ok(())
}
