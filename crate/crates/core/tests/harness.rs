use std::fs;

use semlink::channel::{ChannelModel, Snr};
use semlink::codec::{CodecConfig, CodecParams};
use semlink::dataset::{synthetic_images, Dataset};
use semlink::harness::{
    default_grid, format_csv, render_comparison, run_sweep, write_csv, ManifestEntry, SweepConfig, System,
};

fn dataset(n: usize) -> Dataset {
    Dataset {
        train: vec![],
        test: synthetic_images(n, 77),
    }
}

#[test]
fn qam_quality_rises_with_snr() {
    let ds = dataset(100);
    let cfg = SweepConfig {
        grid: [0.0, 10.0, 20.0, 30.0, 40.0].map(Snr::Db).to_vec(),
        channels: vec![ChannelModel::Awgn],
        systems: vec![System::Qam256],
        n_images: 100,
        seed: 5,
        ..SweepConfig::default()
    };
    let recs = run_sweep(None, &ds, &cfg).unwrap();
    assert_eq!(recs.len(), 5);
    for w in recs.windows(2) {
        assert!(w[1].ssim_mean > w[0].ssim_mean, "{} -> {}", w[0].ssim_mean, w[1].ssim_mean);
    }
    assert!(recs[4].ssim_mean > 0.99);
}

#[test]
fn full_grid_has_36_cells_and_is_deterministic() {
    let ds = dataset(6);
    let params = CodecParams::<f32>::init(&CodecConfig::tiny(), 1).unwrap();
    let cfg = SweepConfig {
        n_images: 4,
        seed: 9,
        ..SweepConfig::default()
    };
    assert_eq!(cfg.grid, default_grid());
    let a = run_sweep(Some(&params), &ds, &cfg).unwrap();
    assert_eq!(a.len(), 36);
    let b = run_sweep(Some(&params), &ds, &cfg).unwrap();
    assert_eq!(format_csv(&a), format_csv(&b));
    assert!(a.iter().all(|r| r.n_images == 4 && (-1.0..=1.0).contains(&r.ssim_mean)));

    let dir = tempfile::tempdir().unwrap();
    write_csv(&a, &dir.path().join("x.csv")).unwrap();
    let text = fs::read_to_string(dir.path().join("x.csv")).unwrap();
    assert_eq!(text.lines().count(), 37);
}

#[test]
fn dnn_requires_parameters() {
    let ds = dataset(2);
    let cfg = SweepConfig {
        n_images: 2,
        ..SweepConfig::default()
    };
    assert!(run_sweep(None, &ds, &cfg).is_err());
}

#[test]
fn oversized_sample_is_rejected() {
    let ds = dataset(3);
    let cfg = SweepConfig {
        n_images: 4,
        systems: vec![System::Qam256],
        ..SweepConfig::default()
    };
    assert!(run_sweep(None, &ds, &cfg).is_err());
}

#[test]
fn comparison_grid_writes_seven_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_images(1, 4).remove(0);
    let params = CodecParams::<f32>::init(&CodecConfig::tiny(), 2).unwrap();
    let grid = [Snr::Db(0.0), Snr::Db(20.0), Snr::Noiseless];
    let manifest = render_comparison(
        Some(&params),
        &img.to_rgb_image(),
        &grid,
        ChannelModel::Rayleigh,
        &System::ALL,
        3,
        dir.path(),
    )
    .unwrap();
    let pngs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 7);
    assert_eq!(manifest.len(), 7);

    let on_disk: Vec<ManifestEntry> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    let lossless = manifest
        .iter()
        .find(|m| m.system == "qam256" && m.snr_db == Some(Snr::Noiseless))
        .unwrap();
    assert_eq!(lossless.ssim, 1.0);
}
