//! Command pipelines behind the CLI: phantom generation, training,
//! reconstruction and the incomplete-data digit experiment. Each command
//! takes a resolved configuration, writes its outputs plus a manifest into
//! an output directory, and can be re-executed from that manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Config, RunManifest};
use crate::data::{
    acquire_kt, corrupt_images, dataset_from_masked_images, load_mnist_idx, synthetic_digit_set,
    write_idx_images, write_idx_labels, KTDataset, NoiseSpec, PhantomSpec,
};
use crate::error::TrainError;
use crate::eval::{
    alignment_score, kl_summary, montage, psnr, reconstruct_series, reconstruct_series_sampled,
    ser, ssim, write_latent_csv, write_metrics_csv, write_pgm, write_png, FrameMetrics,
    MetricReport,
};
use crate::generator::{mnist_preset, mri_preset, GeneratorNetwork};
use crate::grid::Field;
use crate::latent::FrameIndex;
use crate::measurement::{synthetic_coil_maps, Operator, OperatorEnsemble};
use crate::trainer::{train, LossConfig, Stage, TrainMode, TrainReport};

/// Command failure split by exit code: usage errors exit 2, numeric or
/// runtime failures exit 1.
#[derive(Debug)]
pub enum PipelineError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Usage(msg) => write!(f, "{msg}"),
            PipelineError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for PipelineError {}

fn usage(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}

fn train_error(e: TrainError) -> PipelineError {
    match e {
        TrainError::NonFinite { .. } => runtime(e),
        other => usage(other),
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

pub const DEFAULT_MRI_STAGES: &[(usize, usize)] = &[(16, 300), (8, 150), (1, 150)];

fn ensure_out(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(runtime)
}

fn loss_config_from(cfg: &Config, is_image_set: bool) -> Result<LossConfig> {
    let defaults = LossConfig::default();
    let mode = match cfg.raw("mode").unwrap_or("variational") {
        "variational" => TrainMode::Variational,
        "gstorm-baseline" => TrainMode::GstormBaseline,
        other => {
            return Err(usage(format!(
                "mode must be `variational` or `gstorm-baseline`, got `{other}`"
            )))
        }
    };
    // Independent image sets have no temporal structure: one unbinned
    // stage, no smoothness.
    let default_stages: Vec<(usize, usize)> = if is_image_set {
        vec![(1, 1000)]
    } else {
        DEFAULT_MRI_STAGES.to_vec()
    };
    let mut stages: Vec<Stage> = cfg
        .get_stages("stages", &default_stages)
        .map_err(usage)?
        .into_iter()
        .map(|(bin, epochs)| Stage { bin, epochs })
        .collect();
    if cfg.contains("epochs") {
        let epochs = cfg.get::<usize>("epochs", 0).map_err(usage)?;
        stages = vec![Stage { bin: 1, epochs }];
    }
    let (default_sigma2, default_lambda1, default_lambda2) = if is_image_set {
        (1.0, 0.0, 0.0)
    } else {
        (defaults.sigma2, defaults.lambda1, defaults.lambda2)
    };
    Ok(LossConfig {
        mode,
        sigma2: cfg.get("sigma2", default_sigma2).map_err(usage)?,
        lambda1: cfg.get("lambda1", default_lambda1).map_err(usage)?,
        lambda2: cfg.get("lambda2", default_lambda2).map_err(usage)?,
        lr_theta: cfg.get("lr_theta", defaults.lr_theta).map_err(usage)?,
        lr_latent: cfg.get("lr_latent", defaults.lr_latent).map_err(usage)?,
        beta1: cfg.get("beta1", defaults.beta1).map_err(usage)?,
        beta2: cfg.get("beta2", defaults.beta2).map_err(usage)?,
        adam_eps: cfg.get("adam_eps", defaults.adam_eps).map_err(usage)?,
        stages,
        init_deviation: cfg
            .get("init_deviation", defaults.init_deviation)
            .map_err(usage)?,
        freeze_deviation: cfg.get_bool("freeze_deviation", false).map_err(usage)?,
        l1_plain: cfg.get_bool("l1_plain", false).map_err(usage)?,
        checkpoint_dir: None,
        quiet: cfg.get_bool("quiet", false).map_err(usage)?,
    })
}

fn write_loss_config(cfg: &LossConfig, resolved: &mut Config) {
    resolved.set(
        "mode",
        match cfg.mode {
            TrainMode::Variational => "variational",
            TrainMode::GstormBaseline => "gstorm-baseline",
        },
    );
    resolved.set("sigma2", cfg.sigma2);
    resolved.set("lambda1", cfg.lambda1);
    resolved.set("lambda2", cfg.lambda2);
    resolved.set("lr_theta", cfg.lr_theta);
    resolved.set("lr_latent", cfg.lr_latent);
    resolved.set("beta1", cfg.beta1);
    resolved.set("beta2", cfg.beta2);
    resolved.set("adam_eps", cfg.adam_eps);
    let stages: Vec<String> = cfg
        .stages
        .iter()
        .map(|s| format!("{}:{}", s.bin, s.epochs))
        .collect();
    resolved.set("stages", stages.join(","));
    resolved.set("init_deviation", cfg.init_deviation);
    resolved.set("freeze_deviation", cfg.freeze_deviation);
    resolved.set("l1_plain", cfg.l1_plain);
    resolved.set("quiet", cfg.quiet);
}

fn write_train_report_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = String::from("epoch,total,data,kl,l1sq,smooth\n");
    for (i, e) in report.epochs.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            e.total, e.data, e.kl, e.l1sq, e.smooth
        ));
    }
    std::fs::write(path, out).map_err(runtime)
}

// ---------------------------------------------------------------------------
// make-phantom
// ---------------------------------------------------------------------------

pub fn cmd_make_phantom(cfg: &Config, out_dir: &Path) -> Result<PathBuf> {
    ensure_out(out_dir)?;
    let seed = cfg.get("seed", 0u64).map_err(usage)?;
    let height = cfg.get("height", 64usize).map_err(usage)?;
    let width = cfg.get("width", 64usize).map_err(usage)?;
    let n_slice = cfg.get("n_slice", 4usize).map_err(usage)?;
    let frames = cfg.get("frames_per_slice", 192usize).map_err(usage)?;
    let rows = cfg.get("fourier_rows", 8usize).map_err(usage)?;
    let coils = cfg.get("coils", 0usize).map_err(usage)?;

    let mut spec = PhantomSpec::with_random_phases(height, width, n_slice, frames, seed);
    spec.cardiac_amp = cfg.get("cardiac_amp", spec.cardiac_amp).map_err(usage)?;
    spec.resp_amp = cfg.get("resp_amp", spec.resp_amp).map_err(usage)?;
    spec.cardiac_freq = cfg.get("cardiac_freq", spec.cardiac_freq).map_err(usage)?;
    spec.resp_freq = cfg.get("resp_freq", spec.resp_freq).map_err(usage)?;
    spec.validate().map_err(usage)?;

    let coil_maps = if coils > 0 {
        Some(Arc::new(synthetic_coil_maps(height, width, coils, seed)))
    } else {
        None
    };
    let ensemble = OperatorEnsemble::FourierRows {
        height,
        width,
        rows_kept: rows,
        coil_maps,
    };

    let noise = if cfg.get_bool("noiseless", false).map_err(usage)? {
        NoiseSpec::None
    } else if cfg.contains("sigma_meas") {
        NoiseSpec::Sigma(cfg.get("sigma_meas", 0.0).map_err(usage)?)
    } else {
        NoiseSpec::SnrDb(cfg.get("snr_db", 30.0).map_err(usage)?)
    };

    let dataset = acquire_kt(&spec, &ensemble, noise, seed).map_err(usage)?;
    let path = out_dir.join("phantom.vskt");
    dataset.save(&path).map_err(runtime)?;

    let mut resolved = Config::default();
    resolved.set("seed", seed);
    resolved.set("height", height);
    resolved.set("width", width);
    resolved.set("n_slice", n_slice);
    resolved.set("frames_per_slice", frames);
    resolved.set("fourier_rows", rows);
    resolved.set("coils", coils);
    resolved.set("cardiac_amp", spec.cardiac_amp);
    resolved.set("resp_amp", spec.resp_amp);
    resolved.set("cardiac_freq", spec.cardiac_freq);
    resolved.set("resp_freq", spec.resp_freq);
    match noise {
        NoiseSpec::None => resolved.set("noiseless", true),
        NoiseSpec::Sigma(s) => resolved.set("sigma_meas", s),
        NoiseSpec::SnrDb(db) => resolved.set("snr_db", db),
    }
    RunManifest::new("make-phantom", resolved)
        .save(&out_dir.join("manifest.txt"))
        .map_err(runtime)?;

    println!(
        "wrote {} ({} slices x {} frames, {} of {} rows, sigma {:.6})",
        path.display(),
        n_slice,
        frames,
        rows,
        height,
        dataset.sigma_meas
    );
    Ok(path)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn build_net_for(dataset: &KTDataset, cfg: &Config, seed: u64) -> Result<GeneratorNetwork> {
    if dataset.channels == 1 {
        if dataset.height != 28 || dataset.width != 28 || dataset.n_slice != 1 {
            return Err(usage(
                "single-channel datasets use the 28x28 image-set generator",
            ));
        }
        return Ok(mnist_preset(seed));
    }
    let default_latent = if dataset.n_slice > 1 { 3 } else { 2 };
    let latent_dim = cfg.get("latent_dim", default_latent).map_err(usage)?;
    mri_preset(
        latent_dim,
        dataset.height,
        dataset.width,
        dataset.n_slice,
        seed,
    )
    .map_err(usage)
}

pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &Config, out_dir: &Path) -> Result<TrainArtifacts> {
    ensure_out(out_dir)?;
    let dataset_path = cfg
        .raw("dataset")
        .ok_or_else(|| usage("train needs `dataset` (flag --dataset or config key)"))?
        .to_string();
    let dataset = KTDataset::load(Path::new(&dataset_path)).map_err(usage)?;
    let seed = cfg.get("seed", 0u64).map_err(usage)?;

    let mut net = build_net_for(&dataset, cfg, seed)?;
    let mut loss_cfg = loss_config_from(cfg, dataset.channels == 1)?;
    loss_cfg.checkpoint_dir = Some(out_dir.join("stages"));

    let outcome = train(&loss_cfg, &mut net, &dataset, seed).map_err(train_error)?;

    let checkpoint_path = out_dir.join("checkpoint.vsck");
    save_checkpoint(&checkpoint_path, &net, &outcome.bank, seed).map_err(runtime)?;
    write_train_report_csv(&out_dir.join("train_report.csv"), &outcome.report)?;

    let mut resolved = Config::default();
    resolved.set("seed", seed);
    resolved.set("dataset", &dataset_path);
    resolved.set("latent_dim", net.latent_dim());
    write_loss_config(&loss_cfg, &mut resolved);
    RunManifest::new("train", resolved)
        .save(&out_dir.join("manifest.txt"))
        .map_err(runtime)?;

    if let Some(last) = outcome.report.epochs.last() {
        println!(
            "trained {} epochs in {:.1}s: data {:.4e}, kl {:.4e}, total {:.4e}",
            outcome.report.epochs.len(),
            outcome.report.wall_secs,
            last.data,
            last.kl,
            last.total
        );
    } else {
        println!("trained 0 epochs; checkpoint is the random initialization");
    }
    Ok(TrainArtifacts {
        checkpoint_path,
        report: outcome.report,
    })
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

pub fn cmd_reconstruct(cfg: &Config, out_dir: &Path) -> Result<MetricReport> {
    ensure_out(out_dir)?;
    let ck_path = cfg
        .raw("checkpoint")
        .ok_or_else(|| usage("reconstruct needs `checkpoint`"))?
        .to_string();
    let Checkpoint { net, bank, .. } = load_checkpoint(Path::new(&ck_path)).map_err(usage)?;
    let source_slice = cfg.get("source_slice", 0usize).map_err(usage)?;
    if source_slice >= bank.n_slice() {
        return Err(usage(format!(
            "--source-slice {source_slice} out of range: the checkpoint has {} slice(s)",
            bank.n_slice()
        )));
    }
    let sample = cfg.get_bool("sample", false).map_err(usage)?;
    let seed = cfg.get("seed", 0u64).map_err(usage)?;
    let align_grid = cfg.get("align_grid", 16usize).map_err(usage)?;

    let series = if sample {
        reconstruct_series_sampled(&net, &bank, source_slice, seed).map_err(usage)?
    } else {
        reconstruct_series(&net, &bank, source_slice).map_err(usage)?
    };

    // Emit magnitude images.
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(runtime)?;
    let (lo, hi) = if series[0].slice_shape().2 == 1 {
        (-1.0, 1.0)
    } else {
        (0.0, std::f64::consts::SQRT_2)
    };
    for (t, vol) in series.iter().enumerate() {
        for z in 0..vol.n_slice() {
            let base = format!("f{t:04}_s{z}");
            write_png(&img_dir.join(format!("{base}.png")), vol.slice(z), lo, hi)
                .map_err(runtime)?;
            write_pgm(&img_dir.join(format!("{base}.pgm")), vol.slice(z), lo, hi)
                .map_err(runtime)?;
        }
    }

    // Metrics against ground truth when available.
    let mut report = MetricReport::default();
    let dataset = match cfg.raw("dataset") {
        Some(p) => Some(KTDataset::load(Path::new(p)).map_err(usage)?),
        None => None,
    };
    if let Some(ds) = &dataset {
        if let Some(spec) = &ds.phantom {
            let mut frames = Vec::new();
            for (t, vol) in series.iter().enumerate() {
                let truth = spec.volume_at(spec.phases_at(source_slice, t));
                let ser_db = ser(&Field::Volume(truth.clone()), &Field::Volume(vol.clone()))
                    .map_err(runtime)?;
                for z in 0..vol.n_slice() {
                    frames.push(FrameMetrics {
                        t,
                        slice: z,
                        psnr_db: psnr(truth.slice(z), vol.slice(z), 2.0).map_err(runtime)?,
                        ssim: ssim(truth.slice(z), vol.slice(z)).map_err(runtime)?,
                        ser_db,
                    });
                }
            }
            report = MetricReport::from_frames(frames);
            report.alignment =
                Some(alignment_score(&series, spec, source_slice, align_grid).map_err(runtime)?);
        } else if let Some(truth) = &ds.ground_truth {
            let mut frames = Vec::new();
            for (t, vol) in series.iter().enumerate() {
                let reference = &truth[source_slice * ds.frames_per_slice + t];
                frames.push(FrameMetrics {
                    t,
                    slice: source_slice,
                    psnr_db: psnr(reference, vol.slice(0), 2.0).map_err(runtime)?,
                    ssim: ssim(reference, vol.slice(0)).map_err(runtime)?,
                    ser_db: ser(
                        &Field::Image(reference.clone()),
                        &Field::Image(vol.slice(0).clone()),
                    )
                    .map_err(runtime)?,
                });
            }
            report = MetricReport::from_frames(frames);
        }
    }
    report.kl_per_slice = kl_summary(&bank);
    write_metrics_csv(&out_dir.join("metrics.csv"), &report).map_err(runtime)?;
    write_latent_csv(&out_dir.join("latents.csv"), &bank).map_err(runtime)?;

    let mut resolved = Config::default();
    resolved.set("checkpoint", &ck_path);
    if let Some(p) = cfg.raw("dataset") {
        resolved.set("dataset", p);
    }
    resolved.set("source_slice", source_slice);
    resolved.set("sample", sample);
    resolved.set("seed", seed);
    resolved.set("align_grid", align_grid);
    RunManifest::new("reconstruct", resolved)
        .save(&out_dir.join("manifest.txt"))
        .map_err(runtime)?;

    println!(
        "reconstructed {} frame(s) from slice {source_slice}{}",
        series.len(),
        report
            .alignment
            .map(|a| format!(", alignment {a:.3}"))
            .unwrap_or_default()
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// digit experiment (incomplete-data illustration)
// ---------------------------------------------------------------------------

pub struct MnistArtifacts {
    pub mean_psnr_recon: f64,
    pub mean_ssim_recon: f64,
    pub mean_psnr_zerofill: f64,
}

pub fn cmd_mnist(cfg: &Config, out_dir: &Path) -> Result<MnistArtifacts> {
    ensure_out(out_dir)?;
    let seed = cfg.get("seed", 0u64).map_err(usage)?;
    let digit = cfg.get("digit", 1u8).map_err(usage)?;
    let max_images = cfg.get("max_images", 1000usize).map_err(usage)?;
    let source = cfg
        .raw("source")
        .unwrap_or(if cfg.contains("mnist_images") {
            "idx"
        } else {
            "synthetic"
        })
        .to_string();

    let images = match source.as_str() {
        "idx" => {
            let images_path = cfg
                .raw("mnist_images")
                .ok_or_else(|| usage("source=idx needs `mnist_images`"))?;
            let labels_path = cfg
                .raw("mnist_labels")
                .ok_or_else(|| usage("source=idx needs `mnist_labels`"))?;
            load_mnist_idx(
                Path::new(images_path),
                Path::new(labels_path),
                Some(digit),
                Some(max_images),
            )
            .map_err(usage)?
        }
        "synthetic" => {
            // Generate a mixed-label set, persist it as IDX, and ingest it
            // through the same parser as a real corpus.
            let count = max_images * 4 / 3 + 8;
            let (imgs, labels) = synthetic_digit_set(count, seed);
            let ip = out_dir.join("synthetic_images.idx");
            let lp = out_dir.join("synthetic_labels.idx");
            write_idx_images(&ip, &imgs).map_err(runtime)?;
            write_idx_labels(&lp, &labels).map_err(runtime)?;
            load_mnist_idx(&ip, &lp, Some(digit), Some(max_images)).map_err(runtime)?
        }
        other => return Err(usage(format!("source must be `idx` or `synthetic`, got `{other}`"))),
    };
    if images.is_empty() {
        return Err(usage("no images matched the digit filter"));
    }

    let fully_sampled = cfg.get_bool("fully_sampled", false).map_err(usage)?;
    let (keep_fraction, noise_sd) = if fully_sampled {
        (1.0, 0.0)
    } else {
        (
            cfg.get("keep_fraction", 0.3).map_err(usage)?,
            cfg.get("noise_sd", 0.05).map_err(usage)?,
        )
    };
    let masked = corrupt_images(&images, keep_fraction, noise_sd, seed);
    let zero_filled: Vec<_> = masked
        .iter()
        .map(|(op, b)| {
            Operator::PixelMask(op.clone())
                .adjoint(b)
                .expect("lengths match")
                .as_image()
                .expect("mask adjoint is an image")
                .clone()
        })
        .collect();
    let dataset = dataset_from_masked_images(&images, masked, noise_sd, seed);

    let mut net = mnist_preset(seed);
    let mut loss_cfg = loss_config_from(cfg, true)?;
    loss_cfg.checkpoint_dir = None;
    let outcome = train(&loss_cfg, &mut net, &dataset, seed).map_err(train_error)?;
    let bank = outcome.bank;

    // Posterior-mean reconstructions and metrics.
    let mut rows = String::from("frame,slice,metric,value\n");
    let mut recons = Vec::with_capacity(images.len());
    let (mut p_sum, mut s_sum, mut zp_sum, mut zs_sum) = (0.0, 0.0, 0.0, 0.0);
    for (i, original) in images.iter().enumerate() {
        let mu = bank
            .mean_of(FrameIndex { slice: 0, t: i })
            .expect("frame in range");
        let recon = net
            .forward(mu)
            .map_err(runtime)?
            .as_image()
            .expect("single-slice generator")
            .clone();
        let p = psnr(original, &recon, 2.0).map_err(runtime)?;
        let s = ssim(original, &recon).map_err(runtime)?;
        let zp = psnr(original, &zero_filled[i], 2.0).map_err(runtime)?;
        let zs = ssim(original, &zero_filled[i]).map_err(runtime)?;
        rows.push_str(&format!("{i},0,psnr_db,{p}\n"));
        rows.push_str(&format!("{i},0,ssim,{s}\n"));
        rows.push_str(&format!("{i},0,zero_filled_psnr_db,{zp}\n"));
        rows.push_str(&format!("{i},0,zero_filled_ssim,{zs}\n"));
        p_sum += p;
        s_sum += s;
        zp_sum += zp;
        zs_sum += zs;
        recons.push(recon);
    }
    let n = images.len() as f64;
    let artifacts = MnistArtifacts {
        mean_psnr_recon: p_sum / n,
        mean_ssim_recon: s_sum / n,
        mean_psnr_zerofill: zp_sum / n,
    };
    rows.push_str(&format!(",,mean_psnr_db,{}\n", artifacts.mean_psnr_recon));
    rows.push_str(&format!(",,mean_ssim,{}\n", artifacts.mean_ssim_recon));
    rows.push_str(&format!(
        ",,mean_zero_filled_psnr_db,{}\n",
        artifacts.mean_psnr_zerofill
    ));
    rows.push_str(&format!(",,mean_zero_filled_ssim,{}\n", zs_sum / n));
    std::fs::write(out_dir.join("metrics.csv"), rows).map_err(runtime)?;

    // Montages: originals, zero-filled, reconstructions, and the latent
    // manifold sampled on a uniform grid in [-3, 3]^2.
    let grid_res = cfg.get("grid_res", 10usize).map_err(usage)?;
    let shown = grid_res * grid_res;
    let emit = |name: &str, tiles: &[crate::grid::ImageGrid]| -> Result<()> {
        let m = montage(&tiles[..tiles.len().min(shown)], grid_res);
        write_png(&out_dir.join(format!("{name}.png")), &m, -1.0, 1.0).map_err(runtime)?;
        write_pgm(&out_dir.join(format!("{name}.pgm")), &m, -1.0, 1.0).map_err(runtime)
    };
    emit("originals", &images)?;
    if !fully_sampled {
        emit("zero_filled", &zero_filled)?;
    }
    emit("reconstructions", &recons)?;
    let mut manifold = Vec::with_capacity(shown);
    for i in 0..grid_res {
        for j in 0..grid_res {
            let span = 6.0;
            let u = -3.0 + span * i as f64 / (grid_res - 1).max(1) as f64;
            let v = -3.0 + span * j as f64 / (grid_res - 1).max(1) as f64;
            let img = net
                .forward(&[u, v])
                .map_err(runtime)?
                .as_image()
                .expect("single-slice generator")
                .clone();
            manifold.push(img);
        }
    }
    emit("manifold", &manifold)?;

    save_checkpoint(&out_dir.join("checkpoint.vsck"), &net, &bank, seed).map_err(runtime)?;
    write_train_report_csv(&out_dir.join("train_report.csv"), &outcome.report)?;

    let mut resolved = Config::default();
    resolved.set("seed", seed);
    resolved.set("digit", digit);
    resolved.set("max_images", max_images);
    resolved.set("source", &source);
    if let Some(p) = cfg.raw("mnist_images") {
        resolved.set("mnist_images", p);
    }
    if let Some(p) = cfg.raw("mnist_labels") {
        resolved.set("mnist_labels", p);
    }
    resolved.set("fully_sampled", fully_sampled);
    resolved.set("keep_fraction", keep_fraction);
    resolved.set("noise_sd", noise_sd);
    resolved.set("grid_res", grid_res);
    write_loss_config(&loss_cfg, &mut resolved);
    RunManifest::new("mnist", resolved)
        .save(&out_dir.join("manifest.txt"))
        .map_err(runtime)?;

    println!(
        "digit experiment: {} images, recon psnr {:.2} dB (zero-filled {:.2} dB), ssim {:.3}",
        images.len(),
        artifacts.mean_psnr_recon,
        artifacts.mean_psnr_zerofill,
        artifacts.mean_ssim_recon
    );
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// rerun
// ---------------------------------------------------------------------------

/// Dispatch a command by name with a resolved configuration.
pub fn run_command(command: &str, cfg: &Config, out_dir: &Path) -> Result<()> {
    match command {
        "make-phantom" => cmd_make_phantom(cfg, out_dir).map(|_| ()),
        "train" => cmd_train(cfg, out_dir).map(|_| ()),
        "reconstruct" => cmd_reconstruct(cfg, out_dir).map(|_| ()),
        "mnist" => cmd_mnist(cfg, out_dir).map(|_| ()),
        other => Err(usage(format!("unknown command `{other}` in manifest"))),
    }
}

/// Re-execute a run from its manifest into a new output directory.
pub fn cmd_rerun(manifest_path: &Path, out_dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(manifest_path).map_err(usage)?;
    run_command(&manifest.command, &manifest.config, out_dir)
}
