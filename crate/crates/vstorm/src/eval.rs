//! Metrics, latent-swap reconstruction, and alignment scoring.
//!
//! Two-channel (complex) images are magnitude-compared for PSNR/SSIM and
//! compared as stacked real vectors for SER.

use std::path::Path;

use crate::error::EvalError;
use crate::generator::GeneratorNetwork;
use crate::grid::{Field, ImageGrid, VolumeGrid};
use crate::latent::{kl_unit_gaussian, softplus, FrameIndex, VariationalLatentBank};

/// dB cap used when an error norm underflows.
pub const DB_CAP: f64 = 300.0;

/// Signal-to-error ratio `20 log10(||ref|| / ||ref - recon||)` over the
/// stacked real values of the two fields.
pub fn ser(reference: &Field, recon: &Field) -> Result<f64, EvalError> {
    let a = reference.flattened();
    let b = recon.flattened();
    if a.len() != b.len() || reference.describe_shape() != recon.describe_shape() {
        return Err(EvalError::ShapeMismatch {
            reference: reference.describe_shape(),
            reconstruction: recon.describe_shape(),
        });
    }
    let ref_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let err_norm = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if err_norm == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((20.0 * (ref_norm / err_norm).log10()).min(DB_CAP))
}

fn magnitude_view(img: &ImageGrid) -> ImageGrid {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.magnitude()
    }
}

/// Peak signal-to-noise ratio in dB; magnitudes are compared for
/// two-channel images. `peak` is the dynamic range (2 for data in [-1, 1]).
pub fn psnr(reference: &ImageGrid, recon: &ImageGrid, peak: f64) -> Result<f64, EvalError> {
    if reference.shape() != recon.shape() {
        return Err(EvalError::ShapeMismatch {
            reference: format!("{:?}", reference.shape()),
            reconstruction: format!("{:?}", recon.shape()),
        });
    }
    let a = magnitude_view(reference);
    let b = magnitude_view(recon);
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(DB_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sd 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range `peak`; the mean over all window positions
/// that fit fully inside the image. Magnitudes are compared for two-channel
/// images.
pub fn ssim_with_peak(
    reference: &ImageGrid,
    recon: &ImageGrid,
    peak: f64,
) -> Result<f64, EvalError> {
    if reference.shape() != recon.shape() {
        return Err(EvalError::ShapeMismatch {
            reference: format!("{:?}", reference.shape()),
            reconstruction: format!("{:?}", recon.shape()),
        });
    }
    let a = magnitude_view(reference);
    let b = magnitude_view(recon);
    let (h, w, _) = a.shape();
    assert!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
    );
    let win = gaussian_window();
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let wt = win[wy * SSIM_WINDOW + wx];
                    ma += wt * a.get(0, y0 + wy, x0 + wx);
                    mb += wt * b.get(0, y0 + wy, x0 + wx);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let wt = win[wy * SSIM_WINDOW + wx];
                    let da = a.get(0, y0 + wy, x0 + wx) - ma;
                    let db = b.get(0, y0 + wy, x0 + wx) - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the default dynamic range of 2 (data in [-1, 1]).
pub fn ssim(reference: &ImageGrid, recon: &ImageGrid) -> Result<f64, EvalError> {
    ssim_with_peak(reference, recon, 2.0)
}

/// Posterior-mean reconstruction driven by slice `z`'s latent trajectory:
/// frame `t` is `D(mu(t_z))` as a volume (the latent swap).
pub fn reconstruct_series(
    net: &GeneratorNetwork,
    bank: &VariationalLatentBank,
    source_slice: usize,
) -> Result<Vec<VolumeGrid>, EvalError> {
    if source_slice >= bank.n_slice() {
        return Err(EvalError::SliceRange {
            slice: source_slice,
            n_slice: bank.n_slice(),
        });
    }
    let mut out = Vec::with_capacity(bank.n_frames());
    for t in 0..bank.n_frames() {
        let mu = bank
            .mean_of(FrameIndex {
                slice: source_slice,
                t,
            })
            .expect("slice checked");
        let field = net
            .forward(mu)
            .map_err(|e| EvalError::NoGroundTruth(e.to_string()))?;
        let vol = match field {
            Field::Volume(v) => v,
            Field::Image(img) => VolumeGrid::new(vec![img]).expect("one slice"),
        };
        out.push(vol);
    }
    Ok(out)
}

/// Sampling variant of [`reconstruct_series`]: `c = mu + s .* eps` with a
/// fresh draw per frame.
pub fn reconstruct_series_sampled(
    net: &GeneratorNetwork,
    bank: &VariationalLatentBank,
    source_slice: usize,
    seed: u64,
) -> Result<Vec<VolumeGrid>, EvalError> {
    if source_slice >= bank.n_slice() {
        return Err(EvalError::SliceRange {
            slice: source_slice,
            n_slice: bank.n_slice(),
        });
    }
    let mut out = Vec::with_capacity(bank.n_frames());
    for t in 0..bank.n_frames() {
        let frame = FrameIndex {
            slice: source_slice,
            t,
        };
        let eps = bank.draw_eps(seed, 0, frame);
        let sample = bank
            .sample(frame, &eps)
            .map_err(|e| EvalError::NoGroundTruth(e.to_string()))?;
        let field = net
            .forward(&sample.c)
            .map_err(|e| EvalError::NoGroundTruth(e.to_string()))?;
        let vol = match field {
            Field::Volume(v) => v,
            Field::Image(img) => VolumeGrid::new(vec![img]).expect("one slice"),
        };
        out.push(vol);
    }
    Ok(out)
}

use crate::data::PhantomSpec;

/// Ground-truth volumes rendered at the centers of a `grid_res x grid_res`
/// phase grid over [0, 2pi)^2.
pub fn phase_grid_volumes(spec: &PhantomSpec, grid_res: usize) -> Vec<VolumeGrid> {
    let cell = std::f64::consts::TAU / grid_res as f64;
    let mut out = Vec::with_capacity(grid_res * grid_res);
    for i in 0..grid_res {
        for j in 0..grid_res {
            let phases = ((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
            out.push(spec.volume_at(phases));
        }
    }
    out
}

fn phase_cell(phase: f64, grid_res: usize) -> usize {
    let tau = std::f64::consts::TAU;
    let wrapped = phase.rem_euclid(tau);
    ((wrapped / tau * grid_res as f64) as usize).min(grid_res - 1)
}

fn cell_distance_ok(a: usize, b: usize, grid_res: usize) -> bool {
    let d = (a as i64 - b as i64).rem_euclid(grid_res as i64);
    d <= 1 || d == grid_res as i64 - 1
}

/// Fraction of frames whose best-matching ground-truth phase pair (argmax
/// SER over the phase grid) lands within one grid cell of slice `z`'s true
/// phase pair at that frame.
pub fn alignment_score(
    series: &[VolumeGrid],
    spec: &PhantomSpec,
    source_slice: usize,
    grid_res: usize,
) -> Result<f64, EvalError> {
    if source_slice >= spec.n_slice {
        return Err(EvalError::SliceRange {
            slice: source_slice,
            n_slice: spec.n_slice,
        });
    }
    let truth = phase_grid_volumes(spec, grid_res);
    let mut hits = 0usize;
    for (t, recon) in series.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (cell_idx, candidate) in truth.iter().enumerate() {
            let score = ser(
                &Field::Volume(candidate.clone()),
                &Field::Volume(recon.clone()),
            )?;
            if score > best.1 {
                best = (cell_idx, score);
            }
        }
        let (theta_c, theta_r) = spec.phases_at(source_slice, t);
        let true_i = phase_cell(theta_c, grid_res);
        let true_j = phase_cell(theta_r, grid_res);
        let best_i = best.0 / grid_res;
        let best_j = best.0 % grid_res;
        if cell_distance_ok(best_i, true_i, grid_res) && cell_distance_ok(best_j, true_j, grid_res)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / series.len().max(1) as f64)
}

/// Per-slice mean KL of the bank's variational distributions against the
/// unit Gaussian.
pub fn kl_summary(bank: &VariationalLatentBank) -> Vec<f64> {
    let dim = bank.latent_dim();
    (0..bank.n_slice())
        .map(|z| {
            let mut acc = 0.0;
            for t in 0..bank.n_frames() {
                let frame = FrameIndex { slice: z, t };
                let mu = bank.mean_of(frame).expect("in range");
                let s: Vec<f64> = bank
                    .rho_of(frame)
                    .expect("in range")
                    .iter()
                    .map(|&r| softplus(r))
                    .collect();
                acc += kl_unit_gaussian(mu, &s).expect("softplus is positive");
            }
            let _ = dim;
            acc / bank.n_frames() as f64
        })
        .collect()
}

/// Per-slice KL of a moment-matched Gaussian fit to the latent means. This
/// scores how far a deterministic latent cloud sits from the unit prior.
pub fn moment_matched_kl(bank: &VariationalLatentBank) -> Vec<f64> {
    let dim = bank.latent_dim();
    let n = bank.n_frames();
    (0..bank.n_slice())
        .map(|z| {
            let mut mean = vec![0.0; dim];
            for t in 0..n {
                let mu = bank.mean_of(FrameIndex { slice: z, t }).expect("in range");
                for k in 0..dim {
                    mean[k] += mu[k] / n as f64;
                }
            }
            let mut var = vec![0.0; dim];
            for t in 0..n {
                let mu = bank.mean_of(FrameIndex { slice: z, t }).expect("in range");
                for k in 0..dim {
                    let d = mu[k] - mean[k];
                    var[k] += d * d / n as f64;
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-9)).collect();
            kl_unit_gaussian(&mean, &sd).expect("sd floored positive")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Emission: CSV tables, PGM/PNG images, montages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct FrameMetrics {
    pub t: usize,
    pub slice: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ser_db: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_ser_db: f64,
    pub kl_per_slice: Vec<f64>,
    pub alignment: Option<f64>,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr_db = frames.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        let mean_ser_db = frames.iter().map(|f| f.ser_db).sum::<f64>() / n;
        MetricReport {
            frames,
            mean_psnr_db,
            mean_ssim,
            mean_ser_db,
            kl_per_slice: Vec::new(),
            alignment: None,
        }
    }
}

/// Long-format metric table: frame, slice, metric, value.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<(), EvalError> {
    let mut out = String::from("frame,slice,metric,value\n");
    for f in &report.frames {
        out.push_str(&format!("{},{},psnr_db,{}\n", f.t, f.slice, f.psnr_db));
        out.push_str(&format!("{},{},ssim,{}\n", f.t, f.slice, f.ssim));
        out.push_str(&format!("{},{},ser_db,{}\n", f.t, f.slice, f.ser_db));
    }
    out.push_str(&format!(",,mean_psnr_db,{}\n", report.mean_psnr_db));
    out.push_str(&format!(",,mean_ssim,{}\n", report.mean_ssim));
    out.push_str(&format!(",,mean_ser_db,{}\n", report.mean_ser_db));
    for (z, kl) in report.kl_per_slice.iter().enumerate() {
        out.push_str(&format!(",{z},kl_mean,{kl}\n"));
    }
    if let Some(a) = report.alignment {
        out.push_str(&format!(",,alignment_score,{a}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Latent-mean trajectories: time, slice, mu1..mun.
pub fn write_latent_csv(path: &Path, bank: &VariationalLatentBank) -> Result<(), EvalError> {
    let dim = bank.latent_dim();
    let mut header = String::from("time,slice");
    for k in 1..=dim {
        header.push_str(&format!(",mu{k}"));
    }
    header.push('\n');
    let mut out = header;
    for z in 0..bank.n_slice() {
        for t in 0..bank.n_frames() {
            let mu = bank.mean_of(FrameIndex { slice: z, t }).expect("in range");
            out.push_str(&format!("{t},{z}"));
            for v in mu {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn to_bytes(img: &ImageGrid, lo: f64, hi: f64) -> Vec<u8> {
    let m = magnitude_view(img);
    m.data()
        .iter()
        .map(|&v| (((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0)) as u8)
        .collect()
}

/// 8-bit binary PGM with values mapped linearly from [lo, hi].
pub fn write_pgm(path: &Path, img: &ImageGrid, lo: f64, hi: f64) -> Result<(), EvalError> {
    let bytes = to_bytes(img, lo, hi);
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Lossless grayscale PNG with values mapped linearly from [lo, hi].
pub fn write_png(path: &Path, img: &ImageGrid, lo: f64, hi: f64) -> Result<(), EvalError> {
    let bytes = to_bytes(img, lo, hi);
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes)
            .expect("buffer sized from image");
    buf.save(path)
        .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Tile single-channel images into a grid, row-major, 1-pixel separators.
pub fn montage(tiles: &[ImageGrid], cols: usize) -> ImageGrid {
    assert!(!tiles.is_empty());
    let (th, tw, _) = tiles[0].shape();
    let rows = tiles.len().div_ceil(cols);
    let mut out = ImageGrid::zeros(rows * (th + 1) - 1, cols * (tw + 1) - 1, 1);
    for (i, tile) in tiles.iter().enumerate() {
        let m = magnitude_view(tile);
        let r = i / cols;
        let c = i % cols;
        for y in 0..th {
            for x in 0..tw {
                out.set(0, r * (th + 1) + y, c * (tw + 1) + x, m.get(0, y, x));
            }
        }
    }
    out
}
