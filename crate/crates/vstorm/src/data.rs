//! Datasets: IDX image ingestion and corruption, the synthetic dynamic
//! phantom, simulated k-t acquisition, and the on-disk dataset container.

use std::path::Path;
use std::sync::Arc;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::grid::{Field, ImageGrid, VolumeGrid};
use crate::measurement::{
    Operator, OperatorEnsemble, PixelMaskOperator, SliceFourierOperator, SubsampledFourierOperator,
};
use crate::rng;

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxCursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxCursor<'a> {
    fn err(&self, reason: impl Into<String>) -> DataError {
        DataError::Parse {
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32, DataError> {
        if self.offset + 4 > self.bytes.len() {
            return Err(self.err("truncated file: expected 4 more bytes"));
        }
        let mut slice = &self.bytes[self.offset..self.offset + 4];
        let v = slice.read_u32::<BigEndian>().expect("length checked");
        self.offset += 4;
        Ok(v)
    }

    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated file: expected {n} more bytes, have {}",
                self.bytes.len() - self.offset
            )));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
}

/// Parse an IDX image file into single-channel grids scaled to [-1, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<ImageGrid>, DataError> {
    let bytes = std::fs::read(path)?;
    let mut cur = IdxCursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            reason: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = cur.read_u32()? as usize;
    let rows = cur.read_u32()? as usize;
    let cols = cur.read_u32()? as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = cur.read_bytes(rows * cols)?;
        let data: Vec<f64> = raw.iter().map(|&b| 2.0 * (b as f64 / 255.0) - 1.0).collect();
        images.push(ImageGrid::from_data(rows, cols, 1, data).expect("finite bytes"));
    }
    Ok(images)
}

/// Parse an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = std::fs::read(path)?;
    let mut cur = IdxCursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            reason: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = cur.read_u32()? as usize;
    Ok(cur.read_bytes(count)?.to_vec())
}

/// Load images, keeping only those whose label matches `digit` (when given),
/// up to `max_images`.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    digit: Option<u8>,
    max_images: Option<usize>,
) -> Result<Vec<ImageGrid>, DataError> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(DataError::Parse {
            offset: 0,
            reason: format!(
                "image count {} does not match label count {}",
                images.len(),
                labels.len()
            ),
        });
    }
    let cap = max_images.unwrap_or(usize::MAX);
    Ok(images
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| digit.map_or(true, |d| *l == d))
        .map(|(img, _)| img)
        .take(cap)
        .collect())
}

/// Write single-channel grids in [-1, 1] as an IDX image file.
pub fn write_idx_images(path: &Path, images: &[ImageGrid]) -> Result<(), DataError> {
    let (h, w, c) = images
        .first()
        .map(|i| i.shape())
        .unwrap_or((0, 0, 1));
    assert_eq!(c, 1, "IDX images are single channel");
    let mut out = Vec::new();
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    out.write_u32::<BigEndian>(images.len() as u32)?;
    out.write_u32::<BigEndian>(h as u32)?;
    out.write_u32::<BigEndian>(w as u32)?;
    for img in images {
        assert_eq!(img.shape(), (h, w, 1));
        for &v in img.data() {
            let byte = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(byte);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Image corruption (pixel masks + noise)
// ---------------------------------------------------------------------------

/// Mask each image independently, keeping `round(keep_fraction * n)` pixels
/// chosen uniformly at random, and add Gaussian noise to the kept values.
pub fn corrupt_images(
    images: &[ImageGrid],
    keep_fraction: f64,
    noise_sd: f64,
    seed: u64,
) -> Vec<(PixelMaskOperator, Vec<f64>)> {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep fraction must be in (0, 1]"
    );
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let (h, w, c) = img.shape();
            let total = h * w * c;
            let keep = ((keep_fraction * total as f64).round() as usize).clamp(1, total);
            let mut mask_rng = rng::stream(seed, &[rng::tag::MASK, i as u64]);
            let mut kept = rand::seq::index::sample(&mut mask_rng, total, keep).into_vec();
            kept.sort_unstable();
            let op = PixelMaskOperator::new(h, w, c, kept, 1.0).expect("valid mask");
            let mut noise_rng = rng::stream(seed, &[rng::tag::MASK, i as u64, 1]);
            let data = img.data();
            let b = op
                .kept
                .iter()
                .map(|&k| data[k] + noise_sd * rng::standard_normal(&mut noise_rng))
                .collect();
            (op, b)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic dynamic phantom
// ---------------------------------------------------------------------------

/// Deterministic moving-anatomy phantom. Every slice is a function of a
/// (cardiac, respiratory) phase pair: the blood-pool radius is modulated by
/// `1 + cardiac_amp * sin(theta_c)` and the whole anatomy shifts vertically
/// by `resp_amp * height * sin(theta_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_slice: usize,
    pub frames_per_slice: usize,
    /// Cycles per frame; must differ from `resp_freq`.
    pub cardiac_freq: f64,
    pub resp_freq: f64,
    /// Per-slice initial phases, radians.
    pub cardiac_phase: Vec<f64>,
    pub resp_phase: Vec<f64>,
    /// Relative blood-pool radius modulation, in [0, 0.5].
    pub cardiac_amp: f64,
    /// Vertical shift amplitude as a fraction of height, in [0, 0.1].
    pub resp_amp: f64,
    /// Per-slice anatomy scale (apex to base taper).
    pub slice_scale: Vec<f64>,
}

impl PhantomSpec {
    /// Default anatomy with random per-slice initial phases drawn from the
    /// seed, mimicking unsynchronized slice-by-slice acquisition.
    pub fn with_random_phases(
        height: usize,
        width: usize,
        n_slice: usize,
        frames_per_slice: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag::PHANTOM]);
        let cardiac_phase = (0..n_slice)
            .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
            .collect();
        let resp_phase = (0..n_slice)
            .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
            .collect();
        let slice_scale = (0..n_slice)
            .map(|z| {
                if n_slice == 1 {
                    1.0
                } else {
                    0.8 + 0.25 * z as f64 / (n_slice - 1) as f64
                }
            })
            .collect();
        PhantomSpec {
            height,
            width,
            n_slice,
            frames_per_slice,
            cardiac_freq: 1.0 / 11.0,
            resp_freq: 1.0 / 43.0,
            cardiac_phase,
            resp_phase,
            cardiac_amp: 0.3,
            resp_amp: 0.05,
            slice_scale,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_slice == 0 || self.frames_per_slice == 0 {
            return Err(DataError::BadSpec("empty phantom".into()));
        }
        if self.cardiac_freq == self.resp_freq {
            return Err(DataError::BadSpec(
                "cardiac and respiratory frequencies must differ".into(),
            ));
        }
        if self.cardiac_phase.len() != self.n_slice
            || self.resp_phase.len() != self.n_slice
            || self.slice_scale.len() != self.n_slice
        {
            return Err(DataError::BadSpec(
                "per-slice parameter lists must have one entry per slice".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.cardiac_amp) || !(0.0..=0.1).contains(&self.resp_amp) {
            return Err(DataError::BadSpec(
                "motion amplitudes out of range (cardiac in [0,0.5], respiratory in [0,0.1])"
                    .into(),
            ));
        }
        if self.slice_scale.iter().any(|&s| !(0.1..=1.2).contains(&s)) {
            return Err(DataError::BadSpec("slice scale out of [0.1, 1.2]".into()));
        }
        Ok(())
    }

    /// Phases of slice `z` at frame `t`.
    pub fn phases_at(&self, z: usize, t: usize) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        (
            tau * self.cardiac_freq * t as f64 + self.cardiac_phase[z],
            tau * self.resp_freq * t as f64 + self.resp_phase[z],
        )
    }

    /// Ground-truth slice `z` rendered at an explicit phase pair.
    ///
    /// Both motions carry a quadrature component (wall thickness follows
    /// cos(theta_c), breathing adds a smaller horizontal cos(theta_r)
    /// shift), so a rendered volume determines its phase pair uniquely; a
    /// pure-sine modulation would alias theta and pi - theta.
    pub fn render_slice(&self, z: usize, phases: (f64, f64)) -> ImageGrid {
        let (theta_c, theta_r) = phases;
        let h = self.height as f64;
        let w = self.width as f64;
        let scale = self.slice_scale[z];
        let shift_y = self.resp_amp * h * theta_r.sin();
        let shift_x = 0.5 * self.resp_amp * w * theta_r.cos();
        let pool_mod = 1.0 + self.cardiac_amp * theta_c.sin();
        let wall_mod = 1.0 - 0.4 * self.cardiac_amp * theta_c.cos();

        struct Blob {
            cy: f64,
            cx: f64,
            ry: f64,
            rx: f64,
            gain: f64,
        }
        let blobs = [
            // body
            Blob {
                cy: 0.50 * h,
                cx: 0.50 * w,
                ry: 0.36 * h * scale,
                rx: 0.40 * w * scale,
                gain: 0.35,
            },
            // myocardial ring (outer wall), thickness in quadrature with
            // the pool radius
            Blob {
                cy: 0.48 * h,
                cx: 0.44 * w,
                ry: 0.20 * h * scale * wall_mod,
                rx: 0.19 * w * scale * wall_mod,
                gain: 0.30,
            },
            // blood pool, radius modulated by the cardiac phase
            Blob {
                cy: 0.48 * h,
                cx: 0.44 * w,
                ry: 0.115 * h * scale * pool_mod,
                rx: 0.105 * w * scale * pool_mod,
                gain: -0.25,
            },
            // static vessel landmark
            Blob {
                cy: 0.40 * h,
                cx: 0.72 * w,
                ry: 0.055 * h * scale,
                rx: 0.055 * w * scale,
                gain: 0.25,
            },
        ];

        let mut img = ImageGrid::zeros(self.height, self.width, 2);
        let plane = self.height * self.width;
        let tau_edge = 0.75; // edge softness in pixels
        for y in 0..self.height {
            for x in 0..self.width {
                let yf = y as f64 - shift_y;
                let xf = x as f64 - shift_x;
                let mut m = 0.0;
                for blob in &blobs {
                    let dy = (yf - blob.cy) / blob.ry;
                    let dx = (xf - blob.cx) / blob.rx;
                    let r = (dy * dy + dx * dx).sqrt();
                    // distance to the unit contour in pixels, roughly
                    let px = (r - 1.0) * blob.ry.min(blob.rx);
                    m += blob.gain / (1.0 + (px / tau_edge).exp());
                }
                let phase = 0.3 + 0.5 * (std::f64::consts::TAU * xf / w).sin()
                    * (std::f64::consts::PI * y as f64 / h).cos();
                let idx = y * self.width + x;
                img.data_mut()[idx] = m * phase.cos();
                img.data_mut()[plane + idx] = m * phase.sin();
            }
        }
        img
    }

    /// Ground-truth slice `z` at frame `t` of its own acquisition clock.
    pub fn slice_at(&self, z: usize, t: usize) -> ImageGrid {
        self.render_slice(z, self.phases_at(z, t))
    }

    /// Ground-truth volume with every slice at the same phase pair; the
    /// alignment target.
    pub fn volume_at(&self, phases: (f64, f64)) -> VolumeGrid {
        VolumeGrid::new(
            (0..self.n_slice)
                .map(|z| self.render_slice(z, phases))
                .collect(),
        )
        .expect("slices share shape")
    }
}

// ---------------------------------------------------------------------------
// k-t acquisition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    Sigma(f64),
    /// Choose sigma so the measurement SNR (rms signal over sigma) hits the
    /// given decibel target across the whole dataset.
    SnrDb(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub slice: usize,
    pub t: usize,
    pub operator: Operator,
    pub b: Vec<f64>,
}

/// Measured k-t data for one acquisition, with optional synthetic ground
/// truth.
#[derive(Debug, Clone, PartialEq)]
pub struct KTDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_slice: usize,
    pub frames_per_slice: usize,
    pub seed: u64,
    pub sigma_meas: f64,
    pub coil_maps: Option<Arc<Vec<ImageGrid>>>,
    /// Ordered slice-major: frame (z, t) lives at `z * frames_per_slice + t`.
    pub frames: Vec<FrameRecord>,
    /// Per-frame ground-truth slices, same order as `frames`.
    pub ground_truth: Option<Vec<ImageGrid>>,
    pub phantom: Option<PhantomSpec>,
}

impl KTDataset {
    pub fn frame(&self, z: usize, t: usize) -> &FrameRecord {
        &self.frames[z * self.frames_per_slice + t]
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Check that every frame's data length matches its operator.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.len() != self.n_slice * self.frames_per_slice {
            return Err(DataError::BadSpec(format!(
                "expected {} frames, found {}",
                self.n_slice * self.frames_per_slice,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.b.len() != f.operator.output_len() {
                return Err(DataError::BadSpec(format!(
                    "frame {i} (slice {}, t {}): data length {} vs operator length {}",
                    f.slice,
                    f.t,
                    f.b.len(),
                    f.operator.output_len()
                )));
            }
        }
        if let Some(truth) = &self.ground_truth {
            if truth.len() != self.frames.len() {
                return Err(DataError::BadSpec(
                    "ground truth must cover every frame".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Simulate a slice-by-slice k-t acquisition of the phantom: a fresh
/// operator draw per frame, plus optional Gaussian measurement noise.
pub fn acquire_kt(
    spec: &PhantomSpec,
    ensemble: &OperatorEnsemble,
    noise: NoiseSpec,
    seed: u64,
) -> Result<KTDataset, DataError> {
    spec.validate()?;
    let (coil_maps, rows_match) = match ensemble {
        OperatorEnsemble::FourierRows {
            height,
            width,
            coil_maps,
            ..
        } => (
            coil_maps.clone(),
            *height == spec.height && *width == spec.width,
        ),
        _ => {
            return Err(DataError::BadSpec(
                "k-t acquisition needs a Fourier-row ensemble".into(),
            ))
        }
    };
    if !rows_match {
        return Err(DataError::BadSpec(
            "ensemble geometry does not match the phantom grid".into(),
        ));
    }

    // First pass: noiseless measurements.
    let mut frames = Vec::with_capacity(spec.n_slice * spec.frames_per_slice);
    let mut truth = Vec::with_capacity(frames.capacity());
    let mut energy = 0.0;
    let mut count = 0usize;
    for z in 0..spec.n_slice {
        for t in 0..spec.frames_per_slice {
            let mut draw_rng = rng::stream(seed, &[rng::tag::ACQUIRE, z as u64, t as u64]);
            let drawn = ensemble.draw(&mut draw_rng);
            let inner = match drawn {
                Operator::Fourier(op) => op,
                _ => unreachable!("fourier ensemble draws fourier operators"),
            };
            let slice = spec.slice_at(z, t);
            let (operator, b) = if spec.n_slice > 1 {
                let op = Operator::SliceFourier(SliceFourierOperator {
                    slice_index: z,
                    inner,
                });
                // Measuring the volume is the same as measuring slice z.
                let b = match &op {
                    Operator::SliceFourier(sf) => {
                        Operator::Fourier(sf.inner.clone()).apply(&Field::Image(slice.clone()))?
                    }
                    _ => unreachable!(),
                };
                (op, b)
            } else {
                let op = Operator::Fourier(inner);
                let b = op.apply(&Field::Image(slice.clone()))?;
                (op, b)
            };
            energy += b.iter().map(|v| v * v).sum::<f64>();
            count += b.len();
            frames.push(FrameRecord {
                slice: z,
                t,
                operator,
                b,
            });
            truth.push(slice);
        }
    }

    let sigma = match noise {
        NoiseSpec::None => 0.0,
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::SnrDb(db) => {
            let rms = (energy / count.max(1) as f64).sqrt();
            rms * 10f64.powf(-db / 20.0)
        }
    };
    if sigma > 0.0 {
        for (i, f) in frames.iter_mut().enumerate() {
            let mut noise_rng = rng::stream(seed, &[rng::tag::ACQUIRE, i as u64, u64::MAX]);
            for v in f.b.iter_mut() {
                *v += sigma * rng::standard_normal(&mut noise_rng);
            }
        }
    }

    let ds = KTDataset {
        height: spec.height,
        width: spec.width,
        channels: 2,
        n_slice: spec.n_slice,
        frames_per_slice: spec.frames_per_slice,
        seed,
        sigma_meas: sigma,
        coil_maps,
        frames,
        ground_truth: Some(truth),
        phantom: Some(spec.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Wrap masked images (e.g. corrupted digits) as a single-slice dataset.
pub fn dataset_from_masked_images(
    images: &[ImageGrid],
    masked: Vec<(PixelMaskOperator, Vec<f64>)>,
    noise_sd: f64,
    seed: u64,
) -> KTDataset {
    assert_eq!(images.len(), masked.len());
    let (h, w, c) = images[0].shape();
    let frames = masked
        .into_iter()
        .enumerate()
        .map(|(t, (op, b))| FrameRecord {
            slice: 0,
            t,
            operator: Operator::PixelMask(op),
            b,
        })
        .collect();
    KTDataset {
        height: h,
        width: w,
        channels: c,
        n_slice: 1,
        frames_per_slice: images.len(),
        seed,
        sigma_meas: noise_sd,
        coil_maps: None,
        frames,
        ground_truth: Some(images.to_vec()),
        phantom: None,
    }
}

// ---------------------------------------------------------------------------
// Synthetic digit strokes (stand-in when no IDX corpus is on disk)
// ---------------------------------------------------------------------------

/// Deterministic 28x28 handwritten-style digits: ones as slanted strokes
/// (the dominant variability is slant and horizontal position), zeros as
/// rings. Returns images in [-1, 1] and their labels.
pub fn synthetic_digit_set(count: usize, seed: u64) -> (Vec<ImageGrid>, Vec<u8>) {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, &[rng::tag::STROKES, i as u64]);
        // Three of four are ones.
        if i % 4 != 3 {
            let slant: f64 = r.gen_range(-0.35..0.35);
            let cx: f64 = r.gen_range(11.5..16.5);
            let half_len: f64 = r.gen_range(8.0..10.5);
            let widthpx: f64 = r.gen_range(1.9..3.1);
            let bend: f64 = r.gen_range(-0.004..0.004);
            images.push(render_stroke_one(slant, cx, half_len, widthpx, bend));
            labels.push(1);
        } else {
            let cy: f64 = r.gen_range(12.5..15.5);
            let cx: f64 = r.gen_range(12.5..15.5);
            let ry: f64 = r.gen_range(6.0..9.0);
            let rx: f64 = r.gen_range(4.5..7.0);
            let widthpx: f64 = r.gen_range(1.8..2.8);
            images.push(render_ring_zero(cy, cx, ry, rx, widthpx));
            labels.push(0);
        }
    }
    (images, labels)
}

fn stroke_value(dist: f64, width: f64) -> f64 {
    // Smooth pen profile: +1 on the stroke, -1 background.
    -1.0 + 2.0 / (1.0 + ((dist - width) / 0.6).exp())
}

fn render_stroke_one(slant: f64, cx: f64, half_len: f64, width: f64, bend: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(28, 28, 1);
    for y in 0..28 {
        for x in 0..28 {
            let dy = y as f64 - 14.0;
            let clipped = dy.clamp(-half_len, half_len);
            let stroke_x = cx + slant * clipped + bend * clipped * clipped * clipped;
            let dx = x as f64 - stroke_x;
            let overshoot = (dy.abs() - half_len).max(0.0);
            let dist = (dx * dx + overshoot * overshoot).sqrt();
            img.set(0, y, x, stroke_value(dist, width));
        }
    }
    img
}

fn render_ring_zero(cy: f64, cx: f64, ry: f64, rx: f64, width: f64) -> ImageGrid {
    let mut img = ImageGrid::zeros(28, 28, 1);
    for y in 0..28 {
        for x in 0..28 {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            let r = (dy * dy + dx * dx).sqrt();
            let dist = (r - 1.0).abs() * ry.min(rx);
            img.set(0, y, x, stroke_value(dist, width));
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Dataset container (versioned binary file)
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"VSKT";
const DATASET_VERSION: u32 = 1;

struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        PayloadReader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Parse {
                offset: self.offset as u64,
                reason: format!("truncated payload: wanted {n} bytes"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        let mut s = self.take(4)?;
        Ok(s.read_u32::<LittleEndian>().unwrap())
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DataError> {
        let mut s = self.take(8)?;
        Ok(s.read_u64::<LittleEndian>().unwrap())
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DataError> {
        let mut s = self.take(8)?;
        Ok(s.read_f64::<LittleEndian>().unwrap())
    }

    pub(crate) fn f64s(&mut self) -> Result<Vec<f64>, DataError> {
        let n = self.u64()? as usize;
        let raw = self.take(8 * n)?;
        let mut out = Vec::with_capacity(n);
        let mut cur = raw;
        for _ in 0..n {
            out.push(cur.read_f64::<LittleEndian>().unwrap());
        }
        Ok(out)
    }
}

fn write_image(w: &mut PayloadWriter, img: &ImageGrid) {
    w.u32(img.height() as u32);
    w.u32(img.width() as u32);
    w.u32(img.channels() as u32);
    w.f64s(img.data());
}

fn read_image(r: &mut PayloadReader) -> Result<ImageGrid, DataError> {
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let data = r.f64s()?;
    ImageGrid::from_data(h, w, c, data).map_err(|e| DataError::Parse {
        offset: 0,
        reason: e.to_string(),
    })
}

fn write_fourier(w: &mut PayloadWriter, op: &SubsampledFourierOperator) {
    w.u32(op.height as u32);
    w.u32(op.width as u32);
    w.f64(op.scale);
    w.u32(op.kept_rows.len() as u32);
    for &row in &op.kept_rows {
        w.u32(row as u32);
    }
    // Coil maps are stored once per dataset; the record only notes use.
    w.u8(op.coil_maps.is_some() as u8);
}

fn read_fourier(
    r: &mut PayloadReader,
    coils: &Option<Arc<Vec<ImageGrid>>>,
) -> Result<SubsampledFourierOperator, DataError> {
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let scale = r.f64()?;
    let n = r.u32()? as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(r.u32()? as usize);
    }
    let uses_coils = r.u8()? != 0;
    let maps = if uses_coils {
        match coils {
            Some(c) => Some(c.clone()),
            None => {
                return Err(DataError::Parse {
                    offset: 0,
                    reason: "operator references coil maps but the dataset has none".into(),
                })
            }
        }
    } else {
        None
    };
    SubsampledFourierOperator::new(h, w, rows, maps, scale).map_err(|e| DataError::Parse {
        offset: 0,
        reason: e.to_string(),
    })
}

fn write_operator(w: &mut PayloadWriter, op: &Operator) {
    match op {
        Operator::PixelMask(m) => {
            w.u8(0);
            w.u32(m.height as u32);
            w.u32(m.width as u32);
            w.u32(m.channels as u32);
            w.f64(m.scale);
            w.u64(m.kept.len() as u64);
            for &k in &m.kept {
                w.u64(k as u64);
            }
        }
        Operator::Fourier(f) => {
            w.u8(1);
            write_fourier(w, f);
        }
        Operator::SliceFourier(s) => {
            w.u8(2);
            w.u32(s.slice_index as u32);
            write_fourier(w, &s.inner);
        }
    }
}

fn read_operator(
    r: &mut PayloadReader,
    coils: &Option<Arc<Vec<ImageGrid>>>,
) -> Result<Operator, DataError> {
    let tag = r.u8()?;
    match tag {
        0 => {
            let h = r.u32()? as usize;
            let w = r.u32()? as usize;
            let c = r.u32()? as usize;
            let scale = r.f64()?;
            let n = r.u64()? as usize;
            let mut kept = Vec::with_capacity(n);
            for _ in 0..n {
                kept.push(r.u64()? as usize);
            }
            Ok(Operator::PixelMask(
                PixelMaskOperator::new(h, w, c, kept, scale).map_err(|e| DataError::Parse {
                    offset: 0,
                    reason: e.to_string(),
                })?,
            ))
        }
        1 => Ok(Operator::Fourier(read_fourier(r, coils)?)),
        2 => {
            let z = r.u32()? as usize;
            Ok(Operator::SliceFourier(SliceFourierOperator {
                slice_index: z,
                inner: read_fourier(r, coils)?,
            }))
        }
        other => Err(DataError::Parse {
            offset: 0,
            reason: format!("unknown operator tag {other}"),
        }),
    }
}

fn write_phantom(w: &mut PayloadWriter, spec: &PhantomSpec) {
    w.u32(spec.height as u32);
    w.u32(spec.width as u32);
    w.u32(spec.n_slice as u32);
    w.u32(spec.frames_per_slice as u32);
    w.f64(spec.cardiac_freq);
    w.f64(spec.resp_freq);
    w.f64(spec.cardiac_amp);
    w.f64(spec.resp_amp);
    for z in 0..spec.n_slice {
        w.f64(spec.cardiac_phase[z]);
        w.f64(spec.resp_phase[z]);
        w.f64(spec.slice_scale[z]);
    }
}

fn read_phantom(r: &mut PayloadReader) -> Result<PhantomSpec, DataError> {
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_slice = r.u32()? as usize;
    let frames_per_slice = r.u32()? as usize;
    let cardiac_freq = r.f64()?;
    let resp_freq = r.f64()?;
    let cardiac_amp = r.f64()?;
    let resp_amp = r.f64()?;
    let mut cardiac_phase = Vec::with_capacity(n_slice);
    let mut resp_phase = Vec::with_capacity(n_slice);
    let mut slice_scale = Vec::with_capacity(n_slice);
    for _ in 0..n_slice {
        cardiac_phase.push(r.f64()?);
        resp_phase.push(r.f64()?);
        slice_scale.push(r.f64()?);
    }
    Ok(PhantomSpec {
        height,
        width,
        n_slice,
        frames_per_slice,
        cardiac_freq,
        resp_freq,
        cardiac_phase,
        resp_phase,
        cardiac_amp,
        resp_amp,
        slice_scale,
    })
}

impl KTDataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = PayloadWriter::new();
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(self.channels as u32);
        w.u32(self.n_slice as u32);
        w.u32(self.frames_per_slice as u32);
        w.u64(self.seed);
        w.f64(self.sigma_meas);
        match &self.coil_maps {
            None => w.u8(0),
            Some(maps) => {
                w.u8(1);
                w.u32(maps.len() as u32);
                for m in maps.iter() {
                    write_image(&mut w, m);
                }
            }
        }
        w.u64(self.frames.len() as u64);
        for f in &self.frames {
            w.u32(f.slice as u32);
            w.u32(f.t as u32);
            write_operator(&mut w, &f.operator);
            w.f64s(&f.b);
        }
        match &self.ground_truth {
            None => w.u8(0),
            Some(truth) => {
                w.u8(1);
                for img in truth {
                    write_image(&mut w, img);
                }
            }
        }
        match &self.phantom {
            None => w.u8(0),
            Some(spec) => {
                w.u8(1);
                write_phantom(&mut w, spec);
            }
        }

        let mut out = Vec::with_capacity(w.buf.len() + 40);
        out.extend_from_slice(DATASET_MAGIC);
        out.write_u32::<LittleEndian>(DATASET_VERSION)?;
        let digest = Sha256::digest(&w.buf);
        out.extend_from_slice(&digest);
        out.extend_from_slice(&w.buf);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 40 || &bytes[0..4] != DATASET_MAGIC {
            return Err(DataError::Parse {
                offset: 0,
                reason: "not a dataset container".into(),
            });
        }
        let version = (&bytes[4..8]).read_u32::<LittleEndian>().unwrap();
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let stored = &bytes[8..40];
        let payload = &bytes[40..];
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored {
            return Err(DataError::Checksum);
        }
        let mut r = PayloadReader::new(payload);
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let n_slice = r.u32()? as usize;
        let frames_per_slice = r.u32()? as usize;
        let seed = r.u64()?;
        let sigma_meas = r.f64()?;
        let coil_maps = if r.u8()? != 0 {
            let n = r.u32()? as usize;
            let mut maps = Vec::with_capacity(n);
            for _ in 0..n {
                maps.push(read_image(&mut r)?);
            }
            Some(Arc::new(maps))
        } else {
            None
        };
        let n_frames = r.u64()? as usize;
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let slice = r.u32()? as usize;
            let t = r.u32()? as usize;
            let operator = read_operator(&mut r, &coil_maps)?;
            let b = r.f64s()?;
            frames.push(FrameRecord {
                slice,
                t,
                operator,
                b,
            });
        }
        let ground_truth = if r.u8()? != 0 {
            let mut truth = Vec::with_capacity(n_frames);
            for _ in 0..n_frames {
                truth.push(read_image(&mut r)?);
            }
            Some(truth)
        } else {
            None
        };
        let phantom = if r.u8()? != 0 {
            Some(read_phantom(&mut r)?)
        } else {
            None
        };
        let ds = KTDataset {
            height,
            width,
            channels,
            n_slice,
            frames_per_slice,
            seed,
            sigma_meas,
            coil_maps,
            frames,
            ground_truth,
            phantom,
        };
        ds.validate()?;
        Ok(ds)
    }
}
