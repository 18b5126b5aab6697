//! Linear measurement operators with exact adjoints.
//!
//! Three operator families: pixel masks (rows of the identity), row-subsampled
//! unitary Fourier operators with optional coil sensitivities, and the
//! slice-extraction variant that measures one slice of a volume. Ensembles
//! draw operators whose Gram expectation is the identity, which is what makes
//! recovery from per-frame undersampling possible.
//!
//! Complex measurements are stored as interleaved (re, im) pairs in a flat
//! real vector, so inner products and norms are the usual real ones.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::MeasurementError;
use crate::fft::{dft2_unitary, idft2_unitary};
use crate::grid::{Field, ImageGrid, VolumeGrid};
use crate::rng;

/// Keeps a subset of coordinates of a flat image buffer, times `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMaskOperator {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Sorted, unique indices into the planar data buffer.
    pub kept: Vec<usize>,
    pub scale: f64,
}

impl PixelMaskOperator {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        kept: Vec<usize>,
        scale: f64,
    ) -> Result<Self, MeasurementError> {
        let len = height * width * channels;
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MeasurementError::BadOperator(
                "kept indices must be sorted and unique".into(),
            ));
        }
        if kept.last().is_some_and(|&last| last >= len) {
            return Err(MeasurementError::BadOperator(format!(
                "kept index out of bounds for {len} values"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(MeasurementError::BadOperator(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        Ok(PixelMaskOperator {
            height,
            width,
            channels,
            kept,
            scale,
        })
    }

    fn describe(&self) -> String {
        format!(
            "pixel mask ({} of {} values kept)",
            self.kept.len(),
            self.height * self.width * self.channels
        )
    }
}

/// Row-restricted unitary 2D DFT, optionally preceded by coil multiplication.
///
/// With coil maps `S_c` (normalized so that sum_c |S_c|^2 = 1 per pixel) the
/// operator stacks `scale * R * F * diag(S_c)` over coils.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampledFourierOperator {
    pub height: usize,
    pub width: usize,
    /// Sorted, unique k-space row indices in `[0, height)`.
    pub kept_rows: Vec<usize>,
    pub coil_maps: Option<Arc<Vec<ImageGrid>>>,
    pub scale: f64,
}

impl SubsampledFourierOperator {
    pub fn new(
        height: usize,
        width: usize,
        kept_rows: Vec<usize>,
        coil_maps: Option<Arc<Vec<ImageGrid>>>,
        scale: f64,
    ) -> Result<Self, MeasurementError> {
        if kept_rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MeasurementError::BadOperator(
                "kept rows must be sorted and unique".into(),
            ));
        }
        if kept_rows.last().is_some_and(|&last| last >= height) {
            return Err(MeasurementError::BadOperator(format!(
                "kept row out of bounds for height {height}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(MeasurementError::BadOperator(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        if let Some(maps) = &coil_maps {
            if maps.is_empty() {
                return Err(MeasurementError::BadOperator("empty coil set".into()));
            }
            for m in maps.iter() {
                if m.shape() != (height, width, 2) {
                    return Err(MeasurementError::BadOperator(format!(
                        "coil map shape {:?} does not match image {height}x{width}x2",
                        m.shape()
                    )));
                }
            }
        }
        Ok(SubsampledFourierOperator {
            height,
            width,
            kept_rows,
            coil_maps,
            scale,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.coil_maps.as_ref().map_or(1, |m| m.len())
    }

    /// Real output length: 2 values (re, im) per kept sample per coil.
    pub fn output_len(&self) -> usize {
        2 * self.kept_rows.len() * self.width * self.n_coils()
    }

    fn describe(&self) -> String {
        format!(
            "fourier ({} of {} rows, {} coil(s), {}x{})",
            self.kept_rows.len(),
            self.height,
            self.n_coils(),
            self.height,
            self.width
        )
    }

    fn apply_image(&self, img: &ImageGrid) -> Result<Vec<f64>, MeasurementError> {
        if img.shape() != (self.height, self.width, 2) {
            return Err(MeasurementError::GeometryMismatch {
                operator: self.describe(),
                input: Field::Image(img.clone()).describe_shape(),
            });
        }
        let mut out = Vec::with_capacity(self.output_len());
        let push_restricted = |spectrum: &ImageGrid, out: &mut Vec<f64>| {
            for &row in &self.kept_rows {
                for x in 0..self.width {
                    out.push(self.scale * spectrum.get(0, row, x));
                    out.push(self.scale * spectrum.get(1, row, x));
                }
            }
        };
        match &self.coil_maps {
            None => {
                let spectrum = dft2_unitary(img)?;
                push_restricted(&spectrum, &mut out);
            }
            Some(maps) => {
                let pixels = img.to_complex();
                for coil in maps.iter() {
                    let weights = coil.to_complex();
                    let weighted: Vec<Complex64> = pixels
                        .iter()
                        .zip(weights.iter())
                        .map(|(p, s)| p * s)
                        .collect();
                    let weighted = ImageGrid::from_complex(self.height, self.width, &weighted);
                    let spectrum = dft2_unitary(&weighted)?;
                    push_restricted(&spectrum, &mut out);
                }
            }
        }
        Ok(out)
    }

    fn adjoint_image(&self, b: &[f64]) -> Result<ImageGrid, MeasurementError> {
        if b.len() != self.output_len() {
            return Err(MeasurementError::LengthMismatch {
                expected: self.output_len(),
                got: b.len(),
            });
        }
        let per_coil = 2 * self.kept_rows.len() * self.width;
        let mut acc = vec![Complex64::default(); self.height * self.width];
        for coil_idx in 0..self.n_coils() {
            let chunk = &b[coil_idx * per_coil..(coil_idx + 1) * per_coil];
            let mut spectrum = ImageGrid::zeros(self.height, self.width, 2);
            let mut k = 0;
            for &row in &self.kept_rows {
                for x in 0..self.width {
                    spectrum.set(0, row, x, self.scale * chunk[k]);
                    spectrum.set(1, row, x, self.scale * chunk[k + 1]);
                    k += 2;
                }
            }
            let img = idft2_unitary(&spectrum)?;
            let values = img.to_complex();
            match &self.coil_maps {
                None => {
                    for (a, v) in acc.iter_mut().zip(values.iter()) {
                        *a += v;
                    }
                }
                Some(maps) => {
                    let weights = maps[coil_idx].to_complex();
                    for ((a, v), s) in acc.iter_mut().zip(values.iter()).zip(weights.iter()) {
                        *a += v * s.conj();
                    }
                }
            }
        }
        Ok(ImageGrid::from_complex(self.height, self.width, &acc))
    }
}

/// Extracts slice `z` of a volume and measures it with the inner operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFourierOperator {
    pub slice_index: usize,
    pub inner: SubsampledFourierOperator,
}

/// Any measurement operator in the system.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    PixelMask(PixelMaskOperator),
    Fourier(SubsampledFourierOperator),
    SliceFourier(SliceFourierOperator),
}

impl Operator {
    pub fn describe(&self) -> String {
        match self {
            Operator::PixelMask(op) => op.describe(),
            Operator::Fourier(op) => op.describe(),
            Operator::SliceFourier(op) => {
                format!("slice {} of {}", op.slice_index, op.inner.describe())
            }
        }
    }

    /// Length of the real measurement vector this operator produces.
    pub fn output_len(&self) -> usize {
        match self {
            Operator::PixelMask(op) => op.kept.len(),
            Operator::Fourier(op) => op.output_len(),
            Operator::SliceFourier(op) => op.inner.output_len(),
        }
    }

    /// Forward measurement; linear in `x`.
    pub fn apply(&self, x: &Field) -> Result<Vec<f64>, MeasurementError> {
        match (self, x) {
            (Operator::PixelMask(op), Field::Image(img)) => {
                if img.shape() != (op.height, op.width, op.channels) {
                    return Err(MeasurementError::GeometryMismatch {
                        operator: op.describe(),
                        input: x.describe_shape(),
                    });
                }
                let data = img.data();
                Ok(op.kept.iter().map(|&i| op.scale * data[i]).collect())
            }
            (Operator::Fourier(op), Field::Image(img)) => op.apply_image(img),
            (Operator::SliceFourier(op), Field::Volume(vol)) => {
                if op.slice_index >= vol.n_slice() {
                    return Err(MeasurementError::GeometryMismatch {
                        operator: self.describe(),
                        input: x.describe_shape(),
                    });
                }
                op.inner.apply_image(vol.slice(op.slice_index))
            }
            _ => Err(MeasurementError::GeometryMismatch {
                operator: self.describe(),
                input: x.describe_shape(),
            }),
        }
    }

    /// Exact adjoint: `<apply(x), b> = <x, adjoint(b)>` for all x, b.
    pub fn adjoint(&self, b: &[f64]) -> Result<Field, MeasurementError> {
        match self {
            Operator::PixelMask(op) => {
                if b.len() != op.kept.len() {
                    return Err(MeasurementError::LengthMismatch {
                        expected: op.kept.len(),
                        got: b.len(),
                    });
                }
                let mut img = ImageGrid::zeros(op.height, op.width, op.channels);
                for (&i, &v) in op.kept.iter().zip(b.iter()) {
                    img.data_mut()[i] = op.scale * v;
                }
                Ok(Field::Image(img))
            }
            Operator::Fourier(op) => Ok(Field::Image(op.adjoint_image(b)?)),
            Operator::SliceFourier(op) => {
                let img = op.inner.adjoint_image(b)?;
                // Volume geometry is the caller's. The adjoint embeds the
                // slice into a volume of the requested size via
                // `adjoint_into_volume`; plain `adjoint` returns a
                // single-slice stand-in only meaningful composed with it.
                let vol = VolumeGrid::new(vec![img]).expect("one slice");
                Ok(Field::Volume(vol))
            }
        }
    }

    /// Adjoint of a slice operator embedded into an `n_slice` volume.
    pub fn adjoint_into_volume(
        &self,
        b: &[f64],
        n_slice: usize,
    ) -> Result<VolumeGrid, MeasurementError> {
        match self {
            Operator::SliceFourier(op) => {
                if op.slice_index >= n_slice {
                    return Err(MeasurementError::BadOperator(format!(
                        "slice index {} out of range for {n_slice} slices",
                        op.slice_index
                    )));
                }
                let img = op.inner.adjoint_image(b)?;
                let mut vol = VolumeGrid::zeros(n_slice, op.inner.height, op.inner.width, 2);
                *vol.slice_mut(op.slice_index) = img;
                Ok(vol)
            }
            _ => Err(MeasurementError::BadOperator(
                "adjoint_into_volume needs a slice operator".into(),
            )),
        }
    }
}

/// Real inner product of two flat vectors.
pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// A sampling law over operators with `E[A^T A] = I`.
#[derive(Debug, Clone)]
pub enum OperatorEnsemble {
    /// Deterministic full sampling (identity mask, scale 1).
    FullImage {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Each coordinate kept independently with probability `keep_prob`;
    /// scale `1/sqrt(keep_prob)`.
    BernoulliMask {
        height: usize,
        width: usize,
        channels: usize,
        keep_prob: f64,
    },
    /// A uniformly random subset of exactly `keep_count` coordinates;
    /// scale `sqrt(total/keep_count)`.
    UniformMask {
        height: usize,
        width: usize,
        channels: usize,
        keep_count: usize,
    },
    /// A uniformly random subset of `rows_kept` k-space rows of the unitary
    /// DFT; scale `sqrt(height/rows_kept)`.
    FourierRows {
        height: usize,
        width: usize,
        rows_kept: usize,
        coil_maps: Option<Arc<Vec<ImageGrid>>>,
    },
}

impl OperatorEnsemble {
    pub fn scale(&self) -> f64 {
        match self {
            OperatorEnsemble::FullImage { .. } => 1.0,
            OperatorEnsemble::BernoulliMask { keep_prob, .. } => 1.0 / keep_prob.sqrt(),
            OperatorEnsemble::UniformMask {
                height,
                width,
                channels,
                keep_count,
            } => (((height * width * channels) as f64) / *keep_count as f64).sqrt(),
            OperatorEnsemble::FourierRows {
                height, rows_kept, ..
            } => (*height as f64 / *rows_kept as f64).sqrt(),
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Operator {
        match self {
            OperatorEnsemble::FullImage {
                height,
                width,
                channels,
            } => Operator::PixelMask(
                PixelMaskOperator::new(
                    *height,
                    *width,
                    *channels,
                    (0..height * width * channels).collect(),
                    1.0,
                )
                .expect("full mask is valid"),
            ),
            OperatorEnsemble::BernoulliMask {
                height,
                width,
                channels,
                keep_prob,
            } => {
                let total = height * width * channels;
                let kept: Vec<usize> =
                    (0..total).filter(|_| rng.gen::<f64>() < *keep_prob).collect();
                Operator::PixelMask(
                    PixelMaskOperator::new(*height, *width, *channels, kept, self.scale())
                        .expect("bernoulli mask is valid"),
                )
            }
            OperatorEnsemble::UniformMask {
                height,
                width,
                channels,
                keep_count,
            } => {
                let total = height * width * channels;
                let kept = sorted_subset(rng, total, *keep_count);
                Operator::PixelMask(
                    PixelMaskOperator::new(*height, *width, *channels, kept, self.scale())
                        .expect("uniform mask is valid"),
                )
            }
            OperatorEnsemble::FourierRows {
                height,
                width,
                rows_kept,
                coil_maps,
            } => {
                let rows = sorted_subset(rng, *height, *rows_kept);
                Operator::Fourier(
                    SubsampledFourierOperator::new(
                        *height,
                        *width,
                        rows,
                        coil_maps.clone(),
                        self.scale(),
                    )
                    .expect("row subset is valid"),
                )
            }
        }
    }

    /// Monte-Carlo check of `E[A^T A] = I`: draws `n_draws` operators,
    /// averages their Gram operators, and returns the largest entrywise
    /// deviation from the identity.
    ///
    /// Every ensemble here restricts rows of a fixed orthonormal transform,
    /// so a draw's Gram operator is determined by its kept-index set; the
    /// empirical Gram mean is accumulated over those sets and then
    /// materialized against basis vectors through the operator machinery.
    pub fn expectation_identity_estimate(
        &self,
        n_draws: usize,
        seed: u64,
    ) -> Result<f64, MeasurementError> {
        if n_draws == 0 {
            return Err(MeasurementError::BadOperator(
                "n_draws must be at least 1".into(),
            ));
        }
        let mut rng = rng::stream(seed, &[rng::tag::MASK]);
        match self {
            OperatorEnsemble::FullImage {
                height,
                width,
                channels,
            }
            | OperatorEnsemble::BernoulliMask {
                height,
                width,
                channels,
                ..
            }
            | OperatorEnsemble::UniformMask {
                height,
                width,
                channels,
                ..
            } => {
                let total = height * width * channels;
                let mut counts = vec![0u64; total];
                for _ in 0..n_draws {
                    if let Operator::PixelMask(op) = self.draw(&mut rng) {
                        for &i in &op.kept {
                            counts[i] += 1;
                        }
                    }
                }
                let s2 = self.scale() * self.scale();
                Ok(counts
                    .iter()
                    .map(|&c| (s2 * c as f64 / n_draws as f64 - 1.0).abs())
                    .fold(0.0, f64::max))
            }
            OperatorEnsemble::FourierRows {
                height,
                width,
                coil_maps,
                ..
            } => {
                let mut row_counts = vec![0u64; *height];
                for _ in 0..n_draws {
                    if let Operator::Fourier(op) = self.draw(&mut rng) {
                        for &r in &op.kept_rows {
                            row_counts[r] += 1;
                        }
                    }
                }
                let s2 = self.scale() * self.scale();
                let row_weight: Vec<f64> = row_counts
                    .iter()
                    .map(|&c| s2 * c as f64 / n_draws as f64)
                    .collect();
                gram_deviation_fourier(*height, *width, &row_weight, coil_maps.as_deref())
            }
        }
    }
}

/// Sorted uniform subset of size `k` from `0..n`, without replacement.
fn sorted_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot keep {k} of {n}");
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Max entrywise deviation from identity of
/// `sum_c conj(S_c) . F^H diag(row_weight) F . (S_c .)`,
/// materialized column by column against pixel basis vectors.
fn gram_deviation_fourier(
    height: usize,
    width: usize,
    row_weight: &[f64],
    coil_maps: Option<&Vec<ImageGrid>>,
) -> Result<f64, MeasurementError> {
    let mut worst: f64 = 0.0;
    let plane = height * width;
    for j in 0..plane {
        let mut delta = ImageGrid::zeros(height, width, 2);
        delta.data_mut()[j] = 1.0;
        let mut acc = vec![Complex64::default(); plane];
        let coil_count = coil_maps.map_or(1, |m| m.len());
        for coil_idx in 0..coil_count {
            let input = match coil_maps {
                None => delta.clone(),
                Some(maps) => {
                    let weights = maps[coil_idx].to_complex();
                    let vals: Vec<Complex64> = delta
                        .to_complex()
                        .iter()
                        .zip(weights.iter())
                        .map(|(p, s)| p * s)
                        .collect();
                    ImageGrid::from_complex(height, width, &vals)
                }
            };
            let mut spectrum = dft2_unitary(&input)?;
            for row in 0..height {
                for x in 0..width {
                    let re = spectrum.get(0, row, x) * row_weight[row];
                    let im = spectrum.get(1, row, x) * row_weight[row];
                    spectrum.set(0, row, x, re);
                    spectrum.set(1, row, x, im);
                }
            }
            let img = idft2_unitary(&spectrum)?;
            let vals = img.to_complex();
            match coil_maps {
                None => {
                    for (a, v) in acc.iter_mut().zip(vals.iter()) {
                        *a += v;
                    }
                }
                Some(maps) => {
                    let weights = maps[coil_idx].to_complex();
                    for ((a, v), s) in acc.iter_mut().zip(vals.iter()).zip(weights.iter()) {
                        *a += v * s.conj();
                    }
                }
            }
        }
        for (i, v) in acc.iter().enumerate() {
            let expected_re = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v.re - expected_re).abs()).max(v.im.abs());
        }
    }
    Ok(worst)
}

/// Smooth synthetic coil sensitivities, normalized so that the
/// sum-of-squared magnitudes is one at every pixel.
pub fn synthetic_coil_maps(height: usize, width: usize, n_coils: usize, seed: u64) -> Vec<ImageGrid> {
    assert!(n_coils >= 1);
    let mut rng = rng::stream(seed, &[rng::tag::MASK, n_coils as u64]);
    // Gaussian bumps centred outside the grid edge, one per coil.
    let mut raw: Vec<Vec<Complex64>> = Vec::with_capacity(n_coils);
    for k in 0..n_coils {
        let angle = std::f64::consts::TAU * (k as f64 + rng.gen::<f64>() * 0.25) / n_coils as f64;
        let cy = height as f64 * (0.5 + 0.65 * angle.sin());
        let cx = width as f64 * (0.5 + 0.65 * angle.cos());
        let sigma = 0.9 * height.max(width) as f64;
        let phase_slope = 0.5 + rng.gen::<f64>();
        let mut vals = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy) / sigma;
                let dx = (x as f64 - cx) / sigma;
                let mag = (-(dy * dy + dx * dx)).exp() + 0.05;
                let phase = phase_slope * (x as f64 / width as f64 - y as f64 / height as f64);
                vals.push(Complex64::from_polar(mag, phase));
            }
        }
        raw.push(vals);
    }
    let plane = height * width;
    let mut maps = Vec::with_capacity(n_coils);
    for k in 0..n_coils {
        let mut vals = Vec::with_capacity(plane);
        for i in 0..plane {
            let ssq: f64 = raw.iter().map(|m| m[i].norm_sqr()).sum();
            vals.push(raw[k][i] / ssq.sqrt());
        }
        maps.push(ImageGrid::from_complex(height, width, &vals));
    }
    maps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect();
        ImageGrid::from_data(h, w, c, data).unwrap()
    }

    #[test]
    fn pixel_mask_apply_and_adjoint_examples() {
        let op = Operator::PixelMask(
            PixelMaskOperator::new(1, 3, 1, vec![0, 2], 1.0).unwrap(),
        );
        let x = Field::Image(ImageGrid::from_data(1, 3, 1, vec![3.0, 4.0, 5.0]).unwrap());
        assert_eq!(op.apply(&x).unwrap(), vec![3.0, 5.0]);
        let back = op.adjoint(&[3.0, 5.0]).unwrap();
        assert_eq!(back.as_image().unwrap().data(), &[3.0, 0.0, 5.0]);
    }

    #[test]
    fn zero_measurement_gives_zero_image() {
        let op = Operator::Fourier(
            SubsampledFourierOperator::new(4, 4, vec![0, 2], None, 2.0_f64.sqrt()).unwrap(),
        );
        let img = op.adjoint(&vec![0.0; op.output_len()]).unwrap();
        assert!(img.as_image().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slice_operator_on_zero_slice_measures_zero() {
        let inner = SubsampledFourierOperator::new(4, 4, vec![1, 3], None, 1.0).unwrap();
        let op = Operator::SliceFourier(SliceFourierOperator {
            slice_index: 1,
            inner,
        });
        let mut vol = VolumeGrid::zeros(3, 4, 4, 2);
        *vol.slice_mut(0) = random_image(4, 4, 2, 1);
        *vol.slice_mut(2) = random_image(4, 4, 2, 2);
        let b = op.apply(&Field::Volume(vol)).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_row_fourier_matches_unitary_dft() {
        let img = random_image(8, 8, 2, 5);
        let uniform = Arc::new(vec![ImageGrid::from_complex(
            8,
            8,
            &vec![Complex64::new(1.0, 0.0); 64],
        )]);
        let op = Operator::Fourier(
            SubsampledFourierOperator::new(8, 8, (0..8).collect(), Some(uniform), 1.0).unwrap(),
        );
        let b = op.apply(&Field::Image(img.clone())).unwrap();
        let spec = dft2_unitary(&img).unwrap();
        let mut expected = Vec::new();
        for row in 0..8 {
            for x in 0..8 {
                expected.push(spec.get(0, row, x));
                expected.push(spec.get(1, row, x));
            }
        }
        for (a, e) in b.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_operator_equals_inner_on_extracted_slice() {
        let inner = SubsampledFourierOperator::new(6, 6, vec![0, 3, 4], None, 1.4142).unwrap();
        let sliced = Operator::SliceFourier(SliceFourierOperator {
            slice_index: 2,
            inner: inner.clone(),
        });
        let plain = Operator::Fourier(inner);
        let mut vol = VolumeGrid::zeros(4, 6, 6, 2);
        for z in 0..4 {
            *vol.slice_mut(z) = random_image(6, 6, 2, 10 + z as u64);
        }
        let b_slice = sliced.apply(&Field::Volume(vol.clone())).unwrap();
        let b_plain = plain.apply(&Field::Image(vol.slice(2).clone())).unwrap();
        assert_eq!(b_slice, b_plain); // bitwise
    }

    fn adjoint_identity(op: &Operator, x: &Field, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ax = op.apply(x).unwrap();
        let b: Vec<f64> = (0..ax.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let atb = match op {
            Operator::SliceFourier(_) => Field::Volume(
                op.adjoint_into_volume(&b, x.as_volume().unwrap().n_slice())
                    .unwrap(),
            ),
            _ => op.adjoint(&b).unwrap(),
        };
        let lhs = inner(&ax, &b);
        let rhs = inner(&x.flattened(), &atb.flattened());
        let denom = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(
            (lhs - rhs).abs() / denom < 1e-10,
            "adjoint identity broken: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn adjoint_identity_all_operator_kinds() {
        let mask = Operator::PixelMask(
            PixelMaskOperator::new(4, 4, 1, vec![1, 5, 6, 11], 1.7).unwrap(),
        );
        adjoint_identity(&mask, &Field::Image(random_image(4, 4, 1, 21)), 31);

        let coils = Arc::new(synthetic_coil_maps(8, 8, 3, 9));
        let fourier = Operator::Fourier(
            SubsampledFourierOperator::new(8, 8, vec![0, 1, 5], Some(coils), 1.2).unwrap(),
        );
        adjoint_identity(&fourier, &Field::Image(random_image(8, 8, 2, 22)), 32);

        let inner_op = SubsampledFourierOperator::new(8, 8, vec![2, 7], None, 2.0).unwrap();
        let sliced = Operator::SliceFourier(SliceFourierOperator {
            slice_index: 1,
            inner: inner_op,
        });
        let mut vol = VolumeGrid::zeros(3, 8, 8, 2);
        for z in 0..3 {
            *vol.slice_mut(z) = random_image(8, 8, 2, 40 + z as u64);
        }
        adjoint_identity(&sliced, &Field::Volume(vol), 33);
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let op = Operator::PixelMask(PixelMaskOperator::new(4, 4, 1, vec![0], 1.0).unwrap());
        let err = op
            .apply(&Field::Image(ImageGrid::zeros(5, 4, 1)))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pixel mask") && msg.contains("5x4x1"), "{msg}");
    }

    #[test]
    fn full_sampling_expectation_deviation_is_zero() {
        let ens = OperatorEnsemble::FullImage {
            height: 4,
            width: 4,
            channels: 1,
        };
        assert_eq!(ens.expectation_identity_estimate(3, 0).unwrap(), 0.0);
    }

    #[test]
    fn coil_maps_have_unit_sum_of_squares() {
        let maps = synthetic_coil_maps(8, 8, 3, 4);
        for i in 0..64 {
            let ssq: f64 = maps
                .iter()
                .map(|m| {
                    let v = m.to_complex()[i];
                    v.norm_sqr()
                })
                .sum();
            assert!((ssq - 1.0).abs() < 1e-12);
        }
    }

    /// Brute-force Gram estimator: averages adjoint(apply(e_j)) per draw.
    fn brute_force_deviation(ens: &OperatorEnsemble, n_draws: usize, seed: u64) -> f64 {
        let (h, w, c) = match ens {
            OperatorEnsemble::BernoulliMask {
                height,
                width,
                channels,
                ..
            }
            | OperatorEnsemble::UniformMask {
                height,
                width,
                channels,
                ..
            }
            | OperatorEnsemble::FullImage {
                height,
                width,
                channels,
            } => (*height, *width, *channels),
            OperatorEnsemble::FourierRows { height, width, .. } => (*height, *width, 2),
        };
        let dim = h * w * c;
        let mut gram = vec![vec![0.0; dim]; dim];
        let mut rng = rng::stream(seed, &[rng::tag::MASK]);
        for _ in 0..n_draws {
            let op = ens.draw(&mut rng);
            for j in 0..dim {
                let mut data = vec![0.0; dim];
                data[j] = 1.0;
                let x = Field::Image(ImageGrid::from_data(h, w, c, data).unwrap());
                let col = op.adjoint(&op.apply(&x).unwrap()).unwrap().flattened();
                for (i, v) in col.iter().enumerate() {
                    gram[j][i] += v / n_draws as f64;
                }
            }
        }
        let mut worst: f64 = 0.0;
        for j in 0..dim {
            for i in 0..dim {
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[j][i] - expected).abs());
            }
        }
        worst
    }

    #[test]
    fn expectation_estimate_matches_brute_force() {
        let mask = OperatorEnsemble::BernoulliMask {
            height: 2,
            width: 3,
            channels: 1,
            keep_prob: 0.4,
        };
        let fast = mask.expectation_identity_estimate(120, 5).unwrap();
        let brute = brute_force_deviation(&mask, 120, 5);
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");

        let four = OperatorEnsemble::FourierRows {
            height: 4,
            width: 4,
            rows_kept: 2,
            coil_maps: None,
        };
        let fast = four.expectation_identity_estimate(150, 6).unwrap();
        let brute = brute_force_deviation(&four, 150, 6);
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
    }

    #[test]
    fn expectation_estimate_shrinks_with_draws() {
        let ens = OperatorEnsemble::UniformMask {
            height: 4,
            width: 4,
            channels: 1,
            keep_count: 8,
        };
        let coarse = ens.expectation_identity_estimate(500, 3).unwrap();
        let fine = ens.expectation_identity_estimate(8000, 3).unwrap();
        assert!(fine < coarse, "{fine} !< {coarse}");
    }
}
