//! Unitary 2D discrete Fourier transform on two-channel grids.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftPlanner};

use crate::error::MeasurementError;
use crate::grid::ImageGrid;

type PlanKey = (usize, bool); // (length, inverse)

static PLANS: Lazy<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = PLANS.lock().unwrap();
    cache
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

fn transform_2d(values: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let row_fft = plan(width, inverse);
    for row in values.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = plan(height, inverse);
    let mut column = vec![Complex64::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = values[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            values[y * width + x] = column[y];
        }
    }
    // 1/sqrt(hw) in both directions makes the pair unitary.
    let norm = 1.0 / ((height * width) as f64).sqrt();
    for v in values.iter_mut() {
        *v *= norm;
    }
}

fn dft2_impl(img: &ImageGrid, inverse: bool) -> Result<ImageGrid, MeasurementError> {
    if img.channels() != 2 {
        return Err(MeasurementError::BadGrid(format!(
            "the Fourier transform needs a two-channel grid, got {} channel(s)",
            img.channels()
        )));
    }
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(MeasurementError::NonFinite("transform input"));
    }
    let mut values = img.to_complex();
    transform_2d(&mut values, img.height(), img.width(), inverse);
    Ok(ImageGrid::from_complex(img.height(), img.width(), &values))
}

/// Unitary forward 2D DFT; preserves the l2 norm.
pub fn dft2_unitary(img: &ImageGrid) -> Result<ImageGrid, MeasurementError> {
    dft2_impl(img, false)
}

/// Unitary inverse 2D DFT; exact inverse and adjoint of [`dft2_unitary`].
pub fn idft2_unitary(img: &ImageGrid) -> Result<ImageGrid, MeasurementError> {
    dft2_impl(img, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ImageGrid::from_data(h, w, 2, data).unwrap()
    }

    #[test]
    fn delta_maps_to_constant() {
        let n = 8;
        let mut img = ImageGrid::zeros(n, n, 2);
        img.set(0, 0, 0, 1.0);
        let spec = dft2_unitary(&img).unwrap();
        for y in 0..n {
            for x in 0..n {
                assert!((spec.get(0, y, x) - 1.0 / n as f64).abs() < 1e-12);
                assert!(spec.get(1, y, x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_maps_to_zero_frequency_spike() {
        let n = 8;
        let data = vec![1.0; n * n]
            .into_iter()
            .chain(vec![0.0; n * n])
            .collect();
        let img = ImageGrid::from_data(n, n, 2, data).unwrap();
        let spec = dft2_unitary(&img).unwrap();
        assert!((spec.get(0, 0, 0) - n as f64).abs() < 1e-12);
        for y in 0..n {
            for x in 0..n {
                if (y, x) != (0, 0) {
                    assert!(spec.get(0, y, x).abs() < 1e-12);
                }
                assert!(spec.get(1, y, x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let img = random_image(16, 16, 7);
        let spec = dft2_unitary(&img).unwrap();
        let rel = (img.energy() - spec.energy()).abs() / img.energy();
        assert!(rel < 1e-10, "relative energy drift {rel}");
    }

    #[test]
    fn round_trip_is_identity() {
        let img = random_image(12, 16, 3);
        let back = idft2_unitary(&dft2_unitary(&img).unwrap()).unwrap();
        let err: f64 = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err / img.energy().sqrt() < 1e-10);
    }

    #[test]
    fn rejects_one_channel_and_non_finite() {
        let img = ImageGrid::zeros(4, 4, 1);
        assert!(dft2_unitary(&img).is_err());
        let mut bad = ImageGrid::zeros(4, 4, 2);
        bad.data_mut()[3] = f64::INFINITY;
        assert!(dft2_unitary(&bad).is_err());
    }
}
