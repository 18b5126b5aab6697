//! Per-frame Gaussian variational distributions.
//!
//! Each frame (slice z, time t) owns a mean vector and a raw deviation
//! vector rho with deviation s = softplus(rho) > 0, defining
//! q = N(mean, diag(s^2)) against the unit Gaussian prior N(0, I).

use crate::error::LatentError;
use crate::rng;

/// softplus, computed stably for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d softplus / dx.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw deviation value whose softplus equals `s`.
pub fn softplus_inverse(s: f64) -> f64 {
    assert!(s > 0.0);
    s.exp_m1().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameIndex {
    pub slice: usize,
    pub t: usize,
}

/// A reparameterized draw `c = mean + s .* eps`.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub c: Vec<f64>,
    pub eps: Vec<f64>,
    pub frame: FrameIndex,
}

/// Variational parameters for every frame of every slice.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLatentBank {
    n_slice: usize,
    n_frames: usize,
    latent_dim: usize,
    /// mean, flat: [slice][frame][dim]
    mu: Vec<f64>,
    /// raw deviation, same layout; s = softplus(rho)
    rho: Vec<f64>,
}

impl VariationalLatentBank {
    /// Near-prior initialization: mean 0, deviation `init_s` everywhere.
    pub fn new(n_slice: usize, n_frames: usize, latent_dim: usize, init_s: f64) -> Self {
        assert!(n_slice >= 1 && n_frames >= 1 && latent_dim >= 1);
        assert!(init_s > 0.0);
        let len = n_slice * n_frames * latent_dim;
        VariationalLatentBank {
            n_slice,
            n_frames,
            latent_dim,
            mu: vec![0.0; len],
            rho: vec![softplus_inverse(init_s); len],
        }
    }

    pub fn from_parts(
        n_slice: usize,
        n_frames: usize,
        latent_dim: usize,
        mu: Vec<f64>,
        rho: Vec<f64>,
    ) -> Self {
        let len = n_slice * n_frames * latent_dim;
        assert_eq!(mu.len(), len);
        assert_eq!(rho.len(), len);
        VariationalLatentBank {
            n_slice,
            n_frames,
            latent_dim,
            mu,
            rho,
        }
    }

    pub fn n_slice(&self) -> usize {
        self.n_slice
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut [f64] {
        &mut self.rho
    }

    pub fn flat_index(&self, frame: FrameIndex) -> Result<usize, LatentError> {
        if frame.slice >= self.n_slice || frame.t >= self.n_frames {
            return Err(LatentError::UnknownFrame {
                slice: frame.slice,
                t: frame.t,
                n_slice: self.n_slice,
                n_frames: self.n_frames,
            });
        }
        Ok((frame.slice * self.n_frames + frame.t) * self.latent_dim)
    }

    pub fn mean_of(&self, frame: FrameIndex) -> Result<&[f64], LatentError> {
        let off = self.flat_index(frame)?;
        Ok(&self.mu[off..off + self.latent_dim])
    }

    pub fn rho_of(&self, frame: FrameIndex) -> Result<&[f64], LatentError> {
        let off = self.flat_index(frame)?;
        Ok(&self.rho[off..off + self.latent_dim])
    }

    pub fn deviation_of(&self, frame: FrameIndex) -> Result<Vec<f64>, LatentError> {
        Ok(self.rho_of(frame)?.iter().map(|&r| softplus(r)).collect())
    }

    /// Reparameterized sample `c = mean + s .* eps`.
    pub fn sample(&self, frame: FrameIndex, eps: &[f64]) -> Result<LatentSample, LatentError> {
        if eps.len() != self.latent_dim {
            return Err(LatentError::DrawLength {
                expected: self.latent_dim,
                got: eps.len(),
            });
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(LatentError::NonFiniteDraw);
        }
        let mean = self.mean_of(frame)?;
        let rho = self.rho_of(frame)?;
        let c = mean
            .iter()
            .zip(rho.iter())
            .zip(eps.iter())
            .map(|((&m, &r), &e)| m + softplus(r) * e)
            .collect();
        Ok(LatentSample {
            c,
            eps: eps.to_vec(),
            frame,
        })
    }

    /// Fresh standard-normal draw for a frame, keyed by `(seed, epoch)`.
    pub fn draw_eps(&self, seed: u64, epoch: usize, frame: FrameIndex) -> Vec<f64> {
        let mut stream = rng::stream(
            seed,
            &[
                rng::tag::EPSILON,
                epoch as u64,
                frame.slice as u64,
                frame.t as u64,
            ],
        );
        let mut eps = vec![0.0; self.latent_dim];
        rng::fill_standard_normal(&mut stream, &mut eps);
        eps
    }

    /// Sum of per-frame KL over the whole bank.
    pub fn total_kl(&self) -> Result<f64, LatentError> {
        let mut total = 0.0;
        for frame_off in (0..self.mu.len()).step_by(self.latent_dim) {
            let mu = &self.mu[frame_off..frame_off + self.latent_dim];
            let s: Vec<f64> = self.rho[frame_off..frame_off + self.latent_dim]
                .iter()
                .map(|&r| softplus(r))
                .collect();
            total += kl_unit_gaussian(mu, &s)?;
        }
        Ok(total)
    }
}

/// Closed-form KL divergence from N(mean, diag(s^2)) to N(0, I):
/// `(-log det(diag(s^2)) - n + trace(diag(s^2)) + mean' mean) / 2`.
pub fn kl_unit_gaussian(mean: &[f64], s: &[f64]) -> Result<f64, LatentError> {
    assert_eq!(mean.len(), s.len());
    let mut acc = 0.0;
    for (&m, &si) in mean.iter().zip(s.iter()) {
        if !(si > 0.0) {
            return Err(LatentError::NonPositiveDeviation(si));
        }
        acc += -2.0 * si.ln() - 1.0 + si * si + m * m;
    }
    Ok(acc / 2.0)
}

/// Gradient of [`kl_unit_gaussian`] with respect to mean and raw deviation.
pub fn kl_unit_gaussian_grad(mean: &[f64], rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_mean = mean.to_vec();
    let d_rho = rho
        .iter()
        .map(|&r| {
            let s = softplus(r);
            (s - 1.0 / s) * sigmoid(r)
        })
        .collect();
    (d_mean, d_rho)
}

/// Sum over t of ||mean(t+1) - mean(t)||^2 for one slice, with its exact
/// gradient with respect to that slice's means. A single frame gives 0.
pub fn temporal_smoothness(
    bank: &VariationalLatentBank,
    slice: usize,
) -> Result<(f64, Vec<f64>), LatentError> {
    if slice >= bank.n_slice() {
        return Err(LatentError::UnknownFrame {
            slice,
            t: 0,
            n_slice: bank.n_slice(),
            n_frames: bank.n_frames(),
        });
    }
    let n = bank.n_frames();
    let dim = bank.latent_dim();
    let base = slice * n * dim;
    let mu = &bank.mu()[base..base + n * dim];
    let mut value = 0.0;
    let mut grad = vec![0.0; n * dim];
    for t in 0..n.saturating_sub(1) {
        for k in 0..dim {
            let d = mu[(t + 1) * dim + k] - mu[t * dim + k];
            value += d * d;
            grad[(t + 1) * dim + k] += 2.0 * d;
            grad[t * dim + k] -= 2.0 * d;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream, tag};

    #[test]
    fn sample_with_zero_eps_is_the_mean() {
        let mut bank = VariationalLatentBank::new(1, 3, 2, 0.5);
        bank.mu_mut()[2] = 1.5;
        bank.mu_mut()[3] = -0.25;
        let frame = FrameIndex { slice: 0, t: 1 };
        let s = bank.sample(frame, &[0.0, 0.0]).unwrap();
        assert_eq!(s.c, vec![1.5, -0.25]);
    }

    #[test]
    fn degenerate_deviation_collapses_to_mean() {
        let mut bank = VariationalLatentBank::new(1, 1, 2, 1.0);
        bank.mu_mut().copy_from_slice(&[0.7, -0.3]);
        bank.rho_mut().fill(-60.0); // s = softplus(-60) ~ 1e-26
        let s = bank
            .sample(FrameIndex { slice: 0, t: 0 }, &[5.0, -7.0])
            .unwrap();
        assert!((s.c[0] - 0.7).abs() < 1e-20);
        assert!((s.c[1] + 0.3).abs() < 1e-20);
    }

    #[test]
    fn unknown_frame_is_rejected() {
        let bank = VariationalLatentBank::new(2, 4, 3, 0.1);
        assert!(bank.sample(FrameIndex { slice: 2, t: 0 }, &[0.0; 3]).is_err());
        assert!(bank.sample(FrameIndex { slice: 0, t: 4 }, &[0.0; 3]).is_err());
    }

    #[test]
    fn sample_monte_carlo_mean_matches() {
        // Empirical mean of c over many draws stays within 4 s / sqrt(n)
        // of the mean parameter, per coordinate.
        let mut bank = VariationalLatentBank::new(1, 1, 2, 0.8);
        bank.mu_mut().copy_from_slice(&[0.4, -1.1]);
        let frame = FrameIndex { slice: 0, t: 0 };
        let n = 100_000;
        let mut acc = [0.0f64; 2];
        let mut rng = stream(99, &[tag::EPSILON]);
        for _ in 0..n {
            let eps = [standard_normal(&mut rng), standard_normal(&mut rng)];
            let s = bank.sample(frame, &eps).unwrap();
            acc[0] += s.c[0];
            acc[1] += s.c[1];
        }
        let s = softplus(softplus_inverse(0.8));
        let tol = 4.0 * s / (n as f64).sqrt();
        assert!((acc[0] / n as f64 - 0.4).abs() < tol);
        assert!((acc[1] / n as f64 + 1.1).abs() < tol);
    }

    #[test]
    fn kl_plug_in_values() {
        assert_eq!(kl_unit_gaussian(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        let v = kl_unit_gaussian(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v = kl_unit_gaussian(&[0.0], &[2.0]).unwrap();
        assert!((v - (3.0 - 4.0f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_nonpositive_deviation() {
        assert!(kl_unit_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_unit_gaussian(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_monte_carlo_oracle() {
        // E_q[log q - log p] estimated by sampling agrees with the closed
        // form within 3 standard errors.
        let mean = [0.0f64];
        let s = [2.0f64];
        let closed = kl_unit_gaussian(&mean, &s).unwrap();
        let n = 1_000_000usize;
        let mut rng = stream(7, &[tag::EPSILON, 1]);
        let (mut acc, mut acc2) = (0.0, 0.0);
        for _ in 0..n {
            let eps = standard_normal(&mut rng);
            let c = mean[0] + s[0] * eps;
            // log q(c) - log p(c) with matching constants cancelled.
            let v = -s[0].ln() - 0.5 * eps * eps + 0.5 * c * c;
            acc += v;
            acc2 += v * v;
        }
        let est = acc / n as f64;
        let var = (acc2 / n as f64 - est * est).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (est - closed).abs() <= 3.0 * se,
            "MC {est} vs closed {closed}, se {se}"
        );
    }

    #[test]
    fn kl_permutation_invariant() {
        let mean = [0.3, -1.2, 0.9];
        let s = [0.5, 1.5, 2.5];
        let a = kl_unit_gaussian(&mean, &s).unwrap();
        let b = kl_unit_gaussian(&[-1.2, 0.9, 0.3], &[1.5, 2.5, 0.5]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn smoothness_plug_ins() {
        // Constant mean: zero. Linear mean mu(t) = t with unit steps: N-1.
        let n = 6;
        let mut bank = VariationalLatentBank::new(1, n, 1, 0.1);
        assert_eq!(temporal_smoothness(&bank, 0).unwrap().0, 0.0);
        for t in 0..n {
            bank.mu_mut()[t] = t as f64;
        }
        let (v, _) = temporal_smoothness(&bank, 0).unwrap();
        assert_eq!(v, (n - 1) as f64);
    }

    #[test]
    fn smoothness_single_frame_is_zero() {
        let bank = VariationalLatentBank::new(1, 1, 3, 0.1);
        let (v, g) = temporal_smoothness(&bank, 0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut bank = VariationalLatentBank::new(1, 5, 2, 0.1);
        let mut rng = stream(3, &[tag::INIT]);
        for v in bank.mu_mut().iter_mut() {
            *v = standard_normal(&mut rng);
        }
        let (_, grad) = temporal_smoothness(&bank, 0).unwrap();
        let h = 1e-6;
        for i in 0..bank.mu().len() {
            let mut plus = bank.clone();
            plus.mu_mut()[i] += h;
            let mut minus = bank.clone();
            minus.mu_mut()[i] -= h;
            let fd = (temporal_smoothness(&plus, 0).unwrap().0
                - temporal_smoothness(&minus, 0).unwrap().0)
                / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-8,
                "coord {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mean = [0.7, -0.4];
        let rho = [0.3, -1.1];
        let s: Vec<f64> = rho.iter().map(|&r| softplus(r)).collect();
        let (d_mean, d_rho) = kl_unit_gaussian_grad(&mean, &rho);
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = mean;
            mp[i] += h;
            let mut mm = mean;
            mm[i] -= h;
            let fd = (kl_unit_gaussian(&mp, &s).unwrap() - kl_unit_gaussian(&mm, &s).unwrap())
                / (2.0 * h);
            assert!((d_mean[i] - fd).abs() < 1e-8);

            let mut rp = rho;
            rp[i] += h;
            let sp: Vec<f64> = rp.iter().map(|&r| softplus(r)).collect();
            let mut rm = rho;
            rm[i] -= h;
            let sm: Vec<f64> = rm.iter().map(|&r| softplus(r)).collect();
            let fd = (kl_unit_gaussian(&mean, &sp).unwrap()
                - kl_unit_gaussian(&mean, &sm).unwrap())
                / (2.0 * h);
            assert!((d_rho[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn reparameterized_gradient_is_unbiased() {
        // For f(c) = ||c||^2, E_q f = ||mean||^2 + ||s||^2. The Monte-Carlo
        // gradient through c = mean + s eps must match the analytic gradient
        // (2 mean, 2 s) within 3 standard errors.
        let mean = [0.6, -0.2];
        let s = [0.9, 0.4];
        let n = 100_000usize;
        let mut rng = stream(21, &[tag::EPSILON, 2]);
        let mut g_mean = [0.0f64; 2];
        let mut g_s = [0.0f64; 2];
        let mut g_mean2 = [0.0f64; 2];
        let mut g_s2 = [0.0f64; 2];
        for _ in 0..n {
            for k in 0..2 {
                let eps = standard_normal(&mut rng);
                let c = mean[k] + s[k] * eps;
                // d f / d mean = 2 c, d f / d s = 2 c eps
                let gm = 2.0 * c;
                let gs = 2.0 * c * eps;
                g_mean[k] += gm;
                g_s[k] += gs;
                g_mean2[k] += gm * gm;
                g_s2[k] += gs * gs;
            }
        }
        for k in 0..2 {
            let m = g_mean[k] / n as f64;
            let se = ((g_mean2[k] / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - 2.0 * mean[k]).abs() <= 3.0 * se, "mean grad {k}");
            let m = g_s[k] / n as f64;
            let se = ((g_s2[k] / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - 2.0 * s[k]).abs() <= 3.0 * se, "s grad {k}");
        }
    }
}
