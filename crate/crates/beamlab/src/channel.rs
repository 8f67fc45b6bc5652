//! Sectored-antenna measurement model: beamforming gain, noisy complex
//! observation synthesis, and the per-bin log-likelihood.
//!
//! A beam of length `ℓ` has main-lobe gain `2π/ℓ` inside its arc and zero
//! outside. With pilot `s = 1` and the known beam phase rotated out, the
//! measurement is `y = h·√(P·G) + n` with `n ~ CN(0, σ²)`.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::angular::{circ_dist, Angle, Beam};

/// Measurement-model constants `(h, P, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    /// Real channel gain (amplitude).
    pub h: f64,
    /// Transmit power (linear).
    pub p: f64,
    /// Total complex-noise variance (linear).
    pub sigma2: f64,
}

impl ChannelParams {
    pub fn new(h: f64, p: f64, sigma2: f64) -> ChannelParams {
        assert!(h >= 0.0 && p > 0.0 && sigma2 >= 0.0, "invalid channel params");
        ChannelParams { h, p, sigma2 }
    }

    /// Unit-gain, unit-power channel whose noise variance realizes the given
    /// raw SNR: `σ² = 10^(−snr_db/10)`.
    pub fn from_raw_snr_db(snr_db: f64) -> ChannelParams {
        ChannelParams::new(1.0, 1.0, 10f64.powf(-snr_db / 10.0))
    }

    /// Raw SNR `h²P/σ²` in dB; `None` in the noiseless regime `σ² = 0`.
    pub fn raw_snr_db(&self) -> Option<f64> {
        if self.sigma2 > 0.0 {
            Some(10.0 * (self.h * self.h * self.p / self.sigma2).log10())
        } else {
            None
        }
    }
}

/// One complex received sample `y_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub re: f64,
    pub im: f64,
}

/// Sectored gain: `2π/ℓ` inside the beam, 0 outside.
pub fn beam_gain(beam: &Beam, psi: Angle) -> f64 {
    if beam.contains(psi) {
        TAU / beam.length()
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Boundary-smoothed sectored gain, differentiable in the beam parameters.
///
/// `(2π/ℓ)·σ((ℓ/2 − d(ψ, center))/τ)` where `d` is circular distance and `τ`
/// the smoothing temperature.
pub fn soft_beam_gain(beam: &Beam, psi: Angle, tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    let d = circ_dist(psi, beam.center());
    (TAU / beam.length()) * logistic((beam.length() / 2.0 - d) / tau)
}

/// Noise-free mean `h·√(P·G(beam, ψ))`.
pub fn mean_amplitude(psi: Angle, beam: &Beam, ch: &ChannelParams) -> f64 {
    ch.h * (ch.p * beam_gain(beam, psi)).sqrt()
}

/// Draws `y = h·√(P·G) + n`, with independent real/imag noise parts of
/// variance `σ²/2` each.
pub fn sample_measurement<R: Rng>(
    psi_true: Angle,
    beam: &Beam,
    ch: &ChannelParams,
    rng: &mut R,
) -> Measurement {
    let mu = mean_amplitude(psi_true, beam, ch);
    let std = (ch.sigma2 / 2.0).sqrt();
    let n_re: f64 = rng.sample(StandardNormal);
    let n_im: f64 = rng.sample(StandardNormal);
    Measurement {
        re: mu + std * n_re,
        im: std * n_im,
    }
}

/// Which gain enters the likelihood mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainMode {
    Hard,
    Soft { tau: f64 },
}

/// Log-likelihood of `y` at a hypothesized AoA, up to an additive constant
/// shared across bins: `−|y − μ|²/σ²` with `μ = h·√(P·g)`.
pub fn loglik(
    y: &Measurement,
    psi: Angle,
    beam: &Beam,
    ch: &ChannelParams,
    mode: GainMode,
) -> f64 {
    assert!(ch.sigma2 > 0.0, "likelihood undefined in the noiseless regime");
    let g = match mode {
        GainMode::Hard => beam_gain(beam, psi),
        GainMode::Soft { tau } => soft_beam_gain(beam, psi, tau),
    };
    let mu = ch.h * (ch.p * g).sqrt();
    let dr = y.re - mu;
    -(dr * dr + y.im * y.im) / ch.sigma2
}
