//! Objective quality measures: SNR, scale-invariant SDR and STOI.
//!
//! Every log-ratio is capped to `[-100, +100]` dB so degenerate inputs give
//! finite, comparable numbers.

mod resample;
mod stoi;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::signal::Waveform;

pub use resample::resample;
pub use stoi::{stoi, STOI_SAMPLE_RATE};

pub const DB_CAP: f64 = 100.0;
/// Energies below this count as zero.
pub const ENERGY_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sdr_db: f64,
    pub stoi: f64,
    pub snr_db: f64,
}

/// `10 log10(num / den)` with the ±100 dB caps.
pub fn capped_db(num: f64, den: f64) -> f64 {
    if num < ENERGY_FLOOR {
        -DB_CAP
    } else if den < ENERGY_FLOOR {
        DB_CAP
    } else {
        (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Signal-to-noise ratio of `s` against `n`.
pub fn snr(s: &Waveform, n: &Waveform) -> Result<f64> {
    ensure_shape!(
        s.len() == n.len(),
        "signal length {} vs noise length {}",
        s.len(),
        n.len()
    );
    Ok(capped_db(s.energy(), n.energy()))
}

/// Scale-invariant signal-to-distortion ratio of `estimate` against
/// `reference`: the estimate is projected on the reference and the
/// remainder counts as distortion.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    sdr_samples(estimate.samples(), reference.samples())
}

pub fn sdr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    ensure_shape!(
        est.len() == reference.len(),
        "estimate length {} vs reference length {}",
        est.len(),
        reference.len()
    );
    let ref_energy = energy(reference);
    if ref_energy < ENERGY_FLOOR {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let distortion: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    Ok(capped_db(target, distortion))
}

/// SDR, STOI and output SNR (reference vs. residual) of an estimate.
pub fn evaluate(estimate: &Waveform, reference: &Waveform) -> Result<EvalResult> {
    let residual = Waveform::new(
        estimate
            .samples()
            .iter()
            .zip(reference.samples())
            .map(|(e, r)| e - r)
            .collect(),
        reference.sample_rate(),
    )?;
    Ok(EvalResult {
        sdr_db: sdr(estimate, reference)?,
        stoi: stoi(estimate, reference)?,
        snr_db: snr(reference, &residual)?,
    })
}
