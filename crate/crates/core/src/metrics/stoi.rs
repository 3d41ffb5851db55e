//! Short-time objective intelligibility.
//!
//! Follows the reference procedure: resample to 10 kHz, drop frames more
//! than 40 dB below the loudest reference frame, take a 256-sample / 50 %
//! overlap STFT (512-point FFT), pool bins into 15 one-third-octave bands
//! from 150 Hz, and average per-band envelope correlations over 30-frame
//! (384 ms) segments after normalizing and clipping the degraded envelope
//! at a -15 dB signal-to-distortion floor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::resample;
use crate::error::{ensure_shape, Error, Result};
use crate::signal::Waveform;

pub const STOI_SAMPLE_RATE: u32 = 10_000;
const FRAME_LEN: usize = 256;
const FFT_LEN: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Symmetric Hann window without its zero end points (length `n`).
fn hanning_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frames(x: &[f64], window: &[f64], hop: usize, inclusive_end: bool) -> Vec<Vec<f64>> {
    let len = window.len();
    if x.len() < len {
        return Vec::new();
    }
    let last = if inclusive_end {
        x.len() - len + 1
    } else {
        x.len() - len
    };
    (0..last)
        .step_by(hop)
        .map(|s| x[s..s + len].iter().zip(window).map(|(a, w)| a * w).collect())
        .collect()
}

fn overlap_add(frames: &[Vec<f64>], hop: usize) -> Vec<f64> {
    if frames.is_empty() {
        return Vec::new();
    }
    let len = frames[0].len();
    let mut out = vec![0.0; (frames.len() - 1) * hop + len];
    for (i, f) in frames.iter().enumerate() {
        for (o, v) in out[i * hop..i * hop + len].iter_mut().zip(f) {
            *o += v;
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Removes frames of both signals where the reference is more than
/// `DYN_RANGE_DB` below its loudest frame.
fn remove_silent_frames(reference: &[f64], degraded: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let window = hanning_inner(FRAME_LEN);
    let hop = FRAME_LEN / 2;
    let rf = frames(reference, &window, hop, true);
    let df = frames(degraded, &window, hop, true);
    let energies: Vec<f64> = rf.iter().map(|f| 20.0 * (norm(f) + EPS).log10()).collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep = |i: &usize| max - DYN_RANGE_DB - energies[*i] < 0.0;
    let r: Vec<Vec<f64>> = (0..rf.len()).filter(keep).map(|i| rf[i].clone()).collect();
    let d: Vec<Vec<f64>> = (0..df.len()).filter(keep).map(|i| df[i].clone()).collect();
    (overlap_add(&r, hop), overlap_add(&d, hop))
}

/// Band-by-frame one-third-octave envelopes.
fn third_octave_envelopes(x: &[f64], band_matrix: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let window = hanning_inner(FRAME_LEN);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let spec: Vec<Vec<f64>> = frames(x, &window, FRAME_LEN / 2, false)
        .into_iter()
        .map(|f| {
            let mut buf: Vec<Complex64> = f
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
                .take(FFT_LEN)
                .collect();
            fft.process(&mut buf);
            buf[..FFT_LEN / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect();
    band_matrix
        .iter()
        .map(|band| {
            spec.iter()
                .map(|power| band.iter().zip(power).map(|(b, p)| b * p).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn third_octave_bands() -> Vec<Vec<f64>> {
    let bins = FFT_LEN / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|i| i as f64 * STOI_SAMPLE_RATE as f64 / FFT_LEN as f64)
        .collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = nearest(MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0));
            let hi = nearest(MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0));
            (0..bins).map(|i| if i >= lo && i < hi { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

/// STOI of `estimate` against `reference`, clamped to `[0, 1]`.
pub fn stoi(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    ensure_shape!(
        estimate.len() == reference.len(),
        "estimate length {} vs reference length {}",
        estimate.len(),
        reference.len()
    );
    ensure_shape!(estimate.sample_rate() == reference.sample_rate(), "sample rates differ");
    let fs = reference.sample_rate();
    if fs < STOI_SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "STOI needs at least {STOI_SAMPLE_RATE} Hz, got {fs}"
        )));
    }
    let x = resample(reference.samples(), fs, STOI_SAMPLE_RATE);
    let y = resample(estimate.samples(), fs, STOI_SAMPLE_RATE);
    let (x, y) = remove_silent_frames(&x, &y);

    let bands = third_octave_bands();
    let xt = third_octave_envelopes(&x, &bands);
    let yt = third_octave_envelopes(&y, &bands);
    let frames = xt[0].len();
    if frames < SEGMENT {
        return Err(Error::InvalidArgument(format!(
            "STOI needs {SEGMENT} active frames (384 ms), got {frames}"
        )));
    }

    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for (xb, yb) in xt.iter().zip(&yt) {
            let xs = &xb[m - SEGMENT..m];
            let ys = &yb[m - SEGMENT..m];
            let alpha = norm(xs) / (norm(ys) + EPS);
            let yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(yv, xv)| (yv * alpha).min(xv * (1.0 + clip)))
                .collect();
            total += correlation(xs, &yp);
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let (na, nb) = (norm(&ca) + EPS, norm(&cb) + EPS);
    ca.iter().zip(&cb).map(|(x, y)| (x / na) * (y / nb)).sum()
}
