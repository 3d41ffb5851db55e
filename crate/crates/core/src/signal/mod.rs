//! Time-frequency conversion, context features and mask application.
//!
//! Analysis uses a periodic Hann window; synthesis is weighted overlap-add
//! with the same window, normalized by the running sum of squared windows.
//! Frames start at sample 0 and the tail is zero-padded so the last frame
//! covers the end of the signal. The original length is kept so that
//! [`istft`] returns exactly as many samples as went in.

mod wav;

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure_shape, Error, Result};

pub use wav::{read_wav, write_wav, WavEncoding};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }

    /// First `len` samples (or all of them if shorter).
    pub fn truncated(&self, len: usize) -> Result<Self> {
        Self::new(self.samples[..len.min(self.samples.len())].to_vec(), self.sample_rate)
    }
}

/// Framing geometry shared by complex and magnitude spectrograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the analysed signal before tail padding.
    pub signal_len: usize,
}

impl Geometry {
    pub fn new(frame_size: usize, hop: usize, sample_rate: u32, signal_len: usize) -> Result<Self> {
        if frame_size < 2 || !frame_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "frame size {frame_size} is not a power of two"
            )));
        }
        if hop == 0 || hop > frame_size {
            return Err(Error::InvalidArgument(format!("hop {hop} must be in 1..={frame_size}")));
        }
        if signal_len == 0 {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        Ok(Self {
            frame_size,
            hop,
            sample_rate,
            signal_len,
        })
    }

    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Number of frames needed to cover the signal.
    pub fn frame_count(&self) -> usize {
        if self.signal_len <= self.frame_size {
            1
        } else {
            (self.signal_len - self.frame_size).div_ceil(self.hop) + 1
        }
    }

    pub fn padded_len(&self) -> usize {
        (self.frame_count() - 1) * self.hop + self.frame_size
    }
}

/// Complex one-sided STFT, `frames × bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    geometry: Geometry,
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn from_parts(geometry: Geometry, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        ensure_shape!(
            data.len() == frames * geometry.bins(),
            "{} values for {frames} frames of {} bins",
            data.len(),
            geometry.bins()
        );
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numeric("non-finite spectrogram entry".into()));
        }
        Ok(Self { geometry, frames, data })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.geometry.bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let d = self.bins();
        &self.data[t * d..(t + 1) * d]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Replaces every modulus with `mags` while keeping this spectrogram's
    /// phase. Bins with zero modulus take zero phase.
    pub fn with_magnitudes(&self, mags: &MagnitudeSpectrogram) -> Result<Self> {
        ensure_shape!(
            mags.frames() == self.frames && mags.bins() == self.bins(),
            "magnitude {}x{} vs spectrogram {}x{}",
            mags.frames(),
            mags.bins(),
            self.frames,
            self.bins()
        );
        let data = self
            .data
            .iter()
            .zip(mags.data())
            .map(|(c, &m)| {
                let r = c.norm();
                if r > 0.0 {
                    c * (m / r)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect();
        Self::from_parts(self.geometry, self.frames, data)
    }
}

/// Nonnegative real `frames × bins` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    geometry: Geometry,
    frames: usize,
    data: Vec<f64>,
}

impl MagnitudeSpectrogram {
    pub fn from_parts(geometry: Geometry, frames: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == frames * geometry.bins(),
            "{} values for {frames} frames of {} bins",
            data.len(),
            geometry.bins()
        );
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("magnitudes must be finite and nonnegative".into()));
        }
        Ok(Self { geometry, frames, data })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.geometry.bins()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.bins();
        &self.data[t * d..(t + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Rows of `context` concatenated magnitude frames centred on each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    bins: usize,
    context: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.bins * self.context
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Soft masks, one gain in `[0, 1]` per time-frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl MaskMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape!(
            data.len() == frames * bins,
            "{} values for a {frames}x{bins} mask",
            data.len()
        );
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn filled(frames: usize, bins: usize, value: f64) -> Result<Self> {
        Self::new(frames, bins, vec![value; frames * bins])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(w: &Waveform, frame_size: usize, hop: usize) -> Result<Spectrogram> {
    let geometry = Geometry::new(frame_size, hop, w.sample_rate(), w.len())?;
    let frames = geometry.frame_count();
    let bins = geometry.bins();
    let window = hann(frame_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_size);
    let samples = w.samples();

    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_size];
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = samples.get(start + n).copied().unwrap_or(0.0);
            *slot = Complex64::new(x * window[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Spectrogram::from_parts(geometry, frames, data)
}

pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let g = s.geometry();
    let n = g.frame_size;
    ensure_shape!(
        s.data().len() == s.frames() * (n / 2 + 1),
        "spectrogram payload does not match frame size {n}"
    );
    let window = hann(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = (s.frames() - 1) * g.hop + n;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;

    for t in 0..s.frames() {
        let frame = s.frame(t);
        buf[0] = Complex64::new(frame[0].re, 0.0);
        buf[n / 2] = Complex64::new(frame[n / 2].re, 0.0);
        for k in 1..n / 2 {
            buf[k] = frame[k];
            buf[n - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * g.hop;
        for i in 0..n {
            out[start + i] += window[i] * buf[i].re * scale;
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, w) in out.iter_mut().zip(&norm) {
        *o = if *w > 1e-10 { *o / w } else { 0.0 };
    }
    out.truncate(g.signal_len.min(total));
    Waveform::new(out, g.sample_rate)
}

pub fn magnitude(s: &Spectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram {
        geometry: s.geometry(),
        frames: s.frames(),
        data: s.data().iter().map(|c| c.norm()).collect(),
    }
}

pub fn concat_context(m: &MagnitudeSpectrogram, context: usize) -> Result<FeatureMatrix> {
    if context == 0 || context.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "context must be a positive odd count, got {context}"
        )));
    }
    let (rows, bins) = (m.frames(), m.bins());
    let half = (context / 2) as isize;
    let mut data = vec![0.0; rows * bins * context];
    for t in 0..rows {
        let row = &mut data[t * bins * context..(t + 1) * bins * context];
        for (slot, offset) in (-half..=half).enumerate() {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < rows {
                row[slot * bins..(slot + 1) * bins].copy_from_slice(m.frame(src as usize));
            }
        }
    }
    Ok(FeatureMatrix {
        rows,
        bins,
        context,
        data,
    })
}

pub fn apply_mask(x: &Spectrogram, y: &MaskMatrix) -> Result<Spectrogram> {
    ensure_shape!(
        x.frames() == y.frames() && x.bins() == y.bins(),
        "mixture {}x{} vs mask {}x{}",
        x.frames(),
        x.bins(),
        y.frames(),
        y.bins()
    );
    let data = x.data().iter().zip(y.data()).map(|(c, m)| c * m).collect();
    Spectrogram::from_parts(x.geometry(), x.frames(), data)
}
