//! Hermetic substitute corpus.
//!
//! Speech is additive harmonic synthesis: syllables of vowel-like spectra
//! (three formant resonances over a glottal-like harmonic source) with a
//! declining, vibrato-modulated pitch contour and short pauses, some of
//! them preceded by a noisy fricative. Speakers come in two groups with
//! disjoint pitch and formant ranges. Noise textures are built to occupy
//! distinct regions of the time-frequency plane: bird chirps (tonal
//! sweeps, 2-6 kHz), typing (sparse broadband clicks), motorcycle
//! (lowpassed rumble pulsed at the engine firing rate, weak exhaust
//! harmonics), white hiss and rain (dense tiny high-frequency drops).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil;
use crate::signal::{write_wav, WavEncoding, Waveform};

pub const CORPUS_SAMPLE_RATE: u32 = 16_000;
const SPEECH_RMS: f64 = 0.05;
const NOISE_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerGroup {
    Low,
    High,
}

impl SpeakerGroup {
    pub fn label(self) -> &'static str {
        match self {
            SpeakerGroup::Low => "low",
            SpeakerGroup::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Birds,
    Typing,
    Motorcycle,
    White,
    Rain,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::Birds,
        NoiseKind::Typing,
        NoiseKind::Motorcycle,
        NoiseKind::White,
        NoiseKind::Rain,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::Birds => "birds",
            NoiseKind::Typing => "typing",
            NoiseKind::Motorcycle => "motorcycle",
            NoiseKind::White => "white",
            NoiseKind::Rain => "rain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub group: SpeakerGroup,
    pub f0: f64,
    pub formant_scale: f64,
    /// Source roll-off exponent over harmonic number.
    pub rolloff: f64,
}

impl SpeakerProfile {
    pub fn random<R: Rng + ?Sized>(id: String, group: SpeakerGroup, rng: &mut R) -> Self {
        let (f0, formant_scale) = match group {
            SpeakerGroup::Low => (rng.gen_range(95.0..140.0), rng.gen_range(0.9..1.0)),
            SpeakerGroup::High => (rng.gen_range(185.0..250.0), rng.gen_range(1.12..1.22)),
        };
        Self {
            id,
            group,
            f0,
            formant_scale,
            rolloff: rng.gen_range(0.5..0.9),
        }
    }
}

/// (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.6, 0.3];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 170.0];

fn formant_envelope(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip(FORMANT_GAIN.iter().zip(FORMANT_BW))
        .map(|(&fk, (&g, bw))| g / (1.0 + ((f - fk) / (bw / 2.0)).powi(2)).sqrt())
        .sum()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// One utterance of 1.4-2.0 s, RMS-normalized.
pub fn synth_utterance<R: Rng + ?Sized>(profile: &SpeakerProfile, rng: &mut R, fs: u32) -> Vec<f64> {
    let fs_f = fs as f64;
    let total = rng.gen_range(1.4..2.0);
    let len = (total * fs_f) as usize;
    let mut out = vec![0.0; len];
    let max_harmonics = (0.45 * fs_f / (profile.f0 * 0.7)) as usize;
    let mut phases: Vec<f64> = (0..max_harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let vibrato_phase = rng.gen_range(0.0..2.0 * PI);
    let vibrato_rate = rng.gen_range(4.0..6.0);

    let mut fricatives = vec![0.0; len];
    let mut t = rng.gen_range(0.08..0.15);
    while t < total - 0.2 {
        // Some syllables open with an unvoiced fricative: shaped noise
        // high in the spectrum.
        if rng.gen_bool(0.4) {
            let n = (rng.gen_range(0.06..0.14) * fs_f) as usize;
            let mut burst: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bandpass(
                &mut burst,
                profile.formant_scale * rng.gen_range(3500.0..6500.0),
                1.2,
                fs_f,
            );
            for (i, b) in burst.iter_mut().enumerate() {
                *b *= (PI * i as f64 / n as f64).sin();
            }
            add_at(&mut fricatives, (t * fs_f) as usize, &burst);
            t += n as f64 / fs_f;
            if t >= total - 0.2 {
                break;
            }
        }
        let dur = rng.gen_range(0.14..0.28f64).min(total - 0.05 - t);
        let v0 = VOWELS[rng.gen_range(0..VOWELS.len())];
        let v1 = VOWELS[rng.gen_range(0..VOWELS.len())];
        let accent = rng.gen_range(0.92..1.08);
        let gain = rng.gen_range(0.6..1.0);
        let start = (t * fs_f) as usize;
        let n = (dur * fs_f) as usize;
        let mut amps = vec![0.0; max_harmonics];
        for i in 0..n {
            let idx = start + i;
            if idx >= len {
                break;
            }
            let time = idx as f64 / fs_f;
            let u = i as f64 / n as f64;
            let f0 = profile.f0
                * accent
                * (1.1 - 0.2 * time / total)
                * (1.0 + 0.02 * (2.0 * PI * vibrato_rate * time + vibrato_phase).sin());
            // Refresh harmonic amplitudes every 32 samples.
            if i % 32 == 0 {
                let mut formants = [0.0; 3];
                for k in 0..3 {
                    formants[k] = profile.formant_scale * (v0[k] + (v1[k] - v0[k]) * u);
                }
                for (h, a) in amps.iter_mut().enumerate() {
                    let f = (h + 1) as f64 * f0;
                    *a = if f < 0.45 * fs_f {
                        formant_envelope(f, &formants) / ((h + 1) as f64).powf(profile.rolloff)
                    } else {
                        0.0
                    };
                }
            }
            let attack = (i as f64 / (0.025 * fs_f)).min(1.0);
            let release = ((n - i) as f64 / (0.04 * fs_f)).min(1.0);
            let env = gain * (0.5 - 0.5 * (PI * attack).cos()) * (0.5 - 0.5 * (PI * release).cos());
            let mut s = 0.0;
            for (h, (phase, a)) in phases.iter_mut().zip(&amps).enumerate() {
                *phase += 2.0 * PI * (h + 1) as f64 * f0 / fs_f;
                if *a > 0.0 {
                    s += a * phase.sin();
                }
            }
            out[idx] += env * s;
        }
        t += dur + rng.gen_range(0.03..0.12);
    }
    let voiced_rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    normalize_rms(&mut fricatives, 0.3 * voiced_rms);
    out.iter_mut().zip(&fricatives).for_each(|(o, f)| *o += f);
    normalize_rms(&mut out, SPEECH_RMS);
    out
}

fn one_pole_lowpass(x: &mut [f64], cutoff: f64, fs: f64) {
    let a = (-2.0 * PI * cutoff / fs).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

/// RBJ band-pass biquad (constant peak gain).
fn bandpass(x: &mut [f64], center: f64, q: f64, fs: f64) {
    let w = 2.0 * PI * center / fs;
    let alpha = w.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn add_at(out: &mut [f64], start: usize, burst: &[f64]) {
    for (o, b) in out.iter_mut().skip(start).zip(burst) {
        *o += b;
    }
}

/// A noise recording of `secs` seconds, RMS-normalized.
pub fn synth_noise<R: Rng + ?Sized>(kind: NoiseKind, secs: f64, rng: &mut R, fs: u32) -> Vec<f64> {
    let fs_f = fs as f64;
    let len = (secs * fs_f) as usize;
    let mut out = vec![0.0; len];
    match kind {
        NoiseKind::Birds => {
            // Several birds calling over each other, on an outdoor ambience bed.
            let mut t = 0.0;
            while t < secs {
                t += -(1.0 - rng.gen::<f64>()).ln() / 7.0;
                let repeats = rng.gen_range(1..=4);
                let f_start = rng.gen_range(2500.0..5500.0);
                let f_end = f_start * rng.gen_range(0.6..1.5);
                let dur = rng.gen_range(0.05..0.16);
                let warble = rng.gen_range(0.0..300.0);
                let warble_rate = rng.gen_range(15.0..35.0);
                let amp = rng.gen_range(0.5..1.0);
                let mut onset = t;
                for _ in 0..repeats {
                    let n = (dur * fs_f) as usize;
                    let mut phase = 0.0f64;
                    let burst: Vec<f64> = (0..n)
                        .map(|i| {
                            let u = i as f64 / n as f64;
                            let f = f_start
                                + (f_end - f_start) * u
                                + warble * (2.0 * PI * warble_rate * i as f64 / fs_f).sin();
                            phase += 2.0 * PI * f / fs_f;
                            let harmonic = if 2.0 * f < 0.45 * fs_f {
                                0.2 * (2.0 * phase).sin()
                            } else {
                                0.0
                            };
                            amp * (PI * u).sin().powi(2) * (phase.sin() + harmonic)
                        })
                        .collect();
                    add_at(&mut out, (onset * fs_f) as usize, &burst);
                    onset += dur + rng.gen_range(0.02..0.05);
                }
            }
            let chirp_rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
            let mut bed: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bandpass(&mut bed, 3000.0, 0.5, fs_f);
            normalize_rms(&mut bed, 0.6 * chirp_rms);
            out.iter_mut().zip(&bed).for_each(|(o, b)| *o += b);
        }
        NoiseKind::Typing => {
            let mut t = rng.gen_range(0.0..0.1);
            while t < secs {
                let mut strike = |at: f64, amp: f64, rng: &mut R| {
                    let n = (0.03 * fs_f) as usize;
                    let tau = rng.gen_range(0.002..0.006) * fs_f;
                    let mut click: Vec<f64> = (0..n)
                        .map(|i| amp * rng.gen_range(-1.0..1.0) * (-(i as f64) / tau).exp())
                        .collect();
                    bandpass(&mut click, rng.gen_range(1500.0..4000.0), 3.0, fs_f);
                    let thud_f = rng.gen_range(150.0..300.0);
                    for (i, c) in click.iter_mut().enumerate() {
                        let ti = i as f64 / fs_f;
                        *c = 4.0 * *c + 0.3 * amp * (2.0 * PI * thud_f * ti).sin() * (-ti / 0.01).exp();
                    }
                    add_at(&mut out, (at * fs_f) as usize, &click);
                };
                let amp = rng.gen_range(0.6..1.0);
                strike(t, amp, rng);
                if rng.gen_bool(0.6) {
                    strike(t + rng.gen_range(0.06..0.1), 0.4 * amp, rng);
                }
                t += rng.gen_range(0.08..0.25);
            }
        }
        NoiseKind::Motorcycle => {
            let mut rpm_walk = 0.0;
            let lfo_phase = rng.gen_range(0.0..2.0 * PI);
            let offsets: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mut phase = 0.0f64;
            // Broadband rumble pulsed at the firing rate, with a weak
            // harmonic exhaust tone on top.
            let mut rumble: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            one_pole_lowpass(&mut rumble, 600.0, fs_f);
            one_pole_lowpass(&mut rumble, 600.0, fs_f);
            normalize_rms(&mut rumble, 1.0);
            for (i, o) in out.iter_mut().enumerate() {
                let ti = i as f64 / fs_f;
                if i % 160 == 0 {
                    rpm_walk = (rpm_walk + rng.gen_range(-0.5..0.5f64)).clamp(-8.0, 8.0);
                }
                let f0 = 50.0 + 12.0 * (2.0 * PI * 0.2 * ti + lfo_phase).sin() + rpm_walk;
                phase += 2.0 * PI * f0 / fs_f;
                let mut s = 0.0;
                for (h, off) in offsets.iter().enumerate() {
                    let hf = (h + 1) as f64;
                    if hf * f0 > 2000.0 {
                        break;
                    }
                    s += (hf * phase + off).sin() / hf;
                }
                *o = rumble[i] * (1.0 + 0.6 * phase.sin()) + 0.35 * s;
            }
        }
        NoiseKind::White => {
            out.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        NoiseKind::Rain => {
            let drops = (secs * 250.0) as usize;
            for _ in 0..drops {
                let at = rng.gen_range(0..len);
                let f = rng.gen_range(2000.0..7000.0);
                let tau = rng.gen_range(0.001..0.003) * fs_f;
                let amp = rng.gen_range(0.1..1.0f64).powi(2);
                let n = (6.0 * tau) as usize;
                let drop: Vec<f64> = (0..n)
                    .map(|i| amp * (2.0 * PI * f * i as f64 / fs_f).sin() * (-(i as f64) / tau).exp())
                    .collect();
                add_at(&mut out, at, &drop);
            }
            let mut hiss: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.05..0.05)).collect();
            bandpass(&mut hiss, 5000.0, 0.7, fs_f);
            out.iter_mut().zip(&hiss).for_each(|(o, h)| *o += h);
        }
    }
    normalize_rms(&mut out, NOISE_RMS);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Speakers per group.
    pub speakers: usize,
    /// Utterances per speaker.
    pub utterances: usize,
    pub seed: u64,
    #[serde(default = "default_noise_secs")]
    pub noise_secs: f64,
}

fn default_noise_secs() -> f64 {
    24.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub profile: SpeakerProfile,
    pub role: SpeakerRole,
    pub utterances: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub kind: NoiseKind,
    pub path: PathBuf,
    pub len: usize,
    pub peak: f64,
}

/// What [`generate`] wrote, with paths relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub spec: CorpusSpec,
    pub sample_rate: u32,
    pub speakers: Vec<SpeakerEntry>,
    pub noises: Vec<NoiseEntry>,
}

impl CorpusIndex {
    /// Fraction of every noise file reserved for training segments; test
    /// segments come from the remainder.
    pub const TRAIN_NOISE_FRACTION: f64 = 0.6;

    pub fn speakers_with(&self, role: SpeakerRole) -> impl Iterator<Item = &SpeakerEntry> {
        self.speakers.iter().filter(move |s| s.role == role)
    }

    pub fn noise(&self, kind: NoiseKind) -> Option<&NoiseEntry> {
        self.noises.iter().find(|n| n.kind == kind)
    }
}

/// Writes speech and noise WAVs plus `corpus.json` under `out`. In each
/// group the last third of the speakers (at least one) is held out for
/// testing.
pub fn generate(spec: &CorpusSpec, out: &Path) -> Result<CorpusIndex> {
    if spec.speakers < 2 || spec.utterances == 0 {
        return Err(crate::Error::InvalidArgument(
            "need at least 2 speakers per group and 1 utterance".into(),
        ));
    }
    let fs = CORPUS_SAMPLE_RATE;
    fsutil::create_dir_all(&out.join("clean"))?;
    fsutil::create_dir_all(&out.join("noise"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let test_per_group = spec.speakers.div_ceil(3).min(spec.speakers - 1);

    let mut speakers = Vec::new();
    for group in [SpeakerGroup::Low, SpeakerGroup::High] {
        for k in 0..spec.speakers {
            let id = format!("{}{:02}", group.label(), k);
            let profile = SpeakerProfile::random(id.clone(), group, &mut rng);
            let role = if k >= spec.speakers - test_per_group {
                SpeakerRole::Test
            } else {
                SpeakerRole::Train
            };
            let mut utterances = Vec::new();
            for u in 0..spec.utterances {
                let rel = PathBuf::from(format!("clean/{id}_u{u:02}.wav"));
                let samples = synth_utterance(&profile, &mut rng, fs);
                write_wav(out.join(&rel), &Waveform::new(samples, fs)?, WavEncoding::Float32)?;
                utterances.push(rel);
            }
            speakers.push(SpeakerEntry {
                profile,
                role,
                utterances,
            });
        }
    }

    let mut noises = Vec::new();
    for kind in NoiseKind::ALL {
        let rel = PathBuf::from(format!("noise/{}.wav", kind.label()));
        let w = Waveform::new(synth_noise(kind, spec.noise_secs, &mut rng, fs), fs)?;
        write_wav(out.join(&rel), &w, WavEncoding::Float32)?;
        noises.push(NoiseEntry {
            kind,
            path: rel,
            len: w.len(),
            peak: w.peak(),
        });
    }

    let index = CorpusIndex {
        spec: spec.clone(),
        sample_rate: fs,
        speakers,
        noises,
    };
    let mut bytes = serde_json::to_vec_pretty(&index)?;
    bytes.push(b'\n');
    fsutil::write_atomic(&out.join("corpus.json"), &bytes)?;
    Ok(index)
}
