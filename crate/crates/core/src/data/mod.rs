//! Corpus handling: mixing at a target SNR, manifests and their
//! realization into waveforms.

pub mod corpus;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::signal::{read_wav, Waveform};

/// Mixes `noise` into `clean` so that the clean-to-noise energy ratio is
/// `target_db`. Only the first `clean.len()` noise samples are used.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, target_db: f64) -> Result<(Waveform, Waveform)> {
    if !target_db.is_finite() {
        return Err(Error::InvalidArgument(format!("target SNR {target_db} is not finite")));
    }
    if noise.len() < clean.len() {
        return Err(Error::InvalidArgument(format!(
            "noise ({} samples) shorter than clean speech ({})",
            noise.len(),
            clean.len()
        )));
    }
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    let noise = &noise.samples()[..clean.len()];
    let es = clean.energy();
    let en: f64 = noise.iter().map(|v| v * v).sum();
    if es == 0.0 || en == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot mix at an SNR with a zero-energy signal".into(),
        ));
    }
    let gain = (es / en / 10f64.powf(target_db / 10.0)).sqrt();
    let scaled: Vec<f64> = noise.iter().map(|v| v * gain).collect();
    let mixture = clean.samples().iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok((
        Waveform::new(mixture, clean.sample_rate())?,
        Waveform::new(scaled, clean.sample_rate())?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub clean_path: PathBuf,
    /// Records without noise describe clean speech only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<PathBuf>,
    #[serde(default)]
    pub snr_db: f64,
    /// Start of the noise segment; drawn from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_offset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Value of the experiment axis this record belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MixtureRecord {
    pub fn clean(path: impl Into<PathBuf>) -> Self {
        Self {
            id: None,
            clean_path: path.into(),
            noise_path: None,
            snr_db: 0.0,
            noise_offset: None,
            seed: 0,
            label: None,
        }
    }

    pub fn display_id(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| format!("utt{index:04}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<MixtureRecord>,
    #[serde(default)]
    pub metadata: ManifestMetadata,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, records: Vec<MixtureRecord>) -> Self {
        Self {
            split,
            records,
            metadata: ManifestMetadata::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Rejects empty manifests, non-finite SNRs and duplicate
    /// (clean, noise, offset) triples.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !r.snr_db.is_finite() {
                return Err(Error::Manifest(format!("record {i}: SNR is not finite")));
            }
            // Without an explicit offset the seed picks the segment.
            let key = (
                r.clean_path.clone(),
                r.noise_path.clone(),
                r.noise_offset,
                if r.noise_offset.is_none() { Some(r.seed) } else { None },
            );
            if !seen.insert(key) {
                return Err(Error::Manifest(format!(
                    "record {i}: duplicate (clean, noise, offset) in {:?} split",
                    self.split
                )));
            }
        }
        Ok(())
    }

    /// Noise segments the records use, without decoding any audio.
    pub fn noise_segments(&self) -> Result<Vec<NoiseSegment>> {
        self.records
            .iter()
            .filter(|r| r.noise_path.is_some())
            .map(|r| {
                let clean_len = wav_len(&self.resolve(&r.clean_path))?;
                let noise_path = self.resolve(r.noise_path.as_ref().unwrap());
                let noise_len = wav_len(&noise_path)?;
                let start = noise_offset(r, clean_len, noise_len)?;
                Ok(NoiseSegment {
                    noise_path,
                    start,
                    len: clean_len,
                })
            })
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let (mut m, base): (DatasetManifest, _) = load_manifest_value(path.as_ref())?;
    m.base_dir = base;
    m.validate()?;
    Ok(m)
}

/// Parses any manifest-shaped JSON file and returns the directory its
/// relative paths are anchored to.
pub(crate) fn load_manifest_value<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let value = serde_json::from_slice(&fsutil::read(path)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    Ok((value, path.parent().map(Path::to_path_buf).unwrap_or_default()))
}

pub fn save_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path.as_ref(), &bytes)
}

fn wav_len(path: &Path) -> Result<usize> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.into(),
            reason: other.to_string(),
        },
    })?;
    Ok(reader.duration() as usize)
}

fn noise_offset(r: &MixtureRecord, clean_len: usize, noise_len: usize) -> Result<usize> {
    if noise_len < clean_len {
        return Err(Error::Manifest(format!(
            "noise {} ({noise_len} samples) shorter than clean {} ({clean_len})",
            r.noise_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            r.clean_path.display()
        )));
    }
    let room = noise_len - clean_len;
    match r.noise_offset {
        Some(o) if o > room => Err(Error::Manifest(format!(
            "noise offset {o} leaves fewer than {clean_len} samples"
        ))),
        Some(o) => Ok(o),
        None => Ok(ChaCha8Rng::seed_from_u64(r.seed).gen_range(0..=room)),
    }
}

/// A contiguous stretch of a noise file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSegment {
    pub noise_path: PathBuf,
    pub start: usize,
    pub len: usize,
}

impl NoiseSegment {
    fn overlaps(&self, other: &NoiseSegment) -> bool {
        self.noise_path == other.noise_path
            && self.start < other.start + other.len
            && other.start < self.start + self.len
    }
}

/// Fails if any segment of `a` shares samples of the same noise file with a
/// segment of `b`.
pub fn check_disjoint(a: &[NoiseSegment], b: &[NoiseSegment]) -> Result<()> {
    for x in a {
        if let Some(y) = b.iter().find(|y| x.overlaps(y)) {
            return Err(Error::Manifest(format!(
                "noise segments overlap in {}: [{}, {}) and [{}, {})",
                x.noise_path.display(),
                x.start,
                x.start + x.len,
                y.start,
                y.start + y.len
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realized {
    pub clean: Waveform,
    /// Noise segment before SNR scaling (all zeros for clean-only records).
    pub noise: Waveform,
    /// Noise as it appears in the mixture.
    pub scaled_noise: Waveform,
    pub mixture: Waveform,
    pub noise_offset: Option<usize>,
}

/// Loads and mixes one record. Deterministic given the record.
pub fn realize(manifest: &DatasetManifest, record: &MixtureRecord) -> Result<Realized> {
    let clean = read_wav(manifest.resolve(&record.clean_path))?;
    let Some(noise_path) = &record.noise_path else {
        let silent = Waveform::zeros(clean.len(), clean.sample_rate())?;
        return Ok(Realized {
            noise: silent.clone(),
            scaled_noise: silent,
            mixture: clean.clone(),
            clean,
            noise_offset: None,
        });
    };
    let noise_full = read_wav(manifest.resolve(noise_path))?;
    let offset = noise_offset(record, clean.len(), noise_full.len())?;
    let noise = Waveform::new(
        noise_full.samples()[offset..offset + clean.len()].to_vec(),
        noise_full.sample_rate(),
    )?;
    let (mixture, scaled_noise) = mix_at_snr(&clean, &noise, record.snr_db)?;
    Ok(Realized {
        clean,
        noise,
        scaled_noise,
        mixture,
        noise_offset: Some(offset),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::snr;
    use crate::signal::{write_wav, WavEncoding};

    fn random(len: usize, seed: u64, amp: f64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    #[test]
    fn achieved_snr_matches_target() {
        let s = random(8000, 1, 0.3);
        let n = random(9000, 2, 0.05);
        for target in [-5.0, 0.0, 5.0] {
            let (mix, scaled) = mix_at_snr(&s, &n, target).unwrap();
            assert_eq!(mix.len(), s.len());
            assert!((snr(&s, &scaled).unwrap() - target).abs() < 0.01);
        }
    }

    #[test]
    fn gain_closed_form() {
        // Unit-energy signals at 10 dB: g = 10^(-1/2).
        let mut s = vec![0.0; 4];
        s[0] = 1.0;
        let mut n = vec![0.0; 4];
        n[1] = 1.0;
        let s = Waveform::new(s, 8000).unwrap();
        let n = Waveform::new(n, 8000).unwrap();
        let (_, scaled) = mix_at_snr(&s, &n, 10.0).unwrap();
        assert!((scaled.samples()[1] - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn mixing_errors() {
        let s = random(100, 1, 0.3);
        assert!(mix_at_snr(&s, &random(50, 2, 0.1), 0.0).is_err());
        assert!(mix_at_snr(&s, &Waveform::zeros(100, 16_000).unwrap(), 0.0).is_err());
        assert!(mix_at_snr(&Waveform::zeros(100, 16_000).unwrap(), &s, 0.0).is_err());
    }

    fn fixture() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        write_wav(dir.path().join("c.wav"), &random(4000, 3, 0.2), WavEncoding::Float32).unwrap();
        write_wav(dir.path().join("n.wav"), &random(20_000, 4, 0.1), WavEncoding::Float32).unwrap();
        let mut rec = MixtureRecord::clean("c.wav");
        rec.noise_path = Some("n.wav".into());
        rec.seed = 9;
        let mut m = DatasetManifest::new(Split::Train, vec![rec]);
        m.base_dir = dir.path().to_path_buf();
        (dir, m)
    }

    #[test]
    fn realize_is_deterministic_and_hits_target() {
        let (_dir, m) = fixture();
        let a = realize(&m, &m.records[0]).unwrap();
        let b = realize(&m, &m.records[0]).unwrap();
        assert_eq!(a, b);
        assert!(snr(&a.clean, &a.scaled_noise).unwrap().abs() < 0.01);
        let seg = m.noise_segments().unwrap();
        assert_eq!(seg[0].start, a.noise_offset.unwrap());
    }

    #[test]
    fn overlapping_train_and_test_segments_are_rejected() {
        let (_dir, m) = fixture();
        let mut train = m.clone();
        train.records[0].noise_offset = Some(1000);
        let mut test = m.clone();
        test.split = Split::Test;
        test.records[0].noise_offset = Some(3000);
        let err = check_disjoint(&train.noise_segments().unwrap(), &test.noise_segments().unwrap());
        assert!(matches!(err, Err(Error::Manifest(_))));
        test.records[0].noise_offset = Some(5000);
        check_disjoint(&train.noise_segments().unwrap(), &test.noise_segments().unwrap()).unwrap();
    }

    #[test]
    fn duplicates_and_bad_offsets() {
        let (_dir, mut m) = fixture();
        m.records.push(m.records[0].clone());
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
        m.records.pop();
        m.records[0].noise_offset = Some(19_000);
        assert!(realize(&m, &m.records[0]).is_err());
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let (dir, m) = fixture();
        let path = dir.path().join("m.json");
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.base_dir, dir.path());
        realize(&loaded, &loaded.records[0]).unwrap();
    }
}
