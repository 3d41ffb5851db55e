//! Manifests and plans for the three experiments over a synthesized
//! corpus, sized to run on a laptop.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_plan, Axis, ExperimentPlan, PlanEntry};
use crate::data::corpus::{CorpusIndex, NoiseKind, SpeakerGroup, SpeakerRole};
use crate::data::{DatasetManifest, ManifestMetadata, MixtureRecord, Split};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::network::{DropoutMode, DropoutSpec};
use crate::selector::{Metric, Scoring};
use crate::signal::read_wav;
use crate::training::{save_train_manifest, RpropConfig, TrainConfig, TrainManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskScale {
    pub frame_size: usize,
    pub hop: usize,
    pub module_hidden: Vec<usize>,
    pub shallow_dae_hidden: Vec<usize>,
    /// Three-frame autoencoder; omitted from plans when empty.
    pub deep_dae_hidden: Vec<usize>,
    pub iterations: usize,
    pub dae_iterations: usize,
    pub batch_size: usize,
    pub keep: f64,
    /// Mixing level for the noise and speaker-group experiments.
    pub snr_db: f64,
    pub snr_levels: Vec<f64>,
    /// Noise types of the noise experiment.
    pub noise_kinds: Vec<NoiseKind>,
    pub chance_draws: usize,
    pub seed: u64,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            frame_size: 512,
            hop: 128,
            module_hidden: vec![64, 64],
            shallow_dae_hidden: vec![128],
            deep_dae_hidden: vec![256, 256],
            iterations: 600,
            dae_iterations: 1500,
            batch_size: 256,
            keep: 0.8,
            snr_db: 0.0,
            snr_levels: vec![-5.0, 0.0, 5.0],
            noise_kinds: vec![NoiseKind::Birds, NoiseKind::Typing, NoiseKind::Motorcycle],
            chance_draws: 10,
            seed: 0,
        }
    }
}

impl DeskScale {
    fn rprop(&self, iterations: usize) -> RpropConfig {
        RpropConfig {
            iterations,
            batch_size: self.batch_size,
            ..RpropConfig::default()
        }
    }

    fn dropout(&self, seed: u64) -> DropoutSpec {
        DropoutSpec::uniform(self.keep, DropoutMode::Sampled, seed)
    }

    fn module_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hop: self.hop,
            rprop: self.rprop(self.iterations),
            dropout: self.dropout(seed),
            seed,
            ..TrainConfig::denoiser(self.frame_size, 3, &self.module_hidden)
        }
    }

    fn dae_config(&self, context: usize, hidden: &[usize], seed: u64) -> TrainConfig {
        TrainConfig {
            hop: self.hop,
            rprop: self.rprop(self.dae_iterations),
            dropout: self.dropout(seed),
            seed,
            ..TrainConfig::autoencoder(self.frame_size, context, hidden)
        }
    }
}

/// Plan files written by [`write_plans`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeskPlans {
    pub noise: PathBuf,
    pub speaker_group: PathBuf,
    pub snr: PathBuf,
}

pub fn snr_label(db: f64) -> String {
    if db == 0.0 {
        "0".into()
    } else {
        format!("{db:+}")
    }
}

struct Utterance {
    path: PathBuf,
    group: SpeakerGroup,
    len: usize,
}

struct Noise {
    kind: NoiseKind,
    path: PathBuf,
    len: usize,
}

/// Speech is referenced from `manifests/`, one level below the root.
fn up(p: &Path) -> PathBuf {
    Path::new("..").join(p)
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    noises: &'a [Noise],
    next_seed: u64,
}

impl<'a> Builder<'a> {
    fn noise(&self, kind: NoiseKind) -> Result<&'a Noise> {
        self.noises
            .iter()
            .find(|n| n.kind == kind)
            .ok_or_else(|| Error::Manifest(format!("corpus has no {} noise", kind.label())))
    }

    /// Train segments come from the head of each noise file, test
    /// segments from the tail.
    fn record(
        &mut self,
        u: &Utterance,
        kind: NoiseKind,
        snr_db: f64,
        split: Split,
        label: &str,
    ) -> Result<MixtureRecord> {
        let n = self.noise(kind)?;
        let boundary = (n.len as f64 * CorpusIndex::TRAIN_NOISE_FRACTION) as usize;
        let (lo, hi) = match split {
            Split::Test => (boundary, n.len),
            _ => (0, boundary),
        };
        if hi - lo < u.len {
            return Err(Error::Manifest(format!(
                "{} noise too short for {}",
                kind.label(),
                u.path.display()
            )));
        }
        let offset = self.rng.gen_range(lo..=hi - u.len);
        let noise_path = up(&n.path);
        self.next_seed += 1;
        let stem = u.path.file_stem().unwrap_or_default().to_string_lossy();
        Ok(MixtureRecord {
            id: Some(format!("{stem}_{}_{}", kind.label(), snr_label(snr_db))),
            clean_path: up(&u.path),
            noise_path: Some(noise_path),
            snr_db,
            noise_offset: Some(offset),
            seed: self.next_seed,
            label: Some(label.to_string()),
        })
    }
}

fn manifest(split: Split, records: Vec<MixtureRecord>, description: String, fs: u32) -> DatasetManifest {
    DatasetManifest {
        metadata: ManifestMetadata {
            sample_rate: Some(fs),
            description: Some(description),
        },
        ..DatasetManifest::new(split, records)
    }
}

/// Writes `manifests/` and `plans/` under the corpus root.
pub fn write_plans(root: &Path, index: &CorpusIndex, scale: &DeskScale) -> Result<DeskPlans> {
    let fs = index.sample_rate;
    let mut utterances = Vec::new();
    for s in &index.speakers {
        for p in &s.utterances {
            utterances.push((
                s.role,
                Utterance {
                    path: p.clone(),
                    group: s.profile.group,
                    len: read_wav(root.join(p))?.len(),
                },
            ));
        }
    }
    let train: Vec<&Utterance> = utterances
        .iter()
        .filter(|(r, _)| *r == SpeakerRole::Train)
        .map(|(_, u)| u)
        .collect();
    let test: Vec<&Utterance> = utterances
        .iter()
        .filter(|(r, _)| *r == SpeakerRole::Test)
        .map(|(_, u)| u)
        .collect();
    let noises: Vec<Noise> = index
        .noises
        .iter()
        .map(|n| Noise {
            kind: n.kind,
            path: n.path.clone(),
            len: n.len,
        })
        .collect();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(scale.seed),
        noises: &noises,
        next_seed: scale.seed.wrapping_mul(1_000_003),
    };

    let manifests = root.join("manifests");
    let plans = root.join("plans");
    fsutil::create_dir_all(&manifests)?;
    fsutil::create_dir_all(&plans)?;
    let mut config_seed = scale.seed.wrapping_mul(7919);
    let mut next_config_seed = || {
        config_seed += 1;
        config_seed
    };

    // Autoencoders: clean speech of every training speaker.
    let clean: Vec<MixtureRecord> = train.iter().map(|u| MixtureRecord::clean(up(&u.path))).collect();
    let mut daes = vec![("dae-shallow", 1, &scale.shallow_dae_hidden)];
    if !scale.deep_dae_hidden.is_empty() {
        daes.push(("dae-deep", 3, &scale.deep_dae_hidden));
    }
    let mut dae_entries = Vec::new();
    for (name, context, hidden) in daes {
        let m = TrainManifest {
            dataset: manifest(
                Split::Train,
                clean.clone(),
                format!("{name}: clean training speech"),
                fs,
            ),
            config: scale.dae_config(context, hidden, next_config_seed()),
        };
        save_train_manifest(manifests.join(format!("{name}.json")), &m)?;
        dae_entries.push(PlanEntry {
            label: name.into(),
            manifest: up(&Path::new("manifests").join(format!("{name}.json"))),
        });
    }

    let mut write_experiment = |axis: Axis,
                                modules: Vec<(String, Vec<MixtureRecord>)>,
                                test_records: Vec<MixtureRecord>,
                                plan_seed: u64|
     -> Result<PathBuf> {
        let name = axis.label();
        let mut entries = Vec::new();
        for (label, records) in modules {
            let file = format!("{name}-train-{label}.json");
            let m = TrainManifest {
                dataset: manifest(Split::Train, records, format!("{name} experiment, {label} module"), fs),
                config: scale.module_config(next_config_seed()),
            };
            save_train_manifest(manifests.join(&file), &m)?;
            entries.push(PlanEntry {
                label,
                manifest: up(&Path::new("manifests").join(file)),
            });
        }
        let test_file = format!("{name}-test.json");
        crate::data::save_manifest(
            manifests.join(&test_file),
            &manifest(Split::Test, test_records, format!("{name} experiment, test set"), fs),
        )?;
        let plan = ExperimentPlan {
            name: name.into(),
            axis,
            seed: plan_seed,
            modules: entries,
            daes: dae_entries.clone(),
            test: up(&Path::new("manifests").join(test_file)),
            selectors: vec![Metric::Ae, Metric::Snr],
            chance_draws: scale.chance_draws,
            scoring: Scoring::scaled(scale.keep),
            base_dir: PathBuf::new(),
        };
        let path = plans.join(format!("{name}.json"));
        save_plan(&path, &plan)?;
        Ok(path)
    };

    // Noise axis: one module per noise type, all training speakers.
    let mut modules = Vec::new();
    for &kind in &scale.noise_kinds {
        let records = train
            .iter()
            .map(|u| b.record(u, kind, scale.snr_db, Split::Train, kind.label()))
            .collect::<Result<_>>()?;
        modules.push((kind.label().to_string(), records));
    }
    let mut test_records = Vec::new();
    for u in &test {
        for &kind in &scale.noise_kinds {
            test_records.push(b.record(u, kind, scale.snr_db, Split::Test, kind.label())?);
        }
    }
    let noise = write_experiment(Axis::Noise, modules, test_records, scale.seed)?;

    // Speaker-group axis: every noise type, one module per group.
    let mut modules = Vec::new();
    for group in [SpeakerGroup::Low, SpeakerGroup::High] {
        let mut records = Vec::new();
        for u in train.iter().filter(|u| u.group == group) {
            for kind in NoiseKind::ALL {
                records.push(b.record(u, kind, scale.snr_db, Split::Train, group.label())?);
            }
        }
        modules.push((group.label().to_string(), records));
    }
    let mut test_records = Vec::new();
    for u in &test {
        for kind in NoiseKind::ALL {
            test_records.push(b.record(u, kind, scale.snr_db, Split::Test, u.group.label())?);
        }
    }
    let speaker_group = write_experiment(Axis::SpeakerGroup, modules, test_records, scale.seed + 1)?;

    // SNR axis: every noise type and speaker, one module per level.
    let mut modules = Vec::new();
    for &level in &scale.snr_levels {
        let label = snr_label(level);
        let mut records = Vec::new();
        for u in &train {
            for kind in NoiseKind::ALL {
                records.push(b.record(u, kind, level, Split::Train, &label)?);
            }
        }
        modules.push((label, records));
    }
    let mut test_records = Vec::new();
    for (i, u) in test.iter().enumerate() {
        for &level in &scale.snr_levels {
            // One noise type per (utterance, level), cycling through all.
            let kind = NoiseKind::ALL[(i + test_records.len()) % NoiseKind::ALL.len()];
            test_records.push(b.record(u, kind, level, Split::Test, &snr_label(level))?);
        }
    }
    let snr = write_experiment(Axis::Snr, modules, test_records, scale.seed + 2)?;

    Ok(DeskPlans {
        noise,
        speaker_group,
        snr,
    })
}
