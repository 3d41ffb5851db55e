//! Experiments: train one module per value of a variation axis, run every
//! test utterance through all modules, and compare the autoencoder-driven
//! selector against chance and oracle choices.

pub mod desk;
mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{check_disjoint, load_manifest, load_manifest_value, realize, DatasetManifest};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::metrics::{evaluate, EvalResult};
use crate::network::{decode_model, encode_model, Network, MODEL_FORMAT_VERSION};
use crate::selector::{choose, enhance_all, score_all, Metric, Module, ModuleScore, Scoring, SelectionReport};
use crate::signal::stft;
use crate::training::{load_train_manifest, loss_curve_csv, train_autoencoder, train_denoiser, TrainManifest};

pub use report::{ReportRow, ReportTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Noise,
    SpeakerGroup,
    Snr,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Noise => "noise",
            Axis::SpeakerGroup => "speaker-group",
            Axis::Snr => "snr",
        }
    }
}

/// A named training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub label: String,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub axis: Axis,
    #[serde(default)]
    pub seed: u64,
    /// One denoiser per axis value; labels match test record labels.
    pub modules: Vec<PlanEntry>,
    pub daes: Vec<PlanEntry>,
    pub test: PathBuf,
    #[serde(default = "default_selectors")]
    pub selectors: Vec<Metric>,
    #[serde(default = "default_chance_draws")]
    pub chance_draws: usize,
    #[serde(default)]
    pub scoring: Scoring,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_selectors() -> Vec<Metric> {
    vec![Metric::Ae, Metric::Snr]
}

fn default_chance_draws() -> usize {
    10
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.modules.len() < 2 {
            return Err(Error::InvalidArgument(
                "an experiment needs at least two modules".into(),
            ));
        }
        if self.daes.is_empty() || self.selectors.is_empty() {
            return Err(Error::InvalidArgument(
                "an experiment needs an autoencoder and a selection metric".into(),
            ));
        }
        if self.chance_draws == 0 {
            return Err(Error::InvalidArgument("chance_draws must be positive".into()));
        }
        for (what, entries) in [("module", &self.modules), ("autoencoder", &self.daes)] {
            let mut seen = BTreeSet::new();
            for e in entries {
                if !seen.insert(&e.label) {
                    return Err(Error::InvalidArgument(format!("duplicate {what} label {:?}", e.label)));
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<ExperimentPlan> {
    let (mut plan, base): (ExperimentPlan, _) = load_manifest_value(path.as_ref())?;
    plan.base_dir = base;
    plan.validate()?;
    Ok(plan)
}

pub fn save_plan(path: impl AsRef<Path>, plan: &ExperimentPlan) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(plan)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path.as_ref(), &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Trained models keyed by the hash of their inputs.
    pub cache: Option<PathBuf>,
    pub exec: Exec,
}

/// One autoencoder/metric pairing's choice on one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorChoice {
    pub dae: String,
    pub metric: Metric,
    pub chosen: usize,
    pub scores: Vec<ModuleScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub label: String,
    pub mixture: EvalResult,
    /// One entry per module, in plan order.
    pub modules: Vec<EvalResult>,
    /// Highest-SDR module.
    pub oracle: usize,
    /// Highest-STOI module.
    pub oracle_stoi: usize,
    pub choices: Vec<SelectorChoice>,
    /// Chance picks, one per draw.
    pub chance: Vec<usize>,
}

impl UtteranceResult {
    pub fn sdr(&self, module: usize) -> f64 {
        self.modules[module].sdr_db
    }

    pub fn oracle_sdr(&self) -> f64 {
        self.sdr(self.oracle)
    }

    pub fn min_sdr(&self) -> f64 {
        self.modules.iter().map(|m| m.sdr_db).fold(f64::INFINITY, f64::min)
    }

    pub fn chance_mean(&self, f: impl Fn(&EvalResult) -> f64) -> f64 {
        self.chance.iter().map(|&j| f(&self.modules[j])).sum::<f64>() / self.chance.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub table: ReportTable,
    pub module_labels: Vec<String>,
    pub utterances: Vec<UtteranceResult>,
    /// Utterances whose SDR and STOI oracles pick different modules.
    pub oracle_disagreements: usize,
}

/// Column name of a selector.
pub fn selector_column(dae: &str, metric: Metric) -> String {
    format!("{dae}/{}", metric.label())
}

enum Job<'a> {
    Module(&'a TrainManifest),
    Dae(&'a TrainManifest),
}

struct Trained {
    network: Network,
    model_bytes: Vec<u8>,
    loss_csv: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of everything that determines a trained network: the kind of
/// job, the manifest with its configuration and seed, and the audio it
/// points to.
fn cache_key(kind: &str, m: &TrainManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(MODEL_FORMAT_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(m)?);
    for r in &m.dataset.records {
        h.update(Sha256::digest(fsutil::read(&m.dataset.resolve(&r.clean_path))?));
        if let Some(n) = &r.noise_path {
            h.update(Sha256::digest(fsutil::read(&m.dataset.resolve(n))?));
        }
    }
    Ok(hex(&h.finalize()))
}

fn train_job(job: &Job, cache: Option<&Path>, exec: Exec) -> Result<Trained> {
    let (kind, manifest) = match job {
        Job::Module(m) => ("module", *m),
        Job::Dae(m) => ("dae", *m),
    };
    let cached = match cache {
        Some(dir) => {
            let key = cache_key(kind, manifest)?;
            let model = dir.join(format!("{key}.mnn"));
            let loss = dir.join(format!("{key}.loss.csv"));
            if model.is_file() && loss.is_file() {
                let model_bytes = fsutil::read(&model)?;
                let loss_csv = String::from_utf8(fsutil::read(&loss)?)
                    .map_err(|e| Error::Report(format!("{}: {e}", loss.display())))?;
                return Ok(Trained {
                    network: decode_model(&model_bytes)?,
                    model_bytes,
                    loss_csv,
                });
            }
            Some((model, loss))
        }
        None => None,
    };
    let outcome = match job {
        Job::Module(m) => train_denoiser(m, exec)?,
        Job::Dae(m) => train_autoencoder(m, exec)?,
    };
    let trained = Trained {
        model_bytes: encode_model(&outcome.network),
        loss_csv: loss_curve_csv(&outcome.loss_curve),
        network: outcome.network,
    };
    if let Some((model, loss)) = cached {
        fsutil::write_atomic(&model, &trained.model_bytes)?;
        fsutil::write_atomic(&loss, trained.loss_csv.as_bytes())?;
    }
    Ok(trained)
}

fn check_geometry(manifests: &[&TrainManifest]) -> Result<(usize, usize)> {
    let first = &manifests[0].config;
    for m in manifests {
        if (m.config.frame_size, m.config.hop) != (first.frame_size, first.hop) {
            return Err(Error::InvalidArgument(format!(
                "all networks must share one STFT geometry; found {}/{} and {}/{}",
                first.frame_size, first.hop, m.config.frame_size, m.config.hop
            )));
        }
    }
    Ok((first.frame_size, first.hop))
}

fn check_test_set(test: &DatasetManifest, modules: &[TrainManifest]) -> Result<()> {
    for (i, r) in test.records.iter().enumerate() {
        if r.noise_path.is_none() {
            return Err(Error::Manifest(format!("test record {i} has no noise")));
        }
        if r.label.is_none() {
            return Err(Error::Manifest(format!("test record {i} has no axis label")));
        }
    }
    let test_segments = test.noise_segments()?;
    for m in modules {
        check_disjoint(&m.dataset.noise_segments()?, &test_segments)?;
    }
    Ok(())
}

/// Trains (or loads) every network, evaluates every test utterance and
/// writes `report.csv`, `report.txt`, `selection.jsonl`, `eval.csv` and
/// `models/` under `opts.out`.
pub fn run(plan: &ExperimentPlan, opts: &RunOptions) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let load = |e: &PlanEntry| load_train_manifest(plan.resolve(&e.manifest));
    let modules: Vec<TrainManifest> = plan.modules.iter().map(load).collect::<Result<_>>()?;
    let daes: Vec<TrainManifest> = plan.daes.iter().map(load).collect::<Result<_>>()?;
    let test = load_manifest(plan.resolve(&plan.test))?;
    let all: Vec<&TrainManifest> = modules.iter().chain(&daes).collect();
    let (frame_size, hop) = check_geometry(&all)?;
    check_test_set(&test, &modules)?;

    let models_dir = opts.out.join("models");
    fsutil::create_dir_all(&models_dir)?;
    if let Some(c) = &opts.cache {
        fsutil::create_dir_all(c)?;
    }
    let jobs: Vec<Job> = modules
        .iter()
        .map(Job::Module)
        .chain(daes.iter().map(Job::Dae))
        .collect();
    let trained = opts
        .exec
        .try_map(&jobs, |j| train_job(j, opts.cache.as_deref(), opts.exec))?;
    let labels = plan.modules.iter().chain(&plan.daes).map(|e| &e.label);
    for (label, t) in labels.zip(&trained) {
        fsutil::write_atomic(&models_dir.join(format!("{label}.mnn")), &t.model_bytes)?;
        fsutil::write_atomic(&models_dir.join(format!("{label}.loss.csv")), t.loss_csv.as_bytes())?;
    }
    let module_nets: Vec<Module> = plan
        .modules
        .iter()
        .zip(&trained)
        .map(|(e, t)| Module {
            id: e.label.clone(),
            network: t.network.clone(),
        })
        .collect();
    let dae_nets: Vec<(&str, &Network)> = plan
        .daes
        .iter()
        .zip(&trained[modules.len()..])
        .map(|(e, t)| (e.label.as_str(), &t.network))
        .collect();

    let indexed: Vec<usize> = (0..test.records.len()).collect();
    let utterances = opts.exec.try_map(&indexed, |&i| {
        evaluate_utterance(plan, &test, i, &module_nets, &dae_nets, frame_size, hop, opts.exec)
    })?;

    let module_labels: Vec<String> = plan.modules.iter().map(|e| e.label.clone()).collect();
    let table = build_table(plan, &module_labels, &utterances)?;
    let oracle_disagreements = utterances.iter().filter(|u| u.oracle != u.oracle_stoi).count();

    fsutil::write_atomic(&opts.out.join("report.csv"), table.to_csv()?.as_bytes())?;
    let mut text = format!("Experiment {} ({} axis)\n\n", plan.name, plan.axis.label());
    text.push_str(&table.to_text()?);
    text.push_str(&format!(
        "SDR and STOI oracles disagree on {oracle_disagreements} of {} utterances.\n",
        utterances.len()
    ));
    fsutil::write_atomic(&opts.out.join("report.txt"), text.as_bytes())?;
    fsutil::write_atomic(
        &opts.out.join("selection.jsonl"),
        selection_lines(plan, &module_labels, &utterances)?.as_bytes(),
    )?;
    fsutil::write_atomic(
        &opts.out.join("eval.csv"),
        eval_csv(&module_labels, &utterances)?.as_bytes(),
    )?;

    Ok(ExperimentOutcome {
        table,
        module_labels,
        utterances,
        oracle_disagreements,
    })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[allow(clippy::too_many_arguments)]
fn evaluate_utterance(
    plan: &ExperimentPlan,
    test: &DatasetManifest,
    index: usize,
    modules: &[Module],
    daes: &[(&str, &Network)],
    frame_size: usize,
    hop: usize,
    exec: Exec,
) -> Result<UtteranceResult> {
    let record = &test.records[index];
    let r = realize(test, record)?;
    let x = stft(&r.mixture, frame_size, hop)?;
    let outputs = enhance_all(modules, &x, exec)?;
    let evals = exec.try_map(&outputs, |o| evaluate(&o.waveform, &r.clean))?;
    let mut choices = Vec::new();
    for (name, dae) in daes {
        let scores = score_all(dae, &outputs, &plan.scoring, exec)?;
        for &metric in &plan.selectors {
            choices.push(SelectorChoice {
                dae: name.to_string(),
                metric,
                chosen: choose(&scores, metric)?,
                scores: scores.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(index as u64);
    let chance = (0..plan.chance_draws)
        .map(|_| rng.gen_range(0..modules.len()))
        .collect();
    let mixture = evaluate(&r.mixture, &r.clean)?;
    Ok(UtteranceResult {
        id: record.display_id(index),
        label: record.label.clone().unwrap_or_default(),
        mixture,
        oracle: argmax(evals.iter().map(|e| e.sdr_db)),
        oracle_stoi: argmax(evals.iter().map(|e| e.stoi)),
        modules: evals,
        choices,
        chance,
    })
}

/// Test labels in module order first, then any others sorted.
fn test_labels(modules: &[String], utterances: &[UtteranceResult]) -> Vec<String> {
    let present: BTreeSet<&String> = utterances.iter().map(|u| &u.label).collect();
    let mut out: Vec<String> = modules.iter().filter(|m| present.contains(m)).cloned().collect();
    out.extend(present.into_iter().filter(|l| !modules.contains(l)).cloned());
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn build_table(plan: &ExperimentPlan, modules: &[String], utterances: &[UtteranceResult]) -> Result<ReportTable> {
    let n_sel = utterances.first().map_or(0, |u| u.choices.len());
    let mut columns: Vec<String> = modules.to_vec();
    columns.push("chance".into());
    if let Some(u) = utterances.first() {
        columns.extend(u.choices.iter().map(|c| selector_column(&c.dae, c.metric)));
    }
    columns.push("oracle".into());
    let mut table = ReportTable::new(plan.axis.label(), columns);

    let mut groups: Vec<(String, Vec<&UtteranceResult>)> = test_labels(modules, utterances)
        .into_iter()
        .map(|l| {
            let members = utterances.iter().filter(|u| u.label == l).collect();
            (l, members)
        })
        .collect();
    groups.push(("all".into(), utterances.iter().collect()));

    type Measure = fn(&EvalResult) -> f64;
    let measures: [(&str, Measure); 2] = [("sdr", |e| e.sdr_db), ("stoi", |e| e.stoi)];
    for (name, f) in measures {
        for (label, us) in &groups {
            let mut row: Vec<Option<f64>> = (0..modules.len())
                .map(|j| mean(us.iter().map(|u| f(&u.modules[j]))))
                .collect();
            row.push(mean(us.iter().map(|u| u.chance_mean(f))));
            for s in 0..n_sel {
                row.push(mean(us.iter().map(|u| f(&u.modules[u.choices[s].chosen]))));
            }
            row.push(mean(us.iter().map(|u| f(&u.modules[u.oracle]))));
            table.push(name, label, row)?;
        }
    }
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    for (label, us) in &groups {
        let mut row: Vec<Option<f64>> = (0..modules.len())
            .map(|j| mean(us.iter().map(|u| hit(u.oracle == j))))
            .collect();
        row.push(mean(us.iter().map(|u| {
            u.chance.iter().map(|&c| hit(c == u.oracle)).sum::<f64>() / u.chance.len() as f64
        })));
        for s in 0..n_sel {
            row.push(mean(us.iter().map(|u| hit(u.choices[s].chosen == u.oracle))));
        }
        row.push(mean(us.iter().map(|_| 1.0)));
        table.push("accuracy", label, row)?;
    }
    Ok(table)
}

fn selection_lines(plan: &ExperimentPlan, modules: &[String], utterances: &[UtteranceResult]) -> Result<String> {
    let mut out = String::new();
    for u in utterances {
        for c in &u.choices {
            let report = SelectionReport {
                utterance: u.id.clone(),
                metric: c.metric,
                dae: Some(c.dae.clone()),
                scores: c.scores.clone(),
                chosen: modules[c.chosen].clone(),
                oracle: Some(modules[u.oracle].clone()),
                chance: modules[u.chance[0]].clone(),
                seed: plan.seed,
            };
            out.push_str(&serde_json::to_string(&report)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn eval_csv(modules: &[String], utterances: &[UtteranceResult]) -> Result<String> {
    let err = |e: csv::Error| Error::Report(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "utterance",
        "label",
        "output",
        "sdr_db",
        "stoi",
        "snr_db",
        "sdr_oracle",
        "stoi_oracle",
    ])
    .map_err(err)?;
    for u in utterances {
        let mut row = |name: &str, e: &EvalResult, j: Option<usize>| {
            w.write_record([
                u.id.clone(),
                u.label.clone(),
                name.to_string(),
                e.sdr_db.to_string(),
                e.stoi.to_string(),
                e.snr_db.to_string(),
                (j == Some(u.oracle)).to_string(),
                (j == Some(u.oracle_stoi)).to_string(),
            ])
        };
        row("mixture", &u.mixture, None).map_err(err)?;
        for (j, e) in u.modules.iter().enumerate() {
            row(&modules[j], e, Some(j)).map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}
