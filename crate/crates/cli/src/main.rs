//! `mnn`: corpus synthesis, training, enhancement, selection, evaluation
//! and experiments from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mnn_core::data::corpus::{generate, CorpusSpec};
use mnn_core::experiment::{desk, load_plan, run, RunOptions};
use mnn_core::metrics::evaluate;
use mnn_core::network::{load_model, save_model, Network};
use mnn_core::selector::{enhance_with_module, select, Metric, Module, Scoring, SelectOptions};
use mnn_core::signal::{read_wav, stft, write_wav, WavEncoding};
use mnn_core::training::{load_train_manifest, loss_curve_csv, train_autoencoder, train_denoiser};
use mnn_core::{fsutil, Exec};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (model format 1)");

#[derive(Parser, Debug)]
#[command(name = "mnn", version = VERSION, about = "Modular speech enhancement with autoencoder-based module selection")]
struct Cli {
    /// Seed for corpus synthesis, training and chance draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus plus manifests and experiment plans.
    Synth(SynthArgs),
    /// Train a mask-estimating denoiser from a training manifest.
    TrainModule(TrainArgs),
    /// Train the speech autoencoder from a training manifest.
    TrainDae(TrainArgs),
    /// Enhance one WAV file with one module.
    Enhance(EnhanceArgs),
    /// Run every module and keep the output the autoencoder prefers.
    Select(SelectArgs),
    /// SDR, STOI and SNR of an estimate against a reference.
    Eval(EvalArgs),
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Speakers per speaker group.
    #[arg(long, default_value_t = 6)]
    speakers: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 5)]
    utterances: usize,
    #[arg(long)]
    out: PathBuf,
    /// Length of each noise recording in seconds.
    #[arg(long, default_value_t = 24.0)]
    noise_secs: f64,
    /// Training iterations for denoiser modules in the written plans.
    #[arg(long)]
    iterations: Option<usize>,
    /// Training iterations for autoencoders in the written plans.
    #[arg(long)]
    dae_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-iteration loss as CSV.
    #[arg(long)]
    loss: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// STFT hop; defaults to a quarter of the frame implied by the model.
    #[arg(long)]
    hop: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    modules: Vec<PathBuf>,
    #[arg(long)]
    dae: PathBuf,
    #[arg(long, value_parser = parse_metric, default_value = "ae")]
    metric: Metric,
    #[arg(long, default_value = "enhanced.wav")]
    out: PathBuf,
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    /// Clean reference; adds the oracle choice to the report.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Keep probability the autoencoder was trained with.
    #[arg(long, default_value_t = 0.8)]
    keep: f64,
    /// Average this many seeded dropout masks instead of scaled inference.
    #[arg(long)]
    sampled_dropout: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    /// Train (or load cached) networks and write the report tables.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: mnn_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            // Library errors already spell out their cause.
            let message = match e.downcast_ref::<mnn_core::Error>() {
                Some(err) => err.to_string(),
                None => format!("{e:#}"),
            };
            let msg = serde_json::json!({ "error": kind, "message": message });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

/// Error tag and exit code: 2 bad arguments, 3 input/output problems,
/// 4 numeric failures, 1 anything else.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    use mnn_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(err @ E::InvalidArgument(_)) => (err.kind(), 2),
        Some(err @ E::Numeric(_)) => (err.kind(), 4),
        Some(
            err @ (E::Io { .. }
            | E::Wav(_)
            | E::Audio { .. }
            | E::Json(_)
            | E::ModelFormat(_)
            | E::Manifest(_)
            | E::Report(_)),
        ) => (err.kind(), 3),
        Some(err) => (err.kind(), 1),
        None if e.downcast_ref::<std::io::Error>().is_some() => ("io", 3),
        None => ("usage", 2),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(mnn_core::Error::InvalidArgument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let exec = Exec::auto();
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::TrainModule(a) => train(a, cli.seed, exec, true),
        Command::TrainDae(a) => train(a, cli.seed, exec, false),
        Command::Enhance(a) => enhance(a),
        Command::Select(a) => select_cmd(a, cli.seed.unwrap_or(0), exec),
        Command::Eval(a) => eval(a),
        Command::Experiment(ExperimentCommand::Run { plan, out, cache }) => {
            let mut plan = load_plan(plan)?;
            if let Some(s) = cli.seed {
                plan.seed = s;
            }
            info!("running experiment {}", plan.name);
            let outcome = run(
                &plan,
                &RunOptions {
                    out: out.clone(),
                    cache: cache.clone(),
                    exec,
                },
            )?;
            print!("{}", outcome.table.to_text()?);
            Ok(())
        }
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    if a.noise_secs.is_nan() || a.noise_secs <= 0.0 {
        bail!(mnn_core::Error::InvalidArgument("--noise-secs must be positive".into()));
    }
    let spec = CorpusSpec {
        speakers: a.speakers,
        utterances: a.utterances,
        seed,
        noise_secs: a.noise_secs,
    };
    info!("synthesizing corpus into {}", a.out.display());
    let index = generate(&spec, &a.out)?;
    let defaults = desk::DeskScale::default();
    let scale = desk::DeskScale {
        iterations: a.iterations.unwrap_or(defaults.iterations),
        dae_iterations: a.dae_iterations.unwrap_or(defaults.dae_iterations),
        seed,
        ..defaults
    };
    let plans = desk::write_plans(&a.out, &index, &scale)?;
    for p in [&plans.noise, &plans.speaker_group, &plans.snr] {
        println!("{}", p.display());
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: Option<u64>, exec: Exec, module: bool) -> Result<()> {
    let mut manifest = load_train_manifest(&a.manifest)?;
    if let Some(s) = seed {
        manifest.config.seed = s;
        manifest.config.dropout.seed = s;
    }
    info!(
        "training {} on {} records",
        if module { "module" } else { "autoencoder" },
        manifest.dataset.records.len()
    );
    let outcome = if module {
        train_denoiser(&manifest, exec)?
    } else {
        train_autoencoder(&manifest, exec)?
    };
    save_model(&a.out, &outcome.network)?;
    if let Some(path) = &a.loss {
        fsutil::write_atomic(path, loss_curve_csv(&outcome.loss_curve).as_bytes())?;
    }
    if let Some(last) = outcome.loss_curve.last() {
        info!("final mean loss {last}");
    }
    Ok(())
}

/// Frame size implied by a network's output width (one-sided bins).
fn frame_for(net: &Network) -> usize {
    2 * (net.output_dim() - 1)
}

fn enhance(a: &EnhanceArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let input = read_wav(&a.input)?;
    let frame = frame_for(&net);
    let x = stft(&input, frame, a.hop.unwrap_or(frame / 4))?;
    let (_, out) = enhance_with_module(&net, &x)?;
    write_wav(&a.out, &out, WavEncoding::Float32)?;
    Ok(())
}

fn module_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn select_cmd(a: &SelectArgs, seed: u64, exec: Exec) -> Result<()> {
    let scoring = match a.sampled_dropout {
        Some(n) => Scoring::sampled(a.keep, n, seed),
        None => Scoring::scaled(a.keep),
    };
    let modules = a
        .modules
        .iter()
        .map(|p| {
            Ok(Module {
                id: module_id(p),
                network: load_model(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dae = load_model(&a.dae)?;
    let mixture = read_wav(&a.mixture)?;
    let reference = a.reference.as_ref().map(read_wav).transpose()?;
    let frame = frame_for(&dae);
    let x = stft(&mixture, frame, a.hop.unwrap_or(frame / 4))?;
    let opts = SelectOptions {
        utterance: module_id(&a.mixture),
        metric: a.metric,
        scoring,
        seed,
        reference: reference.as_ref(),
        exec,
    };
    let mut selection = select(&modules, &dae, &x, &opts)?;
    selection.report.dae = Some(module_id(&a.dae));
    write_wav(&a.out, selection.enhanced(), WavEncoding::Float32)?;
    let mut json = serde_json::to_vec_pretty(&selection.report)?;
    json.push(b'\n');
    fsutil::write_atomic(&a.report, &json)?;
    println!("{}", selection.report.chosen);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let est = read_wav(&a.est)?;
    let reference = read_wav(&a.reference)?;
    let r = evaluate(&est, &reference)?;
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}
