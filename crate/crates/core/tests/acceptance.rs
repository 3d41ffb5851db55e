//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any of them fails.
//!
//! The experiment criteria train every network of the noise, speaker-group
//! and SNR experiments on a freshly synthesized corpus, so this target
//! takes several minutes in an optimized build.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mnn_core::data::corpus::{
    generate, synth_noise, synth_utterance, CorpusIndex, CorpusSpec, NoiseKind, SpeakerGroup, SpeakerProfile,
    SpeakerRole, CORPUS_SAMPLE_RATE,
};
use mnn_core::data::mix_at_snr;
use mnn_core::experiment::{desk, load_plan, run, ExperimentOutcome, RunOptions};
use mnn_core::metrics::{sdr, stoi};
use mnn_core::network::{
    backprop, decode_model, encode_model, feedforward, init_weights, load_model, save_model, Activation, DropoutMode,
    DropoutSpec, Gates, Network,
};
use mnn_core::selector::{ae_score, Scoring};
use mnn_core::signal::{istft, read_wav, stft, Waveform};
use mnn_core::training::{load_train_manifest, rprop_step, train_autoencoder, RpropConfig, RpropState};
use mnn_core::{Error, Exec};

const FS: u32 = CORPUS_SAMPLE_RATE;
const CORPUS_SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Suite {
    failed: usize,
    total: usize,
}

impl Suite {
    fn check(&mut self, n: usize, name: &str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            }
        };
        self.total += 1;
        if !v.pass {
            self.failed += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
}

fn random_waveform(rng: &mut ChaCha8Rng) -> Waveform {
    let len = rng.gen_range(FS as usize / 2..=2 * FS as usize);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), FS).unwrap()
}

fn stft_round_trip() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (frame, hop) = (512, 128);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random_waveform(&mut rng);
        let y = istft(&stft(&x, frame, hop).unwrap()).unwrap();
        // The first and last frame overlap fewer than four windows.
        let (lo, hi) = (frame, x.len() - frame);
        let (mut num, mut den) = (0.0, 0.0);
        for i in lo..hi {
            let d = y.samples()[i] - x.samples()[i];
            num += d * d;
            den += x.samples()[i] * x.samples()[i];
        }
        worst = worst.max((num / den).sqrt());
    }
    let took = start.elapsed();
    Verdict::new(
        worst < 1e-6 && took < Duration::from_secs(10),
        format!(
            "worst interior relative error {worst:.2e}, {:.2}s for 100 signals",
            took.as_secs_f64()
        ),
    )
}

/// Independent forward pass and squared-error loss.
fn loss_oracle(net: &Network, x: &[f64], target: &[f64], gates: &Gates) -> f64 {
    let mut u = x.to_vec();
    for (l, layer) in net.layers().iter().enumerate() {
        let cols = layer.cols();
        let gated: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v * match gates {
                    Gates::Off => 1.0,
                    Gates::Scaled(s) => s[l],
                    Gates::Masks(m) => m[l][i],
                }
            })
            .collect();
        u = (0..layer.rows())
            .map(|r| {
                let row = &layer.weights()[r * cols..(r + 1) * cols];
                let a: f64 = row[..cols - 1].iter().zip(&gated).map(|(w, v)| w * v).sum::<f64>() + row[cols - 1];
                match layer.activation() {
                    Activation::Logistic => 1.0 / (1.0 + (-a).exp()),
                    Activation::Identity => a,
                    Activation::ModifiedRelu if a > 0.0 => a,
                    Activation::ModifiedRelu => 0.01 * a,
                }
            })
            .collect();
    }
    u.iter().zip(target).map(|(y, t)| (y - t) * (y - t)).sum()
}

/// Smallest |pre-activation| of any leaky unit; finite differences across
/// the kink are meaningless.
fn min_kink_distance(net: &Network, x: &[f64], gates: &Gates) -> f64 {
    let trace = feedforward(net, x, gates).unwrap();
    net.layers()
        .iter()
        .zip(&trace.pre)
        .filter(|(l, _)| l.activation() == Activation::ModifiedRelu)
        .flat_map(|(_, p)| p.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let acts = [Activation::ModifiedRelu, Activation::Logistic, Activation::Identity];
    let mut seen = [false; 3];
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut nets = 0;
    while nets < 20 {
        let depth = rng.gen_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=10)).collect();
        let activations: Vec<Activation> = (0..depth).map(|_| *acts.choose(&mut rng).unwrap()).collect();
        let net = init_weights(&dims, &activations, rng.gen()).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..dims[depth]).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gates = if nets % 2 == 0 {
            Gates::Off
        } else {
            DropoutSpec::uniform(0.7, DropoutMode::Sampled, 0)
                .gates(&net, &mut rng)
                .unwrap()
        };
        if min_kink_distance(&net, &x, &gates) < 1e-3 {
            continue;
        }
        for a in &activations {
            seen[acts.iter().position(|b| b == a).unwrap()] = true;
        }
        nets += 1;
        let (loss, grads) = backprop(&net, &x, &t, &gates).unwrap();
        assert!((loss - loss_oracle(&net, &x, &t, &gates)).abs() <= 1e-12 * loss.max(1.0));
        let h = 1e-6;
        for l in 0..net.layers().len() {
            for k in 0..net.layers()[l].weights().len() {
                let mut plus = net.clone();
                plus.layers_mut()[l].weights_mut()[k] += h;
                let mut minus = net.clone();
                minus.layers_mut()[l].weights_mut()[k] -= h;
                let numeric = (loss_oracle(&plus, &x, &t, &gates) - loss_oracle(&minus, &x, &t, &gates)) / (2.0 * h);
                let analytic = grads.layer(l)[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let took = start.elapsed();
    Verdict::new(
        worst < 1e-4 && seen.iter().all(|&s| s) && took < Duration::from_secs(30),
        format!("{checked} weights over 20 networks, worst relative error {worst:.2e}"),
    )
}

fn rprop_oracle() -> Verdict {
    let cfg = RpropConfig::default();
    let mut net = Network::new(vec![mnn_core::network::Layer::new(
        1,
        2,
        vec![0.0, 0.0],
        Activation::Identity,
    )
    .unwrap()])
    .unwrap();
    let mut state = RpropState::new(&net, &cfg);
    let mut converged = None;
    let mut bounded = true;
    for i in 0..200 {
        let w = net.layers()[0].weights()[0];
        let g = mnn_core::network::Gradients::from_layers(vec![vec![2.0 * (w - 3.0), 0.0]]);
        rprop_step(&mut state, &g, &mut net, &cfg).unwrap();
        bounded &= state
            .steps()
            .iter()
            .flatten()
            .all(|s| (cfg.step_min..=cfg.step_max).contains(s));
        if converged.is_none() && (net.layers()[0].weights()[0] - 3.0).abs() < 1e-6 {
            converged = Some(i + 1);
        }
    }
    let err = (net.layers()[0].weights()[0] - 3.0).abs();
    let hyper = (cfg.eta_minus, cfg.eta_plus, cfg.step_min, cfg.step_max) == (0.5, 1.5, 1e-7, 1e-1);
    Verdict::new(
        err < 1e-6 && bounded && hyper,
        format!("|w-3| = {err:.1e} after 200 steps, first below 1e-6 at step {converged:?}, steps bounded: {bounded}"),
    )
}

fn mixing_accuracy() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let group = if i % 2 == 0 {
            SpeakerGroup::Low
        } else {
            SpeakerGroup::High
        };
        let profile = SpeakerProfile::random(format!("s{i}"), group, &mut rng);
        let speech = Waveform::new(synth_utterance(&profile, &mut rng, FS), FS).unwrap();
        let kind = *NoiseKind::ALL.choose(&mut rng).unwrap();
        let secs = speech.len() as f64 / FS as f64 + 0.5;
        let noise = Waveform::new(synth_noise(kind, secs, &mut rng, FS), FS).unwrap();
        let target = *[-5.0, 0.0, 5.0].choose(&mut rng).unwrap();
        let (mixture, scaled) = mix_at_snr(&speech, &noise, target).unwrap();
        // The scaled noise is whatever the mixture adds to the speech.
        let residual: f64 = mixture
            .samples()
            .iter()
            .zip(speech.samples())
            .map(|(m, s)| (m - s) * (m - s))
            .sum();
        let achieved = 10.0 * (speech.energy() / residual).log10();
        let reported = 10.0 * (speech.energy() / scaled.energy()).log10();
        worst = worst.max((achieved - target).abs()).max((reported - target).abs());
    }
    Verdict::new(worst < 0.01, format!("worst deviation {worst:.2e} dB over 50 mixtures"))
}

fn metric_sanity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let profile = SpeakerProfile::random("m".into(), SpeakerGroup::Low, &mut rng);
    let mut speech = Vec::new();
    while speech.len() < 2 * FS as usize {
        speech.extend(synth_utterance(&profile, &mut rng, FS));
    }
    let reference = Waveform::new(speech, FS).unwrap();
    let noise = synth_noise(NoiseKind::White, reference.len() as f64 / FS as f64 + 0.1, &mut rng, FS);
    let noise = &noise[..reference.len()];
    let plus = |g: f64| {
        Waveform::new(
            reference.samples().iter().zip(noise).map(|(s, n)| s + g * n).collect(),
            FS,
        )
        .unwrap()
    };
    let est = plus(1.0);
    let base = sdr(&est, &reference).unwrap();
    let drift = [0.5, 2.0, 10.0]
        .iter()
        .map(|&a| (sdr(&est.scaled(a).unwrap(), &reference).unwrap() - base).abs())
        .fold(0.0, f64::max);
    let self_stoi = stoi(&reference, &reference).unwrap();
    let (near, far) = (
        stoi(&plus(0.1), &reference).unwrap(),
        stoi(&plus(1.0), &reference).unwrap(),
    );
    Verdict::new(
        drift <= 1e-9 && self_stoi > 0.99 && near > far,
        format!("sdr drift under scaling {drift:.1e} dB, stoi(ref, ref) {self_stoi:.4}, stoi 0.1n {near:.3} > 1.0n {far:.3}"),
    )
}

fn serialization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let acts = [Activation::ModifiedRelu, Activation::Logistic, Activation::Identity];
    let mut identical = 0;
    let mut rejected = 0;
    for i in 0..10 {
        let depth = rng.gen_range(1..=4);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=40)).collect();
        let activations: Vec<Activation> = (0..depth).map(|_| *acts.choose(&mut rng).unwrap()).collect();
        let net = init_weights(&dims, &activations, rng.gen()).unwrap();
        let path = dir.path().join(format!("n{i}.mnn"));
        save_model(&path, &net).unwrap();
        let back = load_model(&path).unwrap();
        let same = (0..5).all(|_| {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = feedforward(&net, &x, &Gates::Off).unwrap().output;
            let b = feedforward(&back, &x, &Gates::Off).unwrap().output;
            a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        identical += usize::from(same && back == net);

        let mut bytes = encode_model(&net);
        let k = rng.gen_range(bytes.len() / 2..bytes.len() - 4);
        bytes[k] ^= 0x40;
        rejected += usize::from(matches!(decode_model(&bytes), Err(Error::ModelFormat(_))));
    }
    Verdict::new(
        identical == 10 && rejected == 10,
        format!("{identical}/10 bitwise identical after reload, {rejected}/10 corruptions rejected"),
    )
}

struct Desk {
    root: PathBuf,
    index: CorpusIndex,
    plans: desk::DeskPlans,
    cache: PathBuf,
}

fn desk_setup(work: &Path) -> Desk {
    let root = work.join("corpus");
    let index = generate(
        &CorpusSpec {
            speakers: 6,
            utterances: 5,
            seed: CORPUS_SEED,
            noise_secs: 24.0,
        },
        &root,
    )
    .unwrap();
    let scale = desk::DeskScale {
        deep_dae_hidden: Vec::new(),
        ..desk::DeskScale::default()
    };
    let plans = desk::write_plans(&root, &index, &scale).unwrap();
    Desk {
        root,
        index,
        plans,
        cache: work.join("cache"),
    }
}

fn run_in_pool(threads: usize, plan: &Path, out: &Path, cache: Option<&Path>) -> (ExperimentOutcome, Duration) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let plan = load_plan(plan).unwrap();
    let start = Instant::now();
    let outcome = pool
        .install(|| {
            run(
                &plan,
                &RunOptions {
                    out: out.to_path_buf(),
                    cache: cache.map(Path::to_path_buf),
                    exec: Exec::auto(),
                },
            )
        })
        .unwrap();
    (outcome, start.elapsed())
}

fn noise_shape(outcome: &ExperimentOutcome, took: Duration) -> Verdict {
    let t = &outcome.table;
    let mut notes = Vec::new();
    let mut pass = took < Duration::from_secs(30 * 60);
    for row in &outcome.module_labels {
        let diag = t.get("sdr", row, row).unwrap();
        for col in outcome.module_labels.iter().filter(|c| *c != row) {
            let off = t.get("sdr", row, col).unwrap();
            if diag <= off {
                pass = false;
                notes.push(format!("{row}: diagonal {diag:.2} <= {col} {off:.2}"));
            }
        }
        let ae = t.get("sdr", row, "dae-shallow/ae").unwrap();
        let chance = t.get("sdr", row, "chance").unwrap();
        if ae < chance + 1.0 {
            pass = false;
        }
        notes.push(format!("{row}: ae {ae:.2} vs chance {chance:.2}"));
    }
    let acc = t.get("accuracy", "all", "dae-shallow/ae").unwrap();
    pass &= acc >= 0.8;
    notes.push(format!("oracle agreement {:.1}%", 100.0 * acc));
    notes.push(format!("{:.0}s", took.as_secs_f64()));
    Verdict::new(pass, notes.join("; "))
}

fn oracle_dominance(outcomes: &[&ExperimentOutcome]) -> Verdict {
    let mut checked = 0;
    let mut violations = 0;
    for o in outcomes {
        for u in &o.utterances {
            let (top, bottom) = (u.oracle_sdr(), u.min_sdr());
            for c in &u.choices {
                let s = u.sdr(c.chosen);
                checked += 1;
                if !(top >= s && s >= bottom) {
                    violations += 1;
                }
            }
            // The oracle column must be the per-utterance maximum.
            if u.modules.iter().any(|m| m.sdr_db > top) {
                violations += 1;
            }
        }
    }
    Verdict::new(
        violations == 0 && checked > 0,
        format!(
            "{checked} selections over {} experiments, {violations} violations",
            outcomes.len()
        ),
    )
}

fn dae_discrimination(desk: &Desk, experiment_model: &Path) -> Verdict {
    let manifest = load_train_manifest(desk.root.join("manifests/dae-shallow.json")).unwrap();
    let start = Instant::now();
    let dae = train_autoencoder(&manifest, Exec::auto()).unwrap().network;
    let took = start.elapsed();
    let same_as_experiment = encode_model(&dae) == std::fs::read(experiment_model).unwrap();

    let scoring = Scoring::scaled(manifest.config.dropout.keep_for(0));
    let (frame, hop) = (manifest.config.frame_size, manifest.config.hop);
    let mut clean_scores = Vec::new();
    let mut lens = Vec::new();
    for s in desk.index.speakers_with(SpeakerRole::Test) {
        for p in &s.utterances {
            let w = read_wav(desk.root.join(p)).unwrap();
            lens.push(w.len());
            clean_scores.push(ae_score(&dae, &stft(&w, frame, hop).unwrap(), &scoring).unwrap());
        }
    }
    // Noise fixtures: held-out tails of every noise recording, cut to the
    // lengths of the clean fixtures.
    let mut noise_scores = Vec::new();
    for n in &desk.index.noises {
        let w = read_wav(desk.root.join(&n.path)).unwrap();
        let tail = (n.len as f64 * CorpusIndex::TRAIN_NOISE_FRACTION) as usize;
        for (i, &len) in lens.iter().enumerate().step_by(4) {
            let start = tail + (i * 997) % (n.len - tail - len);
            let seg = Waveform::new(w.samples()[start..start + len].to_vec(), FS).unwrap();
            noise_scores.push(ae_score(&dae, &stft(&seg, frame, hop).unwrap(), &scoring).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, n) = (mean(&clean_scores), mean(&noise_scores));
    Verdict::new(
        n >= 2.0 * c && took < Duration::from_secs(5 * 60),
        format!(
            "mean error clean {c:.3} ({} files) vs noise {n:.3} ({} segments), ratio {:.1}; trained in {:.0}s, identical to experiment model: {same_as_experiment}",
            clean_scores.len(),
            noise_scores.len(),
            n / c,
            took.as_secs_f64()
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path, first: &ExperimentOutcome, second: &ExperimentOutcome) -> Verdict {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Verdict::new(false, format!("different file sets: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<_> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .collect();
    let same_numbers = first.utterances.len() == second.utterances.len()
        && first.utterances.iter().zip(&second.utterances).all(|(x, y)| {
            x.modules
                .iter()
                .zip(&y.modules)
                .all(|(p, q)| p.sdr_db.to_bits() == q.sdr_db.to_bits() && p.stoi.to_bits() == q.stoi.to_bits())
                && x.choices
                    .iter()
                    .map(|c| c.chosen)
                    .eq(y.choices.iter().map(|c| c.chosen))
        });
    Verdict::new(
        differing.is_empty() && same_numbers,
        format!(
            "{} files compared between an 8-thread cached run and a 1-thread uncached run, {} differ",
            fa.len(),
            differing.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; listing asks for test names only.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut suite = Suite { failed: 0, total: 0 };
    suite.check(1, "stft round trip", stft_round_trip);
    suite.check(2, "gradient oracle", gradient_oracle);
    suite.check(3, "rprop oracle", rprop_oracle);
    suite.check(4, "mixing accuracy", mixing_accuracy);

    let work = tempfile::tempdir().unwrap();
    let desk = desk_setup(work.path());
    let exp1 = work.path().join("noise-8");
    let (noise8, took) = run_in_pool(8, &desk.plans.noise, &exp1, Some(&desk.cache));
    print!("{}", noise8.table.to_text().unwrap());

    suite.check(5, "autoencoder separates speech from noise", || {
        dae_discrimination(&desk, &exp1.join("models/dae-shallow.mnn"))
    });
    suite.check(6, "noise experiment shape", || noise_shape(&noise8, took));

    let (group, _) = run_in_pool(
        8,
        &desk.plans.speaker_group,
        &work.path().join("group"),
        Some(&desk.cache),
    );
    let (snr, _) = run_in_pool(8, &desk.plans.snr, &work.path().join("snr"), Some(&desk.cache));
    suite.check(7, "oracle dominance", || oracle_dominance(&[&noise8, &group, &snr]));
    suite.check(8, "metric sanity", metric_sanity);

    let exp1_again = work.path().join("noise-1");
    let (noise1, _) = run_in_pool(1, &desk.plans.noise, &exp1_again, None);
    suite.check(9, "determinism", || determinism(&exp1, &exp1_again, &noise8, &noise1));
    suite.check(10, "model serialization", serialization);

    println!("{}/{} criteria passed", suite.total - suite.failed, suite.total);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
