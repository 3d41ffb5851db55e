//! Run-time arbitration between denoising modules.
//!
//! Every module enhances the mixture; the speech autoencoder then rebuilds
//! each enhanced magnitude spectrogram. Clean-looking speech survives the
//! autoencoder nearly intact, so the module with the smallest
//! reconstruction error (or the highest reconstruction SNR) wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::exec::Exec;
use crate::metrics::{capped_db, sdr};
use crate::network::{feedforward, Activation, DropoutMode, DropoutSpec, Gates, Network};
use crate::signal::{
    apply_mask, concat_context, istft, magnitude, MagnitudeSpectrogram, MaskMatrix, Spectrogram, Waveform,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Lowest autoencoder reconstruction error.
    Ae,
    /// Highest time-domain SNR between output and its reconstruction.
    Snr,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Ae => "ae",
            Metric::Snr => "snr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Metric::Ae),
            "snr" => Ok(Metric::Snr),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// How the autoencoder's input dropout is treated while scoring.
///
/// Trained networks store weights with the keep rates already folded in,
/// so `scaled` (and `off`) scoring is plain inference. `sampled` scoring
/// draws Bernoulli masks and divides them by the keep rate, which undoes
/// the folding for the units that survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoring {
    /// Keep probabilities the autoencoder was trained with.
    pub dropout: DropoutSpec,
    /// Masks averaged in `sampled` mode.
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_draws() -> usize {
    1
}

impl Scoring {
    /// Deterministic expectation of the dropout corruption.
    pub fn scaled(keep: f64) -> Self {
        Self {
            dropout: DropoutSpec::uniform(keep, DropoutMode::Scaled, 0),
            draws: 1,
        }
    }

    /// Average of `draws` seeded dropout masks.
    pub fn sampled(keep: f64, draws: usize, seed: u64) -> Self {
        Self {
            dropout: DropoutSpec::uniform(keep, DropoutMode::Sampled, seed),
            draws,
        }
    }

    pub fn off() -> Self {
        Self {
            dropout: DropoutSpec::off(),
            draws: 1,
        }
    }

    fn validate(&self, dae: &Network) -> Result<()> {
        self.dropout.validate(dae.layers().len())?;
        if self.dropout.mode == DropoutMode::Sampled && self.draws == 0 {
            return Err(Error::InvalidArgument("sampled scoring needs at least one draw".into()));
        }
        Ok(())
    }
}

impl Default for Scoring {
    fn default() -> Self {
        Self::scaled(0.8)
    }
}

/// Context frames a network expects, given the spectrogram's bin count.
fn context_of(net: &Network, bins: usize, what: &str) -> Result<usize> {
    ensure_shape!(
        net.output_dim() == bins && net.input_dim().is_multiple_of(bins) && !(net.input_dim() / bins).is_multiple_of(2),
        "{what} is {}->{} but spectrogram frames have {bins} bins",
        net.input_dim(),
        net.output_dim()
    );
    Ok(net.input_dim() / bins)
}

/// Masks the mixture with the module's per-frame output.
pub fn enhance_with_module(net: &Network, x: &Spectrogram) -> Result<(Spectrogram, Waveform)> {
    if net.output_activation() != Activation::Logistic {
        return Err(Error::InvalidArgument(
            "denoiser modules must end in a logistic layer".into(),
        ));
    }
    let bins = x.bins();
    let context = context_of(net, bins, "module")?;
    let features = concat_context(&magnitude(x), context)?;
    let mut mask = Vec::with_capacity(x.frames() * bins);
    for t in 0..features.rows() {
        mask.extend(net.predict(features.row(t))?);
    }
    let s = apply_mask(x, &MaskMatrix::new(x.frames(), bins, mask)?)?;
    let w = istft(&s)?;
    Ok((s, w))
}

/// Autoencoder rebuild of `mags`, averaged over the dropout draws, plus
/// the per-frame squared reconstruction error (averaged the same way).
pub fn reconstruct(
    dae: &Network,
    mags: &MagnitudeSpectrogram,
    scoring: &Scoring,
) -> Result<(MagnitudeSpectrogram, f64)> {
    scoring.validate(dae)?;
    let bins = mags.bins();
    let context = context_of(dae, bins, "autoencoder")?;
    let features = concat_context(mags, context)?;
    let draws = if scoring.dropout.mode == DropoutMode::Sampled {
        scoring.draws
    } else {
        1
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scoring.dropout.seed);
    let mut recon = vec![0.0; mags.frames() * bins];
    let mut error = 0.0;
    for t in 0..features.rows() {
        let target = mags.frame(t);
        let out = &mut recon[t * bins..(t + 1) * bins];
        for _ in 0..draws {
            let gates = match scoring.dropout.gates(dae, &mut rng)? {
                Gates::Masks(mut masks) => {
                    for (l, m) in masks.iter_mut().enumerate() {
                        let p = scoring.dropout.keep_for(l);
                        m.iter_mut().for_each(|v| *v /= p);
                    }
                    Gates::Masks(masks)
                }
                _ => Gates::Off,
            };
            let y = feedforward(dae, features.row(t), &gates)?.output;
            for ((o, yi), ti) in out.iter_mut().zip(&y).zip(target) {
                // Magnitudes cannot be negative; the leaky output layer can.
                let yi = yi.max(0.0);
                *o += yi;
                error += (ti - yi) * (ti - yi);
            }
        }
        out.iter_mut().for_each(|o| *o /= draws as f64);
    }
    let frames = mags.frames().max(1) as f64;
    let recon = MagnitudeSpectrogram::from_parts(mags.geometry(), mags.frames(), recon)?;
    Ok((recon, error / (draws as f64 * frames)))
}

/// Mean per-frame squared error between `|ŝ|` and its reconstruction.
pub fn ae_score(dae: &Network, enhanced: &Spectrogram, scoring: &Scoring) -> Result<f64> {
    Ok(reconstruct(dae, &magnitude(enhanced), scoring)?.1)
}

/// `10 log10(Σ ŝ² / Σ (ŝ − ŝ̂)²)` over the common length.
pub fn snr_score(output: &Waveform, recon: &Waveform) -> Result<f64> {
    let n = output.len().min(recon.len());
    if n == 0 {
        return Err(Error::InvalidArgument("empty waveform".into()));
    }
    let (a, b) = (&output.samples()[..n], &recon.samples()[..n]);
    let num: f64 = a.iter().map(|v| v * v).sum();
    let den: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(capped_db(num, den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub module: String,
    pub ae_error: f64,
    pub snr_db: f64,
}

/// One module's enhancement of a mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleOutput {
    pub module: String,
    pub spectrogram: Spectrogram,
    pub waveform: Waveform,
}

/// Both selection metrics for one enhanced output.
pub fn score_output(dae: &Network, output: &ModuleOutput, scoring: &Scoring) -> Result<ModuleScore> {
    let (recon, ae_error) = reconstruct(dae, &magnitude(&output.spectrogram), scoring)?;
    // The reconstruction has no phase of its own; borrow the output's.
    let recon_wave = istft(&output.spectrogram.with_magnitudes(&recon)?)?;
    Ok(ModuleScore {
        module: output.module.clone(),
        ae_error,
        snr_db: snr_score(&output.waveform, &recon_wave)?,
    })
}

/// Index of the winning score; ties go to the lowest index.
pub fn choose(scores: &[ModuleScore], metric: Metric) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no module scores to choose from".into()));
    }
    let key = |s: &ModuleScore| match metric {
        Metric::Ae => s.ae_error,
        Metric::Snr => -s.snr_db,
    };
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if key(s) < key(&scores[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Uniform seeded draw among `n` modules.
pub fn chance_index(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
}

/// Index of the output with the highest SDR against `reference`.
pub fn oracle_select(outputs: &[Waveform], reference: &Waveform) -> Result<usize> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no outputs to choose from".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, w) in outputs.iter().enumerate() {
        let v = sdr(w, reference)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// A denoiser module and the name it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub id: String,
    pub network: Network,
}

/// Runs every module on the mixture, one task per module.
pub fn enhance_all(modules: &[Module], x: &Spectrogram, exec: Exec) -> Result<Vec<ModuleOutput>> {
    if modules.is_empty() {
        return Err(Error::InvalidArgument("no modules".into()));
    }
    exec.try_map(modules, |m| {
        let (spectrogram, waveform) = enhance_with_module(&m.network, x)?;
        Ok(ModuleOutput {
            module: m.id.clone(),
            spectrogram,
            waveform,
        })
    })
}

pub fn score_all(dae: &Network, outputs: &[ModuleOutput], scoring: &Scoring, exec: Exec) -> Result<Vec<ModuleScore>> {
    exec.try_map(outputs, |o| score_output(dae, o, scoring))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub utterance: String,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dae: Option<String>,
    pub scores: Vec<ModuleScore>,
    pub chosen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    pub chance: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub report: SelectionReport,
    pub chosen: usize,
    pub oracle: Option<usize>,
    pub chance: usize,
    pub outputs: Vec<ModuleOutput>,
}

impl Selection {
    pub fn enhanced(&self) -> &Waveform {
        &self.outputs[self.chosen].waveform
    }
}

/// Options for [`select`] beyond the networks and the mixture.
#[derive(Debug, Clone)]
pub struct SelectOptions<'a> {
    pub utterance: String,
    pub metric: Metric,
    pub scoring: Scoring,
    pub seed: u64,
    /// Clean speech, when known, enables the oracle choice.
    pub reference: Option<&'a Waveform>,
    pub exec: Exec,
}

pub fn select(modules: &[Module], dae: &Network, x: &Spectrogram, opts: &SelectOptions) -> Result<Selection> {
    let outputs = enhance_all(modules, x, opts.exec)?;
    let scores = score_all(dae, &outputs, &opts.scoring, opts.exec)?;
    let chosen = choose(&scores, opts.metric)?;
    let chance = chance_index(modules.len(), opts.seed);
    let oracle = match opts.reference {
        Some(r) => {
            let waves: Vec<Waveform> = outputs.iter().map(|o| o.waveform.clone()).collect();
            Some(oracle_select(&waves, r)?)
        }
        None => None,
    };
    let report = SelectionReport {
        utterance: opts.utterance.clone(),
        metric: opts.metric,
        dae: None,
        scores,
        chosen: modules[chosen].id.clone(),
        oracle: oracle.map(|i| modules[i].id.clone()),
        chance: modules[chance].id.clone(),
        seed: opts.seed,
    };
    Ok(Selection {
        report,
        chosen,
        oracle,
        chance,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use crate::signal::stft;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16_000).unwrap()
    }

    /// Logistic module whose output is constant: all weights zero, bias `b`.
    fn constant_module(bins: usize, context: usize, b: f64) -> Network {
        let cols = bins * context + 1;
        let mut w = vec![0.0; bins * cols];
        for r in 0..bins {
            w[r * cols + cols - 1] = b;
        }
        Network::new(vec![Layer::new(bins, cols, w, Activation::Logistic).unwrap()]).unwrap()
    }

    fn identity_dae(bins: usize) -> Network {
        let cols = bins + 1;
        let mut w = vec![0.0; bins * cols];
        for r in 0..bins {
            w[r * cols + r] = 1.0;
        }
        Network::new(vec![Layer::new(bins, cols, w, Activation::Identity).unwrap()]).unwrap()
    }

    #[test]
    fn saturated_module_passes_mixture_through() {
        let w = noise(4000, 1);
        let x = stft(&w, 256, 64).unwrap();
        let (_, out) = enhance_with_module(&constant_module(129, 3, 50.0), &x).unwrap();
        // The first and last frame lack full window overlap; compare the interior.
        let interior = 256..4000 - 256;
        let err = out.samples()[interior.clone()]
            .iter()
            .zip(&w.samples()[interior])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        let (_, silent) = enhance_with_module(&constant_module(129, 1, -800.0), &x).unwrap();
        assert!(silent.samples().iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn module_geometry_is_checked() {
        let x = stft(&noise(4000, 2), 256, 64).unwrap();
        assert!(matches!(
            enhance_with_module(&constant_module(65, 3, 0.0), &x),
            Err(Error::Shape(_))
        ));
        let relu = init_relu(129);
        assert!(matches!(enhance_with_module(&relu, &x), Err(Error::InvalidArgument(_))));
    }

    fn init_relu(bins: usize) -> Network {
        crate::network::init_weights(&[bins, bins], &[Activation::ModifiedRelu], 0).unwrap()
    }

    #[test]
    fn identity_autoencoder_scores_zero() {
        let x = stft(&noise(4000, 3), 256, 64).unwrap();
        let dae = identity_dae(129);
        assert_eq!(ae_score(&dae, &x, &Scoring::off()).unwrap(), 0.0);
        assert_eq!(ae_score(&dae, &x, &Scoring::default()).unwrap(), 0.0);
        let out = ModuleOutput {
            module: "m".into(),
            waveform: istft(&x).unwrap(),
            spectrogram: x,
        };
        let s = score_output(&dae, &out, &Scoring::off()).unwrap();
        assert_eq!(s.snr_db, 100.0);
    }

    #[test]
    fn silent_input_through_zero_bias_dae_scores_zero() {
        let x = stft(&Waveform::zeros(3000, 16_000).unwrap(), 256, 64).unwrap();
        let dae = crate::network::init_weights(&[387, 32, 129], &[Activation::ModifiedRelu; 2], 4).unwrap();
        assert_eq!(ae_score(&dae, &x, &Scoring::default()).unwrap(), 0.0);
        assert_eq!(ae_score(&dae, &x, &Scoring::sampled(0.8, 3, 1)).unwrap(), 0.0);
    }

    #[test]
    fn ae_score_matches_direct_computation() {
        let x = stft(&noise(3000, 5), 256, 64).unwrap();
        let dae = crate::network::init_weights(&[129, 16, 129], &[Activation::ModifiedRelu; 2], 6).unwrap();
        let m = magnitude(&x);
        let mut total = 0.0;
        for t in 0..m.frames() {
            let input = m.frame(t);
            let net = &dae;
            let h: Vec<f64> = (0..16)
                .map(|r| {
                    let w = &net.layers()[0].weights()[r * 130..(r + 1) * 130];
                    let a: f64 = input.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + w[129];
                    Activation::ModifiedRelu.apply(a)
                })
                .collect();
            for r in 0..129 {
                let w = &net.layers()[1].weights()[r * 17..(r + 1) * 17];
                let a: f64 = h.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + w[16];
                let y = Activation::ModifiedRelu.apply(a).max(0.0);
                total += (m.frame(t)[r] - y).powi(2);
            }
        }
        let expect = total / m.frames() as f64;
        let got = ae_score(&dae, &x, &Scoring::default()).unwrap();
        assert!((got - expect).abs() <= 1e-9 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn sampled_scoring_is_seeded() {
        let x = stft(&noise(3000, 7), 256, 64).unwrap();
        let dae = crate::network::init_weights(&[129, 16, 129], &[Activation::ModifiedRelu; 2], 8).unwrap();
        let a = ae_score(&dae, &x, &Scoring::sampled(0.8, 4, 11)).unwrap();
        let b = ae_score(&dae, &x, &Scoring::sampled(0.8, 4, 11)).unwrap();
        let c = ae_score(&dae, &x, &Scoring::sampled(0.8, 4, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(ae_score(&dae, &x, &Scoring::sampled(0.8, 0, 1)).is_err());
    }

    #[test]
    fn snr_score_fixtures() {
        let s = noise(2000, 9);
        assert_eq!(snr_score(&s, &s).unwrap(), 100.0);
        let zero = Waveform::zeros(2000, 16_000).unwrap();
        assert!(snr_score(&s, &zero).unwrap().abs() < 1e-12);
        let off = s.scaled(1.1).unwrap();
        assert!((snr_score(&s, &off).unwrap() - 20.0).abs() < 1e-9);
        // Lengths are trimmed to the shorter signal.
        assert_eq!(snr_score(&s, &s.truncated(1500).unwrap()).unwrap(), 100.0);
    }

    fn scores(values: &[f64]) -> Vec<ModuleScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| ModuleScore {
                module: format!("m{i}"),
                ae_error: v,
                snr_db: -v,
            })
            .collect()
    }

    #[test]
    fn choose_picks_extremum_with_lowest_index_ties() {
        assert_eq!(choose(&scores(&[7.0]), Metric::Ae).unwrap(), 0);
        assert_eq!(choose(&scores(&[2.0, 1.0, 3.0]), Metric::Ae).unwrap(), 1);
        assert_eq!(choose(&scores(&[2.0, 1.0, 3.0]), Metric::Snr).unwrap(), 1);
        assert_eq!(choose(&scores(&[1.0, 1.0, 3.0]), Metric::Ae).unwrap(), 0);
        assert!(choose(&[], Metric::Ae).is_err());
    }

    #[test]
    fn oracle_prefers_exact_reference() {
        let r = noise(3000, 10);
        let noisy = Waveform::new(
            r.samples()
                .iter()
                .zip(noise(3000, 11).samples())
                .map(|(a, b)| a + b)
                .collect(),
            16_000,
        )
        .unwrap();
        assert_eq!(oracle_select(&[r.clone(), noisy.clone()], &r).unwrap(), 0);
        assert_eq!(oracle_select(&[noisy, r.clone()], &r).unwrap(), 1);
        assert!(oracle_select(&[], &r).is_err());
    }

    #[test]
    fn chance_is_roughly_uniform() {
        let mut counts = [0usize; 3];
        for seed in 0..3000 {
            counts[chance_index(3, seed)] += 1;
        }
        assert!(counts.iter().all(|&c| (900..1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn select_reports_consistent_choices() {
        let w = noise(4000, 12);
        let x = stft(&w, 256, 64).unwrap();
        let modules: Vec<Module> = [50.0, 0.0, -3.0]
            .iter()
            .enumerate()
            .map(|(i, &b)| Module {
                id: format!("m{i}"),
                network: constant_module(129, 3, b),
            })
            .collect();
        let dae = identity_dae(129);
        let opts = SelectOptions {
            utterance: "u".into(),
            metric: Metric::Ae,
            scoring: Scoring::off(),
            seed: 3,
            reference: Some(&w),
            exec: Exec::auto(),
        };
        let sel = select(&modules, &dae, &x, &opts).unwrap();
        assert_eq!(sel.outputs.len(), 3);
        assert_eq!(sel.report.scores.len(), 3);
        // The identity autoencoder cannot tell outputs apart.
        assert_eq!(sel.chosen, 0);
        let waves: Vec<Waveform> = sel.outputs.iter().map(|o| o.waveform.clone()).collect();
        assert_eq!(sel.oracle, Some(oracle_select(&waves, &w).unwrap()));
        assert_eq!(sel.report.chosen, "m0");
        assert_eq!(sel.chance, chance_index(3, 3));
        let seq = select(
            &modules,
            &dae,
            &x,
            &SelectOptions {
                exec: Exec::Sequential,
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(seq, sel);
        let json = serde_json::to_string(&sel.report).unwrap();
        let back: SelectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sel.report);
        assert!(select(&[], &dae, &x, &opts).is_err());
    }
}
